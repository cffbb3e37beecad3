#pragma once

#include "hiersel/conformal.hpp"
#include "hiersel/data_model.hpp"

#include <vector>

namespace hiersel {

struct RejectionSet {
    std::vector<HypothesisId> rejected;
    std::size_t n_hypotheses = 0;
};

void write_rejections_csv(const std::string& path, const RejectionSet& rej,
                          const EValueTable& table, const HierarchicalDataset& test);

// e-BH step-up: l* = max{l : l e_(l) / n >= 1/alpha}; rejects every
// hypothesis with e >= e_(l*), so boundary ties are all rejected.
RejectionSet ebh(const EValueTable& table, double alpha);

// Standard BH step-up on a p-value table.
RejectionSet bh(const EValueTable& table, double alpha);

// e-BH applied to the table boosted by u.
RejectionSet u_ebh(const EValueTable& table, double alpha, double u);

// Null indicators aligned to a table's shape; group_null may be empty when
// the table carries no group-level entries.
struct TruthTable {
    std::vector<std::vector<std::uint8_t>> unit_null;
    std::vector<std::uint8_t> group_null;
};

struct SelectionMetrics {
    double fdp = 0.0;
    double power = 0.0;
    // populated only when the rejection set spans both levels
    double fdp_individual = 0.0;
    double fdp_group = 0.0;
    double power_individual = 0.0;
    double power_group = 0.0;
    bool has_levels = false;
};

SelectionMetrics metrics(const RejectionSet& rej, const TruthTable& truth);

// Flat JSON object; level fields appear only for joint selections.
std::string metrics_json(const SelectionMetrics& m);

} // namespace hiersel
