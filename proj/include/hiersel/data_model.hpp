#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

namespace hiersel {

// One observation: features x, optional outcome, optional counterfactual pair
// (carried by the simulator for evaluation only).
struct Unit {
    std::vector<double> x;
    std::optional<double> y;
    std::optional<double> y_treated; // Y(1)
    std::optional<double> y_control; // Y(0)
};

struct Group {
    std::string id;
    std::optional<std::vector<double>> g; // group-specific features, dimension p_G
    std::optional<bool> treated;
    std::optional<double> weight; // per-group likelihood-ratio weight (covariate shift)
    std::vector<Unit> units;      // N_k >= 1; group size is always this length

    std::size_t size() const { return units.size(); }
};

enum class DatasetRole { calibration, test };

struct HierarchicalDataset {
    DatasetRole role = DatasetRole::calibration;
    int p = 0;   // unit feature dimension, > 0
    int p_G = 0; // group feature dimension, >= 0
    std::vector<Group> groups;

    std::size_t n_groups() const { return groups.size(); }
    std::size_t n_units() const;
    std::vector<std::size_t> group_sizes() const;
};

// Hypothesis identifier: unit == -1 denotes the group-level hypothesis H_j.
struct HypothesisId {
    std::size_t group = 0;
    std::ptrdiff_t unit = -1;

    bool is_group_level() const { return unit < 0; }
    friend bool operator==(const HypothesisId&, const HypothesisId&) = default;
};

struct Violation {
    std::size_t group;   // index into groups
    std::ptrdiff_t unit; // -1 for group-level violations
    std::string message;
};

// Empty result iff all type invariants hold. Violations are data, not errors.
std::vector<Violation> validate(const HierarchicalDataset& ds);

// Throws (DimensionError/RoleError) if validate() is nonempty.
void require_valid(const HierarchicalDataset& ds);

// Column mapping for load_csv. Empty feature_cols means auto-detect
// x_0..x_{p-1}; likewise g_0..g_{pG-1}, y, treated, w by their default names.
struct CsvSchema {
    std::string group_id_col = "group_id";
    std::vector<std::string> feature_cols;
    std::vector<std::string> group_feature_cols;
    std::optional<std::string> outcome_col = "y";
    std::optional<std::string> treated_col = "treated";
    std::optional<std::string> weight_col = "w";
    bool auto_detect = true;
};

HierarchicalDataset load_csv(const std::string& path, DatasetRole role,
                             const CsvSchema& schema = {});
void write_csv(const std::string& path, const HierarchicalDataset& ds);

// Group-level split: first n_first groups vs the rest, preserving group
// integrity. Optional seeded shuffle of group order beforehand.
std::pair<HierarchicalDataset, HierarchicalDataset>
split_groups(const HierarchicalDataset& ds, std::size_t n_first,
             std::optional<std::uint64_t> shuffle_seed = std::nullopt);

} // namespace hiersel
