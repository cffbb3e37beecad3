#pragma once

#include "hiersel/data_model.hpp"
#include "hiersel/scoring.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace hiersel {

// One uniformly drawn unit index per calibration group.
struct SubsampleDraw {
    std::vector<std::size_t> indices; // i*_k, 0-based
    std::uint64_t seed = 0;
};

SubsampleDraw draw_subsample(std::span<const std::size_t> group_sizes, std::uint64_t seed);

enum class TableKind { evalue, pvalue };

// Ragged table of e-values or p-values indexed by (test group j, unit i),
// optionally extended with group-level entries. Thresholds are carried for
// serialization and diagnostics; NaN where a construction has none.
struct EValueTable {
    TableKind kind = TableKind::evalue;
    std::vector<std::vector<double>> values;
    std::vector<double> group_values;    // empty unless a joint construction
    std::vector<double> threshold_plus;  // T_j (single-threshold) or T_j^+
    std::vector<double> threshold_minus; // T_j^- for two-threshold constructions
    std::vector<double> group_threshold; // T_j of the group-level construction

    std::size_t n_individual() const;
    std::size_t n_hypotheses() const { return n_individual() + group_values.size(); }
};

// Writes group_id,unit_index,value,kind,threshold_plus,threshold_minus rows;
// group-level rows leave unit_index empty.
void write_table_csv(const std::string& path, const EValueTable& table,
                     const HierarchicalDataset& test);

// Left-continuous piecewise-constant step function: values[i] holds on
// (jumps[i-1], jumps[i]], values.front() on (-inf, jumps.front()],
// values.back() on (jumps.back(), +inf).
struct StepFunction {
    std::vector<double> jumps;  // sorted ascending, unique, finite
    std::vector<double> values; // size jumps.size() + 1

    double operator()(double t) const;
};

// Builds the step representation of fdp_hat by evaluating it once per
// constancy interval of the candidate set (candidates need not be sorted).
StepFunction make_step_function(std::vector<double> candidates,
                                const std::function<double(double)>& fdp_hat);

// Exact sup{t : fdp_hat(t) <= alpha_tilde}: +inf if the unbounded upper
// interval satisfies, -inf if none does, else the right endpoint of the
// last satisfying interval.
double stopping_threshold(const StepFunction& fdp_hat, double alpha_tilde);

// --- individual-level constructions (Section 3) ---

EValueTable subsampling_evalues(const ScoreSet& cal, const ScoreSet& test,
                                const SubsampleDraw& draw, double alpha_tilde);

EValueTable subsampling_pvalues(const ScoreSet& cal, const ScoreSet& test,
                                const SubsampleDraw& draw);

// p-BH threshold rule; selection {(j,i) : Vhat < threshold} is equivalent to
// BH applied to the subsampling conformal p-values.
struct PbhResult {
    double threshold;
    std::vector<std::vector<std::uint8_t>> selected;
};
PbhResult pbh_threshold(const ScoreSet& cal, const ScoreSet& test, const SubsampleDraw& draw,
                        double alpha);

// Exact average over all prod(N_k) subsample draws, each with its own T_j.
EValueTable derandomized_evalues(const ScoreSet& cal, const ScoreSet& test, double alpha_tilde,
                                 std::uint64_t budget = 1'000'000);

// Mean of r independent subsampling tables; draw seeds split from seed.
EValueTable averaged_evalues(const ScoreSet& cal, const ScoreSet& test, double alpha_tilde,
                             int r, std::uint64_t seed);

// Divides every entry (including group entries) by u in (0, 1].
EValueTable boost_evalues(const EValueTable& table, double u);

EValueTable hierarchical_evalues(const ScoreSet& cal, const ScoreSet& test, double alpha_tilde);

enum class HierPVariant { outcome_score, clipped };

// outcome_score uses calibration outcome scores V and requires a monotone
// score (pass the check_monotonicity verdict); clipped uses Vhat + null_ind.
EValueTable hierarchical_pvalues(const ScoreSet& cal, const ScoreSet& test, HierPVariant variant,
                                 bool score_is_monotone = true);

// --- group-level constructions (Section 4.1) ---

// Appends group-global e-values e_j = mean_i e_{j,i} to a subsampling table.
void group_global_evalues(EValueTable& individual);

// Callbacks receive a group and a prefix length r (after any seeded
// permutation in random_r mode) and see only the first r units.
struct GroupScoreSpec {
    std::function<double(const Group&, std::size_t r, double cutoff)> score; // s_g
    std::function<double(const Group&, std::size_t r)> h;      // aggregation of outcomes
    std::function<double(const Group&, std::size_t r)> cutoff; // c~ on the r features
};

enum class PrefixMode { first_r, random_r };

struct GroupEValues {
    std::vector<double> values;
    std::vector<double> thresholds;
};

GroupEValues group_general_evalues(const HierarchicalDataset& cal,
                                   const HierarchicalDataset& test, const GroupScoreSpec& spec,
                                   double alpha_tilde_group,
                                   PrefixMode mode = PrefixMode::first_r,
                                   std::uint64_t seed = 0);

// --- covariate shift (Section 4.2) ---

// w_cal >= 0 and w_test > 0, all finite; p_k^j = w_k / (sum_l w_l + w_{K+j}).
EValueTable weighted_subsampling_evalues(const ScoreSet& cal, const ScoreSet& test,
                                         const SubsampleDraw& draw,
                                         std::span<const double> w_cal,
                                         std::span<const double> w_test, double alpha_tilde);

// --- individual treatment effects (Section 4.3) ---

// Guard for the ITE entry points: calibration all treated, test all control.
void check_ite_roles(const HierarchicalDataset& cal, const HierarchicalDataset& test);

// Both sides use outcome scores: V^1 on treated calibration units, V^0 on
// control test units. score_is_monotone is the check_monotonicity verdict.
EValueTable ite_subsampling_evalues(const ScoreSet& cal_treated, const ScoreSet& test_control,
                                    const SubsampleDraw& draw, double alpha_tilde,
                                    bool score_is_monotone = true);

EValueTable ite_pvalues(const ScoreSet& cal_treated, const ScoreSet& test_control,
                        const SubsampleDraw& draw, bool score_is_monotone = true);

EValueTable ite_hierarchical_evalues(const ScoreSet& cal_treated, const ScoreSet& test_control,
                                     double alpha_tilde, bool score_is_monotone = true);

} // namespace hiersel
