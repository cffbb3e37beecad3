#pragma once

#include "hiersel/conformal.hpp"
#include "hiersel/data_model.hpp"
#include "hiersel/testing.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace hiersel {

// Synthetic hierarchical data: G ~ Unif([-5,5])^p_G, N ~ 2 + Poisson(lambda),
// X | G,N ~ N_p(AG, 3 I_p), Y | X ~ N(beta1'X + log|beta2'G|, sigma^2 |X| / p).
// A, beta1, beta2 are drawn once from param_seed and then held fixed.
struct DgpConfig {
    int p_G = 3;
    int p = 5;
    double lambda = 5.0;
    double sigma = 1.0;
    double cutoff = 4.0;
    std::optional<std::size_t> constant_group_size; // overrides the Poisson sizes
    std::uint64_t param_seed = 1;

    std::vector<std::vector<double>> A; // p x p_G
    std::vector<double> beta1;          // p
    std::vector<double> beta2;          // p_G
};

DgpConfig make_dgp(int p_G, int p, double lambda, double sigma, double cutoff,
                   std::uint64_t param_seed);

HierarchicalDataset generate(const DgpConfig& cfg, std::size_t n_groups, DatasetRole role,
                             std::uint64_t seed);
HierarchicalDataset generate_with_sizes(const DgpConfig& cfg, std::span<const std::size_t> sizes,
                                        DatasetRole role, std::uint64_t seed);
std::vector<std::size_t> draw_group_sizes(const DgpConfig& cfg, std::size_t n_groups,
                                          std::uint64_t seed);

// Group-covariate shift with an exact, closed-form likelihood ratio w.
enum class TiltKind { none, truncation, exponential };

struct ShiftConfig {
    DgpConfig base;
    TiltKind kind = TiltKind::none;
    int coord = 0;      // tilted coordinate of G
    double theta = 0.5; // exponential tilt magnitude
};

struct ShiftedData {
    HierarchicalDataset calibration;
    HierarchicalDataset test;
    std::vector<double> w_cal;
    std::vector<double> w_test;
};

ShiftedData generate_shifted(const ShiftConfig& cfg, std::size_t K, std::size_t M,
                             std::uint64_t seed);
double tilt_weight(const ShiftConfig& cfg, std::span<const double> g);

// ITE data: both potential outcomes per unit, group-level treatment,
// conditioned on exactly K treated / M control groups by redrawing labels.
enum class EffectKind { zero, covariate_sign };

struct IteConfig {
    DgpConfig base;
    double p_A = 0.5;
    EffectKind effect = EffectKind::covariate_sign;
    double tau = 4.0; // Y(1) = Y(0) + tau on units with x_0 > 0
};

struct IteData {
    HierarchicalDataset calibration; // treated groups, y = Y(1)
    HierarchicalDataset test;        // control groups, y = Y(0)
};

IteData generate_ite(const IteConfig& cfg, std::size_t K, std::size_t M, std::uint64_t seed);

// --- Monte Carlo experiment harness ---

enum class Method {
    subsampling_ebh,
    subsampling_uebh,
    subsampling_pbh,
    hierarchical_ebh,
    hierarchical_uebh,
    hier_p1_bh,
    hier_p2_bh,
    derandomized,
    averaged,
    joint_group_global,
    joint_group_general,
    weighted,
    ite_subsampling,
    ite_hierarchical,
};

Method parse_method(const std::string& name);
std::string method_name(Method m);

enum class BoostMode { none, external, internal };

struct ExperimentSpec {
    Method method = Method::subsampling_ebh;
    std::vector<double> alphas = {0.05, 0.075, 0.1, 0.125, 0.15, 0.175, 0.2, 0.225, 0.25};
    double alpha_tilde_factor = 0.9; // alpha_tilde = factor * alpha
    std::size_t K = 100;
    std::size_t M = 20;
    std::size_t K_train = 50;
    std::size_t n_trials = 300;
    std::uint64_t master_seed = 1;
    int threads = 1;

    DgpConfig dgp;
    // covariate shift (method == weighted)
    TiltKind tilt = TiltKind::truncation;
    int tilt_coord = 0;
    double tilt_theta = 0.5;
    // ITE methods
    double p_A = 0.5;
    EffectKind effect = EffectKind::covariate_sign;
    double tau = 4.0;
    double ite_shift = 0.0; // general ITE threshold c via shifted comparison
    // merging / boosting / joint parameters
    int r = 10;
    BoostMode boost = BoostMode::external;
    std::uint64_t derand_budget = 1'000'000;
    double group_cutoff = 2.0;
    double alpha_tilde_group_factor = 0.9;
};

struct ResultRow {
    std::string method;
    double alpha = 0.0;
    double fdr = 0.0, fdr_se = 0.0;
    double power = 0.0, power_se = 0.0;
    std::size_t n_trials = 0;
    bool has_levels = false;
    double fdr_individual = 0.0, fdr_individual_se = 0.0;
    double power_individual = 0.0, power_individual_se = 0.0;
    double fdr_group = 0.0, fdr_group_se = 0.0;
    double power_group = 0.0, power_group_se = 0.0;
};

struct AggregateResult {
    std::vector<ResultRow> rows; // one per alpha
};

AggregateResult run_experiment(const ExperimentSpec& spec);

void write_results_csv(const std::string& path, const std::vector<ResultRow>& rows);

// --- validity oracles (Monte Carlo checks of the e-value/p-value bounds) ---

// Every construction with a validity guarantee, plus a deliberately broken
// variant ("mutant-no-plus-one") that the oracle must flag.
struct ValidityConfig {
    DgpConfig dgp;
    std::size_t K = 20;
    std::size_t M = 3;
    std::size_t n_reps = 10000;
    std::uint64_t seed = 7;
    double alpha = 0.1;              // level for p-value suites
    double alpha_tilde_factor = 0.9; // alpha_tilde = factor * alpha
};

struct ValidityReport {
    std::string method;
    std::size_t n_reps = 0;
    double mean = 0.0;
    double se = 0.0;
    double bound = 0.0; // 1 + 3 se (e-values) or alpha + 3 se (p-values)
    bool pass = false;
};

ValidityReport run_validity(const std::string& method, const ValidityConfig& cfg);
std::vector<std::string> validity_methods();

// Internal-randomness boost variable (reserved first calibration group):
// rank of the group's first outcome score among that group's scores, with a
// seeded tie-break, divided by the group size. Super-uniform under
// within-group exchangeability.
double internal_boost_uniform(const ScoreSet& cal, std::uint64_t seed);

// --- test oracles ---

// Brute force over all candidate value thresholds; maximal valid rejection
// set per the e-BH definition. Small tables only.
RejectionSet oracle_ebh(const EValueTable& table, double alpha);

// Grid scan of sup{t : f(t) <= alpha_tilde}: exact at jump points and at
// +-inf, otherwise brackets the supremum within one grid cell.
double oracle_threshold(const StepFunction& f, double alpha_tilde, std::size_t grid_points = 512);

} // namespace hiersel
