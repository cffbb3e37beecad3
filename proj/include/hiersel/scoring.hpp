#pragma once

#include "hiersel/data_model.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace hiersel {

// g is empty when the dataset has no group features (p_G = 0 or absent g).
using Predictor = std::function<double(std::span<const double> g, std::span<const double> x)>;

// Nonconformity score s(g?, x, v): small value of s(x, c(x)) is evidence
// against Y <= c(x). monotone means s(x,y1) <= s(x,y2) whenever y1 <= y2.
struct ScoreFunction {
    std::function<double(std::span<const double> g, std::span<const double> x, double v)> eval;
    bool monotone = false;
};

struct ThresholdFunction {
    std::function<double(std::span<const double> x)> eval;
};

ThresholdFunction constant_threshold(double c);

// s(g?, x, v) = v - mu(g?, x); always monotone.
ScoreFunction residual_score(Predictor mu);

// s~(g?, x, v) = s(g?, x, c(x)) if v <= c(x), +inf otherwise; monotone.
ScoreFunction clipped_score(ScoreFunction s, ThresholdFunction c);

// Per-unit score arrays, ragged shape mirroring the dataset.
// V[k][i] is NaN and null_ind[k][i] is -1 where the outcome is absent.
struct ScoreSet {
    std::vector<std::vector<double>> C;    // c(x)
    std::vector<std::vector<double>> Vhat; // s(g?, x, C)
    std::vector<std::vector<double>> V;    // s(g?, x, y), outcome units only
    std::vector<std::vector<std::int8_t>> null_ind; // 1{y <= C}, -1 if no outcome

    std::size_t n_groups() const { return Vhat.size(); }
    std::size_t n_units() const;
    std::vector<std::size_t> group_sizes() const;
};

ScoreSet compute_scores(const HierarchicalDataset& ds, const ScoreFunction& s,
                        const ThresholdFunction& c);

// True iff s(x, v1) <= s(x, v2) for every probe x and every pair v1 <= v2.
bool check_monotonicity(const ScoreFunction& s,
                        const std::vector<std::vector<double>>& probe_xs,
                        const std::vector<std::pair<double, double>>& probe_pairs);

// Monotonicity probes drawn from a dataset's own units plus a value grid.
bool check_monotonicity_on(const ScoreFunction& s, const HierarchicalDataset& ds);

// Built-in baseline predictor: closed-form ridge regression on the
// concatenated (g, x) features of every unit with an outcome.
Predictor fit_ridge(const std::vector<const HierarchicalDataset*>& data, double lambda = 1e-3);
Predictor fit_ridge(const HierarchicalDataset& data, double lambda = 1e-3);

// External predictions (group_id, unit_index, mu), aligned to a dataset.
struct PredictionTable {
    std::vector<std::vector<double>> mu; // ragged, mirrors the dataset
};

PredictionTable predictions_from(const HierarchicalDataset& ds, const Predictor& mu);
PredictionTable load_predictions(const std::string& path, const HierarchicalDataset& ds);

// Residual-score ScoreSet from a per-unit mu table (the external-model path):
// Vhat = C - mu, V = y - mu.
ScoreSet residual_scores(const HierarchicalDataset& ds, const PredictionTable& mu,
                         const ThresholdFunction& c);

} // namespace hiersel
