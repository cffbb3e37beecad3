#include "hiersel/conformal.hpp"
#include "hiersel/common.hpp"
#include "hiersel/csv.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

namespace hiersel {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Count of stored values strictly below / at-or-below t.
class Counter {
public:
    explicit Counter(std::vector<double> values) : values_(std::move(values)) {
        std::sort(values_.begin(), values_.end());
    }
    std::size_t count_below(double t) const {
        return static_cast<std::size_t>(
            std::lower_bound(values_.begin(), values_.end(), t) - values_.begin());
    }
    std::size_t count_at_or_below(double t) const {
        return static_cast<std::size_t>(
            std::upper_bound(values_.begin(), values_.end(), t) - values_.begin());
    }
    std::size_t size() const { return values_.size(); }

private:
    std::vector<double> values_;
};

// Weighted variant with canonically ordered prefix sums, so that any
// permutation of the inputs yields bitwise-identical results.
class WeightedCounter {
public:
    explicit WeightedCounter(std::vector<std::pair<double, double>> items) : items_(std::move(items)) {
        std::sort(items_.begin(), items_.end());
        prefix_.resize(items_.size() + 1, 0.0);
        for (std::size_t i = 0; i < items_.size(); ++i)
            prefix_[i + 1] = prefix_[i] + items_[i].second;
    }
    double sum_below(double t) const {
        auto it = std::lower_bound(items_.begin(), items_.end(), t,
                                   [](const auto& a, double v) { return a.first < v; });
        return prefix_[static_cast<std::size_t>(it - items_.begin())];
    }
    double sum_at_or_below(double t) const {
        auto it = std::upper_bound(items_.begin(), items_.end(), t,
                                   [](double v, const auto& a) { return v < a.first; });
        return prefix_[static_cast<std::size_t>(it - items_.begin())];
    }

private:
    std::vector<std::pair<double, double>> items_;
    std::vector<double> prefix_;
};

void require_alpha(double a, const char* name) {
    if (!(a > 0.0 && a < 1.0))
        throw ConfigError(std::string(name) + " must lie in (0,1), got " + format_double(a));
}

std::vector<double> flatten(const std::vector<std::vector<double>>& vv) {
    std::vector<double> out;
    for (const auto& v : vv) out.insert(out.end(), v.begin(), v.end());
    return out;
}

// Subsampled calibration threshold scores and their null indicators.
struct SubsampledCal {
    std::vector<double> null_scores; // Vhat at null subsampled units
    std::size_t K = 0;
};

SubsampledCal gather_subsample(const ScoreSet& cal, const SubsampleDraw& draw) {
    SubsampledCal out;
    out.K = cal.n_groups();
    if (draw.indices.size() != out.K)
        throw DimensionError("subsample draw covers " + std::to_string(draw.indices.size()) +
                             " groups, calibration has " + std::to_string(out.K));
    for (std::size_t k = 0; k < out.K; ++k) {
        std::size_t idx = draw.indices[k];
        if (idx >= cal.Vhat[k].size())
            throw DimensionError("subsample index out of range in group " + std::to_string(k));
        std::int8_t ni = cal.null_ind[k][idx];
        if (ni < 0)
            throw RoleError("calibration unit without outcome at group " + std::to_string(k) +
                            ", unit " + std::to_string(idx));
        if (ni == 1) out.null_scores.push_back(cal.Vhat[k][idx]);
    }
    return out;
}

void check_table_invariants(const EValueTable& t) {
    for (const auto& grp : t.values)
        for (double v : grp) {
            if (t.kind == TableKind::evalue) {
                if (!(v >= 0.0) || !std::isfinite(v))
                    throw InvariantError("e-value entry is not a nonnegative finite number");
            } else if (!(v > 0.0 && v <= 1.0)) {
                throw InvariantError("p-value entry outside (0,1]");
            }
        }
    for (double v : t.group_values)
        if (!(v >= 0.0) || !std::isfinite(v))
            throw InvariantError("group e-value entry is not a nonnegative finite number");
}

void add_scaled(EValueTable& acc, const EValueTable& t, double w) {
    for (std::size_t j = 0; j < acc.values.size(); ++j)
        for (std::size_t i = 0; i < acc.values[j].size(); ++i)
            acc.values[j][i] += w * t.values[j][i];
}

} // namespace

std::size_t EValueTable::n_individual() const {
    std::size_t n = 0;
    for (const auto& grp : values) n += grp.size();
    return n;
}

SubsampleDraw draw_subsample(std::span<const std::size_t> group_sizes, std::uint64_t seed) {
    if (group_sizes.empty()) throw ConfigError("draw_subsample requires K >= 1 groups");
    SubsampleDraw out;
    out.seed = seed;
    out.indices.reserve(group_sizes.size());
    std::mt19937_64 rng(mix64(seed));
    for (std::size_t n : group_sizes) {
        if (n == 0) throw DimensionError("empty calibration group");
        out.indices.push_back(std::uniform_int_distribution<std::size_t>(0, n - 1)(rng));
    }
    return out;
}

double StepFunction::operator()(double t) const {
    auto it = std::lower_bound(jumps.begin(), jumps.end(), t);
    return values[static_cast<std::size_t>(it - jumps.begin())];
}

StepFunction make_step_function(std::vector<double> candidates,
                                const std::function<double(double)>& fdp_hat) {
    candidates.erase(std::remove_if(candidates.begin(), candidates.end(),
                                    [](double v) { return !std::isfinite(v); }),
                     candidates.end());
    std::sort(candidates.begin(), candidates.end());
    candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());

    StepFunction f;
    f.jumps = std::move(candidates);
    f.values.reserve(f.jumps.size() + 1);
    for (double j : f.jumps) f.values.push_back(fdp_hat(j));
    double beyond = f.jumps.empty() ? 0.0 : std::nextafter(f.jumps.back(), kInf);
    f.values.push_back(fdp_hat(beyond));
    return f;
}

double stopping_threshold(const StepFunction& fdp_hat, double alpha_tilde) {
    require_alpha(alpha_tilde, "alpha_tilde");
    if (fdp_hat.values.size() != fdp_hat.jumps.size() + 1)
        throw InvariantError("step function has inconsistent sizes");
    if (fdp_hat.values.back() <= alpha_tilde) return kInf;
    for (std::size_t i = fdp_hat.jumps.size(); i-- > 0;)
        if (fdp_hat.values[i] <= alpha_tilde) return fdp_hat.jumps[i];
    return -kInf;
}

EValueTable subsampling_evalues(const ScoreSet& cal, const ScoreSet& test,
                                const SubsampleDraw& draw, double alpha_tilde) {
    require_alpha(alpha_tilde, "alpha_tilde");
    const std::size_t M = test.n_groups();
    if (M == 0) throw SchemaError("empty test set");
    SubsampledCal sub = gather_subsample(cal, draw);
    const double K1 = static_cast<double>(sub.K) + 1.0;

    Counter null_cal(sub.null_scores);
    std::vector<Counter> test_group;
    test_group.reserve(M);
    for (const auto& v : test.Vhat) test_group.emplace_back(v);
    Counter test_all(flatten(test.Vhat));
    const double total_test = static_cast<double>(test.n_units());
    const double mult = total_test / K1;

    std::vector<double> candidates = sub.null_scores;
    for (const auto& v : test.Vhat) candidates.insert(candidates.end(), v.begin(), v.end());

    EValueTable out;
    out.kind = TableKind::evalue;
    out.values.resize(M);
    out.threshold_plus.resize(M);
    for (std::size_t j = 0; j < M; ++j) {
        auto fdp = [&](double t) {
            double num = static_cast<double>(null_cal.count_below(t)) + 1.0;
            std::size_t den_raw = test_all.count_below(t) - test_group[j].count_below(t);
            double den = static_cast<double>(std::max<std::size_t>(den_raw, 1));
            return num / den * mult;
        };
        double T = stopping_threshold(make_step_function(candidates, fdp), alpha_tilde);
        out.threshold_plus[j] = T;
        double denom = static_cast<double>(null_cal.count_below(T)) + 1.0;
        out.values[j].reserve(test.Vhat[j].size());
        for (double v : test.Vhat[j])
            out.values[j].push_back(v < T ? K1 / denom : 0.0);
    }
    check_table_invariants(out);
    return out;
}

EValueTable subsampling_pvalues(const ScoreSet& cal, const ScoreSet& test,
                                const SubsampleDraw& draw) {
    const std::size_t M = test.n_groups();
    if (M == 0) throw SchemaError("empty test set");
    SubsampledCal sub = gather_subsample(cal, draw);
    const double K1 = static_cast<double>(sub.K) + 1.0;
    Counter null_cal(sub.null_scores);

    EValueTable out;
    out.kind = TableKind::pvalue;
    out.values.resize(M);
    for (std::size_t j = 0; j < M; ++j) {
        out.values[j].reserve(test.Vhat[j].size());
        for (double v : test.Vhat[j])
            out.values[j].push_back(
                (static_cast<double>(null_cal.count_at_or_below(v)) + 1.0) / K1);
    }
    check_table_invariants(out);
    return out;
}

PbhResult pbh_threshold(const ScoreSet& cal, const ScoreSet& test, const SubsampleDraw& draw,
                        double alpha) {
    require_alpha(alpha, "alpha");
    const std::size_t M = test.n_groups();
    if (M == 0) throw SchemaError("empty test set");
    SubsampledCal sub = gather_subsample(cal, draw);
    const double K1 = static_cast<double>(sub.K) + 1.0;

    Counter null_cal(sub.null_scores);
    Counter test_all(flatten(test.Vhat));
    const double mult = static_cast<double>(test.n_units()) / K1;

    std::vector<double> candidates = sub.null_scores;
    for (const auto& v : test.Vhat) candidates.insert(candidates.end(), v.begin(), v.end());

    auto fdp = [&](double t) {
        double num = static_cast<double>(null_cal.count_below(t)) + 1.0;
        double den = static_cast<double>(std::max<std::size_t>(test_all.count_below(t), 1));
        return num / den * mult;
    };
    PbhResult out;
    out.threshold = stopping_threshold(make_step_function(candidates, fdp), alpha);
    out.selected.resize(M);
    for (std::size_t j = 0; j < M; ++j) {
        out.selected[j].reserve(test.Vhat[j].size());
        for (double v : test.Vhat[j]) out.selected[j].push_back(v < out.threshold ? 1 : 0);
    }
    return out;
}

EValueTable derandomized_evalues(const ScoreSet& cal, const ScoreSet& test, double alpha_tilde,
                                 std::uint64_t budget) {
    const std::size_t K = cal.n_groups();
    if (K == 0) throw SchemaError("empty calibration set");
    std::uint64_t product = 1;
    for (std::size_t k = 0; k < K; ++k) {
        std::size_t n = cal.Vhat[k].size();
        if (n == 0) throw DimensionError("empty calibration group");
        if (product > budget / n) // overflow-safe product bound
            throw ConfigError("derandomized enumeration of " + std::to_string(K) +
                              " groups exceeds the budget of " + std::to_string(budget) +
                              " draws; use averaged_evalues instead");
        product *= n;
    }

    SubsampleDraw draw;
    draw.indices.assign(K, 0);
    EValueTable acc = subsampling_evalues(cal, test, draw, alpha_tilde);
    for (auto& grp : acc.values) std::fill(grp.begin(), grp.end(), 0.0);
    acc.threshold_plus.clear();

    const double w = 1.0 / static_cast<double>(product);
    while (true) {
        add_scaled(acc, subsampling_evalues(cal, test, draw, alpha_tilde), w);
        // odometer over [N_1] x ... x [N_K]
        std::size_t k = 0;
        for (; k < K; ++k) {
            if (++draw.indices[k] < cal.Vhat[k].size()) break;
            draw.indices[k] = 0;
        }
        if (k == K) break;
    }
    check_table_invariants(acc);
    return acc;
}

EValueTable averaged_evalues(const ScoreSet& cal, const ScoreSet& test, double alpha_tilde,
                             int r, std::uint64_t seed) {
    if (r < 1) throw ConfigError("averaged_evalues requires r >= 1 draws");
    auto sizes = cal.group_sizes();
    EValueTable acc;
    const double w = 1.0 / static_cast<double>(r);
    for (int l = 0; l < r; ++l) {
        SubsampleDraw draw =
            draw_subsample(sizes, derive_seed(seed, static_cast<std::uint64_t>(l)));
        EValueTable t = subsampling_evalues(cal, test, draw, alpha_tilde);
        if (l == 0) {
            acc = t;
            for (auto& grp : acc.values) std::fill(grp.begin(), grp.end(), 0.0);
            acc.threshold_plus.clear();
        }
        add_scaled(acc, t, w);
    }
    check_table_invariants(acc);
    return acc;
}

EValueTable boost_evalues(const EValueTable& table, double u) {
    if (!(u > 0.0 && u <= 1.0))
        throw ConfigError("boost variable u must lie in (0,1], got " + format_double(u));
    EValueTable out = table;
    for (auto& grp : out.values)
        for (double& v : grp) v /= u;
    for (double& v : out.group_values) v /= u;
    check_table_invariants(out);
    return out;
}

EValueTable hierarchical_evalues(const ScoreSet& cal, const ScoreSet& test, double alpha_tilde) {
    require_alpha(alpha_tilde, "alpha_tilde");
    const std::size_t K = cal.n_groups();
    const std::size_t M = test.n_groups();
    if (K == 0) throw SchemaError("empty calibration set");
    if (M == 0) throw SchemaError("empty test set");
    const double K1 = static_cast<double>(K) + 1.0;

    std::vector<std::pair<double, double>> null_items;
    std::vector<double> candidates;
    for (std::size_t k = 0; k < K; ++k) {
        const double wk = 1.0 / static_cast<double>(cal.Vhat[k].size());
        for (std::size_t i = 0; i < cal.Vhat[k].size(); ++i) {
            if (cal.null_ind[k][i] < 0)
                throw RoleError("hierarchical e-values need outcomes on every calibration unit");
            if (cal.null_ind[k][i] == 1) null_items.emplace_back(cal.Vhat[k][i], wk);
            candidates.push_back(cal.Vhat[k][i]);
        }
    }
    WeightedCounter wnull(std::move(null_items));
    std::vector<Counter> test_group;
    test_group.reserve(M);
    for (const auto& v : test.Vhat) test_group.emplace_back(v);
    Counter test_all(flatten(test.Vhat));
    const double total_test = static_cast<double>(test.n_units());
    for (const auto& v : test.Vhat) candidates.insert(candidates.end(), v.begin(), v.end());

    EValueTable out;
    out.kind = TableKind::evalue;
    out.values.resize(M);
    out.threshold_plus.resize(M);
    out.threshold_minus.resize(M);
    for (std::size_t j = 0; j < M; ++j) {
        const double mult =
            (total_test - static_cast<double>(test.Vhat[j].size())) / K1;
        auto fdp_plus = [&](double t) {
            double num = wnull.sum_below(t) + 1.0;
            std::size_t den_raw = test_all.count_below(t) - test_group[j].count_below(t);
            return num / static_cast<double>(std::max<std::size_t>(den_raw, 1)) * mult;
        };
        auto fdp_minus = [&](double t) {
            double num = wnull.sum_below(t);
            std::size_t den_raw = test_all.count_below(t) - test_group[j].count_below(t);
            return num / static_cast<double>(std::max<std::size_t>(den_raw, 1)) * mult;
        };
        double Tp = stopping_threshold(make_step_function(candidates, fdp_plus), alpha_tilde);
        double Tm = stopping_threshold(make_step_function(candidates, fdp_minus), alpha_tilde);
        if (Tp > Tm)
            throw InvariantError("hierarchical thresholds violate T+ <= T-");
        out.threshold_plus[j] = Tp;
        out.threshold_minus[j] = Tm;
        double denom = wnull.sum_below(Tm) + 1.0;
        out.values[j].reserve(test.Vhat[j].size());
        for (double v : test.Vhat[j])
            out.values[j].push_back(v < Tp ? K1 / denom : 0.0);
    }
    check_table_invariants(out);
    return out;
}

EValueTable hierarchical_pvalues(const ScoreSet& cal, const ScoreSet& test, HierPVariant variant,
                                 bool score_is_monotone) {
    const std::size_t K = cal.n_groups();
    const std::size_t M = test.n_groups();
    if (K == 0) throw SchemaError("empty calibration set");
    if (M == 0) throw SchemaError("empty test set");
    if (variant == HierPVariant::outcome_score && !score_is_monotone)
        throw GuardError("hierarchical p-values on outcome scores require a monotone score");
    const double K1 = static_cast<double>(K) + 1.0;

    std::vector<std::pair<double, double>> items;
    for (std::size_t k = 0; k < K; ++k) {
        const double wk = 1.0 / static_cast<double>(cal.Vhat[k].size());
        for (std::size_t i = 0; i < cal.Vhat[k].size(); ++i) {
            if (cal.null_ind[k][i] < 0)
                throw RoleError("hierarchical p-values need outcomes on every calibration unit");
            if (variant == HierPVariant::outcome_score)
                items.emplace_back(cal.V[k][i], wk);
            else if (cal.null_ind[k][i] == 1)
                items.emplace_back(cal.Vhat[k][i], wk);
        }
    }
    WeightedCounter w(std::move(items));

    EValueTable out;
    out.kind = TableKind::pvalue;
    out.values.resize(M);
    for (std::size_t j = 0; j < M; ++j) {
        out.values[j].reserve(test.Vhat[j].size());
        for (double v : test.Vhat[j])
            // the weighted sum is <= K algebraically; clamp away the
            // last-ulp excess from accumulating 1/N_k terms
            out.values[j].push_back(std::min(1.0, (w.sum_at_or_below(v) + 1.0) / K1));
    }
    check_table_invariants(out);
    return out;
}

void group_global_evalues(EValueTable& individual) {
    if (individual.kind != TableKind::evalue)
        throw ConfigError("group-global e-values require an e-value table");
    individual.group_values.clear();
    individual.group_values.reserve(individual.values.size());
    for (const auto& grp : individual.values) {
        double s = 0.0;
        for (double v : grp) s += v;
        individual.group_values.push_back(grp.empty() ? 0.0 : s / static_cast<double>(grp.size()));
    }
}

GroupEValues group_general_evalues(const HierarchicalDataset& cal,
                                   const HierarchicalDataset& test, const GroupScoreSpec& spec,
                                   double alpha_tilde_group, PrefixMode mode, std::uint64_t seed) {
    require_alpha(alpha_tilde_group, "alpha_tilde_group");
    const std::size_t K = cal.n_groups();
    const std::size_t M = test.n_groups();
    if (M == 0) throw SchemaError("empty test set");

    // random_r draws one seeded permutation per calibration group; "first r"
    // of the permuted group is then a uniformly random r-subset for every r.
    std::vector<Group> calg = cal.groups;
    if (mode == PrefixMode::random_r) {
        for (std::size_t k = 0; k < K; ++k) {
            std::mt19937_64 rng(derive_seed(seed, k));
            std::shuffle(calg[k].units.begin(), calg[k].units.end(), rng);
        }
    }

    std::vector<double> test_scores(M);
    for (std::size_t j = 0; j < M; ++j) {
        const Group& grp = test.groups[j];
        test_scores[j] = spec.score(grp, grp.size(), spec.cutoff(grp, grp.size()));
    }
    Counter test_counter(test_scores);
    const double Md = static_cast<double>(M);

    GroupEValues out;
    out.values.resize(M);
    out.thresholds.resize(M);
    for (std::size_t j = 0; j < M; ++j) {
        const std::size_t r = test.groups[j].size();
        std::vector<double> null_prefix_scores;
        std::size_t n_comparable = 0;
        for (std::size_t k = 0; k < K; ++k) {
            if (calg[k].size() < r) continue;
            ++n_comparable;
            double cutoff = spec.cutoff(calg[k], r);
            double v = spec.score(calg[k], r, cutoff);
            if (spec.h(calg[k], r) <= cutoff) null_prefix_scores.push_back(v);
        }
        Counter null_cal(null_prefix_scores);
        const double norm = static_cast<double>(n_comparable) + 1.0;

        std::vector<double> candidates = null_prefix_scores;
        candidates.insert(candidates.end(), test_scores.begin(), test_scores.end());
        auto fdp = [&](double t) {
            double num = static_cast<double>(null_cal.count_below(t)) + 1.0;
            double den =
                static_cast<double>(std::max<std::size_t>(test_counter.count_below(t), 1));
            return num / den * (Md / norm);
        };
        double T = stopping_threshold(make_step_function(candidates, fdp), alpha_tilde_group);
        out.thresholds[j] = T;
        double denom = static_cast<double>(null_cal.count_below(T)) + 1.0;
        out.values[j] = test_scores[j] < T ? norm / denom : 0.0;
    }
    return out;
}

EValueTable weighted_subsampling_evalues(const ScoreSet& cal, const ScoreSet& test,
                                         const SubsampleDraw& draw,
                                         std::span<const double> w_cal,
                                         std::span<const double> w_test, double alpha_tilde) {
    require_alpha(alpha_tilde, "alpha_tilde");
    const std::size_t M = test.n_groups();
    if (M == 0) throw SchemaError("empty test set");
    const std::size_t K = cal.n_groups();
    if (w_cal.size() != K || w_test.size() != M)
        throw GuardError("weighted e-values need one weight per calibration and test group");
    for (double w : w_cal)
        if (!(w >= 0.0) || !std::isfinite(w))
            throw GuardError("calibration weights must be nonnegative and finite");
    for (double w : w_test)
        if (!(w > 0.0) || !std::isfinite(w))
            throw GuardError("test-group weights must be positive and finite");

    if (draw.indices.size() != K)
        throw DimensionError("subsample draw does not match calibration groups");
    double w_sum = 0.0;
    std::vector<std::pair<double, double>> null_items;
    std::vector<double> candidates;
    for (std::size_t k = 0; k < K; ++k) {
        w_sum += w_cal[k];
        std::size_t idx = draw.indices[k];
        if (idx >= cal.Vhat[k].size())
            throw DimensionError("subsample index out of range in group " + std::to_string(k));
        std::int8_t ni = cal.null_ind[k][idx];
        if (ni < 0) throw RoleError("calibration unit without outcome");
        if (ni == 1) {
            null_items.emplace_back(cal.Vhat[k][idx], w_cal[k]);
            candidates.push_back(cal.Vhat[k][idx]);
        }
    }
    WeightedCounter wnull(std::move(null_items));
    std::vector<Counter> test_group;
    test_group.reserve(M);
    for (const auto& v : test.Vhat) test_group.emplace_back(v);
    Counter test_all(flatten(test.Vhat));
    const double total_test = static_cast<double>(test.n_units());
    for (const auto& v : test.Vhat) candidates.insert(candidates.end(), v.begin(), v.end());

    EValueTable out;
    out.kind = TableKind::evalue;
    out.values.resize(M);
    out.threshold_plus.resize(M);
    for (std::size_t j = 0; j < M; ++j) {
        // All normalizations by W are kept as a single division so that
        // w == const reduces bitwise-exactly to the unweighted construction.
        const double W = w_sum + w_test[j];
        const double mult = total_test / W;
        auto fdp = [&](double t) {
            double num = wnull.sum_below(t) + w_test[j];
            std::size_t den_raw = test_all.count_below(t) - test_group[j].count_below(t);
            return num / static_cast<double>(std::max<std::size_t>(den_raw, 1)) * mult;
        };
        double T = stopping_threshold(make_step_function(candidates, fdp), alpha_tilde);
        out.threshold_plus[j] = T;
        double denom = wnull.sum_below(T) + w_test[j];
        out.values[j].reserve(test.Vhat[j].size());
        for (double v : test.Vhat[j])
            out.values[j].push_back(v < T ? W / denom : 0.0);
    }
    check_table_invariants(out);
    return out;
}

void check_ite_roles(const HierarchicalDataset& cal, const HierarchicalDataset& test) {
    for (const auto& grp : cal.groups)
        if (!grp.treated || !*grp.treated)
            throw GuardError("ITE calibration groups must all be treated (group '" + grp.id +
                             "' is not)");
    for (const auto& grp : test.groups)
        if (!grp.treated || *grp.treated)
            throw GuardError("ITE test groups must all be control (group '" + grp.id +
                             "' is not)");
}

namespace {

// Outcome scores must exist on both sides of the ITE constructions.
std::vector<double> gather_ite_cal(const ScoreSet& cal, const SubsampleDraw& draw) {
    const std::size_t K = cal.n_groups();
    if (draw.indices.size() != K)
        throw DimensionError("subsample draw does not match calibration groups");
    std::vector<double> v1;
    v1.reserve(K);
    for (std::size_t k = 0; k < K; ++k) {
        std::size_t idx = draw.indices[k];
        if (idx >= cal.V[k].size())
            throw DimensionError("subsample index out of range in group " + std::to_string(k));
        if (std::isnan(cal.V[k][idx]))
            throw RoleError("treated calibration unit without outcome score");
        v1.push_back(cal.V[k][idx]);
    }
    return v1;
}

void require_test_outcome_scores(const ScoreSet& test) {
    for (const auto& grp : test.V)
        for (double v : grp)
            if (std::isnan(v))
                throw RoleError("control test unit without outcome score");
}

} // namespace

EValueTable ite_subsampling_evalues(const ScoreSet& cal_treated, const ScoreSet& test_control,
                                    const SubsampleDraw& draw, double alpha_tilde,
                                    bool score_is_monotone) {
    require_alpha(alpha_tilde, "alpha_tilde");
    if (!score_is_monotone)
        throw GuardError("ITE e-values require a monotone score");
    const std::size_t M = test_control.n_groups();
    if (M == 0) throw SchemaError("empty test set");
    require_test_outcome_scores(test_control);
    std::vector<double> v1 = gather_ite_cal(cal_treated, draw);
    const double K1 = static_cast<double>(v1.size()) + 1.0;

    Counter cal_counter(v1);
    std::vector<Counter> test_group;
    test_group.reserve(M);
    for (const auto& v : test_control.V) test_group.emplace_back(v);
    Counter test_all(flatten(test_control.V));
    const double mult = static_cast<double>(test_control.n_units()) / K1;

    std::vector<double> candidates = v1;
    for (const auto& v : test_control.V) candidates.insert(candidates.end(), v.begin(), v.end());

    EValueTable out;
    out.kind = TableKind::evalue;
    out.values.resize(M);
    out.threshold_plus.resize(M);
    for (std::size_t j = 0; j < M; ++j) {
        auto fdp = [&](double t) {
            double num = static_cast<double>(cal_counter.count_below(t)) + 1.0;
            std::size_t den_raw = test_all.count_below(t) - test_group[j].count_below(t);
            return num / static_cast<double>(std::max<std::size_t>(den_raw, 1)) * mult;
        };
        double T = stopping_threshold(make_step_function(candidates, fdp), alpha_tilde);
        out.threshold_plus[j] = T;
        double denom = static_cast<double>(cal_counter.count_below(T)) + 1.0;
        out.values[j].reserve(test_control.V[j].size());
        for (double v : test_control.V[j])
            out.values[j].push_back(v < T ? K1 / denom : 0.0);
    }
    check_table_invariants(out);
    return out;
}

EValueTable ite_pvalues(const ScoreSet& cal_treated, const ScoreSet& test_control,
                        const SubsampleDraw& draw, bool score_is_monotone) {
    if (!score_is_monotone)
        throw GuardError("ITE p-values require a monotone score");
    const std::size_t M = test_control.n_groups();
    if (M == 0) throw SchemaError("empty test set");
    require_test_outcome_scores(test_control);
    std::vector<double> v1 = gather_ite_cal(cal_treated, draw);
    const double K1 = static_cast<double>(v1.size()) + 1.0;
    Counter cal_counter(v1);

    EValueTable out;
    out.kind = TableKind::pvalue;
    out.values.resize(M);
    for (std::size_t j = 0; j < M; ++j) {
        out.values[j].reserve(test_control.V[j].size());
        for (double v : test_control.V[j])
            out.values[j].push_back(
                (static_cast<double>(cal_counter.count_below(v)) + 1.0) / K1);
    }
    check_table_invariants(out);
    return out;
}

EValueTable ite_hierarchical_evalues(const ScoreSet& cal_treated, const ScoreSet& test_control,
                                     double alpha_tilde, bool score_is_monotone) {
    require_alpha(alpha_tilde, "alpha_tilde");
    if (!score_is_monotone)
        throw GuardError("ITE e-values require a monotone score");
    const std::size_t K = cal_treated.n_groups();
    const std::size_t M = test_control.n_groups();
    if (K == 0) throw SchemaError("empty calibration set");
    if (M == 0) throw SchemaError("empty test set");
    require_test_outcome_scores(test_control);
    const double K1 = static_cast<double>(K) + 1.0;

    std::vector<std::pair<double, double>> items;
    std::vector<double> candidates;
    for (std::size_t k = 0; k < K; ++k) {
        const double wk = 1.0 / static_cast<double>(cal_treated.V[k].size());
        for (double v : cal_treated.V[k]) {
            if (std::isnan(v))
                throw RoleError("treated calibration unit without outcome score");
            items.emplace_back(v, wk);
            candidates.push_back(v);
        }
    }
    WeightedCounter wcal(std::move(items));
    std::vector<Counter> test_group;
    test_group.reserve(M);
    for (const auto& v : test_control.V) test_group.emplace_back(v);
    Counter test_all(flatten(test_control.V));
    const double total_test = static_cast<double>(test_control.n_units());
    for (const auto& v : test_control.V) candidates.insert(candidates.end(), v.begin(), v.end());

    EValueTable out;
    out.kind = TableKind::evalue;
    out.values.resize(M);
    out.threshold_plus.resize(M);
    out.threshold_minus.resize(M);
    for (std::size_t j = 0; j < M; ++j) {
        const double mult =
            (total_test - static_cast<double>(test_control.V[j].size())) / K1;
        auto fdp_plus = [&](double t) {
            std::size_t den_raw = test_all.count_below(t) - test_group[j].count_below(t);
            return (wcal.sum_below(t) + 1.0) /
                   static_cast<double>(std::max<std::size_t>(den_raw, 1)) * mult;
        };
        auto fdp_minus = [&](double t) {
            std::size_t den_raw = test_all.count_below(t) - test_group[j].count_below(t);
            return wcal.sum_below(t) /
                   static_cast<double>(std::max<std::size_t>(den_raw, 1)) * mult;
        };
        double Tp = stopping_threshold(make_step_function(candidates, fdp_plus), alpha_tilde);
        double Tm = stopping_threshold(make_step_function(candidates, fdp_minus), alpha_tilde);
        if (Tp > Tm) throw InvariantError("ITE hierarchical thresholds violate T+ <= T-");
        out.threshold_plus[j] = Tp;
        out.threshold_minus[j] = Tm;
        double denom = wcal.sum_below(Tm) + 1.0;
        out.values[j].reserve(test_control.V[j].size());
        for (double v : test_control.V[j])
            out.values[j].push_back(v < Tp ? K1 / denom : 0.0);
    }
    check_table_invariants(out);
    return out;
}

void write_table_csv(const std::string& path, const EValueTable& table,
                     const HierarchicalDataset& test) {
    CsvTable t;
    t.header = {"group_id", "unit_index", "value", "kind", "threshold_plus", "threshold_minus"};
    const char* kind = table.kind == TableKind::evalue ? "evalue" : "pvalue";
    auto fmt_threshold = [](const std::vector<double>& v, std::size_t j) -> std::string {
        if (j >= v.size() || std::isnan(v[j])) return "";
        return format_double(v[j]);
    };
    for (std::size_t j = 0; j < table.values.size(); ++j) {
        const std::string& id = test.groups[j].id;
        for (std::size_t i = 0; i < table.values[j].size(); ++i)
            t.rows.push_back({id, std::to_string(i), format_double(table.values[j][i]), kind,
                              fmt_threshold(table.threshold_plus, j),
                              fmt_threshold(table.threshold_minus, j)});
        if (j < table.group_values.size())
            t.rows.push_back({id, "", format_double(table.group_values[j]), kind,
                              fmt_threshold(table.group_threshold, j), ""});
    }
    write_csv(path, t);
}

} // namespace hiersel
