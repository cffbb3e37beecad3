#include "hiersel/simulation.hpp"
#include "hiersel/common.hpp"
#include "hiersel/csv.hpp"
#include "hiersel/scoring.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <mutex>
#include <random>
#include <thread>

namespace hiersel {

// ---------------------------------------------------------------------------
// data-generating processes
// ---------------------------------------------------------------------------

DgpConfig make_dgp(int p_G, int p, double lambda, double sigma, double cutoff,
                   std::uint64_t param_seed) {
    if (p <= 0 || p_G < 0) throw ConfigError("dimensions must satisfy p > 0, p_G >= 0");
    if (lambda < 0) throw ConfigError("lambda must be nonnegative");
    if (!(sigma > 0)) throw ConfigError("sigma must be positive");
    DgpConfig cfg;
    cfg.p_G = p_G;
    cfg.p = p;
    cfg.lambda = lambda;
    cfg.sigma = sigma;
    cfg.cutoff = cutoff;
    cfg.param_seed = param_seed;

    std::mt19937_64 rng(mix64(param_seed));
    std::normal_distribution<double> stdnorm(0.0, 1.0);
    std::uniform_real_distribution<double> unif01(0.0, 1.0);
    cfg.A.assign(p, std::vector<double>(std::max(p_G, 1), 0.0));
    for (int i = 0; i < p; ++i)
        for (int j = 0; j < std::max(p_G, 1); ++j) cfg.A[i][j] = stdnorm(rng);
    cfg.beta1.resize(p);
    for (auto& b : cfg.beta1) b = unif01(rng);
    cfg.beta2.resize(std::max(p_G, 1));
    for (auto& b : cfg.beta2) b = unif01(rng);
    return cfg;
}

namespace {

void require_params(const DgpConfig& cfg) {
    if (cfg.A.empty() || cfg.beta1.empty() || cfg.beta2.empty())
        throw ConfigError("DgpConfig parameters not drawn; construct it with make_dgp");
}

struct TiltSpec {
    TiltKind kind;
    int coord;
    double theta;
};

std::vector<double> draw_group_features(const DgpConfig& cfg, std::mt19937_64& rng,
                                        const TiltSpec* tilt) {
    const int dim = std::max(cfg.p_G, 1);
    std::uniform_real_distribution<double> unif(-5.0, 5.0);
    std::uniform_real_distribution<double> unif01(0.0, 1.0);
    std::vector<double> g(dim);
    while (true) {
        for (int i = 0; i < dim; ++i) g[i] = unif(rng);
        if (tilt && tilt->kind == TiltKind::truncation) {
            g[tilt->coord] = 5.0 * unif01(rng); // Unif[0,5] on the tilted coordinate
        } else if (tilt && tilt->kind == TiltKind::exponential) {
            // inverse CDF of the exponentially tilted Unif[-5,5] coordinate
            const double th = tilt->theta;
            double u = unif01(rng);
            double lo = std::exp(-5.0 * th), hi = std::exp(5.0 * th);
            g[tilt->coord] = std::log(lo + u * (hi - lo)) / th;
        }
        double dot = 0.0;
        for (int i = 0; i < dim; ++i) dot += cfg.beta2[i] * g[i];
        if (std::abs(dot) > 1e-12) return g; // log|beta2'G| singularity guard
    }
}

// One group's units: X ~ N(AG, 3I), baseline Y(0) ~ N(b1'X + log|b2'G|, s^2|X|/p).
void fill_units(const DgpConfig& cfg, Group& grp, std::size_t n, std::mt19937_64& rng) {
    std::normal_distribution<double> stdnorm(0.0, 1.0);
    const auto& g = *grp.g;
    double dot2 = 0.0;
    for (std::size_t i = 0; i < cfg.beta2.size(); ++i) dot2 += cfg.beta2[i] * g[i];
    const double group_level = std::log(std::abs(dot2));
    const double sd_x = std::sqrt(3.0);

    grp.units.resize(n);
    for (auto& u : grp.units) {
        u.x.resize(cfg.p);
        double norm_sq = 0.0, mean_y = group_level;
        for (int i = 0; i < cfg.p; ++i) {
            double m = 0.0;
            for (std::size_t j = 0; j < g.size(); ++j) m += cfg.A[i][j] * g[j];
            u.x[i] = m + sd_x * stdnorm(rng);
            norm_sq += u.x[i] * u.x[i];
            mean_y += cfg.beta1[i] * u.x[i];
        }
        double sd_y = cfg.sigma * std::sqrt(std::sqrt(norm_sq) / cfg.p);
        u.y = mean_y + sd_y * stdnorm(rng);
    }
}

HierarchicalDataset generate_core(const DgpConfig& cfg, std::span<const std::size_t> sizes,
                                  DatasetRole role, std::uint64_t seed, const TiltSpec* tilt,
                                  const char* id_prefix) {
    require_params(cfg);
    std::mt19937_64 rng(mix64(seed));
    HierarchicalDataset ds;
    ds.role = role;
    ds.p = cfg.p;
    ds.p_G = cfg.p_G;
    ds.groups.resize(sizes.size());
    for (std::size_t k = 0; k < sizes.size(); ++k) {
        Group& grp = ds.groups[k];
        grp.id = std::string(id_prefix) + std::to_string(k + 1);
        grp.g = draw_group_features(cfg, rng, tilt);
        fill_units(cfg, grp, sizes[k], rng);
        if (cfg.p_G == 0) grp.g.reset();
    }
    return ds;
}

} // namespace

std::vector<std::size_t> draw_group_sizes(const DgpConfig& cfg, std::size_t n_groups,
                                          std::uint64_t seed) {
    std::vector<std::size_t> sizes(n_groups);
    if (cfg.constant_group_size) {
        if (*cfg.constant_group_size == 0) throw ConfigError("constant group size must be >= 1");
        std::fill(sizes.begin(), sizes.end(), *cfg.constant_group_size);
        return sizes;
    }
    std::mt19937_64 rng(mix64(seed));
    std::poisson_distribution<long> pois(cfg.lambda);
    for (auto& n : sizes) n = 2 + static_cast<std::size_t>(cfg.lambda > 0 ? pois(rng) : 0);
    return sizes;
}

HierarchicalDataset generate_with_sizes(const DgpConfig& cfg, std::span<const std::size_t> sizes,
                                        DatasetRole role, std::uint64_t seed) {
    return generate_core(cfg, sizes, role, seed, nullptr,
                         role == DatasetRole::calibration ? "c" : "t");
}

HierarchicalDataset generate(const DgpConfig& cfg, std::size_t n_groups, DatasetRole role,
                             std::uint64_t seed) {
    auto sizes = draw_group_sizes(cfg, n_groups, derive_seed(seed, 0xA11CE));
    return generate_with_sizes(cfg, sizes, role, derive_seed(seed, 0xB0B));
}

double tilt_weight(const ShiftConfig& cfg, std::span<const double> g) {
    switch (cfg.kind) {
        case TiltKind::none:
            return 1.0;
        case TiltKind::truncation:
            return g[cfg.coord] >= 0.0 ? 2.0 : 0.0;
        case TiltKind::exponential: {
            const double th = cfg.theta;
            double z = std::sinh(5.0 * th) / (5.0 * th);
            return std::exp(th * g[cfg.coord]) / z;
        }
    }
    throw InvariantError("unknown tilt kind");
}

ShiftedData generate_shifted(const ShiftConfig& cfg, std::size_t K, std::size_t M,
                             std::uint64_t seed) {
    require_params(cfg.base);
    if (cfg.base.p_G <= 0) throw ConfigError("covariate shift requires group features (p_G > 0)");
    if (cfg.coord < 0 || cfg.coord >= cfg.base.p_G)
        throw ConfigError("tilt coordinate out of range");
    if (cfg.kind == TiltKind::exponential && cfg.theta == 0.0)
        throw ConfigError("exponential tilt requires theta != 0");

    ShiftedData out;
    auto cal_sizes = draw_group_sizes(cfg.base, K, derive_seed(seed, 1));
    auto test_sizes = draw_group_sizes(cfg.base, M, derive_seed(seed, 2));
    out.calibration = generate_core(cfg.base, cal_sizes, DatasetRole::calibration,
                                    derive_seed(seed, 3), nullptr, "c");
    TiltSpec tilt{cfg.kind, cfg.coord, cfg.theta};
    out.test = generate_core(cfg.base, test_sizes, DatasetRole::test, derive_seed(seed, 4),
                             cfg.kind == TiltKind::none ? nullptr : &tilt, "t");
    for (auto& grp : out.calibration.groups) {
        grp.weight = tilt_weight(cfg, *grp.g);
        out.w_cal.push_back(*grp.weight);
    }
    for (auto& grp : out.test.groups) {
        grp.weight = tilt_weight(cfg, *grp.g);
        out.w_test.push_back(*grp.weight);
    }
    return out;
}

namespace {

double ite_effect(const IteConfig& cfg, const Unit& u) {
    switch (cfg.effect) {
        case EffectKind::zero:
            return 0.0;
        case EffectKind::covariate_sign:
            return u.x[0] > 0.0 ? cfg.tau : 0.0;
    }
    throw InvariantError("unknown effect kind");
}

void attach_counterfactuals(const IteConfig& cfg, HierarchicalDataset& ds, bool treated) {
    for (auto& grp : ds.groups) {
        grp.treated = treated;
        for (auto& u : grp.units) {
            double y0 = *u.y;
            double y1 = y0 + ite_effect(cfg, u);
            u.y_control = y0;
            u.y_treated = y1;
            u.y = treated ? y1 : y0;
        }
    }
}

} // namespace

IteData generate_ite(const IteConfig& cfg, std::size_t K, std::size_t M, std::uint64_t seed) {
    require_params(cfg.base);
    if (!(cfg.p_A > 0.0 && cfg.p_A < 1.0)) throw ConfigError("p_A must lie in (0,1)");

    // condition on exactly K treated / M control groups by redrawing the
    // groupwise Bernoulli(p_A) labels until the counts match
    std::mt19937_64 rng(mix64(derive_seed(seed, 0x17E)));
    std::bernoulli_distribution bern(cfg.p_A);
    std::vector<std::uint8_t> labels(K + M);
    std::size_t attempts = 0;
    while (true) {
        std::size_t treated = 0;
        for (auto& a : labels) treated += (a = bern(rng) ? 1 : 0);
        if (treated == K) break;
        if (++attempts > 1000000)
            throw ConfigError("treatment label conditioning did not converge; "
                              "choose p_A closer to K/(K+M)");
    }

    auto sizes = draw_group_sizes(cfg.base, K + M, derive_seed(seed, 1));
    HierarchicalDataset all = generate_core(cfg.base, sizes, DatasetRole::calibration,
                                            derive_seed(seed, 2), nullptr, "g");
    IteData out;
    out.calibration.role = DatasetRole::calibration;
    out.test.role = DatasetRole::test;
    out.calibration.p = out.test.p = all.p;
    out.calibration.p_G = out.test.p_G = all.p_G;
    for (std::size_t k = 0; k < labels.size(); ++k)
        (labels[k] ? out.calibration : out.test).groups.push_back(std::move(all.groups[k]));
    attach_counterfactuals(cfg, out.calibration, true);
    attach_counterfactuals(cfg, out.test, false);
    return out;
}

// ---------------------------------------------------------------------------
// experiment harness
// ---------------------------------------------------------------------------

Method parse_method(const std::string& name) {
    if (name == "subsampling-ebh") return Method::subsampling_ebh;
    if (name == "subsampling-uebh") return Method::subsampling_uebh;
    if (name == "subsampling-pbh") return Method::subsampling_pbh;
    if (name == "hierarchical-ebh") return Method::hierarchical_ebh;
    if (name == "hierarchical-uebh") return Method::hierarchical_uebh;
    if (name == "hier-p1-bh") return Method::hier_p1_bh;
    if (name == "hier-p2-bh") return Method::hier_p2_bh;
    if (name == "derandomized") return Method::derandomized;
    if (name == "averaged") return Method::averaged;
    if (name == "joint-group-global") return Method::joint_group_global;
    if (name == "joint-group-general") return Method::joint_group_general;
    if (name == "weighted") return Method::weighted;
    if (name == "ite-subsampling") return Method::ite_subsampling;
    if (name == "ite-hierarchical") return Method::ite_hierarchical;
    throw ConfigError("unknown method '" + name + "'");
}

std::string method_name(Method m) {
    switch (m) {
        case Method::subsampling_ebh: return "subsampling-ebh";
        case Method::subsampling_uebh: return "subsampling-uebh";
        case Method::subsampling_pbh: return "subsampling-pbh";
        case Method::hierarchical_ebh: return "hierarchical-ebh";
        case Method::hierarchical_uebh: return "hierarchical-uebh";
        case Method::hier_p1_bh: return "hier-p1-bh";
        case Method::hier_p2_bh: return "hier-p2-bh";
        case Method::derandomized: return "derandomized";
        case Method::averaged: return "averaged";
        case Method::joint_group_global: return "joint-group-global";
        case Method::joint_group_general: return "joint-group-general";
        case Method::weighted: return "weighted";
        case Method::ite_subsampling: return "ite-subsampling";
        case Method::ite_hierarchical: return "ite-hierarchical";
    }
    throw InvariantError("unknown method enum");
}

namespace {

bool is_ite(Method m) { return m == Method::ite_subsampling || m == Method::ite_hierarchical; }

double uniform_open_closed(std::uint64_t seed) {
    std::mt19937_64 rng(mix64(seed));
    return 1.0 - std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

} // namespace

// Remark-3 style internal randomness: rank of the reserved group's first
// outcome score among that group's scores (seeded tie-break) over N_1.
double internal_boost_uniform(const ScoreSet& cal, std::uint64_t seed) {
    if (cal.n_groups() < 2)
        throw GuardError("internal boosting reserves calibration group 1; need K >= 2");
    const auto& v = cal.V[0];
    for (double x : v)
        if (std::isnan(x)) throw RoleError("internal boosting needs outcomes in group 1");
    std::vector<std::size_t> tb(v.size());
    std::mt19937_64 rng(mix64(seed));
    for (auto& t : tb) t = rng();
    std::size_t rank = 1;
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] < v[0] || (v[i] == v[0] && tb[i] < tb[0])) ++rank;
    return static_cast<double>(rank) / static_cast<double>(v.size());
}

namespace {

void drop_first_group(HierarchicalDataset& ds, ScoreSet& ss) {
    ds.groups.erase(ds.groups.begin());
    ss.C.erase(ss.C.begin());
    ss.Vhat.erase(ss.Vhat.begin());
    ss.V.erase(ss.V.begin());
    ss.null_ind.erase(ss.null_ind.begin());
}

GroupScoreSpec make_mean_group_spec(const Predictor& mu, double group_cutoff) {
    GroupScoreSpec spec;
    spec.score = [mu](const Group& grp, std::size_t r, double cutoff) {
        std::span<const double> g =
            grp.g ? std::span<const double>(*grp.g) : std::span<const double>();
        double m = 0.0;
        for (std::size_t i = 0; i < r; ++i) m += mu(g, grp.units[i].x);
        return cutoff - m / static_cast<double>(r);
    };
    spec.h = [](const Group& grp, std::size_t r) {
        double m = 0.0;
        for (std::size_t i = 0; i < r; ++i) {
            if (!grp.units[i].y) throw RoleError("group aggregation needs outcomes");
            m += *grp.units[i].y;
        }
        return m / static_cast<double>(r);
    };
    spec.cutoff = [group_cutoff](const Group&, std::size_t) { return group_cutoff; };
    return spec;
}

RejectionSet mask_to_rejections(const std::vector<std::vector<std::uint8_t>>& mask) {
    RejectionSet out;
    for (std::size_t j = 0; j < mask.size(); ++j) {
        out.n_hypotheses += mask[j].size();
        for (std::size_t i = 0; i < mask[j].size(); ++i)
            if (mask[j][i]) out.rejected.push_back({j, static_cast<std::ptrdiff_t>(i)});
    }
    return out;
}

struct TrialContext {
    const ExperimentSpec& spec;
    const Predictor& mu;
    bool monotone_ok;
};

std::vector<SelectionMetrics> run_trial(const TrialContext& ctx, std::size_t trial) {
    const ExperimentSpec& spec = ctx.spec;
    const std::uint64_t ts = derive_seed(spec.master_seed, 0x7121A1 + trial);
    const ThresholdFunction cthr = constant_threshold(spec.dgp.cutoff);
    const Method m = spec.method;

    HierarchicalDataset cal, test;
    ScoreSet cs, ts2;
    TruthTable truth;
    std::vector<double> w_cal, w_test;

    if (is_ite(m)) {
        IteConfig icfg{spec.dgp, spec.p_A, spec.effect, spec.tau};
        IteData data = generate_ite(icfg, spec.K, spec.M, derive_seed(ts, 1));
        cal = std::move(data.calibration);
        test = std::move(data.test);
        check_ite_roles(cal, test);
        cs = residual_scores(cal, predictions_from(cal, ctx.mu), constant_threshold(0.0));
        ts2 = residual_scores(test, predictions_from(test, ctx.mu), constant_threshold(0.0));
        if (spec.ite_shift != 0.0) // general threshold c: compare s(x, y0 + c)
            for (auto& grp : ts2.V)
                for (auto& v : grp) v += spec.ite_shift;
        truth.unit_null.resize(test.n_groups());
        for (std::size_t j = 0; j < test.n_groups(); ++j)
            for (const auto& u : test.groups[j].units)
                truth.unit_null[j].push_back(*u.y_treated - *u.y_control <= spec.ite_shift);
    } else if (m == Method::weighted) {
        ShiftConfig scfg{spec.dgp, spec.tilt, spec.tilt_coord, spec.tilt_theta};
        ShiftedData data = generate_shifted(scfg, spec.K, spec.M, derive_seed(ts, 1));
        cal = std::move(data.calibration);
        test = std::move(data.test);
        w_cal = std::move(data.w_cal);
        w_test = std::move(data.w_test);
        cs = residual_scores(cal, predictions_from(cal, ctx.mu), cthr);
        ts2 = residual_scores(test, predictions_from(test, ctx.mu), cthr);
    } else {
        cal = generate(spec.dgp, spec.K, DatasetRole::calibration, derive_seed(ts, 1));
        test = generate(spec.dgp, spec.M, DatasetRole::test, derive_seed(ts, 2));
        cs = residual_scores(cal, predictions_from(cal, ctx.mu), cthr);
        ts2 = residual_scores(test, predictions_from(test, ctx.mu), cthr);
    }
    if (truth.unit_null.empty()) {
        truth.unit_null.resize(test.n_groups());
        for (std::size_t j = 0; j < test.n_groups(); ++j)
            for (std::size_t i = 0; i < ts2.null_ind[j].size(); ++i)
                truth.unit_null[j].push_back(ts2.null_ind[j][i] == 1);
    }
    if (m == Method::joint_group_global) {
        for (const auto& nulls : truth.unit_null) {
            bool all_null = true;
            for (auto v : nulls) all_null = all_null && v;
            truth.group_null.push_back(all_null);
        }
    } else if (m == Method::joint_group_general) {
        for (const auto& grp : test.groups) {
            double mean_y = 0.0;
            for (const auto& u : grp.units) mean_y += *u.y;
            truth.group_null.push_back(mean_y / static_cast<double>(grp.size()) <=
                                       spec.group_cutoff);
        }
    }

    double u_boost = 1.0;
    if (m == Method::subsampling_uebh || m == Method::hierarchical_uebh) {
        if (spec.boost == BoostMode::internal) {
            u_boost = internal_boost_uniform(cs, derive_seed(ts, 4));
            drop_first_group(cal, cs); // the reserved group leaves the calibration set
        } else {
            u_boost = uniform_open_closed(derive_seed(ts, 4));
        }
    }
    SubsampleDraw draw = draw_subsample(cs.group_sizes(), derive_seed(ts, 3));

    std::vector<SelectionMetrics> out;
    out.reserve(spec.alphas.size());
    for (double alpha : spec.alphas) {
        const double at = spec.alpha_tilde_factor * alpha;
        RejectionSet rej;
        switch (m) {
            case Method::subsampling_ebh:
                rej = ebh(subsampling_evalues(cs, ts2, draw, at), alpha);
                break;
            case Method::subsampling_uebh:
                rej = u_ebh(subsampling_evalues(cs, ts2, draw, at), alpha, u_boost);
                break;
            case Method::subsampling_pbh:
                rej = mask_to_rejections(pbh_threshold(cs, ts2, draw, alpha).selected);
                break;
            case Method::hierarchical_ebh:
                rej = ebh(hierarchical_evalues(cs, ts2, at), alpha);
                break;
            case Method::hierarchical_uebh:
                rej = u_ebh(hierarchical_evalues(cs, ts2, at), alpha, u_boost);
                break;
            case Method::hier_p1_bh:
                rej = bh(hierarchical_pvalues(cs, ts2, HierPVariant::outcome_score,
                                              ctx.monotone_ok),
                         alpha);
                break;
            case Method::hier_p2_bh:
                rej = bh(hierarchical_pvalues(cs, ts2, HierPVariant::clipped), alpha);
                break;
            case Method::derandomized:
                rej = ebh(derandomized_evalues(cs, ts2, at, spec.derand_budget), alpha);
                break;
            case Method::averaged:
                rej = ebh(averaged_evalues(cs, ts2, at, spec.r, derive_seed(ts, 5)), alpha);
                break;
            case Method::joint_group_global: {
                EValueTable t = subsampling_evalues(cs, ts2, draw, at);
                group_global_evalues(t);
                rej = ebh(t, alpha);
                break;
            }
            case Method::joint_group_general: {
                EValueTable t = subsampling_evalues(cs, ts2, draw, at);
                GroupEValues ge = group_general_evalues(
                    cal, test, make_mean_group_spec(ctx.mu, spec.group_cutoff),
                    spec.alpha_tilde_group_factor * alpha, PrefixMode::first_r,
                    derive_seed(ts, 6));
                t.group_values = std::move(ge.values);
                t.group_threshold = std::move(ge.thresholds);
                rej = ebh(t, alpha);
                break;
            }
            case Method::weighted:
                rej = ebh(weighted_subsampling_evalues(cs, ts2, draw, w_cal, w_test, at), alpha);
                break;
            case Method::ite_subsampling:
                rej = ebh(ite_subsampling_evalues(cs, ts2, draw, at, ctx.monotone_ok), alpha);
                break;
            case Method::ite_hierarchical:
                rej = ebh(ite_hierarchical_evalues(cs, ts2, at, ctx.monotone_ok), alpha);
                break;
        }
        out.push_back(metrics(rej, truth));
    }
    return out;
}

struct MeanSe {
    double mean = 0.0;
    double se = 0.0;
};

MeanSe mean_se(const std::vector<double>& xs) {
    MeanSe out;
    const std::size_t n = xs.size();
    if (n == 0) return out;
    for (double x : xs) out.mean += x;
    out.mean /= static_cast<double>(n);
    if (n == 1) return out; // SE = 0 convention for a single trial
    double ss = 0.0;
    for (double x : xs) ss += (x - out.mean) * (x - out.mean);
    out.se = std::sqrt(ss / static_cast<double>(n - 1)) / std::sqrt(static_cast<double>(n));
    return out;
}

} // namespace

AggregateResult run_experiment(const ExperimentSpec& spec) {
    if (spec.n_trials == 0) throw ConfigError("n_trials must be >= 1");
    if (spec.K == 0 || spec.M == 0) throw ConfigError("K and M must be >= 1");
    if (spec.alphas.empty()) throw ConfigError("empty alpha grid");
    for (double a : spec.alphas)
        if (!(a > 0 && a < 1) || !(spec.alpha_tilde_factor * a > 0) ||
            !(spec.alpha_tilde_factor * a < 1))
            throw ConfigError("alpha grid and alpha_tilde rule must stay inside (0,1)");
    require_params(spec.dgp);

    // the score is fixed across trials: fit once on an independent training draw
    HierarchicalDataset train;
    if (is_ite(spec.method)) {
        IteConfig icfg{spec.dgp, spec.p_A, spec.effect, spec.tau};
        auto sizes =
            draw_group_sizes(spec.dgp, spec.K_train, derive_seed(spec.master_seed, 0x7EA1));
        train = generate_with_sizes(spec.dgp, sizes, DatasetRole::calibration,
                                    derive_seed(spec.master_seed, 0x7EA2));
        attach_counterfactuals(icfg, train, true); // mu estimates Y(1)
    } else {
        train = generate(spec.dgp, spec.K_train, DatasetRole::calibration,
                         derive_seed(spec.master_seed, 0x7EA3));
    }
    Predictor mu = fit_ridge(train);
    bool monotone_ok = check_monotonicity_on(residual_score(mu), train);

    TrialContext ctx{spec, mu, monotone_ok};
    std::vector<std::vector<SelectionMetrics>> per_trial(spec.n_trials);

    const int n_threads = std::max(1, spec.threads);
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    auto worker = [&]() {
        while (true) {
            std::size_t t = next.fetch_add(1);
            if (t >= spec.n_trials) return;
            try {
                per_trial[t] = run_trial(ctx, t);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mutex);
                if (!error) error = std::current_exception();
                return;
            }
        }
    };
    if (n_threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int i = 0; i < n_threads; ++i) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    if (error) std::rethrow_exception(error);

    AggregateResult agg;
    for (std::size_t a = 0; a < spec.alphas.size(); ++a) {
        std::vector<double> fdp, power, fdp_i, pow_i, fdp_g, pow_g;
        bool has_levels = false;
        for (const auto& trial : per_trial) {
            const SelectionMetrics& sm = trial[a];
            fdp.push_back(sm.fdp);
            power.push_back(sm.power);
            if (sm.has_levels) {
                has_levels = true;
                fdp_i.push_back(sm.fdp_individual);
                pow_i.push_back(sm.power_individual);
                fdp_g.push_back(sm.fdp_group);
                pow_g.push_back(sm.power_group);
            }
        }
        ResultRow row;
        row.method = method_name(spec.method);
        row.alpha = spec.alphas[a];
        row.n_trials = spec.n_trials;
        auto f = mean_se(fdp);
        auto p = mean_se(power);
        row.fdr = f.mean;
        row.fdr_se = f.se;
        row.power = p.mean;
        row.power_se = p.se;
        row.has_levels = has_levels;
        if (has_levels) {
            auto fi = mean_se(fdp_i), pi = mean_se(pow_i);
            auto fg = mean_se(fdp_g), pg = mean_se(pow_g);
            row.fdr_individual = fi.mean;
            row.fdr_individual_se = fi.se;
            row.power_individual = pi.mean;
            row.power_individual_se = pi.se;
            row.fdr_group = fg.mean;
            row.fdr_group_se = fg.se;
            row.power_group = pg.mean;
            row.power_group_se = pg.se;
        }
        agg.rows.push_back(row);
    }
    return agg;
}

void write_results_csv(const std::string& path, const std::vector<ResultRow>& rows) {
    CsvTable t;
    t.header = {"method",        "alpha",         "fdr",
                "fdr_se",        "power",         "power_se",
                "n_trials",      "fdr_individual", "fdr_individual_se",
                "power_individual", "power_individual_se", "fdr_group",
                "fdr_group_se",  "power_group",   "power_group_se"};
    for (const auto& r : rows) {
        std::vector<std::string> row = {r.method,
                                        format_double(r.alpha),
                                        format_double(r.fdr),
                                        format_double(r.fdr_se),
                                        format_double(r.power),
                                        format_double(r.power_se),
                                        std::to_string(r.n_trials)};
        if (r.has_levels) {
            row.push_back(format_double(r.fdr_individual));
            row.push_back(format_double(r.fdr_individual_se));
            row.push_back(format_double(r.power_individual));
            row.push_back(format_double(r.power_individual_se));
            row.push_back(format_double(r.fdr_group));
            row.push_back(format_double(r.fdr_group_se));
            row.push_back(format_double(r.power_group));
            row.push_back(format_double(r.power_group_se));
        } else {
            for (int i = 0; i < 8; ++i) row.emplace_back();
        }
        t.rows.push_back(std::move(row));
    }
    write_csv(path, t);
}

// ---------------------------------------------------------------------------
// validity oracles
// ---------------------------------------------------------------------------

std::vector<std::string> validity_methods() {
    return {"subsampling",     "subsampling-p",    "hierarchical", "hier-p1",
            "group-global",    "group-general",    "weighted",     "ite-subsampling",
            "ite-hierarchical", "ite-p",           "mutant-no-plus-one"};
}

ValidityReport run_validity(const std::string& method, const ValidityConfig& cfg) {
    if (cfg.n_reps == 0) throw ConfigError("n_reps must be >= 1");
    require_params(cfg.dgp);
    const double alpha_tilde = cfg.alpha_tilde_factor * cfg.alpha;
    const bool p_suite = (method == "subsampling-p" || method == "hier-p1" || method == "ite-p");
    const bool is_known = [&] {
        auto ms = validity_methods();
        return std::find(ms.begin(), ms.end(), method) != ms.end();
    }();
    if (!is_known) throw ConfigError("unknown validity method '" + method + "'");

    // group sizes are held fixed across replications (the e-value bound is
    // conditional on N_{K+1:K+M})
    auto cal_sizes = draw_group_sizes(cfg.dgp, cfg.K, derive_seed(cfg.seed, 1));
    auto test_sizes = draw_group_sizes(cfg.dgp, cfg.M, derive_seed(cfg.seed, 2));

    HierarchicalDataset train = generate(cfg.dgp, 30, DatasetRole::calibration,
                                         derive_seed(cfg.seed, 3));
    if (method.rfind("ite", 0) == 0) {
        IteConfig icfg{cfg.dgp, 0.5, EffectKind::covariate_sign, 4.0};
        attach_counterfactuals(icfg, train, true);
    }
    Predictor mu = fit_ridge(train);
    const ThresholdFunction cthr = constant_threshold(cfg.dgp.cutoff);
    const double group_cutoff = cfg.dgp.cutoff;

    std::vector<double> stats;
    stats.reserve(cfg.n_reps);
    for (std::size_t rep = 0; rep < cfg.n_reps; ++rep) {
        const std::uint64_t rs = derive_seed(cfg.seed, 0x5EED00 + rep);
        double stat = 0.0;

        if (method.rfind("ite", 0) == 0) {
            IteConfig icfg{cfg.dgp, 0.5, EffectKind::covariate_sign, 4.0};
            HierarchicalDataset cal = generate_with_sizes(cfg.dgp, cal_sizes,
                                                          DatasetRole::calibration,
                                                          derive_seed(rs, 1));
            HierarchicalDataset test = generate_with_sizes(cfg.dgp, test_sizes,
                                                           DatasetRole::test,
                                                           derive_seed(rs, 2));
            attach_counterfactuals(icfg, cal, true);
            attach_counterfactuals(icfg, test, false);
            ScoreSet cs = residual_scores(cal, predictions_from(cal, mu),
                                          constant_threshold(0.0));
            ScoreSet ts2 = residual_scores(test, predictions_from(test, mu),
                                           constant_threshold(0.0));
            SubsampleDraw draw = draw_subsample(cs.group_sizes(), derive_seed(rs, 3));
            EValueTable t;
            if (method == "ite-subsampling")
                t = ite_subsampling_evalues(cs, ts2, draw, alpha_tilde);
            else if (method == "ite-hierarchical")
                t = ite_hierarchical_evalues(cs, ts2, alpha_tilde);
            else
                t = ite_pvalues(cs, ts2, draw);
            double acc = 0.0;
            std::size_t n = 0;
            for (std::size_t j = 0; j < test.n_groups(); ++j)
                for (std::size_t i = 0; i < test.groups[j].units.size(); ++i) {
                    const Unit& u = test.groups[j].units[i];
                    bool null = *u.y_treated <= *u.y_control;
                    if (p_suite)
                        acc += (t.values[j][i] <= cfg.alpha && null) ? 1.0 : 0.0;
                    else
                        acc += null ? t.values[j][i] : 0.0;
                    ++n;
                }
            stat = acc / static_cast<double>(n);
        } else if (method == "weighted") {
            ShiftConfig scfg{cfg.dgp, TiltKind::truncation, 0, 0.5};
            TiltSpec tilt{scfg.kind, scfg.coord, scfg.theta};
            HierarchicalDataset cal = generate_core(cfg.dgp, cal_sizes,
                                                    DatasetRole::calibration,
                                                    derive_seed(rs, 1), nullptr, "c");
            HierarchicalDataset test = generate_core(cfg.dgp, test_sizes, DatasetRole::test,
                                                     derive_seed(rs, 2), &tilt, "t");
            std::vector<double> w_cal, w_test;
            for (const auto& grp : cal.groups) w_cal.push_back(tilt_weight(scfg, *grp.g));
            for (const auto& grp : test.groups) w_test.push_back(tilt_weight(scfg, *grp.g));
            ScoreSet cs = residual_scores(cal, predictions_from(cal, mu), cthr);
            ScoreSet ts2 = residual_scores(test, predictions_from(test, mu), cthr);
            SubsampleDraw draw = draw_subsample(cs.group_sizes(), derive_seed(rs, 3));
            EValueTable t = weighted_subsampling_evalues(cs, ts2, draw, w_cal, w_test,
                                                         alpha_tilde);
            double acc = 0.0;
            std::size_t n = 0;
            for (std::size_t j = 0; j < t.values.size(); ++j)
                for (std::size_t i = 0; i < t.values[j].size(); ++i) {
                    acc += (ts2.null_ind[j][i] == 1) ? t.values[j][i] : 0.0;
                    ++n;
                }
            stat = acc / static_cast<double>(n);
        } else {
            HierarchicalDataset cal = generate_with_sizes(cfg.dgp, cal_sizes,
                                                          DatasetRole::calibration,
                                                          derive_seed(rs, 1));
            HierarchicalDataset test = generate_with_sizes(cfg.dgp, test_sizes,
                                                           DatasetRole::test,
                                                           derive_seed(rs, 2));
            ScoreSet cs = residual_scores(cal, predictions_from(cal, mu), cthr);
            ScoreSet ts2 = residual_scores(test, predictions_from(test, mu), cthr);
            SubsampleDraw draw = draw_subsample(cs.group_sizes(), derive_seed(rs, 3));

            if (method == "group-global" || method == "group-general") {
                std::vector<double> group_vals;
                std::vector<std::uint8_t> group_null;
                if (method == "group-global") {
                    EValueTable t = subsampling_evalues(cs, ts2, draw, alpha_tilde);
                    group_global_evalues(t);
                    group_vals = t.group_values;
                    for (std::size_t j = 0; j < test.n_groups(); ++j) {
                        bool all_null = true;
                        for (auto ni : ts2.null_ind[j]) all_null = all_null && (ni == 1);
                        group_null.push_back(all_null);
                    }
                } else {
                    GroupEValues ge = group_general_evalues(
                        cal, test, make_mean_group_spec(mu, group_cutoff), alpha_tilde);
                    group_vals = ge.values;
                    for (const auto& grp : test.groups) {
                        double mean_y = 0.0;
                        for (const auto& u : grp.units) mean_y += *u.y;
                        group_null.push_back(mean_y / static_cast<double>(grp.size()) <=
                                             group_cutoff);
                    }
                }
                double acc = 0.0;
                for (std::size_t j = 0; j < group_vals.size(); ++j)
                    acc += group_null[j] ? group_vals[j] : 0.0;
                stat = acc / static_cast<double>(group_vals.size());
            } else if (method == "mutant-no-plus-one") {
                // deliberately broken subsampling e-value: denominator lacks
                // the +1, so the compound bound must fail detectably
                EValueTable t = subsampling_evalues(cs, ts2, draw, alpha_tilde);
                double acc = 0.0;
                std::size_t n = 0;
                for (std::size_t j = 0; j < t.values.size(); ++j) {
                    const double K1 = static_cast<double>(cs.n_groups()) + 1.0;
                    for (std::size_t i = 0; i < t.values[j].size(); ++i) {
                        double e = t.values[j][i];
                        if (e > 0.0) {
                            double denom = K1 / e; // = (count below T) + 1
                            e = K1 / (denom - 1.0); // +inf when the count is zero
                        }
                        acc += (ts2.null_ind[j][i] == 1) ? e : 0.0;
                        ++n;
                    }
                }
                stat = acc / static_cast<double>(n);
            } else {
                EValueTable t;
                if (method == "subsampling")
                    t = subsampling_evalues(cs, ts2, draw, alpha_tilde);
                else if (method == "subsampling-p")
                    t = subsampling_pvalues(cs, ts2, draw);
                else if (method == "hierarchical")
                    t = hierarchical_evalues(cs, ts2, alpha_tilde);
                else // hier-p1
                    t = hierarchical_pvalues(cs, ts2, HierPVariant::outcome_score, true);
                double acc = 0.0;
                std::size_t n = 0;
                for (std::size_t j = 0; j < t.values.size(); ++j)
                    for (std::size_t i = 0; i < t.values[j].size(); ++i) {
                        bool null = ts2.null_ind[j][i] == 1;
                        if (p_suite)
                            acc += (t.values[j][i] <= cfg.alpha && null) ? 1.0 : 0.0;
                        else
                            acc += null ? t.values[j][i] : 0.0;
                        ++n;
                    }
                stat = acc / static_cast<double>(n);
            }
        }
        stats.push_back(stat);
    }

    ValidityReport report;
    report.method = method;
    report.n_reps = cfg.n_reps;
    auto ms = mean_se(stats);
    report.mean = ms.mean;
    report.se = ms.se;
    report.bound = (p_suite ? cfg.alpha : 1.0) + 3.0 * ms.se;
    report.pass = report.mean <= report.bound;
    return report;
}

// ---------------------------------------------------------------------------
// test oracles
// ---------------------------------------------------------------------------

RejectionSet oracle_ebh(const EValueTable& table, double alpha) {
    if (table.kind != TableKind::evalue)
        throw ConfigError("oracle_ebh requires an e-value table");
    std::vector<double> candidates;
    for (const auto& grp : table.values)
        candidates.insert(candidates.end(), grp.begin(), grp.end());
    candidates.insert(candidates.end(), table.group_values.begin(), table.group_values.end());
    const std::size_t n = candidates.size();
    if (n > 10000) throw ConfigError("oracle_ebh is for small tables only");
    std::sort(candidates.begin(), candidates.end());
    candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());

    // maximal rejection set of the form {e >= theta} with theta >= n/(alpha R)
    double best_theta = 0.0;
    std::size_t best_size = 0;
    for (double theta : candidates) {
        std::size_t R = 0;
        for (const auto& grp : table.values)
            for (double v : grp) R += (v >= theta);
        for (double v : table.group_values) R += (v >= theta);
        if (R == 0) continue;
        if (theta >= static_cast<double>(n) / (alpha * static_cast<double>(R)) &&
            R > best_size) {
            best_size = R;
            best_theta = theta;
        }
    }
    RejectionSet out;
    out.n_hypotheses = n;
    if (best_size == 0) return out;
    for (std::size_t j = 0; j < table.values.size(); ++j)
        for (std::size_t i = 0; i < table.values[j].size(); ++i)
            if (table.values[j][i] >= best_theta)
                out.rejected.push_back({j, static_cast<std::ptrdiff_t>(i)});
    for (std::size_t j = 0; j < table.group_values.size(); ++j)
        if (table.group_values[j] >= best_theta) out.rejected.push_back({j, -1});
    return out;
}

double oracle_threshold(const StepFunction& f, double alpha_tilde, std::size_t grid_points) {
    constexpr double inf = std::numeric_limits<double>::infinity();
    std::vector<double> probes;
    if (f.jumps.empty()) {
        probes.push_back(0.0);
    } else {
        const double lo = f.jumps.front() - 1.0, hi = f.jumps.back();
        for (std::size_t i = 0; i <= grid_points; ++i)
            probes.push_back(lo + (hi - lo) * static_cast<double>(i) /
                                      static_cast<double>(grid_points));
        for (std::size_t i = 0; i < f.jumps.size(); ++i) {
            probes.push_back(f.jumps[i]);
            if (i + 1 < f.jumps.size())
                probes.push_back(0.5 * (f.jumps[i] + f.jumps[i + 1])); // half-gap probes
        }
    }
    const double beyond = f.jumps.empty() ? 1.0 : std::nextafter(f.jumps.back(), inf);
    if (f(beyond) <= alpha_tilde) return inf;
    double best = -inf;
    for (double t : probes)
        if (f(t) <= alpha_tilde) best = std::max(best, t);
    return best;
}

} // namespace hiersel
