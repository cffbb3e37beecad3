#include "hiersel/cli.hpp"
#include "hiersel/common.hpp"
#include "hiersel/config.hpp"
#include "hiersel/conformal.hpp"
#include "hiersel/csv.hpp"
#include "hiersel/data_model.hpp"
#include "hiersel/scoring.hpp"
#include "hiersel/simulation.hpp"
#include "hiersel/testing.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <random>
#include <fstream>
#include <iostream>

namespace hiersel {

namespace {

using nlohmann::json;

// The exact formula-variant choices baked into this build, recorded in every
// run manifest so results are auditable.
json formula_variants() {
    return json{{"stopping_multiplier", "sum_all_test_sizes_over_K_plus_1"},
                {"hierarchical_multiplier", "sum_test_sizes_excluding_j_over_K_plus_1"},
                {"weighted_multiplier", "sum_all_test_sizes_normalized_by_weight_total"},
                {"group_stopping_strictness", "strict_less"},
                {"group_stopping_denominator", "one_or_sum_over_all_test_groups"},
                {"group_normalizer", "comparable_count_plus_one"},
                {"score_comparisons", "strict_less_than_threshold"},
                {"ties", "deterministic_no_perturbation"}};
}

json spec_to_json(const ExperimentSpec& s, const std::vector<Method>& methods) {
    json m = json::array();
    for (auto method : methods) m.push_back(method_name(method));
    return json{{"methods", m},
                {"alphas", s.alphas},
                {"alpha_tilde_factor", s.alpha_tilde_factor},
                {"K", s.K},
                {"M", s.M},
                {"K_train", s.K_train},
                {"n_trials", s.n_trials},
                {"seed", s.master_seed},
                {"threads", s.threads},
                {"p_G", s.dgp.p_G},
                {"p", s.dgp.p},
                {"lambda", s.dgp.lambda},
                {"sigma", s.dgp.sigma},
                {"cutoff", s.dgp.cutoff},
                {"r", s.r},
                {"group_cutoff", s.group_cutoff}};
}

int cmd_simulate(const std::string& config_path, const std::string& out_path,
                 std::optional<std::uint64_t> seed, std::optional<int> threads,
                 bool paper_scale) {
    auto t0 = std::chrono::steady_clock::now();
    ConfigMap cfg = parse_config_file(config_path);
    SimulatePlan plan = make_simulate_plan(cfg, paper_scale);
    if (seed) plan.base.master_seed = *seed;
    if (threads) plan.base.threads = *threads;
    if (paper_scale)
        std::cerr << "note: --paper-scale runs the full-size configuration; "
                     "expect a long wall time\n";

    std::vector<ResultRow> rows;
    for (Method m : plan.methods) {
        ExperimentSpec spec = plan.base;
        spec.method = m;
        AggregateResult agg = run_experiment(spec);
        rows.insert(rows.end(), agg.rows.begin(), agg.rows.end());
    }
    write_results_csv(out_path, rows);

    auto wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    json manifest{{"command", "simulate"},
                  {"version", kVersion},
                  {"config_file", config_path},
                  {"config", spec_to_json(plan.base, plan.methods)},
                  {"seed", plan.base.master_seed},
                  {"wall_time_sec", wall},
                  {"formula_variants", formula_variants()}};
    std::ofstream mf(out_path + ".manifest.json");
    mf << manifest.dump(2) << '\n';
    std::cout << "wrote " << out_path << " (" << rows.size() << " rows)\n";
    return 0;
}

struct SelectOptions {
    std::string calibration_path, test_path, out_path = "selection.csv";
    std::string predictions_path, train_path;
    std::string method = "subsampling-ebh";
    double alpha = 0.1;
    std::optional<double> alpha_tilde;
    double cutoff = 0.0;
    double group_cutoff = 0.0;
    double ite_shift = 0.0;
    std::uint64_t seed = 1;
    int r = 10;
    std::string boost = "external";
    std::uint64_t budget = 1'000'000;
};

// One row per test unit (plus one per group for joint methods) with the
// statistic, the selection flag, and the group threshold(s).
void write_selection_csv(const std::string& path, const EValueTable& table,
                         const RejectionSet& rej, const HierarchicalDataset& test) {
    std::vector<std::vector<std::uint8_t>> unit_sel(table.values.size());
    for (std::size_t j = 0; j < table.values.size(); ++j)
        unit_sel[j].assign(table.values[j].size(), 0);
    std::vector<std::uint8_t> group_sel(table.group_values.size(), 0);
    for (const auto& id : rej.rejected) {
        if (id.is_group_level()) group_sel[id.group] = 1;
        else unit_sel[id.group][static_cast<std::size_t>(id.unit)] = 1;
    }
    CsvTable t;
    t.header = {"group_id", "unit_index", "value",
                "kind",     "selected",   "threshold_plus",
                "threshold_minus"};
    const char* kind = table.kind == TableKind::evalue ? "evalue" : "pvalue";
    auto fmt = [](const std::vector<double>& v, std::size_t j) -> std::string {
        if (j >= v.size() || std::isnan(v[j])) return "";
        return format_double(v[j]);
    };
    for (std::size_t j = 0; j < table.values.size(); ++j) {
        const std::string& id = test.groups[j].id;
        for (std::size_t i = 0; i < table.values[j].size(); ++i)
            t.rows.push_back({id, std::to_string(i), format_double(table.values[j][i]), kind,
                              unit_sel[j][i] ? "1" : "0", fmt(table.threshold_plus, j),
                              fmt(table.threshold_minus, j)});
        if (j < table.group_values.size())
            t.rows.push_back({id, "", format_double(table.group_values[j]), kind,
                              group_sel[j] ? "1" : "0", fmt(table.group_threshold, j), ""});
    }
    write_csv(path, t);
}

std::vector<double> dataset_weights(const HierarchicalDataset& ds, const char* which) {
    std::vector<double> w;
    for (const auto& grp : ds.groups) {
        if (!grp.weight)
            throw SchemaError(std::string("method 'weighted' needs a w column on the ") + which +
                              " file (group '" + grp.id + "' has none)");
        w.push_back(*grp.weight);
    }
    return w;
}

int cmd_select(const SelectOptions& opt) {
    Method method = parse_method(opt.method);
    const bool ite = (method == Method::ite_subsampling || method == Method::ite_hierarchical);
    HierarchicalDataset cal = load_csv(opt.calibration_path, DatasetRole::calibration);
    HierarchicalDataset test = load_csv(opt.test_path, DatasetRole::test);
    if (test.groups.empty()) throw SchemaError(opt.test_path + ": test file has no data rows");

    // score: external per-unit predictions, or the built-in ridge baseline
    PredictionTable cal_mu, test_mu;
    Predictor mu;
    if (!opt.predictions_path.empty()) {
        cal_mu = load_predictions(opt.predictions_path, cal);
        test_mu = load_predictions(opt.predictions_path, test);
    } else {
        if (!opt.train_path.empty()) {
            HierarchicalDataset train = load_csv(opt.train_path, DatasetRole::calibration);
            mu = fit_ridge(train);
        } else {
            // fallback: fit on the calibration file; strict validity wants an
            // independently fitted score (see README)
            mu = fit_ridge(cal);
        }
        cal_mu = predictions_from(cal, mu);
        test_mu = predictions_from(test, mu);
    }

    const double alpha = opt.alpha;
    const double alpha_tilde = opt.alpha_tilde ? *opt.alpha_tilde : 0.9 * alpha;
    ThresholdFunction cthr = constant_threshold(ite ? 0.0 : opt.cutoff);
    ScoreSet cs = residual_scores(cal, cal_mu, cthr);
    ScoreSet ts2 = residual_scores(test, test_mu, cthr);
    if (ite) {
        check_ite_roles(cal, test);
        if (opt.ite_shift != 0.0)
            for (auto& grp : ts2.V)
                for (auto& v : grp) v += opt.ite_shift;
    }

    // the residual score is monotone by construction; the guard still runs
    bool monotone_ok = true;
    if (ite || method == Method::hier_p1_bh) {
        ScoreFunction probe;
        probe.monotone = true;
        probe.eval = [](std::span<const double>, std::span<const double>, double v) { return v; };
        monotone_ok = check_monotonicity_on(probe, cal);
    }

    double u_boost = 1.0;
    if (method == Method::subsampling_uebh || method == Method::hierarchical_uebh) {
        if (opt.boost == "none") {
            u_boost = 1.0;
        } else if (opt.boost == "external") {
            std::mt19937_64 rng(mix64(derive_seed(opt.seed, 0xB005)));
            u_boost = 1.0 - std::uniform_real_distribution<double>(0.0, 1.0)(rng);
        } else if (opt.boost == "internal") {
            u_boost = internal_boost_uniform(cs, derive_seed(opt.seed, 0xB006));
            cal.groups.erase(cal.groups.begin()); // reserved group leaves the set
            cs.C.erase(cs.C.begin());
            cs.Vhat.erase(cs.Vhat.begin());
            cs.V.erase(cs.V.begin());
            cs.null_ind.erase(cs.null_ind.begin());
        } else {
            throw ConfigError("boost must be none, external, or internal");
        }
    }

    SubsampleDraw draw = draw_subsample(cs.group_sizes(), derive_seed(opt.seed, 0xD0));

    EValueTable table;
    RejectionSet rej;
    switch (method) {
        case Method::subsampling_ebh:
            table = subsampling_evalues(cs, ts2, draw, alpha_tilde);
            rej = ebh(table, alpha);
            break;
        case Method::subsampling_uebh:
            table = boost_evalues(subsampling_evalues(cs, ts2, draw, alpha_tilde), u_boost);
            rej = ebh(table, alpha);
            break;
        case Method::subsampling_pbh: {
            table = subsampling_pvalues(cs, ts2, draw);
            PbhResult res = pbh_threshold(cs, ts2, draw, alpha);
            table.threshold_plus.assign(table.values.size(), res.threshold);
            rej.n_hypotheses = table.n_hypotheses();
            for (std::size_t j = 0; j < res.selected.size(); ++j)
                for (std::size_t i = 0; i < res.selected[j].size(); ++i)
                    if (res.selected[j][i])
                        rej.rejected.push_back({j, static_cast<std::ptrdiff_t>(i)});
            break;
        }
        case Method::hierarchical_ebh:
            table = hierarchical_evalues(cs, ts2, alpha_tilde);
            rej = ebh(table, alpha);
            break;
        case Method::hierarchical_uebh:
            table = boost_evalues(hierarchical_evalues(cs, ts2, alpha_tilde), u_boost);
            rej = ebh(table, alpha);
            break;
        case Method::hier_p1_bh:
            table = hierarchical_pvalues(cs, ts2, HierPVariant::outcome_score, monotone_ok);
            rej = bh(table, alpha);
            break;
        case Method::hier_p2_bh:
            table = hierarchical_pvalues(cs, ts2, HierPVariant::clipped);
            rej = bh(table, alpha);
            break;
        case Method::derandomized:
            table = derandomized_evalues(cs, ts2, alpha_tilde, opt.budget);
            rej = ebh(table, alpha);
            break;
        case Method::averaged:
            table = averaged_evalues(cs, ts2, alpha_tilde, opt.r, derive_seed(opt.seed, 0xAE));
            rej = ebh(table, alpha);
            break;
        case Method::joint_group_global:
            table = subsampling_evalues(cs, ts2, draw, alpha_tilde);
            group_global_evalues(table);
            rej = ebh(table, alpha);
            break;
        case Method::joint_group_general: {
            table = subsampling_evalues(cs, ts2, draw, alpha_tilde);
            Predictor mu_for_groups = mu;
            if (!mu_for_groups) // external predictions: group scores need a predictor
                throw ConfigError(
                    "joint-group-general with external predictions is not supported; "
                    "supply --train or use the built-in predictor");
            GroupEValues ge = group_general_evalues(
                cal, test, [&] {
                    GroupScoreSpec spec;
                    spec.score = [mu_for_groups](const Group& grp, std::size_t r, double cutoff) {
                        std::span<const double> g = grp.g ? std::span<const double>(*grp.g)
                                                          : std::span<const double>();
                        double m = 0.0;
                        for (std::size_t i = 0; i < r; ++i) m += mu_for_groups(g, grp.units[i].x);
                        return cutoff - m / static_cast<double>(r);
                    };
                    spec.h = [](const Group& grp, std::size_t r) {
                        double m = 0.0;
                        for (std::size_t i = 0; i < r; ++i) {
                            if (!grp.units[i].y)
                                throw RoleError("group aggregation needs outcomes");
                            m += *grp.units[i].y;
                        }
                        return m / static_cast<double>(r);
                    };
                    spec.cutoff = [&](const Group&, std::size_t) { return opt.group_cutoff; };
                    return spec;
                }(),
                alpha_tilde, PrefixMode::first_r, derive_seed(opt.seed, 0x96));
            table.group_values = std::move(ge.values);
            table.group_threshold = std::move(ge.thresholds);
            rej = ebh(table, alpha);
            break;
        }
        case Method::weighted: {
            std::vector<double> w_cal = dataset_weights(cal, "calibration");
            std::vector<double> w_test = dataset_weights(test, "test");
            table = weighted_subsampling_evalues(cs, ts2, draw, w_cal, w_test, alpha_tilde);
            rej = ebh(table, alpha);
            break;
        }
        case Method::ite_subsampling:
            table = ite_subsampling_evalues(cs, ts2, draw, alpha_tilde, monotone_ok);
            rej = ebh(table, alpha);
            break;
        case Method::ite_hierarchical:
            table = ite_hierarchical_evalues(cs, ts2, alpha_tilde, monotone_ok);
            rej = ebh(table, alpha);
            break;
    }

    write_selection_csv(opt.out_path, table, rej, test);
    std::cout << "selected " << rej.rejected.size() << " of " << rej.n_hypotheses
              << " hypotheses -> " << opt.out_path << "\n";
    return 0;
}

int cmd_validate(const std::string& method, const std::string& config_path,
                 std::optional<std::size_t> n_reps, std::optional<double> alpha,
                 std::optional<std::uint64_t> seed, const std::string& out_path) {
    ConfigMap cfg;
    if (!config_path.empty()) cfg = parse_config_file(config_path);
    ValidityConfig vc = make_validity_config(cfg);
    if (n_reps) vc.n_reps = *n_reps;
    if (alpha) vc.alpha = *alpha;
    if (seed) vc.seed = *seed;

    ValidityReport report = run_validity(method, vc);
    json out{{"method", report.method}, {"n_reps", report.n_reps}, {"mean", report.mean},
             {"se", report.se},         {"bound", report.bound},   {"pass", report.pass},
             {"version", kVersion}};
    if (out_path.empty()) {
        std::cout << out.dump(2) << '\n';
    } else {
        std::ofstream f(out_path);
        f << out.dump(2) << '\n';
        std::cout << (report.pass ? "pass" : "FAIL") << " -> " << out_path << "\n";
    }
    return 0;
}

} // namespace

int run_cli(const std::vector<std::string>& args) {
    CLI::App app{"conformal selection for hierarchical data"};
    app.require_subcommand(1);

    // simulate
    auto* sim = app.add_subcommand("simulate", "run a Monte Carlo experiment from a config file");
    std::string sim_config, sim_out = "results.csv";
    std::uint64_t sim_seed = 0;
    bool sim_seed_set = false, paper_scale = false;
    int sim_threads = 0;
    sim->add_option("--config", sim_config, "experiment config file")->required();
    sim->add_option("--out", sim_out, "result CSV path");
    sim->add_option("--seed", sim_seed, "master seed override");
    sim->add_option("--threads", sim_threads, "worker threads");
    sim->add_flag("--paper-scale", paper_scale,
                  "full-size configuration (p_G=10, p=20, K=200, 500 trials)");

    // select
    auto* sel = app.add_subcommand("select", "run selection on user data");
    SelectOptions opt;
    sel->add_option("--calibration", opt.calibration_path, "calibration CSV")->required();
    sel->add_option("--test", opt.test_path, "test CSV")->required();
    sel->add_option("--out", opt.out_path, "selection CSV path");
    sel->add_option("--predictions", opt.predictions_path,
                    "external predictions CSV (group_id,unit_index,mu)");
    sel->add_option("--train", opt.train_path, "training CSV for the built-in ridge baseline");
    sel->add_option("--method", opt.method, "selection method");
    sel->add_option("--alpha", opt.alpha, "target FDR level");
    double at_val = 0.0;
    bool at_set = false;
    sel->add_option("--alpha-tilde", at_val, "stopping level (default 0.9*alpha)");
    sel->add_option("--cutoff", opt.cutoff, "constant outcome threshold c");
    sel->add_option("--group-cutoff", opt.group_cutoff, "group-level threshold");
    sel->add_option("--ite-shift", opt.ite_shift, "ITE threshold c (shifted comparison)");
    sel->add_option("--seed", opt.seed, "seed for subsampling/boosting");
    sel->add_option("--r", opt.r, "number of draws for method 'averaged'");
    sel->add_option("--boost", opt.boost, "boost mode: none|external");
    sel->add_option("--budget", opt.budget, "derandomized enumeration budget");

    // validate
    auto* val = app.add_subcommand("validate", "Monte Carlo check of an e/p-value bound");
    std::string val_method, val_config, val_out;
    std::size_t val_reps = 0;
    double val_alpha = 0.0;
    bool val_alpha_set = false;
    std::uint64_t val_seed = 0;
    bool val_seed_set = false;
    val->add_option("--method", val_method, "construction to check")->required();
    val->add_option("--config", val_config, "optional config file");
    val->add_option("--n-reps", val_reps, "number of replications");
    val->add_option("--alpha", val_alpha, "level for p-value checks");
    val->add_option("--seed", val_seed, "seed");
    val->add_option("--out", val_out, "report JSON path (default: stdout)");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }
    sim_seed_set = sim->count("--seed") > 0;
    at_set = sel->count("--alpha-tilde") > 0;
    val_alpha_set = val->count("--alpha") > 0;
    val_seed_set = val->count("--seed") > 0;
    const bool val_reps_set = val->count("--n-reps") > 0;

    try {
        if (sim->parsed())
            return cmd_simulate(sim_config, sim_out,
                                sim_seed_set ? std::optional<std::uint64_t>(sim_seed)
                                             : std::nullopt,
                                sim_threads > 0 ? std::optional<int>(sim_threads) : std::nullopt,
                                paper_scale);
        if (sel->parsed()) {
            if (at_set) opt.alpha_tilde = at_val;
            return cmd_select(opt);
        }
        if (val->parsed())
            return cmd_validate(val_method, val_config,
                                val_reps_set ? std::optional<std::size_t>(val_reps)
                                             : std::nullopt,
                                val_alpha_set ? std::optional<double>(val_alpha) : std::nullopt,
                                val_seed_set ? std::optional<std::uint64_t>(val_seed)
                                             : std::nullopt,
                                val_out);
        std::cerr << "no subcommand given\n";
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.exit_code;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 4;
    }
}

} // namespace hiersel
