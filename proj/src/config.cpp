#include "hiersel/config.hpp"
#include "hiersel/common.hpp"
#include "hiersel/csv.hpp"

#include <fstream>
#include <sstream>

namespace hiersel {

namespace {

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

double get_double(const ConfigMap& cfg, const std::string& key, double fallback) {
    auto it = cfg.find(key);
    if (it == cfg.end()) return fallback;
    return parse_double(it->second, "config key '" + key + "'");
}

std::uint64_t get_u64(const ConfigMap& cfg, const std::string& key, std::uint64_t fallback) {
    auto it = cfg.find(key);
    if (it == cfg.end()) return fallback;
    try {
        return std::stoull(it->second);
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "' is not an integer: '" + it->second + "'");
    }
}

std::vector<double> get_list(const ConfigMap& cfg, const std::string& key,
                             std::vector<double> fallback) {
    auto it = cfg.find(key);
    if (it == cfg.end()) return fallback;
    std::vector<double> out;
    std::stringstream ss(it->second);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        tok = trim(tok);
        if (!tok.empty()) out.push_back(parse_double(tok, "config key '" + key + "'"));
    }
    if (out.empty()) throw ConfigError("config key '" + key + "' is an empty list");
    return out;
}

} // namespace

ConfigMap parse_config_text(const std::string& text) {
    ConfigMap out;
    std::stringstream ss(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) +
                              ": expected 'key = value'");
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
        out[key] = value;
    }
    return out;
}

ConfigMap parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

void apply_paper_scale(ExperimentSpec& spec) {
    spec.K = 200;
    spec.M = 20;
    spec.K_train = 100;
    spec.n_trials = 500;
    spec.dgp = make_dgp(10, 20, spec.dgp.lambda, spec.dgp.sigma, 20.0, spec.dgp.param_seed);
}

SimulatePlan make_simulate_plan(const ConfigMap& cfg, bool paper_scale) {
    SimulatePlan plan;
    auto it = cfg.find("methods");
    if (it == cfg.end()) it = cfg.find("method");
    if (it == cfg.end()) throw ConfigError("config must name at least one method");
    {
        std::stringstream ss(it->second);
        std::string tok;
        while (std::getline(ss, tok, ',')) {
            tok = trim(tok);
            if (!tok.empty()) plan.methods.push_back(parse_method(tok));
        }
    }
    if (plan.methods.empty()) throw ConfigError("config must name at least one method");

    ExperimentSpec& s = plan.base;
    s.alphas = get_list(cfg, "alphas", s.alphas);
    s.alpha_tilde_factor = get_double(cfg, "alpha_tilde_factor", s.alpha_tilde_factor);
    s.K = static_cast<std::size_t>(get_u64(cfg, "K", s.K));
    s.M = static_cast<std::size_t>(get_u64(cfg, "M", s.M));
    s.K_train = static_cast<std::size_t>(get_u64(cfg, "K_train", s.K_train));
    s.n_trials = static_cast<std::size_t>(get_u64(cfg, "n_trials", s.n_trials));
    s.master_seed = get_u64(cfg, "seed", s.master_seed);
    s.threads = static_cast<int>(get_u64(cfg, "threads", 1));

    int p_G = static_cast<int>(get_u64(cfg, "p_G", 3));
    int p = static_cast<int>(get_u64(cfg, "p", 5));
    double lambda = get_double(cfg, "lambda", 5.0);
    double sigma = get_double(cfg, "sigma", 1.0);
    double cutoff = get_double(cfg, "cutoff", 4.0);
    s.dgp = make_dgp(p_G, p, lambda, sigma, cutoff, get_u64(cfg, "param_seed", 1));
    if (auto c = cfg.find("constant_group_size"); c != cfg.end()) {
        auto n = static_cast<std::size_t>(get_u64(cfg, "constant_group_size", 0));
        if (n > 0) s.dgp.constant_group_size = n;
    }

    s.r = static_cast<int>(get_u64(cfg, "r", static_cast<std::uint64_t>(s.r)));
    s.derand_budget = get_u64(cfg, "budget", s.derand_budget);
    if (auto b = cfg.find("boost"); b != cfg.end()) {
        if (b->second == "none") s.boost = BoostMode::none;
        else if (b->second == "external") s.boost = BoostMode::external;
        else if (b->second == "internal") s.boost = BoostMode::internal;
        else throw ConfigError("boost must be none, external, or internal");
    }

    if (auto t = cfg.find("tilt"); t != cfg.end()) {
        if (t->second == "none") s.tilt = TiltKind::none;
        else if (t->second == "truncation") s.tilt = TiltKind::truncation;
        else if (t->second == "exponential") s.tilt = TiltKind::exponential;
        else throw ConfigError("tilt must be none, truncation, or exponential");
    }
    s.tilt_coord = static_cast<int>(get_u64(cfg, "tilt_coord", 0));
    s.tilt_theta = get_double(cfg, "tilt_theta", s.tilt_theta);

    s.p_A = get_double(cfg, "p_A",
                       static_cast<double>(s.K) / static_cast<double>(s.K + s.M));
    if (auto e = cfg.find("effect"); e != cfg.end()) {
        if (e->second == "zero") s.effect = EffectKind::zero;
        else if (e->second == "covariate_sign") s.effect = EffectKind::covariate_sign;
        else throw ConfigError("effect must be zero or covariate_sign");
    }
    s.tau = get_double(cfg, "tau", s.tau);
    s.ite_shift = get_double(cfg, "ite_shift", s.ite_shift);
    s.group_cutoff = get_double(cfg, "group_cutoff", s.group_cutoff);
    s.alpha_tilde_group_factor =
        get_double(cfg, "alpha_tilde_group_factor", s.alpha_tilde_group_factor);

    if (paper_scale) apply_paper_scale(s);
    return plan;
}

ValidityConfig make_validity_config(const ConfigMap& cfg) {
    ValidityConfig vc;
    vc.K = static_cast<std::size_t>(get_u64(cfg, "K", vc.K));
    vc.M = static_cast<std::size_t>(get_u64(cfg, "M", vc.M));
    vc.n_reps = static_cast<std::size_t>(get_u64(cfg, "n_reps", vc.n_reps));
    vc.seed = get_u64(cfg, "seed", vc.seed);
    vc.alpha = get_double(cfg, "alpha", vc.alpha);
    vc.alpha_tilde_factor = get_double(cfg, "alpha_tilde_factor", vc.alpha_tilde_factor);
    int p_G = static_cast<int>(get_u64(cfg, "p_G", 3));
    int p = static_cast<int>(get_u64(cfg, "p", 5));
    vc.dgp = make_dgp(p_G, p, get_double(cfg, "lambda", 5.0), get_double(cfg, "sigma", 1.0),
                      get_double(cfg, "cutoff", 4.0), get_u64(cfg, "param_seed", 1));
    return vc;
}

} // namespace hiersel
