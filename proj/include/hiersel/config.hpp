#pragma once

#include "hiersel/simulation.hpp"

#include <map>
#include <string>
#include <vector>

namespace hiersel {

// Flat key = value document; '#' starts a comment, blank lines ignored.
using ConfigMap = std::map<std::string, std::string>;

ConfigMap parse_config_file(const std::string& path);
ConfigMap parse_config_text(const std::string& text);

// Keys (all optional unless noted): methods (comma list, required for
// simulate), alphas, alpha_tilde_factor, K, M, K_train, n_trials, seed,
// threads, p_G, p, lambda, sigma, cutoff, constant_group_size, r, boost,
// budget, tilt, tilt_coord, tilt_theta, p_A, effect, tau, ite_shift,
// group_cutoff, alpha_tilde_group_factor.
struct SimulatePlan {
    std::vector<Method> methods;
    ExperimentSpec base; // method field is overwritten per run
};

SimulatePlan make_simulate_plan(const ConfigMap& cfg, bool paper_scale);
ValidityConfig make_validity_config(const ConfigMap& cfg);

// Paper-scale defaults: p_G=10, p=20, K=200, M=20, 500 trials, cutoff 20.
void apply_paper_scale(ExperimentSpec& spec);

} // namespace hiersel
