#include "hiersel/scoring.hpp"
#include "hiersel/common.hpp"
#include "hiersel/csv.hpp"

#include <cmath>
#include <limits>
#include <map>

namespace hiersel {

std::size_t ScoreSet::n_units() const {
    std::size_t n = 0;
    for (const auto& grp : Vhat) n += grp.size();
    return n;
}

std::vector<std::size_t> ScoreSet::group_sizes() const {
    std::vector<std::size_t> sizes;
    sizes.reserve(Vhat.size());
    for (const auto& grp : Vhat) sizes.push_back(grp.size());
    return sizes;
}

ThresholdFunction constant_threshold(double c) {
    return {[c](std::span<const double>) { return c; }};
}

ScoreFunction residual_score(Predictor mu) {
    ScoreFunction s;
    s.monotone = true;
    s.eval = [mu = std::move(mu)](std::span<const double> g, std::span<const double> x,
                                  double v) { return v - mu(g, x); };
    return s;
}

ScoreFunction clipped_score(ScoreFunction s, ThresholdFunction c) {
    ScoreFunction out;
    out.monotone = true;
    out.eval = [s = std::move(s), c = std::move(c)](std::span<const double> g,
                                                    std::span<const double> x, double v) {
        double cx = c.eval(x);
        if (v <= cx) return s.eval(g, x, cx);
        return std::numeric_limits<double>::infinity();
    };
    return out;
}

ScoreSet compute_scores(const HierarchicalDataset& ds, const ScoreFunction& s,
                        const ThresholdFunction& c) {
    constexpr double nan = std::numeric_limits<double>::quiet_NaN();
    ScoreSet out;
    const std::size_t K = ds.groups.size();
    out.C.resize(K);
    out.Vhat.resize(K);
    out.V.resize(K);
    out.null_ind.resize(K);
    for (std::size_t k = 0; k < K; ++k) {
        const Group& grp = ds.groups[k];
        std::span<const double> g =
            grp.g ? std::span<const double>(*grp.g) : std::span<const double>();
        out.C[k].reserve(grp.size());
        out.Vhat[k].reserve(grp.size());
        out.V[k].reserve(grp.size());
        out.null_ind[k].reserve(grp.size());
        for (std::size_t i = 0; i < grp.size(); ++i) {
            const Unit& u = grp.units[i];
            try {
                double cx = c.eval(u.x);
                out.C[k].push_back(cx);
                out.Vhat[k].push_back(s.eval(g, u.x, cx));
                if (u.y) {
                    out.V[k].push_back(s.eval(g, u.x, *u.y));
                    out.null_ind[k].push_back(*u.y <= cx ? 1 : 0);
                } else {
                    out.V[k].push_back(nan);
                    out.null_ind[k].push_back(-1);
                }
            } catch (const Error&) {
                throw;
            } catch (const std::exception& e) {
                throw ConfigError("score evaluation failed at group " + std::to_string(k) +
                                  " ('" + grp.id + "'), unit " + std::to_string(i) + ": " +
                                  e.what());
            }
        }
    }
    return out;
}

bool check_monotonicity(const ScoreFunction& s,
                        const std::vector<std::vector<double>>& probe_xs,
                        const std::vector<std::pair<double, double>>& probe_pairs) {
    if (probe_xs.empty() || probe_pairs.empty())
        throw ConfigError("check_monotonicity requires nonempty probes");
    for (const auto& x : probe_xs) {
        for (auto [v1, v2] : probe_pairs) {
            if (v1 > v2) std::swap(v1, v2);
            if (s.eval({}, x, v1) > s.eval({}, x, v2)) return false;
        }
    }
    return true;
}

bool check_monotonicity_on(const ScoreFunction& s, const HierarchicalDataset& ds) {
    if (!s.monotone) return false;
    std::vector<std::vector<double>> xs;
    for (const auto& grp : ds.groups)
        for (const auto& u : grp.units) {
            xs.push_back(u.x);
            if (xs.size() >= 64) break;
        }
    if (xs.empty()) throw ConfigError("monotonicity check needs at least one unit");
    std::vector<std::pair<double, double>> pairs;
    for (int a = -5; a < 5; ++a)
        for (int b = a + 1; b <= 5; ++b) pairs.emplace_back(2.0 * a, 2.0 * b);
    // probe with group features when present, else without
    for (const auto& grp : ds.groups) {
        std::span<const double> g =
            grp.g ? std::span<const double>(*grp.g) : std::span<const double>();
        for (const auto& x : xs)
            for (auto [v1, v2] : pairs)
                if (s.eval(g, x, v1) > s.eval(g, x, v2)) return false;
        break; // one group's features suffice as probe context
    }
    return true;
}

namespace {

// Cholesky solve of the SPD system M b = rhs; M is overwritten.
std::vector<double> cholesky_solve(std::vector<std::vector<double>>& M, std::vector<double> rhs) {
    const std::size_t n = M.size();
    for (std::size_t j = 0; j < n; ++j) {
        double d = M[j][j];
        for (std::size_t k = 0; k < j; ++k) d -= M[j][k] * M[j][k];
        if (d <= 0) throw InvariantError("ridge normal equations are not positive definite");
        M[j][j] = std::sqrt(d);
        for (std::size_t i = j + 1; i < n; ++i) {
            double v = M[i][j];
            for (std::size_t k = 0; k < j; ++k) v -= M[i][k] * M[j][k];
            M[i][j] = v / M[j][j];
        }
    }
    for (std::size_t i = 0; i < n; ++i) { // forward
        for (std::size_t k = 0; k < i; ++k) rhs[i] -= M[i][k] * rhs[k];
        rhs[i] /= M[i][i];
    }
    for (std::size_t i = n; i-- > 0;) { // backward, with M^T
        for (std::size_t k = i + 1; k < n; ++k) rhs[i] -= M[k][i] * rhs[k];
        rhs[i] /= M[i][i];
    }
    return rhs;
}

} // namespace

Predictor fit_ridge(const std::vector<const HierarchicalDataset*>& data, double lambda) {
    if (data.empty()) throw ConfigError("fit_ridge: no data");
    const int p = data.front()->p;
    const int p_G = data.front()->p_G;
    const std::size_t q = 1 + static_cast<std::size_t>(p_G) + static_cast<std::size_t>(p);

    std::vector<std::vector<double>> gram(q, std::vector<double>(q, 0.0));
    std::vector<double> xty(q, 0.0);
    std::vector<double> row(q);
    std::size_t n = 0;
    for (const auto* ds : data) {
        for (const auto& grp : ds->groups) {
            for (const auto& u : grp.units) {
                if (!u.y) continue;
                row[0] = 1.0;
                for (int i = 0; i < p_G; ++i) row[1 + i] = grp.g ? (*grp.g)[i] : 0.0;
                for (int i = 0; i < p; ++i) row[1 + p_G + i] = u.x[i];
                for (std::size_t a = 0; a < q; ++a) {
                    for (std::size_t b = 0; b <= a; ++b) gram[a][b] += row[a] * row[b];
                    xty[a] += row[a] * (*u.y);
                }
                ++n;
            }
        }
    }
    if (n == 0) throw ConfigError("fit_ridge: no units with outcomes");
    for (std::size_t a = 0; a < q; ++a) {
        for (std::size_t b = a + 1; b < q; ++b) gram[a][b] = gram[b][a];
        if (a > 0) gram[a][a] += lambda; // intercept unpenalized
    }
    std::vector<double> beta = cholesky_solve(gram, std::move(xty));

    return [beta, p, p_G](std::span<const double> g, std::span<const double> x) {
        double v = beta[0];
        for (int i = 0; i < p_G; ++i) v += beta[1 + i] * (i < static_cast<int>(g.size()) ? g[i] : 0.0);
        for (int i = 0; i < p; ++i) v += beta[1 + p_G + i] * x[i];
        return v;
    };
}

Predictor fit_ridge(const HierarchicalDataset& data, double lambda) {
    return fit_ridge(std::vector<const HierarchicalDataset*>{&data}, lambda);
}

PredictionTable predictions_from(const HierarchicalDataset& ds, const Predictor& mu) {
    PredictionTable t;
    t.mu.resize(ds.groups.size());
    for (std::size_t k = 0; k < ds.groups.size(); ++k) {
        const Group& grp = ds.groups[k];
        std::span<const double> g =
            grp.g ? std::span<const double>(*grp.g) : std::span<const double>();
        t.mu[k].reserve(grp.size());
        for (const auto& u : grp.units) t.mu[k].push_back(mu(g, u.x));
    }
    return t;
}

PredictionTable load_predictions(const std::string& path, const HierarchicalDataset& ds) {
    CsvTable t = read_csv(path);
    std::size_t id_col = t.require_column("group_id");
    std::size_t idx_col = t.require_column("unit_index");
    std::size_t mu_col = t.require_column("mu");

    std::map<std::string, std::size_t> group_of;
    for (std::size_t k = 0; k < ds.groups.size(); ++k) group_of[ds.groups[k].id] = k;

    constexpr double nan = std::numeric_limits<double>::quiet_NaN();
    PredictionTable out;
    out.mu.resize(ds.groups.size());
    for (std::size_t k = 0; k < ds.groups.size(); ++k)
        out.mu[k].assign(ds.groups[k].size(), nan);

    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        std::string ctx = path + " row " + std::to_string(r + 2);
        auto it = group_of.find(t.rows[r][id_col]);
        if (it == group_of.end()) continue; // one file may cover several datasets
        auto idx = static_cast<std::size_t>(parse_double(t.rows[r][idx_col], ctx));
        if (idx >= out.mu[it->second].size())
            throw SchemaError(ctx + ": unit_index " + std::to_string(idx) +
                              " out of range for group '" + t.rows[r][id_col] + "'");
        out.mu[it->second][idx] = parse_double(t.rows[r][mu_col], ctx);
    }
    for (std::size_t k = 0; k < out.mu.size(); ++k)
        for (std::size_t i = 0; i < out.mu[k].size(); ++i)
            if (std::isnan(out.mu[k][i]))
                throw SchemaError(path + ": no prediction for group '" + ds.groups[k].id +
                                  "', unit " + std::to_string(i));
    return out;
}

ScoreSet residual_scores(const HierarchicalDataset& ds, const PredictionTable& mu,
                         const ThresholdFunction& c) {
    constexpr double nan = std::numeric_limits<double>::quiet_NaN();
    ScoreSet out;
    const std::size_t K = ds.groups.size();
    if (mu.mu.size() != K)
        throw DimensionError("prediction table has " + std::to_string(mu.mu.size()) +
                             " groups, dataset has " + std::to_string(K));
    out.C.resize(K);
    out.Vhat.resize(K);
    out.V.resize(K);
    out.null_ind.resize(K);
    for (std::size_t k = 0; k < K; ++k) {
        const Group& grp = ds.groups[k];
        if (mu.mu[k].size() != grp.size())
            throw DimensionError("prediction table group " + std::to_string(k) +
                                 " size mismatch");
        for (std::size_t i = 0; i < grp.size(); ++i) {
            const Unit& u = grp.units[i];
            double cx = c.eval(u.x);
            out.C[k].push_back(cx);
            out.Vhat[k].push_back(cx - mu.mu[k][i]);
            if (u.y) {
                out.V[k].push_back(*u.y - mu.mu[k][i]);
                out.null_ind[k].push_back(*u.y <= cx ? 1 : 0);
            } else {
                out.V[k].push_back(nan);
                out.null_ind[k].push_back(-1);
            }
        }
    }
    return out;
}

} // namespace hiersel
