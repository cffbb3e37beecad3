#include "hiersel/data_model.hpp"
#include "hiersel/common.hpp"
#include "hiersel/csv.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <random>

namespace hiersel {

std::size_t HierarchicalDataset::n_units() const {
    std::size_t n = 0;
    for (const auto& grp : groups) n += grp.size();
    return n;
}

std::vector<std::size_t> HierarchicalDataset::group_sizes() const {
    std::vector<std::size_t> sizes;
    sizes.reserve(groups.size());
    for (const auto& grp : groups) sizes.push_back(grp.size());
    return sizes;
}

std::vector<Violation> validate(const HierarchicalDataset& ds) {
    std::vector<Violation> out;
    if (ds.p <= 0)
        out.push_back({0, -1, "feature dimension p must be positive"});
    for (std::size_t k = 0; k < ds.groups.size(); ++k) {
        const Group& grp = ds.groups[k];
        if (grp.units.empty())
            out.push_back({k, -1, "group '" + grp.id + "' is empty"});
        if (grp.g && static_cast<int>(grp.g->size()) != ds.p_G)
            out.push_back({k, -1, "group '" + grp.id + "' has " +
                                      std::to_string(grp.g->size()) +
                                      " group features, expected " + std::to_string(ds.p_G)});
        for (std::size_t i = 0; i < grp.units.size(); ++i) {
            const Unit& u = grp.units[i];
            if (static_cast<int>(u.x.size()) != ds.p)
                out.push_back({k, static_cast<std::ptrdiff_t>(i),
                               "unit has " + std::to_string(u.x.size()) +
                                   " features, expected " + std::to_string(ds.p)});
            if (ds.role == DatasetRole::calibration && !u.y)
                out.push_back({k, static_cast<std::ptrdiff_t>(i),
                               "calibration unit is missing its outcome"});
        }
    }
    return out;
}

void require_valid(const HierarchicalDataset& ds) {
    auto violations = validate(ds);
    if (violations.empty()) return;
    const Violation& v = violations.front();
    std::string where = "group " + std::to_string(v.group) +
                        (v.unit >= 0 ? ", unit " + std::to_string(v.unit) : "");
    std::string msg = v.message + " (" + where + ")";
    if (v.message.find("outcome") != std::string::npos) throw RoleError(msg);
    throw DimensionError(msg);
}

namespace {

// Columns named <prefix>0, <prefix>1, ... must form a contiguous block.
std::vector<std::string> detect_indexed(const CsvTable& t, const std::string& prefix) {
    std::size_t count = 0;
    for (const auto& name : t.header)
        if (name.size() > prefix.size() && name.compare(0, prefix.size(), prefix) == 0) {
            bool digits = true;
            for (std::size_t i = prefix.size(); i < name.size(); ++i)
                digits = digits && std::isdigit(static_cast<unsigned char>(name[i]));
            if (digits) ++count;
        }
    std::vector<std::string> cols;
    for (std::size_t i = 0; i < count; ++i) {
        std::string name = prefix + std::to_string(i);
        if (!t.column(name))
            throw SchemaError("feature columns are not contiguous: expected '" + name + "'");
        cols.push_back(name);
    }
    return cols;
}

} // namespace

HierarchicalDataset load_csv(const std::string& path, DatasetRole role, const CsvSchema& schema) {
    CsvTable t = read_csv(path);

    CsvSchema s = schema;
    if (s.auto_detect) {
        if (s.feature_cols.empty()) s.feature_cols = detect_indexed(t, "x_");
        if (s.group_feature_cols.empty()) s.group_feature_cols = detect_indexed(t, "g_");
        if (s.outcome_col && !t.column(*s.outcome_col)) s.outcome_col.reset();
        if (s.treated_col && !t.column(*s.treated_col)) s.treated_col.reset();
        if (s.weight_col && !t.column(*s.weight_col)) s.weight_col.reset();
    }
    if (s.feature_cols.empty())
        throw SchemaError(path + ": no feature columns (x_0..x_{p-1}) found");
    if (role == DatasetRole::calibration && !s.outcome_col)
        throw RoleError(path + ": calibration dataset requires an outcome column");

    std::size_t id_col = t.require_column(s.group_id_col);
    std::vector<std::size_t> x_cols, g_cols;
    for (const auto& name : s.feature_cols) x_cols.push_back(t.require_column(name));
    for (const auto& name : s.group_feature_cols) g_cols.push_back(t.require_column(name));
    std::optional<std::size_t> y_col, treated_col, w_col;
    if (s.outcome_col) y_col = t.require_column(*s.outcome_col);
    if (s.treated_col) treated_col = t.require_column(*s.treated_col);
    if (s.weight_col) w_col = t.require_column(*s.weight_col);

    HierarchicalDataset ds;
    ds.role = role;
    ds.p = static_cast<int>(x_cols.size());
    ds.p_G = static_cast<int>(g_cols.size());

    std::map<std::string, std::size_t> group_index; // id -> position, first appearance order
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        const auto& row = t.rows[r];
        const std::string& id = row[id_col];
        std::string ctx = path + " row " + std::to_string(r + 2);

        auto it = group_index.find(id);
        if (it == group_index.end()) {
            it = group_index.emplace(id, ds.groups.size()).first;
            Group grp;
            grp.id = id;
            if (!g_cols.empty()) {
                std::vector<double> g;
                for (auto c : g_cols) g.push_back(parse_double(row[c], ctx));
                grp.g = std::move(g);
            }
            if (treated_col) {
                double a = parse_double(row[*treated_col], ctx);
                if (a != 0.0 && a != 1.0)
                    throw SchemaError(ctx + ": treated must be 0 or 1");
                grp.treated = (a == 1.0);
            }
            if (w_col) grp.weight = parse_double(row[*w_col], ctx);
            ds.groups.push_back(std::move(grp));
        } else {
            Group& grp = ds.groups[it->second];
            // group-constant columns must not vary within a group id
            if (!g_cols.empty()) {
                for (std::size_t gi = 0; gi < g_cols.size(); ++gi)
                    if (parse_double(row[g_cols[gi]], ctx) != (*grp.g)[gi])
                        throw SchemaError(ctx + ": group feature g_" + std::to_string(gi) +
                                          " varies within group '" + id + "'");
            }
            if (treated_col) {
                double a = parse_double(row[*treated_col], ctx);
                if (grp.treated != (a == 1.0))
                    throw SchemaError(ctx + ": treated varies within group '" + id + "'");
            }
            if (w_col && parse_double(row[*w_col], ctx) != *grp.weight)
                throw SchemaError(ctx + ": weight varies within group '" + id + "'");
        }

        Unit u;
        for (auto c : x_cols) u.x.push_back(parse_double(row[c], ctx));
        if (y_col && !row[*y_col].empty()) u.y = parse_double(row[*y_col], ctx);
        if (role == DatasetRole::calibration && !u.y)
            throw RoleError(ctx + ": calibration unit is missing its outcome");
        ds.groups[it->second].units.push_back(std::move(u));
    }

    require_valid(ds);
    return ds;
}

void write_csv(const std::string& path, const HierarchicalDataset& ds) {
    CsvTable t;
    t.header.push_back("group_id");
    for (int i = 0; i < ds.p; ++i) t.header.push_back("x_" + std::to_string(i));
    bool any_y = false, any_g = false, any_treated = false, any_w = false;
    for (const auto& grp : ds.groups) {
        any_g = any_g || grp.g.has_value();
        any_treated = any_treated || grp.treated.has_value();
        any_w = any_w || grp.weight.has_value();
        for (const auto& u : grp.units) any_y = any_y || u.y.has_value();
    }
    if (any_y) t.header.push_back("y");
    if (any_g)
        for (int i = 0; i < ds.p_G; ++i) t.header.push_back("g_" + std::to_string(i));
    if (any_treated) t.header.push_back("treated");
    if (any_w) t.header.push_back("w");

    for (const auto& grp : ds.groups) {
        for (const auto& u : grp.units) {
            std::vector<std::string> row;
            row.push_back(grp.id);
            for (double v : u.x) row.push_back(format_double(v));
            if (any_y) row.push_back(u.y ? format_double(*u.y) : "");
            if (any_g)
                for (int i = 0; i < ds.p_G; ++i)
                    row.push_back(grp.g ? format_double((*grp.g)[i]) : "");
            if (any_treated)
                row.push_back(grp.treated ? (*grp.treated ? "1" : "0") : "");
            if (any_w) row.push_back(grp.weight ? format_double(*grp.weight) : "");
            t.rows.push_back(std::move(row));
        }
    }
    write_csv(path, t);
}

std::pair<HierarchicalDataset, HierarchicalDataset>
split_groups(const HierarchicalDataset& ds, std::size_t n_first,
             std::optional<std::uint64_t> shuffle_seed) {
    if (n_first > ds.groups.size())
        throw ConfigError("split point " + std::to_string(n_first) + " exceeds group count " +
                          std::to_string(ds.groups.size()));
    std::vector<std::size_t> order(ds.groups.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    if (shuffle_seed) {
        std::mt19937_64 rng(mix64(*shuffle_seed));
        std::shuffle(order.begin(), order.end(), rng);
    }
    HierarchicalDataset first, second;
    first.role = second.role = ds.role;
    first.p = second.p = ds.p;
    first.p_G = second.p_G = ds.p_G;
    for (std::size_t i = 0; i < order.size(); ++i)
        (i < n_first ? first : second).groups.push_back(ds.groups[order[i]]);
    return {std::move(first), std::move(second)};
}

} // namespace hiersel
