#include "hiersel/testing.hpp"
#include "hiersel/common.hpp"
#include "hiersel/csv.hpp"

#include <algorithm>
#include <cmath>

namespace hiersel {

namespace {

void require_alpha(double a) {
    if (!(a > 0.0 && a < 1.0))
        throw ConfigError("alpha must lie in (0,1), got " + format_double(a));
}

struct Entry {
    double value;
    HypothesisId id;
};

std::vector<Entry> collect(const EValueTable& table) {
    std::vector<Entry> entries;
    entries.reserve(table.n_hypotheses());
    for (std::size_t j = 0; j < table.values.size(); ++j)
        for (std::size_t i = 0; i < table.values[j].size(); ++i)
            entries.push_back({table.values[j][i], {j, static_cast<std::ptrdiff_t>(i)}});
    for (std::size_t j = 0; j < table.group_values.size(); ++j)
        entries.push_back({table.group_values[j], {j, -1}});
    return entries;
}

} // namespace

RejectionSet ebh(const EValueTable& table, double alpha) {
    require_alpha(alpha);
    if (table.kind != TableKind::evalue)
        throw ConfigError("e-BH requires an e-value table");
    std::vector<Entry> entries = collect(table);
    const std::size_t n = entries.size();
    std::vector<double> sorted;
    sorted.reserve(n);
    for (const auto& e : entries) sorted.push_back(e.value);
    std::sort(sorted.begin(), sorted.end(), std::greater<>());

    std::size_t l_star = 0;
    for (std::size_t l = 1; l <= n; ++l)
        if (sorted[l - 1] >= static_cast<double>(n) / (alpha * static_cast<double>(l)))
            l_star = l;

    RejectionSet out;
    out.n_hypotheses = n;
    if (l_star == 0) return out;
    const double cut = sorted[l_star - 1];
    for (const auto& e : entries)
        if (e.value >= cut) out.rejected.push_back(e.id);
    return out;
}

RejectionSet bh(const EValueTable& table, double alpha) {
    require_alpha(alpha);
    if (table.kind != TableKind::pvalue)
        throw ConfigError("BH requires a p-value table");
    std::vector<Entry> entries = collect(table);
    const std::size_t n = entries.size();
    std::vector<double> sorted;
    sorted.reserve(n);
    for (const auto& e : entries) sorted.push_back(e.value);
    std::sort(sorted.begin(), sorted.end());

    std::size_t k_star = 0;
    for (std::size_t k = 1; k <= n; ++k)
        if (sorted[k - 1] <= alpha * static_cast<double>(k) / static_cast<double>(n))
            k_star = k;

    RejectionSet out;
    out.n_hypotheses = n;
    if (k_star == 0) return out;
    const double cut = sorted[k_star - 1];
    for (const auto& e : entries)
        if (e.value <= cut) out.rejected.push_back(e.id);
    return out;
}

RejectionSet u_ebh(const EValueTable& table, double alpha, double u) {
    return ebh(boost_evalues(table, u), alpha);
}

SelectionMetrics metrics(const RejectionSet& rej, const TruthTable& truth) {
    std::size_t false_nulls_unit = 0, false_nulls_group = 0;
    for (const auto& grp : truth.unit_null)
        for (auto v : grp) false_nulls_unit += (v == 0);
    for (auto v : truth.group_null) false_nulls_group += (v == 0);

    std::size_t rej_unit = 0, rej_group = 0;
    std::size_t null_rej_unit = 0, null_rej_group = 0;
    std::size_t signal_rej_unit = 0, signal_rej_group = 0;
    for (const auto& id : rej.rejected) {
        if (id.is_group_level()) {
            if (id.group >= truth.group_null.size())
                throw DimensionError("rejection refers to a group hypothesis without truth");
            ++rej_group;
            if (truth.group_null[id.group]) ++null_rej_group;
            else ++signal_rej_group;
        } else {
            if (id.group >= truth.unit_null.size() ||
                static_cast<std::size_t>(id.unit) >= truth.unit_null[id.group].size())
                throw DimensionError("rejection refers to a unit hypothesis without truth");
            ++rej_unit;
            if (truth.unit_null[id.group][static_cast<std::size_t>(id.unit)]) ++null_rej_unit;
            else ++signal_rej_unit;
        }
    }

    auto ratio = [](std::size_t num, std::size_t den) {
        return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
    };
    SelectionMetrics m;
    m.fdp = ratio(null_rej_unit + null_rej_group, rej_unit + rej_group);
    m.power = ratio(signal_rej_unit + signal_rej_group, false_nulls_unit + false_nulls_group);
    if (!truth.group_null.empty()) {
        m.has_levels = true;
        m.fdp_individual = ratio(null_rej_unit, rej_unit);
        m.fdp_group = ratio(null_rej_group, rej_group);
        m.power_individual = ratio(signal_rej_unit, false_nulls_unit);
        m.power_group = ratio(signal_rej_group, false_nulls_group);
    }
    return m;
}

std::string metrics_json(const SelectionMetrics& m) {
    std::string out = "{\"fdp\": " + format_double(m.fdp) + ", \"power\": " +
                      format_double(m.power);
    if (m.has_levels) {
        out += ", \"fdp_individual\": " + format_double(m.fdp_individual);
        out += ", \"power_individual\": " + format_double(m.power_individual);
        out += ", \"fdp_group\": " + format_double(m.fdp_group);
        out += ", \"power_group\": " + format_double(m.power_group);
    }
    return out + "}";
}

void write_rejections_csv(const std::string& path, const RejectionSet& rej,
                          const EValueTable& table, const HierarchicalDataset& test) {
    std::vector<std::vector<std::uint8_t>> unit_sel(table.values.size());
    for (std::size_t j = 0; j < table.values.size(); ++j)
        unit_sel[j].assign(table.values[j].size(), 0);
    std::vector<std::uint8_t> group_sel(table.group_values.size(), 0);
    for (const auto& id : rej.rejected) {
        if (id.is_group_level()) group_sel[id.group] = 1;
        else unit_sel[id.group][static_cast<std::size_t>(id.unit)] = 1;
    }

    CsvTable t;
    t.header = {"group_id", "unit_index", "selected"};
    for (std::size_t j = 0; j < table.values.size(); ++j) {
        const std::string& id = test.groups[j].id;
        for (std::size_t i = 0; i < table.values[j].size(); ++i)
            t.rows.push_back({id, std::to_string(i), unit_sel[j][i] ? "1" : "0"});
        if (j < group_sel.size())
            t.rows.push_back({id, "", group_sel[j] ? "1" : "0"});
    }
    write_csv(path, t);
}

} // namespace hiersel
