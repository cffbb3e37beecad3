#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "hiersel/common.hpp"
#include "hiersel/csv.hpp"
#include "hiersel/simulation.hpp"
#include "hiersel/testing.hpp"

#include <algorithm>
#include <random>
#include <set>

using namespace hiersel;

namespace {

EValueTable table_of(std::vector<double> flat, TableKind kind = TableKind::evalue) {
    EValueTable t;
    t.kind = kind;
    for (double v : flat) t.values.push_back({v});
    return t;
}

std::multiset<double> rejected_values(const EValueTable& t, const RejectionSet& r) {
    std::multiset<double> out;
    for (const auto& id : r.rejected) {
        if (id.is_group_level()) out.insert(t.group_values[id.group]);
        else out.insert(t.values[id.group][static_cast<std::size_t>(id.unit)]);
    }
    return out;
}

bool same_ids(const RejectionSet& a, const RejectionSet& b) {
    auto key = [](const RejectionSet& r) {
        std::set<std::pair<std::size_t, std::ptrdiff_t>> s;
        for (const auto& id : r.rejected) s.insert({id.group, id.unit});
        return s;
    };
    return key(a) == key(b);
}

} // namespace

TEST_CASE("e-BH: worked numeric cases") {
    EValueTable t = table_of({10.0, 4.0, 0.5});
    RejectionSet r = ebh(t, 0.5);
    CHECK(rejected_values(t, r) == std::multiset<double>{10.0, 4.0});

    EValueTable ties = table_of({4.0, 4.0, 4.0});
    CHECK(ebh(ties, 0.5).rejected.size() == 3);

    EValueTable zeros = table_of({0.0, 0.0});
    CHECK(ebh(zeros, 0.5).rejected.empty());

    // boundary: a single e-value equal to n/alpha is rejected
    const double alpha = 0.3;
    EValueTable single = table_of({1.0 / alpha});
    CHECK(ebh(single, alpha).rejected.size() == 1);

    CHECK_THROWS_AS(ebh(table_of({0.5}, TableKind::pvalue), 0.5), ConfigError);
    CHECK_THROWS_AS(ebh(t, 1.5), ConfigError);
}

TEST_CASE("BH: worked numeric cases and the inclusive boundary") {
    EValueTable p = table_of({0.01, 0.02, 0.9}, TableKind::pvalue);
    RejectionSet r = bh(p, 0.1);
    CHECK(rejected_values(p, r) == std::multiset<double>{0.01, 0.02});

    EValueTable ones = table_of({1.0, 1.0, 1.0}, TableKind::pvalue);
    CHECK(bh(ones, 0.1).rejected.empty());

    const double alpha = 0.07;
    EValueTable boundary = table_of({alpha}, TableKind::pvalue);
    CHECK(bh(boundary, alpha).rejected.size() == 1);

    CHECK_THROWS_AS(bh(table_of({2.0}), 0.1), ConfigError);
}

TEST_CASE("U-eBH: identity at u = 1, threshold crossing, monotone in u") {
    EValueTable t = table_of({3.0, 3.0});
    CHECK(same_ids(u_ebh(t, 0.25, 1.0), ebh(t, 0.25)));
    CHECK(ebh(t, 0.25).rejected.empty()); // plain e-BH needs l*e >= 8
    CHECK(u_ebh(t, 0.25, 0.75).rejected.size() == 2);
    CHECK(u_ebh(t, 0.25, 0.76).rejected.empty());

    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> ev(0.0, 6.0), uu(0.05, 1.0);
    for (int rep = 0; rep < 200; ++rep) {
        std::vector<double> vals(6);
        for (auto& v : vals) v = ev(rng);
        EValueTable rt = table_of(vals);
        double u1 = uu(rng), u2 = uu(rng);
        if (u1 > u2) std::swap(u1, u2);
        auto r_small = u_ebh(rt, 0.2, u1), r_big = u_ebh(rt, 0.2, u2);
        std::multiset<double> small = rejected_values(rt, r_small);
        for (double v : rejected_values(rt, r_big)) {
            CHECK(small.count(v) > 0); // rejections under larger u are a subset
        }
    }
}

TEST_CASE("metrics: FDP and power with the 0/0 convention") {
    TruthTable truth;
    truth.unit_null = {{1, 0, 1, 0, 0}}; // three false nulls
    RejectionSet rej;
    rej.n_hypotheses = 5;
    rej.rejected = {{0, 0}, {0, 1}, {0, 2}, {0, 3}};
    SelectionMetrics m = metrics(rej, truth);
    CHECK(m.fdp == 0.5);
    CHECK(m.power == doctest::Approx(2.0 / 3.0));

    RejectionSet none;
    none.n_hypotheses = 5;
    SelectionMetrics m0 = metrics(none, truth);
    CHECK(m0.fdp == 0.0);
    CHECK(m0.power == 0.0);

    RejectionSet exact;
    exact.n_hypotheses = 5;
    exact.rejected = {{0, 1}, {0, 3}, {0, 4}};
    SelectionMetrics m1 = metrics(exact, truth);
    CHECK(m1.fdp == 0.0);
    CHECK(m1.power == 1.0);
}

TEST_CASE("metrics: joint tables produce per-level splits") {
    TruthTable truth;
    truth.unit_null = {{1, 0}, {0, 0}};
    truth.group_null = {1, 0};
    RejectionSet rej;
    rej.n_hypotheses = 6;
    rej.rejected = {{0, 0}, {0, 1}, {1, -1}};
    SelectionMetrics m = metrics(rej, truth);
    CHECK(m.has_levels);
    CHECK(m.fdp == doctest::Approx(1.0 / 3.0));
    CHECK(m.fdp_individual == 0.5);
    CHECK(m.fdp_group == 0.0);
    CHECK(m.power_individual == doctest::Approx(1.0 / 3.0));
    CHECK(m.power_group == 1.0);

    // invariance under relabeling of hypothesis ids (swap the two groups)
    TruthTable truth_swapped;
    truth_swapped.unit_null = {truth.unit_null[1], truth.unit_null[0]};
    truth_swapped.group_null = {truth.group_null[1], truth.group_null[0]};
    RejectionSet rej_swapped;
    rej_swapped.n_hypotheses = 6;
    rej_swapped.rejected = {{1, 0}, {1, 1}, {0, -1}};
    SelectionMetrics m2 = metrics(rej_swapped, truth_swapped);
    CHECK(m2.fdp == m.fdp);
    CHECK(m2.power == m.power);
}

TEST_CASE("metrics serialize to a flat JSON object") {
    SelectionMetrics m;
    m.fdp = 0.5;
    m.power = 0.25;
    CHECK(metrics_json(m) == "{\"fdp\": 0.5, \"power\": 0.25}");
    m.has_levels = true;
    m.fdp_group = 0.125;
    CHECK(metrics_json(m).find("\"fdp_group\": 0.125") != std::string::npos);
}

TEST_CASE("oracle_ebh: degenerate tables") {
    CHECK(oracle_ebh(table_of({0.0, 0.0, 0.0}), 0.3).rejected.empty());
    const double alpha = 0.25;
    EValueTable single = table_of({1.0 / alpha});
    CHECK(oracle_ebh(single, alpha).rejected.size() == 1);
}

TEST_CASE("e-BH equals the brute-force oracle on random tables") {
    std::mt19937_64 rng(7);
    std::uniform_int_distribution<int> nsize(1, 12);
    std::uniform_real_distribution<double> ev(0.0, 8.0);
    std::bernoulli_distribution zero(0.3), grouped(0.3);
    for (int rep = 0; rep < 1000; ++rep) {
        EValueTable t;
        t.kind = TableKind::evalue;
        int m = nsize(rng);
        t.values.resize(m);
        for (int j = 0; j < m; ++j) {
            int n = nsize(rng) % 4 + 1;
            for (int i = 0; i < n; ++i)
                t.values[j].push_back(zero(rng) ? 0.0 : ev(rng));
        }
        if (grouped(rng))
            for (int j = 0; j < m; ++j) t.group_values.push_back(zero(rng) ? 0.0 : ev(rng));
        const double alpha = 0.05 + 0.35 * (rep % 5) / 5.0;
        REQUIRE(same_ids(ebh(t, alpha), oracle_ebh(t, alpha)));
    }
}

TEST_CASE("e-BH scale coherence: inflating e-values never shrinks the set") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> ev(0.0, 5.0), scale(1.0, 4.0);
    for (int rep = 0; rep < 300; ++rep) {
        std::vector<double> vals(8);
        for (auto& v : vals) v = ev(rng);
        EValueTable t = table_of(vals);
        double c = scale(rng);
        std::vector<double> scaled;
        for (double v : vals) scaled.push_back(c * v);
        EValueTable tc = table_of(scaled);
        auto base = rejected_values(t, ebh(t, 0.2));
        auto big = u_ebh(t, 0.2, 1.0 / c); // same as scaling all entries by c
        CHECK(ebh(tc, 0.2).rejected.size() >= base.size());
        CHECK(big.rejected.size() >= base.size());
    }
}

TEST_CASE("rejection CSV serialization") {
    EValueTable t = table_of({5.0, 0.5}); // n/alpha = 4: only the 5 is rejected
    RejectionSet r = ebh(t, 0.5);
    HierarchicalDataset test;
    test.p = 1;
    for (int j = 0; j < 2; ++j) {
        Group g;
        g.id = "t" + std::to_string(j + 1);
        g.units.resize(1);
        test.groups.push_back(g);
    }
    write_rejections_csv("rej_out.csv", r, t, test);
    CsvTable back = read_csv("rej_out.csv");
    REQUIRE(back.header == std::vector<std::string>{"group_id", "unit_index", "selected"});
    REQUIRE(back.rows.size() == 2);
    CHECK(back.rows[0][2] == "1");
    CHECK(back.rows[1][2] == "0");
    std::remove("rej_out.csv");
}
