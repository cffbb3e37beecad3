#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "hiersel/common.hpp"
#include "hiersel/csv.hpp"
#include "hiersel/data_model.hpp"

#include <cstdio>
#include <fstream>
#include <random>
#include <set>

using namespace hiersel;

namespace {

struct TempFile {
    std::string path;
    explicit TempFile(const std::string& name, const std::string& content) : path(name) {
        std::ofstream f(path);
        f << content;
    }
    ~TempFile() { std::remove(path.c_str()); }
};

HierarchicalDataset random_dataset(std::mt19937_64& rng, int p, int p_G, int n_groups,
                                   DatasetRole role) {
    std::uniform_real_distribution<double> val(-5.0, 5.0);
    std::uniform_int_distribution<int> size(1, 5);
    HierarchicalDataset ds;
    ds.role = role;
    ds.p = p;
    ds.p_G = p_G;
    for (int k = 0; k < n_groups; ++k) {
        Group g;
        g.id = "grp" + std::to_string(k);
        if (p_G > 0) {
            std::vector<double> gv(p_G);
            for (auto& v : gv) v = val(rng);
            g.g = gv;
        }
        int n = size(rng);
        for (int i = 0; i < n; ++i) {
            Unit u;
            u.x.resize(p);
            for (auto& v : u.x) v = val(rng);
            u.y = val(rng);
            g.units.push_back(u);
        }
        ds.groups.push_back(g);
    }
    return ds;
}

} // namespace

TEST_CASE("load_csv groups rows by id in first-appearance order") {
    TempFile f("dm_basic.csv", "group_id,x_0,x_1,y\n"
                               "a,1,2,0.5\n"
                               "a,3,4,0.6\n"
                               "b,5,6,0.7\n");
    HierarchicalDataset ds = load_csv(f.path, DatasetRole::calibration);
    REQUIRE(ds.groups.size() == 2);
    CHECK(ds.p == 2);
    CHECK(ds.groups[0].id == "a");
    CHECK(ds.groups[0].size() == 2);
    CHECK(ds.groups[1].size() == 1);
    CHECK(ds.groups[0].units[1].x == std::vector<double>{3.0, 4.0});
    CHECK(*ds.groups[1].units[0].y == 0.7);
}

TEST_CASE("load_csv errors: missing outcome, missing feature, bad schema") {
    TempFile no_y("dm_noy.csv", "group_id,x_0\na,1\n");
    CHECK_THROWS_AS(load_csv(no_y.path, DatasetRole::calibration), RoleError);
    CHECK_NOTHROW(load_csv(no_y.path, DatasetRole::test));

    TempFile empty_y("dm_emptyy.csv", "group_id,x_0,y\na,1,\n");
    CHECK_THROWS_AS(load_csv(empty_y.path, DatasetRole::calibration), RoleError);

    TempFile no_x("dm_nox.csv", "group_id,y\na,1\n");
    CHECK_THROWS_AS(load_csv(no_x.path, DatasetRole::calibration), SchemaError);

    TempFile gap("dm_gap.csv", "group_id,x_0,x_2,y\na,1,2,3\n");
    CHECK_THROWS_AS(load_csv(gap.path, DatasetRole::calibration), SchemaError);

    // group-constant columns must not vary within a group id
    TempFile gvar("dm_gvar.csv", "group_id,x_0,y,g_0\na,1,2,9\na,1,2,8\n");
    CHECK_THROWS_AS(load_csv(gvar.path, DatasetRole::calibration), SchemaError);
    TempFile tvar("dm_tvar.csv", "group_id,x_0,y,treated\na,1,2,1\na,1,2,0\n");
    CHECK_THROWS_AS(load_csv(tvar.path, DatasetRole::calibration), SchemaError);
}

TEST_CASE("validate flags dimension violations and accepts test outcomes") {
    std::mt19937_64 rng(1);
    HierarchicalDataset ds = random_dataset(rng, 3, 2, 5, DatasetRole::calibration);
    CHECK(validate(ds).empty());

    HierarchicalDataset bad = ds;
    bad.groups[2].units[0].x.pop_back();
    auto violations = validate(bad);
    REQUIRE(violations.size() == 1);
    CHECK(violations[0].group == 2);
    CHECK(violations[0].unit == 0);

    HierarchicalDataset test_ds = random_dataset(rng, 3, 2, 5, DatasetRole::test);
    CHECK(validate(test_ds).empty()); // outcomes allowed for evaluation

    HierarchicalDataset missing = test_ds;
    missing.role = DatasetRole::calibration;
    missing.groups[0].units[0].y.reset();
    CHECK_FALSE(validate(missing).empty());
}

TEST_CASE("split_groups: boundary cases and the permutation property") {
    std::mt19937_64 rng(2);
    HierarchicalDataset ds = random_dataset(rng, 2, 0, 300, DatasetRole::calibration);
    auto [a, b] = split_groups(ds, 100);
    CHECK(a.groups.size() == 100);
    CHECK(b.groups.size() == 200);

    auto [e1, e2] = split_groups(ds, 0);
    CHECK(e1.groups.empty());
    CHECK(e2.groups.size() == 300);
    auto [f1, f2] = split_groups(ds, 300);
    CHECK(f1.groups.size() == 300);
    CHECK(f2.groups.empty());
    CHECK_THROWS_AS(split_groups(ds, 301), ConfigError);

    // seeded shuffle: sizes sum and ids form a permutation of the input
    auto [s1, s2] = split_groups(ds, 120, 99);
    CHECK(s1.groups.size() + s2.groups.size() == ds.groups.size());
    std::multiset<std::string> in, out;
    for (const auto& g : ds.groups) in.insert(g.id);
    for (const auto& g : s1.groups) out.insert(g.id);
    for (const auto& g : s2.groups) out.insert(g.id);
    CHECK(in == out);
}

TEST_CASE("write_csv / load_csv round trip is the identity") {
    std::mt19937_64 rng(3);
    HierarchicalDataset ds = random_dataset(rng, 3, 2, 20, DatasetRole::calibration);
    ds.groups[4].treated = true;
    ds.groups[4].weight = 1.25;
    for (auto& g : ds.groups) {
        if (!g.treated) g.treated = false;
        if (!g.weight) g.weight = 2.0;
    }
    const std::string path = "dm_roundtrip.csv";
    write_csv(path, ds);
    HierarchicalDataset back = load_csv(path, DatasetRole::calibration);
    std::remove(path.c_str());

    REQUIRE(back.groups.size() == ds.groups.size());
    CHECK(back.p == ds.p);
    CHECK(back.p_G == ds.p_G);
    for (std::size_t k = 0; k < ds.groups.size(); ++k) {
        CHECK(back.groups[k].id == ds.groups[k].id);
        CHECK(back.groups[k].g == ds.groups[k].g);
        CHECK(back.groups[k].treated == ds.groups[k].treated);
        CHECK(back.groups[k].weight == ds.groups[k].weight);
        REQUIRE(back.groups[k].size() == ds.groups[k].size());
        for (std::size_t i = 0; i < ds.groups[k].size(); ++i) {
            CHECK(back.groups[k].units[i].x == ds.groups[k].units[i].x);
            CHECK(back.groups[k].units[i].y == ds.groups[k].units[i].y);
        }
    }
}

TEST_CASE("survey-style file: 858 groups of size >= 10 split 650/200") {
    // synthetic file with the stratified-survey shape: 858 groups, min size 10
    std::string path = "dm_survey.csv";
    {
        std::ofstream f(path);
        f << "group_id";
        for (int i = 0; i < 10; ++i) f << ",x_" << i;
        f << ",y\n";
        std::mt19937_64 rng(4);
        std::uniform_real_distribution<double> val(0.0, 1.0);
        std::uniform_int_distribution<int> extra(0, 4);
        for (int g = 0; g < 858; ++g) {
            int n = 10 + extra(rng);
            for (int i = 0; i < n; ++i) {
                f << "s" << g;
                for (int j = 0; j < 10; ++j) f << ',' << val(rng);
                f << ',' << (val(rng) > 0.5 ? 1 : 0) << "\n";
            }
        }
    }
    HierarchicalDataset ds = load_csv(path, DatasetRole::calibration);
    std::remove(path.c_str());
    REQUIRE(ds.groups.size() == 858);
    CHECK(ds.p == 10);
    for (const auto& g : ds.groups) CHECK(g.size() >= 10);

    auto [cal, rest] = split_groups(ds, 650, 7);
    auto [test, spare] = split_groups(rest, 200);
    CHECK(cal.groups.size() == 650);
    CHECK(test.groups.size() == 200);
    CHECK(spare.groups.size() == 8);
}
