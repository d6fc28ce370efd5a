#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "vaedet/data.hpp"
#include "vaedet/metrics.hpp"
#include "vaedet/rng.hpp"

using namespace vaedet;

namespace {

// O(n^2) oracle: fraction of (positive, negative) pairs ranked correctly,
// ties worth one half.
double auc_bruteforce(const LabeledScores& s) {
    double wins = 0;
    int64_t pairs = 0;
    for (const auto& [sp, ap] : s.pairs) {
        if (!ap) continue;
        for (const auto& [sn, an] : s.pairs) {
            if (an) continue;
            ++pairs;
            if (sp > sn)
                wins += 1.0;
            else if (sp == sn)
                wins += 0.5;
        }
    }
    return wins / static_cast<double>(pairs);
}

LabeledScores random_instance(Rng& rng, int n, bool with_ties) {
    LabeledScores s;
    int pos = 0;
    for (int i = 0; i < n; ++i) {
        double v = with_ties ? std::floor(rng.uniform(0.0, 8.0)) : rng.normal();
        const bool anomaly = rng.uniform() < 0.4;
        pos += anomaly;
        s.add(v, anomaly);
    }
    // guarantee both classes
    if (pos == 0) s.pairs[0].second = true;
    if (pos == n) s.pairs[0].second = false;
    return s;
}

}  // namespace

TEST_CASE("auc_roc basic geometry") {
    SUBCASE("perfect separation") {
        LabeledScores s;
        for (double v : {1.0, 2.0, 3.0}) s.add(v, false);
        for (double v : {4.0, 5.0}) s.add(v, true);
        CHECK(auc_roc(s) == 1.0);
    }
    SUBCASE("all ties give one half") {
        LabeledScores s;
        for (int i = 0; i < 6; ++i) s.add(7.0, i % 2 == 0);
        CHECK(auc_roc(s) == 0.5);
    }
    SUBCASE("degenerate class counts rejected") {
        LabeledScores s;
        s.add(1.0, true);
        CHECK_THROWS_AS(auc_roc(s), std::runtime_error);
        s.add(2.0, true);
        CHECK_THROWS_AS(auc_roc(s), std::runtime_error);
    }
    SUBCASE("non-finite scores rejected") {
        LabeledScores s;
        s.add(std::numeric_limits<double>::quiet_NaN(), true);
        s.add(0.0, false);
        CHECK_THROWS_AS(auc_roc(s), std::runtime_error);
    }
}

TEST_CASE("rank AUC equals brute-force pair counting exactly") {
    Rng rng(44);
    for (int trial = 0; trial < 120; ++trial) {
        const int n = 2 + static_cast<int>(rng.uniform_int(199));
        auto s = random_instance(rng, n, trial % 2 == 0);
        CHECK(auc_roc(s) == auc_bruteforce(s));  // bitwise equal
    }
}

TEST_CASE("AUC is invariant under strictly increasing transforms") {
    Rng rng(45);
    auto s = random_instance(rng, 80, false);
    const double base = auc_roc(s);
    LabeledScores mapped;
    for (const auto& [v, a] : s.pairs) mapped.add(std::exp(0.5 * v) + 3.0, a);
    CHECK(auc_roc(mapped) == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("negating scores flips AUC") {
    Rng rng(46);
    auto s = random_instance(rng, 101, true);
    LabeledScores neg;
    for (const auto& [v, a] : s.pairs) neg.add(-v, a);
    CHECK(auc_roc(neg) == doctest::Approx(1.0 - auc_roc(s)).epsilon(1e-12));
}

TEST_CASE("roc_curve") {
    Rng rng(47);
    auto s = random_instance(rng, 60, true);
    const auto curve = roc_curve(s);

    SUBCASE("endpoints and monotonicity") {
        CHECK(curve.front().fpr == 0.0);
        CHECK(curve.front().tpr == 0.0);
        CHECK(curve.back().fpr == 1.0);
        CHECK(curve.back().tpr == 1.0);
        for (size_t i = 1; i < curve.size(); ++i) {
            CHECK(curve[i].fpr >= curve[i - 1].fpr);
            CHECK(curve[i].tpr >= curve[i - 1].tpr);
        }
    }
    SUBCASE("at most distinct scores + 1 points") {
        std::set<double> distinct;
        for (const auto& [v, a] : s.pairs) distinct.insert(v);
        CHECK(curve.size() <= distinct.size() + 1);
    }
    SUBCASE("trapezoid integration equals the rank statistic") {
        CHECK(std::abs(trapezoid_area(curve) - auc_roc(s)) < 1e-9);
    }
    SUBCASE("perfect separation passes through (0,1)") {
        LabeledScores sep;
        for (double v : {1.0, 2.0}) sep.add(v, false);
        for (double v : {5.0, 6.0}) sep.add(v, true);
        bool hits_corner = false;
        for (const auto& pt : roc_curve(sep))
            if (pt.fpr == 0.0 && pt.tpr == 1.0) hits_corner = true;
        CHECK(hits_corner);
    }
}

namespace {

DatasetManifest eval_manifest() {
    DatasetManifest m;
    for (int i = 0; i < 10; ++i)
        m.records.push_back({"n" + std::to_string(i), "normal", "test_normal"});
    for (int i = 0; i < 5; ++i)
        m.records.push_back({"a" + std::to_string(i), "stripe", "test_anomaly"});
    for (int i = 0; i < 5; ++i)
        m.records.push_back({"b" + std::to_string(i), "hole", "test_anomaly"});
    return m;
}

ScoreTable separated_table(double gap) {
    ScoreTable t;
    t.score_names = {"s_vae_reconst"};
    for (int i = 0; i < 10; ++i)
        t.rows["n" + std::to_string(i)]["s_vae_reconst"] = static_cast<double>(i);
    for (int i = 0; i < 5; ++i) {
        t.rows["a" + std::to_string(i)]["s_vae_reconst"] = 20.0 + gap + i;
        t.rows["b" + std::to_string(i)]["s_vae_reconst"] = 30.0 + gap + i;
    }
    return t;
}

}  // namespace

TEST_CASE("evaluate builds the class x score AUC matrix") {
    const auto manifest = eval_manifest();

    SUBCASE("perfect separation fills cells with 1.0") {
        auto report = evaluate({separated_table(0.0)}, manifest, "normal");
        CHECK(report.class_names == std::vector<std::string>{"hole", "stripe", "all"});
        CHECK(report.cells["s_vae_reconst"]["stripe"].mean == 1.0);
        CHECK(report.cells["s_vae_reconst"]["hole"].mean == 1.0);
        CHECK(report.cells["s_vae_reconst"]["all"].mean == 1.0);  // pooled positives
        CHECK(report.run_count == 1);
    }

    SUBCASE("multi-run mean matches hand averaging") {
        auto r1 = separated_table(0.0);
        auto r2 = separated_table(0.0);
        // run 2: make one anomaly score below every normal -> AUC drops
        r2.rows["a0"]["s_vae_reconst"] = -5.0;
        auto report = evaluate({r1, r2}, manifest, "normal");
        const auto& cell = report.cells["s_vae_reconst"]["stripe"];
        REQUIRE(cell.runs.size() == 2);
        CHECK(cell.mean ==
              doctest::Approx((cell.runs[0] + cell.runs[1]) / 2.0).epsilon(1e-12));
        CHECK(cell.runs[0] == 1.0);
        CHECK(cell.runs[1] == doctest::Approx(0.8));  // 10 of 50 pairs lost
    }

    SUBCASE("scored image missing from the manifest is an error listing ids") {
        auto t = separated_table(0.0);
        t.rows["ghost_image"]["s_vae_reconst"] = 1.0;
        CHECK_THROWS_WITH_AS(evaluate({t}, manifest, "normal"),
                             doctest::Contains("ghost_image"), std::runtime_error);
    }

    SUBCASE("five-run mean matches hand-averaged cells") {
        std::vector<ScoreTable> runs;
        Rng rng(48);
        for (int r = 0; r < 5; ++r) {
            auto t = separated_table(0.0);
            for (auto& [id, row] : t.rows) row["s_vae_reconst"] += rng.normal() * 3.0;
            runs.push_back(std::move(t));
        }
        auto report = evaluate(runs, manifest, "normal");
        const auto& cell = report.cells["s_vae_reconst"]["all"];
        REQUIRE(cell.runs.size() == 5);
        double mean = 0;
        for (double v : cell.runs) mean += v;
        mean /= 5.0;
        CHECK(cell.mean == doctest::Approx(mean).epsilon(1e-12));
        CHECK(report.run_count == 5);
    }
}
