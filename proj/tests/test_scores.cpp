#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "vaedet/gaussian.hpp"
#include "vaedet/model.hpp"
#include "vaedet/scores.hpp"

using namespace vaedet;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.image_size = 16;
    cfg.in_channels = 1;
    cfg.base_channels = 4;
    cfg.latent_dim = 3;
    cfg.beta = 0.01;
    return cfg;
}

// frozen untrained model: scores are well-defined for any parameters
VaeModel<float> frozen_model(uint64_t seed = 50) {
    auto m = make_vae_model<float>(tiny_config(), seed);
    set_requires_grad(m, false);
    m.train_mode = false;
    return m;
}

Tensor<float> random_image(Rng& rng) {
    auto x = Tensor<float>::randn({1, 1, 16, 16}, rng, 0.0, 0.4);
    for (auto& v : x.mutable_values()) v = std::clamp(v, -1.0f, 1.0f);
    return x;
}

std::vector<ImageRecord<float>> random_items(int n, uint64_t seed) {
    Rng rng(seed);
    std::vector<ImageRecord<float>> items;
    for (int i = 0; i < n; ++i) {
        auto x = Tensor<float>::randn({1, 16, 16}, rng, 0.0, 0.4);
        for (auto& v : x.mutable_values()) v = std::clamp(v, -1.0f, 1.0f);
        items.push_back({"img_" + std::to_string(i), x, "normal"});
    }
    return items;
}

}  // namespace

TEST_CASE("combine_scores formula fixed points") {
    SUBCASE("perfect reconstruction, N=1, sigma=1 gives 0.918939") {
        // log p(x|z) = log N(0; 0, 1)
        std::vector<DrawTerms> draws(3, DrawTerms{-0.9189385332046727, -1.4, -1.1});
        const auto s = combine_scores(draws, 0.25);
        CHECK(s.vae_reconst == doctest::Approx(0.918939).epsilon(1e-6));
        CHECK(s.vae_kl == 0.25);
        CHECK(s.vae == doctest::Approx(0.25 + 0.918939).epsilon(1e-6));
    }
    SUBCASE("q equal to the prior zeroes the iwae kl term for any draws") {
        Rng rng(51);
        std::vector<DrawTerms> draws;
        for (int i = 0; i < 9; ++i) {
            const double lp = rng.normal();
            draws.push_back({rng.normal(), lp, lp});  // log p(z) == log q(z|x)
        }
        const auto s = combine_scores(draws, 0.0);
        CHECK(std::abs(s.iwae_kl) < 1e-9);
    }
    SUBCASE("extreme log-weights stay finite") {
        std::vector<DrawTerms> draws = {{-1000.0, -950.0, -20.0}, {-980.0, -1010.0, -15.0}};
        const auto s = combine_scores(draws, 3.0);
        for (const auto& name : kAllScoreNames) CHECK(std::isfinite(s.get(name)));
        CHECK(s.iwae > 900.0);  // roughly the magnitude of the weights
    }
    SUBCASE("monotone in squared error for fixed draws") {
        // larger ||x - mu_dec||^2 strictly increases the reconstruction score
        double prev = -1e300;
        for (double sq : {0.1, 0.5, 2.0, 8.0}) {
            const double ll = -0.5 * (kLogTwoPi + sq);  // N=1, sigma=1
            std::vector<DrawTerms> draws(4, DrawTerms{ll, -1.0, -1.0});
            const double score = combine_scores(draws, 0.0).vae_reconst;
            CHECK(score > prev);
            prev = score;
        }
    }
    SUBCASE("empty draws rejected") {
        CHECK_THROWS_AS(combine_scores({}, 0.0), std::invalid_argument);
    }
}

TEST_CASE("decomposition s_vae == s_vae_kl + s_vae_reconst with shared draws") {
    auto model = frozen_model();
    Rng img_rng(52);
    for (int i = 0; i < 10; ++i) {
        auto x = random_image(img_rng);
        Rng rng(100 + static_cast<uint64_t>(i));
        const auto s = score_image(model, x, 15, rng);
        CHECK(std::abs(s.vae - (s.vae_kl + s.vae_reconst)) < 1e-9);
    }
}

TEST_CASE("L=1 collapses") {
    auto model = frozen_model();
    Rng img_rng(53);
    for (int i = 0; i < 8; ++i) {
        auto x = random_image(img_rng);
        Rng rng(200 + static_cast<uint64_t>(i));
        auto [draws, kl] = score_draw_terms(model, x, 1, rng);
        const auto s = combine_scores(draws, kl);

        // s_iwae_reconst == s_vae_reconst exactly
        CHECK(std::abs(s.iwae_reconst - s.vae_reconst) < 1e-9);
        // s_iwae == single-sample negative ELBO with sampled KL
        const double sampled =
            -draws[0].log_px_z - draws[0].log_pz + draws[0].log_qz;
        CHECK(std::abs(s.iwae - sampled) < 1e-9);
    }
}

TEST_CASE("Jensen ordering: s_iwae_reconst <= s_vae_reconst for shared draws") {
    auto model = frozen_model();
    Rng img_rng(54);
    for (int i = 0; i < 12; ++i) {
        auto x = random_image(img_rng);
        Rng rng(300 + static_cast<uint64_t>(i));
        const auto s = score_image(model, x, 15, rng);
        CHECK(s.iwae_reconst <= s.vae_reconst + 1e-12);
    }
}

TEST_CASE("score_vae_kl is analytic and deterministic") {
    auto model = frozen_model();
    Rng img_rng(55);
    auto x = random_image(img_rng);

    const double a = score_vae_kl(model, x);
    const double b = score_vae_kl(model, x);
    CHECK(a == b);  // bit-identical, no sampling involved

    // delegation: equals vae-core kl_divergence of the encoded posterior
    NoGradGuard no_grad;
    auto q = encode(model, x);
    GaussianDiag<double> qd(
        Tensor<double>({1, 3}, std::vector<double>(q.mean.values().begin(),
                                                   q.mean.values().end())),
        Tensor<double>({1, 3}, std::vector<double>(q.log_var.values().begin(),
                                                   q.log_var.values().end())));
    CHECK(std::abs(a - kl_divergence(qd).values()[0]) < 1e-9);
}

TEST_CASE("per-draw terms match independent scalar recomputation") {
    auto model = frozen_model();
    Rng img_rng(56);
    auto x = random_image(img_rng);
    Rng rng(500);
    auto [draws, kl] = score_draw_terms(model, x, 6, rng);
    const auto s = combine_scores(draws, kl);

    // recompute every score from the raw terms with fresh arithmetic
    const double L = 6.0;
    double mean_ll = 0;
    for (const auto& d : draws) mean_ll += d.log_px_z / L;
    double acc_w = 0, acc_r = 0, acc_ll = 0;
    double mw = -1e300, mr = -1e300, mll = -1e300;
    for (const auto& d : draws) {
        mw = std::max(mw, d.log_px_z + d.log_pz - d.log_qz);
        mr = std::max(mr, d.log_pz - d.log_qz);
        mll = std::max(mll, d.log_px_z);
    }
    for (const auto& d : draws) {
        acc_w += std::exp(d.log_px_z + d.log_pz - d.log_qz - mw);
        acc_r += std::exp(d.log_pz - d.log_qz - mr);
        acc_ll += std::exp(d.log_px_z - mll);
    }
    CHECK(std::abs(s.vae_reconst - (-mean_ll)) < 1e-8);
    CHECK(std::abs(s.iwae - (-(mw + std::log(acc_w / L)))) < 1e-8);
    CHECK(std::abs(s.iwae_kl - (-(mr + std::log(acc_r / L)))) < 1e-8);
    CHECK(std::abs(s.iwae_reconst - (-(mll + std::log(acc_ll / L)))) < 1e-8);
}

TEST_CASE("importance-sampling identity: E[p(z)/q(z|x)] = 1") {
    // well-conditioned q against the standard normal prior
    Rng rng(57);
    const int n = 100'000;
    const double mu = 0.4, log_var = -0.3;
    double sum = 0, sum_sq = 0;
    for (int i = 0; i < n; ++i) {
        const double z = mu + rng.normal() * std::exp(0.5 * log_var);
        const double log_q = -0.5 * (kLogTwoPi + log_var + (z - mu) * (z - mu) / std::exp(log_var));
        const double log_p = -0.5 * (kLogTwoPi + z * z);
        const double ratio = std::exp(log_p - log_q);
        sum += ratio;
        sum_sq += ratio * ratio;
    }
    const double mean = sum / n;
    const double se = std::sqrt((sum_sq / n - mean * mean) / n);
    CHECK(std::abs(mean - 1.0) < 3.0 * se);
}

TEST_CASE("score variance shrinks as 1/L") {
    auto model = frozen_model();
    Rng img_rng(58);
    auto x = random_image(img_rng);

    const std::vector<int> ls = {1, 4, 16, 64};
    std::vector<double> log_l, log_var;
    for (const int L : ls) {
        const int reps = 200;
        double sum = 0, sum_sq = 0;
        for (int r = 0; r < reps; ++r) {
            Rng rng(1000 + static_cast<uint64_t>(r));
            const double v = score_image(model, x, L, rng).vae;
            sum += v;
            sum_sq += v * v;
        }
        const double mean = sum / reps;
        log_l.push_back(std::log(static_cast<double>(L)));
        log_var.push_back(std::log(sum_sq / reps - mean * mean));
    }
    // least-squares slope of log variance against log L
    double mx = 0, my = 0;
    for (size_t i = 0; i < ls.size(); ++i) {
        mx += log_l[i];
        my += log_var[i];
    }
    mx /= static_cast<double>(ls.size());
    my /= static_cast<double>(ls.size());
    double num = 0, den = 0;
    for (size_t i = 0; i < ls.size(); ++i) {
        num += (log_l[i] - mx) * (log_var[i] - my);
        den += (log_l[i] - mx) * (log_l[i] - mx);
    }
    const double slope = num / den;
    CHECK(std::abs(slope + 1.0) < 0.2);
}

TEST_CASE("score_batch") {
    auto model = frozen_model();
    auto items = random_items(12, 60);
    ScoreConfig cfg;
    cfg.num_samples = 5;
    cfg.seed = 61;

    SUBCASE("same seed twice gives bit-identical reports") {
        const auto a = score_batch(model, items, cfg);
        const auto b = score_batch(model, items, cfg);
        REQUIRE(a.rows.size() == b.rows.size());
        for (size_t i = 0; i < a.rows.size(); ++i) {
            CHECK(a.rows[i].image_id == b.rows[i].image_id);
            for (const auto& name : kAllScoreNames)
                CHECK(a.rows[i].values.get(name) == b.rows[i].values.get(name));
        }
    }

    SUBCASE("row-wise decomposition holds in the report") {
        const auto report = score_batch(model, items, cfg);
        REQUIRE(report.rows.size() == items.size());
        for (const auto& row : report.rows) {
            CHECK(std::abs(row.values.vae - (row.values.vae_kl + row.values.vae_reconst)) <
                  1e-9);
            for (const auto& name : kAllScoreNames)
                CHECK(std::isfinite(row.values.get(name)));
        }
    }

    SUBCASE("permuting input order permutes rows but not values") {
        const auto a = score_batch(model, items, cfg);
        auto reversed = items;
        std::reverse(reversed.begin(), reversed.end());
        const auto b = score_batch(model, reversed, cfg);
        std::map<std::string, double> by_id;
        for (const auto& row : a.rows) by_id[row.image_id] = row.values.vae;
        for (const auto& row : b.rows) CHECK(by_id.at(row.image_id) == row.values.vae);
    }

    SUBCASE("per-image failures are recorded and the batch continues") {
        auto bad = items;
        bad[3].pixels = Tensor<float>::zeros({1, 8, 8});  // wrong spatial size
        const auto report = score_batch(model, bad, cfg);
        CHECK(report.rows.size() == items.size() - 1);
        REQUIRE(report.failures.size() == 1);
        CHECK(report.failures[0].image_id == "img_3");
    }

    SUBCASE("requested subset selects csv columns in canonical order") {
        ScoreConfig sub = cfg;
        sub.score_set = {"s_vae_reconst", "s_vae_kl"};
        const auto report = score_batch(model, items, sub);
        CHECK(report.score_names ==
              std::vector<std::string>{"s_vae_kl", "s_vae_reconst"});
    }

    SUBCASE("unknown score names rejected") {
        ScoreConfig bad_cfg = cfg;
        bad_cfg.score_set = {"s_gan"};
        CHECK_THROWS_AS(score_batch(model, items, bad_cfg), std::invalid_argument);
    }
}

TEST_CASE("score csv round-trips through the table reader") {
    auto model = frozen_model();
    auto items = random_items(5, 62);
    ScoreConfig cfg;
    cfg.num_samples = 3;
    cfg.seed = 63;
    auto report = score_batch(model, items, cfg);
    report.checkpoint_id = "deadbeef";

    const auto dir = std::filesystem::temp_directory_path() / "vaedet_scores_csv";
    std::filesystem::create_directories(dir);
    const auto path = (dir / "s.csv").string();
    write_score_csv(report, path);
    const auto table = read_score_csv(path);
    CHECK(table.score_names == report.score_names);
    REQUIRE(table.rows.size() == report.rows.size());
    for (const auto& row : report.rows) {
        const auto& parsed = table.rows.at(row.image_id);
        for (const auto& name : kAllScoreNames)
            CHECK(parsed.at(name) ==
                  doctest::Approx(row.values.get(name)).epsilon(1e-9));
    }
}
