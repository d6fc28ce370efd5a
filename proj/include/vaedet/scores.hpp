// The six anomaly scores of a trained VAE. All of them estimate
// s(x) = -log p(x); larger means more anomalous.
//
//   s_vae          = KL(q(z|x)||p(z)) - (1/L) sum_i log p(x|z_i)
//   s_vae_kl       = KL(q(z|x)||p(z))                       (analytic)
//   s_vae_reconst  = -(1/L) sum_i log p(x|z_i)
//   s_iwae         = -log((1/L) sum_i p(x|z_i) p(z_i) / q(z_i|x))
//   s_iwae_kl      = -log((1/L) sum_i p(z_i) / q(z_i|x))
//   s_iwae_reconst = -log((1/L) sum_i p(x|z_i))
//
// with z_i ~ q(z|x). The IWAE family is evaluated entirely in log space via
// log-sum-exp over the per-draw terms. One set of draws per image is shared
// across all variants, which makes the decomposition s_vae = s_vae_kl +
// s_vae_reconst and the L = 1 collapses exact. Score arithmetic is double
// precision regardless of the model's working precision.

#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "vaedet/data.hpp"
#include "vaedet/gaussian.hpp"
#include "vaedet/metrics.hpp"
#include "vaedet/model.hpp"
#include "vaedet/rng.hpp"

namespace vaedet {

inline const std::vector<std::string> kAllScoreNames = {
    "s_vae", "s_vae_kl", "s_vae_reconst", "s_iwae", "s_iwae_kl", "s_iwae_reconst"};

struct ScoreConfig {
    int num_samples = 15;  // L
    uint64_t seed = 0;
    std::set<std::string> score_set{kAllScoreNames.begin(), kAllScoreNames.end()};

    void validate() const {
        if (num_samples < 1) throw std::invalid_argument("score: L must be >= 1");
        for (const auto& name : score_set)
            if (std::find(kAllScoreNames.begin(), kAllScoreNames.end(), name) ==
                kAllScoreNames.end())
                throw std::invalid_argument("score: unknown score '" + name + "'");
    }
};

// Per-draw log-densities; everything the six scores need.
struct DrawTerms {
    double log_px_z;  // log p(x|z_i)
    double log_pz;    // log p(z_i)
    double log_qz;    // log q(z_i|x)
};

struct ScoreValues {
    double vae = 0, vae_kl = 0, vae_reconst = 0;
    double iwae = 0, iwae_kl = 0, iwae_reconst = 0;

    double get(const std::string& name) const {
        if (name == "s_vae") return vae;
        if (name == "s_vae_kl") return vae_kl;
        if (name == "s_vae_reconst") return vae_reconst;
        if (name == "s_iwae") return iwae;
        if (name == "s_iwae_kl") return iwae_kl;
        if (name == "s_iwae_reconst") return iwae_reconst;
        throw std::invalid_argument("score: unknown score '" + name + "'");
    }
};

// Combines per-draw terms into all six scores. analytic_kl is the closed-form
// KL(q||p) of the encoded posterior. Shared across the VAE and the toy-model
// paths, so bound experiments exercise the same arithmetic as production.
inline ScoreValues combine_scores(const std::vector<DrawTerms>& draws, double analytic_kl) {
    if (draws.empty()) throw std::invalid_argument("score: need at least one draw");
    const double L = static_cast<double>(draws.size());
    const double log_L = std::log(L);

    std::vector<double> w(draws.size()), r(draws.size()), ll(draws.size());
    double mean_ll = 0.0;
    for (size_t i = 0; i < draws.size(); ++i) {
        ll[i] = draws[i].log_px_z;
        r[i] = draws[i].log_pz - draws[i].log_qz;
        w[i] = ll[i] + r[i];
        mean_ll += ll[i];
    }
    mean_ll /= L;

    ScoreValues s;
    s.vae_kl = analytic_kl;
    s.vae_reconst = -mean_ll;
    s.vae = s.vae_kl + s.vae_reconst;
    s.iwae = -(log_sum_exp(std::span<const double>(w)) - log_L);
    s.iwae_kl = -(log_sum_exp(std::span<const double>(r)) - log_L);
    s.iwae_reconst = -(log_sum_exp(std::span<const double>(ll)) - log_L);
    for (const auto& name : kAllScoreNames)
        if (!std::isfinite(s.get(name)))
            throw std::runtime_error("score: non-finite " + name);
    return s;
}

// Draws L reparameterized samples for one image and evaluates the per-draw
// log-densities under the frozen model. x is [1,C,H,W].
template <typename T>
std::pair<std::vector<DrawTerms>, double> score_draw_terms(const VaeModel<T>& model,
                                                           const Tensor<T>& x, int L,
                                                           Rng& rng) {
    if (L < 1) throw std::invalid_argument("score: L must be >= 1");
    if (x.ndim() != 4 || x.dim(0) != 1)
        throw std::invalid_argument("score: expected a single image [1,C,H,W], got " +
                                    shape_str(x.shape()));
    NoGradGuard no_grad;
    const GaussianDiag<T> q = encode(model, x);
    const int M = q.dim();

    std::vector<double> mu(static_cast<size_t>(M)), log_var(static_cast<size_t>(M));
    for (int j = 0; j < M; ++j) {
        mu[static_cast<size_t>(j)] = static_cast<double>(q.mean.values()[static_cast<size_t>(j)]);
        log_var[static_cast<size_t>(j)] =
            static_cast<double>(q.log_var.values()[static_cast<size_t>(j)]);
    }

    std::vector<double> xv(x.values().begin(), x.values().end());
    const double sigma = model.config.sigma();

    std::vector<DrawTerms> draws;
    draws.reserve(static_cast<size_t>(L));
    std::vector<T> z_row(static_cast<size_t>(M));
    std::vector<double> z_d(static_cast<size_t>(M));
    for (int i = 0; i < L; ++i) {
        for (int j = 0; j < M; ++j) {
            const double eps = rng.normal();
            // round z to the model's working precision before either use
            const T z = static_cast<T>(mu[static_cast<size_t>(j)] +
                                       eps * std::exp(0.5 * log_var[static_cast<size_t>(j)]));
            z_row[static_cast<size_t>(j)] = z;
            z_d[static_cast<size_t>(j)] = static_cast<double>(z);
        }
        Tensor<T> dec = decode(model, Tensor<T>({1, M}, z_row));
        std::vector<double> mu_dec(dec.values().begin(), dec.values().end());
        DrawTerms t{};
        t.log_px_z = gaussian_log_likelihood_scalar(xv, mu_dec, sigma);
        t.log_pz = std_normal_log_density(z_d);
        t.log_qz = diag_gaussian_log_density(z_d, mu, log_var);
        draws.push_back(t);
    }
    return {std::move(draws), diag_gaussian_kl(mu, log_var)};
}

template <typename T>
ScoreValues score_image(const VaeModel<T>& model, const Tensor<T>& x, int L, Rng& rng) {
    auto [draws, kl] = score_draw_terms(model, x, L, rng);
    return combine_scores(draws, kl);
}

// Single-score entry points. Each consumes L draws from
// rng; use score_image/score_batch when identities across variants matter.
template <typename T>
double score_vae(const VaeModel<T>& model, const Tensor<T>& x, int L, Rng& rng) {
    return score_image(model, x, L, rng).vae;
}

// Analytic, deterministic: no sampling at all.
template <typename T>
double score_vae_kl(const VaeModel<T>& model, const Tensor<T>& x) {
    NoGradGuard no_grad;
    const GaussianDiag<T> q = encode(model, x);
    std::vector<double> mu(q.mean.values().begin(), q.mean.values().end());
    std::vector<double> lv(q.log_var.values().begin(), q.log_var.values().end());
    return diag_gaussian_kl(mu, lv);
}

template <typename T>
double score_vae_reconst(const VaeModel<T>& model, const Tensor<T>& x, int L, Rng& rng) {
    return score_image(model, x, L, rng).vae_reconst;
}

template <typename T>
double score_iwae(const VaeModel<T>& model, const Tensor<T>& x, int L, Rng& rng) {
    return score_image(model, x, L, rng).iwae;
}

template <typename T>
double score_iwae_kl(const VaeModel<T>& model, const Tensor<T>& x, int L, Rng& rng) {
    return score_image(model, x, L, rng).iwae_kl;
}

template <typename T>
double score_iwae_reconst(const VaeModel<T>& model, const Tensor<T>& x, int L, Rng& rng) {
    return score_image(model, x, L, rng).iwae_reconst;
}

// ---------------------------------------------------------------------------
// batch scoring and report emission
// ---------------------------------------------------------------------------

struct ScoreFailure {
    std::string image_id;
    std::string message;
};

struct ScoreRow {
    std::string image_id;
    ScoreValues values;
};

struct ScoreReport {
    std::vector<std::string> score_names;  // requested subset, canonical order
    std::vector<ScoreRow> rows;
    std::vector<ScoreFailure> failures;
    int num_samples = 0;
    uint64_t seed = 0;
    std::string checkpoint_id;
};

// Scores every image with a per-image RNG stream derived from (seed, index):
// parallel and serial execution produce identical reports, and permuting the
// input permutes rows but not values. Per-image failures are recorded and
// the batch continues.
template <typename T>
ScoreReport score_batch(const VaeModel<T>& model, const std::vector<ImageRecord<T>>& images,
                        const ScoreConfig& config) {
    config.validate();
    ScoreReport report;
    for (const auto& name : kAllScoreNames)
        if (config.score_set.count(name)) report.score_names.push_back(name);
    report.num_samples = config.num_samples;
    report.seed = config.seed;

    const int n = static_cast<int>(images.size());
    std::vector<ScoreRow> rows(static_cast<size_t>(n));
    std::vector<ScoreFailure> failures(static_cast<size_t>(n));
    std::vector<char> ok(static_cast<size_t>(n), 0);

#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
    for (int i = 0; i < n; ++i) {
        const auto& rec = images[static_cast<size_t>(i)];
        // stream keyed by content id hash so order never matters
        uint64_t h = 1469598103934665603ull;
        for (const char c : rec.id) h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ull;
        Rng rng(derive_seed(config.seed, h));
        try {
            const auto& px = rec.pixels;
            Tensor<T> x({1, px.dim(0), px.dim(1), px.dim(2)},
                        std::vector<T>(px.values().begin(), px.values().end()));
            rows[static_cast<size_t>(i)] = {rec.id,
                                            score_image(model, x, config.num_samples, rng)};
            ok[static_cast<size_t>(i)] = 1;
        } catch (const std::exception& e) {
            failures[static_cast<size_t>(i)] = {rec.id, e.what()};
        }
    }
    for (int i = 0; i < n; ++i) {
        if (ok[static_cast<size_t>(i)])
            report.rows.push_back(std::move(rows[static_cast<size_t>(i)]));
        else
            report.failures.push_back(std::move(failures[static_cast<size_t>(i)]));
    }
    return report;
}

// CSV: header `image_id,<requested scores...>`, one row per image.
inline void write_score_csv(const ScoreReport& report, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("score: cannot write " + path);
    out << "image_id";
    for (const auto& name : report.score_names) out << "," << name;
    out << "\n";
    char buf[64];
    for (const auto& row : report.rows) {
        out << row.image_id;
        for (const auto& name : report.score_names) {
            std::snprintf(buf, sizeof(buf), "%.10g", row.values.get(name));
            out << "," << buf;
        }
        out << "\n";
    }
    if (!out) throw std::runtime_error("score: short write to " + path);
}

inline void write_score_sidecar(const ScoreReport& report, const nlohmann::json& model_config,
                                const std::string& path) {
    nlohmann::json j;
    j["checkpoint_id"] = report.checkpoint_id;
    j["L"] = report.num_samples;
    j["seed"] = report.seed;
    j["model_config"] = model_config;
    j["scores"] = report.score_names;
    j["rows"] = report.rows.size();
    if (!report.failures.empty()) {
        nlohmann::json fails = nlohmann::json::array();
        for (const auto& f : report.failures)
            fails.push_back({{"image_id", f.image_id}, {"message", f.message}});
        j["failures"] = fails;
    }
    std::ofstream out(path);
    if (!out) throw std::runtime_error("score: cannot write " + path);
    out << j.dump(2) << "\n";
}

// Parses a score CSV back into an evaluate()-ready table.
inline ScoreTable read_score_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("score: cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("score: empty file " + path);
    ScoreTable table;
    std::vector<std::string> columns;
    std::stringstream header(line);
    std::string field;
    while (std::getline(header, field, ',')) columns.push_back(field);
    if (columns.empty() || columns[0] != "image_id")
        throw std::runtime_error("score: bad header in " + path);
    table.score_names.assign(columns.begin() + 1, columns.end());
    size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::vector<std::string> fields;
        while (std::getline(ss, field, ',')) fields.push_back(field);
        if (fields.size() != columns.size())
            throw std::runtime_error("score: ragged row at " + path + ":" +
                                     std::to_string(lineno));
        auto& row = table.rows[fields[0]];
        for (size_t i = 1; i < fields.size(); ++i) row[columns[i]] = std::stod(fields[i]);
    }
    return table;
}

}  // namespace vaedet
