// Run configuration: one JSON document covering model, training, scoring and
// data paths. Parsing is strict: unknown keys are rejected so a typo cannot
// silently fall back to a default.

#pragma once

#include <fstream>
#include <set>
#include <string>

#include <json.hpp>

#include "vaedet/model.hpp"
#include "vaedet/scores.hpp"

namespace vaedet {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    void validate() const {
        if (beta1 <= 0.0 || beta1 >= 1.0 || beta2 <= 0.0 || beta2 >= 1.0)
            throw std::invalid_argument("adam: moment decays must be in (0,1)");
        if (eps <= 0.0) throw std::invalid_argument("adam: eps must be > 0");
    }
};

struct TrainConfig {
    double learning_rate = 1e-4;
    int batch_size = 32;
    int epochs = 40;
    uint64_t seed = 0;
    std::string checkpoint_dir = "run";
    AdamConfig adam;

    void validate() const {
        if (learning_rate <= 0.0) throw std::invalid_argument("train: learning_rate must be > 0");
        if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
        if (epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
        adam.validate();
    }
};

struct DataConfig {
    std::string manifest;
    std::string normal_label = "normal";
};

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    ScoreConfig score;
    DataConfig data;
};

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed,
                       const std::string& where) {
    if (!j.is_object()) throw ConfigError("config: " + where + " must be an object");
    for (const auto& [key, value] : j.items())
        if (!allowed.count(key))
            throw ConfigError("config: unknown key '" + key + "' in " + where);
}

template <typename V>
void read_field(const nlohmann::json& j, const char* key, V& out) {
    if (auto it = j.find(key); it != j.end()) out = it->get<V>();
}

}  // namespace detail

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
    return {{"image_size", c.image_size},   {"in_channels", c.in_channels},
            {"base_channels", c.base_channels}, {"latent_dim", c.latent_dim},
            {"beta", c.beta},               {"use_batch_norm", c.use_batch_norm}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    detail::check_keys(j,
                       {"image_size", "in_channels", "base_channels", "latent_dim", "beta",
                        "likelihood_sigma", "use_batch_norm"},
                       "model");
    ModelConfig c;
    detail::read_field(j, "image_size", c.image_size);
    detail::read_field(j, "in_channels", c.in_channels);
    detail::read_field(j, "base_channels", c.base_channels);
    detail::read_field(j, "latent_dim", c.latent_dim);
    detail::read_field(j, "beta", c.beta);
    detail::read_field(j, "likelihood_sigma", c.likelihood_sigma);
    detail::read_field(j, "use_batch_norm", c.use_batch_norm);
    c.validate();
    return c;
}

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
    return {{"learning_rate", c.learning_rate},
            {"batch_size", c.batch_size},
            {"epochs", c.epochs},
            {"seed", c.seed},
            {"checkpoint_dir", c.checkpoint_dir},
            {"adam_beta1", c.adam.beta1},
            {"adam_beta2", c.adam.beta2},
            {"adam_eps", c.adam.eps}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    detail::check_keys(j,
                       {"learning_rate", "batch_size", "epochs", "seed", "checkpoint_dir",
                        "adam_beta1", "adam_beta2", "adam_eps"},
                       "train");
    TrainConfig c;
    detail::read_field(j, "learning_rate", c.learning_rate);
    detail::read_field(j, "batch_size", c.batch_size);
    detail::read_field(j, "epochs", c.epochs);
    detail::read_field(j, "seed", c.seed);
    detail::read_field(j, "checkpoint_dir", c.checkpoint_dir);
    detail::read_field(j, "adam_beta1", c.adam.beta1);
    detail::read_field(j, "adam_beta2", c.adam.beta2);
    detail::read_field(j, "adam_eps", c.adam.eps);
    c.validate();
    return c;
}

inline nlohmann::json score_config_to_json(const ScoreConfig& c) {
    nlohmann::json names = nlohmann::json::array();
    for (const auto& n : kAllScoreNames)
        if (c.score_set.count(n)) names.push_back(n);
    return {{"num_samples", c.num_samples}, {"seed", c.seed}, {"scores", names}};
}

// "all" expands to the full score set; the "s_" prefix is optional.
inline std::set<std::string> parse_score_names(const std::vector<std::string>& names) {
    std::set<std::string> out;
    for (const auto& raw : names) {
        if (raw == "all") {
            out.insert(kAllScoreNames.begin(), kAllScoreNames.end());
            continue;
        }
        const std::string n = raw.starts_with("s_") ? raw : "s_" + raw;
        if (std::find(kAllScoreNames.begin(), kAllScoreNames.end(), n) !=
            kAllScoreNames.end()) {
            out.insert(n);
        } else {
            std::string valid = "all";
            for (const auto& v : kAllScoreNames) valid += ", " + v;
            throw ConfigError("config: unknown score '" + raw + "' (valid: " + valid + ")");
        }
    }
    return out;
}

inline ScoreConfig score_config_from_json(const nlohmann::json& j) {
    detail::check_keys(j, {"num_samples", "seed", "scores"}, "score");
    ScoreConfig c;
    detail::read_field(j, "num_samples", c.num_samples);
    detail::read_field(j, "seed", c.seed);
    if (auto it = j.find("scores"); it != j.end())
        c.score_set = parse_score_names(it->get<std::vector<std::string>>());
    c.validate();
    return c;
}

inline nlohmann::json run_config_to_json(const RunConfig& c) {
    return {{"model", model_config_to_json(c.model)},
            {"train", train_config_to_json(c.train)},
            {"score", score_config_to_json(c.score)},
            {"data", {{"manifest", c.data.manifest}, {"normal_label", c.data.normal_label}}}};
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
    detail::check_keys(j, {"model", "train", "score", "data"}, "config root");
    RunConfig c;
    if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
    if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
    if (j.contains("score")) c.score = score_config_from_json(j.at("score"));
    if (j.contains("data")) {
        detail::check_keys(j.at("data"), {"manifest", "normal_label"}, "data");
        detail::read_field(j.at("data"), "manifest", c.data.manifest);
        detail::read_field(j.at("data"), "normal_label", c.data.normal_label);
    }
    return c;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config: " + path + ": " + e.what());
    }
    return run_config_from_json(j);
}

}  // namespace vaedet
