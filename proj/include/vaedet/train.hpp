// Adam training loop for the beta-weighted objective, with per-epoch
// validation (frozen batch norm, no parameter updates), best/final
// checkpoints and a JSONL log. Everything is reproducible from the seed.
//
// Checkpoint file format, little-endian:
//   magic "VAEC" | version u16 | flags u16 (bit0: optimizer state present) |
//   dtype u8 | json_len u64 | json (config, epoch, history, rng) |
//   tensor count u32 | per tensor: name_len u16, name, ndim u8, dims u32...,
//   payload | crc32 u32 over all preceding bytes
// Loads validate magic, version, dtype and the shape table before accepting
// anything, and the trailing CRC catches payload corruption.

#pragma once

#include <array>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "vaedet/config.hpp"
#include "vaedet/data.hpp"
#include "vaedet/model.hpp"

namespace vaedet {

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

template <typename T>
struct AdamState {
    std::map<std::string, std::vector<T>> m;  // first moments
    std::map<std::string, std::vector<T>> v;  // second moments
    int64_t step = 0;
};

// Standard Adam update with bias correction. Parameters with untouched grads
// are treated as zero-gradient: values unchanged, moments decayed.
template <typename T>
void adam_step(ParameterStore<T>& params, AdamState<T>& state, double lr,
               const AdamConfig& cfg) {
    state.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (auto& [name, p] : params) {
        auto values = p.mutable_values();
        auto& m = state.m[name];
        auto& v = state.v[name];
        if (m.empty()) m.assign(values.size(), T(0));
        if (v.empty()) v.assign(values.size(), T(0));
        if (m.size() != values.size())
            throw std::invalid_argument("adam: state size mismatch for " + name);
        const auto grad = p.grad_vector();
        for (size_t i = 0; i < values.size(); ++i) {
            const double g = static_cast<double>(grad[i]);
            const double mi = cfg.beta1 * static_cast<double>(m[i]) + (1.0 - cfg.beta1) * g;
            const double vi = cfg.beta2 * static_cast<double>(v[i]) + (1.0 - cfg.beta2) * g * g;
            m[i] = static_cast<T>(mi);
            v[i] = static_cast<T>(vi);
            const double m_hat = mi / bc1;
            const double v_hat = vi / bc2;
            values[i] -= static_cast<T>(lr * m_hat / (std::sqrt(v_hat) + cfg.eps));
        }
    }
}

// ---------------------------------------------------------------------------
// checkpointing
// ---------------------------------------------------------------------------

inline uint32_t crc32(const void* data, size_t n, uint32_t seed = 0) {
    static const auto table = [] {
        std::array<uint32_t, 256> t{};
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    uint32_t crc = seed ^ 0xFFFFFFFFu;
    const auto* p = static_cast<const uint8_t*>(data);
    for (size_t i = 0; i < n; ++i) crc = table[(crc ^ p[i]) & 0xFFu] ^ (crc >> 8);
    return crc ^ 0xFFFFFFFFu;
}

struct EpochStats {
    int epoch = 0;  // 1-based
    double train_loss = 0, train_reconst = 0, train_kl = 0;
    double val_loss = 0, val_reconst = 0, val_kl = 0;
};

inline void to_json(nlohmann::json& j, const EpochStats& e) {
    j = {{"epoch", e.epoch},           {"train_loss", e.train_loss},
         {"train_reconst", e.train_reconst}, {"train_kl", e.train_kl},
         {"val_loss", e.val_loss},     {"val_reconst", e.val_reconst},
         {"val_kl", e.val_kl}};
}

inline void from_json(const nlohmann::json& j, EpochStats& e) {
    j.at("epoch").get_to(e.epoch);
    j.at("train_loss").get_to(e.train_loss);
    j.at("train_reconst").get_to(e.train_reconst);
    j.at("train_kl").get_to(e.train_kl);
    j.at("val_loss").get_to(e.val_loss);
    j.at("val_reconst").get_to(e.val_reconst);
    j.at("val_kl").get_to(e.val_kl);
}

// Snapshot of everything training produced. Tensor names carry a section
// prefix: "param." trainables, "state." batch-norm statistics, "opt.m." /
// "opt.v." Adam moments.
template <typename T>
struct Checkpoint {
    ModelConfig config;
    std::map<std::string, std::pair<Shape, std::vector<T>>> tensors;
    bool has_opt = false;
    int64_t opt_step = 0;
    std::array<uint64_t, 4> rng_state{};
    int epoch = 0;
    std::vector<EpochStats> history;
    std::string id;  // crc over the tensor table, filled by save/load
};

template <typename T>
Checkpoint<T> snapshot(const VaeModel<T>& model, const AdamState<T>* opt, Rng& rng, int epoch,
                       const std::vector<EpochStats>& history) {
    Checkpoint<T> ck;
    ck.config = model.config;
    for (const auto& [name, p] : model.params)
        ck.tensors["param." + name] = {p.shape(),
                                       std::vector<T>(p.values().begin(), p.values().end())};
    for (const auto& [name, s] : model.state)
        ck.tensors["state." + name] = {s.shape(),
                                       std::vector<T>(s.values().begin(), s.values().end())};
    if (opt) {
        ck.has_opt = true;
        ck.opt_step = opt->step;
        for (const auto& [name, m] : opt->m)
            ck.tensors["opt.m." + name] = {
                Shape{static_cast<int>(m.size())}, m};
        for (const auto& [name, v] : opt->v)
            ck.tensors["opt.v." + name] = {
                Shape{static_cast<int>(v.size())}, v};
    }
    ck.rng_state = rng.state();
    ck.epoch = epoch;
    ck.history = history;
    return ck;
}

namespace detail {

template <typename V>
void append_le(std::string& buf, V v) {
    for (size_t i = 0; i < sizeof(V); ++i)
        buf.push_back(static_cast<char>((static_cast<uint64_t>(v) >> (8 * i)) & 0xff));
}

template <typename V>
V parse_le(const std::string& buf, size_t& pos, const std::string& path) {
    if (pos + sizeof(V) > buf.size())
        throw std::runtime_error("checkpoint: truncated file " + path);
    uint64_t v = 0;
    for (size_t i = 0; i < sizeof(V); ++i)
        v |= static_cast<uint64_t>(static_cast<uint8_t>(buf[pos + i])) << (8 * i);
    pos += sizeof(V);
    return static_cast<V>(v);
}

inline constexpr uint16_t kCheckpointVersion = 1;

inline std::string hex32(uint32_t v) {
    char buf[9];
    std::snprintf(buf, sizeof(buf), "%08x", v);
    return buf;
}

}  // namespace detail

template <typename T>
void save_checkpoint(Checkpoint<T>& ck, const std::string& path) {
    std::string buf;
    buf.append("VAEC");
    detail::append_le<uint16_t>(buf, detail::kCheckpointVersion);
    detail::append_le<uint16_t>(buf, ck.has_opt ? 1 : 0);
    buf.push_back(static_cast<char>(detail::dtype_of<T>()));

    nlohmann::json meta;
    meta["model"] = model_config_to_json(ck.config);
    meta["epoch"] = ck.epoch;
    meta["opt_step"] = ck.opt_step;
    meta["rng"] = {detail::hex32(static_cast<uint32_t>(ck.rng_state[0] >> 32)) +
                       detail::hex32(static_cast<uint32_t>(ck.rng_state[0])),
                   detail::hex32(static_cast<uint32_t>(ck.rng_state[1] >> 32)) +
                       detail::hex32(static_cast<uint32_t>(ck.rng_state[1])),
                   detail::hex32(static_cast<uint32_t>(ck.rng_state[2] >> 32)) +
                       detail::hex32(static_cast<uint32_t>(ck.rng_state[2])),
                   detail::hex32(static_cast<uint32_t>(ck.rng_state[3] >> 32)) +
                       detail::hex32(static_cast<uint32_t>(ck.rng_state[3]))};
    meta["history"] = ck.history;
    const std::string meta_str = meta.dump();
    detail::append_le<uint64_t>(buf, meta_str.size());
    buf.append(meta_str);

    const size_t table_start = buf.size();
    detail::append_le<uint32_t>(buf, static_cast<uint32_t>(ck.tensors.size()));
    for (const auto& [name, entry] : ck.tensors) {
        const auto& [shape, data] = entry;
        detail::append_le<uint16_t>(buf, static_cast<uint16_t>(name.size()));
        buf.append(name);
        buf.push_back(static_cast<char>(shape.size()));
        for (int d : shape) detail::append_le<uint32_t>(buf, static_cast<uint32_t>(d));
        using Bits = std::conditional_t<sizeof(T) == 4, uint32_t, uint64_t>;
        for (const T x : data) {
            Bits b;
            std::memcpy(&b, &x, sizeof(T));
            detail::append_le<Bits>(buf, b);
        }
    }
    ck.id = detail::hex32(crc32(buf.data() + table_start, buf.size() - table_start));
    detail::append_le<uint32_t>(buf, crc32(buf.data(), buf.size()));

    // atomic write: temp file then rename
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("checkpoint: cannot write " + tmp);
        out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
        if (!out) throw std::runtime_error("checkpoint: short write to " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw std::runtime_error("checkpoint: cannot rename " + tmp + " to " + path + ": " +
                                     ec.message());
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.size() < 17 || buf.compare(0, 4, "VAEC") != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path);
    const uint32_t stored_crc =
        static_cast<uint32_t>(static_cast<uint8_t>(buf[buf.size() - 4])) |
        static_cast<uint32_t>(static_cast<uint8_t>(buf[buf.size() - 3])) << 8 |
        static_cast<uint32_t>(static_cast<uint8_t>(buf[buf.size() - 2])) << 16 |
        static_cast<uint32_t>(static_cast<uint8_t>(buf[buf.size() - 1])) << 24;
    if (crc32(buf.data(), buf.size() - 4) != stored_crc)
        throw std::runtime_error("checkpoint: checksum mismatch in " + path);

    size_t pos = 4;
    const auto version = detail::parse_le<uint16_t>(buf, pos, path);
    if (version != detail::kCheckpointVersion)
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version) +
                                 " in " + path);
    const auto flags = detail::parse_le<uint16_t>(buf, pos, path);
    const auto dtype = static_cast<ContainerDtype>(detail::parse_le<uint8_t>(buf, pos, path));
    if (dtype != detail::dtype_of<T>())
        throw std::runtime_error("checkpoint: dtype mismatch in " + path);

    const auto meta_len = detail::parse_le<uint64_t>(buf, pos, path);
    if (pos + meta_len > buf.size()) throw std::runtime_error("checkpoint: truncated " + path);
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(buf.substr(pos, meta_len));
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("checkpoint: bad metadata in " + path + ": " + e.what());
    }
    pos += meta_len;

    Checkpoint<T> ck;
    ck.config = model_config_from_json(meta.at("model"));
    ck.epoch = meta.at("epoch").get<int>();
    ck.opt_step = meta.at("opt_step").get<int64_t>();
    ck.has_opt = (flags & 1) != 0;
    ck.history = meta.at("history").get<std::vector<EpochStats>>();
    const auto rng_words = meta.at("rng").get<std::vector<std::string>>();
    if (rng_words.size() != 4) throw std::runtime_error("checkpoint: bad rng state in " + path);
    for (size_t i = 0; i < 4; ++i) ck.rng_state[i] = std::stoull(rng_words[i], nullptr, 16);

    const size_t table_start = pos;
    const auto count = detail::parse_le<uint32_t>(buf, pos, path);
    for (uint32_t t = 0; t < count; ++t) {
        const auto name_len = detail::parse_le<uint16_t>(buf, pos, path);
        if (pos + name_len > buf.size()) throw std::runtime_error("checkpoint: truncated " + path);
        std::string name = buf.substr(pos, name_len);
        pos += name_len;
        const int ndim = detail::parse_le<uint8_t>(buf, pos, path);
        Shape shape;
        int64_t n = 1;
        for (int i = 0; i < ndim; ++i) {
            shape.push_back(static_cast<int>(detail::parse_le<uint32_t>(buf, pos, path)));
            n *= shape.back();
        }
        if (n < 0 || pos + static_cast<size_t>(n) * sizeof(T) > buf.size() - 4)
            throw std::runtime_error("checkpoint: shape table overruns payload in " + path);
        std::vector<T> data(static_cast<size_t>(n));
        using Bits = std::conditional_t<sizeof(T) == 4, uint32_t, uint64_t>;
        for (auto& x : data) {
            const Bits b = detail::parse_le<Bits>(buf, pos, path);
            std::memcpy(&x, &b, sizeof(T));
        }
        ck.tensors.emplace(std::move(name), std::make_pair(std::move(shape), std::move(data)));
    }
    if (pos != buf.size() - 4)
        throw std::runtime_error("checkpoint: trailing bytes in " + path);
    ck.id = detail::hex32(crc32(buf.data() + table_start, buf.size() - 4 - table_start));
    return ck;
}

// Rebuilds a frozen model (no gradients, inference-mode batch norm) from a
// checkpoint. The shape table is validated against a freshly built model.
template <typename T>
VaeModel<T> model_from_checkpoint(const Checkpoint<T>& ck) {
    VaeModel<T> model = make_vae_model<T>(ck.config, /*seed=*/0);
    auto restore = [&](ParameterStore<T>& dst, const std::string& prefix) {
        for (auto& [name, tensor] : dst) {
            const auto it = ck.tensors.find(prefix + name);
            if (it == ck.tensors.end())
                throw std::runtime_error("checkpoint: missing tensor " + prefix + name);
            const auto& [shape, data] = it->second;
            if (shape != tensor.shape())
                throw std::runtime_error("checkpoint: shape mismatch for " + prefix + name +
                                         ": " + shape_str(shape) + " vs " +
                                         shape_str(tensor.shape()));
            std::copy(data.begin(), data.end(), tensor.mutable_values().begin());
        }
    };
    restore(model.params, "param.");
    restore(model.state, "state.");
    set_requires_grad(model, false);
    model.train_mode = false;
    return model;
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

template <typename T>
struct TrainResult {
    std::vector<EpochStats> history;
    std::vector<double> wall_time_s;  // per epoch, log-only
    int best_epoch = 0;               // 1-based
    std::string final_path;
    std::string best_path;
    Checkpoint<T> best_ckpt;
    Checkpoint<T> final_ckpt;
};

using EpochCallback = std::function<void(const EpochStats&, double wall_time_s)>;

// Trains in place. The manifest's train and val splits must be nonempty and
// hold only the normal class. Writes final.ckpt, best.ckpt (lowest val loss)
// and train_log.jsonl under cfg.checkpoint_dir.
template <typename T>
TrainResult<T> train(VaeModel<T>& model, const DatasetManifest& manifest,
                     const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
    cfg.validate();
    const auto train_items = load_split<T>(manifest, "train", model.config.image_size);
    const auto val_items = load_split<T>(manifest, "val", model.config.image_size);
    if (train_items.empty()) throw TrainingError("train: empty train split");
    if (val_items.empty()) throw TrainingError("train: empty val split");
    std::set<std::string> labels;
    for (const auto& item : train_items) labels.insert(item.label);
    for (const auto& item : val_items) labels.insert(item.label);
    if (labels.size() != 1)
        throw TrainingError("train: train/val must hold a single normal class, found " +
                            std::to_string(labels.size()));

    std::filesystem::create_directories(cfg.checkpoint_dir);
    std::ofstream log(std::filesystem::path(cfg.checkpoint_dir) / "train_log.jsonl",
                      std::ios::trunc);
    if (!log) throw std::runtime_error("train: cannot write train_log.jsonl");

    Rng eps_rng(derive_seed(cfg.seed, /*tag=*/0xE65));
    AdamState<T> opt;
    const int M = model.config.latent_dim;

    TrainResult<T> result;
    double best_val = std::numeric_limits<double>::infinity();

    auto eval_split = [&](const std::vector<ImageRecord<T>>& items, EpochStats& st) {
        NoGradGuard no_grad;
        model.train_mode = false;
        double loss_sum = 0, rec_sum = 0, kl_sum = 0;
        std::vector<int> idx(items.size());
        for (size_t i = 0; i < items.size(); ++i) idx[i] = static_cast<int>(i);
        for (size_t start = 0; start < items.size();
             start += static_cast<size_t>(cfg.batch_size)) {
            const size_t end =
                std::min(items.size(), start + static_cast<size_t>(cfg.batch_size));
            std::vector<int> batch_idx(idx.begin() + static_cast<int64_t>(start),
                                       idx.begin() + static_cast<int64_t>(end));
            Tensor<T> x = stack_batch(items, batch_idx);
            // validation uses the posterior mean: eps = 0
            Tensor<T> eps = Tensor<T>::zeros({static_cast<int>(batch_idx.size()), M});
            auto lv = training_loss(model, x, eps);
            const double w = static_cast<double>(batch_idx.size());
            loss_sum += lv.loss.item() * w;
            rec_sum += lv.reconstruction * w;
            kl_sum += lv.kl * w;
        }
        const double n = static_cast<double>(items.size());
        st.val_loss = loss_sum / n;
        st.val_reconst = rec_sum / n;
        st.val_kl = kl_sum / n;
    };

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        model.train_mode = true;
        const auto batches = epoch_batches(static_cast<int>(train_items.size()),
                                           cfg.batch_size, cfg.seed, epoch - 1);
        double loss_sum = 0, rec_sum = 0, kl_sum = 0;
        int step = 0;
        for (const auto& batch_idx : batches) {
            ++step;
            Tensor<T> x = stack_batch(train_items, batch_idx);
            const int B = static_cast<int>(batch_idx.size());
            Tensor<T> eps = Tensor<T>::zeros({B, M});
            {
                auto ev = eps.mutable_values();
                for (auto& e : ev) e = static_cast<T>(eps_rng.normal());
            }
            LossValue<T> lv = [&] {
                try {
                    return training_loss(model, x, eps);
                } catch (const std::runtime_error& e) {
                    throw TrainingError("train: epoch " + std::to_string(epoch) + " step " +
                                        std::to_string(step) + ": " + e.what());
                }
            }();
            if (!std::isfinite(static_cast<double>(lv.loss.item())))
                throw TrainingError("train: non-finite loss at epoch " + std::to_string(epoch) +
                                    " step " + std::to_string(step));
            for (auto& [name, p] : model.params) p.zero_grad();
            lv.loss.backward();
            adam_step(model.params, opt, cfg.learning_rate, cfg.adam);
            const double w = static_cast<double>(B);
            loss_sum += static_cast<double>(lv.loss.item()) * w;
            rec_sum += lv.reconstruction * w;
            kl_sum += lv.kl * w;
        }

        EpochStats st;
        st.epoch = epoch;
        const double n = static_cast<double>(train_items.size());
        st.train_loss = loss_sum / n;
        st.train_reconst = rec_sum / n;
        st.train_kl = kl_sum / n;
        eval_split(val_items, st);
        result.history.push_back(st);

        const double wall =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.wall_time_s.push_back(wall);
        nlohmann::json line = st;
        line["wall_time_s"] = wall;
        log << line.dump() << "\n";
        log.flush();
        if (on_epoch) on_epoch(st, wall);

        if (st.val_loss < best_val) {
            best_val = st.val_loss;
            result.best_epoch = epoch;
            result.best_ckpt = snapshot(model, &opt, eps_rng, epoch, result.history);
        }
    }

    model.train_mode = false;
    result.final_ckpt = snapshot(model, &opt, eps_rng, cfg.epochs, result.history);
    result.final_path =
        (std::filesystem::path(cfg.checkpoint_dir) / "final.ckpt").string();
    result.best_path = (std::filesystem::path(cfg.checkpoint_dir) / "best.ckpt").string();
    save_checkpoint(result.final_ckpt, result.final_path);
    save_checkpoint(result.best_ckpt, result.best_path);
    return result;
}

}  // namespace vaedet
