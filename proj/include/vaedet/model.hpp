// The convolutional VAE: DCGAN-style encoder and decoder, reparameterized
// sampling, and the beta-weighted training objective
//
//   mean_batch[ ||x - mu_dec(z)||^2 + beta * KL(q(z|x) || N(0,I)) ].
//
// The architecture is fully convolutional. For image size s the encoder
// stacks log2(s) - 2 stride-2 blocks (conv k4 s2 p1 -> norm -> leaky_relu),
// ending at 4x4 spatial, then two parallel head convolutions (k4, valid)
// emit the posterior mean and log-variance at 1x1. The decoder mirrors it
// with transposed convolutions and a tanh output, so decoded values lie
// strictly inside (-1, 1). Convolutions feeding a norm layer carry no bias.

#pragma once

#include <cmath>
#include <map>
#include <string>

#include "vaedet/gaussian.hpp"
#include "vaedet/ops.hpp"
#include "vaedet/rng.hpp"
#include "vaedet/tensor.hpp"

namespace vaedet {

inline constexpr double kLogVarClampLo = -10.0;
inline constexpr double kLogVarClampHi = 10.0;
inline constexpr double kLeakySlope = 0.2;
inline constexpr double kWeightInitStd = 0.02;
inline constexpr double kBatchNormMomentum = 0.1;
inline constexpr double kBatchNormEps = 1e-5;

struct ModelConfig {
    int image_size = 128;
    int in_channels = 3;
    int base_channels = 64;
    int latent_dim = 300;
    double beta = 0.01;
    double likelihood_sigma = 0.0;  // 0 means "derive from beta"
    bool use_batch_norm = true;

    // sigma = sqrt(beta / 2) makes the objective an exact affine transform
    // of the Gaussian-likelihood ELBO.
    double sigma() const {
        return likelihood_sigma > 0.0 ? likelihood_sigma : std::sqrt(beta / 2.0);
    }

    int num_blocks() const {
        int s = image_size, blocks = 0;
        while (s > 4) {
            s /= 2;
            ++blocks;
        }
        return blocks;
    }

    void validate() const {
        if (image_size < 16 || (image_size & (image_size - 1)) != 0)
            throw std::invalid_argument("model: image_size must be a power of two >= 16");
        if (in_channels < 1) throw std::invalid_argument("model: in_channels must be >= 1");
        if (base_channels < 1) throw std::invalid_argument("model: base_channels must be >= 1");
        if (latent_dim < 1) throw std::invalid_argument("model: latent_dim must be >= 1");
        if (beta <= 0.0) throw std::invalid_argument("model: beta must be > 0");
        if (likelihood_sigma < 0.0)
            throw std::invalid_argument(
                "model: likelihood_sigma must be positive (or 0 to derive sqrt(beta/2))");
    }

    // Channel width entering block i of the encoder (i = 0 is the image).
    int channels_at(int i) const {
        return i == 0 ? in_channels : base_channels * (1 << (i - 1));
    }
    int top_channels() const { return channels_at(num_blocks()); }
};

template <typename T>
using ParameterStore = std::map<std::string, Tensor<T>>;

template <typename T>
struct VaeModel {
    ModelConfig config;
    ParameterStore<T> params;  // encoder "enc.*", decoder "dec.*"
    ParameterStore<T> state;   // batch-norm running statistics, not trained
    bool train_mode = false;   // governs batch-norm behavior
};

namespace detail {

template <typename T>
void add_conv_layer(VaeModel<T>& m, Rng& rng, const std::string& prefix, int c_in, int c_out,
                    bool with_norm, bool with_bias) {
    m.params.emplace(prefix + ".w",
                     Tensor<T>::randn({c_out, c_in, 4, 4}, rng, 0.0, kWeightInitStd, true));
    if (with_bias) m.params.emplace(prefix + ".b", Tensor<T>::zeros({c_out}, true));
    if (with_norm) {
        m.params.emplace(prefix + ".norm.gamma",
                         Tensor<T>::randn({c_out}, rng, 1.0, kWeightInitStd, true));
        m.params.emplace(prefix + ".norm.beta", Tensor<T>::zeros({c_out}, true));
        m.state.emplace(prefix + ".norm.running_mean", Tensor<T>::zeros({c_out}));
        m.state.emplace(prefix + ".norm.running_var", Tensor<T>::full({c_out}, T(1)));
    }
}

// Transposed-conv weights are [Cin, Cout, kH, kW].
template <typename T>
void add_deconv_layer(VaeModel<T>& m, Rng& rng, const std::string& prefix, int c_in, int c_out,
                      bool with_norm, bool with_bias) {
    m.params.emplace(prefix + ".w",
                     Tensor<T>::randn({c_in, c_out, 4, 4}, rng, 0.0, kWeightInitStd, true));
    if (with_bias) m.params.emplace(prefix + ".b", Tensor<T>::zeros({c_out}, true));
    if (with_norm) {
        m.params.emplace(prefix + ".norm.gamma",
                         Tensor<T>::randn({c_out}, rng, 1.0, kWeightInitStd, true));
        m.params.emplace(prefix + ".norm.beta", Tensor<T>::zeros({c_out}, true));
        m.state.emplace(prefix + ".norm.running_mean", Tensor<T>::zeros({c_out}));
        m.state.emplace(prefix + ".norm.running_var", Tensor<T>::full({c_out}, T(1)));
    }
}

// Applies "norm -> leaky_relu" after a (de)convolution.
template <typename T>
Tensor<T> block_tail(const VaeModel<T>& m, const std::string& prefix, Tensor<T> h) {
    if (m.config.use_batch_norm) {
        Tensor<T> rm = m.state.at(prefix + ".norm.running_mean");
        Tensor<T> rv = m.state.at(prefix + ".norm.running_var");
        h = batch_norm(h, m.params.at(prefix + ".norm.gamma"),
                       m.params.at(prefix + ".norm.beta"), rm, rv, m.train_mode,
                       T(kBatchNormMomentum), T(kBatchNormEps));
    }
    return leaky_relu(h, T(kLeakySlope));
}

}  // namespace detail

// Builds a model with DCGAN-style initialization: conv weights N(0, 0.02),
// norm gain N(1, 0.02), biases zero. Layer creation order is fixed, so a
// seed fully determines the parameters.
template <typename T>
VaeModel<T> make_vae_model(const ModelConfig& config, uint64_t seed) {
    config.validate();
    VaeModel<T> m;
    m.config = config;
    Rng rng(derive_seed(seed, /*tag=*/0x1217));
    const int nb = config.num_blocks();
    const bool norm = config.use_batch_norm;

    for (int i = 0; i < nb; ++i)
        detail::add_conv_layer(m, rng, "enc.block" + std::to_string(i), config.channels_at(i),
                               config.channels_at(i + 1), norm, /*with_bias=*/!norm);
    detail::add_conv_layer(m, rng, "enc.mu", config.top_channels(), config.latent_dim,
                           /*with_norm=*/false, /*with_bias=*/true);
    detail::add_conv_layer(m, rng, "enc.logvar", config.top_channels(), config.latent_dim,
                           /*with_norm=*/false, /*with_bias=*/true);

    detail::add_deconv_layer(m, rng, "dec.proj", config.latent_dim, config.top_channels(),
                             norm, /*with_bias=*/!norm);
    for (int j = 0; j + 1 < nb; ++j)
        detail::add_deconv_layer(m, rng, "dec.block" + std::to_string(j),
                                 config.channels_at(nb - j), config.channels_at(nb - j - 1),
                                 norm, /*with_bias=*/!norm);
    detail::add_deconv_layer(m, rng, "dec.out", config.channels_at(1), config.in_channels,
                             /*with_norm=*/false, /*with_bias=*/true);
    return m;
}

template <typename T>
void set_requires_grad(VaeModel<T>& m, bool on) {
    for (auto& [name, p] : m.params) p.set_requires_grad(on);
}

// q(z|x): runs the encoder and returns the diagonal posterior. log_var is
// clamped to [-10, 10].
template <typename T>
GaussianDiag<T> encode(const VaeModel<T>& m, const Tensor<T>& x) {
    if (x.ndim() != 4 || x.dim(2) != m.config.image_size || x.dim(3) != m.config.image_size)
        throw std::invalid_argument("encode: expected [B," +
                                    std::to_string(m.config.in_channels) + "," +
                                    std::to_string(m.config.image_size) + "," +
                                    std::to_string(m.config.image_size) + "], got " +
                                    shape_str(x.shape()));
    if (x.dim(1) != m.config.in_channels)
        throw std::invalid_argument("encode: expected " + std::to_string(m.config.in_channels) +
                                    " channels, got " + std::to_string(x.dim(1)));
    Tensor<T> h = x;
    for (int i = 0; i < m.config.num_blocks(); ++i) {
        const std::string prefix = "enc.block" + std::to_string(i);
        const Tensor<T>* bias = nullptr;
        if (auto it = m.params.find(prefix + ".b"); it != m.params.end()) bias = &it->second;
        h = conv2d(h, m.params.at(prefix + ".w"), bias, /*stride=*/2, /*pad=*/1);
        h = detail::block_tail(m, prefix, h);
    }
    const int B = h.dim(0);
    auto head = [&](const std::string& name) {
        Tensor<T> out = conv2d(h, m.params.at(name + ".w"), &m.params.at(name + ".b"),
                               /*stride=*/1, /*pad=*/0);
        return reshape(out, {B, m.config.latent_dim});
    };
    Tensor<T> mu = head("enc.mu");
    Tensor<T> log_var = clamp(head("enc.logvar"), T(kLogVarClampLo), T(kLogVarClampHi));
    return GaussianDiag<T>(std::move(mu), std::move(log_var));
}

// mu_dec(z): runs the decoder; output shape [B,C,s,s], values in (-1, 1).
template <typename T>
Tensor<T> decode(const VaeModel<T>& m, const Tensor<T>& z) {
    if (z.ndim() != 2 || z.dim(1) != m.config.latent_dim)
        throw std::invalid_argument("decode: expected [B," +
                                    std::to_string(m.config.latent_dim) + "], got " +
                                    shape_str(z.shape()));
    const int B = z.dim(0);
    const int nb = m.config.num_blocks();
    Tensor<T> h = reshape(z, {B, m.config.latent_dim, 1, 1});

    auto bias_of = [&](const std::string& prefix) -> const Tensor<T>* {
        auto it = m.params.find(prefix + ".b");
        return it == m.params.end() ? nullptr : &it->second;
    };

    h = conv_transpose2d(h, m.params.at("dec.proj.w"), bias_of("dec.proj"), /*stride=*/1,
                         /*pad=*/0);
    h = detail::block_tail(m, "dec.proj", h);
    for (int j = 0; j + 1 < nb; ++j) {
        const std::string prefix = "dec.block" + std::to_string(j);
        h = conv_transpose2d(h, m.params.at(prefix + ".w"), bias_of(prefix), /*stride=*/2,
                             /*pad=*/1);
        h = detail::block_tail(m, prefix, h);
    }
    h = conv_transpose2d(h, m.params.at("dec.out.w"), &m.params.at("dec.out.b"), /*stride=*/2,
                         /*pad=*/1);
    return tanh(h);
}

template <typename T>
struct LossValue {
    Tensor<T> loss;        // scalar, differentiable
    double reconstruction; // mean per-item squared-error sum
    double kl;             // mean per-item KL
};

// Assembles the objective from already-computed pieces:
//   mean_b[ sum_chw (x - mu_dec)^2 + beta * KL_b ].
template <typename T>
LossValue<T> training_objective(const Tensor<T>& x, const Tensor<T>& mu_dec,
                                const GaussianDiag<T>& q, double beta) {
    auto sq = sum(square(sub(x, mu_dec)), {1, 2, 3});  // [B]
    auto kl = kl_divergence(q);                        // [B]
    auto loss = mean_all(add(sq, scale(kl, static_cast<T>(beta))));
    LossValue<T> lv{std::move(loss), 0.0, 0.0};
    lv.reconstruction = static_cast<double>(mean_all(sq).item());
    lv.kl = static_cast<double>(mean_all(kl).item());
    return lv;
}

// Single-sample training loss: one reparameterized draw per item.
template <typename T>
LossValue<T> training_loss(const VaeModel<T>& m, const Tensor<T>& x, const Tensor<T>& eps) {
    GaussianDiag<T> q = encode(m, x);
    Tensor<T> z = reparameterize(q, eps);
    Tensor<T> mu_dec = decode(m, z);
    return training_objective(x, mu_dec, q, m.config.beta);
}

}  // namespace vaedet
