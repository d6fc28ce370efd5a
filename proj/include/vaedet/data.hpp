// Dataset ingestion and preprocessing: binary PPM/PGM images, a raw tensor
// container, normalization to [-1,1], bilinear resize, JSONL manifests,
// split construction, synthetic blob corpora, and batch iteration.

#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "vaedet/rng.hpp"
#include "vaedet/tensor.hpp"

namespace vaedet {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// image containers
// ---------------------------------------------------------------------------

// Decoded 8-bit image, HWC row-major. c is 1 (PGM) or 3 (PPM).
struct ImageU8 {
    int h = 0, w = 0, c = 0;
    std::vector<uint8_t> data;

    uint8_t at(int y, int x, int ch) const {
        return data[static_cast<size_t>((y * w + x) * c + ch)];
    }
};

namespace detail {

inline int read_pnm_int(std::istream& in, const std::string& path) {
    // PNM headers allow whitespace and '#' comments between tokens.
    int ch = in.peek();
    while (ch == '#' || std::isspace(ch)) {
        if (ch == '#') {
            std::string line;
            std::getline(in, line);
        } else {
            in.get();
        }
        ch = in.peek();
    }
    int value = 0;
    if (!(in >> value)) throw std::runtime_error("image: truncated header in " + path);
    return value;
}

}  // namespace detail

inline ImageU8 load_pnm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("image: cannot open " + path);
    char m0 = 0, m1 = 0;
    in.get(m0);
    in.get(m1);
    if (m0 != 'P' || (m1 != '5' && m1 != '6'))
        throw std::runtime_error("image: bad magic in " + path + " (want P5 or P6)");
    ImageU8 img;
    img.c = (m1 == '6') ? 3 : 1;
    img.w = detail::read_pnm_int(in, path);
    img.h = detail::read_pnm_int(in, path);
    const int maxval = detail::read_pnm_int(in, path);
    if (img.w < 1 || img.h < 1) throw std::runtime_error("image: bad dimensions in " + path);
    if (maxval != 255) throw std::runtime_error("image: unsupported maxval in " + path);
    in.get();  // single whitespace byte after maxval
    const size_t n = static_cast<size_t>(img.w) * img.h * img.c;
    img.data.resize(n);
    in.read(reinterpret_cast<char*>(img.data.data()), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(in.gcount()) != n)
        throw std::runtime_error("image: truncated payload in " + path);
    return img;
}

inline void save_pnm(const ImageU8& img, const std::string& path) {
    if (img.c != 1 && img.c != 3)
        throw std::invalid_argument("image: only 1 or 3 channels supported");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("image: cannot write " + path);
    out << (img.c == 3 ? "P6" : "P5") << "\n" << img.w << " " << img.h << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.data.data()),
              static_cast<std::streamsize>(img.data.size()));
    if (!out) throw std::runtime_error("image: short write to " + path);
}

// ---------------------------------------------------------------------------
// raw tensor container: magic VAET, version u16, dtype u8, ndim u8,
// dims u32 little-endian, payload little-endian row-major.
// ---------------------------------------------------------------------------

enum class ContainerDtype : uint8_t { f32 = 1, f64 = 2, u8 = 3 };

namespace detail {

template <typename V>
void write_le(std::ostream& out, V v) {
    uint8_t buf[sizeof(V)];
    for (size_t i = 0; i < sizeof(V); ++i)
        buf[i] = static_cast<uint8_t>((static_cast<uint64_t>(v) >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(buf), sizeof(V));
}

template <typename V>
V read_le(std::istream& in, const std::string& path) {
    uint8_t buf[sizeof(V)];
    in.read(reinterpret_cast<char*>(buf), sizeof(V));
    if (in.gcount() != sizeof(V)) throw std::runtime_error("container: truncated " + path);
    uint64_t v = 0;
    for (size_t i = 0; i < sizeof(V); ++i) v |= static_cast<uint64_t>(buf[i]) << (8 * i);
    return static_cast<V>(v);
}

template <typename T>
constexpr ContainerDtype dtype_of() {
    if constexpr (std::is_same_v<T, float>) return ContainerDtype::f32;
    if constexpr (std::is_same_v<T, double>) return ContainerDtype::f64;
    if constexpr (std::is_same_v<T, uint8_t>) return ContainerDtype::u8;
}

inline constexpr uint16_t kContainerVersion = 1;

template <typename T>
void write_container_payload(std::ostream& out, const T* data, size_t n) {
    if constexpr (std::is_same_v<T, uint8_t>) {
        out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n));
    } else {
        using Bits = std::conditional_t<sizeof(T) == 4, uint32_t, uint64_t>;
        for (size_t i = 0; i < n; ++i) {
            Bits b;
            std::memcpy(&b, &data[i], sizeof(T));
            write_le(out, b);
        }
    }
}

template <typename T>
void read_container_payload(std::istream& in, T* data, size_t n, const std::string& path) {
    if constexpr (std::is_same_v<T, uint8_t>) {
        in.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(n));
        if (static_cast<size_t>(in.gcount()) != n)
            throw std::runtime_error("container: truncated " + path);
    } else {
        using Bits = std::conditional_t<sizeof(T) == 4, uint32_t, uint64_t>;
        for (size_t i = 0; i < n; ++i) {
            Bits b = read_le<Bits>(in, path);
            std::memcpy(&data[i], &b, sizeof(T));
        }
    }
}

}  // namespace detail

template <typename T>
void save_tensor_container(const std::string& path, const Shape& dims, const T* data) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("container: cannot write " + path);
    out.write("VAET", 4);
    detail::write_le<uint16_t>(out, detail::kContainerVersion);
    out.put(static_cast<char>(detail::dtype_of<T>()));
    out.put(static_cast<char>(dims.size()));
    int64_t n = 1;
    for (int d : dims) {
        detail::write_le<uint32_t>(out, static_cast<uint32_t>(d));
        n *= d;
    }
    detail::write_container_payload(out, data, static_cast<size_t>(n));
    if (!out) throw std::runtime_error("container: short write to " + path);
}

template <typename T>
void save_tensor_container(const std::string& path, const Tensor<T>& t) {
    save_tensor_container(path, t.shape(), t.values().data());
}

template <typename T>
std::pair<Shape, std::vector<T>> load_tensor_container(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("container: cannot open " + path);
    char magic[4] = {};
    in.read(magic, 4);
    if (in.gcount() != 4 || std::string(magic, 4) != "VAET")
        throw std::runtime_error("container: bad magic in " + path);
    const auto version = detail::read_le<uint16_t>(in, path);
    if (version != detail::kContainerVersion)
        throw std::runtime_error("container: unsupported version in " + path);
    const auto dtype = static_cast<ContainerDtype>(in.get());
    if (dtype != detail::dtype_of<T>())
        throw std::runtime_error("container: dtype mismatch in " + path);
    const int ndim = in.get();
    if (ndim < 0 || ndim > 8) throw std::runtime_error("container: bad rank in " + path);
    Shape dims;
    int64_t n = 1;
    for (int i = 0; i < ndim; ++i) {
        dims.push_back(static_cast<int>(detail::read_le<uint32_t>(in, path)));
        n *= dims.back();
    }
    std::vector<T> data(static_cast<size_t>(n));
    detail::read_container_payload(in, data.data(), data.size(), path);
    return {std::move(dims), std::move(data)};
}

// Decodes PPM/PGM by extension/magic, or a u8 HWC tensor container (.vt).
inline ImageU8 load_image(const std::string& path) {
    std::ifstream probe(path, std::ios::binary);
    if (!probe) throw std::runtime_error("image: cannot open " + path);
    char magic[4] = {};
    probe.read(magic, 4);
    probe.close();
    if (magic[0] == 'P' && (magic[1] == '5' || magic[1] == '6')) return load_pnm(path);
    if (std::string(magic, 4) == "VAET") {
        auto [dims, data] = load_tensor_container<uint8_t>(path);
        if (dims.size() != 3)
            throw std::runtime_error("image: container in " + path + " must be HWC rank 3");
        ImageU8 img;
        img.h = dims[0];
        img.w = dims[1];
        img.c = dims[2];
        if (img.c != 1 && img.c != 3)
            throw std::runtime_error("image: container in " + path + " must have 1 or 3 channels");
        img.data = std::move(data);
        return img;
    }
    throw std::runtime_error("image: unsupported format in " + path);
}

// ---------------------------------------------------------------------------
// preprocessing
// ---------------------------------------------------------------------------

// uint8 HWC -> float CHW in [-1, 1]: v -> v / 127.5 - 1.
template <typename T>
Tensor<T> normalize(const ImageU8& img) {
    std::vector<T> out(static_cast<size_t>(img.c) * img.h * img.w);
    for (int ch = 0; ch < img.c; ++ch)
        for (int y = 0; y < img.h; ++y)
            for (int x = 0; x < img.w; ++x)
                out[static_cast<size_t>((ch * img.h + y) * img.w + x)] =
                    static_cast<T>(img.at(y, x, ch) / 127.5 - 1.0);
    return Tensor<T>({img.c, img.h, img.w}, std::move(out));
}

// Bilinear resize of a CHW tensor to target x target, half-pixel centers
// (align_corners = false). Bit-exact identity when already at target size.
// Interpolation is convex, so value bounds are preserved.
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& chw, int target) {
    if (target < 1) throw std::invalid_argument("resize: target must be >= 1");
    if (chw.ndim() != 3)
        throw std::invalid_argument("resize: expected [C,H,W], got " + shape_str(chw.shape()));
    const int C = chw.dim(0), H = chw.dim(1), W = chw.dim(2);
    if (H == target && W == target)
        return Tensor<T>(chw.shape(), std::vector<T>(chw.values().begin(), chw.values().end()));
    auto src = chw.values();
    std::vector<T> out(static_cast<size_t>(C) * target * target);
    const double sy = static_cast<double>(H) / target;
    const double sx = static_cast<double>(W) / target;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int y = 0; y < target; ++y) {
        const double fy = std::max(0.0, (y + 0.5) * sy - 0.5);
        const int y0 = std::min(static_cast<int>(fy), H - 1);
        const int y1 = std::min(y0 + 1, H - 1);
        const double wy = fy - y0;
        for (int x = 0; x < target; ++x) {
            const double fx = std::max(0.0, (x + 0.5) * sx - 0.5);
            const int x0 = std::min(static_cast<int>(fx), W - 1);
            const int x1 = std::min(x0 + 1, W - 1);
            const double wx = fx - x0;
            for (int ch = 0; ch < C; ++ch) {
                const T* plane = src.data() + static_cast<size_t>(ch) * H * W;
                const double top = plane[y0 * W + x0] * (1.0 - wx) + plane[y0 * W + x1] * wx;
                const double bot = plane[y1 * W + x0] * (1.0 - wx) + plane[y1 * W + x1] * wx;
                out[static_cast<size_t>((ch * target + y) * target + x)] =
                    static_cast<T>(top * (1.0 - wy) + bot * wy);
            }
        }
    }
    return Tensor<T>({C, target, target}, std::move(out));
}

// Full pipeline for a decoded image: normalize then resize. The tensor-space
// half (resize only) is idempotent, so running it twice equals once.
template <typename T>
Tensor<T> preprocess(const ImageU8& img, int image_size) {
    return resize_bilinear(normalize<T>(img), image_size);
}

// ---------------------------------------------------------------------------
// manifests and splits
// ---------------------------------------------------------------------------

inline const std::vector<std::string> kSplitNames = {"train", "val", "test_normal",
                                                     "test_anomaly"};

struct ManifestRecord {
    std::string path;   // relative to the manifest's directory
    std::string label;
    std::string split;  // one of kSplitNames
};

struct DatasetManifest {
    std::vector<ManifestRecord> records;
    fs::path base_dir;  // directory the paths resolve against

    std::vector<ManifestRecord> split(const std::string& name) const {
        std::vector<ManifestRecord> out;
        for (const auto& r : records)
            if (r.split == name) out.push_back(r);
        return out;
    }

    fs::path resolve(const ManifestRecord& r) const { return base_dir / r.path; }
};

inline void validate_record(const ManifestRecord& r) {
    if (r.path.empty()) throw std::runtime_error("manifest: empty path");
    if (r.label.empty()) throw std::runtime_error("manifest: empty label for " + r.path);
    if (std::find(kSplitNames.begin(), kSplitNames.end(), r.split) == kSplitNames.end())
        throw std::runtime_error("manifest: unknown split '" + r.split + "' for " + r.path);
}

inline DatasetManifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("manifest: cannot open " + path);
    DatasetManifest m;
    m.base_dir = fs::path(path).parent_path();
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw std::runtime_error("manifest: " + path + ":" + std::to_string(lineno) + ": " +
                                     e.what());
        }
        ManifestRecord r;
        r.path = j.at("path").get<std::string>();
        r.label = j.at("label").get<std::string>();
        r.split = j.at("split").get<std::string>();
        validate_record(r);
        m.records.push_back(std::move(r));
    }
    return m;
}

inline void save_manifest(const DatasetManifest& m, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("manifest: cannot write " + path);
    for (const auto& r : m.records) {
        nlohmann::json j{{"path", r.path}, {"label", r.label}, {"split", r.split}};
        out << j.dump() << "\n";
    }
    if (!out) throw std::runtime_error("manifest: short write to " + path);
}

struct SplitCounts {
    int train = 0;
    int val = 0;
    int test_normal = 0;            // drawn out of the val pool
    int test_anomaly_per_class = 0;
};

// Builds the evaluation protocol splits: train and val are seeded draws from
// the normal class; test_normal re-tags part of the val pool; every other
// class contributes test_anomaly_per_class images to test_anomaly. Each
// record gets exactly one split tag, so splits stay disjoint by path.
inline DatasetManifest make_splits(const DatasetManifest& all, const std::string& normal_label,
                                   uint64_t seed, const SplitCounts& counts) {
    if (counts.test_normal > counts.val)
        throw std::runtime_error("split: test_normal (" + std::to_string(counts.test_normal) +
                                 ") cannot exceed val (" + std::to_string(counts.val) + ")");
    std::map<std::string, std::vector<const ManifestRecord*>> by_label;
    for (const auto& r : all.records) by_label[r.label].push_back(&r);

    const auto normal_it = by_label.find(normal_label);
    const int normal_count =
        normal_it == by_label.end() ? 0 : static_cast<int>(normal_it->second.size());
    const int need_normal = counts.train + counts.val;
    if (normal_count < need_normal)
        throw std::runtime_error("split: class '" + normal_label + "' has " +
                                 std::to_string(normal_count) + " images, need " +
                                 std::to_string(need_normal) + " (short by " +
                                 std::to_string(need_normal - normal_count) + ")");

    DatasetManifest out;
    out.base_dir = all.base_dir;
    Rng rng(derive_seed(seed, /*tag=*/0x5114));

    auto shuffled = normal_it->second;
    shuffle(shuffled, rng);
    for (int i = 0; i < counts.train; ++i)
        out.records.push_back({shuffled[static_cast<size_t>(i)]->path, normal_label, "train"});
    // val pool: the first test_normal of it becomes the held-out normal set
    for (int i = 0; i < counts.val; ++i) {
        const auto* r = shuffled[static_cast<size_t>(counts.train + i)];
        out.records.push_back(
            {r->path, normal_label, i < counts.test_normal ? "test_normal" : "val"});
    }

    for (auto& [label, recs] : by_label) {
        if (label == normal_label) continue;
        if (static_cast<int>(recs.size()) < counts.test_anomaly_per_class)
            throw std::runtime_error("split: class '" + label + "' has " +
                                     std::to_string(recs.size()) + " images, need " +
                                     std::to_string(counts.test_anomaly_per_class) +
                                     " (short by " +
                                     std::to_string(counts.test_anomaly_per_class -
                                                    static_cast<int>(recs.size())) +
                                     ")");
        auto pool = recs;
        shuffle(pool, rng);
        for (int i = 0; i < counts.test_anomaly_per_class; ++i)
            out.records.push_back({pool[static_cast<size_t>(i)]->path, label, "test_anomaly"});
    }
    return out;
}

// ---------------------------------------------------------------------------
// synthetic blob corpus
// ---------------------------------------------------------------------------

// Normal images are a single smooth Gaussian blob with random center, width,
// intensity and tint. Anomalies start from a normal blob and add one
// structured corruption: a second blob, a bright stripe, or a hole punched
// into the blob. Corruption kinds cycle deterministically.
struct SynthConfig {
    std::string kind = "blobs";
    int n = 600;
    int image_size = 32;
    double anomaly_rate = 0.25;
    uint64_t seed = 0;
    // Split fractions applied to the normal images (anomalies all go to
    // test_anomaly). Explicit counts, when set, win over fractions.
    double train_frac = 0.75;
    double val_frac = 0.10;  // test_normal gets the remainder
    std::optional<SplitCounts> counts;
};

namespace detail {

struct Blob {
    double cy, cx, radius, amp;
    double tint[3];
};

inline Blob random_blob(Rng& rng, int s) {
    Blob b{};
    b.cy = rng.uniform(0.30, 0.70) * s;
    b.cx = rng.uniform(0.30, 0.70) * s;
    b.radius = rng.uniform(0.14, 0.24) * s;
    b.amp = rng.uniform(0.55, 0.95);
    b.tint[0] = rng.uniform(0.75, 1.0);
    b.tint[1] = rng.uniform(0.75, 1.0);
    b.tint[2] = rng.uniform(0.75, 1.0);
    return b;
}

inline void render_blob(std::vector<double>& rgb, int s, const Blob& b) {
    for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
            const double d2 = (y - b.cy) * (y - b.cy) + (x - b.cx) * (x - b.cx);
            const double v = b.amp * std::exp(-d2 / (2.0 * b.radius * b.radius));
            for (int ch = 0; ch < 3; ++ch) {
                auto& px = rgb[static_cast<size_t>((y * s + x) * 3 + ch)];
                px = std::min(1.0, px + v * b.tint[ch]);
            }
        }
}

}  // namespace detail

// Renders one corpus image. Exposed so tests can regenerate pixels without
// touching the filesystem.
inline ImageU8 synth_render(int image_size, bool anomaly, int corruption_kind, Rng& rng) {
    const int s = image_size;
    std::vector<double> rgb(static_cast<size_t>(s) * s * 3, 0.05);
    const detail::Blob main = detail::random_blob(rng, s);
    detail::render_blob(rgb, s, main);

    if (anomaly) {
        switch (corruption_kind % 3) {
            case 0: {  // second blob away from the first
                detail::Blob second = detail::random_blob(rng, s);
                second.cy = main.cy > s / 2.0 ? rng.uniform(0.10, 0.30) * s
                                              : rng.uniform(0.70, 0.90) * s;
                second.cx = main.cx > s / 2.0 ? rng.uniform(0.10, 0.30) * s
                                              : rng.uniform(0.70, 0.90) * s;
                second.radius = rng.uniform(0.08, 0.14) * s;
                detail::render_blob(rgb, s, second);
                break;
            }
            case 1: {  // bright stripe across the image
                const bool horizontal = rng.uniform() < 0.5;
                const int width = 2 + static_cast<int>(rng.uniform_int(3));
                const int pos = 2 + static_cast<int>(rng.uniform_int(std::max(1, s - width - 4)));
                const double level = rng.uniform(0.75, 1.0);
                for (int t = 0; t < width; ++t)
                    for (int u = 0; u < s; ++u) {
                        const int y = horizontal ? pos + t : u;
                        const int x = horizontal ? u : pos + t;
                        for (int ch = 0; ch < 3; ++ch)
                            rgb[static_cast<size_t>((y * s + x) * 3 + ch)] = level;
                    }
                break;
            }
            default: {  // dark hole punched into the blob
                const double hr = rng.uniform(0.35, 0.60) * main.radius;
                const double hy = main.cy + rng.uniform(-0.3, 0.3) * main.radius;
                const double hx = main.cx + rng.uniform(-0.3, 0.3) * main.radius;
                for (int y = 0; y < s; ++y)
                    for (int x = 0; x < s; ++x)
                        if ((y - hy) * (y - hy) + (x - hx) * (x - hx) <= hr * hr)
                            for (int ch = 0; ch < 3; ++ch)
                                rgb[static_cast<size_t>((y * s + x) * 3 + ch)] = 0.02;
                break;
            }
        }
    }

    ImageU8 img;
    img.h = s;
    img.w = s;
    img.c = 3;
    img.data.resize(rgb.size());
    for (size_t i = 0; i < rgb.size(); ++i)
        img.data[i] = static_cast<uint8_t>(std::lround(std::clamp(rgb[i], 0.0, 1.0) * 255.0));
    return img;
}

// Writes the corpus under out_dir (images/ subdirectory plus manifest.jsonl)
// and returns the manifest. Byte-identical for identical configs.
inline DatasetManifest synth_generate(const SynthConfig& cfg, const std::string& out_dir) {
    if (cfg.kind != "blobs")
        throw std::invalid_argument("synth: unknown kind '" + cfg.kind + "' (have: blobs)");
    if (cfg.n < 1) throw std::invalid_argument("synth: n must be >= 1");
    if (cfg.anomaly_rate < 0.0 || cfg.anomaly_rate > 1.0)
        throw std::invalid_argument("synth: anomaly_rate must be in [0,1]");

    const int n_anomaly = static_cast<int>(std::llround(cfg.n * cfg.anomaly_rate));
    const int n_normal = cfg.n - n_anomaly;

    SplitCounts counts;
    if (cfg.counts) {
        counts = *cfg.counts;
        if (counts.train + counts.val > n_normal)
            throw std::runtime_error("synth: split counts exceed " + std::to_string(n_normal) +
                                     " normal images");
    } else {
        counts.train = static_cast<int>(n_normal * cfg.train_frac);
        const int val_only = static_cast<int>(n_normal * cfg.val_frac);
        counts.test_normal = n_normal - counts.train - val_only;
        counts.val = val_only + counts.test_normal;  // test_normal re-tags val pool
    }
    if (counts.test_anomaly_per_class == 0) counts.test_anomaly_per_class = n_anomaly;

    std::error_code ec;
    fs::create_directories(fs::path(out_dir) / "images", ec);
    if (ec) throw std::runtime_error("synth: cannot create " + out_dir + ": " + ec.message());

    DatasetManifest m;
    m.base_dir = out_dir;
    char name[64];
    for (int i = 0; i < cfg.n; ++i) {
        const bool anomaly = i >= n_normal;
        Rng rng(derive_seed(cfg.seed, 0x90000 + static_cast<uint64_t>(i)));
        const ImageU8 img = synth_render(cfg.image_size, anomaly, anomaly ? i - n_normal : 0, rng);
        std::snprintf(name, sizeof(name), "images/%s_%05d.ppm", anomaly ? "anomaly" : "normal",
                      i);
        save_pnm(img, (fs::path(out_dir) / name).string());
        m.records.push_back({name, anomaly ? "anomaly" : "normal", "test_anomaly"});
    }

    // assign normal splits: the renderer consumed the per-image streams, so
    // a dedicated stream drives the shuffle
    DatasetManifest tagged = make_splits(m, "normal", derive_seed(cfg.seed, 0xA11), counts);
    save_manifest(tagged, (fs::path(out_dir) / "manifest.jsonl").string());
    return tagged;
}

// ---------------------------------------------------------------------------
// batching
// ---------------------------------------------------------------------------

template <typename T>
struct ImageRecord {
    std::string id;     // manifest path
    Tensor<T> pixels;   // [C,H,W] in [-1,1]
    std::string label;
};

// Loads and preprocesses every record of a split, validating the
// ImageRecord invariants at ingestion.
template <typename T>
std::vector<ImageRecord<T>> load_split(const DatasetManifest& m, const std::string& split,
                                       int image_size) {
    std::vector<ImageRecord<T>> out;
    for (const auto& r : m.records) {
        if (r.split != split) continue;
        const auto full = m.resolve(r);
        Tensor<T> t = preprocess<T>(load_image(full.string()), image_size);
        for (const T v : t.values())
            if (v < T(-1) || v > T(1))
                throw std::runtime_error("ingest: value out of [-1,1] in " + r.path);
        out.push_back({r.path, std::move(t), r.label});
    }
    return out;
}

// Seeded epoch order: a fresh shuffle per (seed, epoch).
inline std::vector<int> epoch_order(int n, uint64_t seed, int epoch) {
    std::vector<int> idx(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
    Rng rng(derive_seed(seed, 0xE90C0 + static_cast<uint64_t>(epoch)));
    shuffle(idx, rng);
    return idx;
}

// Splits an epoch order into batches; the final partial batch is kept.
inline std::vector<std::vector<int>> epoch_batches(int n, int batch_size, uint64_t seed,
                                                   int epoch) {
    if (n < 1) throw std::invalid_argument("batch: empty split");
    if (batch_size < 1) throw std::invalid_argument("batch: batch_size must be >= 1");
    const auto order = epoch_order(n, seed, epoch);
    std::vector<std::vector<int>> batches;
    for (int start = 0; start < n; start += batch_size) {
        const int end = std::min(n, start + batch_size);
        batches.emplace_back(order.begin() + start, order.begin() + end);
    }
    return batches;
}

// Stacks CHW image tensors into one [B,C,H,W] batch.
template <typename T>
Tensor<T> stack_batch(const std::vector<ImageRecord<T>>& items, const std::vector<int>& idx) {
    if (idx.empty()) throw std::invalid_argument("batch: empty index list");
    const auto& s0 = items.at(static_cast<size_t>(idx[0])).pixels.shape();
    std::vector<T> out;
    out.reserve(static_cast<size_t>(shape_numel(s0)) * idx.size());
    for (const int i : idx) {
        const auto& t = items.at(static_cast<size_t>(i)).pixels;
        if (t.shape() != s0) throw std::invalid_argument("batch: inconsistent image shapes");
        auto v = t.values();
        out.insert(out.end(), v.begin(), v.end());
    }
    return Tensor<T>({static_cast<int>(idx.size()), s0[0], s0[1], s0[2]}, std::move(out));
}

}  // namespace vaedet
