// Benchmarks the OpenMP convolution kernels against the serial reference
// implementation on encoder/decoder-shaped workloads, checking agreement
// while timing. Build and run:
//
//   cmake --build build --target vaedet_bench_kernels
//   ./build/tools/vaedet_bench_kernels [reps]

#include <chrono>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "vaedet/kernels.hpp"
#include "vaedet/rng.hpp"

using vaedet::ConvGeometry;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Case {
    const char* name;
    ConvGeometry g;
    bool transposed;
};

double checksum(const std::vector<float>& v) {
    double acc = 0;
    for (const float x : v) acc += static_cast<double>(x);
    return acc;
}

void run_case(const Case& c, int reps) {
    const auto& g = c.g;
    const int out_h = c.transposed ? g.tconv_out_h() : g.conv_out_h();
    const int out_w = c.transposed ? g.tconv_out_w() : g.conv_out_w();
    const size_t in_n = static_cast<size_t>(g.batch) * g.in_ch * g.in_h * g.in_w;
    const size_t w_n = static_cast<size_t>(g.in_ch) * g.out_ch * g.k_h * g.k_w;
    const size_t out_n = static_cast<size_t>(g.batch) * g.out_ch * out_h * out_w;

    vaedet::Rng rng(42);
    std::vector<float> in(in_n), w(w_n), out_ref(out_n), out_par(out_n);
    for (auto& v : in) v = static_cast<float>(rng.normal());
    for (auto& v : w) v = static_cast<float>(rng.normal(0.0, 0.05));

    auto t0 = Clock::now();
    for (int r = 0; r < reps; ++r) {
        if (c.transposed)
            vaedet::reference::conv_transpose2d_forward<float>(in.data(), w.data(), nullptr,
                                                               out_ref.data(), g);
        else
            vaedet::reference::conv2d_forward<float>(in.data(), w.data(), nullptr,
                                                     out_ref.data(), g);
    }
    const double t_ref = seconds_since(t0) / reps;

    t0 = Clock::now();
    for (int r = 0; r < reps; ++r) {
        if (c.transposed)
            vaedet::kernels::conv_transpose2d_forward<float>(in.data(), w.data(), nullptr,
                                                             out_par.data(), g);
        else
            vaedet::kernels::conv2d_forward<float>(in.data(), w.data(), nullptr,
                                                   out_par.data(), g);
    }
    const double t_par = seconds_since(t0) / reps;

    double max_diff = 0;
    for (size_t i = 0; i < out_n; ++i)
        max_diff = std::max(max_diff, std::abs(static_cast<double>(out_ref[i]) - out_par[i]));

    const double macs = 2.0 * static_cast<double>(out_n) * g.in_ch * g.k_h * g.k_w;
    std::printf("%-28s serial %8.3f ms  omp %8.3f ms  speedup %5.2fx  %6.2f GFLOP/s  |diff| %.2g  sum %.6g\n",
                c.name, t_ref * 1e3, t_par * 1e3, t_ref / t_par, macs / t_par * 1e-9,
                max_diff, checksum(out_par));
}

}  // namespace

int main(int argc, char** argv) {
    const int reps = argc > 1 ? std::atoi(argv[1]) : 5;
#ifdef _OPENMP
    std::printf("openmp threads: %d\n", omp_get_max_threads());
#else
    std::printf("openmp: disabled (serial build)\n");
#endif
    const std::vector<Case> cases = {
        {"conv 32x3 -> 16x16x64", {16, 3, 32, 32, 64, 4, 4, 2, 1}, false},
        {"conv 16x64 -> 8x8x128", {16, 64, 16, 16, 128, 4, 4, 2, 1}, false},
        {"conv 8x128 -> 4x4x256", {16, 128, 8, 8, 256, 4, 4, 2, 1}, false},
        {"tconv 4x256 -> 8x8x128", {16, 256, 4, 4, 128, 4, 4, 2, 1}, true},
        {"tconv 8x128 -> 16x16x64", {16, 128, 8, 8, 64, 4, 4, 2, 1}, true},
        {"tconv 16x64 -> 32x32x3", {16, 64, 16, 16, 3, 4, 4, 2, 1}, true},
    };
    for (const auto& c : cases) run_case(c, reps);
    return 0;
}
