// Benchmarks the OpenMP-parallel compute kernels against the serial
// reference implementations and verifies the two backends agree bit for bit
// (they share the same per-output accumulation order by design).
#include <CLI11.hpp>

#include <chrono>
#include <cstring>
#include <functional>
#include <iomanip>
#include <iostream>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "mrh/kernels.hpp"
#include "mrh/rng.hpp"

using mrh::kern::Backend;
namespace kern = mrh::kern;

namespace {

std::vector<double> random_buf(size_t n, mrh::Rng& rng) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(-1.0, 1.0);
    return v;
}

struct BenchCase {
    std::string name;
    std::function<void()> run;         // executes the kernel into `out`
    std::vector<double>* out;          // compared across backends
};

struct Result {
    std::string name;
    double serial_ms = 0.0, parallel_ms = 0.0;
    bool bit_identical = false;
};

double best_of(const std::function<void()>& f, int reps) {
    double best = 1e300;
    for (int r = 0; r < reps; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        f();
        const double ms =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                .count();
        best = std::min(best, ms);
    }
    return best;
}

Result run_case(const BenchCase& c, int reps) {
    Result r;
    r.name = c.name;
    kern::set_backend(Backend::Serial);
    r.serial_ms = best_of(c.run, reps);
    const std::vector<double> serial_out = *c.out;
    kern::set_backend(Backend::Parallel);
    r.parallel_ms = best_of(c.run, reps);
    r.bit_identical = serial_out.size() == c.out->size() &&
                      std::memcmp(serial_out.data(), c.out->data(),
                                  serial_out.size() * sizeof(double)) == 0;
    return r;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Serial vs parallel kernel benchmark"};
    int reps = 5;
    int size = 128;
    app.add_option("--reps", reps, "Repetitions per kernel (best time kept)")
        ->check(CLI::Range(1, 100));
    app.add_option("--size", size, "Spatial extent of the benchmark inputs")
        ->check(CLI::Range(16, 1024));
    CLI11_PARSE(app, argc, argv);

#ifdef _OPENMP
    std::cout << "threads: " << omp_get_max_threads() << "\n";
#else
    std::cout << "threads: 1 (built without OpenMP)\n";
#endif

    mrh::Rng rng(4242);
    const int C = 32, H = size, W = size;

    kern::Conv2dDims cd{C, H, W, C, 3, 3, 1, 1};
    const auto cx = random_buf(size_t(C) * H * W, rng);
    const auto cw = random_buf(size_t(C) * C * 9, rng);
    const auto cb = random_buf(size_t(C), rng);
    std::vector<double> cy(size_t(C) * cd.oh() * cd.ow());
    const auto cgy = random_buf(cy.size(), rng);
    std::vector<double> cgx(cx.size());
    std::vector<double> cgw(cw.size()), cgb(cb.size());
    // conv2d_bwd_params writes gw and gb; comparing gw covers the heavy loop.

    const auto gain = random_buf(size_t(C), rng);
    const auto bias = random_buf(size_t(C), rng);
    std::vector<double> ny(cx.size()), nxhat(cx.size()), ninv(size_t(C));
    std::vector<double> ngx(cx.size()), nggain(size_t(C)), ngbias(size_t(C));

    std::vector<double> uy(size_t(C) * (2 * H) * (2 * W));
    std::vector<double> py(size_t(C) * (H / 2) * (W / 2));

    std::vector<BenchCase> cases;
    cases.push_back({"conv2d_fwd      ",
                     [&] { kern::conv2d_fwd(cd, cx.data(), cw.data(), cb.data(), cy.data()); },
                     &cy});
    cases.push_back({"conv2d_bwd_input",
                     [&] { kern::conv2d_bwd_input(cd, cgy.data(), cw.data(), cgx.data()); },
                     &cgx});
    cases.push_back({"conv2d_bwd_param",
                     [&] {
                         kern::conv2d_bwd_params(cd, cx.data(), cgy.data(), cgw.data(),
                                                 cgb.data());
                     },
                     &cgw});
    cases.push_back({"instnorm_fwd    ",
                     [&] {
                         kern::instnorm_fwd(C, H, W, cx.data(), gain.data(), bias.data(), 1e-5,
                                            ny.data(), nxhat.data(), ninv.data());
                     },
                     &ny});
    cases.push_back({"instnorm_bwd    ",
                     [&] {
                         kern::instnorm_bwd(C, H, W, cgy.data(), nxhat.data(), gain.data(),
                                            ninv.data(), ngx.data(), nggain.data(),
                                            ngbias.data());
                     },
                     &ngx});
    cases.push_back(
        {"upsample2x_fwd  ", [&] { kern::upsample2x_fwd(C, H, W, cx.data(), uy.data()); }, &uy});
    cases.push_back(
        {"avgpool2_fwd    ", [&] { kern::avgpool2_fwd(C, H, W, cx.data(), py.data()); }, &py});

    // instnorm_bwd consumes the forward's saved tensors, so prime them once.
    kern::set_backend(Backend::Serial);
    kern::instnorm_fwd(C, H, W, cx.data(), gain.data(), bias.data(), 1e-5, ny.data(),
                       nxhat.data(), ninv.data());

    std::cout << "input: " << C << " channels, " << H << "x" << W << ", " << reps
              << " reps (best kept)\n\n"
              << "kernel            serial ms   parallel ms   speedup   bit-identical\n";
    bool all_match = true;
    for (const auto& c : cases) {
        const Result r = run_case(c, reps);
        all_match = all_match && r.bit_identical;
        std::cout << r.name << "  " << std::fixed << std::setprecision(3) << std::setw(9)
                  << r.serial_ms << "   " << std::setw(11) << r.parallel_ms << "   "
                  << std::setprecision(2) << std::setw(7) << (r.serial_ms / r.parallel_ms) << "   "
                  << (r.bit_identical ? "yes" : "NO") << "\n";
    }
    if (!all_match) {
        std::cerr << "\nbackend outputs differ -- the kernels violate their contract\n";
        return 1;
    }
    return 0;
}
