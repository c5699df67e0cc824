#include "mrh/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mrh/check.hpp"

namespace mrh {

namespace {

constexpr double kSsimSigma = 1.5;
constexpr int kSsimRadius = 5;  // 11-tap window
constexpr double kK1 = 0.01, kK2 = 0.03;

int reflect(int i, int n) {
    while (i < 0 || i >= n) {
        if (i < 0) i = -i - 1;
        if (i >= n) i = 2 * n - 1 - i;
    }
    return i;
}

// Separable Gaussian blur along one axis of an nx*ny*nz grid.
void blur_axis(std::vector<double>& v, int nx, int ny, int nz, int axis,
               const std::vector<double>& kern) {
    std::vector<double> out(v.size());
    const int r = int(kern.size() / 2);
    const int ext[3] = {nx, ny, nz};
    const int n = ext[axis];
    for (int z = 0; z < nz; ++z)
        for (int y = 0; y < ny; ++y)
            for (int x = 0; x < nx; ++x) {
                int co[3] = {x, y, z};
                double acc = 0.0;
                for (int k = -r; k <= r; ++k) {
                    int cc[3] = {co[0], co[1], co[2]};
                    cc[axis] = reflect(co[axis] + k, n);
                    acc += kern[size_t(k + r)] *
                           v[(size_t(cc[2]) * ny + cc[1]) * nx + cc[0]];
                }
                out[(size_t(z) * ny + y) * nx + x] = acc;
            }
    v.swap(out);
}

void gauss3(std::vector<double>& v, int nx, int ny, int nz) {
    std::vector<double> kern(size_t(2 * kSsimRadius + 1));
    double s = 0.0;
    for (int i = -kSsimRadius; i <= kSsimRadius; ++i) {
        kern[size_t(i + kSsimRadius)] = std::exp(-0.5 * (i / kSsimSigma) * (i / kSsimSigma));
        s += kern[size_t(i + kSsimRadius)];
    }
    for (auto& k : kern) k /= s;
    blur_axis(v, nx, ny, nz, 0, kern);
    blur_axis(v, nx, ny, nz, 1, kern);
    if (nz > 1) blur_axis(v, nx, ny, nz, 2, kern);
}

double ssim_grid(const float* a, const float* b, int nx, int ny, int nz) {
    const size_t n = size_t(nx) * ny * nz;
    double peak = 0.0;
    for (size_t i = 0; i < n; ++i) peak = std::max({peak, double(a[i]), double(b[i])});
    if (peak <= 0.0) return 1.0;  // both identically zero

    std::vector<double> va(n), vb(n), vaa(n), vbb(n), vab(n);
    for (size_t i = 0; i < n; ++i) {
        va[i] = double(a[i]);
        vb[i] = double(b[i]);
        vaa[i] = va[i] * va[i];
        vbb[i] = vb[i] * vb[i];
        vab[i] = va[i] * vb[i];
    }
    gauss3(va, nx, ny, nz);
    gauss3(vb, nx, ny, nz);
    gauss3(vaa, nx, ny, nz);
    gauss3(vbb, nx, ny, nz);
    gauss3(vab, nx, ny, nz);

    const double c1 = (kK1 * peak) * (kK1 * peak);
    const double c2 = (kK2 * peak) * (kK2 * peak);
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const double mu_a = va[i], mu_b = vb[i];
        const double var_a = vaa[i] - mu_a * mu_a;
        const double var_b = vbb[i] - mu_b * mu_b;
        const double cov = vab[i] - mu_a * mu_b;
        acc += ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) /
               ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
    }
    return acc / double(n);
}

}  // namespace

double ssim(const Volume& a, const Volume& b) {
    MRH_CHECK(a.nx == b.nx && a.ny == b.ny && a.nz == b.nz, "ssim: volume dims differ");
    return ssim_grid(a.voxels.data(), b.voxels.data(), a.nx, a.ny, a.nz);
}

double ssim(const SliceImage& a, const SliceImage& b) {
    MRH_CHECK(a.h == b.h && a.w == b.w, "ssim: slice dims differ");
    return ssim_grid(a.pixels.data(), b.pixels.data(), a.w, a.h, 1);
}

double psnr(const Volume& a, const Volume& b, double peak) {
    MRH_CHECK(a.nx == b.nx && a.ny == b.ny && a.nz == b.nz, "psnr: volume dims differ");
    MRH_CHECK(peak > 0.0, "psnr: peak must be > 0");
    double mse = 0.0;
    for (size_t i = 0; i < a.voxels.size(); ++i) {
        const double d = double(a.voxels[i]) - double(b.voxels[i]);
        mse += d * d;
    }
    mse /= double(a.voxels.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(peak * peak / mse);
}

double dice(const std::vector<uint8_t>& m1, const std::vector<uint8_t>& m2) {
    MRH_CHECK(m1.size() == m2.size(), "dice: mask sizes differ");
    int64_t n1 = 0, n2 = 0, inter = 0;
    for (size_t i = 0; i < m1.size(); ++i) {
        MRH_CHECK(m1[i] <= 1 && m2[i] <= 1, "dice: masks must be binary");
        n1 += m1[i];
        n2 += m2[i];
        inter += (m1[i] & m2[i]);
    }
    if (n1 + n2 == 0) return 1.0;
    return 2.0 * double(inter) / double(n1 + n2);
}

}  // namespace mrh
