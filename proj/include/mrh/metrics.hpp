#pragma once

#include <cstdint>
#include <vector>

#include "mrh/imaging.hpp"

namespace mrh {

// Mean local structural similarity over the full 3D grid. Gaussian window
// (sigma 1.5, 11 taps, separable, reflection at borders), k1 = 0.01,
// k2 = 0.03, dynamic range = max intensity over both inputs. Symmetric in
// its arguments; 1.0 for identical inputs.
double ssim(const Volume& a, const Volume& b);
double ssim(const SliceImage& a, const SliceImage& b);

// 10*log10(peak^2 / MSE); +infinity when MSE = 0.
double psnr(const Volume& a, const Volume& b, double peak = kClipMax);

// 2|A∩B| / (|A|+|B|); 1.0 when both masks are empty. Inputs must be 0/1.
double dice(const std::vector<uint8_t>& m1, const std::vector<uint8_t>& m2);

}  // namespace mrh
