#pragma once

#include <cstdint>

namespace mrh::kern {

// Two implementations of every kernel: a plain serial reference and an
// OpenMP-parallel version. Both use the same per-output accumulation order,
// so results are bit-identical and independent of the thread count. The
// parallel versions only distribute independent output elements.
enum class Backend { Serial, Parallel };

Backend backend();
void set_backend(Backend b);

// y[co,oy,ox] = b[co] + sum_{ci,ky,kx} w[co,ci,ky,kx] * x[ci, oy*s+ky-p, ox*s+kx-p]
struct Conv2dDims {
    int cin, h, w;
    int cout, kh, kw;
    int stride, pad;
    int oh() const { return (h + 2 * pad - kh) / stride + 1; }
    int ow() const { return (w + 2 * pad - kw) / stride + 1; }
};

void conv2d_fwd(const Conv2dDims& d, const double* x, const double* w, const double* b, double* y);
void conv2d_bwd_input(const Conv2dDims& d, const double* gy, const double* w, double* gx);
void conv2d_bwd_params(const Conv2dDims& d, const double* x, const double* gy, double* gw, double* gb);

// Per-channel normalization over the spatial extent:
// y = gain[c] * (x - mean_c) / sqrt(var_c + eps) + bias[c].
// Saves inv_std[c] and the normalized map xhat for the backward pass.
void instnorm_fwd(int c, int h, int w, const double* x, const double* gain, const double* bias,
                  double eps, double* y, double* xhat, double* inv_std);
void instnorm_bwd(int c, int h, int w, const double* gy, const double* xhat, const double* gain,
                  const double* inv_std, double* gx, double* ggain, double* gbias);

// Nearest-neighbour 2x upsample and its adjoint.
void upsample2x_fwd(int c, int h, int w, const double* x, double* y);
void upsample2x_bwd(int c, int h, int w, const double* gy, double* gx);

// 2x2 average pool (h,w even) and its adjoint.
void avgpool2_fwd(int c, int h, int w, const double* x, double* y);
void avgpool2_bwd(int c, int h, int w, const double* gy, double* gx);

}  // namespace mrh::kern
