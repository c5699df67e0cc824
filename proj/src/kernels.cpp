#include "mrh/kernels.hpp"

#include "kernels_impl.hpp"

namespace mrh::kern {

namespace {
Backend g_backend = Backend::Parallel;
}

Backend backend() { return g_backend; }
void set_backend(Backend b) { g_backend = b; }

using namespace detail;

void conv2d_fwd(const Conv2dDims& d, const double* x, const double* w, const double* b, double* y) {
    if (g_backend == Backend::Serial)
        conv2d_fwd_serial(d, x, w, b, y);
    else
        conv2d_fwd_omp(d, x, w, b, y);
}

void conv2d_bwd_input(const Conv2dDims& d, const double* gy, const double* w, double* gx) {
    if (g_backend == Backend::Serial)
        conv2d_bwd_input_serial(d, gy, w, gx);
    else
        conv2d_bwd_input_omp(d, gy, w, gx);
}

void conv2d_bwd_params(const Conv2dDims& d, const double* x, const double* gy, double* gw,
                       double* gb) {
    if (g_backend == Backend::Serial)
        conv2d_bwd_params_serial(d, x, gy, gw, gb);
    else
        conv2d_bwd_params_omp(d, x, gy, gw, gb);
}

void instnorm_fwd(int c, int h, int w, const double* x, const double* gain, const double* bias,
                  double eps, double* y, double* xhat, double* inv_std) {
    if (g_backend == Backend::Serial)
        instnorm_fwd_serial(c, h, w, x, gain, bias, eps, y, xhat, inv_std);
    else
        instnorm_fwd_omp(c, h, w, x, gain, bias, eps, y, xhat, inv_std);
}

void instnorm_bwd(int c, int h, int w, const double* gy, const double* xhat, const double* gain,
                  const double* inv_std, double* gx, double* ggain, double* gbias) {
    if (g_backend == Backend::Serial)
        instnorm_bwd_serial(c, h, w, gy, xhat, gain, inv_std, gx, ggain, gbias);
    else
        instnorm_bwd_omp(c, h, w, gy, xhat, gain, inv_std, gx, ggain, gbias);
}

void upsample2x_fwd(int c, int h, int w, const double* x, double* y) {
    if (g_backend == Backend::Serial)
        upsample2x_fwd_serial(c, h, w, x, y);
    else
        upsample2x_fwd_omp(c, h, w, x, y);
}

void upsample2x_bwd(int c, int h, int w, const double* gy, double* gx) {
    if (g_backend == Backend::Serial)
        upsample2x_bwd_serial(c, h, w, gy, gx);
    else
        upsample2x_bwd_omp(c, h, w, gy, gx);
}

void avgpool2_fwd(int c, int h, int w, const double* x, double* y) {
    if (g_backend == Backend::Serial)
        avgpool2_fwd_serial(c, h, w, x, y);
    else
        avgpool2_fwd_omp(c, h, w, x, y);
}

void avgpool2_bwd(int c, int h, int w, const double* gy, double* gx) {
    if (g_backend == Backend::Serial)
        avgpool2_bwd_serial(c, h, w, gy, gx);
    else
        avgpool2_bwd_omp(c, h, w, gy, gx);
}

}  // namespace mrh::kern
