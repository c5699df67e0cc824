#pragma once

#include "mrh/kernels.hpp"

// Internal: the two concrete implementations behind the dispatch in kernels.cpp.
namespace mrh::kern::detail {

void conv2d_fwd_serial(const Conv2dDims& d, const double* x, const double* w, const double* b, double* y);
void conv2d_bwd_input_serial(const Conv2dDims& d, const double* gy, const double* w, double* gx);
void conv2d_bwd_params_serial(const Conv2dDims& d, const double* x, const double* gy, double* gw, double* gb);
void instnorm_fwd_serial(int c, int h, int w, const double* x, const double* gain, const double* bias,
                         double eps, double* y, double* xhat, double* inv_std);
void instnorm_bwd_serial(int c, int h, int w, const double* gy, const double* xhat, const double* gain,
                         const double* inv_std, double* gx, double* ggain, double* gbias);
void upsample2x_fwd_serial(int c, int h, int w, const double* x, double* y);
void upsample2x_bwd_serial(int c, int h, int w, const double* gy, double* gx);
void avgpool2_fwd_serial(int c, int h, int w, const double* x, double* y);
void avgpool2_bwd_serial(int c, int h, int w, const double* gy, double* gx);

void conv2d_fwd_omp(const Conv2dDims& d, const double* x, const double* w, const double* b, double* y);
void conv2d_bwd_input_omp(const Conv2dDims& d, const double* gy, const double* w, double* gx);
void conv2d_bwd_params_omp(const Conv2dDims& d, const double* x, const double* gy, double* gw, double* gb);
void instnorm_fwd_omp(int c, int h, int w, const double* x, const double* gain, const double* bias,
                      double eps, double* y, double* xhat, double* inv_std);
void instnorm_bwd_omp(int c, int h, int w, const double* gy, const double* xhat, const double* gain,
                      const double* inv_std, double* gx, double* ggain, double* gbias);
void upsample2x_fwd_omp(int c, int h, int w, const double* x, double* y);
void upsample2x_bwd_omp(int c, int h, int w, const double* gy, double* gx);
void avgpool2_fwd_omp(int c, int h, int w, const double* x, double* y);
void avgpool2_bwd_omp(int c, int h, int w, const double* gy, double* gx);

}  // namespace mrh::kern::detail
