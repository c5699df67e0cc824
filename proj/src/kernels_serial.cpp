#include <cmath>
#include <cstring>

#include "kernels_impl.hpp"

// Reference implementations. Written for clarity, kept as the ground truth
// the parallel versions are tested against.

namespace mrh::kern::detail {

void conv2d_fwd_serial(const Conv2dDims& d, const double* x, const double* w, const double* b,
                       double* y) {
    const int oh = d.oh(), ow = d.ow();
    for (int co = 0; co < d.cout; ++co) {
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                double acc = b ? b[co] : 0.0;
                for (int ci = 0; ci < d.cin; ++ci) {
                    for (int ky = 0; ky < d.kh; ++ky) {
                        const int iy = oy * d.stride + ky - d.pad;
                        if (iy < 0 || iy >= d.h) continue;
                        for (int kx = 0; kx < d.kw; ++kx) {
                            const int ix = ox * d.stride + kx - d.pad;
                            if (ix < 0 || ix >= d.w) continue;
                            acc += w[((co * d.cin + ci) * d.kh + ky) * d.kw + kx] *
                                   x[(ci * d.h + iy) * d.w + ix];
                        }
                    }
                }
                y[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
}

void conv2d_bwd_input_serial(const Conv2dDims& d, const double* gy, const double* w, double* gx) {
    const int oh = d.oh(), ow = d.ow();
    // Gather form: each input element accumulates over the output positions
    // that touched it, in fixed (co,ky,kx) order.
    for (int ci = 0; ci < d.cin; ++ci) {
        for (int iy = 0; iy < d.h; ++iy) {
            for (int ix = 0; ix < d.w; ++ix) {
                double acc = 0.0;
                for (int co = 0; co < d.cout; ++co) {
                    for (int ky = 0; ky < d.kh; ++ky) {
                        const int ty = iy + d.pad - ky;
                        if (ty < 0 || ty % d.stride != 0) continue;
                        const int oy = ty / d.stride;
                        if (oy >= oh) continue;
                        for (int kx = 0; kx < d.kw; ++kx) {
                            const int tx = ix + d.pad - kx;
                            if (tx < 0 || tx % d.stride != 0) continue;
                            const int ox = tx / d.stride;
                            if (ox >= ow) continue;
                            acc += w[((co * d.cin + ci) * d.kh + ky) * d.kw + kx] *
                                   gy[(co * oh + oy) * ow + ox];
                        }
                    }
                }
                gx[(ci * d.h + iy) * d.w + ix] = acc;
            }
        }
    }
}

void conv2d_bwd_params_serial(const Conv2dDims& d, const double* x, const double* gy, double* gw,
                              double* gb) {
    const int oh = d.oh(), ow = d.ow();
    for (int co = 0; co < d.cout; ++co) {
        if (gb) {
            double acc = 0.0;
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) acc += gy[(co * oh + oy) * ow + ox];
            gb[co] = acc;
        }
        for (int ci = 0; ci < d.cin; ++ci) {
            for (int ky = 0; ky < d.kh; ++ky) {
                for (int kx = 0; kx < d.kw; ++kx) {
                    double acc = 0.0;
                    for (int oy = 0; oy < oh; ++oy) {
                        const int iy = oy * d.stride + ky - d.pad;
                        if (iy < 0 || iy >= d.h) continue;
                        for (int ox = 0; ox < ow; ++ox) {
                            const int ix = ox * d.stride + kx - d.pad;
                            if (ix < 0 || ix >= d.w) continue;
                            acc += gy[(co * oh + oy) * ow + ox] * x[(ci * d.h + iy) * d.w + ix];
                        }
                    }
                    gw[((co * d.cin + ci) * d.kh + ky) * d.kw + kx] = acc;
                }
            }
        }
    }
}

void instnorm_fwd_serial(int c, int h, int w, const double* x, const double* gain,
                         const double* bias, double eps, double* y, double* xhat,
                         double* inv_std) {
    const int n = h * w;
    for (int ch = 0; ch < c; ++ch) {
        const double* xc = x + ch * n;
        double mean = 0.0;
        for (int i = 0; i < n; ++i) mean += xc[i];
        mean /= n;
        double var = 0.0;
        for (int i = 0; i < n; ++i) {
            const double dlt = xc[i] - mean;
            var += dlt * dlt;
        }
        var /= n;
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[ch] = is;
        for (int i = 0; i < n; ++i) {
            const double xh = (xc[i] - mean) * is;
            xhat[ch * n + i] = xh;
            y[ch * n + i] = gain[ch] * xh + bias[ch];
        }
    }
}

void instnorm_bwd_serial(int c, int h, int w, const double* gy, const double* xhat,
                         const double* gain, const double* inv_std, double* gx, double* ggain,
                         double* gbias) {
    const int n = h * w;
    for (int ch = 0; ch < c; ++ch) {
        const double* gyc = gy + ch * n;
        const double* xhc = xhat + ch * n;
        double sum_gy = 0.0, sum_gy_xh = 0.0;
        for (int i = 0; i < n; ++i) {
            sum_gy += gyc[i];
            sum_gy_xh += gyc[i] * xhc[i];
        }
        ggain[ch] = sum_gy_xh;
        gbias[ch] = sum_gy;
        const double k = gain[ch] * inv_std[ch];
        for (int i = 0; i < n; ++i) {
            gx[ch * n + i] = k * (gyc[i] - (sum_gy + xhc[i] * sum_gy_xh) / n);
        }
    }
}

void upsample2x_fwd_serial(int c, int h, int w, const double* x, double* y) {
    const int oh = 2 * h, ow = 2 * w;
    for (int ch = 0; ch < c; ++ch) {
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                y[(ch * oh + oy) * ow + ox] = x[(ch * h + oy / 2) * w + ox / 2];
            }
        }
    }
}

void upsample2x_bwd_serial(int c, int h, int w, const double* gy, double* gx) {
    const int oh = 2 * h, ow = 2 * w;
    for (int ch = 0; ch < c; ++ch) {
        for (int iy = 0; iy < h; ++iy) {
            for (int ix = 0; ix < w; ++ix) {
                double acc = 0.0;
                for (int dy = 0; dy < 2; ++dy)
                    for (int dx = 0; dx < 2; ++dx)
                        acc += gy[(ch * oh + 2 * iy + dy) * ow + 2 * ix + dx];
                gx[(ch * h + iy) * w + ix] = acc;
            }
        }
    }
}

void avgpool2_fwd_serial(int c, int h, int w, const double* x, double* y) {
    const int oh = h / 2, ow = w / 2;
    for (int ch = 0; ch < c; ++ch) {
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                double acc = 0.0;
                for (int dy = 0; dy < 2; ++dy)
                    for (int dx = 0; dx < 2; ++dx)
                        acc += x[(ch * h + 2 * oy + dy) * w + 2 * ox + dx];
                y[(ch * oh + oy) * ow + ox] = 0.25 * acc;
            }
        }
    }
}

void avgpool2_bwd_serial(int c, int h, int w, const double* gy, double* gx) {
    const int oh = h / 2, ow = w / 2;
    for (int ch = 0; ch < c; ++ch) {
        for (int iy = 0; iy < h; ++iy) {
            for (int ix = 0; ix < w; ++ix) {
                gx[(ch * h + iy) * w + ix] = 0.25 * gy[(ch * oh + iy / 2) * ow + ix / 2];
            }
        }
    }
}

}  // namespace mrh::kern::detail
