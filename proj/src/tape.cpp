#include "mrh/tape.hpp"

#include <algorithm>
#include <cmath>

#include "mrh/check.hpp"
#include "mrh/kernels.hpp"

namespace mrh::ad {

namespace {
void axpy(Tensor& dst, const Tensor& src, double a = 1.0) {
    MRH_CHECK(dst.size() == src.size(), "axpy size mismatch");
    for (size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += a * src.data[i];
}
}  // namespace

Var Tape::push(Tensor value) {
    Node n;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Tape::Node& Tape::node(Var v) {
    MRH_CHECK(v.t == this && v.i >= 0 && v.i < static_cast<int>(nodes_.size()), "bad var");
    return nodes_[size_t(v.i)];
}
const Tape::Node& Tape::node(Var v) const {
    MRH_CHECK(v.t == this && v.i >= 0 && v.i < static_cast<int>(nodes_.size()), "bad var");
    return nodes_[size_t(v.i)];
}

const Tensor& Tape::val(Var v) const { return node(v).value; }
const Tensor& Tape::grad_of(Var v) const { return node(v).grad; }
void Tape::clear() { nodes_.clear(); }

Var Tape::constant(Tensor v) { return push(std::move(v)); }

Var Tape::param(Param& p) {
    Var out = push(p.value);
    node(out).bound = &p;
    int oi = out.i;
    node(out).bwd = [oi](Tape& t) {
        Node& n = t.nodes_[size_t(oi)];
        axpy(n.bound->grad, n.grad);
    };
    return out;
}

Var Tape::add(Var a, Var b) {
    MRH_CHECK(val(a).same_shape(val(b)), "add shape " << shape_str(val(a).shape) << " vs "
                                                      << shape_str(val(b).shape));
    Tensor y = val(a);
    axpy(y, val(b));
    Var out = push(std::move(y));
    int ai = a.i, bi = b.i, oi = out.i;
    node(out).bwd = [ai, bi, oi](Tape& t) {
        axpy(t.g(ai), t.g(oi));
        axpy(t.g(bi), t.g(oi));
    };
    return out;
}

Var Tape::sub(Var a, Var b) {
    MRH_CHECK(val(a).same_shape(val(b)), "sub shape mismatch");
    Tensor y = val(a);
    axpy(y, val(b), -1.0);
    Var out = push(std::move(y));
    int ai = a.i, bi = b.i, oi = out.i;
    node(out).bwd = [ai, bi, oi](Tape& t) {
        axpy(t.g(ai), t.g(oi));
        axpy(t.g(bi), t.g(oi), -1.0);
    };
    return out;
}

Var Tape::mul(Var a, Var b) {
    MRH_CHECK(val(a).same_shape(val(b)), "mul shape mismatch");
    Tensor y = val(a);
    for (size_t i = 0; i < y.data.size(); ++i) y.data[i] *= val(b).data[i];
    Var out = push(std::move(y));
    int ai = a.i, bi = b.i, oi = out.i;
    node(out).bwd = [ai, bi, oi](Tape& t) {
        const Tensor& gy = t.g(oi);
        for (size_t i = 0; i < gy.data.size(); ++i) {
            t.g(ai).data[i] += gy.data[i] * t.v(bi).data[i];
            t.g(bi).data[i] += gy.data[i] * t.v(ai).data[i];
        }
    };
    return out;
}

Var Tape::scale(Var a, double c) {
    Tensor y = val(a);
    for (auto& x : y.data) x *= c;
    Var out = push(std::move(y));
    int ai = a.i, oi = out.i;
    node(out).bwd = [ai, oi, c](Tape& t) { axpy(t.g(ai), t.g(oi), c); };
    return out;
}

Var Tape::add_const(Var a, double c) {
    Tensor y = val(a);
    for (auto& x : y.data) x += c;
    Var out = push(std::move(y));
    int ai = a.i, oi = out.i;
    node(out).bwd = [ai, oi](Tape& t) { axpy(t.g(ai), t.g(oi)); };
    return out;
}

Var Tape::exp_(Var a) {
    Tensor y = val(a);
    for (auto& x : y.data) x = std::exp(x);
    Var out = push(std::move(y));
    int ai = a.i, oi = out.i;
    node(out).bwd = [ai, oi](Tape& t) {
        const Tensor& gy = t.g(oi);
        const Tensor& y2 = t.v(oi);
        for (size_t i = 0; i < gy.data.size(); ++i) t.g(ai).data[i] += gy.data[i] * y2.data[i];
    };
    return out;
}

Var Tape::log_(Var a) {
    Tensor y = val(a);
    for (auto& x : y.data) x = std::log(x);
    Var out = push(std::move(y));
    int ai = a.i, oi = out.i;
    node(out).bwd = [ai, oi](Tape& t) {
        const Tensor& gy = t.g(oi);
        const Tensor& xa = t.v(ai);
        for (size_t i = 0; i < gy.data.size(); ++i) t.g(ai).data[i] += gy.data[i] / xa.data[i];
    };
    return out;
}

Var Tape::leaky_relu(Var a, double slope) {
    Tensor y = val(a);
    for (auto& x : y.data) x = x >= 0.0 ? x : slope * x;
    Var out = push(std::move(y));
    int ai = a.i, oi = out.i;
    node(out).bwd = [ai, oi, slope](Tape& t) {
        const Tensor& gy = t.g(oi);
        const Tensor& xa = t.v(ai);
        for (size_t i = 0; i < gy.data.size(); ++i)
            t.g(ai).data[i] += gy.data[i] * (xa.data[i] >= 0.0 ? 1.0 : slope);
    };
    return out;
}

Var Tape::sigmoid_scaled(Var a, double s) {
    Tensor y = val(a);
    for (auto& x : y.data) x = s / (1.0 + std::exp(-x));
    Var out = push(std::move(y));
    int ai = a.i, oi = out.i;
    node(out).bwd = [ai, oi, s](Tape& t) {
        const Tensor& gy = t.g(oi);
        const Tensor& y2 = t.v(oi);
        for (size_t i = 0; i < gy.data.size(); ++i)
            t.g(ai).data[i] += gy.data[i] * y2.data[i] * (s - y2.data[i]) / s;
    };
    return out;
}

Var Tape::clamp(Var a, double lo, double hi) {
    Tensor y = val(a);
    for (auto& x : y.data) x = std::min(hi, std::max(lo, x));
    Var out = push(std::move(y));
    int ai = a.i, oi = out.i;
    node(out).bwd = [ai, oi, lo, hi](Tape& t) {
        const Tensor& gy = t.g(oi);
        const Tensor& xa = t.v(ai);
        for (size_t i = 0; i < gy.data.size(); ++i)
            if (xa.data[i] >= lo && xa.data[i] <= hi) t.g(ai).data[i] += gy.data[i];
    };
    return out;
}

Var Tape::sum(Var a) {
    double s = 0.0;
    for (double x : val(a).data) s += x;
    Var out = push(Tensor::scalar(s));
    int ai = a.i, oi = out.i;
    node(out).bwd = [ai, oi](Tape& t) {
        const double gy = t.g(oi).data[0];
        for (auto& x : t.g(ai).data) x += gy;
    };
    return out;
}

Var Tape::mean(Var a) {
    const double n = static_cast<double>(val(a).size());
    double s = 0.0;
    for (double x : val(a).data) s += x;
    Var out = push(Tensor::scalar(s / n));
    int ai = a.i, oi = out.i;
    node(out).bwd = [ai, oi, n](Tape& t) {
        const double gy = t.g(oi).data[0] / n;
        for (auto& x : t.g(ai).data) x += gy;
    };
    return out;
}

Var Tape::dot(Var a, Var b) {
    MRH_CHECK(val(a).size() == val(b).size(), "dot size mismatch");
    double s = 0.0;
    for (size_t i = 0; i < val(a).data.size(); ++i) s += val(a).data[i] * val(b).data[i];
    Var out = push(Tensor::scalar(s));
    int ai = a.i, bi = b.i, oi = out.i;
    node(out).bwd = [ai, bi, oi](Tape& t) {
        const double gy = t.g(oi).data[0];
        axpy(t.g(ai), t.v(bi), gy);
        axpy(t.g(bi), t.v(ai), gy);
    };
    return out;
}

Var Tape::sum_abs_diff(Var a, Var b) {
    MRH_CHECK(val(a).same_shape(val(b)), "sum_abs_diff shape mismatch");
    double s = 0.0;
    for (size_t i = 0; i < val(a).data.size(); ++i) s += std::abs(val(a).data[i] - val(b).data[i]);
    Var out = push(Tensor::scalar(s));
    int ai = a.i, bi = b.i, oi = out.i;
    node(out).bwd = [ai, bi, oi](Tape& t) {
        const double gy = t.g(oi).data[0];
        for (size_t i = 0; i < t.g(ai).data.size(); ++i) {
            const double d = t.v(ai).data[i] - t.v(bi).data[i];
            const double sg = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
            t.g(ai).data[i] += gy * sg;
            t.g(bi).data[i] -= gy * sg;
        }
    };
    return out;
}

Var Tape::mean_abs_diff(Var a, Var b) {
    Var s = sum_abs_diff(a, b);
    return scale(s, 1.0 / static_cast<double>(val(a).size()));
}

Var Tape::kl_std_normal(Var mu, Var logvar) {
    MRH_CHECK(val(mu).same_shape(val(logvar)), "kl shape mismatch");
    double s = 0.0;
    for (size_t i = 0; i < val(mu).data.size(); ++i) {
        const double m = val(mu).data[i], lv = val(logvar).data[i];
        s += m * m + std::exp(lv) - lv - 1.0;
    }
    Var out = push(Tensor::scalar(0.5 * s));
    int mi = mu.i, li = logvar.i, oi = out.i;
    node(out).bwd = [mi, li, oi](Tape& t) {
        const double gy = t.g(oi).data[0];
        for (size_t i = 0; i < t.g(mi).data.size(); ++i) {
            t.g(mi).data[i] += gy * t.v(mi).data[i];
            t.g(li).data[i] += gy * 0.5 * (std::exp(t.v(li).data[i]) - 1.0);
        }
    };
    return out;
}

Var Tape::reshape(Var a, std::vector<int> shape) {
    MRH_CHECK(Tensor::numel(shape) == val(a).size(),
              "reshape " << shape_str(val(a).shape) << " -> " << shape_str(shape));
    Tensor y(std::move(shape), val(a).data);
    Var out = push(std::move(y));
    int ai = a.i, oi = out.i;
    node(out).bwd = [ai, oi](Tape& t) {
        for (size_t i = 0; i < t.g(ai).data.size(); ++i) t.g(ai).data[i] += t.g(oi).data[i];
    };
    return out;
}

Var Tape::slice_vec(Var a, int start, int len) {
    MRH_CHECK(val(a).rank() == 1 && start >= 0 && start + len <= val(a).dim(0), "slice_vec range");
    Tensor y({len});
    for (int i = 0; i < len; ++i) y.data[size_t(i)] = val(a).data[size_t(start + i)];
    Var out = push(std::move(y));
    int ai = a.i, oi = out.i;
    node(out).bwd = [ai, oi, start, len](Tape& t) {
        for (int i = 0; i < len; ++i) t.g(ai).data[size_t(start + i)] += t.g(oi).data[size_t(i)];
    };
    return out;
}

Var Tape::concat_vec(Var a, Var b) {
    MRH_CHECK(val(a).rank() == 1 && val(b).rank() == 1, "concat_vec rank");
    const int na = val(a).dim(0), nb = val(b).dim(0);
    Tensor y({na + nb});
    std::copy(val(a).data.begin(), val(a).data.end(), y.data.begin());
    std::copy(val(b).data.begin(), val(b).data.end(), y.data.begin() + na);
    Var out = push(std::move(y));
    int ai = a.i, bi = b.i, oi = out.i;
    node(out).bwd = [ai, bi, oi, na, nb](Tape& t) {
        for (int i = 0; i < na; ++i) t.g(ai).data[size_t(i)] += t.g(oi).data[size_t(i)];
        for (int i = 0; i < nb; ++i) t.g(bi).data[size_t(i)] += t.g(oi).data[size_t(na + i)];
    };
    return out;
}

Var Tape::stack_scalars(const std::vector<Var>& xs) {
    MRH_CHECK(!xs.empty(), "stack_scalars empty");
    Tensor y({static_cast<int>(xs.size())});
    std::vector<int> idx;
    for (size_t k = 0; k < xs.size(); ++k) {
        MRH_CHECK(val(xs[k]).size() == 1, "stack_scalars needs scalars");
        y.data[k] = val(xs[k]).data[0];
        idx.push_back(xs[k].i);
    }
    Var out = push(std::move(y));
    int oi = out.i;
    node(out).bwd = [idx, oi](Tape& t) {
        for (size_t k = 0; k < idx.size(); ++k) t.g(idx[k]).data[0] += t.g(oi).data[k];
    };
    return out;
}

Var Tape::softmax_vec(Var a) {
    MRH_CHECK(val(a).rank() == 1, "softmax_vec rank");
    Tensor y = val(a);
    double mx = y.data[0];
    for (double x : y.data) mx = std::max(mx, x);
    double z = 0.0;
    for (auto& x : y.data) {
        x = std::exp(x - mx);
        z += x;
    }
    for (auto& x : y.data) x /= z;
    Var out = push(std::move(y));
    int ai = a.i, oi = out.i;
    node(out).bwd = [ai, oi](Tape& t) {
        const Tensor& y2 = t.v(oi);
        const Tensor& gy = t.g(oi);
        double s = 0.0;
        for (size_t i = 0; i < y2.data.size(); ++i) s += y2.data[i] * gy.data[i];
        for (size_t i = 0; i < y2.data.size(); ++i)
            t.g(ai).data[i] += y2.data[i] * (gy.data[i] - s);
    };
    return out;
}

Var Tape::l2_normalize(Var a, double eps) {
    double ss = eps;
    for (double x : val(a).data) ss += x * x;
    const double r = std::sqrt(ss);
    Tensor y = val(a);
    for (auto& x : y.data) x /= r;
    Var out = push(std::move(y));
    int ai = a.i, oi = out.i;
    node(out).bwd = [ai, oi, r](Tape& t) {
        const Tensor& y2 = t.v(oi);
        const Tensor& gy = t.g(oi);
        double s = 0.0;
        for (size_t i = 0; i < y2.data.size(); ++i) s += y2.data[i] * gy.data[i];
        for (size_t i = 0; i < y2.data.size(); ++i)
            t.g(ai).data[i] += (gy.data[i] - y2.data[i] * s) / r;
    };
    return out;
}

Var Tape::weighted_sum(const std::vector<Var>& xs, Var w) {
    MRH_CHECK(!xs.empty() && val(w).rank() == 1 &&
                  val(w).dim(0) == static_cast<int>(xs.size()),
              "weighted_sum arity");
    Tensor y = Tensor::zeros(val(xs[0]).shape);
    std::vector<int> idx;
    for (size_t k = 0; k < xs.size(); ++k) {
        MRH_CHECK(val(xs[k]).same_shape(y), "weighted_sum shape mismatch");
        axpy(y, val(xs[k]), val(w).data[k]);
        idx.push_back(xs[k].i);
    }
    Var out = push(std::move(y));
    int wi = w.i, oi = out.i;
    node(out).bwd = [idx, wi, oi](Tape& t) {
        const Tensor& gy = t.g(oi);
        for (size_t k = 0; k < idx.size(); ++k) {
            axpy(t.g(idx[k]), gy, t.v(wi).data[k]);
            double s = 0.0;
            for (size_t i = 0; i < gy.data.size(); ++i)
                s += gy.data[i] * t.v(idx[k]).data[i];
            t.g(wi).data[k] += s;
        }
    };
    return out;
}

Var Tape::concat_ch(Var a, Var b) {
    MRH_CHECK(val(a).rank() == 3 && val(b).rank() == 3 && val(a).dim(1) == val(b).dim(1) &&
                  val(a).dim(2) == val(b).dim(2),
              "concat_ch shapes " << shape_str(val(a).shape) << " " << shape_str(val(b).shape));
    const int ca = val(a).dim(0), cb = val(b).dim(0), h = val(a).dim(1), w = val(a).dim(2);
    Tensor y({ca + cb, h, w});
    std::copy(val(a).data.begin(), val(a).data.end(), y.data.begin());
    std::copy(val(b).data.begin(), val(b).data.end(), y.data.begin() + val(a).size());
    Var out = push(std::move(y));
    int ai = a.i, bi = b.i, oi = out.i;
    const size_t na = static_cast<size_t>(val(a).size());
    node(out).bwd = [ai, bi, oi, na](Tape& t) {
        const Tensor& gy = t.g(oi);
        for (size_t i = 0; i < na; ++i) t.g(ai).data[i] += gy.data[i];
        for (size_t i = na; i < gy.data.size(); ++i) t.g(bi).data[i - na] += gy.data[i];
    };
    return out;
}

Var Tape::slice_patch(Var a, int y0, int x0, int ph, int pw) {
    MRH_CHECK(val(a).rank() == 3, "slice_patch rank");
    const int c = val(a).dim(0), h = val(a).dim(1), w = val(a).dim(2);
    MRH_CHECK(y0 >= 0 && x0 >= 0 && y0 + ph <= h && x0 + pw <= w, "slice_patch range");
    Tensor y({c, ph, pw});
    for (int ch = 0; ch < c; ++ch)
        for (int py = 0; py < ph; ++py)
            for (int px = 0; px < pw; ++px) y.at(ch, py, px) = val(a).at(ch, y0 + py, x0 + px);
    Var out = push(std::move(y));
    int ai = a.i, oi = out.i;
    node(out).bwd = [ai, oi, y0, x0, ph, pw, c](Tape& t) {
        for (int ch = 0; ch < c; ++ch)
            for (int py = 0; py < ph; ++py)
                for (int px = 0; px < pw; ++px)
                    t.g(ai).at(ch, y0 + py, x0 + px) += t.g(oi).at(ch, py, px);
    };
    return out;
}

Var Tape::sym_pad2d(Var a, int p) {
    MRH_CHECK(val(a).rank() == 3, "sym_pad2d rank");
    const int c = val(a).dim(0), h = val(a).dim(1), w = val(a).dim(2);
    MRH_CHECK(p >= 0 && p <= h && p <= w,
              "sym_pad2d pad " << p << " too large for " << shape_str(val(a).shape));
    if (p == 0) return a;
    auto mi = [](int i, int n) { return i < 0 ? -i - 1 : (i >= n ? 2 * n - 1 - i : i); };
    Tensor y({c, h + 2 * p, w + 2 * p});
    for (int ch = 0; ch < c; ++ch)
        for (int iy = 0; iy < h + 2 * p; ++iy)
            for (int ix = 0; ix < w + 2 * p; ++ix)
                y.at(ch, iy, ix) = val(a).at(ch, mi(iy - p, h), mi(ix - p, w));
    Var out = push(std::move(y));
    int ai = a.i, oi = out.i;
    node(out).bwd = [ai, oi, p, c, h, w, mi](Tape& t) {
        for (int ch = 0; ch < c; ++ch)
            for (int iy = 0; iy < h + 2 * p; ++iy)
                for (int ix = 0; ix < w + 2 * p; ++ix)
                    t.g(ai).at(ch, mi(iy - p, h), mi(ix - p, w)) += t.g(oi).at(ch, iy, ix);
    };
    return out;
}

Var Tape::broadcast_to_hw(Var v_, int h, int w) {
    MRH_CHECK(val(v_).rank() == 1, "broadcast_to_hw rank");
    const int c = val(v_).dim(0);
    Tensor y({c, h, w});
    for (int ch = 0; ch < c; ++ch) {
        const double x = val(v_).data[size_t(ch)];
        for (int i = 0; i < h * w; ++i) y.data[size_t(ch * h * w + i)] = x;
    }
    Var out = push(std::move(y));
    int ai = v_.i, oi = out.i;
    node(out).bwd = [ai, oi, c, h, w](Tape& t) {
        for (int ch = 0; ch < c; ++ch) {
            double s = 0.0;
            for (int i = 0; i < h * w; ++i) s += t.g(oi).data[size_t(ch * h * w + i)];
            t.g(ai).data[size_t(ch)] += s;
        }
    };
    return out;
}

Var Tape::global_avg_pool(Var a) {
    MRH_CHECK(val(a).rank() == 3, "gap rank");
    const int c = val(a).dim(0), n = val(a).dim(1) * val(a).dim(2);
    Tensor y({c});
    for (int ch = 0; ch < c; ++ch) {
        double s = 0.0;
        for (int i = 0; i < n; ++i) s += val(a).data[size_t(ch * n + i)];
        y.data[size_t(ch)] = s / n;
    }
    Var out = push(std::move(y));
    int ai = a.i, oi = out.i;
    node(out).bwd = [ai, oi, c, n](Tape& t) {
        for (int ch = 0; ch < c; ++ch) {
            const double gy = t.g(oi).data[size_t(ch)] / n;
            for (int i = 0; i < n; ++i) t.g(ai).data[size_t(ch * n + i)] += gy;
        }
    };
    return out;
}

Var Tape::conv2d(Var x, Var w, Var b, int stride, int pad) {
    MRH_CHECK(val(x).rank() == 3 && val(w).rank() == 4, "conv2d ranks");
    kern::Conv2dDims d{val(x).dim(0), val(x).dim(1), val(x).dim(2),
                       val(w).dim(0), val(w).dim(2), val(w).dim(3), stride, pad};
    MRH_CHECK(val(w).dim(1) == d.cin, "conv2d cin mismatch");
    MRH_CHECK(val(b).rank() == 1 && val(b).dim(0) == d.cout, "conv2d bias shape");
    Tensor y({d.cout, d.oh(), d.ow()});
    kern::conv2d_fwd(d, val(x).data.data(), val(w).data.data(), val(b).data.data(), y.data.data());
    Var out = push(std::move(y));
    int xi = x.i, wi = w.i, bi = b.i, oi = out.i;
    node(out).bwd = [xi, wi, bi, oi, d](Tape& t) {
        const Tensor& gy = t.g(oi);
        Tensor gx({d.cin, d.h, d.w});
        Tensor gw({d.cout, d.cin, d.kh, d.kw});
        Tensor gb({d.cout});
        kern::conv2d_bwd_input(d, gy.data.data(), t.v(wi).data.data(), gx.data.data());
        kern::conv2d_bwd_params(d, t.v(xi).data.data(), gy.data.data(), gw.data.data(),
                                gb.data.data());
        axpy(t.g(xi), gx);
        axpy(t.g(wi), gw);
        axpy(t.g(bi), gb);
    };
    return out;
}

Var Tape::instance_norm(Var x, Var gain, Var bias, double eps) {
    MRH_CHECK(val(x).rank() == 3, "instance_norm rank");
    const int c = val(x).dim(0), h = val(x).dim(1), w = val(x).dim(2);
    MRH_CHECK(val(gain).dim(0) == c && val(bias).dim(0) == c, "instance_norm params");
    Tensor y({c, h, w}), xhat({c, h, w}), inv_std({c});
    kern::instnorm_fwd(c, h, w, val(x).data.data(), val(gain).data.data(), val(bias).data.data(),
                       eps, y.data.data(), xhat.data.data(), inv_std.data.data());
    Var out = push(std::move(y));
    node(out).aux.push_back(std::move(xhat));
    node(out).aux.push_back(std::move(inv_std));
    int xi = x.i, gi = gain.i, bi = bias.i, oi = out.i;
    node(out).bwd = [xi, gi, bi, oi, c, h, w](Tape& t) {
        Node& n = t.nodes_[size_t(oi)];
        Tensor gx({c, h, w}), ggain({c}), gbias({c});
        kern::instnorm_bwd(c, h, w, n.grad.data.data(), n.aux[0].data.data(),
                           t.v(gi).data.data(), n.aux[1].data.data(), gx.data.data(),
                           ggain.data.data(), gbias.data.data());
        axpy(t.g(xi), gx);
        axpy(t.g(gi), ggain);
        axpy(t.g(bi), gbias);
    };
    return out;
}

Var Tape::upsample2x(Var x) {
    MRH_CHECK(val(x).rank() == 3, "upsample2x rank");
    const int c = val(x).dim(0), h = val(x).dim(1), w = val(x).dim(2);
    Tensor y({c, 2 * h, 2 * w});
    kern::upsample2x_fwd(c, h, w, val(x).data.data(), y.data.data());
    Var out = push(std::move(y));
    int xi = x.i, oi = out.i;
    node(out).bwd = [xi, oi, c, h, w](Tape& t) {
        Tensor gx({c, h, w});
        kern::upsample2x_bwd(c, h, w, t.g(oi).data.data(), gx.data.data());
        axpy(t.g(xi), gx);
    };
    return out;
}

Var Tape::avgpool2(Var x) {
    MRH_CHECK(val(x).rank() == 3, "avgpool2 rank");
    const int c = val(x).dim(0), h = val(x).dim(1), w = val(x).dim(2);
    MRH_CHECK(h % 2 == 0 && w % 2 == 0, "avgpool2 needs even extent");
    Tensor y({c, h / 2, w / 2});
    kern::avgpool2_fwd(c, h, w, val(x).data.data(), y.data.data());
    Var out = push(std::move(y));
    int xi = x.i, oi = out.i;
    node(out).bwd = [xi, oi, c, h, w](Tape& t) {
        Tensor gx({c, h, w});
        kern::avgpool2_bwd(c, h, w, t.g(oi).data.data(), gx.data.data());
        axpy(t.g(xi), gx);
    };
    return out;
}

Var Tape::linear(Var x, Var w, Var b) {
    MRH_CHECK(val(x).rank() == 1 && val(w).rank() == 2, "linear ranks");
    const int in = val(x).dim(0), out_n = val(w).dim(0);
    MRH_CHECK(val(w).dim(1) == in && val(b).dim(0) == out_n, "linear shapes");
    Tensor y({out_n});
    for (int o = 0; o < out_n; ++o) {
        double s = val(b).data[size_t(o)];
        for (int i = 0; i < in; ++i) s += val(w).data[size_t(o * in + i)] * val(x).data[size_t(i)];
        y.data[size_t(o)] = s;
    }
    Var out = push(std::move(y));
    int xi = x.i, wi = w.i, bi = b.i, oi = out.i;
    node(out).bwd = [xi, wi, bi, oi, in, out_n](Tape& t) {
        const Tensor& gy = t.g(oi);
        for (int o = 0; o < out_n; ++o) {
            const double go = gy.data[size_t(o)];
            t.g(bi).data[size_t(o)] += go;
            for (int i = 0; i < in; ++i) {
                t.g(wi).data[size_t(o * in + i)] += go * t.v(xi).data[size_t(i)];
                t.g(xi).data[size_t(i)] += go * t.v(wi).data[size_t(o * in + i)];
            }
        }
    };
    return out;
}

Var Tape::gumbel_softmax_ch(Var logits, const Tensor& gumbel, double tau, bool hard) {
    MRH_CHECK(val(logits).rank() == 3, "gumbel_softmax_ch rank");
    MRH_CHECK(val(logits).same_shape(gumbel), "gumbel noise shape");
    MRH_CHECK(tau > 0.0, "gumbel_softmax_ch tau");
    const int c = val(logits).dim(0), h = val(logits).dim(1), w = val(logits).dim(2);
    const int n = h * w;
    Tensor soft({c, h, w});
    for (int i = 0; i < n; ++i) {
        double mx = -1e300;
        for (int ch = 0; ch < c; ++ch)
            mx = std::max(mx, (val(logits).data[size_t(ch * n + i)] + gumbel.data[size_t(ch * n + i)]) / tau);
        double z = 0.0;
        for (int ch = 0; ch < c; ++ch) {
            const double e = std::exp(
                (val(logits).data[size_t(ch * n + i)] + gumbel.data[size_t(ch * n + i)]) / tau - mx);
            soft.data[size_t(ch * n + i)] = e;
            z += e;
        }
        for (int ch = 0; ch < c; ++ch) soft.data[size_t(ch * n + i)] /= z;
    }
    Tensor y = soft;
    if (hard) {
        for (int i = 0; i < n; ++i) {
            int best = 0;
            for (int ch = 1; ch < c; ++ch)
                if (soft.data[size_t(ch * n + i)] > soft.data[size_t(best * n + i)]) best = ch;
            for (int ch = 0; ch < c; ++ch) y.data[size_t(ch * n + i)] = ch == best ? 1.0 : 0.0;
        }
    }
    Var out = push(std::move(y));
    node(out).aux.push_back(std::move(soft));
    int ai = logits.i, oi = out.i;
    node(out).bwd = [ai, oi, c, n, tau](Tape& t) {
        // Straight-through: gradient of the soft sample regardless of `hard`.
        Node& nd = t.nodes_[size_t(oi)];
        const Tensor& sf = nd.aux[0];
        const Tensor& gy = nd.grad;
        for (int i = 0; i < n; ++i) {
            double s = 0.0;
            for (int ch = 0; ch < c; ++ch)
                s += sf.data[size_t(ch * n + i)] * gy.data[size_t(ch * n + i)];
            for (int ch = 0; ch < c; ++ch)
                t.g(ai).data[size_t(ch * n + i)] +=
                    sf.data[size_t(ch * n + i)] * (gy.data[size_t(ch * n + i)] - s) / tau;
        }
    };
    return out;
}

void Tape::backward(Var root) {
    MRH_CHECK(root.t == this && val(root).size() == 1, "backward root must be scalar");
    for (size_t i = 0; i <= size_t(root.i); ++i) {
        nodes_[i].grad = Tensor::zeros(nodes_[i].value.shape);
    }
    nodes_[size_t(root.i)].grad.data[0] = 1.0;
    for (int i = root.i; i >= 0; --i) {
        if (nodes_[size_t(i)].bwd) nodes_[size_t(i)].bwd(*this);
    }
}

}  // namespace mrh::ad
