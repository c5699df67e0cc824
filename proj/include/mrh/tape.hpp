#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mrh/tensor.hpp"

namespace mrh::ad {

// Trainable parameter with externally owned storage. Gradients accumulate
// across backward passes until zero_grad(); m/v are optimizer moments.
struct Param {
    std::string name;
    Tensor value;
    Tensor grad;
    Tensor m, v;

    Param() = default;
    Param(std::string n, Tensor init)
        : name(std::move(n)),
          value(std::move(init)),
          grad(Tensor::zeros(value.shape)),
          m(Tensor::zeros(value.shape)),
          v(Tensor::zeros(value.shape)) {}

    void zero_grad() { grad.fill(0.0); }
};

class Tape;

// Handle to a node on a tape. Cheap to copy; valid until Tape::clear().
struct Var {
    Tape* t = nullptr;
    int i = -1;
    bool ok() const { return t != nullptr && i >= 0; }
};

// Define-by-run reverse-mode tape over double tensors. Values are computed
// eagerly; backward() replays recorded closures in reverse creation order.
class Tape {
  public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Tensor v);
    Var param(Param& p);

    // Elementwise (same shape unless noted).
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var scale(Var a, double c);
    Var add_const(Var a, double c);
    Var exp_(Var a);
    Var log_(Var a);
    Var leaky_relu(Var a, double slope = 0.01);
    Var sigmoid_scaled(Var a, double s = 1.0);  // s * sigmoid(x)
    Var clamp(Var a, double lo, double hi);     // zero gradient outside [lo,hi]

    // Reductions to a scalar (shape [1]).
    Var sum(Var a);
    Var mean(Var a);
    Var dot(Var a, Var b);
    Var sum_abs_diff(Var a, Var b);
    Var mean_abs_diff(Var a, Var b);
    Var kl_std_normal(Var mu, Var logvar);  // 0.5 * sum(mu^2 + e^lv - lv - 1)

    // Shape and vector ops.
    Var reshape(Var a, std::vector<int> shape);
    Var slice_vec(Var a, int start, int len);
    Var concat_vec(Var a, Var b);
    Var stack_scalars(const std::vector<Var>& xs);  // n scalars -> [n]
    Var softmax_vec(Var a);
    Var l2_normalize(Var a, double eps = 1e-12);
    // sum_k w[k] * xs[k], all xs same shape, w shape [n]
    Var weighted_sum(const std::vector<Var>& xs, Var w);

    // [C,H,W] image ops.
    Var concat_ch(Var a, Var b);
    Var slice_patch(Var a, int y0, int x0, int ph, int pw);
    Var sym_pad2d(Var a, int p);  // mirror padding (edge included); needs p <= H, p <= W
    Var broadcast_to_hw(Var v, int h, int w);  // [C] -> [C,H,W]
    Var global_avg_pool(Var a);                // [C,H,W] -> [C]
    Var conv2d(Var x, Var w, Var b, int stride, int pad);
    Var instance_norm(Var x, Var gain, Var bias, double eps = 1e-5);
    Var upsample2x(Var x);
    Var avgpool2(Var x);
    Var linear(Var x, Var w, Var b);  // w [out,in], x [in] -> [out]

    // Channel softmax of (logits + gumbel) / tau. If hard, the forward value
    // is the one-hot argmax while the backward pass uses the soft Jacobian.
    Var gumbel_softmax_ch(Var logits, const Tensor& gumbel, double tau, bool hard);

    void backward(Var root);

    const Tensor& val(Var v) const;
    const Tensor& grad_of(Var v) const;  // valid after backward()
    size_t num_nodes() const { return nodes_.size(); }
    void clear();

  private:
    struct Node {
        Tensor value;
        Tensor grad;
        std::vector<Tensor> aux;
        std::function<void(Tape&)> bwd;
        Param* bound = nullptr;
    };

    std::vector<Node> nodes_;

    Var push(Tensor value);
    Node& node(Var v);
    const Node& node(Var v) const;
    Tensor& g(int i) { return nodes_[size_t(i)].grad; }
    const Tensor& v(int i) const { return nodes_[size_t(i)].value; }
};

}  // namespace mrh::ad
