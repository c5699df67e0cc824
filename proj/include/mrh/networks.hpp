#pragma once

#include <array>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "mrh/imaging.hpp"
#include "mrh/rng.hpp"
#include "mrh/tape.hpp"

namespace mrh {

using ad::Param;
using ad::Tape;
using ad::Var;

// Width / dimensionality knobs. The decoder always runs at double the base
// width; latent codes are 2-D by construction.
struct ModelConfig {
    int width = 16;      // base channel count C
    int attn_dim = 16;   // key/query dimensionality d
    uint64_t init_seed = 12345;
};

inline constexpr int kLatentDim = 2;   // theta and eta are both 2-vectors
inline constexpr int kAnatomyCh = 5;   // one-hot anatomy levels per pixel

// FNV-1a over the canonical config string; stored in checkpoints so a file
// trained at one width cannot be silently loaded at another.
uint64_t config_digest(const ModelConfig& cfg);

Tensor slice_to_tensor(const SliceImage& s);           // [1,H,W]
SliceImage tensor_to_slice(const Tensor& t);           // [1,H,W] or [H,W]

// The four trainable networks plus the key/query heads, sharing one
// parameter registry so the optimizer and checkpointing see a stable,
// named, ordered parameter list.
//
//   anatomy encoder  U-Net, 4 down / 4 up, base width C -> 5-channel logits.
//                    Instance norm + mirror padding: the map is invariant to
//                    affine intensity changes and shift-equivariant away
//                    from borders -- both wanted for an anatomy code.
//                    Padding caveat: the equivariance is approximate. Mirror
//                    padding is position-dependent at borders and instance
//                    norm statistics are global, so shifting the input
//                    perturbs every output slightly; the error shrinks as
//                    content sits further from borders on a larger canvas.
//   contrast encoder 4x (conv-instnorm-leakyrelu), 9x9 stride-2 first layer,
//                    global average pool -> (mean, log-variance), each 2-D.
//                    Zero padding: with mirror padding the conv-IN stack
//                    would be exactly invariant to the intensity transforms
//                    it has to measure.
//   artifact encoder 4 densely connected convs, no normalization (artifact
//                    cues live in intensity statistics an instance norm
//                    would erase), pool -> 2-vector
//   decoder          U-Net at width 2C, no normalization: theta enters as
//                    broadcast-constant channels (at the input and again at
//                    the bottleneck), and instance norm would subtract the
//                    resulting per-channel constants right back out. Output
//                    bounded to [0, 1.5] by a scaled sigmoid.
//   key/query heads  4 -> d -> d fully connected maps over (theta, eta)
class Model {
public:
    explicit Model(const ModelConfig& cfg);

    const ModelConfig& config() const { return cfg_; }
    uint64_t digest() const { return config_digest(cfg_); }

    std::vector<Param*> params();
    std::vector<const Param*> params() const;
    Param& param(const std::string& name);
    void zero_grads();

    // --- graph builders (shared by training and inference) ---

    // 5-channel logits for a [1,H,W] input; H and W divisible by 16.
    Var anatomy_logits(Tape& t, Var x);
    // Soft Gumbel sample when `gumbel` is given (training); otherwise a hard
    // noise-free one-hot argmax (inference). tau > 0.
    Var anatomy_rep(Tape& t, Var x, double tau, Rng* gumbel);
    // Same with caller-supplied noise (fixed-noise gradient checks).
    Var anatomy_rep_given(Tape& t, Var x, double tau, const Tensor& noise, bool hard);
    // (mean, log_variance), log_variance clamped to [-10, 10].
    std::pair<Var, Var> contrast_posterior(Tape& t, Var x);
    // Reparameterized draw mean + exp(logvar/2) * eps; eps is a fixed
    // 2-vector so gradients flow to mean and logvar.
    Var sample_theta(Tape& t, Var mu, Var logvar, const Tensor& eps);
    Var artifact_code(Tape& t, Var x);                    // [2]
    Var decode(Tape& t, Var beta_star, Var theta);        // [1,H,W]
    Var key_head(Tape& t, Var theta, Var eta);            // [d]
    Var query_head(Tape& t, Var theta, Var eta);          // [d]

    // --- eager single-input wrappers (scratch tape inside) ---
    Tensor eval_anatomy(const Tensor& x, double tau, Rng* gumbel);  // [5,H,W]
    std::pair<std::vector<double>, std::vector<double>> eval_contrast(const Tensor& x);
    std::vector<double> eval_artifact(const Tensor& x);
    Tensor eval_decode(const Tensor& beta_star, const std::vector<double>& theta);
    std::vector<double> eval_key(const std::vector<double>& theta, const std::vector<double>& eta);
    std::vector<double> eval_query(const std::vector<double>& theta, const std::vector<double>& eta);

private:
    struct ConvSpec {
        Param* w = nullptr;
        Param* b = nullptr;
        Param* g = nullptr;   // instance-norm gain (null = no norm)
        Param* bt = nullptr;  // instance-norm bias
        int stride = 1, pad = 1;
        bool mirror = true;   // mirror padding; false = zero padding
    };

    Param& add_param(const std::string& name, std::vector<int> shape, double init_sd);
    ConvSpec add_conv(const std::string& name, int cin, int cout, int k, int stride, int pad,
                      bool norm, bool mirror = true);
    Var run_conv(Tape& t, const ConvSpec& c, Var x, bool act = true);
    Var unet(Tape& t, Var x, const ConvSpec* enc, const ConvSpec* up, const ConvSpec& head,
             Var* bottleneck_extra);
    Var fc_head(Tape& t, Param* w1, Param* b1, Param* w2, Param* b2, Var theta, Var eta);

    ModelConfig cfg_;
    std::vector<std::unique_ptr<Param>> own_;
    std::map<std::string, int> index_;
    int init_streams_ = 0;

    ConvSpec anat_enc_[5], anat_up_[4], anat_head_;
    ConvSpec dec_enc_[5], dec_up_[4], dec_head_;
    ConvSpec con_conv_[4];
    Param *con_fc_w_ = nullptr, *con_fc_b_ = nullptr;
    ConvSpec art_conv_[4];
    Param *art_fc_w_ = nullptr, *art_fc_b_ = nullptr;
    Param *key_w1_ = nullptr, *key_b1_ = nullptr, *key_w2_ = nullptr, *key_b2_ = nullptr;
    Param *qry_w1_ = nullptr, *qry_b1_ = nullptr, *qry_w2_ = nullptr, *qry_b2_ = nullptr;
};

}  // namespace mrh
