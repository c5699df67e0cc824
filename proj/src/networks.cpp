#include "mrh/networks.hpp"

#include <cmath>
#include <cstring>

#include "mrh/check.hpp"

namespace mrh {

uint64_t config_digest(const ModelConfig& cfg) {
    // Architecture only: a checkpoint is loadable iff the parameter shapes
    // match, which the width and attention dim determine.
    std::string s = "w=" + std::to_string(cfg.width) + ";d=" + std::to_string(cfg.attn_dim) +
                    ";latent=" + std::to_string(kLatentDim) + ";anat=" + std::to_string(kAnatomyCh);
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

Tensor slice_to_tensor(const SliceImage& s) {
    Tensor t({1, s.h, s.w});
    for (size_t i = 0; i < s.pixels.size(); ++i) t.data[i] = double(s.pixels[i]);
    return t;
}

SliceImage tensor_to_slice(const Tensor& t) {
    MRH_CHECK(t.rank() == 3 ? t.dim(0) == 1 : t.rank() == 2, "tensor_to_slice wants [1,H,W] or [H,W]");
    const int h = t.rank() == 3 ? t.dim(1) : t.dim(0);
    const int w = t.rank() == 3 ? t.dim(2) : t.dim(1);
    SliceImage s(h, w);
    for (size_t i = 0; i < s.pixels.size(); ++i) s.pixels[i] = float(t.data[i]);
    s.orig_h = h;
    s.orig_w = w;
    return s;
}

Param& Model::add_param(const std::string& name, std::vector<int> shape, double init_sd) {
    Tensor init(shape);
    if (init_sd > 0.0) {
        Rng rng(Rng::mix(cfg_.init_seed, uint64_t(init_streams_)));
        // Values are kept float32-canonical (here and after every optimizer
        // step) so checkpoints are lossless and resume is bit-exact.
        for (auto& v : init.data) v = double(float(rng.normal(0.0, init_sd)));
    } else if (init_sd < 0.0) {
        init.fill(1.0);
    }
    ++init_streams_;
    own_.push_back(std::make_unique<Param>(name, std::move(init)));
    index_[name] = int(own_.size()) - 1;
    return *own_.back();
}

Model::ConvSpec Model::add_conv(const std::string& name, int cin, int cout, int k, int stride,
                                int pad, bool norm, bool mirror) {
    ConvSpec c;
    const double sd = std::sqrt(2.0 / (double(cin) * k * k));
    c.w = &add_param(name + ".w", {cout, cin, k, k}, sd);
    c.b = &add_param(name + ".b", {cout}, 0.0);
    if (norm) {
        c.g = &add_param(name + ".g", {cout}, -1.0);
        // Small random offset: a zero bias would park post-norm activations
        // exactly on the LeakyReLU kink whenever a layer runs at 1x1 spatial
        // extent (normalized value 0 everywhere).
        c.bt = &add_param(name + ".bt", {cout}, 0.01);
    }
    c.stride = stride;
    c.pad = pad;
    c.mirror = mirror;
    return c;
}

Model::Model(const ModelConfig& cfg) : cfg_(cfg) {
    MRH_CHECK(cfg.width >= 2 && cfg.attn_dim >= 2, "model width/attn_dim too small");
    const int C = cfg.width;
    const int W = 2 * C;  // decoder width
    const int d = cfg.attn_dim;

    anat_enc_[0] = add_conv("anat.enc0", 1, C, 3, 1, 1, true);
    anat_enc_[1] = add_conv("anat.enc1", C, 2 * C, 3, 1, 1, true);
    anat_enc_[2] = add_conv("anat.enc2", 2 * C, 4 * C, 3, 1, 1, true);
    anat_enc_[3] = add_conv("anat.enc3", 4 * C, 4 * C, 3, 1, 1, true);
    anat_enc_[4] = add_conv("anat.bott", 4 * C, 4 * C, 3, 1, 1, true);
    anat_up_[0] = add_conv("anat.up3", 8 * C, 4 * C, 3, 1, 1, true);
    anat_up_[1] = add_conv("anat.up2", 8 * C, 2 * C, 3, 1, 1, true);
    anat_up_[2] = add_conv("anat.up1", 4 * C, C, 3, 1, 1, true);
    anat_up_[3] = add_conv("anat.up0", 2 * C, C, 3, 1, 1, true);
    anat_head_ = add_conv("anat.head", C, kAnatomyCh, 1, 1, 0, false);

    // No normalization in the decoder: theta rides in constant channels.
    dec_enc_[0] = add_conv("dec.enc0", kAnatomyCh + kLatentDim, W, 3, 1, 1, false);
    dec_enc_[1] = add_conv("dec.enc1", W, 2 * W, 3, 1, 1, false);
    dec_enc_[2] = add_conv("dec.enc2", 2 * W, 4 * W, 3, 1, 1, false);
    dec_enc_[3] = add_conv("dec.enc3", 4 * W, 4 * W, 3, 1, 1, false);
    dec_enc_[4] = add_conv("dec.bott", 4 * W + kLatentDim, 4 * W, 3, 1, 1, false);
    dec_up_[0] = add_conv("dec.up3", 8 * W, 4 * W, 3, 1, 1, false);
    dec_up_[1] = add_conv("dec.up2", 8 * W, 2 * W, 3, 1, 1, false);
    dec_up_[2] = add_conv("dec.up1", 4 * W, W, 3, 1, 1, false);
    dec_up_[3] = add_conv("dec.up0", 2 * W, W, 3, 1, 1, false);
    dec_head_ = add_conv("dec.head", W, 1, 1, 1, 0, false);

    // Zero padding (mirror=false): intensity signal must survive the norm.
    con_conv_[0] = add_conv("con.c0", 1, C, 9, 2, 4, true, false);
    con_conv_[1] = add_conv("con.c1", C, 2 * C, 3, 2, 1, true, false);
    con_conv_[2] = add_conv("con.c2", 2 * C, 2 * C, 3, 2, 1, true, false);
    con_conv_[3] = add_conv("con.c3", 2 * C, 2 * C, 3, 2, 1, true, false);
    con_fc_w_ = &add_param("con.fc.w", {2 * kLatentDim, 2 * C}, std::sqrt(2.0 / (2 * C)));
    con_fc_b_ = &add_param("con.fc.b", {2 * kLatentDim}, 0.0);

    art_conv_[0] = add_conv("art.c0", 1, C, 3, 1, 1, false, false);
    art_conv_[1] = add_conv("art.c1", 1 + C, C, 3, 1, 1, false, false);
    art_conv_[2] = add_conv("art.c2", 1 + 2 * C, C, 3, 1, 1, false, false);
    art_conv_[3] = add_conv("art.c3", 1 + 3 * C, C, 3, 1, 1, false, false);
    art_fc_w_ = &add_param("art.fc.w", {kLatentDim, C}, std::sqrt(2.0 / C));
    art_fc_b_ = &add_param("art.fc.b", {kLatentDim}, 0.0);

    const double sd_in = std::sqrt(2.0 / (2 * kLatentDim)), sd_d = std::sqrt(2.0 / d);
    key_w1_ = &add_param("key.w1", {d, 2 * kLatentDim}, sd_in);
    key_b1_ = &add_param("key.b1", {d}, 0.0);
    key_w2_ = &add_param("key.w2", {d, d}, sd_d);
    key_b2_ = &add_param("key.b2", {d}, 0.0);
    qry_w1_ = &add_param("qry.w1", {d, 2 * kLatentDim}, sd_in);
    qry_b1_ = &add_param("qry.b1", {d}, 0.0);
    qry_w2_ = &add_param("qry.w2", {d, d}, sd_d);
    qry_b2_ = &add_param("qry.b2", {d}, 0.0);
}

std::vector<Param*> Model::params() {
    std::vector<Param*> out;
    out.reserve(own_.size());
    for (auto& p : own_) out.push_back(p.get());
    return out;
}

std::vector<const Param*> Model::params() const {
    std::vector<const Param*> out;
    out.reserve(own_.size());
    for (auto& p : own_) out.push_back(p.get());
    return out;
}

Param& Model::param(const std::string& name) {
    auto it = index_.find(name);
    MRH_CHECK(it != index_.end(), "unknown parameter " << name);
    return *own_[size_t(it->second)];
}

void Model::zero_grads() {
    for (auto& p : own_) p->zero_grad();
}

Var Model::run_conv(Tape& t, const ConvSpec& c, Var x, bool act) {
    Var y = c.mirror ? t.conv2d(t.sym_pad2d(x, c.pad), t.param(*c.w), t.param(*c.b), c.stride, 0)
                     : t.conv2d(x, t.param(*c.w), t.param(*c.b), c.stride, c.pad);
    if (c.g) y = t.instance_norm(y, t.param(*c.g), t.param(*c.bt));
    if (act) y = t.leaky_relu(y);
    return y;
}

Var Model::unet(Tape& t, Var x, const ConvSpec* enc, const ConvSpec* up, const ConvSpec& head,
                Var* bottleneck_extra) {
    Var e0 = run_conv(t, enc[0], x);
    Var e1 = run_conv(t, enc[1], t.avgpool2(e0));
    Var e2 = run_conv(t, enc[2], t.avgpool2(e1));
    Var e3 = run_conv(t, enc[3], t.avgpool2(e2));
    Var bin = t.avgpool2(e3);
    if (bottleneck_extra) {
        const Tensor& bv = t.val(bin);
        bin = t.concat_ch(bin, t.broadcast_to_hw(*bottleneck_extra, bv.dim(1), bv.dim(2)));
    }
    Var e4 = run_conv(t, enc[4], bin);
    Var u3 = run_conv(t, up[0], t.concat_ch(t.upsample2x(e4), e3));
    Var u2 = run_conv(t, up[1], t.concat_ch(t.upsample2x(u3), e2));
    Var u1 = run_conv(t, up[2], t.concat_ch(t.upsample2x(u2), e1));
    Var u0 = run_conv(t, up[3], t.concat_ch(t.upsample2x(u1), e0));
    return run_conv(t, head, u0, /*act=*/false);
}

Var Model::anatomy_logits(Tape& t, Var x) {
    const Tensor& xv = t.val(x);
    MRH_CHECK(xv.rank() == 3 && xv.dim(0) == 1, "anatomy encoder wants [1,H,W]");
    MRH_CHECK(xv.dim(1) % 16 == 0 && xv.dim(2) % 16 == 0,
              "anatomy encoder dims must be divisible by 16, got " << shape_str(xv.shape));
    return unet(t, x, anat_enc_, anat_up_, anat_head_, nullptr);
}

Var Model::anatomy_rep(Tape& t, Var x, double tau, Rng* gumbel) {
    MRH_CHECK(tau > 0.0, "gumbel temperature must be > 0, got " << tau);
    const Tensor& xv = t.val(x);
    MRH_CHECK(xv.rank() == 3, "anatomy encoder wants [1,H,W]");
    Tensor noise({kAnatomyCh, xv.dim(1), xv.dim(2)});
    if (gumbel)
        for (auto& n : noise.data) n = gumbel->gumbel();
    // Soft samples during training keep the estimator inside the categorical
    // simplex; inference snaps to the hard one-hot vertex.
    return anatomy_rep_given(t, x, tau, noise, /*hard=*/gumbel == nullptr);
}

Var Model::anatomy_rep_given(Tape& t, Var x, double tau, const Tensor& noise, bool hard) {
    MRH_CHECK(tau > 0.0, "gumbel temperature must be > 0, got " << tau);
    return t.gumbel_softmax_ch(anatomy_logits(t, x), noise, tau, hard);
}

std::pair<Var, Var> Model::contrast_posterior(Tape& t, Var x) {
    Var h = x;
    for (const auto& c : con_conv_) h = run_conv(t, c, h);
    Var pooled = t.global_avg_pool(h);
    Var out = t.linear(pooled, t.param(*con_fc_w_), t.param(*con_fc_b_));
    Var mu = t.slice_vec(out, 0, kLatentDim);
    Var logvar = t.clamp(t.slice_vec(out, kLatentDim, kLatentDim), -10.0, 10.0);
    return {mu, logvar};
}

Var Model::sample_theta(Tape& t, Var mu, Var logvar, const Tensor& eps) {
    MRH_CHECK(int(eps.size()) == kLatentDim, "eps must be a latent-dim vector");
    return t.add(mu, t.mul(t.exp_(t.scale(logvar, 0.5)), t.constant(eps)));
}

Var Model::artifact_code(Tape& t, Var x) {
    Var feat = x;  // dense connectivity: each conv sees everything before it
    Var h1 = run_conv(t, art_conv_[0], feat);
    feat = t.concat_ch(feat, h1);
    Var h2 = run_conv(t, art_conv_[1], feat);
    feat = t.concat_ch(feat, h2);
    Var h3 = run_conv(t, art_conv_[2], feat);
    feat = t.concat_ch(feat, h3);
    Var h4 = run_conv(t, art_conv_[3], feat);
    return t.linear(t.global_avg_pool(h4), t.param(*art_fc_w_), t.param(*art_fc_b_));
}

Var Model::decode(Tape& t, Var beta_star, Var theta) {
    const Tensor& bv = t.val(beta_star);
    MRH_CHECK(bv.rank() == 3 && bv.dim(0) == kAnatomyCh,
              "decoder wants [5,H,W] anatomy, got " << shape_str(bv.shape));
    MRH_CHECK(int(t.val(theta).size()) == kLatentDim, "decoder theta must be a 2-vector");
    Var x = t.concat_ch(beta_star, t.broadcast_to_hw(theta, bv.dim(1), bv.dim(2)));
    Var y = unet(t, x, dec_enc_, dec_up_, dec_head_, &theta);
    return t.sigmoid_scaled(y, kClipMax);
}

Var Model::fc_head(Tape& t, Param* w1, Param* b1, Param* w2, Param* b2, Var theta, Var eta) {
    Var in = t.concat_vec(theta, eta);
    Var h = t.leaky_relu(t.linear(in, t.param(*w1), t.param(*b1)));
    return t.linear(h, t.param(*w2), t.param(*b2));
}

Var Model::key_head(Tape& t, Var theta, Var eta) {
    return fc_head(t, key_w1_, key_b1_, key_w2_, key_b2_, theta, eta);
}

Var Model::query_head(Tape& t, Var theta, Var eta) {
    return fc_head(t, qry_w1_, qry_b1_, qry_w2_, qry_b2_, theta, eta);
}

Tensor Model::eval_anatomy(const Tensor& x, double tau, Rng* gumbel) {
    Tape t;
    return t.val(anatomy_rep(t, t.constant(x), tau, gumbel));
}

std::pair<std::vector<double>, std::vector<double>> Model::eval_contrast(const Tensor& x) {
    Tape t;
    auto [mu, lv] = contrast_posterior(t, t.constant(x));
    return {t.val(mu).data, t.val(lv).data};
}

std::vector<double> Model::eval_artifact(const Tensor& x) {
    Tape t;
    return t.val(artifact_code(t, t.constant(x))).data;
}

Tensor Model::eval_decode(const Tensor& beta_star, const std::vector<double>& theta) {
    Tape t;
    return t.val(decode(t, t.constant(beta_star), t.constant(Tensor::vec(theta))));
}

std::vector<double> Model::eval_key(const std::vector<double>& theta,
                                    const std::vector<double>& eta) {
    Tape t;
    return t.val(key_head(t, t.constant(Tensor::vec(theta)), t.constant(Tensor::vec(eta)))).data;
}

std::vector<double> Model::eval_query(const std::vector<double>& theta,
                                      const std::vector<double>& eta) {
    Tape t;
    return t.val(query_head(t, t.constant(Tensor::vec(theta)), t.constant(Tensor::vec(eta)))).data;
}

}  // namespace mrh
