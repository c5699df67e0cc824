#include "mrh/losses.hpp"

#include <cmath>

#include "mrh/check.hpp"
#include "mrh/phantom.hpp"
#include "mrh/rng.hpp"

namespace mrh {

namespace {

void l2_normalize(std::vector<double>& v) {
    double n2 = 0.0;
    for (double x : v) n2 += x * x;
    const double n = std::sqrt(n2);
    if (n > 1e-12)
        for (double& x : v) x /= n;
}

std::vector<double> rep_patch(const Tensor& rep, int r, int c, int p) {
    const int h = rep.dim(1), w = rep.dim(2);
    std::vector<double> out;
    out.reserve(size_t(rep.dim(0)) * p * p);
    for (int ch = 0; ch < rep.dim(0); ++ch)
        for (int y = r; y < r + p; ++y)
            for (int x = c; x < c + p; ++x) out.push_back(rep.data[size_t((ch * h + y) * w + x)]);
    l2_normalize(out);
    return out;
}

std::vector<double> image_patch(const SliceImage& img, int r, int c, int p, int channels) {
    std::vector<double> out;
    out.reserve(size_t(channels) * p * p);
    for (int ch = 0; ch < channels; ++ch)
        for (int y = r; y < r + p; ++y)
            for (int x = c; x < c + p; ++x) out.push_back(double(img.at(y, x)));
    l2_normalize(out);
    return out;
}

}  // namespace

double contrastive_loss(const std::vector<double>& q, const std::vector<double>& pos,
                        const std::vector<std::vector<double>>& negs) {
    MRH_CHECK(!negs.empty(), "contrastive loss needs at least one negative");
    MRH_CHECK(q.size() == pos.size(), "query/positive length mismatch");
    double s = 0.0;
    for (size_t i = 0; i < q.size(); ++i) s += q[i] * pos[i];
    double acc = 0.0;
    for (const auto& n : negs) {
        MRH_CHECK(n.size() == q.size(), "negative length mismatch");
        double d = 0.0;
        for (size_t i = 0; i < q.size(); ++i) d += q[i] * n[i];
        acc += std::exp(d - s);
    }
    return std::log1p(acc / double(negs.size()));
}

ad::Var contrastive_loss(ad::Tape& t, ad::Var q, ad::Var pos, const std::vector<ad::Var>& negs) {
    MRH_CHECK(!negs.empty(), "contrastive loss needs at least one negative");
    const ad::Var s = t.dot(q, pos);
    std::vector<ad::Var> shifted;
    shifted.reserve(negs.size());
    for (ad::Var n : negs) shifted.push_back(t.sub(t.dot(q, n), s));
    const ad::Var m = t.mean(t.exp_(t.stack_scalars(shifted)));
    return t.log_(t.add_const(m, 1.0));
}

double kl_to_standard_normal(const std::vector<double>& mu, const std::vector<double>& logvar) {
    MRH_CHECK(mu.size() == logvar.size(), "mu/logvar length mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < mu.size(); ++i)
        acc += mu[i] * mu[i] + std::exp(logvar[i]) - logvar[i] - 1.0;
    return 0.5 * acc;
}

PatchTriple sample_anatomy_patches(const Tensor& rep_i, const Tensor& rep_j,
                                   const SliceImage& x_i, int patch, int n_neg, uint64_t seed) {
    MRH_CHECK(rep_i.rank() == 3 && rep_j.rank() == 3, "anatomy reps must be [C,H,W]");
    MRH_CHECK(rep_i.shape == rep_j.shape, "anatomy rep shape mismatch");
    const int ch = rep_i.dim(0), h = rep_i.dim(1), w = rep_i.dim(2);
    MRH_CHECK(x_i.h == h && x_i.w == w, "source image does not match rep grid");
    MRH_CHECK(patch >= 1 && patch <= h && patch <= w,
              "patch " << patch << " does not fit " << h << "x" << w);
    MRH_CHECK(n_neg >= 1, "need at least one negative");

    Rng rng(seed);
    PatchTriple out;
    out.r = rng.uniform_int(h - patch + 1);
    out.c = rng.uniform_int(w - patch + 1);
    out.query = rep_patch(rep_i, out.r, out.c, patch);
    out.positive = rep_patch(rep_j, out.r, out.c, patch);

    const int n_img = n_neg / 2;
    for (int k = 0; k < n_neg; ++k) {
        if (k < n_img) {
            out.negatives.push_back(image_patch(x_i, out.r, out.c, patch, ch));
            out.negative_kind.push_back(0);
            out.negative_from_j.push_back(0);
            out.negative_r.push_back(out.r);
            out.negative_c.push_back(out.c);
        } else {
            int r = out.r, c = out.c;
            while (r == out.r && c == out.c) {
                r = rng.uniform_int(h - patch + 1);
                c = rng.uniform_int(w - patch + 1);
            }
            const bool from_j = (k % 2 != 0);
            out.negatives.push_back(rep_patch(from_j ? rep_j : rep_i, r, c, patch));
            out.negative_kind.push_back(1);
            out.negative_from_j.push_back(from_j ? 1 : 0);
            out.negative_r.push_back(r);
            out.negative_c.push_back(c);
        }
    }
    return out;
}

ArtifactTriple sample_artifact_triplets(const std::vector<Volume>& pool, int m_neg,
                                        double sev_lo, double sev_hi, uint64_t seed) {
    MRH_CHECK(pool.size() >= 2, "artifact triplets need at least two volumes");
    MRH_CHECK(m_neg >= 2, "need at least two negatives");
    MRH_CHECK(sev_lo <= sev_hi && sev_lo >= 0.0, "bad severity range");

    Rng rng(seed);
    ArtifactTriple out;
    out.query_volume = rng.uniform_int(int(pool.size()));
    const Volume& qv = pool[size_t(out.query_volume)];
    MRH_CHECK(qv.nz >= 2, "query volume needs at least two slices");
    out.query_slice = rng.uniform_int(qv.nz);
    out.positive_slice = out.query_slice;
    while (out.positive_slice == out.query_slice) out.positive_slice = rng.uniform_int(qv.nz);
    out.query = extract_slices(qv, 2, out.query_slice, out.query_slice + 1)[0];
    out.positive = extract_slices(qv, 2, out.positive_slice, out.positive_slice + 1)[0];

    const int n_aug = m_neg / 2;
    for (int k = 0; k < m_neg; ++k) {
        if (k < n_aug) {
            const double sev = rng.uniform(sev_lo, sev_hi);
            const uint64_t sub = Rng::mix(seed, 1000 + uint64_t(k));
            SliceImage neg = (rng.uniform() < 0.5) ? add_noise(out.query, 0.1 * sev, sub)
                                                   : add_motion(out.query, sev, sub);
            out.negatives.push_back(std::move(neg));
            out.negative_volume.push_back(out.query_volume);
            out.negative_slice.push_back(out.query_slice);
            out.negative_augmented.push_back(1);
        } else {
            int v = out.query_volume;
            while (v == out.query_volume) v = rng.uniform_int(int(pool.size()));
            const Volume& nv = pool[size_t(v)];
            const int s = rng.uniform_int(nv.nz);
            out.negatives.push_back(extract_slices(nv, 2, s, s + 1)[0]);
            out.negative_volume.push_back(v);
            out.negative_slice.push_back(s);
            out.negative_augmented.push_back(0);
        }
    }
    return out;
}

double cycle_loss(Model& m, const Tensor& x_hat, const std::vector<double>& theta_t,
                  const std::vector<double>& eta_t) {
    const auto [mu, lv] = m.eval_contrast(x_hat);
    (void)lv;
    const auto eta = m.eval_artifact(x_hat);
    MRH_CHECK(mu.size() == theta_t.size() && eta.size() == eta_t.size(),
              "code length mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < mu.size(); ++i) acc += std::abs(mu[i] - theta_t[i]);
    for (size_t i = 0; i < eta.size(); ++i) acc += std::abs(eta[i] - eta_t[i]);
    return acc;
}

ad::Var cycle_loss(ad::Tape& t, Model& m, ad::Var x_hat, ad::Var theta_t, ad::Var eta_t) {
    const auto [mu, lv] = m.contrast_posterior(t, x_hat);
    (void)lv;
    return t.add(t.sum_abs_diff(mu, theta_t), t.sum_abs_diff(m.artifact_code(t, x_hat), eta_t));
}

double total_loss(const LossParts& p, const LossWeights& w) {
    return p.recon + w.kl * p.kl + w.contr_anat * p.contr_anat +
           w.contr_artifact * p.contr_artifact + w.cycle * p.cycle;
}

ad::Var total_loss(ad::Tape& t, ad::Var recon, ad::Var kl, ad::Var contr_anat,
                   ad::Var contr_artifact, ad::Var cycle, const LossWeights& w) {
    ad::Var acc = t.add(recon, t.scale(kl, w.kl));
    acc = t.add(acc, t.scale(contr_anat, w.contr_anat));
    acc = t.add(acc, t.scale(contr_artifact, w.contr_artifact));
    return t.add(acc, t.scale(cycle, w.cycle));
}

}  // namespace mrh
