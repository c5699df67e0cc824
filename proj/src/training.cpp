#include "mrh/training.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "mrh/attention.hpp"
#include "mrh/check.hpp"
#include "mrh/checkpoint.hpp"
#include "mrh/nifti.hpp"
#include "mrh/rng.hpp"

namespace mrh {

using ad::Tape;
using ad::Var;

// ---------------------------------------------------------------- config

TrainConfig load_train_config(const std::string& json_path) {
    std::ifstream f(json_path);
    MRH_CHECK(f.good(), "cannot open train config " << json_path);
    nlohmann::json j;
    f >> j;
    const int version = j.value("version", 1);
    MRH_CHECK(version == 1, "unsupported train config version " << version);

    TrainConfig c;
    if (j.contains("model")) {
        const auto& m = j["model"];
        c.model.width = m.value("width", c.model.width);
        c.model.attn_dim = m.value("attn_dim", c.model.attn_dim);
        c.model.init_seed = m.value("init_seed", c.model.init_seed);
    }
    if (j.contains("weights")) {
        const auto& w = j["weights"];
        c.weights.kl = w.value("kl", c.weights.kl);
        c.weights.contr_anat = w.value("contr_anat", c.weights.contr_anat);
        c.weights.contr_artifact = w.value("contr_artifact", c.weights.contr_artifact);
        c.weights.cycle = w.value("cycle", c.weights.cycle);
    }
    c.lr = j.value("lr", c.lr);
    c.steps = j.value("steps", c.steps);
    c.batch = j.value("batch", c.batch);
    c.tau_start = j.value("tau_start", c.tau_start);
    c.tau_end = j.value("tau_end", c.tau_end);
    c.anneal_steps = j.value("anneal_steps", c.anneal_steps);
    c.dropout_p = j.value("dropout_p", c.dropout_p);
    c.inter_site_step_ratio = j.value("inter_site_step_ratio", c.inter_site_step_ratio);
    c.inter_freeze_non_attention =
        j.value("inter_freeze_non_attention", c.inter_freeze_non_attention);
    c.patch = j.value("patch", c.patch);
    c.anat_negatives = j.value("anat_negatives", c.anat_negatives);
    c.anat_locations = j.value("anat_locations", c.anat_locations);
    c.artifact_negatives = j.value("artifact_negatives", c.artifact_negatives);
    c.severity_lo = j.value("severity_lo", c.severity_lo);
    c.severity_hi = j.value("severity_hi", c.severity_hi);
    c.slices_per_volume = j.value("slices_per_volume", c.slices_per_volume);
    c.seed = j.value("seed", c.seed);
    c.val_interval = j.value("val_interval", c.val_interval);
    c.checkpoint_interval = j.value("checkpoint_interval", c.checkpoint_interval);
    return c;
}

void save_train_config(const TrainConfig& c, const std::string& json_path) {
    nlohmann::json j;
    j["version"] = 1;
    j["model"] = {{"width", c.model.width},
                  {"attn_dim", c.model.attn_dim},
                  {"init_seed", c.model.init_seed}};
    j["weights"] = {{"kl", c.weights.kl},
                    {"contr_anat", c.weights.contr_anat},
                    {"contr_artifact", c.weights.contr_artifact},
                    {"cycle", c.weights.cycle}};
    j["lr"] = c.lr;
    j["steps"] = c.steps;
    j["batch"] = c.batch;
    j["tau_start"] = c.tau_start;
    j["tau_end"] = c.tau_end;
    j["anneal_steps"] = c.anneal_steps;
    j["dropout_p"] = c.dropout_p;
    j["inter_site_step_ratio"] = c.inter_site_step_ratio;
    j["inter_freeze_non_attention"] = c.inter_freeze_non_attention;
    j["patch"] = c.patch;
    j["anat_negatives"] = c.anat_negatives;
    j["anat_locations"] = c.anat_locations;
    j["artifact_negatives"] = c.artifact_negatives;
    j["severity_lo"] = c.severity_lo;
    j["severity_hi"] = c.severity_hi;
    j["slices_per_volume"] = c.slices_per_volume;
    j["seed"] = c.seed;
    j["val_interval"] = c.val_interval;
    j["checkpoint_interval"] = c.checkpoint_interval;
    std::ofstream f(json_path);
    MRH_CHECK(f.good(), "cannot write train config " << json_path);
    f << j.dump(2) << "\n";
}

// ---------------------------------------------------------------- optimizer

namespace {

void adam_update(const std::vector<ad::Param*>& ps, AdamState& opt, double lr) {
    ++opt.t;
    const double bc1 = 1.0 - std::pow(opt.beta1, double(opt.t));
    const double bc2 = 1.0 - std::pow(opt.beta2, double(opt.t));
    for (ad::Param* p : ps) {
        for (size_t k = 0; k < p->value.data.size(); ++k) {
            const double g = p->grad.data[k];
            double m = opt.beta1 * p->m.data[k] + (1.0 - opt.beta1) * g;
            double v = opt.beta2 * p->v.data[k] + (1.0 - opt.beta2) * g * g;
            const double step = lr * (m / bc1) / (std::sqrt(v / bc2) + opt.eps);
            // Round values and moments to float32 so checkpoints are
            // lossless and a resumed run is bit-identical.
            p->value.data[k] = double(float(p->value.data[k] - step));
            p->m.data[k] = double(float(m));
            p->v.data[k] = double(float(v));
        }
    }
}

bool is_attention_param(const std::string& name) {
    return name.rfind("key.", 0) == 0 || name.rfind("qry.", 0) == 0;
}

}  // namespace

void adam_step(Model& m, AdamState& opt, double lr) { adam_update(m.params(), opt, lr); }

// ---------------------------------------------------------------- schedule

double tau_at(const TrainConfig& cfg, int step) {
    const int n = cfg.anneal_steps >= 0 ? cfg.anneal_steps : cfg.steps / 2;
    if (n <= 0 || step >= n) return cfg.tau_end;
    if (step < 0) return cfg.tau_start;
    return cfg.tau_start + (cfg.tau_end - cfg.tau_start) * (double(step) / double(n));
}

int pick_target_contrast(Rng& rng, const std::array<bool, 4>& available) {
    int idx[4];
    int n = 0;
    for (int i = 0; i < 4; ++i)
        if (available[i]) idx[n++] = i;
    MRH_CHECK(n > 0, "no contrast available to pick a target from");
    return idx[rng.uniform_int(n)];
}

// ---------------------------------------------------------------- step

namespace {

struct BundleTerms {
    Var recon, kl, contr_anat, contr_artifact, cycle;
};

Var normalized_patch(Tape& t, Var rep, int r, int c, int p) {
    return t.l2_normalize(t.reshape(t.slice_patch(rep, r, c, p, p), {int(kAnatomyCh) * p * p}));
}

// Full objective graph for one source bundle. `inter_target` null means the
// target image is one of the bundle's own contrasts (intra-site); otherwise
// it supplies the target slice from another site. `rng` drives every draw of
// the step in a fixed order, so the step is a pure function of (seed, step).
BundleTerms build_bundle(Tape& t, Model& m, const SourceBundle& b,
                         const SourceBundle* inter_target, const std::vector<Volume>& pool,
                         const TrainConfig& cfg, double tau, Rng& rng, uint64_t triple_seed) {
    std::vector<int> avail;
    for (int i = 0; i < kNumContrasts; ++i)
        if (b.available[i]) avail.push_back(i);
    const int n = int(avail.size());
    MRH_CHECK(n >= 2, "bundle needs >= 2 contrasts");

    const int H = b.slices[size_t(avail[0])].h, W = b.slices[size_t(avail[0])].w;

    // Encode every available source contrast.
    const size_t un = size_t(n);
    std::vector<Var> beta(un), mu(un), lv(un), eta(un), key(un);
    for (int a = 0; a < n; ++a) {
        const SliceImage& s = b.slices[size_t(avail[size_t(a)])];
        MRH_CHECK(s.h == H && s.w == W, "slice grids differ within one bundle");
        Var x = t.constant(slice_to_tensor(s));
        Tensor noise({kAnatomyCh, H, W});
        for (auto& g : noise.data) g = rng.gumbel();
        beta[size_t(a)] = m.anatomy_rep_given(t, x, tau, noise, /*hard=*/false);
        auto post = m.contrast_posterior(t, x);
        mu[size_t(a)] = post.first;
        lv[size_t(a)] = post.second;
        eta[size_t(a)] = m.artifact_code(t, x);
        key[size_t(a)] = m.key_head(t, mu[size_t(a)], eta[size_t(a)]);
    }

    // Target image: own contrast (intra) or a slice from another site.
    Var x_t, mu_t, lv_t, eta_t;
    if (inter_target == nullptr) {
        const int tc = pick_target_contrast(rng, b.available);
        const int a = int(std::find(avail.begin(), avail.end(), tc) - avail.begin());
        x_t = t.constant(slice_to_tensor(b.slices[size_t(tc)]));
        mu_t = mu[size_t(a)];
        lv_t = lv[size_t(a)];
        eta_t = eta[size_t(a)];
    } else {
        const int tc = pick_target_contrast(rng, inter_target->available);
        const SliceImage& ts = inter_target->slices[size_t(tc)];
        MRH_CHECK(ts.h == H && ts.w == W, "target slice grid differs from source grid");
        x_t = t.constant(slice_to_tensor(ts));
        auto post = m.contrast_posterior(t, x_t);
        mu_t = post.first;
        lv_t = post.second;
        eta_t = m.artifact_code(t, x_t);
    }
    Tensor eps({kLatentDim});
    for (auto& e : eps.data) e = rng.normal();
    const Var theta_t = m.sample_theta(t, mu_t, lv_t, eps);
    const Var query = m.query_head(t, theta_t, eta_t);

    // Attention over the surviving sources, fusion, decoding.
    const AvailabilityMask drop = sample_attention_dropout(b.available, rng, cfg.dropout_p);
    std::vector<Var> keys_kept, betas_kept;
    for (int a = 0; a < n; ++a) {
        if (drop[size_t(avail[size_t(a)])]) continue;
        keys_kept.push_back(key[size_t(a)]);
        betas_kept.push_back(beta[size_t(a)]);
    }
    const Var alpha = attention_weights_compact(t, keys_kept, query);
    const Var beta_star = fuse_anatomy_compact(t, betas_kept, alpha);
    const Var x_hat = m.decode(t, beta_star, theta_t);

    BundleTerms out;
    out.recon = t.sum_abs_diff(x_hat, x_t);
    out.kl = t.kl_std_normal(mu_t, lv_t);

    // Anatomy contrastive over sampled patch locations: the eager sampler
    // plans the draw (locations, negative kinds) and the same patches are
    // rebuilt on the tape from the live representations.
    int ai = rng.uniform_int(n);
    int aj = rng.uniform_int(n - 1);
    if (aj >= ai) ++aj;
    // Copies: adding nodes below may reallocate the tape's value storage.
    const Tensor rep_i = t.val(beta[size_t(ai)]);
    const Tensor rep_j = t.val(beta[size_t(aj)]);
    const SliceImage& img_i = b.slices[size_t(avail[size_t(ai)])];
    std::vector<Var> patch_losses;
    patch_losses.reserve(size_t(cfg.anat_locations));
    for (int loc = 0; loc < cfg.anat_locations; ++loc) {
        const PatchTriple tr = sample_anatomy_patches(rep_i, rep_j, img_i, cfg.patch,
                                                      cfg.anat_negatives,
                                                      Rng::mix(triple_seed, 300 + uint64_t(loc)));
        const Var q = normalized_patch(t, beta[size_t(ai)], tr.r, tr.c, cfg.patch);
        const Var p = normalized_patch(t, beta[size_t(aj)], tr.r, tr.c, cfg.patch);
        std::vector<Var> negs;
        negs.reserve(tr.negatives.size());
        for (size_t k = 0; k < tr.negatives.size(); ++k) {
            if (tr.negative_kind[k] == 0) {
                negs.push_back(t.constant(Tensor::vec(tr.negatives[k])));
            } else {
                const Var src = tr.negative_from_j[k] ? beta[size_t(aj)] : beta[size_t(ai)];
                negs.push_back(
                    normalized_patch(t, src, tr.negative_r[k], tr.negative_c[k], cfg.patch));
            }
        }
        patch_losses.push_back(contrastive_loss(t, q, p, negs));
    }
    out.contr_anat = t.mean(t.stack_scalars(patch_losses));

    // Artifact contrastive over slices drawn from the volume pool.
    const ArtifactTriple at = sample_artifact_triplets(pool, cfg.artifact_negatives,
                                                       cfg.severity_lo, cfg.severity_hi,
                                                       Rng::mix(triple_seed, 400));
    auto art_code = [&](const SliceImage& s) {
        return t.l2_normalize(m.artifact_code(t, t.constant(slice_to_tensor(s))));
    };
    const Var aq = art_code(at.query);
    const Var ap = art_code(at.positive);
    std::vector<Var> anegs;
    anegs.reserve(at.negatives.size());
    for (const auto& s : at.negatives) anegs.push_back(art_code(s));
    out.contr_artifact = contrastive_loss(t, aq, ap, anegs);

    out.cycle = cycle_loss(t, m, x_hat, theta_t, eta_t);
    return out;
}

enum class StepMode { Intra, Inter, Eval };

StepOutcome run_batch(Model& m, AdamState* opt, const std::vector<SourceBundle>& batch,
                      const SourceBundle* inter_target, const std::vector<Volume>& pool,
                      const TrainConfig& cfg, uint64_t step, StepMode mode) {
    MRH_CHECK(!batch.empty(), "empty training batch");
    if (inter_target != nullptr)
        for (const auto& b : batch)
            MRH_CHECK(b.site_id != inter_target->site_id,
                      "inter-site step needs a target from a different site (got "
                          << inter_target->site_id << " twice)");

    // Lane 2 keeps validation draws off the training stream at equal step.
    const uint64_t lane = mode == StepMode::Eval ? 2 : 0;
    const uint64_t base = Rng::mix(cfg.seed, step, lane);
    Rng rng(base);
    const double tau = tau_at(cfg, int(step));

    Tape t;
    std::vector<Var> recons, kls, cas, carts, cycs;
    StepOutcome out;
    for (size_t bi = 0; bi < batch.size(); ++bi) {
        const auto& b = batch[bi];
        int n_avail = 0;
        for (bool a : b.available) n_avail += a ? 1 : 0;
        if (n_avail < 2) {
            ++out.skipped;
            continue;
        }
        const BundleTerms bt = build_bundle(t, m, b, inter_target, pool, cfg, tau, rng,
                                            Rng::mix(base, 1000 + bi));
        recons.push_back(bt.recon);
        kls.push_back(bt.kl);
        cas.push_back(bt.contr_anat);
        carts.push_back(bt.contr_artifact);
        cycs.push_back(bt.cycle);
        ++out.used;
    }
    MRH_CHECK(out.used > 0, "no usable bundle in batch: each needs >= 2 contrasts");

    const Var recon = t.mean(t.stack_scalars(recons));
    const Var kl = t.mean(t.stack_scalars(kls));
    const Var ca = t.mean(t.stack_scalars(cas));
    const Var cart = t.mean(t.stack_scalars(carts));
    const Var cyc = t.mean(t.stack_scalars(cycs));
    const Var total = total_loss(t, recon, kl, ca, cart, cyc, cfg.weights);

    out.parts.recon = t.val(recon).data[0];
    out.parts.kl = t.val(kl).data[0];
    out.parts.contr_anat = t.val(ca).data[0];
    out.parts.contr_artifact = t.val(cart).data[0];
    out.parts.cycle = t.val(cyc).data[0];

    if (mode == StepMode::Eval) return out;

    MRH_CHECK(opt != nullptr, "training step needs optimizer state");
    m.zero_grads();
    if (mode == StepMode::Intra) {
        out.applied = t.val(total).data[0];
        t.backward(total);
        adam_update(m.params(), *opt, cfg.lr);
    } else {
        // Cross-site targets have no ground-truth image in the target
        // contrast, so only the cycle term is trusted with gradients.
        const Var applied = t.scale(cyc, cfg.weights.cycle);
        out.applied = t.val(applied).data[0];
        t.backward(applied);
        std::vector<ad::Param*> ps = m.params();
        if (cfg.inter_freeze_non_attention) {
            std::vector<ad::Param*> kept;
            for (ad::Param* p : ps)
                if (is_attention_param(p->name)) kept.push_back(p);
            ps = std::move(kept);
        }
        adam_update(ps, *opt, cfg.lr);
    }
    return out;
}

}  // namespace

StepOutcome train_step_intra(Model& m, AdamState& opt, const std::vector<SourceBundle>& batch,
                             const std::vector<Volume>& artifact_pool, const TrainConfig& cfg,
                             uint64_t step) {
    return run_batch(m, &opt, batch, nullptr, artifact_pool, cfg, step, StepMode::Intra);
}

StepOutcome train_step_inter(Model& m, AdamState& opt, const std::vector<SourceBundle>& batch,
                             const SourceBundle& target, const std::vector<Volume>& artifact_pool,
                             const TrainConfig& cfg, uint64_t step) {
    return run_batch(m, &opt, batch, &target, artifact_pool, cfg, step, StepMode::Inter);
}

StepOutcome eval_step(Model& m, const std::vector<SourceBundle>& batch,
                      const std::vector<Volume>& artifact_pool, const TrainConfig& cfg,
                      uint64_t step) {
    return run_batch(m, nullptr, batch, nullptr, artifact_pool, cfg, step, StepMode::Eval);
}

// ---------------------------------------------------------------- trainer

Trainer::Trainer(const DatasetManifest& manifest, const TrainConfig& cfg)
    : cfg_(cfg), model_(cfg.model) {
    MRH_CHECK(cfg_.slices_per_volume >= 1, "slices_per_volume must be >= 1");
    MRH_CHECK(cfg_.steps >= 1, "steps must be >= 1");
    train_slices_.assign(size_t(cfg_.slices_per_volume), {});
    val_slices_.assign(size_t(cfg_.slices_per_volume), {});

    const std::filesystem::path root(manifest.root);
    for (const auto& s : manifest.subjects) {
        // The evaluation split (traveling subjects) is deliberately never
        // read here: training must not be able to touch held-out data.
        const bool is_train = s.split == "train";
        if (!is_train && s.split != "val") continue;

        std::vector<std::vector<SliceImage>> per_contrast(4);
        std::array<bool, 4> avail{};
        int window = cfg_.slices_per_volume;
        int first_index = 0;
        for (const auto& [c, rel] : s.volumes) {
            Volume v = wm_peak_normalize(load_nifti((root / rel).string()));
            const auto [b0, e0] = center_window(v.nz, cfg_.slices_per_volume);
            auto slices = extract_slices(v, 2, b0, e0);
            const int ci = contrast_index(c);
            if (!avail[0] && !avail[1] && !avail[2] && !avail[3]) first_index = b0;
            avail[size_t(ci)] = true;
            per_contrast[size_t(ci)] = std::move(slices);
            window = std::min(window, e0 - b0);
            if (is_train && v.nz >= 2) pool_.push_back(std::move(v));
        }
        for (int k = 0; k < window; ++k) {
            SourceBundle b;
            b.subject_id = s.subject_id;
            b.site_id = s.site_id;
            b.available = avail;
            b.slice_index = first_index + k;
            for (int ci = 0; ci < 4; ++ci)
                if (avail[size_t(ci)]) b.slices[size_t(ci)] = per_contrast[size_t(ci)][size_t(k)];
            (is_train ? train_slices_ : val_slices_)[size_t(k)].push_back(std::move(b));
        }
        if (is_train && std::find(sites_.begin(), sites_.end(), s.site_id) == sites_.end())
            sites_.push_back(s.site_id);
    }
    while (!train_slices_.empty() && train_slices_.back().empty()) train_slices_.pop_back();
    while (!val_slices_.empty() && val_slices_.back().empty()) val_slices_.pop_back();
    MRH_CHECK(!train_slices_.empty(), "manifest has no usable training subjects");
    MRH_CHECK(pool_.size() >= 2,
              "artifact triplets need >= 2 training volumes with >= 2 slices each");
}

StepOutcome Trainer::run_step(uint64_t step, bool inter) {
    Rng sel(Rng::mix(cfg_.seed, step, 1));
    auto& group = train_slices_[size_t(sel.uniform_int(int(train_slices_.size())))];

    // Batch without replacement (whole group if it is smaller).
    std::vector<int> idx(group.size());
    std::iota(idx.begin(), idx.end(), 0);
    const int nb = std::min<int>(cfg_.batch, int(group.size()));
    for (int i = 0; i < nb; ++i)
        std::swap(idx[size_t(i)], idx[size_t(i + sel.uniform_int(int(group.size()) - i))]);
    std::vector<SourceBundle> batch;
    batch.reserve(size_t(nb));
    for (int i = 0; i < nb; ++i) batch.push_back(group[size_t(idx[size_t(i)])]);

    last_batch_.clear();
    for (const auto& b : batch)
        last_batch_.push_back(b.subject_id + "@" + std::to_string(b.slice_index));

    if (inter) {
        auto& tgroup = train_slices_[size_t(sel.uniform_int(int(train_slices_.size())))];
        std::vector<const SourceBundle*> candidates;
        for (const auto& cand : tgroup) {
            bool clash = false;
            for (const auto& b : batch) clash = clash || b.site_id == cand.site_id;
            int na = 0;
            for (bool a : cand.available) na += a ? 1 : 0;
            if (!clash && na >= 1) candidates.push_back(&cand);
        }
        if (!candidates.empty()) {
            const SourceBundle& tgt = *candidates[size_t(sel.uniform_int(int(candidates.size())))];
            last_batch_.push_back("target:" + tgt.subject_id + "@" +
                                  std::to_string(tgt.slice_index));
            return train_step_inter(model_, opt_, batch, tgt, pool_, cfg_, step);
        }
        // No other site in reach: fall back to an intra-site step.
    }
    return train_step_intra(model_, opt_, batch, pool_, cfg_, step);
}

FitResult Trainer::fit(const std::string& out_dir, const std::string& resume_from) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);

    uint64_t start = 0;
    if (!resume_from.empty()) {
        const CheckpointMeta meta = load_checkpoint(resume_from, model_);
        MRH_CHECK(meta.has_optimizer, "resume needs optimizer state in the checkpoint");
        MRH_CHECK(meta.seed == cfg_.seed, "resume seed mismatch: checkpoint has "
                                              << meta.seed << ", config has " << cfg_.seed);
        MRH_CHECK(meta.step <= uint64_t(cfg_.steps),
                  "checkpoint is already past the configured step count");
        opt_.t = meta.adam_t;
        start = meta.step;
    }
    save_train_config(cfg_, (fs::path(out_dir) / "train_config.json").string());

    FitResult res;
    res.train_log_path = (fs::path(out_dir) / "train_log.csv").string();
    res.val_log_path = (fs::path(out_dir) / "val_log.csv").string();
    const bool fresh = resume_from.empty();
    std::ofstream tlog(res.train_log_path, fresh ? std::ios::trunc : std::ios::app);
    std::ofstream vlog(res.val_log_path, fresh ? std::ios::trunc : std::ios::app);
    MRH_CHECK(tlog.good() && vlog.good(), "cannot open training logs under " << out_dir);
    if (fresh) {
        tlog << "step,recon,kl,contr_anat,contr_artifact,cycle,total\n";
        vlog << "step,recon,kl,contr_anat,contr_artifact,cycle,total\n";
    }
    tlog << std::setprecision(12);
    vlog << std::setprecision(12);

    int period = 0;
    if (cfg_.inter_site_step_ratio > 0.0 && sites_.size() >= 2)
        period = std::max(1, int(std::lround(1.0 / cfg_.inter_site_step_ratio)));

    // Validation runs over every bundle that can actually run.
    std::vector<SourceBundle> val_batch;
    for (const auto& g : val_slices_)
        for (const auto& b : g) {
            int na = 0;
            for (bool a : b.available) na += a ? 1 : 0;
            if (na >= 2) val_batch.push_back(b);
        }

    auto dump_diagnostics = [&](uint64_t step, const LossParts& parts, const std::string& why) {
        nlohmann::json j;
        j["step"] = step + 1;
        j["reason"] = why;
        j["batch"] = last_batch_;
        j["parts"] = {{"recon", parts.recon},
                      {"kl", parts.kl},
                      {"contr_anat", parts.contr_anat},
                      {"contr_artifact", parts.contr_artifact},
                      {"cycle", parts.cycle}};
        std::ofstream f((fs::path(out_dir) / "divergence_dump.json").string());
        f << j.dump(2) << "\n";
    };

    double last_total = 0.0;
    for (uint64_t s = start; s < uint64_t(cfg_.steps); ++s) {
        const bool inter = period > 0 && (s % uint64_t(period)) == uint64_t(period) - 1;
        StepOutcome out;
        try {
            out = run_step(s, inter);
        } catch (const std::exception& e) {
            dump_diagnostics(s, LossParts{}, e.what());
            throw;
        }
        const double total = total_loss(out.parts, cfg_.weights);
        tlog << (s + 1) << ',' << out.parts.recon << ',' << out.parts.kl << ','
             << out.parts.contr_anat << ',' << out.parts.contr_artifact << ',' << out.parts.cycle
             << ',' << total << '\n';
        if (!std::isfinite(total)) {
            dump_diagnostics(s, out.parts, "non-finite training loss");
            MRH_CHECK(false, "non-finite training loss at step "
                                 << (s + 1) << "; diagnostics written to " << out_dir);
        }
        last_total = total;

        if (cfg_.val_interval > 0 && (s + 1) % uint64_t(cfg_.val_interval) == 0 &&
            !val_batch.empty()) {
            const StepOutcome vo = eval_step(model_, val_batch, pool_, cfg_, s);
            vlog << (s + 1) << ',' << vo.parts.recon << ',' << vo.parts.kl << ','
                 << vo.parts.contr_anat << ',' << vo.parts.contr_artifact << ',' << vo.parts.cycle
                 << ',' << total_loss(vo.parts, cfg_.weights) << '\n';
            vlog.flush();
        }

        if (cfg_.checkpoint_interval > 0 && (s + 1) % uint64_t(cfg_.checkpoint_interval) == 0 &&
            (s + 1) < uint64_t(cfg_.steps)) {
            CheckpointMeta meta{s + 1, cfg_.seed, opt_.t, true};
            save_checkpoint((fs::path(out_dir) / ("ckpt_" + std::to_string(s + 1) + ".ckpt"))
                                .string(),
                            model_, meta);
        }
        tlog.flush();
    }

    res.checkpoint_path = (fs::path(out_dir) / "ckpt_final.ckpt").string();
    CheckpointMeta meta{uint64_t(cfg_.steps), cfg_.seed, opt_.t, true};
    save_checkpoint(res.checkpoint_path, model_, meta);
    res.steps_run = int(uint64_t(cfg_.steps) - start);
    res.final_train_total = last_total;
    return res;
}

}  // namespace mrh
