#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "mrh/checkpoint.hpp"
#include "mrh/phantom.hpp"
#include "mrh/rng.hpp"
#include "mrh/training.hpp"

using namespace mrh;
namespace fs = std::filesystem;

namespace {

TrainConfig step_cfg(uint64_t seed) {
    TrainConfig c;
    c.model.width = 4;
    c.model.init_seed = seed;
    c.seed = seed;
    c.steps = 200;
    c.anat_locations = 16;
    c.anat_negatives = 4;
    c.artifact_negatives = 2;
    c.slices_per_volume = 2;
    return c;
}

SourceBundle make_bundle(uint64_t anat_seed, const SiteProfile& site, const std::string& subj,
                         const std::vector<ContrastKind>& cs, int z = 0) {
    const TissueMap tm = generate_anatomy(anat_seed, 32, 4);
    SourceBundle b;
    b.subject_id = subj;
    b.site_id = site.site_id;
    b.slice_index = z;
    for (ContrastKind c : cs) {
        b.available[size_t(contrast_index(c))] = true;
        b.slices[size_t(contrast_index(c))] = render_contrast(tm, site, c, z);
    }
    return b;
}

std::vector<Volume> make_pool(uint64_t seed, const SiteProfile& site) {
    std::vector<Volume> pool;
    pool.push_back(render_volume(generate_anatomy(seed, 32, 4), site, ContrastKind::T1w));
    pool.push_back(render_volume(generate_anatomy(seed + 1, 32, 4), site, ContrastKind::T2w));
    return pool;
}

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f.good());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

int count_lines(const std::string& s) {
    int n = 0;
    for (char c : s) n += c == '\n' ? 1 : 0;
    return n;
}

}  // namespace

TEST_CASE("train config: JSON round-trip and defaults for absent fields") {
    const auto dir = fs::temp_directory_path() / "mrh_train_cfg";
    fs::create_directories(dir);

    TrainConfig c;
    c.model.width = 8;
    c.model.attn_dim = 12;
    c.model.init_seed = 999;
    c.weights.kl = 2e-5;
    c.weights.cycle = 0.3;
    c.lr = 5e-4;
    c.steps = 77;
    c.batch = 3;
    c.tau_start = 0.9;
    c.tau_end = 0.4;
    c.anneal_steps = 20;
    c.dropout_p = 0.35;
    c.inter_site_step_ratio = 0.125;
    c.inter_freeze_non_attention = true;
    c.patch = 5;
    c.anat_negatives = 6;
    c.anat_locations = 10;
    c.artifact_negatives = 3;
    c.severity_lo = 0.2;
    c.severity_hi = 0.8;
    c.slices_per_volume = 7;
    c.seed = 4242;
    c.val_interval = 17;
    c.checkpoint_interval = 55;

    const std::string path = (dir / "cfg.json").string();
    save_train_config(c, path);
    const TrainConfig r = load_train_config(path);
    CHECK(r.model.width == 8);
    CHECK(r.model.attn_dim == 12);
    CHECK(r.model.init_seed == 999);
    CHECK(r.weights.kl == doctest::Approx(2e-5).epsilon(1e-15));
    CHECK(r.weights.cycle == doctest::Approx(0.3).epsilon(1e-15));
    CHECK(r.lr == doctest::Approx(5e-4).epsilon(1e-15));
    CHECK(r.steps == 77);
    CHECK(r.batch == 3);
    CHECK(r.tau_start == doctest::Approx(0.9));
    CHECK(r.tau_end == doctest::Approx(0.4));
    CHECK(r.anneal_steps == 20);
    CHECK(r.dropout_p == doctest::Approx(0.35));
    CHECK(r.inter_site_step_ratio == doctest::Approx(0.125));
    CHECK(r.inter_freeze_non_attention == true);
    CHECK(r.patch == 5);
    CHECK(r.anat_negatives == 6);
    CHECK(r.anat_locations == 10);
    CHECK(r.artifact_negatives == 3);
    CHECK(r.severity_lo == doctest::Approx(0.2));
    CHECK(r.severity_hi == doctest::Approx(0.8));
    CHECK(r.slices_per_volume == 7);
    CHECK(r.seed == 4242);
    CHECK(r.val_interval == 17);
    CHECK(r.checkpoint_interval == 55);

    // A sparse file keeps defaults for everything it does not mention.
    const std::string sparse = (dir / "sparse.json").string();
    {
        std::ofstream f(sparse);
        f << "{\"version\": 1, \"steps\": 11}\n";
    }
    const TrainConfig d = load_train_config(sparse);
    const TrainConfig ref;
    CHECK(d.steps == 11);
    CHECK(d.model.width == ref.model.width);
    CHECK(d.lr == ref.lr);
    CHECK(d.weights.kl == ref.weights.kl);
    CHECK(d.dropout_p == ref.dropout_p);
    CHECK(d.seed == ref.seed);

    CHECK_THROWS(load_train_config((dir / "missing.json").string()));
}

TEST_CASE("temperature schedule: linear anneal, then constant, never increasing") {
    TrainConfig c;
    c.steps = 100;  // default anneal runs over the first 50
    c.tau_start = 1.0;
    c.tau_end = 0.5;

    CHECK(tau_at(c, 0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(tau_at(c, 25) == doctest::Approx(0.75).epsilon(1e-12));
    CHECK(tau_at(c, 50) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(tau_at(c, 99) == doctest::Approx(0.5).epsilon(1e-12));

    double prev = std::numeric_limits<double>::infinity();
    for (int s = 0; s < c.steps; ++s) {
        const double tau = tau_at(c, s);
        CHECK(tau <= prev + 1e-15);
        CHECK(tau >= c.tau_end - 1e-15);
        CHECK(tau <= c.tau_start + 1e-15);
        prev = tau;
    }

    c.anneal_steps = 0;  // disable: constant at tau_end
    CHECK(tau_at(c, 0) == doctest::Approx(0.5));

    c.anneal_steps = 10;
    CHECK(tau_at(c, 5) == doctest::Approx(0.75));
    CHECK(tau_at(c, 10) == doctest::Approx(0.5));
}

TEST_CASE("target contrast picker: uniform over the available set") {
    Rng rng(123);

    SUBCASE("full quartet: each contrast near 25% over 10^4 draws") {
        std::array<int, 4> count{};
        for (int i = 0; i < 10000; ++i)
            ++count[size_t(pick_target_contrast(rng, {true, true, true, true}))];
        for (int c = 0; c < 4; ++c) {
            CHECK(count[size_t(c)] > 2300);
            CHECK(count[size_t(c)] < 2700);
        }
    }

    SUBCASE("restricted pool: only available contrasts are picked") {
        std::array<int, 4> count{};
        for (int i = 0; i < 2000; ++i)
            ++count[size_t(pick_target_contrast(rng, {false, true, false, true}))];
        CHECK(count[0] == 0);
        CHECK(count[2] == 0);
        CHECK(count[1] + count[3] == 2000);
        CHECK(count[1] > 800);
        CHECK(count[3] > 800);
    }

    SUBCASE("single contrast is deterministic; empty mask throws") {
        for (int i = 0; i < 10; ++i)
            CHECK(pick_target_contrast(rng, {false, false, false, true}) == 3);
        CHECK_THROWS(pick_target_contrast(rng, {false, false, false, false}));
    }
}

TEST_CASE("optimizer: first-step oracle, float32-canonical state, untouched params frozen") {
    Model m(ModelConfig{4, 16, 51});
    AdamState opt;
    const double lr = 1e-3;

    m.zero_grads();
    ad::Param& p = m.param("key.w1");
    const double before = p.value.data[0];
    p.grad.data[0] = 0.5;
    const double other_before = m.param("dec.enc0.w").value.data[0];

    adam_step(m, opt, lr);
    CHECK(opt.t == 1);

    // With zero moments, the bias-corrected first step is lr * g / (|g| + eps).
    const double want = before - lr * 0.5 / (0.5 + 1e-8);
    CHECK(p.value.data[0] == doctest::Approx(want).epsilon(1e-6));
    CHECK(p.value.data[0] == double(float(p.value.data[0])));
    CHECK(p.m.data[0] == double(float(0.1 * 0.5)));
    CHECK(p.v.data[0] == double(float(0.001 * 0.25)));

    // zero gradient + zero moments -> exactly zero movement
    CHECK(m.param("dec.enc0.w").value.data[0] == other_before);

    // After noisy steps, every stored value/moment is float32-representable.
    Rng rng(7);
    for (int s = 0; s < 3; ++s) {
        for (ad::Param* q : m.params())
            for (auto& g : q->grad.data) g = rng.normal(0.0, 0.01);
        adam_step(m, opt, lr);
    }
    CHECK(opt.t == 4);
    for (const ad::Param* q : m.params()) {
        for (double x : q->value.data) CHECK(x == double(float(x)));
        for (double x : q->m.data) CHECK(x == double(float(x)));
        for (double x : q->v.data) CHECK(x == double(float(x)));
    }
}

TEST_CASE("intra-site step: finite parts, loss trends down, bit-identical replays") {
    const SiteProfile site = make_site_profile("A", 0);
    const std::vector<SourceBundle> batch = {
        make_bundle(11, site, "s1", {ContrastKind::T1w, ContrastKind::T2w}, 1)};
    const std::vector<Volume> pool = make_pool(21, site);
    const TrainConfig cfg = step_cfg(303);

    SUBCASE("loss decreases over 200 steps") {
        Model m(cfg.model);
        AdamState opt;
        std::vector<double> totals;
        for (int s = 0; s < cfg.steps; ++s) {
            const StepOutcome out = train_step_intra(m, opt, batch, pool, cfg, uint64_t(s));
            CHECK(out.used == 1);
            CHECK(out.skipped == 0);
            CHECK(std::isfinite(out.parts.recon));
            CHECK(std::isfinite(out.parts.kl));
            CHECK(std::isfinite(out.parts.contr_anat));
            CHECK(std::isfinite(out.parts.contr_artifact));
            CHECK(std::isfinite(out.parts.cycle));
            totals.push_back(total_loss(out.parts, cfg.weights));
        }
        double head = 0.0, tail = 0.0;
        for (int s = 0; s < 50; ++s) head += totals[size_t(s)];
        for (int s = cfg.steps - 50; s < cfg.steps; ++s) tail += totals[size_t(s)];
        CHECK(tail / 50.0 < head / 50.0);
    }

    SUBCASE("two runs from the same seed match bit for bit") {
        Model m1(cfg.model), m2(cfg.model);
        AdamState o1, o2;
        for (int s = 0; s < 6; ++s) {
            const StepOutcome a = train_step_intra(m1, o1, batch, pool, cfg, uint64_t(s));
            const StepOutcome b = train_step_intra(m2, o2, batch, pool, cfg, uint64_t(s));
            CHECK(a.applied == b.applied);
            CHECK(a.parts.recon == b.parts.recon);
            CHECK(a.parts.cycle == b.parts.cycle);
        }
        const auto ps1 = m1.params();
        const auto ps2 = m2.params();
        REQUIRE(ps1.size() == ps2.size());
        for (size_t i = 0; i < ps1.size(); ++i)
            for (size_t k = 0; k < ps1[i]->value.data.size(); ++k)
                CHECK(ps1[i]->value.data[k] == ps2[i]->value.data[k]);
    }

    SUBCASE("bundles with fewer than two contrasts are skipped, not fatal") {
        Model m(cfg.model);
        AdamState opt;
        std::vector<SourceBundle> mixed = batch;
        mixed.push_back(make_bundle(12, site, "s2", {ContrastKind::FLAIR}, 0));
        const StepOutcome out = train_step_intra(m, opt, mixed, pool, cfg, 0);
        CHECK(out.used == 1);
        CHECK(out.skipped == 1);

        const std::vector<SourceBundle> only_bad = {
            make_bundle(13, site, "s3", {ContrastKind::T1w}, 0)};
        CHECK_THROWS(train_step_intra(m, opt, only_bad, pool, cfg, 0));
    }

    SUBCASE("evaluation step leaves the model untouched") {
        Model m(cfg.model);
        const auto snapshot = [&] {
            std::vector<double> v;
            for (const ad::Param* p : m.params())
                v.insert(v.end(), p->value.data.begin(), p->value.data.end());
            return v;
        };
        const std::vector<double> before = snapshot();
        const StepOutcome out = eval_step(m, batch, pool, cfg, 5);
        CHECK(out.used == 1);
        CHECK(std::isfinite(total_loss(out.parts, cfg.weights)));
        CHECK(snapshot() == before);

        // and it is reproducible
        const StepOutcome again = eval_step(m, batch, pool, cfg, 5);
        CHECK(again.parts.recon == out.parts.recon);
        CHECK(again.parts.cycle == out.parts.cycle);
    }
}

TEST_CASE("inter-site step: cycle-only gradients, site guard, attention-only freeze switch") {
    const SiteProfile site_a = make_site_profile("A", 0);
    const SiteProfile site_b = make_site_profile("B", 1);
    const std::vector<SourceBundle> batch = {
        make_bundle(31, site_a, "sa", {ContrastKind::T1w, ContrastKind::T2w, ContrastKind::PDw},
                    1)};
    const SourceBundle target =
        make_bundle(32, site_b, "sb", {ContrastKind::T1w, ContrastKind::FLAIR}, 2);
    const std::vector<Volume> pool = make_pool(41, site_a);
    TrainConfig cfg = step_cfg(404);

    SUBCASE("applied loss is exactly the weighted cycle part") {
        Model m(cfg.model);
        AdamState opt;
        const StepOutcome out = train_step_inter(m, opt, batch, target, pool, cfg, 3);
        CHECK(out.used == 1);
        CHECK(out.applied ==
              doctest::Approx(cfg.weights.cycle * out.parts.cycle).epsilon(1e-12));
        // the other parts are still reported for the log
        CHECK(std::isfinite(out.parts.recon));
        CHECK(out.parts.recon > 0.0);
    }

    SUBCASE("a target from the same site is rejected") {
        Model m(cfg.model);
        AdamState opt;
        const SourceBundle same_site =
            make_bundle(33, site_a, "sc", {ContrastKind::T1w, ContrastKind::T2w}, 0);
        CHECK_THROWS(train_step_inter(m, opt, batch, same_site, pool, cfg, 0));
    }

    SUBCASE("freeze switch restricts the update to key/query heads") {
        cfg.inter_freeze_non_attention = true;
        Model m(cfg.model);
        AdamState opt;
        std::vector<std::vector<double>> before;
        for (const ad::Param* p : m.params()) before.push_back(p->value.data);

        train_step_inter(m, opt, batch, target, pool, cfg, 3);

        const auto ps = m.params();
        bool attention_moved = false;
        for (size_t i = 0; i < ps.size(); ++i) {
            const bool is_attn = ps[i]->name.rfind("key.", 0) == 0 ||
                                 ps[i]->name.rfind("qry.", 0) == 0;
            if (is_attn) {
                for (size_t k = 0; k < before[i].size(); ++k)
                    attention_moved = attention_moved || ps[i]->value.data[k] != before[i][k];
            } else {
                for (size_t k = 0; k < before[i].size(); ++k)
                    CHECK(ps[i]->value.data[k] == before[i][k]);
            }
        }
        CHECK(attention_moved);
    }

    SUBCASE("without the freeze, the cycle gradient reaches the other networks") {
        cfg.inter_freeze_non_attention = false;
        Model m(cfg.model);
        AdamState opt;
        const std::vector<double> dec_before = m.param("dec.enc0.w").value.data;
        const std::vector<double> anat_before = m.param("anat.enc0.w").value.data;

        train_step_inter(m, opt, batch, target, pool, cfg, 3);

        CHECK(m.param("dec.enc0.w").value.data != dec_before);
        CHECK(m.param("anat.enc0.w").value.data != anat_before);
    }
}

TEST_CASE("trainer: preload, fit, logs, checkpoints, and bit-exact resume") {
    const auto root = fs::temp_directory_path() / "mrh_trainer_ds";
    fs::remove_all(root);
    const std::vector<SiteProfile> sites = {make_site_profile("A", 0), make_site_profile("B", 1)};
    DatasetOptions dopt;
    dopt.subjects_per_site = 2;  // 1 train + 1 val per site
    dopt.val_per_site = 1;
    dopt.grid = 32;
    dopt.depth = 4;
    dopt.seed = 9;
    const DatasetManifest manifest = make_dataset(sites, dopt, (root / "data").string());

    TrainConfig cfg = step_cfg(505);
    cfg.steps = 6;
    // Pinned explicitly: the default anneal horizon is derived from `steps`,
    // so runs that are meant to continue each other must share it.
    cfg.anneal_steps = 3;
    cfg.val_interval = 3;
    cfg.checkpoint_interval = 4;
    cfg.anat_locations = 8;

    SUBCASE("preloading groups bundles by slice and pools training volumes") {
        Trainer t(manifest, cfg);
        REQUIRE(t.n_slices() == 2);
        CHECK(t.train_bundles(0).size() == 2);  // one training subject per site
        CHECK(t.train_bundles(1).size() == 2);
        for (const auto& b : t.train_bundles(0)) {
            CHECK(b.available == std::array<bool, 4>{true, true, true, true});
            CHECK(b.slices[0].h == 32);
            CHECK(b.slices[0].w == 32);
        }
        CHECK(t.artifact_pool().size() == 8);  // 2 train subjects x 4 contrasts
    }

    SUBCASE("fit writes logs with the fixed columns, checkpoints, and the config") {
        Trainer t(manifest, cfg);
        const FitResult res = t.fit((root / "run").string());
        CHECK(res.steps_run == 6);
        CHECK(std::isfinite(res.final_train_total));

        const std::string tlog = read_file(res.train_log_path);
        CHECK(tlog.rfind("step,recon,kl,contr_anat,contr_artifact,cycle,total\n", 0) == 0);
        CHECK(count_lines(tlog) == 7);  // header + 6 steps

        const std::string vlog = read_file(res.val_log_path);
        CHECK(vlog.rfind("step,recon,kl,contr_anat,contr_artifact,cycle,total\n", 0) == 0);
        CHECK(count_lines(vlog) == 3);  // header + steps 3 and 6

        CHECK(fs::exists(root / "run" / "ckpt_4.ckpt"));
        CHECK(fs::exists(res.checkpoint_path));
        CHECK(fs::exists(root / "run" / "train_config.json"));

        const CheckpointHeader h = peek_checkpoint(res.checkpoint_path);
        CHECK(h.meta.step == 6);
        CHECK(h.meta.seed == cfg.seed);
        CHECK(h.meta.has_optimizer);
    }

    SUBCASE("a straight run and a checkpoint-resumed run produce identical checkpoints") {
        Trainer full(manifest, cfg);
        const FitResult rf = full.fit((root / "full").string());

        TrainConfig half = cfg;
        half.steps = 3;
        half.checkpoint_interval = 0;
        Trainer first(manifest, half);
        const FitResult r1 = first.fit((root / "half").string());
        CHECK(r1.steps_run == 3);

        Trainer second(manifest, cfg);  // fresh model, full step count
        const FitResult r2 = second.fit((root / "resumed").string(), r1.checkpoint_path);
        CHECK(r2.steps_run == 3);

        CHECK(read_file(rf.checkpoint_path) == read_file(r2.checkpoint_path));
    }

    SUBCASE("a wrong-seed resume is rejected") {
        TrainConfig half = cfg;
        half.steps = 3;
        Trainer first(manifest, half);
        const FitResult r1 = first.fit((root / "wrongseed_a").string());

        TrainConfig other = cfg;
        other.seed = cfg.seed + 1;
        Trainer second(manifest, other);
        CHECK_THROWS(second.fit((root / "wrongseed_b").string(), r1.checkpoint_path));
    }
}

TEST_CASE("trainer: evaluation-split volumes are never opened") {
    const auto root = fs::temp_directory_path() / "mrh_trainer_eval_guard";
    fs::remove_all(root);
    const std::vector<SiteProfile> sites = {make_site_profile("A", 0), make_site_profile("B", 2)};
    DatasetOptions dopt;
    dopt.subjects_per_site = 2;
    dopt.val_per_site = 1;
    dopt.traveling = 1;
    dopt.grid = 32;
    dopt.depth = 4;
    dopt.seed = 10;
    const DatasetManifest manifest = make_dataset(sites, dopt, (root / "data").string());

    // Corrupt every eval-split volume on disk: if training ever opened one,
    // the NIfTI reader would throw.
    int corrupted = 0;
    for (const auto& s : manifest.subjects) {
        if (s.split != "eval") continue;
        for (const auto& [c, rel] : s.volumes) {
            std::ofstream f((fs::path(manifest.root) / rel).string(),
                            std::ios::trunc | std::ios::binary);
            f << "not a volume";
            ++corrupted;
        }
    }
    REQUIRE(corrupted > 0);

    TrainConfig cfg = step_cfg(606);
    cfg.steps = 2;
    cfg.val_interval = 1;
    cfg.checkpoint_interval = 0;
    cfg.anat_locations = 4;

    Trainer t(manifest, cfg);
    CHECK_NOTHROW(t.fit((root / "run").string()));
}

TEST_CASE("trainer: a non-finite loss aborts with a diagnostic dump") {
    const auto root = fs::temp_directory_path() / "mrh_trainer_nan";
    fs::remove_all(root);
    const std::vector<SiteProfile> sites = {make_site_profile("A", 0), make_site_profile("B", 1)};
    DatasetOptions dopt;
    dopt.subjects_per_site = 2;
    dopt.val_per_site = 1;
    dopt.grid = 32;
    dopt.depth = 4;
    dopt.seed = 11;
    const DatasetManifest manifest = make_dataset(sites, dopt, (root / "data").string());

    TrainConfig cfg = step_cfg(707);
    cfg.steps = 3;
    cfg.slices_per_volume = 1;
    cfg.checkpoint_interval = 0;
    cfg.anat_locations = 4;

    Trainer t(manifest, cfg);
    for (auto& b : t.train_bundles(0))
        for (int c = 0; c < 4; ++c)
            if (b.available[size_t(c)])
                for (auto& px : b.slices[size_t(c)].pixels)
                    px = std::numeric_limits<float>::quiet_NaN();

    CHECK_THROWS_AS(t.fit((root / "run").string()), std::runtime_error);
    CHECK(fs::exists(root / "run" / "divergence_dump.json"));
}
