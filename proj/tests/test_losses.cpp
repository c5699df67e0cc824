#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "mrh/losses.hpp"
#include "mrh/phantom.hpp"
#include "mrh/rng.hpp"

using namespace mrh;
using namespace mrh::ad;

namespace {

ModelConfig tiny_cfg(uint64_t seed) {
    ModelConfig cfg;
    cfg.width = 4;
    cfg.init_seed = seed;
    return cfg;
}

Tensor random_field(int ch, int h, int w, uint64_t seed, double lo = 0.1, double hi = 1.0) {
    Tensor t({ch, h, w});
    Rng rng(seed);
    for (auto& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

double vnorm(const std::vector<double>& v) {
    double n = 0.0;
    for (double x : v) n += x * x;
    return std::sqrt(n);
}

}  // namespace

TEST_CASE("contrastive loss: frozen scalar oracles and argument guards") {
    // equal positive and negative similarity -> ln 2
    CHECK(contrastive_loss({1, 0}, {1, 0}, {{1, 0}}) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    // q.pos = 1, q.neg = 0 -> ln(1 + e^{-1})
    CHECK(contrastive_loss({1, 0}, {1, 0}, {{0, 1}}) ==
          doctest::Approx(0.3132616875182228).epsilon(1e-12));
    // saturated positive similarity
    CHECK(contrastive_loss({20, 0}, {1, 0}, {{0, 1}}) < 1e-8);

    CHECK_THROWS(contrastive_loss({1, 0}, {1, 0}, {}));
    CHECK_THROWS(contrastive_loss({1, 0}, {1, 0, 0}, {{0, 1}}));
    CHECK_THROWS(contrastive_loss({1, 0}, {1, 0}, {{0, 1, 0}}));
}

TEST_CASE("contrastive loss: negatives are averaged inside the denominator") {
    const std::vector<double> q{0.6, -0.2, 0.3}, pos{0.1, 0.9, -0.4};
    const std::vector<double> n1{0.5, 0.5, 0.5}, n2{-0.7, 0.2, 0.1};

    // direct evaluation of the printed form, computed a different way
    auto dot = [](const std::vector<double>& a, const std::vector<double>& b) {
        double s = 0;
        for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
        return s;
    };
    const double num = std::exp(dot(q, pos));
    const double den = num + 0.5 * (std::exp(dot(q, n1)) + std::exp(dot(q, n2)));
    CHECK(contrastive_loss(q, pos, {n1, n2}) == doctest::Approx(-std::log(num / den)).epsilon(1e-12));

    // duplicating a negative changes nothing under the 1/N average
    const double one = contrastive_loss(q, pos, {n1});
    const double three = contrastive_loss(q, pos, {n1, n1, n1});
    CHECK(one == doctest::Approx(three).epsilon(1e-12));

    // permutation invariance
    CHECK(contrastive_loss(q, pos, {n1, n2}) ==
          doctest::Approx(contrastive_loss(q, pos, {n2, n1})).epsilon(1e-15));
}

TEST_CASE("contrastive loss: strictly decreasing in the positive similarity") {
    // fixed query and negative, positive rotated toward the query so q.pos
    // rises while q.neg stays put
    const std::vector<double> q{1, 0}, neg{0.3, 0.4};
    double prev = 1e300;
    for (double phi = 1.5; phi >= -1e-9; phi -= 0.1) {
        const std::vector<double> pos{std::cos(phi), std::sin(phi)};
        const double loss = contrastive_loss(q, pos, {neg});
        CHECK(loss < prev);
        prev = loss;
    }
}

TEST_CASE("contrastive loss: tape path matches eager and passes finite differences") {
    Rng rng(501);
    const int d = 4;
    Param q{"q", Tensor({d})}, pos{"pos", Tensor({d})}, n0{"n0", Tensor({d})},
        n1{"n1", Tensor({d})};
    for (Param* p : {&q, &pos, &n0, &n1})
        for (auto& v : p->value.data) v = rng.normal(0.0, 0.8);

    auto build = [&](Tape& t) {
        return contrastive_loss(t, t.param(q), t.param(pos), {t.param(n0), t.param(n1)});
    };
    {
        Tape t;
        const double tape_val = t.val(build(t)).data[0];
        const double eager =
            contrastive_loss(q.value.data, pos.value.data, {n0.value.data, n1.value.data});
        CHECK(tape_val == doctest::Approx(eager).epsilon(1e-12));
    }
    {
        Tape t;
        Var loss = build(t);
        for (Param* p : {&q, &pos, &n0, &n1}) p->zero_grad();
        t.backward(loss);
    }
    const double h = 1e-6;
    for (Param* p : {&q, &pos, &n0, &n1})
        for (int idx = 0; idx < d; ++idx) {
            const double orig = p->value.data[size_t(idx)];
            p->value.data[size_t(idx)] = orig + h;
            Tape tp;
            const double fp = tp.val(build(tp)).data[0];
            p->value.data[size_t(idx)] = orig - h;
            Tape tm;
            const double fm = tm.val(build(tm)).data[0];
            p->value.data[size_t(idx)] = orig;
            const double fd = (fp - fm) / (2.0 * h);
            const double got = p->grad.data[size_t(idx)];
            INFO(p->name, "[", idx, "] analytic ", got, " fd ", fd);
            CHECK(std::abs(got - fd) <= 1e-4 * (1.0 + std::abs(fd)));
        }
}

TEST_CASE("kl divergence to the standard normal: oracles, nonnegativity, tape parity") {
    CHECK(kl_to_standard_normal({0, 0}, {0, 0}) == 0.0);
    CHECK(kl_to_standard_normal({1, 0}, {0, 0}) == doctest::Approx(0.5).epsilon(1e-12));
    // mu = 0, variance 4 in one dim: (4 - ln 4 - 1) / 2
    CHECK(kl_to_standard_normal({0, 0}, {std::log(4.0), 0}) ==
          doctest::Approx(0.8068528194400547).epsilon(1e-9));

    // nonnegative, zero only at the standard normal itself
    for (double mu : {-0.5, 0.0, 0.5})
        for (double lv : {-0.5, 0.0, 0.5}) {
            const double kl = kl_to_standard_normal({mu, 0.0}, {lv, 0.0});
            CHECK(kl >= 0.0);
            if (mu != 0.0 || lv != 0.0) CHECK(kl > 1e-9);
        }

    Tape t;
    Rng rng(502);
    Tensor mu({2}), lv({2});
    for (auto& v : mu.data) v = rng.normal();
    for (auto& v : lv.data) v = rng.normal();
    const double got = t.val(t.kl_std_normal(t.constant(mu), t.constant(lv))).data[0];
    CHECK(got == doctest::Approx(kl_to_standard_normal(mu.data, lv.data)).epsilon(1e-12));
}

TEST_CASE("cycle loss: zero at exact re-encoding, L1 arithmetic, gradients") {
    Model m(tiny_cfg(510));
    const Tensor x_hat = random_field(1, 16, 16, 511, 0.0, 1.2);
    const auto [mu, lv] = m.eval_contrast(x_hat);
    (void)lv;
    const auto eta = m.eval_artifact(x_hat);

    CHECK(cycle_loss(m, x_hat, mu, eta) == 0.0);

    const std::vector<double> theta_off{mu[0] + 0.1, mu[1] - 0.1};
    CHECK(cycle_loss(m, x_hat, theta_off, eta) == doctest::Approx(0.2).epsilon(1e-9));

    Rng rng(512);
    for (int trial = 0; trial < 5; ++trial) {
        const std::vector<double> th{rng.normal(), rng.normal()}, et{rng.normal(), rng.normal()};
        CHECK(cycle_loss(m, x_hat, th, et) >= 0.0);
    }

    // tape parity on offset targets
    const std::vector<double> eta_off{eta[0] - 0.2, eta[1] + 0.3};
    {
        Tape t;
        const double got = t.val(cycle_loss(t, m, t.constant(x_hat),
                                            t.constant(Tensor::vec(theta_off)),
                                            t.constant(Tensor::vec(eta_off))))
                               .data[0];
        CHECK(got == doctest::Approx(cycle_loss(m, x_hat, theta_off, eta_off)).epsilon(1e-12));
    }

    // finite differences through both encoders w.r.t. x_hat pixels
    Tensor x = x_hat;
    auto build = [&](Tape& t) {
        return cycle_loss(t, m, t.constant(x), t.constant(Tensor::vec(theta_off)),
                          t.constant(Tensor::vec(eta_off)));
    };
    Tensor analytic;
    {
        Tape t;
        Var xv = t.constant(x);
        Var loss = cycle_loss(t, m, xv, t.constant(Tensor::vec(theta_off)),
                              t.constant(Tensor::vec(eta_off)));
        t.backward(loss);
        analytic = t.grad_of(xv);
    }
    Rng coord(513);
    const double h = 1e-6;
    for (int k = 0; k < 6; ++k) {
        const size_t idx = size_t(coord.uniform_int(int(x.data.size())));
        const double orig = x.data[idx];
        x.data[idx] = orig + h;
        Tape tp;
        const double fp = tp.val(build(tp)).data[0];
        x.data[idx] = orig - h;
        Tape tm;
        const double fm = tm.val(build(tm)).data[0];
        x.data[idx] = orig;
        const double fd = (fp - fm) / (2.0 * h);
        INFO("pixel ", idx, " analytic ", analytic.data[idx], " fd ", fd);
        CHECK(std::abs(analytic.data[idx] - fd) <= 1e-4 * (1.0 + std::abs(fd)));
    }
}

TEST_CASE("total loss: weighted arithmetic, defaults, linearity") {
    const LossWeights w;
    CHECK(total_loss({1, 1, 1, 1, 1}, w) == doctest::Approx(1.30001).epsilon(1e-12));
    CHECK(total_loss({0, 0, 0, 0, 0}, w) == 0.0);
    CHECK(total_loss({0.7, 123, 55, 9, 4}, LossWeights{0, 0, 0, 0}) == doctest::Approx(0.7));

    // linearity in each slot
    const LossParts base{0.5, 2.0, 1.5, 0.8, 0.3};
    const double L0 = total_loss(base, w);
    LossParts p = base;
    p.kl += 10.0;
    CHECK(total_loss(p, w) - L0 == doctest::Approx(10.0 * w.kl).epsilon(1e-9));
    p = base;
    p.contr_anat += 3.0;
    CHECK(total_loss(p, w) - L0 == doctest::Approx(3.0 * w.contr_anat).epsilon(1e-9));
    p = base;
    p.contr_artifact += 2.0;
    CHECK(total_loss(p, w) - L0 == doctest::Approx(2.0 * w.contr_artifact).epsilon(1e-9));
    p = base;
    p.cycle += 5.0;
    CHECK(total_loss(p, w) - L0 == doctest::Approx(5.0 * w.cycle).epsilon(1e-9));
    p = base;
    p.recon += 1.0;
    CHECK(total_loss(p, w) - L0 == doctest::Approx(1.0).epsilon(1e-9));

    // tape combination matches the eager arithmetic
    Tape t;
    const double got = t.val(total_loss(t, t.constant(Tensor::vec({base.recon})),
                                        t.constant(Tensor::vec({base.kl})),
                                        t.constant(Tensor::vec({base.contr_anat})),
                                        t.constant(Tensor::vec({base.contr_artifact})),
                                        t.constant(Tensor::vec({base.cycle})), w))
                           .data[0];
    CHECK(got == doctest::Approx(L0).epsilon(1e-12));
}

TEST_CASE("anatomy patch sampler: location contract, counts, normalization, reproducibility") {
    const int H = 12, W = 10;
    const Tensor rep_i = random_field(5, H, W, 520);
    const Tensor rep_j = random_field(5, H, W, 521);
    SliceImage x(H, W);
    Rng rng(522);
    for (auto& v : x.pixels) v = float(rng.uniform(0.5, 1.0));

    // 1x1 patch: positive is rep_j at the query location exactly
    PatchTriple t1 = sample_anatomy_patches(rep_i, rep_j, x, 1, 4, 523);
    std::vector<double> expect(5);
    for (int c = 0; c < 5; ++c) expect[size_t(c)] = rep_j.data[size_t((c * H + t1.r) * W + t1.c)];
    double n = vnorm(expect);
    for (int c = 0; c < 5; ++c)
        CHECK(t1.positive[size_t(c)] == doctest::Approx(expect[size_t(c)] / n).epsilon(1e-12));
    // image negative of a 1x1 patch: the pixel replicated across channels,
    // normalized to 1/sqrt(5) each
    REQUIRE(t1.negative_kind.size() == 4);
    CHECK(int(std::count(t1.negative_kind.begin(), t1.negative_kind.end(), 0)) == 2);
    CHECK(int(std::count(t1.negative_kind.begin(), t1.negative_kind.end(), 1)) == 2);
    for (size_t k = 0; k < t1.negatives.size(); ++k) {
        if (t1.negative_kind[k] == 0) {
            for (double v : t1.negatives[k])
                CHECK(v == doctest::Approx(1.0 / std::sqrt(5.0)).epsilon(1e-12));
            CHECK(t1.negative_r[k] == t1.r);
            CHECK(t1.negative_c[k] == t1.c);
        } else {
            CHECK((t1.negative_r[k] != t1.r || t1.negative_c[k] != t1.c));
        }
    }

    // 3x3 patches: everything unit-normalized, default split 4/4
    PatchTriple t3 = sample_anatomy_patches(rep_i, rep_j, x, 3, 8, 524);
    CHECK(vnorm(t3.query) == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(vnorm(t3.positive) == doctest::Approx(1.0).epsilon(1e-6));
    for (const auto& neg : t3.negatives) CHECK(vnorm(neg) == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(int(std::count(t3.negative_kind.begin(), t3.negative_kind.end(), 0)) == 4);
    CHECK(t3.r >= 0);
    CHECK(t3.r <= H - 3);
    CHECK(t3.c >= 0);
    CHECK(t3.c <= W - 3);

    // reproducibility
    PatchTriple a = sample_anatomy_patches(rep_i, rep_j, x, 3, 8, 999);
    PatchTriple b = sample_anatomy_patches(rep_i, rep_j, x, 3, 8, 999);
    CHECK(a.r == b.r);
    CHECK(a.c == b.c);
    CHECK(a.query == b.query);
    CHECK(a.negatives == b.negatives);
    PatchTriple c = sample_anatomy_patches(rep_i, rep_j, x, 3, 8, 1000);
    CHECK((a.r != c.r || a.c != c.c || a.negatives != c.negatives));

    CHECK_THROWS(sample_anatomy_patches(rep_i, rep_j, x, 11, 8, 1));   // taller than grid
    CHECK_THROWS(sample_anatomy_patches(rep_i, rep_j, x, 0, 8, 1));    // degenerate patch
    SliceImage wrong(H + 2, W);
    CHECK_THROWS(sample_anatomy_patches(rep_i, rep_j, wrong, 3, 8, 1));
}

TEST_CASE("artifact triplet sampler: same-volume pairing, even split, augmentation bites") {
    // three small volumes with distinct content
    std::vector<Volume> pool;
    for (int v = 0; v < 3; ++v) {
        Volume vol(20, 18, 4);
        Rng rng(530 + uint64_t(v));
        for (auto& px : vol.voxels) px = float(rng.uniform(0.2 + 0.2 * v, 0.5 + 0.2 * v));
        pool.push_back(std::move(vol));
    }

    const ArtifactTriple t2 = sample_artifact_triplets(pool, 2, 0.3, 0.3, 540);
    CHECK(int(t2.negatives.size()) == 2);
    CHECK(int(std::count(t2.negative_augmented.begin(), t2.negative_augmented.end(), 1)) == 1);
    CHECK(int(std::count(t2.negative_augmented.begin(), t2.negative_augmented.end(), 0)) == 1);

    const ArtifactTriple t4 = sample_artifact_triplets(pool, 4, 0.3, 0.3, 541);
    CHECK(int(std::count(t4.negative_augmented.begin(), t4.negative_augmented.end(), 1)) == 2);

    // query and positive: different slices of the same volume, content matches
    CHECK(t4.query_slice != t4.positive_slice);
    const Volume& qv = pool[size_t(t4.query_volume)];
    const SliceImage q_ref = extract_slices(qv, 2, t4.query_slice, t4.query_slice + 1)[0];
    const SliceImage p_ref = extract_slices(qv, 2, t4.positive_slice, t4.positive_slice + 1)[0];
    CHECK(t4.query.pixels == q_ref.pixels);
    CHECK(t4.positive.pixels == p_ref.pixels);

    for (size_t k = 0; k < t4.negatives.size(); ++k) {
        if (t4.negative_augmented[k]) {
            CHECK(t4.negative_volume[k] == t4.query_volume);
            // augmentation at severity 0.3 visibly changes the slice
            double mse = 0.0;
            for (size_t i = 0; i < t4.query.pixels.size(); ++i) {
                const double d = double(t4.negatives[k].pixels[i]) - double(t4.query.pixels[i]);
                mse += d * d;
            }
            CHECK(mse / double(t4.query.pixels.size()) > 1e-6);
        } else {
            CHECK(t4.negative_volume[k] != t4.query_volume);
            const SliceImage ref = extract_slices(pool[size_t(t4.negative_volume[k])], 2,
                                                  t4.negative_slice[k], t4.negative_slice[k] + 1)[0];
            CHECK(t4.negatives[k].pixels == ref.pixels);
        }
    }

    // reproducibility
    const ArtifactTriple r1 = sample_artifact_triplets(pool, 4, 0.1, 0.5, 77);
    const ArtifactTriple r2 = sample_artifact_triplets(pool, 4, 0.1, 0.5, 77);
    CHECK(r1.query_volume == r2.query_volume);
    CHECK(r1.query.pixels == r2.query.pixels);
    for (size_t k = 0; k < r1.negatives.size(); ++k)
        CHECK(r1.negatives[k].pixels == r2.negatives[k].pixels);

    CHECK_THROWS(sample_artifact_triplets({pool[0]}, 4, 0.1, 0.5, 1));
    CHECK_THROWS(sample_artifact_triplets(pool, 1, 0.1, 0.5, 1));
    CHECK_THROWS(sample_artifact_triplets(pool, 4, 0.5, 0.1, 1));
}
