#include "mrh/attention.hpp"

#include <cmath>

#include "mrh/check.hpp"
#include "mrh/rng.hpp"

namespace mrh {

AttentionWeights softmax_masked(const std::array<double, 4>& logits,
                                const AvailabilityMask& mask) {
    double mx = -1e300;
    int n_avail = 0;
    for (int i = 0; i < 4; ++i)
        if (mask[i]) {
            ++n_avail;
            mx = std::max(mx, logits[i]);
        }
    MRH_CHECK(n_avail > 0, "attention needs at least one available contrast");
    AttentionWeights a{0.0, 0.0, 0.0, 0.0};
    double z = 0.0;
    for (int i = 0; i < 4; ++i)
        if (mask[i]) z += a[i] = std::exp(logits[i] - mx);
    for (int i = 0; i < 4; ++i) a[i] /= z;
    return a;
}

AttentionWeights compute_attention(const std::vector<std::vector<double>>& keys,
                                   const std::vector<double>& query,
                                   const AvailabilityMask& mask) {
    MRH_CHECK(keys.size() == 4, "expected one key slot per contrast, got " << keys.size());
    const size_t d = query.size();
    MRH_CHECK(d > 0, "empty query");
    std::array<double, 4> logits{0.0, 0.0, 0.0, 0.0};
    const double inv_sqrt_d = 1.0 / std::sqrt(double(d));
    for (int i = 0; i < 4; ++i) {
        if (!mask[i]) continue;
        MRH_CHECK(keys[i].size() == d,
                  "key " << i << " has size " << keys[i].size() << ", query has " << d);
        double dp = 0.0;
        for (size_t j = 0; j < d; ++j) {
            MRH_CHECK(std::isfinite(keys[i][j]), "non-finite key entry");
            dp += keys[i][j] * query[j];
        }
        logits[i] = dp * inv_sqrt_d;
    }
    return softmax_masked(logits, mask);
}

AttentionWeights attention_dropout(const AttentionWeights& alpha, const AvailabilityMask& drop) {
    AttentionWeights out{0.0, 0.0, 0.0, 0.0};
    double kept = 0.0;
    for (int i = 0; i < 4; ++i)
        if (!drop[i]) kept += out[i] = alpha[i];
    MRH_CHECK(kept > 0.0, "attention dropout would zero every weight");
    for (int i = 0; i < 4; ++i) out[i] /= kept;
    return out;
}

AvailabilityMask sample_attention_dropout(const AvailabilityMask& available, Rng& rng, double p) {
    AvailabilityMask drop{false, false, false, false};
    int idx[4], n = 0;
    for (int i = 0; i < 4; ++i)
        if (available[i]) idx[n++] = i;
    if (n < 2) return drop;                   // no nonempty proper subset exists
    if (rng.uniform(0.0, 1.0) >= p) return drop;
    // Uniform over the 2^n - 2 nonempty proper subsets of the available set.
    const int subset = 1 + rng.uniform_int((1 << n) - 2);
    for (int j = 0; j < n; ++j)
        if (subset & (1 << j)) drop[idx[j]] = true;
    return drop;
}

Tensor fuse_anatomy(const std::vector<Tensor>& betas, const AttentionWeights& alpha,
                    const AvailabilityMask& mask) {
    size_t bi = 0;
    Tensor out;
    for (int i = 0; i < 4; ++i) {
        if (!mask[i]) {
            MRH_CHECK(alpha[i] == 0.0, "weight " << i << " nonzero but contrast unavailable");
            continue;
        }
        MRH_CHECK(bi < betas.size(), "fewer anatomy reps than available contrasts");
        const Tensor& b = betas[bi++];
        if (out.data.empty()) {
            out = Tensor(b.shape);
        } else {
            MRH_CHECK(b.shape == out.shape, "anatomy rep shape mismatch");
        }
        if (alpha[i] != 0.0)
            for (size_t k = 0; k < out.data.size(); ++k) out.data[k] += alpha[i] * b.data[k];
    }
    MRH_CHECK(bi == betas.size(), "more anatomy reps than available contrasts");
    MRH_CHECK(!out.data.empty(), "no available contrast to fuse");
    return out;
}

ad::Var attention_weights_compact(ad::Tape& t, const std::vector<ad::Var>& keys, ad::Var query) {
    MRH_CHECK(!keys.empty(), "attention needs at least one key");
    const double inv_sqrt_d = 1.0 / std::sqrt(double(t.val(query).size()));
    std::vector<ad::Var> logits;
    logits.reserve(keys.size());
    for (ad::Var k : keys) logits.push_back(t.scale(t.dot(k, query), inv_sqrt_d));
    return t.softmax_vec(t.stack_scalars(logits));
}

ad::Var fuse_anatomy_compact(ad::Tape& t, const std::vector<ad::Var>& betas, ad::Var weights) {
    MRH_CHECK(t.val(weights).size() == betas.size(),
              "weight count " << t.val(weights).size() << " vs " << betas.size() << " reps");
    return t.weighted_sum(betas, weights);
}

}  // namespace mrh
