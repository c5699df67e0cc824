#pragma once

#include <cstdint>
#include <vector>

#include "mrh/imaging.hpp"
#include "mrh/networks.hpp"
#include "mrh/tape.hpp"
#include "mrh/tensor.hpp"

namespace mrh {

// One anatomy-patch contrastive example: flattened, L2-normalized patch
// vectors (a zero patch stays zero rather than dividing by ~0). All the
// same length: image patches are replicated across the anatomy channels.
struct PatchTriple {
    std::vector<double> query;
    std::vector<double> positive;
    std::vector<std::vector<double>> negatives;
    // provenance for tests and for rebuilding the same patches on a tape
    int r = 0, c = 0;                    // query patch top-left
    std::vector<uint8_t> negative_kind;  // 0 = image at query loc, 1 = rep at other loc
    std::vector<uint8_t> negative_from_j;  // for kind 1: which rep the patch came from
    std::vector<int> negative_r, negative_c;
};

// One artifact contrastive example: query/positive are different slices of
// the same volume; each negative is either an artifact-augmented copy of
// the query or a slice from a different volume.
struct ArtifactTriple {
    SliceImage query;
    SliceImage positive;
    std::vector<SliceImage> negatives;
    // provenance
    int query_volume = 0;
    int query_slice = 0;
    int positive_slice = 0;
    std::vector<int> negative_volume;        // == query_volume for augmented entries
    std::vector<int> negative_slice;         // == query_slice for augmented entries
    std::vector<uint8_t> negative_augmented; // 1 = augmented copy of the query
};

struct LossWeights {
    double kl = 1e-5;
    double contr_anat = 0.1;
    double contr_artifact = 0.1;
    double cycle = 0.1;
};

struct LossParts {
    double recon = 0.0;
    double kl = 0.0;
    double contr_anat = 0.0;
    double contr_artifact = 0.0;
    double cycle = 0.0;
};

// -log[ exp(q.pos) / (exp(q.pos) + (1/N) sum_n exp(q.neg_n)) ], the printed
// form with the negatives' exponentials averaged inside the denominator, so
// duplicating a negative leaves the loss unchanged. Computed as
// log1p(mean_n exp(q.neg_n - q.pos)), stable for any dot magnitudes.
double contrastive_loss(const std::vector<double>& q, const std::vector<double>& pos,
                        const std::vector<std::vector<double>>& negs);
ad::Var contrastive_loss(ad::Tape& t, ad::Var q, ad::Var pos, const std::vector<ad::Var>& negs);

// 0.5 * sum_i (mu_i^2 + e^{lv_i} - lv_i - 1): KL(N(mu, diag e^lv) || N(0, I)).
double kl_to_standard_normal(const std::vector<double>& mu, const std::vector<double>& logvar);

// Query patch from rep_i at a random location, positive from rep_j at the
// same location, negatives split evenly between the source image at the
// query location (replicated across channels) and the reps at random other
// locations. All flattened and L2-normalized.
PatchTriple sample_anatomy_patches(const Tensor& rep_i, const Tensor& rep_j,
                                   const SliceImage& x_i, int patch, int n_neg, uint64_t seed);

// Query and positive are two different axial slices of one pool volume;
// negatives split evenly between artifact-augmented copies of the query
// (noise with sigma = 0.1 * severity, or frequency-space motion at that
// severity, drawn from [sev_lo, sev_hi]) and slices of other volumes.
ArtifactTriple sample_artifact_triplets(const std::vector<Volume>& pool, int m_neg,
                                        double sev_lo, double sev_hi, uint64_t seed);

// L1 distance between the re-encoded codes of x_hat and the targets; the
// contrast code is re-encoded as the posterior mean, so the loss is
// deterministic.
double cycle_loss(Model& m, const Tensor& x_hat, const std::vector<double>& theta_t,
                  const std::vector<double>& eta_t);
ad::Var cycle_loss(ad::Tape& t, Model& m, ad::Var x_hat, ad::Var theta_t, ad::Var eta_t);

// recon + kl_w * kl + ... ; reconstruction enters unweighted.
double total_loss(const LossParts& parts, const LossWeights& w);
ad::Var total_loss(ad::Tape& t, ad::Var recon, ad::Var kl, ad::Var contr_anat,
                   ad::Var contr_artifact, ad::Var cycle, const LossWeights& w);

}  // namespace mrh
