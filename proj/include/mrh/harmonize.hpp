#pragma once

#include <array>
#include <string>
#include <vector>

#include "mrh/attention.hpp"
#include "mrh/imaging.hpp"
#include "mrh/networks.hpp"
#include "mrh/training.hpp"

namespace mrh {

// Inference is deterministic end to end: posterior means instead of samples,
// hard anatomy maps instead of Gumbel draws, no attention dropout.

struct TargetCodes {
    std::vector<double> theta;  // contrast code, posterior mean
    std::vector<double> eta;    // artifact code
};

// Codes of a target slice; theta is the posterior mean (never sampled).
TargetCodes encode_target(Model& m, const SliceImage& y);

// Volume variant: codes averaged over the center `window` axial slices.
// Thinner volumes use every slice they have (and note it on stderr).
TargetCodes encode_target(Model& m, const Volume& y, int window = 20);

// Mean artifact code over the center slices of every validation-split
// volume: the default eta when the target is a bare theta point with no
// image to take an artifact code from.
std::vector<double> mean_validation_eta(Model& m, const DatasetManifest& manifest,
                                        int per_volume = 5);

struct HarmonizedSlice {
    SliceImage image;
    AttentionWeights alpha{};  // exactly 0 at unavailable contrasts
};

// Hard anatomy map from each available source, attention over the available
// sources against the target codes, fusion, decoding at theta. The returned
// alpha is the fusion weighting, for reporting.
HarmonizedSlice harmonize_slice(Model& m, const SourceBundle& b, const TargetCodes& target);

struct HarmonizeVolumeResult {
    Volume volume;
    std::string mode;  // "axial" or "median3"
    // Fusion weights per axial slice (the axial pass of either mode).
    std::vector<AttentionWeights> axial_alpha;
};

// Sources indexed by contrast (null = missing); all present volumes must
// share one grid. Mode "axial" harmonizes slice-wise along z; "median3"
// runs all three orientations and takes the voxel-wise median.
HarmonizeVolumeResult harmonize_volume(Model& m, const std::array<const Volume*, 4>& sources,
                                       const TargetCodes& target, const std::string& mode);

// Decode one fixed fused anatomy at every theta of an n x n grid spanning
// [lo, hi]^2: entry [i*n + j] uses theta = (grid[i], grid[j]). Contrast-space
// inspection gallery.
std::vector<SliceImage> theta_grid_sample(Model& m, const Tensor& beta_star, double lo, double hi,
                                          int n);

}  // namespace mrh
