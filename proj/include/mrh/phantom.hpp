#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "mrh/imaging.hpp"

namespace mrh {

enum class TissueLabel : uint8_t { Background = 0, CSF = 1, GM = 2, WM = 3, Lesion = 4 };
inline constexpr int kNumTissues = 5;

// Label geometry plus a smooth multiplicative "biology" field in [0.9, 1.1].
// Shared across sites for one subject, so cross-site pairs differ only by
// site effects.
struct TissueMap {
    int nx = 0, ny = 0, nz = 0;
    std::vector<uint8_t> labels;
    std::vector<float> smooth_field;

    TissueMap() = default;
    TissueMap(int x, int y, int z)
        : nx(x), ny(y), nz(z), labels(size_t(x) * y * z, 0), smooth_field(size_t(x) * y * z, 1.0f) {}
    size_t index(int x, int y, int z) const { return (size_t(z) * ny + y) * nx + x; }
    uint8_t label(int x, int y, int z) const { return labels[index(x, y, z)]; }
    uint8_t& label(int x, int y, int z) { return labels[index(x, y, z)]; }
};

// Site effect: a strictly increasing piecewise-linear intensity transfer per
// contrast, plus default degradation levels.
struct SiteProfile {
    std::string site_id;
    // breakpoints (canonical intensity -> rendered intensity), ascending
    std::array<std::vector<std::pair<double, double>>, kNumContrasts> transfer;
    double noise_sigma = 0.01;
    double motion_severity = 0.0;
};

// Canonical (site-free) tissue intensity for a contrast.
double canonical_level(ContrastKind c, TissueLabel t);

// variant 0 is the identity site; higher variants apply distinct monotone
// gamma-style curves with per-contrast spread.
SiteProfile make_site_profile(const std::string& site_id, int variant);

double apply_transfer(const SiteProfile& s, ContrastKind c, double canonical);

// Deterministic head phantom: CSF/GM/WM shells from a perturbed ellipse,
// two ventricle lobes, 1..5 lesion balls restricted to WM.
TissueMap generate_anatomy(uint64_t seed, int grid, int depth = 1);

SliceImage render_contrast(const TissueMap& t, const SiteProfile& s, ContrastKind c, int z = 0);
Volume render_volume(const TissueMap& t, const SiteProfile& s, ContrastKind c);

SliceImage add_noise(const SliceImage& x, double sigma, uint64_t seed);
Volume add_noise(const Volume& v, double sigma, uint64_t seed);

// Random phase perturbation of a fraction `severity` of frequency-space
// lines, inverse transform, magnitude. The _raw variant skips the final
// intensity clip (used by the energy-conservation test).
SliceImage add_motion(const SliceImage& x, double severity, uint64_t seed);
SliceImage add_motion_raw(const SliceImage& x, double severity, uint64_t seed);
Volume add_motion(const Volume& v, double severity, uint64_t seed);

struct DatasetOptions {
    int subjects_per_site = 4;
    int val_per_site = 1;      // taken from the tail of each site's subjects
    int traveling = 0;         // subjects imaged at every site (eval split)
    int grid = 32;
    int depth = 24;
    std::string missing = "none";  // none | drop-flair:<site_id> | random:<p>
    uint64_t seed = 1;
};

// Writes volumes + manifest.json under out_dir and returns the manifest.
DatasetManifest make_dataset(const std::vector<SiteProfile>& sites, const DatasetOptions& opt,
                             const std::string& out_dir);

}  // namespace mrh
