#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace mrh {

// Stable contrast ordering; used everywhere attention weights and keys are
// indexed.
enum class ContrastKind : int { T1w = 1, T2w = 2, PDw = 3, FLAIR = 4 };

inline constexpr int kNumContrasts = 4;
inline constexpr std::array<ContrastKind, 4> kAllContrasts = {
    ContrastKind::T1w, ContrastKind::T2w, ContrastKind::PDw, ContrastKind::FLAIR};

// 0-based index for array storage.
inline int contrast_index(ContrastKind c) { return static_cast<int>(c) - 1; }

const char* contrast_name(ContrastKind c);  // "t1", "t2", "pd", "flair"
std::optional<ContrastKind> contrast_from_name(const std::string& name);

// Upper bound on normalized intensities (decoder output range).
inline constexpr double kClipMax = 1.5;

// 3D image; voxels stored x-fastest (NIfTI disk order).
struct Volume {
    int nx = 0, ny = 0, nz = 0;
    std::vector<float> voxels;
    std::array<double, 3> spacing = {1.0, 1.0, 1.0};
    std::array<double, 16> affine = {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1};
    ContrastKind contrast = ContrastKind::T1w;
    std::string site_id;

    Volume() = default;
    Volume(int x, int y, int z) : nx(x), ny(y), nz(z), voxels(size_t(x) * y * z, 0.0f) {}

    size_t index(int x, int y, int z) const {
        return (size_t(z) * ny + y) * nx + x;
    }
    float& at(int x, int y, int z) { return voxels[index(x, y, z)]; }
    float at(int x, int y, int z) const { return voxels[index(x, y, z)]; }
    int64_t size() const { return int64_t(voxels.size()); }
};

// 2D slice extracted from a volume, padded up to the training grid.
struct SliceImage {
    int h = 0, w = 0;
    std::vector<float> pixels;  // row-major [h][w]
    ContrastKind contrast = ContrastKind::T1w;
    // provenance
    std::string volume_id;
    int axis = 2;     // 0=x, 1=y, 2=z (axial)
    int index = 0;    // slice index along axis
    int orig_h = 0, orig_w = 0;  // extent before zero padding

    SliceImage() = default;
    SliceImage(int hh, int ww) : h(hh), w(ww), pixels(size_t(hh) * ww, 0.0f) {}
    float& at(int y, int x) { return pixels[size_t(y) * w + x]; }
    float at(int y, int x) const { return pixels[size_t(y) * w + x]; }
    bool padded() const { return orig_h != h || orig_w != w; }
};

struct SubjectEntry {
    std::string subject_id;
    std::string site_id;
    std::string split;  // "train" or "val" or "eval"
    bool traveling = false;
    std::map<ContrastKind, std::string> volumes;  // manifest-relative paths
};

struct DatasetManifest {
    int version = 1;
    std::string root;  // directory the relative paths resolve against
    std::vector<SubjectEntry> subjects;
};

// Histogram mode estimation: kernel density over the foreground (> 5% of
// max), Silverman bandwidth, highest-intensity local mode holding >= 10% of
// the mass. Exposed separately so the synthetic-histogram oracle can test it.
double estimate_wm_peak(const std::vector<float>& values);

// Scale so the white-matter peak lands at 1.0, then clip to [0, kClipMax].
Volume wm_peak_normalize(const Volume& v);

// Slices along `axis` for indices [begin, end), zero-padded up to at least
// 32x32 and a multiple of 16 in both directions (original data kept at the
// top-left, original extent recorded in provenance).
std::vector<SliceImage> extract_slices(const Volume& v, int axis, int begin, int end);

// Centered index window of length `count` (all slices if n < count).
std::pair<int, int> center_window(int n, int count);

DatasetManifest load_manifest(const std::string& path);
void save_manifest(const DatasetManifest& m, const std::string& path);
// Throws if a referenced file is missing or a training subject has < 2
// contrasts.
void validate_manifest(const DatasetManifest& m);

}  // namespace mrh
