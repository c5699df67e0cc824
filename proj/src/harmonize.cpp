#include "mrh/harmonize.hpp"

#include <algorithm>
#include <filesystem>
#include <iostream>

#include "mrh/check.hpp"
#include "mrh/nifti.hpp"

namespace mrh {

namespace {

TargetCodes slice_codes(Model& m, const Tensor& x) {
    TargetCodes out;
    out.theta = m.eval_contrast(x).first;
    out.eta = m.eval_artifact(x);
    return out;
}

}  // namespace

TargetCodes encode_target(Model& m, const SliceImage& y) {
    return slice_codes(m, slice_to_tensor(y));
}

TargetCodes encode_target(Model& m, const Volume& y, int window) {
    MRH_CHECK(window >= 1, "encode_target window must be >= 1");
    if (y.nz < window)
        std::cerr << "encode_target: volume has " << y.nz << " axial slices, fewer than the "
                  << window << "-slice averaging window; using all of them\n";
    const auto [b0, e0] = center_window(y.nz, window);
    const auto slices = extract_slices(y, 2, b0, e0);
    TargetCodes acc;
    acc.theta.assign(size_t(kLatentDim), 0.0);
    acc.eta.assign(size_t(kLatentDim), 0.0);
    for (const auto& s : slices) {
        const TargetCodes c = slice_codes(m, slice_to_tensor(s));
        for (int i = 0; i < kLatentDim; ++i) {
            acc.theta[size_t(i)] += c.theta[size_t(i)];
            acc.eta[size_t(i)] += c.eta[size_t(i)];
        }
    }
    for (auto& v : acc.theta) v /= double(slices.size());
    for (auto& v : acc.eta) v /= double(slices.size());
    return acc;
}

std::vector<double> mean_validation_eta(Model& m, const DatasetManifest& manifest,
                                        int per_volume) {
    MRH_CHECK(per_volume >= 1, "per_volume must be >= 1");
    std::vector<double> acc(size_t(kLatentDim), 0.0);
    int n = 0;
    const std::filesystem::path root(manifest.root);
    for (const auto& s : manifest.subjects) {
        if (s.split != "val") continue;
        for (const auto& [c, rel] : s.volumes) {
            const Volume v = wm_peak_normalize(load_nifti((root / rel).string()));
            const auto [b0, e0] = center_window(v.nz, per_volume);
            for (const auto& sl : extract_slices(v, 2, b0, e0)) {
                const std::vector<double> eta = m.eval_artifact(slice_to_tensor(sl));
                for (int i = 0; i < kLatentDim; ++i) acc[size_t(i)] += eta[size_t(i)];
                ++n;
            }
        }
    }
    MRH_CHECK(n > 0, "manifest has no validation volumes to derive a default artifact code from");
    for (auto& v : acc) v /= double(n);
    return acc;
}

HarmonizedSlice harmonize_slice(Model& m, const SourceBundle& b, const TargetCodes& target) {
    MRH_CHECK(int(target.theta.size()) == kLatentDim && int(target.eta.size()) == kLatentDim,
              "target codes must be " << kLatentDim << "-vectors");
    std::vector<int> avail;
    for (int i = 0; i < kNumContrasts; ++i)
        if (b.available[size_t(i)]) avail.push_back(i);
    MRH_CHECK(!avail.empty(), "harmonize_slice needs at least one source contrast");

    const int H = b.slices[size_t(avail[0])].h, W = b.slices[size_t(avail[0])].w;
    std::vector<Tensor> betas;
    std::vector<std::vector<double>> keys(4);
    betas.reserve(avail.size());
    for (int i : avail) {
        const SliceImage& s = b.slices[size_t(i)];
        MRH_CHECK(s.h == H && s.w == W, "source slices must share one grid");
        const Tensor x = slice_to_tensor(s);
        // Hard, noise-free anatomy map: inference never samples.
        betas.push_back(m.eval_anatomy(x, 1.0, nullptr));
        keys[size_t(i)] = m.eval_key(m.eval_contrast(x).first, m.eval_artifact(x));
    }
    const std::vector<double> query = m.eval_query(target.theta, target.eta);

    HarmonizedSlice out;
    out.alpha = compute_attention(keys, query, b.available);
    const Tensor beta_star = fuse_anatomy(betas, out.alpha, b.available);
    out.image = tensor_to_slice(m.eval_decode(beta_star, target.theta));
    // The output contrast is defined by theta, not by any source's enum tag.
    out.image.axis = b.slices[size_t(avail[0])].axis;
    out.image.index = b.slice_index;
    return out;
}

namespace {

// One slice-wise pass along `axis`, writing harmonized values back onto the
// source grid (padding added for the network is cropped away again).
Volume directional_pass(Model& m, const std::array<const Volume*, 4>& sources,
                        const TargetCodes& target, int axis,
                        std::vector<AttentionWeights>* alphas) {
    const Volume* ref = nullptr;
    for (const Volume* v : sources)
        if (v) ref = v;
    Volume out(ref->nx, ref->ny, ref->nz);
    out.spacing = ref->spacing;
    out.affine = ref->affine;
    out.site_id = ref->site_id;

    const int extent[3] = {ref->nx, ref->ny, ref->nz};
    int row_axis, col_axis;
    if (axis == 2) {
        row_axis = 1;
        col_axis = 0;
    } else if (axis == 1) {
        row_axis = 2;
        col_axis = 0;
    } else {
        row_axis = 2;
        col_axis = 1;
    }

    for (int idx = 0; idx < extent[axis]; ++idx) {
        SourceBundle b;
        b.slice_index = idx;
        for (int c = 0; c < kNumContrasts; ++c) {
            if (!sources[size_t(c)]) continue;
            b.available[size_t(c)] = true;
            b.slices[size_t(c)] = extract_slices(*sources[size_t(c)], axis, idx, idx + 1)[0];
        }
        const HarmonizedSlice h = harmonize_slice(m, b, target);
        if (alphas) alphas->push_back(h.alpha);
        for (int r = 0; r < extent[row_axis]; ++r) {
            for (int cc = 0; cc < extent[col_axis]; ++cc) {
                int co[3];
                co[axis] = idx;
                co[row_axis] = r;
                co[col_axis] = cc;
                out.at(co[0], co[1], co[2]) = h.image.at(r, cc);
            }
        }
    }
    return out;
}

}  // namespace

HarmonizeVolumeResult harmonize_volume(Model& m, const std::array<const Volume*, 4>& sources,
                                       const TargetCodes& target, const std::string& mode) {
    MRH_CHECK(mode == "axial" || mode == "median3", "unknown assembly mode '" << mode << "'");
    const Volume* ref = nullptr;
    for (const Volume* v : sources)
        if (v) ref = v;
    MRH_CHECK(ref != nullptr, "harmonize_volume needs at least one source volume");
    for (const Volume* v : sources)
        if (v)
            MRH_CHECK(v->nx == ref->nx && v->ny == ref->ny && v->nz == ref->nz,
                      "source volumes are not on one grid; register them first");

    HarmonizeVolumeResult res;
    res.mode = mode;
    res.volume = directional_pass(m, sources, target, 2, &res.axial_alpha);
    if (mode == "median3") {
        const Volume a1 = directional_pass(m, sources, target, 1, nullptr);
        const Volume a0 = directional_pass(m, sources, target, 0, nullptr);
        for (size_t i = 0; i < res.volume.voxels.size(); ++i) {
            const float x = res.volume.voxels[i], y = a1.voxels[i], z = a0.voxels[i];
            // exact middle element (no arithmetic, so no rounding)
            res.volume.voxels[i] = std::max(std::min(x, y), std::min(std::max(x, y), z));
        }
    }
    return res;
}

std::vector<SliceImage> theta_grid_sample(Model& m, const Tensor& beta_star, double lo, double hi,
                                          int n) {
    MRH_CHECK(n >= 1, "theta grid needs at least one point");
    MRH_CHECK(beta_star.rank() == 3 && beta_star.dim(0) == kAnatomyCh,
              "beta_star must be a [" << kAnatomyCh << ",H,W] anatomy map");
    std::vector<double> grid(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i)
        grid[size_t(i)] = n == 1 ? lo : lo + (hi - lo) * double(i) / double(n - 1);
    std::vector<SliceImage> out;
    out.reserve(size_t(n) * size_t(n));
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            out.push_back(
                tensor_to_slice(m.eval_decode(beta_star, {grid[size_t(i)], grid[size_t(j)]})));
    return out;
}

}  // namespace mrh
