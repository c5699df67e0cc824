#include "mrh/imaging.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "mrh/check.hpp"

namespace mrh {

const char* contrast_name(ContrastKind c) {
    switch (c) {
        case ContrastKind::T1w: return "t1";
        case ContrastKind::T2w: return "t2";
        case ContrastKind::PDw: return "pd";
        case ContrastKind::FLAIR: return "flair";
    }
    return "?";
}

std::optional<ContrastKind> contrast_from_name(const std::string& name) {
    std::string s;
    for (char c : name) s.push_back(char(std::tolower(static_cast<unsigned char>(c))));
    if (s == "t1" || s == "t1w") return ContrastKind::T1w;
    if (s == "t2" || s == "t2w") return ContrastKind::T2w;
    if (s == "pd" || s == "pdw") return ContrastKind::PDw;
    if (s == "flair") return ContrastKind::FLAIR;
    return std::nullopt;
}

double estimate_wm_peak(const std::vector<float>& values) {
    MRH_CHECK(!values.empty(), "empty intensity list");
    float mx = 0.0f;
    for (float v : values) mx = std::max(mx, v);
    MRH_CHECK(mx > 0.0f, "degenerate input: no positive intensities");

    std::vector<double> fg;
    fg.reserve(values.size());
    const float thresh = 0.05f * mx;
    for (float v : values)
        if (v > thresh) fg.push_back(double(v));
    MRH_CHECK(!fg.empty(), "degenerate input: empty foreground");

    std::sort(fg.begin(), fg.end());
    const double lo = fg.front(), hi = fg.back();
    if (hi - lo < 1e-12 * std::max(1.0, hi)) return hi;  // constant foreground

    const size_t n = fg.size();
    double mean = 0.0;
    for (double v : fg) mean += v;
    mean /= double(n);
    double var = 0.0;
    for (double v : fg) var += (v - mean) * (v - mean);
    var /= double(n);
    const double sd = std::sqrt(var);
    const double iqr = fg[size_t(0.75 * double(n - 1))] - fg[size_t(0.25 * double(n - 1))];
    double spread = std::min(sd, iqr / 1.34);
    if (spread <= 0.0) spread = sd > 0.0 ? sd : (hi - lo) / 4.0;
    const double bandwidth = 0.9 * spread * std::pow(double(n), -0.2);

    constexpr int kBins = 256;
    const double dx = (hi - lo) / kBins;
    std::vector<double> hist(kBins, 0.0);
    for (double v : fg) {
        int b = int((v - lo) / dx);
        b = std::clamp(b, 0, kBins - 1);
        hist[size_t(b)] += 1.0;
    }

    // Gaussian smoothing in bin units makes the estimate scale-equivariant.
    const double sigma = std::max(0.5, bandwidth / dx);
    const int radius = int(std::ceil(4.0 * sigma));
    std::vector<double> kernel(size_t(2 * radius + 1));
    for (int i = -radius; i <= radius; ++i)
        kernel[size_t(i + radius)] = std::exp(-0.5 * (i / sigma) * (i / sigma));
    std::vector<double> dens(kBins, 0.0);
    for (int i = 0; i < kBins; ++i) {
        double acc = 0.0;
        for (int k = -radius; k <= radius; ++k) {
            const int j = i + k;
            if (j < 0 || j >= kBins) continue;
            acc += kernel[size_t(k + radius)] * hist[size_t(j)];
        }
        dens[size_t(i)] = acc;
    }

    // Local maxima of the smoothed density.
    std::vector<int> peaks;
    for (int i = 0; i < kBins; ++i) {
        const double left = i > 0 ? dens[size_t(i - 1)] : -1.0;
        const double right = i < kBins - 1 ? dens[size_t(i + 1)] : -1.0;
        if (dens[size_t(i)] > left && dens[size_t(i)] >= right) peaks.push_back(i);
    }
    MRH_CHECK(!peaks.empty(), "no density mode found");

    // Basin boundaries at the minima between consecutive peaks; mass from the
    // raw histogram.
    std::vector<int> bounds;
    bounds.push_back(0);
    for (size_t p = 0; p + 1 < peaks.size(); ++p) {
        int argmin = peaks[p];
        for (int i = peaks[p]; i <= peaks[p + 1]; ++i)
            if (dens[size_t(i)] < dens[size_t(argmin)]) argmin = i;
        bounds.push_back(argmin);
    }
    bounds.push_back(kBins);

    int chosen = -1;
    for (size_t p = 0; p < peaks.size(); ++p) {
        double mass = 0.0;
        for (int i = bounds[p]; i < bounds[p + 1]; ++i) mass += hist[size_t(i)];
        if (mass / double(n) >= 0.10) chosen = peaks[p];  // keep highest-intensity qualifying mode
    }
    if (chosen < 0) {
        // No mode holds 10% of the mass; fall back to the global density max.
        chosen = int(std::max_element(dens.begin(), dens.end()) - dens.begin());
    }

    double offset = 0.0;
    if (chosen > 0 && chosen < kBins - 1) {
        const double a = dens[size_t(chosen - 1)], b = dens[size_t(chosen)],
                     c = dens[size_t(chosen + 1)];
        const double denom = a - 2.0 * b + c;
        if (std::abs(denom) > 1e-30) offset = std::clamp(0.5 * (a - c) / denom, -0.5, 0.5);
    }
    return lo + (chosen + 0.5 + offset) * dx;
}

Volume wm_peak_normalize(const Volume& v) {
    const double peak = estimate_wm_peak(v.voxels);
    MRH_CHECK(peak > 0.0, "nonpositive peak");
    Volume out = v;
    const double s = 1.0 / peak;
    for (auto& x : out.voxels)
        x = float(std::clamp(double(x) * s, 0.0, kClipMax));
    return out;
}

std::pair<int, int> center_window(int n, int count) {
    if (n <= count) return {0, n};
    const int s = (n - count) / 2;
    return {s, s + count};
}

namespace {
int padded_extent(int d) {
    const int m = std::max(d, 32);
    return ((m + 15) / 16) * 16;
}
}  // namespace

std::vector<SliceImage> extract_slices(const Volume& v, int axis, int begin, int end) {
    MRH_CHECK(axis >= 0 && axis <= 2, "axis must be 0, 1 or 2");
    const int extent[3] = {v.nx, v.ny, v.nz};
    MRH_CHECK(begin >= 0 && end <= extent[axis] && begin < end,
              "empty or out-of-bounds slice window [" << begin << "," << end << ")");

    // In-plane extents: rows take the higher remaining axis, columns the lower.
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
    const int oh = extent[row_axis], ow = extent[col_axis];
    const int ph = padded_extent(oh), pw = padded_extent(ow);

    std::vector<SliceImage> out;
    out.reserve(size_t(end - begin));
    for (int idx = begin; idx < end; ++idx) {
        SliceImage s(ph, pw);
        s.contrast = v.contrast;
        s.volume_id = v.site_id + ":" + contrast_name(v.contrast);
        s.axis = axis;
        s.index = idx;
        s.orig_h = oh;
        s.orig_w = ow;
        for (int r = 0; r < oh; ++r) {
            for (int c = 0; c < ow; ++c) {
                int co[3];
                co[axis] = idx;
                co[row_axis] = r;
                co[col_axis] = c;
                s.at(r, c) = v.at(co[0], co[1], co[2]);
            }
        }
        out.push_back(std::move(s));
    }
    return out;
}

void save_manifest(const DatasetManifest& m, const std::string& path) {
    nlohmann::json j;
    j["version"] = m.version;
    j["subjects"] = nlohmann::json::array();
    for (const auto& s : m.subjects) {
        nlohmann::json js;
        js["subject_id"] = s.subject_id;
        js["site_id"] = s.site_id;
        js["split"] = s.split;
        js["traveling"] = s.traveling;
        nlohmann::json vols;
        for (const auto& [c, p] : s.volumes) vols[contrast_name(c)] = p;
        js["volumes"] = vols;
        j["subjects"].push_back(js);
    }
    std::ofstream f(path);
    MRH_CHECK(f.good(), "cannot write manifest " << path);
    f << j.dump(2) << "\n";
}

DatasetManifest load_manifest(const std::string& path) {
    std::ifstream f(path);
    MRH_CHECK(f.good(), "cannot open manifest " << path);
    nlohmann::json j;
    f >> j;
    DatasetManifest m;
    m.version = j.at("version").get<int>();
    MRH_CHECK(m.version == 1, "unsupported manifest version " << m.version);
    m.root = std::filesystem::path(path).parent_path().string();
    for (const auto& js : j.at("subjects")) {
        SubjectEntry s;
        s.subject_id = js.at("subject_id").get<std::string>();
        s.site_id = js.at("site_id").get<std::string>();
        s.split = js.at("split").get<std::string>();
        s.traveling = js.value("traveling", false);
        for (const auto& [k, v] : js.at("volumes").items()) {
            auto c = contrast_from_name(k);
            MRH_CHECK(c.has_value(), "unknown contrast '" << k << "' in manifest");
            s.volumes[*c] = v.get<std::string>();
        }
        m.subjects.push_back(std::move(s));
    }
    return m;
}

void validate_manifest(const DatasetManifest& m) {
    for (const auto& s : m.subjects) {
        MRH_CHECK(!s.volumes.empty(), "subject " << s.subject_id << " has no volumes");
        if (s.split == "train")
            MRH_CHECK(s.volumes.size() >= 2, "training subject " << s.subject_id
                                                                 << " needs >= 2 contrasts");
        for (const auto& [c, rel] : s.volumes) {
            const auto p = std::filesystem::path(m.root) / rel;
            MRH_CHECK(std::filesystem::exists(p),
                      "missing volume file " << p.string() << " for " << s.subject_id);
        }
    }
}

}  // namespace mrh
