#include "mrh/phantom.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>

#include "mrh/check.hpp"
#include "mrh/nifti.hpp"
#include "mrh/rng.hpp"

namespace mrh {

namespace {
constexpr double kPi = std::numbers::pi;

// Canonical tissue levels. Chosen so GM/WM contrast is largest in T1w, CSF is
// brightest in T2w, and lesions sit near WM in T1w but far above it in FLAIR.
constexpr double kLevels[kNumContrasts][kNumTissues] = {
    // bg,   CSF,  GM,   WM,   lesion
    {0.02, 0.15, 0.62, 0.95, 0.88},  // T1w
    {0.02, 1.05, 0.55, 0.35, 0.55},  // T2w
    {0.02, 0.65, 0.72, 0.58, 0.72},  // PDw
    {0.02, 0.12, 0.60, 0.45, 0.95},  // FLAIR
};
}  // namespace

double canonical_level(ContrastKind c, TissueLabel t) {
    return kLevels[contrast_index(c)][int(t)];
}

SiteProfile make_site_profile(const std::string& site_id, int variant) {
    SiteProfile s;
    s.site_id = site_id;
    static constexpr double kGamma[] = {1.0, 0.80, 1.25, 0.90, 1.15, 0.70};
    static constexpr double kGain[] = {1.0, 1.12, 0.92, 1.06, 0.96, 1.10};
    const double gamma0 = kGamma[size_t(variant % 6)];
    const double gain = kGain[size_t(variant % 6)];
    for (int ci = 0; ci < kNumContrasts; ++ci) {
        // Small per-contrast spread keeps the curves distinct but monotone.
        const double gamma = variant == 0 ? 1.0 : gamma0 + 0.03 * (ci - 1.5);
        auto& bp = s.transfer[size_t(ci)];
        const int kPts = 14;
        for (int i = 0; i <= kPts; ++i) {
            const double x = 1.3 * i / kPts;
            const double y = variant == 0 ? x : gain * 1.3 * std::pow(x / 1.3, gamma);
            bp.emplace_back(x, y);
        }
    }
    s.noise_sigma = 0.01 + 0.003 * (variant % 4);
    s.motion_severity = 0.0;
    return s;
}

double apply_transfer(const SiteProfile& s, ContrastKind c, double canonical) {
    const auto& bp = s.transfer[size_t(contrast_index(c))];
    MRH_CHECK(bp.size() >= 2, "site " << s.site_id << " has no transfer for contrast "
                                      << contrast_name(c));
    if (canonical <= bp.front().first) {
        const auto& [x0, y0] = bp[0];
        const auto& [x1, y1] = bp[1];
        return y0 + (canonical - x0) * (y1 - y0) / (x1 - x0);
    }
    for (size_t i = 1; i < bp.size(); ++i) {
        if (canonical <= bp[i].first) {
            const auto& [x0, y0] = bp[i - 1];
            const auto& [x1, y1] = bp[i];
            return y0 + (canonical - x0) * (y1 - y0) / (x1 - x0);
        }
    }
    const auto& [x0, y0] = bp[bp.size() - 2];
    const auto& [x1, y1] = bp.back();
    return y1 + (canonical - x1) * (y1 - y0) / (x1 - x0);
}

TissueMap generate_anatomy(uint64_t seed, int grid, int depth) {
    MRH_CHECK(grid >= 32, "grid must be >= 32");
    MRH_CHECK(depth >= 1, "depth must be >= 1");
    Rng rng(Rng::mix(seed, 0x414e41544f4d59ull));  // anatomy stream

    const int n = grid, nz = depth;
    TissueMap tm(n, n, nz);

    const double cx = n / 2.0 + rng.uniform(-1.5, 1.5);
    const double cy = n / 2.0 + rng.uniform(-1.5, 1.5);
    const double rhead = 0.82 * (n / 2.0 - 1.0);
    const double ell = rng.uniform(0.9, 1.1);
    double amp[3], ph[3];
    for (int k = 0; k < 3; ++k) {
        amp[k] = rng.uniform(-0.06, 0.06);
        ph[k] = rng.uniform(0.0, 2.0 * kPi);
    }
    // Ventricle lobes (in-plane offsets/sizes relative to head radius).
    const double voff = 0.18 + rng.uniform(-0.03, 0.03);
    const double va = 0.16 + rng.uniform(-0.02, 0.02);
    const double vb = 0.10 + rng.uniform(-0.02, 0.02);

    auto zscale = [&](int z) {
        if (nz == 1) return 1.0;
        const double u = (z - (nz - 1) / 2.0) / (0.70 * nz / 2.0);
        return std::sqrt(std::max(0.10, 1.0 - u * u));
    };
    auto boundary = [&](double phi) {
        double r = 1.0;
        for (int k = 0; k < 3; ++k) r += amp[k] * std::cos((k + 2) * phi + ph[k]);
        return rhead * r;
    };

    for (int z = 0; z < nz; ++z) {
        const double zs = zscale(z);
        for (int y = 0; y < n; ++y) {
            for (int x = 0; x < n; ++x) {
                const double dx = x - cx;
                const double dy = (y - cy) / ell;
                const double rho = std::sqrt(dx * dx + dy * dy);
                const double phi = std::atan2(dy, dx);
                const double rb = boundary(phi) * zs;
                TissueLabel lab = TissueLabel::Background;
                if (rho <= rb) {
                    if (rho > 0.86 * rb)
                        lab = TissueLabel::CSF;
                    else if (rho > 0.60 * rb)
                        lab = TissueLabel::GM;
                    else
                        lab = TissueLabel::WM;
                }
                // Ventricles: two CSF lobes carved out of deep WM.
                if (lab == TissueLabel::WM) {
                    const double rv = rhead * zs;
                    for (int sgn : {-1, 1}) {
                        const double ux = (dx - sgn * voff * rv) / (va * rv);
                        const double uy = (dy + 0.05 * rv * 0) / (vb * rv);
                        if (ux * ux + uy * uy <= 1.0) lab = TissueLabel::CSF;
                    }
                }
                tm.label(x, y, z) = uint8_t(lab);
            }
        }
    }

    // Lesions: balls clipped to WM.
    const int n_lesions = 1 + rng.uniform_int(5);  // 1..5
    for (int li = 0; li < n_lesions; ++li) {
        int lx = 0, ly = 0, lz = 0;
        bool found = false;
        for (int tries = 0; tries < 2000 && !found; ++tries) {
            lx = rng.uniform_int(n);
            ly = rng.uniform_int(n);
            lz = rng.uniform_int(nz);
            found = tm.label(lx, ly, lz) == uint8_t(TissueLabel::WM);
        }
        if (!found) continue;
        const double rl = rng.uniform(1.2, std::max(2.0, n / 14.0));
        const int r = int(std::ceil(rl));
        for (int z = std::max(0, lz - r); z <= std::min(nz - 1, lz + r); ++z)
            for (int y = std::max(0, ly - r); y <= std::min(n - 1, ly + r); ++y)
                for (int x = std::max(0, lx - r); x <= std::min(n - 1, lx + r); ++x) {
                    const double d2 = double(x - lx) * (x - lx) + double(y - ly) * (y - ly) +
                                      double(z - lz) * (z - lz);
                    if (d2 <= rl * rl && tm.label(x, y, z) == uint8_t(TissueLabel::WM))
                        tm.label(x, y, z) = uint8_t(TissueLabel::Lesion);
                }
    }
    // Guarantee at least one lesion voxel (tiny grids can fail rejection).
    bool has_lesion = false;
    for (uint8_t l : tm.labels) has_lesion |= l == uint8_t(TissueLabel::Lesion);
    if (!has_lesion) {
        for (size_t i = 0; i < tm.labels.size(); ++i)
            if (tm.labels[i] == uint8_t(TissueLabel::WM)) {
                tm.labels[i] = uint8_t(TissueLabel::Lesion);
                break;
            }
    }

    // Smooth biological variation: low-resolution noise, trilinear upsample.
    const int g = 8;
    const int gx = (n + g - 1) / g + 2, gy2 = gx, gz = (nz + g - 1) / g + 2;
    std::vector<double> coarse(size_t(gx) * gy2 * gz);
    for (auto& v : coarse) v = rng.uniform(-1.0, 1.0);
    auto cat = [&](int X, int Y, int Z) {
        X = std::clamp(X, 0, gx - 1);
        Y = std::clamp(Y, 0, gy2 - 1);
        Z = std::clamp(Z, 0, gz - 1);
        return coarse[(size_t(Z) * gy2 + Y) * gx + X];
    };
    for (int z = 0; z < nz; ++z)
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x) {
                const double fx = double(x) / g, fy = double(y) / g, fz = double(z) / g;
                const int x0 = int(fx), y0 = int(fy), z0 = int(fz);
                const double tx = fx - x0, ty = fy - y0, tz = fz - z0;
                double acc = 0.0;
                for (int dz = 0; dz < 2; ++dz)
                    for (int dy2 = 0; dy2 < 2; ++dy2)
                        for (int dx2 = 0; dx2 < 2; ++dx2) {
                            const double wgt = (dx2 ? tx : 1 - tx) * (dy2 ? ty : 1 - ty) *
                                               (dz ? tz : 1 - tz);
                            acc += wgt * cat(x0 + dx2, y0 + dy2, z0 + dz);
                        }
                tm.smooth_field[tm.index(x, y, z)] =
                    float(std::clamp(1.0 + 0.1 * acc, 0.9, 1.1));
            }
    return tm;
}

namespace {

// 3x3 binomial blur of a scalar field, reflecting at borders.
void blur3(std::vector<double>& a, int h, int w) {
    std::vector<double> tmp(a.size());
    auto at = [&](const std::vector<double>& v, int y, int x) {
        y = std::clamp(y, 0, h - 1);
        x = std::clamp(x, 0, w - 1);
        return v[size_t(y) * w + x];
    };
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            tmp[size_t(y) * w + x] =
                0.25 * at(a, y, x) + 0.125 * (at(a, y - 1, x) + at(a, y + 1, x) + at(a, y, x - 1) +
                                              at(a, y, x + 1)) +
                0.0625 * (at(a, y - 1, x - 1) + at(a, y - 1, x + 1) + at(a, y + 1, x - 1) +
                          at(a, y + 1, x + 1));
    a.swap(tmp);
}

}  // namespace

SliceImage render_contrast(const TissueMap& t, const SiteProfile& s, ContrastKind c, int z) {
    MRH_CHECK(z >= 0 && z < t.nz, "z out of range");
    const int h = t.ny, w = t.nx;
    SliceImage out(h, w);
    out.contrast = c;
    out.volume_id = s.site_id + ":" + contrast_name(c);
    out.axis = 2;
    out.index = z;
    out.orig_h = h;
    out.orig_w = w;

    // Lesion opacity mask; blurred for T1w so lesion boundaries are soft
    // there and crisp elsewhere (most visibly in FLAIR).
    std::vector<double> alpha(size_t(h) * w, 0.0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            if (t.label(x, y, z) == uint8_t(TissueLabel::Lesion)) alpha[size_t(y) * w + x] = 1.0;
    if (c == ContrastKind::T1w) {
        blur3(alpha, h, w);
        blur3(alpha, h, w);
    }

    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const uint8_t raw = t.label(x, y, z);
            const TissueLabel base =
                raw == uint8_t(TissueLabel::Lesion) ? TissueLabel::WM : TissueLabel(raw);
            const double a = alpha[size_t(y) * w + x];
            const double canon = (1.0 - a) * canonical_level(c, base) +
                                 a * canonical_level(c, TissueLabel::Lesion);
            double v = apply_transfer(s, c, canon);
            if (raw != uint8_t(TissueLabel::Background))
                v *= double(t.smooth_field[t.index(x, y, z)]);
            out.at(y, x) = float(std::clamp(v, 0.0, kClipMax));
        }
    }
    return out;
}

Volume render_volume(const TissueMap& t, const SiteProfile& s, ContrastKind c) {
    Volume v(t.nx, t.ny, t.nz);
    v.contrast = c;
    v.site_id = s.site_id;
    for (int z = 0; z < t.nz; ++z) {
        SliceImage sl = render_contrast(t, s, c, z);
        for (int y = 0; y < t.ny; ++y)
            for (int x = 0; x < t.nx; ++x) v.at(x, y, z) = sl.at(y, x);
    }
    return v;
}

SliceImage add_noise(const SliceImage& x, double sigma, uint64_t seed) {
    MRH_CHECK(sigma >= 0.0, "sigma must be >= 0");
    if (sigma == 0.0) return x;
    SliceImage out = x;
    Rng rng(Rng::mix(seed, 0x4e4f495345ull));
    for (auto& p : out.pixels)
        p = float(std::clamp(double(p) + sigma * rng.normal(), 0.0, kClipMax));
    return out;
}

Volume add_noise(const Volume& v, double sigma, uint64_t seed) {
    MRH_CHECK(sigma >= 0.0, "sigma must be >= 0");
    if (sigma == 0.0) return v;
    Volume out = v;
    Rng rng(Rng::mix(seed, 0x4e4f495345ull));
    for (auto& p : out.voxels)
        p = float(std::clamp(double(p) + sigma * rng.normal(), 0.0, kClipMax));
    return out;
}

namespace {

std::vector<double> motion_magnitudes(const SliceImage& x, double severity, uint64_t seed) {
    const int h = x.h, w = x.w;
    const size_t n = size_t(h) * w;
    fftw_complex* buf = fftw_alloc_complex(n);
    for (size_t i = 0; i < n; ++i) {
        buf[i][0] = double(x.pixels[i]);
        buf[i][1] = 0.0;
    }
    fftw_plan fwd = fftw_plan_dft_2d(h, w, buf, buf, FFTW_FORWARD, FFTW_ESTIMATE);
    fftw_execute(fwd);
    fftw_destroy_plan(fwd);

    // Perturb the phase of `round(severity*(h-1))` non-DC rows.
    Rng rng(Rng::mix(seed, 0x4d4f54494f4eull));
    std::vector<int> rows;
    for (int r = 1; r < h; ++r) rows.push_back(r);
    for (size_t i = rows.size(); i > 1; --i)
        std::swap(rows[i - 1], rows[size_t(rng.uniform_int(int(i)))]);
    const int n_rows = int(std::lround(severity * (h - 1)));
    for (int k = 0; k < n_rows; ++k) {
        const int r = rows[size_t(k)];
        const double phi = rng.uniform(-kPi / 2, kPi / 2);
        const double cs = std::cos(phi), sn = std::sin(phi);
        for (int cidx = 0; cidx < w; ++cidx) {
            double& re = buf[size_t(r) * w + cidx][0];
            double& im = buf[size_t(r) * w + cidx][1];
            const double re2 = re * cs - im * sn;
            const double im2 = re * sn + im * cs;
            re = re2;
            im = im2;
        }
    }

    fftw_plan bwd = fftw_plan_dft_2d(h, w, buf, buf, FFTW_BACKWARD, FFTW_ESTIMATE);
    fftw_execute(bwd);
    fftw_destroy_plan(bwd);

    std::vector<double> mags(n);
    for (size_t i = 0; i < n; ++i) {
        const double re = buf[i][0] / double(n), im = buf[i][1] / double(n);
        mags[i] = std::sqrt(re * re + im * im);
    }
    fftw_free(buf);
    return mags;
}

}  // namespace

SliceImage add_motion_raw(const SliceImage& x, double severity, uint64_t seed) {
    MRH_CHECK(severity >= 0.0 && severity <= 1.0, "severity must be in [0,1]");
    SliceImage out = x;
    const auto mags = motion_magnitudes(x, severity, seed);
    for (size_t i = 0; i < mags.size(); ++i) out.pixels[i] = float(mags[i]);
    return out;
}

SliceImage add_motion(const SliceImage& x, double severity, uint64_t seed) {
    SliceImage out = add_motion_raw(x, severity, seed);
    for (auto& p : out.pixels) p = float(std::clamp(double(p), 0.0, kClipMax));
    return out;
}

Volume add_motion(const Volume& v, double severity, uint64_t seed) {
    MRH_CHECK(severity >= 0.0 && severity <= 1.0, "severity must be in [0,1]");
    Volume out = v;
    for (int z = 0; z < v.nz; ++z) {
        SliceImage sl(v.ny, v.nx);
        for (int y = 0; y < v.ny; ++y)
            for (int x = 0; x < v.nx; ++x) sl.at(y, x) = v.at(x, y, z);
        SliceImage m = add_motion(sl, severity, Rng::mix(seed, uint64_t(z)));
        for (int y = 0; y < v.ny; ++y)
            for (int x = 0; x < v.nx; ++x) out.at(x, y, z) = m.at(y, x);
    }
    return out;
}

DatasetManifest make_dataset(const std::vector<SiteProfile>& sites, const DatasetOptions& opt,
                             const std::string& out_dir) {
    MRH_CHECK(sites.size() >= 2, "need >= 2 sites");
    MRH_CHECK(opt.subjects_per_site >= 1, "need >= 1 subject per site");
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);

    // Missing-contrast policy.
    std::string drop_site;
    double drop_p = 0.0;
    bool random_policy = false;
    if (opt.missing.rfind("drop-flair:", 0) == 0) {
        drop_site = opt.missing.substr(11);
    } else if (opt.missing.rfind("random:", 0) == 0) {
        random_policy = true;
        drop_p = std::stod(opt.missing.substr(7));
    } else {
        MRH_CHECK(opt.missing == "none", "unknown missing policy '" << opt.missing << "'");
    }
    Rng policy_rng(Rng::mix(opt.seed, 0x4d495353ull));

    DatasetManifest man;
    man.root = out_dir;
    int subject_counter = 0;

    auto render_subject = [&](const std::string& subject_id, const TissueMap& tm,
                              const SiteProfile& site, const std::string& split, bool traveling,
                              const std::vector<ContrastKind>& contrasts) {
        SubjectEntry e;
        e.subject_id = subject_id;
        e.site_id = site.site_id;
        e.split = split;
        e.traveling = traveling;
        fs::create_directories(fs::path(out_dir) / site.site_id);
        for (ContrastKind c : contrasts) {
            Volume v = render_volume(tm, site, c);
            const uint64_t aug_seed =
                Rng::mix(opt.seed, uint64_t(subject_counter) * 64 + uint64_t(&site - sites.data()) * 8 +
                                       uint64_t(contrast_index(c)));
            if (site.motion_severity > 0.0) v = add_motion(v, site.motion_severity, aug_seed);
            v = add_noise(v, site.noise_sigma, aug_seed + 1);
            const std::string rel =
                site.site_id + "/" + subject_id + "_" + contrast_name(c) + ".nii.gz";
            save_nifti(v, (fs::path(out_dir) / rel).string());
            e.volumes[c] = rel;
        }
        man.subjects.push_back(std::move(e));
    };

    // Site-resident subjects.
    for (size_t si = 0; si < sites.size(); ++si) {
        for (int k = 0; k < opt.subjects_per_site; ++k) {
            std::string lower = sites[si].site_id;
            for (auto& ch : lower) ch = char(std::tolower(static_cast<unsigned char>(ch)));
            char idbuf[64];
            std::snprintf(idbuf, sizeof idbuf, "%s%02d", lower.c_str(), k);
            const TissueMap tm =
                generate_anatomy(Rng::mix(opt.seed, uint64_t(subject_counter)), opt.grid, opt.depth);
            const bool is_val = k >= opt.subjects_per_site - opt.val_per_site;

            std::vector<ContrastKind> contrasts;
            for (ContrastKind c : kAllContrasts) {
                bool keep = true;
                if (!drop_site.empty() && sites[si].site_id == drop_site &&
                    c == ContrastKind::FLAIR)
                    keep = false;
                if (random_policy && (c == ContrastKind::PDw || c == ContrastKind::FLAIR) &&
                    policy_rng.uniform() < drop_p)
                    keep = false;
                if (keep) contrasts.push_back(c);
            }
            render_subject(idbuf, tm, sites[si], is_val ? "val" : "train", false, contrasts);
            ++subject_counter;
        }
    }

    // Traveling subjects: same anatomy rendered at every site; evaluation only.
    for (int k = 0; k < opt.traveling; ++k) {
        char idbuf[64];
        std::snprintf(idbuf, sizeof idbuf, "trav%02d", k);
        const TissueMap tm =
            generate_anatomy(Rng::mix(opt.seed, 0x7452415600ull + uint64_t(k)), opt.grid, opt.depth);
        for (const auto& site : sites) {
            std::vector<ContrastKind> contrasts;
            for (ContrastKind c : kAllContrasts) {
                if (!drop_site.empty() && site.site_id == drop_site && c == ContrastKind::FLAIR)
                    continue;
                contrasts.push_back(c);
            }
            render_subject(idbuf, tm, site, "eval", true, contrasts);
        }
        ++subject_counter;
    }

    save_manifest(man, (fs::path(out_dir) / "manifest.json").string());
    return man;
}

}  // namespace mrh
