#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "mrh/imaging.hpp"
#include "mrh/nifti.hpp"
#include "mrh/rng.hpp"

using namespace mrh;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
    auto p = fs::temp_directory_path() / "mrh_imaging_tests";
    fs::create_directories(p);
    return p;
}

Volume make_volume(int nx, int ny, int nz) {
    Volume v(nx, ny, nz);
    v.spacing = {1.0, 1.25, 2.0};
    return v;
}

}  // namespace

TEST_CASE("nifti round trip: constant volume") {
    Volume v = make_volume(4, 4, 4);
    for (auto& x : v.voxels) x = 7.0f;
    const auto path = (temp_dir() / "const.nii").string();
    save_nifti(v, path);
    Volume r = load_nifti(path);
    REQUIRE(r.nx == 4);
    REQUIRE(r.ny == 4);
    REQUIRE(r.nz == 4);
    CHECK(r.voxels == v.voxels);
    CHECK(r.spacing[1] == doctest::Approx(1.25));
}

TEST_CASE("nifti rejects malformed magic") {
    const auto path = (temp_dir() / "bad.nii").string();
    std::ofstream f(path, std::ios::binary);
    std::vector<char> junk(500, 0);
    junk[0] = 92;  // wrong sizeof_hdr too
    f.write(junk.data(), std::streamsize(junk.size()));
    f.close();
    CHECK_THROWS(load_nifti(path));
}

TEST_CASE("nifti round trip is bit-exact for every supported datatype") {
    Rng rng(404);
    for (NiftiDType dt : {NiftiDType::U8, NiftiDType::I16, NiftiDType::U16, NiftiDType::I32,
                          NiftiDType::F32, NiftiDType::F64}) {
        Volume v = make_volume(16, 16, 16);
        for (auto& x : v.voxels) {
            switch (dt) {
                case NiftiDType::U8: x = float(rng.uniform_int(256)); break;
                case NiftiDType::I16: x = float(rng.uniform_int(65536) - 32768); break;
                case NiftiDType::U16: x = float(rng.uniform_int(65536)); break;
                case NiftiDType::I32: x = float(rng.uniform_int(2000001) - 1000000); break;
                default: x = float(rng.uniform(0.0, 1.5)); break;
            }
        }
        for (const char* name : {"dt.nii", "dt.nii.gz"}) {
            const auto path = (temp_dir() / name).string();
            save_nifti(v, path, dt);
            Volume r = load_nifti(path);
            REQUIRE(r.voxels.size() == v.voxels.size());
            size_t diffs = 0;
            for (size_t i = 0; i < v.voxels.size(); ++i)
                if (r.voxels[i] != v.voxels[i]) ++diffs;
            INFO("datatype code ", int(dt), " file ", name);
            CHECK(diffs == 0);
        }
    }
}

TEST_CASE("nifti ramp volume round trips with zero max abs diff") {
    Volume v = make_volume(16, 16, 16);
    for (size_t i = 0; i < v.voxels.size(); ++i) v.voxels[i] = float(i) / 4096.0f;
    const auto path = (temp_dir() / "ramp.nii.gz").string();
    save_nifti(v, path);
    Volume r = load_nifti(path);
    float maxdiff = 0.0f;
    for (size_t i = 0; i < v.voxels.size(); ++i)
        maxdiff = std::max(maxdiff, std::abs(r.voxels[i] - v.voxels[i]));
    CHECK(maxdiff == 0.0f);
}

TEST_CASE("wm peak: constant foreground maps to exactly 1.0") {
    Volume v = make_volume(8, 8, 8);
    for (size_t i = 0; i < v.voxels.size(); ++i) v.voxels[i] = i % 3 == 0 ? 0.0f : 0.7f;
    Volume n = wm_peak_normalize(v);
    for (size_t i = 0; i < n.voxels.size(); ++i) {
        if (v.voxels[i] > 0.0f)
            CHECK(n.voxels[i] == doctest::Approx(1.0).epsilon(1e-3));
        else
            CHECK(n.voxels[i] == 0.0f);
    }
}

TEST_CASE("wm peak: picks the highest-intensity mode of a two-mode histogram") {
    // 40% of foreground near 0.4, 60% near 0.8; the normalizer must anchor
    // the 0.8 mode, giving scale 1/0.8.
    Rng rng(77);
    Volume v = make_volume(32, 32, 32);
    for (auto& x : v.voxels) {
        const double mode = rng.uniform() < 0.4 ? 0.4 : 0.8;
        x = float(std::max(0.05, mode + 0.02 * rng.normal()));
    }
    const double peak = estimate_wm_peak(v.voxels);
    CHECK(peak == doctest::Approx(0.8).epsilon(0.025));
    Volume n = wm_peak_normalize(v);
    // A voxel that sat exactly at the chosen mode is now ~1.
    double scale_seen = double(n.voxels[0]) / double(v.voxels[0]);
    CHECK(scale_seen == doctest::Approx(1.0 / peak).epsilon(1e-6));
}

TEST_CASE("wm peak normalization is idempotent within 1e-3 relative") {
    Rng rng(78);
    Volume v = make_volume(24, 24, 24);
    for (auto& x : v.voxels) {
        const double u = rng.uniform();
        double val;
        if (u < 0.55)
            val = 0.95 + 0.03 * rng.normal();  // WM-like bulk
        else if (u < 0.85)
            val = 0.62 + 0.04 * rng.normal();  // GM
        else
            val = 0.15 + 0.02 * rng.normal();  // CSF
        x = float(std::max(0.0, val));
    }
    Volume n1 = wm_peak_normalize(v);
    Volume n2 = wm_peak_normalize(n1);
    for (size_t i = 0; i < n1.voxels.size(); ++i) {
        if (n1.voxels[i] > 1e-3f)
            CHECK(std::abs(n2.voxels[i] - n1.voxels[i]) / n1.voxels[i] < 1e-3);
    }
}

TEST_CASE("wm peak normalization is scale-equivariant") {
    Rng rng(79);
    Volume v = make_volume(20, 20, 20);
    for (auto& x : v.voxels)
        x = float(std::max(0.0, (rng.uniform() < 0.6 ? 0.9 : 0.4) + 0.05 * rng.normal()));
    for (const double k : {2.0, 3.7, 0.25}) {
        Volume vk = v;
        for (auto& x : vk.voxels) x = float(double(x) * k);
        Volume n1 = wm_peak_normalize(v);
        Volume n2 = wm_peak_normalize(vk);
        for (size_t i = 0; i < n1.voxels.size(); ++i)
            CHECK(std::abs(n1.voxels[i] - n2.voxels[i]) <= 1e-6f * std::max(1.0f, n1.voxels[i]));
    }
}

TEST_CASE("wm peak normalization rejects an all-zero volume") {
    Volume v = make_volume(4, 4, 4);
    CHECK_THROWS(wm_peak_normalize(v));
}

TEST_CASE("center window arithmetic") {
    CHECK(center_window(60, 20) == std::pair<int, int>(20, 40));
    CHECK(center_window(10, 20) == std::pair<int, int>(0, 10));
    CHECK(center_window(21, 20) == std::pair<int, int>(0, 20));
}

TEST_CASE("extract_slices: axial dims come from the in-plane axes") {
    Volume v = make_volume(40, 36, 12);
    Rng rng(80);
    for (auto& x : v.voxels) x = float(rng.uniform());
    auto slices = extract_slices(v, 2, 3, 7);
    REQUIRE(slices.size() == 4);
    CHECK(slices[0].orig_h == 36);  // rows = y
    CHECK(slices[0].orig_w == 40);  // cols = x
    CHECK(slices[0].h == 48);
    CHECK(slices[0].w == 48);
    CHECK(slices[0].index == 3);
    CHECK(slices[0].axis == 2);
    // In-bounds pixels are never altered.
    for (int y = 0; y < 36; ++y)
        for (int x = 0; x < 40; ++x) CHECK(slices[2].at(y, x) == v.at(x, y, 5));
    // Padding is zero-filled.
    CHECK(slices[0].at(47, 47) == 0.0f);
    CHECK(slices[0].padded());
}

TEST_CASE("extract_slices: 33x33 pads to 48x48 preserving the original block") {
    Volume v = make_volume(33, 33, 3);
    Rng rng(81);
    for (auto& x : v.voxels) x = float(rng.uniform());
    auto slices = extract_slices(v, 2, 1, 2);
    REQUIRE(slices.size() == 1);
    CHECK(slices[0].h == 48);
    CHECK(slices[0].w == 48);
    CHECK(slices[0].orig_h == 33);
    for (int y = 0; y < 33; ++y)
        for (int x = 0; x < 33; ++x) CHECK(slices[0].at(y, x) == v.at(x, y, 1));
    for (int y = 33; y < 48; ++y)
        for (int x = 0; x < 48; ++x) CHECK(slices[0].at(y, x) == 0.0f);
}

TEST_CASE("extract_slices rejects an empty window") {
    Volume v = make_volume(32, 32, 8);
    CHECK_THROWS(extract_slices(v, 2, 4, 4));
    CHECK_THROWS(extract_slices(v, 2, 0, 9));
}

TEST_CASE("manifest save/load round trip and validation") {
    const auto dir = temp_dir() / "mani";
    fs::create_directories(dir);
    Volume v = make_volume(4, 4, 4);
    save_nifti(v, (dir / "s0_t1.nii.gz").string());
    save_nifti(v, (dir / "s0_t2.nii.gz").string());

    DatasetManifest m;
    m.root = dir.string();
    SubjectEntry e;
    e.subject_id = "s0";
    e.site_id = "A";
    e.split = "train";
    e.volumes[ContrastKind::T1w] = "s0_t1.nii.gz";
    e.volumes[ContrastKind::T2w] = "s0_t2.nii.gz";
    m.subjects.push_back(e);
    const auto mpath = (dir / "manifest.json").string();
    save_manifest(m, mpath);

    DatasetManifest r = load_manifest(mpath);
    REQUIRE(r.subjects.size() == 1);
    CHECK(r.subjects[0].subject_id == "s0");
    CHECK(r.subjects[0].volumes.at(ContrastKind::T2w) == "s0_t2.nii.gz");
    CHECK_NOTHROW(validate_manifest(r));

    // A training subject with a single contrast is rejected.
    r.subjects[0].volumes.erase(ContrastKind::T2w);
    CHECK_THROWS(validate_manifest(r));
    // A missing file is rejected.
    DatasetManifest r2 = load_manifest(mpath);
    r2.subjects[0].volumes[ContrastKind::PDw] = "nope.nii.gz";
    CHECK_THROWS(validate_manifest(r2));
}
