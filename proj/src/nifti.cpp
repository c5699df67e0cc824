#include "mrh/nifti.hpp"

#include <zlib.h>

#include <cstring>
#include <vector>

#include "mrh/check.hpp"

namespace mrh {

namespace {

#pragma pack(push, 1)
struct Nifti1Header {
    int32_t sizeof_hdr;     // 348
    char data_type[10];
    char db_name[18];
    int32_t extents;
    int16_t session_error;
    char regular;
    char dim_info;
    int16_t dim[8];
    float intent_p1, intent_p2, intent_p3;
    int16_t intent_code;
    int16_t datatype;
    int16_t bitpix;
    int16_t slice_start;
    float pixdim[8];
    float vox_offset;
    float scl_slope;
    float scl_inter;
    int16_t slice_end;
    char slice_code;
    char xyzt_units;
    float cal_max, cal_min;
    float slice_duration;
    float toffset;
    int32_t glmax, glmin;
    char descrip[80];
    char aux_file[24];
    int16_t qform_code;
    int16_t sform_code;
    float quatern_b, quatern_c, quatern_d;
    float qoffset_x, qoffset_y, qoffset_z;
    float srow_x[4];
    float srow_y[4];
    float srow_z[4];
    char intent_name[16];
    char magic[4];
};
#pragma pack(pop)
static_assert(sizeof(Nifti1Header) == 348, "NIfTI-1 header must be 348 bytes");

int bytes_per_elem(NiftiDType dt) {
    switch (dt) {
        case NiftiDType::U8: return 1;
        case NiftiDType::I16: return 2;
        case NiftiDType::U16: return 2;
        case NiftiDType::I32: return 4;
        case NiftiDType::F32: return 4;
        case NiftiDType::F64: return 8;
    }
    return 0;
}

// gzread handles plain (uncompressed) files transparently, so one read path
// covers .nii and .nii.gz.
struct GzReader {
    gzFile f = nullptr;
    explicit GzReader(const std::string& path) { f = gzopen(path.c_str(), "rb"); }
    ~GzReader() {
        if (f) gzclose(f);
    }
    void read_exact(void* dst, size_t n, const std::string& what) {
        MRH_CHECK(f, "cannot open file");
        size_t got = 0;
        auto* p = static_cast<unsigned char*>(dst);
        while (got < n) {
            const unsigned chunk = static_cast<unsigned>(std::min<size_t>(n - got, 1u << 28));
            const int r = gzread(f, p + got, chunk);
            MRH_CHECK(r > 0, "short read while reading " << what);
            got += size_t(r);
        }
    }
};

struct GzWriter {
    gzFile gz = nullptr;
    FILE* plain = nullptr;
    explicit GzWriter(const std::string& path) {
        if (path.size() > 3 && path.compare(path.size() - 3, 3, ".gz") == 0)
            gz = gzopen(path.c_str(), "wb6");
        else
            plain = std::fopen(path.c_str(), "wb");
        MRH_CHECK(gz || plain, "cannot open " << path << " for writing");
    }
    ~GzWriter() {
        if (gz) gzclose(gz);
        if (plain) std::fclose(plain);
    }
    void write(const void* src, size_t n) {
        if (gz) {
            MRH_CHECK(gzwrite(gz, src, static_cast<unsigned>(n)) == int(n), "short gz write");
        } else {
            MRH_CHECK(std::fwrite(src, 1, n, plain) == n, "short write");
        }
    }
};

template <typename T>
void widen(const std::vector<unsigned char>& raw, std::vector<float>& out) {
    const T* src = reinterpret_cast<const T*>(raw.data());
    for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(src[i]);
}

}  // namespace

Volume load_nifti(const std::string& path) {
    GzReader in(path);
    MRH_CHECK(in.f, "cannot open " << path);
    Nifti1Header h{};
    in.read_exact(&h, sizeof(h), "header");
    MRH_CHECK(std::memcmp(h.magic, "n+1", 4) == 0,
              "not a single-file NIfTI-1 image (bad magic): " << path);
    MRH_CHECK(h.sizeof_hdr == 348, "unsupported header size (byte order?): " << h.sizeof_hdr);
    MRH_CHECK(h.dim[0] >= 1 && h.dim[0] <= 7, "bad dim[0]");
    for (int i = 4; i <= h.dim[0]; ++i)
        MRH_CHECK(h.dim[i] <= 1, "only single 3D images are supported");

    const auto dt = static_cast<NiftiDType>(h.datatype);
    const int bpe = bytes_per_elem(dt);
    MRH_CHECK(bpe > 0, "unsupported NIfTI datatype code " << h.datatype);

    Volume v(std::max<int>(1, h.dim[1]), std::max<int>(1, h.dim[2]), std::max<int>(1, h.dim[3]));
    for (int i = 0; i < 3; ++i)
        v.spacing[size_t(i)] = h.pixdim[i + 1] > 0 ? double(h.pixdim[i + 1]) : 1.0;

    if (h.sform_code > 0) {
        for (int j = 0; j < 4; ++j) {
            v.affine[size_t(0 * 4 + j)] = double(h.srow_x[j]);
            v.affine[size_t(1 * 4 + j)] = double(h.srow_y[j]);
            v.affine[size_t(2 * 4 + j)] = double(h.srow_z[j]);
        }
        v.affine[12] = v.affine[13] = v.affine[14] = 0.0;
        v.affine[15] = 1.0;
    } else {
        v.affine = {v.spacing[0], 0, 0, 0, 0, v.spacing[1], 0, 0,
                    0, 0, v.spacing[2], 0, 0, 0, 0, 1};
    }

    const int64_t offset = int64_t(h.vox_offset);
    MRH_CHECK(offset >= 348, "bad vox_offset");
    std::vector<unsigned char> skip(size_t(offset) - sizeof(h));
    if (!skip.empty()) in.read_exact(skip.data(), skip.size(), "extensions");

    std::vector<unsigned char> raw(size_t(v.size()) * size_t(bpe));
    in.read_exact(raw.data(), raw.size(), "voxel data");

    switch (dt) {
        case NiftiDType::U8: widen<uint8_t>(raw, v.voxels); break;
        case NiftiDType::I16: widen<int16_t>(raw, v.voxels); break;
        case NiftiDType::U16: widen<uint16_t>(raw, v.voxels); break;
        case NiftiDType::I32: widen<int32_t>(raw, v.voxels); break;
        case NiftiDType::F32: widen<float>(raw, v.voxels); break;
        case NiftiDType::F64: widen<double>(raw, v.voxels); break;
    }

    if (h.scl_slope != 0.0f && (h.scl_slope != 1.0f || h.scl_inter != 0.0f)) {
        for (auto& x : v.voxels) x = h.scl_slope * x + h.scl_inter;
    }
    return v;
}

void save_nifti(const Volume& v, const std::string& path, NiftiDType dt) {
    MRH_CHECK(v.nx > 0 && v.ny > 0 && v.nz > 0, "empty volume");
    Nifti1Header h{};
    h.sizeof_hdr = 348;
    h.regular = 'r';
    h.dim[0] = 3;
    h.dim[1] = int16_t(v.nx);
    h.dim[2] = int16_t(v.ny);
    h.dim[3] = int16_t(v.nz);
    for (int i = 4; i < 8; ++i) h.dim[i] = 1;
    h.datatype = int16_t(dt);
    h.bitpix = int16_t(8 * bytes_per_elem(dt));
    h.pixdim[0] = 1.0f;
    for (int i = 0; i < 3; ++i) h.pixdim[i + 1] = float(v.spacing[size_t(i)]);
    h.vox_offset = 352.0f;
    h.scl_slope = 1.0f;
    h.scl_inter = 0.0f;
    h.sform_code = 1;
    h.qform_code = 0;
    for (int j = 0; j < 4; ++j) {
        h.srow_x[j] = float(v.affine[size_t(0 * 4 + j)]);
        h.srow_y[j] = float(v.affine[size_t(1 * 4 + j)]);
        h.srow_z[j] = float(v.affine[size_t(2 * 4 + j)]);
    }
    std::memcpy(h.magic, "n+1", 4);

    GzWriter out(path);
    out.write(&h, sizeof(h));
    const char ext[4] = {0, 0, 0, 0};  // no header extensions
    out.write(ext, 4);

    const size_t n = v.voxels.size();
    switch (dt) {
        case NiftiDType::F32: {
            out.write(v.voxels.data(), n * 4);
            break;
        }
        case NiftiDType::F64: {
            std::vector<double> buf(n);
            for (size_t i = 0; i < n; ++i) buf[i] = double(v.voxels[i]);
            out.write(buf.data(), n * 8);
            break;
        }
        case NiftiDType::U8: {
            std::vector<uint8_t> buf(n);
            for (size_t i = 0; i < n; ++i) buf[i] = uint8_t(v.voxels[i]);
            out.write(buf.data(), n);
            break;
        }
        case NiftiDType::I16: {
            std::vector<int16_t> buf(n);
            for (size_t i = 0; i < n; ++i) buf[i] = int16_t(v.voxels[i]);
            out.write(buf.data(), n * 2);
            break;
        }
        case NiftiDType::U16: {
            std::vector<uint16_t> buf(n);
            for (size_t i = 0; i < n; ++i) buf[i] = uint16_t(v.voxels[i]);
            out.write(buf.data(), n * 2);
            break;
        }
        case NiftiDType::I32: {
            std::vector<int32_t> buf(n);
            for (size_t i = 0; i < n; ++i) buf[i] = int32_t(v.voxels[i]);
            out.write(buf.data(), n * 4);
            break;
        }
    }
}

}  // namespace mrh
