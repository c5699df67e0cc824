#pragma once

#include <string>

#include "mrh/imaging.hpp"

namespace mrh {

// On-disk element types supported by the reader; values are the NIfTI-1
// datatype codes.
enum class NiftiDType : int16_t {
    U8 = 2,
    I16 = 4,
    I32 = 8,
    F32 = 16,
    F64 = 64,
    U16 = 512,
};

// Single-file .nii or .nii.gz, NIfTI-1, little-endian. Voxels are widened to
// float on load; scl_slope/scl_inter are applied when set.
Volume load_nifti(const std::string& path);

// Writes a single-file volume; values are cast to `dt` on disk.
void save_nifti(const Volume& v, const std::string& path, NiftiDType dt = NiftiDType::F32);

}  // namespace mrh
