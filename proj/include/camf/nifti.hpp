#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "camf/tensor.hpp"

namespace camf {

// Minimal single-file NIfTI-1 support: uncompressed .nii, float32/int16/uint8
// payloads, scl_slope/scl_inter scaling, byte order detected from sizeof_hdr.
// Orientation matrices are ignored; volumes come back as [1 x D x H x W] with
// dim[1] fastest-varying.

struct NiftiError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NiftiFormatError : NiftiError {
    using NiftiError::NiftiError;
};
struct NiftiUnsupportedError : NiftiError {
    using NiftiError::NiftiError;
};
struct NiftiTruncatedError : NiftiError {
    using NiftiError::NiftiError;
};

struct VoxelSize {
    float x = 1, y = 1, z = 1;
};

namespace nifti_detail {

constexpr int kHeaderSize = 348;
constexpr std::int16_t kDtUint8 = 2;
constexpr std::int16_t kDtInt16 = 4;
constexpr std::int16_t kDtFloat32 = 16;

template <class V>
V read_at(const std::vector<unsigned char>& buf, std::size_t off, bool swap) {
    V v;
    std::memcpy(&v, buf.data() + off, sizeof(V));
    if (swap && sizeof(V) > 1) {
        unsigned char* p = reinterpret_cast<unsigned char*>(&v);
        for (std::size_t i = 0; i < sizeof(V) / 2; ++i) std::swap(p[i], p[sizeof(V) - 1 - i]);
    }
    return v;
}

template <class V>
void write_at(std::vector<unsigned char>& buf, std::size_t off, V v) {
    std::memcpy(buf.data() + off, &v, sizeof(V));
}

}  // namespace nifti_detail

template <class T>
struct NiftiVolume {
    Tensor<T> data;  // [1 x D x H x W]
    VoxelSize voxel;
};

template <class T>
NiftiVolume<T> read_nifti(const std::string& path) {
    namespace nd = nifti_detail;
    std::ifstream in(path, std::ios::binary);
    if (!in) throw NiftiError("cannot open '" + path + "'");
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() < std::size_t(nd::kHeaderSize))
        throw NiftiTruncatedError("'" + path + "': file shorter than the 348-byte header");

    bool swap = false;
    std::int32_t hdr_size = nd::read_at<std::int32_t>(bytes, 0, false);
    if (hdr_size != nd::kHeaderSize) {
        std::int32_t swapped = nd::read_at<std::int32_t>(bytes, 0, true);
        if (swapped != nd::kHeaderSize)
            throw NiftiFormatError("'" + path + "': sizeof_hdr is neither 348 nor byte-swapped 348");
        swap = true;
    }

    char magic[4];
    std::memcpy(magic, bytes.data() + 344, 4);
    const bool single_file = std::memcmp(magic, "n+1", 3) == 0 && magic[3] == '\0';
    const bool two_file = std::memcmp(magic, "ni1", 3) == 0 && magic[3] == '\0';
    if (!single_file && !two_file)
        throw NiftiFormatError("'" + path + "': magic is neither \"n+1\" nor \"ni1\"");
    if (two_file)
        throw NiftiUnsupportedError("'" + path + "': two-file (hdr/img) NIfTI-1 is not supported");

    std::array<std::int16_t, 8> dim;
    for (int i = 0; i < 8; ++i) dim[i] = nd::read_at<std::int16_t>(bytes, 40 + 2 * std::size_t(i), swap);
    if (dim[0] < 3 || dim[0] > 7)
        throw NiftiFormatError("'" + path + "': dim[0]=" + std::to_string(dim[0]) + ", need a 3-d volume");
    for (int i = 4; i <= dim[0]; ++i)
        if (dim[i] > 1)
            throw NiftiUnsupportedError("'" + path + "': time/extra dimensions are not supported");
    const std::size_t nx = std::size_t(dim[1]), ny = std::size_t(dim[2]), nz = std::size_t(dim[3]);
    if (nx == 0 || ny == 0 || nz == 0) throw NiftiFormatError("'" + path + "': zero extent in dim");

    const std::int16_t datatype = nd::read_at<std::int16_t>(bytes, 70, swap);
    const std::int16_t bitpix = nd::read_at<std::int16_t>(bytes, 72, swap);
    std::size_t elem = 0;
    if (datatype == nd::kDtUint8)
        elem = 1;
    else if (datatype == nd::kDtInt16)
        elem = 2;
    else if (datatype == nd::kDtFloat32)
        elem = 4;
    else
        throw NiftiUnsupportedError("'" + path + "': datatype " + std::to_string(datatype) +
                                    " unsupported (float32, int16, uint8 only)");
    if (std::size_t(bitpix) != elem * 8)
        throw NiftiFormatError("'" + path + "': bitpix " + std::to_string(bitpix) + " disagrees with datatype");

    const float vox_offset_f = nd::read_at<float>(bytes, 108, swap);
    if (vox_offset_f < float(nd::kHeaderSize))
        throw NiftiFormatError("'" + path + "': vox_offset " + std::to_string(vox_offset_f) + " precedes header end");
    const std::size_t vox_offset = std::size_t(vox_offset_f);
    const std::size_t count = nx * ny * nz;
    if (bytes.size() < vox_offset + count * elem)
        throw NiftiTruncatedError("'" + path + "': voxel payload truncated (need " +
                                  std::to_string(vox_offset + count * elem) + " bytes, have " +
                                  std::to_string(bytes.size()) + ")");

    const float scl_slope = nd::read_at<float>(bytes, 112, swap);
    const float scl_inter = nd::read_at<float>(bytes, 116, swap);
    const bool scaled = scl_slope != 0.0f;

    NiftiVolume<T> vol;
    vol.voxel.x = nd::read_at<float>(bytes, 76 + 4, swap);
    vol.voxel.y = nd::read_at<float>(bytes, 76 + 8, swap);
    vol.voxel.z = nd::read_at<float>(bytes, 76 + 12, swap);
    vol.data = Tensor<T>::zeros({1, nz, ny, nx});
    for (std::size_t i = 0; i < count; ++i) {
        double v = 0;
        if (datatype == nd::kDtFloat32)
            v = double(nd::read_at<float>(bytes, vox_offset + 4 * i, swap));
        else if (datatype == nd::kDtInt16)
            v = double(nd::read_at<std::int16_t>(bytes, vox_offset + 2 * i, swap));
        else
            v = double(bytes[vox_offset + i]);
        if (scaled) v = v * double(scl_slope) + double(scl_inter);
        vol.data.data()[i] = T(v);
    }
    return vol;
}

// float32 single-file writer used for dataset emission and round-trip tests.
template <class T>
void write_nifti(const std::string& path, const Tensor<T>& volume, VoxelSize voxel = {}) {
    namespace nd = nifti_detail;
    if (volume.rank() != 4 || volume.shape[0] != 1)
        throw std::invalid_argument("write_nifti expects a [1xDxHxW] volume, got " + shape_str(volume.shape));
    const std::size_t nz = volume.shape[1], ny = volume.shape[2], nx = volume.shape[3];

    std::vector<unsigned char> hdr(352, 0);
    nd::write_at<std::int32_t>(hdr, 0, nd::kHeaderSize);
    nd::write_at<std::int16_t>(hdr, 40, 3);
    nd::write_at<std::int16_t>(hdr, 42, std::int16_t(nx));
    nd::write_at<std::int16_t>(hdr, 44, std::int16_t(ny));
    nd::write_at<std::int16_t>(hdr, 46, std::int16_t(nz));
    for (int i = 4; i < 8; ++i) nd::write_at<std::int16_t>(hdr, 40 + 2 * std::size_t(i), 1);
    nd::write_at<std::int16_t>(hdr, 70, nd::kDtFloat32);
    nd::write_at<std::int16_t>(hdr, 72, 32);
    nd::write_at<float>(hdr, 76, 1.0f);
    nd::write_at<float>(hdr, 80, voxel.x);
    nd::write_at<float>(hdr, 84, voxel.y);
    nd::write_at<float>(hdr, 88, voxel.z);
    nd::write_at<float>(hdr, 108, 352.0f);
    nd::write_at<float>(hdr, 112, 1.0f);
    nd::write_at<float>(hdr, 116, 0.0f);
    hdr[344] = 'n';
    hdr[345] = '+';
    hdr[346] = '1';
    hdr[347] = '\0';

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw NiftiError("cannot create '" + path + "'");
    out.write(reinterpret_cast<const char*>(hdr.data()), std::streamsize(hdr.size()));
    for (std::size_t i = 0; i < volume.numel(); ++i) {
        float v = float(volume.data()[i]);
        out.write(reinterpret_cast<const char*>(&v), 4);
    }
    if (!out) throw NiftiError("short write to '" + path + "'");
}

}  // namespace camf
