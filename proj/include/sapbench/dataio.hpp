#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "sapbench/errors.hpp"
#include "sapbench/tensor.hpp"

namespace sap {

// On-disk tensor container: magic "SAPT", version u8, dtype u8, ndim u8,
// ndim×u32 dims, then the row-major payload — all little-endian, no padding,
// no compression. Bit-exact round trips are the contract.
enum class SaptDtype : std::uint8_t { F32 = 0, F64 = 1, U32 = 2 };

inline std::size_t sapt_dtype_size(SaptDtype d) {
    switch (d) {
        case SaptDtype::F32: return 4;
        case SaptDtype::F64: return 8;
        case SaptDtype::U32: return 4;
    }
    throw InternalError("sapt_dtype_size: unknown dtype");
}

template <typename T>
inline constexpr SaptDtype sapt_dtype_of = SaptDtype::F32;
template <>
inline constexpr SaptDtype sapt_dtype_of<double> = SaptDtype::F64;
template <>
inline constexpr SaptDtype sapt_dtype_of<std::uint32_t> = SaptDtype::U32;

// dtype + shape + raw little-endian payload bytes, decoupled from the scalar
// type so readers can inspect before committing to one.
struct SaptRaw {
    SaptDtype dtype = SaptDtype::F32;
    Shape shape;
    std::string payload;
};

SaptRaw read_sapt_raw(const std::filesystem::path& path);
void write_sapt_raw(const std::filesystem::path& path, const SaptRaw& raw);

namespace detail {

// Little-endian scalar codecs; bulk memcpy on little-endian hosts.
void encode_payload_f32(std::span<const float> v, std::string& out);
void encode_payload_f64(std::span<const double> v, std::string& out);
void encode_payload_u32(std::span<const std::uint32_t> v, std::string& out);
void decode_payload_f32(const std::string& bytes, std::span<float> out);
void decode_payload_f64(const std::string& bytes, std::span<double> out);
void decode_payload_u32(const std::string& bytes, std::span<std::uint32_t> out);

}  // namespace detail

template <typename T>
void write_tensor(const std::filesystem::path& path, const Tensor<T>& t) {
    SaptRaw raw;
    raw.dtype = sapt_dtype_of<T>;
    raw.shape = t.shape();
    if constexpr (std::is_same_v<T, float>)
        detail::encode_payload_f32(t.data(), raw.payload);
    else
        detail::encode_payload_f64(t.data(), raw.payload);
    write_sapt_raw(path, raw);
}

// Strict dtype match: no silent narrowing or widening on the typed reader.
template <typename T>
Tensor<T> read_tensor(const std::filesystem::path& path) {
    SaptRaw raw = read_sapt_raw(path);
    if (raw.dtype != sapt_dtype_of<T>)
        throw FormatError(path.string() + ": dtype " + std::to_string(static_cast<int>(raw.dtype)) +
                          " does not match the requested scalar type");
    Tensor<T> t(raw.shape);
    if constexpr (std::is_same_v<T, float>)
        detail::decode_payload_f32(raw.payload, t.data());
    else
        detail::decode_payload_f64(raw.payload, t.data());
    return t;
}

void write_labels(const std::filesystem::path& path, std::span<const std::uint32_t> labels);
std::vector<std::uint32_t> read_labels(const std::filesystem::path& path);

// Small image-classification dataset: N×C×H×W pixels in [0,255] plus labels.
template <typename T>
struct Dataset {
    Tensor<T> images;  // N×C×H×W
    std::vector<std::uint32_t> labels;
    std::size_t class_count = 0;
    std::string split = "train";

    std::size_t size() const { return labels.size(); }
};

template <typename T>
void validate_dataset(const Dataset<T>& ds) {
    const Shape& s = ds.images.shape();
    if (s.size() != 4)
        throw DataError("dataset: images must be N x C x H x W, got " + shape_str(s));
    if (s[0] != ds.labels.size())
        throw DataError("dataset: " + std::to_string(s[0]) + " images but " + std::to_string(ds.labels.size()) +
                        " labels");
    if (ds.class_count == 0) throw DataError("dataset: class count must be positive");
    for (std::size_t i = 0; i < ds.labels.size(); ++i)
        if (ds.labels[i] >= ds.class_count)
            throw DataError("dataset: label " + std::to_string(ds.labels[i]) + " at index " + std::to_string(i) +
                            " outside [0, " + std::to_string(ds.class_count) + ")");
    auto v = ds.images.data();
    for (std::size_t i = 0; i < v.size(); ++i)
        if (!(static_cast<double>(v[i]) >= 0.0 && static_cast<double>(v[i]) <= 255.0))
            throw DataError("dataset: pixel " + std::to_string(static_cast<double>(v[i])) + " at flat index " +
                            std::to_string(i) + " outside [0, 255]");
}

namespace detail {

// Rows `indices` of a leading-axis batch tensor, copied into fresh storage.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& batch, const Shape& per_example, std::span<const std::size_t> indices) {
    Shape shape{indices.size()};
    shape.insert(shape.end(), per_example.begin(), per_example.end());
    Tensor<T> out(shape);
    const std::size_t row = shape_numel(per_example);
    auto src = batch.data();
    auto dst = out.data();
    for (std::size_t i = 0; i < indices.size(); ++i)
        for (std::size_t j = 0; j < row; ++j) dst[i * row + j] = src[indices[i] * row + j];
    return out;
}

struct DatasetMeta {
    std::size_t class_count = 0;  // 0 = absent, infer from labels
    std::string split = "train";
};

DatasetMeta read_dataset_meta(const std::filesystem::path& dir);
void write_dataset_meta(const std::filesystem::path& dir, std::size_t class_count, const std::string& split,
                        std::size_t n);

}  // namespace detail

template <typename T>
void save_dataset(const std::filesystem::path& dir, const Dataset<T>& ds) {
    validate_dataset(ds);
    std::filesystem::create_directories(dir);
    write_tensor(dir / "images.sapt", ds.images);
    write_labels(dir / "labels.sapt", ds.labels);
    detail::write_dataset_meta(dir, ds.class_count, ds.split, ds.size());
}

// Reads images.sapt + labels.sapt (+ optional meta.json). f32 images widen
// exactly into a double dataset; every other dtype mix is an error.
template <typename T>
Dataset<T> load_dataset(const std::filesystem::path& dir) {
    const auto images_path = dir / "images.sapt";
    const auto labels_path = dir / "labels.sapt";
    Dataset<T> ds;
    SaptRaw raw = read_sapt_raw(images_path);
    if (raw.dtype == sapt_dtype_of<T>) {
        ds.images = Tensor<T>(raw.shape);
        if constexpr (std::is_same_v<T, float>)
            detail::decode_payload_f32(raw.payload, ds.images.data());
        else
            detail::decode_payload_f64(raw.payload, ds.images.data());
    } else if (std::is_same_v<T, double> && raw.dtype == SaptDtype::F32) {
        Tensor<float> narrow(raw.shape);
        detail::decode_payload_f32(raw.payload, narrow.data());
        ds.images = Tensor<T>(raw.shape);
        auto src = narrow.data();
        auto dst = ds.images.data();
        for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<T>(src[i]);
    } else {
        throw FormatError(images_path.string() + ": image dtype incompatible with the requested precision");
    }
    ds.labels = read_labels(labels_path);
    detail::DatasetMeta meta = detail::read_dataset_meta(dir);
    if (meta.class_count > 0) {
        ds.class_count = meta.class_count;
    } else {
        std::uint32_t top = 0;
        for (std::uint32_t l : ds.labels) top = std::max(top, l);
        ds.class_count = ds.labels.empty() ? 1 : top + 1;
    }
    ds.split = meta.split;
    validate_dataset(ds);
    return ds;
}

// Deterministic synthetic image classes: one oriented sinusoid grating per
// class, mid-gray offset, Gaussian pixel noise, clipped to [0,255] and rounded
// to integral pixels. Labels interleave classes (label i = i mod classes).
template <typename T>
Dataset<T> synth_dataset(std::size_t n_per_class, std::size_t classes, std::size_t image_size, double noise_std,
                         std::uint64_t seed);

extern template Dataset<float> synth_dataset<float>(std::size_t, std::size_t, std::size_t, double, std::uint64_t);
extern template Dataset<double> synth_dataset<double>(std::size_t, std::size_t, std::size_t, double, std::uint64_t);

}  // namespace sap
