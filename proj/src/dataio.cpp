#include "sapbench/dataio.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numbers>

#include <nlohmann/json.hpp>

#include "sapbench/rng.hpp"

namespace sap {
namespace {

constexpr char kMagic[4] = {'S', 'A', 'P', 'T'};
constexpr std::uint8_t kVersion = 1;

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big,
              "mixed-endian hosts are not supported");

void append_u32le(std::string& out, std::uint32_t v) {
    out.push_back(static_cast<char>(v & 0xFF));
    out.push_back(static_cast<char>((v >> 8) & 0xFF));
    out.push_back(static_cast<char>((v >> 16) & 0xFF));
    out.push_back(static_cast<char>((v >> 24) & 0xFF));
}

std::uint32_t load_u32le(const char* p) {
    const auto b = [&](int i) { return static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])); };
    return b(0) | (b(1) << 8) | (b(2) << 16) | (b(3) << 24);
}

template <typename Scalar, typename Word>
void encode_words(std::span<const Scalar> v, std::string& out) {
    static_assert(sizeof(Scalar) == sizeof(Word));
    out.reserve(out.size() + v.size() * sizeof(Word));
    if constexpr (std::endian::native == std::endian::little) {
        out.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(Word));
    } else {
        for (const Scalar& s : v) {
            Word w;
            std::memcpy(&w, &s, sizeof(Word));
            for (std::size_t i = 0; i < sizeof(Word); ++i)
                out.push_back(static_cast<char>((w >> (8 * i)) & 0xFF));
        }
    }
}

template <typename Scalar, typename Word>
void decode_words(const std::string& bytes, std::span<Scalar> out) {
    static_assert(sizeof(Scalar) == sizeof(Word));
    if (bytes.size() != out.size() * sizeof(Word))
        throw InternalError("sapt payload size does not match destination");
    if constexpr (std::endian::native == std::endian::little) {
        std::memcpy(out.data(), bytes.data(), bytes.size());
    } else {
        for (std::size_t j = 0; j < out.size(); ++j) {
            Word w = 0;
            for (std::size_t i = 0; i < sizeof(Word); ++i)
                w |= static_cast<Word>(static_cast<unsigned char>(bytes[j * sizeof(Word) + i])) << (8 * i);
            std::memcpy(&out[j], &w, sizeof(Word));
        }
    }
}

}  // namespace

namespace detail {

void encode_payload_f32(std::span<const float> v, std::string& out) { encode_words<float, std::uint32_t>(v, out); }
void encode_payload_f64(std::span<const double> v, std::string& out) { encode_words<double, std::uint64_t>(v, out); }
void encode_payload_u32(std::span<const std::uint32_t> v, std::string& out) {
    encode_words<std::uint32_t, std::uint32_t>(v, out);
}
void decode_payload_f32(const std::string& bytes, std::span<float> out) {
    decode_words<float, std::uint32_t>(bytes, out);
}
void decode_payload_f64(const std::string& bytes, std::span<double> out) {
    decode_words<double, std::uint64_t>(bytes, out);
}
void decode_payload_u32(const std::string& bytes, std::span<std::uint32_t> out) {
    decode_words<std::uint32_t, std::uint32_t>(bytes, out);
}

}  // namespace detail

SaptRaw read_sapt_raw(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw DataError("read failed on " + path.string());

    const auto fail = [&](std::size_t offset, const std::string& why) {
        throw FormatError(path.string() + ": " + why + " at byte " + std::to_string(offset));
    };
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) fail(0, "bad magic");
    if (bytes.size() < 5) fail(4, "truncated before version");
    if (static_cast<std::uint8_t>(bytes[4]) != kVersion)
        fail(4, "unsupported version " + std::to_string(static_cast<unsigned>(static_cast<std::uint8_t>(bytes[4]))));
    if (bytes.size() < 6) fail(5, "truncated before dtype");
    const auto dtype_byte = static_cast<std::uint8_t>(bytes[5]);
    if (dtype_byte > 2) fail(5, "unknown dtype " + std::to_string(static_cast<unsigned>(dtype_byte)));
    if (bytes.size() < 7) fail(6, "truncated before rank");
    const auto ndim = static_cast<std::size_t>(static_cast<std::uint8_t>(bytes[6]));

    SaptRaw raw;
    raw.dtype = static_cast<SaptDtype>(dtype_byte);
    std::size_t offset = 7;
    std::size_t numel = 1;
    for (std::size_t d = 0; d < ndim; ++d) {
        if (bytes.size() < offset + 4) fail(offset, "truncated dimension " + std::to_string(d));
        const std::uint32_t dim = load_u32le(bytes.data() + offset);
        if (dim != 0 && numel > std::numeric_limits<std::size_t>::max() / dim)
            fail(offset, "dimension product overflows");
        numel *= dim;
        raw.shape.push_back(dim);
        offset += 4;
    }
    const std::size_t want = numel * sapt_dtype_size(raw.dtype);
    const std::size_t have = bytes.size() - offset;
    if (have != want)
        fail(offset, "payload holds " + std::to_string(have) + " bytes, header requires " + std::to_string(want));
    raw.payload = bytes.substr(offset);
    return raw;
}

void write_sapt_raw(const std::filesystem::path& path, const SaptRaw& raw) {
    if (raw.shape.size() > 255) throw InputError("sapt: rank above 255 is not representable");
    std::size_t numel = 1;
    for (std::size_t d : raw.shape) {
        if (d > std::numeric_limits<std::uint32_t>::max())
            throw InputError("sapt: dimension above u32 range is not representable");
        numel *= d;
    }
    if (raw.payload.size() != numel * sapt_dtype_size(raw.dtype))
        throw InternalError("sapt: payload size disagrees with shape");

    std::string bytes;
    bytes.reserve(7 + 4 * raw.shape.size() + raw.payload.size());
    bytes.append(kMagic, 4);
    bytes.push_back(static_cast<char>(kVersion));
    bytes.push_back(static_cast<char>(raw.dtype));
    bytes.push_back(static_cast<char>(raw.shape.size()));
    for (std::size_t d : raw.shape) append_u32le(bytes, static_cast<std::uint32_t>(d));
    bytes += raw.payload;

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open " + path.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw DataError("write failed on " + path.string());
}

void write_labels(const std::filesystem::path& path, std::span<const std::uint32_t> labels) {
    SaptRaw raw;
    raw.dtype = SaptDtype::U32;
    raw.shape = {labels.size()};
    detail::encode_payload_u32(labels, raw.payload);
    write_sapt_raw(path, raw);
}

std::vector<std::uint32_t> read_labels(const std::filesystem::path& path) {
    SaptRaw raw = read_sapt_raw(path);
    if (raw.dtype != SaptDtype::U32)
        throw FormatError(path.string() + ": labels must be u32, found dtype " +
                          std::to_string(static_cast<int>(raw.dtype)));
    if (raw.shape.size() != 1)
        throw FormatError(path.string() + ": labels must be one-dimensional, found " + shape_str(raw.shape));
    std::vector<std::uint32_t> labels(raw.shape[0]);
    detail::decode_payload_u32(raw.payload, labels);
    return labels;
}

namespace detail {

DatasetMeta read_dataset_meta(const std::filesystem::path& dir) {
    DatasetMeta meta;
    const auto path = dir / "meta.json";
    std::ifstream in(path);
    if (!in) return meta;
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    if (doc.contains("class_count")) meta.class_count = doc["class_count"].get<std::size_t>();
    if (doc.contains("split")) meta.split = doc["split"].get<std::string>();
    return meta;
}

void write_dataset_meta(const std::filesystem::path& dir, std::size_t class_count, const std::string& split,
                        std::size_t n) {
    nlohmann::json doc;
    doc["class_count"] = class_count;
    doc["split"] = split;
    doc["n"] = n;
    std::ofstream out(dir / "meta.json");
    if (!out) throw DataError("cannot open " + (dir / "meta.json").string() + " for writing");
    out << doc.dump(2) << '\n';
    if (!out) throw DataError("write failed on " + (dir / "meta.json").string());
}

}  // namespace detail

namespace {

// Class templates: sinusoid gratings with per-class orientation, frequency,
// and phase. Distinct classes stay linearly separable even before noise.
double grating(std::size_t cls, std::size_t classes, double u, double v) {
    const double theta = std::numbers::pi * static_cast<double>(cls) / static_cast<double>(classes);
    const double freq = 1.5 + static_cast<double>(cls % 3);
    const double phase = 2.0 * std::numbers::pi * static_cast<double>(cls) / static_cast<double>(classes);
    const double t = std::cos(theta) * u + std::sin(theta) * v;
    return 127.5 + 127.5 * std::sin(2.0 * std::numbers::pi * freq * t + phase);
}

}  // namespace

template <typename T>
Dataset<T> synth_dataset(std::size_t n_per_class, std::size_t classes, std::size_t image_size, double noise_std,
                         std::uint64_t seed) {
    if (n_per_class == 0 || classes == 0 || image_size == 0)
        throw InputError("synth_dataset: sizes must be positive");
    if (noise_std < 0.0) throw InputError("synth_dataset: noise level must be non-negative");

    const std::size_t n = n_per_class * classes;
    Dataset<T> ds;
    ds.images = Tensor<T>(Shape{n, 1, image_size, image_size});
    ds.labels.resize(n);
    ds.class_count = classes;

    RngStream root(seed);
    auto pixels = ds.images.data();
    const std::size_t hw = image_size * image_size;
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t cls = i % classes;
        ds.labels[i] = static_cast<std::uint32_t>(cls);
        RngStream ex = root.fork(i, 0x44);
        for (std::size_t r = 0; r < image_size; ++r) {
            for (std::size_t c = 0; c < image_size; ++c) {
                const double u = static_cast<double>(c) / static_cast<double>(image_size);
                const double v = static_cast<double>(r) / static_cast<double>(image_size);
                double p = grating(cls, classes, u, v);
                if (noise_std > 0.0) p += noise_std * ex.normal();
                p = std::clamp(p, 0.0, 255.0);
                pixels[i * hw + r * image_size + c] = static_cast<T>(std::nearbyint(p));
            }
        }
    }
    return ds;
}

template Dataset<float> synth_dataset<float>(std::size_t, std::size_t, std::size_t, double, std::uint64_t);
template Dataset<double> synth_dataset<double>(std::size_t, std::size_t, std::size_t, double, std::uint64_t);

}  // namespace sap
