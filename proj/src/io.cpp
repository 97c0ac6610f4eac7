#include "vistok/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace vistok::io {

static_assert(std::endian::native == std::endian::little,
              "tensor payloads are written in host order, which must be little-endian");

namespace {

constexpr char kTensorMagic[4] = {'A', 'I', 'T', 'T'};
constexpr char kCheckpointMagic[4] = {'A', 'I', 'T', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <class U>
void put_le(std::ostream& os, U v) {
    unsigned char buf[sizeof(U)];
    for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    os.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

template <class U>
U get_le(std::istream& is) {
    unsigned char buf[sizeof(U)];
    if (!is.read(reinterpret_cast<char*>(buf), sizeof(U))) throw IoError("unexpected end of stream");
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
    return v;
}

template <class T>
constexpr DType dtype_of() {
    if constexpr (std::is_same_v<T, float>) return DType::f32;
    else return DType::f64;
}

}  // namespace

std::size_t dtype_size(DType d) {
    switch (d) {
        case DType::f32: return 4;
        case DType::f64: return 8;
        case DType::i32: return 4;
        case DType::u8: return 1;
    }
    throw IoError("unknown dtype code " + std::to_string(static_cast<int>(d)));
}

std::size_t RawTensor::numel() const {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return n;
}

template <class T>
RawTensor to_raw(const Tensor<T>& t) {
    RawTensor r;
    r.dtype = dtype_of<T>();
    for (auto d : t.shape()) r.dims.push_back(static_cast<std::uint32_t>(d));
    r.payload.resize(t.numel() * sizeof(T));
    std::memcpy(r.payload.data(), t.ptr(), r.payload.size());
    return r;
}

template <class T>
Tensor<T> from_raw(const RawTensor& r) {
    Shape s(r.dims.begin(), r.dims.end());
    Tensor<T> t(s);
    const std::size_t n = r.numel();
    if (r.dtype == DType::f32) {
        std::vector<float> tmp(n);
        std::memcpy(tmp.data(), r.payload.data(), n * sizeof(float));
        for (std::size_t i = 0; i < n; ++i) t[i] = static_cast<T>(tmp[i]);
    } else if (r.dtype == DType::f64) {
        std::vector<double> tmp(n);
        std::memcpy(tmp.data(), r.payload.data(), n * sizeof(double));
        for (std::size_t i = 0; i < n; ++i) t[i] = static_cast<T>(tmp[i]);
    } else {
        throw IoError("expected a floating-point tensor, found dtype code " +
                      std::to_string(static_cast<int>(r.dtype)));
    }
    return t;
}

RawTensor raw_ints(const std::vector<std::uint32_t>& dims, const std::vector<std::int32_t>& values) {
    RawTensor r{DType::i32, dims, {}};
    if (r.numel() != values.size()) throw ShapeError("raw_ints: value count does not match dims");
    r.payload.resize(values.size() * 4);
    std::memcpy(r.payload.data(), values.data(), r.payload.size());
    return r;
}

RawTensor raw_bytes(const std::vector<std::uint32_t>& dims, const std::vector<std::uint8_t>& values) {
    RawTensor r{DType::u8, dims, values};
    if (r.numel() != values.size()) throw ShapeError("raw_bytes: value count does not match dims");
    return r;
}

std::vector<std::int32_t> ints_of(const RawTensor& r) {
    if (r.dtype != DType::i32) throw IoError("expected an i32 tensor");
    std::vector<std::int32_t> v(r.numel());
    std::memcpy(v.data(), r.payload.data(), v.size() * 4);
    return v;
}

std::vector<std::uint8_t> bytes_of(const RawTensor& r) {
    if (r.dtype != DType::u8) throw IoError("expected a u8 tensor");
    return r.payload;
}

void write_tensor(std::ostream& os, const RawTensor& t) {
    if (t.dims.size() > 255) throw IoError("tensor rank exceeds 255");
    os.write(kTensorMagic, 4);
    put_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.dtype));
    put_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.dims.size()));
    for (auto d : t.dims) put_le<std::uint32_t>(os, d);
    os.write(reinterpret_cast<const char*>(t.payload.data()), static_cast<std::streamsize>(t.payload.size()));
}

RawTensor read_tensor(std::istream& is) {
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, kTensorMagic, 4) != 0) {
        throw IoError("bad tensor magic (expected AITT)");
    }
    RawTensor t;
    const auto code = get_le<std::uint8_t>(is);
    if (code > 3) throw IoError("unknown dtype code " + std::to_string(code));
    t.dtype = static_cast<DType>(code);
    const auto ndim = get_le<std::uint8_t>(is);
    for (std::uint8_t i = 0; i < ndim; ++i) t.dims.push_back(get_le<std::uint32_t>(is));
    t.payload.resize(t.numel() * dtype_size(t.dtype));
    if (!is.read(reinterpret_cast<char*>(t.payload.data()), static_cast<std::streamsize>(t.payload.size()))) {
        throw IoError("truncated tensor payload");
    }
    return t;
}

void Checkpoint::put(const std::string& name, RawTensor t) {
    for (auto& [n, r] : records_) {
        if (n == name) {
            r = std::move(t);
            return;
        }
    }
    records_.emplace_back(name, std::move(t));
}

bool Checkpoint::contains(const std::string& name) const {
    for (const auto& [n, r] : records_)
        if (n == name) return true;
    return false;
}

const RawTensor& Checkpoint::raw(const std::string& name) const {
    for (const auto& [n, r] : records_)
        if (n == name) return r;
    throw IoError("checkpoint has no tensor named '" + name + "'");
}

std::string Checkpoint::serialize() const {
    std::ostringstream os(std::ios::binary);
    os.write(kCheckpointMagic, 4);
    put_le<std::uint32_t>(os, kCheckpointVersion);
    const std::string m = manifest.dump();
    put_le<std::uint64_t>(os, m.size());
    os.write(m.data(), static_cast<std::streamsize>(m.size()));
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(records_.size()));
    for (const auto& [name, t] : records_) {
        put_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_tensor(os, t);
    }
    return os.str();
}

Checkpoint Checkpoint::deserialize(const std::string& bytes) {
    std::istringstream is(bytes, std::ios::binary);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
        throw IoError("bad checkpoint magic (expected AITK)");
    }
    const auto version = get_le<std::uint32_t>(is);
    if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
    const auto mlen = get_le<std::uint64_t>(is);
    std::string m(mlen, '\0');
    if (!is.read(m.data(), static_cast<std::streamsize>(mlen))) throw IoError("truncated checkpoint manifest");
    Checkpoint c;
    c.manifest = nlohmann::json::parse(m);
    const auto count = get_le<std::uint32_t>(is);
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto nlen = get_le<std::uint32_t>(is);
        std::string name(nlen, '\0');
        if (!is.read(name.data(), nlen)) throw IoError("truncated record name");
        c.records_.emplace_back(std::move(name), read_tensor(is));
    }
    return c;
}

void atomic_write(const std::filesystem::path& path, const std::string& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw IoError("cannot open '" + tmp.string() + "' for writing");
        os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!os) throw IoError("write failed for '" + tmp.string() + "'");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot rename '" + tmp.string() + "' to '" + path.string() + "': " + ec.message());
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    atomic_write(path, ckpt.serialize());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    try {
        return Checkpoint::deserialize(read_file(path));
    } catch (const IoError& e) {
        throw IoError(path.string() + ": " + e.what());
    }
}

std::string pgm_bytes(const Tensor<float>& img, float lo, float hi) {
    if (img.ndim() != 2) throw ShapeError("pgm_bytes expects a 2-D tensor, got " + shape_str(img.shape()));
    std::ostringstream os(std::ios::binary);
    os << "P5\n" << img.dim(1) << ' ' << img.dim(0) << "\n255\n";
    const float span = hi > lo ? hi - lo : 1.0f;
    for (float v : img.data()) {
        const float t = std::clamp((v - lo) / span, 0.0f, 1.0f);
        os.put(static_cast<char>(static_cast<unsigned char>(t * 255.0f + 0.5f)));
    }
    return os.str();
}

std::string content_hash(const std::string& bytes) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

template RawTensor to_raw(const Tensor<float>&);
template RawTensor to_raw(const Tensor<double>&);
template Tensor<float> from_raw(const RawTensor&);
template Tensor<double> from_raw(const RawTensor&);

}  // namespace vistok::io
