#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "vistok/tensor.hpp"

namespace vistok::io {

// Raw tensor stream: "AITT", u8 dtype code, u8 ndim, ndim x u32 LE dims, LE payload.
enum class DType : std::uint8_t { f32 = 0, f64 = 1, i32 = 2, u8 = 3 };

std::size_t dtype_size(DType d);

struct RawTensor {
    DType dtype = DType::f32;
    std::vector<std::uint32_t> dims;
    std::vector<std::uint8_t> payload;

    std::size_t numel() const;
};

template <class T>
RawTensor to_raw(const Tensor<T>& t);
// Converts between f32/f64 on load; integer payloads are rejected.
template <class T>
Tensor<T> from_raw(const RawTensor& r);

RawTensor raw_ints(const std::vector<std::uint32_t>& dims, const std::vector<std::int32_t>& values);
RawTensor raw_bytes(const std::vector<std::uint32_t>& dims, const std::vector<std::uint8_t>& values);
std::vector<std::int32_t> ints_of(const RawTensor& r);
std::vector<std::uint8_t> bytes_of(const RawTensor& r);

void write_tensor(std::ostream& os, const RawTensor& t);
RawTensor read_tensor(std::istream& is);

// Ordered (name, tensor) records behind a JSON manifest header:
// "AITK", u32 version, u64 manifest bytes, manifest, u32 count, then per record
// u32 name bytes, name, raw tensor.
class Checkpoint {
public:
    nlohmann::json manifest = nlohmann::json::object();

    void put(const std::string& name, RawTensor t);
    template <class T>
    void put(const std::string& name, const Tensor<T>& t) {
        put(name, to_raw(t));
    }
    bool contains(const std::string& name) const;
    const RawTensor& raw(const std::string& name) const;
    template <class T>
    Tensor<T> get(const std::string& name) const {
        return from_raw<T>(raw(name));
    }
    const std::vector<std::pair<std::string, RawTensor>>& records() const { return records_; }

    std::string serialize() const;
    static Checkpoint deserialize(const std::string& bytes);

private:
    std::vector<std::pair<std::string, RawTensor>> records_;
};

// Writes to a sibling temp file and renames over the target.
void atomic_write(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// 8-bit binary PGM preview, values scaled from [lo, hi].
std::string pgm_bytes(const Tensor<float>& image2d, float lo, float hi);

// FNV-1a 64-bit content hash rendered as 16 hex digits.
std::string content_hash(const std::string& bytes);

}  // namespace vistok::io
