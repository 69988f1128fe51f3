#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace mergelab {

enum class dtype { f32, f16, bf16 };

const char * to_string(dtype t);          // safetensors spelling: "F32", "F16", "BF16"
dtype parse_dtype(const std::string & s); // throws error_kind::dtype
std::size_t dtype_size(dtype t);

using shape_t = std::vector<std::int64_t>;

std::size_t numel(const shape_t & shape);
std::string shape_str(const shape_t & shape);

// A named parameter tensor. Data is always float32 in memory; `dtype` is the
// on-disk type it was read from and will be written as by default.
struct tensor {
    shape_t shape;
    dtype type = dtype::f32;
    std::vector<float> data;

    tensor() = default;
    tensor(shape_t shape_, std::vector<float> data_, dtype type_ = dtype::f32);

    std::size_t size() const { return data.size(); }
    std::span<const float> values() const { return data; }

    // Same shape and dtype, zero-filled.
    tensor zeros_like() const;
};

// Tensors keyed by name. std::map gives lexicographic iteration order.
struct checkpoint {
    std::map<std::string, tensor> tensors;
    std::map<std::string, std::string> metadata;

    bool empty() const { return tensors.empty(); }
    const tensor & at(const std::string & name) const;
    std::size_t parameter_count() const;

    // Throws validation errors for empty names, bad shapes or non-finite values.
    void validate() const;

    // Tensor data equality (metadata ignored).
    bool same_tensors(const checkpoint & other) const;
};

struct signature_entry {
    std::string name;
    shape_t shape;
    dtype type;

    bool operator==(const signature_entry &) const = default;
};

struct shape_signature {
    std::vector<signature_entry> entries;

    bool operator==(const shape_signature &) const = default;
};

shape_signature signature_of(const checkpoint & c);

// Returns the shared signature, or throws a mismatch error listing up to the
// first 10 differences.
shape_signature check_compatible(const checkpoint & a, const checkpoint & b);

// Safetensors container I/O.
checkpoint load_checkpoint(const std::filesystem::path & path);
checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes);

// Writes every tensor as `type` (ignoring each tensor's own dtype).
void save_checkpoint(const checkpoint & c, const std::filesystem::path & path, dtype type);
// Writes each tensor with its own dtype.
void save_checkpoint(const checkpoint & c, const std::filesystem::path & path);
std::vector<std::uint8_t> serialize_checkpoint(const checkpoint & c, const dtype * force_type = nullptr);

} // namespace mergelab
