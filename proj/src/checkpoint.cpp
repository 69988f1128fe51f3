#include "mergelab/checkpoint.hpp"

#include "mergelab/error.hpp"
#include "mergelab/half.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

namespace mergelab {

using json = nlohmann::json;

const char * to_string(dtype t) {
    switch (t) {
        case dtype::f32:  return "F32";
        case dtype::f16:  return "F16";
        case dtype::bf16: return "BF16";
    }
    return "?";
}

dtype parse_dtype(const std::string & s) {
    if (s == "F32" || s == "float32")  return dtype::f32;
    if (s == "F16" || s == "float16")  return dtype::f16;
    if (s == "BF16" || s == "bfloat16") return dtype::bf16;
    fail(error_kind::dtype, "unsupported dtype '" + s + "'");
}

std::size_t dtype_size(dtype t) {
    return t == dtype::f32 ? 4 : 2;
}

std::size_t numel(const shape_t & shape) {
    std::size_t n = 1;
    for (auto d : shape) {
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

std::string shape_str(const shape_t & shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

tensor::tensor(shape_t shape_, std::vector<float> data_, dtype type_)
    : shape(std::move(shape_)), type(type_), data(std::move(data_)) {
    for (auto d : shape) {
        if (d <= 0) {
            fail(error_kind::validation, "tensor shape " + shape_str(shape) + " has a non-positive dimension");
        }
    }
    if (data.size() != numel(shape)) {
        fail(error_kind::validation, "tensor buffer has " + std::to_string(data.size()) +
                                         " elements but shape " + shape_str(shape) + " needs " +
                                         std::to_string(numel(shape)));
    }
}

tensor tensor::zeros_like() const {
    tensor t;
    t.shape = shape;
    t.type = type;
    t.data.assign(data.size(), 0.0f);
    return t;
}

const tensor & checkpoint::at(const std::string & name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) {
        fail(error_kind::argument, "no tensor named '" + name + "'");
    }
    return it->second;
}

std::size_t checkpoint::parameter_count() const {
    std::size_t n = 0;
    for (const auto & [_, t] : tensors) {
        n += t.size();
    }
    return n;
}

void checkpoint::validate() const {
    for (const auto & [name, t] : tensors) {
        if (name.empty()) {
            fail(error_kind::validation, "empty tensor name");
        }
        for (auto d : t.shape) {
            if (d <= 0) {
                fail(error_kind::validation, "tensor '" + name + "' has non-positive dimension");
            }
        }
        if (t.data.size() != numel(t.shape)) {
            fail(error_kind::validation, "tensor '" + name + "' buffer length does not match shape");
        }
        for (std::size_t i = 0; i < t.data.size(); ++i) {
            if (!std::isfinite(t.data[i])) {
                fail(error_kind::validation,
                     "tensor '" + name + "' has a non-finite value at flat index " + std::to_string(i));
            }
        }
    }
}

bool checkpoint::same_tensors(const checkpoint & other) const {
    if (tensors.size() != other.tensors.size()) {
        return false;
    }
    auto it = other.tensors.begin();
    for (const auto & [name, t] : tensors) {
        if (name != it->first || t.shape != it->second.shape || t.type != it->second.type) {
            return false;
        }
        if (t.data.size() != it->second.data.size() ||
            std::memcmp(t.data.data(), it->second.data.data(), t.data.size() * sizeof(float)) != 0) {
            return false;
        }
        ++it;
    }
    return true;
}

shape_signature signature_of(const checkpoint & c) {
    shape_signature sig;
    sig.entries.reserve(c.tensors.size());
    for (const auto & [name, t] : c.tensors) {
        sig.entries.push_back({name, t.shape, t.type});
    }
    return sig;
}

shape_signature check_compatible(const checkpoint & a, const checkpoint & b) {
    std::vector<std::string> diffs;
    auto ia = a.tensors.begin();
    auto ib = b.tensors.begin();
    while (ia != a.tensors.end() || ib != b.tensors.end()) {
        if (ib == b.tensors.end() || (ia != a.tensors.end() && ia->first < ib->first)) {
            diffs.push_back("'" + ia->first + "' only in first checkpoint");
            ++ia;
        } else if (ia == a.tensors.end() || ib->first < ia->first) {
            diffs.push_back("'" + ib->first + "' only in second checkpoint");
            ++ib;
        } else {
            const auto & ta = ia->second;
            const auto & tb = ib->second;
            if (ta.shape != tb.shape) {
                diffs.push_back("'" + ia->first + "' shape " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
            } else if (ta.type != tb.type) {
                diffs.push_back("'" + ia->first + "' dtype " + to_string(ta.type) + " vs " + to_string(tb.type));
            }
            ++ia;
            ++ib;
        }
    }
    if (!diffs.empty()) {
        std::string msg = "checkpoints are not compatible (" + std::to_string(diffs.size()) + " mismatches)";
        for (std::size_t i = 0; i < diffs.size() && i < 10; ++i) {
            msg += "\n  " + diffs[i];
        }
        fail(error_kind::mismatch, msg);
    }
    return signature_of(a);
}

static std::uint64_t read_u64_le(const std::uint8_t * p) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) {
        v = (v << 8) | p[i];
    }
    return v;
}

static void write_u64_le(std::vector<std::uint8_t> & out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
}

checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 8) {
        fail(error_kind::format, "file too short for a header length");
    }
    const std::uint64_t header_len = read_u64_le(bytes.data());
    if (header_len > bytes.size() - 8) {
        fail(error_kind::format, "header length " + std::to_string(header_len) + " exceeds file size");
    }
    const auto * header_begin = reinterpret_cast<const char *>(bytes.data() + 8);
    json header;
    try {
        header = json::parse(header_begin, header_begin + header_len);
    } catch (const json::parse_error & e) {
        fail(error_kind::format, std::string("header is not valid JSON: ") + e.what());
    }
    if (!header.is_object()) {
        fail(error_kind::format, "header is not a JSON object");
    }

    const std::uint8_t * buffer = bytes.data() + 8 + header_len;
    const std::size_t buffer_len = bytes.size() - 8 - header_len;

    checkpoint c;
    struct span_info {
        std::uint64_t begin, end;
        std::string name;
    };
    std::vector<span_info> spans;

    for (const auto & [name, entry] : header.items()) {
        if (name == "__metadata__") {
            if (!entry.is_object()) {
                fail(error_kind::format, "__metadata__ must be an object");
            }
            for (const auto & [k, v] : entry.items()) {
                if (!v.is_string()) {
                    fail(error_kind::format, "__metadata__ value for '" + k + "' is not a string");
                }
                c.metadata[k] = v.get<std::string>();
            }
            continue;
        }
        if (name.empty()) {
            fail(error_kind::validation, "empty tensor name");
        }
        if (!entry.is_object() || !entry.contains("dtype") || !entry.contains("shape") ||
            !entry.contains("data_offsets")) {
            fail(error_kind::format, "tensor '" + name + "' header entry is incomplete");
        }
        const auto & jd = entry["dtype"];
        const auto & js = entry["shape"];
        const auto & jo = entry["data_offsets"];
        if (!jd.is_string() || !js.is_array() || !jo.is_array() || jo.size() != 2 ||
            !jo[0].is_number_unsigned() || !jo[1].is_number_unsigned()) {
            fail(error_kind::format, "tensor '" + name + "' header entry is malformed");
        }
        const dtype type = parse_dtype(jd.get<std::string>());
        shape_t shape;
        for (const auto & d : js) {
            if (!d.is_number_integer() || d.get<std::int64_t>() <= 0) {
                fail(error_kind::format, "tensor '" + name + "' has an invalid dimension");
            }
            shape.push_back(d.get<std::int64_t>());
        }
        const auto begin = jo[0].get<std::uint64_t>();
        const auto end = jo[1].get<std::uint64_t>();
        const std::size_t n = numel(shape);
        if (end < begin || end - begin != n * dtype_size(type)) {
            fail(error_kind::format, "tensor '" + name + "' data_offsets do not match its shape and dtype");
        }
        if (end > buffer_len) {
            fail(error_kind::format, "tensor '" + name + "' data extends past end of file (truncated?)");
        }
        spans.push_back({begin, end, name});

        std::vector<float> data(n);
        const std::uint8_t * p = buffer + begin;
        switch (type) {
            case dtype::f32:
                for (std::size_t i = 0; i < n; ++i) {
                    std::uint32_t bits = 0;
                    for (int b = 3; b >= 0; --b) bits = (bits << 8) | p[4 * i + b];
                    data[i] = std::bit_cast<float>(bits);
                }
                break;
            case dtype::f16:
                for (std::size_t i = 0; i < n; ++i) {
                    data[i] = half_to_float(static_cast<std::uint16_t>(p[2 * i] | (p[2 * i + 1] << 8)));
                }
                break;
            case dtype::bf16:
                for (std::size_t i = 0; i < n; ++i) {
                    data[i] = bf16_to_float(static_cast<std::uint16_t>(p[2 * i] | (p[2 * i + 1] << 8)));
                }
                break;
        }
        for (std::size_t i = 0; i < n; ++i) {
            if (!std::isfinite(data[i])) {
                fail(error_kind::validation,
                     "tensor '" + name + "' has a non-finite value at flat index " + std::to_string(i));
            }
        }
        tensor t;
        t.shape = std::move(shape);
        t.type = type;
        t.data = std::move(data);
        c.tensors.emplace(name, std::move(t));
    }

    // The data buffer must be covered exactly, without holes or overlaps.
    std::sort(spans.begin(), spans.end(), [](const auto & x, const auto & y) { return x.begin < y.begin; });
    std::uint64_t cursor = 0;
    for (const auto & s : spans) {
        if (s.begin != cursor) {
            fail(error_kind::format, "tensor '" + s.name + "' data_offsets leave a hole or overlap");
        }
        cursor = s.end;
    }
    if (cursor != buffer_len) {
        fail(error_kind::format, "data section is " + std::to_string(buffer_len) + " bytes but tensors cover " +
                                     std::to_string(cursor));
    }
    return c;
}

checkpoint load_checkpoint(const std::filesystem::path & path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        fail(error_kind::io, "cannot open '" + path.string() + "'");
    }
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) {
        fail(error_kind::io, "read failed for '" + path.string() + "'");
    }
    return parse_checkpoint(bytes);
}

std::vector<std::uint8_t> serialize_checkpoint(const checkpoint & c, const dtype * force_type) {
    c.validate();
    json header = json::object();
    std::vector<std::uint8_t> data;
    for (const auto & [name, t] : c.tensors) {
        const dtype type = force_type ? *force_type : t.type;
        const std::uint64_t begin = data.size();
        switch (type) {
            case dtype::f32:
                for (float v : t.data) {
                    const auto bits = std::bit_cast<std::uint32_t>(v);
                    for (int b = 0; b < 4; ++b) data.push_back(static_cast<std::uint8_t>(bits >> (8 * b)));
                }
                break;
            case dtype::f16:
            case dtype::bf16:
                for (std::size_t i = 0; i < t.data.size(); ++i) {
                    const std::uint16_t h = type == dtype::f16 ? float_to_half(t.data[i]) : float_to_bf16(t.data[i]);
                    const float back = type == dtype::f16 ? half_to_float(h) : bf16_to_float(h);
                    if (!std::isfinite(back)) {
                        fail(error_kind::validation, "tensor '" + name + "' value at flat index " +
                                                         std::to_string(i) + " overflows " + to_string(type));
                    }
                    data.push_back(static_cast<std::uint8_t>(h & 0xff));
                    data.push_back(static_cast<std::uint8_t>(h >> 8));
                }
                break;
        }
        header[name] = {
            {"dtype", to_string(type)},
            {"shape", t.shape},
            {"data_offsets", {begin, static_cast<std::uint64_t>(data.size())}},
        };
    }
    if (!c.metadata.empty()) {
        header["__metadata__"] = c.metadata;
    }
    std::string text = header.dump();
    // pad so the data section starts 8-byte aligned
    while ((text.size() % 8) != 0) {
        text.push_back(' ');
    }
    std::vector<std::uint8_t> out;
    out.reserve(8 + text.size() + data.size());
    write_u64_le(out, text.size());
    out.insert(out.end(), text.begin(), text.end());
    out.insert(out.end(), data.begin(), data.end());
    return out;
}

static void write_bytes(const std::vector<std::uint8_t> & bytes, const std::filesystem::path & path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        fail(error_kind::io, "cannot open '" + path.string() + "' for writing");
    }
    out.write(reinterpret_cast<const char *>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        fail(error_kind::io, "write failed for '" + path.string() + "'");
    }
}

void save_checkpoint(const checkpoint & c, const std::filesystem::path & path, dtype type) {
    write_bytes(serialize_checkpoint(c, &type), path);
}

void save_checkpoint(const checkpoint & c, const std::filesystem::path & path) {
    write_bytes(serialize_checkpoint(c, nullptr), path);
}

} // namespace mergelab
