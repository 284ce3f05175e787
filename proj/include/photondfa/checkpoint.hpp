#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "photondfa/tensor.hpp"

namespace photondfa {

class checkpoint_error : public std::runtime_error {
public:
    explicit checkpoint_error(const std::string& what) : std::runtime_error(what) {}
};

// Checkpoint container shared by transmission matrices, sessions and model
// weights:
//   bytes 0..7   magic "PHOTDFA\0"
//   bytes 8..11  format version (u32 LE)
//   bytes 12..15 flags (bit 0: tensor data stored as float32)
//   u64 tensor count, then per tensor u64 rank + u64 dims
//   raw little-endian tensor data in manifest order (f64, or f32 when flagged)
//   UTF-8 JSON trailer, then u64 trailer byte length
struct CheckpointTensor {
    std::string name;
    Tensor tensor;
};

struct Checkpoint {
    std::vector<CheckpointTensor> tensors;
    nlohmann::json metadata = nlohmann::json::object();

    const Tensor* find(const std::string& name) const {
        for (const auto& t : tensors) {
            if (t.name == name) return &t.tensor;
        }
        return nullptr;
    }

    const Tensor& require(const std::string& name) const {
        const Tensor* t = find(name);
        if (!t) throw checkpoint_error("checkpoint is missing tensor '" + name + "'");
        return *t;
    }
};

namespace detail {

constexpr char kMagic[8] = {'P', 'H', 'O', 'T', 'D', 'F', 'A', '\0'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint32_t kFlagFloat32 = 1u;

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

inline void put_f32(std::string& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

class Reader {
public:
    Reader(const std::string& buf, const std::string& path) : buf_(buf), path_(path) {}

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(byte(pos_ + i)) << (8 * i);
        pos_ += 4;
        return v;
    }

    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(byte(pos_ + i)) << (8 * i);
        pos_ += 8;
        return v;
    }

    double f64() { return std::bit_cast<double>(u64()); }
    float f32() { return std::bit_cast<float>(u32()); }

    std::string bytes(std::size_t n) {
        need(n);
        std::string s = buf_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    std::size_t pos() const { return pos_; }
    std::size_t size() const { return buf_.size(); }

private:
    unsigned char byte(std::size_t i) const { return static_cast<unsigned char>(buf_[i]); }

    void need(std::size_t n) const {
        if (pos_ + n > buf_.size()) {
            throw checkpoint_error("truncated checkpoint file: " + path_);
        }
    }

    const std::string& buf_;
    std::string path_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt,
                            bool float32_storage = false) {
    std::string out;
    out.append(detail::kMagic, 8);
    detail::put_u32(out, detail::kVersion);
    detail::put_u32(out, float32_storage ? detail::kFlagFloat32 : 0u);
    detail::put_u64(out, ckpt.tensors.size());
    for (const auto& t : ckpt.tensors) {
        detail::put_u64(out, t.tensor.rank());
        for (std::size_t d : t.tensor.shape()) detail::put_u64(out, d);
    }
    for (const auto& t : ckpt.tensors) {
        for (double v : t.tensor.values()) {
            if (float32_storage) detail::put_f32(out, static_cast<float>(v));
            else detail::put_f64(out, v);
        }
    }
    nlohmann::json trailer;
    nlohmann::json manifest = nlohmann::json::array();
    for (const auto& t : ckpt.tensors) {
        manifest.push_back({{"name", t.name}, {"shape", t.tensor.shape()}});
    }
    trailer["manifest"] = manifest;
    trailer["meta"] = ckpt.metadata;
    const std::string json_bytes = trailer.dump();
    out += json_bytes;
    detail::put_u64(out, json_bytes.size());

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw checkpoint_error("cannot open checkpoint for writing: " + path);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw checkpoint_error("write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw checkpoint_error("cannot open checkpoint: " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (buf.size() < 24) throw checkpoint_error("checkpoint too small: " + path);

    detail::Reader r(buf, path);
    if (r.bytes(8) != std::string(detail::kMagic, 8)) {
        throw checkpoint_error("bad checkpoint magic: " + path);
    }
    const std::uint32_t version = r.u32();
    if (version != detail::kVersion) {
        throw checkpoint_error("unsupported checkpoint version " + std::to_string(version) +
                               ": " + path);
    }
    const std::uint32_t flags = r.u32();
    const bool float32_storage = (flags & detail::kFlagFloat32) != 0;

    const std::uint64_t n_tensors = r.u64();
    std::vector<std::vector<std::size_t>> shapes;
    shapes.reserve(n_tensors);
    for (std::uint64_t t = 0; t < n_tensors; ++t) {
        const std::uint64_t rank = r.u64();
        if (rank > 8) throw checkpoint_error("implausible tensor rank: " + path);
        std::vector<std::size_t> shape(rank);
        for (std::uint64_t d = 0; d < rank; ++d) shape[d] = r.u64();
        shapes.push_back(std::move(shape));
    }

    Checkpoint ckpt;
    ckpt.tensors.reserve(n_tensors);
    for (auto& shape : shapes) {
        Tensor tensor(shape);
        for (std::size_t i = 0; i < tensor.size(); ++i) {
            tensor[i] = float32_storage ? static_cast<double>(r.f32()) : r.f64();
        }
        ckpt.tensors.push_back({"", std::move(tensor)});
    }

    if (r.size() < r.pos() + 8) throw checkpoint_error("missing trailer: " + path);
    const std::size_t json_len_pos = r.size() - 8;
    std::uint64_t json_len = 0;
    for (int i = 0; i < 8; ++i) {
        json_len |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[json_len_pos + i]))
                    << (8 * i);
    }
    if (r.pos() + json_len + 8 != r.size()) {
        throw checkpoint_error("trailer length mismatch: " + path);
    }
    nlohmann::json trailer;
    try {
        trailer = nlohmann::json::parse(buf.substr(r.pos(), json_len));
    } catch (const nlohmann::json::exception& e) {
        throw checkpoint_error("bad JSON trailer in " + path + ": " + e.what());
    }
    const auto& manifest = trailer.at("manifest");
    if (manifest.size() != ckpt.tensors.size()) {
        throw checkpoint_error("manifest/tensor count mismatch: " + path);
    }
    for (std::size_t i = 0; i < ckpt.tensors.size(); ++i) {
        ckpt.tensors[i].name = manifest[i].at("name").get<std::string>();
    }
    ckpt.metadata = trailer.value("meta", nlohmann::json::object());
    return ckpt;
}

}  // namespace photondfa
