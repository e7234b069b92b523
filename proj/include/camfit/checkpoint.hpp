#pragma once

// Binary training checkpoints. One file holds named tensor sections (model
// parameters, batch-norm buffers, optimizer momentum), the embedding-queue
// ring, the step counter, and a hash of the resolved training config so a
// resume against a different configuration fails loudly instead of silently
// training garbage.
//
// Layout: 8-byte magic, u32 format version, u64 header length, header JSON
// (dtype, step, config hash, section/tensor schema, queue geometry), then the
// raw little-endian value blobs in schema order, queue ring last. Loading
// copies values element-wise into existing storage, which keeps tensors that
// alias live structures (batch-norm running buffers) wired up.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "camfit/nn.hpp"
#include "camfit/tensor.hpp"

namespace camfit {

inline constexpr char kCheckpointMagic[8] = {'C', 'A', 'M', 'F', 'I', 'T', 'C', 'K'};
inline constexpr uint32_t kCheckpointVersion = 1;

template <typename T>
struct CheckpointSection {
    std::string name;
    std::vector<std::pair<std::string, Tensor<T>>> tensors;
};

template <typename T>
struct Checkpoint {
    int64_t step = 0;
    uint64_t config_hash = 0;
    std::vector<CheckpointSection<T>> sections;

    // Embedding-queue ring state.
    int64_t queue_capacity = 0, queue_dim = 0, queue_head = 0, queue_size = 0;
    std::vector<T> queue_data;

    const CheckpointSection<T>* find(const std::string& name) const {
        for (const auto& s : sections)
            if (s.name == name) return &s;
        return nullptr;
    }
};

namespace detail {

template <typename T>
constexpr const char* dtype_tag() {
    if constexpr (std::is_same_v<T, float>) return "f32";
    else if constexpr (std::is_same_v<T, double>) return "f64";
    else static_assert(sizeof(T) == 0, "unsupported checkpoint dtype");
}

}  // namespace detail

// Deep-copied snapshot of a parameter store's values.
template <typename T>
CheckpointSection<T> snapshot_store(std::string name, const ParamStore<T>& store) {
    CheckpointSection<T> s;
    s.name = std::move(name);
    for (size_t i = 0; i < store.size(); ++i)
        s.tensors.emplace_back(store[i].name, store[i].value.clone());
    return s;
}

// Copy a section's values into an existing store, element-wise, enforcing an
// exact name/shape schema match in order.
template <typename T>
void restore_store(const CheckpointSection<T>& section, ParamStore<T>& store) {
    CAMFIT_CHECK(section.tensors.size() == store.size(), FormatError,
                 "checkpoint section " + section.name + ": expected " +
                     std::to_string(store.size()) + " tensors, found " +
                     std::to_string(section.tensors.size()));
    for (size_t i = 0; i < store.size(); ++i) {
        const auto& [name, value] = section.tensors[i];
        CAMFIT_CHECK(name == store[i].name, FormatError,
                     "checkpoint section " + section.name + ": tensor " + name +
                         " does not match parameter " + store[i].name);
        CAMFIT_CHECK(same_shape(value, store[i].value), FormatError,
                     "checkpoint section " + section.name + ": shape mismatch at " + name);
        std::copy(value.data(), value.data() + value.numel(), store[i].value.data());
    }
}

template <typename T>
void save_checkpoint(const std::string& path, const Checkpoint<T>& ck) {
    nlohmann::json header;
    header["dtype"] = detail::dtype_tag<T>();
    header["step"] = ck.step;
    char hash_hex[19];
    std::snprintf(hash_hex, sizeof hash_hex, "0x%016llx", (unsigned long long)ck.config_hash);
    header["config_hash"] = hash_hex;
    header["queue"] = {{"capacity", ck.queue_capacity},
                       {"dim", ck.queue_dim},
                       {"head", ck.queue_head},
                       {"size", ck.queue_size}};
    nlohmann::json sections = nlohmann::json::array();
    for (const auto& s : ck.sections) {
        nlohmann::json tensors = nlohmann::json::array();
        for (const auto& [name, value] : s.tensors)
            tensors.push_back({{"name", name}, {"shape", value.shape()}});
        sections.push_back({{"name", s.name}, {"tensors", tensors}});
    }
    header["sections"] = sections;
    const std::string header_text = header.dump();

    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        CAMFIT_CHECK(out.good(), IoError, "cannot open for writing: " + tmp);
        out.write(kCheckpointMagic, sizeof kCheckpointMagic);
        const uint32_t version = kCheckpointVersion;
        out.write(reinterpret_cast<const char*>(&version), sizeof version);
        const uint64_t hlen = header_text.size();
        out.write(reinterpret_cast<const char*>(&hlen), sizeof hlen);
        out.write(header_text.data(), std::streamsize(header_text.size()));
        for (const auto& s : ck.sections)
            for (const auto& [name, value] : s.tensors)
                out.write(reinterpret_cast<const char*>(value.data()),
                          std::streamsize(sizeof(T) * size_t(value.numel())));
        CAMFIT_CHECK(int64_t(ck.queue_data.size()) == ck.queue_capacity * ck.queue_dim, IoError,
                     "checkpoint: queue payload does not match its geometry");
        out.write(reinterpret_cast<const char*>(ck.queue_data.data()),
                  std::streamsize(sizeof(T) * ck.queue_data.size()));
        CAMFIT_CHECK(out.good(), IoError, "write failed: " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    CAMFIT_CHECK(!ec, IoError, "cannot move checkpoint into place: " + path);
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    CAMFIT_CHECK(in.good(), IoError, "cannot open checkpoint: " + path);

    char magic[sizeof kCheckpointMagic];
    in.read(magic, sizeof magic);
    CAMFIT_CHECK(in.good() && std::memcmp(magic, kCheckpointMagic, sizeof magic) == 0,
                 FormatError, "not a checkpoint file: " + path);
    uint32_t version = 0;
    in.read(reinterpret_cast<char*>(&version), sizeof version);
    CAMFIT_CHECK(in.good() && version == kCheckpointVersion, FormatError,
                 "unsupported checkpoint version " + std::to_string(version) + " (expected " +
                     std::to_string(kCheckpointVersion) + ")");
    uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), sizeof hlen);
    CAMFIT_CHECK(in.good() && hlen > 0 && hlen < (1ULL << 30), FormatError,
                 "checkpoint header length is implausible");
    std::string header_text(size_t(hlen), '\0');
    in.read(header_text.data(), std::streamsize(hlen));
    CAMFIT_CHECK(in.good(), FormatError, "truncated checkpoint header");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what());
    }

    Checkpoint<T> ck;
    try {
        const std::string dtype = header.at("dtype").get<std::string>();
        CAMFIT_CHECK(dtype == detail::dtype_tag<T>(), FormatError,
                     "checkpoint dtype " + dtype + " does not match requested " +
                         detail::dtype_tag<T>());
        ck.step = header.at("step").get<int64_t>();
        ck.config_hash = std::stoull(header.at("config_hash").get<std::string>(), nullptr, 16);
        const auto& q = header.at("queue");
        ck.queue_capacity = q.at("capacity").get<int64_t>();
        ck.queue_dim = q.at("dim").get<int64_t>();
        ck.queue_head = q.at("head").get<int64_t>();
        ck.queue_size = q.at("size").get<int64_t>();
        for (const auto& js : header.at("sections")) {
            CheckpointSection<T> s;
            s.name = js.at("name").get<std::string>();
            for (const auto& jt : js.at("tensors")) {
                Shape shape = jt.at("shape").get<Shape>();
                s.tensors.emplace_back(jt.at("name").get<std::string>(), Tensor<T>(shape));
            }
            ck.sections.push_back(std::move(s));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint header schema: ") + e.what());
    }

    for (auto& s : ck.sections)
        for (auto& [name, value] : s.tensors) {
            in.read(reinterpret_cast<char*>(value.data()),
                    std::streamsize(sizeof(T) * size_t(value.numel())));
            CAMFIT_CHECK(in.good(), FormatError, "truncated checkpoint payload at " + name);
        }
    CAMFIT_CHECK(ck.queue_capacity >= 0 && ck.queue_dim >= 0, FormatError,
                 "checkpoint: negative queue geometry");
    ck.queue_data.resize(size_t(ck.queue_capacity * ck.queue_dim));
    in.read(reinterpret_cast<char*>(ck.queue_data.data()),
            std::streamsize(sizeof(T) * ck.queue_data.size()));
    CAMFIT_CHECK(in.good(), FormatError, "truncated checkpoint queue payload");
    // Must be at end-of-file now.
    char extra;
    in.read(&extra, 1);
    CAMFIT_CHECK(in.eof(), FormatError, "checkpoint has trailing bytes");
    return ck;
}

}  // namespace camfit
