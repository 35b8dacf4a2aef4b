// SPDX-License-Identifier: Apache-2.0
//
// Binary checkpoints. Layout (little-endian):
//   "CAPE" | u32 version | u64 block length | key=value lines (UTF-8)
//   | u32 record count | records | u32 CRC32 of all preceding bytes
// A record is u32 name length | name | u8 dtype | u32 rank | u64 dims[rank]
// | raw values. Optimizer moments are stored as records named
// "adam.m/<param>" and "adam.v/<param>".
#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "cape/config.hpp"
#include "cape/data.hpp"
#include "cape/error.hpp"
#include "cape/model.hpp"
#include "cape/optim.hpp"

namespace cape::ckpt {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kMagic[4] = {'C', 'A', 'P', 'E'};
inline constexpr std::uint32_t kVersion = 1;
inline constexpr std::uint8_t kDtypeF64 = 1;

struct Checkpoint {
    model::CapeModel model;
    std::map<std::string, std::string> meta;       ///< keys without the "meta." prefix
    std::map<std::string, data::NormState> norm;   ///< keyed by "disease_id/region_id"
    std::optional<optim::AdamW> optimizer;
};

inline std::string norm_key(const data::TimeSeriesRecord& r) { return r.disease_id + "/" + r.region_id; }

namespace detail {

class Writer {
public:
    template <class T>
    void put(T v) {
        char buf[sizeof(T)];
        std::memcpy(buf, &v, sizeof(T));
        bytes_.append(buf, sizeof(T));
    }
    void put_bytes(std::string_view s) { bytes_.append(s); }
    void put_string(std::string_view s) {
        put(static_cast<std::uint32_t>(s.size()));
        put_bytes(s);
    }
    void put_tensor(const std::string& name, const ad::Tensor& t) {
        put_string(name);
        put(kDtypeF64);
        put(static_cast<std::uint32_t>(t.rank()));
        for (auto d : t.shape()) {
            put(static_cast<std::uint64_t>(d));
        }
        bytes_.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(double));
    }
    std::string& bytes() { return bytes_; }

private:
    std::string bytes_;
};

class Reader {
public:
    Reader(std::string_view bytes, std::size_t end) : bytes_(bytes), end_(end) {}

    void need(std::size_t n) const {
        if (end_ - pos_ < n) {
            throw FormatError("checkpoint truncated at byte " + std::to_string(pos_));
        }
    }
    template <class T>
    T get() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    std::string_view get_bytes(std::size_t n) {
        need(n);
        auto s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::string get_string() { return std::string(get_bytes(get<std::uint32_t>())); }
    std::pair<std::string, ad::Tensor> get_tensor() {
        std::string name = get_string();
        if (get<std::uint8_t>() != kDtypeF64) {
            throw FormatError("checkpoint record " + name + ": unsupported dtype");
        }
        const auto rank = get<std::uint32_t>();
        ad::Shape shape;
        std::uint64_t n = 1;
        for (std::uint32_t i = 0; i < rank; ++i) {
            const auto d = get<std::uint64_t>();
            if (d != 0 && n > (end_ - pos_) / d) {
                throw FormatError("checkpoint truncated in record " + name);
            }
            n *= d;
            shape.push_back(static_cast<std::size_t>(d));
        }
        if (n > (end_ - pos_) / sizeof(double)) {
            throw FormatError("checkpoint truncated in record " + name);
        }
        std::vector<double> values(static_cast<std::size_t>(n));
        const auto raw = get_bytes(values.size() * sizeof(double));
        std::memcpy(values.data(), raw.data(), raw.size());
        return {std::move(name), ad::Tensor(std::move(shape), std::move(values))};
    }
    std::size_t position() const { return pos_; }

private:
    std::string_view bytes_;
    std::size_t end_;
    std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(std::string_view bytes) {
    uLong crc = ::crc32(0L, Z_NULL, 0);
    const auto* p = reinterpret_cast<const Bytef*>(bytes.data());
    std::size_t left = bytes.size();
    while (left > 0) {
        const auto chunk = static_cast<uInt>(std::min<std::size_t>(left, 1u << 30));
        crc = ::crc32(crc, p, chunk);
        p += chunk;
        left -= chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

inline void check_entry(const std::string& key, const std::string& value) {
    if (key.empty() || key.find_first_of("=\n") != std::string::npos || value.find('\n') != std::string::npos) {
        throw ValidationError("checkpoint entry '" + key + "' contains '=' or a newline");
    }
}

}  // namespace detail

inline std::string serialize(const Checkpoint& c) {
    std::map<std::string, std::string> kv = model_config_entries(c.model.config());
    for (const auto& [k, v] : c.meta) {
        kv["meta." + k] = v;
    }
    for (const auto& [k, s] : c.norm) {
        kv["norm." + k + ".mean"] = data::format_double(s.mean);
        kv["norm." + k + ".std"] = data::format_double(s.std);
    }
    const auto& params = c.model.parameters();
    if (c.optimizer) {
        const auto& o = *c.optimizer;
        if (o.size() != params.size()) {
            throw ValidationError("checkpoint: optimizer does not match the model");
        }
        kv["adam.lr"] = data::format_double(o.options().lr);
        kv["adam.beta1"] = data::format_double(o.options().beta1);
        kv["adam.beta2"] = data::format_double(o.options().beta2);
        kv["adam.eps"] = data::format_double(o.options().eps);
        kv["adam.weight_decay"] = data::format_double(o.options().weight_decay);
        kv["adam.clip"] = data::format_double(o.options().clip);
        for (std::size_t i = 0; i < params.size(); ++i) {
            kv["adam.steps." + params[i].name] = std::to_string(o.steps(i));
        }
    }
    std::string block;
    for (const auto& [k, v] : kv) {
        detail::check_entry(k, v);
        block += k + "=" + v + "\n";
    }

    detail::Writer w;
    w.put_bytes(std::string_view(kMagic, 4));
    w.put(kVersion);
    w.put(static_cast<std::uint64_t>(block.size()));
    w.put_bytes(block);
    const std::size_t n_records = params.size() * (c.optimizer ? 3 : 1);
    w.put(static_cast<std::uint32_t>(n_records));
    for (const auto& p : params) {
        w.put_tensor(p.name, p.value);
    }
    if (c.optimizer) {
        for (std::size_t i = 0; i < params.size(); ++i) {
            w.put_tensor("adam.m/" + params[i].name, c.optimizer->first_moment(i));
            w.put_tensor("adam.v/" + params[i].name, c.optimizer->second_moment(i));
        }
    }
    w.put(detail::crc32_of(w.bytes()));
    return std::move(w.bytes());
}

/// Parses a complete checkpoint image; throws FormatError on any damage and
/// ValidationError on content that does not describe a valid model.
inline Checkpoint deserialize(std::string_view bytes) {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
        throw FormatError("not a checkpoint (bad magic)");
    }
    if (bytes.size() < 8) {
        throw FormatError("checkpoint truncated at byte " + std::to_string(bytes.size()));
    }
    std::uint32_t version = 0;
    std::memcpy(&version, bytes.data() + 4, 4);
    if (version != kVersion) {
        throw FormatError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                          std::to_string(kVersion) + ")");
    }
    if (bytes.size() < 12) {
        throw FormatError("checkpoint truncated at byte " + std::to_string(bytes.size()));
    }
    detail::Reader r(bytes, bytes.size() - 4);
    r.get_bytes(8);
    const auto block_len = r.get<std::uint64_t>();
    if (block_len > bytes.size()) {
        throw FormatError("checkpoint truncated in config block");
    }
    const std::string block(r.get_bytes(static_cast<std::size_t>(block_len)));
    const auto n_records = r.get<std::uint32_t>();
    std::map<std::string, ad::Tensor> records;
    for (std::uint32_t i = 0; i < n_records; ++i) {
        auto [name, t] = r.get_tensor();
        if (!records.emplace(name, std::move(t)).second) {
            throw FormatError("checkpoint has duplicate record " + name);
        }
    }
    if (r.position() != bytes.size() - 4) {
        throw FormatError("checkpoint has trailing bytes before the checksum");
    }
    std::uint32_t stored = 0;
    std::memcpy(&stored, bytes.data() + bytes.size() - 4, 4);
    if (stored != detail::crc32_of(bytes.substr(0, bytes.size() - 4))) {
        throw FormatError("checkpoint checksum mismatch");
    }

    std::map<std::string, std::string> kv;
    std::istringstream lines(block);
    std::string line;
    while (std::getline(lines, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw FormatError("checkpoint config line without '='");
        }
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }

    Checkpoint c;
    c.model = model::CapeModel(model_config_from_entries(kv), 0);
    auto& params = c.model.parameters();
    std::size_t used = 0;
    for (auto& p : params) {
        auto it = records.find(p.name);
        if (it == records.end()) {
            throw ValidationError("checkpoint lacks parameter " + p.name);
        }
        if (it->second.shape() != p.value.shape()) {
            throw ValidationError("checkpoint parameter " + p.name + " has the wrong shape");
        }
        p.value = it->second;
        ++used;
    }
    auto number = [&](const std::string& key) {
        auto it = kv.find(key);
        auto v = it == kv.end() ? std::nullopt : data::detail::parse_real(it->second);
        if (!v) {
            throw ValidationError("checkpoint entry " + key + " missing or malformed");
        }
        return *v;
    };
    if (kv.count("adam.lr")) {
        optim::AdamWOptions o;
        o.lr = number("adam.lr");
        o.beta1 = number("adam.beta1");
        o.beta2 = number("adam.beta2");
        o.eps = number("adam.eps");
        o.weight_decay = number("adam.weight_decay");
        o.clip = number("adam.clip");
        optim::AdamW opt(params, o);
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto m = records.find("adam.m/" + params[i].name);
            auto v = records.find("adam.v/" + params[i].name);
            if (m == records.end() || v == records.end()) {
                throw ValidationError("checkpoint lacks optimizer state for " + params[i].name);
            }
            opt.set_state(i, m->second, v->second,
                          static_cast<std::uint64_t>(number("adam.steps." + params[i].name)));
            used += 2;
        }
        c.optimizer = std::move(opt);
    }
    if (used != records.size()) {
        throw ValidationError("checkpoint has records the model does not define");
    }
    for (const auto& [k, v] : kv) {
        if (k.rfind("meta.", 0) == 0) {
            c.meta[k.substr(5)] = v;
        } else if (k.rfind("norm.", 0) == 0) {
            const auto dot = k.rfind('.');
            const std::string id = k.substr(5, dot - 5);
            const std::string field = k.substr(dot + 1);
            if (field != "mean" && field != "std") {
                throw ValidationError("checkpoint entry " + k + " is not a norm field");
            }
            const double x = number(k);
            (field == "mean" ? c.norm[id].mean : c.norm[id].std) = x;
        }
    }
    return c;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& c) {
    const std::string bytes = serialize(c);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw Error("cannot write checkpoint " + path);
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw Error("failed writing checkpoint " + path);
    }
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw Error("cannot open checkpoint " + path);
    }
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize(bytes);
}

/// Loads parameters into an existing model after checking that the stored
/// configuration matches it; the model is untouched on failure.
inline void load_into(model::CapeModel& m, const std::string& path) {
    Checkpoint c = load_checkpoint(path);
    const auto want = model_config_entries(m.config());
    const auto got = model_config_entries(c.model.config());
    for (const auto& [k, v] : want) {
        if (got.at(k) != v) {
            throw ValidationError("checkpoint config mismatch: " + k + " is " + got.at(k) + ", model has " + v);
        }
    }
    m = std::move(c.model);
}

}  // namespace cape::ckpt
