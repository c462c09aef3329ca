#pragma once

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "agrigen/autodiff.hpp"
#include "agrigen/train.hpp"

namespace agrigen {

static_assert(std::endian::native == std::endian::little, "checkpoint writer assumes little-endian");

// ----------------------------------------------------------------------------
// Versioned checkpoint container shared by every network: a JSON metadata
// block followed by named tensors stored as float32 little-endian. Doubles are
// quantized through float32 on save; loads therefore reproduce saved values
// exactly.
// ----------------------------------------------------------------------------

struct Checkpoint {
    static constexpr uint32_t kVersion = 1;
    static constexpr char kMagic[5] = "AGCK";

    nlohmann::json meta;
    std::map<std::string, Tensor> tensors;  // ordered => deterministic bytes

    void put(const std::string& name, const Tensor& t) { tensors[name] = t; }

    const Tensor& get(const std::string& name) const {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw IoError("checkpoint: missing tensor " + name);
        return it->second;
    }

    bool has(const std::string& name) const { return tensors.count(name) != 0; }

    void save(const std::filesystem::path& path) const {
        std::ofstream f(path, std::ios::binary);
        if (!f) throw IoError("cannot open checkpoint for writing: " + path.string());
        f.write(kMagic, 4);
        write_u32(f, kVersion);
        const std::string m = meta.dump();
        write_u64(f, m.size());
        f.write(m.data(), static_cast<std::streamsize>(m.size()));
        write_u32(f, static_cast<uint32_t>(tensors.size()));
        for (const auto& [name, t] : tensors) {
            write_u16(f, static_cast<uint16_t>(name.size()));
            f.write(name.data(), static_cast<std::streamsize>(name.size()));
            f.put(static_cast<char>(t.ndim()));
            for (int d : t.shape) write_u32(f, static_cast<uint32_t>(d));
            std::vector<float> buf(t.data.size());
            for (size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(t.data[i]);
            f.write(reinterpret_cast<const char*>(buf.data()),
                    static_cast<std::streamsize>(buf.size() * sizeof(float)));
        }
        if (!f) throw IoError("checkpoint write failed: " + path.string());
    }

    static Checkpoint load(const std::filesystem::path& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw IoError("cannot open checkpoint: " + path.string());
        char magic[4];
        f.read(magic, 4);
        if (!f || std::memcmp(magic, kMagic, 4) != 0)
            throw IoError("not a checkpoint file: " + path.string());
        const uint32_t version = read_u32(f);
        if (version != kVersion)
            throw IoError("unsupported checkpoint version " + std::to_string(version));
        const uint64_t mlen = read_u64(f);
        std::string m(mlen, '\0');
        f.read(m.data(), static_cast<std::streamsize>(mlen));
        Checkpoint ck;
        ck.meta = nlohmann::json::parse(m);
        const uint32_t count = read_u32(f);
        for (uint32_t i = 0; i < count; ++i) {
            const uint16_t nlen = read_u16(f);
            std::string name(nlen, '\0');
            f.read(name.data(), nlen);
            const int ndim = f.get();
            std::vector<int> shape(static_cast<size_t>(ndim));
            for (int d = 0; d < ndim; ++d) shape[static_cast<size_t>(d)] = static_cast<int>(read_u32(f));
            Tensor t(shape);
            std::vector<float> buf(t.data.size());
            f.read(reinterpret_cast<char*>(buf.data()),
                   static_cast<std::streamsize>(buf.size() * sizeof(float)));
            for (size_t j = 0; j < buf.size(); ++j) t.data[j] = static_cast<double>(buf[j]);
            ck.tensors.emplace(std::move(name), std::move(t));
        }
        if (!f) throw IoError("truncated checkpoint: " + path.string());
        return ck;
    }

    // ---- parameter/group helpers -------------------------------------------

    void pack_params(const std::vector<Parameter*>& ps) {
        for (const Parameter* p : ps) put(p->name, p->value);
    }

    void unpack_params(const std::vector<Parameter*>& ps) const {
        for (Parameter* p : ps) {
            const Tensor& t = get(p->name);
            if (t.shape != p->value.shape)
                throw IoError("checkpoint: shape mismatch for " + p->name + " " + t.shape_str() +
                              " vs " + p->value.shape_str());
            p->value = t;
            p->grad = Tensor::zeros(t.shape);
        }
    }

    void pack_buffers(const std::vector<std::pair<std::string, Tensor*>>& bufs) {
        for (const auto& [name, t] : bufs) put(name, *t);
    }

    void unpack_buffers(const std::vector<std::pair<std::string, Tensor*>>& bufs) const {
        for (const auto& [name, t] : bufs) *t = get(name);
    }

    /// Optimizer moments and EMA shadow for one parameter group.
    void pack_state(const std::string& prefix, TrainState& st) {
        const auto& ps = st.params();
        for (size_t i = 0; i < ps.size(); ++i) {
            put(prefix + ".m." + ps[i]->name, st.moments_m()[i]);
            put(prefix + ".v." + ps[i]->name, st.moments_v()[i]);
            put(prefix + ".ema." + ps[i]->name, st.ema_shadow()[i]);
        }
        meta[prefix + "_step"] = st.step_count();
    }

    void unpack_state(const std::string& prefix, TrainState& st) const {
        const auto& ps = st.params();
        for (size_t i = 0; i < ps.size(); ++i) {
            st.moments_m()[i] = get(prefix + ".m." + ps[i]->name);
            st.moments_v()[i] = get(prefix + ".v." + ps[i]->name);
            st.ema_shadow()[i] = get(prefix + ".ema." + ps[i]->name);
        }
        if (meta.contains(prefix + "_step")) st.set_step_count(meta[prefix + "_step"].get<int64_t>());
    }

  private:
    static void write_u16(std::ofstream& f, uint16_t v) { f.write(reinterpret_cast<const char*>(&v), 2); }
    static void write_u32(std::ofstream& f, uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); }
    static void write_u64(std::ofstream& f, uint64_t v) { f.write(reinterpret_cast<const char*>(&v), 8); }
    static uint16_t read_u16(std::ifstream& f) {
        uint16_t v = 0;
        f.read(reinterpret_cast<char*>(&v), 2);
        return v;
    }
    static uint32_t read_u32(std::ifstream& f) {
        uint32_t v = 0;
        f.read(reinterpret_cast<char*>(&v), 4);
        return v;
    }
    static uint64_t read_u64(std::ifstream& f) {
        uint64_t v = 0;
        f.read(reinterpret_cast<char*>(&v), 8);
        return v;
    }
};

} // namespace agrigen
