#pragma once

// Checkpoint persistence. A checkpoint is a binary file of concatenated
// tensor containers plus a JSON sidecar at "<path>.json" holding the tensor
// index (name -> byte offset), the network configuration echo, and — for
// quantized models — the per-layer quantization parameters, hardened rounding
// masks (packed bits, LSB-first, hex-encoded), and adapter metadata.
//
// Round-trips are exact: tensor payloads are raw IEEE doubles, and the
// sidecar writes doubles in shortest-round-trip decimal form, so
// save -> load -> save reproduces byte-identical files.

#include "saq/net.hpp"
#include "saq/saquant.hpp"
#include "saq/tensor.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace saq {

using ordered_json = nlohmann::ordered_json;

inline constexpr int kCheckpointVersion = 1;

inline std::string sidecar_path(const std::string& bin_path) { return bin_path + ".json"; }

namespace detail {

inline ordered_json net_config_json(const NetConfig& cfg) {
    ordered_json j;
    j["input_dim"] = cfg.input_dim;
    j["hidden_widths"] = cfg.hidden_widths;
    j["time_embed_dim"] = cfg.time_embed_dim;
    j["time_scale"] = cfg.time_scale;
    return j;
}

inline NetConfig net_config_from_json(const ordered_json& j) {
    NetConfig cfg;
    cfg.input_dim = j.at("input_dim").get<std::size_t>();
    cfg.hidden_widths = j.at("hidden_widths").get<std::vector<std::size_t>>();
    cfg.time_embed_dim = j.at("time_embed_dim").get<std::size_t>();
    cfg.time_scale = j.at("time_scale").get<double>();
    cfg.validate();
    return cfg;
}

// Packed-bit encoding of a {0, 1}-valued mask: element i lands in byte i/8,
// bit i%8 (LSB first); the byte sequence is hex-encoded, two lowercase
// digits per byte.
inline std::string pack_mask_hex(const Tensor& mask) {
    std::vector<std::uint8_t> bytes((mask.size() + 7) / 8, 0);
    for (std::size_t i = 0; i < mask.size(); ++i) {
        const double v = mask.data[i];
        if (v != 0.0 && v != 1.0)
            throw std::invalid_argument("pack_mask_hex: mask entries must be 0 or 1");
        if (v == 1.0) bytes[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
    }
    static const char* digits = "0123456789abcdef";
    std::string hex;
    hex.reserve(2 * bytes.size());
    for (std::uint8_t b : bytes) {
        hex.push_back(digits[b >> 4]);
        hex.push_back(digits[b & 0xf]);
    }
    return hex;
}

inline Tensor unpack_mask_hex(const std::string& hex, const std::vector<std::size_t>& shape) {
    Tensor mask(shape);
    if (hex.size() != 2 * ((mask.size() + 7) / 8))
        throw std::invalid_argument("unpack_mask_hex: length does not match shape");
    auto nibble = [](char c) -> unsigned {
        if (c >= '0' && c <= '9') return static_cast<unsigned>(c - '0');
        if (c >= 'a' && c <= 'f') return static_cast<unsigned>(c - 'a' + 10);
        throw std::invalid_argument("unpack_mask_hex: invalid hex digit");
    };
    for (std::size_t i = 0; i < mask.size(); ++i) {
        const unsigned byte = (nibble(hex[2 * (i / 8)]) << 4) | nibble(hex[2 * (i / 8) + 1]);
        mask.data[i] = (byte >> (i % 8)) & 1u ? 1.0 : 0.0;
    }
    return mask;
}

struct TensorIndexWriter {
    std::ofstream os;
    ordered_json index = ordered_json::object();

    explicit TensorIndexWriter(const std::string& path)
        : os(path, std::ios::binary | std::ios::trunc) {
        if (!os) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
    }
    void add(const std::string& name, const Tensor& t) {
        index[name] = static_cast<std::uint64_t>(os.tellp());
        write_tensor(os, t);
    }
};

struct TensorIndexReader {
    std::ifstream is;
    ordered_json index;

    TensorIndexReader(const std::string& path, ordered_json idx)
        : is(path, std::ios::binary), index(std::move(idx)) {
        if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
    }
    Tensor get(const std::string& name) {
        if (!index.contains(name))
            throw std::runtime_error("checkpoint: missing tensor " + name);
        is.clear();
        is.seekg(static_cast<std::streamoff>(index.at(name).get<std::uint64_t>()));
        return read_tensor(is);
    }
};

inline ordered_json load_sidecar(const std::string& bin_path, const std::string& format) {
    std::ifstream js(sidecar_path(bin_path));
    if (!js) throw std::runtime_error("checkpoint: cannot open " + sidecar_path(bin_path));
    ordered_json j = ordered_json::parse(js);
    if (j.at("format").get<std::string>() != format)
        throw std::runtime_error("checkpoint: expected format " + format + ", found " +
                                 j.at("format").get<std::string>());
    if (j.at("version").get<int>() != kCheckpointVersion)
        throw std::runtime_error("checkpoint: unsupported version");
    return j;
}

inline void write_sidecar(const std::string& bin_path, const ordered_json& j) {
    std::ofstream os(sidecar_path(bin_path), std::ios::trunc);
    if (!os) throw std::runtime_error("checkpoint: cannot open " + sidecar_path(bin_path));
    os << j.dump(2) << '\n';
    if (!os) throw std::runtime_error("checkpoint: sidecar write failed");
}

} // namespace detail

// ---------------------------------------------------------------------------
// Full-precision network checkpoints
// ---------------------------------------------------------------------------

inline void save_net_checkpoint(const std::string& path, const Parameters& p) {
    p.config.validate();
    detail::TensorIndexWriter w(path);
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        const std::string stem = "layer" + std::to_string(l);
        w.add(stem + ".weight", p.layers[l].weight);
        w.add(stem + ".bias", p.layers[l].bias);
    }
    w.os.flush();
    if (!w.os) throw std::runtime_error("checkpoint: write failed for " + path);

    ordered_json j;
    j["format"] = "saq-net-checkpoint";
    j["version"] = kCheckpointVersion;
    j["config"] = detail::net_config_json(p.config);
    j["tensors"] = w.index;
    detail::write_sidecar(path, j);
}

inline Parameters load_net_checkpoint(const std::string& path) {
    ordered_json j = detail::load_sidecar(path, "saq-net-checkpoint");
    Parameters p;
    p.config = detail::net_config_from_json(j.at("config"));
    detail::TensorIndexReader r(path, j.at("tensors"));
    p.layers.resize(p.config.num_layers());
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        const std::string stem = "layer" + std::to_string(l);
        p.layers[l].weight = r.get(stem + ".weight");
        p.layers[l].bias = r.get(stem + ".bias");
    }
    return p;
}

// ---------------------------------------------------------------------------
// Quantized-model checkpoints. Soft-rounding state is transient optimizer
// state and is not serializable; reconstruct (harden) before saving.
// ---------------------------------------------------------------------------

inline void save_quant_checkpoint(const std::string& path, const QuantModel& qm) {
    qm.validate();
    for (std::size_t l = 0; l < qm.weights.size(); ++l)
        if (qm.weights[l].rounding == WeightRounding::Soft)
            throw std::invalid_argument(
                "save_quant_checkpoint: layer " + std::to_string(l) +
                " is mid-reconstruction (soft rounding); harden before saving");

    detail::TensorIndexWriter w(path);
    for (std::size_t l = 0; l < qm.base.layers.size(); ++l) {
        const std::string stem = "layer" + std::to_string(l);
        w.add(stem + ".weight", qm.base.layers[l].weight);
        w.add(stem + ".bias", qm.base.layers[l].bias);
    }
    if (qm.adapter)
        for (std::size_t l = 0; l < qm.adapter->layers.size(); ++l) {
            const std::string stem = "layer" + std::to_string(l);
            w.add(stem + ".lora_down", qm.adapter->layers[l].down);
            w.add(stem + ".lora_up", qm.adapter->layers[l].up);
        }
    w.os.flush();
    if (!w.os) throw std::runtime_error("checkpoint: write failed for " + path);

    ordered_json j;
    j["format"] = "saq-quant-checkpoint";
    j["version"] = kCheckpointVersion;
    j["config"] = detail::net_config_json(qm.base.config);
    j["weights_quantized"] = qm.weights_quantized;
    j["acts_quantized"] = qm.acts_quantized;
    j["weights"] = ordered_json::array();
    for (const WeightQuant& wq : qm.weights) {
        ordered_json e;
        e["enabled"] = wq.enabled;
        e["bits"] = wq.bits;
        e["log_scale"] = wq.log_scale;
        e["zero"] = wq.zero;
        e["rounding"] = wq.rounding == WeightRounding::Hard ? "hard" : "nearest";
        if (wq.rounding == WeightRounding::Hard)
            e["hard_mask"] = detail::pack_mask_hex(wq.hard_offset);
        j["weights"].push_back(std::move(e));
    }
    j["acts"] = ordered_json::array();
    for (const ActQuant& aq : qm.acts) {
        ordered_json e;
        e["enabled"] = aq.enabled;
        e["fitted"] = aq.fitted;
        e["bits"] = aq.bits;
        e["log_scale"] = aq.log_scale;
        e["zero"] = aq.zero;
        j["acts"].push_back(std::move(e));
    }
    j["adapter"] = ordered_json::object();
    j["adapter"]["present"] = static_cast<bool>(qm.adapter);
    if (qm.adapter) j["adapter"]["scale_c"] = qm.adapter->scale_c;
    j["tensors"] = w.index;
    detail::write_sidecar(path, j);
}

inline QuantModel load_quant_checkpoint(const std::string& path) {
    ordered_json j = detail::load_sidecar(path, "saq-quant-checkpoint");
    QuantModel qm;
    qm.base.config = detail::net_config_from_json(j.at("config"));
    qm.weights_quantized = j.at("weights_quantized").get<bool>();
    qm.acts_quantized = j.at("acts_quantized").get<bool>();

    detail::TensorIndexReader r(path, j.at("tensors"));
    const std::size_t L = qm.base.config.num_layers();
    qm.base.layers.resize(L);
    for (std::size_t l = 0; l < L; ++l) {
        const std::string stem = "layer" + std::to_string(l);
        qm.base.layers[l].weight = r.get(stem + ".weight");
        qm.base.layers[l].bias = r.get(stem + ".bias");
    }

    const ordered_json& jw = j.at("weights");
    if (jw.size() != L) throw std::runtime_error("checkpoint: weight spec count mismatch");
    qm.weights.resize(L);
    for (std::size_t l = 0; l < L; ++l) {
        WeightQuant& wq = qm.weights[l];
        wq.enabled = jw[l].at("enabled").get<bool>();
        wq.bits = jw[l].at("bits").get<int>();
        wq.log_scale = jw[l].at("log_scale").get<double>();
        wq.zero = jw[l].at("zero").get<double>();
        const std::string rounding = jw[l].at("rounding").get<std::string>();
        if (rounding == "hard") {
            wq.rounding = WeightRounding::Hard;
            wq.hard_offset = detail::unpack_mask_hex(jw[l].at("hard_mask").get<std::string>(),
                                                     qm.base.layers[l].weight.shape);
        } else if (rounding == "nearest") {
            wq.rounding = WeightRounding::Nearest;
        } else {
            throw std::runtime_error("checkpoint: unknown rounding mode " + rounding);
        }
    }

    const ordered_json& ja = j.at("acts");
    if (ja.size() + 1 != L) throw std::runtime_error("checkpoint: act spec count mismatch");
    qm.acts.resize(L - 1);
    for (std::size_t s = 0; s + 1 < L; ++s) {
        ActQuant& aq = qm.acts[s];
        aq.enabled = ja[s].at("enabled").get<bool>();
        aq.fitted = ja[s].at("fitted").get<bool>();
        aq.bits = ja[s].at("bits").get<int>();
        aq.log_scale = ja[s].at("log_scale").get<double>();
        aq.zero = ja[s].at("zero").get<double>();
    }

    if (j.at("adapter").at("present").get<bool>()) {
        LoRAAdapter ad;
        ad.scale_c = j.at("adapter").at("scale_c").get<double>();
        ad.layers.resize(L);
        for (std::size_t l = 0; l < L; ++l) {
            const std::string stem = "layer" + std::to_string(l);
            ad.layers[l].down = r.get(stem + ".lora_down");
            ad.layers[l].up = r.get(stem + ".lora_up");
        }
        qm.adapter = std::move(ad);
    }
    qm.validate();
    return qm;
}

} // namespace saq
