#pragma once

// Run configuration: a versioned JSON schema with exhaustive key validation.
// Every field has a documented default (the C++ initializers below are the
// documentation of record); unknown keys are errors, not warnings, and the
// error names the offending dotted path. Parsing then re-serializing is
// idempotent: to_json always emits the complete resolved document.

#include "saq/errorlab.hpp"
#include "saq/mixture.hpp"
#include "saq/net.hpp"
#include "saq/samplers.hpp"
#include "saq/saquant.hpp"
#include "saq/schedule.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <fstream>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace saq {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline constexpr int kConfigVersion = 1;

enum class RunKind { Train, CalibratePtq, FinetuneQlora, Sample, AnalyzeError, Evaluate, Ablate };

inline const char* run_kind_name(RunKind k) {
    switch (k) {
        case RunKind::Train: return "train";
        case RunKind::CalibratePtq: return "calibrate-ptq";
        case RunKind::FinetuneQlora: return "finetune-qlora";
        case RunKind::Sample: return "sample";
        case RunKind::AnalyzeError: return "analyze-error";
        case RunKind::Evaluate: return "evaluate";
        case RunKind::Ablate: return "ablate";
    }
    throw std::logic_error("run_kind_name: unreachable");
}

inline RunKind run_kind_from_name(const std::string& s) {
    for (RunKind k : {RunKind::Train, RunKind::CalibratePtq, RunKind::FinetuneQlora,
                      RunKind::Sample, RunKind::AnalyzeError, RunKind::Evaluate, RunKind::Ablate})
        if (s == run_kind_name(k)) return k;
    throw ConfigError("config: unknown kind \"" + s +
                      "\" (expected train | calibrate-ptq | finetune-qlora | sample | "
                      "analyze-error | evaluate | ablate)");
}

// Which model a sampling/evaluation stage drives: the full-precision net, its
// SA-PTQ-calibrated quantization, or the SA-QLoRA-finetuned quantization.
enum class ModelVariant { Fp, Ptq, Qlora };

inline const char* model_variant_name(ModelVariant v) {
    switch (v) {
        case ModelVariant::Fp: return "fp";
        case ModelVariant::Ptq: return "ptq";
        case ModelVariant::Qlora: return "qlora";
    }
    throw std::logic_error("model_variant_name: unreachable");
}

inline ModelVariant model_variant_from_name(const std::string& s) {
    for (ModelVariant v : {ModelVariant::Fp, ModelVariant::Ptq, ModelVariant::Qlora})
        if (s == model_variant_name(v)) return v;
    throw ConfigError("config: unknown model variant \"" + s + "\" (expected fp | ptq | qlora)");
}

struct GridSpec {
    std::size_t steps = 20;
    std::string spacing = "uniform-lambda"; // or "uniform-time"
};

struct DistributionSpec {
    std::string kind = "ring"; // or "gaussian"
    std::size_t components = 8;
    double radius = 4.0;
    double stddev = 0.3;
    std::vector<double> mean = {0.0, 0.0}; // gaussian only
};

struct TrainSpec {
    std::size_t steps = 4000;
    std::size_t batch_size = 128;
    double lr = 1e-3;
};

struct QuantSpec2 {
    int weight_bits = 8;
    int act_bits = 8;
    int edge_bits = 8;
    bool quantize_weights = true;
    bool quantize_acts = true;
};

struct PtqSpec {
    int iterations = 2000;
    double lr = 1e-2;
    double act_lr = 1e-3;
    double reg_weight = 0.01;
    double beta_start = 20.0;
    double beta_end = 2.0;
    double warmup_frac = 0.2;
    std::string pairing = "case-study"; // or "equation-literal"
    bool naive = false;                 // degenerate same-point pairs
    std::size_t calib_seeds = 8;        // dual-order trajectories collected
};

struct QloraSpec {
    std::vector<std::size_t> steps = {100, 50, 20};
    std::size_t batch = 4;
    std::size_t rank = 32;
    std::size_t epochs = 40;
    double w_cos = 1.0;
    double w_mota = 1.0;
    double lr = 1e-3;
    std::size_t sample_seeds = 2;
    std::string pairing = "case-study";
    bool plain = false;
    double divergence_threshold = 1e6;
};

struct SampleSpec {
    std::string sampler = "dpm2"; // ddim | dpm1 | dpm2 | plms
    std::size_t chains = 64;
    std::string model = "fp"; // fp | ptq | qlora
};

struct EvaluateSpec {
    std::size_t chains = 4096;
    std::string candidate = "fp"; // fp | ptq | qlora
};

struct ErrorLabSpec {
    std::vector<double> deltas = {1e-3, 3e-3, 1e-2, 3e-2};
    std::size_t grid_steps = 20;
    std::size_t chains = 64;
    std::vector<double> h_values = {0.05, 0.1, 0.2, 0.4};
    double h_delta = 1e-2;
    double anchor_t = 0.5;
    std::size_t probes = 16;
    std::vector<std::size_t> crossover_steps = {10, 20, 40, 80, 160, 320, 640, 1280};
    int bound_order_terms = 4;
};

struct RunConfig {
    int version = kConfigVersion;
    std::string kind = "sample";
    std::uint64_t seed = 0;
    std::string out_dir = "out";
    NoiseSchedule schedule;
    GridSpec grid;
    DistributionSpec distribution;
    NetConfig net;
    TrainSpec train;
    QuantSpec2 quant;
    PtqSpec ptq;
    QloraSpec qlora;
    SampleSpec sample;
    EvaluateSpec evaluate;
    ErrorLabSpec error_lab;

    RunKind run_kind() const { return run_kind_from_name(kind); }
    void validate() const;
};

namespace detail {

inline void check_keys(const nlohmann::ordered_json& obj, const std::string& where,
                       std::initializer_list<std::string_view> known) {
    if (!obj.is_object())
        throw ConfigError("config: " + (where.empty() ? std::string("document") : where) +
                          " must be an object");
    for (const auto& item : obj.items()) {
        bool ok = false;
        for (std::string_view k : known)
            if (item.key() == k) { ok = true; break; }
        if (!ok)
            throw ConfigError("config: unknown key \"" +
                              (where.empty() ? item.key() : where + "." + item.key()) + "\"");
    }
}

template <typename T>
void read_field(const nlohmann::ordered_json& obj, const std::string& where,
                const char* key, T& out) {
    if (!obj.contains(key)) return;
    try {
        out = obj.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config: bad value for \"" + (where.empty() ? std::string(key)
                                                                      : where + "." + key) +
                          "\": " + e.what());
    }
}

} // namespace detail

inline void apply_json(RunConfig& cfg, const nlohmann::ordered_json& j) {
    using detail::check_keys;
    using detail::read_field;

    check_keys(j, "", {"version", "kind", "seed", "out_dir", "schedule", "grid", "distribution",
                       "net", "train", "quant", "ptq", "qlora", "sample", "evaluate",
                       "error_lab"});
    read_field(j, "", "version", cfg.version);
    read_field(j, "", "kind", cfg.kind);
    read_field(j, "", "seed", cfg.seed);
    read_field(j, "", "out_dir", cfg.out_dir);

    if (j.contains("schedule")) {
        const auto& s = j.at("schedule");
        check_keys(s, "schedule", {"beta_min", "beta_max", "final_time", "t_min"});
        read_field(s, "schedule", "beta_min", cfg.schedule.beta_min);
        read_field(s, "schedule", "beta_max", cfg.schedule.beta_max);
        read_field(s, "schedule", "final_time", cfg.schedule.final_time);
        read_field(s, "schedule", "t_min", cfg.schedule.t_min);
    }
    if (j.contains("grid")) {
        const auto& g = j.at("grid");
        check_keys(g, "grid", {"steps", "spacing"});
        read_field(g, "grid", "steps", cfg.grid.steps);
        read_field(g, "grid", "spacing", cfg.grid.spacing);
    }
    if (j.contains("distribution")) {
        const auto& d = j.at("distribution");
        check_keys(d, "distribution", {"kind", "components", "radius", "stddev", "mean"});
        read_field(d, "distribution", "kind", cfg.distribution.kind);
        read_field(d, "distribution", "components", cfg.distribution.components);
        read_field(d, "distribution", "radius", cfg.distribution.radius);
        read_field(d, "distribution", "stddev", cfg.distribution.stddev);
        read_field(d, "distribution", "mean", cfg.distribution.mean);
    }
    if (j.contains("net")) {
        const auto& n = j.at("net");
        check_keys(n, "net", {"input_dim", "hidden_widths", "time_embed_dim", "time_scale"});
        read_field(n, "net", "input_dim", cfg.net.input_dim);
        read_field(n, "net", "hidden_widths", cfg.net.hidden_widths);
        read_field(n, "net", "time_embed_dim", cfg.net.time_embed_dim);
        read_field(n, "net", "time_scale", cfg.net.time_scale);
    }
    if (j.contains("train")) {
        const auto& t = j.at("train");
        check_keys(t, "train", {"steps", "batch_size", "lr"});
        read_field(t, "train", "steps", cfg.train.steps);
        read_field(t, "train", "batch_size", cfg.train.batch_size);
        read_field(t, "train", "lr", cfg.train.lr);
    }
    if (j.contains("quant")) {
        const auto& q = j.at("quant");
        check_keys(q, "quant",
                   {"weight_bits", "act_bits", "edge_bits", "quantize_weights", "quantize_acts"});
        read_field(q, "quant", "weight_bits", cfg.quant.weight_bits);
        read_field(q, "quant", "act_bits", cfg.quant.act_bits);
        read_field(q, "quant", "edge_bits", cfg.quant.edge_bits);
        read_field(q, "quant", "quantize_weights", cfg.quant.quantize_weights);
        read_field(q, "quant", "quantize_acts", cfg.quant.quantize_acts);
    }
    if (j.contains("ptq")) {
        const auto& p = j.at("ptq");
        check_keys(p, "ptq", {"iterations", "lr", "act_lr", "reg_weight", "beta_start",
                              "beta_end", "warmup_frac", "pairing", "naive", "calib_seeds"});
        read_field(p, "ptq", "iterations", cfg.ptq.iterations);
        read_field(p, "ptq", "lr", cfg.ptq.lr);
        read_field(p, "ptq", "act_lr", cfg.ptq.act_lr);
        read_field(p, "ptq", "reg_weight", cfg.ptq.reg_weight);
        read_field(p, "ptq", "beta_start", cfg.ptq.beta_start);
        read_field(p, "ptq", "beta_end", cfg.ptq.beta_end);
        read_field(p, "ptq", "warmup_frac", cfg.ptq.warmup_frac);
        read_field(p, "ptq", "pairing", cfg.ptq.pairing);
        read_field(p, "ptq", "naive", cfg.ptq.naive);
        read_field(p, "ptq", "calib_seeds", cfg.ptq.calib_seeds);
    }
    if (j.contains("qlora")) {
        const auto& q = j.at("qlora");
        check_keys(q, "qlora", {"steps", "batch", "rank", "epochs", "w_cos", "w_mota", "lr",
                                "sample_seeds", "pairing", "plain", "divergence_threshold"});
        read_field(q, "qlora", "steps", cfg.qlora.steps);
        read_field(q, "qlora", "batch", cfg.qlora.batch);
        read_field(q, "qlora", "rank", cfg.qlora.rank);
        read_field(q, "qlora", "epochs", cfg.qlora.epochs);
        read_field(q, "qlora", "w_cos", cfg.qlora.w_cos);
        read_field(q, "qlora", "w_mota", cfg.qlora.w_mota);
        read_field(q, "qlora", "lr", cfg.qlora.lr);
        read_field(q, "qlora", "sample_seeds", cfg.qlora.sample_seeds);
        read_field(q, "qlora", "pairing", cfg.qlora.pairing);
        read_field(q, "qlora", "plain", cfg.qlora.plain);
        read_field(q, "qlora", "divergence_threshold", cfg.qlora.divergence_threshold);
    }
    if (j.contains("sample")) {
        const auto& s = j.at("sample");
        check_keys(s, "sample", {"sampler", "chains", "model"});
        read_field(s, "sample", "sampler", cfg.sample.sampler);
        read_field(s, "sample", "chains", cfg.sample.chains);
        read_field(s, "sample", "model", cfg.sample.model);
    }
    if (j.contains("evaluate")) {
        const auto& e = j.at("evaluate");
        check_keys(e, "evaluate", {"chains", "candidate"});
        read_field(e, "evaluate", "chains", cfg.evaluate.chains);
        read_field(e, "evaluate", "candidate", cfg.evaluate.candidate);
    }
    if (j.contains("error_lab")) {
        const auto& e = j.at("error_lab");
        check_keys(e, "error_lab", {"deltas", "grid_steps", "chains", "h_values", "h_delta",
                                    "anchor_t", "probes", "crossover_steps", "bound_order_terms"});
        read_field(e, "error_lab", "deltas", cfg.error_lab.deltas);
        read_field(e, "error_lab", "grid_steps", cfg.error_lab.grid_steps);
        read_field(e, "error_lab", "chains", cfg.error_lab.chains);
        read_field(e, "error_lab", "h_values", cfg.error_lab.h_values);
        read_field(e, "error_lab", "h_delta", cfg.error_lab.h_delta);
        read_field(e, "error_lab", "anchor_t", cfg.error_lab.anchor_t);
        read_field(e, "error_lab", "probes", cfg.error_lab.probes);
        read_field(e, "error_lab", "crossover_steps", cfg.error_lab.crossover_steps);
        read_field(e, "error_lab", "bound_order_terms", cfg.error_lab.bound_order_terms);
    }
}

inline SamplerKind sampler_kind_from_name(const std::string& s) {
    for (SamplerKind k : {SamplerKind::Ddim, SamplerKind::Dpm1, SamplerKind::Dpm2,
                          SamplerKind::Plms})
        if (s == sampler_name(k)) return k;
    throw ConfigError("config: unknown sampler \"" + s +
                      "\" (expected ddim | dpm1 | dpm2 | plms)");
}

inline PairingDirection pairing_from_name(const std::string& s) {
    if (s == "case-study") return PairingDirection::CaseStudy;
    if (s == "equation-literal") return PairingDirection::EquationLiteral;
    throw ConfigError("config: unknown pairing \"" + s +
                      "\" (expected case-study | equation-literal)");
}

inline void RunConfig::validate() const {
    if (version != kConfigVersion)
        throw ConfigError("config: unsupported version " + std::to_string(version));
    run_kind_from_name(kind); // throws ConfigError on bad kind
    try {
        schedule.validate();
        net.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    if (grid.steps == 0) throw ConfigError("config: grid.steps must be >= 1");
    if (grid.spacing != "uniform-lambda" && grid.spacing != "uniform-time")
        throw ConfigError("config: unknown grid.spacing \"" + grid.spacing +
                          "\" (expected uniform-lambda | uniform-time)");
    if (distribution.kind != "ring" && distribution.kind != "gaussian")
        throw ConfigError("config: unknown distribution.kind \"" + distribution.kind +
                          "\" (expected ring | gaussian)");
    if (distribution.kind == "ring" && distribution.components == 0)
        throw ConfigError("config: distribution.components must be >= 1");
    if (!(distribution.stddev > 0.0))
        throw ConfigError("config: distribution.stddev must be positive");
    if (distribution.kind == "gaussian" && distribution.mean.size() != net.input_dim)
        throw ConfigError("config: distribution.mean length must equal net.input_dim");
    if (train.steps == 0 || train.batch_size == 0)
        throw ConfigError("config: train.steps and train.batch_size must be >= 1");
    if (!(train.lr > 0.0)) throw ConfigError("config: train.lr must be positive");
    for (int b : {quant.weight_bits, quant.act_bits, quant.edge_bits})
        if (b < 2 || b > 16) throw ConfigError("config: quantization bits must lie in [2, 16]");
    if (ptq.iterations < 0) throw ConfigError("config: ptq.iterations must be >= 0");
    if (!(ptq.lr > 0.0)) throw ConfigError("config: ptq.lr must be positive");
    if (!(ptq.act_lr > 0.0)) throw ConfigError("config: ptq.act_lr must be positive");
    if (ptq.calib_seeds == 0) throw ConfigError("config: ptq.calib_seeds must be >= 1");
    if (!(ptq.warmup_frac >= 0.0 && ptq.warmup_frac <= 1.0))
        throw ConfigError("config: ptq.warmup_frac must lie in [0, 1]");
    pairing_from_name(ptq.pairing);
    pairing_from_name(qlora.pairing);
    sampler_kind_from_name(sample.sampler);
    model_variant_from_name(sample.model);
    model_variant_from_name(evaluate.candidate);
    if (sample.chains == 0) throw ConfigError("config: sample.chains must be >= 1");
    if (evaluate.chains < 2) throw ConfigError("config: evaluate.chains must be >= 2");
    try {
        SAQLoRAConfig qc;
        qc.steps = qlora.steps;
        qc.batch = qlora.batch;
        qc.rank = qlora.rank;
        qc.epochs = qlora.epochs;
        qc.w_cos = qlora.w_cos;
        qc.w_mota = qlora.w_mota;
        qc.lr = qlora.lr;
        qc.sample_seeds = qlora.sample_seeds;
        qc.pairing = pairing_from_name(qlora.pairing);
        qc.plain = qlora.plain;
        qc.divergence_threshold = qlora.divergence_threshold;
        qc.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("config: qlora: ") + e.what());
    }
    if (error_lab.deltas.empty() || error_lab.h_values.empty() ||
        error_lab.crossover_steps.empty())
        throw ConfigError("config: error_lab sweep lists must be non-empty");
    if (error_lab.grid_steps == 0 || error_lab.chains == 0 || error_lab.probes == 0)
        throw ConfigError("config: error_lab sizes must be >= 1");
}

inline RunConfig parse_config(const nlohmann::ordered_json& j) {
    RunConfig cfg;
    apply_json(cfg, j);
    cfg.validate();
    return cfg;
}

inline nlohmann::ordered_json to_json(const RunConfig& c) {
    nlohmann::ordered_json j;
    j["version"] = c.version;
    j["kind"] = c.kind;
    j["seed"] = c.seed;
    j["out_dir"] = c.out_dir;
    j["schedule"] = {{"beta_min", c.schedule.beta_min},
                     {"beta_max", c.schedule.beta_max},
                     {"final_time", c.schedule.final_time},
                     {"t_min", c.schedule.t_min}};
    j["grid"] = {{"steps", c.grid.steps}, {"spacing", c.grid.spacing}};
    j["distribution"] = {{"kind", c.distribution.kind},
                         {"components", c.distribution.components},
                         {"radius", c.distribution.radius},
                         {"stddev", c.distribution.stddev},
                         {"mean", c.distribution.mean}};
    j["net"] = {{"input_dim", c.net.input_dim},
                {"hidden_widths", c.net.hidden_widths},
                {"time_embed_dim", c.net.time_embed_dim},
                {"time_scale", c.net.time_scale}};
    j["train"] = {{"steps", c.train.steps},
                  {"batch_size", c.train.batch_size},
                  {"lr", c.train.lr}};
    j["quant"] = {{"weight_bits", c.quant.weight_bits},
                  {"act_bits", c.quant.act_bits},
                  {"edge_bits", c.quant.edge_bits},
                  {"quantize_weights", c.quant.quantize_weights},
                  {"quantize_acts", c.quant.quantize_acts}};
    j["ptq"] = {{"iterations", c.ptq.iterations},
                {"lr", c.ptq.lr},
                {"act_lr", c.ptq.act_lr},
                {"reg_weight", c.ptq.reg_weight},
                {"beta_start", c.ptq.beta_start},
                {"beta_end", c.ptq.beta_end},
                {"warmup_frac", c.ptq.warmup_frac},
                {"pairing", c.ptq.pairing},
                {"naive", c.ptq.naive},
                {"calib_seeds", c.ptq.calib_seeds}};
    j["qlora"] = {{"steps", c.qlora.steps},
                  {"batch", c.qlora.batch},
                  {"rank", c.qlora.rank},
                  {"epochs", c.qlora.epochs},
                  {"w_cos", c.qlora.w_cos},
                  {"w_mota", c.qlora.w_mota},
                  {"lr", c.qlora.lr},
                  {"sample_seeds", c.qlora.sample_seeds},
                  {"pairing", c.qlora.pairing},
                  {"plain", c.qlora.plain},
                  {"divergence_threshold", c.qlora.divergence_threshold}};
    j["sample"] = {{"sampler", c.sample.sampler},
                   {"chains", c.sample.chains},
                   {"model", c.sample.model}};
    j["evaluate"] = {{"chains", c.evaluate.chains}, {"candidate", c.evaluate.candidate}};
    j["error_lab"] = {{"deltas", c.error_lab.deltas},
                      {"grid_steps", c.error_lab.grid_steps},
                      {"chains", c.error_lab.chains},
                      {"h_values", c.error_lab.h_values},
                      {"h_delta", c.error_lab.h_delta},
                      {"anchor_t", c.error_lab.anchor_t},
                      {"probes", c.error_lab.probes},
                      {"crossover_steps", c.error_lab.crossover_steps},
                      {"bound_order_terms", c.error_lab.bound_order_terms}};
    return j;
}

// Dotted-path override "a.b.c=value"; the value is parsed as JSON when it is
// valid JSON, else taken as a string ("steps=[50,20]" nests, "kind=sample"
// stays text). Applied to the raw document, so unknown paths surface through
// the same strict parse as file keys.
inline void apply_override(nlohmann::ordered_json& doc, const std::string& kv) {
    const std::size_t eq = kv.find('=');
    if (eq == std::string::npos || eq == 0)
        throw ConfigError("config: override must look like key=value, got \"" + kv + "\"");
    const std::string path = kv.substr(0, eq);
    const std::string raw = kv.substr(eq + 1);

    nlohmann::ordered_json value;
    try {
        value = nlohmann::ordered_json::parse(raw);
    } catch (const nlohmann::json::exception&) {
        value = raw;
    }

    nlohmann::ordered_json* node = &doc;
    std::size_t begin = 0;
    while (true) {
        const std::size_t dot = path.find('.', begin);
        const std::string key = path.substr(begin, dot - begin);
        if (key.empty())
            throw ConfigError("config: empty path component in override \"" + kv + "\"");
        if (dot == std::string::npos) {
            (*node)[key] = std::move(value);
            return;
        }
        node = &(*node)[key];
        begin = dot + 1;
    }
}

inline nlohmann::ordered_json load_config_document(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot open " + path);
    try {
        return nlohmann::ordered_json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config: " + path + " is not valid JSON: " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Conversions into the domain types the stages consume.
// ---------------------------------------------------------------------------

inline ToyDistribution make_distribution(const RunConfig& c) {
    if (c.distribution.kind == "ring")
        return ToyDistribution::ring(c.distribution.components, c.distribution.radius,
                                     c.distribution.stddev);
    return ToyDistribution::single_gaussian(c.distribution.mean, c.distribution.stddev);
}

inline TimeGrid make_grid(const RunConfig& c) {
    if (c.grid.spacing == "uniform-time")
        return TimeGrid::uniform_time(c.schedule, c.grid.steps);
    return TimeGrid::uniform_lambda(c.schedule, c.grid.steps);
}

inline QuantPolicy make_quant_policy(const RunConfig& c) {
    QuantPolicy p;
    p.weight_bits = c.quant.weight_bits;
    p.act_bits = c.quant.act_bits;
    p.edge_bits = c.quant.edge_bits;
    p.quantize_weights = c.quant.quantize_weights;
    p.quantize_acts = c.quant.quantize_acts;
    return p;
}

inline PtqOptions make_ptq_options(const RunConfig& c) {
    PtqOptions o;
    o.iterations = c.ptq.iterations;
    o.lr = c.ptq.lr;
    o.act_lr = c.ptq.act_lr;
    o.reg_weight = c.ptq.reg_weight;
    o.beta_start = c.ptq.beta_start;
    o.beta_end = c.ptq.beta_end;
    o.warmup_frac = c.ptq.warmup_frac;
    o.pairing = pairing_from_name(c.ptq.pairing);
    return o;
}

inline SAQLoRAConfig make_qlora_config(const RunConfig& c) {
    SAQLoRAConfig qc;
    qc.steps = c.qlora.steps;
    qc.batch = c.qlora.batch;
    qc.rank = c.qlora.rank;
    qc.epochs = c.qlora.epochs;
    qc.w_cos = c.qlora.w_cos;
    qc.w_mota = c.qlora.w_mota;
    qc.lr = c.qlora.lr;
    qc.sample_seeds = c.qlora.sample_seeds;
    qc.pairing = pairing_from_name(c.qlora.pairing);
    qc.plain = c.qlora.plain;
    qc.divergence_threshold = c.qlora.divergence_threshold;
    return qc;
}

inline ScalingLawConfig make_scaling_config(const RunConfig& c) {
    ScalingLawConfig sc;
    sc.deltas = c.error_lab.deltas;
    sc.grid_steps = c.error_lab.grid_steps;
    sc.chains = c.error_lab.chains;
    sc.h_values = c.error_lab.h_values;
    sc.h_delta = c.error_lab.h_delta;
    sc.anchor_t = c.error_lab.anchor_t;
    sc.probes = c.error_lab.probes;
    sc.crossover_steps = c.error_lab.crossover_steps;
    sc.bound_order_terms = c.error_lab.bound_order_terms;
    sc.seed = c.seed;
    return sc;
}

inline TrainConfig make_train_config(const RunConfig& c, std::uint64_t subseed) {
    TrainConfig tc;
    tc.steps = c.train.steps;
    tc.batch_size = c.train.batch_size;
    tc.adam.lr = c.train.lr;
    tc.seed = subseed;
    return tc;
}

} // namespace saq
