#pragma once

// Deterministic end-to-end orchestration. run(config) executes one pipeline
// stage — every stage is self-contained (it trains whatever it needs from the
// config and the root seed), so (config, seed, build) determines every
// emitted byte. All randomness flows through derive_subseed(root, label,
// index); each derivation is logged in the manifest. The manifest itself is
// written atomically (tmp file + rename) at run end, including on stage
// failure, where it records the failure point.

#include "saq/config.hpp"
#include "saq/errors.hpp"
#include "saq/errorlab.hpp"
#include "saq/io.hpp"
#include "saq/metrics.hpp"
#include "saq/net.hpp"
#include "saq/rng.hpp"
#include "saq/samplers.hpp"
#include "saq/saquant.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

namespace saq {

inline std::string build_id() { return std::string("saq 0.1.0 (") + __DATE__ " " __TIME__ ")"; }

// Shortest decimal that round-trips a double; used for every numeric cell in
// CSV output so reruns are byte-identical.
inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string hex64(std::uint64_t v) {
    char buf[24];
    std::snprintf(buf, sizeof buf, "0x%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline std::uint64_t fnv1a64_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("hash: cannot open " + path.string());
    std::uint64_t h = kFnvOffset;
    char buf[1 << 16];
    while (is.read(buf, sizeof buf) || is.gcount() > 0)
        h = fnv1a64(reinterpret_cast<const unsigned char*>(buf),
                    static_cast<std::size_t>(is.gcount()), h);
    return h;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& content) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("write: cannot open " + path.string());
    os << content;
    if (!os) throw std::runtime_error("write: failed for " + path.string());
}

struct StageStatus {
    std::string name;
    std::string status; // "ok" or "failed: <reason>"
    double seconds = 0.0;
};

struct RunManifest {
    nlohmann::ordered_json config; // resolved echo
    std::string build;
    std::string started_at;
    double wall_seconds = 0.0;
    std::vector<StageStatus> stages;
    std::vector<std::string> seed_log;
    nlohmann::ordered_json summary = nlohmann::ordered_json::object();
    std::vector<std::pair<std::string, std::string>> artifacts; // name -> content hash
};

inline nlohmann::ordered_json manifest_json(const RunManifest& m) {
    nlohmann::ordered_json j;
    j["format"] = "saq-run-manifest";
    j["version"] = 1;
    j["build"] = m.build;
    j["started_at"] = m.started_at;
    j["wall_seconds"] = m.wall_seconds;
    j["config"] = m.config;
    j["stages"] = nlohmann::ordered_json::array();
    for (const StageStatus& s : m.stages)
        j["stages"].push_back({{"name", s.name}, {"status", s.status}, {"seconds", s.seconds}});
    j["seed_log"] = m.seed_log;
    j["summary"] = m.summary;
    j["artifacts"] = nlohmann::ordered_json::object();
    for (const auto& [name, hash] : m.artifacts) j["artifacts"][name] = hash;
    return j;
}

inline void write_manifest(const std::filesystem::path& out_dir, const RunManifest& m) {
    const std::filesystem::path tmp = out_dir / "manifest.json.tmp";
    const std::filesystem::path dst = out_dir / "manifest.json";
    write_text_file(tmp, manifest_json(m).dump(2) + "\n");
    std::filesystem::rename(tmp, dst);
}

namespace detail {

inline std::string utc_timestamp() {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

// Everything a stage touches: resolved config, derived inputs, the manifest
// under construction, and the logged sub-seed derivation.
struct StageContext {
    const RunConfig& cfg;
    NoiseSchedule sched;
    ToyDistribution dist;
    std::filesystem::path out;
    RunManifest& man;

    std::uint64_t subseed(std::string_view stage, std::uint64_t index) {
        const std::uint64_t s = derive_subseed(cfg.seed, stage, index);
        man.seed_log.push_back("derive_subseed(" + std::to_string(cfg.seed) + ", \"" +
                               std::string(stage) + "\", " + std::to_string(index) +
                               ") = " + hex64(s));
        return s;
    }

    void add_artifact(const std::string& name) {
        man.artifacts.emplace_back(name, hex64(fnv1a64_file(out / name)));
    }
};

inline Tensor normal_init(std::uint64_t seed, std::size_t chains, std::size_t dim) {
    Rng rng(seed);
    Tensor x({chains, dim});
    for (double& v : x.data) v = rng.normal();
    return x;
}

inline Trajectory sample_or_throw(const DirectionalEvaluator& eval, const StageContext& ctx,
                                  const TimeGrid& grid, const Tensor& x_init,
                                  SamplerKind kind) {
    SampleOptions opt;
    opt.kind = kind;
    opt.record_evals = false;
    Trajectory traj = sample(eval, ctx.sched, grid, x_init, opt);
    if (traj.diverged)
        throw DivergenceError("sample: state exceeded divergence threshold",
                              traj.diverged_step);
    return traj;
}

inline std::string trajectory_csv(const Trajectory& traj) {
    std::string csv = "chain,step,t";
    for (std::size_t d = 0; d < traj.dim; ++d) csv += ",x" + std::to_string(d);
    csv += "\n";
    for (std::size_t c = 0; c < traj.chains; ++c)
        for (std::size_t i = 0; i < traj.times.size(); ++i) {
            csv += std::to_string(c) + "," + std::to_string(i) + "," +
                   format_double(traj.times[i]);
            for (std::size_t d = 0; d < traj.dim; ++d)
                csv += "," + format_double(traj.states[i].at(c, d));
            csv += "\n";
        }
    return csv;
}

inline Parameters stage_train_fp(StageContext& ctx, std::vector<double>* loss_history = nullptr) {
    const TrainConfig tc = make_train_config(ctx.cfg, ctx.subseed("train", 0));
    TrainResult res = train_denoiser(ctx.cfg.net, ctx.dist, ctx.sched, tc);
    if (loss_history) *loss_history = std::move(res.loss_history);
    ctx.man.summary["train_final_loss"] = res.final_loss;
    return std::move(res.params);
}

// Shared quantization pipeline: min-max init, activation-range fit on the
// dual-order calibration trajectories, then per-layer reconstruction (the
// degenerate same-point baseline when cfg.ptq.naive is set).
struct QuantBuild {
    QuantModel model;
    CalibrationSet calib;
    std::vector<LayerReconstruction> recons;
    double delta_before = 0.0;
    double delta_after = 0.0;
};

inline QuantBuild build_ptq(StageContext& ctx, const Parameters& fp_params,
                            const DirectionalEvaluator& fp_eval) {
    QuantBuild b;
    b.model = make_quant_model(fp_params, make_quant_policy(ctx.cfg));
    const TimeGrid grid = make_grid(ctx.cfg);
    std::vector<std::uint64_t> seeds;
    seeds.reserve(ctx.cfg.ptq.calib_seeds);
    for (std::size_t i = 0; i < ctx.cfg.ptq.calib_seeds; ++i)
        seeds.push_back(ctx.subseed("calib", i));
    b.calib = collect_dual_trajectories(fp_eval, ctx.sched, grid, seeds, ctx.cfg.net.input_dim);
    if (b.calib.pairs.empty())
        throw DivergenceError("calibrate-ptq: every calibration seed diverged", 0);
    fit_act_specs(b.model, b.calib);
    b.delta_before = empirical_delta(b.model, b.calib);
    b.recons = ptq_pipeline(b.model, b.calib, make_ptq_options(ctx.cfg), ctx.cfg.ptq.naive);
    b.delta_after = empirical_delta(b.model, b.calib);
    return b;
}

inline std::string recon_csv(const std::vector<LayerReconstruction>& recons) {
    std::string csv = "layer,loss_before,loss_after\n";
    for (const LayerReconstruction& r : recons)
        csv += std::to_string(r.layer) + "," + format_double(r.loss_before) + "," +
               format_double(r.loss_after) + "\n";
    return csv;
}

inline std::string qlora_log_csv(const std::vector<QLoRAStepLog>& log) {
    std::string csv = "minibatch,cycle,epoch,total,cos_term,mota_term\n";
    for (std::size_t i = 0; i < log.size(); ++i)
        csv += std::to_string(i) + "," + std::to_string(log[i].cycle) + "," +
               std::to_string(log[i].epoch) + "," + format_double(log[i].total) + "," +
               format_double(log[i].cos_term) + "," + format_double(log[i].mota_term) + "\n";
    return csv;
}

inline void run_train(StageContext& ctx) {
    std::vector<double> losses;
    const Parameters params = stage_train_fp(ctx, &losses);
    save_net_checkpoint((ctx.out / "net.bin").string(), params);
    ctx.add_artifact("net.bin");
    ctx.add_artifact("net.bin.json");
    std::string csv = "step,loss\n";
    for (std::size_t i = 0; i < losses.size(); ++i)
        csv += std::to_string(i) + "," + format_double(losses[i]) + "\n";
    write_text_file(ctx.out / "metrics.csv", csv);
    ctx.add_artifact("metrics.csv");
}

// Builds the evaluator the config's model-variant selector names. PTQ and
// QLoRA variants run their full calibration/fine-tune pipelines in-process.
inline DirectionalEvaluator build_variant(StageContext& ctx, ModelVariant variant,
                                          const Parameters& fp_params,
                                          const DirectionalEvaluator& fp_eval) {
    if (variant == ModelVariant::Fp) return make_net_evaluator(fp_params);
    QuantBuild b = build_ptq(ctx, fp_params, fp_eval);
    if (variant == ModelVariant::Ptq) return make_quant_evaluator(std::move(b.model));
    const std::vector<std::string> warnings =
        attach_adapter(b.model, ctx.cfg.qlora.rank, ctx.subseed("adapter", 0));
    for (const std::string& w : warnings) ctx.man.summary["warnings"].push_back(w);
    SAQLoRAResult res = sa_qlora_train(b.model, fp_eval, ctx.sched, make_qlora_config(ctx.cfg),
                                       ctx.subseed("qlora", 0));
    for (const std::string& w : res.warnings) ctx.man.summary["warnings"].push_back(w);
    return make_quant_evaluator(std::move(res.model));
}

inline void run_sample(StageContext& ctx) {
    const Parameters params = stage_train_fp(ctx);
    const DirectionalEvaluator fp_eval = make_net_evaluator(params);
    const DirectionalEvaluator eval =
        build_variant(ctx, model_variant_from_name(ctx.cfg.sample.model), params, fp_eval);
    const TimeGrid grid = make_grid(ctx.cfg);
    const Tensor x_init = normal_init(ctx.subseed("sample-init", 0), ctx.cfg.sample.chains,
                                      ctx.cfg.net.input_dim);
    const Trajectory traj = sample_or_throw(eval, ctx, grid, x_init,
                                            sampler_kind_from_name(ctx.cfg.sample.sampler));
    write_text_file(ctx.out / "trajectories.csv", trajectory_csv(traj));
    ctx.add_artifact("trajectories.csv");

    std::string csv = "step,t,mean_norm\n";
    for (std::size_t i = 0; i < traj.times.size(); ++i) {
        double acc = 0.0;
        for (std::size_t c = 0; c < traj.chains; ++c) {
            double sq = 0.0;
            for (std::size_t d = 0; d < traj.dim; ++d) {
                const double v = traj.states[i].at(c, d);
                sq += v * v;
            }
            acc += std::sqrt(sq);
        }
        csv += std::to_string(i) + "," + format_double(traj.times[i]) + "," +
               format_double(acc / static_cast<double>(traj.chains)) + "\n";
    }
    write_text_file(ctx.out / "metrics.csv", csv);
    ctx.add_artifact("metrics.csv");
}

inline void run_calibrate_ptq(StageContext& ctx) {
    const Parameters params = stage_train_fp(ctx);
    const DirectionalEvaluator fp_eval = make_net_evaluator(params);
    QuantBuild b = build_ptq(ctx, params, fp_eval);
    save_quant_checkpoint((ctx.out / "quant_ptq.bin").string(), b.model);
    ctx.add_artifact("quant_ptq.bin");
    ctx.add_artifact("quant_ptq.bin.json");
    write_text_file(ctx.out / "metrics.csv", recon_csv(b.recons));
    ctx.add_artifact("metrics.csv");
    ctx.man.summary["calibration_pairs"] = b.calib.pairs.size();
    ctx.man.summary["calibration_skipped_seeds"] = b.calib.skipped_seeds;
    ctx.man.summary["empirical_delta_before"] = b.delta_before;
    ctx.man.summary["empirical_delta_after"] = b.delta_after;
}

// finetune-qlora and ablate share one body: ablate persists the
// PTQ-initialized model next to the trained one so no-op training settings
// are verifiable by hash equality.
inline void run_qlora_stage(StageContext& ctx, bool save_init) {
    const Parameters params = stage_train_fp(ctx);
    const DirectionalEvaluator fp_eval = make_net_evaluator(params);
    QuantBuild b = build_ptq(ctx, params, fp_eval);
    const std::vector<std::string> warnings =
        attach_adapter(b.model, ctx.cfg.qlora.rank, ctx.subseed("adapter", 0));
    for (const std::string& w : warnings) ctx.man.summary["warnings"].push_back(w);
    if (save_init) {
        save_quant_checkpoint((ctx.out / "quant_init.bin").string(), b.model);
        ctx.add_artifact("quant_init.bin");
        ctx.add_artifact("quant_init.bin.json");
    }
    SAQLoRAResult res = sa_qlora_train(b.model, fp_eval, ctx.sched, make_qlora_config(ctx.cfg),
                                       ctx.subseed("qlora", 0));
    for (const std::string& w : res.warnings) ctx.man.summary["warnings"].push_back(w);
    const char* trained_name = save_init ? "quant_trained.bin" : "quant_qlora.bin";
    save_quant_checkpoint((ctx.out / trained_name).string(), res.model);
    ctx.add_artifact(trained_name);
    ctx.add_artifact(std::string(trained_name) + ".json");
    write_text_file(ctx.out / "metrics.csv", qlora_log_csv(res.log));
    ctx.add_artifact("metrics.csv");
    ctx.man.summary["qlora_minibatches"] = res.log.size();
    ctx.man.summary["empirical_delta_ptq"] = b.delta_after;
    ctx.man.summary["empirical_delta_qlora"] = empirical_delta(res.model, b.calib);
}

inline nlohmann::ordered_json fit_json(const FitResult& f) {
    return {{"slope", f.slope}, {"intercept", f.intercept}, {"ci95", f.ci95}};
}

inline nlohmann::ordered_json sweep_json(const std::vector<SweepPoint>& sweep) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const SweepPoint& p : sweep)
        arr.push_back({{"value", p.value}, {"dev_dpm1", p.dev_dpm1}, {"dev_dpm2", p.dev_dpm2}});
    return arr;
}

inline nlohmann::ordered_json step_records_json(const std::vector<StepBoundRecord>& recs) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const StepBoundRecord& r : recs)
        arr.push_back({{"step", r.step},
                       {"lambda_s", r.lambda_s},
                       {"lambda_t", r.lambda_t},
                       {"directional_dev", r.directional_dev},
                       {"state_dev", r.state_dev},
                       {"bound", r.bound}});
    return arr;
}

inline nlohmann::ordered_json error_report_json(const ErrorReport& rep) {
    nlohmann::ordered_json j;
    j["config"] = {{"deltas", rep.config.deltas},
                   {"grid_steps", rep.config.grid_steps},
                   {"chains", rep.config.chains},
                   {"h_values", rep.config.h_values},
                   {"h_delta", rep.config.h_delta},
                   {"anchor_t", rep.config.anchor_t},
                   {"probes", rep.config.probes},
                   {"crossover_steps", rep.config.crossover_steps},
                   {"bound_order_terms", rep.config.bound_order_terms},
                   {"seed", rep.config.seed}};
    j["delta_sweep"] = sweep_json(rep.delta_sweep);
    j["delta_fit"] = {{"dpm1", fit_json(rep.delta_fit_dpm1)}, {"dpm2", fit_json(rep.delta_fit_dpm2)}};
    j["h_sweep"] = sweep_json(rep.h_sweep);
    j["h_fit"] = {{"dpm1", fit_json(rep.h_fit_dpm1)}, {"dpm2", fit_json(rep.h_fit_dpm2)}};
    j["step_records"] = {{"dpm1", step_records_json(rep.step_records_dpm1)},
                         {"dpm2", step_records_json(rep.step_records_dpm2)}};
    j["c_per_delta"] = {{"dpm1", rep.c_per_delta_dpm1}, {"dpm2", rep.c_per_delta_dpm2}};
    j["c_fit"] = {{"dpm1", rep.c_fit_dpm1}, {"dpm2", rep.c_fit_dpm2}};
    j["c_stable"] = {{"dpm1", rep.c_stable_dpm1}, {"dpm2", rep.c_stable_dpm2}};
    j["crossover"] = nlohmann::ordered_json::array();
    for (const CrossoverRecord& c : rep.crossover)
        j["crossover"].push_back({{"delta", c.delta},
                                  {"h_cross", c.h_cross},
                                  {"h_values", c.h_values},
                                  {"disc_errors", c.disc_errors},
                                  {"quant_errors", c.quant_errors}});
    return j;
}

inline void run_analyze_error(StageContext& ctx) {
    const DirectionalEvaluator base = make_analytic_evaluator(ctx.dist, ctx.sched);
    const ErrorReport rep =
        fit_scaling_laws(ctx.sched, base, make_scaling_config(ctx.cfg), ctx.cfg.net.input_dim);
    write_text_file(ctx.out / "error_report.json", error_report_json(rep).dump(2) + "\n");
    ctx.add_artifact("error_report.json");

    std::string csv = "sampler,step,lambda_s,lambda_t,directional_dev,state_dev,bound\n";
    auto rows = [&csv](const char* name, const std::vector<StepBoundRecord>& recs) {
        for (const StepBoundRecord& r : recs)
            csv += std::string(name) + "," + std::to_string(r.step) + "," +
                   format_double(r.lambda_s) + "," + format_double(r.lambda_t) + "," +
                   format_double(r.directional_dev) + "," + format_double(r.state_dev) + "," +
                   format_double(r.bound) + "\n";
    };
    rows("dpm1", rep.step_records_dpm1);
    rows("dpm2", rep.step_records_dpm2);
    write_text_file(ctx.out / "metrics.csv", csv);
    ctx.add_artifact("metrics.csv");

    ctx.man.summary["delta_slope_dpm1"] = rep.delta_fit_dpm1.slope;
    ctx.man.summary["delta_slope_dpm2"] = rep.delta_fit_dpm2.slope;
    ctx.man.summary["h_slope_dpm1"] = rep.h_fit_dpm1.slope;
    ctx.man.summary["h_slope_dpm2"] = rep.h_fit_dpm2.slope;
}

inline void run_evaluate(StageContext& ctx) {
    const Parameters params = stage_train_fp(ctx);
    const DirectionalEvaluator fp_eval = make_net_evaluator(params);
    const ModelVariant cand = model_variant_from_name(ctx.cfg.evaluate.candidate);
    const DirectionalEvaluator cand_eval = build_variant(ctx, cand, params, fp_eval);
    const TimeGrid grid = make_grid(ctx.cfg);
    const std::size_t dim = ctx.cfg.net.input_dim;
    const SamplerKind kind = sampler_kind_from_name(ctx.cfg.sample.sampler);

    // Trajectory deviation on a shared batch of initial states.
    const Tensor x_traj = normal_init(ctx.subseed("eval-traj", 0), ctx.cfg.sample.chains, dim);
    const Trajectory cand_traj = sample_or_throw(cand_eval, ctx, grid, x_traj, kind);
    const Trajectory ref_traj = sample_or_throw(fp_eval, ctx, grid, x_traj, kind);
    const TrajectoryMse tm = trajectory_mse(ref_traj, cand_traj);
    write_text_file(ctx.out / "trajectories.csv", trajectory_csv(cand_traj));
    ctx.add_artifact("trajectories.csv");

    std::string csv = "step,t,traj_mse\n";
    for (std::size_t i = 0; i < tm.per_step.size(); ++i)
        csv += std::to_string(i) + "," + format_double(cand_traj.times[i]) + "," +
               format_double(tm.per_step[i]) + "\n";
    write_text_file(ctx.out / "metrics.csv", csv);
    ctx.add_artifact("metrics.csv");

    // Distributional deviation: two independent candidate batches, plus two
    // independent full-precision reference batches whose energy distance sets
    // the self-distance noise floor (reported as 3x that measurement).
    const std::size_t n = ctx.cfg.evaluate.chains;
    auto endpoint = [&](const DirectionalEvaluator& eval, std::string_view label,
                        std::uint64_t idx) {
        const Tensor x0 = normal_init(ctx.subseed(label, idx), n, dim);
        return sample_or_throw(eval, ctx, grid, x0, kind).endpoint();
    };
    const Tensor cand_a = endpoint(cand_eval, "eval-cand", 0);
    const Tensor cand_b = endpoint(cand_eval, "eval-cand", 1);
    const Tensor ref_a = endpoint(fp_eval, "eval-ref", 0);
    const Tensor ref_b = endpoint(fp_eval, "eval-ref", 1);
    const double self_ed = energy_distance(cand_a, cand_b);
    const double floor_ed = energy_distance(ref_a, ref_b);
    const double cross_ed = energy_distance(cand_a, ref_a);

    ctx.man.summary["trajectory_mse_endpoint"] = tm.endpoint;
    ctx.man.summary["self_energy_distance"] = self_ed;
    ctx.man.summary["noise_floor"] = 3.0 * floor_ed;
    ctx.man.summary["cross_energy_distance"] = cross_ed;
}

} // namespace detail

inline RunManifest run(const RunConfig& cfg) {
    cfg.validate(); // throws ConfigError before anything is written

    RunManifest man;
    man.config = to_json(cfg);
    man.build = build_id();
    man.started_at = detail::utc_timestamp();

    const std::filesystem::path out(cfg.out_dir);
    std::filesystem::create_directories(out);

    detail::StageContext ctx{cfg, cfg.schedule, make_distribution(cfg), out, man};
    const RunKind kind = cfg.run_kind();
    const auto t0 = std::chrono::steady_clock::now();
    auto elapsed = [&t0] {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    };
    try {
        switch (kind) {
            case RunKind::Train: detail::run_train(ctx); break;
            case RunKind::Sample: detail::run_sample(ctx); break;
            case RunKind::CalibratePtq: detail::run_calibrate_ptq(ctx); break;
            case RunKind::FinetuneQlora: detail::run_qlora_stage(ctx, false); break;
            case RunKind::Ablate: detail::run_qlora_stage(ctx, true); break;
            case RunKind::AnalyzeError: detail::run_analyze_error(ctx); break;
            case RunKind::Evaluate: detail::run_evaluate(ctx); break;
        }
    } catch (const std::exception& e) {
        man.stages.push_back({cfg.kind, std::string("failed: ") + e.what(), elapsed()});
        man.wall_seconds = elapsed();
        write_manifest(out, man);
        throw;
    }
    man.stages.push_back({cfg.kind, "ok", elapsed()});
    man.wall_seconds = elapsed();
    write_manifest(out, man);
    return man;
}

} // namespace saq
