// saq — sampling-aware quantization laboratory CLI.
//
//   saq <command> --config <path> [--seed N] [--out DIR] [--override key=value]
//
// The command names the pipeline stage and takes precedence over the config
// file's "kind"; --seed and --out likewise override the file. --override
// accepts dotted paths ("qlora.epochs=0", "grid.steps=40") and may repeat.
// Exit codes: 0 success, 2 config error, 3 stage failure, 4 divergence.

#include "saq/harness.hpp"

#include <CLI11.hpp>

#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

int main(int argc, char** argv) {
    CLI::App app{"saq: a desk-scale laboratory for sampling-aware quantization of "
                 "diffusion ODE samplers"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir;
    std::optional<std::uint64_t> seed;
    std::vector<std::string> overrides;

    static const std::pair<const char*, const char*> kCommands[] = {
        {"train", "train the full-precision denoiser"},
        {"calibrate-ptq", "run sampling-aware post-training quantization"},
        {"finetune-qlora", "run sampling-aware QLoRA fine-tuning"},
        {"sample", "sample trajectories from a model variant"},
        {"analyze-error", "fit the error-accumulation scaling laws"},
        {"evaluate", "compare a model variant against the full-precision reference"},
        {"ablate", "QLoRA run that also persists the PTQ-initialized model"},
    };
    for (const auto& [name, desc] : kCommands) {
        CLI::App* sub = app.add_subcommand(name, desc);
        sub->add_option("--config", config_path, "JSON run configuration")->required();
        sub->add_option("--seed", seed, "root seed (overrides the config file)");
        sub->add_option("--out", out_dir, "output directory (overrides the config file)");
        sub->add_option("--override", overrides,
                        "dotted-path config override key=value; may repeat");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2; // CLI misuse is a config error
    }

    try {
        nlohmann::ordered_json doc = saq::load_config_document(config_path);
        doc["kind"] = app.get_subcommands().front()->get_name();
        if (seed) doc["seed"] = *seed;
        if (!out_dir.empty()) doc["out_dir"] = out_dir;
        for (const std::string& ov : overrides) saq::apply_override(doc, ov);

        const saq::RunConfig cfg = saq::parse_config(doc);
        const saq::RunManifest man = saq::run(cfg);
        std::printf("ok: %s seed=%llu out=%s (%.2fs)\n", cfg.kind.c_str(),
                    static_cast<unsigned long long>(cfg.seed), cfg.out_dir.c_str(),
                    man.wall_seconds);
        return 0;
    } catch (const saq::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const saq::DivergenceError& e) {
        std::fprintf(stderr, "divergence: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "stage failure: %s\n", e.what());
        return 3;
    }
}
