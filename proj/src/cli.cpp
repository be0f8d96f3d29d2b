#include "mwa/cli.hpp"

#include <algorithm>
#include <cerrno>
#include <cstdlib>
#include <ostream>

#include <CLI11.hpp>

#include "mwa/config.hpp"
#include "mwa/experiments.hpp"

namespace mwa {

namespace {

std::uint64_t parse_seed_text(const std::string& text, const std::string& what) {
    errno = 0;
    char* end = nullptr;
    const unsigned long long v = std::strtoull(text.c_str(), &end, 10);
    if (text.empty() || end != text.c_str() + text.size() || errno == ERANGE ||
        text.find('-') != std::string::npos)
        throw ConfigError(what + ": '" + text + "' is not a valid seed (expected an unsigned integer)");
    return static_cast<std::uint64_t>(v);
}

struct CommonFlags {
    std::string config_path;
    std::string out_dir;
    std::string seed_text;
};

void add_common(CLI::App* sub, CommonFlags& f) {
    sub->add_option("--config", f.config_path, "configuration file (key = value lines)")
        ->check(CLI::ExistingFile);
    sub->add_option("--seed", f.seed_text, "master seed (overrides MWA_SEED and the config file)");
    sub->add_option("--out", f.out_dir, "output directory");
}

/// Seed precedence: --seed beats MWA_SEED beats the config file's seed.
ExperimentConfig resolve_config(const CLI::App* sub, const CommonFlags& f) {
    ExperimentConfig cfg;
    if (sub->count("--config") > 0) cfg = load_config_file(f.config_path);
    if (sub->count("--seed") > 0) {
        cfg.seed = parse_seed_text(f.seed_text, "--seed");
    } else if (const char* env = std::getenv("MWA_SEED")) {
        cfg.seed = parse_seed_text(env, "MWA_SEED");
    }
    if (sub->count("--out") > 0) cfg.out_dir = f.out_dir;
    return cfg;
}

}  // namespace

int run_cli(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
    CLI::App app{"desk-scale MultiWay-Adapter experiment driver"};
    app.set_help_all_flag("--help-all", "expanded help for every subcommand");
    app.require_subcommand(1);

    CommonFlags train_flags, sweep_flags, ablate_flags, drift_flags, grad_flags, count_flags,
        gendata_flags;
    std::string mode_text = "mwa";
    std::vector<int> mids{0, 1, 2, 4, 8, 16};

    CLI::App* train = app.add_subcommand("train", "fine-tune one model and write report/metrics/checkpoint");
    add_common(train, train_flags);
    train->add_option("--mode", mode_text, "full = train every parameter, mwa = adapters only")
        ->check(CLI::IsMember({"full", "mwa"}));

    CLI::App* sweep = app.add_subcommand("sweep", "train one adapter model per mid-dimension");
    add_common(sweep, sweep_flags);
    sweep->add_option("--mids", mids, "comma-separated extractor mid-dimensions")->delimiter(',');

    CLI::App* ablate = app.add_subcommand("ablate", "compare full fine-tune and each adapter component");
    add_common(ablate, ablate_flags);

    CLI::App* drift = app.add_subcommand("driftcheck",
                                         "measure embedding drift on held-out concepts after training");
    add_common(drift, drift_flags);

    CLI::App* grad = app.add_subcommand("gradcheck", "finite-difference check of adapter gradients");
    add_common(grad, grad_flags);

    CLI::App* count = app.add_subcommand("count", "print the parameter budget of the adapted model");
    add_common(count, count_flags);

    CLI::App* gendata = app.add_subcommand("gen-data", "generate the synthetic dataset file");
    add_common(gendata, gendata_flags);

    try {
        std::reverse(args.begin(), args.end());
        app.parse(std::move(args));
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : 1;
    }

    try {
        if (train->parsed()) {
            const FinetuneMode mode = mode_text == "full" ? FinetuneMode::full : FinetuneMode::mwa;
            cmd_train(resolve_config(train, train_flags), mode, out);
        } else if (sweep->parsed()) {
            cmd_sweep(resolve_config(sweep, sweep_flags), mids, out);
        } else if (ablate->parsed()) {
            cmd_ablate(resolve_config(ablate, ablate_flags), out);
        } else if (drift->parsed()) {
            cmd_driftcheck(resolve_config(drift, drift_flags), out);
        } else if (grad->parsed()) {
            cmd_gradcheck(resolve_config(grad, grad_flags), out);
        } else if (count->parsed()) {
            cmd_count(resolve_config(count, count_flags), out);
        } else if (gendata->parsed()) {
            cmd_gendata(resolve_config(gendata, gendata_flags), out);
        }
        return 0;
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }
}

}  // namespace mwa
