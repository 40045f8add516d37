#include <cstdio>
#include <string>

#include "CLI11.hpp"

#include "edgerel/cli/commands.hpp"

namespace {

struct Flags {
    edgerel::cli::Options opt;
    std::uint64_t seed = 0;
    double budget = 0.0, tau = 0.0, noise_level = 0.0;
    std::vector<int> widths;
};

void add_common(CLI::App* sub, Flags& f) {
    sub->add_option("--config", f.opt.config, "JSON configuration merged over the defaults");
    sub->add_option("--out", f.opt.out, "output directory")->capture_default_str();
    sub->add_option("--seed", f.seed, "global seed");
    sub->add_option("--threads", f.opt.threads, "worker threads")->capture_default_str()->check(CLI::PositiveNumber);
    sub->add_option("--budget", f.budget, "protected fraction of bits, in [0, 1]");
    sub->add_option("--tau", f.tau, "relative degradation above which a bit is sensitive");
    sub->add_option("--noise-level", f.noise_level, "input noise level (default 0.05)");
    sub->add_option("--widths", f.widths, "study weight widths, e.g. 2,4,6,8")->delimiter(',');
    sub->add_option("--model", f.opt.model, "model file (default <out>/model.json)");
    sub->add_option("--model-b", f.opt.model_b, "second model file for cka");
    sub->add_option("--data", f.opt.data, "training data CSV (overrides data.csv)");
    sub->add_option("--campaign", f.opt.campaign, "campaign.json from fault-scan (default <out>/campaign.json)");
}

const char* describe(const std::string& name) {
    if (name == "gen-data") return "write synthetic training/eval data and the grid geometry";
    if (name == "train") return "train the benchmark autoencoder and store its integer codes";
    if (name == "eval") return "per-sample reconstruction EMD, clean and noisy";
    if (name == "landscape") return "2-D filter-normalized loss slice";
    if (name == "hessian") return "top Hessian eigenvalues and trace estimate";
    if (name == "cka") return "layer CKA between two models and neural efficiency";
    if (name == "fault-scan") return "bit-flip campaign over the stored encoder codes";
    if (name == "rank-bits") return "Hessian-guided bit sensitivity ranking";
    if (name == "protect") return "select bits for triple modular redundancy under a budget";
    if (name == "jacreg-train") return "train with Jacobian Frobenius regularization";
    if (name == "robustness-curve") return "noisy EMD versus regularization strength";
    if (name == "codegen") return "emit C99 inference source and conformance harness";
    if (name == "verify-codegen") return "emit, compile with $EDGEREL_CC, and run the harness";
    if (name == "study") return "width x lambda sweep with heatmap tables";
    return "";
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Reliability toolkit for quantized edge autoencoders", "edgerel"};
    app.require_subcommand(1);
    std::map<std::string, Flags> flags;
    for (const auto& [name, cmd] : edgerel::cli::commands()) add_common(app.add_subcommand(name, describe(name)), flags[name]);
    CLI11_PARSE(app, argc, argv);

    const auto* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    auto& f = flags[name];
    if (sub->count("--seed")) f.opt.seed = f.seed;
    if (sub->count("--budget")) f.opt.budget = f.budget;
    if (sub->count("--tau")) f.opt.tau = f.tau;
    if (sub->count("--noise-level")) f.opt.noise_level = f.noise_level;
    if (sub->count("--widths")) f.opt.widths = f.widths;
    try {
        edgerel::cli::run_command(name, f.opt);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "edgerel %s: %s\n", name.c_str(), e.what());
        return 1;
    }
    return 0;
}
