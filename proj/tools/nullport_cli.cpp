#include <cstdint>
#include <cstdio>
#include <string>

#include <CLI11.hpp>

#include "nullport.h"

namespace {

struct CommonArgs {
    std::string config;
    std::string out = ".";
    std::uint64_t seed = 0;
    int threads = 0;
};

void attach_common(CLI::App* sub, CommonArgs& args) {
    sub->add_option("--config", args.config, "experiment config (JSON)")->required();
    sub->add_option("--out", args.out, "output directory (default: current)");
    sub->add_option("--seed", args.seed, "override the config seed list");
    sub->add_option("--threads", args.threads, "basis-construction threads");
}

int run(const std::string& command, const CLI::App* sub, const CommonArgs& args) {
    nullport_experiment* exp = nullport_open(args.config.c_str());
    if (!exp) {
        std::fprintf(stderr, "error: %s\n", nullport_last_error());
        return NULLPORT_ERR_CONFIG;
    }
    nullport_set_out_dir(exp, args.out.c_str());
    if (sub->count("--seed") > 0) nullport_override_seed(exp, args.seed);
    if (sub->count("--threads") > 0) nullport_set_threads(exp, args.threads);

    nullport_status status;
    if (command == "train")
        status = nullport_run_train(exp);
    else if (command == "bench-scaling")
        status = nullport_run_bench_scaling(exp);
    else if (command == "error-control")
        status = nullport_run_error_control(exp);
    else
        status = nullport_run_compare_baseline(exp);

    if (status != NULLPORT_OK) std::fprintf(stderr, "error: %s\n", nullport_last_error());
    nullport_close(exp);
    return static_cast<int>(status);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"level-set teleportation experiments"};
    app.set_version_flag("--version", nullport_version());
    app.require_subcommand(1);

    CommonArgs args;
    attach_common(app.add_subcommand("train", "train per seed, emit metrics CSVs"), args);
    attach_common(app.add_subcommand("bench-scaling", "runtime scaling grid"), args);
    attach_common(
        app.add_subcommand("error-control", "tau sweep on a fixed model snapshot"), args);
    attach_common(app.add_subcommand("compare-baseline",
                                     "plain vs symmetry vs null-space runs"),
                  args);

    CLI11_PARSE(app, argc, argv);

    const CLI::App* sub = app.get_subcommands().front();
    return run(sub->get_name(), sub, args);
}
