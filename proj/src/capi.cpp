#include "nullport.h"

#include <cstdlib>
#include <cstring>
#include <string>

#include "nullport/harness.hpp"

namespace {

thread_local std::string g_last_error;

void set_error(const char* msg) { g_last_error = msg ? msg : "unknown error"; }

using CommandFn = void (*)(const nullport::ExperimentConfig&, const nullport::RunOptions&);

}  // namespace

struct nullport_experiment {
    nullport::ExperimentConfig cfg;
    nullport::RunOptions opts;
};

namespace {

nullport_status run_guarded(nullport_experiment* exp, CommandFn fn) {
    if (!exp) {
        set_error("null experiment handle");
        return NULLPORT_ERR_RUNTIME;
    }
    try {
        fn(exp->cfg, exp->opts);
        g_last_error.clear();
        return NULLPORT_OK;
    } catch (const nullport::ConfigError& e) {
        set_error(e.what());
        return NULLPORT_ERR_CONFIG;
    } catch (const std::exception& e) {
        set_error(e.what());
        return NULLPORT_ERR_RUNTIME;
    }
}

}  // namespace

extern "C" {

const char* nullport_version(void) { return "0.1.0"; }

nullport_experiment* nullport_open(const char* config_path) {
    if (!config_path) {
        set_error("config_path is null");
        return nullptr;
    }
    try {
        auto cfg = nullport::load_experiment_config(config_path);
        auto* exp = new nullport_experiment{std::move(cfg), {}};
        g_last_error.clear();
        return exp;
    } catch (const std::exception& e) {
        set_error(e.what());
        return nullptr;
    }
}

void nullport_close(nullport_experiment* exp) { delete exp; }

void nullport_set_out_dir(nullport_experiment* exp, const char* dir) {
    if (exp && dir) exp->opts.out_dir = dir;
}

void nullport_override_seed(nullport_experiment* exp, uint64_t seed) {
    if (exp) exp->opts.seed = seed;
}

void nullport_set_threads(nullport_experiment* exp, int threads) {
    if (exp && threads > 0) exp->opts.threads = threads;
}

nullport_status nullport_run_train(nullport_experiment* exp) {
    return run_guarded(exp, &nullport::cmd_train);
}

nullport_status nullport_run_bench_scaling(nullport_experiment* exp) {
    return run_guarded(exp, &nullport::cmd_bench_scaling);
}

nullport_status nullport_run_error_control(nullport_experiment* exp) {
    return run_guarded(exp, &nullport::cmd_error_control);
}

nullport_status nullport_run_compare_baseline(nullport_experiment* exp) {
    return run_guarded(exp, &nullport::cmd_compare_baseline);
}

char* nullport_manifest(const nullport_experiment* exp) {
    if (!exp) {
        set_error("null experiment handle");
        return nullptr;
    }
    try {
        const std::string text = nullport::manifest_json(exp->cfg).dump(2);
        char* out = static_cast<char*>(std::malloc(text.size() + 1));
        if (!out) {
            set_error("out of memory");
            return nullptr;
        }
        std::memcpy(out, text.c_str(), text.size() + 1);
        return out;
    } catch (const std::exception& e) {
        set_error(e.what());
        return nullptr;
    }
}

void nullport_string_free(char* s) { std::free(s); }

const char* nullport_last_error(void) { return g_last_error.c_str(); }

}  // extern "C"
