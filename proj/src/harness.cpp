#include "nullport/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace nullport {
namespace {

using nlohmann::json;

// Parameter initialization must not collide with the per-epoch training
// streams (2e and 2e+1), so it lives at a far-away stream id.
constexpr std::uint64_t kInitStream = 0x9E3779B97F4A7C15ull;
// Stream for the fixed batch sequence shared by every tau in error-control.
constexpr std::uint64_t kErrorControlStream = 17;

[[noreturn]] void fail(const std::string& msg) { throw ConfigError(msg); }

void check_keys(const json& obj, const std::vector<std::string>& allowed,
                const std::string& where) {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        bool known = false;
        for (const auto& k : allowed) {
            if (it.key() == k) {
                known = true;
                break;
            }
        }
        if (!known) fail("unknown key '" + it.key() + "' in " + where);
    }
}

const json& need(const json& obj, const char* key, const std::string& where) {
    auto it = obj.find(key);
    if (it == obj.end()) fail(where + " needs '" + key + "'");
    return *it;
}

double as_double(const json& v, const std::string& where) {
    if (!v.is_number()) fail(where + " must be a number");
    return v.get<double>();
}

std::int64_t as_int(const json& v, const std::string& where) {
    if (!v.is_number_integer()) fail(where + " must be an integer");
    return v.get<std::int64_t>();
}

std::uint64_t as_u64(const json& v, const std::string& where) {
    if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() &&
                                   v.get<std::int64_t>() < 0))
        fail(where + " must be a non-negative integer");
    return v.get<std::uint64_t>();
}

std::size_t as_size(const json& v, const std::string& where) {
    return static_cast<std::size_t>(as_u64(v, where));
}

bool as_bool(const json& v, const std::string& where) {
    if (!v.is_boolean()) fail(where + " must be true or false");
    return v.get<bool>();
}

std::string as_string(const json& v, const std::string& where) {
    if (!v.is_string()) fail(where + " must be a string");
    return v.get<std::string>();
}

template <typename T, typename Fn>
std::vector<T> as_array(const json& v, const std::string& where, Fn elem) {
    if (!v.is_array()) fail(where + " must be an array");
    std::vector<T> out;
    for (const auto& e : v) out.push_back(elem(e, where + " element"));
    return out;
}

Activation parse_activation(const json& v, const std::string& where) {
    try {
        return activation_from_string(as_string(v, where));
    } catch (const std::invalid_argument& e) {
        fail(where + ": " + e.what());
    }
}

ModelConfig parse_model(const json& j) {
    ModelConfig mc;
    mc.kind = as_string(need(j, "kind", "model"), "model.kind");
    if (mc.kind == "mlp") {
        check_keys(j, {"kind", "input_dim", "hidden", "output_dim", "activation", "alpha"},
                   "model");
        mc.mlp.input_dim = as_size(need(j, "input_dim", "mlp model"), "model.input_dim");
        mc.mlp.hidden = as_array<std::size_t>(need(j, "hidden", "mlp model"),
                                              "model.hidden", as_size);
        mc.mlp.output_dim = as_size(need(j, "output_dim", "mlp model"), "model.output_dim");
        if (j.contains("activation"))
            mc.mlp.hidden_act = parse_activation(j["activation"], "model.activation");
        if (j.contains("alpha")) mc.mlp.alpha = as_double(j["alpha"], "model.alpha");
    } else if (mc.kind == "cnn") {
        check_keys(j,
                   {"kind", "channels", "height", "width", "kernel", "stride", "pad",
                    "pool", "output_dim", "activation", "alpha"},
                   "model");
        auto channels = as_array<std::size_t>(need(j, "channels", "cnn model"),
                                              "model.channels", as_size);
        if (channels.size() < 2) fail("model.channels needs input plus one conv stage");
        mc.cnn.in_ch = channels.front();
        mc.cnn.channels.assign(channels.begin() + 1, channels.end());
        mc.cnn.in_h = as_size(need(j, "height", "cnn model"), "model.height");
        mc.cnn.in_w = as_size(need(j, "width", "cnn model"), "model.width");
        mc.cnn.output_dim = as_size(need(j, "output_dim", "cnn model"), "model.output_dim");
        if (j.contains("kernel")) mc.cnn.kernel = as_size(j["kernel"], "model.kernel");
        if (j.contains("stride")) mc.cnn.stride = as_size(j["stride"], "model.stride");
        if (j.contains("pad")) mc.cnn.pad = as_size(j["pad"], "model.pad");
        if (j.contains("pool")) mc.cnn.pool = as_size(j["pool"], "model.pool");
        if (j.contains("activation"))
            mc.cnn.act = parse_activation(j["activation"], "model.activation");
        if (j.contains("alpha")) mc.cnn.alpha = as_double(j["alpha"], "model.alpha");
    } else if (mc.kind == "transformer") {
        check_keys(j,
                   {"kind", "seq_len", "input_dim", "d_model", "heads", "blocks",
                    "ffn_dim", "output_dim", "causal", "pool"},
                   "model");
        mc.transformer.seq_len = as_size(need(j, "seq_len", "transformer model"),
                                         "model.seq_len");
        mc.transformer.input_dim = as_size(need(j, "input_dim", "transformer model"),
                                           "model.input_dim");
        mc.transformer.d_model = as_size(need(j, "d_model", "transformer model"),
                                         "model.d_model");
        mc.transformer.heads = as_size(need(j, "heads", "transformer model"),
                                       "model.heads");
        mc.transformer.output_dim = as_size(need(j, "output_dim", "transformer model"),
                                            "model.output_dim");
        mc.transformer.blocks =
            j.contains("blocks") ? as_size(j["blocks"], "model.blocks") : 1;
        mc.transformer.ffn_dim = j.contains("ffn_dim")
                                     ? as_size(j["ffn_dim"], "model.ffn_dim")
                                     : 2 * mc.transformer.d_model;
        if (j.contains("causal")) mc.transformer.causal = as_bool(j["causal"], "model.causal");
        if (j.contains("pool")) {
            std::string p = as_string(j["pool"], "model.pool");
            if (p == "last")
                mc.transformer.pool_last_token = true;
            else if (p == "mean")
                mc.transformer.pool_last_token = false;
            else
                fail("model.pool must be 'mean' or 'last'");
        }
        if (mc.transformer.heads == 0 || mc.transformer.d_model % mc.transformer.heads != 0)
            fail("model.heads must divide model.d_model");
        if (mc.transformer.ffn_dim == 0) fail("model.ffn_dim must be at least 1");
    } else {
        fail("model.kind must be 'mlp', 'cnn' or 'transformer'");
    }
    return mc;
}

DatasetConfig parse_dataset(const json& j) {
    DatasetConfig dc;
    dc.kind = as_string(need(j, "kind", "dataset"), "dataset.kind");
    if (j.contains("data_seed")) dc.data_seed = as_u64(j["data_seed"], "dataset.data_seed");
    if (dc.kind == "idx") {
        check_keys(j,
                   {"kind", "data_seed", "train_images", "train_labels", "test_images",
                    "test_labels", "subset", "downsample", "classes"},
                   "dataset");
        dc.train_images = as_string(need(j, "train_images", "idx dataset"),
                                    "dataset.train_images");
        dc.train_labels = as_string(need(j, "train_labels", "idx dataset"),
                                    "dataset.train_labels");
        dc.test_images = as_string(need(j, "test_images", "idx dataset"),
                                   "dataset.test_images");
        dc.test_labels = as_string(need(j, "test_labels", "idx dataset"),
                                   "dataset.test_labels");
        if (j.contains("subset")) dc.subset = as_size(j["subset"], "dataset.subset");
        if (j.contains("downsample"))
            dc.downsample = as_size(j["downsample"], "dataset.downsample");
        if (dc.downsample == 0) fail("dataset.downsample must be at least 1");
        if (j.contains("classes")) dc.classes = static_cast<int>(as_u64(j["classes"], "dataset.classes"));
    } else if (dc.kind == "synthetic_images") {
        check_keys(j,
                   {"kind", "data_seed", "count", "test_count", "classes", "height",
                    "width", "noise"},
                   "dataset");
        dc.count = as_size(need(j, "count", "synthetic_images dataset"), "dataset.count");
        dc.classes = static_cast<int>(
            as_u64(need(j, "classes", "synthetic_images dataset"), "dataset.classes"));
        dc.height = as_size(need(j, "height", "synthetic_images dataset"), "dataset.height");
        dc.width = as_size(need(j, "width", "synthetic_images dataset"), "dataset.width");
        dc.test_count = j.contains("test_count")
                            ? as_size(j["test_count"], "dataset.test_count")
                            : std::max<std::size_t>(1, dc.count / 5);
        if (j.contains("noise")) dc.noise = as_double(j["noise"], "dataset.noise");
        if (dc.count == 0) fail("dataset.count must be at least 1");
        if (dc.test_count == 0) fail("dataset.test_count must be at least 1");
        if (dc.classes < 2) fail("dataset.classes must be at least 2");
        if (dc.height == 0 || dc.width == 0) fail("dataset image extents must be positive");
    } else if (dc.kind == "synthetic_sequences") {
        check_keys(j,
                   {"kind", "data_seed", "dims", "length", "window", "horizon",
                    "test_count"},
                   "dataset");
        dc.dims = as_size(need(j, "dims", "synthetic_sequences dataset"), "dataset.dims");
        dc.length = as_size(need(j, "length", "synthetic_sequences dataset"),
                            "dataset.length");
        dc.window = as_size(need(j, "window", "synthetic_sequences dataset"),
                            "dataset.window");
        dc.horizon = j.contains("horizon") ? as_size(j["horizon"], "dataset.horizon") : 1;
        if (dc.dims == 0 || dc.window == 0 || dc.horizon == 0)
            fail("dataset dims, window and horizon must be positive");
        if (dc.length < dc.window + dc.horizon)
            fail("dataset.length must be at least window + horizon");
        const std::size_t total = dc.length - dc.window - dc.horizon + 1;
        dc.test_count = j.contains("test_count")
                            ? as_size(j["test_count"], "dataset.test_count")
                            : std::max<std::size_t>(1, total / 6);
        if (dc.test_count == 0 || dc.test_count >= total)
            fail("dataset.test_count must leave at least one training window");
    } else {
        fail("dataset.kind must be 'idx', 'synthetic_images' or 'synthetic_sequences'");
    }
    return dc;
}

OptimizerConfig parse_optimizer(const json& j) {
    check_keys(j, {"kind", "lr", "beta", "beta1", "beta2", "eps"}, "optimizer");
    OptimizerConfig oc;
    if (j.contains("kind")) {
        try {
            oc.kind = optimizer_from_string(as_string(j["kind"], "optimizer.kind"));
        } catch (const std::invalid_argument& e) {
            fail(std::string("optimizer.kind: ") + e.what());
        }
    }
    if (j.contains("lr")) oc.lr = as_double(j["lr"], "optimizer.lr");
    if (j.contains("beta")) oc.beta = as_double(j["beta"], "optimizer.beta");
    if (j.contains("beta1")) oc.beta1 = as_double(j["beta1"], "optimizer.beta1");
    if (j.contains("beta2")) oc.beta2 = as_double(j["beta2"], "optimizer.beta2");
    if (j.contains("eps")) oc.eps = as_double(j["eps"], "optimizer.eps");
    if (oc.eps == 0.0) {
        if (oc.kind == OptimizerKind::adagrad) oc.eps = 1e-10;
        if (oc.kind == OptimizerKind::adam) oc.eps = 1e-8;
    }
    if (!(oc.lr > 0.0) || !std::isfinite(oc.lr)) fail("optimizer.lr must be positive");
    return oc;
}

void parse_teleport(const json& j, TeleportConfig& tc, double& symmetry_lr) {
    check_keys(j,
               {"eta", "batches", "steps", "schedule", "cap", "tau", "warmup_steps",
                "batch_size", "fd_step_scale", "sign", "threads", "record_loss_after",
                "symmetry_lr"},
               "teleport");
    if (j.contains("eta")) tc.eta = as_double(j["eta"], "teleport.eta");
    if (j.contains("batches"))
        tc.batches = static_cast<int>(as_int(j["batches"], "teleport.batches"));
    if (j.contains("steps")) tc.steps = static_cast<int>(as_int(j["steps"], "teleport.steps"));
    if (j.contains("schedule")) {
        auto eps = as_array<std::int64_t>(j["schedule"], "teleport.schedule", as_int);
        for (auto e : eps) {
            if (e < 0) fail("teleport.schedule entries must be non-negative epochs");
            tc.schedule.insert(static_cast<int>(e));
        }
    }
    if (j.contains("cap")) tc.cap = as_double(j["cap"], "teleport.cap");
    if (j.contains("tau")) tc.tau = as_double(j["tau"], "teleport.tau");
    if (j.contains("warmup_steps"))
        tc.warmup_steps = static_cast<int>(as_int(j["warmup_steps"], "teleport.warmup_steps"));
    if (j.contains("batch_size"))
        tc.batch_size = as_size(j["batch_size"], "teleport.batch_size");
    if (j.contains("fd_step_scale"))
        tc.fd_step_scale = as_double(j["fd_step_scale"], "teleport.fd_step_scale");
    if (j.contains("sign")) {
        std::string s = as_string(j["sign"], "teleport.sign");
        if (s == "ascent")
            tc.descent = false;
        else if (s == "descent")
            tc.descent = true;
        else
            fail("teleport.sign must be 'ascent' or 'descent'");
    }
    if (j.contains("threads"))
        tc.threads = static_cast<int>(as_int(j["threads"], "teleport.threads"));
    if (j.contains("record_loss_after"))
        tc.record_loss_after = as_bool(j["record_loss_after"], "teleport.record_loss_after");
    if (j.contains("symmetry_lr"))
        symmetry_lr = as_double(j["symmetry_lr"], "teleport.symmetry_lr");
    if (!(symmetry_lr > 0.0) || !std::isfinite(symmetry_lr))
        fail("teleport.symmetry_lr must be positive");
}

ProbeGridConfig parse_probe(const json& j) {
    check_keys(j, {"base", "t", "d", "n", "l", "b", "methods", "repeats", "seed"},
               "probe");
    ProbeGridConfig pc;
    auto small_int = [](const json& v, const std::string& where) {
        auto x = as_int(v, where);
        if (x < 1) fail(where + " must be at least 1");
        return static_cast<int>(x);
    };
    if (j.contains("base")) {
        const json& b = j["base"];
        check_keys(b, {"t", "d", "n", "l", "b"}, "probe.base");
        if (b.contains("t")) pc.base.t = small_int(b["t"], "probe.base.t");
        if (b.contains("d")) pc.base.d = as_size(b["d"], "probe.base.d");
        if (b.contains("n")) pc.base.n = as_size(b["n"], "probe.base.n");
        if (b.contains("l")) pc.base.l = small_int(b["l"], "probe.base.l");
        if (b.contains("b")) pc.base.b = small_int(b["b"], "probe.base.b");
    }
    if (j.contains("t")) pc.t = as_array<int>(j["t"], "probe.t", small_int);
    if (j.contains("d")) pc.d = as_array<std::size_t>(j["d"], "probe.d", as_size);
    if (j.contains("n")) pc.n = as_array<std::size_t>(j["n"], "probe.n", as_size);
    if (j.contains("l")) pc.l = as_array<int>(j["l"], "probe.l", small_int);
    if (j.contains("b")) pc.b = as_array<int>(j["b"], "probe.b", small_int);
    if (j.contains("methods")) {
        pc.methods.clear();
        for (const auto& m : j["methods"]) {
            try {
                pc.methods.push_back(probe_method_from_string(as_string(m, "probe.methods")));
            } catch (const std::invalid_argument& e) {
                fail(std::string("probe.methods: ") + e.what());
            }
        }
        if (pc.methods.empty()) fail("probe.methods must not be empty");
    }
    if (j.contains("repeats")) pc.repeats = small_int(j["repeats"], "probe.repeats");
    if (j.contains("seed")) pc.seed = as_u64(j["seed"], "probe.seed");
    return pc;
}

TimingMode parse_timing(const json& v) {
    std::string s = as_string(v, "timing");
    if (s == "off") return TimingMode::off;
    if (s == "cpu") return TimingMode::cpu;
    if (s == "real") return TimingMode::real;
    fail("timing must be 'off', 'cpu' or 'real'");
}

std::string timing_to_string(TimingMode m) {
    switch (m) {
        case TimingMode::off: return "off";
        case TimingMode::cpu: return "cpu";
        case TimingMode::real: return "real";
    }
    return "cpu";
}

std::string fmt17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string resolve_data_path(const std::string& p) {
    if (p.empty() || std::filesystem::path(p).is_absolute()) return p;
    if (const char* dir = std::getenv("NULLPORT_DATA_DIR")) {
        return (std::filesystem::path(dir) / p).string();
    }
    return p;
}

Tensor slice_rows(const Tensor& t, std::size_t start, std::size_t n) {
    std::vector<std::size_t> shape = t.shape();
    const std::size_t per = t.size() / shape[0];
    shape[0] = n;
    Tensor out(shape);
    std::copy_n(t.data() + start * per, n * per, out.data());
    return out;
}

ImageDataset slice_images(const ImageDataset& ds, std::size_t start, std::size_t n) {
    ImageDataset out;
    out.images = slice_rows(ds.images, start, n);
    out.labels.assign(ds.labels.begin() + static_cast<std::ptrdiff_t>(start),
                      ds.labels.begin() + static_cast<std::ptrdiff_t>(start + n));
    out.num_classes = ds.num_classes;
    out.name = ds.name;
    return out;
}

std::vector<std::uint64_t> resolve_seeds(const ExperimentConfig& cfg,
                                         const RunOptions& opts) {
    if (opts.seed) return {*opts.seed};
    return cfg.seeds;
}

void write_manifest(const ExperimentConfig& cfg, const RunOptions& opts,
                    const std::string& command,
                    const std::vector<std::uint64_t>& seeds_used) {
    json doc;
    doc["command"] = command;
    doc["out_dir"] = opts.out_dir;
    doc["seeds_used"] = seeds_used;
    doc["threads"] = opts.threads ? *opts.threads : cfg.teleport.threads;
    doc["config"] = manifest_json(cfg);
    write_text_file((std::filesystem::path(opts.out_dir) / "manifest.json").string(),
                    doc.dump(2) + "\n");
}

void ensure_out_dir(const RunOptions& opts) {
    std::error_code ec;
    std::filesystem::create_directories(opts.out_dir, ec);
    if (ec) throw std::runtime_error("cannot create output directory " + opts.out_dir);
}

TeleportConfig effective_teleport(const ExperimentConfig& cfg, const RunOptions& opts) {
    TeleportConfig tc = cfg.teleport;
    if (opts.threads) tc.threads = *opts.threads;
    return tc;
}

}  // namespace

ExperimentConfig parse_experiment_config(const json& doc) {
    if (!doc.is_object()) fail("config root must be a JSON object");
    check_keys(doc,
               {"model", "dataset", "loss", "optimizer", "teleport", "epochs",
                "batch_size", "seeds", "timing", "taus", "probe"},
               "config");
    ExperimentConfig cfg;
    if (doc.contains("model")) cfg.model = parse_model(doc["model"]);
    if (doc.contains("dataset")) cfg.dataset = parse_dataset(doc["dataset"]);

    if (cfg.dataset && cfg.dataset->kind == "synthetic_sequences")
        cfg.loss = LossKind::mse;
    if (doc.contains("loss")) {
        try {
            cfg.loss = loss_from_string(as_string(doc["loss"], "loss"));
        } catch (const std::invalid_argument& e) {
            fail(std::string("loss: ") + e.what());
        }
    }
    if (cfg.dataset) {
        const bool labeled = cfg.dataset->kind != "synthetic_sequences";
        if (labeled && cfg.loss == LossKind::mse)
            fail("labeled image datasets train with cross_entropy");
        if (!labeled && cfg.loss == LossKind::cross_entropy)
            fail("sequence regression datasets train with mse");
    }

    if (doc.contains("optimizer")) cfg.optimizer = parse_optimizer(doc["optimizer"]);
    if (doc.contains("teleport"))
        parse_teleport(doc["teleport"], cfg.teleport, cfg.symmetry_lr);
    if (doc.contains("epochs")) {
        auto e = as_int(doc["epochs"], "epochs");
        if (e < 0) fail("epochs must be non-negative");
        cfg.epochs = static_cast<int>(e);
    }
    if (doc.contains("batch_size")) {
        cfg.batch_size = as_size(doc["batch_size"], "batch_size");
        if (cfg.batch_size == 0) fail("batch_size must be at least 1");
    }
    if (doc.contains("seeds")) {
        cfg.seeds = as_array<std::uint64_t>(doc["seeds"], "seeds", as_u64);
        if (cfg.seeds.empty()) fail("seeds must not be empty");
    }
    if (doc.contains("timing")) cfg.timing = parse_timing(doc["timing"]);
    if (doc.contains("taus")) {
        cfg.taus = as_array<double>(doc["taus"], "taus", as_double);
        if (cfg.taus.empty()) fail("taus must not be empty");
        for (double t : cfg.taus)
            if (!(t >= 0.0 && t <= 1.0)) fail("taus entries must lie in [0, 1]");
    }
    if (doc.contains("probe")) cfg.probe = parse_probe(doc["probe"]);

    try {
        validate(cfg.teleport);
    } catch (const std::invalid_argument& e) {
        fail(std::string("teleport: ") + e.what());
    }
    return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail("cannot open config file " + path);
    json doc;
    try {
        in >> doc;
    } catch (const json::parse_error& e) {
        fail("config " + path + " is not valid JSON: " + e.what());
    }
    return parse_experiment_config(doc);
}

json manifest_json(const ExperimentConfig& cfg) {
    json doc;
    if (cfg.model) {
        json m;
        m["kind"] = cfg.model->kind;
        if (cfg.model->kind == "mlp") {
            m["input_dim"] = cfg.model->mlp.input_dim;
            m["hidden"] = cfg.model->mlp.hidden;
            m["output_dim"] = cfg.model->mlp.output_dim;
            m["activation"] = to_string(cfg.model->mlp.hidden_act);
            m["alpha"] = cfg.model->mlp.alpha;
        } else if (cfg.model->kind == "cnn") {
            std::vector<std::size_t> channels{cfg.model->cnn.in_ch};
            channels.insert(channels.end(), cfg.model->cnn.channels.begin(),
                            cfg.model->cnn.channels.end());
            m["channels"] = channels;
            m["height"] = cfg.model->cnn.in_h;
            m["width"] = cfg.model->cnn.in_w;
            m["kernel"] = cfg.model->cnn.kernel;
            m["stride"] = cfg.model->cnn.stride;
            m["pad"] = cfg.model->cnn.pad;
            m["pool"] = cfg.model->cnn.pool;
            m["output_dim"] = cfg.model->cnn.output_dim;
            m["activation"] = to_string(cfg.model->cnn.act);
            m["alpha"] = cfg.model->cnn.alpha;
        } else {
            m["seq_len"] = cfg.model->transformer.seq_len;
            m["input_dim"] = cfg.model->transformer.input_dim;
            m["d_model"] = cfg.model->transformer.d_model;
            m["heads"] = cfg.model->transformer.heads;
            m["blocks"] = cfg.model->transformer.blocks;
            m["ffn_dim"] = cfg.model->transformer.ffn_dim;
            m["output_dim"] = cfg.model->transformer.output_dim;
            m["causal"] = cfg.model->transformer.causal;
            m["pool"] = cfg.model->transformer.pool_last_token ? "last" : "mean";
        }
        doc["model"] = m;
    }
    if (cfg.dataset) {
        json d;
        d["kind"] = cfg.dataset->kind;
        d["data_seed"] = cfg.dataset->data_seed;
        if (cfg.dataset->kind == "idx") {
            d["train_images"] = cfg.dataset->train_images;
            d["train_labels"] = cfg.dataset->train_labels;
            d["test_images"] = cfg.dataset->test_images;
            d["test_labels"] = cfg.dataset->test_labels;
            d["subset"] = cfg.dataset->subset;
            d["downsample"] = cfg.dataset->downsample;
            if (cfg.dataset->classes > 0) d["classes"] = cfg.dataset->classes;
        } else if (cfg.dataset->kind == "synthetic_images") {
            d["count"] = cfg.dataset->count;
            d["test_count"] = cfg.dataset->test_count;
            d["classes"] = cfg.dataset->classes;
            d["height"] = cfg.dataset->height;
            d["width"] = cfg.dataset->width;
            d["noise"] = cfg.dataset->noise;
        } else {
            d["dims"] = cfg.dataset->dims;
            d["length"] = cfg.dataset->length;
            d["window"] = cfg.dataset->window;
            d["horizon"] = cfg.dataset->horizon;
            d["test_count"] = cfg.dataset->test_count;
        }
        doc["dataset"] = d;
    }
    doc["loss"] = to_string(cfg.loss);
    doc["optimizer"] = {{"kind", to_string(cfg.optimizer.kind)},
                        {"lr", cfg.optimizer.lr},
                        {"beta", cfg.optimizer.beta},
                        {"beta1", cfg.optimizer.beta1},
                        {"beta2", cfg.optimizer.beta2},
                        {"eps", cfg.optimizer.eps}};
    doc["teleport"] = {{"eta", cfg.teleport.eta},
                       {"batches", cfg.teleport.batches},
                       {"steps", cfg.teleport.steps},
                       {"schedule", std::vector<int>(cfg.teleport.schedule.begin(),
                                                     cfg.teleport.schedule.end())},
                       {"cap", cfg.teleport.cap},
                       {"tau", cfg.teleport.tau},
                       {"warmup_steps", cfg.teleport.warmup_steps},
                       {"batch_size", cfg.teleport.batch_size},
                       {"fd_step_scale", cfg.teleport.fd_step_scale},
                       {"sign", cfg.teleport.descent ? "descent" : "ascent"},
                       {"threads", cfg.teleport.threads},
                       {"record_loss_after", cfg.teleport.record_loss_after},
                       {"symmetry_lr", cfg.symmetry_lr}};
    doc["epochs"] = cfg.epochs;
    doc["batch_size"] = cfg.batch_size;
    doc["seeds"] = cfg.seeds;
    doc["timing"] = timing_to_string(cfg.timing);
    doc["taus"] = cfg.taus;
    std::vector<std::string> methods;
    for (auto m : cfg.probe.methods) methods.push_back(to_string(m));
    doc["probe"] = {{"base",
                     {{"t", cfg.probe.base.t},
                      {"d", cfg.probe.base.d},
                      {"n", cfg.probe.base.n},
                      {"l", cfg.probe.base.l},
                      {"b", cfg.probe.base.b}}},
                    {"t", cfg.probe.t},
                    {"d", cfg.probe.d},
                    {"n", cfg.probe.n},
                    {"l", cfg.probe.l},
                    {"b", cfg.probe.b},
                    {"methods", methods},
                    {"repeats", cfg.probe.repeats},
                    {"seed", cfg.probe.seed}};
    return doc;
}

DataView DatasetBundle::train() const {
    return {&train_x, train_y.empty() ? nullptr : &train_y,
            train_labels.empty() ? nullptr : &train_labels};
}

DataView DatasetBundle::test() const {
    return {&test_x, test_y.empty() ? nullptr : &test_y,
            test_labels.empty() ? nullptr : &test_labels};
}

SeededRng init_rng(std::uint64_t seed) { return SeededRng(seed).fork(kInitStream); }

ModelGraph build_model(const ExperimentConfig& cfg, std::uint64_t seed) {
    if (!cfg.model) fail("this command needs a 'model' section");
    SeededRng rng = init_rng(seed);
    try {
        if (cfg.model->kind == "mlp") return build_mlp(cfg.model->mlp, rng);
        if (cfg.model->kind == "cnn") return build_cnn(cfg.model->cnn, rng);
        return build_transformer(cfg.model->transformer, rng);
    } catch (const std::invalid_argument& e) {
        fail(std::string("model: ") + e.what());
    }
}

namespace {

void images_into_bundle(const ExperimentConfig& cfg, const ImageDataset& train,
                        const ImageDataset& test, DatasetBundle& out) {
    const std::string& kind = cfg.model ? cfg.model->kind : std::string("mlp");
    if (kind == "mlp") {
        out.train_x = flatten_images(train);
        out.test_x = flatten_images(test);
        if (cfg.model && cfg.model->mlp.input_dim != out.train_x.extent(1))
            fail("model.input_dim does not match the flattened image size");
    } else if (kind == "cnn") {
        out.train_x = train.images;
        out.test_x = test.images;
        if (cfg.model) {
            const auto& c = cfg.model->cnn;
            if (c.in_ch != train.images.extent(1) || c.in_h != train.images.extent(2) ||
                c.in_w != train.images.extent(3))
                fail("cnn model extents do not match the dataset images");
        }
    } else {
        Tensor tr = images_to_sequences(train);
        Tensor te = images_to_sequences(test);
        if (cfg.model && cfg.model->transformer.seq_len != tr.extent(1))
            fail("model.seq_len does not match the image pixel count");
        if (cfg.model && cfg.model->transformer.input_dim != 1)
            fail("sequential image input has dimension 1 per token");
        out.train_x = std::move(tr);
        out.test_x = std::move(te);
    }
    out.train_labels = train.labels;
    out.test_labels = test.labels;
    int classes = std::max(train.num_classes, test.num_classes);
    if (cfg.model) {
        std::size_t out_dim = kind == "mlp" ? cfg.model->mlp.output_dim
                              : kind == "cnn" ? cfg.model->cnn.output_dim
                                              : cfg.model->transformer.output_dim;
        if (out_dim < static_cast<std::size_t>(classes))
            fail("model.output_dim is smaller than the number of classes");
    }
}

}  // namespace

DatasetBundle make_dataset(const ExperimentConfig& cfg) {
    if (!cfg.dataset) fail("this command needs a 'dataset' section");
    const DatasetConfig& dc = *cfg.dataset;
    DatasetBundle out;
    SeededRng rng(dc.data_seed);

    if (dc.kind == "synthetic_sequences") {
        if (!cfg.model || cfg.model->kind != "transformer")
            fail("sequence datasets drive transformer models");
        SequenceDataset sd =
            synth_timeseries_windows(rng, dc.dims, dc.length, dc.window, dc.horizon);
        const std::size_t total = sd.inputs.extent(0);
        const std::size_t train_n = total - dc.test_count;
        out.train_x = slice_rows(sd.inputs, 0, train_n);
        out.train_y = slice_rows(sd.targets, 0, train_n);
        out.test_x = slice_rows(sd.inputs, train_n, dc.test_count);
        out.test_y = slice_rows(sd.targets, train_n, dc.test_count);
        const auto& t = cfg.model->transformer;
        if (t.seq_len != dc.window) fail("model.seq_len must equal dataset.window");
        if (t.input_dim != dc.dims) fail("model.input_dim must equal dataset.dims");
        if (t.output_dim != dc.dims) fail("model.output_dim must equal dataset.dims");
        return out;
    }

    ImageDataset train, test;
    if (dc.kind == "idx") {
        train = load_idx(resolve_data_path(dc.train_images),
                         resolve_data_path(dc.train_labels));
        test = load_idx(resolve_data_path(dc.test_images),
                        resolve_data_path(dc.test_labels));
        if (dc.downsample > 1) {
            train = downsample_images(train, dc.downsample);
            test = downsample_images(test, dc.downsample);
        }
        if (dc.subset > 0 && dc.subset < train.count())
            train = subset_images(train, dc.subset, rng);
        if (dc.classes > 0) {
            train.num_classes = dc.classes;
            test.num_classes = dc.classes;
        }
    } else {
        ImageDataset all = synth_images(rng, dc.count + dc.test_count, dc.classes,
                                        dc.height, dc.width, dc.noise);
        train = slice_images(all, 0, dc.count);
        test = slice_images(all, dc.count, dc.test_count);
    }
    images_into_bundle(cfg, train, test, out);
    return out;
}

std::string metrics_csv(const std::vector<EpochMetric>& rows) {
    std::ostringstream os;
    os << "seed,epoch,global_step,wall_seconds,train_loss,test_loss,test_accuracy,"
          "teleport\n";
    for (const auto& r : rows) {
        os << r.seed << ',' << r.epoch << ',' << r.global_step << ','
           << fmt17(r.seconds) << ',' << fmt17(r.train_loss) << ','
           << fmt17(r.test_loss) << ',';
        if (r.has_accuracy) os << fmt17(r.test_accuracy);
        os << ',' << (r.teleported ? 1 : 0) << '\n';
    }
    return os.str();
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << content;
    if (!out) throw std::runtime_error("short write to " + path);
}

TrainResult train_with_symmetry(ModelGraph& model, const DataView& train,
                                const DataView& test, OptimizerState& opt,
                                LossKind kind, const TeleportConfig& tcfg,
                                const SymmetryStepConfig& scfg, int epochs,
                                std::size_t primary_batch, std::uint64_t seed,
                                TimingMode timing) {
    validate(tcfg);
    TrainResult result;

    // Same skeleton as the projected-gradient loop: identical stream forks,
    // identical primary pass, only the scheduled phase differs.
    SeededRng base(seed);
    std::uint64_t global_step = 0;
    auto cpu_start = std::clock();
    auto real_start = std::chrono::steady_clock::now();
    auto elapsed = [&]() {
        switch (timing) {
            case TimingMode::off: return 0.0;
            case TimingMode::cpu:
                return static_cast<double>(std::clock() - cpu_start) / CLOCKS_PER_SEC;
            case TimingMode::real:
                return std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                                     real_start)
                    .count();
        }
        return 0.0;
    };

    for (int epoch = 0; epoch < epochs; ++epoch) {
        bool teleported = false;
        if (tcfg.schedule.count(epoch) != 0 && tcfg.batches > 0 && tcfg.steps > 0 &&
            global_step >= static_cast<std::uint64_t>(tcfg.warmup_steps)) {
            SeededRng trng = base.fork(2 * static_cast<std::uint64_t>(epoch) + 1);
            const std::size_t count = train.count();
            if (count < tcfg.batch_size)
                throw std::invalid_argument("teleport batch_size exceeds the dataset size");
            std::vector<std::size_t> order = trng.shuffle(count);
            std::size_t cursor = 0;
            for (int b = 0; b < tcfg.batches; ++b) {
                if (cursor + tcfg.batch_size > count) {
                    order = trng.shuffle(count);
                    cursor = 0;
                }
                std::vector<std::size_t> idx(
                    order.begin() + static_cast<std::ptrdiff_t>(cursor),
                    order.begin() + static_cast<std::ptrdiff_t>(cursor + tcfg.batch_size));
                cursor += tcfg.batch_size;
                Batch batch = train.gather(idx);
                for (int s = 0; s < tcfg.steps; ++s)
                    symmetry_teleport_step(model, batch, kind, scfg);
            }
            teleported = true;
        }
        SeededRng epoch_rng = base.fork(2 * static_cast<std::uint64_t>(epoch));
        BatchIterator it(train.count(), primary_batch, epoch_rng);
        double loss_sum = 0.0;
        std::size_t samples = 0;
        while (auto idx = it.next()) {
            Batch batch = train.gather(*idx);
            auto [loss, grads] = primary_gradient(model, batch, kind);
            optimizer_step(model, opt, grads);
            ++global_step;
            loss_sum += loss * static_cast<double>(idx->size());
            samples += idx->size();
        }
        EpochMetric row;
        row.seed = seed;
        row.epoch = epoch;
        row.global_step = global_step;
        row.seconds = elapsed();
        row.train_loss = loss_sum / static_cast<double>(samples);
        row.teleported = teleported;
        Batch whole = test.all();
        row.test_loss = loss_value(model, whole, kind);
        if (kind == LossKind::cross_entropy && !whole.labels.empty()) {
            row.test_accuracy = accuracy(model, whole);
            row.has_accuracy = true;
        }
        result.metrics.push_back(row);
    }
    return result;
}

void cmd_train(const ExperimentConfig& cfg, const RunOptions& opts) {
    if (!cfg.model || !cfg.dataset) fail("train needs 'model' and 'dataset' sections");
    const auto seeds = resolve_seeds(cfg, opts);
    const TeleportConfig tcfg = effective_teleport(cfg, opts);
    DatasetBundle data = make_dataset(cfg);
    ensure_out_dir(opts);
    write_manifest(cfg, opts, "train", seeds);

    for (std::uint64_t seed : seeds) {
        ModelGraph model = build_model(cfg, seed);
        OptimizerState opt = make_optimizer(cfg.optimizer);
        TrainResult res =
            train_with_teleport(model, data.train(), data.test(), opt, cfg.loss, tcfg,
                                cfg.epochs, cfg.batch_size, seed, cfg.timing);
        const auto dir = std::filesystem::path(opts.out_dir);
        write_text_file((dir / ("metrics_seed" + std::to_string(seed) + ".csv")).string(),
                        metrics_csv(res.metrics));
        save_params(model, (dir / ("model_seed" + std::to_string(seed) + ".params")).string());
    }
}

void cmd_bench_scaling(const ExperimentConfig& cfg, const RunOptions& opts) {
    const ProbeGridConfig& pc = cfg.probe;
    ensure_out_dir(opts);
    write_manifest(cfg, opts, "bench-scaling", {pc.seed});

    std::ostringstream os;
    os << "method,axis,value,t,d,n,l,b,seconds_median,basis_svd_calls,inverse_op_calls\n";
    auto emit = [&](ProbeMethod method, const char* axis, double value, ProbeDims dims) {
        ProbeResult r = runtime_probe(method, dims, pc.seed, pc.repeats);
        os << to_string(method) << ',' << axis << ',' << fmt17(value) << ',' << dims.t
           << ',' << dims.d << ',' << dims.n << ',' << dims.l << ',' << dims.b << ','
           << fmt17(r.seconds_median) << ',' << r.basis_svd_calls << ','
           << r.inverse_op_calls << '\n';
    };
    for (ProbeMethod method : pc.methods) {
        for (int t : pc.t) {
            ProbeDims dims = pc.base;
            dims.t = t;
            emit(method, "t", t, dims);
        }
        for (std::size_t d : pc.d) {
            ProbeDims dims = pc.base;
            dims.d = d;
            emit(method, "d", static_cast<double>(d), dims);
        }
        for (std::size_t n : pc.n) {
            ProbeDims dims = pc.base;
            dims.n = n;
            emit(method, "n", static_cast<double>(n), dims);
        }
        for (int l : pc.l) {
            ProbeDims dims = pc.base;
            dims.l = l;
            emit(method, "l", l, dims);
        }
        for (int b : pc.b) {
            ProbeDims dims = pc.base;
            dims.b = b;
            emit(method, "b", b, dims);
        }
    }
    write_text_file((std::filesystem::path(opts.out_dir) / "scaling.csv").string(),
                    os.str());
}

void cmd_error_control(const ExperimentConfig& cfg, const RunOptions& opts) {
    if (!cfg.model || !cfg.dataset)
        fail("error-control needs 'model' and 'dataset' sections");
    const auto seeds = resolve_seeds(cfg, opts);
    const std::uint64_t seed = seeds.front();
    const TeleportConfig base_t = effective_teleport(cfg, opts);
    if (base_t.batches <= 0 || base_t.steps <= 0)
        fail("error-control needs teleport.batches and teleport.steps above zero");

    DatasetBundle data = make_dataset(cfg);
    ModelGraph model = build_model(cfg, seed);
    const auto snapshot = model.snapshot();
    const DataView train = data.train();

    ensure_out_dir(opts);
    write_manifest(cfg, opts, "error-control", {seed});

    // The cumulative spectrum of the first teleport batch, shared by every
    // tau because the batch stream below is replayed per tau.
    std::ostringstream energy;
    energy << "group,index,cumulative_energy\n";
    {
        SeededRng rng = SeededRng(seed).fork(kErrorControlStream);
        std::vector<std::size_t> order = rng.shuffle(train.count());
        if (train.count() < base_t.batch_size)
            fail("teleport.batch_size exceeds the dataset size");
        order.resize(base_t.batch_size);
        Batch batch = train.gather(order);
        ForwardTrace trace = forward(model, batch.x);
        BasisMap bases = build_all_bases(model, trace, 1.0, base_t.threads);
        std::vector<std::string> seen;
        for (const auto& [id, basis] : bases) {
            bool dup = false;
            for (const auto& g : seen) dup = dup || g == basis->group;
            if (dup) continue;
            seen.push_back(basis->group);
            double total = 0.0;
            for (double s : basis->singular_values) total += s * s;
            if (total == 0.0) continue;
            double acc = 0.0;
            for (std::size_t i = 0; i < basis->singular_values.size(); ++i) {
                acc += basis->singular_values[i] * basis->singular_values[i];
                energy << basis->group << ',' << (i + 1) << ',' << fmt17(acc / total)
                       << '\n';
            }
        }
    }

    std::ostringstream steps;
    steps << "tau,batch_index,step_index,grad_norm_sq,loss_before,loss_after,cap_hit\n";
    std::ostringstream ranks;
    ranks << "tau,batch_index,group,rank\n";
    for (double tau : cfg.taus) {
        model.restore(snapshot);
        TeleportConfig tcfg = base_t;
        tcfg.tau = tau;
        SeededRng rng = SeededRng(seed).fork(kErrorControlStream);
        TeleportReport report = run_teleport_for_epoch(model, train, tcfg, cfg.loss, rng);
        for (const auto& row : report.rows) {
            steps << fmt17(tau) << ',' << row.batch_index << ',' << row.step_index << ','
                  << fmt17(row.grad_norm_sq) << ',' << fmt17(row.loss_before) << ',';
            if (row.has_loss_after) steps << fmt17(row.loss_after);
            steps << ',' << (row.cap_hit ? 1 : 0) << '\n';
            if (row.step_index == 0) {
                for (const auto& r : row.ranks)
                    ranks << fmt17(tau) << ',' << row.batch_index << ',' << r.group << ','
                          << r.rank << '\n';
            }
        }
    }
    const auto dir = std::filesystem::path(opts.out_dir);
    write_text_file((dir / "error_control_steps.csv").string(), steps.str());
    write_text_file((dir / "error_control_ranks.csv").string(), ranks.str());
    write_text_file((dir / "singular_energy.csv").string(), energy.str());
}

void cmd_compare_baseline(const ExperimentConfig& cfg, const RunOptions& opts) {
    if (!cfg.model || !cfg.dataset)
        fail("compare-baseline needs 'model' and 'dataset' sections");
    if (cfg.model->kind != "mlp") fail("compare-baseline runs on mlp models only");
    const Activation act = cfg.model->mlp.hidden_act;
    if (act != Activation::leaky_relu && act != Activation::identity)
        fail("the symmetry baseline needs an invertible hidden activation "
             "(leaky_relu or identity)");

    const auto seeds = resolve_seeds(cfg, opts);
    const TeleportConfig tcfg = effective_teleport(cfg, opts);
    SymmetryStepConfig scfg;
    scfg.lr = cfg.symmetry_lr;
    scfg.fd_step_scale = tcfg.fd_step_scale;
    scfg.record_stats_after = false;

    DatasetBundle data = make_dataset(cfg);
    ensure_out_dir(opts);
    write_manifest(cfg, opts, "compare-baseline", seeds);
    const auto dir = std::filesystem::path(opts.out_dir);

    for (std::uint64_t seed : seeds) {
        for (const char* variant : {"baseline", "symmetry", "nullspace"}) {
            ModelGraph model = build_model(cfg, seed);
            OptimizerState opt = make_optimizer(cfg.optimizer);
            TrainResult res;
            if (std::string(variant) == "baseline") {
                res = train_plain(model, data.train(), data.test(), opt, cfg.loss,
                                  cfg.epochs, cfg.batch_size, seed, cfg.timing);
            } else if (std::string(variant) == "symmetry") {
                res = train_with_symmetry(model, data.train(), data.test(), opt, cfg.loss,
                                          tcfg, scfg, cfg.epochs, cfg.batch_size, seed,
                                          cfg.timing);
            } else {
                res = train_with_teleport(model, data.train(), data.test(), opt, cfg.loss,
                                          tcfg, cfg.epochs, cfg.batch_size, seed,
                                          cfg.timing);
            }
            write_text_file((dir / ("metrics_" + std::string(variant) + "_seed" +
                                    std::to_string(seed) + ".csv"))
                                .string(),
                            metrics_csv(res.metrics));
        }
    }
}

}  // namespace nullport
