#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <set>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "nullport/harness.hpp"

using namespace nullport;
using nlohmann::json;

namespace {

ExperimentConfig parse_str(const std::string& text) {
    return parse_experiment_config(json::parse(text));
}

std::filesystem::path fresh_dir(const std::string& tag) {
    auto dir = std::filesystem::temp_directory_path() / ("nullport_test_" + tag);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

std::size_t line_count(const std::string& text) {
    std::size_t n = 0;
    for (char c : text)
        if (c == '\n') ++n;
    return n;
}

// Small image-classification run description shared by the command tests.
json small_train_doc() {
    return json::parse(R"({
        "model": {"kind": "mlp", "input_dim": 12, "hidden": [8], "output_dim": 3,
                  "activation": "leaky_relu", "alpha": 0.1},
        "dataset": {"kind": "synthetic_images", "count": 24, "test_count": 6,
                    "classes": 3, "height": 4, "width": 3, "noise": 0.05,
                    "data_seed": 11},
        "optimizer": {"kind": "sgd", "lr": 0.05},
        "teleport": {"eta": 0.001, "batches": 1, "steps": 2, "schedule": [0],
                     "cap": 1e18, "tau": 1.0, "batch_size": 8},
        "epochs": 2,
        "batch_size": 8,
        "seeds": [5],
        "timing": "off"
    })");
}

}  // namespace

TEST_CASE("empty config parses to the documented defaults") {
    ExperimentConfig cfg = parse_str("{}");
    CHECK(!cfg.model.has_value());
    CHECK(!cfg.dataset.has_value());
    CHECK(cfg.loss == LossKind::cross_entropy);
    CHECK(cfg.optimizer.kind == OptimizerKind::sgd);
    CHECK(cfg.optimizer.lr == 1e-3);
    CHECK(cfg.teleport.eta == 2e-1);
    CHECK(cfg.teleport.batches == 32);
    CHECK(cfg.teleport.steps == 8);
    CHECK(cfg.teleport.cap == 5.0);
    CHECK(cfg.teleport.tau == 1.0);
    CHECK(cfg.teleport.batch_size == 32);
    CHECK(cfg.teleport.descent == false);
    CHECK(cfg.epochs == 10);
    CHECK(cfg.batch_size == 32);
    CHECK(cfg.seeds == std::vector<std::uint64_t>{1, 2, 3});
    CHECK(cfg.timing == TimingMode::cpu);
    CHECK(cfg.taus == std::vector<double>{1.0, 0.999, 0.99, 0.9});
    CHECK(cfg.symmetry_lr == 1e-3);
}

TEST_CASE("unknown keys are rejected at every level") {
    CHECK_THROWS_WITH_AS(parse_str(R"({"modle": {}})"),
                         "unknown key 'modle' in config", ConfigError);
    CHECK_THROWS_WITH_AS(
        parse_str(R"({"model": {"kind": "mlp", "input_dim": 4, "hidden": [2],
                                "output_dim": 2, "widht": 3}})"),
        "unknown key 'widht' in model", ConfigError);
    CHECK_THROWS_WITH_AS(parse_str(R"({"teleport": {"etaa": 0.1}})"),
                         "unknown key 'etaa' in teleport", ConfigError);
    CHECK_THROWS_WITH_AS(parse_str(R"({"optimizer": {"momentum": 0.9}})"),
                         "unknown key 'momentum' in optimizer", ConfigError);
    CHECK_THROWS_WITH_AS(
        parse_str(R"({"dataset": {"kind": "synthetic_images", "count": 4,
                                  "classes": 2, "height": 2, "width": 2,
                                  "channels": 1}})"),
        "unknown key 'channels' in dataset", ConfigError);
    CHECK_THROWS_WITH_AS(parse_str(R"({"probe": {"grid": []}})"),
                         "unknown key 'grid' in probe", ConfigError);
    CHECK_THROWS_WITH_AS(parse_str(R"({"probe": {"base": {"m": 1}}})"),
                         "unknown key 'm' in probe.base", ConfigError);
}

TEST_CASE("missing required keys are reported with their section") {
    CHECK_THROWS_WITH_AS(
        parse_str(R"({"model": {"kind": "mlp", "hidden": [2], "output_dim": 2}})"),
        "mlp model needs 'input_dim'", ConfigError);
    CHECK_THROWS_WITH_AS(parse_str(R"({"model": {"kind": "rnn"}})"),
                         "model.kind must be 'mlp', 'cnn' or 'transformer'",
                         ConfigError);
    CHECK_THROWS_WITH_AS(
        parse_str(R"({"dataset": {"kind": "synthetic_images", "classes": 2,
                                  "height": 2, "width": 2}})"),
        "synthetic_images dataset needs 'count'", ConfigError);
    CHECK_THROWS_AS(parse_str(R"({"dataset": {"kind": "csv"}})"), ConfigError);
}

TEST_CASE("loss is tied to the dataset family") {
    CHECK_THROWS_WITH_AS(
        parse_str(R"({"dataset": {"kind": "synthetic_images", "count": 4,
                                  "classes": 2, "height": 2, "width": 2},
                      "loss": "mse"})"),
        "labeled image datasets train with cross_entropy", ConfigError);
    CHECK_THROWS_WITH_AS(
        parse_str(R"({"dataset": {"kind": "synthetic_sequences", "dims": 2,
                                  "length": 20, "window": 4},
                      "loss": "cross_entropy"})"),
        "sequence regression datasets train with mse", ConfigError);

    ExperimentConfig seq = parse_str(
        R"({"dataset": {"kind": "synthetic_sequences", "dims": 2, "length": 20,
                        "window": 4}})");
    CHECK(seq.loss == LossKind::mse);
    CHECK(seq.dataset->horizon == 1);
    CHECK(seq.dataset->test_count == 2);

    ExperimentConfig img = parse_str(
        R"({"dataset": {"kind": "synthetic_images", "count": 10, "classes": 2,
                        "height": 2, "width": 2}})");
    CHECK(img.loss == LossKind::cross_entropy);
    CHECK(img.dataset->test_count == 2);
}

TEST_CASE("optimizer eps defaults are resolved per kind at parse time") {
    CHECK(parse_str(R"({"optimizer": {"kind": "adagrad"}})").optimizer.eps == 1e-10);
    CHECK(parse_str(R"({"optimizer": {"kind": "adam"}})").optimizer.eps == 1e-8);
    CHECK(parse_str(R"({"optimizer": {"kind": "sgd"}})").optimizer.eps == 0.0);
    CHECK(parse_str(R"({"optimizer": {"kind": "adam", "eps": 0.5}})").optimizer.eps ==
          0.5);
    CHECK_THROWS_WITH_AS(parse_str(R"({"optimizer": {"lr": 0}})"),
                         "optimizer.lr must be positive", ConfigError);
    CHECK_THROWS_AS(parse_str(R"({"optimizer": {"kind": "lbfgs"}})"), ConfigError);
}

TEST_CASE("teleport section round-trips its knobs and validates them") {
    ExperimentConfig cfg = parse_str(
        R"({"teleport": {"eta": 0.5, "batches": 3, "steps": 4, "schedule": [0, 2],
                         "cap": 0.0, "tau": 0.75, "warmup_steps": 5,
                         "batch_size": 16, "fd_step_scale": 1e-5,
                         "sign": "descent", "threads": 2,
                         "record_loss_after": false, "symmetry_lr": 0.01}})");
    CHECK(cfg.teleport.eta == 0.5);
    CHECK(cfg.teleport.batches == 3);
    CHECK(cfg.teleport.steps == 4);
    CHECK(cfg.teleport.schedule == std::set<int>{0, 2});
    CHECK(cfg.teleport.cap == 0.0);
    CHECK(cfg.teleport.tau == 0.75);
    CHECK(cfg.teleport.warmup_steps == 5);
    CHECK(cfg.teleport.batch_size == 16);
    CHECK(cfg.teleport.fd_step_scale == 1e-5);
    CHECK(cfg.teleport.descent == true);
    CHECK(cfg.teleport.threads == 2);
    CHECK(cfg.teleport.record_loss_after == false);
    CHECK(cfg.symmetry_lr == 0.01);

    CHECK_THROWS_WITH_AS(parse_str(R"({"teleport": {"sign": "up"}})"),
                         "teleport.sign must be 'ascent' or 'descent'", ConfigError);
    CHECK_THROWS_WITH_AS(parse_str(R"({"teleport": {"cap": -1}})"),
                         "teleport: teleport cap must be finite and non-negative",
                         ConfigError);
    CHECK_THROWS_AS(parse_str(R"({"teleport": {"symmetry_lr": 0}})"), ConfigError);
}

TEST_CASE("top-level scalar fields are validated") {
    CHECK_THROWS_AS(parse_str(R"({"epochs": -1})"), ConfigError);
    CHECK_THROWS_AS(parse_str(R"({"batch_size": 0})"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_str(R"({"seeds": []})"), "seeds must not be empty",
                         ConfigError);
    CHECK_THROWS_WITH_AS(parse_str(R"({"taus": [1.5]})"),
                         "taus entries must lie in [0, 1]", ConfigError);
    CHECK_THROWS_WITH_AS(parse_str(R"({"timing": "fast"})"),
                         "timing must be 'off', 'cpu' or 'real'", ConfigError);
    CHECK(parse_str(R"({"timing": "off"})").timing == TimingMode::off);
    CHECK(parse_str(R"({"timing": "real"})").timing == TimingMode::real);
}

TEST_CASE("manifest echoes every resolved setting and reparses to itself") {
    json doc = small_train_doc();
    ExperimentConfig cfg = parse_experiment_config(doc);
    json manifest = manifest_json(cfg);

    for (const char* key : {"model", "dataset", "loss", "optimizer", "teleport",
                            "epochs", "batch_size", "seeds", "timing", "taus", "probe"})
        CHECK(manifest.contains(key));
    CHECK(manifest["optimizer"]["beta"] == 0.9);
    CHECK(manifest["teleport"]["sign"] == "ascent");
    CHECK(manifest["teleport"]["symmetry_lr"] == 1e-3);
    CHECK(manifest["dataset"]["test_count"] == 6);
    CHECK(manifest["probe"]["repeats"] == 3);

    ExperimentConfig again = parse_experiment_config(manifest);
    CHECK(manifest_json(again).dump(2) == manifest.dump(2));
}

TEST_CASE("config files load with parse and IO failures kept apart") {
    auto dir = fresh_dir("cfg");
    CHECK_THROWS_AS(load_experiment_config((dir / "missing.json").string()),
                    ConfigError);
    write_text_file((dir / "broken.json").string(), "{not json");
    CHECK_THROWS_AS(load_experiment_config((dir / "broken.json").string()),
                    ConfigError);
    write_text_file((dir / "ok.json").string(), small_train_doc().dump());
    ExperimentConfig cfg = load_experiment_config((dir / "ok.json").string());
    CHECK(cfg.model->kind == "mlp");
    std::filesystem::remove_all(dir);
}

TEST_CASE("metrics csv renders exact rows with full precision") {
    EpochMetric a;
    a.seed = 7;
    a.epoch = 0;
    a.global_step = 3;
    a.seconds = 0.0;
    a.train_loss = 0.5;
    a.test_loss = 0.25;
    a.test_accuracy = 0.75;
    a.has_accuracy = true;
    a.teleported = true;
    EpochMetric b;
    b.seed = 7;
    b.epoch = 1;
    b.global_step = 6;
    b.seconds = 1.5;
    b.train_loss = 0.1;
    b.test_loss = 2.0;
    b.has_accuracy = false;
    b.teleported = false;

    const std::string expected =
        "seed,epoch,global_step,wall_seconds,train_loss,test_loss,test_accuracy,"
        "teleport\n"
        "7,0,3,0,0.5,0.25,0.75,1\n"
        "7,1,6,1.5,0.10000000000000001,2,,0\n";
    CHECK(metrics_csv({a, b}) == expected);
    CHECK(metrics_csv({}) ==
          "seed,epoch,global_step,wall_seconds,train_loss,test_loss,test_accuracy,"
          "teleport\n");
}

TEST_CASE("synthetic image datasets are shaped for the model kind") {
    ExperimentConfig cfg = parse_experiment_config(small_train_doc());
    DatasetBundle data = make_dataset(cfg);
    CHECK(data.train_x.shape() == std::vector<std::size_t>{24, 12});
    CHECK(data.test_x.shape() == std::vector<std::size_t>{6, 12});
    CHECK(data.train_labels.size() == 24);
    CHECK(data.test_labels.size() == 6);
    CHECK(data.train_y.empty());
    CHECK(data.train().count() == 24);
    CHECK(data.test().count() == 6);

    DatasetBundle repeat = make_dataset(cfg);
    CHECK(repeat.train_x == data.train_x);
    CHECK(repeat.test_x == data.test_x);
    CHECK(repeat.train_labels == data.train_labels);

    json doc = small_train_doc();
    doc["model"]["input_dim"] = 13;
    CHECK_THROWS_WITH_AS(make_dataset(parse_experiment_config(doc)),
                         "model.input_dim does not match the flattened image size",
                         ConfigError);
    doc = small_train_doc();
    doc["model"]["output_dim"] = 2;
    CHECK_THROWS_WITH_AS(make_dataset(parse_experiment_config(doc)),
                         "model.output_dim is smaller than the number of classes",
                         ConfigError);
}

TEST_CASE("sequence datasets split into train and test windows") {
    ExperimentConfig cfg = parse_str(
        R"({"model": {"kind": "transformer", "seq_len": 4, "input_dim": 2,
                      "d_model": 4, "heads": 2, "output_dim": 2},
            "dataset": {"kind": "synthetic_sequences", "dims": 2, "length": 20,
                        "window": 4, "horizon": 1, "test_count": 3}})");
    DatasetBundle data = make_dataset(cfg);
    CHECK(data.train_x.shape() == std::vector<std::size_t>{13, 4, 2});
    CHECK(data.train_y.shape() == std::vector<std::size_t>{13, 2});
    CHECK(data.test_x.shape() == std::vector<std::size_t>{3, 4, 2});
    CHECK(data.test_y.shape() == std::vector<std::size_t>{3, 2});
    CHECK(data.train_labels.empty());

    json doc = json::parse(
        R"({"model": {"kind": "transformer", "seq_len": 5, "input_dim": 2,
                      "d_model": 4, "heads": 2, "output_dim": 2},
            "dataset": {"kind": "synthetic_sequences", "dims": 2, "length": 20,
                        "window": 4, "horizon": 1, "test_count": 3}})");
    CHECK_THROWS_WITH_AS(make_dataset(parse_experiment_config(doc)),
                         "model.seq_len must equal dataset.window", ConfigError);
}

TEST_CASE("relative idx paths resolve against NULLPORT_DATA_DIR") {
    auto dir = fresh_dir("idxenv");
    SeededRng rng(31);
    ImageDataset ds = synth_images(rng, 12, 3, 4, 3, 0.05);
    save_idx(ds, (dir / "tr-images.idx").string(), (dir / "tr-labels.idx").string());
    save_idx(ds, (dir / "te-images.idx").string(), (dir / "te-labels.idx").string());

    setenv("NULLPORT_DATA_DIR", dir.string().c_str(), 1);
    ExperimentConfig cfg = parse_str(
        R"({"model": {"kind": "mlp", "input_dim": 12, "hidden": [6], "output_dim": 3},
            "dataset": {"kind": "idx",
                        "train_images": "tr-images.idx",
                        "train_labels": "tr-labels.idx",
                        "test_images": "te-images.idx",
                        "test_labels": "te-labels.idx"}})");
    DatasetBundle data = make_dataset(cfg);
    unsetenv("NULLPORT_DATA_DIR");

    CHECK(data.train_x.shape() == std::vector<std::size_t>{12, 12});
    CHECK(data.train_labels == ds.labels);
    Tensor flat = flatten_images(ds);
    CHECK(data.train_x == flat);

    // Without the environment variable the same relative path fails to open.
    CHECK_THROWS(make_dataset(cfg));
    std::filesystem::remove_all(dir);
}

TEST_CASE("model construction is a pure function of config and seed") {
    ExperimentConfig cfg = parse_experiment_config(small_train_doc());
    ModelGraph a = build_model(cfg, 5);
    ModelGraph b = build_model(cfg, 5);
    ModelGraph c = build_model(cfg, 6);
    CHECK(a.params() == b.params());
    CHECK(a.params() != c.params());
    ExperimentConfig bare;
    CHECK_THROWS_AS(build_model(bare, 5), ConfigError);
}

TEST_CASE("train command writes manifest, metrics and parameters") {
    ExperimentConfig cfg = parse_experiment_config(small_train_doc());
    auto dir1 = fresh_dir("train1");
    auto dir2 = fresh_dir("train2");
    RunOptions o1;
    o1.out_dir = dir1.string();
    cmd_train(cfg, o1);
    RunOptions o2;
    o2.out_dir = dir2.string();
    cmd_train(cfg, o2);

    CHECK(std::filesystem::exists(dir1 / "manifest.json"));
    CHECK(std::filesystem::exists(dir1 / "metrics_seed5.csv"));
    CHECK(std::filesystem::exists(dir1 / "model_seed5.params"));

    const std::string csv = read_file(dir1 / "metrics_seed5.csv");
    CHECK(line_count(csv) == 3);
    CHECK(csv.rfind("seed,epoch,global_step,wall_seconds,", 0) == 0);
    std::istringstream rows(csv);
    std::string header, row0, row1;
    std::getline(rows, header);
    std::getline(rows, row0);
    std::getline(rows, row1);
    CHECK(row0.rfind("5,0,3,0,", 0) == 0);
    CHECK(row0.back() == '1');
    CHECK(row1.rfind("5,1,6,0,", 0) == 0);
    CHECK(row1.back() == '0');

    CHECK(read_file(dir2 / "metrics_seed5.csv") == csv);
    CHECK(read_file(dir2 / "model_seed5.params") ==
          read_file(dir1 / "model_seed5.params"));

    json manifest = json::parse(read_file(dir1 / "manifest.json"));
    CHECK(manifest["command"] == "train");
    CHECK(manifest["seeds_used"] == json::array({5}));
    CHECK(manifest["config"]["timing"] == "off");

    std::filesystem::remove_all(dir1);
    std::filesystem::remove_all(dir2);
}

TEST_CASE("run options can pin a single seed") {
    ExperimentConfig cfg = parse_experiment_config(small_train_doc());
    cfg.seeds = {1, 2};
    auto dir = fresh_dir("seedpin");
    RunOptions opts;
    opts.out_dir = dir.string();
    opts.seed = 42;
    cmd_train(cfg, opts);
    CHECK(std::filesystem::exists(dir / "metrics_seed42.csv"));
    CHECK(!std::filesystem::exists(dir / "metrics_seed1.csv"));
    json manifest = json::parse(read_file(dir / "manifest.json"));
    CHECK(manifest["seeds_used"] == json::array({42}));
    std::filesystem::remove_all(dir);
}

TEST_CASE("train command refuses configs without model or dataset") {
    ExperimentConfig cfg = parse_str("{}");
    RunOptions opts;
    CHECK_THROWS_WITH_AS(cmd_train(cfg, opts),
                         "train needs 'model' and 'dataset' sections", ConfigError);
}

TEST_CASE("error-control command writes the three sweep files") {
    json doc = small_train_doc();
    doc["taus"] = {1.0, 0.9};
    ExperimentConfig cfg = parse_experiment_config(doc);
    auto dir = fresh_dir("errctl");
    RunOptions opts;
    opts.out_dir = dir.string();
    cmd_error_control(cfg, opts);

    const std::string steps = read_file(dir / "error_control_steps.csv");
    const std::string ranks = read_file(dir / "error_control_ranks.csv");
    const std::string energy = read_file(dir / "singular_energy.csv");

    CHECK(steps.rfind("tau,batch_index,step_index,grad_norm_sq,loss_before,"
                      "loss_after,cap_hit\n",
                      0) == 0);
    CHECK(line_count(steps) == 1 + 2 * 1 * 2);
    CHECK(ranks.rfind("tau,batch_index,group,rank\n", 0) == 0);
    CHECK(line_count(ranks) == 1 + 2 * 1 * 2);
    CHECK(ranks.find("L0.dense") != std::string::npos);
    CHECK(ranks.find("L1.dense") != std::string::npos);

    CHECK(energy.rfind("group,index,cumulative_energy\n", 0) == 0);
    std::istringstream erows(energy);
    std::string line;
    std::getline(erows, line);
    std::string prev_group;
    double prev = 0.0, last = 0.0;
    std::size_t energy_rows = 0;
    while (std::getline(erows, line)) {
        ++energy_rows;
        const auto c1 = line.find(','), c2 = line.find(',', c1 + 1);
        const std::string group = line.substr(0, c1);
        const double cum = std::stod(line.substr(c2 + 1));
        if (group != prev_group) {
            prev_group = group;
            prev = 0.0;
        }
        CHECK(cum >= prev - 1e-12);
        prev = cum;
        last = cum;
    }
    CHECK(energy_rows > 0);
    CHECK(last == doctest::Approx(1.0).epsilon(1e-9));
    std::filesystem::remove_all(dir);
}

TEST_CASE("compare-baseline writes one metrics file per variant") {
    ExperimentConfig cfg = parse_experiment_config(small_train_doc());
    auto dir = fresh_dir("cmp");
    RunOptions opts;
    opts.out_dir = dir.string();
    cmd_compare_baseline(cfg, opts);

    for (const char* variant : {"baseline", "symmetry", "nullspace"}) {
        const auto path = dir / ("metrics_" + std::string(variant) + "_seed5.csv");
        CHECK(std::filesystem::exists(path));
        const std::string csv = read_file(path);
        CHECK(line_count(csv) == 3);
    }
    const std::string base = read_file(dir / "metrics_baseline_seed5.csv");
    CHECK(base.find(",1\n") == std::string::npos);
    std::filesystem::remove_all(dir);

    json doc = small_train_doc();
    doc["model"]["activation"] = "relu";
    RunOptions tmp;
    CHECK_THROWS_AS(cmd_compare_baseline(parse_experiment_config(doc), tmp),
                    ConfigError);
    ExperimentConfig seq = parse_str(
        R"({"model": {"kind": "transformer", "seq_len": 4, "input_dim": 2,
                      "d_model": 4, "heads": 2, "output_dim": 2},
            "dataset": {"kind": "synthetic_sequences", "dims": 2, "length": 20,
                        "window": 4}})");
    CHECK_THROWS_WITH_AS(cmd_compare_baseline(seq, tmp),
                         "compare-baseline runs on mlp models only", ConfigError);
}

TEST_CASE("bench-scaling sweeps the probe grid into one csv") {
    ExperimentConfig cfg = parse_str(
        R"({"probe": {"base": {"t": 1, "d": 6, "n": 4, "l": 2, "b": 1},
                      "t": [1], "d": [6], "n": [4], "l": [2], "b": [1],
                      "methods": ["nullspace", "symmetry"], "repeats": 1,
                      "seed": 3}})");
    auto dir = fresh_dir("bench");
    RunOptions opts;
    opts.out_dir = dir.string();
    cmd_bench_scaling(cfg, opts);

    const std::string csv = read_file(dir / "scaling.csv");
    CHECK(csv.rfind("method,axis,value,t,d,n,l,b,seconds_median,basis_svd_calls,"
                    "inverse_op_calls\n",
                    0) == 0);
    CHECK(line_count(csv) == 1 + 2 * 5);
    CHECK(csv.find("nullspace,t,") != std::string::npos);
    CHECK(csv.find("symmetry,b,") != std::string::npos);
    std::filesystem::remove_all(dir);
}

TEST_CASE("symmetry training follows the teleport schedule") {
    ExperimentConfig cfg = parse_experiment_config(small_train_doc());
    DatasetBundle data = make_dataset(cfg);
    ModelGraph model = build_model(cfg, 5);
    OptimizerState opt = make_optimizer(cfg.optimizer);
    SymmetryStepConfig scfg;
    scfg.lr = cfg.symmetry_lr;
    scfg.record_stats_after = false;
    TrainResult res =
        train_with_symmetry(model, data.train(), data.test(), opt, cfg.loss,
                            cfg.teleport, scfg, cfg.epochs, cfg.batch_size, 5,
                            TimingMode::off);
    REQUIRE(res.metrics.size() == 2);
    CHECK(res.metrics[0].teleported);
    CHECK(!res.metrics[1].teleported);
    CHECK(res.metrics[0].global_step == 3);
    CHECK(res.metrics[1].global_step == 6);
    CHECK(std::isfinite(res.metrics[1].train_loss));
    CHECK(res.metrics[0].has_accuracy);
}
