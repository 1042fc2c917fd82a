#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "nullport.h"

namespace {

std::filesystem::path fresh_dir(const std::string& tag) {
    auto dir = std::filesystem::temp_directory_path() / ("nullport_capi_" + tag);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

std::filesystem::path write_config(const std::filesystem::path& dir,
                                   const std::string& name,
                                   const std::string& text) {
    const auto path = dir / name;
    std::ofstream out(path);
    out << text;
    REQUIRE(out.good());
    return path;
}

const char* kTrainConfig = R"({
    "model": {"kind": "mlp", "input_dim": 6, "hidden": [5], "output_dim": 2,
              "activation": "leaky_relu"},
    "dataset": {"kind": "synthetic_images", "count": 16, "test_count": 4,
                "classes": 2, "height": 3, "width": 2, "data_seed": 7},
    "optimizer": {"kind": "sgd", "lr": 0.05},
    "teleport": {"eta": 0.001, "batches": 1, "steps": 1, "schedule": [0],
                 "cap": 1e18, "batch_size": 8},
    "epochs": 1,
    "batch_size": 8,
    "seeds": [3],
    "timing": "off"
})";

}  // namespace

TEST_CASE("library reports its version") {
    CHECK(std::strcmp(nullport_version(), "0.1.0") == 0);
}

TEST_CASE("opening a missing config fails with a message") {
    nullport_experiment* exp = nullport_open("/no/such/config.json");
    CHECK(exp == nullptr);
    CHECK(std::string(nullport_last_error()).find("cannot open") !=
          std::string::npos);
    nullport_close(exp);
}

TEST_CASE("a null path is rejected without crashing") {
    CHECK(nullport_open(nullptr) == nullptr);
    CHECK(std::string(nullport_last_error()) == "config_path is null");
}

TEST_CASE("config validation failures surface through last_error") {
    auto dir = fresh_dir("badcfg");
    const auto path = write_config(dir, "bad.json", R"({"telport": {}})");
    nullport_experiment* exp = nullport_open(path.string().c_str());
    CHECK(exp == nullptr);
    CHECK(std::string(nullport_last_error()).find("unknown key 'telport'") !=
          std::string::npos);
    std::filesystem::remove_all(dir);
}

TEST_CASE("manifest echoes the resolved config as malloc'd JSON") {
    auto dir = fresh_dir("manifest");
    const auto path = write_config(dir, "train.json", kTrainConfig);
    nullport_experiment* exp = nullport_open(path.string().c_str());
    REQUIRE(exp != nullptr);
    CHECK(std::string(nullport_last_error()).empty());

    char* manifest = nullport_manifest(exp);
    REQUIRE(manifest != nullptr);
    const std::string text(manifest);
    nullport_string_free(manifest);
    CHECK(text.find("\"teleport\"") != std::string::npos);
    CHECK(text.find("\"eta\"") != std::string::npos);
    CHECK(text.find("\"timing\": \"off\"") != std::string::npos);
    CHECK(text.find("\"kind\": \"mlp\"") != std::string::npos);

    nullport_close(exp);
    std::filesystem::remove_all(dir);

    CHECK(nullport_manifest(nullptr) == nullptr);
    CHECK(std::string(nullport_last_error()) == "null experiment handle");
}

TEST_CASE("train runs end to end through the C surface") {
    auto dir = fresh_dir("run");
    const auto path = write_config(dir, "train.json", kTrainConfig);
    const auto out = dir / "out";

    nullport_experiment* exp = nullport_open(path.string().c_str());
    REQUIRE(exp != nullptr);
    nullport_set_out_dir(exp, out.string().c_str());
    nullport_override_seed(exp, 9);
    nullport_set_threads(exp, 1);

    CHECK(nullport_run_train(exp) == NULLPORT_OK);
    CHECK(std::string(nullport_last_error()).empty());
    CHECK(std::filesystem::exists(out / "manifest.json"));
    CHECK(std::filesystem::exists(out / "metrics_seed9.csv"));
    CHECK(std::filesystem::exists(out / "model_seed9.params"));

    std::ifstream csv(out / "metrics_seed9.csv");
    std::string header;
    std::getline(csv, header);
    CHECK(header ==
          "seed,epoch,global_step,wall_seconds,train_loss,test_loss,test_accuracy,"
          "teleport");

    nullport_close(exp);
    std::filesystem::remove_all(dir);
}

TEST_CASE("config errors at run time map to the config status code") {
    auto dir = fresh_dir("nomodel");
    const auto path = write_config(dir, "empty.json", "{}");
    nullport_experiment* exp = nullport_open(path.string().c_str());
    REQUIRE(exp != nullptr);
    nullport_set_out_dir(exp, (dir / "out").string().c_str());

    CHECK(nullport_run_train(exp) == NULLPORT_ERR_CONFIG);
    CHECK(std::string(nullport_last_error()).find("train needs") !=
          std::string::npos);
    CHECK(nullport_run_compare_baseline(exp) == NULLPORT_ERR_CONFIG);
    CHECK(nullport_run_error_control(exp) == NULLPORT_ERR_CONFIG);

    nullport_close(exp);
    std::filesystem::remove_all(dir);

    CHECK(nullport_run_train(nullptr) == NULLPORT_ERR_RUNTIME);
    CHECK(std::string(nullport_last_error()) == "null experiment handle");
}

TEST_CASE("runtime failures map to the runtime status code") {
    auto dir = fresh_dir("badidx");
    const std::string cfg = R"({
        "model": {"kind": "mlp", "input_dim": 4, "hidden": [3], "output_dim": 2},
        "dataset": {"kind": "idx",
                    "train_images": "/no/such/images.idx",
                    "train_labels": "/no/such/labels.idx",
                    "test_images": "/no/such/images.idx",
                    "test_labels": "/no/such/labels.idx"},
        "seeds": [1], "epochs": 1
    })";
    const auto path = write_config(dir, "idx.json", cfg);
    nullport_experiment* exp = nullport_open(path.string().c_str());
    REQUIRE(exp != nullptr);
    nullport_set_out_dir(exp, (dir / "out").string().c_str());
    CHECK(nullport_run_train(exp) == NULLPORT_ERR_RUNTIME);
    CHECK(std::string(nullport_last_error()).find("cannot open") !=
          std::string::npos);
    nullport_close(exp);
    std::filesystem::remove_all(dir);
}
