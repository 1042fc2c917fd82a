#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "nullport/symmetry.hpp"
#include "nullport/teleport.hpp"

namespace nullport {

// Bad experiment descriptions are reported apart from runtime failures so
// the CLI can map them to distinct exit codes (2 vs 1).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ModelConfig {
    std::string kind;  // mlp | cnn | transformer
    MlpSpec mlp;
    CnnSpec cnn;
    TransformerSpec transformer;
};

struct DatasetConfig {
    std::string kind;  // idx | synthetic_images | synthetic_sequences
    std::uint64_t data_seed = 2024;

    // idx: file paths, relative ones resolved against $NULLPORT_DATA_DIR
    std::string train_images, train_labels, test_images, test_labels;
    std::size_t subset = 0;  // 0 keeps the full training set
    std::size_t downsample = 1;

    // synthetic_images
    std::size_t count = 0;
    std::size_t test_count = 0;
    int classes = 0;
    std::size_t height = 0, width = 0;
    double noise = 0.1;

    // synthetic_sequences
    std::size_t dims = 0, length = 0, window = 0, horizon = 0;
};

struct ProbeGridConfig {
    ProbeDims base;
    std::vector<int> t{1, 2, 4, 8};
    std::vector<std::size_t> d{64, 128, 256, 512};
    std::vector<std::size_t> n{8, 16, 32, 64};
    std::vector<int> l{2, 3, 4, 6};
    std::vector<int> b{1, 4, 16, 32};
    std::vector<ProbeMethod> methods{ProbeMethod::nullspace, ProbeMethod::symmetry};
    int repeats = 3;
    std::uint64_t seed = 99;
};

struct ExperimentConfig {
    std::optional<ModelConfig> model;
    std::optional<DatasetConfig> dataset;
    LossKind loss = LossKind::cross_entropy;
    OptimizerConfig optimizer;
    TeleportConfig teleport;
    double symmetry_lr = 1e-3;
    int epochs = 10;
    std::size_t batch_size = 32;
    std::vector<std::uint64_t> seeds{1, 2, 3};
    TimingMode timing = TimingMode::cpu;
    std::vector<double> taus{1.0, 0.999, 0.99, 0.9};
    ProbeGridConfig probe;
};

ExperimentConfig parse_experiment_config(const nlohmann::json& doc);
ExperimentConfig load_experiment_config(const std::string& path);

// Echo of the fully resolved configuration, defaults included, so a run can
// be reproduced from its manifest alone.
nlohmann::json manifest_json(const ExperimentConfig& cfg);

// Owns the tensors the train/test views borrow from.
struct DatasetBundle {
    Tensor train_x, train_y;
    std::vector<int> train_labels;
    Tensor test_x, test_y;
    std::vector<int> test_labels;

    DataView train() const;
    DataView test() const;
};

// Loads or synthesizes the dataset and converts it to the layout the model
// kind consumes (flat rows, image stacks, or token sequences).
DatasetBundle make_dataset(const ExperimentConfig& cfg);

// Parameter initialization stream for a run seed; every command uses this so
// the same seed always builds the same starting point.
SeededRng init_rng(std::uint64_t seed);

ModelGraph build_model(const ExperimentConfig& cfg, std::uint64_t seed);

std::string metrics_csv(const std::vector<EpochMetric>& rows);
void write_text_file(const std::string& path, const std::string& content);

// Mirror of train_with_teleport that runs the symmetry baseline in the
// scheduled epochs: same batch draws, group-action steps instead of
// projected-gradient steps.
TrainResult train_with_symmetry(ModelGraph& model, const DataView& train,
                                const DataView& test, OptimizerState& opt,
                                LossKind kind, const TeleportConfig& tcfg,
                                const SymmetryStepConfig& scfg, int epochs,
                                std::size_t primary_batch, std::uint64_t seed,
                                TimingMode timing);

struct RunOptions {
    std::string out_dir = ".";
    std::optional<std::uint64_t> seed;  // replaces the config seed list
    std::optional<int> threads;
};

// The four experiment commands. ConfigError means the description was
// rejected before any compute; other exceptions are runtime failures.
void cmd_train(const ExperimentConfig& cfg, const RunOptions& opts);
void cmd_bench_scaling(const ExperimentConfig& cfg, const RunOptions& opts);
void cmd_error_control(const ExperimentConfig& cfg, const RunOptions& opts);
void cmd_compare_baseline(const ExperimentConfig& cfg, const RunOptions& opts);

}  // namespace nullport
