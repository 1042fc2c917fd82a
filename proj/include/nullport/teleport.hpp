#pragma once

#include <set>

#include "nullport/data.hpp"
#include "nullport/loss.hpp"
#include "nullport/optimizer.hpp"
#include "nullport/projection.hpp"

namespace nullport {

struct TeleportConfig {
    double eta = 2e-1;           // teleport step size
    int batches = 32;            // batches drawn per teleport phase
    int steps = 8;               // update steps per batch
    std::set<int> schedule;      // epochs that start with a teleport phase
    double cap = 5.0;            // gate: stop once ||grad L||^2 reaches this
    double tau = 1.0;            // basis energy fraction
    int warmup_steps = 0;        // primary steps required before any teleport
    std::size_t batch_size = 32; // teleport batch size n
    double fd_step_scale = 1e-6;
    bool descent = false;        // flip the update sign (norm-shrinking mode)
    int threads = 1;
    bool record_loss_after = true;  // costs one extra forward per step
};

void validate(const TeleportConfig& cfg);

struct LayerRank {
    std::string group;
    std::size_t rank = 0;
};

struct TeleportStepRecord {
    int batch_index = 0;
    int step_index = 0;
    double grad_norm_sq = 0.0;  // gate value, measured before the update
    double loss_before = 0.0;
    double loss_after = 0.0;
    bool has_loss_after = false;
    double projected_norm = 0.0;
    bool cap_hit = false;  // gate fired; no update was applied
    double seconds = 0.0;  // since phase start, monotone within a report
    std::vector<LayerRank> ranks;
};

struct TeleportReport {
    std::vector<TeleportStepRecord> rows;
};

// One gated update in the loss level set: evaluate the loss gradient, stop if
// its squared norm reached the cap, otherwise push all teleportable
// parameters along the projected ascent direction of 0.5*||grad L||^2
// simultaneously.
TeleportStepRecord teleport_step(ModelGraph& model, const Batch& batch,
                                 const BasisMap& bases, const TeleportConfig& cfg,
                                 LossKind kind);

// Draws cfg.batches seeded batches of cfg.batch_size; per batch builds one
// basis set, then runs up to cfg.steps gated steps (stopping at the cap).
TeleportReport run_teleport_for_epoch(ModelGraph& model, const DataView& data,
                                      const TeleportConfig& cfg, LossKind kind,
                                      SeededRng& rng);

enum class TimingMode { off, cpu, real };

struct EpochMetric {
    std::uint64_t seed = 0;
    int epoch = 0;
    std::uint64_t global_step = 0;
    double seconds = 0.0;  // cumulative, per the timing mode
    double train_loss = 0.0;
    double test_loss = 0.0;
    double test_accuracy = 0.0;
    bool has_accuracy = false;
    bool teleported = false;
};

struct TrainResult {
    std::vector<EpochMetric> metrics;
    std::vector<TeleportReport> phases;  // one per epoch that teleported
};

// Full training loop: optional teleport phase at the start of scheduled
// epochs (once past warmup), then a shuffled pass of primary optimizer steps,
// then a whole-test-set evaluation.
TrainResult train_with_teleport(ModelGraph& model, const DataView& train,
                                const DataView& test, OptimizerState& opt,
                                LossKind kind, const TeleportConfig& tcfg, int epochs,
                                std::size_t primary_batch, std::uint64_t seed,
                                TimingMode timing = TimingMode::cpu);

// The same loop with no teleport machinery at all; used to pin down that an
// empty schedule is bit-for-bit the plain optimizer.
TrainResult train_plain(ModelGraph& model, const DataView& train, const DataView& test,
                        OptimizerState& opt, LossKind kind, int epochs,
                        std::size_t primary_batch, std::uint64_t seed,
                        TimingMode timing = TimingMode::cpu);

}  // namespace nullport
