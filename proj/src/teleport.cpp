#include "nullport/teleport.hpp"

#include <chrono>
#include <cmath>
#include <ctime>
#include <stdexcept>

namespace nullport {
namespace {

void require(bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(what);
}

// Cumulative clock for the metric rows. `off` always reads zero so runs can
// be compared byte for byte.
class Stopwatch {
public:
    explicit Stopwatch(TimingMode mode) : mode_(mode) { reset(); }

    void reset() {
        start_real_ = std::chrono::steady_clock::now();
        start_cpu_ = std::clock();
    }

    double seconds() const {
        switch (mode_) {
            case TimingMode::off: return 0.0;
            case TimingMode::cpu:
                return static_cast<double>(std::clock() - start_cpu_) / CLOCKS_PER_SEC;
            case TimingMode::real:
                return std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                                     start_real_)
                    .count();
        }
        return 0.0;
    }

private:
    TimingMode mode_;
    std::chrono::steady_clock::time_point start_real_;
    std::clock_t start_cpu_ = 0;
};

std::vector<LayerRank> rank_summary(const BasisMap& bases) {
    std::vector<LayerRank> out;
    for (const auto& [id, basis] : bases) {
        bool seen = false;
        for (const auto& r : out) {
            if (r.group == basis->group) {
                seen = true;
                break;
            }
        }
        if (!seen) out.push_back({basis->group, basis->rank});
    }
    return out;
}

// One shuffled pass of primary optimizer steps. Returns the sample-weighted
// mean of the per-batch losses, each measured before its update.
double run_primary_epoch(ModelGraph& model, const DataView& train, OptimizerState& opt,
                         LossKind kind, std::size_t batch_size, SeededRng& rng,
                         std::uint64_t& global_step) {
    BatchIterator it(train.count(), batch_size, rng);
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
    return loss_sum / static_cast<double>(samples);
}

EpochMetric evaluate_epoch(const ModelGraph& model, const DataView& test, LossKind kind,
                           std::uint64_t seed, int epoch, std::uint64_t global_step,
                           double seconds, double train_loss, bool teleported) {
    EpochMetric m;
    m.seed = seed;
    m.epoch = epoch;
    m.global_step = global_step;
    m.seconds = seconds;
    m.train_loss = train_loss;
    m.teleported = teleported;
    Batch whole = test.all();
    m.test_loss = loss_value(model, whole, kind);
    if (kind == LossKind::cross_entropy && !whole.labels.empty()) {
        m.test_accuracy = accuracy(model, whole);
        m.has_accuracy = true;
    }
    return m;
}

}  // namespace

void validate(const TeleportConfig& cfg) {
    require(std::isfinite(cfg.eta) && cfg.eta >= 0.0,
            "teleport eta must be finite and non-negative");
    require(cfg.batches >= 0, "teleport batches must be non-negative");
    require(cfg.steps >= 0, "teleport steps must be non-negative");
    require(std::isfinite(cfg.cap) && cfg.cap >= 0.0,
            "teleport cap must be finite and non-negative");
    require(cfg.tau >= 0.0 && cfg.tau <= 1.0, "tau must lie in [0, 1]");
    require(cfg.warmup_steps >= 0, "warmup_steps must be non-negative");
    require(cfg.batch_size >= 1, "teleport batch_size must be at least 1");
    require(std::isfinite(cfg.fd_step_scale) && cfg.fd_step_scale > 0.0,
            "fd_step_scale must be finite and positive");
    require(cfg.threads >= 1, "threads must be at least 1");
    if (!cfg.schedule.empty()) {
        require(cfg.batches > 0 && cfg.steps > 0,
                "a non-empty teleport schedule needs batches > 0 and steps > 0");
    }
}

TeleportStepRecord teleport_step(ModelGraph& model, const Batch& batch,
                                 const BasisMap& bases, const TeleportConfig& cfg,
                                 LossKind kind) {
    TeleportStepRecord rec;
    rec.ranks = rank_summary(bases);

    auto [loss0, grad0] = primary_gradient(model, batch, kind);
    rec.loss_before = loss0;
    rec.grad_norm_sq = grad_norm_sq(grad0, model.teleportable());
    if (rec.grad_norm_sq >= cfg.cap) {
        rec.cap_hit = true;
        return rec;
    }

    GradientSet ascent = teleport_gradient_from(model, batch, kind, cfg.fd_step_scale,
                                                grad0);

    // Project every teleportable gradient first, then apply the whole update
    // at once so later layers do not see partially moved parameters.
    GradientSet deltas;
    double norm_sq = 0.0;
    for (const ParamId& id : model.teleportable()) {
        auto basis_it = bases.find(id);
        if (basis_it == bases.end()) {
            throw std::invalid_argument("no projection basis for parameter " +
                                        to_string(id));
        }
        Tensor delta = project(ascent.at(id), *basis_it->second);
        norm_sq += frobenius_norm_sq(delta);
        deltas.emplace(id, std::move(delta));
    }
    rec.projected_norm = std::sqrt(norm_sq);

    if (cfg.eta != 0.0 && rec.projected_norm != 0.0) {
        double sign = cfg.descent ? -1.0 : 1.0;
        for (const auto& [id, delta] : deltas) {
            model.add_scaled_param(id, delta, sign * cfg.eta);
        }
    }
    if (cfg.record_loss_after) {
        rec.loss_after = loss_value(model, batch, kind);
        rec.has_loss_after = true;
    }
    return rec;
}

TeleportReport run_teleport_for_epoch(ModelGraph& model, const DataView& data,
                                      const TeleportConfig& cfg, LossKind kind,
                                      SeededRng& rng) {
    validate(cfg);
    TeleportReport report;
    if (cfg.batches == 0 || cfg.steps == 0) return report;

    std::size_t count = data.count();
    if (count < cfg.batch_size) {
        throw std::invalid_argument("teleport batch_size exceeds the dataset size");
    }

    std::vector<std::size_t> order = rng.shuffle(count);
    std::size_t cursor = 0;
    auto phase_start = std::chrono::steady_clock::now();

    for (int b = 0; b < cfg.batches; ++b) {
        if (cursor + cfg.batch_size > count) {
            order = rng.shuffle(count);
            cursor = 0;
        }
        std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(cursor),
                                     order.begin() +
                                         static_cast<std::ptrdiff_t>(cursor + cfg.batch_size));
        cursor += cfg.batch_size;
        Batch batch = data.gather(idx);

        ForwardTrace trace = forward(model, batch.x);
        BasisMap bases = build_all_bases(model, trace, cfg.tau, cfg.threads);

        for (int s = 0; s < cfg.steps; ++s) {
            TeleportStepRecord rec = teleport_step(model, batch, bases, cfg, kind);
            rec.batch_index = b;
            rec.step_index = s;
            rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                                        phase_start)
                              .count();
            bool stop = rec.cap_hit;
            report.rows.push_back(std::move(rec));
            if (stop) break;
        }
    }
    return report;
}

TrainResult train_with_teleport(ModelGraph& model, const DataView& train,
                                const DataView& test, OptimizerState& opt,
                                LossKind kind, const TeleportConfig& tcfg, int epochs,
                                std::size_t primary_batch, std::uint64_t seed,
                                TimingMode timing) {
    validate(tcfg);
    require(epochs >= 0, "epochs must be non-negative");
    require(primary_batch >= 1, "batch size must be at least 1");

    TrainResult result;
    SeededRng base(seed);
    Stopwatch watch(timing);
    std::uint64_t global_step = 0;

    for (int epoch = 0; epoch < epochs; ++epoch) {
        bool teleported = false;
        if (tcfg.schedule.count(epoch) != 0 && tcfg.batches > 0 && tcfg.steps > 0 &&
            global_step >= static_cast<std::uint64_t>(tcfg.warmup_steps)) {
            SeededRng teleport_rng =
                base.fork(2 * static_cast<std::uint64_t>(epoch) + 1);
            result.phases.push_back(
                run_teleport_for_epoch(model, train, tcfg, kind, teleport_rng));
            teleported = true;
        }
        SeededRng epoch_rng = base.fork(2 * static_cast<std::uint64_t>(epoch));
        double train_loss = run_primary_epoch(model, train, opt, kind, primary_batch,
                                              epoch_rng, global_step);
        result.metrics.push_back(evaluate_epoch(model, test, kind, seed, epoch,
                                                global_step, watch.seconds(), train_loss,
                                                teleported));
    }
    return result;
}

TrainResult train_plain(ModelGraph& model, const DataView& train, const DataView& test,
                        OptimizerState& opt, LossKind kind, int epochs,
                        std::size_t primary_batch, std::uint64_t seed,
                        TimingMode timing) {
    require(epochs >= 0, "epochs must be non-negative");
    require(primary_batch >= 1, "batch size must be at least 1");

    TrainResult result;
    SeededRng base(seed);
    Stopwatch watch(timing);
    std::uint64_t global_step = 0;

    for (int epoch = 0; epoch < epochs; ++epoch) {
        SeededRng epoch_rng = base.fork(2 * static_cast<std::uint64_t>(epoch));
        double train_loss = run_primary_epoch(model, train, opt, kind, primary_batch,
                                              epoch_rng, global_step);
        result.metrics.push_back(evaluate_epoch(model, test, kind, seed, epoch,
                                                global_step, watch.seconds(), train_loss,
                                                false));
    }
    return result;
}

}  // namespace nullport
