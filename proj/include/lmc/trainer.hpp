#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "lmc/balance.hpp"
#include "lmc/checkpoint.hpp"
#include "lmc/distill.hpp"
#include "lmc/encoder.hpp"
#include "lmc/memory.hpp"
#include "lmc/metrics.hpp"
#include "lmc/taskstream.hpp"

namespace lmc {

// The four ablation switches: modal interaction (shared keys + biases),
// attention distillation, gradient modulation, memory replay.
struct TrainerSwitches {
    bool mi = true;
    bool ad = true;
    bool gm = true;
    bool mm = true;
};

struct TrainerConfig {
    int epochs_c = 10;  // current-task epochs
    int epochs_m = 5;   // memory-replay epochs
    int batch_size = 16;
    double lr = 0.05;
    double lambda = 1.0;
    double alpha = 0.5;
    size_t budget_per_class = 10;  // 0 skips the memory phase
    size_t global_limit = 0;       // optional total-bank cap
    uint64_t seed = 1;
    TrainerSwitches sw;
    ModulationMode mode = ModulationMode::Symmetric;
    bool post_softmax_distill = false;

    void validate() const;
};

uint64_t trainer_config_hash(const EncoderConfig& enc, const TrainerConfig& cfg);

struct TaskSummary {
    int task = 0;
    double A = 0.0;
    double U = 0.0;
    double mean_abs_gamma_dev = 0.0;  // average |gamma - 1| over this task's batches
    double G = 1.0;                   // averaged coefficient carried to the next task
    double wall_seconds = 0.0;
};

struct RunResult {
    ScoreMatrix matrix;
    MetricsReport report;
    std::vector<TaskSummary> tasks;
    std::vector<TraceRow> trace;
    uint64_t config_hash = 0;
};

class Trainer {
  public:
    Trainer(const EncoderConfig& enc, const TrainerConfig& cfg, TaskKind kind);
    // continue a run from a task-boundary checkpoint
    Trainer(const TrainerCheckpoint& ckpt, const TrainerConfig& cfg);

    int next_task() const { return next_task_; }
    DualStreamModel& model() { return model_; }
    const MemoryBank& bank() const { return bank_; }
    const ModulationState& modulation() const { return mod_; }
    const std::vector<TraceRow>& trace() const { return trace_; }

    // One pass of the per-task algorithm: current-phase training (with
    // distillation against the pre-task frozen model for k > 1), memory
    // update, then replay epochs. Tasks must be trained in order.
    TaskSummary train_task(const TaskStream& stream, int k);

    TrainerCheckpoint checkpoint() const;

    using TaskCallback = std::function<void(int, const TrainerCheckpoint&)>;
    RunResult run_lifelong(const TaskStream& stream, const TaskCallback& on_task = {});

  private:
    void train_batch(const std::vector<const Example*>& batch, int k,
                     DualStreamModel* frozen, const char* phase, int epoch, int batch_idx,
                     double& abs_dev_sum, int& batch_count);

    EncoderConfig enc_;
    TrainerConfig cfg_;
    DualStreamModel model_;
    MemoryBank bank_;
    ModulationState mod_;
    ScoreMatrix matrix_;
    std::vector<double> A_;
    std::vector<TraceRow> trace_;
    int next_task_ = 1;
};

struct AblationRow {
    std::string name;  // full, wo_mi, wo_ad, wo_gm, wo_mm
    double A_final = 0.0;
    double U_final = 0.0;
};

// Full configuration plus the four single-switch removals, shared seed.
std::vector<AblationRow> ablate(const TaskStream& stream, const EncoderConfig& enc,
                                const TrainerConfig& base);

}  // namespace lmc
