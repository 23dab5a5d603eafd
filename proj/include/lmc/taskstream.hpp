#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lmc/error.hpp"
#include "lmc/types.hpp"

namespace lmc {

// One task of the lifelong stream: the classes it introduces, the cumulative
// roster, and its three splits.
struct Snapshot {
    int k = 0;  // 1-based
    std::vector<int> new_classes;
    std::vector<int> classes;  // cumulative roster after this task
    std::vector<Example> train, val, test;
};

struct TaskStream {
    TaskKind kind = TaskKind::Mre;
    int vocab_size = 0;
    int patch_dim = 0;
    std::vector<Snapshot> tasks;

    // Rosters must grow monotonically and new classes must be fresh.
    void validate() const;
};

// Knobs of the synthetic benchmark. snr_text is the mixing weight of the
// class-indicator tokens against the background unigram; snr_visual is the
// norm of the class mean the patches are sampled around.
struct SyntheticConfig {
    int tasks = 5;
    int classes_per_task = 2;
    int samples_per_class = 40;  // per class per task, split 70/10/20
    int vocab_size = 64;
    int patch_dim = 8;
    int tokens_per_example = 8;
    int patches_per_example = 4;
    int relation_pool = 64;
    double snr_text = 0.5;
    double snr_visual = 1.0;
    uint64_t seed = 1;

    void validate(TaskKind kind) const;
};

// Relations are drawn at random from a pool of ids; N/A is in every task.
// Head and tail entities sit behind marker tokens (the top two vocab ids).
TaskStream generate_mre_stream(const SyntheticConfig& cfg);

// Entity types are introduced in order; every example carries exactly one
// typed span and its O tokens never use any type's indicator tokens.
TaskStream generate_mner_stream(const SyntheticConfig& cfg);

// JSON-lines container: a header record, then one record per example.
// Saving a loaded stream reproduces the file byte for byte.
void save_stream(const TaskStream& stream, const std::string& path);
TaskStream load_stream(const std::string& path);

}  // namespace lmc
