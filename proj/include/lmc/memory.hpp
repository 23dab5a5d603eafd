#pragma once

#include <cstdint>
#include <limits>
#include <map>
#include <random>
#include <vector>

#include "lmc/error.hpp"
#include "lmc/types.hpp"

namespace lmc {

constexpr size_t kUnboundedBudget = std::numeric_limits<size_t>::max();

// Class identity used for banking: the relation id for relation examples,
// otherwise 0 for entity-free sequences and 1 + entity type for tagged ones.
int example_class(const Example& ex);

// Rehearsal bank. Non-N/A classes are filled once, when their task ends;
// the N/A slot is shared across tasks and kept at budget by reservoir
// replacement so it does not grow with the task count.
struct MemoryBank {
    size_t budget_per_class = 10;
    uint64_t rng_seed = 0;

    // Optional cap on the total bank size, applied after each update by
    // uniform downsampling over the union (memory-size sweeps).
    size_t global_limit = 0;  // 0 means off

    std::map<int, std::vector<Example>> entries;
    std::map<int, uint64_t> seen_count;  // reservoir stream lengths
    uint64_t update_counter = 0;

    size_t size() const;
    bool empty() const { return size() == 0; }
    std::vector<Example> all() const;
};

// Uniform sample without replacement of min(budget, count) examples per
// class present in d.
std::map<int, std::vector<Example>> select(const std::vector<Example>& d,
                                           size_t budget_per_class, std::mt19937_64& rng);

// Merges a selection into the bank. New classes must be absent from the
// bank; the N/A class merges under the reservoir rule.
void update(MemoryBank& bank, const std::map<int, std::vector<Example>>& picked);

// One shuffled epoch over the whole bank in batches of at most batch_size.
std::vector<std::vector<Example>> replay_batches(const MemoryBank& bank, int batch_size,
                                                 std::mt19937_64& rng);

}  // namespace lmc
