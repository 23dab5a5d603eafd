#include "lmc/memory.hpp"

#include <algorithm>

#include "lmc/rng.hpp"

namespace lmc {

int example_class(const Example& ex) {
    if (ex.relation >= 0) return ex.relation;
    for (int t : ex.tags)
        if (t > 0) return 1 + (t - 1) / 2;
    return 0;
}

size_t MemoryBank::size() const {
    size_t n = 0;
    for (const auto& [c, v] : entries) n += v.size();
    return n;
}

std::vector<Example> MemoryBank::all() const {
    std::vector<Example> out;
    out.reserve(size());
    for (const auto& [c, v] : entries) out.insert(out.end(), v.begin(), v.end());
    return out;
}

std::map<int, std::vector<Example>> select(const std::vector<Example>& d,
                                           size_t budget_per_class, std::mt19937_64& rng) {
    if (budget_per_class < 1) throw ConfigError("select: budget must be at least 1");
    std::map<int, std::vector<Example>> by_class;
    for (const Example& ex : d) by_class[example_class(ex)].push_back(ex);

    std::map<int, std::vector<Example>> picked;
    for (auto& [c, v] : by_class) {
        if (budget_per_class != kUnboundedBudget && v.size() > budget_per_class) {
            std::vector<Example> sample;
            sample.reserve(budget_per_class);
            std::sample(v.begin(), v.end(), std::back_inserter(sample), budget_per_class, rng);
            picked[c] = std::move(sample);
        } else {
            picked[c] = std::move(v);
        }
    }
    return picked;
}

void update(MemoryBank& bank, const std::map<int, std::vector<Example>>& picked) {
    auto rng = make_rng(mix64(bank.rng_seed, "memory.update", bank.update_counter));
    ++bank.update_counter;

    for (const auto& [c, v] : picked) {
        if (bank.budget_per_class != kUnboundedBudget && v.size() > bank.budget_per_class)
            throw StateError("memory update: selection for class " + std::to_string(c) +
                             " exceeds the per-class budget");
        if (c == kNaRelation && bank.entries.count(c)) {
            // shared slot: reservoir over everything ever offered for N/A
            auto& slot = bank.entries[c];
            uint64_t& seen = bank.seen_count[c];
            for (const Example& ex : v) {
                ++seen;
                if (bank.budget_per_class == kUnboundedBudget ||
                    slot.size() < bank.budget_per_class) {
                    slot.push_back(ex);
                } else {
                    uint64_t j = rng() % seen;
                    if (j < slot.size()) slot[j] = ex;
                }
            }
            continue;
        }
        if (bank.entries.count(c))
            throw StateError("memory update: class " + std::to_string(c) + " already banked");
        bank.entries[c] = v;
        bank.seen_count[c] = v.size();
    }

    if (bank.global_limit > 0 && bank.size() > bank.global_limit) {
        std::vector<Example> pool = bank.all();
        std::vector<Example> kept;
        kept.reserve(bank.global_limit);
        std::sample(pool.begin(), pool.end(), std::back_inserter(kept), bank.global_limit, rng);
        bank.entries.clear();
        for (Example& ex : kept) bank.entries[example_class(ex)].push_back(std::move(ex));
    }
}

std::vector<std::vector<Example>> replay_batches(const MemoryBank& bank, int batch_size,
                                                 std::mt19937_64& rng) {
    if (batch_size < 1) throw ConfigError("replay_batches: batch size must be positive");
    std::vector<Example> pool = bank.all();
    std::shuffle(pool.begin(), pool.end(), rng);

    std::vector<std::vector<Example>> batches;
    for (size_t i = 0; i < pool.size(); i += batch_size) {
        size_t end = std::min(pool.size(), i + batch_size);
        batches.emplace_back(pool.begin() + i, pool.begin() + end);
    }
    return batches;
}

}  // namespace lmc
