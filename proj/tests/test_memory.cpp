#include <algorithm>
#include <set>

#include "doctest.h"
#include "lmc/memory.hpp"
#include "lmc/rng.hpp"

using namespace lmc;

namespace {

Example rel_ex(uint64_t id, int relation) {
    Example ex;
    ex.id = id;
    ex.relation = relation;
    ex.tokens = {1, 2, 3};
    return ex;
}

std::vector<Example> rel_batch(int relation, int count, uint64_t id0) {
    std::vector<Example> v;
    for (int i = 0; i < count; ++i) v.push_back(rel_ex(id0 + i, relation));
    return v;
}

std::multiset<uint64_t> ids(const std::vector<Example>& v) {
    std::multiset<uint64_t> s;
    for (const auto& e : v) s.insert(e.id);
    return s;
}

}  // namespace

TEST_CASE("banking class of an example") {
    CHECK(example_class(rel_ex(1, 3)) == 3);
    CHECK(example_class(rel_ex(1, 0)) == 0);

    Example ner;
    ner.tokens = {4, 5, 6};
    ner.tags = {0, 0, 0};
    CHECK(example_class(ner) == 0);  // entity-free sequence shares the N/A slot
    ner.tags = {0, b_tag(2), i_tag(2)};
    CHECK(example_class(ner) == 3);  // 1 + type position
    ner.tags = {b_tag(0), 0, 0};
    CHECK(example_class(ner) == 1);
}

TEST_CASE("selection respects supply and budget") {
    auto rng = make_rng(5);

    auto small = select(rel_batch(2, 6, 100), 10, rng);
    CHECK(small.at(2).size() == 6);  // budget exceeds supply, keep everything
    CHECK(ids(small.at(2)) == ids(rel_batch(2, 6, 100)));

    auto big = select(rel_batch(3, 100, 0), 2, rng);
    CHECK(big.at(3).size() == 2);
    for (const auto& e : big.at(3)) CHECK(e.id < 100);
    CHECK(big.at(3)[0].id != big.at(3)[1].id);

    CHECK(select({}, 4, rng).empty());
    CHECK_THROWS_AS(select(rel_batch(1, 3, 0), 0, rng), ConfigError);
}

TEST_CASE("selection is deterministic under the seed and splits by class") {
    std::vector<Example> d = rel_batch(1, 30, 0);
    auto extra = rel_batch(2, 30, 1000);
    d.insert(d.end(), extra.begin(), extra.end());

    auto r1 = make_rng(77), r2 = make_rng(77), r3 = make_rng(78);
    auto a = select(d, 5, r1);
    auto b = select(d, 5, r2);
    auto c = select(d, 5, r3);
    CHECK(ids(a.at(1)) == ids(b.at(1)));
    CHECK(ids(a.at(2)) == ids(b.at(2)));
    CHECK((ids(a.at(1)) != ids(c.at(1)) || ids(a.at(2)) != ids(c.at(2))));
    for (const auto& e : a.at(1)) CHECK(e.relation == 1);
    for (const auto& e : a.at(2)) CHECK(e.relation == 2);
}

TEST_CASE("bank updates keep budgets and reject duplicate classes") {
    MemoryBank bank;
    bank.budget_per_class = 5;
    bank.rng_seed = 9;

    auto rng = make_rng(1);
    update(bank, select(rel_batch(1, 20, 0), 5, rng));
    update(bank, select(rel_batch(2, 3, 100), 5, rng));
    CHECK(bank.entries.at(1).size() == 5);
    CHECK(bank.entries.at(2).size() == 3);
    CHECK(bank.size() == 8);

    update(bank, {});
    CHECK(bank.size() == 8);

    CHECK_THROWS_AS(update(bank, select(rel_batch(2, 4, 200), 5, rng)), StateError);
    CHECK_THROWS_AS(update(bank, {{3, rel_batch(3, 9, 300)}}), StateError);  // over budget
}

TEST_CASE("three tasks of two classes stay within the counting bound") {
    MemoryBank bank;
    bank.budget_per_class = 5;
    auto rng = make_rng(3);
    int cls = 1;
    for (int task = 0; task < 3; ++task) {
        std::vector<Example> d = rel_batch(cls++, 40, task * 1000);
        auto more = rel_batch(cls++, 40, task * 1000 + 500);
        d.insert(d.end(), more.begin(), more.end());
        auto na = rel_batch(0, 12, task * 1000 + 900);
        d.insert(d.end(), na.begin(), na.end());
        update(bank, select(d, 5, rng));
    }
    // 6 introduced classes plus the shared N/A slot
    CHECK(bank.size() <= 5 * 7);
    CHECK(bank.entries.at(0).size() == 5);  // N/A never grows past its budget
    for (const auto& [c, v] : bank.entries) CHECK(v.size() <= 5);
}

TEST_CASE("the shared N/A slot merges by reservoir") {
    MemoryBank bank;
    bank.budget_per_class = 10;
    bank.rng_seed = 42;
    auto rng = make_rng(2);

    update(bank, select(rel_batch(0, 10, 0), 10, rng));
    CHECK(bank.entries.at(0).size() == 10);

    update(bank, select(rel_batch(0, 10, 100), 10, rng));
    CHECK(bank.entries.at(0).size() == 10);
    CHECK(bank.seen_count.at(0) == 20);

    // a long stream should mix old and new rather than keep either side whole
    int from_second = 0;
    for (const auto& e : bank.entries.at(0)) from_second += e.id >= 100;
    CHECK(from_second > 0);
    CHECK(from_second < 10);
}

TEST_CASE("unbounded budget banks every example seen") {
    MemoryBank bank;
    bank.budget_per_class = kUnboundedBudget;
    auto rng = make_rng(4);
    std::multiset<uint64_t> everything;
    for (int task = 0; task < 3; ++task) {
        auto d = rel_batch(task + 1, 17, task * 100);
        auto na = rel_batch(0, 6, task * 100 + 50);
        d.insert(d.end(), na.begin(), na.end());
        for (const auto& e : d) everything.insert(e.id);
        update(bank, select(d, kUnboundedBudget, rng));
    }
    CHECK(bank.size() == everything.size());
    CHECK(ids(bank.all()) == everything);
}

TEST_CASE("global cap downsamples uniformly over the union") {
    MemoryBank bank;
    bank.budget_per_class = 10;
    bank.global_limit = 12;
    auto rng = make_rng(6);
    update(bank, select(rel_batch(1, 30, 0), 10, rng));
    update(bank, select(rel_batch(2, 30, 100), 10, rng));
    CHECK(bank.size() == 12);
    for (const auto& [c, v] : bank.entries)
        for (const auto& e : v) CHECK(example_class(e) == c);
}

TEST_CASE("replay epochs partition the bank") {
    MemoryBank bank;
    bank.budget_per_class = 10;
    auto rng = make_rng(8);
    update(bank, select(rel_batch(1, 6, 0), 10, rng));
    update(bank, select(rel_batch(2, 4, 100), 10, rng));
    REQUIRE(bank.size() == 10);

    auto r1 = make_rng(mix64(1, "replay", 0));
    auto batches = replay_batches(bank, 4, r1);
    REQUIRE(batches.size() == 3);
    CHECK(batches[0].size() == 4);
    CHECK(batches[1].size() == 4);
    CHECK(batches[2].size() == 2);

    std::multiset<uint64_t> seen;
    for (const auto& b : batches)
        for (const auto& e : b) seen.insert(e.id);
    CHECK(seen == ids(bank.all()));

    // a different sub-seed reorders but keeps the multiset
    auto r2 = make_rng(mix64(1, "replay", 1));
    auto batches2 = replay_batches(bank, 4, r2);
    std::vector<uint64_t> flat1, flat2;
    for (const auto& b : batches) for (const auto& e : b) flat1.push_back(e.id);
    for (const auto& b : batches2) for (const auto& e : b) flat2.push_back(e.id);
    CHECK(flat1 != flat2);
    CHECK(std::multiset<uint64_t>(flat2.begin(), flat2.end()) == seen);

    MemoryBank empty;
    auto r3 = make_rng(1);
    CHECK(replay_batches(empty, 4, r3).empty());
    CHECK_THROWS_AS(replay_batches(bank, 0, r3), ConfigError);
}
