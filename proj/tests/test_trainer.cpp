#include <cstdio>
#include <fstream>
#include <set>

#include "doctest.h"
#include "lmc/trainer.hpp"

using namespace lmc;

namespace {

SyntheticConfig tiny_stream_cfg() {
    SyntheticConfig cfg;
    cfg.tasks = 3;
    cfg.classes_per_task = 1;
    cfg.samples_per_class = 10;
    cfg.vocab_size = 32;
    cfg.patch_dim = 4;
    cfg.tokens_per_example = 6;
    cfg.patches_per_example = 2;
    cfg.seed = 21;
    return cfg;
}

EncoderConfig tiny_enc() {
    EncoderConfig ec;
    ec.layers = 2;
    ec.heads = 2;
    ec.width = 8;
    ec.seq_len = 8;
    ec.interact_layers = 1;
    ec.vocab_size = 32;
    ec.patch_dim = 4;
    return ec;
}

TrainerConfig tiny_trainer_cfg() {
    TrainerConfig tc;
    tc.epochs_c = 2;
    tc.epochs_m = 1;
    tc.batch_size = 8;
    tc.lr = 0.05;
    tc.budget_per_class = 4;
    tc.seed = 7;
    return tc;
}

bool params_equal(DualStreamModel& a, DualStreamModel& b) {
    auto pa = a.parameters(), pb = b.parameters();
    if (pa.size() != pb.size()) return false;
    for (size_t i = 0; i < pa.size(); ++i) {
        if (!same_shape(pa[i]->value, pb[i]->value)) return false;
        if (pa[i]->value.data != pb[i]->value.data) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("first-task training ignores the distillation switch") {
    SyntheticConfig sc = tiny_stream_cfg();
    sc.tasks = 1;
    TaskStream stream = generate_mre_stream(sc);

    TrainerConfig with_ad = tiny_trainer_cfg();
    with_ad.sw.ad = true;
    TrainerConfig without_ad = tiny_trainer_cfg();
    without_ad.sw.ad = false;

    Trainer a(tiny_enc(), with_ad, TaskKind::Mre);
    Trainer b(tiny_enc(), without_ad, TaskKind::Mre);
    a.train_task(stream, 1);
    b.train_task(stream, 1);
    CHECK(params_equal(a.model(), b.model()));
}

TEST_CASE("budget zero and replay-off are the same vanilla run") {
    SyntheticConfig sc = tiny_stream_cfg();
    sc.tasks = 1;
    TaskStream stream = generate_mre_stream(sc);

    TrainerConfig zero_budget = tiny_trainer_cfg();
    zero_budget.budget_per_class = 0;  // replay switch on but nothing to store
    TrainerConfig replay_off = tiny_trainer_cfg();
    replay_off.sw.mm = false;

    Trainer a(tiny_enc(), zero_budget, TaskKind::Mre);
    Trainer b(tiny_enc(), replay_off, TaskKind::Mre);
    a.train_task(stream, 1);
    b.train_task(stream, 1);
    CHECK(params_equal(a.model(), b.model()));
    CHECK(a.bank().empty());
    CHECK(b.bank().empty());
}

TEST_CASE("tasks must be trained in order") {
    TaskStream stream = generate_mre_stream(tiny_stream_cfg());
    Trainer t(tiny_enc(), tiny_trainer_cfg(), TaskKind::Mre);
    CHECK_THROWS_AS(t.train_task(stream, 2), StateError);
    t.train_task(stream, 1);
    CHECK_THROWS_AS(t.train_task(stream, 1), StateError);
    CHECK_THROWS_AS(t.train_task(stream, 5), StateError);
}

TEST_CASE("lifelong run fills the lower triangle deterministically") {
    TaskStream stream = generate_mre_stream(tiny_stream_cfg());
    Trainer t1(tiny_enc(), tiny_trainer_cfg(), TaskKind::Mre);
    RunResult r1 = t1.run_lifelong(stream);
    Trainer t2(tiny_enc(), tiny_trainer_cfg(), TaskKind::Mre);
    RunResult r2 = t2.run_lifelong(stream);

    CHECK(r1.matrix.tasks() == 3);
    for (int k = 1; k <= 3; ++k) {
        for (int i = 1; i <= k; ++i) {
            double v = r1.matrix.at(k, i);
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
        if (k > 1) CHECK_FALSE(r1.matrix.has(k - 1, k));
        CHECK(r1.report.U[k - 1] == r1.matrix.at(k, k));
    }
    REQUIRE(r1.report.A.size() == 3);

    // same seed and config: every float identical
    CHECK(r1.matrix.to_csv() == r2.matrix.to_csv());
    CHECK(r1.report.A == r2.report.A);
    REQUIRE(r1.trace.size() == r2.trace.size());
    for (size_t i = 0; i < r1.trace.size(); ++i) {
        CHECK(r1.trace[i].gamma == r2.trace[i].gamma);
        CHECK(r1.trace[i].g == r2.trace[i].g);
        CHECK(r1.trace[i].phase == r2.trace[i].phase);
    }
    CHECK(params_equal(t1.model(), t2.model()));
    CHECK(r1.config_hash == r2.config_hash);

    // the bank only ever holds current- or past-task examples
    for (const auto& [cls, v] : t1.bank().entries)
        for (const Example& ex : v) CHECK(ex.task <= 3);

    // both phases show up in the trace, with coefficients in (0, 1]
    std::set<std::string> phases;
    for (const TraceRow& row : r1.trace) {
        phases.insert(row.phase);
        CHECK(row.g > 0.0);
        CHECK(row.g <= 1.0);
        CHECK(row.gamma > 0.0);
    }
    CHECK(phases == std::set<std::string>{"current", "memory"});
}

TEST_CASE("config changes move the hash") {
    TrainerConfig base = tiny_trainer_cfg();
    TrainerConfig other = base;
    other.lr = 0.06;
    CHECK(trainer_config_hash(tiny_enc(), base) != trainer_config_hash(tiny_enc(), other));
    other = base;
    other.sw.gm = false;
    CHECK(trainer_config_hash(tiny_enc(), base) != trainer_config_hash(tiny_enc(), other));
}

TEST_CASE("resume from a task boundary equals the straight run") {
    TaskStream stream = generate_mre_stream(tiny_stream_cfg());
    TrainerConfig tc = tiny_trainer_cfg();

    std::map<int, TrainerCheckpoint> ckpts;
    Trainer straight(tiny_enc(), tc, TaskKind::Mre);
    RunResult full = straight.run_lifelong(
        stream, [&](int k, const TrainerCheckpoint& c) { ckpts[k] = c; });
    REQUIRE(ckpts.count(2) == 1);

    Trainer resumed(ckpts.at(2), tc);
    CHECK(resumed.next_task() == 3);
    RunResult rest = resumed.run_lifelong(stream);

    CHECK(rest.matrix.to_csv() == full.matrix.to_csv());
    CHECK(rest.report.A == full.report.A);
    CHECK(params_equal(resumed.model(), straight.model()));
    REQUIRE(rest.trace.size() == full.trace.size());
    for (size_t i = 0; i < full.trace.size(); ++i)
        CHECK(rest.trace[i].gamma == full.trace[i].gamma);
}

TEST_CASE("checkpoint files round-trip through disk") {
    TaskStream stream = generate_mre_stream(tiny_stream_cfg());
    TrainerConfig tc = tiny_trainer_cfg();

    TrainerCheckpoint at2;
    Trainer straight(tiny_enc(), tc, TaskKind::Mre);
    RunResult full = straight.run_lifelong(stream, [&](int k, const TrainerCheckpoint& c) {
        if (k == 2) at2 = c;
    });

    std::string path = "/tmp/lmc_trainer_ck.bin";
    save_checkpoint(path, at2);
    TrainerCheckpoint loaded = load_checkpoint(path);
    CHECK(loaded.completed_task == 2);
    CHECK(loaded.config_hash == at2.config_hash);
    CHECK(loaded.class_ids == at2.class_ids);
    REQUIRE(loaded.params.size() == at2.params.size());
    for (size_t i = 0; i < loaded.params.size(); ++i)
        CHECK(loaded.params[i].data == at2.params[i].data);
    CHECK(loaded.bank.size() == at2.bank.size());
    CHECK(loaded.modulation.G_prev == at2.modulation.G_prev);
    CHECK(loaded.trace.size() == at2.trace.size());

    Trainer resumed(loaded, tc);
    RunResult rest = resumed.run_lifelong(stream);
    CHECK(rest.matrix.to_csv() == full.matrix.to_csv());
    CHECK(params_equal(resumed.model(), straight.model()));

    // a different configuration refuses the checkpoint
    TrainerConfig other = tc;
    other.lr = 0.01;
    CHECK_THROWS_AS(Trainer(loaded, other), ValidationError);

    // corrupt header
    {
        std::ofstream out(path, std::ios::binary);
        out << "NOTACKPT garbage";
    }
    CHECK_THROWS_AS(load_checkpoint(path), ParseError);
    CHECK_THROWS_AS(load_checkpoint("/tmp/lmc_no_such_ck.bin"), InputError);
}

TEST_CASE("gradient modulation changes updates and is bounded") {
    SyntheticConfig sc = tiny_stream_cfg();
    sc.snr_text = 0.9;
    sc.snr_visual = 0.1;  // imbalanced so gamma drifts from 1
    TaskStream stream = generate_mre_stream(sc);

    TrainerConfig gm_on = tiny_trainer_cfg();
    TrainerConfig gm_off = tiny_trainer_cfg();
    gm_off.sw.gm = false;

    Trainer a(tiny_enc(), gm_on, TaskKind::Mre);
    Trainer b(tiny_enc(), gm_off, TaskKind::Mre);
    a.run_lifelong(stream);
    b.run_lifelong(stream);
    CHECK_FALSE(params_equal(a.model(), b.model()));

    bool any_scaled = false;
    for (const TraceRow& row : a.trace()) any_scaled |= row.g < 1.0;
    CHECK(any_scaled);
    for (const TraceRow& row : b.trace()) CHECK(row.g == 1.0);
}

TEST_CASE("entity task stream trains end to end") {
    SyntheticConfig sc = tiny_stream_cfg();
    sc.tasks = 2;
    TaskStream stream = generate_mner_stream(sc);
    TrainerConfig tc = tiny_trainer_cfg();

    Trainer t(tiny_enc(), tc, TaskKind::Mner);
    RunResult r = t.run_lifelong(stream);
    CHECK(r.matrix.tasks() == 2);
    CHECK(r.report.A.size() == 2);
    for (double a : r.report.A) {
        CHECK(a >= 0.0);
        CHECK(a <= 1.0);
    }
    CHECK(t.model().head_rows() == bio_tag_count(2));
}

TEST_CASE("ablation table has the full row plus four removals") {
    SyntheticConfig sc = tiny_stream_cfg();
    sc.tasks = 2;
    TaskStream stream = generate_mre_stream(sc);
    TrainerConfig tc = tiny_trainer_cfg();
    tc.epochs_c = 1;
    tc.epochs_m = 1;

    auto rows = ablate(stream, tiny_enc(), tc);
    REQUIRE(rows.size() == 5);
    CHECK(rows[0].name == "full");
    CHECK(rows[1].name == "wo_mi");
    CHECK(rows[2].name == "wo_ad");
    CHECK(rows[3].name == "wo_gm");
    CHECK(rows[4].name == "wo_mm");
    for (const auto& row : rows) {
        CHECK(row.A_final >= 0.0);
        CHECK(row.A_final <= 1.0);
        CHECK(row.U_final >= 0.0);
    }
}
