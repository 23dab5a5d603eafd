#include <cmath>
#include <random>

#include "doctest.h"
#include "lmc/distill.hpp"
#include "support/gradcheck.hpp"

using namespace lmc;

namespace {

// Builds snapshot + live pair with one example and the given maps as
// constants (no grads, value checks only).
std::pair<AttentionSnapshot, LiveAttention> const_pair(Tape& tape,
                                                       const std::vector<Tensor>& old_maps,
                                                       const std::vector<Tensor>& new_maps) {
    AttentionSnapshot snap;
    snap.n_layers = 1;
    snap.n_heads = static_cast<int>(old_maps.size()) / 2;
    snap.per_example.push_back(old_maps);
    LiveAttention live;
    live.n_layers = snap.n_layers;
    live.n_heads = snap.n_heads;
    live.per_example.emplace_back();
    for (const auto& m : new_maps) live.per_example.back().push_back(tape.constant(m));
    return {snap, live};
}

}  // namespace

TEST_CASE("pooling sums over the query axis") {
    Tensor map = Tensor::matrix(2, 2, {0.3, 0.7, 0.3, 0.3});
    Tensor pooled = pool_attention(map);
    CHECK(pooled.rows() == 1);
    CHECK(pooled.cols() == 2);
    CHECK(pooled.data[0] == doctest::Approx(0.6).epsilon(1e-15));
    CHECK(pooled.data[1] == doctest::Approx(1.0).epsilon(1e-15));

    Tape tape;
    Val v = pool_attention(tape, tape.constant(map));
    CHECK(tape.value(v).data[0] == doctest::Approx(0.6).epsilon(1e-15));
    CHECK(tape.value(v).data[1] == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("delta counts only lost attention mass") {
    Tensor old_p = Tensor::vec({0.6, 0.4});
    Tensor new_p = Tensor::vec({0.5, 0.5});
    CHECK(asym_delta(old_p, new_p) == doctest::Approx(0.1).epsilon(1e-12));
    // reversed direction: the gained key loses mass instead
    CHECK(asym_delta(new_p, old_p) == doctest::Approx(0.1).epsilon(1e-12));

    // new map dominates everywhere: nothing was lost
    CHECK(asym_delta(Tensor::vec({0.2, 0.3}), Tensor::vec({0.4, 0.3})) == 0.0);
    CHECK(asym_delta(old_p, old_p) == 0.0);

    // drops on both keys combine as an L2 norm
    CHECK(asym_delta(Tensor::vec({0.5, 0.5}), Tensor::vec({0.2, 0.1})) ==
          doctest::Approx(std::sqrt(0.09 + 0.16)).epsilon(1e-12));

    // genuinely asymmetric when losses differ between directions
    Tensor a = Tensor::vec({1.0, 0.0});
    Tensor b = Tensor::vec({0.0, 0.5});
    CHECK(asym_delta(a, b) != doctest::Approx(asym_delta(b, a)).epsilon(1e-9));

    CHECK_THROWS_AS(asym_delta(Tensor::vec({1.0}), Tensor::vec({1.0, 2.0})), DimError);

    Tape tape;
    Val d = asym_delta(tape, old_p, tape.constant(new_p));
    CHECK(tape.value(d).item() == doctest::Approx(0.1).epsilon(1e-12));
}

TEST_CASE("batch loss matches a plain per-map oracle") {
    std::mt19937_64 rng(99);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    auto rand_map = [&](int m) {
        Tensor t({m, m});
        for (auto& x : t.data) x = u(rng);
        return t;
    };

    int m = 4, maps_per_ex = 2 * 1 * 2;  // two streams, one layer, two heads
    Tape tape;
    AttentionSnapshot snap;
    snap.n_layers = 1;
    snap.n_heads = 2;
    LiveAttention live;
    live.n_layers = 1;
    live.n_heads = 2;
    double expect = 0.0;
    int batch = 3;
    for (int ex = 0; ex < batch; ++ex) {
        snap.per_example.emplace_back();
        live.per_example.emplace_back();
        for (int k = 0; k < maps_per_ex; ++k) {
            Tensor o = rand_map(m), n = rand_map(m);
            snap.per_example.back().push_back(o);
            live.per_example.back().push_back(tape.constant(n));
            expect += asym_delta(pool_attention(o), pool_attention(n));
        }
    }
    expect /= batch;

    Val loss = attention_distill_loss(tape, snap, live);
    CHECK(tape.value(loss).item() == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("distilling a map against itself costs nothing") {
    Tape tape;
    Tensor m1 = Tensor::matrix(2, 2, {0.1, -0.4, 2.0, 0.3});
    Tensor m2 = Tensor::matrix(2, 2, {1.0, 1.0, -1.0, 0.5});
    auto [snap, live] = const_pair(tape, {m1, m2}, {m1, m2});
    CHECK(tape.value(attention_distill_loss(tape, snap, live)).item() == 0.0);
    CHECK(tape.value(attention_distill_loss(tape, snap, live, true)).item() ==
          doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("post-softmax variant normalizes both sides first") {
    Tape tape;
    Tensor o = Tensor::matrix(1, 2, {1.0, 0.0});
    Tensor n = Tensor::matrix(1, 2, {0.0, 1.0});
    auto [snap, live] = const_pair(tape, {o, o}, {n, n});

    // by hand: softmax([1,0]) = [p, 1-p], softmax([0,1]) = [1-p, p]
    double p = std::exp(1.0) / (std::exp(1.0) + 1.0);
    double per_map = p - (1.0 - p);  // only the first key loses mass
    Val loss = attention_distill_loss(tape, snap, live, true);
    CHECK(tape.value(loss).item() == doctest::Approx(2.0 * per_map).epsilon(1e-12));

    // prescaled variant sees the raw logits instead
    Val raw = attention_distill_loss(tape, snap, live, false);
    CHECK(tape.value(raw).item() == doctest::Approx(2.0 * 1.0).epsilon(1e-12));
}

TEST_CASE("structure mismatches are rejected") {
    Tape tape;
    Tensor m = Tensor::matrix(2, 2, {0.1, 0.2, 0.3, 0.4});
    auto [snap, live] = const_pair(tape, {m, m}, {m, m});

    LiveAttention wrong_heads = live;
    wrong_heads.n_heads = 3;
    CHECK_THROWS_AS(attention_distill_loss(tape, snap, wrong_heads), StateError);

    LiveAttention extra_map = live;
    extra_map.per_example[0].push_back(tape.constant(m));
    CHECK_THROWS_AS(attention_distill_loss(tape, snap, extra_map), StateError);

    AttentionSnapshot empty;
    empty.n_layers = snap.n_layers;
    empty.n_heads = snap.n_heads;
    LiveAttention empty_live;
    empty_live.n_layers = snap.n_layers;
    empty_live.n_heads = snap.n_heads;
    CHECK_THROWS_AS(attention_distill_loss(tape, empty, empty_live), StateError);
}

TEST_CASE("distillation gradients match finite differences") {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Tensor w({3, 3}), old_map({3, 3});
    for (auto& x : w.data) x = u(rng);
    for (auto& x : old_map.data) x = u(rng);
    Parameter p(w, Modality::Visual, "w");

    // live map depends nonlinearly on the parameter so the chain through
    // relu and the norm is exercised
    auto build = [&](Tape& tape) {
        Val lw = tape.leaf(p);
        Val map = tape.tanh(tape.matmul_nt(lw, lw));
        AttentionSnapshot snap;
        snap.n_layers = 1;
        snap.n_heads = 1;
        snap.per_example.push_back({old_map});
        LiveAttention live;
        live.n_layers = 1;
        live.n_heads = 1;
        live.per_example.push_back({map});
        return attention_distill_loss(tape, snap, live);
    };

    testsupport::GradCheck gc;
    double err = gc.max_rel_err(
        [&] {
            Tape tape;
            return tape.value(build(tape)).item();
        },
        [&] {
            p.zero_grad();
            Tape tape;
            tape.backward(build(tape));
        },
        {&p}, rng, 9);
    CHECK(err < 1e-4);

    // post-softmax path too
    auto build_sm = [&](Tape& tape) {
        Val lw = tape.leaf(p);
        Val map = tape.matmul_nt(lw, lw);
        AttentionSnapshot snap;
        snap.n_layers = 1;
        snap.n_heads = 1;
        snap.per_example.push_back({old_map});
        LiveAttention live;
        live.n_layers = 1;
        live.n_heads = 1;
        live.per_example.push_back({map});
        return attention_distill_loss(tape, snap, live, true);
    };
    double err_sm = gc.max_rel_err(
        [&] {
            Tape tape;
            return tape.value(build_sm(tape)).item();
        },
        [&] {
            p.zero_grad();
            Tape tape;
            tape.backward(build_sm(tape));
        },
        {&p}, rng, 9);
    CHECK(err_sm < 1e-4);
}

TEST_CASE("frozen snapshot stays outside the live graph") {
    EncoderConfig cfg;
    cfg.layers = 2;
    cfg.heads = 2;
    cfg.width = 8;
    cfg.seq_len = 5;
    cfg.interact_layers = 1;
    cfg.vocab_size = 10;
    cfg.patch_dim = 3;
    DualStreamModel model(cfg, TaskKind::Mre, 42);
    model.expand_head({0, 1});

    Example ex;
    ex.tokens = {3, 5, 1};
    ex.patches = {{0.1, 0.2, 0.3}, {0.4, 0.5, 0.6}};
    ex.relation = 1;
    ex.head_start = 0; ex.head_end = 0;
    ex.tail_start = 1; ex.tail_end = 1;

    DualStreamModel frozen = model.freeze_copy();

    // nudge the live model so the maps diverge
    Tape warm;
    auto wr = model.forward_mre(warm, ex);
    warm.backward(warm.cross_entropy(wr.logits, {0}));
    auto params = model.parameters();
    sgd_step(params, 0.5);

    Tape old_tape;
    auto old_res = frozen.forward_mre(old_tape, ex);
    LiveAttention old_live;
    old_live.n_layers = cfg.interact_layers;
    old_live.n_heads = cfg.heads;
    old_live.per_example.push_back(old_res.attn);
    AttentionSnapshot snap = old_live.detach(old_tape);

    Tape tape;
    auto res = model.forward_mre(tape, ex);
    LiveAttention live;
    live.n_layers = cfg.interact_layers;
    live.n_heads = cfg.heads;
    live.per_example.push_back(res.attn);

    Val ad = attention_distill_loss(tape, snap, live);
    CHECK(tape.value(ad).item() > 0.0);
    tape.backward(ad);

    bool live_touched = false;
    for (auto* pp : model.parameters()) {
        if (tape.touches(*pp)) live_touched = true;
        CHECK(pp->grad.all_finite());
    }
    CHECK(live_touched);
    for (auto* pp : frozen.parameters()) {
        CHECK_FALSE(tape.touches(*pp));
        for (double g : const_cast<const Parameter*>(pp)->grad.data) CHECK(g == 0.0);
    }
}

TEST_CASE("total loss mixes the two terms") {
    Tape tape;
    Val ce = tape.constant(Tensor::scalar(0.8));
    Val ad = tape.constant(Tensor::scalar(0.3));

    CHECK(tape.value(total_loss(tape, ce, ad, 1.0)).item() == doctest::Approx(1.1).epsilon(1e-15));
    CHECK(tape.value(total_loss(tape, ce, ad, 2.5)).item() == doctest::Approx(1.55).epsilon(1e-15));
    CHECK(tape.value(total_loss(tape, ce, ad, 0.0)).item() == doctest::Approx(0.8).epsilon(1e-15));

    // first task: no old model, the term is simply absent
    Val plain = total_loss(tape, ce, std::nullopt, 1.0);
    CHECK(plain.id == ce.id);

    // monotone in lambda when the distillation term is positive
    double prev = -1.0;
    for (double lam : {0.0, 0.5, 1.0, 4.0}) {
        double v = tape.value(total_loss(tape, ce, ad, lam)).item();
        CHECK(v > prev);
        prev = v;
    }

    CHECK_THROWS_AS(total_loss(tape, ce, ad, -0.1), ConfigError);
    DistillConfig bad;
    bad.lambda = -1.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}
