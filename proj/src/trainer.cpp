#include "lmc/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

#include "lmc/rng.hpp"

namespace lmc {

void TrainerConfig::validate() const {
    if (epochs_c < 0 || epochs_m < 0) throw ConfigError("epoch counts must be non-negative");
    if (batch_size < 1) throw ConfigError("batch_size must be positive");
    if (lr <= 0.0) throw ConfigError("lr must be positive");
    if (lambda < 0.0) throw ConfigError("lambda must be non-negative");
    if (alpha <= 0.0) throw ConfigError("alpha must be positive");
}

uint64_t trainer_config_hash(const EncoderConfig& enc, const TrainerConfig& cfg) {
    std::ostringstream s;
    s << enc.layers << '|' << enc.heads << '|' << enc.width << '|' << enc.seq_len << '|'
      << enc.interact_layers << '|' << enc.vocab_size << '|' << enc.patch_dim << '|'
      << enc.freeze_shared_keys_after_task1 << '|' << cfg.epochs_c << '|' << cfg.epochs_m << '|'
      << cfg.batch_size << '|' << cfg.lr << '|' << cfg.lambda << '|' << cfg.alpha << '|'
      << cfg.budget_per_class << '|' << cfg.global_limit << '|' << cfg.seed << '|' << cfg.sw.mi
      << cfg.sw.ad << cfg.sw.gm << cfg.sw.mm << '|' << modulation_mode_name(cfg.mode) << '|'
      << cfg.post_softmax_distill;
    return fnv1a(s.str());
}

Trainer::Trainer(const EncoderConfig& enc, const TrainerConfig& cfg, TaskKind kind)
    : enc_(enc), cfg_(cfg), model_(enc, kind, cfg.seed) {
    cfg_.validate();
    bank_.budget_per_class = cfg_.budget_per_class;
    bank_.global_limit = cfg_.global_limit;
    bank_.rng_seed = mix64(cfg_.seed, "memory");
    mod_.alpha = cfg_.alpha;
    mod_.mode = cfg_.mode;
}

Trainer::Trainer(const TrainerCheckpoint& ckpt, const TrainerConfig& cfg)
    : enc_(ckpt.enc), cfg_(cfg), model_(restore_model(ckpt)) {
    cfg_.validate();
    uint64_t expect = trainer_config_hash(enc_, cfg_);
    if (ckpt.config_hash != 0 && ckpt.config_hash != expect)
        throw ValidationError("checkpoint was written under a different configuration");
    bank_ = ckpt.bank;
    mod_ = ckpt.modulation;
    for (const auto& cell : ckpt.scores) matrix_.set(cell.k, cell.i, cell.v);
    A_ = ckpt.A;
    trace_ = ckpt.trace;
    next_task_ = ckpt.completed_task + 1;
}

namespace {

// softmax probabilities of one logits row at the given column
Tensor logits_row(const Tensor& logits, int row) {
    Tensor out({1, logits.cols()});
    for (int j = 0; j < logits.cols(); ++j) out.data[j] = logits.at(row, j);
    return out;
}

}  // namespace

void Trainer::train_batch(const std::vector<const Example*>& batch, int k,
                          DualStreamModel* frozen, const char* phase, int epoch, int batch_idx,
                          double& abs_dev_sum, int& batch_count) {
    Tape tape;
    std::vector<Val> ces;
    ces.reserve(batch.size());

    LiveAttention live;
    live.n_layers = enc_.interact_layers;
    live.n_heads = enc_.heads;
    bool distill = frozen != nullptr;

    std::vector<Tensor> part_v, part_t;
    std::vector<int> labels;

    for (const Example* ex : batch) {
        if (model_.head_kind() == TaskKind::Mre) {
            auto r = model_.forward_mre(tape, *ex, cfg_.sw.mi);
            int row = model_.class_row(ex->relation);
            ces.push_back(tape.cross_entropy(r.logits, {row}));
            part_v.push_back(tape.value(r.logits_v));
            part_t.push_back(tape.value(r.logits_t));
            labels.push_back(row);
            if (distill) live.per_example.push_back(std::move(r.attn));
        } else {
            auto r = model_.forward_mner(tape, *ex, cfg_.sw.mi);
            std::vector<int> targets(enc_.seq_len, 0);
            for (size_t i = 0; i < ex->tags.size(); ++i) targets[i + 1] = ex->tags[i];
            ces.push_back(tape.cross_entropy(r.logits, targets, &r.token_mask));
            const Tensor& lv = tape.value(r.logits_v);
            const Tensor& lt = tape.value(r.logits_t);
            for (size_t i = 0; i < ex->tags.size(); ++i) {
                part_v.push_back(logits_row(lv, static_cast<int>(i) + 1));
                part_t.push_back(logits_row(lt, static_cast<int>(i) + 1));
                labels.push_back(ex->tags[i]);
            }
            if (distill) live.per_example.push_back(std::move(r.attn));
        }
    }

    Val ce = ces[0];
    for (size_t i = 1; i < ces.size(); ++i) ce = tape.add(ce, ces[i]);
    ce = tape.scale(ce, 1.0 / static_cast<double>(ces.size()));

    auto [s_v, s_t] = contribution_scores(part_v, part_t, labels);
    double gamma = ratio(accumulate(s_v, s_t));
    abs_dev_sum += std::abs(gamma - 1.0);
    ++batch_count;

    std::map<Modality, double> scales;
    double g_applied = 1.0;
    if (cfg_.sw.gm) {
        scales = modulated_scales(mod_, gamma, k);
        if (!scales.empty()) g_applied = scales.begin()->second;
    }
    record_coefficient(mod_, batch_coefficient(mod_, gamma));
    trace_.push_back({k, phase, epoch, batch_idx, gamma, g_applied});

    std::optional<Val> ad;
    if (distill) {
        Tape frozen_tape;
        LiveAttention old_live;
        old_live.n_layers = enc_.interact_layers;
        old_live.n_heads = enc_.heads;
        for (const Example* ex : batch) {
            if (frozen->head_kind() == TaskKind::Mre) {
                auto r = frozen->forward_mre(frozen_tape, *ex, cfg_.sw.mi);
                old_live.per_example.push_back(std::move(r.attn));
            } else {
                auto r = frozen->forward_mner(frozen_tape, *ex, cfg_.sw.mi);
                old_live.per_example.push_back(std::move(r.attn));
            }
        }
        AttentionSnapshot old_snap = old_live.detach(frozen_tape);
        ad = attention_distill_loss(tape, old_snap, live, cfg_.post_softmax_distill);
    }

    Val loss = ad ? total_loss(tape, ce, ad, cfg_.lambda) : ce;
    tape.backward(loss);
    auto params = model_.parameters();
    sgd_step(params, cfg_.lr, scales);
}

TaskSummary Trainer::train_task(const TaskStream& stream, int k) {
    if (k != next_task_)
        throw StateError("train_task: expected task " + std::to_string(next_task_) + ", got " +
                         std::to_string(k));
    if (k < 1 || k > static_cast<int>(stream.tasks.size()))
        throw StateError("train_task: task " + std::to_string(k) + " not in the stream");
    const Snapshot& snap = stream.tasks[k - 1];

    // the frozen reference is the exact end-of-previous-task model,
    // captured before the head grows
    std::optional<DualStreamModel> frozen;
    if (k > 1 && cfg_.sw.ad) frozen.emplace(model_.freeze_copy());

    std::vector<int> fresh;
    for (int c : snap.classes) {
        bool known = false;
        for (int have : model_.class_ids()) known |= have == c;
        if (!known) fresh.push_back(c);
    }
    model_.expand_head(fresh);

    double abs_dev_sum = 0.0;
    int batch_count = 0;

    std::vector<const Example*> pool;
    pool.reserve(snap.train.size());
    for (const Example& ex : snap.train) pool.push_back(&ex);

    for (int epoch = 0; epoch < cfg_.epochs_c; ++epoch) {
        auto order = make_rng(mix64(cfg_.seed, "order.current", static_cast<uint64_t>(k),
                                    static_cast<uint64_t>(epoch)));
        std::shuffle(pool.begin(), pool.end(), order);
        int bidx = 0;
        for (size_t i = 0; i < pool.size(); i += cfg_.batch_size) {
            size_t end = std::min(pool.size(), i + cfg_.batch_size);
            std::vector<const Example*> batch(pool.begin() + i, pool.begin() + end);
            train_batch(batch, k, frozen ? &*frozen : nullptr, "current", epoch, bidx++,
                        abs_dev_sum, batch_count);
        }
    }

    if (cfg_.sw.mm && cfg_.budget_per_class > 0) {
        auto sel_rng = make_rng(mix64(cfg_.seed, "select", static_cast<uint64_t>(k)));
        update(bank_, select(snap.train, cfg_.budget_per_class, sel_rng));
        for (int epoch = 0; epoch < cfg_.epochs_m && !bank_.empty(); ++epoch) {
            auto rng = make_rng(mix64(cfg_.seed, "replay", static_cast<uint64_t>(k),
                                      static_cast<uint64_t>(epoch)));
            int bidx = 0;
            for (const auto& owned : replay_batches(bank_, cfg_.batch_size, rng)) {
                std::vector<const Example*> batch;
                batch.reserve(owned.size());
                for (const Example& ex : owned) batch.push_back(&ex);
                train_batch(batch, k, nullptr, "memory", epoch, bidx++, abs_dev_sum, batch_count);
            }
        }
    }

    if (k == 1 && enc_.freeze_shared_keys_after_task1)
        for (Parameter* p : model_.shared_key_parameters()) p->trainable = false;

    TaskSummary summary;
    summary.task = k;
    summary.mean_abs_gamma_dev = batch_count ? abs_dev_sum / batch_count : 0.0;
    summary.G = mod_.g_history.empty() ? 1.0 : finish_task(mod_);
    next_task_ = k + 1;
    return summary;
}

TrainerCheckpoint Trainer::checkpoint() const {
    TrainerCheckpoint c = snapshot_model(model_);
    c.config_hash = trainer_config_hash(enc_, cfg_);
    c.completed_task = next_task_ - 1;
    c.bank = bank_;
    c.modulation = mod_;
    c.scores = matrix_.cells();
    c.A = A_;
    c.trace = trace_;
    return c;
}

RunResult Trainer::run_lifelong(const TaskStream& stream, const TaskCallback& on_task) {
    stream.validate();
    int K = static_cast<int>(stream.tasks.size());
    std::vector<TaskSummary> summaries;
    for (int k = next_task_; k <= K; ++k) {
        auto t0 = std::chrono::steady_clock::now();
        TaskSummary s = train_task(stream, k);

        for (int i = 1; i <= k; ++i) {
            std::vector<const Example*> q;
            for (const Example& ex : stream.tasks[i - 1].test) q.push_back(&ex);
            matrix_.set(k, i, evaluate(model_, q, stream.kind, cfg_.sw.mi));
        }
        A_.push_back(forgetting_metric(model_, stream, k, cfg_.sw.mi));

        s.A = A_.back();
        s.U = matrix_.at(k, k);
        s.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        summaries.push_back(s);
        if (on_task) on_task(k, checkpoint());
    }

    RunResult res;
    res.matrix = matrix_;
    res.report.A = A_;
    for (int k = 1; k <= matrix_.tasks(); ++k) res.report.U.push_back(matrix_.at(k, k));
    res.tasks = std::move(summaries);
    res.trace = trace_;
    res.config_hash = trainer_config_hash(enc_, cfg_);
    return res;
}

std::vector<AblationRow> ablate(const TaskStream& stream, const EncoderConfig& enc,
                                const TrainerConfig& base) {
    std::vector<AblationRow> rows;
    auto run_one = [&](const std::string& name, const TrainerConfig& cfg) {
        Trainer trainer(enc, cfg, stream.kind);
        RunResult res = trainer.run_lifelong(stream);
        rows.push_back({name, res.report.A.back(), res.report.U.back()});
    };

    run_one("full", base);
    TrainerConfig c = base;
    c.sw.mi = false;
    run_one("wo_mi", c);
    c = base;
    c.sw.ad = false;
    run_one("wo_ad", c);
    c = base;
    c.sw.gm = false;
    run_one("wo_gm", c);
    c = base;
    c.sw.mm = false;
    c.budget_per_class = 0;
    run_one("wo_mm", c);
    return rows;
}

}  // namespace lmc
