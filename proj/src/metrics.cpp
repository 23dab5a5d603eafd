#include "lmc/metrics.hpp"

#include <algorithm>
#include <map>
#include <sstream>

#include "json.hpp"

namespace lmc {

std::vector<Span> decode_bio(const std::vector<int>& tags) {
    std::vector<Span> spans;
    int cur_type = -1, cur_start = -1;
    auto close = [&](int end) {
        if (cur_type >= 0) spans.push_back({cur_start, end, cur_type});
        cur_type = -1;
    };
    for (int t = 0; t < static_cast<int>(tags.size()); ++t) {
        int tag = tags[t];
        if (tag <= 0) {
            close(t - 1);
            continue;
        }
        int type = (tag - 1) / 2;
        bool is_b = tag == b_tag(type);
        if (is_b || cur_type != type) {
            close(t - 1);
            cur_type = type;
            cur_start = t;
        }
    }
    close(static_cast<int>(tags.size()) - 1);
    return spans;
}

namespace {

struct Counts {
    long long tp = 0, fp = 0, fn = 0;

    double f1() const {
        long long denom = 2 * tp + fp + fn;
        return denom == 0 ? 0.0 : 2.0 * tp / static_cast<double>(denom);
    }
};

Counts count_mre(const std::vector<int>& pred, const std::vector<int>& gold) {
    if (pred.size() != gold.size()) throw InputError("micro_f1: prediction/gold length mismatch");
    Counts c;
    for (size_t i = 0; i < pred.size(); ++i) {
        if (gold[i] != kNaRelation && pred[i] == gold[i]) ++c.tp;
        if (pred[i] != kNaRelation && pred[i] != gold[i]) ++c.fp;
        if (gold[i] != kNaRelation && pred[i] != gold[i]) ++c.fn;
    }
    return c;
}

Counts count_mner(const std::vector<std::vector<int>>& pred,
                  const std::vector<std::vector<int>>& gold) {
    if (pred.size() != gold.size()) throw InputError("micro_f1: prediction/gold length mismatch");
    Counts c;
    for (size_t i = 0; i < pred.size(); ++i) {
        if (pred[i].size() != gold[i].size())
            throw InputError("micro_f1: tag length mismatch at example " + std::to_string(i));
        auto ps = decode_bio(pred[i]);
        auto gs = decode_bio(gold[i]);
        std::vector<bool> used(gs.size(), false);
        for (const Span& s : ps) {
            bool hit = false;
            for (size_t j = 0; j < gs.size(); ++j) {
                if (!used[j] && gs[j] == s) {
                    used[j] = true;
                    hit = true;
                    break;
                }
            }
            hit ? ++c.tp : ++c.fp;
        }
        for (bool u : used) c.fn += !u;
    }
    return c;
}

}  // namespace

double micro_f1_mre(const std::vector<int>& pred, const std::vector<int>& gold) {
    return count_mre(pred, gold).f1();
}

double micro_f1_mner(const std::vector<std::vector<int>>& pred,
                     const std::vector<std::vector<int>>& gold) {
    return count_mner(pred, gold).f1();
}

double token_accuracy(const std::vector<std::vector<int>>& pred,
                      const std::vector<std::vector<int>>& gold) {
    if (pred.size() != gold.size()) throw InputError("token_accuracy: length mismatch");
    long long hits = 0, total = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
        if (pred[i].size() != gold[i].size())
            throw InputError("token_accuracy: tag length mismatch at example " + std::to_string(i));
        for (size_t t = 0; t < pred[i].size(); ++t) {
            hits += pred[i][t] == gold[i][t];
            ++total;
        }
    }
    return total == 0 ? 0.0 : static_cast<double>(hits) / total;
}

void ScoreMatrix::set(int k, int i, double v) {
    if (k < 1 || i < 1 || i > k) throw StateError("score matrix: cell (" + std::to_string(k) +
                                                  ", " + std::to_string(i) + ") is not lower-triangular");
    if (v < 0.0 || v > 1.0) throw StateError("score matrix: value outside [0, 1]");
    if (static_cast<int>(rows_.size()) < k) {
        rows_.resize(k);
        filled_.resize(k);
        for (int r = 0; r < k; ++r) {
            rows_[r].resize(r + 1, 0.0);
            filled_[r].resize(r + 1, 0);
        }
    }
    if (filled_[k - 1][i - 1]) throw StateError("score matrix: cell (" + std::to_string(k) + ", " +
                                                std::to_string(i) + ") already written");
    rows_[k - 1][i - 1] = v;
    filled_[k - 1][i - 1] = 1;
}

double ScoreMatrix::at(int k, int i) const {
    if (!has(k, i))
        throw StateError("score matrix: cell (" + std::to_string(k) + ", " + std::to_string(i) +
                         ") missing");
    return rows_[k - 1][i - 1];
}

bool ScoreMatrix::has(int k, int i) const {
    return k >= 1 && i >= 1 && i <= k && k <= static_cast<int>(rows_.size()) &&
           filled_[k - 1][i - 1];
}

std::string ScoreMatrix::to_csv() const {
    std::ostringstream out;
    out << "task";
    for (int i = 1; i <= tasks(); ++i) out << ",q" << i;
    out << "\n";
    out.setf(std::ios::fixed);
    out.precision(6);
    for (int k = 1; k <= tasks(); ++k) {
        out << k;
        for (int i = 1; i <= tasks(); ++i) {
            out << ",";
            if (has(k, i)) out << at(k, i);
        }
        out << "\n";
    }
    return out.str();
}

std::vector<ScoreMatrix::Cell> ScoreMatrix::cells() const {
    std::vector<Cell> out;
    for (int k = 1; k <= tasks(); ++k)
        for (int i = 1; i <= k; ++i)
            if (has(k, i)) out.push_back({k, i, at(k, i)});
    return out;
}

std::string report_json(const MetricsReport& report) {
    nlohmann::json j;
    j["forgetting"] = report.A;
    j["plasticity"] = report.U;
    return j.dump(2) + "\n";
}

double plasticity_metric(const ScoreMatrix& m, int k) { return m.at(k, k); }

int predict_mre(DualStreamModel& model, const Example& ex, bool mi_enabled) {
    Tape tape;
    auto res = model.forward_mre(tape, ex, mi_enabled);
    const Tensor& logits = tape.value(res.logits);
    int best = 0;
    for (int j = 1; j < logits.cols(); ++j)
        if (logits.data[j] > logits.data[best]) best = j;
    return model.class_ids()[best];
}

std::vector<int> predict_mner(DualStreamModel& model, const Example& ex, bool mi_enabled) {
    Tape tape;
    auto res = model.forward_mner(tape, ex, mi_enabled);
    const Tensor& logits = tape.value(res.logits);
    std::vector<int> tags;
    tags.reserve(ex.tokens.size());
    for (int pos = 1; pos <= static_cast<int>(ex.tokens.size()); ++pos) {
        int best = 0;
        for (int j = 1; j < logits.cols(); ++j)
            if (logits.at(pos, j) > logits.at(pos, best)) best = j;
        tags.push_back(best);
    }
    return tags;
}

double evaluate(DualStreamModel& model, const std::vector<const Example*>& examples,
                TaskKind kind, bool mi_enabled) {
    if (kind == TaskKind::Mre) {
        std::vector<int> pred, gold;
        pred.reserve(examples.size());
        for (const Example* ex : examples) {
            pred.push_back(predict_mre(model, *ex, mi_enabled));
            gold.push_back(ex->relation);
        }
        return micro_f1_mre(pred, gold);
    }
    std::vector<std::vector<int>> pred, gold;
    pred.reserve(examples.size());
    for (const Example* ex : examples) {
        pred.push_back(predict_mner(model, *ex, mi_enabled));
        gold.push_back(ex->tags);
    }
    return micro_f1_mner(pred, gold);
}

double forgetting_metric(DualStreamModel& model, const TaskStream& stream, int k,
                         bool mi_enabled) {
    if (k < 1 || k > static_cast<int>(stream.tasks.size()))
        throw StateError("forgetting metric: task " + std::to_string(k) + " out of range");
    for (int c : stream.tasks[k - 1].classes) {
        try {
            model.class_row(c);
        } catch (const StateError&) {
            throw StateError("forgetting metric: model has not trained task " + std::to_string(k));
        }
    }
    std::vector<const Example*> pooled;
    for (int i = 0; i < k; ++i)
        for (const Example& ex : stream.tasks[i].test) pooled.push_back(&ex);
    return evaluate(model, pooled, stream.kind, mi_enabled);
}

}  // namespace lmc
