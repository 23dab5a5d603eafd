#pragma once

#include <string>
#include <vector>

#include "lmc/encoder.hpp"
#include "lmc/taskstream.hpp"
#include "lmc/types.hpp"

namespace lmc {

struct Span {
    int start = 0;
    int end = 0;  // inclusive
    int type = 0;
    bool operator==(const Span&) const = default;
};

// BIO tags to typed spans. A dangling I opens a new span, so malformed
// predictions still decode; well-formed sequences round-trip exactly.
std::vector<Span> decode_bio(const std::vector<int>& tags);

// Micro F1 over non-N/A decisions: predicting N/A against a non-N/A gold is
// a miss, predicting non-N/A against an N/A gold a false alarm.
double micro_f1_mre(const std::vector<int>& pred, const std::vector<int>& gold);

// Micro F1 over exactly matched (start, end, type) spans.
double micro_f1_mner(const std::vector<std::vector<int>>& pred,
                     const std::vector<std::vector<int>>& gold);

// Per-token tag accuracy, diagnostic only.
double token_accuracy(const std::vector<std::vector<int>>& pred,
                      const std::vector<std::vector<int>>& gold);

// a[k][i] = test F1 on task i after finishing task k. Entries are write-once.
class ScoreMatrix {
  public:
    void set(int k, int i, double v);
    double at(int k, int i) const;
    bool has(int k, int i) const;
    int tasks() const { return static_cast<int>(rows_.size()); }

    std::string to_csv() const;

    struct Cell {
        int k, i;
        double v;
    };
    std::vector<Cell> cells() const;

  private:
    std::vector<std::vector<double>> rows_;
    std::vector<std::vector<uint8_t>> filled_;
};

struct MetricsReport {
    std::vector<double> A;  // pooled-union F1 after each task
    std::vector<double> U;  // diagonal of the score matrix
};

std::string report_json(const MetricsReport& report);

// U_k = a[k][k]
double plasticity_metric(const ScoreMatrix& m, int k);

// Greedy argmax predictions, no sampling.
int predict_mre(DualStreamModel& model, const Example& ex, bool mi_enabled = true);
std::vector<int> predict_mner(DualStreamModel& model, const Example& ex, bool mi_enabled = true);

// Micro F1 of the model on a set of examples.
double evaluate(DualStreamModel& model, const std::vector<const Example*>& examples,
                TaskKind kind, bool mi_enabled = true);

// A_k: micro F1 over the pooled union of the first k test splits, counted
// globally rather than averaged per task.
double forgetting_metric(DualStreamModel& model, const TaskStream& stream, int k,
                         bool mi_enabled = true);

}  // namespace lmc
