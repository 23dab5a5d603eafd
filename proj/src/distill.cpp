#include "lmc/distill.hpp"

#include <cmath>

namespace lmc {

namespace {

Tensor softmax_rows(const Tensor& x) {
    Tensor y = x;
    int r = x.rows(), c = x.cols();
    for (int i = 0; i < r; ++i) {
        double* row = &y.data[static_cast<size_t>(i) * c];
        double mx = row[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double sum = 0;
        for (int j = 0; j < c; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += row[j];
        }
        for (int j = 0; j < c; ++j) row[j] /= sum;
    }
    return y;
}

}  // namespace

Tensor pool_attention(const Tensor& map) {
    int r = map.rows(), c = map.cols();
    Tensor out({1, c});
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out.data[j] += map.at(i, j);
    return out;
}

Val pool_attention(Tape& tape, Val map) { return tape.sum_rows(map); }

double asym_delta(const Tensor& old_pooled, const Tensor& new_pooled) {
    if (old_pooled.numel() != new_pooled.numel())
        throw DimError("asym_delta: pooled lengths differ, " + old_pooled.shape_str() + " vs " +
                       new_pooled.shape_str());
    double s = 0;
    for (long long i = 0; i < old_pooled.numel(); ++i) {
        double d = old_pooled.data[i] - new_pooled.data[i];
        if (d > 0) s += d * d;
    }
    return std::sqrt(s);
}

Val asym_delta(Tape& tape, const Tensor& old_pooled, Val new_pooled) {
    if (old_pooled.numel() != tape.value(new_pooled).numel())
        throw DimError("asym_delta: pooled lengths differ");
    return tape.l2_norm(tape.relu(tape.sub(tape.constant(old_pooled), new_pooled)));
}

Val attention_distill_loss(Tape& tape, const AttentionSnapshot& old_snap,
                           const LiveAttention& new_attn, bool post_softmax) {
    if (old_snap.n_layers != new_attn.n_layers || old_snap.n_heads != new_attn.n_heads ||
        old_snap.per_example.size() != new_attn.per_example.size())
        throw StateError("attention_distill_loss: snapshot structure mismatch");
    if (old_snap.per_example.empty()) throw StateError("attention_distill_loss: empty batch");

    Val total = tape.constant(Tensor::scalar(0.0));
    for (size_t ex = 0; ex < old_snap.per_example.size(); ++ex) {
        const auto& old_maps = old_snap.per_example[ex];
        const auto& new_maps = new_attn.per_example[ex];
        if (old_maps.size() != new_maps.size())
            throw StateError("attention_distill_loss: map count mismatch at example " +
                             std::to_string(ex));
        for (size_t m = 0; m < old_maps.size(); ++m) {
            Tensor old_map = post_softmax ? softmax_rows(old_maps[m]) : old_maps[m];
            Val live = post_softmax ? tape.softmax(new_maps[m], 1) : new_maps[m];
            total = tape.add(total,
                             asym_delta(tape, pool_attention(old_map), pool_attention(tape, live)));
        }
    }
    return tape.scale(total, 1.0 / static_cast<double>(old_snap.per_example.size()));
}

Val total_loss(Tape& tape, Val ce, std::optional<Val> ad, double lambda) {
    if (lambda < 0.0) throw ConfigError("total_loss: lambda must be non-negative");
    if (!ad) return ce;
    return tape.add(tape.scale(*ad, lambda), ce);
}

}  // namespace lmc
