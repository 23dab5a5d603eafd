#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "lmc/tensor.hpp"
#include "lmc/types.hpp"

namespace lmc {

struct EncoderConfig {
    int layers = 4;
    int heads = 2;
    int width = 32;          // shared model width d
    int seq_len = 16;        // common padded length m, slot 0 is CLS
    int interact_layers = 3; // trailing layers that use the shared key
    int vocab_size = 64;
    int patch_dim = 8;
    bool freeze_shared_keys_after_task1 = false;

    int head_dim() const { return width / heads; }
    void validate() const;
};

enum class Stream { Visual = 0, Textual = 1 };

// Detached prescaled attention maps for one batch.
// Flat index: (stream * layers + layer) * heads + head, layers counting only
// the interaction positions (0 = lowest of the last n_interact layers).
struct AttentionSnapshot {
    int n_layers = 0;
    int n_heads = 0;
    std::vector<std::vector<Tensor>> per_example;

    int flat(Stream s, int layer, int head) const {
        return (static_cast<int>(s) * n_layers + layer) * n_heads + head;
    }
    bool same_structure(const AttentionSnapshot& o) const {
        return n_layers == o.n_layers && n_heads == o.n_heads &&
               per_example.size() == o.per_example.size();
    }
};

// Live counterpart of AttentionSnapshot; handles stay differentiable.
struct LiveAttention {
    int n_layers = 0;
    int n_heads = 0;
    std::vector<std::vector<Val>> per_example;

    AttentionSnapshot detach(const Tape& tape) const;
};

// Dual-stream transformer with a learnable shared external key replacing the
// self-keys of the last interact_layers layers, plus an expandable task head.
class DualStreamModel {
  public:
    DualStreamModel(EncoderConfig cfg, TaskKind head_kind, uint64_t seed);

    const EncoderConfig& config() const { return cfg_; }
    TaskKind head_kind() const { return head_kind_; }
    uint64_t seed() const { return seed_; }
    bool frozen() const { return frozen_; }

    // Deep copy with all parameters made non-trainable.
    DualStreamModel freeze_copy() const;

    // Appends head rows for unseen class ids; old rows are kept bitwise.
    void expand_head(const std::vector<int>& new_class_ids);
    const std::vector<int>& class_ids() const { return class_ids_; }
    int head_rows() const { return head_.value.rows(); }
    int num_classes() const { return static_cast<int>(class_ids_.size()); }
    int class_row(int class_id) const;

    struct StreamResult {
        Val hidden;              // m x d
        std::vector<Val> attn;   // [interaction layer][head], prescaled maps
    };
    StreamResult encode(Tape& tape, Stream stream, const Example& ex, bool mi_enabled);

    struct MreResult {
        Val logits;    // 1 x C
        Val logits_t;  // textual partial logits, 1 x C
        Val logits_v;  // visual partial logits, 1 x C
        std::vector<Val> attn;  // stream-major flat layout (visual first)
    };
    MreResult forward_mre(Tape& tape, const Example& ex, bool mi_enabled = true);

    struct MnerResult {
        Val logits;                      // m x tag-count
        Val logits_t;                    // textual partial logits, m x tag-count
        Val logits_v;                    // visual partial logits, m x tag-count
        std::vector<uint8_t> token_mask; // true on real token positions
        std::vector<Val> attn;
    };
    MnerResult forward_mner(Tape& tape, const Example& ex, bool mi_enabled = true);

    std::vector<Parameter*> parameters();
    std::vector<const Parameter*> parameters() const;
    std::vector<Parameter*> shared_key_parameters();

    Parameter& head() { return head_; }

  private:
    struct Block {
        Parameter ln1_g, ln1_b;
        Parameter wq, bq, wk, bk, wv, bv, wo, bo;
        Parameter ln2_g, ln2_b;
        Parameter w1, b1, w2, b2;
    };
    struct StreamParams {
        Parameter embed;    // token table or patch projection
        Parameter proj_b;   // patch projection bias (visual only; unused row for text)
        Parameter cls;
        Parameter pos;
        std::vector<Block> blocks;
        Parameter fin_g, fin_b;
    };

    StreamParams make_stream(Stream s, std::mt19937_64& rng) const;
    Val embed_input(Tape& tape, Stream s, const Example& ex);
    void collect(std::vector<Parameter*>& out);

    EncoderConfig cfg_;
    TaskKind head_kind_;
    uint64_t seed_;
    bool frozen_ = false;

    StreamParams visual_, textual_;
    std::vector<Parameter> shared_keys_;   // [interaction layer][head]
    std::vector<Parameter> attn_bias_;     // [stream][interaction layer][head]
    Parameter head_;
    std::vector<int> class_ids_;
};

}  // namespace lmc
