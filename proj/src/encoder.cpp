#include "lmc/encoder.hpp"

#include <cmath>
#include <string>

#include "lmc/rng.hpp"

namespace lmc {

namespace {

Tensor init_uniform(std::vector<int> shape, double limit, std::mt19937_64& rng) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> u(-limit, limit);
    for (double& v : t.data) v = u(rng);
    return t;
}

Tensor ones(std::vector<int> shape) {
    Tensor t(std::move(shape));
    std::fill(t.data.begin(), t.data.end(), 1.0);
    return t;
}

}  // namespace

void EncoderConfig::validate() const {
    if (layers < 1 || heads < 1 || width < 1) throw ConfigError("encoder: layers/heads/width must be positive");
    if (width % heads != 0) throw ConfigError("encoder: width must be divisible by heads");
    if (interact_layers < 0 || interact_layers > layers)
        throw ConfigError("encoder: interact_layers must lie in [0, layers]");
    if (seq_len < 2) throw ConfigError("encoder: seq_len must be at least 2 (slot 0 is CLS)");
    if (vocab_size < 1 || patch_dim < 1) throw ConfigError("encoder: vocab_size/patch_dim must be positive");
}

AttentionSnapshot LiveAttention::detach(const Tape& tape) const {
    AttentionSnapshot snap;
    snap.n_layers = n_layers;
    snap.n_heads = n_heads;
    snap.per_example.reserve(per_example.size());
    for (const auto& ex : per_example) {
        std::vector<Tensor> maps;
        maps.reserve(ex.size());
        for (Val v : ex) maps.push_back(tape.value(v));
        snap.per_example.push_back(std::move(maps));
    }
    return snap;
}

DualStreamModel::StreamParams DualStreamModel::make_stream(Stream s, std::mt19937_64& rng) const {
    int d = cfg_.width;
    int hidden = 2 * d;
    Modality tag = s == Stream::Visual ? Modality::Visual : Modality::Textual;
    std::string p = s == Stream::Visual ? "v." : "t.";
    double wlim = std::sqrt(1.0 / d);

    Tensor embed = s == Stream::Visual
                       ? init_uniform({d, cfg_.patch_dim}, std::sqrt(1.0 / cfg_.patch_dim), rng)
                       : init_uniform({cfg_.vocab_size, d}, 0.1, rng);

    StreamParams sp{
        Parameter(std::move(embed), tag, p + "embed"),
        Parameter(init_uniform({1, d}, 0.01, rng), tag, p + "proj_b"),
        Parameter(init_uniform({1, d}, 0.1, rng), tag, p + "cls"),
        Parameter(init_uniform({cfg_.seq_len, d}, 0.1, rng), tag, p + "pos"),
        {},
        Parameter(ones({1, d}), tag, p + "fin_g"),
        Parameter(Tensor({1, d}), tag, p + "fin_b"),
    };
    for (int l = 0; l < cfg_.layers; ++l) {
        std::string bp = p + "b" + std::to_string(l) + ".";
        sp.blocks.push_back(Block{
            Parameter(ones({1, d}), tag, bp + "ln1_g"),
            Parameter(Tensor({1, d}), tag, bp + "ln1_b"),
            Parameter(init_uniform({d, d}, wlim, rng), tag, bp + "wq"),
            Parameter(Tensor({1, d}), tag, bp + "bq"),
            Parameter(init_uniform({d, d}, wlim, rng), tag, bp + "wk"),
            Parameter(Tensor({1, d}), tag, bp + "bk"),
            Parameter(init_uniform({d, d}, wlim, rng), tag, bp + "wv"),
            Parameter(Tensor({1, d}), tag, bp + "bv"),
            Parameter(init_uniform({d, d}, wlim, rng), tag, bp + "wo"),
            Parameter(Tensor({1, d}), tag, bp + "bo"),
            Parameter(ones({1, d}), tag, bp + "ln2_g"),
            Parameter(Tensor({1, d}), tag, bp + "ln2_b"),
            Parameter(init_uniform({hidden, d}, wlim, rng), tag, bp + "w1"),
            Parameter(Tensor({1, hidden}), tag, bp + "b1"),
            Parameter(init_uniform({d, hidden}, std::sqrt(1.0 / hidden), rng), tag, bp + "w2"),
            Parameter(Tensor({1, d}), tag, bp + "b2"),
        });
    }
    return sp;
}

DualStreamModel::DualStreamModel(EncoderConfig cfg, TaskKind head_kind, uint64_t seed)
    : cfg_(cfg),
      head_kind_(head_kind),
      seed_(seed),
      visual_((cfg.validate(), [&] {
          std::mt19937_64 rng(mix64(seed, "init.visual"));
          return make_stream(Stream::Visual, rng);
      }())),
      textual_([&] {
          std::mt19937_64 rng(mix64(seed, "init.textual"));
          return make_stream(Stream::Textual, rng);
      }()),
      head_(Tensor({head_kind == TaskKind::Mner ? 1 : 0, 2 * cfg.width}), Modality::Head, "head") {
    int dh = cfg_.head_dim();
    std::mt19937_64 rng(mix64(seed, "init.interact"));
    double klim = std::sqrt(1.0 / dh);
    for (int l = 0; l < cfg_.interact_layers; ++l)
        for (int h = 0; h < cfg_.heads; ++h)
            shared_keys_.emplace_back(init_uniform({cfg_.seq_len, dh}, klim, rng), Modality::Shared,
                                      "ks." + std::to_string(l) + "." + std::to_string(h));
    for (int s = 0; s < 2; ++s)
        for (int l = 0; l < cfg_.interact_layers; ++l)
            for (int h = 0; h < cfg_.heads; ++h)
                attn_bias_.emplace_back(Tensor({cfg_.seq_len, cfg_.seq_len}),
                                        s == 0 ? Modality::Visual : Modality::Textual,
                                        std::string(s == 0 ? "bias.v." : "bias.t.") +
                                            std::to_string(l) + "." + std::to_string(h));
    if (head_kind_ == TaskKind::Mner) {
        // O row exists from the start
        std::mt19937_64 hr(mix64(seed_, "head", 0));
        head_.value = init_uniform({1, 2 * cfg_.width}, 1.0 / std::sqrt(2.0 * cfg_.width), hr);
        head_.grad = Tensor(head_.value.shape);
    }
}

DualStreamModel DualStreamModel::freeze_copy() const {
    DualStreamModel copy(*this);
    copy.frozen_ = true;
    for (Parameter* p : copy.parameters()) p->trainable = false;
    return copy;
}

int DualStreamModel::class_row(int class_id) const {
    for (size_t i = 0; i < class_ids_.size(); ++i)
        if (class_ids_[i] == class_id) return static_cast<int>(i);
    throw StateError("class id " + std::to_string(class_id) + " not in head");
}

void DualStreamModel::expand_head(const std::vector<int>& new_class_ids) {
    if (new_class_ids.empty()) return;
    for (int id : new_class_ids)
        for (int old : class_ids_)
            if (id == old) throw StateError("expand_head: class id " + std::to_string(id) + " already present");

    int cols = 2 * cfg_.width;
    int old_rows = head_.value.rows();
    int add_rows = head_kind_ == TaskKind::Mre ? static_cast<int>(new_class_ids.size())
                                               : 2 * static_cast<int>(new_class_ids.size());
    std::mt19937_64 rng(mix64(seed_, "head", static_cast<uint64_t>(old_rows)));
    Tensor grown({old_rows + add_rows, cols});
    std::copy(head_.value.data.begin(), head_.value.data.end(), grown.data.begin());
    Tensor fresh = init_uniform({add_rows, cols}, 1.0 / std::sqrt(2.0 * cfg_.width), rng);
    std::copy(fresh.data.begin(), fresh.data.end(), grown.data.begin() + head_.value.data.size());
    head_.value = std::move(grown);
    head_.grad = Tensor(head_.value.shape);
    class_ids_.insert(class_ids_.end(), new_class_ids.begin(), new_class_ids.end());
}

Val DualStreamModel::embed_input(Tape& tape, Stream s, const Example& ex) {
    int m = cfg_.seq_len, d = cfg_.width;
    StreamParams& sp = s == Stream::Visual ? visual_ : textual_;
    std::vector<Val> rows;
    rows.push_back(tape.leaf(sp.cls));

    int len;
    if (s == Stream::Textual) {
        len = static_cast<int>(ex.tokens.size());
        if (len > m - 1)
            throw InputError("token sequence of length " + std::to_string(len) +
                             " exceeds padded length " + std::to_string(m));
        for (int tok : ex.tokens)
            if (tok < 0 || tok >= cfg_.vocab_size)
                throw InputError("token id " + std::to_string(tok) + " outside vocabulary");
        if (len > 0) rows.push_back(tape.gather_rows(tape.leaf(sp.embed), ex.tokens));
    } else {
        len = static_cast<int>(ex.patches.size());
        if (len > m - 1)
            throw InputError("patch sequence of length " + std::to_string(len) +
                             " exceeds padded length " + std::to_string(m));
        if (len > 0) {
            Tensor P({len, cfg_.patch_dim});
            for (int i = 0; i < len; ++i) {
                if (static_cast<int>(ex.patches[i].size()) != cfg_.patch_dim)
                    throw InputError("patch " + std::to_string(i) + " has width " +
                                     std::to_string(ex.patches[i].size()) + ", expected " +
                                     std::to_string(cfg_.patch_dim));
                std::copy(ex.patches[i].begin(), ex.patches[i].end(),
                          P.data.begin() + static_cast<size_t>(i) * cfg_.patch_dim);
            }
            Val proj = tape.add(tape.matmul_nt(tape.constant(std::move(P)), tape.leaf(sp.embed)),
                                tape.repeat_rows(tape.leaf(sp.proj_b), len));
            rows.push_back(proj);
        }
    }
    if (1 + len < m) rows.push_back(tape.constant(Tensor({m - 1 - len, d})));
    Val x = tape.concat_rows(rows);
    return tape.add(x, tape.leaf(sp.pos));
}

DualStreamModel::StreamResult DualStreamModel::encode(Tape& tape, Stream stream, const Example& ex,
                                                      bool mi_enabled) {
    int m = cfg_.seq_len, d = cfg_.width, H = cfg_.heads, dh = cfg_.head_dim();
    double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    StreamParams& sp = stream == Stream::Visual ? visual_ : textual_;
    int first_interact = cfg_.layers - cfg_.interact_layers;

    Val x = embed_input(tape, stream, ex);
    StreamResult out;
    for (int l = 0; l < cfg_.layers; ++l) {
        Block& blk = sp.blocks[l];
        bool interact = l >= first_interact;
        int il = l - first_interact;

        Val a_in = tape.layer_norm(x, tape.leaf(blk.ln1_g), tape.leaf(blk.ln1_b));
        Val Q = tape.add(tape.matmul_nt(a_in, tape.leaf(blk.wq)), tape.repeat_rows(tape.leaf(blk.bq), m));
        Val V = tape.add(tape.matmul_nt(a_in, tape.leaf(blk.wv)), tape.repeat_rows(tape.leaf(blk.bv), m));
        bool use_shared = interact && mi_enabled;
        Val K;
        if (!use_shared)
            K = tape.add(tape.matmul_nt(a_in, tape.leaf(blk.wk)), tape.repeat_rows(tape.leaf(blk.bk), m));

        std::vector<Val> zs;
        for (int h = 0; h < H; ++h) {
            Val Qh = tape.slice_cols(Q, h * dh, dh);
            Val Kh = use_shared ? tape.leaf(shared_keys_[il * H + h]) : tape.slice_cols(K, h * dh, dh);
            Val raw = tape.matmul_nt(Qh, Kh);
            if (use_shared) {
                int bidx = (static_cast<int>(stream) == 0 ? 0 : 1) * cfg_.interact_layers * H + il * H + h;
                raw = tape.add(raw, tape.leaf(attn_bias_[bidx]));
            }
            Val A = tape.scale(raw, inv_scale);  // prescaled attention map
            if (interact) out.attn.push_back(A);
            Val P = tape.softmax(A, 1);
            zs.push_back(tape.matmul(P, tape.slice_cols(V, h * dh, dh)));
        }
        Val Z = H == 1 ? zs[0] : tape.concat_cols(zs);
        Val attn_out = tape.add(tape.matmul_nt(Z, tape.leaf(blk.wo)), tape.repeat_rows(tape.leaf(blk.bo), m));
        x = tape.add(x, attn_out);

        Val f_in = tape.layer_norm(x, tape.leaf(blk.ln2_g), tape.leaf(blk.ln2_b));
        Val h1 = tape.relu(tape.add(tape.matmul_nt(f_in, tape.leaf(blk.w1)),
                                    tape.repeat_rows(tape.leaf(blk.b1), m)));
        Val ff = tape.add(tape.matmul_nt(h1, tape.leaf(blk.w2)), tape.repeat_rows(tape.leaf(blk.b2), m));
        x = tape.add(x, ff);
    }
    out.hidden = tape.layer_norm(x, tape.leaf(sp.fin_g), tape.leaf(sp.fin_b));
    (void)d;
    return out;
}

DualStreamModel::MreResult DualStreamModel::forward_mre(Tape& tape, const Example& ex, bool mi_enabled) {
    if (head_kind_ != TaskKind::Mre) throw StateError("forward_mre on a model with an MNER head");
    if (head_rows() == 0) throw StateError("forward_mre: head has no classes; call expand_head first");
    int d = cfg_.width;

    StreamResult vis = encode(tape, Stream::Visual, ex, mi_enabled);
    StreamResult txt = encode(tape, Stream::Textual, ex, mi_enabled);

    Val h_v_cls = tape.slice_rows(vis.hidden, 0, 1);
    Val h_t_cls = tape.slice_rows(txt.hidden, 0, 1);
    Val W = tape.leaf(head_);
    Val Wt = tape.slice_cols(W, 0, d);
    Val Wv = tape.slice_cols(W, d, d);

    MreResult r;
    r.logits_t = tape.matmul_nt(h_t_cls, Wt);
    r.logits_v = tape.matmul_nt(h_v_cls, Wv);
    r.logits = tape.add(r.logits_t, r.logits_v);
    r.attn = std::move(vis.attn);
    r.attn.insert(r.attn.end(), txt.attn.begin(), txt.attn.end());
    return r;
}

DualStreamModel::MnerResult DualStreamModel::forward_mner(Tape& tape, const Example& ex, bool mi_enabled) {
    if (head_kind_ != TaskKind::Mner) throw StateError("forward_mner on a model with an MRE head");
    int m = cfg_.seq_len;

    StreamResult vis = encode(tape, Stream::Visual, ex, mi_enabled);
    StreamResult txt = encode(tape, Stream::Textual, ex, mi_enabled);

    Val h_v_cls = tape.slice_rows(vis.hidden, 0, 1);
    // token i is scored from [h_i^t ; h^v_cls + E_pos_i^t]
    Val vis_part = tape.add(tape.repeat_rows(h_v_cls, m), tape.leaf(textual_.pos));

    int d = cfg_.width;
    Val W = tape.leaf(head_);
    MnerResult r;
    r.logits_t = tape.matmul_nt(txt.hidden, tape.slice_cols(W, 0, d));
    r.logits_v = tape.matmul_nt(vis_part, tape.slice_cols(W, d, d));
    r.logits = tape.add(r.logits_t, r.logits_v);
    r.token_mask.assign(m, 0);
    for (size_t i = 0; i < ex.tokens.size(); ++i) r.token_mask[i + 1] = 1;
    r.attn = std::move(vis.attn);
    r.attn.insert(r.attn.end(), txt.attn.begin(), txt.attn.end());
    return r;
}

void DualStreamModel::collect(std::vector<Parameter*>& out) {
    for (StreamParams* sp : {&visual_, &textual_}) {
        out.push_back(&sp->embed);
        out.push_back(&sp->proj_b);
        out.push_back(&sp->cls);
        out.push_back(&sp->pos);
        for (Block& b : sp->blocks)
            for (Parameter* p : {&b.ln1_g, &b.ln1_b, &b.wq, &b.bq, &b.wk, &b.bk, &b.wv, &b.bv,
                                 &b.wo, &b.bo, &b.ln2_g, &b.ln2_b, &b.w1, &b.b1, &b.w2, &b.b2})
                out.push_back(p);
        out.push_back(&sp->fin_g);
        out.push_back(&sp->fin_b);
    }
    for (Parameter& p : shared_keys_) out.push_back(&p);
    for (Parameter& p : attn_bias_) out.push_back(&p);
    out.push_back(&head_);
}

std::vector<Parameter*> DualStreamModel::parameters() {
    std::vector<Parameter*> out;
    collect(out);
    return out;
}

std::vector<const Parameter*> DualStreamModel::parameters() const {
    std::vector<Parameter*> out;
    const_cast<DualStreamModel*>(this)->collect(out);
    return {out.begin(), out.end()};
}

std::vector<Parameter*> DualStreamModel::shared_key_parameters() {
    std::vector<Parameter*> out;
    for (Parameter& p : shared_keys_) out.push_back(&p);
    return out;
}

}  // namespace lmc
