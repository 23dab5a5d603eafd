#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lmc/error.hpp"

namespace lmc {

// Dense row-major tensor of 64-bit floats. Rank 0 is not used; scalars are
// shape {1}, vectors {n}, matrices {r, c}.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s);
    Tensor(std::vector<int> s, std::vector<double> d);

    static Tensor scalar(double v);
    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
    static Tensor vec(std::vector<double> d);
    static Tensor matrix(int r, int c, std::vector<double> d);

    long long numel() const { return static_cast<long long>(data.size()); }
    int ndim() const { return static_cast<int>(shape.size()); }
    bool is_scalar() const { return numel() == 1; }

    // Logical 2-D view: scalars are 1x1, vectors 1xn.
    int rows() const { return ndim() == 2 ? shape[0] : 1; }
    int cols() const;

    double& at(int r, int c) { return data[static_cast<size_t>(r) * cols() + c]; }
    double at(int r, int c) const { return data[static_cast<size_t>(r) * cols() + c]; }
    double item() const;

    bool all_finite() const;
    std::string shape_str() const;
};

bool same_shape(const Tensor& a, const Tensor& b);

enum class Modality { Visual, Textual, Shared, Head };

const char* modality_name(Modality m);

// A trainable tensor with an accumulated gradient. The modality tag routes
// per-modality gradient scaling and never changes after construction.
struct Parameter {
    Tensor value;
    Tensor grad;
    Modality tag;
    std::string name;
    bool trainable = true;

    Parameter(Tensor v, Modality t, std::string n)
        : value(std::move(v)), grad(Tensor::zeros(value.shape)), tag(t), name(std::move(n)) {}

    void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), 0.0); }
};

// Handle into a Tape.
struct Val {
    int id = -1;
    bool valid() const { return id >= 0; }
};

// Records one forward pass and replays local adjoint rules in reverse order.
// Rebuilt for every forward pass; never shared across threads.
class Tape {
  public:
    Val leaf(Parameter& p);
    Val constant(Tensor t);

    Val matmul(Val a, Val b);
    // a * b^T, so attention logits need no explicit transpose node.
    Val matmul_nt(Val a, Val b);

    // Elementwise; shapes must match exactly or one operand must be scalar.
    Val add(Val a, Val b);
    Val sub(Val a, Val b);
    Val mul(Val a, Val b);

    Val scale(Val a, double c);
    Val add_const(Val a, double c);
    Val relu(Val a);
    Val tanh(Val a);

    // Slices along `axis` sum to 1; axis 1 normalizes each row.
    Val softmax(Val a, int axis);

    // Mean over unmasked rows of -log softmax(logits)[target].
    Val cross_entropy(Val logits, const std::vector<int>& targets,
                      const std::vector<uint8_t>* row_mask = nullptr);

    // Per-row normalization with learnable gain/bias of width cols(x).
    Val layer_norm(Val x, Val gain, Val bias, double eps = 1e-5);

    Val gather_rows(Val table, const std::vector<int>& ids);
    Val repeat_rows(Val row, int n);
    Val slice_rows(Val a, int start, int len);
    Val slice_cols(Val a, int start, int len);
    Val concat_rows(std::span<const Val> parts);
    Val concat_cols(std::span<const Val> parts);

    // Sum over the row (query) axis; yields a 1 x cols vector.
    Val sum_rows(Val a);
    Val sum_all(Val a);
    Val l2_norm(Val a);

    const Tensor& value(Val v) const { return nodes_[check(v)].value; }

    // Accumulates d loss / d param into every reachable Parameter's grad.
    void backward(Val loss);

    size_t size() const { return nodes_.size(); }
    void clear();
    void reserve(size_t n) { nodes_.reserve(n); }

    // True if any recorded node reads the given parameter.
    bool touches(const Parameter& p) const;

  private:
    enum class Op {
        Leaf, Const, MatMul, MatMulNT, Add, Sub, Mul, Scale, AddConst,
        Relu, Tanh, Softmax, CrossEntropy, LayerNorm, GatherRows, RepeatRows,
        SliceRows, SliceCols, ConcatRows, ConcatCols, SumRows, SumAll, L2Norm,
    };

    struct Node {
        Op op;
        int a = -1, b = -1, c2 = -1;
        Tensor value;
        Parameter* param = nullptr;
        double cval = 0.0;
        int i0 = 0, i1 = 0;
        std::vector<int> idx;
        std::vector<uint8_t> mask;
        std::vector<int> multi;
        Tensor aux;               // op-specific saved forward state
        std::vector<double> aux2; // per-row stats (layer norm inv-std)
    };

    int push(Node n);
    int check(Val v) const;
    Tensor& grad_of(int i);
    void add_into(Tensor& dst, const Tensor& src);

    std::vector<Node> nodes_;
    std::vector<Tensor> grads_;
};

// value <- value - lr * scale(tag) * grad for every trainable parameter,
// then grads are zeroed. Scales default to 1 and must lie in (0, 1].
void sgd_step(std::span<Parameter* const> params, double lr,
              const std::map<Modality, double>& scale_by_tag = {});

}  // namespace lmc
