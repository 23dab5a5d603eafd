#include "lmc/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace lmc {

namespace {

long long shape_numel(const std::vector<int>& s) {
    long long n = 1;
    for (int d : s) {
        if (d < 0) throw DimError("negative dimension in shape");
        n *= d;
    }
    return n;
}

}  // namespace

Tensor::Tensor(std::vector<int> s) : shape(std::move(s)), data(shape_numel(shape), 0.0) {}

Tensor::Tensor(std::vector<int> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (shape_numel(shape) != static_cast<long long>(data.size()))
        throw DimError("shape " + shape_str() + " does not match data length " +
                       std::to_string(data.size()));
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

Tensor Tensor::vec(std::vector<double> d) {
    int n = static_cast<int>(d.size());
    return Tensor({n}, std::move(d));
}

Tensor Tensor::matrix(int r, int c, std::vector<double> d) { return Tensor({r, c}, std::move(d)); }

int Tensor::cols() const {
    if (ndim() == 2) return shape[1];
    if (ndim() == 1) return shape[0];
    return 1;
}

double Tensor::item() const {
    if (!is_scalar()) throw DimError("item() on non-scalar tensor " + shape_str());
    return data[0];
}

bool Tensor::all_finite() const {
    for (double v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << '(';
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ')';
    return os.str();
}

bool same_shape(const Tensor& a, const Tensor& b) { return a.shape == b.shape; }

const char* modality_name(Modality m) {
    switch (m) {
        case Modality::Visual: return "visual";
        case Modality::Textual: return "textual";
        case Modality::Shared: return "shared";
        case Modality::Head: return "head";
    }
    return "?";
}

int Tape::push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

int Tape::check(Val v) const {
    if (v.id < 0 || v.id >= static_cast<int>(nodes_.size()))
        throw StateError("tape handle does not belong to this tape");
    return v.id;
}

void Tape::clear() {
    nodes_.clear();
    grads_.clear();
}

bool Tape::touches(const Parameter& p) const {
    for (const Node& n : nodes_)
        if (n.param == &p) return true;
    return false;
}

Val Tape::leaf(Parameter& p) {
    Node n;
    n.op = Op::Leaf;
    n.value = p.value;
    n.param = &p;
    return {push(std::move(n))};
}

Val Tape::constant(Tensor t) {
    Node n;
    n.op = Op::Const;
    n.value = std::move(t);
    return {push(std::move(n))};
}

Val Tape::matmul(Val a, Val b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (A.cols() != B.rows())
        throw DimError("matmul inner dimensions disagree: " + A.shape_str() + " x " + B.shape_str());
    int m = A.rows(), k = A.cols(), p = B.cols();
    Node n;
    n.op = Op::MatMul;
    n.a = check(a);
    n.b = check(b);
    n.value = Tensor({m, p});
    for (int i = 0; i < m; ++i) {
        const double* arow = &A.data[static_cast<size_t>(i) * k];
        double* crow = &n.value.data[static_cast<size_t>(i) * p];
        for (int t = 0; t < k; ++t) {
            double av = arow[t];
            if (av == 0.0) continue;
            const double* brow = &B.data[static_cast<size_t>(t) * p];
            for (int j = 0; j < p; ++j) crow[j] += av * brow[j];
        }
    }
    return {push(std::move(n))};
}

Val Tape::matmul_nt(Val a, Val b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (A.cols() != B.cols())
        throw DimError("matmul_nt inner dimensions disagree: " + A.shape_str() + " x " +
                       B.shape_str() + "^T");
    int m = A.rows(), k = A.cols(), p = B.rows();
    Node n;
    n.op = Op::MatMulNT;
    n.a = check(a);
    n.b = check(b);
    n.value = Tensor({m, p});
    for (int i = 0; i < m; ++i) {
        const double* arow = &A.data[static_cast<size_t>(i) * k];
        double* crow = &n.value.data[static_cast<size_t>(i) * p];
        for (int j = 0; j < p; ++j) {
            const double* brow = &B.data[static_cast<size_t>(j) * k];
            double s = 0.0;
            for (int t = 0; t < k; ++t) s += arow[t] * brow[t];
            crow[j] = s;
        }
    }
    return {push(std::move(n))};
}

namespace {

void require_elementwise(const Tensor& A, const Tensor& B, const char* opname) {
    if (!same_shape(A, B) && !A.is_scalar() && !B.is_scalar())
        throw DimError(std::string(opname) + ": incompatible shapes " + A.shape_str() + " and " +
                       B.shape_str());
}

}  // namespace

Val Tape::add(Val a, Val b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    require_elementwise(A, B, "add");
    Node n;
    n.op = Op::Add;
    n.a = check(a);
    n.b = check(b);
    n.value = A.is_scalar() && !B.is_scalar() ? Tensor(B.shape) : Tensor(A.shape);
    for (size_t i = 0; i < n.value.data.size(); ++i)
        n.value.data[i] = A.data[A.is_scalar() ? 0 : i] + B.data[B.is_scalar() ? 0 : i];
    return {push(std::move(n))};
}

Val Tape::sub(Val a, Val b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    require_elementwise(A, B, "sub");
    Node n;
    n.op = Op::Sub;
    n.a = check(a);
    n.b = check(b);
    n.value = A.is_scalar() && !B.is_scalar() ? Tensor(B.shape) : Tensor(A.shape);
    for (size_t i = 0; i < n.value.data.size(); ++i)
        n.value.data[i] = A.data[A.is_scalar() ? 0 : i] - B.data[B.is_scalar() ? 0 : i];
    return {push(std::move(n))};
}

Val Tape::mul(Val a, Val b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    require_elementwise(A, B, "mul");
    Node n;
    n.op = Op::Mul;
    n.a = check(a);
    n.b = check(b);
    n.value = A.is_scalar() && !B.is_scalar() ? Tensor(B.shape) : Tensor(A.shape);
    for (size_t i = 0; i < n.value.data.size(); ++i)
        n.value.data[i] = A.data[A.is_scalar() ? 0 : i] * B.data[B.is_scalar() ? 0 : i];
    return {push(std::move(n))};
}

Val Tape::scale(Val a, double c) {
    Node n;
    n.op = Op::Scale;
    n.a = check(a);
    n.cval = c;
    n.value = value(a);
    for (double& v : n.value.data) v *= c;
    return {push(std::move(n))};
}

Val Tape::add_const(Val a, double c) {
    Node n;
    n.op = Op::AddConst;
    n.a = check(a);
    n.cval = c;
    n.value = value(a);
    for (double& v : n.value.data) v += c;
    return {push(std::move(n))};
}

Val Tape::relu(Val a) {
    Node n;
    n.op = Op::Relu;
    n.a = check(a);
    n.value = value(a);
    for (double& v : n.value.data) v = v > 0.0 ? v : 0.0;
    return {push(std::move(n))};
}

Val Tape::tanh(Val a) {
    Node n;
    n.op = Op::Tanh;
    n.a = check(a);
    n.value = value(a);
    for (double& v : n.value.data) v = std::tanh(v);
    return {push(std::move(n))};
}

Val Tape::softmax(Val a, int axis) {
    const Tensor& A = value(a);
    if (axis < 0 || axis >= std::max(1, A.ndim()))
        throw DimError("softmax axis " + std::to_string(axis) + " invalid for " + A.shape_str());
    Node n;
    n.op = Op::Softmax;
    n.a = check(a);
    n.i0 = axis;
    n.value = A;
    int r = A.rows(), c = A.cols();
    bool rowwise = (A.ndim() <= 1) || axis == 1;
    int slices = rowwise ? r : c;
    int len = rowwise ? c : r;
    for (int s = 0; s < slices; ++s) {
        auto elem = [&](int t) -> double& {
            return rowwise ? n.value.data[static_cast<size_t>(s) * c + t]
                           : n.value.data[static_cast<size_t>(t) * c + s];
        };
        double mx = elem(0);
        for (int t = 1; t < len; ++t) mx = std::max(mx, elem(t));
        double sum = 0.0;
        for (int t = 0; t < len; ++t) {
            elem(t) = std::exp(elem(t) - mx);
            sum += elem(t);
        }
        for (int t = 0; t < len; ++t) elem(t) /= sum;
    }
    return {push(std::move(n))};
}

Val Tape::cross_entropy(Val logits, const std::vector<int>& targets,
                        const std::vector<uint8_t>* row_mask) {
    const Tensor& L = value(logits);
    int r = L.rows(), c = L.cols();
    if (static_cast<int>(targets.size()) != r)
        throw InputError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(r) + " rows");
    if (row_mask && static_cast<int>(row_mask->size()) != r)
        throw InputError("cross_entropy: mask length mismatch");
    for (int i = 0; i < r; ++i) {
        if (row_mask && !(*row_mask)[i]) continue;
        if (targets[i] < 0 || targets[i] >= c)
            throw LabelError("cross_entropy: target " + std::to_string(targets[i]) + " at row " +
                             std::to_string(i) + " out of range [0," + std::to_string(c) + ")");
    }
    Node n;
    n.op = Op::CrossEntropy;
    n.a = check(logits);
    n.idx = targets;
    if (row_mask) n.mask = *row_mask;
    // aux holds row-wise softmax probabilities
    n.aux = Tensor({r, c});
    double total = 0.0;
    int used = 0;
    for (int i = 0; i < r; ++i) {
        const double* row = &L.data[static_cast<size_t>(i) * c];
        double* prow = &n.aux.data[static_cast<size_t>(i) * c];
        double mx = row[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int j = 0; j < c; ++j) {
            prow[j] = std::exp(row[j] - mx);
            sum += prow[j];
        }
        for (int j = 0; j < c; ++j) prow[j] /= sum;
        if (!row_mask || (*row_mask)[i]) {
            total += -std::log(std::max(prow[targets[i]], 1e-300));
            ++used;
        }
    }
    if (used == 0) throw InputError("cross_entropy: all rows masked out");
    n.i0 = used;
    n.value = Tensor::scalar(total / used);
    return {push(std::move(n))};
}

Val Tape::layer_norm(Val x, Val gain, Val bias, double eps) {
    const Tensor& X = value(x);
    const Tensor& G = value(gain);
    const Tensor& B = value(bias);
    int r = X.rows(), c = X.cols();
    if (G.numel() != c || B.numel() != c)
        throw DimError("layer_norm: gain/bias width must equal " + std::to_string(c));
    Node n;
    n.op = Op::LayerNorm;
    n.a = check(x);
    n.b = check(gain);
    n.c2 = check(bias);
    n.cval = eps;
    n.value = Tensor({r, c});
    n.aux = Tensor({r, c});  // normalized input
    n.aux2.resize(r);        // inverse std per row
    for (int i = 0; i < r; ++i) {
        const double* xr = &X.data[static_cast<size_t>(i) * c];
        double mu = 0.0;
        for (int j = 0; j < c; ++j) mu += xr[j];
        mu /= c;
        double var = 0.0;
        for (int j = 0; j < c; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= c;
        double inv = 1.0 / std::sqrt(var + eps);
        n.aux2[i] = inv;
        for (int j = 0; j < c; ++j) {
            double xh = (xr[j] - mu) * inv;
            n.aux.data[static_cast<size_t>(i) * c + j] = xh;
            n.value.data[static_cast<size_t>(i) * c + j] = xh * G.data[j] + B.data[j];
        }
    }
    return {push(std::move(n))};
}

Val Tape::gather_rows(Val table, const std::vector<int>& ids) {
    const Tensor& T = value(table);
    int c = T.cols();
    Node n;
    n.op = Op::GatherRows;
    n.a = check(table);
    n.idx = ids;
    n.value = Tensor({static_cast<int>(ids.size()), c});
    for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= T.rows())
            throw InputError("gather_rows: id " + std::to_string(ids[i]) + " out of range");
        std::copy_n(&T.data[static_cast<size_t>(ids[i]) * c], c, &n.value.data[i * c]);
    }
    return {push(std::move(n))};
}

Val Tape::repeat_rows(Val row, int count) {
    const Tensor& R = value(row);
    if (R.rows() != 1) throw DimError("repeat_rows: input must be a single row, got " + R.shape_str());
    int c = R.cols();
    Node n;
    n.op = Op::RepeatRows;
    n.a = check(row);
    n.value = Tensor({count, c});
    for (int i = 0; i < count; ++i) std::copy_n(R.data.data(), c, &n.value.data[static_cast<size_t>(i) * c]);
    return {push(std::move(n))};
}

Val Tape::slice_rows(Val a, int start, int len) {
    const Tensor& A = value(a);
    if (start < 0 || len < 0 || start + len > A.rows())
        throw DimError("slice_rows: [" + std::to_string(start) + "," + std::to_string(start + len) +
                       ") out of " + A.shape_str());
    int c = A.cols();
    Node n;
    n.op = Op::SliceRows;
    n.a = check(a);
    n.i0 = start;
    n.i1 = len;
    n.value = Tensor({len, c});
    std::copy_n(&A.data[static_cast<size_t>(start) * c], static_cast<size_t>(len) * c, n.value.data.data());
    return {push(std::move(n))};
}

Val Tape::slice_cols(Val a, int start, int len) {
    const Tensor& A = value(a);
    if (start < 0 || len < 0 || start + len > A.cols())
        throw DimError("slice_cols: [" + std::to_string(start) + "," + std::to_string(start + len) +
                       ") out of " + A.shape_str());
    int r = A.rows(), c = A.cols();
    Node n;
    n.op = Op::SliceCols;
    n.a = check(a);
    n.i0 = start;
    n.i1 = len;
    n.value = Tensor({r, len});
    for (int i = 0; i < r; ++i)
        std::copy_n(&A.data[static_cast<size_t>(i) * c + start], len,
                    &n.value.data[static_cast<size_t>(i) * len]);
    return {push(std::move(n))};
}

Val Tape::concat_rows(std::span<const Val> parts) {
    if (parts.empty()) throw InputError("concat_rows: no parts");
    int c = value(parts[0]).cols();
    int r = 0;
    Node n;
    n.op = Op::ConcatRows;
    for (Val p : parts) {
        const Tensor& T = value(p);
        if (T.cols() != c) throw DimError("concat_rows: column mismatch");
        r += T.rows();
        n.multi.push_back(check(p));
    }
    n.value = Tensor({r, c});
    size_t off = 0;
    for (Val p : parts) {
        const Tensor& T = value(p);
        std::copy(T.data.begin(), T.data.end(), n.value.data.begin() + off);
        off += T.data.size();
    }
    return {push(std::move(n))};
}

Val Tape::concat_cols(std::span<const Val> parts) {
    if (parts.empty()) throw InputError("concat_cols: no parts");
    int r = value(parts[0]).rows();
    int c = 0;
    Node n;
    n.op = Op::ConcatCols;
    for (Val p : parts) {
        const Tensor& T = value(p);
        if (T.rows() != r) throw DimError("concat_cols: row mismatch");
        c += T.cols();
        n.multi.push_back(check(p));
    }
    n.value = Tensor({r, c});
    int off = 0;
    for (Val p : parts) {
        const Tensor& T = value(p);
        int pc = T.cols();
        for (int i = 0; i < r; ++i)
            std::copy_n(&T.data[static_cast<size_t>(i) * pc], pc,
                        &n.value.data[static_cast<size_t>(i) * c + off]);
        off += pc;
    }
    return {push(std::move(n))};
}

Val Tape::sum_rows(Val a) {
    const Tensor& A = value(a);
    int r = A.rows(), c = A.cols();
    Node n;
    n.op = Op::SumRows;
    n.a = check(a);
    n.value = Tensor({1, c});
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) n.value.data[j] += A.data[static_cast<size_t>(i) * c + j];
    return {push(std::move(n))};
}

Val Tape::sum_all(Val a) {
    const Tensor& A = value(a);
    double s = 0.0;
    for (double v : A.data) s += v;
    Node n;
    n.op = Op::SumAll;
    n.a = check(a);
    n.value = Tensor::scalar(s);
    return {push(std::move(n))};
}

Val Tape::l2_norm(Val a) {
    const Tensor& A = value(a);
    double s = 0.0;
    for (double v : A.data) s += v * v;
    Node n;
    n.op = Op::L2Norm;
    n.a = check(a);
    n.value = Tensor::scalar(std::sqrt(s));
    return {push(std::move(n))};
}

Tensor& Tape::grad_of(int i) {
    if (grads_[i].data.empty()) grads_[i] = Tensor(nodes_[i].value.shape);
    return grads_[i];
}

void Tape::add_into(Tensor& dst, const Tensor& src) {
    for (size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += src.data[i];
}

void Tape::backward(Val loss) {
    int root = check(loss);
    if (!nodes_[root].value.is_scalar())
        throw StateError("backward requires a scalar loss, got shape " +
                         nodes_[root].value.shape_str());
    grads_.assign(nodes_.size(), Tensor{});
    grad_of(root).data[0] = 1.0;

    for (int i = root; i >= 0; --i) {
        if (grads_[i].data.empty()) continue;
        const Node& n = nodes_[i];
        const Tensor& g = grads_[i];
        switch (n.op) {
            case Op::Leaf:
                add_into(n.param->grad, g);
                break;
            case Op::Const:
                break;
            case Op::MatMul: {
                const Tensor& A = nodes_[n.a].value;
                const Tensor& B = nodes_[n.b].value;
                int m = A.rows(), k = A.cols(), p = B.cols();
                Tensor& da = grad_of(n.a);
                Tensor& db = grad_of(n.b);
                for (int r = 0; r < m; ++r) {
                    const double* grow = &g.data[static_cast<size_t>(r) * p];
                    double* darow = &da.data[static_cast<size_t>(r) * k];
                    for (int t = 0; t < k; ++t) {
                        const double* brow = &B.data[static_cast<size_t>(t) * p];
                        double s = 0.0;
                        for (int j = 0; j < p; ++j) s += grow[j] * brow[j];
                        darow[t] += s;
                    }
                    const double* arow = &A.data[static_cast<size_t>(r) * k];
                    for (int t = 0; t < k; ++t) {
                        double av = arow[t];
                        if (av == 0.0) continue;
                        double* dbrow = &db.data[static_cast<size_t>(t) * p];
                        for (int j = 0; j < p; ++j) dbrow[j] += av * grow[j];
                    }
                }
                break;
            }
            case Op::MatMulNT: {
                const Tensor& A = nodes_[n.a].value;
                const Tensor& B = nodes_[n.b].value;
                int m = A.rows(), k = A.cols(), p = B.rows();
                Tensor& da = grad_of(n.a);
                Tensor& db = grad_of(n.b);
                for (int r = 0; r < m; ++r) {
                    const double* grow = &g.data[static_cast<size_t>(r) * p];
                    double* darow = &da.data[static_cast<size_t>(r) * k];
                    const double* arow = &A.data[static_cast<size_t>(r) * k];
                    for (int j = 0; j < p; ++j) {
                        double gv = grow[j];
                        if (gv == 0.0) continue;
                        const double* brow = &B.data[static_cast<size_t>(j) * k];
                        double* dbrow = &db.data[static_cast<size_t>(j) * k];
                        for (int t = 0; t < k; ++t) {
                            darow[t] += gv * brow[t];
                            dbrow[t] += gv * arow[t];
                        }
                    }
                }
                break;
            }
            case Op::Add:
            case Op::Sub: {
                double sign = n.op == Op::Sub ? -1.0 : 1.0;
                Tensor& da = grad_of(n.a);
                Tensor& db = grad_of(n.b);
                bool as = nodes_[n.a].value.is_scalar() && !n.value.is_scalar();
                bool bs = nodes_[n.b].value.is_scalar() && !n.value.is_scalar();
                for (size_t t = 0; t < g.data.size(); ++t) {
                    da.data[as ? 0 : t] += g.data[t];
                    db.data[bs ? 0 : t] += sign * g.data[t];
                }
                break;
            }
            case Op::Mul: {
                const Tensor& A = nodes_[n.a].value;
                const Tensor& B = nodes_[n.b].value;
                Tensor& da = grad_of(n.a);
                Tensor& db = grad_of(n.b);
                bool as = A.is_scalar() && !n.value.is_scalar();
                bool bs = B.is_scalar() && !n.value.is_scalar();
                for (size_t t = 0; t < g.data.size(); ++t) {
                    da.data[as ? 0 : t] += g.data[t] * B.data[bs ? 0 : t];
                    db.data[bs ? 0 : t] += g.data[t] * A.data[as ? 0 : t];
                }
                break;
            }
            case Op::Scale: {
                Tensor& da = grad_of(n.a);
                for (size_t t = 0; t < g.data.size(); ++t) da.data[t] += n.cval * g.data[t];
                break;
            }
            case Op::AddConst: {
                add_into(grad_of(n.a), g);
                break;
            }
            case Op::Relu: {
                const Tensor& A = nodes_[n.a].value;
                Tensor& da = grad_of(n.a);
                for (size_t t = 0; t < g.data.size(); ++t)
                    if (A.data[t] > 0.0) da.data[t] += g.data[t];
                break;
            }
            case Op::Tanh: {
                Tensor& da = grad_of(n.a);
                for (size_t t = 0; t < g.data.size(); ++t)
                    da.data[t] += g.data[t] * (1.0 - n.value.data[t] * n.value.data[t]);
                break;
            }
            case Op::Softmax: {
                const Tensor& Y = n.value;
                Tensor& da = grad_of(n.a);
                int r = Y.rows(), c = Y.cols();
                bool rowwise = (Y.ndim() <= 1) || n.i0 == 1;
                int slices = rowwise ? r : c;
                int len = rowwise ? c : r;
                for (int s = 0; s < slices; ++s) {
                    auto y = [&](int t) {
                        return rowwise ? Y.data[static_cast<size_t>(s) * c + t]
                                       : Y.data[static_cast<size_t>(t) * c + s];
                    };
                    auto gy = [&](int t) {
                        return rowwise ? g.data[static_cast<size_t>(s) * c + t]
                                       : g.data[static_cast<size_t>(t) * c + s];
                    };
                    double dot = 0.0;
                    for (int t = 0; t < len; ++t) dot += gy(t) * y(t);
                    for (int t = 0; t < len; ++t) {
                        double v = y(t) * (gy(t) - dot);
                        if (rowwise)
                            da.data[static_cast<size_t>(s) * c + t] += v;
                        else
                            da.data[static_cast<size_t>(t) * c + s] += v;
                    }
                }
                break;
            }
            case Op::CrossEntropy: {
                double up = g.data[0] / n.i0;
                const Tensor& P = n.aux;
                Tensor& da = grad_of(n.a);
                int r = P.rows(), c = P.cols();
                for (int row = 0; row < r; ++row) {
                    if (!n.mask.empty() && !n.mask[row]) continue;
                    const double* prow = &P.data[static_cast<size_t>(row) * c];
                    double* drow = &da.data[static_cast<size_t>(row) * c];
                    for (int j = 0; j < c; ++j) drow[j] += up * prow[j];
                    drow[n.idx[row]] -= up;
                }
                break;
            }
            case Op::LayerNorm: {
                const Tensor& G = nodes_[n.b].value;
                const Tensor& XH = n.aux;
                Tensor& dx = grad_of(n.a);
                Tensor& dg = grad_of(n.b);
                Tensor& db = grad_of(n.c2);
                int r = XH.rows(), c = XH.cols();
                for (int row = 0; row < r; ++row) {
                    const double* xh = &XH.data[static_cast<size_t>(row) * c];
                    const double* gy = &g.data[static_cast<size_t>(row) * c];
                    double inv = n.aux2[row];
                    double qsum = 0.0, qxsum = 0.0;
                    for (int j = 0; j < c; ++j) {
                        double q = gy[j] * G.data[j];
                        qsum += q;
                        qxsum += q * xh[j];
                        dg.data[j] += gy[j] * xh[j];
                        db.data[j] += gy[j];
                    }
                    double* dxr = &dx.data[static_cast<size_t>(row) * c];
                    for (int j = 0; j < c; ++j) {
                        double q = gy[j] * G.data[j];
                        dxr[j] += inv * (q - qsum / c - xh[j] * qxsum / c);
                    }
                }
                break;
            }
            case Op::GatherRows: {
                Tensor& da = grad_of(n.a);
                int c = da.cols();
                for (size_t row = 0; row < n.idx.size(); ++row) {
                    double* drow = &da.data[static_cast<size_t>(n.idx[row]) * c];
                    const double* grow = &g.data[row * c];
                    for (int j = 0; j < c; ++j) drow[j] += grow[j];
                }
                break;
            }
            case Op::RepeatRows: {
                Tensor& da = grad_of(n.a);
                int r = n.value.rows(), c = n.value.cols();
                for (int row = 0; row < r; ++row)
                    for (int j = 0; j < c; ++j) da.data[j] += g.data[static_cast<size_t>(row) * c + j];
                break;
            }
            case Op::SliceRows: {
                Tensor& da = grad_of(n.a);
                int c = da.cols();
                for (int row = 0; row < n.i1; ++row)
                    for (int j = 0; j < c; ++j)
                        da.data[static_cast<size_t>(n.i0 + row) * c + j] +=
                            g.data[static_cast<size_t>(row) * c + j];
                break;
            }
            case Op::SliceCols: {
                Tensor& da = grad_of(n.a);
                int r = da.rows(), c = da.cols();
                for (int row = 0; row < r; ++row)
                    for (int j = 0; j < n.i1; ++j)
                        da.data[static_cast<size_t>(row) * c + n.i0 + j] +=
                            g.data[static_cast<size_t>(row) * n.i1 + j];
                break;
            }
            case Op::ConcatRows: {
                size_t off = 0;
                for (int part : n.multi) {
                    Tensor& dp = grad_of(part);
                    for (size_t t = 0; t < dp.data.size(); ++t) dp.data[t] += g.data[off + t];
                    off += dp.data.size();
                }
                break;
            }
            case Op::ConcatCols: {
                int c = n.value.cols(), r = n.value.rows();
                int off = 0;
                for (int part : n.multi) {
                    Tensor& dp = grad_of(part);
                    int pc = dp.cols();
                    for (int row = 0; row < r; ++row)
                        for (int j = 0; j < pc; ++j)
                            dp.data[static_cast<size_t>(row) * pc + j] +=
                                g.data[static_cast<size_t>(row) * c + off + j];
                    off += pc;
                }
                break;
            }
            case Op::SumRows: {
                Tensor& da = grad_of(n.a);
                int r = da.rows(), c = da.cols();
                for (int row = 0; row < r; ++row)
                    for (int j = 0; j < c; ++j) da.data[static_cast<size_t>(row) * c + j] += g.data[j];
                break;
            }
            case Op::SumAll: {
                Tensor& da = grad_of(n.a);
                for (double& v : da.data) v += g.data[0];
                break;
            }
            case Op::L2Norm: {
                const Tensor& A = nodes_[n.a].value;
                double norm = n.value.data[0];
                if (norm > 0.0) {
                    Tensor& da = grad_of(n.a);
                    for (size_t t = 0; t < A.data.size(); ++t)
                        da.data[t] += g.data[0] * A.data[t] / norm;
                }
                break;
            }
        }
    }
    grads_.clear();
}

void sgd_step(std::span<Parameter* const> params, double lr,
              const std::map<Modality, double>& scale_by_tag) {
    if (!(lr > 0.0)) throw ConfigError("sgd_step: learning rate must be positive");
    for (const auto& [tag, s] : scale_by_tag) {
        (void)tag;
        if (!(s > 0.0 && s <= 1.0))
            throw ConfigError("sgd_step: scale " + std::to_string(s) + " outside (0, 1]");
    }
    for (Parameter* p : params) {
        if (p->trainable) {
            double s = 1.0;
            if (auto it = scale_by_tag.find(p->tag); it != scale_by_tag.end()) s = it->second;
            double step = lr * s;
            for (size_t i = 0; i < p->value.data.size(); ++i) p->value.data[i] -= step * p->grad.data[i];
        }
        p->zero_grad();
    }
}

}  // namespace lmc
