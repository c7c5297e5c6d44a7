#include "xtransct/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_set>

#include "xtransct/errors.hpp"

namespace xtransct {

std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ",";
        os << s[i];
    }
    os << "]";
    return os.str();
}

namespace detail {

void Node::ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

namespace {

void set_grad_enabled(bool v) { g_grad_enabled = v; }

std::shared_ptr<Node> make_node(Shape shape) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->values.assign(shape_numel(n->shape), 0.0);
    return n;
}

// Accumulate into a parent's grad buffer, skipping pure constants.
inline std::vector<double>* grad_sink(Node& parent) {
    if (!parent.grad_connected()) return nullptr;
    parent.ensure_grad();
    return &parent.grad;
}

bool any_connected(std::initializer_list<const Tensor*> inputs) {
    if (!grad_enabled()) return false;
    for (const Tensor* t : inputs)
        if (t->node()->grad_connected()) return true;
    return false;
}

void check_valid(const Tensor& t, const char* op) {
    if (!t.valid()) throw ContractError(std::string(op) + ": empty tensor");
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ContractError(std::string(op) + ": shape mismatch " +
                            shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace
}  // namespace detail

using detail::Node;

NoGradGuard::NoGradGuard() : prev_(detail::grad_enabled()) {
    detail::set_grad_enabled(false);
}
NoGradGuard::~NoGradGuard() { detail::set_grad_enabled(prev_); }

// ---- Tensor handle --------------------------------------------------------

Tensor Tensor::wrap(std::shared_ptr<Node> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
}

Tensor Tensor::zeros(Shape shape) { return wrap(detail::make_node(std::move(shape))); }

Tensor Tensor::full(Shape shape, double value) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.node_->values.begin(), t.node_->values.end(), value);
    return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
    if (values.size() != shape_numel(shape))
        throw ContractError("Tensor::from: " + std::to_string(values.size()) +
                            " values for shape " + shape_str(shape));
    Tensor t = zeros(std::move(shape));
    t.node_->values = std::move(values);
    return t;
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::size() const { return node_->values.size(); }
double* Tensor::data() { return node_->values.data(); }
const double* Tensor::data() const { return node_->values.data(); }
const std::vector<double>& Tensor::values() const { return node_->values; }

double Tensor::item() const {
    if (size() != 1)
        throw ContractError("item: tensor has shape " + shape_str(shape()));
    return node_->values[0];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
    node_->requires_grad = flag;
    return *this;
}

bool Tensor::has_grad() const { return node_->grad.size() == node_->values.size(); }

const std::vector<double>& Tensor::grad() const {
    if (!has_grad())
        throw ContractError("grad: no gradient present (run backward first)");
    return node_->grad;
}

void Tensor::zero_grad() { node_->grad.assign(node_->values.size(), 0.0); }

// ---- op helpers ------------------------------------------------------------

namespace {

Tensor finish(std::shared_ptr<Node> out,
              std::vector<std::shared_ptr<Node>> parents,
              std::function<void(Node&)> bwd, bool connected) {
    if (connected) {
        out->parents = std::move(parents);
        out->backward_fn = std::move(bwd);
    }
    return Tensor::wrap(std::move(out));
}

}  // namespace

// ---- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_valid(a, "add");
    detail::check_valid(b, "add");
    detail::check_same_shape(a, b, "add");
    auto out = detail::make_node(a.shape());
    const std::size_t n = out->size();
    const double* pa = a.data();
    const double* pb = b.data();
    for (std::size_t i = 0; i < n; ++i) out->values[i] = pa[i] + pb[i];
    auto na = a.node(), nb = b.node();
    return finish(
        out, {na, nb},
        [na, nb](Node& self) {
            if (auto* g = detail::grad_sink(*na))
                for (std::size_t i = 0; i < self.size(); ++i) (*g)[i] += self.grad[i];
            if (auto* g = detail::grad_sink(*nb))
                for (std::size_t i = 0; i < self.size(); ++i) (*g)[i] += self.grad[i];
        },
        detail::any_connected({&a, &b}));
}

Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_valid(a, "sub");
    detail::check_valid(b, "sub");
    detail::check_same_shape(a, b, "sub");
    auto out = detail::make_node(a.shape());
    const std::size_t n = out->size();
    for (std::size_t i = 0; i < n; ++i) out->values[i] = a.data()[i] - b.data()[i];
    auto na = a.node(), nb = b.node();
    return finish(
        out, {na, nb},
        [na, nb](Node& self) {
            if (auto* g = detail::grad_sink(*na))
                for (std::size_t i = 0; i < self.size(); ++i) (*g)[i] += self.grad[i];
            if (auto* g = detail::grad_sink(*nb))
                for (std::size_t i = 0; i < self.size(); ++i) (*g)[i] -= self.grad[i];
        },
        detail::any_connected({&a, &b}));
}

Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_valid(a, "mul");
    detail::check_valid(b, "mul");
    detail::check_same_shape(a, b, "mul");
    auto out = detail::make_node(a.shape());
    const std::size_t n = out->size();
    for (std::size_t i = 0; i < n; ++i) out->values[i] = a.data()[i] * b.data()[i];
    auto na = a.node(), nb = b.node();
    return finish(
        out, {na, nb},
        [na, nb](Node& self) {
            if (auto* g = detail::grad_sink(*na))
                for (std::size_t i = 0; i < self.size(); ++i)
                    (*g)[i] += self.grad[i] * nb->values[i];
            if (auto* g = detail::grad_sink(*nb))
                for (std::size_t i = 0; i < self.size(); ++i)
                    (*g)[i] += self.grad[i] * na->values[i];
        },
        detail::any_connected({&a, &b}));
}

Tensor scale(const Tensor& a, double c) {
    detail::check_valid(a, "scale");
    auto out = detail::make_node(a.shape());
    const std::size_t n = out->size();
    for (std::size_t i = 0; i < n; ++i) out->values[i] = a.data()[i] * c;
    auto na = a.node();
    return finish(
        out, {na},
        [na, c](Node& self) {
            if (auto* g = detail::grad_sink(*na))
                for (std::size_t i = 0; i < self.size(); ++i) (*g)[i] += self.grad[i] * c;
        },
        detail::any_connected({&a}));
}

Tensor add_scalar(const Tensor& a, double c) {
    detail::check_valid(a, "add_scalar");
    auto out = detail::make_node(a.shape());
    const std::size_t n = out->size();
    for (std::size_t i = 0; i < n; ++i) out->values[i] = a.data()[i] + c;
    auto na = a.node();
    return finish(
        out, {na},
        [na](Node& self) {
            if (auto* g = detail::grad_sink(*na))
                for (std::size_t i = 0; i < self.size(); ++i) (*g)[i] += self.grad[i];
        },
        detail::any_connected({&a}));
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
    detail::check_valid(x, "add_bias");
    detail::check_valid(bias, "add_bias");
    if (bias.rank() != 1 || x.rank() < 1 || x.shape().back() != bias.shape()[0])
        throw ContractError("add_bias: bias " + shape_str(bias.shape()) +
                            " does not match last axis of " + shape_str(x.shape()));
    const std::size_t lane = bias.size();
    const std::size_t rows = x.size() / lane;
    auto out = detail::make_node(x.shape());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < lane; ++j)
            out->values[r * lane + j] = x.data()[r * lane + j] + bias.data()[j];
    auto nx = x.node(), nb = bias.node();
    return finish(
        out, {nx, nb},
        [nx, nb, rows, lane](Node& self) {
            if (auto* g = detail::grad_sink(*nx))
                for (std::size_t i = 0; i < self.size(); ++i) (*g)[i] += self.grad[i];
            if (auto* g = detail::grad_sink(*nb))
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < lane; ++j)
                        (*g)[j] += self.grad[r * lane + j];
        },
        detail::any_connected({&x, &bias}));
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
    detail::check_valid(x, "add_channel_bias");
    detail::check_valid(bias, "add_channel_bias");
    if (x.rank() != 3 || bias.rank() != 1 || x.shape()[0] != bias.shape()[0])
        throw ContractError("add_channel_bias: input " + shape_str(x.shape()) +
                            " vs bias " + shape_str(bias.shape()));
    const std::size_t ch = x.shape()[0];
    const std::size_t plane = x.shape()[1] * x.shape()[2];
    auto out = detail::make_node(x.shape());
    for (std::size_t c = 0; c < ch; ++c) {
        const double b = bias.data()[c];
        for (std::size_t i = 0; i < plane; ++i)
            out->values[c * plane + i] = x.data()[c * plane + i] + b;
    }
    auto nx = x.node(), nb = bias.node();
    return finish(
        out, {nx, nb},
        [nx, nb, ch, plane](Node& self) {
            if (auto* g = detail::grad_sink(*nx))
                for (std::size_t i = 0; i < self.size(); ++i) (*g)[i] += self.grad[i];
            if (auto* g = detail::grad_sink(*nb))
                for (std::size_t c = 0; c < ch; ++c) {
                    double s = 0.0;
                    for (std::size_t i = 0; i < plane; ++i)
                        s += self.grad[c * plane + i];
                    (*g)[c] += s;
                }
        },
        detail::any_connected({&x, &bias}));
}

// ---- matmul ----------------------------------------------------------------

namespace {

// C[m,n] += A[m,k] * B[k,n], row-major. ikj order streams B rows and
// vectorizes the inner loop; rows are independent so the parallel loop is
// bit-deterministic regardless of thread count.
void gemm_acc(std::size_t m, std::size_t k, std::size_t n, const double* a,
              const double* b, double* c) {
    const std::ptrdiff_t mm = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static) if (m * n * k > 65536)
    for (std::ptrdiff_t i = 0; i < mm; ++i) {
        double* crow = c + static_cast<std::size_t>(i) * n;
        const double* arow = a + static_cast<std::size_t>(i) * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// dA[m,k] += dC[m,n] * B^T, i.e. dA[i,p] = sum_j dC[i,j]*B[p,j].
void gemm_acc_bt(std::size_t m, std::size_t k, std::size_t n, const double* dc,
                 const double* b, double* da) {
    const std::ptrdiff_t mm = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static) if (m * n * k > 65536)
    for (std::ptrdiff_t i = 0; i < mm; ++i) {
        const double* dcrow = dc + static_cast<std::size_t>(i) * n;
        double* darow = da + static_cast<std::size_t>(i) * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double* brow = b + p * n;
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) s += dcrow[j] * brow[j];
            darow[p] += s;
        }
    }
}

// dB[k,n] += A^T * dC, i.e. dB[p,j] = sum_i A[i,p]*dC[i,j].
void gemm_acc_at(std::size_t m, std::size_t k, std::size_t n, const double* a,
                 const double* dc, double* db) {
    const std::ptrdiff_t kk = static_cast<std::ptrdiff_t>(k);
#pragma omp parallel for schedule(static) if (m * n * k > 65536)
    for (std::ptrdiff_t p = 0; p < kk; ++p) {
        double* dbrow = db + static_cast<std::size_t>(p) * n;
        for (std::size_t i = 0; i < m; ++i) {
            const double av = a[i * k + static_cast<std::size_t>(p)];
            const double* dcrow = dc + i * n;
            for (std::size_t j = 0; j < n; ++j) dbrow[j] += av * dcrow[j];
        }
    }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::check_valid(a, "matmul");
    detail::check_valid(b, "matmul");
    if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0])
        throw ContractError("matmul: incompatible shapes " + shape_str(a.shape()) +
                            " x " + shape_str(b.shape()));
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    auto out = detail::make_node({m, n});
    gemm_acc(m, k, n, a.data(), b.data(), out->values.data());
    auto na = a.node(), nb = b.node();
    return finish(
        out, {na, nb},
        [na, nb, m, k, n](Node& self) {
            if (auto* g = detail::grad_sink(*na))
                gemm_acc_bt(m, k, n, self.grad.data(), nb->values.data(), g->data());
            if (auto* g = detail::grad_sink(*nb))
                gemm_acc_at(m, k, n, na->values.data(), self.grad.data(), g->data());
        },
        detail::any_connected({&a, &b}));
}

Tensor transpose(const Tensor& a) {
    detail::check_valid(a, "transpose");
    if (a.rank() != 2)
        throw ContractError("transpose: rank-2 required, got " + shape_str(a.shape()));
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    auto out = detail::make_node({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
            out->values[j * m + i] = a.data()[i * n + j];
    auto na = a.node();
    return finish(
        out, {na},
        [na, m, n](Node& self) {
            if (auto* g = detail::grad_sink(*na))
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j)
                        (*g)[i * n + j] += self.grad[j * m + i];
        },
        detail::any_connected({&a}));
}

Tensor reshape(const Tensor& a, Shape shape) {
    detail::check_valid(a, "reshape");
    if (shape_numel(shape) != a.size())
        throw ContractError("reshape: " + shape_str(a.shape()) + " -> " +
                            shape_str(shape) + " changes element count");
    auto out = detail::make_node(std::move(shape));
    out->values = a.values();
    auto na = a.node();
    return finish(
        out, {na},
        [na](Node& self) {
            if (auto* g = detail::grad_sink(*na))
                for (std::size_t i = 0; i < self.size(); ++i) (*g)[i] += self.grad[i];
        },
        detail::any_connected({&a}));
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
    detail::check_valid(a, "concat_rows");
    detail::check_valid(b, "concat_rows");
    if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1])
        throw ContractError("concat_rows: " + shape_str(a.shape()) + " vs " +
                            shape_str(b.shape()));
    const std::size_t n = a.shape()[1];
    const std::size_t ra = a.shape()[0], rb = b.shape()[0];
    auto out = detail::make_node({ra + rb, n});
    std::copy(a.data(), a.data() + ra * n, out->values.begin());
    std::copy(b.data(), b.data() + rb * n, out->values.begin() + ra * n);
    auto na = a.node(), nb = b.node();
    return finish(
        out, {na, nb},
        [na, nb, ra, rb, n](Node& self) {
            if (auto* g = detail::grad_sink(*na))
                for (std::size_t i = 0; i < ra * n; ++i) (*g)[i] += self.grad[i];
            if (auto* g = detail::grad_sink(*nb))
                for (std::size_t i = 0; i < rb * n; ++i) (*g)[i] += self.grad[ra * n + i];
        },
        detail::any_connected({&a, &b}));
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: no inputs");
    const std::size_t rows = parts[0].shape()[0];
    std::size_t total = 0;
    for (const Tensor& p : parts) {
        detail::check_valid(p, "concat_cols");
        if (p.rank() != 2 || p.shape()[0] != rows)
            throw ContractError("concat_cols: row mismatch at " + shape_str(p.shape()));
        total += p.shape()[1];
    }
    auto out = detail::make_node({rows, total});
    std::size_t col = 0;
    for (const Tensor& p : parts) {
        const std::size_t w = p.shape()[1];
        for (std::size_t r = 0; r < rows; ++r)
            std::copy(p.data() + r * w, p.data() + (r + 1) * w,
                      out->values.begin() + r * total + col);
        col += w;
    }
    std::vector<std::shared_ptr<Node>> parents;
    std::vector<std::size_t> widths;
    bool connected = false;
    for (const Tensor& p : parts) {
        parents.push_back(p.node());
        widths.push_back(p.shape()[1]);
        connected = connected || (detail::grad_enabled() && p.node()->grad_connected());
    }
    return finish(
        out, parents,
        [parents, widths, rows, total](Node& self) {
            std::size_t col = 0;
            for (std::size_t k = 0; k < parents.size(); ++k) {
                const std::size_t w = widths[k];
                if (auto* g = detail::grad_sink(*parents[k]))
                    for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t j = 0; j < w; ++j)
                            (*g)[r * w + j] += self.grad[r * total + col + j];
                col += w;
            }
        },
        connected);
}

Tensor slice_cols(const Tensor& x, std::size_t c0, std::size_t c1) {
    detail::check_valid(x, "slice_cols");
    if (x.rank() != 2 || c0 >= c1 || c1 > x.shape()[1])
        throw ContractError("slice_cols: range [" + std::to_string(c0) + "," +
                            std::to_string(c1) + ") on " + shape_str(x.shape()));
    const std::size_t rows = x.shape()[0], n = x.shape()[1], w = c1 - c0;
    auto out = detail::make_node({rows, w});
    for (std::size_t r = 0; r < rows; ++r)
        std::copy(x.data() + r * n + c0, x.data() + r * n + c1,
                  out->values.begin() + r * w);
    auto nx = x.node();
    return finish(
        out, {nx},
        [nx, rows, n, w, c0](Node& self) {
            if (auto* g = detail::grad_sink(*nx))
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < w; ++j)
                        (*g)[r * n + c0 + j] += self.grad[r * w + j];
        },
        detail::any_connected({&x}));
}

// ---- nonlinearities ----------------------------------------------------------

Tensor relu(const Tensor& x) {
    detail::check_valid(x, "relu");
    auto out = detail::make_node(x.shape());
    const std::size_t n = out->size();
    for (std::size_t i = 0; i < n; ++i)
        out->values[i] = x.data()[i] > 0.0 ? x.data()[i] : 0.0;
    auto nx = x.node();
    return finish(
        out, {nx},
        [nx](Node& self) {
            if (auto* g = detail::grad_sink(*nx))
                for (std::size_t i = 0; i < self.size(); ++i)
                    if (nx->values[i] > 0.0) (*g)[i] += self.grad[i];
        },
        detail::any_connected({&x}));
}

Tensor sigmoid(const Tensor& x) {
    detail::check_valid(x, "sigmoid");
    auto out = detail::make_node(x.shape());
    const std::size_t n = out->size();
    for (std::size_t i = 0; i < n; ++i) {
        const double v = x.data()[i];
        out->values[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                                  : std::exp(v) / (1.0 + std::exp(v));
    }
    auto nx = x.node();
    auto no = out;
    return finish(
        out, {nx},
        [nx, no](Node& self) {
            if (auto* g = detail::grad_sink(*nx))
                for (std::size_t i = 0; i < self.size(); ++i) {
                    const double y = no->values[i];
                    (*g)[i] += self.grad[i] * y * (1.0 - y);
                }
        },
        detail::any_connected({&x}));
}

Tensor softmax(const Tensor& x, std::size_t axis) {
    detail::check_valid(x, "softmax");
    if (axis >= x.rank())
        throw ContractError("softmax: axis " + std::to_string(axis) + " on " +
                            shape_str(x.shape()));
    const Shape& s = x.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t lane = s[axis];
    auto out = detail::make_node(x.shape());
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * lane * inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t l = 0; l < lane; ++l)
                mx = std::max(mx, x.data()[base + l * inner]);
            double z = 0.0;
            for (std::size_t l = 0; l < lane; ++l) {
                const double e = std::exp(x.data()[base + l * inner] - mx);
                out->values[base + l * inner] = e;
                z += e;
            }
            const double inv = 1.0 / z;
            for (std::size_t l = 0; l < lane; ++l) out->values[base + l * inner] *= inv;
        }
    auto nx = x.node();
    auto no = out;
    return finish(
        out, {nx},
        [nx, no, outer, inner, lane](Node& self) {
            auto* g = detail::grad_sink(*nx);
            if (!g) return;
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t in = 0; in < inner; ++in) {
                    const std::size_t base = o * lane * inner + in;
                    double dot = 0.0;
                    for (std::size_t l = 0; l < lane; ++l) {
                        const std::size_t idx = base + l * inner;
                        dot += self.grad[idx] * no->values[idx];
                    }
                    for (std::size_t l = 0; l < lane; ++l) {
                        const std::size_t idx = base + l * inner;
                        (*g)[idx] += (self.grad[idx] - dot) * no->values[idx];
                    }
                }
        },
        detail::any_connected({&x}));
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
    detail::check_valid(x, "layer_norm");
    detail::check_valid(gain, "layer_norm");
    detail::check_valid(bias, "layer_norm");
    const std::size_t lane = x.shape().back();
    if (gain.shape() != Shape{lane} || bias.shape() != Shape{lane})
        throw ContractError("layer_norm: gain/bias must be [" + std::to_string(lane) +
                            "], got " + shape_str(gain.shape()) + " and " +
                            shape_str(bias.shape()));
    const std::size_t rows = x.size() / lane;
    auto out = detail::make_node(x.shape());
    // Saved statistics for the backward pass.
    auto xhat = std::make_shared<std::vector<double>>(x.size());
    auto inv_sd = std::make_shared<std::vector<double>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = x.data() + r * lane;
        double mu = 0.0;
        for (std::size_t j = 0; j < lane; ++j) mu += row[j];
        mu /= static_cast<double>(lane);
        double var = 0.0;
        for (std::size_t j = 0; j < lane; ++j) {
            const double d = row[j] - mu;
            var += d * d;
        }
        var /= static_cast<double>(lane);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_sd)[r] = is;
        for (std::size_t j = 0; j < lane; ++j) {
            const double h = (row[j] - mu) * is;
            (*xhat)[r * lane + j] = h;
            out->values[r * lane + j] = gain.data()[j] * h + bias.data()[j];
        }
    }
    auto nx = x.node(), ng = gain.node(), nb = bias.node();
    return finish(
        out, {nx, ng, nb},
        [nx, ng, nb, xhat, inv_sd, rows, lane](Node& self) {
            auto* gx = detail::grad_sink(*nx);
            auto* gg = detail::grad_sink(*ng);
            auto* gb = detail::grad_sink(*nb);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* dy = self.grad.data() + r * lane;
                const double* h = xhat->data() + r * lane;
                if (gg || gb)
                    for (std::size_t j = 0; j < lane; ++j) {
                        if (gg) (*gg)[j] += dy[j] * h[j];
                        if (gb) (*gb)[j] += dy[j];
                    }
                if (gx) {
                    // dx = inv_sd * (dh - mean(dh) - xhat * mean(dh*xhat))
                    double m1 = 0.0, m2 = 0.0;
                    for (std::size_t j = 0; j < lane; ++j) {
                        const double dh = dy[j] * ng->values[j];
                        m1 += dh;
                        m2 += dh * h[j];
                    }
                    m1 /= static_cast<double>(lane);
                    m2 /= static_cast<double>(lane);
                    const double is = (*inv_sd)[r];
                    for (std::size_t j = 0; j < lane; ++j) {
                        const double dh = dy[j] * ng->values[j];
                        (*gx)[r * lane + j] += is * (dh - m1 - h[j] * m2);
                    }
                }
            }
        },
        detail::any_connected({&x, &gain, &bias}));
}

// ---- conv ------------------------------------------------------------------

Tensor conv2d(const Tensor& input, const Tensor& kernels, std::size_t stride,
              std::size_t padding) {
    detail::check_valid(input, "conv2d");
    detail::check_valid(kernels, "conv2d");
    if (input.rank() != 3 || kernels.rank() != 4)
        throw ContractError("conv2d: expected input [C,H,W] and kernels [K,C,kh,kw], got " +
                            shape_str(input.shape()) + " and " + shape_str(kernels.shape()));
    const std::size_t C = input.shape()[0], H = input.shape()[1], W = input.shape()[2];
    const std::size_t K = kernels.shape()[0], kh = kernels.shape()[2],
                      kw = kernels.shape()[3];
    if (kernels.shape()[1] != C)
        throw ContractError("conv2d: kernel channels " + shape_str(kernels.shape()) +
                            " do not match input " + shape_str(input.shape()));
    if (stride == 0) throw ConfigError("conv2d: stride must be positive");
    if (kh > H + 2 * padding || kw > W + 2 * padding)
        throw ContractError("conv2d: kernel larger than padded input");
    if ((H + 2 * padding - kh) % stride != 0 || (W + 2 * padding - kw) % stride != 0)
        throw ConfigError("conv2d: non-integral output extent for input " +
                          shape_str(input.shape()) + ", kernel " +
                          shape_str(kernels.shape()) + ", stride " +
                          std::to_string(stride) + ", padding " + std::to_string(padding));
    const std::size_t Ho = (H + 2 * padding - kh) / stride + 1;
    const std::size_t Wo = (W + 2 * padding - kw) / stride + 1;
    auto out = detail::make_node({K, Ho, Wo});

    const double* in = input.data();
    const double* w = kernels.data();
    double* o = out->values.data();
    const std::ptrdiff_t Kp = static_cast<std::ptrdiff_t>(K);
#pragma omp parallel for schedule(static) if (K * Ho * Wo * C * kh * kw > 65536)
    for (std::ptrdiff_t kk = 0; kk < Kp; ++kk) {
        const std::size_t kc = static_cast<std::size_t>(kk);
        for (std::size_t oy = 0; oy < Ho; ++oy)
            for (std::size_t ox = 0; ox < Wo; ++ox) {
                double acc = 0.0;
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t u = 0; u < kh; ++u) {
                        const std::ptrdiff_t iy =
                            static_cast<std::ptrdiff_t>(oy * stride + u) -
                            static_cast<std::ptrdiff_t>(padding);
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                        for (std::size_t v = 0; v < kw; ++v) {
                            const std::ptrdiff_t ix =
                                static_cast<std::ptrdiff_t>(ox * stride + v) -
                                static_cast<std::ptrdiff_t>(padding);
                            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                            acc += in[(c * H + static_cast<std::size_t>(iy)) * W +
                                      static_cast<std::size_t>(ix)] *
                                   w[((kc * C + c) * kh + u) * kw + v];
                        }
                    }
                o[(kc * Ho + oy) * Wo + ox] = acc;
            }
    }

    auto ni = input.node(), nk = kernels.node();
    return finish(
        out, {ni, nk},
        [ni, nk, C, H, W, K, kh, kw, Ho, Wo, stride, padding](Node& self) {
            auto* gi = detail::grad_sink(*ni);
            auto* gk = detail::grad_sink(*nk);
            if (!gi && !gk) return;
            const double* in = ni->values.data();
            const double* w = nk->values.data();
            for (std::size_t k = 0; k < K; ++k)
                for (std::size_t oy = 0; oy < Ho; ++oy)
                    for (std::size_t ox = 0; ox < Wo; ++ox) {
                        const double go = self.grad[(k * Ho + oy) * Wo + ox];
                        if (go == 0.0) continue;
                        for (std::size_t c = 0; c < C; ++c)
                            for (std::size_t u = 0; u < kh; ++u) {
                                const std::ptrdiff_t iy =
                                    static_cast<std::ptrdiff_t>(oy * stride + u) -
                                    static_cast<std::ptrdiff_t>(padding);
                                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H))
                                    continue;
                                for (std::size_t v = 0; v < kw; ++v) {
                                    const std::ptrdiff_t ix =
                                        static_cast<std::ptrdiff_t>(ox * stride + v) -
                                        static_cast<std::ptrdiff_t>(padding);
                                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W))
                                        continue;
                                    const std::size_t ii =
                                        (c * H + static_cast<std::size_t>(iy)) * W +
                                        static_cast<std::size_t>(ix);
                                    const std::size_t wi = ((k * C + c) * kh + u) * kw + v;
                                    if (gi) (*gi)[ii] += go * w[wi];
                                    if (gk) (*gk)[wi] += go * in[ii];
                                }
                            }
                    }
        },
        detail::any_connected({&input, &kernels}));
}

// ---- reductions --------------------------------------------------------------

Tensor sum(const Tensor& x) {
    detail::check_valid(x, "sum");
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += x.data()[i];
    auto out = detail::make_node({1});
    out->values[0] = s;
    auto nx = x.node();
    return finish(
        out, {nx},
        [nx](Node& self) {
            if (auto* g = detail::grad_sink(*nx)) {
                const double gs = self.grad[0];
                for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += gs;
            }
        },
        detail::any_connected({&x}));
}

Tensor mean(const Tensor& x) {
    detail::check_valid(x, "mean");
    const double inv = 1.0 / static_cast<double>(x.size());
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += x.data()[i];
    auto out = detail::make_node({1});
    out->values[0] = s * inv;
    auto nx = x.node();
    return finish(
        out, {nx},
        [nx, inv](Node& self) {
            if (auto* g = detail::grad_sink(*nx)) {
                const double gs = self.grad[0] * inv;
                for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += gs;
            }
        },
        detail::any_connected({&x}));
}

// ---- block assembly ------------------------------------------------------

std::size_t block_voxel_index(std::size_t query, std::size_t offset,
                              std::size_t q_grid, std::size_t block) {
    const std::size_t n = q_grid * block;
    const std::size_t qz = query / (q_grid * q_grid);
    const std::size_t qy = (query / q_grid) % q_grid;
    const std::size_t qx = query % q_grid;
    const std::size_t bz = offset / (block * block);
    const std::size_t by = (offset / block) % block;
    const std::size_t bx = offset % block;
    return ((qz * block + bz) * n + (qy * block + by)) * n + (qx * block + bx);
}

Tensor assemble_blocks(const Tensor& blocks, std::size_t q_grid, std::size_t block) {
    detail::check_valid(blocks, "assemble_blocks");
    const std::size_t q3 = q_grid * q_grid * q_grid;
    const std::size_t b3 = block * block * block;
    if (blocks.rank() != 2 || blocks.shape()[0] != q3 || blocks.shape()[1] != b3)
        throw ContractError("assemble_blocks: expected [" + std::to_string(q3) + "," +
                            std::to_string(b3) + "], got " + shape_str(blocks.shape()));
    const std::size_t n = q_grid * block;
    auto out = detail::make_node({n * n * n});
    for (std::size_t q = 0; q < q3; ++q)
        for (std::size_t o = 0; o < b3; ++o)
            out->values[block_voxel_index(q, o, q_grid, block)] =
                blocks.data()[q * b3 + o];
    auto nb = blocks.node();
    return finish(
        out, {nb},
        [nb, q3, b3, q_grid, block](Node& self) {
            if (auto* g = detail::grad_sink(*nb))
                for (std::size_t q = 0; q < q3; ++q)
                    for (std::size_t o = 0; o < b3; ++o)
                        (*g)[q * b3 + o] +=
                            self.grad[block_voxel_index(q, o, q_grid, block)];
        },
        detail::any_connected({&blocks}));
}

// ---- backward --------------------------------------------------------------

void backward(const Tensor& loss) {
    detail::check_valid(loss, "backward");
    if (loss.size() != 1)
        throw ContractError("backward: loss must be scalar, got " +
                            shape_str(loss.shape()));

    // Iterative post-order DFS: topological order with each node visited once.
    std::vector<Node*> topo;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    visited.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (!visited.count(p) && !p->parents.empty()) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            topo.push_back(node);
            stack.pop_back();
        }
    }

    // Zero graph-interior grads so repeated backward calls over fresh graphs
    // cannot mix stale values; leaf (parameter) grads accumulate.
    for (Node* n : topo)
        if (!n->is_leaf()) n->grad.assign(n->values.size(), 0.0);

    Node* root = loss.node().get();
    root->ensure_grad();
    root->grad[0] += 1.0;

    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && n->grad.size() == n->values.size()) n->backward_fn(*n);
    }
}

void assert_all_finite(const Tensor& t, const std::string& what) {
    detail::check_valid(t, "assert_all_finite");
    for (std::size_t i = 0; i < t.size(); ++i)
        if (!std::isfinite(t.data()[i]))
            throw NumericError(what + ": non-finite value at flat index " +
                               std::to_string(i));
}

}  // namespace xtransct
