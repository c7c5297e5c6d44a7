#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace xtransct {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {

// One node of the gradient tape. Operations append result nodes whose
// backward_fn scatters the node's grad into its parents; a full backward
// pass walks the nodes in reverse topological order, visiting each once.
struct Node {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;  // same length as values once touched
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    std::size_t size() const { return values.size(); }
    bool is_leaf() const { return parents.empty(); }
    // A node participates in gradient flow if it is a trainable leaf or the
    // result of an op over such nodes.
    bool grad_connected() const { return requires_grad || !parents.empty(); }
    void ensure_grad();
};

bool grad_enabled();

}  // namespace detail

// Disables tape recording in a scope (inference paths).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// Shaped double-precision array participating in reverse-mode autodiff.
// Copies are shallow (shared node), matching the handle semantics of the
// common tape engines.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor from(Shape shape, std::vector<double> values);
    static Tensor scalar(double value);

    bool valid() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t size() const;
    std::size_t rank() const { return shape().size(); }

    double* data();
    const double* data() const;
    const std::vector<double>& values() const;
    double item() const;  // scalar tensors only

    bool requires_grad() const;
    Tensor& set_requires_grad(bool flag);
    bool has_grad() const;
    const std::vector<double>& grad() const;
    void zero_grad();

    std::shared_ptr<detail::Node> node() const { return node_; }
    static Tensor wrap(std::shared_ptr<detail::Node> node);

private:
    std::shared_ptr<detail::Node> node_;
};

// ---- elementwise / structural ops --------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);

// The only broadcasts in the engine: bias over the last axis and, for conv
// feature maps, bias per leading channel axis.
Tensor add_bias(const Tensor& x, const Tensor& bias);
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat_rows(const Tensor& a, const Tensor& b);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& x, std::size_t c0, std::size_t c1);

// ---- nonlinearities ------------------------------------------------------

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softmax(const Tensor& x, std::size_t axis);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);

// Cross-correlation conv: input [C,H,W], kernels [K,C,kh,kw] -> [K,H',W'].
// Output extents must divide exactly: H' = (H + 2p - kh)/s + 1.
Tensor conv2d(const Tensor& input, const Tensor& kernels, std::size_t stride,
              std::size_t padding);

// ---- reductions ----------------------------------------------------------

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// ---- block assembly --------------------------------------------------

// blocks [Q^3, B^3] (queries z-major, block scalars z-major) -> flat volume
// [N^3] with N = Q*B. A bijection, so the backward pass is a gather.
Tensor assemble_blocks(const Tensor& blocks, std::size_t q_grid,
                       std::size_t block);

// Flat volume index for (query, offset-within-block); shared by the tensor
// op and the raw inference scatter.
std::size_t block_voxel_index(std::size_t query, std::size_t offset,
                              std::size_t q_grid, std::size_t block);

// ---- autodiff -----------------------------------------------------------

// Accumulates gradients of a scalar loss into every grad-connected node of
// its graph. Caller zeroes parameter grads beforehand if fresh gradients
// are wanted (the training loop does).
void backward(const Tensor& loss);

// Throws NumericError naming `what` if any element is NaN/Inf.
void assert_all_finite(const Tensor& t, const std::string& what);

}  // namespace xtransct
