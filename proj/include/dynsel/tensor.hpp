#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "dynsel/rng.hpp"

namespace dynsel {

using Shape = std::vector<int>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

// Dense row-major float64 tensor. Doubles as a graph node: ops executed on a
// Tape fill in `parents` and `backprop` so gradients can be pulled back in
// reverse execution order.
class Tensor {
public:
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // allocated lazily, same length as data

    std::vector<TensorPtr> parents;
    std::function<void(Tensor&)> backprop;

    static TensorPtr zeros(Shape shape, bool requires_grad = false);
    static TensorPtr full(Shape shape, double value, bool requires_grad = false);
    static TensorPtr from_vec(Shape shape, std::vector<double> values, bool requires_grad = false);
    static TensorPtr scalar(double value, bool requires_grad = false);

    std::size_t size() const { return data.size(); }
    int ndim() const { return static_cast<int>(shape.size()); }
    double item() const;

    void ensure_grad();
    void zero_grad();
};

// Ordered record of executed operations (define-by-run). Execution order is
// topological order by construction; backward() walks it in reverse.
// Policy: backward() leaves the tape intact (grads accumulate on repeated
// calls); callers clear() once per iteration.
class Tape {
public:
    bool grad_enabled = true;

    void record(const TensorPtr& node) { nodes_.push_back(node); }
    std::size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    // loss must be a scalar recorded on this tape.
    void backward(const TensorPtr& loss);

private:
    std::vector<TensorPtr> nodes_;
};

// Running statistics + normalization constants for one batchnorm layer.
// Training mode uses batch statistics and updates the running averages;
// inference mode uses the running averages.
struct BatchNormState {
    std::vector<double> running_mean;
    std::vector<double> running_var;
    double momentum = 0.9;
    double eps = 1e-5;
    bool initialized = false;

    explicit BatchNormState(int features = 0)
        : running_mean(features, 0.0), running_var(features, 1.0) {}
};

namespace ops {

// elementwise with NumPy-style broadcasting
TensorPtr add(Tape& tape, const TensorPtr& a, const TensorPtr& b);
TensorPtr sub(Tape& tape, const TensorPtr& a, const TensorPtr& b);
TensorPtr mul(Tape& tape, const TensorPtr& a, const TensorPtr& b);
TensorPtr scalar_add(Tape& tape, const TensorPtr& a, double c);
TensorPtr scalar_mul(Tape& tape, const TensorPtr& a, double c);

// unary elementwise
TensorPtr square(Tape& tape, const TensorPtr& a);
TensorPtr exp(Tape& tape, const TensorPtr& a);
TensorPtr log(Tape& tape, const TensorPtr& a);
TensorPtr sigmoid(Tape& tape, const TensorPtr& a);
TensorPtr softplus(Tape& tape, const TensorPtr& a);
TensorPtr relu(Tape& tape, const TensorPtr& a);

// reductions
TensorPtr mean(Tape& tape, const TensorPtr& a);
TensorPtr sum(Tape& tape, const TensorPtr& a);
TensorPtr sum_axis(Tape& tape, const TensorPtr& a, int axis);
TensorPtr mean_axis(Tape& tape, const TensorPtr& a, int axis);
TensorPtr max_over_axis(Tape& tape, const TensorPtr& a, int axis);

TensorPtr softmax(Tape& tape, const TensorPtr& a, int axis);

// linear algebra
TensorPtr matmul(Tape& tape, const TensorPtr& a, const TensorPtr& b);
TensorPtr bmm(Tape& tape, const TensorPtr& a, const TensorPtr& b);

// convolution over the last axis; w has shape (filters, kernel).
// conv1d_same keeps the length; conv1d_valid yields length L-K+1.
// output shape: a.shape[:-1] + (filters, out_len)
TensorPtr conv1d_same(Tape& tape, const TensorPtr& a, const TensorPtr& w);
TensorPtr conv1d_valid(Tape& tape, const TensorPtr& a, const TensorPtr& w);

// mean pooling with the given kernel/stride over the last axis (valid).
TensorPtr avg_pool1d(Tape& tape, const TensorPtr& a, int kernel, int stride);

// per-feature affine normalization over axis 1 of (B, F, ...).
TensorPtr batchnorm(Tape& tape, const TensorPtr& x, const TensorPtr& gamma, const TensorPtr& beta,
                    BatchNormState& state, bool training);

TensorPtr dropout(Tape& tape, const TensorPtr& a, double p, Rng& rng, bool training);

// shape ops
TensorPtr reshape(Tape& tape, const TensorPtr& a, Shape shape);
TensorPtr transpose(Tape& tape, const TensorPtr& a, std::vector<int> perm);
TensorPtr concat(Tape& tape, const std::vector<TensorPtr>& parts, int axis);

// forward: the discrete value; backward: identity onto the continuous input.
TensorPtr straight_through(Tape& tape, const TensorPtr& continuous, const TensorPtr& discrete);

// composite losses built from the primitives above
TensorPtr cross_entropy(Tape& tape, const TensorPtr& logits, const std::vector<int>& labels);
TensorPtr bce_with_logits(Tape& tape, const TensorPtr& scores, const TensorPtr& targets);

TensorPtr one_hot(const std::vector<int>& labels, int classes);

}  // namespace ops

}  // namespace dynsel
