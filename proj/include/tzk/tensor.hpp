// SPDX-License-Identifier: Apache-2.0
//
// Dense tensors with a reverse-mode gradient tape.
//
// Values are held in double storage. In f32 precision every op output (and
// every freshly created tensor) is rounded through float, so a run in f32 mode
// carries exactly the values a float32 implementation would store between ops.
// f64 mode keeps full double precision and is what the gradient oracles use.
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace tzk {

class Rng;

enum class Dtype : std::uint8_t { f32 = 0, f64 = 1 };

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Precision applied to newly produced values (process-wide).
Dtype precision();
void set_precision(Dtype dtype);
/// Reads TZK_PRECISION={f32,f64}; unset means f32.
Dtype precision_from_env();

class PrecisionScope {
public:
    explicit PrecisionScope(Dtype dtype) : saved_(precision()) { set_precision(dtype); }
    ~PrecisionScope() { set_precision(saved_); }
    PrecisionScope(const PrecisionScope&) = delete;
    PrecisionScope& operator=(const PrecisionScope&) = delete;

private:
    Dtype saved_;
};

/// Disables graph recording on the current thread.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool saved_;
};

bool grad_enabled();

namespace detail {
struct Node;
}

/// Handle to a tensor node. Copies share the node (like a reference).
class Tensor {
public:
    Tensor() = default;

    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0);

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const;
    Dtype dtype() const;

    std::span<const double> data() const;
    std::vector<double> to_vector() const;
    double item() const;
    double at(std::size_t i) const;
    double at(std::size_t row, std::size_t col) const;

    bool requires_grad() const;
    void set_requires_grad(bool flag);
    /// True for tensors not produced by a recorded op.
    bool is_leaf() const;
    bool has_grad() const;
    std::span<const double> grad() const;
    void zero_grad();

    /// Overwrite a leaf's values in place (parameter updates). Rounds to the
    /// tensor's own dtype.
    void assign(std::span<const double> values);
    /// New leaf holding the same values, never part of any graph.
    Tensor detach() const;
    /// Deep copy of values into a fresh leaf that keeps requires_grad.
    Tensor clone() const;

    bool same_node(const Tensor& other) const { return node_ == other.node_; }

private:
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
    std::shared_ptr<detail::Node> node_;

    friend struct TensorAccess;
};

// ---------------------------------------------------------------------------
// Ops. Shapes must match exactly unless noted; a one-element operand is a
// scalar and broadcasts.

enum class OpCode { add, sub, mul, div, exp, log, tanh, sigmoid, swish, softplus, neg };

Tensor elementwise(OpCode op, const Tensor& a);
Tensor elementwise(OpCode op, const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor swish(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor neg(const Tensor& a);

Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor square(const Tensor& a);
/// log sigmoid(a), stable for large |a|.
Tensor log_sigmoid(const Tensor& a);
/// log cosh(a), stable for large |a|.
Tensor log_cosh(const Tensor& a);
/// log(exp(a) + exp(b)).
Tensor logaddexp(const Tensor& a, const Tensor& b);
/// max(a, floor) with zero gradient where the floor is active.
Tensor clamp_min(const Tensor& a, double floor);

Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, const Tensor& b);
Tensor operator/(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a);
Tensor operator+(const Tensor& a, double s);
Tensor operator*(const Tensor& a, double s);
Tensor operator*(double s, const Tensor& a);

Tensor matmul(const Tensor& a, const Tensor& b);

/// Sum of all elements, shape {}.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// [n x k] -> [n]
Tensor sum_rows(const Tensor& a);
/// [n x k] + [k] per row.
Tensor add_rowvec(const Tensor& a, const Tensor& v);
/// [n x k] * [k] per row.
Tensor mul_rowvec(const Tensor& a, const Tensor& v);
/// [n x k] * [n] per column, i.e. row i scaled by w[i].
Tensor scale_rows(const Tensor& a, const Tensor& w);

Tensor reshape(const Tensor& a, Shape shape);
/// Columns idx of a [n x k] matrix, in the given order.
Tensor gather_cols(const Tensor& a, std::span<const std::size_t> idx);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> idx);

// ---------------------------------------------------------------------------

/// Topologically ordered list of the recorded nodes reachable from a loss.
class Tape {
public:
    static Tape record(const Tensor& loss);

    std::size_t size() const { return nodes_.size(); }
    /// Every node appears after all of its parents.
    bool topologically_ordered() const;

private:
    std::vector<std::shared_ptr<detail::Node>> nodes_;
    friend void backward(const Tensor& loss);
};

/// Accumulates d loss / d leaf into every requires_grad leaf and consumes the
/// graph; a second call on the same graph throws.
void backward(const Tensor& loss);

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h, evaluated in f64.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double h);

}  // namespace tzk
