// SPDX-License-Identifier: Apache-2.0
#include "tzk/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <numbers>
#include <sstream>
#include <string_view>
#include <unordered_set>
#include <utility>

#include "tzk/errors.hpp"
#include "tzk/rng.hpp"

namespace tzk {

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    Dtype dtype = Dtype::f64;
    bool requires_grad = false;
    bool op = false;  // produced by a recorded op
    bool consumed = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;
};

}  // namespace detail

using detail::Node;

struct TensorAccess {
    static const std::shared_ptr<Node>& node(const Tensor& t) { return t.node_; }
    static Tensor wrap(std::shared_ptr<Node> n) { return Tensor(std::move(n)); }
};

namespace {

std::atomic<Dtype> g_precision{Dtype::f32};
thread_local bool t_grad_enabled = true;

constexpr double kLog2 = std::numbers::ln2;

Node& node_of(const Tensor& t) {
    const auto& n = TensorAccess::node(t);
    if (!n) {
        throw ContractError("operation on an undefined tensor");
    }
    return *n;
}

void round_to(Dtype dtype, std::vector<double>& values) {
    if (dtype == Dtype::f32) {
        for (double& v : values) {
            v = static_cast<double>(static_cast<float>(v));
        }
    }
}

void check_finite(std::string_view where, const std::vector<double>& values) {
    for (double v : values) {
        if (!std::isfinite(v)) {
            throw_numeric(std::string(where));
        }
    }
}

Tensor make_leaf(Shape shape, std::vector<double> values, bool requires_grad) {
    if (shape_numel(shape) != values.size()) {
        throw DimensionError("tensor data length " + std::to_string(values.size()) +
                             " does not match shape " + shape_str(shape));
    }
    check_finite("tensor construction", values);
    auto node = std::make_shared<Node>();
    node->dtype = precision();
    round_to(node->dtype, values);
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return TensorAccess::wrap(std::move(node));
}

Tensor make_op(std::string_view name, Shape shape, std::vector<double> values,
               std::initializer_list<Tensor> inputs, std::function<void(Node&)> backward_fn) {
    check_finite(name, values);
    auto node = std::make_shared<Node>();
    node->dtype = precision();
    round_to(node->dtype, values);
    node->shape = std::move(shape);
    node->value = std::move(values);
    bool needs = false;
    if (t_grad_enabled) {
        for (const Tensor& in : inputs) {
            needs = needs || node_of(in).requires_grad;
        }
    }
    if (needs) {
        node->requires_grad = true;
        node->op = true;
        for (const Tensor& in : inputs) {
            node->parents.push_back(TensorAccess::node(in));
        }
        node->backward_fn = std::move(backward_fn);
    }
    return TensorAccess::wrap(std::move(node));
}

// Gradient buffer of a parent, or nullptr when it does not take gradients.
std::vector<double>* gbuf(Node& self, std::size_t parent) {
    Node& p = *self.parents[parent];
    if (!p.requires_grad) {
        return nullptr;
    }
    if (p.grad.empty()) {
        p.grad.assign(p.value.size(), 0.0);
    }
    return &p.grad;
}

void require_rank(const Tensor& t, std::size_t rank, std::string_view op) {
    if (t.rank() != rank) {
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                             ", got shape " + shape_str(t.shape()));
    }
}

double stable_sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double stable_softplus(double x) {
    return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

const char* op_name(OpCode op) {
    switch (op) {
        case OpCode::add: return "add";
        case OpCode::sub: return "sub";
        case OpCode::mul: return "mul";
        case OpCode::div: return "div";
        case OpCode::exp: return "exp";
        case OpCode::log: return "log";
        case OpCode::tanh: return "tanh";
        case OpCode::sigmoid: return "sigmoid";
        case OpCode::swish: return "swish";
        case OpCode::softplus: return "softplus";
        case OpCode::neg: return "neg";
    }
    return "?";
}

// Unary map with derivative dy/dx expressed from (x, y).
template <class F, class D>
Tensor unary(std::string_view name, const Tensor& a, F f, D dfdx) {
    const auto& av = node_of(a).value;
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) {
        out[i] = f(av[i]);
    }
    return make_op(name, a.shape(), std::move(out), {a}, [dfdx](Node& self) {
        auto* ga = gbuf(self, 0);
        if (ga == nullptr) {
            return;
        }
        const auto& x = self.parents[0]->value;
        for (std::size_t i = 0; i < x.size(); ++i) {
            (*ga)[i] += self.grad[i] * dfdx(x[i], self.value[i]);
        }
    });
}

}  // namespace

// ---------------------------------------------------------------------------

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) {
        n *= e;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "x" : "") << shape[i];
    }
    os << ']';
    return os.str();
}

Dtype precision() { return g_precision.load(std::memory_order_relaxed); }

void set_precision(Dtype dtype) { g_precision.store(dtype, std::memory_order_relaxed); }

Dtype precision_from_env() {
    const char* env = std::getenv("TZK_PRECISION");
    if (env == nullptr || std::string_view(env).empty() || std::string_view(env) == "f32") {
        return Dtype::f32;
    }
    if (std::string_view(env) == "f64") {
        return Dtype::f64;
    }
    throw ConfigError("TZK_PRECISION must be f32 or f64, got '" + std::string(env) + "'");
}

NoGradGuard::NoGradGuard() : saved_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = saved_; }

bool grad_enabled() { return t_grad_enabled; }

// ---------------------------------------------------------------------------

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    return make_leaf(std::move(shape), std::move(values), requires_grad);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    const std::size_t n = shape_numel(shape);
    return make_leaf(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return make_leaf({}, {value}, requires_grad);
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev) {
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) {
        x = rng.normal() * stddev;
    }
    return make_leaf(std::move(shape), std::move(v), false);
}

const Shape& Tensor::shape() const { return node_of(*this).shape; }

std::size_t Tensor::dim(std::size_t axis) const {
    const Shape& s = shape();
    if (axis >= s.size()) {
        throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                             shape_str(s));
    }
    return s[axis];
}

std::size_t Tensor::numel() const { return node_of(*this).value.size(); }
Dtype Tensor::dtype() const { return node_of(*this).dtype; }
std::span<const double> Tensor::data() const { return node_of(*this).value; }
std::vector<double> Tensor::to_vector() const { return node_of(*this).value; }

double Tensor::item() const {
    if (numel() != 1) {
        throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    }
    return node_of(*this).value[0];
}

double Tensor::at(std::size_t i) const {
    const auto& v = node_of(*this).value;
    if (i >= v.size()) {
        throw DimensionError("index out of range");
    }
    return v[i];
}

double Tensor::at(std::size_t row, std::size_t col) const {
    require_rank(*this, 2, "at");
    return at(row * dim(1) + col);
}

bool Tensor::requires_grad() const { return node_of(*this).requires_grad; }

void Tensor::set_requires_grad(bool flag) {
    Node& n = node_of(*this);
    if (n.op) {
        throw ContractError("requires_grad can only be toggled on leaf tensors");
    }
    n.requires_grad = flag;
}

bool Tensor::is_leaf() const { return !node_of(*this).op; }
bool Tensor::has_grad() const { return !node_of(*this).grad.empty(); }
std::span<const double> Tensor::grad() const { return node_of(*this).grad; }
void Tensor::zero_grad() { node_of(*this).grad.clear(); }

void Tensor::assign(std::span<const double> values) {
    Node& n = node_of(*this);
    if (n.op) {
        throw ContractError("assign() on a non-leaf tensor");
    }
    if (values.size() != n.value.size()) {
        throw DimensionError("assign: size mismatch");
    }
    std::vector<double> v(values.begin(), values.end());
    check_finite("assign", v);
    round_to(n.dtype, v);
    n.value = std::move(v);
}

Tensor Tensor::detach() const {
    const Node& n = node_of(*this);
    auto out = std::make_shared<Node>();
    out->shape = n.shape;
    out->value = n.value;
    out->dtype = n.dtype;
    return TensorAccess::wrap(std::move(out));
}

Tensor Tensor::clone() const {
    Tensor t = detach();
    node_of(t).requires_grad = requires_grad();
    return t;
}

// ---------------------------------------------------------------------------

Tensor elementwise(OpCode op, const Tensor& a) {
    switch (op) {
        case OpCode::exp:
            return unary("exp", a, [](double x) { return std::exp(x); },
                         [](double, double y) { return y; });
        case OpCode::log:
            for (double x : a.data()) {
                if (!(x > 0.0)) {
                    throw DomainError("log of non-positive value");
                }
            }
            return unary("log", a, [](double x) { return std::log(x); },
                         [](double x, double) { return 1.0 / x; });
        case OpCode::tanh:
            return unary("tanh", a, [](double x) { return std::tanh(x); },
                         [](double, double y) { return 1.0 - y * y; });
        case OpCode::sigmoid:
            return unary("sigmoid", a, stable_sigmoid,
                         [](double, double y) { return y * (1.0 - y); });
        case OpCode::swish:
            return unary("swish", a, [](double x) { return x * stable_sigmoid(x); },
                         [](double x, double) {
                             const double s = stable_sigmoid(x);
                             return s + x * s * (1.0 - s);
                         });
        case OpCode::softplus:
            return unary("softplus", a, stable_softplus,
                         [](double x, double) { return stable_sigmoid(x); });
        case OpCode::neg:
            return unary("neg", a, [](double x) { return -x; },
                         [](double, double) { return -1.0; });
        default:
            throw ContractError(std::string("elementwise: ") + op_name(op) +
                                " needs a second operand");
    }
}

Tensor elementwise(OpCode op, const Tensor& a, const Tensor& b) {
    if (op != OpCode::add && op != OpCode::sub && op != OpCode::mul && op != OpCode::div) {
        throw ContractError(std::string("elementwise: ") + op_name(op) + " is unary");
    }
    const auto& av = node_of(a).value;
    const auto& bv = node_of(b).value;
    Shape shape;
    bool a_scalar = false;
    bool b_scalar = false;
    if (a.shape() == b.shape()) {
        shape = a.shape();
    } else if (bv.size() == 1) {
        shape = a.shape();
        b_scalar = true;
    } else if (av.size() == 1) {
        shape = b.shape();
        a_scalar = true;
    } else {
        throw DimensionError(std::string(op_name(op)) + ": shape mismatch " +
                             shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    const std::size_t n = shape_numel(shape);
    auto A = [&](std::size_t i) { return av[a_scalar ? 0 : i]; };
    auto B = [&](std::size_t i) { return bv[b_scalar ? 0 : i]; };
    std::vector<double> out(n);
    switch (op) {
        case OpCode::add:
            for (std::size_t i = 0; i < n; ++i) out[i] = A(i) + B(i);
            break;
        case OpCode::sub:
            for (std::size_t i = 0; i < n; ++i) out[i] = A(i) - B(i);
            break;
        case OpCode::mul:
            for (std::size_t i = 0; i < n; ++i) out[i] = A(i) * B(i);
            break;
        case OpCode::div:
            for (std::size_t i = 0; i < n; ++i) {
                if (B(i) == 0.0) {
                    throw DomainError("division by zero");
                }
                out[i] = A(i) / B(i);
            }
            break;
        default:
            break;
    }
    return make_op(op_name(op), shape, std::move(out), {a, b},
                   [op, a_scalar, b_scalar](Node& self) {
                       const auto& x = self.parents[0]->value;
                       const auto& y = self.parents[1]->value;
                       auto* ga = gbuf(self, 0);
                       auto* gb = gbuf(self, 1);
                       for (std::size_t i = 0; i < self.grad.size(); ++i) {
                           const std::size_t ia = a_scalar ? 0 : i;
                           const std::size_t ib = b_scalar ? 0 : i;
                           const double g = self.grad[i];
                           double da = 0.0;
                           double db = 0.0;
                           switch (op) {
                               case OpCode::add: da = g; db = g; break;
                               case OpCode::sub: da = g; db = -g; break;
                               case OpCode::mul: da = g * y[ib]; db = g * x[ia]; break;
                               case OpCode::div:
                                   da = g / y[ib];
                                   db = -g * x[ia] / (y[ib] * y[ib]);
                                   break;
                               default: break;
                           }
                           if (ga) (*ga)[ia] += da;
                           if (gb) (*gb)[ib] += db;
                       }
                   });
}

Tensor add(const Tensor& a, const Tensor& b) { return elementwise(OpCode::add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(OpCode::sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(OpCode::mul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return elementwise(OpCode::div, a, b); }
Tensor exp(const Tensor& a) { return elementwise(OpCode::exp, a); }
Tensor log(const Tensor& a) { return elementwise(OpCode::log, a); }
Tensor tanh(const Tensor& a) { return elementwise(OpCode::tanh, a); }
Tensor sigmoid(const Tensor& a) { return elementwise(OpCode::sigmoid, a); }
Tensor swish(const Tensor& a) { return elementwise(OpCode::swish, a); }
Tensor softplus(const Tensor& a) { return elementwise(OpCode::softplus, a); }
Tensor neg(const Tensor& a) { return elementwise(OpCode::neg, a); }

Tensor add_scalar(const Tensor& a, double s) {
    return unary("add_scalar", a, [s](double x) { return x + s; },
                 [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double s) {
    return unary("mul_scalar", a, [s](double x) { return x * s; },
                 [s](double, double) { return s; });
}

Tensor square(const Tensor& a) {
    return unary("square", a, [](double x) { return x * x; },
                 [](double x, double) { return 2.0 * x; });
}

Tensor log_sigmoid(const Tensor& a) {
    return unary("log_sigmoid", a, [](double x) { return -stable_softplus(-x); },
                 [](double x, double) { return stable_sigmoid(-x); });
}

Tensor log_cosh(const Tensor& a) {
    return unary("log_cosh", a,
                 [](double x) {
                     const double ax = std::abs(x);
                     if (ax < 1.0) {
                         // cosh x - 1 = 2 sinh^2(x/2); never rounds below zero
                         const double s = std::sinh(0.5 * ax);
                         return std::log1p(2.0 * s * s);
                     }
                     return ax + std::log1p(std::exp(-2.0 * ax)) - kLog2;
                 },
                 [](double x, double) { return std::tanh(x); });
}

Tensor clamp_min(const Tensor& a, double floor) {
    return unary("clamp_min", a, [floor](double x) { return std::max(x, floor); },
                 [floor](double x, double) { return x >= floor ? 1.0 : 0.0; });
}

Tensor logaddexp(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError("logaddexp: shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
    const auto& av = node_of(a).value;
    const auto& bv = node_of(b).value;
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) {
        const double m = std::max(av[i], bv[i]);
        out[i] = m + std::log(std::exp(av[i] - m) + std::exp(bv[i] - m));
    }
    return make_op("logaddexp", a.shape(), std::move(out), {a, b}, [](Node& self) {
        const auto& x = self.parents[0]->value;
        const auto& y = self.parents[1]->value;
        auto* ga = gbuf(self, 0);
        auto* gb = gbuf(self, 1);
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const double m = std::max(x[i], y[i]);
            const double ea = std::exp(x[i] - m);
            const double eb = std::exp(y[i] - m);
            const double wa = ea / (ea + eb);
            if (ga) (*ga)[i] += self.grad[i] * wa;
            if (gb) (*gb)[i] += self.grad[i] * (1.0 - wa);
        }
    });
}

Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
Tensor operator-(const Tensor& a) { return neg(a); }
Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
Tensor operator*(const Tensor& a, double s) { return mul_scalar(a, s); }
Tensor operator*(double s, const Tensor& a) { return mul_scalar(a, s); }

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    const std::size_t m = a.dim(0);
    const std::size_t k = a.dim(1);
    const std::size_t n = b.dim(1);
    if (b.dim(0) != k) {
        throw DimensionError("matmul: inner extents differ " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    }
    const auto& A = node_of(a).value;
    const auto& B = node_of(b).value;
    std::vector<double> C(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = &C[i * n];
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = A[i * k + p];
            const double* brow = &B[p * n];
            for (std::size_t j = 0; j < n; ++j) {
                crow[j] += aip * brow[j];
            }
        }
    }
    return make_op("matmul", {m, n}, std::move(C), {a, b}, [m, k, n](Node& self) {
        const auto& A = self.parents[0]->value;
        const auto& B = self.parents[1]->value;
        const auto& G = self.grad;
        if (auto* ga = gbuf(self, 0)) {
            // dA = G * B^T
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t p = 0; p < k; ++p) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                        acc += G[i * n + j] * B[p * n + j];
                    }
                    (*ga)[i * k + p] += acc;
                }
            }
        }
        if (auto* gb = gbuf(self, 1)) {
            // dB = A^T * G
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t p = 0; p < k; ++p) {
                    const double aip = A[i * k + p];
                    double* grow = &(*gb)[p * n];
                    for (std::size_t j = 0; j < n; ++j) {
                        grow[j] += aip * G[i * n + j];
                    }
                }
            }
        }
    });
}

Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double x : a.data()) {
        s += x;
    }
    return make_op("sum", {}, {s}, {a}, [](Node& self) {
        if (auto* ga = gbuf(self, 0)) {
            for (double& g : *ga) {
                g += self.grad[0];
            }
        }
    });
}

Tensor mean(const Tensor& a) {
    return mul_scalar(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor sum_rows(const Tensor& a) {
    require_rank(a, 2, "sum_rows");
    const std::size_t n = a.dim(0);
    const std::size_t k = a.dim(1);
    const auto& av = node_of(a).value;
    std::vector<double> out(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
            out[i] += av[i * k + j];
        }
    }
    return make_op("sum_rows", {n}, std::move(out), {a}, [n, k](Node& self) {
        if (auto* ga = gbuf(self, 0)) {
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < k; ++j) {
                    (*ga)[i * k + j] += self.grad[i];
                }
            }
        }
    });
}

Tensor add_rowvec(const Tensor& a, const Tensor& v) {
    require_rank(a, 2, "add_rowvec");
    const std::size_t n = a.dim(0);
    const std::size_t k = a.dim(1);
    if (v.numel() != k) {
        throw DimensionError("add_rowvec: vector length " + std::to_string(v.numel()) +
                             " does not match " + shape_str(a.shape()));
    }
    const auto& av = node_of(a).value;
    const auto& vv = node_of(v).value;
    std::vector<double> out(n * k);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
            out[i * k + j] = av[i * k + j] + vv[j];
        }
    }
    return make_op("add_rowvec", a.shape(), std::move(out), {a, v}, [n, k](Node& self) {
        auto* ga = gbuf(self, 0);
        auto* gv = gbuf(self, 1);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < k; ++j) {
                const double g = self.grad[i * k + j];
                if (ga) (*ga)[i * k + j] += g;
                if (gv) (*gv)[j] += g;
            }
        }
    });
}

Tensor mul_rowvec(const Tensor& a, const Tensor& v) {
    require_rank(a, 2, "mul_rowvec");
    const std::size_t n = a.dim(0);
    const std::size_t k = a.dim(1);
    if (v.numel() != k) {
        throw DimensionError("mul_rowvec: vector length mismatch");
    }
    const auto& av = node_of(a).value;
    const auto& vv = node_of(v).value;
    std::vector<double> out(n * k);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
            out[i * k + j] = av[i * k + j] * vv[j];
        }
    }
    return make_op("mul_rowvec", a.shape(), std::move(out), {a, v}, [n, k](Node& self) {
        const auto& x = self.parents[0]->value;
        const auto& w = self.parents[1]->value;
        auto* ga = gbuf(self, 0);
        auto* gv = gbuf(self, 1);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < k; ++j) {
                const double g = self.grad[i * k + j];
                if (ga) (*ga)[i * k + j] += g * w[j];
                if (gv) (*gv)[j] += g * x[i * k + j];
            }
        }
    });
}

Tensor scale_rows(const Tensor& a, const Tensor& w) {
    require_rank(a, 2, "scale_rows");
    const std::size_t n = a.dim(0);
    const std::size_t k = a.dim(1);
    if (w.numel() != n) {
        throw DimensionError("scale_rows: weight length mismatch");
    }
    const auto& av = node_of(a).value;
    const auto& wv = node_of(w).value;
    std::vector<double> out(n * k);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
            out[i * k + j] = av[i * k + j] * wv[i];
        }
    }
    return make_op("scale_rows", a.shape(), std::move(out), {a, w}, [n, k](Node& self) {
        const auto& x = self.parents[0]->value;
        const auto& wv = self.parents[1]->value;
        auto* ga = gbuf(self, 0);
        auto* gw = gbuf(self, 1);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < k; ++j) {
                const double g = self.grad[i * k + j];
                if (ga) (*ga)[i * k + j] += g * wv[i];
                if (gw) (*gw)[i] += g * x[i * k + j];
            }
        }
    });
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw DimensionError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
    }
    return make_op("reshape", std::move(shape), a.to_vector(), {a}, [](Node& self) {
        if (auto* ga = gbuf(self, 0)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                (*ga)[i] += self.grad[i];
            }
        }
    });
}

Tensor gather_cols(const Tensor& a, std::span<const std::size_t> idx) {
    require_rank(a, 2, "gather_cols");
    const std::size_t n = a.dim(0);
    const std::size_t k = a.dim(1);
    for (std::size_t j : idx) {
        if (j >= k) {
            throw DimensionError("gather_cols: column " + std::to_string(j) + " out of range");
        }
    }
    const std::size_t m = idx.size();
    const auto& av = node_of(a).value;
    std::vector<double> out(n * m);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
            out[i * m + j] = av[i * k + idx[j]];
        }
    }
    std::vector<std::size_t> cols(idx.begin(), idx.end());
    return make_op("gather_cols", {n, m}, std::move(out), {a},
                   [n, k, m, cols = std::move(cols)](Node& self) {
                       if (auto* ga = gbuf(self, 0)) {
                           for (std::size_t i = 0; i < n; ++i) {
                               for (std::size_t j = 0; j < m; ++j) {
                                   (*ga)[i * k + cols[j]] += self.grad[i * m + j];
                               }
                           }
                       }
                   });
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
    if (begin > end) {
        throw DimensionError("slice_cols: begin > end");
    }
    std::vector<std::size_t> idx(end - begin);
    for (std::size_t j = 0; j < idx.size(); ++j) {
        idx[j] = begin + j;
    }
    return gather_cols(a, idx);
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) {
        throw DimensionError("concat_cols: no inputs");
    }
    if (parts.size() == 1) {
        return parts[0];
    }
    const std::size_t n = parts[0].dim(0);
    std::size_t total = 0;
    std::vector<std::size_t> widths;
    for (const Tensor& p : parts) {
        require_rank(p, 2, "concat_cols");
        if (p.dim(0) != n) {
            throw DimensionError("concat_cols: row count mismatch");
        }
        widths.push_back(p.dim(1));
        total += p.dim(1);
    }
    std::vector<double> out(n * total);
    std::size_t offset = 0;
    for (std::size_t q = 0; q < parts.size(); ++q) {
        const auto& pv = node_of(parts[q]).value;
        const std::size_t w = widths[q];
        for (std::size_t i = 0; i < n; ++i) {
            std::copy_n(&pv[i * w], w, &out[i * total + offset]);
        }
        offset += w;
    }
    // folded left to right into two-parent nodes
    auto fold = [&](const Tensor& left, const Tensor& right, std::vector<double> values,
                    std::size_t wl, std::size_t wr) {
        return make_op("concat_cols", {n, wl + wr}, std::move(values), {left, right},
                       [n, wl, wr](Node& self) {
                           auto* gl = gbuf(self, 0);
                           auto* gr = gbuf(self, 1);
                           const std::size_t w = wl + wr;
                           for (std::size_t i = 0; i < n; ++i) {
                               if (gl) {
                                   for (std::size_t j = 0; j < wl; ++j)
                                       (*gl)[i * wl + j] += self.grad[i * w + j];
                               }
                               if (gr) {
                                   for (std::size_t j = 0; j < wr; ++j)
                                       (*gr)[i * wr + j] += self.grad[i * w + wl + j];
                               }
                           }
                       });
    };
    Tensor acc = parts[0];
    std::size_t wacc = widths[0];
    for (std::size_t q = 1; q < parts.size(); ++q) {
        const std::size_t wn = wacc + widths[q];
        std::vector<double> vals(n * wn);
        for (std::size_t i = 0; i < n; ++i) {
            std::copy_n(&out[i * total], wn, &vals[i * wn]);
        }
        acc = fold(acc, parts[q], std::move(vals), wacc, widths[q]);
        wacc = wn;
    }
    return acc;
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> idx) {
    if (a.rank() == 0) {
        throw DimensionError("gather_rows on a scalar");
    }
    const std::size_t rows = a.dim(0);
    const std::size_t width = rows == 0 ? 0 : a.numel() / rows;
    for (std::size_t r : idx) {
        if (r >= rows) {
            throw DimensionError("gather_rows: row " + std::to_string(r) + " out of range");
        }
    }
    const auto& av = node_of(a).value;
    std::vector<double> out(idx.size() * width);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        std::copy_n(&av[idx[i] * width], width, &out[i * width]);
    }
    Shape shape = a.shape();
    shape[0] = idx.size();
    std::vector<std::size_t> rows_idx(idx.begin(), idx.end());
    return make_op("gather_rows", std::move(shape), std::move(out), {a},
                   [width, rows_idx = std::move(rows_idx)](Node& self) {
                       if (auto* ga = gbuf(self, 0)) {
                           for (std::size_t i = 0; i < rows_idx.size(); ++i) {
                               for (std::size_t j = 0; j < width; ++j) {
                                   (*ga)[rows_idx[i] * width + j] += self.grad[i * width + j];
                               }
                           }
                       }
                   });
}

// ---------------------------------------------------------------------------

Tape Tape::record(const Tensor& loss) {
    Tape tape;
    const auto& root = TensorAccess::node(loss);
    if (!root || !root->requires_grad) {
        return tape;
    }
    // iterative post-order DFS
    std::unordered_set<const Node*> visited;
    std::vector<std::pair<std::shared_ptr<Node>, std::size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            const auto& parent = node->parents[next++];
            if (parent->requires_grad && visited.insert(parent.get()).second) {
                stack.emplace_back(parent, 0);
            }
        } else {
            tape.nodes_.push_back(node);
            stack.pop_back();
        }
    }
    return tape;
}

bool Tape::topologically_ordered() const {
    std::unordered_set<const Node*> seen;
    for (const auto& node : nodes_) {
        for (const auto& parent : node->parents) {
            if (parent->requires_grad && !seen.contains(parent.get())) {
                return false;
            }
        }
        if (!seen.insert(node.get()).second) {
            return false;  // duplicate
        }
    }
    return true;
}

void backward(const Tensor& loss) {
    const auto& root = TensorAccess::node(loss);
    if (!root) {
        throw ContractError("backward on an undefined tensor");
    }
    if (root->value.size() != 1) {
        throw ContractError("backward needs a scalar loss, got shape " + shape_str(root->shape));
    }
    if (root->consumed) {
        throw GradientError("backward called twice on the same graph");
    }
    if (!root->requires_grad) {
        throw GradientError("loss is detached: no tensor in its graph requires grad");
    }
    Tape tape = Tape::record(loss);
    for (const auto& node : tape.nodes_) {
        if (node->consumed) {
            throw GradientError("graph contains nodes consumed by an earlier backward");
        }
    }
    if (root->grad.empty()) {
        root->grad.assign(1, 0.0);
    }
    root->grad[0] += 1.0;
    for (auto it = tape.nodes_.rbegin(); it != tape.nodes_.rend(); ++it) {
        Node& node = **it;
        if (node.op && !node.grad.empty()) {
            node.backward_fn(node);
        }
    }
    for (const auto& node : tape.nodes_) {
        if (node->op) {
            node->consumed = true;
            node->grad.clear();
            node->grad.shrink_to_fit();
            node->parents.clear();
            node->backward_fn = nullptr;
        }
    }
}

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double h) {
    if (!(h > 0.0)) {
        throw ContractError("finite_diff_grad: step must be positive");
    }
    PrecisionScope scope(Dtype::f64);
    NoGradGuard no_grad;
    const std::vector<double> base = x.to_vector();
    std::vector<double> g(base.size());
    for (std::size_t i = 0; i < base.size(); ++i) {
        std::vector<double> plus = base;
        std::vector<double> minus = base;
        plus[i] += h;
        minus[i] -= h;
        const double fp = f(Tensor::from(x.shape(), std::move(plus)));
        const double fm = f(Tensor::from(x.shape(), std::move(minus)));
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            throw DomainError("finite_diff_grad: function returned a non-finite value");
        }
        g[i] = (fp - fm) / (2.0 * h);
    }
    return Tensor::from(x.shape(), std::move(g));
}

}  // namespace tzk
