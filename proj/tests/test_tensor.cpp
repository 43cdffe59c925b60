// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <limits>
#include <sstream>
#include <string>

#include "oracles.hpp"
#include "tzk/errors.hpp"
#include "tzk/nn.hpp"
#include "tzk/rng.hpp"
#include "tzk/tensor.hpp"
#include "tzk/tensor_io.hpp"

using namespace tzk;

namespace {

std::vector<double> uniform_vec(Rng& rng, std::size_t n, double lo, double hi) {
    std::vector<double> v(n);
    for (double& x : v) {
        x = lo + (hi - lo) * rng.uniform();
    }
    return v;
}

struct GradCase {
    std::string name;
    std::size_t n_inputs;
    Shape shape;
    double lo;
    double hi;
    std::function<Tensor(const std::vector<Tensor>&)> fn;
};

std::vector<GradCase> grad_cases() {
    const Shape m{3, 4};
    std::vector<GradCase> cs;
    auto unary = [&](std::string name, double lo, double hi, Tensor (*f)(const Tensor&)) {
        cs.push_back({std::move(name), 1, m, lo, hi,
                      [f](const std::vector<Tensor>& in) { return f(in[0]); }});
    };
    unary("exp", -2, 2, &tzk::exp);
    unary("log", 0.2, 3, &tzk::log);
    unary("tanh", -3, 3, &tzk::tanh);
    unary("sigmoid", -4, 4, &tzk::sigmoid);
    unary("swish", -4, 4, &tzk::swish);
    unary("softplus", -4, 4, &tzk::softplus);
    unary("neg", -2, 2, &tzk::neg);
    unary("square", -2, 2, &tzk::square);
    unary("log_sigmoid", -6, 6, &tzk::log_sigmoid);
    unary("log_cosh", -6, 6, &tzk::log_cosh);
    auto binary = [&](std::string name, double lo, double hi,
                      std::function<Tensor(const Tensor&, const Tensor&)> f) {
        cs.push_back({std::move(name), 2, m, lo, hi,
                      [f](const std::vector<Tensor>& in) { return f(in[0], in[1]); }});
    };
    binary("add", -2, 2, [](const Tensor& a, const Tensor& b) { return a + b; });
    binary("sub", -2, 2, [](const Tensor& a, const Tensor& b) { return a - b; });
    binary("mul", -2, 2, [](const Tensor& a, const Tensor& b) { return a * b; });
    binary("div", 0.5, 2, [](const Tensor& a, const Tensor& b) { return a / b; });
    binary("logaddexp", -3, 3, [](const Tensor& a, const Tensor& b) { return logaddexp(a, b); });
    cs.push_back({"matmul", 2, {4, 4}, -1, 1, [](const std::vector<Tensor>& in) {
                      return matmul(in[0], in[1]);
                  }});
    cs.push_back({"sum_rows", 1, m, -1, 1,
                  [](const std::vector<Tensor>& in) { return sum_rows(in[0]); }});
    cs.push_back({"add_rowvec", 1, m, -1, 1, [](const std::vector<Tensor>& in) {
                      return add_rowvec(in[0], reshape(gather_rows(in[0], std::vector<std::size_t>{0}), {4}));
                  }});
    cs.push_back({"mul_rowvec", 1, m, -1, 1, [](const std::vector<Tensor>& in) {
                      Tensor v = reshape(gather_rows(in[0], std::vector<std::size_t>{1}), {4});
                      return mul_rowvec(in[0], v);
                  }});
    cs.push_back({"scale_rows", 1, m, -1, 1, [](const std::vector<Tensor>& in) {
                      return scale_rows(in[0], sum_rows(tanh(in[0])));
                  }});
    cs.push_back({"gather_concat", 1, m, -1, 1, [](const std::vector<Tensor>& in) {
                      const std::vector<std::size_t> idx{3, 0, 0, 2};
                      return concat_cols({gather_cols(in[0], idx), slice_cols(in[0], 1, 3)}) *
                             concat_cols({in[0], slice_cols(in[0], 0, 2)});
                  }});
    cs.push_back({"clamp_min", 1, m, 0.5, 2,
                  [](const std::vector<Tensor>& in) { return clamp_min(in[0], 0.1); }});
    cs.push_back({"scalar_ops", 1, m, -1, 1, [](const std::vector<Tensor>& in) {
                      return mean(in[0] * 3.0 + 1.5) * in[0] + mul_scalar(in[0], -0.5);
                  }});
    return cs;
}

}  // namespace

TEST_CASE("swish and sigmoid at fixed points") {
    PrecisionScope f64(Dtype::f64);
    CHECK(swish(Tensor::scalar(0.0)).item() == 0.0);
    CHECK(sigmoid(Tensor::scalar(0.0)).item() == 0.5);
    const long double ref = 1.0L / (1.0L + std::exp(-1.0L));
    CHECK(std::abs(swish(Tensor::scalar(1.0)).item() - static_cast<double>(ref)) < 1e-12);
    CHECK(std::abs(swish(Tensor::scalar(1.0)).item() - 0.731059) < 1e-6);
}

TEST_CASE("f32 mode rounds op outputs through float") {
    PrecisionScope f32(Dtype::f32);
    Tensor x = Tensor::scalar(0.1);
    CHECK(x.item() == static_cast<double>(0.1f));
    CHECK(x.dtype() == Dtype::f32);
    Tensor y = exp(x);
    CHECK(y.item() == static_cast<double>(static_cast<float>(y.item())));
}

TEST_CASE("matmul hand cases and triple-loop reference") {
    PrecisionScope f64(Dtype::f64);
    Tensor id = Tensor::from({2, 2}, {1, 0, 0, 1});
    Tensor x = Tensor::from({2, 2}, {0.5, -1, 2, 3});
    CHECK(matmul(id, x).to_vector() == x.to_vector());
    Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
    Tensor ones = Tensor::from({2, 1}, {1, 1});
    CHECK(matmul(a, ones).to_vector() == std::vector<double>{3, 7});

    Rng rng(11);
    const auto av = uniform_vec(rng, 20, -1, 1);
    const auto bv = uniform_vec(rng, 15, -1, 1);
    Tensor p = matmul(Tensor::from({4, 5}, av), Tensor::from({5, 3}, bv));
    CHECK(oracle::max_abs_diff(p.to_vector(), oracle::matmul(av, bv, 4, 5, 3)) < 1e-6);
    CHECK_THROWS_AS(matmul(a, Tensor::zeros({3, 1})), DimensionError);
}

TEST_CASE("backward on sums and squares") {
    PrecisionScope f64(Dtype::f64);
    Tensor x = Tensor::from({3}, {1, 2, 3}, true);
    backward(sum(x));
    CHECK(std::vector<double>(x.grad().begin(), x.grad().end()) == std::vector<double>{1, 1, 1});

    Tensor y = Tensor::from({3}, {1, 2, 3}, true);
    backward(sum(y * y));
    CHECK(std::vector<double>(y.grad().begin(), y.grad().end()) == std::vector<double>{2, 4, 6});
}

TEST_CASE("backward errors") {
    PrecisionScope f64(Dtype::f64);
    Tensor x = Tensor::from({2}, {1, 2}, true);
    CHECK_THROWS_AS(backward(x * 2.0), ContractError);
    Tensor loss = sum(x * x);
    backward(loss);
    CHECK_THROWS_AS(backward(loss), GradientError);
    Tensor c = Tensor::from({2}, {1, 2});
    CHECK_THROWS_AS(backward(sum(c)), GradientError);
}

TEST_CASE("domain and shape errors") {
    PrecisionScope f64(Dtype::f64);
    CHECK_THROWS_AS(log(Tensor::from({2}, {1, 0})), DomainError);
    CHECK_THROWS_AS(log(Tensor::from({1}, {-1})), DomainError);
    CHECK_THROWS_AS(Tensor::from({2}, {1, 1}) / Tensor::from({2}, {1, 0}), DomainError);
    CHECK_THROWS_AS(Tensor::zeros({2}) + Tensor::zeros({3}), DimensionError);
    CHECK_THROWS_AS(Tensor::from({2}, {1, std::numeric_limits<double>::quiet_NaN()}),
                    NumericError);
    CHECK_THROWS_AS(exp(Tensor::scalar(1000.0)), NumericError);
    // scalar broadcast is allowed
    CHECK((Tensor::from({2}, {1, 2}) * Tensor::scalar(2.0)).to_vector() ==
          std::vector<double>{2, 4});
}

TEST_CASE("finite_diff_grad examples") {
    Tensor x = Tensor::from({3}, {0.3, -2, 5});
    Tensor g = finite_diff_grad([](const Tensor& t) { return sum(t).item(); }, x, 1e-4);
    for (double v : g.to_vector()) {
        CHECK(std::abs(v - 1.0) < 1e-9);
    }
    Tensor y = Tensor::from({2}, {3, -1});
    Tensor gy = finite_diff_grad([](const Tensor& t) { return 0.5 * sum(t * t).item(); }, y, 1e-4);
    CHECK(std::abs(gy.at(0) - 3.0) < 1e-6);
    CHECK(std::abs(gy.at(1) + 1.0) < 1e-6);
    CHECK_THROWS_AS(finite_diff_grad([](const Tensor&) { return 0.0; }, x, 0.0), ContractError);
    CHECK_THROWS_AS(finite_diff_grad([](const Tensor&) { return std::nan(""); }, x, 1e-4),
                    DomainError);
}

TEST_CASE("two-layer MLP gradients match central differences") {
    PrecisionScope f64(Dtype::f64);
    Rng rng(5);
    Mlp net(MlpConfig{3, 2, 8, 2, false}, rng);
    ParamList ps;
    net.collect(ps, "net", ParamGroup::encoder);
    set_trainable(ps, true);
    Tensor x = Tensor::randn({5, 3}, rng);
    auto loss_fn = [&] { return sum(square(net(x))); };
    backward(loss_fn());
    for (auto& p : ps) {
        Tensor w = p.tensor;
        const std::vector<double> auto_g(w.grad().begin(), w.grad().end());
        const auto fd = oracle::central_grad(
            [&](const std::vector<double>& v) {
                const auto keep = w.to_vector();
                w.assign(v);
                NoGradGuard ng;
                const double out = loss_fn().item();
                w.assign(keep);
                return out;
            },
            w.to_vector(), 1e-4);
        CHECK(oracle::max_rel_err(auto_g, fd) < 1e-3);
    }
}

TEST_CASE("property: every op's gradient matches central differences over 100 seeds") {
    PrecisionScope f64(Dtype::f64);
    const auto cases = grad_cases();
    for (const auto& c : cases) {
        double worst = 0.0;
        for (std::uint64_t seed = 0; seed < 100; ++seed) {
            Rng rng(derive_seed(seed, c.name));
            std::vector<std::vector<double>> raw;
            for (std::size_t i = 0; i < c.n_inputs; ++i) {
                raw.push_back(uniform_vec(rng, shape_numel(c.shape), c.lo, c.hi));
            }
            std::vector<Tensor> leaves;
            for (const auto& r : raw) {
                leaves.push_back(Tensor::from(c.shape, r, true));
            }
            Tensor probe = c.fn(leaves);
            const auto wv = uniform_vec(rng, probe.numel(), -1, 1);
            Tensor weights = Tensor::from(probe.shape(), wv);
            backward(sum(probe * weights));
            for (std::size_t i = 0; i < c.n_inputs; ++i) {
                const std::vector<double> auto_g(leaves[i].grad().begin(), leaves[i].grad().end());
                const auto fd = oracle::central_grad(
                    [&](const std::vector<double>& v) {
                        std::vector<Tensor> in;
                        for (std::size_t j = 0; j < c.n_inputs; ++j) {
                            in.push_back(Tensor::from(c.shape, j == i ? v : raw[j]));
                        }
                        return sum(c.fn(in) * weights).item();
                    },
                    raw[i], 1e-4);
                worst = std::max(worst, oracle::max_rel_err(auto_g, fd));
            }
        }
        INFO("op " << c.name << " worst relative error " << worst);
        CHECK(worst < 1e-3);
    }
}

TEST_CASE("property: op outputs stay finite inside their domains") {
    PrecisionScope f64(Dtype::f64);
    const auto cases = grad_cases();
    Rng rng(99);
    for (const auto& c : cases) {
        for (int rep = 0; rep < 20; ++rep) {
            std::vector<Tensor> in;
            for (std::size_t i = 0; i < c.n_inputs; ++i) {
                in.push_back(Tensor::from(c.shape, uniform_vec(rng, shape_numel(c.shape), c.lo, c.hi)));
            }
            for (double v : c.fn(in).to_vector()) {
                CHECK(std::isfinite(v));
            }
        }
    }
    // stable forms hold up at large magnitudes
    Tensor big = Tensor::from({2}, {-500, 500});
    for (double v : log_sigmoid(big).to_vector()) {
        CHECK(std::isfinite(v));
    }
    for (double v : log_cosh(big).to_vector()) {
        CHECK(std::isfinite(v));
    }
}

TEST_CASE("tape is topologically ordered") {
    PrecisionScope f64(Dtype::f64);
    Tensor x = Tensor::from({2}, {1, 2}, true);
    Tensor a = exp(x);
    Tensor b = a * x + tanh(a);
    Tensor loss = sum(b * a);
    Tape tape = Tape::record(loss);
    CHECK(tape.topologically_ordered());
    CHECK(tape.size() >= 5);
}

TEST_CASE("TZKT round trip is bitwise in both dtypes") {
    for (Dtype dt : {Dtype::f32, Dtype::f64}) {
        PrecisionScope scope(dt);
        Rng rng(3);
        Tensor t = Tensor::randn({2, 3, 4}, rng);
        std::stringstream ss;
        write_tensor(ss, t);
        const std::string bytes = ss.str();
        CHECK(bytes.substr(0, 4) == "TZKT");
        CHECK(static_cast<int>(bytes[4]) == 1);
        CHECK(static_cast<int>(bytes[5]) == static_cast<int>(dt));
        // header: magic, version, dtype, rank, extents
        const std::size_t width = dt == Dtype::f32 ? 4 : 8;
        CHECK(bytes.size() == 4 + 1 + 1 + 4 + 3 * 4 + 24 * width);
        io::Reader rd(ss);
        Tensor back = read_tensor(rd);
        CHECK(back.shape() == t.shape());
        CHECK(back.dtype() == dt);
        CHECK(back.to_vector() == t.to_vector());
    }
    std::stringstream bad("TZKX");
    io::Reader rd(bad);
    CHECK_THROWS_AS(read_tensor(rd), FormatError);
}
