#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "swinseg/gradcheck.hpp"
#include "swinseg/ops.hpp"
#include "swinseg/tensor.hpp"
#include "swinseg/verify.hpp"

using namespace swinseg;

namespace {
Tensor f64_rand(std::vector<int64_t> shape, uint64_t seed, double lo = -1.0, double hi = 1.0) {
    auto rng = derived_rng(seed, {0x74657374});
    return Tensor::rand_uniform(std::move(shape), lo, hi, rng, DType::f64);
}
}  // namespace

TEST_CASE("matmul identity and hand sums") {
    Tensor i2 = Tensor::from_f64({2, 2}, {1, 0, 0, 1});
    Tensor p = ops::matmul(i2, i2);
    CHECK(p.same_bits(i2));

    Tensor a = Tensor::from_f64({2, 2}, {1, 2, 3, 4});
    Tensor b = Tensor::from_f64({2, 1}, {1, 1});
    Tensor c = ops::matmul(a, b);
    CHECK(c.at({0, 0}) == doctest::Approx(3.0));
    CHECK(c.at({1, 0}) == doctest::Approx(7.0));
}

TEST_CASE("matmul shape error names both shapes") {
    Tensor a = Tensor::zeros({2, 3}, DType::f64);
    Tensor b = Tensor::zeros({4, 2}, DType::f64);
    try {
        ops::matmul(a, b);
        FAIL("expected a dimension error");
    } catch (const std::invalid_argument& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2, 3]") != std::string::npos);
        CHECK(msg.find("[4, 2]") != std::string::npos);
    }
}

TEST_CASE("matmul gradient vs central finite differences") {
    Tensor b = f64_rand({4, 2}, 1);
    const double err = finite_difference_check(
        [&](const Tensor& x) {
            Tensor y = ops::matmul(x, b);
            return ops::sum(ops::mul(y, y));
        },
        f64_rand({3, 4}, 2), 1e-4);
    CHECK(err < 1e-4);
}

TEST_CASE("softmax examples") {
    Tensor u = ops::softmax(Tensor::from_f64({3}, {0, 0, 0}), 0);
    for (int64_t i = 0; i < 3; ++i) CHECK(u.at(i) == doctest::Approx(1.0 / 3).epsilon(1e-12));

    Tensor s = ops::softmax(Tensor::from_f64({2}, {1000, 0}), 0);
    CHECK(std::abs(s.at(int64_t{0}) - 1.0) < 1e-12);
    CHECK(std::abs(s.at(int64_t{1})) < 1e-12);

    Tensor w = f64_rand({5}, 3);
    const double err = finite_difference_check(
        [&](const Tensor& x) { return ops::sum(ops::mul(ops::softmax(x, 0), w)); },
        f64_rand({5}, 4), 1e-4);
    CHECK(err < 1e-4);
}

TEST_CASE("softmax rows sum to one and ignore constant shifts") {
    Tensor x = f64_rand({6, 9}, 5, -3, 3);
    Tensor y = ops::softmax(x, 1);
    Tensor y2 = ops::softmax(ops::add_scalar(x, 7.5), 1);
    for (int64_t r = 0; r < 6; ++r) {
        double row = 0;
        for (int64_t j = 0; j < 9; ++j) {
            row += y.at(r * 9 + j);
            CHECK(std::abs(y.at(r * 9 + j) - y2.at(r * 9 + j)) < 1e-6);
        }
        CHECK(row == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("layer_norm hand values") {
    Tensor gamma = Tensor::ones({4}, DType::f64);
    Tensor beta = Tensor::zeros({4}, DType::f64);
    Tensor c = ops::layer_norm(Tensor::full({2, 4}, 3.25, DType::f64), gamma, beta);
    for (int64_t i = 0; i < 8; ++i) CHECK(std::abs(c.at(i)) < 1e-9);

    Tensor g2 = Tensor::ones({2}, DType::f64), b2 = Tensor::zeros({2}, DType::f64);
    Tensor y = ops::layer_norm(Tensor::from_f64({1, 2}, {1, 3}), g2, b2, 0.0);
    CHECK(y.at(int64_t{0}) == doctest::Approx(-1.0).epsilon(1e-12));
    CHECK(y.at(int64_t{1}) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("instance_norm normalizes per channel over spatial extents") {
    // one channel with values 1..4 along a spatial axis
    Tensor x = Tensor::from_f64({1, 1, 4, 1, 1}, {1, 2, 3, 4});
    Tensor y = ops::instance_norm(x, Tensor::ones({1}, DType::f64),
                                  Tensor::zeros({1}, DType::f64), 0.0);
    const double std4 = std::sqrt(1.25);
    CHECK(y.at(int64_t{0}) == doctest::Approx((1 - 2.5) / std4));
    CHECK(y.at(int64_t{3}) == doctest::Approx((4 - 2.5) / std4));

    // constant per channel -> zeros
    Tensor cx = Tensor::full({1, 2, 3, 3, 3}, 7.0, DType::f64);
    Tensor cy = ops::instance_norm(cx, Tensor::ones({2}, DType::f64),
                                   Tensor::zeros({2}, DType::f64));
    for (int64_t i = 0; i < cy.numel(); ++i) CHECK(std::abs(cy.at(i)) < 1e-6);
}

TEST_CASE("conv3d identity and counting kernels") {
    auto rng = derived_rng(6, {});
    Tensor x = Tensor::rand_uniform({1, 1, 3, 3, 3}, -1, 1, rng, DType::f64);
    Tensor w1 = Tensor::from_f64({1, 1, 1, 1, 1}, {1.0});
    CHECK(ops::conv3d(x, w1, Tensor(), 1, 0).same_bits(x));

    Tensor ones_x = Tensor::ones({1, 1, 3, 3, 3}, DType::f64);
    Tensor kw = Tensor::ones({1, 1, 3, 3, 3}, DType::f64);
    Tensor y = ops::conv3d(ones_x, kw, Tensor(), 1, 0);
    CHECK(y.numel() == 1);
    CHECK(y.item() == doctest::Approx(27.0));
}

TEST_CASE("conv3d rejects kernels larger than the padded input") {
    Tensor x = Tensor::zeros({1, 1, 2, 2, 2}, DType::f64);
    Tensor w = Tensor::zeros({1, 1, 3, 3, 3}, DType::f64);
    CHECK_THROWS_AS(ops::conv3d(x, w, Tensor(), 1, 0), std::invalid_argument);
}

TEST_CASE("conv_transpose3d spreads a single voxel into a kernel block") {
    Tensor x = Tensor::from_f64({1, 1, 1, 1, 1}, {1.0});
    Tensor w = Tensor::ones({1, 1, 2, 2, 2}, DType::f64);
    Tensor y = ops::conv_transpose3d(x, w, Tensor(), 2);
    CHECK(y.shape() == std::vector<int64_t>{1, 1, 2, 2, 2});
    for (int64_t i = 0; i < 8; ++i) CHECK(y.at(i) == doctest::Approx(1.0));

    Tensor x4 = Tensor::zeros({1, 2, 4, 4, 4}, DType::f64);
    Tensor w4 = Tensor::zeros({2, 3, 2, 2, 2}, DType::f64);
    CHECK(ops::conv_transpose3d(x4, w4, Tensor(), 2).shape() ==
          std::vector<int64_t>{1, 3, 8, 8, 8});
}

TEST_CASE("conv_transpose3d matches the explicit adjoint formula") {
    auto rng = derived_rng(7, {});
    Tensor x = Tensor::rand_uniform({1, 2, 3, 3, 3}, -1, 1, rng, DType::f64);
    Tensor w = Tensor::rand_uniform({2, 3, 2, 2, 2}, -1, 1, rng, DType::f64);
    Tensor y = ops::conv_transpose3d(x, w, Tensor(), 2);
    std::vector<double> xd(x.numel()), wd(w.numel());
    for (int64_t i = 0; i < x.numel(); ++i) xd[i] = x.at(i);
    for (int64_t i = 0; i < w.numel(); ++i) wd[i] = w.at(i);
    auto ref = verify::reference_conv_transpose3d(xd, x.shape(), wd, w.shape(), {}, 2, 0);
    for (int64_t i = 0; i < y.numel(); ++i) CHECK(std::abs(y.at(i) - ref[i]) < 1e-6);
}

TEST_CASE("conv adjoint inner-product identity") {
    auto rng = derived_rng(8, {});
    Tensor x = Tensor::rand_uniform({1, 2, 5, 5, 5}, -1, 1, rng, DType::f64);
    Tensor w = Tensor::rand_uniform({3, 2, 3, 3, 3}, -1, 1, rng, DType::f64);
    Tensor y = Tensor::rand_uniform({1, 3, 5, 5, 5}, -1, 1, rng, DType::f64);
    // the (Cout, Cin, k^3) conv weight is already the transpose layout
    const double lhs = ops::sum(ops::mul(ops::conv3d(x, w, Tensor(), 1, 1), y)).item();
    const double rhs =
        ops::sum(ops::mul(x, ops::conv_transpose3d(y, w, Tensor(), 1, 1))).item();
    CHECK(std::abs(lhs - rhs) / std::max({std::abs(lhs), std::abs(rhs), 1e-8}) < 1e-10);
}

TEST_CASE("elementwise basics") {
    CHECK(ops::sigmoid(Tensor::zeros({1})).at(int64_t{0}) == 0.5f);

    Tensor x = f64_rand({3, 4}, 9);
    Tensor y = ops::add(x, Tensor::zeros({3, 4}, DType::f64));
    CHECK(y.same_bits(x));

    Tensor w = f64_rand({3, 4}, 10);
    const double err = finite_difference_check(
        [&](const Tensor& t) { return ops::sum(ops::mul(ops::gelu(t), w)); }, x, 1e-4);
    CHECK(err < 1e-4);
}

TEST_CASE("roll examples and bijection") {
    Tensor v = ops::roll(Tensor::from_f64({4}, {1, 2, 3, 4}), {1});
    CHECK(v.at(int64_t{0}) == 4.0);
    CHECK(v.at(int64_t{1}) == 1.0);
    CHECK(v.at(int64_t{3}) == 3.0);

    Tensor x = f64_rand({4, 4, 4}, 11);
    CHECK(ops::roll(ops::roll(x, {1, 2, 3}), {-1, -2, -3}).same_bits(x));
}

TEST_CASE("concat backward splits gradients exactly") {
    Tensor a = Tensor::zeros({2, 2}, DType::f64).set_requires_grad(true);
    Tensor b = Tensor::zeros({3, 2}, DType::f64).set_requires_grad(true);
    Tape::active().reset();
    Tensor loss = ops::sum(ops::concat({a, b}, 0));
    Tape::active().backward(loss);
    Tensor ga = a.grad(), gb = b.grad();
    for (int64_t i = 0; i < ga.numel(); ++i) CHECK(ga.at(i) == 1.0);
    for (int64_t i = 0; i < gb.numel(); ++i) CHECK(gb.at(i) == 1.0);
    Tape::active().reset();
}

TEST_CASE("backward populates leaf gradients") {
    Tensor x = f64_rand({5}, 12).set_requires_grad(true);
    Tape::active().reset();
    Tape::active().backward(ops::sum(x));
    Tensor g = x.grad();
    for (int64_t i = 0; i < 5; ++i) CHECK(g.at(i) == 1.0);
    Tape::active().reset();

    x.zero_grad();
    Tape::active().backward(ops::sum(ops::mul(x, x)));
    g = x.grad();
    for (int64_t i = 0; i < 5; ++i) CHECK(g.at(i) == doctest::Approx(2 * x.at(i)));
    Tape::active().reset();
}

TEST_CASE("backward errors: non-scalar root, double backward") {
    Tensor x = f64_rand({3}, 13).set_requires_grad(true);
    Tape::active().reset();
    Tensor y = ops::mul(x, x);
    CHECK_THROWS_AS(Tape::active().backward(y), std::invalid_argument);
    Tensor loss = ops::sum(y);
    Tape::active().backward(loss);
    CHECK_THROWS_AS(Tape::active().backward(loss), std::runtime_error);
    Tape::active().reset();
}

TEST_CASE("fan-out accumulates both branch gradients") {
    Tensor x = f64_rand({4}, 14).set_requires_grad(true);
    Tensor c = f64_rand({4}, 15);

    Tape::active().reset();
    Tape::active().backward(ops::sum(ops::mul(x, c)));
    Tensor g_single = x.grad();
    Tape::active().reset();

    x.zero_grad();
    Tensor both = ops::add(ops::mul(x, c), ops::mul(x, c));
    Tape::active().backward(ops::sum(both));
    Tensor g_double = x.grad();
    Tape::active().reset();

    for (int64_t i = 0; i < 4; ++i)
        CHECK(g_double.at(i) == doctest::Approx(2 * g_single.at(i)).epsilon(1e-12));
}

TEST_CASE("finite_difference_check baseline behaviours") {
    Tensor x = f64_rand({6}, 16);
    const double e1 = finite_difference_check([](const Tensor& t) { return ops::sum(t); }, x, 1e-4);
    CHECK(e1 < 1e-10);

    const double e2 = finite_difference_check(
        [](const Tensor& t) { return ops::sum(ops::mul(t, t)); }, x, 1e-4);
    CHECK(e2 < 1e-8);

    int calls = 0;
    CHECK_THROWS_AS(finite_difference_check(
                        [&calls](const Tensor& t) {
                            return ops::add_scalar(ops::sum(t), (calls++ % 2) * 0.5);
                        },
                        x, 1e-4),
                    NumericError);
}

TEST_CASE("broadcasting add/mul with reduction in backward") {
    Tensor bias = f64_rand({4}, 17).set_requires_grad(true);
    Tensor x = f64_rand({3, 4}, 18);
    Tape::active().reset();
    Tape::active().backward(ops::sum(ops::add(x, bias)));
    Tensor g = bias.grad();
    for (int64_t i = 0; i < 4; ++i) CHECK(g.at(i) == doctest::Approx(3.0));
    Tape::active().reset();

    CHECK_THROWS_AS(ops::add(Tensor::zeros({3, 4}), Tensor::zeros({5})), std::invalid_argument);
}

TEST_CASE("dtype guards") {
    CHECK_THROWS_AS(ops::add(Tensor::zeros({2}), Tensor::zeros({2}, DType::f64)),
                    std::invalid_argument);
    Tensor t = Tensor::zeros({2, 3});
    CHECK_THROWS_AS(ops::reshape(t, {7}), std::invalid_argument);
}
