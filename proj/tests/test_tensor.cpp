#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "malunet/tensor.hpp"

using namespace malunet;

namespace {

Tensor rnd(const Shape& s, std::mt19937_64& rng, bool grad = false, double lo = -1.0, double hi = 1.0) {
    std::vector<double> d(static_cast<std::size_t>(shape_numel(s)));
    for (double& v : d) v = uniform(rng, lo, hi);
    return Tensor::from_data(s, std::move(d), grad);
}

}  // namespace

TEST_CASE("elementwise add/mul basics") {
    Tensor a = Tensor::from_data({2}, {1, 2});
    Tensor b = Tensor::from_data({2}, {3, 4});
    Tensor s = add(a, b);
    CHECK(s.at({0}) == 4.0);
    CHECK(s.at({1}) == 6.0);

    Tensor x = Tensor::from_data({3}, {1.5, -2.0, 0.25});
    Tensor y = mul(x, Tensor::ones({3}));
    CHECK(y.data() == x.data());

    Tensor m = mul(Tensor::from_data({2}, {0.5, 2.0}), Tensor::from_data({2}, {0.5, 0.25}));
    CHECK(m.at({0}) == 0.25);
    CHECK(m.at({1}) == 0.5);
}

TEST_CASE("elementwise shape mismatch names both shapes") {
    Tensor a = Tensor::zeros({1, 2, 3});
    Tensor b = Tensor::zeros({1, 3, 2});
    try {
        add(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[1,2,3]") != std::string::npos);
        CHECK(msg.find("[1,3,2]") != std::string::npos);
    }
}

TEST_CASE("sigmoid values and saturation") {
    PrecisionGuard dp(Precision::f64);
    Tensor x = Tensor::from_data({3}, {0.0, 100.0, -100.0});
    Tensor s = sigmoid(x);
    CHECK(s.at({0}) == 0.5);
    CHECK(s.at({1}) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(s.at({1}) < 1.0);  // strictly inside (0,1)
    CHECK(s.at({2}) > 0.0);
}

TEST_CASE("sigmoid stays strictly in (0,1) under f32 mode") {
    auto rng = substream(7, "sig");
    Tensor x = rnd({256}, rng, false, -60.0, 60.0);
    Tensor s = sigmoid(x);
    for (double v : s.data()) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
    }
}

TEST_CASE("sigmoid gradient at zero is 1/4") {
    PrecisionGuard dp(Precision::f64);
    Tensor x = Tensor::from_data({2}, {0.0, 0.0}, true);
    Tensor loss = sum_all(sigmoid(x));
    backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(0.25));
    CHECK(x.grad()[1] == doctest::Approx(0.25));
}

TEST_CASE("chunk splits channels and rejects indivisible counts") {
    auto rng = substream(1, "chunk");
    Tensor x = rnd({1, 64, 8, 8}, rng);
    auto parts = chunk(x, 4);
    REQUIRE(parts.size() == 4);
    for (const auto& p : parts) CHECK(p.shape() == Shape{1, 16, 8, 8});
    CHECK_THROWS_AS(chunk(rnd({1, 30, 8, 8}, rng), 4), ShapeError);
}

TEST_CASE("concat sums channel extents, rejects spatial mismatch, singleton identity") {
    auto rng = substream(2, "concat");
    Tensor a = rnd({1, 8, 4, 4}, rng);
    Tensor b = rnd({1, 16, 4, 4}, rng);
    CHECK(concat({a, b}).shape() == Shape{1, 24, 4, 4});
    CHECK(concat({a}).data() == a.data());
    CHECK_THROWS_AS(concat({a, rnd({1, 8, 5, 4}, rng)}), ShapeError);
}

TEST_CASE("concat of chunk is the identity over random divisible shapes") {
    auto rng = substream(3, "roundtrip");
    for (int trial = 0; trial < 50; ++trial) {
        const int parts = 1 + static_cast<int>(uniform_index(rng, 4));
        const std::int64_t c = parts * (1 + static_cast<std::int64_t>(uniform_index(rng, 6)));
        const std::int64_t b = 1 + static_cast<std::int64_t>(uniform_index(rng, 2));
        const std::int64_t h = 1 + static_cast<std::int64_t>(uniform_index(rng, 5));
        const std::int64_t w = 1 + static_cast<std::int64_t>(uniform_index(rng, 5));
        Tensor x = rnd({b, c, h, w}, rng);
        Tensor back = concat(chunk(x, parts));
        CHECK(back.shape() == x.shape());
        CHECK(back.data() == x.data());  // bit-exact
    }
}

TEST_CASE("reduce mean/max values and gradient routing") {
    Tensor constant = Tensor::full({1, 2, 3, 3}, 2.75);
    Tensor m = reduce(Reduce::mean, reduce(Reduce::mean, constant, 3, false), 2, false);
    CHECK(m.at({0, 0}) == 2.75);
    CHECK(m.at({0, 1}) == 2.75);

    CHECK(reduce(Reduce::mean, Tensor::from_data({4}, {1, 2, 3, 4}), 0, false).item() == 2.5);

    // channel max picks the 2-map pointwise
    std::vector<double> d;
    for (double v : {1.0, 1.0, 1.0, 1.0}) d.push_back(v);
    for (double v : {2.0, 2.0, 2.0, 2.0}) d.push_back(v);
    for (double v : {0.0, 0.0, 0.0, 0.0}) d.push_back(v);
    Tensor x = Tensor::from_data({1, 3, 2, 2}, d);
    Tensor mx = reduce(Reduce::max, x, 1, false);
    for (std::int64_t i = 0; i < 4; ++i) CHECK(mx.data()[static_cast<std::size_t>(i)] == 2.0);

    // ties route to the first maximal element
    PrecisionGuard dp(Precision::f64);
    Tensor t = Tensor::from_data({1, 2, 1, 1}, {5.0, 5.0}, true);
    backward(sum_all(reduce(Reduce::max, t, 1, false)));
    CHECK(t.grad()[0] == 1.0);
    CHECK(t.grad()[1] == 0.0);
}

TEST_CASE("reduce mean matches sum within ulp-scale tolerance") {
    auto rng = substream(4, "meansum");
    Tensor x = rnd({3, 5, 7, 2}, rng);
    PrecisionGuard dp(Precision::f64);
    const double mean = reduce(Reduce::mean, reshape(x, {1, x.size()}), 1, false).item();
    double s = 0.0;
    for (double v : x.data()) s += v;
    const double want = s / static_cast<double>(x.size());
    CHECK(std::abs(mean - want) <= 4.0 * std::abs(want) * 2.220446049250313e-16 + 1e-300);
}

TEST_CASE("backward computes quadratic derivative and leaves spectators at zero") {
    PrecisionGuard dp(Precision::f64);
    Tensor w = Tensor::from_data({2}, {1, 2}, true);
    Tensor spectator = Tensor::from_data({2}, {5, 5}, true);
    Tensor loss = sum_all(mul(w, w));
    backward(loss);
    CHECK(w.grad()[0] == 2.0);
    CHECK(w.grad()[1] == 4.0);
    CHECK(spectator.grad()[0] == 0.0);
    CHECK(spectator.grad()[1] == 0.0);
}

TEST_CASE("backward rejects non-scalar losses and double invocation") {
    Tensor w = Tensor::from_data({2}, {1, 2}, true);
    CHECK_THROWS_AS(backward(mul(w, w)), ShapeError);
    Tensor loss = sum_all(mul(w, w));
    backward(loss);
    CHECK_THROWS_AS(backward(loss), Error);
}

TEST_CASE("gradients accumulate across shared subexpressions") {
    PrecisionGuard dp(Precision::f64);
    Tensor x = Tensor::from_data({1}, {3.0}, true);
    Tensor y = mul(x, x);              // x^2
    Tensor loss = sum_all(add(y, y));  // 2 x^2 -> d/dx = 4x = 12
    backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(12.0));
}

TEST_CASE("finite differences reproduce known derivatives") {
    Tensor x3 = Tensor::from_data({1}, {3.0});
    Tensor g = finite_diff_grad([](const Tensor& t) { return sum_all(mul(t, t)).item(); }, x3, 1e-4);
    CHECK(g.item() == doctest::Approx(6.0).epsilon(1e-6));

    Tensor x0 = Tensor::from_data({1}, {0.0});
    Tensor gs = finite_diff_grad([](const Tensor& t) { return sum_all(sigmoid(t)).item(); }, x0, 1e-4);
    CHECK(gs.item() == doctest::Approx(0.25).epsilon(1e-6));
}

TEST_CASE("NaN production raises instead of propagating") {
    Tensor big = Tensor::from_data({1}, {1e20});  // finite in f32, square is not
    CHECK_THROWS_AS(mul(big, big), NumericError);
    Tensor z = Tensor::from_data({1}, {0.0});
    CHECK_THROWS_AS(log(z), NumericError);
    PrecisionGuard dp(Precision::f64);
    Tensor huge = Tensor::from_data({1}, {1e308});
    CHECK_THROWS_AS(mul(huge, huge), NumericError);
}

TEST_CASE("f32 mode quantizes op outputs, f64 mode keeps full precision") {
    const double fine = 1.0 + 1e-12;  // not representable in f32
    {
        Tensor t = add_scalar(Tensor::from_data({1}, {1.0}), 1e-12);
        CHECK(t.item() == 1.0);
    }
    {
        PrecisionGuard dp(Precision::f64);
        Tensor t = add_scalar(Tensor::from_data({1}, {1.0}), 1e-12);
        CHECK(t.item() == fine);
    }
}

TEST_CASE("clamp gradient is zero outside the interval") {
    PrecisionGuard dp(Precision::f64);
    Tensor x = Tensor::from_data({3}, {-2.0, 0.5, 2.0}, true);
    backward(sum_all(clamp(x, 0.0, 1.0)));
    CHECK(x.grad()[0] == 0.0);
    CHECK(x.grad()[1] == 1.0);
    CHECK(x.grad()[2] == 0.0);
}

TEST_CASE("softmax rows sum to one; l1 channel normalization columns sum to one") {
    auto rng = substream(5, "softmax");
    Tensor x = rnd({2, 3, 4}, rng, false, -3.0, 3.0);
    PrecisionGuard dp(Precision::f64);
    Tensor s = softmax_last(x);
    for (std::int64_t r = 0; r < 6; ++r) {
        double acc = 0.0;
        for (std::int64_t i = 0; i < 4; ++i) acc += s.data()[static_cast<std::size_t>(r * 4 + i)];
        CHECK(acc == doctest::Approx(1.0).epsilon(1e-12));
    }
    Tensor l1 = l1_normalize_channels(s);
    for (std::int64_t b = 0; b < 2; ++b)
        for (std::int64_t k = 0; k < 4; ++k) {
            double acc = 0.0;
            for (std::int64_t c = 0; c < 3; ++c) acc += l1.data()[static_cast<std::size_t>((b * 3 + c) * 4 + k)];
            CHECK(acc == doctest::Approx(1.0).epsilon(1e-12));
        }
}

TEST_CASE("every differentiable op matches finite differences on random tensors") {
    PrecisionGuard dp(Precision::f64);
    auto rng = substream(6, "opgrad");
    auto check = [&](const char* name, const std::function<Tensor(const Tensor&)>& op, const Shape& shape,
                     double lo = -1.0, double hi = 1.0) {
        Tensor x = rnd(shape, rng, true, lo, hi);
        Tensor probe;
        {
            NoGradGuard ng;
            probe = op(Tensor::from_data(shape, x.data()));
        }
        Tensor weights = rnd(probe.shape(), rng);
        auto scalar_of = [&](const Tensor& t) { return sum_all(mul(op(t), weights)); };
        x.zero_grad();
        backward(scalar_of(x));
        Tensor fd = finite_diff_grad([&](const Tensor& t) { return scalar_of(t).item(); }, x, 1e-5);
        double worst = 0.0;
        for (std::size_t i = 0; i < fd.data().size(); ++i) {
            const double a = x.grad()[i];
            const double f = fd.data()[i];
            worst = std::max(worst, std::abs(a - f) / std::max({std::abs(a), std::abs(f), 1e-6}));
        }
        INFO(name);
        CHECK(worst < 1e-4);
    };

    Tensor other = rnd({2, 3, 2, 2}, rng);
    check("add", [&](const Tensor& t) { return add(t, other); }, {2, 3, 2, 2});
    check("sub", [&](const Tensor& t) { return sub(other, t); }, {2, 3, 2, 2});
    check("mul", [&](const Tensor& t) { return mul(t, other); }, {2, 3, 2, 2});
    check("div", [&](const Tensor& t) { return div(other, t); }, {2, 3, 2, 2}, 0.5, 2.0);
    check("neg", [](const Tensor& t) { return neg(t); }, {5});
    check("add_scalar", [](const Tensor& t) { return add_scalar(t, 0.7); }, {5});
    check("mul_scalar", [](const Tensor& t) { return mul_scalar(t, -1.3); }, {5});
    check("sub_from_scalar", [](const Tensor& t) { return sub_from_scalar(2.0, t); }, {5});
    check("sigmoid", [](const Tensor& t) { return sigmoid(t); }, {7}, -3.0, 3.0);
    check("log", [](const Tensor& t) { return log(t); }, {7}, 0.2, 3.0);
    check("clamp-interior", [](const Tensor& t) { return clamp(t, -10.0, 10.0); }, {7});
    check("reshape", [](const Tensor& t) { return reshape(t, {4, 3}); }, {2, 6});
    check("chunk0", [](const Tensor& t) { return chunk(t, 2)[0]; }, {1, 4, 3, 3});
    check("chunk1", [](const Tensor& t) { return chunk(t, 2)[1]; }, {1, 4, 3, 3});
    check("concat", [&](const Tensor& t) { return concat({t, other}); }, {2, 2, 2, 2});
    check("reduce_mean_keep", [](const Tensor& t) { return reduce(Reduce::mean, t, 1, true); }, {2, 5, 2, 2});
    check("reduce_mean_drop", [](const Tensor& t) { return reduce(Reduce::mean, t, 2, false); }, {2, 3, 4, 2});
    check("reduce_max", [](const Tensor& t) { return reduce(Reduce::max, t, 1, true); }, {2, 5, 2, 2});
    check("sum_all", [](const Tensor& t) { return sum_all(t); }, {3, 4});
    check("mean_all", [](const Tensor& t) { return mean_all(t); }, {3, 4});
    check("softmax_last", [](const Tensor& t) { return softmax_last(t); }, {2, 3, 4}, -2.0, 2.0);
    check("l1_normalize", [](const Tensor& t) { return l1_normalize_channels(t); }, {2, 3, 4}, 0.3, 2.0);

    Tensor gate_c = rnd({2, 3}, rng, false, 0.1, 0.9);
    check("mul_channel_gate_x", [&](const Tensor& t) { return mul_channel_gate(t, gate_c); }, {2, 3, 2, 2});
    Tensor base_x = rnd({2, 3, 2, 2}, rng);
    check("mul_channel_gate_g", [&](const Tensor& t) { return mul_channel_gate(base_x, t); }, {2, 3});
    Tensor gate_s = rnd({2, 1, 2, 2}, rng, false, 0.1, 0.9);
    check("mul_spatial_gate_x", [&](const Tensor& t) { return mul_spatial_gate(t, gate_s); }, {2, 3, 2, 2});
    check("mul_spatial_gate_g", [&](const Tensor& t) { return mul_spatial_gate(base_x, t); }, {2, 1, 2, 2});
}

TEST_CASE("fixture files round-trip shape and f32 payload") {
    auto rng = substream(8, "fixture");
    Tensor t = rnd({2, 3, 5}, rng);
    const std::string path = "fixture_roundtrip.bin";
    write_tensor(path, t);
    Tensor back = read_tensor(path);
    CHECK(back.shape() == t.shape());
    for (std::size_t i = 0; i < t.data().size(); ++i) {
        CHECK(back.data()[i] == static_cast<double>(static_cast<float>(t.data()[i])));
    }
    CHECK_THROWS_AS(read_tensor("does_not_exist.bin"), IoError);
}
