#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "malunet/gradcheck.hpp"
#include "malunet/train.hpp"

using namespace malunet;

namespace {

Tensor rnd(const Shape& s, std::mt19937_64& rng, bool grad = false, double lo = 0.0, double hi = 1.0) {
    std::vector<double> d(static_cast<std::size_t>(shape_numel(s)));
    for (double& v : d) v = uniform(rng, lo, hi);
    return Tensor::from_data(s, std::move(d), grad);
}

Tensor random_binary(const Shape& s, std::mt19937_64& rng, double p = 0.5) {
    std::vector<double> d(static_cast<std::size_t>(shape_numel(s)));
    for (double& v : d) v = uniform01(rng) < p ? 1.0 : 0.0;
    return Tensor::from_data(s, std::move(d));
}

}  // namespace

TEST_CASE("perfect prediction gives near-zero loss; zero weights give zero") {
    PrecisionGuard dp(Precision::f64);
    auto rng = substream(41, "loss");
    Tensor target = random_binary({1, 1, 8, 8}, rng);
    Tensor pred = clamp(target, 1e-7, 1.0 - 1e-7);
    CHECK(bce_dice_loss(pred, target).item() < 1e-3);

    LossConfig off{.lambda_bce = 0.0, .lambda_dice = 0.0};
    CHECK(bce_dice_loss(pred, target, off).item() == 0.0);
}

TEST_CASE("uniform 0.5 prediction on a half-ones mask hits the closed form") {
    PrecisionGuard dp(Precision::f64);
    std::vector<double> t(64, 0.0);
    for (std::size_t i = 0; i < 32; ++i) t[i] = 1.0;
    Tensor target = Tensor::from_data({1, 1, 8, 8}, std::move(t));
    Tensor pred = Tensor::full({1, 1, 8, 8}, 0.5);
    const double loss = bce_dice_loss(pred, target).item();
    const double want = std::log(2.0) + 0.5;  // 1.1931
    CHECK(loss == doctest::Approx(want).epsilon(1e-4));
}

TEST_CASE("loss terms stay in range and reject shape or label violations") {
    auto rng = substream(42, "lossrange");
    for (int trial = 0; trial < 25; ++trial) {
        Tensor target = random_binary({1, 1, 6, 6}, rng, uniform01(rng));
        Tensor pred = rnd({1, 1, 6, 6}, rng, false, 0.01, 0.99);
        LossConfig only_dice{.lambda_bce = 0.0, .lambda_dice = 1.0};
        const double dice = bce_dice_loss(pred, target, only_dice).item();
        CHECK(dice >= 0.0);
        CHECK(dice <= 1.0);
        LossConfig only_bce{.lambda_bce = 1.0, .lambda_dice = 0.0};
        CHECK(bce_dice_loss(pred, target, only_bce).item() >= 0.0);
    }
    CHECK_THROWS_AS(bce_dice_loss(Tensor::ones({1, 1, 2, 2}), Tensor::ones({1, 1, 2, 3})), ShapeError);
    CHECK_THROWS_AS(bce_dice_loss(Tensor::full({1}, 0.5), Tensor::full({1}, 0.25)), NumericError);
}

TEST_CASE("loss gradient passes finite differences") {
    auto rng = substream(43, "lossgrad");
    Tensor pred = rnd({1, 1, 5, 5}, rng, true, 0.15, 0.85);
    Tensor target = random_binary({1, 1, 5, 5}, rng);
    auto build = [&]() { return bce_dice_loss(pred, target); };
    CHECK(gradcheck_max_rel(build, {pred}) < 1e-4);
}

TEST_CASE("metrics on the hand-enumerated confusion matrix") {
    Tensor target = Tensor::from_data({2, 2}, {1, 0, 1, 1});
    Tensor pred = Tensor::from_data({2, 2}, {1, 1, 0, 1});
    ConfusionCounts c = confusion(pred, target);
    CHECK(c.tp == 2);
    CHECK(c.fp == 1);
    CHECK(c.fn == 1);
    CHECK(c.tn == 0);
    MetricSet m = metrics(pred, target);
    CHECK(m.miou == doctest::Approx(0.5));
    CHECK(m.dsc == doctest::Approx(2.0 / 3.0));
    CHECK(m.acc == doctest::Approx(0.5));
    CHECK(m.sen == doctest::Approx(2.0 / 3.0));
    CHECK(m.spe == doctest::Approx(0.0));
}

TEST_CASE("identical masks score 1.0 on all five metrics; empty-empty is by convention perfect") {
    auto rng = substream(44, "ident");
    Tensor m = random_binary({1, 16, 16}, rng, 0.4);
    MetricSet s = metrics(m, m);
    CHECK(s.miou == 1.0);
    CHECK(s.dsc == 1.0);
    CHECK(s.acc == 1.0);
    CHECK(s.sen == 1.0);
    CHECK(s.spe == 1.0);

    Tensor zero = Tensor::zeros({1, 4, 4});
    MetricSet z = metrics(zero, zero);
    CHECK(z.miou == 1.0);
    CHECK(z.sen == 1.0);

    // disjoint masks: no true positives
    Tensor a = Tensor::from_data({4}, {1, 1, 0, 0});
    Tensor b = Tensor::from_data({4}, {0, 0, 1, 1});
    MetricSet d = metrics(a, b);
    CHECK(d.miou == 0.0);
    CHECK(d.spe == 0.0);
}

TEST_CASE("metrics match a brute-force confusion oracle exactly over 100 random pairs") {
    auto rng = substream(45, "oracle");
    for (int trial = 0; trial < 100; ++trial) {
        Tensor pred = random_binary({1, 16, 16}, rng, uniform01(rng));
        Tensor target = random_binary({1, 16, 16}, rng, uniform01(rng));
        long long tp = 0, fp = 0, fn = 0, tn = 0;
        for (std::size_t i = 0; i < 256; ++i) {
            const bool p = pred.data()[i] == 1.0, t = target.data()[i] == 1.0;
            if (p && t) ++tp;
            if (p && !t) ++fp;
            if (!p && t) ++fn;
            if (!p && !t) ++tn;
        }
        MetricSet got = metrics(pred, target);
        auto r = [](long long num, long long den) { return den == 0 ? 1.0 : double(num) / double(den); };
        CHECK(got.miou == r(tp, tp + fp + fn));
        CHECK(got.dsc == r(2 * tp, 2 * tp + fp + fn));
        CHECK(got.acc == r(tp + tn, tp + tn + fp + fn));
        CHECK(got.sen == r(tp, tp + fn));
        CHECK(got.spe == r(tn, tn + fp));
    }
}

TEST_CASE("DSC equals 2 mIoU/(1+mIoU) on random masks") {
    auto rng = substream(46, "identity");
    for (int trial = 0; trial < 60; ++trial) {
        Tensor pred = random_binary({1, 12, 12}, rng, uniform01(rng));
        Tensor target = random_binary({1, 12, 12}, rng, uniform01(rng));
        MetricSet m = metrics(pred, target);
        CHECK(m.dsc == doctest::Approx(2.0 * m.miou / (1.0 + m.miou)).epsilon(1e-12));
    }
}

TEST_CASE("swapping prediction and target preserves Acc/DSC and exchanges FP/FN; complement swaps Sen/Spe") {
    auto rng = substream(47, "swap");
    for (int trial = 0; trial < 40; ++trial) {
        Tensor pred = random_binary({1, 10, 10}, rng, uniform01(rng));
        Tensor target = random_binary({1, 10, 10}, rng, uniform01(rng));
        ConfusionCounts c = confusion(pred, target);
        ConfusionCounts cs = confusion(target, pred);
        CHECK(cs.tp == c.tp);
        CHECK(cs.tn == c.tn);
        CHECK(cs.fp == c.fn);
        CHECK(cs.fn == c.fp);
        MetricSet m = metrics_from(c), ms = metrics_from(cs);
        CHECK(ms.acc == m.acc);
        CHECK(ms.dsc == m.dsc);

        Tensor predc = sub_from_scalar(1.0, pred);
        Tensor targetc = sub_from_scalar(1.0, target);
        MetricSet mc = metrics(predc, targetc);
        CHECK(mc.sen == m.spe);
        CHECK(mc.spe == m.sen);
    }
}

TEST_CASE("AdamW single-step closed form and degenerate updates") {
    PrecisionGuard dp(Precision::f64);
    {
        Tensor w = Tensor::from_data({1}, {1.0}, true);
        w.zero_grad();
        Tensor loss = sum_all(w);  // gradient 1
        backward(loss);
        AdamW opt({w}, {.lr = 1e-3, .weight_decay = 1e-2});
        opt.step();
        const double mhat = 1.0, vhat = 1.0;
        const double want = 1.0 - 1e-3 * 1e-2 * 1.0 - 1e-3 * mhat / (std::sqrt(vhat) + 1e-8);
        CHECK(w.data()[0] == doctest::Approx(want).epsilon(1e-12));
        CHECK(w.data()[0] == doctest::Approx(0.99899).epsilon(1e-4));
    }
    {
        Tensor w = Tensor::from_data({2}, {0.4, -0.3}, true);
        w.zero_grad();
        AdamW opt({w}, {.lr = 1e-3, .weight_decay = 0.0});
        opt.step();  // zero grads, zero decay
        CHECK(w.data() == std::vector<double>{0.4, -0.3});
    }
    {
        Tensor w = Tensor::from_data({2}, {0.4, -0.3}, true);
        w.zero_grad();
        AdamW opt({w}, {.lr = 0.1, .weight_decay = 0.5});
        opt.step();  // pure multiplicative shrink by (1 - lr wd)
        CHECK(w.data()[0] == doctest::Approx(0.4 * 0.95).epsilon(1e-12));
        CHECK(w.data()[1] == doctest::Approx(-0.3 * 0.95).epsilon(1e-12));
    }
}

TEST_CASE("cosine schedule endpoints are exact; midpoint and range hold") {
    CHECK(cosine_lr(0) == 0.001);
    CHECK(cosine_lr(50) == 0.00001);
    CHECK(cosine_lr(25) == doctest::Approx(0.000505).epsilon(1e-10));
    for (long long t = 0; t <= 300; ++t) {
        const double lr = cosine_lr(t);
        CHECK(lr >= 0.00001);
        CHECK(lr <= 0.001);
    }
    // periodic continuation past t_max
    CHECK(cosine_lr(100) == doctest::Approx(0.001).epsilon(1e-12));
    CHECK_THROWS_AS(cosine_lr(-1), ConfigError);
}

TEST_CASE("augmentation: identity draw, flip involution, binary masks stay binary") {
    auto rng = substream(48, "aug");
    Tensor img = rnd({3, 8, 8}, rng);
    Tensor msk = random_binary({1, 8, 8}, rng, 0.3);

    // a stream that draws >= 0.5 twice then k=0 leaves the pair unchanged;
    // find such a stream deterministically
    for (std::uint64_t s = 0; s < 64; ++s) {
        auto probe = substream(s, "identity-probe");
        const bool v = uniform01(probe) < 0.5, h = uniform01(probe) < 0.5;
        const int k = static_cast<int>(uniform_index(probe, 4));
        if (!v && !h && k == 0) {
            auto use = substream(s, "identity-probe");
            Tensor i2 = img, m2 = msk;
            augment(i2, m2, use);
            CHECK(i2.data() == img.data());
            CHECK(m2.data() == msk.data());
            break;
        }
    }

    // applying a horizontal flip twice recovers the original: emulate by
    // finding two streams that flip horizontally only, with k=0
    int found = 0;
    Tensor i2 = img, m2 = msk;
    for (std::uint64_t s = 0; s < 256 && found < 2; ++s) {
        auto probe = substream(s, "hflip-probe");
        const bool v = uniform01(probe) < 0.5, h = uniform01(probe) < 0.5;
        const int k = static_cast<int>(uniform_index(probe, 4));
        if (!v && h && k == 0) {
            auto use = substream(s, "hflip-probe");
            augment(i2, m2, use);
            ++found;
        }
    }
    REQUIRE(found == 2);
    CHECK(i2.data() == img.data());
    CHECK(m2.data() == msk.data());

    for (int trial = 0; trial < 20; ++trial) {
        Tensor ai = img, am = msk;
        augment(ai, am, rng);
        for (double v : am.data()) CHECK((v == 0.0 || v == 1.0));
        CHECK(ai.shape() == img.shape());
    }

    // arbitrary-angle rotation keeps masks binary too
    for (int trial = 0; trial < 5; ++trial) {
        Tensor ai = img, am = msk;
        augment(ai, am, rng, true);
        for (double v : am.data()) CHECK((v == 0.0 || v == 1.0));
    }
}

TEST_CASE("train_loop: zero epochs leave the net untouched; logs are seed-deterministic") {
    ArchConfig cfg = catalog_config("tiny");
    auto data = synth_dataset(4, 16, 99);

    Network net(cfg, 1);
    std::vector<std::vector<double>> before;
    for (const auto& [n, t] : net.store().entries()) before.push_back(t.data());
    auto log0 = train_loop(net, data, 0, 2, 5);
    CHECK(log0.empty());
    std::size_t idx = 0;
    for (const auto& [n, t] : net.store().entries()) CHECK(t.data() == before[idx++]);

    Network a(cfg, 1), b(cfg, 1);
    auto la = train_loop(a, data, 3, 2, 5);
    auto lb = train_loop(b, data, 3, 2, 5);
    CHECK(format_log(la) == format_log(lb));
    REQUIRE(la.size() == 3);
    CHECK(la[0].lr == 0.001);

    CHECK_THROWS_AS(train_loop(a, {}, 1, 2, 5), ConfigError);
}

TEST_CASE("a short training run reduces the loss on a tiny synthetic set") {
    ArchConfig cfg = catalog_config("tiny");
    Network net(cfg, 3);
    auto data = synth_dataset(4, 16, 7);
    auto log = train_loop(net, data, 12, 2, 11);
    REQUIRE(log.size() == 12);
    CHECK(log.back().loss < log.front().loss);
}
