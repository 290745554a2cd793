#include "malunet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "malunet/blocks.hpp"
#include "malunet/network.hpp"
#include "malunet/train.hpp"

namespace malunet {

double gradcheck_max_rel(const std::function<Tensor()>& build_loss, const std::vector<Tensor>& wrt,
                         int max_coords_per_tensor, std::uint64_t seed, double h) {
    PrecisionGuard dp(Precision::f64);
    for (auto t : wrt) t.zero_grad();
    Tensor loss = build_loss();
    backward(loss);
    std::vector<std::vector<double>> analytic;
    analytic.reserve(wrt.size());
    for (const auto& t : wrt) analytic.push_back(t.grad());

    double worst = 0.0;
    for (std::size_t ti = 0; ti < wrt.size(); ++ti) {
        Tensor t = wrt[ti];
        const std::int64_t n = t.size();
        std::vector<std::int64_t> coords;
        if (max_coords_per_tensor < 0 || n <= max_coords_per_tensor) {
            coords.resize(static_cast<std::size_t>(n));
            for (std::int64_t i = 0; i < n; ++i) coords[static_cast<std::size_t>(i)] = i;
        } else {
            auto rng = substream(seed, "gradcheck:" + std::to_string(ti));
            std::unordered_set<std::int64_t> chosen;
            while (static_cast<int>(chosen.size()) < max_coords_per_tensor) {
                chosen.insert(static_cast<std::int64_t>(uniform_index(rng, static_cast<std::uint64_t>(n))));
            }
            coords.assign(chosen.begin(), chosen.end());
            std::sort(coords.begin(), coords.end());
        }
        NoGradGuard ng;
        auto& data = t.mutable_data();
        for (std::int64_t i : coords) {
            const double saved = data[static_cast<std::size_t>(i)];
            data[static_cast<std::size_t>(i)] = saved + h;
            const double fp = build_loss().item();
            data[static_cast<std::size_t>(i)] = saved - h;
            const double fm = build_loss().item();
            data[static_cast<std::size_t>(i)] = saved;
            const double fd = (fp - fm) / (2.0 * h);
            const double an = analytic[ti][static_cast<std::size_t>(i)];
            // Near-zero gradients are compared absolutely: the 1e-4 floor
            // means an absolute gap under 1e-8 passes a 1e-4 tolerance.
            const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-4});
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

namespace {

Tensor random_tensor(const Shape& s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                     bool requires_grad = true) {
    std::vector<double> d(static_cast<std::size_t>(shape_numel(s)));
    for (double& v : d) v = uniform(rng, lo, hi);
    return Tensor::from_data(s, std::move(d), requires_grad);
}

}  // namespace

std::vector<GradCheckEntry> gradcheck_suite(std::uint64_t seed) {
    PrecisionGuard dp(Precision::f64);
    std::vector<GradCheckEntry> report;
    auto rng = substream(seed, "gradcheck-suite");

    {
        Tensor x = random_tensor({1, 4, 6, 6}, rng);
        Tensor w = random_tensor({6, 2, 3, 3}, rng);  // groups 2, dilation 2
        Tensor b = random_tensor({6}, rng);
        Tensor lw = random_tensor({1, 6, 6, 6}, rng, -1, 1, false);
        auto build = [&]() { return sum_all(mul(conv2d(x, w, b, 2, 2, 2), lw)); };
        report.push_back({"conv2d", gradcheck_max_rel(build, {x, w, b}, -1, seed)});
    }
    {
        Tensor x = random_tensor({2, 3, 9}, rng);
        Tensor w = random_tensor({5, 3, 3}, rng);
        Tensor b = random_tensor({5}, rng);
        Tensor lw = random_tensor({2, 5, 9}, rng, -1, 1, false);
        auto build = [&]() { return sum_all(mul(conv1d(x, w, b, 1), lw)); };
        report.push_back({"conv1d", gradcheck_max_rel(build, {x, w, b}, -1, seed)});
    }
    {
        Tensor x = random_tensor({3, 7}, rng);
        Tensor w = random_tensor({4, 7}, rng);
        Tensor b = random_tensor({4}, rng);
        Tensor lw = random_tensor({3, 4}, rng, -1, 1, false);
        auto build = [&]() { return sum_all(mul(linear(x, w, b), lw)); };
        report.push_back({"linear", gradcheck_max_rel(build, {x, w, b}, -1, seed)});
    }
    {
        Tensor x = random_tensor({2, 16, 3, 3}, rng);
        Tensor scale = random_tensor({16}, rng, 0.5, 1.5);
        Tensor shift = random_tensor({16}, rng, -0.5, 0.5);
        Tensor lw = random_tensor({2, 16, 3, 3}, rng, -1, 1, false);
        auto build = [&]() { return sum_all(mul(group_norm(x, norm_groups_for(16), scale, shift), lw)); };
        report.push_back({"group_norm", gradcheck_max_rel(build, {x, scale, shift}, -1, seed)});
    }
    {
        ParamStore store(seed + 1);
        DgaBlock dga(store, "dga", 8);
        Tensor x = random_tensor({1, 8, 6, 6}, rng);
        Tensor lw = random_tensor({1, 8, 6, 6}, rng, -1, 1, false);
        std::vector<Tensor> wrt = store.trainables();
        wrt.push_back(x);
        auto build = [&]() { return sum_all(mul(dga.forward(x), lw)); };
        report.push_back({"DGA", gradcheck_max_rel(build, wrt, -1, seed)});
    }
    {
        ParamStore store(seed + 2);
        IeaBlock iea(store, "iea", 8);
        Tensor x = random_tensor({1, 8, 6, 6}, rng);
        Tensor lw = random_tensor({1, 8, 6, 6}, rng, -1, 1, false);
        std::vector<Tensor> wrt = store.trainables();
        wrt.push_back(x);
        auto build = [&]() { return sum_all(mul(iea.forward(x), lw)); };
        report.push_back({"IEA", gradcheck_max_rel(build, wrt, -1, seed)});
    }
    {
        ParamStore store(seed + 3);
        CabBlock cab(store, "cab", {4, 8});
        Tensor t1 = random_tensor({1, 4, 6, 6}, rng);
        Tensor t2 = random_tensor({1, 8, 3, 3}, rng);
        Tensor lw1 = random_tensor({1, 4, 6, 6}, rng, -1, 1, false);
        Tensor lw2 = random_tensor({1, 8, 3, 3}, rng, -1, 1, false);
        std::vector<Tensor> wrt = store.trainables();
        wrt.push_back(t1);
        wrt.push_back(t2);
        auto build = [&]() {
            auto outs = cab.forward({t1, t2});
            return add(sum_all(mul(outs[0], lw1)), sum_all(mul(outs[1], lw2)));
        };
        report.push_back({"CAB", gradcheck_max_rel(build, wrt, -1, seed)});
    }
    {
        ParamStore store(seed + 4);
        SabBlock sab(store, "sab");
        Tensor t1 = random_tensor({1, 4, 6, 6}, rng);
        Tensor t2 = random_tensor({1, 8, 3, 3}, rng);
        Tensor lw1 = random_tensor({1, 4, 6, 6}, rng, -1, 1, false);
        Tensor lw2 = random_tensor({1, 8, 3, 3}, rng, -1, 1, false);
        std::vector<Tensor> wrt = store.trainables();
        wrt.push_back(t1);
        wrt.push_back(t2);
        auto build = [&]() {
            auto outs = sab.forward({t1, t2});
            return add(sum_all(mul(outs[0], lw1)), sum_all(mul(outs[1], lw2)));
        };
        report.push_back({"SAB", gradcheck_max_rel(build, wrt, -1, seed)});
    }
    {
        Tensor pred = random_tensor({1, 1, 6, 6}, rng, 0.15, 0.85);
        std::vector<double> tgt(36);
        for (double& v : tgt) v = uniform01(rng) < 0.5 ? 0.0 : 1.0;
        Tensor target = Tensor::from_data({1, 1, 6, 6}, std::move(tgt));
        auto build = [&]() { return bce_dice_loss(pred, target); };
        report.push_back({"BceDice", gradcheck_max_rel(build, {pred}, -1, seed)});
    }
    {
        Network net(catalog_config("tiny"), seed + 5);
        Tensor x = random_tensor({1, 3, 16, 16}, rng, 0.0, 1.0);
        std::vector<double> tgt(256);
        for (double& v : tgt) v = uniform01(rng) < 0.4 ? 1.0 : 0.0;
        Tensor target = Tensor::from_data({1, 1, 16, 16}, std::move(tgt));
        std::vector<Tensor> wrt = net.store().trainables();
        wrt.push_back(x);
        auto build = [&]() { return bce_dice_loss(net.forward(x), target); };
        report.push_back({"end2end16", gradcheck_max_rel(build, wrt, 6, seed)});
    }
    return report;
}

}  // namespace malunet
