#include "malunet/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace malunet {

Tensor bce_dice_loss(const Tensor& pred, const Tensor& target, const LossConfig& cfg) {
    if (pred.shape() != target.shape()) {
        throw ShapeError("bce_dice_loss: shape mismatch " + shape_str(pred.shape()) + " vs " +
                         shape_str(target.shape()));
    }
    if (cfg.lambda_bce < 0 || cfg.lambda_dice < 0 || cfg.eps_bce <= 0 || cfg.eps_dice <= 0) {
        throw ConfigError("bce_dice_loss: weights must be >= 0 and epsilons > 0");
    }
    for (double v : target.data()) {
        if (v != 0.0 && v != 1.0) throw NumericError("bce_dice_loss: target must be binary");
    }
    Tensor y = target;
    Tensor one_minus_y = sub_from_scalar(1.0, y);
    Tensor p = clamp(pred, cfg.eps_bce, 1.0 - cfg.eps_bce);
    Tensor q = clamp(sub_from_scalar(1.0, pred), cfg.eps_bce, 1.0 - cfg.eps_bce);
    Tensor bce = neg(mean_all(add(mul(y, log(p)), mul(one_minus_y, log(q)))));

    Tensor inter = sum_all(mul(pred, y));
    Tensor denom = add_scalar(add(sum_all(pred), sum_all(y)), cfg.eps_dice);
    Tensor dice = sub_from_scalar(1.0, div(add_scalar(mul_scalar(inter, 2.0), cfg.eps_dice), denom));

    return add(mul_scalar(bce, cfg.lambda_bce), mul_scalar(dice, cfg.lambda_dice));
}

ConfusionCounts confusion(const Tensor& pred_mask, const Tensor& target) {
    if (pred_mask.shape() != target.shape()) {
        throw ShapeError("confusion: shape mismatch " + shape_str(pred_mask.shape()) + " vs " +
                         shape_str(target.shape()));
    }
    ConfusionCounts c;
    const auto& p = pred_mask.data();
    const auto& t = target.data();
    for (std::size_t i = 0; i < p.size(); ++i) {
        if ((p[i] != 0.0 && p[i] != 1.0) || (t[i] != 0.0 && t[i] != 1.0)) {
            throw NumericError("confusion: inputs must be binary");
        }
        if (p[i] == 1.0) {
            t[i] == 1.0 ? ++c.tp : ++c.fp;
        } else {
            t[i] == 1.0 ? ++c.fn : ++c.tn;
        }
    }
    return c;
}

namespace {
double ratio(long long num, long long den) { return den == 0 ? 1.0 : static_cast<double>(num) / static_cast<double>(den); }
}  // namespace

MetricSet metrics_from(const ConfusionCounts& c) {
    MetricSet m;
    m.miou = ratio(c.tp, c.tp + c.fp + c.fn);
    m.dsc = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn);
    m.acc = ratio(c.tp + c.tn, c.total());
    m.sen = ratio(c.tp, c.tp + c.fn);
    m.spe = ratio(c.tn, c.tn + c.fp);
    return m;
}

MetricSet metrics(const Tensor& pred_mask, const Tensor& target) { return metrics_from(confusion(pred_mask, target)); }

Tensor threshold_mask(const Tensor& probs, double threshold) {
    std::vector<double> d(probs.data().size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = probs.data()[i] >= threshold ? 1.0 : 0.0;
    return Tensor::from_data(probs.shape(), std::move(d));
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

AdamW::AdamW(std::vector<Tensor> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& p : params_) {
        m_.emplace_back(p.data().size(), 0.0);
        v_.emplace_back(p.data().size(), 0.0);
    }
}

void AdamW::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

void AdamW::step() {
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    const bool quantize = scalar_precision() == Precision::f32;
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto& w = params_[i].mutable_data();
        const auto& g = params_[i].grad();
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t k = 0; k < w.size(); ++k) {
            w[k] -= cfg_.lr * cfg_.weight_decay * w[k];
            m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * g[k];
            v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * g[k] * g[k];
            const double mhat = m[k] / bc1;
            const double vhat = v[k] / bc2;
            w[k] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            if (quantize) w[k] = static_cast<double>(static_cast<float>(w[k]));
        }
    }
}

double cosine_lr(long long epoch, double eta0, double eta_min, long long t_max) {
    if (epoch < 0) throw ConfigError("cosine_lr: epoch must be >= 0");
    if (t_max <= 0) throw ConfigError("cosine_lr: t_max must be positive");
    const double c = 0.5 * (1.0 + std::cos(3.14159265358979323846 * static_cast<double>(epoch) /
                                           static_cast<double>(t_max)));
    return eta_min * (1.0 - c) + eta0 * c;
}

// ---------------------------------------------------------------------------
// augmentation
// ---------------------------------------------------------------------------

namespace {

Tensor flip_h(const Tensor& t) {  // reverse the width axis of (c,h,w)
    const std::int64_t c = t.shape()[0], h = t.shape()[1], w = t.shape()[2];
    std::vector<double> d(t.data().size());
    for (std::int64_t ch = 0; ch < c; ++ch)
        for (std::int64_t y = 0; y < h; ++y)
            for (std::int64_t x = 0; x < w; ++x)
                d[static_cast<std::size_t>((ch * h + y) * w + x)] = t.data()[static_cast<std::size_t>((ch * h + y) * w + (w - 1 - x))];
    return Tensor::from_data(t.shape(), std::move(d));
}

Tensor flip_v(const Tensor& t) {  // reverse the height axis
    const std::int64_t c = t.shape()[0], h = t.shape()[1], w = t.shape()[2];
    std::vector<double> d(t.data().size());
    for (std::int64_t ch = 0; ch < c; ++ch)
        for (std::int64_t y = 0; y < h; ++y)
            for (std::int64_t x = 0; x < w; ++x)
                d[static_cast<std::size_t>((ch * h + y) * w + x)] = t.data()[static_cast<std::size_t>((ch * h + (h - 1 - y)) * w + x)];
    return Tensor::from_data(t.shape(), std::move(d));
}

Tensor rot90(const Tensor& t) {  // (y,x) -> (x, h-1-y)
    const std::int64_t c = t.shape()[0], h = t.shape()[1], w = t.shape()[2];
    std::vector<double> d(t.data().size());
    for (std::int64_t ch = 0; ch < c; ++ch)
        for (std::int64_t y = 0; y < h; ++y)
            for (std::int64_t x = 0; x < w; ++x)
                d[static_cast<std::size_t>((ch * w + x) * h + (h - 1 - y))] = t.data()[static_cast<std::size_t>((ch * h + y) * w + x)];
    return Tensor::from_data({c, w, h}, std::move(d));
}

Tensor rotate_nearest(const Tensor& t, double angle) {
    const std::int64_t c = t.shape()[0], h = t.shape()[1], w = t.shape()[2];
    const double cy = 0.5 * static_cast<double>(h - 1), cx = 0.5 * static_cast<double>(w - 1);
    const double ca = std::cos(angle), sa = std::sin(angle);
    std::vector<double> d(t.data().size(), 0.0);
    for (std::int64_t ch = 0; ch < c; ++ch)
        for (std::int64_t y = 0; y < h; ++y)
            for (std::int64_t x = 0; x < w; ++x) {
                // pull from the source via the inverse rotation
                const double sx = ca * (x - cx) + sa * (y - cy) + cx;
                const double sy = -sa * (x - cx) + ca * (y - cy) + cy;
                const std::int64_t ix = static_cast<std::int64_t>(std::lround(sx));
                const std::int64_t iy = static_cast<std::int64_t>(std::lround(sy));
                if (ix >= 0 && ix < w && iy >= 0 && iy < h)
                    d[static_cast<std::size_t>((ch * h + y) * w + x)] = t.data()[static_cast<std::size_t>((ch * h + iy) * w + ix)];
            }
    return Tensor::from_data(t.shape(), std::move(d));
}

}  // namespace

void augment(Tensor& image, Tensor& mask, std::mt19937_64& rng, bool arbitrary_rotation) {
    if (image.rank() != 3 || mask.rank() != 3 || image.shape()[1] != mask.shape()[1] ||
        image.shape()[2] != mask.shape()[2]) {
        throw ShapeError("augment: image and mask spatial extents must match");
    }
    const bool vflip = uniform01(rng) < 0.5;
    const bool hflip = uniform01(rng) < 0.5;
    if (vflip) {
        image = flip_v(image);
        mask = flip_v(mask);
    }
    if (hflip) {
        image = flip_h(image);
        mask = flip_h(mask);
    }
    if (arbitrary_rotation) {
        const double angle = uniform(rng, 0.0, 2.0 * 3.14159265358979323846);
        image = rotate_nearest(image, angle);
        mask = rotate_nearest(mask, angle);
        return;
    }
    int k = static_cast<int>(uniform_index(rng, 4));
    if (image.shape()[1] != image.shape()[2] && (k % 2) == 1) k = (k + 1) % 4;  // keep non-square shapes stable
    for (int r = 0; r < k; ++r) {
        image = rot90(image);
        mask = rot90(mask);
    }
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

std::string format_log(const std::vector<TrainLogRow>& log) {
    std::ostringstream os;
    os.precision(10);
    for (const auto& r : log) {
        os << r.epoch << "," << r.lr << "," << r.loss << "," << r.dsc << "\n";
    }
    return os.str();
}

std::vector<TrainLogRow> train_loop(Network& net, const std::vector<SamplePair>& data, long long epochs,
                                    int batch_size, std::uint64_t seed, const LossConfig& loss_cfg) {
    if (data.empty()) throw ConfigError("train: dataset is empty");
    if (batch_size < 1) throw ConfigError("train: batch size must be >= 1");
    const int f = net.config().downsample_factor();
    for (const auto& s : data) {
        const std::int64_t h = s.image.shape()[1], w = s.image.shape()[2];
        if (h % f != 0 || w % f != 0) {
            throw ConfigError("train: sample " + s.id + " extents " + std::to_string(h) + "x" + std::to_string(w) +
                              " not divisible by " + std::to_string(f));
        }
    }
    AdamW opt(net.store().trainables());
    auto shuffle_rng = substream(seed, "shuffle");
    auto aug_rng = substream(seed, "augment");
    std::vector<TrainLogRow> log;
    log.reserve(static_cast<std::size_t>(epochs));

    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    const std::int64_t c_img = data[0].image.shape()[0];
    const std::int64_t h = data[0].image.shape()[1], w = data[0].image.shape()[2];

    for (long long epoch = 0; epoch < epochs; ++epoch) {
        const double lr = cosine_lr(epoch);
        opt.set_lr(lr);
        for (std::size_t i = order.size(); i > 1; --i) {
            std::swap(order[i - 1], order[static_cast<std::size_t>(uniform_index(shuffle_rng, i))]);
        }
        double loss_sum = 0.0;
        std::int64_t seen = 0;
        ConfusionCounts epoch_counts;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch_size)) {
            const std::size_t bsz = std::min(static_cast<std::size_t>(batch_size), order.size() - start);
            std::vector<double> xb(bsz * static_cast<std::size_t>(c_img * h * w));
            std::vector<double> yb(bsz * static_cast<std::size_t>(h * w));
            for (std::size_t j = 0; j < bsz; ++j) {
                Tensor img = data[order[start + j]].image;
                Tensor msk = data[order[start + j]].mask;
                augment(img, msk, aug_rng);
                std::copy(img.data().begin(), img.data().end(), xb.begin() + static_cast<std::ptrdiff_t>(j * static_cast<std::size_t>(c_img * h * w)));
                std::copy(msk.data().begin(), msk.data().end(), yb.begin() + static_cast<std::ptrdiff_t>(j * static_cast<std::size_t>(h * w)));
            }
            Tensor x = Tensor::from_data({static_cast<std::int64_t>(bsz), c_img, h, w}, std::move(xb));
            Tensor y = Tensor::from_data({static_cast<std::int64_t>(bsz), 1, h, w}, std::move(yb));
            Tensor pred = net.forward(x);
            Tensor loss = bce_dice_loss(pred, y, loss_cfg);
            opt.zero_grad();
            backward(loss);
            opt.step();
            loss_sum += loss.item() * static_cast<double>(bsz);
            seen += static_cast<std::int64_t>(bsz);
            epoch_counts += confusion(threshold_mask(pred), y);
        }
        log.push_back({epoch, lr, loss_sum / static_cast<double>(seen), metrics_from(epoch_counts).dsc});
    }
    return log;
}

}  // namespace malunet
