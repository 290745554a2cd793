#pragma once

#include <string>
#include <vector>

#include "malunet/data.hpp"
#include "malunet/network.hpp"

namespace malunet {

struct LossConfig {
    double lambda_bce = 1.0;
    double lambda_dice = 1.0;
    double eps_bce = 1e-7;   // probability clamp
    double eps_dice = 1e-6;  // dice smoothing
};

// lambda_bce * Bce + lambda_dice * (1 - (2 soft-intersection + eps)/(|X|+|Y|+eps)).
// pred must hold probabilities, target a binary mask of the same shape.
Tensor bce_dice_loss(const Tensor& pred, const Tensor& target, const LossConfig& cfg = {});

struct ConfusionCounts {
    long long tp = 0, fp = 0, fn = 0, tn = 0;
    long long total() const { return tp + fp + fn + tn; }
    ConfusionCounts& operator+=(const ConfusionCounts& o) {
        tp += o.tp;
        fp += o.fp;
        fn += o.fn;
        tn += o.tn;
        return *this;
    }
};

struct MetricSet {
    double miou = 0, dsc = 0, acc = 0, sen = 0, spe = 0;
};

ConfusionCounts confusion(const Tensor& pred_mask, const Tensor& target);
// A zero denominator means the condition is vacuous and scores 1.0.
MetricSet metrics_from(const ConfusionCounts& c);
MetricSet metrics(const Tensor& pred_mask, const Tensor& target);

Tensor threshold_mask(const Tensor& probs, double threshold = 0.5);

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-2;
};

// Decoupled weight decay with bias-corrected moments.
class AdamW {
  public:
    explicit AdamW(std::vector<Tensor> params, AdamWConfig cfg = {});

    void set_lr(double lr) { cfg_.lr = lr; }
    double lr() const { return cfg_.lr; }
    long long step_count() const { return step_; }
    void zero_grad();
    void step();

  private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> m_, v_;
    AdamWConfig cfg_;
    long long step_ = 0;
};

// eta_min + (eta0 - eta_min) * (1 + cos(pi t / t_max)) / 2; periodic past
// t_max. Endpoints are exact at t = 0 and t = t_max.
double cosine_lr(long long epoch, double eta0 = 1e-3, double eta_min = 1e-5, long long t_max = 50);

// Independent 50% vertical/horizontal flips plus a uniform 90-degree-multiple
// rotation, identical for image and mask. arbitrary_rotation switches the
// rotation to a uniform angle with nearest-neighbor resampling.
void augment(Tensor& image, Tensor& mask, std::mt19937_64& rng, bool arbitrary_rotation = false);

struct TrainLogRow {
    long long epoch = 0;
    double lr = 0, loss = 0, dsc = 0;
};

// Line format: epoch,lr,loss,dsc
std::string format_log(const std::vector<TrainLogRow>& log);

std::vector<TrainLogRow> train_loop(Network& net, const std::vector<SamplePair>& data, long long epochs,
                                    int batch_size, std::uint64_t seed, const LossConfig& loss_cfg = {});

}  // namespace malunet
