#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "malunet/tensor.hpp"

namespace malunet {

// ---------------------------------------------------------------------------
// layer specs + closed-form parameter counts
// ---------------------------------------------------------------------------

struct Conv2DSpec {
    int in_channels = 0;
    int out_channels = 0;
    int kernel = 3;
    int stride = 1;  // runnable convolutions are stride 1; pooling downsamples
    int dilation = 1;
    int groups = 1;
    bool bias = true;

    int padding() const { return dilation * (kernel - 1) / 2; }  // same-size rule, odd k
    void validate() const;
    long long param_count() const {
        return 1LL * out_channels * (in_channels / groups) * kernel * kernel + (bias ? out_channels : 0);
    }
};

struct Conv1DSpec {
    int in_channels = 0;
    int out_channels = 0;
    int kernel = 1;
    int padding = 0;
    bool bias = true;

    long long param_count() const {
        return 1LL * out_channels * in_channels * kernel + (bias ? out_channels : 0);
    }
};

struct LinearSpec {
    int in_features = 0;
    int out_features = 0;

    long long param_count() const { return 1LL * out_features * in_features + out_features; }
};

struct DepthwiseSeparableSpec {
    int in_channels = 0;
    int out_channels = 0;
    int kernel = 3;
    int dilation = 1;
    bool depthwise_bias = true;
    bool pointwise_bias = true;

    long long param_count() const {
        return 1LL * in_channels * kernel * kernel + (depthwise_bias ? in_channels : 0) +
               1LL * in_channels * out_channels + (pointwise_bias ? out_channels : 0);
    }
};

// Group size min(8, C); when that does not divide C, the largest divisor of C
// not exceeding it. Returns the number of groups.
int norm_groups_for(int channels);

// ---------------------------------------------------------------------------
// parameter store
// ---------------------------------------------------------------------------

// Ordered registry of every learnable tensor. Creation order is the
// initialization draw order, so a (seed, architecture) pair fully determines
// the weights.
class ParamStore {
  public:
    explicit ParamStore(std::uint64_t seed);

    // fan-in-scaled uniform init: bound = sqrt(1/fan_in)
    Tensor create_uniform(const std::string& name, const Shape& shape, std::int64_t fan_in);
    Tensor create_zeros(const std::string& name, const Shape& shape);
    Tensor create_ones(const std::string& name, const Shape& shape);

    const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
    Tensor get(const std::string& name) const;
    bool has(const std::string& name) const;
    long long total_params() const;
    std::vector<Tensor> trainables() const;
    std::uint64_t seed() const { return seed_; }

    // Checkpoint: a text manifest (name + shape per line) followed by the
    // tensors concatenated in the golden-fixture record format.
    void save(const std::string& path) const;
    void load(const std::string& path);

  private:
    Tensor insert(const std::string& name, Tensor t);

    std::uint64_t seed_;
    std::mt19937_64 rng_;
    std::vector<std::pair<std::string, Tensor>> entries_;
};

// ---------------------------------------------------------------------------
// primitive layer ops
// ---------------------------------------------------------------------------

// 2-D cross-correlation, stride 1, with dilation and groups.
// x: (b,cin,h,w), w: (cout,cin/groups,k,k), bias: (cout) or undefined.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int padding, int dilation, int groups);

// 1-D cross-correlation. x: (b,cin,L), w: (cout,cin,k), bias: (cout) or undefined.
Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& bias, int padding);

// x: (b,n), w: (m,n), bias: (m). Returns x * w^T + bias.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

// 2x2 non-overlapping max; gradient routes to the first maximal element.
Tensor maxpool2(const Tensor& x);

// x2 bilinear, sample centers at (i+0.5)/2 - 0.5 (align-corners disabled).
Tensor upsample_bilinear2(const Tensor& x);

// Per-group standardization then per-channel affine. x: (b,c,h,w).
Tensor group_norm(const Tensor& x, int groups, const Tensor& scale, const Tensor& shift, double eps = 1e-5);

// Smooth gating activation x * sigmoid(1.702 x).
inline Tensor gate_act(const Tensor& x) { return mul(x, sigmoid(mul_scalar(x, 1.702))); }

// ---------------------------------------------------------------------------
// layer modules (weights live in a ParamStore)
// ---------------------------------------------------------------------------

struct Conv2d {
    Conv2DSpec spec;
    Tensor weight, bias;

    Conv2d() = default;
    Conv2d(ParamStore& store, const std::string& name, Conv2DSpec s);
    Tensor operator()(const Tensor& x) const;
};

struct Conv1d {
    Conv1DSpec spec;
    Tensor weight, bias;

    Conv1d() = default;
    Conv1d(ParamStore& store, const std::string& name, Conv1DSpec s);
    Tensor operator()(const Tensor& x) const;
};

struct Linear {
    LinearSpec spec;
    Tensor weight, bias;

    Linear() = default;
    Linear(ParamStore& store, const std::string& name, LinearSpec s);
    Tensor operator()(const Tensor& x) const;
};

struct DepthwiseSeparable {
    DepthwiseSeparableSpec spec;
    Conv2d depthwise, pointwise;

    DepthwiseSeparable() = default;
    DepthwiseSeparable(ParamStore& store, const std::string& name, DepthwiseSeparableSpec s);
    Tensor operator()(const Tensor& x) const;
};

struct GroupNorm {
    int groups = 1;
    double eps = 1e-5;
    Tensor scale, shift;

    GroupNorm() = default;
    GroupNorm(ParamStore& store, const std::string& name, int channels);
    Tensor operator()(const Tensor& x) const;
};

}  // namespace malunet
