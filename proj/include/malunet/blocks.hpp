#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "malunet/nn.hpp"

namespace malunet {

// Dilated Gated Attention. Two sub-units: SDC splits the channels four ways
// and runs depthwise-separable convs at dilations 1/2/5/7 before a 1x1 fuse;
// GA gates the fused feature with a sigmoid attention map and adds a residual
// projection. Shape-preserving; channels must be divisible by 4.
struct DgaBlock {
    static constexpr std::array<int, 4> kDilations{1, 2, 5, 7};

    int channels = 0;
    bool with_norm = true;
    bool with_act = true;
    std::array<DepthwiseSeparable, 4> branches;
    std::array<GroupNorm, 4> branch_norms;  // active when with_norm
    Conv2d fuse;                            // 1x1 C->C
    GroupNorm fuse_norm;
    DepthwiseSeparable att_gen, pre_gate, post_gate;
    Conv2d residual;  // 1x1 C->C

    DgaBlock() = default;
    DgaBlock(ParamStore& store, const std::string& name, int channels, bool with_norm = true, bool with_act = true);

    Tensor sdc(const Tensor& x) const;        // split-dilate-fuse -> X'
    Tensor attention(const Tensor& x) const;  // sigma(att_gen(sdc(x))), in (0,1)
    Tensor forward(const Tensor& x) const;
};

// Inverted External Attention. 1x1 entry, two memory units over the
// flattened spatial axis expanding the channels fourfold and back, 1x1 exit,
// residual add. The optional double normalization (softmax over space, L1
// over the expanded channels) is off by default.
struct IeaBlock {
    int channels = 0;
    bool double_normalize = false;
    Conv2d entry, exit_conv;
    Conv1d m1, m2;

    IeaBlock() = default;
    IeaBlock(ParamStore& store, const std::string& name, int channels, bool double_normalize = false);

    Tensor forward(const Tensor& x) const;

    static long long param_count(int channels) {
        const long long c = channels;
        return (c * c + c) + (4 * c * c + 4 * c) + (4 * c * c + c) + (c * c + c);
    }
};

// Channel Attention Bridge. Pools every stage feature to a channel
// descriptor, fuses the concatenated descriptor locally with a kernel-3
// Conv1D, then maps it to one sigmoid gate vector per stage.
struct CabBlock {
    std::vector<int> stage_channels;
    Conv1d fuse;  // 1 channel -> 1 channel, kernel 3, padding 1
    std::vector<Linear> fcs;

    CabBlock() = default;
    CabBlock(ParamStore& store, const std::string& name, std::vector<int> stage_channels);

    int total_channels() const;
    Tensor descriptor(const std::vector<Tensor>& ts) const;       // (b, C_total)
    std::vector<Tensor> gates(const std::vector<Tensor>& ts) const;  // (b, c_i) each
    std::vector<Tensor> forward(const std::vector<Tensor>& ts) const;
};

// Spatial Attention Bridge. Channel mean/max maps through one conv shared by
// every stage (kernel 7, dilation 3, padding 9) into a sigmoid gate per pixel.
struct SabBlock {
    Conv2d shared;  // 2 -> 1

    SabBlock() = default;
    SabBlock(ParamStore& store, const std::string& name);

    Tensor gate(const Tensor& t) const;  // (b,1,h,w)
    std::vector<Tensor> forward(const std::vector<Tensor>& ts) const;

    static long long param_count() { return 1 * 2 * 7 * 7 + 1; }
};

}  // namespace malunet
