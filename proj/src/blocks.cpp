#include "malunet/blocks.hpp"

namespace malunet {

// ---------------------------------------------------------------------------
// DGA
// ---------------------------------------------------------------------------

DgaBlock::DgaBlock(ParamStore& store, const std::string& name, int c, bool norm, bool act)
    : channels(c), with_norm(norm), with_act(act) {
    if (c % 4 != 0) {
        throw ConfigError("DGA: channels must be divisible by 4, got " + std::to_string(c));
    }
    const int q = c / 4;
    for (int j = 0; j < 4; ++j) {
        branches[static_cast<std::size_t>(j)] =
            DepthwiseSeparable(store, name + ".branch" + std::to_string(j),
                               {.in_channels = q,
                                .out_channels = q,
                                .kernel = 3,
                                .dilation = kDilations[static_cast<std::size_t>(j)],
                                .depthwise_bias = true,
                                .pointwise_bias = !with_norm});
        if (with_norm) {
            branch_norms[static_cast<std::size_t>(j)] = GroupNorm(store, name + ".branch" + std::to_string(j) + ".norm", q);
        }
    }
    fuse = Conv2d(store, name + ".fuse", {.in_channels = c, .out_channels = c, .kernel = 1, .bias = !with_norm});
    if (with_norm) fuse_norm = GroupNorm(store, name + ".fuse_norm", c);
    att_gen = DepthwiseSeparable(store, name + ".att", {.in_channels = c, .out_channels = c});
    pre_gate = DepthwiseSeparable(store, name + ".pre", {.in_channels = c, .out_channels = c});
    post_gate = DepthwiseSeparable(store, name + ".post", {.in_channels = c, .out_channels = c});
    residual = Conv2d(store, name + ".res", {.in_channels = c, .out_channels = c, .kernel = 1, .bias = true});
}

Tensor DgaBlock::sdc(const Tensor& x) const {
    auto parts = chunk(x, 4);
    std::vector<Tensor> ys;
    ys.reserve(4);
    for (int j = 0; j < 4; ++j) {
        Tensor y = branches[static_cast<std::size_t>(j)](parts[static_cast<std::size_t>(j)]);
        if (with_norm) y = branch_norms[static_cast<std::size_t>(j)](y);
        if (with_act) y = gate_act(y);
        ys.push_back(y);
    }
    Tensor fused = fuse(concat(ys));
    if (with_norm) fused = fuse_norm(fused);
    if (with_act) fused = gate_act(fused);
    return fused;
}

Tensor DgaBlock::attention(const Tensor& x) const {
    return sigmoid(att_gen(sdc(x)));
}

Tensor DgaBlock::forward(const Tensor& x) const {
    Tensor fused = sdc(x);
    Tensor att = sigmoid(att_gen(fused));
    Tensor gated = post_gate(mul(pre_gate(fused), att));
    return add(gated, residual(fused));
}

// ---------------------------------------------------------------------------
// IEA
// ---------------------------------------------------------------------------

IeaBlock::IeaBlock(ParamStore& store, const std::string& name, int c, bool dn) : channels(c), double_normalize(dn) {
    entry = Conv2d(store, name + ".entry", {.in_channels = c, .out_channels = c, .kernel = 1});
    m1 = Conv1d(store, name + ".m1", {.in_channels = c, .out_channels = 4 * c, .kernel = 1});
    m2 = Conv1d(store, name + ".m2", {.in_channels = 4 * c, .out_channels = c, .kernel = 1});
    exit_conv = Conv2d(store, name + ".exit", {.in_channels = c, .out_channels = c, .kernel = 1});
}

Tensor IeaBlock::forward(const Tensor& x) const {
    if (x.rank() != 4 || x.shape()[1] != channels) {
        throw ShapeError("IEA: want (b," + std::to_string(channels) + ",h,w), got " + shape_str(x.shape()));
    }
    const std::int64_t b = x.shape()[0], h = x.shape()[2], w = x.shape()[3];
    Tensor y = entry(x);
    Tensor seq = reshape(y, {b, channels, h * w});
    Tensor expanded = m1(seq);
    if (double_normalize) {
        expanded = softmax_last(expanded);
        expanded = l1_normalize_channels(expanded);
    }
    Tensor restored = m2(expanded);
    Tensor z = reshape(restored, x.shape());
    return add(exit_conv(z), x);
}

// ---------------------------------------------------------------------------
// CAB
// ---------------------------------------------------------------------------

CabBlock::CabBlock(ParamStore& store, const std::string& name, std::vector<int> channels)
    : stage_channels(std::move(channels)) {
    if (stage_channels.empty()) throw ConfigError("CAB: needs at least one stage");
    fuse = Conv1d(store, name + ".fuse", {.in_channels = 1, .out_channels = 1, .kernel = 3, .padding = 1});
    const int ct = total_channels();
    for (std::size_t i = 0; i < stage_channels.size(); ++i) {
        fcs.push_back(Linear(store, name + ".fc" + std::to_string(i + 1),
                             {.in_features = ct, .out_features = stage_channels[i]}));
    }
}

int CabBlock::total_channels() const {
    int ct = 0;
    for (int c : stage_channels) ct += c;
    return ct;
}

Tensor CabBlock::descriptor(const std::vector<Tensor>& ts) const {
    if (ts.size() != stage_channels.size()) {
        throw ShapeError("CAB: got " + std::to_string(ts.size()) + " stage features, expected " +
                         std::to_string(stage_channels.size()));
    }
    std::vector<Tensor> pooled;
    pooled.reserve(ts.size());
    for (std::size_t i = 0; i < ts.size(); ++i) {
        const Tensor& t = ts[i];
        if (t.rank() != 4 || t.shape()[1] != stage_channels[i]) {
            throw ShapeError("CAB: stage " + std::to_string(i + 1) + " has shape " + shape_str(t.shape()) +
                             ", expected " + std::to_string(stage_channels[i]) + " channels");
        }
        Tensor g = reduce(Reduce::mean, t, 3, false);  // (b,c,h)
        g = reduce(Reduce::mean, g, 2, false);         // (b,c)
        pooled.push_back(g);
    }
    return concat(pooled);
}

std::vector<Tensor> CabBlock::gates(const std::vector<Tensor>& ts) const {
    Tensor d = descriptor(ts);
    const std::int64_t b = d.shape()[0];
    const std::int64_t ct = d.shape()[1];
    Tensor fused = fuse(reshape(d, {b, 1, ct}));
    fused = reshape(fused, {b, ct});
    std::vector<Tensor> out;
    out.reserve(ts.size());
    for (std::size_t i = 0; i < ts.size(); ++i) {
        out.push_back(sigmoid(fcs[i](fused)));
    }
    return out;
}

std::vector<Tensor> CabBlock::forward(const std::vector<Tensor>& ts) const {
    std::vector<Tensor> atts = gates(ts);
    std::vector<Tensor> out;
    out.reserve(ts.size());
    for (std::size_t i = 0; i < ts.size(); ++i) {
        out.push_back(add(ts[i], mul_channel_gate(ts[i], atts[i])));
    }
    return out;
}

// ---------------------------------------------------------------------------
// SAB
// ---------------------------------------------------------------------------

SabBlock::SabBlock(ParamStore& store, const std::string& name) {
    shared = Conv2d(store, name + ".conv",
                    {.in_channels = 2, .out_channels = 1, .kernel = 7, .dilation = 3, .bias = true});
}

Tensor SabBlock::gate(const Tensor& t) const {
    Tensor mean_map = reduce(Reduce::mean, t, 1, true);
    Tensor max_map = reduce(Reduce::max, t, 1, true);
    Tensor stacked = concat({mean_map, max_map});
    return sigmoid(shared(stacked));
}

std::vector<Tensor> SabBlock::forward(const std::vector<Tensor>& ts) const {
    std::vector<Tensor> out;
    out.reserve(ts.size());
    for (const Tensor& t : ts) {
        out.push_back(add(t, mul_spatial_gate(t, gate(t))));
    }
    return out;
}

}  // namespace malunet
