#include "malunet/nn.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace malunet {

void Conv2DSpec::validate() const {
    if (in_channels <= 0 || out_channels <= 0) throw ConfigError("conv2d: channel counts must be positive");
    if (stride != 1) throw ConfigError("conv2d: only stride 1 is runnable");
    if (kernel <= 0 || kernel % 2 == 0) throw ConfigError("conv2d: kernel must be odd for same-size padding");
    if (dilation <= 0) throw ConfigError("conv2d: dilation must be positive");
    if (groups <= 0 || in_channels % groups != 0 || out_channels % groups != 0) {
        throw ConfigError("conv2d: channels (" + std::to_string(in_channels) + "," + std::to_string(out_channels) +
                          ") not divisible by groups " + std::to_string(groups));
    }
}

int norm_groups_for(int channels) {
    int gsize = std::min(8, channels);
    while (gsize > 1 && channels % gsize != 0) --gsize;
    return channels / gsize;
}

// ---------------------------------------------------------------------------
// ParamStore
// ---------------------------------------------------------------------------

ParamStore::ParamStore(std::uint64_t seed) : seed_(seed), rng_(substream(seed, "init")) {}

Tensor ParamStore::insert(const std::string& name, Tensor t) {
    if (has(name)) throw ConfigError("ParamStore: duplicate parameter name " + name);
    entries_.emplace_back(name, t);
    return t;
}

Tensor ParamStore::create_uniform(const std::string& name, const Shape& shape, std::int64_t fan_in) {
    if (fan_in <= 0) throw ConfigError("ParamStore: fan_in must be positive for " + name);
    const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
    std::vector<double> d(static_cast<std::size_t>(shape_numel(shape)));
    for (double& v : d) v = uniform(rng_, -bound, bound);
    return insert(name, Tensor::from_data(shape, std::move(d), true));
}

Tensor ParamStore::create_zeros(const std::string& name, const Shape& shape) {
    return insert(name, Tensor::zeros(shape, true));
}

Tensor ParamStore::create_ones(const std::string& name, const Shape& shape) {
    return insert(name, Tensor::ones(shape, true));
}

Tensor ParamStore::get(const std::string& name) const {
    for (const auto& [n, t] : entries_) {
        if (n == name) return t;
    }
    throw ConfigError("ParamStore: no parameter named " + name);
}

bool ParamStore::has(const std::string& name) const {
    for (const auto& [n, t] : entries_) {
        if (n == name) return true;
    }
    return false;
}

long long ParamStore::total_params() const {
    long long total = 0;
    for (const auto& [n, t] : entries_) total += t.size();
    return total;
}

std::vector<Tensor> ParamStore::trainables() const {
    std::vector<Tensor> out;
    out.reserve(entries_.size());
    for (const auto& [n, t] : entries_) out.push_back(t);
    return out;
}

void ParamStore::save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("checkpoint: cannot open " + path + " for writing");
    os << "MALUNET-CKPT1 " << entries_.size() << "\n";
    for (const auto& [name, t] : entries_) {
        os << name << " " << t.rank();
        for (std::int64_t e : t.shape()) os << " " << e;
        os << "\n";
    }
    for (const auto& [name, t] : entries_) {
        const std::uint32_t rank = static_cast<std::uint32_t>(t.rank());
        os.write(reinterpret_cast<const char*>(&rank), 4);
        for (std::int64_t e : t.shape()) {
            const std::uint32_t u = static_cast<std::uint32_t>(e);
            os.write(reinterpret_cast<const char*>(&u), 4);
        }
        for (double v : t.data()) {
            const float f = static_cast<float>(v);
            os.write(reinterpret_cast<const char*>(&f), 4);
        }
    }
    if (!os) throw IoError("checkpoint: write failed for " + path);
}

void ParamStore::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("checkpoint: cannot open " + path);
    std::string magic;
    std::size_t count = 0;
    is >> magic >> count;
    if (magic != "MALUNET-CKPT1") throw IoError("checkpoint: bad magic in " + path);
    if (count != entries_.size()) {
        throw IoError("checkpoint: " + path + " holds " + std::to_string(count) + " tensors, store has " +
                      std::to_string(entries_.size()));
    }
    for (auto& [name, t] : entries_) {
        std::string n;
        int rank = 0;
        is >> n >> rank;
        if (!is || n != name || rank != t.rank()) {
            throw IoError("checkpoint: manifest mismatch at " + name);
        }
        for (int i = 0; i < rank; ++i) {
            std::int64_t e = 0;
            is >> e;
            if (!is || e != t.shape()[static_cast<std::size_t>(i)]) {
                throw IoError("checkpoint: shape mismatch at " + name);
            }
        }
    }
    is.get();  // newline before the binary section
    for (auto& [name, t] : entries_) {
        std::uint32_t rank = 0;
        is.read(reinterpret_cast<char*>(&rank), 4);
        if (!is || rank != static_cast<std::uint32_t>(t.rank())) throw IoError("checkpoint: corrupt record at " + name);
        for (int i = 0; i < static_cast<int>(rank); ++i) {
            std::uint32_t e = 0;
            is.read(reinterpret_cast<char*>(&e), 4);
            if (!is || static_cast<std::int64_t>(e) != t.shape()[static_cast<std::size_t>(i)]) {
                throw IoError("checkpoint: corrupt record at " + name);
            }
        }
        auto& d = t.mutable_data();
        for (double& v : d) {
            float f = 0.0f;
            is.read(reinterpret_cast<char*>(&f), 4);
            if (!is) throw IoError("checkpoint: truncated payload at " + name);
            v = static_cast<double>(f);
        }
    }
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int padding, int dilation, int groups) {
    if (x.rank() != 4 || w.rank() != 4) {
        throw ShapeError("conv2d: want x (b,cin,h,w) and w (cout,cin/g,k,k), got " + shape_str(x.shape()) + " and " +
                         shape_str(w.shape()));
    }
    const std::int64_t B = x.shape()[0], Cin = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    const std::int64_t Cout = w.shape()[0], Cg = w.shape()[1], KH = w.shape()[2], KW = w.shape()[3];
    if (Cin != Cg * groups || Cout % groups != 0) {
        throw ShapeError("conv2d: channel mismatch, x has " + std::to_string(Cin) + " channels, weights expect " +
                         std::to_string(Cg * groups));
    }
    if (bias.defined() && (bias.rank() != 1 || bias.shape()[0] != Cout)) {
        throw ShapeError("conv2d: bias shape must be [" + std::to_string(Cout) + "]");
    }
    const std::int64_t Ho = H + 2 * padding - dilation * (KH - 1);
    const std::int64_t Wo = W + 2 * padding - dilation * (KW - 1);
    if (Ho <= 0 || Wo <= 0) throw ShapeError("conv2d: non-positive output extent");
    const std::int64_t cout_g = Cout / groups;

    std::vector<double> out(static_cast<std::size_t>(B * Cout * Ho * Wo));
    const double* xd = x.data().data();
    const double* wd = w.data().data();
    const double* bd = bias.defined() ? bias.data().data() : nullptr;

    for (std::int64_t n = 0; n < B; ++n) {
        for (std::int64_t co = 0; co < Cout; ++co) {
            const std::int64_t g = co / cout_g;
            const double bv = bd ? bd[co] : 0.0;
            for (std::int64_t ho = 0; ho < Ho; ++ho) {
                for (std::int64_t wo = 0; wo < Wo; ++wo) {
                    double acc = bv;
                    for (std::int64_t ci = 0; ci < Cg; ++ci) {
                        const std::int64_t cx = g * Cg + ci;
                        const double* xrow = xd + ((n * Cin + cx) * H) * W;
                        const double* wrow = wd + ((co * Cg + ci) * KH) * KW;
                        for (std::int64_t kh = 0; kh < KH; ++kh) {
                            const std::int64_t hi = ho - padding + kh * dilation;
                            if (hi < 0 || hi >= H) continue;
                            for (std::int64_t kw = 0; kw < KW; ++kw) {
                                const std::int64_t wi = wo - padding + kw * dilation;
                                if (wi < 0 || wi >= W) continue;
                                acc += xrow[hi * W + wi] * wrow[kh * KW + kw];
                            }
                        }
                    }
                    out[static_cast<std::size_t>(((n * Cout + co) * Ho + ho) * Wo + wo)] = acc;
                }
            }
        }
    }

    auto node_out = Tensor::from_data({B, Cout, Ho, Wo}, std::move(out));
    auto node = node_out.node();
    std::weak_ptr<TensorNode> self = node;
    auto xn = x.node();
    auto wn = w.node();
    auto bn = bias.defined() ? bias.node() : nullptr;
    std::vector<Tensor> parents{x, w};
    if (bias.defined()) parents.push_back(bias);
    const auto bwd = [self, xn, wn, bn, B, Cin, H, W, Cout, Cg, KH, KW, Ho, Wo, padding, dilation, cout_g]() {
        auto out_n = self.lock();
        if (!out_n) return;
        const bool need_x = xn->requires_grad;
        const bool need_w = wn->requires_grad;
        const bool need_b = bn && bn->requires_grad;
        std::vector<double> dx(need_x ? xn->data.size() : 0, 0.0);
        std::vector<double> dw(need_w ? wn->data.size() : 0, 0.0);
        std::vector<double> db(need_b ? bn->data.size() : 0, 0.0);
        for (std::int64_t n = 0; n < B; ++n) {
            for (std::int64_t co = 0; co < Cout; ++co) {
                const std::int64_t g = co / cout_g;
                for (std::int64_t ho = 0; ho < Ho; ++ho) {
                    for (std::int64_t wo = 0; wo < Wo; ++wo) {
                        const double go = out_n->grad[static_cast<std::size_t>(((n * Cout + co) * Ho + ho) * Wo + wo)];
                        if (need_b) db[static_cast<std::size_t>(co)] += go;
                        if (go == 0.0 || (!need_x && !need_w)) continue;
                        for (std::int64_t ci = 0; ci < Cg; ++ci) {
                            const std::int64_t cx = g * Cg + ci;
                            const std::int64_t xbase = (n * Cin + cx) * H * W;
                            const std::int64_t wbase = (co * Cg + ci) * KH * KW;
                            for (std::int64_t kh = 0; kh < KH; ++kh) {
                                const std::int64_t hi = ho - padding + kh * dilation;
                                if (hi < 0 || hi >= H) continue;
                                for (std::int64_t kw = 0; kw < KW; ++kw) {
                                    const std::int64_t wi = wo - padding + kw * dilation;
                                    if (wi < 0 || wi >= W) continue;
                                    if (need_x)
                                        dx[static_cast<std::size_t>(xbase + hi * W + wi)] +=
                                            wn->data[static_cast<std::size_t>(wbase + kh * KW + kw)] * go;
                                    if (need_w)
                                        dw[static_cast<std::size_t>(wbase + kh * KW + kw)] +=
                                            xn->data[static_cast<std::size_t>(xbase + hi * W + wi)] * go;
                                }
                            }
                        }
                    }
                }
            }
        }
        if (need_x) xn->accum_grad(dx.data(), xn->size());
        if (need_w) wn->accum_grad(dw.data(), wn->size());
        if (need_b) bn->accum_grad(db.data(), bn->size());
    };
    if (grad_enabled()) {
        bool any = x.requires_grad() || w.requires_grad() || (bias.defined() && bias.requires_grad());
        if (any) {
            node->requires_grad = true;
            node->parents.push_back(xn);
            node->parents.push_back(wn);
            if (bn) node->parents.push_back(bn);
            node->backward_fn = bwd;
        }
    }
    return node_out;
}

// ---------------------------------------------------------------------------
// conv1d
// ---------------------------------------------------------------------------

Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& bias, int padding) {
    if (x.rank() != 3 || w.rank() != 3) {
        throw ShapeError("conv1d: want x (b,cin,L) and w (cout,cin,k), got " + shape_str(x.shape()) + " and " +
                         shape_str(w.shape()));
    }
    const std::int64_t B = x.shape()[0], Cin = x.shape()[1], L = x.shape()[2];
    const std::int64_t Cout = w.shape()[0], Cw = w.shape()[1], K = w.shape()[2];
    if (Cin != Cw) throw ShapeError("conv1d: channel mismatch " + std::to_string(Cin) + " vs " + std::to_string(Cw));
    if (bias.defined() && (bias.rank() != 1 || bias.shape()[0] != Cout)) throw ShapeError("conv1d: bad bias shape");
    const std::int64_t Lo = L + 2 * padding - K + 1;
    if (Lo < 1) throw ShapeError("conv1d: non-positive output length");

    std::vector<double> out(static_cast<std::size_t>(B * Cout * Lo));
    const double* xd = x.data().data();
    const double* wd = w.data().data();
    const double* bd = bias.defined() ? bias.data().data() : nullptr;
    for (std::int64_t n = 0; n < B; ++n) {
        for (std::int64_t co = 0; co < Cout; ++co) {
            const double bv = bd ? bd[co] : 0.0;
            for (std::int64_t lo = 0; lo < Lo; ++lo) {
                double acc = bv;
                for (std::int64_t ci = 0; ci < Cin; ++ci) {
                    const double* xrow = xd + (n * Cin + ci) * L;
                    const double* wrow = wd + (co * Cin + ci) * K;
                    for (std::int64_t k = 0; k < K; ++k) {
                        const std::int64_t li = lo - padding + k;
                        if (li < 0 || li >= L) continue;
                        acc += xrow[li] * wrow[k];
                    }
                }
                out[static_cast<std::size_t>((n * Cout + co) * Lo + lo)] = acc;
            }
        }
    }

    auto res = Tensor::from_data({B, Cout, Lo}, std::move(out));
    auto node = res.node();
    std::weak_ptr<TensorNode> self = node;
    auto xn = x.node();
    auto wn = w.node();
    auto bn = bias.defined() ? bias.node() : nullptr;
    if (grad_enabled() && (x.requires_grad() || w.requires_grad() || (bias.defined() && bias.requires_grad()))) {
        node->requires_grad = true;
        node->parents.push_back(xn);
        node->parents.push_back(wn);
        if (bn) node->parents.push_back(bn);
        node->backward_fn = [self, xn, wn, bn, B, Cin, L, Cout, K, Lo, padding]() {
            auto out_n = self.lock();
            if (!out_n) return;
            const bool need_x = xn->requires_grad;
            const bool need_w = wn->requires_grad;
            const bool need_b = bn && bn->requires_grad;
            std::vector<double> dx(need_x ? xn->data.size() : 0, 0.0);
            std::vector<double> dw(need_w ? wn->data.size() : 0, 0.0);
            std::vector<double> db(need_b ? bn->data.size() : 0, 0.0);
            for (std::int64_t n = 0; n < B; ++n) {
                for (std::int64_t co = 0; co < Cout; ++co) {
                    for (std::int64_t lo = 0; lo < Lo; ++lo) {
                        const double go = out_n->grad[static_cast<std::size_t>((n * Cout + co) * Lo + lo)];
                        if (need_b) db[static_cast<std::size_t>(co)] += go;
                        if (go == 0.0) continue;
                        for (std::int64_t ci = 0; ci < Cin; ++ci) {
                            for (std::int64_t k = 0; k < K; ++k) {
                                const std::int64_t li = lo - padding + k;
                                if (li < 0 || li >= L) continue;
                                if (need_x)
                                    dx[static_cast<std::size_t>((n * Cin + ci) * L + li)] +=
                                        wn->data[static_cast<std::size_t>((co * Cin + ci) * K + k)] * go;
                                if (need_w)
                                    dw[static_cast<std::size_t>((co * Cin + ci) * K + k)] +=
                                        xn->data[static_cast<std::size_t>((n * Cin + ci) * L + li)] * go;
                            }
                        }
                    }
                }
            }
            if (need_x) xn->accum_grad(dx.data(), xn->size());
            if (need_w) wn->accum_grad(dw.data(), wn->size());
            if (need_b) bn->accum_grad(db.data(), bn->size());
        };
    }
    return res;
}

// ---------------------------------------------------------------------------
// linear
// ---------------------------------------------------------------------------

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
    if (x.rank() != 2 || w.rank() != 2) {
        throw ShapeError("linear: want x (b,n) and w (m,n), got " + shape_str(x.shape()) + " and " +
                         shape_str(w.shape()));
    }
    const std::int64_t B = x.shape()[0], N = x.shape()[1], M = w.shape()[0];
    if (w.shape()[1] != N) {
        throw ShapeError("linear: inner extents differ, " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
    }
    if (bias.defined() && (bias.rank() != 1 || bias.shape()[0] != M)) throw ShapeError("linear: bad bias shape");

    std::vector<double> out(static_cast<std::size_t>(B * M));
    const double* xd = x.data().data();
    const double* wd = w.data().data();
    const double* bd = bias.defined() ? bias.data().data() : nullptr;
    for (std::int64_t n = 0; n < B; ++n) {
        for (std::int64_t m = 0; m < M; ++m) {
            double acc = bd ? bd[m] : 0.0;
            for (std::int64_t k = 0; k < N; ++k) acc += xd[n * N + k] * wd[m * N + k];
            out[static_cast<std::size_t>(n * M + m)] = acc;
        }
    }
    auto res = Tensor::from_data({B, M}, std::move(out));
    auto node = res.node();
    std::weak_ptr<TensorNode> self = node;
    auto xn = x.node();
    auto wn = w.node();
    auto bn = bias.defined() ? bias.node() : nullptr;
    if (grad_enabled() && (x.requires_grad() || w.requires_grad() || (bias.defined() && bias.requires_grad()))) {
        node->requires_grad = true;
        node->parents.push_back(xn);
        node->parents.push_back(wn);
        if (bn) node->parents.push_back(bn);
        node->backward_fn = [self, xn, wn, bn, B, N, M]() {
            auto out_n = self.lock();
            if (!out_n) return;
            if (xn->requires_grad) {
                std::vector<double> dx(xn->data.size(), 0.0);
                for (std::int64_t n = 0; n < B; ++n)
                    for (std::int64_t m = 0; m < M; ++m) {
                        const double go = out_n->grad[static_cast<std::size_t>(n * M + m)];
                        for (std::int64_t k = 0; k < N; ++k)
                            dx[static_cast<std::size_t>(n * N + k)] += wn->data[static_cast<std::size_t>(m * N + k)] * go;
                    }
                xn->accum_grad(dx.data(), xn->size());
            }
            if (wn->requires_grad) {
                std::vector<double> dw(wn->data.size(), 0.0);
                for (std::int64_t n = 0; n < B; ++n)
                    for (std::int64_t m = 0; m < M; ++m) {
                        const double go = out_n->grad[static_cast<std::size_t>(n * M + m)];
                        for (std::int64_t k = 0; k < N; ++k)
                            dw[static_cast<std::size_t>(m * N + k)] += xn->data[static_cast<std::size_t>(n * N + k)] * go;
                    }
                wn->accum_grad(dw.data(), wn->size());
            }
            if (bn && bn->requires_grad) {
                std::vector<double> db(bn->data.size(), 0.0);
                for (std::int64_t n = 0; n < B; ++n)
                    for (std::int64_t m = 0; m < M; ++m)
                        db[static_cast<std::size_t>(m)] += out_n->grad[static_cast<std::size_t>(n * M + m)];
                bn->accum_grad(db.data(), bn->size());
            }
        };
    }
    return res;
}

// ---------------------------------------------------------------------------
// pooling / upsampling
// ---------------------------------------------------------------------------

Tensor maxpool2(const Tensor& x) {
    if (x.rank() != 4) throw ShapeError("maxpool2: want (b,c,h,w), got " + shape_str(x.shape()));
    const std::int64_t B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    if (H % 2 != 0 || W % 2 != 0) {
        throw ShapeError("maxpool2: spatial extents must be even, got " + shape_str(x.shape()));
    }
    const std::int64_t Ho = H / 2, Wo = W / 2;
    std::vector<double> out(static_cast<std::size_t>(B * C * Ho * Wo));
    std::vector<std::int64_t> arg(out.size());
    const double* xd = x.data().data();
    for (std::int64_t nc = 0; nc < B * C; ++nc) {
        const double* plane = xd + nc * H * W;
        for (std::int64_t ho = 0; ho < Ho; ++ho) {
            for (std::int64_t wo = 0; wo < Wo; ++wo) {
                // first maximal element in row-major order wins
                std::int64_t best_idx = (2 * ho) * W + 2 * wo;
                double best = plane[best_idx];
                const std::int64_t cand[3] = {(2 * ho) * W + 2 * wo + 1, (2 * ho + 1) * W + 2 * wo,
                                              (2 * ho + 1) * W + 2 * wo + 1};
                for (std::int64_t idx : cand) {
                    if (plane[idx] > best) {
                        best = plane[idx];
                        best_idx = idx;
                    }
                }
                out[static_cast<std::size_t>((nc * Ho + ho) * Wo + wo)] = best;
                arg[static_cast<std::size_t>((nc * Ho + ho) * Wo + wo)] = nc * H * W + best_idx;
            }
        }
    }
    auto res = Tensor::from_data({B, C, Ho, Wo}, std::move(out));
    auto node = res.node();
    std::weak_ptr<TensorNode> self = node;
    auto xn = x.node();
    if (grad_enabled() && x.requires_grad()) {
        node->requires_grad = true;
        node->parents.push_back(xn);
        node->backward_fn = [self, xn, arg = std::move(arg)]() {
            auto out_n = self.lock();
            if (!out_n || !xn->requires_grad) return;
            std::vector<double> dx(xn->data.size(), 0.0);
            for (std::size_t i = 0; i < arg.size(); ++i) dx[static_cast<std::size_t>(arg[i])] += out_n->grad[i];
            xn->accum_grad(dx.data(), xn->size());
        };
    }
    return res;
}

namespace {

struct LerpTap {
    std::int64_t i0, i1;
    double t;  // weight of i1
};

LerpTap bilinear_tap(std::int64_t out_idx, std::int64_t in_extent) {
    const double src = (static_cast<double>(out_idx) + 0.5) * 0.5 - 0.5;
    const double f = std::floor(src);
    double t = src - f;
    std::int64_t i0 = static_cast<std::int64_t>(f);
    std::int64_t i1 = i0 + 1;
    if (i0 < 0) i0 = 0;
    if (i1 < 0) i1 = 0;
    if (i0 > in_extent - 1) i0 = in_extent - 1;
    if (i1 > in_extent - 1) i1 = in_extent - 1;
    return {i0, i1, t};
}

}  // namespace

Tensor upsample_bilinear2(const Tensor& x) {
    if (x.rank() != 4) throw ShapeError("upsample_bilinear2: want (b,c,h,w), got " + shape_str(x.shape()));
    const std::int64_t B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    const std::int64_t Ho = H * 2, Wo = W * 2;
    std::vector<LerpTap> hts(static_cast<std::size_t>(Ho)), wts(static_cast<std::size_t>(Wo));
    for (std::int64_t i = 0; i < Ho; ++i) hts[static_cast<std::size_t>(i)] = bilinear_tap(i, H);
    for (std::int64_t i = 0; i < Wo; ++i) wts[static_cast<std::size_t>(i)] = bilinear_tap(i, W);

    std::vector<double> out(static_cast<std::size_t>(B * C * Ho * Wo));
    const double* xd = x.data().data();
    for (std::int64_t nc = 0; nc < B * C; ++nc) {
        const double* plane = xd + nc * H * W;
        double* oplane = out.data() + nc * Ho * Wo;
        for (std::int64_t ho = 0; ho < Ho; ++ho) {
            const auto& th = hts[static_cast<std::size_t>(ho)];
            for (std::int64_t wo = 0; wo < Wo; ++wo) {
                const auto& tw = wts[static_cast<std::size_t>(wo)];
                const double v00 = plane[th.i0 * W + tw.i0];
                const double v01 = plane[th.i0 * W + tw.i1];
                const double v10 = plane[th.i1 * W + tw.i0];
                const double v11 = plane[th.i1 * W + tw.i1];
                oplane[ho * Wo + wo] = (1.0 - th.t) * ((1.0 - tw.t) * v00 + tw.t * v01) +
                                       th.t * ((1.0 - tw.t) * v10 + tw.t * v11);
            }
        }
    }
    auto res = Tensor::from_data({B, C, Ho, Wo}, std::move(out));
    auto node = res.node();
    std::weak_ptr<TensorNode> self = node;
    auto xn = x.node();
    if (grad_enabled() && x.requires_grad()) {
        node->requires_grad = true;
        node->parents.push_back(xn);
        node->backward_fn = [self, xn, hts = std::move(hts), wts = std::move(wts), B, C, H, W, Ho, Wo]() {
            auto out_n = self.lock();
            if (!out_n || !xn->requires_grad) return;
            std::vector<double> dx(xn->data.size(), 0.0);
            for (std::int64_t nc = 0; nc < B * C; ++nc) {
                double* dplane = dx.data() + nc * H * W;
                const double* gplane = out_n->grad.data() + nc * Ho * Wo;
                for (std::int64_t ho = 0; ho < Ho; ++ho) {
                    const auto& th = hts[static_cast<std::size_t>(ho)];
                    for (std::int64_t wo = 0; wo < Wo; ++wo) {
                        const auto& tw = wts[static_cast<std::size_t>(wo)];
                        const double go = gplane[ho * Wo + wo];
                        dplane[th.i0 * W + tw.i0] += (1.0 - th.t) * (1.0 - tw.t) * go;
                        dplane[th.i0 * W + tw.i1] += (1.0 - th.t) * tw.t * go;
                        dplane[th.i1 * W + tw.i0] += th.t * (1.0 - tw.t) * go;
                        dplane[th.i1 * W + tw.i1] += th.t * tw.t * go;
                    }
                }
            }
            xn->accum_grad(dx.data(), xn->size());
        };
    }
    return res;
}

// ---------------------------------------------------------------------------
// group norm
// ---------------------------------------------------------------------------

Tensor group_norm(const Tensor& x, int groups, const Tensor& scale, const Tensor& shift, double eps) {
    if (x.rank() != 4) throw ShapeError("group_norm: want (b,c,h,w), got " + shape_str(x.shape()));
    const std::int64_t B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    if (groups <= 0 || C % groups != 0) {
        throw ShapeError("group_norm: " + std::to_string(C) + " channels not divisible into " +
                         std::to_string(groups) + " groups");
    }
    if (scale.shape() != Shape{C} || shift.shape() != Shape{C}) {
        throw ShapeError("group_norm: scale/shift must have shape [" + std::to_string(C) + "]");
    }
    const std::int64_t cg = C / groups;
    const std::int64_t m = cg * H * W;

    std::vector<double> out(x.data().size());
    std::vector<double> xhat(x.data().size());
    std::vector<double> invstd(static_cast<std::size_t>(B * groups));
    const double* xd = x.data().data();
    const double* sd = scale.data().data();
    const double* bd = shift.data().data();
    for (std::int64_t n = 0; n < B; ++n) {
        for (std::int64_t g = 0; g < groups; ++g) {
            const std::int64_t base = (n * C + g * cg) * H * W;
            double mean = 0.0;
            for (std::int64_t i = 0; i < m; ++i) mean += xd[base + i];
            mean /= static_cast<double>(m);
            double var = 0.0;
            for (std::int64_t i = 0; i < m; ++i) {
                const double d = xd[base + i] - mean;
                var += d * d;
            }
            var /= static_cast<double>(m);
            const double is = 1.0 / std::sqrt(var + eps);
            invstd[static_cast<std::size_t>(n * groups + g)] = is;
            for (std::int64_t c = 0; c < cg; ++c) {
                const std::int64_t ch = g * cg + c;
                const std::int64_t cbase = base + c * H * W;
                for (std::int64_t i = 0; i < H * W; ++i) {
                    const double xh = (xd[cbase + i] - mean) * is;
                    xhat[static_cast<std::size_t>(cbase + i)] = xh;
                    out[static_cast<std::size_t>(cbase + i)] = xh * sd[ch] + bd[ch];
                }
            }
        }
    }
    auto res = Tensor::from_data(x.shape(), std::move(out));
    auto node = res.node();
    std::weak_ptr<TensorNode> self = node;
    auto xn = x.node();
    auto sn = scale.node();
    auto bn = shift.node();
    if (grad_enabled() && (x.requires_grad() || scale.requires_grad() || shift.requires_grad())) {
        node->requires_grad = true;
        node->parents = {xn, sn, bn};
        node->backward_fn = [self, xn, sn, bn, B, C, H, W, groups, cg, m, xhat = std::move(xhat),
                             invstd = std::move(invstd)]() {
            auto out_n = self.lock();
            if (!out_n) return;
            const std::int64_t hw = H * W;
            if (bn->requires_grad || sn->requires_grad) {
                std::vector<double> dshift(static_cast<std::size_t>(C), 0.0);
                std::vector<double> dscale(static_cast<std::size_t>(C), 0.0);
                for (std::int64_t n = 0; n < B; ++n) {
                    for (std::int64_t ch = 0; ch < C; ++ch) {
                        const std::int64_t base = (n * C + ch) * hw;
                        for (std::int64_t i = 0; i < hw; ++i) {
                            const double go = out_n->grad[static_cast<std::size_t>(base + i)];
                            dshift[static_cast<std::size_t>(ch)] += go;
                            dscale[static_cast<std::size_t>(ch)] += go * xhat[static_cast<std::size_t>(base + i)];
                        }
                    }
                }
                if (bn->requires_grad) bn->accum_grad(dshift.data(), bn->size());
                if (sn->requires_grad) sn->accum_grad(dscale.data(), sn->size());
            }
            if (xn->requires_grad) {
                std::vector<double> dx(xn->data.size());
                for (std::int64_t n = 0; n < B; ++n) {
                    for (std::int64_t g = 0; g < groups; ++g) {
                        const std::int64_t base = (n * C + g * cg) * hw;
                        // dyhat = go * gamma; reduce within the group, then the
                        // standard normalization backward.
                        double sum_dy = 0.0, sum_dy_xh = 0.0;
                        for (std::int64_t c = 0; c < cg; ++c) {
                            const double gamma = sn->data[static_cast<std::size_t>(g * cg + c)];
                            const std::int64_t cbase = base + c * hw;
                            for (std::int64_t i = 0; i < hw; ++i) {
                                const double dyh = out_n->grad[static_cast<std::size_t>(cbase + i)] * gamma;
                                sum_dy += dyh;
                                sum_dy_xh += dyh * xhat[static_cast<std::size_t>(cbase + i)];
                            }
                        }
                        const double is = invstd[static_cast<std::size_t>(n * groups + g)];
                        const double inv_m = 1.0 / static_cast<double>(m);
                        for (std::int64_t c = 0; c < cg; ++c) {
                            const double gamma = sn->data[static_cast<std::size_t>(g * cg + c)];
                            const std::int64_t cbase = base + c * hw;
                            for (std::int64_t i = 0; i < hw; ++i) {
                                const double dyh = out_n->grad[static_cast<std::size_t>(cbase + i)] * gamma;
                                const double xh = xhat[static_cast<std::size_t>(cbase + i)];
                                dx[static_cast<std::size_t>(cbase + i)] =
                                    is * (dyh - inv_m * sum_dy - xh * inv_m * sum_dy_xh);
                            }
                        }
                    }
                }
                xn->accum_grad(dx.data(), xn->size());
            }
        };
    }
    return res;
}

// ---------------------------------------------------------------------------
// layer modules
// ---------------------------------------------------------------------------

Conv2d::Conv2d(ParamStore& store, const std::string& name, Conv2DSpec s) : spec(s) {
    spec.validate();
    const std::int64_t fan_in = static_cast<std::int64_t>(spec.in_channels / spec.groups) * spec.kernel * spec.kernel;
    weight = store.create_uniform(name + ".weight",
                                  {spec.out_channels, spec.in_channels / spec.groups, spec.kernel, spec.kernel},
                                  fan_in);
    if (spec.bias) bias = store.create_zeros(name + ".bias", {spec.out_channels});
}

Tensor Conv2d::operator()(const Tensor& x) const {
    if (x.rank() != 4 || x.shape()[1] != spec.in_channels) {
        throw ShapeError("conv2d: input " + shape_str(x.shape()) + " does not provide " +
                         std::to_string(spec.in_channels) + " channels");
    }
    return conv2d(x, weight, bias, spec.padding(), spec.dilation, spec.groups);
}

Conv1d::Conv1d(ParamStore& store, const std::string& name, Conv1DSpec s) : spec(s) {
    weight = store.create_uniform(name + ".weight", {spec.out_channels, spec.in_channels, spec.kernel},
                                  static_cast<std::int64_t>(spec.in_channels) * spec.kernel);
    if (spec.bias) bias = store.create_zeros(name + ".bias", {spec.out_channels});
}

Tensor Conv1d::operator()(const Tensor& x) const {
    return conv1d(x, weight, bias, spec.padding);
}

Linear::Linear(ParamStore& store, const std::string& name, LinearSpec s) : spec(s) {
    weight = store.create_uniform(name + ".weight", {spec.out_features, spec.in_features}, spec.in_features);
    bias = store.create_zeros(name + ".bias", {spec.out_features});
}

Tensor Linear::operator()(const Tensor& x) const {
    return linear(x, weight, bias);
}

DepthwiseSeparable::DepthwiseSeparable(ParamStore& store, const std::string& name, DepthwiseSeparableSpec s)
    : spec(s) {
    depthwise = Conv2d(store, name + ".dw",
                       {.in_channels = spec.in_channels,
                        .out_channels = spec.in_channels,
                        .kernel = spec.kernel,
                        .dilation = spec.dilation,
                        .groups = spec.in_channels,
                        .bias = spec.depthwise_bias});
    pointwise = Conv2d(store, name + ".pw",
                       {.in_channels = spec.in_channels,
                        .out_channels = spec.out_channels,
                        .kernel = 1,
                        .bias = spec.pointwise_bias});
}

Tensor DepthwiseSeparable::operator()(const Tensor& x) const {
    return pointwise(depthwise(x));
}

GroupNorm::GroupNorm(ParamStore& store, const std::string& name, int channels) : groups(norm_groups_for(channels)) {
    scale = store.create_ones(name + ".scale", {channels});
    shift = store.create_zeros(name + ".shift", {channels});
}

Tensor GroupNorm::operator()(const Tensor& x) const {
    return group_norm(x, groups, scale, shift, eps);
}

}  // namespace malunet
