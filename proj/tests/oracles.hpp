#pragma once

// Independent brute-force references shared by the unit and acceptance
// suites. These stay deliberately naive and must not reuse the production
// kernels; accumulation order (ci, kh, kw from the bias) matches the
// documented kernel convention so double-precision results are bit-equal.

#include "malunet/tensor.hpp"

namespace malunet::oracles {

inline Tensor rnd(const Shape& s, std::mt19937_64& rng, bool grad = false, double lo = -1.0, double hi = 1.0) {
    std::vector<double> d(static_cast<std::size_t>(shape_numel(s)));
    for (double& v : d) v = uniform(rng, lo, hi);
    return Tensor::from_data(s, std::move(d), grad);
}

inline Tensor random_binary(const Shape& s, std::mt19937_64& rng, double p = 0.5) {
    std::vector<double> d(static_cast<std::size_t>(shape_numel(s)));
    for (double& v : d) v = uniform01(rng) < p ? 1.0 : 0.0;
    return Tensor::from_data(s, std::move(d));
}

inline Tensor conv2d_loops(const Tensor& x, const Tensor& w, const Tensor& b, int pad, int dil, int groups) {
    const std::int64_t B = x.shape()[0], H = x.shape()[2], W = x.shape()[3];
    const std::int64_t Cout = w.shape()[0], Cg = w.shape()[1], K = w.shape()[2];
    const std::int64_t Ho = H + 2 * pad - dil * (K - 1);
    const std::int64_t Wo = W + 2 * pad - dil * (K - 1);
    const std::int64_t cout_g = Cout / groups;
    std::vector<double> out(static_cast<std::size_t>(B * Cout * Ho * Wo), 0.0);
    for (std::int64_t n = 0; n < B; ++n)
        for (std::int64_t co = 0; co < Cout; ++co)
            for (std::int64_t ho = 0; ho < Ho; ++ho)
                for (std::int64_t wo = 0; wo < Wo; ++wo) {
                    double acc = b.defined() ? b.at({co}) : 0.0;
                    for (std::int64_t ci = 0; ci < Cg; ++ci)
                        for (std::int64_t kh = 0; kh < K; ++kh)
                            for (std::int64_t kw = 0; kw < K; ++kw) {
                                const std::int64_t hi = ho - pad + kh * dil;
                                const std::int64_t wi = wo - pad + kw * dil;
                                if (hi < 0 || hi >= H || wi < 0 || wi >= W) continue;
                                acc += x.at({n, (co / cout_g) * Cg + ci, hi, wi}) * w.at({co, ci, kh, kw});
                            }
                    out[static_cast<std::size_t>(((n * Cout + co) * Ho + ho) * Wo + wo)] = acc;
                }
    return Tensor::from_data({B, Cout, Ho, Wo}, std::move(out));
}

inline Tensor conv1d_loops(const Tensor& x, const Tensor& w, const Tensor& b, int pad) {
    const std::int64_t B = x.shape()[0], Cin = x.shape()[1], L = x.shape()[2];
    const std::int64_t Cout = w.shape()[0], K = w.shape()[2];
    const std::int64_t Lo = L + 2 * pad - K + 1;
    std::vector<double> out(static_cast<std::size_t>(B * Cout * Lo), 0.0);
    for (std::int64_t n = 0; n < B; ++n)
        for (std::int64_t co = 0; co < Cout; ++co)
            for (std::int64_t lo = 0; lo < Lo; ++lo) {
                double acc = b.defined() ? b.at({co}) : 0.0;
                for (std::int64_t ci = 0; ci < Cin; ++ci)
                    for (std::int64_t k = 0; k < K; ++k) {
                        const std::int64_t li = lo - pad + k;
                        if (li < 0 || li >= L) continue;
                        acc += x.at({n, ci, li}) * w.at({co, ci, k});
                    }
                out[static_cast<std::size_t>((n * Cout + co) * Lo + lo)] = acc;
            }
    return Tensor::from_data({B, Cout, Lo}, std::move(out));
}

inline Tensor linear_loops(const Tensor& x, const Tensor& w, const Tensor& b) {
    const std::int64_t B = x.shape()[0], N = x.shape()[1], M = w.shape()[0];
    std::vector<double> out(static_cast<std::size_t>(B * M), 0.0);
    for (std::int64_t n = 0; n < B; ++n)
        for (std::int64_t m = 0; m < M; ++m) {
            double acc = b.defined() ? b.at({m}) : 0.0;
            for (std::int64_t k = 0; k < N; ++k) acc += x.at({n, k}) * w.at({m, k});
            out[static_cast<std::size_t>(n * M + m)] = acc;
        }
    return Tensor::from_data({B, M}, std::move(out));
}

}  // namespace malunet::oracles
