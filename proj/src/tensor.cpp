#include "malunet/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace malunet {

static_assert(std::endian::native == std::endian::little, "fixture format assumes a little-endian host");

namespace {

thread_local Precision g_precision = Precision::f32;
thread_local bool g_grad_enabled = true;

// Strict-(0,1) sigmoid bounds per precision. The f32 bound survives the
// output quantization; the f64 bound is one ulp below 1.
constexpr double kSigMaxF64 = 0.99999999999999988897769753748;  // nextafter(1,0)
constexpr double kSigMaxF32 = 0.99999994039535522;              // double(nextafterf(1,0))
constexpr double kSigMinF64 = 2.2250738585072014e-308;          // DBL_MIN
constexpr double kSigMinF32 = 1.1754943508222875e-38;           // FLT_MIN

double quantize_one(double v) {
    return g_precision == Precision::f32 ? static_cast<double>(static_cast<float>(v)) : v;
}

void quantize_and_check(const char* op, std::vector<double>& data) {
    if (g_precision == Precision::f32) {
        for (double& v : data) v = static_cast<double>(static_cast<float>(v));
    }
    for (double v : data) {
        if (!std::isfinite(v)) {
            throw NumericError(std::string(op) + ": non-finite value produced");
        }
    }
}

std::shared_ptr<TensorNode> alloc_node(const char* op, Shape shape, std::vector<double> data) {
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
        throw ShapeError(std::string(op) + ": data size does not match shape " + shape_str(shape));
    }
    quantize_and_check(op, data);
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    return n;
}

bool any_requires(const std::vector<Tensor>& parents) {
    for (const auto& p : parents) {
        if (p.requires_grad()) return true;
    }
    return false;
}

// Attaches graph edges and the backward closure when recording is on and at
// least one parent participates.
void attach(const std::shared_ptr<TensorNode>& out, const std::vector<Tensor>& parents,
            std::function<void()> backward_fn) {
    if (!g_grad_enabled || !any_requires(parents)) return;
    out->requires_grad = true;
    out->parents.reserve(parents.size());
    for (const auto& p : parents) out->parents.push_back(p.node());
    out->backward_fn = std::move(backward_fn);
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

struct AxisSpans {
    std::int64_t outer, n, inner;
};

AxisSpans axis_spans(const Shape& s, int axis) {
    AxisSpans a{1, s[static_cast<std::size_t>(axis)], 1};
    for (int i = 0; i < axis; ++i) a.outer *= s[static_cast<std::size_t>(i)];
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) a.inner *= s[i];
    return a;
}

}  // namespace

std::int64_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), static_cast<std::int64_t>(1), std::multiplies<>());
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ',';
        os << s[i];
    }
    os << ']';
    return os.str();
}

Precision scalar_precision() { return g_precision; }
bool grad_enabled() { return g_grad_enabled; }

PrecisionGuard::PrecisionGuard(Precision p) : saved_(g_precision) { g_precision = p; }
PrecisionGuard::~PrecisionGuard() { g_precision = saved_; }

NoGradGuard::NoGradGuard() : saved_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = saved_; }

void TensorNode::accum_grad(const double* g, std::int64_t n) {
    if (n != size()) throw ShapeError("gradient size mismatch");
    if (grad.empty()) grad.assign(data.size(), 0.0);
    for (std::int64_t i = 0; i < n; ++i) grad[static_cast<std::size_t>(i)] += g[i];
}

Tensor Tensor::zeros(const Shape& s, bool requires_grad) {
    return from_data(s, std::vector<double>(static_cast<std::size_t>(shape_numel(s)), 0.0), requires_grad);
}

Tensor Tensor::full(const Shape& s, double v, bool requires_grad) {
    return from_data(s, std::vector<double>(static_cast<std::size_t>(shape_numel(s)), v), requires_grad);
}

Tensor Tensor::from_data(const Shape& s, std::vector<double> data, bool requires_grad) {
    for (std::int64_t e : s) {
        if (e <= 0) throw ShapeError("extents must be positive, got " + shape_str(s));
    }
    auto n = alloc_node("tensor", s, std::move(data));
    n->requires_grad = requires_grad;
    return wrap(std::move(n));
}

Tensor Tensor::wrap(std::shared_ptr<TensorNode> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
}

const std::vector<double>& Tensor::grad() const {
    if (node_->grad.empty()) node_->grad.assign(node_->data.size(), 0.0);
    return node_->grad;
}

void Tensor::zero_grad() {
    node_->grad.assign(node_->data.size(), 0.0);
}

double Tensor::item() const {
    if (size() != 1) throw ShapeError("item() requires a scalar tensor, got " + shape_str(shape()));
    return node_->data[0];
}

double Tensor::at(std::initializer_list<std::int64_t> idx) const {
    const Shape& s = shape();
    if (idx.size() != s.size()) throw ShapeError("at(): index rank mismatch");
    std::int64_t flat = 0;
    std::size_t k = 0;
    for (std::int64_t i : idx) {
        if (i < 0 || i >= s[k]) throw ShapeError("at(): index out of bounds");
        flat = flat * s[k] + i;
        ++k;
    }
    return node_->data[static_cast<std::size_t>(flat)];
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

namespace {

template <typename Fwd, typename Bwd>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd) {
    require_same_shape(name, a, b);
    const auto& ad = a.data();
    const auto& bd = b.data();
    std::vector<double> out(ad.size());
    for (std::size_t i = 0; i < ad.size(); ++i) out[i] = fwd(ad[i], bd[i]);
    auto node = alloc_node(name, a.shape(), std::move(out));
    std::weak_ptr<TensorNode> self = node;
    auto an = a.node();
    auto bn = b.node();
    attach(node, {a, b}, [self, an, bn, bwd]() {
        auto out_n = self.lock();
        if (!out_n) return;
        bwd(*out_n, *an, *bn);
    });
    return Tensor::wrap(node);
}

template <typename Fwd, typename Bwd>
Tensor unary_op(const char* name, const Tensor& a, Fwd fwd, Bwd bwd) {
    const auto& ad = a.data();
    std::vector<double> out(ad.size());
    for (std::size_t i = 0; i < ad.size(); ++i) out[i] = fwd(ad[i]);
    auto node = alloc_node(name, a.shape(), std::move(out));
    std::weak_ptr<TensorNode> self = node;
    auto an = a.node();
    attach(node, {a}, [self, an, bwd]() {
        auto out_n = self.lock();
        if (!out_n) return;
        bwd(*out_n, *an);
    });
    return Tensor::wrap(node);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(
        "add", a, b, [](double x, double y) { return x + y; },
        [](TensorNode& out, TensorNode& an, TensorNode& bn) {
            if (an.requires_grad) an.accum_grad(out.grad.data(), out.size());
            if (bn.requires_grad) bn.accum_grad(out.grad.data(), out.size());
        });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(
        "sub", a, b, [](double x, double y) { return x - y; },
        [](TensorNode& out, TensorNode& an, TensorNode& bn) {
            if (an.requires_grad) an.accum_grad(out.grad.data(), out.size());
            if (bn.requires_grad) {
                std::vector<double> g(out.grad.size());
                for (std::size_t i = 0; i < g.size(); ++i) g[i] = -out.grad[i];
                bn.accum_grad(g.data(), out.size());
            }
        });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(
        "mul", a, b, [](double x, double y) { return x * y; },
        [](TensorNode& out, TensorNode& an, TensorNode& bn) {
            const std::int64_t n = out.size();
            if (an.requires_grad) {
                std::vector<double> g(static_cast<std::size_t>(n));
                for (std::int64_t i = 0; i < n; ++i)
                    g[static_cast<std::size_t>(i)] = bn.data[static_cast<std::size_t>(i)] * out.grad[static_cast<std::size_t>(i)];
                an.accum_grad(g.data(), n);
            }
            if (bn.requires_grad) {
                std::vector<double> g(static_cast<std::size_t>(n));
                for (std::int64_t i = 0; i < n; ++i)
                    g[static_cast<std::size_t>(i)] = an.data[static_cast<std::size_t>(i)] * out.grad[static_cast<std::size_t>(i)];
                bn.accum_grad(g.data(), n);
            }
        });
}

Tensor div(const Tensor& a, const Tensor& b) {
    return binary_op(
        "div", a, b, [](double x, double y) { return x / y; },
        [](TensorNode& out, TensorNode& an, TensorNode& bn) {
            const std::int64_t n = out.size();
            if (an.requires_grad) {
                std::vector<double> g(static_cast<std::size_t>(n));
                for (std::int64_t i = 0; i < n; ++i)
                    g[static_cast<std::size_t>(i)] = out.grad[static_cast<std::size_t>(i)] / bn.data[static_cast<std::size_t>(i)];
                an.accum_grad(g.data(), n);
            }
            if (bn.requires_grad) {
                std::vector<double> g(static_cast<std::size_t>(n));
                for (std::int64_t i = 0; i < n; ++i) {
                    const double bb = bn.data[static_cast<std::size_t>(i)];
                    g[static_cast<std::size_t>(i)] =
                        -an.data[static_cast<std::size_t>(i)] / (bb * bb) * out.grad[static_cast<std::size_t>(i)];
                }
                bn.accum_grad(g.data(), n);
            }
        });
}

Tensor neg(const Tensor& a) {
    return unary_op(
        "neg", a, [](double x) { return -x; },
        [](TensorNode& out, TensorNode& an) {
            if (!an.requires_grad) return;
            std::vector<double> g(out.grad.size());
            for (std::size_t i = 0; i < g.size(); ++i) g[i] = -out.grad[i];
            an.accum_grad(g.data(), out.size());
        });
}

Tensor add_scalar(const Tensor& a, double c) {
    return unary_op(
        "add_scalar", a, [c](double x) { return x + c; },
        [](TensorNode& out, TensorNode& an) {
            if (an.requires_grad) an.accum_grad(out.grad.data(), out.size());
        });
}

Tensor mul_scalar(const Tensor& a, double c) {
    return unary_op(
        "mul_scalar", a, [c](double x) { return x * c; },
        [c](TensorNode& out, TensorNode& an) {
            if (!an.requires_grad) return;
            std::vector<double> g(out.grad.size());
            for (std::size_t i = 0; i < g.size(); ++i) g[i] = c * out.grad[i];
            an.accum_grad(g.data(), out.size());
        });
}

Tensor sub_from_scalar(double c, const Tensor& a) {
    return unary_op(
        "sub_from_scalar", a, [c](double x) { return c - x; },
        [](TensorNode& out, TensorNode& an) {
            if (!an.requires_grad) return;
            std::vector<double> g(out.grad.size());
            for (std::size_t i = 0; i < g.size(); ++i) g[i] = -out.grad[i];
            an.accum_grad(g.data(), out.size());
        });
}

Tensor sigmoid(const Tensor& x) {
    const double hi = g_precision == Precision::f32 ? kSigMaxF32 : kSigMaxF64;
    const double lo = g_precision == Precision::f32 ? kSigMinF32 : kSigMinF64;
    return unary_op(
        "sigmoid", x,
        [hi, lo](double v) {
            // Numerically stable on both tails, then clamped so the output is
            // strictly inside (0,1) even after quantization.
            double s;
            if (v >= 0.0) {
                s = 1.0 / (1.0 + std::exp(-v));
            } else {
                const double e = std::exp(v);
                s = e / (1.0 + e);
            }
            s = quantize_one(s);
            return std::min(std::max(s, lo), hi);
        },
        [](TensorNode& out, TensorNode& an) {
            if (!an.requires_grad) return;
            std::vector<double> g(out.grad.size());
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double s = out.data[i];
                g[i] = s * (1.0 - s) * out.grad[i];
            }
            an.accum_grad(g.data(), out.size());
        });
}

Tensor log(const Tensor& x) {
    return unary_op(
        "log", x, [](double v) { return std::log(v); },
        [](TensorNode& out, TensorNode& an) {
            if (!an.requires_grad) return;
            std::vector<double> g(out.grad.size());
            for (std::size_t i = 0; i < g.size(); ++i) g[i] = out.grad[i] / an.data[i];
            an.accum_grad(g.data(), out.size());
        });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
    return unary_op(
        "clamp", x, [lo, hi](double v) { return std::min(std::max(v, lo), hi); },
        [lo, hi](TensorNode& out, TensorNode& an) {
            if (!an.requires_grad) return;
            std::vector<double> g(out.grad.size());
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double v = an.data[i];
                g[i] = (v >= lo && v <= hi) ? out.grad[i] : 0.0;
            }
            an.accum_grad(g.data(), out.size());
        });
}

// ---------------------------------------------------------------------------
// structure
// ---------------------------------------------------------------------------

std::vector<Tensor> chunk(const Tensor& x, int parts) {
    if (x.rank() < 2) throw ShapeError("chunk: needs a channel axis, got " + shape_str(x.shape()));
    const std::int64_t c = x.shape()[1];
    if (parts <= 0 || c % parts != 0) {
        throw ShapeError("chunk: channel extent " + std::to_string(c) + " not divisible into " +
                         std::to_string(parts) + " parts");
    }
    const auto sp = axis_spans(x.shape(), 1);
    const std::int64_t cpart = c / parts;
    std::vector<Tensor> outs;
    outs.reserve(static_cast<std::size_t>(parts));
    for (int p = 0; p < parts; ++p) {
        Shape os = x.shape();
        os[1] = cpart;
        std::vector<double> d(static_cast<std::size_t>(sp.outer * cpart * sp.inner));
        for (std::int64_t o = 0; o < sp.outer; ++o) {
            const double* src = x.data().data() + (o * c + p * cpart) * sp.inner;
            double* dst = d.data() + o * cpart * sp.inner;
            std::copy(src, src + cpart * sp.inner, dst);
        }
        auto node = alloc_node("chunk", os, std::move(d));
        std::weak_ptr<TensorNode> self = node;
        auto xn = x.node();
        const std::int64_t offset = p * cpart;
        attach(node, {x}, [self, xn, sp, c, cpart, offset]() {
            auto out_n = self.lock();
            if (!out_n || !xn->requires_grad) return;
            std::vector<double> g(xn->data.size(), 0.0);
            for (std::int64_t o = 0; o < sp.outer; ++o) {
                const double* src = out_n->grad.data() + o * cpart * sp.inner;
                double* dst = g.data() + (o * c + offset) * sp.inner;
                std::copy(src, src + cpart * sp.inner, dst);
            }
            xn->accum_grad(g.data(), xn->size());
        });
        outs.push_back(Tensor::wrap(node));
    }
    return outs;
}

Tensor concat(const std::vector<Tensor>& xs) {
    if (xs.empty()) throw ShapeError("concat: empty input list");
    const Shape& ref = xs[0].shape();
    if (ref.size() < 2) throw ShapeError("concat: needs a channel axis");
    std::int64_t ctotal = 0;
    for (const auto& t : xs) {
        const Shape& s = t.shape();
        if (s.size() != ref.size()) throw ShapeError("concat: rank mismatch");
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (i != 1 && s[i] != ref[i]) {
                throw ShapeError("concat: non-channel extents differ, " + shape_str(s) + " vs " + shape_str(ref));
            }
        }
        ctotal += s[1];
    }
    Shape os = ref;
    os[1] = ctotal;
    const auto sp = axis_spans(os, 1);
    std::vector<double> d(static_cast<std::size_t>(shape_numel(os)));
    std::int64_t coff = 0;
    for (const auto& t : xs) {
        const std::int64_t ci = t.shape()[1];
        for (std::int64_t o = 0; o < sp.outer; ++o) {
            const double* src = t.data().data() + o * ci * sp.inner;
            double* dst = d.data() + (o * ctotal + coff) * sp.inner;
            std::copy(src, src + ci * sp.inner, dst);
        }
        coff += ci;
    }
    auto node = alloc_node("concat", os, std::move(d));
    std::weak_ptr<TensorNode> self = node;
    std::vector<std::shared_ptr<TensorNode>> pn;
    pn.reserve(xs.size());
    for (const auto& t : xs) pn.push_back(t.node());
    attach(node, xs, [self, pn, sp, ctotal]() {
        auto out_n = self.lock();
        if (!out_n) return;
        std::int64_t coff2 = 0;
        for (const auto& p : pn) {
            const std::int64_t ci = p->shape[1];
            if (p->requires_grad) {
                std::vector<double> g(p->data.size());
                for (std::int64_t o = 0; o < sp.outer; ++o) {
                    const double* src = out_n->grad.data() + (o * ctotal + coff2) * sp.inner;
                    std::copy(src, src + ci * sp.inner, g.data() + o * ci * sp.inner);
                }
                p->accum_grad(g.data(), p->size());
            }
            coff2 += ci;
        }
    });
    return Tensor::wrap(node);
}

Tensor reshape(const Tensor& x, const Shape& s) {
    if (shape_numel(s) != x.size()) {
        throw ShapeError("reshape: size mismatch " + shape_str(x.shape()) + " -> " + shape_str(s));
    }
    auto node = alloc_node("reshape", s, x.data());
    std::weak_ptr<TensorNode> self = node;
    auto xn = x.node();
    attach(node, {x}, [self, xn]() {
        auto out_n = self.lock();
        if (!out_n || !xn->requires_grad) return;
        xn->accum_grad(out_n->grad.data(), out_n->size());
    });
    return Tensor::wrap(node);
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

Tensor reduce(Reduce op, const Tensor& x, int axis, bool keepdim) {
    if (axis < 0 || axis >= x.rank()) throw ShapeError("reduce: axis out of range for " + shape_str(x.shape()));
    const auto sp = axis_spans(x.shape(), axis);
    Shape os;
    for (int i = 0; i < x.rank(); ++i) {
        if (i == axis) {
            if (keepdim) os.push_back(1);
        } else {
            os.push_back(x.shape()[static_cast<std::size_t>(i)]);
        }
    }
    std::vector<double> d(static_cast<std::size_t>(sp.outer * sp.inner));
    std::vector<std::int64_t> argmax;
    if (op == Reduce::max) argmax.resize(d.size());
    const double* xd = x.data().data();
    for (std::int64_t o = 0; o < sp.outer; ++o) {
        for (std::int64_t in = 0; in < sp.inner; ++in) {
            const std::int64_t base = o * sp.n * sp.inner + in;
            if (op == Reduce::mean) {
                double acc = 0.0;
                for (std::int64_t k = 0; k < sp.n; ++k) acc += xd[base + k * sp.inner];
                d[static_cast<std::size_t>(o * sp.inner + in)] = acc / static_cast<double>(sp.n);
            } else {
                double best = xd[base];
                std::int64_t bi = 0;
                for (std::int64_t k = 1; k < sp.n; ++k) {
                    const double v = xd[base + k * sp.inner];
                    if (v > best) {  // first maximum wins ties
                        best = v;
                        bi = k;
                    }
                }
                d[static_cast<std::size_t>(o * sp.inner + in)] = best;
                argmax[static_cast<std::size_t>(o * sp.inner + in)] = bi;
            }
        }
    }
    auto node = alloc_node(op == Reduce::mean ? "reduce_mean" : "reduce_max", os, std::move(d));
    std::weak_ptr<TensorNode> self = node;
    auto xn = x.node();
    attach(node, {x}, [self, xn, sp, op, argmax = std::move(argmax)]() {
        auto out_n = self.lock();
        if (!out_n || !xn->requires_grad) return;
        std::vector<double> g(xn->data.size(), 0.0);
        for (std::int64_t o = 0; o < sp.outer; ++o) {
            for (std::int64_t in = 0; in < sp.inner; ++in) {
                const double go = out_n->grad[static_cast<std::size_t>(o * sp.inner + in)];
                const std::int64_t base = o * sp.n * sp.inner + in;
                if (op == Reduce::mean) {
                    const double share = go / static_cast<double>(sp.n);
                    for (std::int64_t k = 0; k < sp.n; ++k) g[static_cast<std::size_t>(base + k * sp.inner)] += share;
                } else {
                    const std::int64_t k = argmax[static_cast<std::size_t>(o * sp.inner + in)];
                    g[static_cast<std::size_t>(base + k * sp.inner)] += go;
                }
            }
        }
        xn->accum_grad(g.data(), xn->size());
    });
    return Tensor::wrap(node);
}

Tensor sum_all(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    auto node = alloc_node("sum_all", Shape{}, {acc});
    std::weak_ptr<TensorNode> self = node;
    auto xn = x.node();
    attach(node, {x}, [self, xn]() {
        auto out_n = self.lock();
        if (!out_n || !xn->requires_grad) return;
        std::vector<double> g(xn->data.size(), out_n->grad[0]);
        xn->accum_grad(g.data(), xn->size());
    });
    return Tensor::wrap(node);
}

Tensor mean_all(const Tensor& x) {
    return mul_scalar(sum_all(x), 1.0 / static_cast<double>(x.size()));
}

// ---------------------------------------------------------------------------
// gate products
// ---------------------------------------------------------------------------

Tensor mul_channel_gate(const Tensor& x, const Tensor& gate) {
    if (x.rank() != 4 || gate.rank() != 2 || x.shape()[0] != gate.shape()[0] || x.shape()[1] != gate.shape()[1]) {
        throw ShapeError("mul_channel_gate: want x (b,c,h,w) and gate (b,c), got " + shape_str(x.shape()) +
                         " and " + shape_str(gate.shape()));
    }
    const std::int64_t b = x.shape()[0], c = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
    std::vector<double> d(x.data().size());
    for (std::int64_t i = 0; i < b * c; ++i) {
        const double gv = gate.data()[static_cast<std::size_t>(i)];
        const double* src = x.data().data() + i * hw;
        double* dst = d.data() + i * hw;
        for (std::int64_t k = 0; k < hw; ++k) dst[k] = src[k] * gv;
    }
    auto node = alloc_node("mul_channel_gate", x.shape(), std::move(d));
    std::weak_ptr<TensorNode> self = node;
    auto xn = x.node();
    auto gn = gate.node();
    attach(node, {x, gate}, [self, xn, gn, b, c, hw]() {
        auto out_n = self.lock();
        if (!out_n) return;
        if (xn->requires_grad) {
            std::vector<double> g(xn->data.size());
            for (std::int64_t i = 0; i < b * c; ++i) {
                const double gv = gn->data[static_cast<std::size_t>(i)];
                for (std::int64_t k = 0; k < hw; ++k)
                    g[static_cast<std::size_t>(i * hw + k)] = gv * out_n->grad[static_cast<std::size_t>(i * hw + k)];
            }
            xn->accum_grad(g.data(), xn->size());
        }
        if (gn->requires_grad) {
            std::vector<double> g(gn->data.size(), 0.0);
            for (std::int64_t i = 0; i < b * c; ++i) {
                double acc = 0.0;
                for (std::int64_t k = 0; k < hw; ++k)
                    acc += xn->data[static_cast<std::size_t>(i * hw + k)] * out_n->grad[static_cast<std::size_t>(i * hw + k)];
                g[static_cast<std::size_t>(i)] = acc;
            }
            gn->accum_grad(g.data(), gn->size());
        }
    });
    return Tensor::wrap(node);
}

Tensor mul_spatial_gate(const Tensor& x, const Tensor& gate) {
    if (x.rank() != 4 || gate.rank() != 4 || gate.shape()[1] != 1 || x.shape()[0] != gate.shape()[0] ||
        x.shape()[2] != gate.shape()[2] || x.shape()[3] != gate.shape()[3]) {
        throw ShapeError("mul_spatial_gate: want x (b,c,h,w) and gate (b,1,h,w), got " + shape_str(x.shape()) +
                         " and " + shape_str(gate.shape()));
    }
    const std::int64_t b = x.shape()[0], c = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
    std::vector<double> d(x.data().size());
    for (std::int64_t n = 0; n < b; ++n) {
        const double* gv = gate.data().data() + n * hw;
        for (std::int64_t ch = 0; ch < c; ++ch) {
            const double* src = x.data().data() + (n * c + ch) * hw;
            double* dst = d.data() + (n * c + ch) * hw;
            for (std::int64_t k = 0; k < hw; ++k) dst[k] = src[k] * gv[k];
        }
    }
    auto node = alloc_node("mul_spatial_gate", x.shape(), std::move(d));
    std::weak_ptr<TensorNode> self = node;
    auto xn = x.node();
    auto gn = gate.node();
    attach(node, {x, gate}, [self, xn, gn, b, c, hw]() {
        auto out_n = self.lock();
        if (!out_n) return;
        if (xn->requires_grad) {
            std::vector<double> g(xn->data.size());
            for (std::int64_t n = 0; n < b; ++n) {
                const double* gv = gn->data.data() + n * hw;
                for (std::int64_t ch = 0; ch < c; ++ch) {
                    const std::int64_t base = (n * c + ch) * hw;
                    for (std::int64_t k = 0; k < hw; ++k)
                        g[static_cast<std::size_t>(base + k)] = gv[k] * out_n->grad[static_cast<std::size_t>(base + k)];
                }
            }
            xn->accum_grad(g.data(), xn->size());
        }
        if (gn->requires_grad) {
            std::vector<double> g(gn->data.size(), 0.0);
            for (std::int64_t n = 0; n < b; ++n) {
                for (std::int64_t ch = 0; ch < c; ++ch) {
                    const std::int64_t base = (n * c + ch) * hw;
                    for (std::int64_t k = 0; k < hw; ++k)
                        g[static_cast<std::size_t>(n * hw + k)] +=
                            xn->data[static_cast<std::size_t>(base + k)] * out_n->grad[static_cast<std::size_t>(base + k)];
                }
            }
            gn->accum_grad(g.data(), gn->size());
        }
    });
    return Tensor::wrap(node);
}

// ---------------------------------------------------------------------------
// softmax / L1 normalization
// ---------------------------------------------------------------------------

Tensor softmax_last(const Tensor& x) {
    if (x.rank() < 1) throw ShapeError("softmax_last: rank must be >= 1");
    const std::int64_t n = x.shape().back();
    const std::int64_t rows = x.size() / n;
    std::vector<double> d(x.data().size());
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* src = x.data().data() + r * n;
        double* dst = d.data() + r * n;
        double m = src[0];
        for (std::int64_t i = 1; i < n; ++i) m = std::max(m, src[i]);
        double denom = 0.0;
        for (std::int64_t i = 0; i < n; ++i) {
            dst[i] = std::exp(src[i] - m);
            denom += dst[i];
        }
        for (std::int64_t i = 0; i < n; ++i) dst[i] /= denom;
    }
    auto node = alloc_node("softmax_last", x.shape(), std::move(d));
    std::weak_ptr<TensorNode> self = node;
    auto xn = x.node();
    attach(node, {x}, [self, xn, rows, n]() {
        auto out_n = self.lock();
        if (!out_n || !xn->requires_grad) return;
        std::vector<double> g(xn->data.size());
        for (std::int64_t r = 0; r < rows; ++r) {
            const double* s = out_n->data.data() + r * n;
            const double* go = out_n->grad.data() + r * n;
            double dot = 0.0;
            for (std::int64_t i = 0; i < n; ++i) dot += go[i] * s[i];
            for (std::int64_t i = 0; i < n; ++i) g[static_cast<std::size_t>(r * n + i)] = s[i] * (go[i] - dot);
        }
        xn->accum_grad(g.data(), xn->size());
    });
    return Tensor::wrap(node);
}

Tensor l1_normalize_channels(const Tensor& x) {
    if (x.rank() != 3) throw ShapeError("l1_normalize_channels: want (b,c,l), got " + shape_str(x.shape()));
    for (double v : x.data()) {
        if (!(v > 0.0)) throw NumericError("l1_normalize_channels: inputs must be strictly positive");
    }
    const std::int64_t b = x.shape()[0], c = x.shape()[1], l = x.shape()[2];
    std::vector<double> d(x.data().size());
    std::vector<double> sums(static_cast<std::size_t>(b * l), 0.0);
    for (std::int64_t n = 0; n < b; ++n)
        for (std::int64_t ch = 0; ch < c; ++ch)
            for (std::int64_t k = 0; k < l; ++k)
                sums[static_cast<std::size_t>(n * l + k)] += x.data()[static_cast<std::size_t>((n * c + ch) * l + k)];
    for (std::int64_t n = 0; n < b; ++n)
        for (std::int64_t ch = 0; ch < c; ++ch)
            for (std::int64_t k = 0; k < l; ++k) {
                const std::size_t i = static_cast<std::size_t>((n * c + ch) * l + k);
                d[i] = x.data()[i] / sums[static_cast<std::size_t>(n * l + k)];
            }
    auto node = alloc_node("l1_normalize_channels", x.shape(), std::move(d));
    std::weak_ptr<TensorNode> self = node;
    auto xn = x.node();
    attach(node, {x}, [self, xn, b, c, l, sums = std::move(sums)]() {
        auto out_n = self.lock();
        if (!out_n || !xn->requires_grad) return;
        std::vector<double> g(xn->data.size());
        for (std::int64_t n = 0; n < b; ++n) {
            for (std::int64_t k = 0; k < l; ++k) {
                double dot = 0.0;
                for (std::int64_t ch = 0; ch < c; ++ch) {
                    const std::size_t i = static_cast<std::size_t>((n * c + ch) * l + k);
                    dot += out_n->grad[i] * out_n->data[i];
                }
                const double s = sums[static_cast<std::size_t>(n * l + k)];
                for (std::int64_t ch = 0; ch < c; ++ch) {
                    const std::size_t i = static_cast<std::size_t>((n * c + ch) * l + k);
                    g[i] = (out_n->grad[i] - dot) / s;
                }
            }
        }
        xn->accum_grad(g.data(), xn->size());
    });
    return Tensor::wrap(node);
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

void backward(const Tensor& loss) {
    if (loss.size() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    auto root = loss.node();
    if (root->backward_done) {
        throw Error("backward: graph already consumed; re-record the computation first");
    }
    root->backward_done = true;
    if (!root->requires_grad) return;

    // Post-order over parents: children come after all their ancestors'
    // contributions, so reverse iteration visits each node exactly once with
    // its output gradient complete.
    std::vector<TensorNode*> topo;
    std::unordered_set<TensorNode*> visited;
    std::vector<std::pair<TensorNode*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            TensorNode* p = node->parents[idx++].get();
            if (p->requires_grad && visited.insert(p).second) {
                stack.emplace_back(p, 0);
            }
        } else {
            topo.push_back(node);
            stack.pop_back();
        }
    }

    const double one = 1.0;
    root->accum_grad(&one, 1);
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        if ((*it)->backward_fn) (*it)->backward_fn();
    }
}

// ---------------------------------------------------------------------------
// finite differences
// ---------------------------------------------------------------------------

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
    if (!(h > 0.0)) throw ConfigError("finite_diff_grad: step must be positive");
    PrecisionGuard dp(Precision::f64);
    NoGradGuard ng;
    std::vector<double> base = x.data();
    std::vector<double> g(base.size());
    for (std::size_t i = 0; i < base.size(); ++i) {
        const double saved = base[i];
        base[i] = saved + h;
        const double fp = f(Tensor::from_data(x.shape(), base));
        base[i] = saved - h;
        const double fm = f(Tensor::from_data(x.shape(), base));
        base[i] = saved;
        g[i] = (fp - fm) / (2.0 * h);
    }
    return Tensor::from_data(x.shape(), std::move(g));
}

// ---------------------------------------------------------------------------
// fixture IO
// ---------------------------------------------------------------------------

void write_tensor(const std::string& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("write_tensor: cannot open " + path);
    const std::uint32_t rank = static_cast<std::uint32_t>(t.rank());
    os.write(reinterpret_cast<const char*>(&rank), 4);
    for (std::int64_t e : t.shape()) {
        const std::uint32_t u = static_cast<std::uint32_t>(e);
        os.write(reinterpret_cast<const char*>(&u), 4);
    }
    for (double v : t.data()) {
        const float fv = static_cast<float>(v);
        os.write(reinterpret_cast<const char*>(&fv), 4);
    }
    if (!os) throw IoError("write_tensor: write failed for " + path);
}

Tensor read_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("read_tensor: cannot open " + path);
    std::uint32_t rank = 0;
    is.read(reinterpret_cast<char*>(&rank), 4);
    if (!is || rank > 8) throw IoError("read_tensor: malformed header in " + path);
    Shape s(rank);
    for (std::uint32_t i = 0; i < rank; ++i) {
        std::uint32_t e = 0;
        is.read(reinterpret_cast<char*>(&e), 4);
        if (!is || e == 0) throw IoError("read_tensor: malformed extent in " + path);
        s[i] = static_cast<std::int64_t>(e);
    }
    const std::int64_t n = shape_numel(s);
    std::vector<double> d(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        float fv = 0.0f;
        is.read(reinterpret_cast<char*>(&fv), 4);
        if (!is) throw IoError("read_tensor: truncated payload in " + path);
        d[static_cast<std::size_t>(i)] = static_cast<double>(fv);
    }
    return Tensor::from_data(s, std::move(d));
}

}  // namespace malunet
