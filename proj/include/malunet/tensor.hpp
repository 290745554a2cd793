#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "malunet/common.hpp"

namespace malunet {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Scalar precision of the whole graph. Default f32 mimics deployment: every
// operation's output (and every freshly created tensor) is rounded through
// float, while inner accumulations stay in double. f64 disables the rounding;
// gradient checks run under it.
enum class Precision { f32, f64 };

Precision scalar_precision();
bool grad_enabled();

struct PrecisionGuard {
    explicit PrecisionGuard(Precision p);
    ~PrecisionGuard();
    PrecisionGuard(const PrecisionGuard&) = delete;
    PrecisionGuard& operator=(const PrecisionGuard&) = delete;

  private:
    Precision saved_;
};

// Suspends graph recording; forward-only evaluation.
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool saved_;
};

struct TensorNode {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // allocated on first accumulation
    bool requires_grad = false;
    bool backward_done = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void()> backward_fn;

    std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
    void accum_grad(const double* g, std::int64_t n);
};

// Value-semantics handle onto a graph node. Copies alias the same node;
// tensors are immutable once created except for the two sanctioned cases
// (optimizer weight updates, test fault injection) via mutable_data().
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(const Shape& s, bool requires_grad = false);
    static Tensor full(const Shape& s, double v, bool requires_grad = false);
    static Tensor ones(const Shape& s, bool requires_grad = false) { return full(s, 1.0, requires_grad); }
    static Tensor from_data(const Shape& s, std::vector<double> data, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    std::int64_t size() const { return node_->size(); }
    bool requires_grad() const { return node_->requires_grad; }

    const std::vector<double>& data() const { return node_->data; }
    std::vector<double>& mutable_data() { return node_->data; }
    const std::vector<double>& grad() const;
    void zero_grad();

    double item() const;
    double at(std::initializer_list<std::int64_t> idx) const;

    std::shared_ptr<TensorNode> node() const { return node_; }
    static Tensor wrap(std::shared_ptr<TensorNode> n);

  private:
    std::shared_ptr<TensorNode> node_;
};

// --- elementwise (exact shape match; scalar broadcasting is via *_scalar) ---
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);
Tensor sub_from_scalar(double c, const Tensor& a);

Tensor sigmoid(const Tensor& x);
Tensor log(const Tensor& x);
Tensor clamp(const Tensor& x, double lo, double hi);

// --- structure ---
std::vector<Tensor> chunk(const Tensor& x, int parts);  // along axis 1
Tensor concat(const std::vector<Tensor>& xs);           // along axis 1
Tensor reshape(const Tensor& x, const Shape& s);

// --- reductions ---
enum class Reduce { mean, max };
Tensor reduce(Reduce op, const Tensor& x, int axis, bool keepdim);
Tensor sum_all(const Tensor& x);   // rank-0 result
Tensor mean_all(const Tensor& x);  // rank-0 result

// --- broadcasted gate products (the only non-scalar broadcasts) ---
// x: (b,c,h,w), gate: (b,c); gate value applied across the spatial extent.
Tensor mul_channel_gate(const Tensor& x, const Tensor& gate);
// x: (b,c,h,w), gate: (b,1,h,w); gate value applied across channels.
Tensor mul_spatial_gate(const Tensor& x, const Tensor& gate);

// --- normalizations used by the optional IEA double-normalization path ---
Tensor softmax_last(const Tensor& x);            // over the last axis
Tensor l1_normalize_channels(const Tensor& x);   // over axis 1, positive input

// Reverse-mode sweep from a scalar loss. Populates .grad of every
// requires-grad tensor reachable through the recorded graph. Calling it a
// second time on the same loss without re-recording is an error.
void backward(const Tensor& loss);

// Central-difference gradient oracle, evaluated in double precision with
// recording suspended. f must be pure.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h = 1e-5);

// --- golden-tensor fixture format ---
// u32 rank, rank*u32 extents, row-major f32 payload; little-endian throughout.
void write_tensor(const std::string& path, const Tensor& t);
Tensor read_tensor(const std::string& path);

}  // namespace malunet
