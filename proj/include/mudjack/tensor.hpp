#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mudjack/rng.hpp"

namespace mudjack {

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& s);

namespace detail {

struct TensorData {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    void ensure_grad() {
        if (grad.empty()) {
            grad.assign(data.size(), 0.0);
        }
    }
};

}  // namespace detail

// Dense row-major tensor of 64-bit scalars with an optional gradient buffer.
// Copies are shallow handles sharing storage; clone() deep-copies.
class Tensor {
  public:
    Tensor() : impl_(std::make_shared<detail::TensorData>()) {}

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor uniform(Shape shape, double lo, double hi, Rng& rng, bool requires_grad = false);

    const Shape& shape() const { return impl_->shape; }
    int64_t numel() const { return impl_->numel(); }
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    int64_t dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }

    std::span<const double> data() const { return impl_->data; }
    std::span<double> data_mut() { return impl_->data; }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool v) { impl_->requires_grad = v; }

    bool has_grad() const { return !impl_->grad.empty(); }
    std::span<const double> grad() const { return impl_->grad; }
    std::span<double> grad_mut() {
        impl_->ensure_grad();
        return impl_->grad;
    }
    void zero_grad() {
        if (!impl_->grad.empty()) {
            std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
        }
    }
    void drop_grad() { impl_->grad.clear(); }

    double item() const;

    Tensor clone() const;

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

    std::shared_ptr<detail::TensorData> impl() const { return impl_; }

  private:
    explicit Tensor(std::shared_ptr<detail::TensorData> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<detail::TensorData> impl_;

    friend Tensor wrap(std::shared_ptr<detail::TensorData>);
};

// Ordered record of one forward pass; backward replays it once in reverse
// creation order (creation order is a topological order) and then discards
// the nodes, so gradients from successive passes accumulate additively.
class Tape {
  public:
    void record(std::function<void()> backward_fn) { nodes_.push_back(std::move(backward_fn)); }
    size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }
    void replay_backward();

  private:
    std::vector<std::function<void()>> nodes_;
};

Tape* active_tape();

// Installs a tape as the active recording target for this thread.
class TapeScope {
  public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

  private:
    Tape* prev_;
};

// Suspends recording regardless of any installed tape.
class NoGradGuard {
  public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    Tape* prev_;
};

// Seeds d(loss)/d(loss) = 1 and replays the active tape backward. The loss
// must be a scalar. The tape is consumed; accumulated gradients persist
// until reset.
void backward(Tensor& loss);

// ---- primitives -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose2d(const Tensor& a);
Tensor add_rowwise(const Tensor& mat, const Tensor& bias);
Tensor relu(const Tensor& a);
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int pad);
Tensor maxpool2d(const Tensor& x, int window);
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(const Tensor& a, const Tensor& b, int axis);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// Rows of x normalized to unit l2 norm. Rows with norm below 1e-9 map to a
// fixed unit vector (e0) with zero gradient, so the unit-norm contract holds
// for degenerate inputs too.
Tensor l2_normalize_rows(const Tensor& x);

// {N,d} x {N,d} -> {N}: per-row dot products.
Tensor rowwise_dot(const Tensor& a, const Tensor& b);

// Flattened-vector cosine similarity; rejects zero-norm inputs.
Tensor cosine_similarity(const Tensor& a, const Tensor& b);

// Mean cross-entropy of row-wise softmax against integer labels.
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels);

std::vector<double> softmax(std::span<const double> logits);

bool all_finite(std::span<const double> v);

}  // namespace mudjack
