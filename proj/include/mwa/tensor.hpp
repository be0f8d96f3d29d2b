#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mwa {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (int e : s) {
        if (e <= 0) throw std::invalid_argument("tensor extents must be positive");
        n *= e;
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

/// Flat storage shared between tensor views. Gradient buffer is allocated
/// lazily; an empty grad means "no gradient has reached this node yet".
template <typename T>
struct TensorNode {
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    }
    bool has_grad() const { return !grad.empty(); }
};

/// Dense row-major tensor. Copies share the underlying node (cheap handles);
/// reshape is metadata-only. Use clone() for an independent deep copy.
template <typename T>
class Tensor {
public:
    Tensor() : shape_{0} {}

    explicit Tensor(Shape shape)
        : shape_(std::move(shape)), node_(std::make_shared<TensorNode<T>>()) {
        node_->value.assign(static_cast<size_t>(shape_numel(shape_)), T(0));
    }

    Tensor(Shape shape, std::vector<T> data)
        : shape_(std::move(shape)), node_(std::make_shared<TensorNode<T>>()) {
        if (static_cast<std::int64_t>(data.size()) != shape_numel(shape_))
            throw std::invalid_argument("data length " + std::to_string(data.size()) +
                                        " does not match shape " + shape_str(shape_));
        node_->value = std::move(data);
    }

    static Tensor scalar(T v) { return Tensor({1}, {v}); }

    static Tensor full(Shape shape, T v) {
        Tensor t(std::move(shape));
        for (auto& x : t.node_->value) x = v;
        return t;
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    const Shape& shape() const { return shape_; }
    int dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
    int ndim() const { return static_cast<int>(shape_.size()); }
    std::int64_t numel() const { return static_cast<std::int64_t>(node_->value.size()); }

    /// Size of the last axis; rows() is everything before it collapsed.
    int last_dim() const { return shape_.empty() ? 1 : shape_.back(); }
    std::int64_t rows() const { return numel() / last_dim(); }

    T* data() { return node_->value.data(); }
    const T* data() const { return node_->value.data(); }
    std::vector<T>& values() { return node_->value; }
    const std::vector<T>& values() const { return node_->value; }

    T& at(std::int64_t i) { return node_->value[static_cast<size_t>(i)]; }
    T at(std::int64_t i) const { return node_->value[static_cast<size_t>(i)]; }

    T value() const {
        if (numel() != 1) throw std::invalid_argument("value() requires a 1-element tensor, got " + shape_str(shape_));
        return node_->value[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) { node_->requires_grad = rg; }

    const std::vector<T>& grad() const {
        if (!node_->has_grad())
            throw std::runtime_error("no gradient recorded for this tensor");
        return node_->grad;
    }
    bool has_grad() const { return node_->has_grad(); }
    void zero_grad() { node_->grad.assign(node_->value.size(), T(0)); }
    void clear_grad() { node_->grad.clear(); }

    /// Gradient as a tensor of the same shape (zeros when absent).
    Tensor grad_tensor() const {
        if (!node_->has_grad()) return Tensor::zeros(shape_);
        return Tensor(shape_, node_->grad);
    }

    /// Same storage, new shape. Gradients flow through transparently.
    Tensor reshaped(Shape shape) const {
        if (shape_numel(shape) != numel())
            throw std::invalid_argument("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
        Tensor t;
        t.shape_ = std::move(shape);
        t.node_ = node_;
        return t;
    }

    /// Independent deep copy (fresh node, no gradient, no graph links).
    Tensor clone() const {
        Tensor t(shape_, node_->value);
        return t;
    }

    bool same_node(const Tensor& other) const { return node_ == other.node_; }
    const std::shared_ptr<TensorNode<T>>& node() const { return node_; }

private:
    Shape shape_;
    std::shared_ptr<TensorNode<T>> node_;
};

template <typename T>
bool all_finite(const Tensor<T>& t) {
    for (T v : t.values())
        if (!std::isfinite(v)) return false;
    return true;
}

template <typename T>
void assert_finite(const Tensor<T>& t, const char* what) {
    if (!all_finite(t)) throw std::runtime_error(std::string("non-finite values in ") + what);
}

/// Records each differentiable operation in execution order while alive.
/// backward() seeds the scalar loss with 1 and replays the records in
/// reverse, accumulating gradients into the reached nodes. Replay order is
/// fixed, so repeated runs on identical inputs give bitwise-equal gradients.
template <typename T>
class GradTape {
public:
    GradTape() {
        prev_ = active_;
        active_ = this;
    }
    ~GradTape() { active_ = prev_; }

    GradTape(const GradTape&) = delete;
    GradTape& operator=(const GradTape&) = delete;

    static GradTape* active() { return active_; }

    void record(std::function<void()> fn) { steps_.push_back(std::move(fn)); }
    size_t size() const { return steps_.size(); }

    void backward(const Tensor<T>& loss) {
        if (loss.numel() != 1)
            throw std::invalid_argument("backward requires a scalar loss, got " + shape_str(loss.shape()));
        if (!std::isfinite(loss.value()))
            throw std::runtime_error("non-finite loss in backward");
        loss.node()->ensure_grad();
        loss.node()->grad[0] += T(1);
        for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
    }

private:
    std::vector<std::function<void()>> steps_;
    GradTape* prev_ = nullptr;
    static thread_local GradTape* active_;
};

template <typename T>
thread_local GradTape<T>* GradTape<T>::active_ = nullptr;

}  // namespace mwa
