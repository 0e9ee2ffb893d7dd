#pragma once

// Dense tensors with reverse-mode automatic differentiation.
//
// A Tensor is a cheap handle to a shared node. Operations on tensors that
// require gradients record their operands and a backward rule on the output
// node; Tensor::backward() walks the recorded graph in reverse topological
// order, visiting each node once and accumulating gradients additively.
//
// Only float and double are instantiated: training and inference run in
// float, gradient checks re-run the same ops in double.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace tdid {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this node's grad and accumulates into parents' grads.
    std::function<void(Node&)> backward_fn;

    bool is_leaf() const { return !backward_fn; }
};

}  // namespace detail

template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, T value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t numel() const { return node_->data.size(); }

    std::span<const T> data() const { return node_->data; }
    // Writing through this after the tensor has been consumed by a recorded
    // op invalidates that op's backward rule.
    std::span<T> mutable_data() { return node_->data; }
    T item() const;

    bool requires_grad() const { return node_->requires_grad; }
    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const T> grad() const { return node_->grad; }
    std::span<T> mutable_grad() { return node_->grad; }
    void zero_grad();

    // Seeds d(self)/d(self) = 1 for every element and back-propagates.
    void backward() const;

    // Same values, no graph history, requires_grad = false.
    Tensor detach() const;

    template <typename U>
    Tensor<U> cast() const;

    detail::Node<T>* node() const { return node_.get(); }
    const std::shared_ptr<detail::Node<T>>& node_ptr() const { return node_; }

    explicit Tensor(std::shared_ptr<detail::Node<T>> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<detail::Node<T>> node_;
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

// Disables graph recording on the current thread while alive.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

// Builds the output of a custom differentiable op. backward receives the
// output node; inputs are available as out.parents in the order given. When
// no input requires a gradient (or recording is disabled) no history is kept.
template <typename T>
Tensor<T> make_op_output(Shape shape, std::vector<T> data, const std::vector<Tensor<T>>& inputs,
                         std::function<void(detail::Node<T>&)> backward);

// Adds src into node's grad buffer if it participates in differentiation.
template <typename T>
void accumulate_grad(detail::Node<T>& node, std::span<const T> src);

// ---- operations ----------------------------------------------------------

// input [B,Cin,H,W], weight [Cout,Cin,k,k], bias [Cout]. Cross-correlation.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 int stride = 1, int padding = 0);

// scene [B,C,H,W], kernel [C,kh,kw]; same-size output with zero padding
// floor(kh/2), floor(kw/2).
template <typename T>
Tensor<T> depthwise_xcorr(const Tensor<T>& scene, const Tensor<T>& kernel);

// [B,C,H,W] -> [B,C,1,1]; ties resolve to the first row-major location.
template <typename T>
Tensor<T> global_max_pool(const Tensor<T>& input);

// [B,C,H,W] -> [B,C,out_h,out_w] with bins [floor(i*H/out), ceil((i+1)*H/out)).
template <typename T>
Tensor<T> adaptive_max_pool(const Tensor<T>& input, std::size_t out_h, std::size_t out_w);

// scene [B,C,H,W] minus vec [B,C,1,1] at every location.
template <typename T>
Tensor<T> broadcast_sub(const Tensor<T>& scene, const Tensor<T>& vec);

template <typename T>
Tensor<T> relu(const Tensor<T>& input);

// 2x2 window, stride 2, floor on odd extents.
template <typename T>
Tensor<T> maxpool2x2(const Tensor<T>& input);

// Stacks along dim 1 in argument order; B, H, W must agree.
template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& inputs);

// [R,C] -> row-wise softmax.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& input);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

// Sum of all elements, shape [1].
template <typename T>
Tensor<T> sum(const Tensor<T>& input);

template <typename T>
Tensor<T> reshape(const Tensor<T>& input, Shape shape);

// ---- optimizer -----------------------------------------------------------

struct SgdOptions {
    double lr = 0.001;
    double momentum = 0.9;
    double weight_decay = 0.0005;
};

// v <- momentum * v + grad + weight_decay * param; param <- param - lr * v.
// Gradients are zeroed after each step.
template <typename T>
class SgdOptimizer {
public:
    SgdOptimizer(std::vector<Tensor<T>> params, SgdOptions options);

    void step();
    void set_lr(double lr) { options_.lr = lr; }
    const SgdOptions& options() const { return options_; }

private:
    std::vector<Tensor<T>> params_;
    std::vector<std::vector<T>> velocity_;
    SgdOptions options_;
};

// Single step with zero initial velocity.
template <typename T>
void sgd_step(std::vector<Tensor<T>>& params, double lr, double momentum, double weight_decay);

}  // namespace tdid
