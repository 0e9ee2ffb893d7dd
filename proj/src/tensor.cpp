#include "tdid/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "tdid/error.hpp"

namespace tdid {

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace {

thread_local bool g_grad_enabled = true;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

void check_shape(const Shape& shape) {
    for (auto e : shape) {
        if (e == 0) throw InvalidShapeError("tensor extents must be positive, got " + shape_str(shape));
    }
}

void require_rank(const Shape& s, std::size_t rank, const char* op, const char* arg) {
    if (s.size() != rank) {
        throw InvalidShapeError(std::string(op) + ": " + arg + " must have rank " + std::to_string(rank) +
                                ", got " + shape_str(s));
    }
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// ---- Tensor --------------------------------------------------------------

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
    check_shape(shape);
    auto n = shape_numel(shape);
    return from_data(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::from_data(Shape shape, std::vector<T> data, bool requires_grad) {
    check_shape(shape);
    if (shape_numel(shape) != data.size()) {
        throw InvalidShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                                shape_str(shape));
    }
    auto node = std::make_shared<detail::Node<T>>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

template <typename T>
T Tensor<T>::item() const {
    if (numel() != 1) throw InvalidShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
}

template <typename T>
void Tensor<T>::zero_grad() {
    std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template <typename T>
void Tensor<T>::backward() const {
    using NodeT = detail::Node<T>;
    if (!node_->requires_grad) throw UninitializedGradientError("backward() on a tensor that does not require grad");

    // Iterative post-order DFS gives a topological order (parents first).
    std::vector<NodeT*> order;
    std::unordered_set<NodeT*> visited;
    std::vector<std::pair<NodeT*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    visited.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            NodeT* p = n->parents[next++].get();
            if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    for (NodeT* n : order) {
        if (n->is_leaf()) {
            if (n->grad.size() != n->data.size()) n->grad.assign(n->data.size(), T(0));
        } else {
            n->grad.assign(n->data.size(), T(0));
        }
    }
    std::fill(node_->grad.begin(), node_->grad.end(), T(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if (!(*it)->is_leaf()) (*it)->backward_fn(**it);
    }
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
    return from_data(node_->shape, node_->data, false);
}

template <typename T>
template <typename U>
Tensor<U> Tensor<T>::cast() const {
    std::vector<U> out(node_->data.begin(), node_->data.end());
    return Tensor<U>::from_data(node_->shape, std::move(out), node_->requires_grad && node_->is_leaf());
}

template <typename T>
Tensor<T> make_op_output(Shape shape, std::vector<T> data, const std::vector<Tensor<T>>& inputs,
                         std::function<void(detail::Node<T>&)> backward) {
    auto node = std::make_shared<detail::Node<T>>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    bool needs = false;
    if (g_grad_enabled) {
        for (const auto& in : inputs) needs = needs || in.requires_grad();
    }
    if (needs) {
        node->requires_grad = true;
        node->parents.reserve(inputs.size());
        for (const auto& in : inputs) node->parents.push_back(in.node_ptr());
        node->backward_fn = std::move(backward);
    }
    return Tensor<T>(std::move(node));
}

template <typename T>
void accumulate_grad(detail::Node<T>& node, std::span<const T> src) {
    if (!node.requires_grad) return;
    if (node.grad.size() != node.data.size()) node.grad.assign(node.data.size(), T(0));
    for (std::size_t i = 0; i < src.size(); ++i) node.grad[i] += src[i];
}

// ---- ops -----------------------------------------------------------------

namespace {

template <typename T>
void im2col(const T* img, std::size_t c, std::size_t h, std::size_t w, int k, int stride, int pad,
            std::size_t ho, std::size_t wo, T* cols) {
    const std::size_t p = ho * wo;
    for (std::size_t ci = 0; ci < c; ++ci) {
        for (int u = 0; u < k; ++u) {
            for (int v = 0; v < k; ++v) {
                T* row = cols + ((ci * k + u) * k + v) * p;
                for (std::size_t oy = 0; oy < ho; ++oy) {
                    const long iy = static_cast<long>(oy) * stride - pad + u;
                    T* dst = row + oy * wo;
                    if (iy < 0 || iy >= static_cast<long>(h)) {
                        std::fill(dst, dst + wo, T(0));
                        continue;
                    }
                    const T* src = img + (ci * h + iy) * w;
                    for (std::size_t ox = 0; ox < wo; ++ox) {
                        const long ix = static_cast<long>(ox) * stride - pad + v;
                        dst[ox] = (ix < 0 || ix >= static_cast<long>(w)) ? T(0) : src[ix];
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im(const T* cols, std::size_t c, std::size_t h, std::size_t w, int k, int stride, int pad,
            std::size_t ho, std::size_t wo, T* img) {
    const std::size_t p = ho * wo;
    for (std::size_t ci = 0; ci < c; ++ci) {
        for (int u = 0; u < k; ++u) {
            for (int v = 0; v < k; ++v) {
                const T* row = cols + ((ci * k + u) * k + v) * p;
                for (std::size_t oy = 0; oy < ho; ++oy) {
                    const long iy = static_cast<long>(oy) * stride - pad + u;
                    if (iy < 0 || iy >= static_cast<long>(h)) continue;
                    T* dst = img + (ci * h + iy) * w;
                    const T* src = row + oy * wo;
                    for (std::size_t ox = 0; ox < wo; ++ox) {
                        const long ix = static_cast<long>(ox) * stride - pad + v;
                        if (ix >= 0 && ix < static_cast<long>(w)) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, int stride, int padding) {
    require_rank(input.shape(), 4, "conv2d", "input");
    require_rank(weight.shape(), 4, "conv2d", "weight");
    require_rank(bias.shape(), 1, "conv2d", "bias");
    const std::size_t b = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
    const std::size_t cout = weight.dim(0);
    const int k = static_cast<int>(weight.dim(2));
    if (weight.dim(1) != cin) {
        throw InvalidShapeError("conv2d: input has " + std::to_string(cin) + " channels, weight expects " +
                                std::to_string(weight.dim(1)));
    }
    if (weight.dim(3) != weight.dim(2)) throw InvalidShapeError("conv2d: kernel must be square");
    if (bias.dim(0) != cout) throw InvalidShapeError("conv2d: bias length must equal output channels");
    if (stride < 1 || padding < 0) throw InvalidShapeError("conv2d: stride must be >= 1 and padding >= 0");
    if (h + 2 * padding < static_cast<std::size_t>(k) || w + 2 * padding < static_cast<std::size_t>(k)) {
        throw InvalidShapeError("conv2d: kernel larger than padded input");
    }
    const std::size_t ho = (h + 2 * padding - k) / stride + 1;
    const std::size_t wo = (w + 2 * padding - k) / stride + 1;
    const std::size_t kk = cin * k * k, p = ho * wo;
    const bool direct = (k == 1 && stride == 1 && padding == 0);

    auto cols = std::make_shared<std::vector<T>>();
    if (!direct) cols->resize(b * kk * p);
    std::vector<T> out(b * cout * p);
    ConstMatMap<T> wmat(weight.data().data(), cout, kk);
    for (std::size_t bi = 0; bi < b; ++bi) {
        const T* img = input.data().data() + bi * cin * h * w;
        const T* col = img;
        if (!direct) {
            im2col(img, cin, h, w, k, stride, padding, ho, wo, cols->data() + bi * kk * p);
            col = cols->data() + bi * kk * p;
        }
        MatMap<T> omat(out.data() + bi * cout * p, cout, p);
        omat.noalias() = wmat * ConstMatMap<T>(col, kk, p);
        for (std::size_t co = 0; co < cout; ++co) omat.row(co).array() += bias.data()[co];
    }

    return make_op_output<T>(
        {b, cout, ho, wo}, std::move(out), {input, weight, bias},
        [=](detail::Node<T>& node) {
            auto& in = *node.parents[0];
            auto& wt = *node.parents[1];
            auto& bs = *node.parents[2];
            ConstMatMap<T> wm(wt.data.data(), cout, kk);
            std::vector<T> dcols(in.requires_grad ? kk * p : 0);
            if (wt.requires_grad && wt.grad.empty()) wt.grad.assign(wt.data.size(), T(0));
            if (bs.requires_grad && bs.grad.empty()) bs.grad.assign(bs.data.size(), T(0));
            if (in.requires_grad && in.grad.empty()) in.grad.assign(in.data.size(), T(0));
            for (std::size_t bi = 0; bi < b; ++bi) {
                ConstMatMap<T> dout(node.grad.data() + bi * cout * p, cout, p);
                const T* col = direct ? in.data.data() + bi * cin * h * w : cols->data() + bi * kk * p;
                if (wt.requires_grad) {
                    MatMap<T>(wt.grad.data(), cout, kk).noalias() += dout * ConstMatMap<T>(col, kk, p).transpose();
                }
                if (bs.requires_grad) {
                    for (std::size_t co = 0; co < cout; ++co) bs.grad[co] += dout.row(co).sum();
                }
                if (in.requires_grad) {
                    T* dimg = in.grad.data() + bi * cin * h * w;
                    if (direct) {
                        MatMap<T>(dimg, kk, p).noalias() += wm.transpose() * dout;
                    } else {
                        MatMap<T>(dcols.data(), kk, p).noalias() = wm.transpose() * dout;
                        col2im(dcols.data(), cin, h, w, k, stride, padding, ho, wo, dimg);
                    }
                }
            }
        });
}

template <typename T>
Tensor<T> depthwise_xcorr(const Tensor<T>& scene, const Tensor<T>& kernel) {
    require_rank(scene.shape(), 4, "depthwise_xcorr", "scene");
    require_rank(kernel.shape(), 3, "depthwise_xcorr", "kernel");
    const std::size_t b = scene.dim(0), c = scene.dim(1), h = scene.dim(2), w = scene.dim(3);
    const std::size_t kh = kernel.dim(1), kw = kernel.dim(2);
    if (kernel.dim(0) != c) {
        throw InvalidShapeError("depthwise_xcorr: scene has " + std::to_string(c) + " channels, kernel has " +
                                std::to_string(kernel.dim(0)));
    }
    const long ph = static_cast<long>(kh / 2), pw = static_cast<long>(kw / 2);
    if (kh > h + 2 * kh / 2 || kw > w + 2 * kw / 2) throw InvalidShapeError("depthwise_xcorr: kernel too large");

    std::vector<T> out(b * c * h * w, T(0));
    const T* sd = scene.data().data();
    const T* kd = kernel.data().data();
    for (std::size_t bi = 0; bi < b; ++bi) {
        for (std::size_t ci = 0; ci < c; ++ci) {
            const T* src = sd + (bi * c + ci) * h * w;
            const T* ker = kd + ci * kh * kw;
            T* dst = out.data() + (bi * c + ci) * h * w;
            for (std::size_t u = 0; u < kh; ++u) {
                for (std::size_t v = 0; v < kw; ++v) {
                    const T kv = ker[u * kw + v];
                    const long dy = static_cast<long>(u) - ph, dx = static_cast<long>(v) - pw;
                    for (std::size_t y = 0; y < h; ++y) {
                        const long sy = static_cast<long>(y) + dy;
                        if (sy < 0 || sy >= static_cast<long>(h)) continue;
                        for (std::size_t x = 0; x < w; ++x) {
                            const long sx = static_cast<long>(x) + dx;
                            if (sx < 0 || sx >= static_cast<long>(w)) continue;
                            dst[y * w + x] += src[sy * w + sx] * kv;
                        }
                    }
                }
            }
        }
    }

    return make_op_output<T>(scene.shape(), std::move(out), {scene, kernel}, [=](detail::Node<T>& node) {
        auto& sn = *node.parents[0];
        auto& kn = *node.parents[1];
        std::vector<T> dscene(sn.requires_grad ? sn.data.size() : 0, T(0));
        std::vector<T> dker(kn.requires_grad ? kn.data.size() : 0, T(0));
        for (std::size_t bi = 0; bi < b; ++bi) {
            for (std::size_t ci = 0; ci < c; ++ci) {
                const std::size_t plane = (bi * c + ci) * h * w;
                const T* g = node.grad.data() + plane;
                const T* src = sn.data.data() + plane;
                const T* ker = kn.data.data() + ci * kh * kw;
                for (std::size_t u = 0; u < kh; ++u) {
                    for (std::size_t v = 0; v < kw; ++v) {
                        const long dy = static_cast<long>(u) - ph, dx = static_cast<long>(v) - pw;
                        T acc = 0;
                        for (std::size_t y = 0; y < h; ++y) {
                            const long sy = static_cast<long>(y) + dy;
                            if (sy < 0 || sy >= static_cast<long>(h)) continue;
                            for (std::size_t x = 0; x < w; ++x) {
                                const long sx = static_cast<long>(x) + dx;
                                if (sx < 0 || sx >= static_cast<long>(w)) continue;
                                const std::size_t si = sy * w + sx;
                                if (!dscene.empty()) dscene[plane + si] += g[y * w + x] * ker[u * kw + v];
                                acc += g[y * w + x] * src[si];
                            }
                        }
                        if (!dker.empty()) dker[ci * kh * kw + u * kw + v] += acc;
                    }
                }
            }
        }
        if (!dscene.empty()) accumulate_grad<T>(sn, dscene);
        if (!dker.empty()) accumulate_grad<T>(kn, dker);
    });
}

template <typename T>
Tensor<T> adaptive_max_pool(const Tensor<T>& input, std::size_t out_h, std::size_t out_w) {
    require_rank(input.shape(), 4, "adaptive_max_pool", "input");
    const std::size_t b = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    if (out_h == 0 || out_w == 0 || out_h > h || out_w > w) {
        throw InvalidShapeError("adaptive_max_pool: output extent must be within [1, input extent]");
    }
    std::vector<T> out(b * c * out_h * out_w);
    auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
    const T* d = input.data().data();
    for (std::size_t pl = 0; pl < b * c; ++pl) {
        const T* src = d + pl * h * w;
        for (std::size_t i = 0; i < out_h; ++i) {
            const std::size_t y0 = i * h / out_h, y1 = ((i + 1) * h + out_h - 1) / out_h;
            for (std::size_t j = 0; j < out_w; ++j) {
                const std::size_t x0 = j * w / out_w, x1 = ((j + 1) * w + out_w - 1) / out_w;
                std::size_t best = y0 * w + x0;
                for (std::size_t y = y0; y < y1; ++y) {
                    for (std::size_t x = x0; x < x1; ++x) {
                        if (src[y * w + x] > src[best]) best = y * w + x;
                    }
                }
                const std::size_t o = (pl * out_h + i) * out_w + j;
                out[o] = src[best];
                (*argmax)[o] = pl * h * w + best;
            }
        }
    }
    return make_op_output<T>({b, c, out_h, out_w}, std::move(out), {input}, [argmax](detail::Node<T>& node) {
        auto& in = *node.parents[0];
        if (in.grad.empty()) in.grad.assign(in.data.size(), T(0));
        for (std::size_t o = 0; o < node.grad.size(); ++o) in.grad[(*argmax)[o]] += node.grad[o];
    });
}

template <typename T>
Tensor<T> global_max_pool(const Tensor<T>& input) {
    require_rank(input.shape(), 4, "global_max_pool", "input");
    return adaptive_max_pool(input, 1, 1);
}

template <typename T>
Tensor<T> broadcast_sub(const Tensor<T>& scene, const Tensor<T>& vec) {
    require_rank(scene.shape(), 4, "broadcast_sub", "scene");
    require_rank(vec.shape(), 4, "broadcast_sub", "vec");
    const std::size_t b = scene.dim(0), c = scene.dim(1), hw = scene.dim(2) * scene.dim(3);
    if (vec.dim(0) != b || vec.dim(1) != c || vec.dim(2) != 1 || vec.dim(3) != 1) {
        throw InvalidShapeError("broadcast_sub: vec must be " + shape_str({b, c, 1, 1}) + ", got " +
                                shape_str(vec.shape()));
    }
    std::vector<T> out(scene.data().begin(), scene.data().end());
    for (std::size_t pl = 0; pl < b * c; ++pl) {
        const T v = vec.data()[pl];
        for (std::size_t i = 0; i < hw; ++i) out[pl * hw + i] -= v;
    }
    return make_op_output<T>(scene.shape(), std::move(out), {scene, vec}, [=](detail::Node<T>& node) {
        accumulate_grad<T>(*node.parents[0], node.grad);
        auto& vn = *node.parents[1];
        if (!vn.requires_grad) return;
        std::vector<T> dv(b * c, T(0));
        for (std::size_t pl = 0; pl < b * c; ++pl) {
            T acc = 0;
            for (std::size_t i = 0; i < hw; ++i) acc += node.grad[pl * hw + i];
            dv[pl] = -acc;
        }
        accumulate_grad<T>(vn, dv);
    });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& input) {
    std::vector<T> out(input.numel());
    const auto d = input.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = d[i] > T(0) ? d[i] : T(0);
    return make_op_output<T>(input.shape(), std::move(out), {input}, [](detail::Node<T>& node) {
        auto& in = *node.parents[0];
        if (in.grad.empty()) in.grad.assign(in.data.size(), T(0));
        for (std::size_t i = 0; i < node.grad.size(); ++i) {
            if (in.data[i] > T(0)) in.grad[i] += node.grad[i];
        }
    });
}

template <typename T>
Tensor<T> maxpool2x2(const Tensor<T>& input) {
    require_rank(input.shape(), 4, "maxpool2x2", "input");
    const std::size_t b = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    if (h < 2 || w < 2) throw InvalidShapeError("maxpool2x2: input extent must be >= 2");
    const std::size_t ho = h / 2, wo = w / 2;
    std::vector<T> out(b * c * ho * wo);
    auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
    const T* d = input.data().data();
    for (std::size_t pl = 0; pl < b * c; ++pl) {
        const T* src = d + pl * h * w;
        for (std::size_t y = 0; y < ho; ++y) {
            for (std::size_t x = 0; x < wo; ++x) {
                std::size_t best = (2 * y) * w + 2 * x;
                const std::size_t cand[3] = {best + 1, best + w, best + w + 1};
                for (auto ci : cand) {
                    if (src[ci] > src[best]) best = ci;
                }
                const std::size_t o = (pl * ho + y) * wo + x;
                out[o] = src[best];
                (*argmax)[o] = pl * h * w + best;
            }
        }
    }
    return make_op_output<T>({b, c, ho, wo}, std::move(out), {input}, [argmax](detail::Node<T>& node) {
        auto& in = *node.parents[0];
        if (in.grad.empty()) in.grad.assign(in.data.size(), T(0));
        for (std::size_t o = 0; o < node.grad.size(); ++o) in.grad[(*argmax)[o]] += node.grad[o];
    });
}

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& inputs) {
    if (inputs.empty()) throw InvalidShapeError("concat_channels: no inputs");
    for (const auto& t : inputs) require_rank(t.shape(), 4, "concat_channels", "input");
    const std::size_t b = inputs[0].dim(0), h = inputs[0].dim(2), w = inputs[0].dim(3);
    std::size_t c = 0;
    for (const auto& t : inputs) {
        if (t.dim(0) != b || t.dim(2) != h || t.dim(3) != w) {
            throw InvalidShapeError("concat_channels: mismatched shapes " + shape_str(inputs[0].shape()) + " and " +
                                    shape_str(t.shape()));
        }
        c += t.dim(1);
    }
    const std::size_t hw = h * w;
    std::vector<T> out(b * c * hw);
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (const auto& t : inputs) {
        offsets.push_back(off);
        const std::size_t ct = t.dim(1);
        for (std::size_t bi = 0; bi < b; ++bi) {
            std::copy_n(t.data().data() + bi * ct * hw, ct * hw, out.data() + (bi * c + off) * hw);
        }
        off += ct;
    }
    return make_op_output<T>({b, c, h, w}, std::move(out), inputs, [=](detail::Node<T>& node) {
        for (std::size_t i = 0; i < node.parents.size(); ++i) {
            auto& pn = *node.parents[i];
            if (!pn.requires_grad) continue;
            if (pn.grad.empty()) pn.grad.assign(pn.data.size(), T(0));
            const std::size_t ct = pn.shape[1];
            for (std::size_t bi = 0; bi < b; ++bi) {
                const T* src = node.grad.data() + (bi * c + offsets[i]) * hw;
                T* dst = pn.grad.data() + bi * ct * hw;
                for (std::size_t k = 0; k < ct * hw; ++k) dst[k] += src[k];
            }
        }
    });
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& input) {
    require_rank(input.shape(), 2, "softmax_rows", "input");
    const std::size_t r = input.dim(0), c = input.dim(1);
    std::vector<T> out(r * c);
    const auto d = input.data();
    for (std::size_t i = 0; i < r; ++i) {
        T mx = d[i * c];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, d[i * c + j]);
        T z = 0;
        for (std::size_t j = 0; j < c; ++j) z += (out[i * c + j] = std::exp(d[i * c + j] - mx));
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= z;
    }
    return make_op_output<T>(input.shape(), std::move(out), {input}, [=](detail::Node<T>& node) {
        std::vector<T> dx(r * c);
        for (std::size_t i = 0; i < r; ++i) {
            T dot = 0;
            for (std::size_t j = 0; j < c; ++j) dot += node.grad[i * c + j] * node.data[i * c + j];
            for (std::size_t j = 0; j < c; ++j) dx[i * c + j] = node.data[i * c + j] * (node.grad[i * c + j] - dot);
        }
        accumulate_grad<T>(*node.parents[0], dx);
    });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw InvalidShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return make_op_output<T>(a.shape(), std::move(out), {a, b}, [](detail::Node<T>& node) {
        accumulate_grad<T>(*node.parents[0], node.grad);
        accumulate_grad<T>(*node.parents[1], node.grad);
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw InvalidShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    return make_op_output<T>(a.shape(), std::move(out), {a, b}, [](detail::Node<T>& node) {
        auto& an = *node.parents[0];
        auto& bn = *node.parents[1];
        std::vector<T> g(node.grad.size());
        if (an.requires_grad) {
            for (std::size_t i = 0; i < g.size(); ++i) g[i] = node.grad[i] * bn.data[i];
            accumulate_grad<T>(an, g);
        }
        if (bn.requires_grad) {
            for (std::size_t i = 0; i < g.size(); ++i) g[i] = node.grad[i] * an.data[i];
            accumulate_grad<T>(bn, g);
        }
    });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& input) {
    T acc = 0;
    for (auto v : input.data()) acc += v;
    return make_op_output<T>({1}, {acc}, {input}, [](detail::Node<T>& node) {
        auto& in = *node.parents[0];
        std::vector<T> g(in.data.size(), node.grad[0]);
        accumulate_grad<T>(in, g);
    });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& input, Shape shape) {
    check_shape(shape);
    if (shape_numel(shape) != input.numel()) {
        throw InvalidShapeError("reshape: cannot view " + shape_str(input.shape()) + " as " + shape_str(shape));
    }
    std::vector<T> out(input.data().begin(), input.data().end());
    return make_op_output<T>(std::move(shape), std::move(out), {input},
                             [](detail::Node<T>& node) { accumulate_grad<T>(*node.parents[0], node.grad); });
}

// ---- optimizer -----------------------------------------------------------

template <typename T>
SgdOptimizer<T>::SgdOptimizer(std::vector<Tensor<T>> params, SgdOptions options)
    : params_(std::move(params)), options_(options) {
    velocity_.reserve(params_.size());
    for (const auto& p : params_) velocity_.emplace_back(p.numel(), T(0));
}

template <typename T>
void SgdOptimizer<T>::step() {
    for (std::size_t i = 0; i < params_.size(); ++i) {
        if (!params_[i].has_grad()) {
            throw UninitializedGradientError("sgd step: parameter " + std::to_string(i) + " " +
                                             shape_str(params_[i].shape()) + " has no gradient");
        }
    }
    const T lr = static_cast<T>(options_.lr);
    const T mom = static_cast<T>(options_.momentum);
    const T wd = static_cast<T>(options_.weight_decay);
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto data = params_[i].mutable_data();
        auto grad = params_[i].mutable_grad();
        auto& v = velocity_[i];
        for (std::size_t k = 0; k < data.size(); ++k) {
            v[k] = mom * v[k] + grad[k] + wd * data[k];
            data[k] -= lr * v[k];
            grad[k] = T(0);
        }
    }
}

template <typename T>
void sgd_step(std::vector<Tensor<T>>& params, double lr, double momentum, double weight_decay) {
    SgdOptimizer<T> opt(params, {lr, momentum, weight_decay});
    opt.step();
}

#define TDID_INSTANTIATE(T)                                                                                       \
    template class Tensor<T>;                                                                                     \
    template Tensor<T> make_op_output<T>(Shape, std::vector<T>, const std::vector<Tensor<T>>&,                    \
                                         std::function<void(detail::Node<T>&)>);                                  \
    template void accumulate_grad<T>(detail::Node<T>&, std::span<const T>);                                       \
    template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int);                 \
    template Tensor<T> depthwise_xcorr<T>(const Tensor<T>&, const Tensor<T>&);                                    \
    template Tensor<T> global_max_pool<T>(const Tensor<T>&);                                                      \
    template Tensor<T> adaptive_max_pool<T>(const Tensor<T>&, std::size_t, std::size_t);                          \
    template Tensor<T> broadcast_sub<T>(const Tensor<T>&, const Tensor<T>&);                                      \
    template Tensor<T> relu<T>(const Tensor<T>&);                                                                 \
    template Tensor<T> maxpool2x2<T>(const Tensor<T>&);                                                           \
    template Tensor<T> concat_channels<T>(const std::vector<Tensor<T>>&);                                         \
    template Tensor<T> softmax_rows<T>(const Tensor<T>&);                                                         \
    template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                                \
    template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                                                \
    template Tensor<T> sum<T>(const Tensor<T>&);                                                                  \
    template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                                       \
    template class SgdOptimizer<T>;                                                                               \
    template void sgd_step<T>(std::vector<Tensor<T>>&, double, double, double);

TDID_INSTANTIATE(float)
TDID_INSTANTIATE(double)

#undef TDID_INSTANTIATE

template Tensor<double> Tensor<float>::cast<double>() const;
template Tensor<float> Tensor<double>::cast<float>() const;
template Tensor<float> Tensor<float>::cast<float>() const;
template Tensor<double> Tensor<double>::cast<double>() const;

}  // namespace tdid
