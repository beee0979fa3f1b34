// SPDX-License-Identifier: Apache-2.0

#include "reportgen/tensor.hpp"

#include <Eigen/Core>
#include <fmt/format.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <unordered_set>

namespace reportgen {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;
using Node = detail::Node;
using NodePtr = std::shared_ptr<Node>;

std::atomic<std::uint64_t> g_next_seq{0};
thread_local bool g_grad_enabled = true;

NodePtr make_node(Shape shape, Buffer data) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->seq = g_next_seq.fetch_add(1, std::memory_order_relaxed);
    return node;
}

bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
    if (!g_grad_enabled) {
        return false;
    }
    return std::any_of(inputs.begin(), inputs.end(),
                       [](const Tensor* t) { return t->defined() && t->requires_grad(); });
}

// Attaches parents and a backward closure when gradient recording applies.
Tensor finish(NodePtr out, std::initializer_list<const Tensor*> inputs,
              std::function<void(Node&)> backward) {
    if (any_requires_grad(inputs)) {
        out->requires_grad = true;
        for (const Tensor* t : inputs) {
            if (t->defined()) {
                out->parents.push_back(t->node());
            }
        }
        out->backward_fn = std::move(backward);
    }
    return Tensor(std::move(out));
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
    if (!t.defined()) {
        throw DimensionError(fmt::format("{}: undefined tensor", op));
    }
    if (t.rank() != rank) {
        throw DimensionError(
            fmt::format("{}: expected rank {} but got shape {}", op, rank, shape_str(t.shape())));
    }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(fmt::format("{}: shape mismatch {} vs {}", op, shape_str(a.shape()),
                                         shape_str(b.shape())));
    }
}

// Gradient buffer of a parent, or nullptr when the parent takes no gradient.
double* grad_of(const NodePtr& node) {
    if (!node->requires_grad) {
        return nullptr;
    }
    return node->grad_buffer().data();
}

MatMap as_matrix(double* ptr, std::size_t rows, std::size_t cols) {
    return MatMap(ptr, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

ConstMatMap as_matrix(const double* ptr, std::size_t rows, std::size_t cols) {
    return ConstMatMap(ptr, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    return fmt::format("[{}]", fmt::join(shape, "x"));
}

Buffer& detail::Node::grad_buffer() {
    if (grad.empty()) {
        grad.assign(data.size(), 0.0);
    }
    return grad;
}

// --- Tensor ---------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    for (auto d : shape) {
        if (d == 0) {
            throw DimensionError(fmt::format("zero-sized dimension in {}", shape_str(shape)));
        }
    }
    const auto n = shape_numel(shape);
    auto node = make_node(std::move(shape), Buffer(n, value));
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    for (auto d : shape) {
        if (d == 0) {
            throw DimensionError(fmt::format("zero-sized dimension in {}", shape_str(shape)));
        }
    }
    if (shape_numel(shape) != values.size()) {
        throw DimensionError(fmt::format("shape {} holds {} values, got {}", shape_str(shape),
                                         shape_numel(shape), values.size()));
    }
    auto node = make_node(std::move(shape), Buffer(values.begin(), values.end()));
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from({}, {value}, requires_grad);
}

const Shape& Tensor::shape() const {
    return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= rank()) {
        throw DimensionError(fmt::format("axis {} out of range for {}", axis, shape_str(shape())));
    }
    return node_->shape[axis];
}

std::size_t Tensor::numel() const {
    return node_->data.size();
}

std::span<const double> Tensor::data() const {
    return node_->data;
}

std::span<double> Tensor::mutable_data() {
    return node_->data;
}

double Tensor::item() const {
    if (numel() != 1) {
        throw DimensionError(fmt::format("item() on non-scalar {}", shape_str(shape())));
    }
    return node_->data[0];
}

double Tensor::at(std::size_t row, std::size_t col) const {
    return node_->data[row * shape().back() + col];
}

bool Tensor::requires_grad() const {
    return node_->requires_grad;
}

void Tensor::set_requires_grad(bool flag) {
    if (!node_->is_leaf()) {
        throw std::logic_error("requires_grad can only be changed on leaf tensors");
    }
    node_->requires_grad = flag;
    if (!flag) {
        node_->grad.clear();
    }
}

bool Tensor::has_grad() const {
    return !node_->grad.empty();
}

std::span<const double> Tensor::grad() const {
    return node_->grad;
}

void Tensor::zero_grad() {
    node_->grad.clear();
}

Tensor Tensor::clone() const {
    auto node = make_node(node_->shape, node_->data);
    return Tensor(std::move(node));
}

void Tensor::backward() const {
    if (!defined() || numel() != 1) {
        throw std::logic_error(
            fmt::format("backward() needs a scalar loss, got {}",
                        defined() ? shape_str(shape()) : std::string("undefined")));
    }
    if (!node_->requires_grad) {
        throw std::logic_error("backward(): loss is not connected to any tensor requiring grad");
    }

    // Owning pointers: releasing the graph below must not free pending nodes.
    std::vector<NodePtr> order;
    std::unordered_set<Node*> seen;
    std::vector<NodePtr> stack{node_};
    seen.insert(node_.get());
    while (!stack.empty()) {
        NodePtr n = std::move(stack.back());
        stack.pop_back();
        for (const auto& p : n->parents) {
            if (p->requires_grad && seen.insert(p.get()).second) {
                stack.push_back(p);
            }
        }
        order.push_back(std::move(n));
    }
    std::sort(order.begin(), order.end(), [](const NodePtr& a, const NodePtr& b) { return a->seq > b->seq; });

    node_->grad_buffer()[0] += 1.0;
    for (const NodePtr& n : order) {
        if (n->is_leaf()) {
            continue;
        }
        if (!n->grad.empty()) {
            n->backward_fn(*n);
        }
        n->grad.clear();
        n->grad.shrink_to_fit();
        n->backward_fn = nullptr;
        n->parents.clear();
    }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) {
    g_grad_enabled = false;
}

NoGradGuard::~NoGradGuard() {
    g_grad_enabled = previous_;
}

bool grad_enabled() {
    return g_grad_enabled;
}

// --- linear algebra -------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw DimensionError(fmt::format("matmul: inner dimensions differ, {} x {}",
                                         shape_str(a.shape()), shape_str(b.shape())));
    }
    Buffer out(m * n);
    as_matrix(out.data(), m, n).noalias() =
        as_matrix(a.data().data(), m, k) * as_matrix(b.data().data(), k, n);
    auto node = make_node({m, n}, std::move(out));
    return finish(std::move(node), {&a, &b}, [m, k, n](Node& self) {
        const auto& pa = self.parents[0];
        const auto& pb = self.parents[1];
        auto dc = as_matrix(self.grad.data(), m, n);
        if (double* ga = grad_of(pa)) {
            as_matrix(ga, m, k).noalias() += dc * as_matrix(pb->data.data(), k, n).transpose();
        }
        if (double* gb = grad_of(pb)) {
            as_matrix(gb, k, n).noalias() += as_matrix(pa->data.data(), m, k).transpose() * dc;
        }
    });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    require_rank(x, 2, "linear");
    require_rank(weight, 2, "linear");
    const auto t = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
    if (weight.dim(1) != in) {
        throw DimensionError(fmt::format("linear: input {} does not match weight {}",
                                         shape_str(x.shape()), shape_str(weight.shape())));
    }
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_dim)) {
        throw DimensionError(fmt::format("linear: bias {} does not match weight {}",
                                         shape_str(bias.shape()), shape_str(weight.shape())));
    }
    Buffer out(t * out_dim);
    auto y = as_matrix(out.data(), t, out_dim);
    y.noalias() = as_matrix(x.data().data(), t, in) *
                  as_matrix(weight.data().data(), out_dim, in).transpose();
    if (bias.defined()) {
        y.rowwise() += as_matrix(bias.data().data(), 1, out_dim).row(0);
    }
    const bool has_bias = bias.defined();
    auto node = make_node({t, out_dim}, std::move(out));
    return finish(std::move(node), {&x, &weight, &bias}, [t, in, out_dim, has_bias](Node& self) {
        const auto& px = self.parents[0];
        const auto& pw = self.parents[1];
        auto dy = as_matrix(self.grad.data(), t, out_dim);
        if (double* gx = grad_of(px)) {
            as_matrix(gx, t, in).noalias() += dy * as_matrix(pw->data.data(), out_dim, in);
        }
        if (double* gw = grad_of(pw)) {
            as_matrix(gw, out_dim, in).noalias() += dy.transpose() * as_matrix(px->data.data(), t, in);
        }
        if (has_bias) {
            if (double* gb = grad_of(self.parents[2])) {
                as_matrix(gb, 1, out_dim) += dy.colwise().sum();
            }
        }
    });
}

Tensor transpose(const Tensor& x) {
    require_rank(x, 2, "transpose");
    const auto r = x.dim(0), c = x.dim(1);
    Buffer out(r * c);
    as_matrix(out.data(), c, r) = as_matrix(x.data().data(), r, c).transpose();
    auto node = make_node({c, r}, std::move(out));
    return finish(std::move(node), {&x}, [r, c](Node& self) {
        if (double* g = grad_of(self.parents[0])) {
            as_matrix(g, r, c) += as_matrix(self.grad.data(), c, r).transpose();
        }
    });
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw DimensionError(
            fmt::format("reshape: cannot view {} as {}", shape_str(x.shape()), shape_str(shape)));
    }
    auto node = make_node(std::move(shape), Buffer(x.data().begin(), x.data().end()));
    return finish(std::move(node), {&x}, [](Node& self) {
        if (double* g = grad_of(self.parents[0])) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                g[i] += self.grad[i];
            }
        }
    });
}

// --- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Buffer out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a.data()[i] + b.data()[i];
    }
    auto node = make_node(a.shape(), std::move(out));
    return finish(std::move(node), {&a, &b}, [](Node& self) {
        for (const auto& p : self.parents) {
            if (double* g = grad_of(p)) {
                for (std::size_t i = 0; i < self.grad.size(); ++i) {
                    g[i] += self.grad[i];
                }
            }
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    Buffer out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a.data()[i] - b.data()[i];
    }
    auto node = make_node(a.shape(), std::move(out));
    return finish(std::move(node), {&a, &b}, [](Node& self) {
        if (double* g = grad_of(self.parents[0])) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                g[i] += self.grad[i];
            }
        }
        if (double* g = grad_of(self.parents[1])) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                g[i] -= self.grad[i];
            }
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    Buffer out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a.data()[i] * b.data()[i];
    }
    auto node = make_node(a.shape(), std::move(out));
    return finish(std::move(node), {&a, &b}, [](Node& self) {
        const auto& pa = self.parents[0];
        // mul(x, x) records the same node twice; both branches accumulate.
        const auto& pb = self.parents[1];
        if (double* g = grad_of(pa)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                g[i] += self.grad[i] * pb->data[i];
            }
        }
        if (double* g = grad_of(pb)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                g[i] += self.grad[i] * pa->data[i];
            }
        }
    });
}

Tensor scale(const Tensor& x, double factor) {
    Buffer out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = x.data()[i] * factor;
    }
    auto node = make_node(x.shape(), std::move(out));
    return finish(std::move(node), {&x}, [factor](Node& self) {
        if (double* g = grad_of(self.parents[0])) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                g[i] += self.grad[i] * factor;
            }
        }
    });
}

Tensor gelu(const Tensor& x) {
    static const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
    static const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * M_PI);
    Buffer out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = x.data()[i];
        out[i] = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
    }
    auto node = make_node(x.shape(), std::move(out));
    return finish(std::move(node), {&x}, [](Node& self) {
        const auto& px = self.parents[0];
        if (double* g = grad_of(px)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                const double v = px->data[i];
                const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
                const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
                g[i] += self.grad[i] * (cdf + v * pdf);
            }
        }
    });
}

// --- reductions and normalisation -----------------------------------------

Tensor sum(const Tensor& x) {
    double total = 0.0;
    for (double v : x.data()) {
        total += v;
    }
    auto node = make_node({}, {total});
    return finish(std::move(node), {&x}, [](Node& self) {
        if (double* g = grad_of(self.parents[0])) {
            const auto n = self.parents[0]->data.size();
            for (std::size_t i = 0; i < n; ++i) {
                g[i] += self.grad[0];
            }
        }
    });
}

Tensor mean(const Tensor& x) {
    return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor softmax(const Tensor& x, std::size_t axis) {
    const auto& shape = x.shape();
    if (axis >= shape.size()) {
        throw DimensionError(fmt::format("softmax: axis {} out of range for {}", axis, shape_str(shape)));
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) {
        outer *= shape[i];
    }
    for (std::size_t i = axis + 1; i < shape.size(); ++i) {
        inner *= shape[i];
    }
    const auto n = shape[axis];
    Buffer out(x.numel());
    const auto in = x.data();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t base = o * n * inner + i;
            double peak = in[base];
            for (std::size_t j = 1; j < n; ++j) {
                peak = std::max(peak, in[base + j * inner]);
            }
            double total = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                out[base + j * inner] = std::exp(in[base + j * inner] - peak);
                total += out[base + j * inner];
            }
            for (std::size_t j = 0; j < n; ++j) {
                out[base + j * inner] /= total;
            }
        }
    }
    auto node = make_node(shape, std::move(out));
    return finish(std::move(node), {&x}, [outer, inner, n](Node& self) {
        double* g = grad_of(self.parents[0]);
        if (!g) {
            return;
        }
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t i = 0; i < inner; ++i) {
                const std::size_t base = o * n * inner + i;
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    dot += self.grad[base + j * inner] * self.data[base + j * inner];
                }
                for (std::size_t j = 0; j < n; ++j) {
                    const auto idx = base + j * inner;
                    g[idx] += self.data[idx] * (self.grad[idx] - dot);
                }
            }
        }
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    require_rank(x, 2, "layer_norm");
    const auto t = x.dim(0), d = x.dim(1);
    if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
        throw DimensionError(fmt::format("layer_norm: affine params {} / {} for width {}",
                                         shape_str(gamma.shape()), shape_str(beta.shape()), d));
    }
    Buffer out(t * d);
    Buffer xhat(t * d);
    Buffer rstd(t);
    const auto in = x.data();
    const auto ga = gamma.data();
    const auto be = beta.data();
    for (std::size_t r = 0; r < t; ++r) {
        const double* row = in.data() + r * d;
        double mu = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
            mu += row[c];
        }
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
            var += (row[c] - mu) * (row[c] - mu);
        }
        var /= static_cast<double>(d);
        rstd[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t c = 0; c < d; ++c) {
            const double h = (row[c] - mu) * rstd[r];
            xhat[r * d + c] = h;
            out[r * d + c] = h * ga[c] + be[c];
        }
    }
    auto node = make_node({t, d}, std::move(out));
    return finish(std::move(node), {&x, &gamma, &beta},
                  [t, d, xhat = std::move(xhat), rstd = std::move(rstd)](Node& self) {
        const auto& px = self.parents[0];
        const auto& pg = self.parents[1];
        const auto& pbeta = self.parents[2];
        double* gx = grad_of(px);
        double* gg = grad_of(pg);
        double* gb = grad_of(pbeta);
        Buffer dxhat(d);
        for (std::size_t r = 0; r < t; ++r) {
            const double* dy = self.grad.data() + r * d;
            const double* h = xhat.data() + r * d;
            double mean_dxhat = 0.0, mean_dxhat_h = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
                if (gg) {
                    gg[c] += dy[c] * h[c];
                }
                if (gb) {
                    gb[c] += dy[c];
                }
                dxhat[c] = dy[c] * pg->data[c];
                mean_dxhat += dxhat[c];
                mean_dxhat_h += dxhat[c] * h[c];
            }
            if (!gx) {
                continue;
            }
            mean_dxhat /= static_cast<double>(d);
            mean_dxhat_h /= static_cast<double>(d);
            for (std::size_t c = 0; c < d; ++c) {
                gx[r * d + c] += rstd[r] * (dxhat[c] - mean_dxhat - h[c] * mean_dxhat_h);
            }
        }
    });
}

// --- sequence ops ---------------------------------------------------------

Tensor embedding(const Tensor& table, std::span<const std::int64_t> ids) {
    require_rank(table, 2, "embedding");
    const auto vocab = table.dim(0), d = table.dim(1);
    if (ids.empty()) {
        throw DimensionError("embedding: empty id list");
    }
    Buffer out(ids.size() * d);
    for (std::size_t t = 0; t < ids.size(); ++t) {
        if (ids[t] < 0 || static_cast<std::size_t>(ids[t]) >= vocab) {
            throw DimensionError(fmt::format("embedding: id {} outside table of {} rows", ids[t], vocab));
        }
        std::copy_n(table.data().data() + static_cast<std::size_t>(ids[t]) * d, d, out.data() + t * d);
    }
    auto node = make_node({ids.size(), d}, std::move(out));
    return finish(std::move(node), {&table}, [d, ids = std::vector<std::int64_t>(ids.begin(), ids.end())](Node& self) {
        double* g = grad_of(self.parents[0]);
        if (!g) {
            return;
        }
        for (std::size_t t = 0; t < ids.size(); ++t) {
            double* dst = g + static_cast<std::size_t>(ids[t]) * d;
            const double* src = self.grad.data() + t * d;
            for (std::size_t c = 0; c < d; ++c) {
                dst[c] += src[c];
            }
        }
    });
}

Tensor concat_rows(std::span<const Tensor> parts) {
    if (parts.empty()) {
        throw DimensionError("concat_rows: nothing to concatenate");
    }
    const auto width = parts.front().dim(1);
    std::size_t rows = 0;
    for (const auto& p : parts) {
        require_rank(p, 2, "concat_rows");
        if (p.dim(1) != width) {
            throw DimensionError(fmt::format("concat_rows: width {} vs {}", shape_str(parts.front().shape()),
                                             shape_str(p.shape())));
        }
        rows += p.dim(0);
    }
    Buffer out;
    out.reserve(rows * width);
    bool grad = false;
    for (const auto& p : parts) {
        out.insert(out.end(), p.data().begin(), p.data().end());
        grad = grad || p.requires_grad();
    }
    auto node = make_node({rows, width}, std::move(out));
    if (grad && g_grad_enabled) {
        node->requires_grad = true;
        for (const auto& p : parts) {
            node->parents.push_back(p.node());
        }
        node->backward_fn = [](Node& self) {
            std::size_t offset = 0;
            for (const auto& p : self.parents) {
                const auto n = p->data.size();
                if (double* g = grad_of(p)) {
                    for (std::size_t i = 0; i < n; ++i) {
                        g[i] += self.grad[offset + i];
                    }
                }
                offset += n;
            }
        };
    }
    return Tensor(std::move(node));
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
    require_rank(x, 2, "slice_rows");
    if (begin >= end || end > x.dim(0)) {
        throw DimensionError(
            fmt::format("slice_rows: [{}, {}) invalid for {}", begin, end, shape_str(x.shape())));
    }
    const auto width = x.dim(1);
    Buffer out(x.data().begin() + static_cast<std::ptrdiff_t>(begin * width),
                            x.data().begin() + static_cast<std::ptrdiff_t>(end * width));
    auto node = make_node({end - begin, width}, std::move(out));
    return finish(std::move(node), {&x}, [begin, width](Node& self) {
        if (double* g = grad_of(self.parents[0])) {
            double* dst = g + begin * width;
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                dst[i] += self.grad[i];
            }
        }
    });
}

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            std::size_t num_heads, bool causal) {
    require_rank(q, 2, "attention");
    require_rank(k, 2, "attention");
    require_rank(v, 2, "attention");
    const auto tq = q.dim(0), tk = k.dim(0), d = q.dim(1);
    if (k.dim(1) != d || v.shape() != k.shape()) {
        throw DimensionError(fmt::format("attention: q {} k {} v {}", shape_str(q.shape()),
                                         shape_str(k.shape()), shape_str(v.shape())));
    }
    if (num_heads == 0 || d % num_heads != 0) {
        throw DimensionError(fmt::format("attention: width {} not divisible by {} heads", d, num_heads));
    }
    if (causal && tq != tk) {
        throw DimensionError("attention: causal masking needs equal query and key lengths");
    }
    const auto dh = d / num_heads;
    const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const auto strided = [d](const double* base, std::size_t rows, std::size_t head, std::size_t dh) {
        return Eigen::Map<const RowMatrix, 0, Eigen::OuterStride<>>(
            base + head * dh, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(dh),
            Eigen::OuterStride<>(static_cast<Eigen::Index>(d)));
    };

    Buffer out(tq * d);
    Buffer probs(num_heads * tq * tk);
    for (std::size_t h = 0; h < num_heads; ++h) {
        auto p = as_matrix(probs.data() + h * tq * tk, tq, tk);
        p.noalias() = strided(q.data().data(), tq, h, dh) * strided(k.data().data(), tk, h, dh).transpose();
        p *= inv_scale;
        for (std::size_t i = 0; i < tq; ++i) {
            const std::size_t limit = causal ? i + 1 : tk;
            double peak = p(i, 0);
            for (std::size_t j = 1; j < limit; ++j) {
                peak = std::max(peak, p(i, j));
            }
            double total = 0.0;
            for (std::size_t j = 0; j < limit; ++j) {
                p(i, j) = std::exp(p(i, j) - peak);
                total += p(i, j);
            }
            for (std::size_t j = 0; j < limit; ++j) {
                p(i, j) /= total;
            }
            for (std::size_t j = limit; j < tk; ++j) {
                p(i, j) = 0.0;
            }
        }
        Eigen::Map<RowMatrix, 0, Eigen::OuterStride<>> o(out.data() + h * dh, static_cast<Eigen::Index>(tq),
                                                          static_cast<Eigen::Index>(dh),
                                                          Eigen::OuterStride<>(static_cast<Eigen::Index>(d)));
        o.noalias() = p * strided(v.data().data(), tk, h, dh);
    }
    auto node = make_node({tq, d}, std::move(out));
    return finish(std::move(node), {&q, &k, &v},
                  [=, probs = std::move(probs)](Node& self) {
        const auto& pq = self.parents[0];
        const auto& pk = self.parents[1];
        const auto& pv = self.parents[2];
        double* gq = grad_of(pq);
        double* gk = grad_of(pk);
        double* gv = grad_of(pv);
        const auto mutable_strided = [d](double* base, std::size_t rows, std::size_t head, std::size_t dh) {
            return Eigen::Map<RowMatrix, 0, Eigen::OuterStride<>>(
                base + head * dh, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(dh),
                Eigen::OuterStride<>(static_cast<Eigen::Index>(d)));
        };
        RowMatrix dp(tq, tk);
        for (std::size_t h = 0; h < num_heads; ++h) {
            auto p = as_matrix(probs.data() + h * tq * tk, tq, tk);
            auto dout = strided(self.grad.data(), tq, h, dh);
            if (gv) {
                mutable_strided(gv, tk, h, dh).noalias() += p.transpose() * dout;
            }
            if (!gq && !gk) {
                continue;
            }
            dp.noalias() = dout * strided(pv->data.data(), tk, h, dh).transpose();
            for (std::size_t i = 0; i < tq; ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j < tk; ++j) {
                    dot += dp(i, j) * p(i, j);
                }
                for (std::size_t j = 0; j < tk; ++j) {
                    dp(i, j) = p(i, j) * (dp(i, j) - dot) * inv_scale;
                }
            }
            if (gq) {
                mutable_strided(gq, tq, h, dh).noalias() += dp * strided(pk->data.data(), tk, h, dh);
            }
            if (gk) {
                mutable_strided(gk, tk, h, dh).noalias() += dp.transpose() * strided(pq->data.data(), tq, h, dh);
            }
        }
    });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> targets,
                     const std::vector<bool>& include) {
    require_rank(logits, 2, "cross_entropy");
    const auto t = logits.dim(0), vocab = logits.dim(1);
    if (targets.size() != t || include.size() != t) {
        throw DimensionError(fmt::format("cross_entropy: {} logit rows, {} targets, {} mask entries", t,
                                         targets.size(), include.size()));
    }
    const auto count = static_cast<std::size_t>(std::count(include.begin(), include.end(), true));
    if (count == 0) {
        throw std::domain_error("cross_entropy: every position is excluded from the loss");
    }
    const auto in = logits.data();
    // Softmax rows for included positions only, reused by backward.
    Buffer probs(t * vocab, 0.0);
    double total = 0.0;
    for (std::size_t r = 0; r < t; ++r) {
        if (!include[r]) {
            continue;
        }
        if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab) {
            throw DimensionError(fmt::format("cross_entropy: target {} at position {} outside vocabulary of {}",
                                             targets[r], r, vocab));
        }
        const double* row = in.data() + r * vocab;
        const double peak = *std::max_element(row, row + vocab);
        double z = 0.0;
        for (std::size_t c = 0; c < vocab; ++c) {
            probs[r * vocab + c] = std::exp(row[c] - peak);
            z += probs[r * vocab + c];
        }
        for (std::size_t c = 0; c < vocab; ++c) {
            probs[r * vocab + c] /= z;
        }
        total += (peak + std::log(z)) - row[static_cast<std::size_t>(targets[r])];
    }
    const double inv_count = 1.0 / static_cast<double>(count);
    auto node = make_node({}, {total * inv_count});
    std::vector<std::int64_t> kept(targets.begin(), targets.end());
    return finish(std::move(node), {&logits},
                  [t, vocab, inv_count, include, kept = std::move(kept), probs = std::move(probs)](Node& self) {
        double* g = grad_of(self.parents[0]);
        if (!g) {
            return;
        }
        const double upstream = self.grad[0] * inv_count;
        for (std::size_t r = 0; r < t; ++r) {
            if (!include[r]) {
                continue;
            }
            for (std::size_t c = 0; c < vocab; ++c) {
                g[r * vocab + c] += upstream * probs[r * vocab + c];
            }
            g[r * vocab + static_cast<std::size_t>(kept[r])] -= upstream;
        }
    });
}

}  // namespace reportgen
