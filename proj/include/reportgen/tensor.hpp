// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors with reverse-mode automatic differentiation.
//
// A Tensor is a cheap handle onto a shared node (like a torch tensor): copies
// alias the same storage, clone() makes an independent leaf. Every op run while
// gradient recording is enabled and at least one input requires a gradient
// records its inputs and a backward closure on the output node. Nodes carry a
// monotonically increasing sequence number, so the set of nodes reachable from
// a loss, sorted by descending sequence number, is the reverse of the order in
// which the tape was recorded. backward() replays exactly that order.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace reportgen {

using Shape = std::vector<std::size_t>;

// Storage is 64-byte aligned so vectorised kernels see the same alignment for
// a given shape on every run; their summation order (and hence every bit of
// the result) must not depend on where the heap placed a buffer.
template <class T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlign{64};

    AlignedAllocator() = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

    template <class U>
    bool operator==(const AlignedAllocator<U>&) const noexcept {
        return true;
    }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Raised on any shape or rank contract violation.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

namespace detail {

struct Node {
    Shape shape;
    Buffer data;
    Buffer grad;  // empty until a gradient arrives
    bool requires_grad = false;
    std::uint64_t seq = 0;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    bool is_leaf() const { return !backward_fn; }
    Buffer& grad_buffer();
};

}  // namespace detail

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const;

    std::span<const double> data() const;
    std::span<double> mutable_data();
    double item() const;
    double at(std::size_t row, std::size_t col) const;

    bool requires_grad() const;
    void set_requires_grad(bool flag);
    bool has_grad() const;
    std::span<const double> grad() const;
    void zero_grad();

    /// Reverse sweep from a scalar loss. Non-leaf gradients and the recorded
    /// closures are released afterwards.
    void backward() const;

    /// Independent leaf with copied data and no gradient history.
    Tensor clone() const;
    /// Leaf sharing nothing with the graph; same values.
    Tensor detach() const { return clone(); }

    const void* id() const { return node_.get(); }
    std::shared_ptr<detail::Node> node() const { return node_; }
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<detail::Node> node_;
};

/// Disables gradient recording on the current thread while alive.
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

// --- linear algebra -------------------------------------------------------

/// a[m x k] * b[k x n].
Tensor matmul(const Tensor& a, const Tensor& b);
/// x[t x in] * w[out x in]^T (+ bias[out]). bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = {});
/// 2-D transpose.
Tensor transpose(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);

// --- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
/// Exact (erf) GELU.
Tensor gelu(const Tensor& x);

// --- reductions and normalisation -----------------------------------------

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Softmax along `axis`, max-subtracted.
Tensor softmax(const Tensor& x, std::size_t axis);
/// Normalises each row of x[t x d] and applies gamma[d], beta[d].
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// --- sequence ops ---------------------------------------------------------

/// table[v x d] gathered at ids -> [ids.size() x d]; backward scatter-adds.
Tensor embedding(const Tensor& table, std::span<const std::int64_t> ids);
/// Concatenates 2-D tensors along axis 0. Widths must agree.
Tensor concat_rows(std::span<const Tensor> parts);
/// Rows [begin, end) of a 2-D tensor.
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);

/// Multi-head scaled dot-product attention over q,k,v [t x d]. Heads split
/// the feature axis into contiguous blocks of d / num_heads.
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            std::size_t num_heads, bool causal);

/// Mean over included positions of -log softmax(logits[t])[targets[t]].
/// Excluded positions contribute nothing to value or gradient.
Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> targets,
                     const std::vector<bool>& include);

}  // namespace reportgen
