#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "caplab/tensor.hpp"

namespace caplab::ad {

class Tape;

// Handle to a node on a tape. Cheap to copy; invalid after Tape::reset().
class Var {
public:
    Var() = default;
    const Tensor& value() const;
    bool requires_grad() const;
    std::size_t size() const { return value().size(); }
    bool valid() const { return tape_ != nullptr; }

private:
    friend class Tape;
    Var(Tape* t, std::uint32_t i) : tape_(t), idx_(i) {}
    Tape* tape_ = nullptr;
    std::uint32_t idx_ = 0;
};

// Reverse-mode tape. Built fresh for every forward pass; append-only, so
// reverse creation order is a valid topological order for the sweep.
// Nodes whose output does not require gradient store no backward closure,
// which makes pure-inference passes cost little more than plain evaluation.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // trainable input; value is copied onto the tape
    Var leaf(Tensor value, bool requires_grad = true);
    // owned constant
    Var constant(Tensor value);
    // non-owned constant; *value must outlive the tape
    Var external(const Tensor* value);
    // stop-gradient: same value, no gradient flow
    Var detach(Var x);

    // ---- elementwise (strict same-shape, no broadcasting) ----
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var divide(Var a, Var b);
    Var scale(Var a, double c);
    Var sqrt(Var a);
    Var relu(Var a);
    Var gelu(Var a);

    // out = sum_i coeffs[i] * xs[i]; all same shape
    Var weighted_sum(std::span<const Var> xs, std::span<const double> coeffs);
    // scalar Var times tensor Var
    Var scale_by(Var scalar, Var x);

    // ---- linear algebra ----
    Var matmul(Var a, Var b);                  // [m x k] * [k x n]
    Var matvec(Var m, Var v);                  // [r x c] * [c]
    Var linear(Var x, Var w, Var b);           // x [n x k] * w [k x o] + row-broadcast b [o]
    Var dot(Var a, Var b);                     // scalar
    Var sum(Var a);                            // scalar
    Var mean(Var a);                           // scalar

    // ---- reductions / structure ----
    Var concat_rows(Var a, Var b);             // [ma x d] + [mb x d]
    Var take_row(Var x, std::size_t row);      // [n x d] -> [d]
    Var pick(Var v, std::size_t index);        // [n] -> scalar

    // ---- model primitives ----
    // stabilized softmax along `axis`; rank 1 (axis 0) or rank 2 (axis 0/1)
    Var softmax(Var logits, std::size_t axis);
    // -log softmax(logits)[label]
    Var cross_entropy(Var logits, std::size_t label);
    // softmax(logits)[label] as a differentiable scalar
    Var softmax_pick(Var logits, std::size_t label);
    // per-row layer norm with gain/bias, x [n x d]
    Var layer_norm(Var x, Var gain, Var bias, double eps);
    // multi-head scaled dot-product attention with key/value prefix rows
    // q,k,v [n x d]; pk,pv [m x d] (m >= 0); returns [n x d]
    Var attention_prefix(Var q, Var k, Var v, Var pk, Var pv, std::size_t heads);

    // reverse sweep from a scalar root
    void backward(Var root);
    // accumulated gradient; zeros of the value shape if none ever arrived
    Tensor grad(Var v) const;

    std::size_t node_count() const { return nodes_.size(); }
    void reset();

private:
    struct Node {
        Tensor own;
        const Tensor* ext = nullptr;
        Tensor grad; // lazily sized
        bool requires_grad = false;
        std::function<void(Tape&)> back;
    };

    friend class Var;
    // deque: stable element addresses while appending
    std::deque<Node> nodes_;

    const Tensor& val(std::uint32_t i) const { return nodes_[i].ext ? *nodes_[i].ext : nodes_[i].own; }
    bool rg(std::uint32_t i) const { return nodes_[i].requires_grad; }
    // accumulate src (same length as node value) into node's grad buffer;
    // silently ignored for nodes that do not require gradient
    void accumulate(std::uint32_t i, const double* src, std::size_t n);
    double* grad_buf(std::uint32_t i); // allocate-on-demand; nullptr if !rg
    Var push(Tensor value, bool requires_grad, std::function<void(Tape&)> back);
    void check_same_shape(Var a, Var b, const char* op) const;
};

} // namespace caplab::ad
