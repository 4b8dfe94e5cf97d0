#pragma once

#include <algorithm>
#include <cstdint>
#include <deque>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "gridloc/errors.hpp"
#include "gridloc/numkit/tensor.hpp"

namespace gridloc::numkit {

// A named trainable tensor with a persistent gradient buffer. The gradient
// starts empty ("missing") and is allocated on first accumulation or by
// zero_grad(); the optimizer treats an empty grad as an error.
template <typename S>
struct ParamT {
    std::string name;
    TensorT<S> value;
    TensorT<S> grad;

    ParamT() = default;
    ParamT(std::string n, TensorT<S> v) : name(std::move(n)), value(std::move(v)) {}

    bool has_grad() const { return grad.numel() != 0; }

    void zero_grad() { grad = TensorT<S>::zeros(value.shape); }
};

// Reverse-mode tape. Nodes are appended during the forward pass; backward()
// seeds d(loss)/d(loss) = 1 and replays the recorded closures newest-first.
// Closures receive the tape plus their own node id, read grad(self), and push
// contributions into their inputs via accum_grad(). Nodes whose gradient was
// never touched are skipped, so disconnected subgraphs cost nothing.
template <typename S>
class TapeT {
public:
    using Id = std::int64_t;
    using BackwardFn = std::function<void(TapeT<S>&, Id)>;

    Id append(TensorT<S> value, BackwardFn backward, std::string op) {
        if (!value.all_finite())
            throw NumericError("non-finite value produced by op '" + op + "'");
        nodes_.push_back(Node{std::move(value), TensorT<S>(), std::move(backward), nullptr,
                              std::move(op)});
        return static_cast<Id>(nodes_.size()) - 1;
    }

    Id leaf(TensorT<S> value, std::string op = "leaf") {
        return append(std::move(value), nullptr, std::move(op));
    }

    // Copies the parameter's current value in; on backward the node's gradient
    // flows out into p.grad so the optimizer can consume it after the sweep.
    Id param(ParamT<S>& p) {
        ParamT<S>* pp = &p;
        Id id = append(TensorT<S>(p.value),
                       [pp](TapeT<S>& t, Id self) {
                           const TensorT<S>& g = t.grad(self);
                           if (!pp->has_grad()) pp->zero_grad();
                           for (std::int64_t i = 0; i < g.numel(); ++i) pp->grad[i] += g[i];
                       },
                       "param:" + p.name);
        nodes_[static_cast<std::size_t>(id)].param = pp;
        return id;
    }

    // References stay valid across later appends (deque storage).
    const TensorT<S>& value(Id id) const { return nodes_[check(id)].value; }

    TensorT<S>& grad(Id id) {
        Node& n = nodes_[check(id)];
        if (n.grad.numel() == 0) n.grad = TensorT<S>::zeros(n.value.shape);
        return n.grad;
    }

    bool grad_touched(Id id) const { return nodes_[check(id)].grad.numel() != 0; }

    void accum_grad(Id id, const TensorT<S>& g) {
        TensorT<S>& dst = grad(id);
        if (!dst.same_shape(g))
            throw ValidationError("gradient shape " + g.shape_str() + " does not match value " +
                                  dst.shape_str());
        for (std::int64_t i = 0; i < g.numel(); ++i) dst[i] += g[i];
    }

    void backward(Id loss) {
        const std::size_t li = check(loss);
        if (nodes_[li].value.numel() != 1)
            throw ValidationError("backward target must be a scalar, got shape " +
                                  nodes_[li].value.shape_str());
        grad(loss)[0] = S(1);
        for (std::int64_t i = static_cast<std::int64_t>(li); i >= 0; --i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (n.grad.numel() == 0 || !n.backward) continue;
            if (!n.grad.all_finite())
                throw NumericError("non-finite gradient at op '" + n.op + "'");
            n.backward(*this, static_cast<Id>(i));
        }
    }

    std::size_t size() const { return nodes_.size(); }

    void clear() { nodes_.clear(); }

    const std::string& op_name(Id id) const { return nodes_[check(id)].op; }

private:
    struct Node {
        TensorT<S> value;
        TensorT<S> grad;  // empty until touched
        BackwardFn backward;
        ParamT<S>* param;
        std::string op;
    };

    std::size_t check(Id id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size())
            throw ValidationError("tape id " + std::to_string(id) + " out of range");
        return static_cast<std::size_t>(id);
    }

    std::deque<Node> nodes_;
};

using Param = ParamT<float>;
using Param64 = ParamT<double>;
using Tape = TapeT<float>;
using Tape64 = TapeT<double>;

} // namespace gridloc::numkit
