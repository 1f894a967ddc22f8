#pragma once

// Dense NCHW tensors with reverse-mode automatic differentiation.
//
// The graph is built define-by-run: every op returns a new tensor that keeps
// shared_ptr links to its inputs plus a closure that pushes gradients to them.
// Calling backward() on a scalar runs the closures in reverse topological
// order. Ops are templated on the scalar type so that the same computation
// can be rebuilt in double precision for finite-difference checking while the
// production path stays 32-bit.

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "draco/error.hpp"

namespace draco {

struct Shape {
    std::int64_t n = 0;
    std::int64_t c = 0;
    std::int64_t h = 0;
    std::int64_t w = 0;

    std::int64_t numel() const { return n * c * h * w; }
    bool operator==(const Shape& o) const = default;

    std::string str() const {
        std::ostringstream os;
        os << "(" << n << "," << c << "," << h << "," << w << ")";
        return os.str();
    }
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw DimensionError(msg);
}

// Thread-local switch that disables graph recording (inference, constant
// branches of a loss). Mirrors the usual no-grad guard idiom.
inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool saved;
    NoGradGuard() : saved(grad_mode_flag()) { grad_mode_flag() = false; }
    ~NoGradGuard() { grad_mode_flag() = saved; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return grad_mode_flag(); }

template <class T>
struct TensorT;

template <class T>
using TensorPtrT = std::shared_ptr<TensorT<T>>;

template <class T>
struct TensorT : std::enable_shared_from_this<TensorT<T>> {
    Shape shape;
    std::vector<T> data;
    bool requires_grad = false;
    std::vector<T> grad;  // allocated lazily by the backward pass

    // Graph links; empty for leaves and for tensors built under NoGradGuard.
    std::vector<TensorPtrT<T>> parents;
    std::function<void()> backward_fn;

    TensorT(Shape s, std::vector<T> d, bool rg)
        : shape(s), data(std::move(d)), requires_grad(rg) {
        if (static_cast<std::int64_t>(data.size()) != shape.numel())
            throw DimensionError("tensor data length " + std::to_string(data.size()) +
                                 " does not match shape " + shape.str());
    }

    static TensorPtrT<T> create(Shape s, T fill = T(0), bool rg = false) {
        return std::make_shared<TensorT<T>>(s, std::vector<T>(static_cast<std::size_t>(s.numel()), fill), rg);
    }

    static TensorPtrT<T> from_data(Shape s, std::vector<T> d, bool rg = false) {
        return std::make_shared<TensorT<T>>(s, std::move(d), rg);
    }

    std::int64_t numel() const { return shape.numel(); }

    T scalar() const {
        if (numel() != 1) throw ContractError("scalar() on tensor of shape " + shape.str());
        return data[0];
    }

    T* grad_data() {
        if (grad.empty()) grad.assign(data.size(), T(0));
        return grad.data();
    }

    void zero_grad() { grad.assign(data.size(), T(0)); }

    void accumulate_grad(const std::vector<T>& g) {
        T* gd = grad_data();
        for (std::size_t i = 0; i < g.size(); ++i) gd[i] += g[i];
    }

    // Reverse-mode pass from a scalar output. Every reachable tensor with
    // requires_grad receives (accumulates) d(self)/d(tensor).
    void backward() {
        if (numel() != 1)
            throw ContractError("backward() requires a scalar output, got shape " + shape.str());
        if (!requires_grad)
            throw ContractError("backward() on a tensor that does not require gradients");

        std::vector<TensorT<T>*> topo;
        std::unordered_set<TensorT<T>*> visited;
        std::vector<std::pair<TensorT<T>*, std::size_t>> stack;
        stack.emplace_back(this, 0);
        visited.insert(this);
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            if (next < node->parents.size()) {
                TensorT<T>* p = node->parents[next++].get();
                if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
            } else {
                topo.push_back(node);
                stack.pop_back();
            }
        }

        grad_data()[0] += T(1);
        for (auto it = topo.begin(); it != topo.end(); ++it) {
            if ((*it)->backward_fn) (*it)->backward_fn();
        }
    }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }
};

using Tensor = TensorT<float>;
using TensorPtr = TensorPtrT<float>;

// Deterministic uniform in [0,1) built from the top 24 bits of a mt19937_64
// draw, so values do not depend on library distribution internals.
inline float canonical_uniform(std::mt19937_64& rng) {
    return static_cast<float>(rng() >> 40) * (1.0f / 16777216.0f);
}

template <class T>
TensorPtrT<T> uniform_tensor(Shape s, std::mt19937_64& rng, T lo, T hi, bool rg = false) {
    auto t = TensorT<T>::create(s, T(0), rg);
    for (auto& v : t->data) v = lo + (hi - lo) * static_cast<T>(canonical_uniform(rng));
    return t;
}

template <class T>
TensorPtrT<T> cast_tensor(const TensorPtrT<T>& x) {
    return x;
}

template <class Dst, class Src>
TensorPtrT<Dst> convert_tensor(const TensorPtrT<Src>& x, bool rg = false) {
    std::vector<Dst> d(x->data.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<Dst>(x->data[i]);
    return TensorT<Dst>::from_data(x->shape, std::move(d), rg);
}

}  // namespace draco
