#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "gridloc/errors.hpp"

namespace gridloc::numkit {

/// Dense n-dimensional array, row-major, channels-first for images (N,C,H,W).
/// Scalar type is a template parameter: float is the training default,
/// double is used for gradient checks.
template <typename S>
struct TensorT {
    std::vector<std::int64_t> shape;
    std::vector<S> data;

    TensorT() = default;
    TensorT(std::vector<std::int64_t> shape_, std::vector<S> data_)
        : shape(std::move(shape_)), data(std::move(data_)) {
        if (numel_of(shape) != static_cast<std::int64_t>(data.size())) {
            throw ValidationError("tensor: data size " + std::to_string(data.size()) +
                                  " does not match shape product " + std::to_string(numel_of(shape)));
        }
    }

    static std::int64_t numel_of(const std::vector<std::int64_t>& shape) {
        std::int64_t n = 1;
        for (std::int64_t e : shape) {
            if (e < 0) throw ValidationError("tensor: negative extent");
            n *= e;
        }
        return n;
    }

    static TensorT zeros(std::vector<std::int64_t> shape) {
        std::vector<S> d(static_cast<std::size_t>(numel_of(shape)), S(0));
        return TensorT(std::move(shape), std::move(d));
    }

    static TensorT full(std::vector<std::int64_t> shape, S v) {
        std::vector<S> d(static_cast<std::size_t>(numel_of(shape)), v);
        return TensorT(std::move(shape), std::move(d));
    }

    static TensorT scalar(S v) { return TensorT({1}, {v}); }

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }

    std::int64_t dim(int i) const {
        if (i < 0 || i >= rank()) throw ValidationError("tensor: dim index out of range");
        return shape[static_cast<std::size_t>(i)];
    }

    S& operator[](std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
    const S& operator[](std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }

    // Multi-index accessor, row-major. Slow; meant for tests and setup code.
    S& at(std::initializer_list<std::int64_t> idx) {
        return data[static_cast<std::size_t>(offset_of(idx))];
    }
    const S& at(std::initializer_list<std::int64_t> idx) const {
        return data[static_cast<std::size_t>(offset_of(idx))];
    }

    bool all_finite() const {
        for (S v : data) {
            if (!std::isfinite(static_cast<double>(v))) return false;
        }
        return true;
    }

    bool same_shape(const TensorT& o) const { return shape == o.shape; }

    template <typename T2>
    TensorT<T2> cast() const {
        std::vector<T2> d(data.size());
        for (std::size_t i = 0; i < data.size(); ++i) d[i] = static_cast<T2>(data[i]);
        return TensorT<T2>(shape, std::move(d));
    }

    std::string shape_str() const {
        std::string s = "[";
        for (std::size_t i = 0; i < shape.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape[i]);
        }
        return s + "]";
    }

private:
    std::int64_t offset_of(std::initializer_list<std::int64_t> idx) const {
        if (static_cast<int>(idx.size()) != rank()) {
            throw ValidationError("tensor: index rank mismatch");
        }
        std::int64_t off = 0;
        int d = 0;
        for (std::int64_t i : idx) {
            if (i < 0 || i >= shape[static_cast<std::size_t>(d)]) {
                throw ValidationError("tensor: index out of range in dim " + std::to_string(d));
            }
            off = off * shape[static_cast<std::size_t>(d)] + i;
            ++d;
        }
        return off;
    }
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

} // namespace gridloc::numkit
