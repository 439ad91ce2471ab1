#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "sandwich/core/errors.hpp"

namespace sandwich {

inline std::string shape_str(const std::vector<int>& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

// Dense row-major tensor of rank <= 4. Value semantics; all layers and ops
// below work on this single type.
template <typename S>
struct Tensor {
    std::vector<int> shape;
    std::vector<S> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> sh, S fill = S(0)) : shape(std::move(sh)) {
        data.assign(static_cast<std::size_t>(numel(shape)), fill);
    }
    Tensor(std::vector<int> sh, std::vector<S> d) : shape(std::move(sh)), data(std::move(d)) {
        if (static_cast<std::int64_t>(data.size()) != numel(shape))
            throw ShapeError("tensor data size does not match shape " + shape_str(shape));
    }

    static std::int64_t numel(const std::vector<int>& sh) {
        std::int64_t n = 1;
        for (int d : sh) {
            if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(sh));
            n *= d;
        }
        return n;
    }

    std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
    int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
    int rank() const { return static_cast<int>(shape.size()); }

    S& operator[](std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
    const S& operator[](std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }

    // 4-D accessor for (b, c, h, w) layouts.
    S& at4(int b, int c, int h, int w) {
        return data[static_cast<std::size_t>(((static_cast<std::int64_t>(b) * shape[1] + c) * shape[2] + h) * shape[3] + w)];
    }
    const S& at4(int b, int c, int h, int w) const {
        return data[static_cast<std::size_t>(((static_cast<std::int64_t>(b) * shape[1] + c) * shape[2] + h) * shape[3] + w)];
    }

    S& at3(int a, int b, int c) {
        return data[static_cast<std::size_t>((static_cast<std::int64_t>(a) * shape[1] + b) * shape[2] + c)];
    }
    const S& at3(int a, int b, int c) const {
        return data[static_cast<std::size_t>((static_cast<std::int64_t>(a) * shape[1] + b) * shape[2] + c)];
    }

    S& at2(int a, int b) { return data[static_cast<std::size_t>(static_cast<std::int64_t>(a) * shape[1] + b)]; }
    const S& at2(int a, int b) const { return data[static_cast<std::size_t>(static_cast<std::int64_t>(a) * shape[1] + b)]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    void fill(S v) { std::fill(data.begin(), data.end(), v); }

    bool all_finite() const {
        for (const S& v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    template <typename T>
    Tensor<T> cast() const {
        Tensor<T> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<T>(data[i]);
        return out;
    }
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

template <typename S>
inline void check_shape(const Tensor<S>& t, const std::vector<int>& expect, const std::string& what) {
    if (t.shape != expect)
        throw ShapeError(what + ": expected shape " + shape_str(expect) + ", got " + shape_str(t.shape));
}

}  // namespace sandwich
