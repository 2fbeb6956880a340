#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "pfr/common.hpp"
#include "pfr/rng.hpp"

namespace pfr {

// Dense row-major tensor of rank <= 4. Feature maps are [C,H,W], matrices
// [rows,cols], vectors [n]. Kept deliberately dumb: the math lives in the
// autodiff ops.
template <typename S>
class TensorT {
public:
    TensorT() = default;

    explicit TensorT(std::vector<int> shape) : shape_(std::move(shape)) {
        data_.assign(count(shape_), S(0));
    }

    TensorT(std::initializer_list<int> shape) : TensorT(std::vector<int>(shape)) {}

    static TensorT zeros(std::vector<int> shape) { return TensorT(std::move(shape)); }

    static TensorT full(std::vector<int> shape, S v) {
        TensorT t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }

    static TensorT randn(std::vector<int> shape, RandomStream& rng, double stddev = 1.0) {
        TensorT t(std::move(shape));
        for (auto& v : t.data_) {
            v = static_cast<S>(rng.normal() * stddev);
        }
        return t;
    }

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    S* data() { return data_.data(); }
    const S* data() const { return data_.data(); }

    S& operator[](size_t i) { return data_[i]; }
    const S& operator[](size_t i) const { return data_[i]; }

    // [C,H,W] accessor.
    S& at(int c, int y, int x) {
        return data_[(static_cast<size_t>(c) * shape_[1] + y) * shape_[2] + x];
    }
    const S& at(int c, int y, int x) const {
        return data_[(static_cast<size_t>(c) * shape_[1] + y) * shape_[2] + x];
    }

    // [rows,cols] accessor.
    S& at(int r, int c) { return data_[static_cast<size_t>(r) * shape_[1] + c]; }
    const S& at(int r, int c) const { return data_[static_cast<size_t>(r) * shape_[1] + c]; }

    bool same_shape(const TensorT& o) const { return shape_ == o.shape_; }

    void fill(S v) { std::fill(data_.begin(), data_.end(), v); }

    void add_scaled(const TensorT& o, S a) {
        for (size_t i = 0; i < data_.size(); ++i) {
            data_[i] += a * o.data_[i];
        }
    }

    template <typename T>
    TensorT<T> cast() const {
        TensorT<T> out(shape_);
        for (size_t i = 0; i < data_.size(); ++i) {
            out[i] = static_cast<T>(data_[i]);
        }
        return out;
    }

    static size_t count(const std::vector<int>& shape) {
        size_t n = 1;
        for (int d : shape) {
            check(d >= 0, "tensor dims must be non-negative");
            n *= static_cast<size_t>(d);
        }
        return shape.empty() ? 0 : n;
    }

private:
    std::vector<int> shape_;
    std::vector<S> data_;
};

using Tensor = TensorT<float>;

inline std::string shape_str(const std::vector<int>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        out += std::to_string(s[i]);
        if (i + 1 < s.size()) out += ",";
    }
    return out + "]";
}

}  // namespace pfr
