#pragma once

#include <array>
#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "normlab/error.hpp"

namespace normlab {

// Dense tensor extents, rank 1..4. Dimensions are stored left-aligned;
// broadcasting aligns shapes on the trailing axes (numpy rules restricted
// to singleton expansion).
class Shape {
public:
    static constexpr int kMaxRank = 4;

    Shape() = default;

    Shape(std::initializer_list<int> dims) { assign(dims.begin(), static_cast<int>(dims.size())); }

    explicit Shape(const std::vector<int>& dims) { assign(dims.data(), static_cast<int>(dims.size())); }

    int rank() const { return rank_; }

    int operator[](int i) const { return dims_[static_cast<std::size_t>(i)]; }

    // Dimension with the shape right-aligned into kMaxRank slots, missing
    // leading axes read as 1. Used by broadcast kernels.
    int dim4(int i) const {
        int shift = kMaxRank - rank_;
        return i < shift ? 1 : dims_[static_cast<std::size_t>(i - shift)];
    }

    std::int64_t numel() const {
        std::int64_t n = 1;
        for (int i = 0; i < rank_; ++i) n *= dims_[static_cast<std::size_t>(i)];
        return rank_ == 0 ? 0 : n;
    }

    bool operator==(const Shape& o) const {
        if (rank_ != o.rank_) return false;
        for (int i = 0; i < rank_; ++i)
            if (dims_[static_cast<std::size_t>(i)] != o.dims_[static_cast<std::size_t>(i)]) return false;
        return true;
    }
    bool operator!=(const Shape& o) const { return !(*this == o); }

    std::string str() const {
        std::string s;
        for (int i = 0; i < rank_; ++i) {
            if (i) s += "x";
            s += std::to_string(dims_[static_cast<std::size_t>(i)]);
        }
        return s.empty() ? "scalar?" : s;
    }

    // Broadcast result shape, or ShapeError when a non-singleton mismatch exists.
    static Shape broadcast(const Shape& a, const Shape& b) {
        Shape out;
        out.rank_ = a.rank_ > b.rank_ ? a.rank_ : b.rank_;
        for (int i = 0; i < kMaxRank; ++i) {
            int da = a.dim4(i), db = b.dim4(i);
            if (da != db && da != 1 && db != 1)
                throw ShapeError("broadcast mismatch: " + a.str() + " vs " + b.str());
            out.dims_[static_cast<std::size_t>(i)] = da > db ? da : db;
        }
        // keep only the trailing `rank_` dims
        for (int i = 0; i < out.rank_; ++i)
            out.dims_[static_cast<std::size_t>(i)] = out.dims_[static_cast<std::size_t>(i + kMaxRank - out.rank_)];
        for (int i = out.rank_; i < kMaxRank; ++i) out.dims_[static_cast<std::size_t>(i)] = 1;
        return out;
    }

private:
    template <typename It>
    void assign(It first, int n) {
        if (n < 1 || n > kMaxRank) throw ShapeError("rank must be 1..4, got " + std::to_string(n));
        rank_ = n;
        for (int i = 0; i < n; ++i) {
            int d = static_cast<int>(first[i]);
            if (d <= 0) throw ShapeError("non-positive dimension in shape");
            dims_[static_cast<std::size_t>(i)] = d;
        }
        for (int i = n; i < kMaxRank; ++i) dims_[static_cast<std::size_t>(i)] = 1;
    }

    std::array<int, kMaxRank> dims_{1, 1, 1, 1};
    int rank_ = 0;
};

}  // namespace normlab
