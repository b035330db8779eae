#pragma once

// Dense row-major tensor substrate and the numeric primitives the rest of
// the segmentation head is written in. Everything is templated on the
// scalar type: float is the working precision, double is used by the
// gradient-check suites. All functions here are pure; tensors are treated
// as immutable values once filled.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "gfseg/errors.hpp"

namespace gfseg {

using Index = Eigen::Index;

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using MatrixMap = Eigen::Map<MatrixX<Scalar>>;
template <typename Scalar>
using ConstMatrixMap = Eigen::Map<const MatrixX<Scalar>>;
template <typename Scalar>
using VectorMap = Eigen::Map<VectorX<Scalar>>;
template <typename Scalar>
using ConstVectorMap = Eigen::Map<const VectorX<Scalar>>;

namespace detail {

inline std::string dims_to_string(const std::vector<Index>& dims) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < dims.size(); ++i) {
        if (i) os << 'x';
        os << dims[i];
    }
    os << ']';
    return os.str();
}

inline Index checked_extent_product(const std::vector<Index>& dims) {
    Index n = 1;
    for (Index d : dims) {
        if (d < 0) throw ShapeError("negative tensor extent in " + dims_to_string(dims));
        n *= d;
    }
    return n;
}

} // namespace detail

template <typename Scalar>
class Tensor {
    static_assert(std::is_floating_point_v<Scalar>, "Tensor holds real scalars");

public:
    Tensor() = default;

    // Zero-filled tensor of the given shape.
    explicit Tensor(std::vector<Index> dims)
        : dims_(std::move(dims)), data_(static_cast<std::size_t>(detail::checked_extent_product(dims_)), Scalar(0)) {}

    // Takes ownership of the payload; rejects shape/payload mismatch and
    // non-finite scalars.
    Tensor(std::vector<Index> dims, std::vector<Scalar> data) : dims_(std::move(dims)), data_(std::move(data)) {
        const Index n = detail::checked_extent_product(dims_);
        if (n != static_cast<Index>(data_.size()))
            throw ShapeError("payload of " + std::to_string(data_.size()) + " scalars does not fill " +
                             detail::dims_to_string(dims_));
        for (const Scalar v : data_)
            if (!std::isfinite(v)) throw DataError("non-finite scalar in tensor " + detail::dims_to_string(dims_));
    }

    static Tensor full(std::vector<Index> dims, Scalar value) {
        Tensor t(std::move(dims));
        std::fill(t.data_.begin(), t.data_.end(), value);
        return t;
    }

    Index rank() const noexcept { return static_cast<Index>(dims_.size()); }
    const std::vector<Index>& dims() const noexcept { return dims_; }
    Index dim(Index axis) const {
        if (axis < 0 || axis >= rank()) throw ShapeError("axis " + std::to_string(axis) + " out of rank " + std::to_string(rank()));
        return dims_[static_cast<std::size_t>(axis)];
    }
    Index size() const noexcept { return static_cast<Index>(data_.size()); }
    bool empty() const noexcept { return data_.empty(); }

    Scalar* data() noexcept { return data_.data(); }
    const Scalar* data() const noexcept { return data_.data(); }
    std::span<Scalar> values() noexcept { return {data_.data(), data_.size()}; }
    std::span<const Scalar> values() const noexcept { return {data_.data(), data_.size()}; }

    Scalar& operator[](Index flat) { return data_[static_cast<std::size_t>(flat)]; }
    Scalar operator[](Index flat) const { return data_[static_cast<std::size_t>(flat)]; }

    template <typename... Ix>
    Scalar& at(Ix... ix) {
        return data_[static_cast<std::size_t>(offset({static_cast<Index>(ix)...}))];
    }
    template <typename... Ix>
    Scalar at(Ix... ix) const {
        return data_[static_cast<std::size_t>(offset({static_cast<Index>(ix)...}))];
    }

    bool same_dims(const Tensor& other) const noexcept { return dims_ == other.dims_; }

    // Row-major matrix view over the flat payload; rows*cols must cover it.
    MatrixMap<Scalar> matrix(Index rows, Index cols) {
        require_view(rows * cols);
        return MatrixMap<Scalar>(data_.data(), rows, cols);
    }
    ConstMatrixMap<Scalar> matrix(Index rows, Index cols) const {
        require_view(rows * cols);
        return ConstMatrixMap<Scalar>(data_.data(), rows, cols);
    }
    VectorMap<Scalar> vector() { return VectorMap<Scalar>(data_.data(), size()); }
    ConstVectorMap<Scalar> vector() const { return ConstVectorMap<Scalar>(data_.data(), size()); }

private:
    Index offset(std::initializer_list<Index> ix) const {
        if (static_cast<Index>(ix.size()) != rank())
            throw ShapeError("indexing rank-" + std::to_string(rank()) + " tensor with " + std::to_string(ix.size()) + " indices");
        Index flat = 0;
        auto it = ix.begin();
        for (std::size_t a = 0; a < dims_.size(); ++a, ++it) {
            flat = flat * dims_[a] + *it;
        }
        return flat;
    }

    void require_view(Index n) const {
        if (n != size()) throw ShapeError("matrix view of " + std::to_string(n) + " entries over " + detail::dims_to_string(dims_));
    }

    std::vector<Index> dims_;
    std::vector<Scalar> data_;
};

// ---------------------------------------------------------------------------
// checks

template <typename Scalar>
void ensure_finite(const Tensor<Scalar>& t, const char* where) {
    for (const Scalar v : t.values())
        if (!std::isfinite(v)) throw DataError(std::string("non-finite value produced by ") + where);
}

// Post-op finiteness audit, active in debug builds only.
template <typename Scalar>
inline void debug_ensure_finite([[maybe_unused]] const Tensor<Scalar>& t, [[maybe_unused]] const char* where) {
#ifndef NDEBUG
    ensure_finite(t, where);
#endif
}

namespace detail {

// View of a tensor as outer x extent x inner around one axis.
struct AxisView {
    Index outer = 1;
    Index extent = 0;
    Index inner = 1;
};

template <typename Scalar>
AxisView axis_view(const Tensor<Scalar>& t, Index axis) {
    if (axis < 0 || axis >= t.rank())
        throw ShapeError("axis " + std::to_string(axis) + " out of rank " + std::to_string(t.rank()));
    AxisView v;
    const auto& d = t.dims();
    for (Index a = 0; a < axis; ++a) v.outer *= d[static_cast<std::size_t>(a)];
    v.extent = d[static_cast<std::size_t>(axis)];
    for (Index a = axis + 1; a < t.rank(); ++a) v.inner *= d[static_cast<std::size_t>(a)];
    return v;
}

template <typename Scalar>
std::vector<Index> drop_axis(const Tensor<Scalar>& t, Index axis) {
    std::vector<Index> out;
    out.reserve(static_cast<std::size_t>(t.rank() - 1));
    for (Index a = 0; a < t.rank(); ++a)
        if (a != axis) out.push_back(t.dims()[static_cast<std::size_t>(a)]);
    return out;
}

} // namespace detail

// ---------------------------------------------------------------------------
// primitives

// Plain matrix product, rank-2 only. Backed by Eigen's GEMM: the accumulation
// order is fixed per build, so repeated calls are bit-identical.
template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul expects rank-2 operands, got " + detail::dims_to_string(a.dims()) + " and " +
                         detail::dims_to_string(b.dims()));
    if (a.dim(1) != b.dim(0))
        throw ShapeError("matmul inner extents differ: " + detail::dims_to_string(a.dims()) + " vs " +
                         detail::dims_to_string(b.dims()));
    Tensor<Scalar> out({a.dim(0), b.dim(1)});
    out.matrix(a.dim(0), b.dim(1)).noalias() = a.matrix(a.dim(0), a.dim(1)) * b.matrix(b.dim(0), b.dim(1));
    debug_ensure_finite(out, "matmul");
    return out;
}

// Softmax along one axis with max subtraction. Values land in (0,1) and sum
// to 1 along the axis.
template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& t, Index axis) {
    const auto v = detail::axis_view(t, axis);
    if (v.extent < 1) throw ShapeError("softmax over empty axis " + std::to_string(axis));
    Tensor<Scalar> out(t.dims());
    const Scalar* src = t.data();
    Scalar* dst = out.data();
    for (Index o = 0; o < v.outer; ++o) {
        const Index base = o * v.extent * v.inner;
        for (Index i = 0; i < v.inner; ++i) {
            Scalar hi = src[base + i];
            for (Index e = 1; e < v.extent; ++e) hi = std::max(hi, src[base + e * v.inner + i]);
            Scalar sum = Scalar(0);
            for (Index e = 0; e < v.extent; ++e) {
                const Scalar x = std::exp(src[base + e * v.inner + i] - hi);
                dst[base + e * v.inner + i] = x;
                sum += x;
            }
            for (Index e = 0; e < v.extent; ++e) dst[base + e * v.inner + i] /= sum;
        }
    }
    debug_ensure_finite(out, "softmax");
    return out;
}

// Norms below this are treated as zero by cosine and l2_normalize, so an
// all-zero prototype can never win a similarity comparison.
inline constexpr double kNormFloor = 1e-12;

template <typename Scalar>
Scalar cosine(std::span<const Scalar> a, std::span<const Scalar> b) {
    if (a.size() != b.size())
        throw ShapeError("cosine of vectors with lengths " + std::to_string(a.size()) + " and " + std::to_string(b.size()));
    ConstVectorMap<Scalar> va(a.data(), static_cast<Index>(a.size()));
    ConstVectorMap<Scalar> vb(b.data(), static_cast<Index>(b.size()));
    const Scalar na = va.norm();
    const Scalar nb = vb.norm();
    if (na < Scalar(kNormFloor) || nb < Scalar(kNormFloor)) return Scalar(0);
    return va.dot(vb) / (na * nb);
}

template <typename Scalar>
Scalar cosine(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
    if (a.rank() != 1 || b.rank() != 1) throw ShapeError("cosine expects rank-1 tensors");
    return cosine<Scalar>(a.values(), b.values());
}

template <typename Scalar>
Tensor<Scalar> l2_normalize(const Tensor<Scalar>& v) {
    if (v.rank() != 1) throw ShapeError("l2_normalize expects a rank-1 tensor");
    Tensor<Scalar> out(v.dims());
    const Scalar n = v.vector().norm();
    if (n >= Scalar(kNormFloor)) out.vector() = v.vector() / n;
    return out;
}

enum class Reduce { Max, Mean };

// Removes the axis, taking max or mean along it.
template <typename Scalar>
Tensor<Scalar> reduce(const Tensor<Scalar>& t, Index axis, Reduce mode) {
    const auto v = detail::axis_view(t, axis);
    if (v.extent < 1) throw ShapeError("reduce over empty axis " + std::to_string(axis));
    Tensor<Scalar> out(detail::drop_axis(t, axis));
    const Scalar* src = t.data();
    Scalar* dst = out.data();
    for (Index o = 0; o < v.outer; ++o) {
        const Index sbase = o * v.extent * v.inner;
        const Index dbase = o * v.inner;
        for (Index i = 0; i < v.inner; ++i) {
            Scalar acc = src[sbase + i];
            for (Index e = 1; e < v.extent; ++e) {
                const Scalar x = src[sbase + e * v.inner + i];
                acc = mode == Reduce::Max ? std::max(acc, x) : acc + x;
            }
            dst[dbase + i] = mode == Reduce::Mean ? acc / Scalar(v.extent) : acc;
        }
    }
    debug_ensure_finite(out, "reduce");
    return out;
}

// 3x3 convolution, stride 1, zero padding 1: spatial size is preserved.
// x: B x Cin x H x W, w: Cout x Cin x 3 x 3, bias: Cout.
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const Tensor<Scalar>& bias) {
    if (x.rank() != 4 || w.rank() != 4 || bias.rank() != 1)
        throw ShapeError("conv2d expects x rank-4, w rank-4, bias rank-1");
    if (w.dim(2) != 3 || w.dim(3) != 3) throw ShapeError("conv2d kernels are fixed to 3x3");
    if (w.dim(1) != x.dim(1))
        throw ShapeError("conv2d channel mismatch: input " + std::to_string(x.dim(1)) + ", kernel " + std::to_string(w.dim(1)));
    if (bias.dim(0) != w.dim(0)) throw ShapeError("conv2d bias length != output channels");

    const Index B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3), Cout = w.dim(0);
    Tensor<Scalar> out({B, Cout, H, W});
    const Scalar* xp = x.data();
    const Scalar* wp = w.data();
    Scalar* op = out.data();
    for (Index b = 0; b < B; ++b) {
        for (Index o = 0; o < Cout; ++o) {
            const Scalar bo = bias[o];
            for (Index y = 0; y < H; ++y) {
                for (Index xx = 0; xx < W; ++xx) {
                    Scalar acc = bo;
                    for (Index i = 0; i < Cin; ++i) {
                        const Scalar* xplane = xp + ((b * Cin + i) * H) * W;
                        const Scalar* wk = wp + ((o * Cin + i) * 3) * 3;
                        for (Index ky = 0; ky < 3; ++ky) {
                            const Index sy = y + ky - 1;
                            if (sy < 0 || sy >= H) continue;
                            for (Index kx = 0; kx < 3; ++kx) {
                                const Index sx = xx + kx - 1;
                                if (sx < 0 || sx >= W) continue;
                                acc += wk[ky * 3 + kx] * xplane[sy * W + sx];
                            }
                        }
                    }
                    op[((b * Cout + o) * H + y) * W + xx] = acc;
                }
            }
        }
    }
    debug_ensure_finite(out, "conv2d");
    return out;
}

} // namespace gfseg
