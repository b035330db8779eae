#pragma once

// Hand-written vector-Jacobian products for the primitives the trainer
// chains together. There is no graph engine: the training step wires these
// up explicitly in reverse order.

#include "gfseg/tensor.hpp"

namespace gfseg {

template <typename Scalar>
struct Conv2dGrads {
    Tensor<Scalar> dx;
    Tensor<Scalar> dw;
    Tensor<Scalar> db;
};

// VJP of conv2d (3x3, stride 1, pad 1) given the upstream gradient on the
// output. Accumulation order is a fixed serial loop.
template <typename Scalar>
Conv2dGrads<Scalar> conv2d_vjp(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const Tensor<Scalar>& gout) {
    const Index B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3), Cout = w.dim(0);
    if (gout.dims() != std::vector<Index>{B, Cout, H, W}) throw ShapeError("conv2d_vjp upstream gradient shape mismatch");
    Conv2dGrads<Scalar> g;
    g.dx = Tensor<Scalar>(x.dims());
    g.dw = Tensor<Scalar>(w.dims());
    g.db = Tensor<Scalar>({Cout});
    const Scalar* xp = x.data();
    const Scalar* wp = w.data();
    const Scalar* gp = gout.data();
    for (Index b = 0; b < B; ++b) {
        for (Index o = 0; o < Cout; ++o) {
            for (Index y = 0; y < H; ++y) {
                for (Index xx = 0; xx < W; ++xx) {
                    const Scalar gv = gp[((b * Cout + o) * H + y) * W + xx];
                    if (gv == Scalar(0)) continue;
                    g.db[o] += gv;
                    for (Index i = 0; i < Cin; ++i) {
                        const Scalar* xplane = xp + (b * Cin + i) * H * W;
                        Scalar* dxplane = g.dx.data() + (b * Cin + i) * H * W;
                        const Scalar* wk = wp + (o * Cin + i) * 9;
                        Scalar* dwk = g.dw.data() + (o * Cin + i) * 9;
                        for (Index ky = 0; ky < 3; ++ky) {
                            const Index sy = y + ky - 1;
                            if (sy < 0 || sy >= H) continue;
                            for (Index kx = 0; kx < 3; ++kx) {
                                const Index sx = xx + kx - 1;
                                if (sx < 0 || sx >= W) continue;
                                dwk[ky * 3 + kx] += gv * xplane[sy * W + sx];
                                dxplane[sy * W + sx] += gv * wk[ky * 3 + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    return g;
}

// In-place ReLU backward: zero the gradient where the forward output was
// clipped. act is the post-activation tensor.
template <typename Scalar>
void relu_vjp_inplace(Tensor<Scalar>& grad, const Tensor<Scalar>& act) {
    if (!grad.same_dims(act)) throw ShapeError("relu_vjp shape mismatch");
    for (Index i = 0; i < grad.size(); ++i)
        if (act[i] <= Scalar(0)) grad[i] = Scalar(0);
}

// Softmax backward along the class axis for one image held as an N x P
// matrix: g_logits = s .* (g_s - colsum(s .* g_s)).
template <typename Scalar>
MatrixX<Scalar> softmax_vjp(const MatrixX<Scalar>& s, const MatrixX<Scalar>& gs) {
    MatrixX<Scalar> prod = s.cwiseProduct(gs);
    const Eigen::Matrix<Scalar, 1, Eigen::Dynamic> colsum = prod.colwise().sum();
    MatrixX<Scalar> out = gs;
    out.rowwise() -= colsum;
    return s.cwiseProduct(out);
}

} // namespace gfseg
