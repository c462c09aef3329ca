#pragma once

#include <array>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "agrigen/tensor.hpp"

namespace agrigen {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<Mat>;
using CMatMap = Eigen::Map<const Mat>;

/// Named trainable tensor plus its gradient accumulator.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;
    bool trainable = true;

    Parameter() = default;
    Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {
        grad = Tensor::zeros(value.shape);
    }

    void zero_grad() { grad.fill(0.0); }
};

// ----------------------------------------------------------------------------
// Reverse-mode tape. Each op records a value and a closure that pushes the
// output gradient to its parents. One tape per forward pass; backward() walks
// the nodes in reverse and finally accumulates leaf gradients into their
// bound Parameters.
// ----------------------------------------------------------------------------

using VarId = int;

class Tape {
  public:
    struct Node {
        Tensor value;
        Tensor grad;
        bool needs_grad = false;
        Parameter* param = nullptr;
        std::function<void(Tape&, Node&)> back;
    };

    std::vector<Node> nodes;

    const Tensor& val(VarId id) const { return nodes[static_cast<size_t>(id)].value; }
    Tensor& grad(VarId id) { return nodes[static_cast<size_t>(id)].grad; }
    bool needs_grad(VarId id) const { return nodes[static_cast<size_t>(id)].needs_grad; }

    VarId constant(Tensor v) {
        Node n;
        n.value = std::move(v);
        nodes.push_back(std::move(n));
        return static_cast<VarId>(nodes.size()) - 1;
    }

    VarId leaf(Parameter& p) {
        Node n;
        n.value = p.value;
        n.needs_grad = p.trainable;
        n.param = &p;
        nodes.push_back(std::move(n));
        return static_cast<VarId>(nodes.size()) - 1;
    }

    // ---- elementwise -------------------------------------------------------

    VarId add(VarId a, VarId b) {
        check_same_shape(val(a), val(b), "tape add");
        Tensor out = agrigen::add(val(a), val(b));
        return unary_or_binary(std::move(out), a, b, [a, b](Tape& t, Node& n) {
            t.push_grad(a, n.grad);
            t.push_grad(b, n.grad);
        });
    }

    VarId sub(VarId a, VarId b) {
        check_same_shape(val(a), val(b), "tape sub");
        Tensor out = agrigen::sub(val(a), val(b));
        return unary_or_binary(std::move(out), a, b, [a, b](Tape& t, Node& n) {
            t.push_grad(a, n.grad);
            if (t.needs_grad(b)) {
                Tensor neg = agrigen::scale(n.grad, -1.0);
                t.push_grad(b, neg);
            }
        });
    }

    VarId mul(VarId a, VarId b) {
        check_same_shape(val(a), val(b), "tape mul");
        Tensor out = agrigen::mul(val(a), val(b));
        return unary_or_binary(std::move(out), a, b, [a, b](Tape& t, Node& n) {
            if (t.needs_grad(a)) {
                Tensor ga = agrigen::mul(n.grad, t.val(b));
                t.push_grad(a, ga);
            }
            if (t.needs_grad(b)) {
                Tensor gb = agrigen::mul(n.grad, t.val(a));
                t.push_grad(b, gb);
            }
        });
    }

    VarId scale(VarId a, double c) {
        Tensor out = agrigen::scale(val(a), c);
        return unary_or_binary(std::move(out), a, -1, [a, c](Tape& t, Node& n) {
            if (t.needs_grad(a)) {
                Tensor ga = agrigen::scale(n.grad, c);
                t.push_grad(a, ga);
            }
        });
    }

    VarId relu(VarId a) {
        Tensor out = val(a);
        for (double& v : out.data) v = v > 0.0 ? v : 0.0;
        return unary_or_binary(std::move(out), a, -1, [a](Tape& t, Node& n) {
            if (!t.needs_grad(a)) return;
            Tensor ga = n.grad;
            const Tensor& x = t.val(a);
            for (int64_t i = 0; i < ga.size(); ++i)
                if (x[i] <= 0.0) ga[i] = 0.0;
            t.push_grad(a, ga);
        });
    }

    VarId silu(VarId a) {
        Tensor out = val(a);
        for (double& v : out.data) v = v / (1.0 + std::exp(-v));
        return unary_or_binary(std::move(out), a, -1, [a](Tape& t, Node& n) {
            if (!t.needs_grad(a)) return;
            Tensor ga = n.grad;
            const Tensor& x = t.val(a);
            for (int64_t i = 0; i < ga.size(); ++i) {
                const double s = 1.0 / (1.0 + std::exp(-x[i]));
                ga[i] *= s * (1.0 + x[i] * (1.0 - s));
            }
            t.push_grad(a, ga);
        });
    }

    VarId sigmoid(VarId a) {
        Tensor out = val(a);
        for (double& v : out.data) v = 1.0 / (1.0 + std::exp(-v));
        VarId id = unary_or_binary(std::move(out), a, -1, [a](Tape& t, Node& n) {
            if (!t.needs_grad(a)) return;
            Tensor ga = n.grad;
            const Tensor& y = n.value;
            for (int64_t i = 0; i < ga.size(); ++i) ga[i] *= y[i] * (1.0 - y[i]);
            t.push_grad(a, ga);
        });
        return id;
    }

    VarId exp_op(VarId a) {
        Tensor out = val(a);
        for (double& v : out.data) v = std::exp(v);
        return unary_or_binary(std::move(out), a, -1, [a](Tape& t, Node& n) {
            if (!t.needs_grad(a)) return;
            Tensor ga = n.grad;
            for (int64_t i = 0; i < ga.size(); ++i) ga[i] *= n.value[i];
            t.push_grad(a, ga);
        });
    }

    VarId reshape(VarId a, std::vector<int> shape) {
        Tensor out = val(a).reshaped(std::move(shape));
        return unary_or_binary(std::move(out), a, -1, [a](Tape& t, Node& n) {
            if (!t.needs_grad(a)) return;
            Tensor ga = n.grad.reshaped(t.val(a).shape);
            t.push_grad(a, ga);
        });
    }

    // ---- linear algebra ----------------------------------------------------

    VarId matmul(VarId a, VarId b) {
        const Tensor& A = val(a);
        const Tensor& B = val(b);
        if (A.ndim() != 2 || B.ndim() != 2 || A.dim(1) != B.dim(0))
            throw ShapeError("matmul: incompatible " + A.shape_str() + " * " + B.shape_str());
        Tensor out({A.dim(0), B.dim(1)});
        MatMap(out.data.data(), out.dim(0), out.dim(1)) =
            CMatMap(A.data.data(), A.dim(0), A.dim(1)) * CMatMap(B.data.data(), B.dim(0), B.dim(1));
        return unary_or_binary(std::move(out), a, b, [a, b](Tape& t, Node& n) {
            const Tensor& A = t.val(a);
            const Tensor& B = t.val(b);
            CMatMap G(n.grad.data.data(), n.grad.dim(0), n.grad.dim(1));
            if (t.needs_grad(a)) {
                Tensor ga(A.shape);
                MatMap(ga.data.data(), A.dim(0), A.dim(1)) =
                    G * CMatMap(B.data.data(), B.dim(0), B.dim(1)).transpose();
                t.push_grad(a, ga);
            }
            if (t.needs_grad(b)) {
                Tensor gb(B.shape);
                MatMap(gb.data.data(), B.dim(0), B.dim(1)) =
                    CMatMap(A.data.data(), A.dim(0), A.dim(1)).transpose() * G;
                t.push_grad(b, gb);
            }
        });
    }

    /// y = x*W + b with x: N x I, W: I x O, b: O.
    VarId linear(VarId x, VarId w, VarId b) {
        const Tensor& X = val(x);
        const Tensor& W = val(w);
        const Tensor& B = val(b);
        if (X.ndim() != 2 || W.ndim() != 2 || X.dim(1) != W.dim(0) || B.size() != W.dim(1))
            throw ShapeError("linear: incompatible shapes");
        Tensor out({X.dim(0), W.dim(1)});
        MatMap Y(out.data.data(), out.dim(0), out.dim(1));
        Y = CMatMap(X.data.data(), X.dim(0), X.dim(1)) * CMatMap(W.data.data(), W.dim(0), W.dim(1));
        for (int r = 0; r < out.dim(0); ++r)
            for (int c = 0; c < out.dim(1); ++c) out.at2(r, c) += B[c];
        return make_node(std::move(out), {x, w, b}, [x, w, b](Tape& t, Node& n) {
            const Tensor& X = t.val(x);
            const Tensor& W = t.val(w);
            CMatMap G(n.grad.data.data(), n.grad.dim(0), n.grad.dim(1));
            if (t.needs_grad(x)) {
                Tensor gx(X.shape);
                MatMap(gx.data.data(), X.dim(0), X.dim(1)) =
                    G * CMatMap(W.data.data(), W.dim(0), W.dim(1)).transpose();
                t.push_grad(x, gx);
            }
            if (t.needs_grad(w)) {
                Tensor gw(W.shape);
                MatMap(gw.data.data(), W.dim(0), W.dim(1)) =
                    CMatMap(X.data.data(), X.dim(0), X.dim(1)).transpose() * G;
                t.push_grad(w, gw);
            }
            if (t.needs_grad(b)) {
                Tensor gb(t.val(b).shape);
                for (int r = 0; r < n.grad.dim(0); ++r)
                    for (int c = 0; c < n.grad.dim(1); ++c) gb[c] += n.grad.at2(r, c);
                t.push_grad(b, gb);
            }
        });
    }

    // ---- convolution -------------------------------------------------------

    /// 2-D convolution, NCHW input, OIHW weights, zero padding.
    VarId conv2d(VarId x, VarId w, VarId b, int stride, int pad) {
        const Tensor& X = val(x);
        const Tensor& W = val(w);
        if (X.ndim() != 4 || W.ndim() != 4) throw ShapeError("conv2d expects 4-d input and weight");
        const int N = X.dim(0), Cin = X.dim(1), H = X.dim(2), Wd = X.dim(3);
        const int Cout = W.dim(0), k = W.dim(2);
        if (W.dim(1) != Cin || W.dim(3) != k) throw ShapeError("conv2d: weight does not match input channels");
        const int Ho = (H + 2 * pad - k) / stride + 1;
        const int Wo = (Wd + 2 * pad - k) / stride + 1;
        if (Ho <= 0 || Wo <= 0) throw ShapeError("conv2d: output would be empty");

        const int rows = Cin * k * k;
        const int cols = N * Ho * Wo;
        auto col = std::make_shared<Tensor>(std::vector<int>{rows, cols});
        im2col(X, *col, N, Cin, H, Wd, k, stride, pad, Ho, Wo);

        Tensor out({N, Cout, Ho, Wo});
        {
            Mat Y = CMatMap(W.data.data(), Cout, rows) * CMatMap(col->data.data(), rows, cols);
            for (int n = 0; n < N; ++n)
                for (int co = 0; co < Cout; ++co) {
                    const double bias = val(b)[co];
                    for (int p = 0; p < Ho * Wo; ++p)
                        out.data[static_cast<size_t>(((static_cast<int64_t>(n) * Cout + co) * Ho * Wo) + p)] =
                            Y(co, n * Ho * Wo + p) + bias;
                }
        }
        auto dims = std::array<int, 9>{N, Cin, H, Wd, k, stride, pad, Ho, Wo};
        return make_node(std::move(out), {x, w, b}, [x, w, b, col, dims](Tape& t, Node& n) {
            const int N = dims[0], Cin = dims[1], H = dims[2], Wd = dims[3], k = dims[4];
            const int stride = dims[5], pad = dims[6], Ho = dims[7], Wo = dims[8];
            const Tensor& W = t.val(w);
            const int Cout = W.dim(0);
            const int rows = Cin * k * k;
            const int cols = N * Ho * Wo;

            // Reorder output grad to Cout x (N*Ho*Wo).
            Mat Gm(Cout, cols);
            for (int nn = 0; nn < N; ++nn)
                for (int co = 0; co < Cout; ++co)
                    for (int p = 0; p < Ho * Wo; ++p)
                        Gm(co, nn * Ho * Wo + p) =
                            n.grad.data[static_cast<size_t>(((static_cast<int64_t>(nn) * Cout + co) * Ho * Wo) + p)];

            if (t.needs_grad(w)) {
                Tensor gw(W.shape);
                MatMap(gw.data.data(), Cout, rows) = Gm * CMatMap(col->data.data(), rows, cols).transpose();
                t.push_grad(w, gw);
            }
            if (t.needs_grad(b)) {
                Tensor gb(t.val(b).shape);
                for (int co = 0; co < Cout; ++co) gb[co] = Gm.row(co).sum();
                t.push_grad(b, gb);
            }
            if (t.needs_grad(x)) {
                Mat dcol = CMatMap(W.data.data(), Cout, rows).transpose() * Gm;
                Tensor gx(t.val(x).shape);
                col2im(dcol, gx, N, Cin, H, Wd, k, stride, pad, Ho, Wo);
                t.push_grad(x, gx);
            }
        });
    }

    // ---- normalization and pooling ------------------------------------------

    /// Batch normalization over NCHW. In training mode uses batch statistics
    /// and (optionally) updates the running buffers in place; in eval mode
    /// uses the running buffers.
    VarId batchnorm2d(VarId x, VarId gamma, VarId beta, Tensor* running_mean, Tensor* running_var,
                      bool training, double momentum = 0.1, bool update_running = true,
                      double eps = 1e-5) {
        const Tensor& X = val(x);
        if (X.ndim() != 4) throw ShapeError("batchnorm2d expects 4-d input");
        const int N = X.dim(0), C = X.dim(1), H = X.dim(2), W = X.dim(3);
        const int64_t m = static_cast<int64_t>(N) * H * W;

        auto xhat = std::make_shared<Tensor>(X.shape);
        auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(C));
        Tensor out(X.shape);

        for (int c = 0; c < C; ++c) {
            double mu, var;
            if (training) {
                double s = 0.0;
                for (int n = 0; n < N; ++n)
                    for (int h = 0; h < H; ++h)
                        for (int w = 0; w < W; ++w) s += X.at4(n, c, h, w);
                mu = s / static_cast<double>(m);
                double v = 0.0;
                for (int n = 0; n < N; ++n)
                    for (int h = 0; h < H; ++h)
                        for (int w = 0; w < W; ++w) {
                            const double d = X.at4(n, c, h, w) - mu;
                            v += d * d;
                        }
                var = v / static_cast<double>(m);
                if (update_running && running_mean && running_var) {
                    const double unbiased = m > 1 ? var * static_cast<double>(m) / static_cast<double>(m - 1) : var;
                    (*running_mean)[c] = (1.0 - momentum) * (*running_mean)[c] + momentum * mu;
                    (*running_var)[c] = (1.0 - momentum) * (*running_var)[c] + momentum * unbiased;
                }
            } else {
                mu = (*running_mean)[c];
                var = (*running_var)[c];
            }
            const double istd = 1.0 / std::sqrt(var + eps);
            (*inv_std)[static_cast<size_t>(c)] = istd;
            const double g = val(gamma)[c], bb = val(beta)[c];
            for (int n = 0; n < N; ++n)
                for (int h = 0; h < H; ++h)
                    for (int w = 0; w < W; ++w) {
                        const double xh = (X.at4(n, c, h, w) - mu) * istd;
                        xhat->at4(n, c, h, w) = xh;
                        out.at4(n, c, h, w) = g * xh + bb;
                    }
        }

        return make_node(std::move(out), {x, gamma, beta},
                         [x, gamma, beta, xhat, inv_std, training, N, C, H, W, m](Tape& t, Node& n) {
            for (int c = 0; c < C; ++c) {
                double sum_dy = 0.0, sum_dy_xhat = 0.0;
                for (int nn = 0; nn < N; ++nn)
                    for (int h = 0; h < H; ++h)
                        for (int w = 0; w < W; ++w) {
                            const double dy = n.grad.at4(nn, c, h, w);
                            sum_dy += dy;
                            sum_dy_xhat += dy * xhat->at4(nn, c, h, w);
                        }
                if (t.needs_grad(gamma)) t.grad_slot(gamma)[c] += sum_dy_xhat;
                if (t.needs_grad(beta)) t.grad_slot(beta)[c] += sum_dy;
                if (t.needs_grad(x)) {
                    const double g = t.val(gamma)[c];
                    const double istd = (*inv_std)[static_cast<size_t>(c)];
                    Tensor& gx = t.grad_slot(x);
                    const double inv_m = 1.0 / static_cast<double>(m);
                    for (int nn = 0; nn < N; ++nn)
                        for (int h = 0; h < H; ++h)
                            for (int w = 0; w < W; ++w) {
                                const double dy = n.grad.at4(nn, c, h, w);
                                double dx;
                                if (training) {
                                    dx = g * istd *
                                         (dy - inv_m * sum_dy - xhat->at4(nn, c, h, w) * inv_m * sum_dy_xhat);
                                } else {
                                    dx = g * istd * dy;
                                }
                                gx.at4(nn, c, h, w) += dx;
                            }
                }
            }
        });
    }

    VarId maxpool2(VarId x) {
        const Tensor& X = val(x);
        if (X.ndim() != 4) throw ShapeError("maxpool2 expects 4-d input");
        const int N = X.dim(0), C = X.dim(1), H = X.dim(2), W = X.dim(3);
        const int Ho = H / 2, Wo = W / 2;
        if (Ho == 0 || Wo == 0) throw ShapeError("maxpool2: input too small");
        Tensor out({N, C, Ho, Wo});
        auto arg = std::make_shared<std::vector<int64_t>>(out.data.size());
        int64_t oi = 0;
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                for (int ho = 0; ho < Ho; ++ho)
                    for (int wo = 0; wo < Wo; ++wo, ++oi) {
                        double best = -1e300;
                        int64_t best_i = 0;
                        for (int dy = 0; dy < 2; ++dy)
                            for (int dx = 0; dx < 2; ++dx) {
                                const int h = ho * 2 + dy, w = wo * 2 + dx;
                                const int64_t idx =
                                    ((static_cast<int64_t>(n) * C + c) * H + h) * W + w;
                                if (X.data[static_cast<size_t>(idx)] > best) {
                                    best = X.data[static_cast<size_t>(idx)];
                                    best_i = idx;
                                }
                            }
                        out[oi] = best;
                        (*arg)[static_cast<size_t>(oi)] = best_i;
                    }
        return unary_or_binary(std::move(out), x, -1, [x, arg](Tape& t, Node& n) {
            if (!t.needs_grad(x)) return;
            Tensor& gx = t.grad_slot(x);
            for (int64_t i = 0; i < n.grad.size(); ++i)
                gx.data[static_cast<size_t>((*arg)[static_cast<size_t>(i)])] += n.grad[i];
        });
    }

    /// Adaptive average pool to 1x1, flattened to N x C.
    VarId global_avg_pool(VarId x) {
        const Tensor& X = val(x);
        if (X.ndim() != 4) throw ShapeError("global_avg_pool expects 4-d input");
        const int N = X.dim(0), C = X.dim(1), H = X.dim(2), W = X.dim(3);
        Tensor out({N, C});
        const double inv = 1.0 / static_cast<double>(H * W);
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                double s = 0.0;
                for (int h = 0; h < H; ++h)
                    for (int w = 0; w < W; ++w) s += X.at4(n, c, h, w);
                out.at2(n, c) = s * inv;
            }
        return unary_or_binary(std::move(out), x, -1, [x, N, C, H, W, inv](Tape& t, Node& n) {
            if (!t.needs_grad(x)) return;
            Tensor& gx = t.grad_slot(x);
            for (int nn = 0; nn < N; ++nn)
                for (int c = 0; c < C; ++c) {
                    const double g = n.grad.at2(nn, c) * inv;
                    for (int h = 0; h < H; ++h)
                        for (int w = 0; w < W; ++w) gx.at4(nn, c, h, w) += g;
                }
        });
    }

    VarId upsample_nearest2(VarId x) {
        const Tensor& X = val(x);
        const int N = X.dim(0), C = X.dim(1), H = X.dim(2), W = X.dim(3);
        Tensor out({N, C, H * 2, W * 2});
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                for (int h = 0; h < 2 * H; ++h)
                    for (int w = 0; w < 2 * W; ++w) out.at4(n, c, h, w) = X.at4(n, c, h / 2, w / 2);
        return unary_or_binary(std::move(out), x, -1, [x, N, C, H, W](Tape& t, Node& n) {
            if (!t.needs_grad(x)) return;
            Tensor& gx = t.grad_slot(x);
            for (int nn = 0; nn < N; ++nn)
                for (int c = 0; c < C; ++c)
                    for (int h = 0; h < 2 * H; ++h)
                        for (int w = 0; w < 2 * W; ++w)
                            gx.at4(nn, c, h / 2, w / 2) += n.grad.at4(nn, c, h, w);
        });
    }

    VarId concat_channels(VarId a, VarId b) {
        const Tensor& A = val(a);
        const Tensor& B = val(b);
        if (A.ndim() != 4 || B.ndim() != 4 || A.dim(0) != B.dim(0) || A.dim(2) != B.dim(2) ||
            A.dim(3) != B.dim(3))
            throw ShapeError("concat_channels: incompatible shapes");
        const int N = A.dim(0), Ca = A.dim(1), Cb = B.dim(1), H = A.dim(2), W = A.dim(3);
        Tensor out({N, Ca + Cb, H, W});
        for (int n = 0; n < N; ++n) {
            for (int c = 0; c < Ca; ++c)
                for (int h = 0; h < H; ++h)
                    for (int w = 0; w < W; ++w) out.at4(n, c, h, w) = A.at4(n, c, h, w);
            for (int c = 0; c < Cb; ++c)
                for (int h = 0; h < H; ++h)
                    for (int w = 0; w < W; ++w) out.at4(n, Ca + c, h, w) = B.at4(n, c, h, w);
        }
        return unary_or_binary(std::move(out), a, b, [a, b, N, Ca, Cb, H, W](Tape& t, Node& n) {
            if (t.needs_grad(a)) {
                Tensor& ga = t.grad_slot(a);
                for (int nn = 0; nn < N; ++nn)
                    for (int c = 0; c < Ca; ++c)
                        for (int h = 0; h < H; ++h)
                            for (int w = 0; w < W; ++w) ga.at4(nn, c, h, w) += n.grad.at4(nn, c, h, w);
            }
            if (t.needs_grad(b)) {
                Tensor& gb = t.grad_slot(b);
                for (int nn = 0; nn < N; ++nn)
                    for (int c = 0; c < Cb; ++c)
                        for (int h = 0; h < H; ++h)
                            for (int w = 0; w < W; ++w) gb.at4(nn, c, h, w) += n.grad.at4(nn, Ca + c, h, w);
            }
        });
    }

    /// Adds a per-item, per-channel offset (N x C) to an NCHW tensor.
    VarId add_nc(VarId x, VarId v) {
        const Tensor& X = val(x);
        const Tensor& V = val(v);
        if (X.ndim() != 4 || V.ndim() != 2 || V.dim(0) != X.dim(0) || V.dim(1) != X.dim(1))
            throw ShapeError("add_nc: incompatible shapes");
        const int N = X.dim(0), C = X.dim(1), H = X.dim(2), W = X.dim(3);
        Tensor out = X;
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const double o = V.at2(n, c);
                for (int h = 0; h < H; ++h)
                    for (int w = 0; w < W; ++w) out.at4(n, c, h, w) += o;
            }
        return unary_or_binary(std::move(out), x, v, [x, v, N, C, H, W](Tape& t, Node& n) {
            if (t.needs_grad(x)) t.push_grad(x, n.grad);
            if (t.needs_grad(v)) {
                Tensor& gv = t.grad_slot(v);
                for (int nn = 0; nn < N; ++nn)
                    for (int c = 0; c < C; ++c) {
                        double s = 0.0;
                        for (int h = 0; h < H; ++h)
                            for (int w = 0; w < W; ++w) s += n.grad.at4(nn, c, h, w);
                        gv.at2(nn, c) += s;
                    }
            }
        });
    }

    // ---- embeddings --------------------------------------------------------

    /// Gathers rows of a V x d table into an L x d matrix.
    VarId gather_rows(VarId table, std::vector<int> ids) {
        const Tensor& T = val(table);
        const int L = static_cast<int>(ids.size());
        const int d = T.dim(1);
        Tensor out({L, d});
        for (int i = 0; i < L; ++i)
            for (int j = 0; j < d; ++j) out.at2(i, j) = T.at2(ids[static_cast<size_t>(i)], j);
        auto idv = std::make_shared<std::vector<int>>(std::move(ids));
        return unary_or_binary(std::move(out), table, -1, [table, idv, d](Tape& t, Node& n) {
            if (!t.needs_grad(table)) return;
            Tensor& gt = t.grad_slot(table);
            for (size_t i = 0; i < idv->size(); ++i)
                for (int j = 0; j < d; ++j)
                    gt.at2((*idv)[i], j) += n.grad.at2(static_cast<int>(i), j);
        });
    }

    /// Stacks N matrices of identical shape L x d into N x L x d.
    VarId stack_rows(const std::vector<VarId>& items) {
        if (items.empty()) throw ShapeError("stack_rows: empty input");
        const Tensor& first = val(items[0]);
        const int L = first.dim(0), d = first.dim(1);
        const int N = static_cast<int>(items.size());
        Tensor out({N, L, d});
        for (int i = 0; i < N; ++i) {
            const Tensor& it = val(items[static_cast<size_t>(i)]);
            check_same_shape(it, first, "stack_rows");
            std::copy(it.data.begin(), it.data.end(),
                      out.data.begin() + static_cast<int64_t>(i) * L * d);
        }
        auto ids = std::make_shared<std::vector<VarId>>(items);
        return make_node(std::move(out), items, [ids, L, d](Tape& t, Node& n) {
            for (size_t i = 0; i < ids->size(); ++i) {
                const VarId it = (*ids)[i];
                if (!t.needs_grad(it)) continue;
                Tensor& g = t.grad_slot(it);
                const int64_t off = static_cast<int64_t>(i) * L * d;
                for (int64_t j = 0; j < static_cast<int64_t>(L) * d; ++j) g[j] += n.grad[off + j];
            }
        });
    }

    // ---- attention ---------------------------------------------------------

    /// Cross-attention with residual: spatial positions of the NCHW feature
    /// map attend to the token matrix (N x L x d). Composite node; the
    /// backward pass follows the usual softmax-attention derivation.
    VarId cross_attention(VarId h, VarId tok, VarId wq, VarId bq, VarId wk, VarId bk, VarId wv,
                          VarId bv, VarId wo, VarId bo) {
        const Tensor& Hx = val(h);
        const Tensor& Tok = val(tok);
        const int N = Hx.dim(0), C = Hx.dim(1), S = Hx.dim(2) * Hx.dim(3);
        const int L = Tok.dim(1), d = Tok.dim(2);
        const int dk = val(wq).dim(1);
        const int dv = val(wv).dim(1);
        if (val(wq).dim(0) != C || val(wk).dim(0) != d || val(wk).dim(1) != dk ||
            val(wv).dim(0) != d || val(wo).dim(0) != dv || val(wo).dim(1) != C)
            throw ShapeError("cross_attention: projection shapes inconsistent");
        const double iscale = 1.0 / std::sqrt(static_cast<double>(dk));

        struct Cache {
            std::vector<Mat> Q, K, V, A, Ctx;  // per item
        };
        auto cache = std::make_shared<Cache>();
        cache->Q.reserve(static_cast<size_t>(N));

        Tensor out = Hx;
        CMatMap Wq(val(wq).data.data(), C, dk), Wk(val(wk).data.data(), d, dk);
        CMatMap Wv(val(wv).data.data(), d, dv), Wo(val(wo).data.data(), dv, C);
        for (int n = 0; n < N; ++n) {
            CMatMap Hi(Hx.data.data() + static_cast<int64_t>(n) * C * S, C, S);
            CMatMap Ei(Tok.data.data() + static_cast<int64_t>(n) * L * d, L, d);
            Mat Q = Hi.transpose() * Wq;          // S x dk
            Q.rowwise() += CMatMap(val(bq).data.data(), 1, dk).row(0);
            Mat K = Ei * Wk;                       // L x dk
            K.rowwise() += CMatMap(val(bk).data.data(), 1, dk).row(0);
            Mat V = Ei * Wv;                       // L x dv
            V.rowwise() += CMatMap(val(bv).data.data(), 1, dv).row(0);
            Mat Z = Q * K.transpose() * iscale;    // S x L
            Mat A(S, L);
            for (int r = 0; r < S; ++r) {
                const double mx = Z.row(r).maxCoeff();
                double sum = 0.0;
                for (int c2 = 0; c2 < L; ++c2) {
                    A(r, c2) = std::exp(Z(r, c2) - mx);
                    sum += A(r, c2);
                }
                A.row(r) /= sum;
            }
            Mat Ctx = A * V;                       // S x dv
            Mat O = Ctx * Wo;                      // S x C
            O.rowwise() += CMatMap(val(bo).data.data(), 1, C).row(0);
            MatMap Oi(out.data.data() + static_cast<int64_t>(n) * C * S, C, S);
            Oi += O.transpose();
            cache->Q.push_back(std::move(Q));
            cache->K.push_back(std::move(K));
            cache->V.push_back(std::move(V));
            cache->A.push_back(std::move(A));
            cache->Ctx.push_back(std::move(Ctx));
        }

        std::vector<VarId> parents{h, tok, wq, bq, wk, bk, wv, bv, wo, bo};
        return make_node(std::move(out), parents,
                         [h, tok, wq, bq, wk, bk, wv, bv, wo, bo, cache, N, C, S, L, d, dk, dv,
                          iscale](Tape& t, Node& n) {
            CMatMap Wq(t.val(wq).data.data(), C, dk), Wk(t.val(wk).data.data(), d, dk);
            CMatMap Wv(t.val(wv).data.data(), d, dv), Wo(t.val(wo).data.data(), dv, C);
            Mat gWq = Mat::Zero(C, dk), gWk = Mat::Zero(d, dk), gWv = Mat::Zero(d, dv),
                gWo = Mat::Zero(dv, C);
            Eigen::RowVectorXd gbq = Eigen::RowVectorXd::Zero(dk), gbk = Eigen::RowVectorXd::Zero(dk),
                               gbv = Eigen::RowVectorXd::Zero(dv), gbo = Eigen::RowVectorXd::Zero(C);

            for (int nn = 0; nn < N; ++nn) {
                CMatMap Gy(n.grad.data.data() + static_cast<int64_t>(nn) * C * S, C, S);
                CMatMap Hi(t.val(h).data.data() + static_cast<int64_t>(nn) * C * S, C, S);
                CMatMap Ei(t.val(tok).data.data() + static_cast<int64_t>(nn) * L * d, L, d);
                const Mat& Q = cache->Q[static_cast<size_t>(nn)];
                const Mat& K = cache->K[static_cast<size_t>(nn)];
                const Mat& V = cache->V[static_cast<size_t>(nn)];
                const Mat& A = cache->A[static_cast<size_t>(nn)];
                const Mat& Ctx = cache->Ctx[static_cast<size_t>(nn)];

                Mat dO = Gy.transpose();           // S x C
                Mat dCtx = dO * Wo.transpose();    // S x dv
                gWo += Ctx.transpose() * dO;
                gbo += dO.colwise().sum();

                Mat dA = dCtx * V.transpose();     // S x L
                Mat dV = A.transpose() * dCtx;     // L x dv
                Mat dZ(A.rows(), A.cols());
                for (int r = 0; r < A.rows(); ++r) {
                    const double dotr = (dA.row(r).array() * A.row(r).array()).sum();
                    dZ.row(r) = (dA.row(r).array() - dotr) * A.row(r).array();
                }
                Mat dQ = dZ * K * iscale;          // S x dk
                Mat dK = dZ.transpose() * Q * iscale;

                gWq += Hi * dQ;                     // (C x S)(S x dk)
                gbq += dQ.colwise().sum();
                gWk += Ei.transpose() * dK;
                gbk += dK.colwise().sum();
                gWv += Ei.transpose() * dV;
                gbv += dV.colwise().sum();

                if (t.needs_grad(h)) {
                    Tensor& gh = t.grad_slot(h);
                    MatMap Gh(gh.data.data() + static_cast<int64_t>(nn) * C * S, C, S);
                    Gh += Gy;                       // residual
                    Gh += Wq * dQ.transpose();      // (C x dk)(dk x S)
                }
                if (t.needs_grad(tok)) {
                    Tensor& gtok = t.grad_slot(tok);
                    MatMap Gt(gtok.data.data() + static_cast<int64_t>(nn) * L * d, L, d);
                    Gt += dK * Wk.transpose();
                    Gt += dV * Wv.transpose();
                }
            }
            auto add_mat = [&t](VarId id, const Mat& m) {
                if (!t.needs_grad(id)) return;
                Tensor& g = t.grad_slot(id);
                for (int64_t i = 0; i < g.size(); ++i) g[i] += m.data()[i];
            };
            auto add_vec = [&t](VarId id, const Eigen::RowVectorXd& v) {
                if (!t.needs_grad(id)) return;
                Tensor& g = t.grad_slot(id);
                for (int64_t i = 0; i < g.size(); ++i) g[i] += v[static_cast<Eigen::Index>(i)];
            };
            add_mat(wq, gWq);
            add_vec(bq, gbq);
            add_mat(wk, gWk);
            add_vec(bk, gbk);
            add_mat(wv, gWv);
            add_vec(bv, gbv);
            add_mat(wo, gWo);
            add_vec(bo, gbo);
        });
    }

    // ---- losses ------------------------------------------------------------

    /// Per-item dimension-normalized squared error, combined with per-item
    /// weights: sum_i w_i * mean_e (pred_i - target_i)^2.
    VarId weighted_persample_mse(VarId pred, const Tensor& target, std::vector<double> weights) {
        const Tensor& P = val(pred);
        check_same_shape(P, target, "weighted_persample_mse");
        const int N = P.dim(0);
        if (static_cast<int>(weights.size()) != N)
            throw ShapeError("weighted_persample_mse: weight count != batch size");
        const int64_t e = P.size() / N;
        double loss = 0.0;
        for (int i = 0; i < N; ++i) {
            double s = 0.0;
            for (int64_t j = 0; j < e; ++j) {
                const double d = P[i * e + j] - target[i * e + j];
                s += d * d;
            }
            loss += weights[static_cast<size_t>(i)] * s / static_cast<double>(e);
        }
        auto tgt = std::make_shared<Tensor>(target);
        auto w = std::make_shared<std::vector<double>>(std::move(weights));
        return unary_or_binary(Tensor::scalar(loss), pred, -1, [pred, tgt, w, N, e](Tape& t, Node& n) {
            if (!t.needs_grad(pred)) return;
            const double g = n.grad[0];
            const Tensor& P = t.val(pred);
            Tensor gp(P.shape);
            for (int i = 0; i < N; ++i) {
                const double c = g * 2.0 * (*w)[static_cast<size_t>(i)] / static_cast<double>(e);
                for (int64_t j = 0; j < e; ++j)
                    gp[i * e + j] = c * (P[i * e + j] - (*tgt)[i * e + j]);
            }
            t.push_grad(pred, gp);
        });
    }

    /// Gaussian KL to the standard normal: 0.5 * sum(exp(lv) + mu^2 - 1 - lv).
    VarId kl_standard_normal(VarId mu, VarId logvar) {
        const Tensor& M = val(mu);
        const Tensor& Lv = val(logvar);
        check_same_shape(M, Lv, "kl_standard_normal");
        double s = 0.0;
        for (int64_t i = 0; i < M.size(); ++i)
            s += std::exp(Lv[i]) + M[i] * M[i] - 1.0 - Lv[i];
        return unary_or_binary(Tensor::scalar(0.5 * s), mu, logvar, [mu, logvar](Tape& t, Node& n) {
            const double g = n.grad[0];
            const Tensor& M = t.val(mu);
            const Tensor& Lv = t.val(logvar);
            if (t.needs_grad(mu)) {
                Tensor gm(M.shape);
                for (int64_t i = 0; i < M.size(); ++i) gm[i] = g * M[i];
                t.push_grad(mu, gm);
            }
            if (t.needs_grad(logvar)) {
                Tensor gl(Lv.shape);
                for (int64_t i = 0; i < Lv.size(); ++i) gl[i] = g * 0.5 * (std::exp(Lv[i]) - 1.0);
                t.push_grad(logvar, gl);
            }
        });
    }

    /// Mean cross-entropy over the batch from raw logits.
    VarId cross_entropy_mean(VarId logits, std::vector<int> labels) {
        const Tensor& Lg = val(logits);
        const int N = Lg.dim(0), C = Lg.dim(1);
        if (static_cast<int>(labels.size()) != N)
            throw ShapeError("cross_entropy_mean: label count != batch size");
        auto probs = std::make_shared<Tensor>(Lg.shape);
        double loss = 0.0;
        for (int i = 0; i < N; ++i) {
            double mx = -1e300;
            for (int c = 0; c < C; ++c) mx = std::max(mx, Lg.at2(i, c));
            double z = 0.0;
            for (int c = 0; c < C; ++c) z += std::exp(Lg.at2(i, c) - mx);
            for (int c = 0; c < C; ++c) probs->at2(i, c) = std::exp(Lg.at2(i, c) - mx) / z;
            loss -= std::log(std::max(probs->at2(i, labels[static_cast<size_t>(i)]), 1e-300));
        }
        loss /= static_cast<double>(N);
        auto lab = std::make_shared<std::vector<int>>(std::move(labels));
        return unary_or_binary(Tensor::scalar(loss), logits, -1, [logits, probs, lab, N, C](Tape& t, Node& n) {
            if (!t.needs_grad(logits)) return;
            const double g = n.grad[0] / static_cast<double>(N);
            Tensor gl(t.val(logits).shape);
            for (int i = 0; i < N; ++i)
                for (int c = 0; c < C; ++c)
                    gl.at2(i, c) = g * (probs->at2(i, c) - (c == (*lab)[static_cast<size_t>(i)] ? 1.0 : 0.0));
            t.push_grad(logits, gl);
        });
    }

    /// sum_i coeff_i * scalar_i
    VarId weighted_sum_scalars(const std::vector<VarId>& ids, const std::vector<double>& coeffs) {
        if (ids.size() != coeffs.size() || ids.empty())
            throw ShapeError("weighted_sum_scalars: bad arguments");
        double s = 0.0;
        for (size_t i = 0; i < ids.size(); ++i) s += coeffs[i] * val(ids[i])[0];
        auto idv = std::make_shared<std::vector<VarId>>(ids);
        auto cv = std::make_shared<std::vector<double>>(coeffs);
        return make_node(Tensor::scalar(s), ids, [idv, cv](Tape& t, Node& n) {
            for (size_t i = 0; i < idv->size(); ++i) {
                const VarId id = (*idv)[i];
                if (!t.needs_grad(id)) continue;
                t.grad_slot(id)[0] += n.grad[0] * (*cv)[i];
            }
        });
    }

    // ---- backward ----------------------------------------------------------

    /// Backpropagates from a scalar root and accumulates leaf gradients into
    /// their bound Parameters.
    void backward(VarId root) {
        Node& r = nodes[static_cast<size_t>(root)];
        if (r.value.size() != 1) throw ShapeError("backward root must be scalar");
        if (!r.needs_grad) return;
        grad_slot(root)[0] = 1.0;
        for (int i = root; i >= 0; --i) {
            Node& n = nodes[static_cast<size_t>(i)];
            if (!n.needs_grad || n.grad.size() == 0) continue;
            if (n.back) n.back(*this, n);
        }
        for (auto& n : nodes) {
            if (n.param && n.param->trainable && n.grad.size() != 0) {
                for (int64_t i = 0; i < n.grad.size(); ++i) n.param->grad[i] += n.grad[i];
            }
        }
    }

    Tensor& grad_slot(VarId id) {
        Node& n = nodes[static_cast<size_t>(id)];
        if (n.grad.size() == 0) n.grad = Tensor::zeros(n.value.shape);
        return n.grad;
    }

    void push_grad(VarId id, const Tensor& g) {
        if (!needs_grad(id)) return;
        Tensor& slot = grad_slot(id);
        for (int64_t i = 0; i < slot.size(); ++i) slot[i] += g[i];
    }

  private:
    VarId make_node(Tensor value, const std::vector<VarId>& parents,
                    std::function<void(Tape&, Node&)> back) {
        Node n;
        n.value = std::move(value);
        for (VarId p : parents)
            if (p >= 0 && nodes[static_cast<size_t>(p)].needs_grad) n.needs_grad = true;
        if (n.needs_grad) n.back = std::move(back);
        nodes.push_back(std::move(n));
        return static_cast<VarId>(nodes.size()) - 1;
    }

    VarId unary_or_binary(Tensor value, VarId a, VarId b, std::function<void(Tape&, Node&)> back) {
        std::vector<VarId> ps{a};
        if (b >= 0) ps.push_back(b);
        return make_node(std::move(value), ps, std::move(back));
    }

    static void im2col(const Tensor& X, Tensor& col, int N, int Cin, int H, int W, int k,
                       int stride, int pad, int Ho, int Wo) {
        const int cols = N * Ho * Wo;
        for (int ci = 0; ci < Cin; ++ci)
            for (int kh = 0; kh < k; ++kh)
                for (int kw = 0; kw < k; ++kw) {
                    const int row = (ci * k + kh) * k + kw;
                    double* dst = col.data.data() + static_cast<int64_t>(row) * cols;
                    for (int n = 0; n < N; ++n)
                        for (int ho = 0; ho < Ho; ++ho) {
                            const int h = ho * stride + kh - pad;
                            for (int wo = 0; wo < Wo; ++wo) {
                                const int w = wo * stride + kw - pad;
                                const int64_t ci_idx = (n * Ho + ho) * Wo + wo;
                                dst[ci_idx] = (h >= 0 && h < H && w >= 0 && w < W)
                                                  ? X.at4(n, ci, h, w)
                                                  : 0.0;
                            }
                        }
                }
    }

    static void col2im(const Mat& dcol, Tensor& gx, int N, int Cin, int H, int W, int k,
                       int stride, int pad, int Ho, int Wo) {
        for (int ci = 0; ci < Cin; ++ci)
            for (int kh = 0; kh < k; ++kh)
                for (int kw = 0; kw < k; ++kw) {
                    const int row = (ci * k + kh) * k + kw;
                    for (int n = 0; n < N; ++n)
                        for (int ho = 0; ho < Ho; ++ho) {
                            const int h = ho * stride + kh - pad;
                            if (h < 0 || h >= H) continue;
                            for (int wo = 0; wo < Wo; ++wo) {
                                const int w = wo * stride + kw - pad;
                                if (w < 0 || w >= W) continue;
                                gx.at4(n, ci, h, w) += dcol(row, (n * Ho + ho) * Wo + wo);
                            }
                        }
                }
    }
};

} // namespace agrigen
