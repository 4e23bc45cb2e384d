#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "rrg/errors.hpp"
#include "rrg/rng.hpp"
#include "rrg/tensor.hpp"

namespace rrg {

// Boolean attention mask; 1 = position may be attended to.
struct Mask {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::uint8_t> allowed;

    bool at(std::size_t r, std::size_t c) const { return allowed[r * cols + c] != 0; }

    static Mask all(std::size_t rows, std::size_t cols) {
        Mask m{rows, cols, std::vector<std::uint8_t>(rows * cols, 1)};
        return m;
    }

    // Lower-triangular: position i sees positions <= i.
    static Mask causal(std::size_t n) {
        Mask m{n, n, std::vector<std::uint8_t>(n * n, 0)};
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j <= i; ++j) m.allowed[i * n + j] = 1;
        return m;
    }

    // Every query row sees exactly the keys flagged visible.
    static Mask from_key_visibility(std::size_t rows, const std::vector<std::uint8_t>& visible) {
        Mask m{rows, visible.size(), std::vector<std::uint8_t>(rows * visible.size(), 0)};
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < visible.size(); ++j)
                m.allowed[i * visible.size() + j] = visible[j];
        return m;
    }
};

// Define-by-run reverse-mode tape over dense 2-D tensors. Operations append
// nodes in topological order; backward() propagates adjoints through the
// recorded ops in reverse, exactly once each. One tape is single-threaded;
// independent tapes share no state.
template <typename T>
class Tape {
public:
    using Var = std::size_t;

    // ---- node access -------------------------------------------------

    Var leaf(Tensor<T> value, bool requires_grad) {
        return push(std::move(value), requires_grad, nullptr);
    }

    Var constant(Tensor<T> value) { return leaf(std::move(value), false); }

    const Tensor<T>& value(Var v) const { return nodes_[v].value; }

    // Accumulated gradient; zero tensor if backward never reached the node.
    const Tensor<T>& grad(Var v) const {
        const Node& n = nodes_[v];
        if (n.grad.size() == 0) n.grad = Tensor<T>(n.value.rows(), n.value.cols());
        return n.grad;
    }

    bool requires_grad(Var v) const { return nodes_[v].requires_grad; }
    std::size_t node_count() const { return nodes_.size(); }

    void zero_grad() {
        for (auto& n : nodes_)
            if (n.grad.size() != 0) n.grad.fill(T(0));
    }

    // ---- arithmetic ops ----------------------------------------------

    Var matmul(Var a, Var b) {
        const Tensor<T>& A = value(a);
        const Tensor<T>& B = value(b);
        if (A.cols() != B.rows()) {
            throw NumericError("matmul shape mismatch: " + A.shape_str() + " x " + B.shape_str());
        }
        Tensor<T> C(A.rows(), B.cols());
        matmul_into(A, B, C);
        return push(std::move(C), needs({a, b}),
                    [a, b](Tape& t, const Tensor<T>& dC, Adjoints& adj) {
                        const Tensor<T>& A = t.value(a);
                        const Tensor<T>& B = t.value(b);
                        if (t.requires_grad(a)) {
                            // dA = dC * B^T
                            Tensor<T>& dA = t.adj_of(adj, a);
                            for (std::size_t i = 0; i < A.rows(); ++i)
                                for (std::size_t j = 0; j < B.cols(); ++j) {
                                    const T g = dC.at(i, j);
                                    if (g == T(0)) continue;
                                    for (std::size_t k = 0; k < A.cols(); ++k)
                                        dA.at(i, k) += g * B.at(k, j);
                                }
                        }
                        if (t.requires_grad(b)) {
                            // dB = A^T * dC
                            Tensor<T>& dB = t.adj_of(adj, b);
                            for (std::size_t i = 0; i < A.rows(); ++i)
                                for (std::size_t k = 0; k < A.cols(); ++k) {
                                    const T av = A.at(i, k);
                                    if (av == T(0)) continue;
                                    for (std::size_t j = 0; j < B.cols(); ++j)
                                        dB.at(k, j) += av * dC.at(i, j);
                                }
                        }
                    });
    }

    Var transpose(Var a) {
        const Tensor<T>& A = value(a);
        Tensor<T> Y(A.cols(), A.rows());
        for (std::size_t i = 0; i < A.rows(); ++i)
            for (std::size_t j = 0; j < A.cols(); ++j) Y.at(j, i) = A.at(i, j);
        return push(std::move(Y), needs({a}),
                    [a](Tape& t, const Tensor<T>& dY, Adjoints& adj) {
                        Tensor<T>& dA = t.adj_of(adj, a);
                        for (std::size_t i = 0; i < dY.rows(); ++i)
                            for (std::size_t j = 0; j < dY.cols(); ++j)
                                dA.at(j, i) += dY.at(i, j);
                    });
    }

    Var add(Var a, Var b) {
        const Tensor<T>& A = value(a);
        const Tensor<T>& B = value(b);
        if (!A.same_shape(B)) {
            throw NumericError("add shape mismatch: " + A.shape_str() + " vs " + B.shape_str());
        }
        Tensor<T> C(A.rows(), A.cols());
        for (std::size_t i = 0; i < A.size(); ++i) C[i] = A[i] + B[i];
        return push(std::move(C), needs({a, b}),
                    [a, b](Tape& t, const Tensor<T>& dC, Adjoints& adj) {
                        if (t.requires_grad(a)) {
                            Tensor<T>& dA = t.adj_of(adj, a);
                            for (std::size_t i = 0; i < dC.size(); ++i) dA[i] += dC[i];
                        }
                        if (t.requires_grad(b)) {
                            Tensor<T>& dB = t.adj_of(adj, b);
                            for (std::size_t i = 0; i < dC.size(); ++i) dB[i] += dC[i];
                        }
                    });
    }

    // X[m x d] + bias[1 x d] broadcast to every row. The only broadcast form.
    Var add_bias_row(Var x, Var bias) {
        const Tensor<T>& X = value(x);
        const Tensor<T>& B = value(bias);
        if (B.rows() != 1 || B.cols() != X.cols()) {
            throw NumericError("bias broadcast mismatch: " + X.shape_str() + " vs " + B.shape_str());
        }
        Tensor<T> Y(X.rows(), X.cols());
        for (std::size_t i = 0; i < X.rows(); ++i)
            for (std::size_t j = 0; j < X.cols(); ++j) Y.at(i, j) = X.at(i, j) + B.at(0, j);
        return push(std::move(Y), needs({x, bias}),
                    [x, bias](Tape& t, const Tensor<T>& dY, Adjoints& adj) {
                        if (t.requires_grad(x)) {
                            Tensor<T>& dX = t.adj_of(adj, x);
                            for (std::size_t i = 0; i < dY.size(); ++i) dX[i] += dY[i];
                        }
                        if (t.requires_grad(bias)) {
                            Tensor<T>& dB = t.adj_of(adj, bias);
                            for (std::size_t i = 0; i < dY.rows(); ++i)
                                for (std::size_t j = 0; j < dY.cols(); ++j)
                                    dB.at(0, j) += dY.at(i, j);
                        }
                    });
    }

    Var mul(Var a, Var b) {
        const Tensor<T>& A = value(a);
        const Tensor<T>& B = value(b);
        if (!A.same_shape(B)) {
            throw NumericError("mul shape mismatch: " + A.shape_str() + " vs " + B.shape_str());
        }
        Tensor<T> C(A.rows(), A.cols());
        for (std::size_t i = 0; i < A.size(); ++i) C[i] = A[i] * B[i];
        return push(std::move(C), needs({a, b}),
                    [a, b](Tape& t, const Tensor<T>& dC, Adjoints& adj) {
                        const Tensor<T>& A = t.value(a);
                        const Tensor<T>& B = t.value(b);
                        if (t.requires_grad(a)) {
                            Tensor<T>& dA = t.adj_of(adj, a);
                            for (std::size_t i = 0; i < dC.size(); ++i) dA[i] += dC[i] * B[i];
                        }
                        if (t.requires_grad(b)) {
                            Tensor<T>& dB = t.adj_of(adj, b);
                            for (std::size_t i = 0; i < dC.size(); ++i) dB[i] += dC[i] * A[i];
                        }
                    });
    }

    Var scale(Var a, double s) {
        const Tensor<T>& A = value(a);
        Tensor<T> C(A.rows(), A.cols());
        const T sv = static_cast<T>(s);
        for (std::size_t i = 0; i < A.size(); ++i) C[i] = A[i] * sv;
        return push(std::move(C), needs({a}),
                    [a, sv](Tape& t, const Tensor<T>& dC, Adjoints& adj) {
                        Tensor<T>& dA = t.adj_of(adj, a);
                        for (std::size_t i = 0; i < dC.size(); ++i) dA[i] += dC[i] * sv;
                    });
    }

    // Multiply by a learnable 1x1 scalar parameter.
    Var scale_by(Var x, Var s) {
        const Tensor<T>& X = value(x);
        const Tensor<T>& S = value(s);
        if (!S.is_scalar()) {
            throw NumericError("scale_by expects a 1x1 scalar, got " + S.shape_str());
        }
        const T sv = S[0];
        Tensor<T> Y(X.rows(), X.cols());
        for (std::size_t i = 0; i < X.size(); ++i) Y[i] = X[i] * sv;
        return push(std::move(Y), needs({x, s}),
                    [x, s](Tape& t, const Tensor<T>& dY, Adjoints& adj) {
                        const Tensor<T>& X = t.value(x);
                        const T sv = t.value(s)[0];
                        if (t.requires_grad(x)) {
                            Tensor<T>& dX = t.adj_of(adj, x);
                            for (std::size_t i = 0; i < dY.size(); ++i) dX[i] += dY[i] * sv;
                        }
                        if (t.requires_grad(s)) {
                            Tensor<T>& dS = t.adj_of(adj, s);
                            T acc = T(0);
                            for (std::size_t i = 0; i < dY.size(); ++i) acc += dY[i] * X[i];
                            dS[0] += acc;
                        }
                    });
    }

    Var relu(Var a) {
        const Tensor<T>& A = value(a);
        Tensor<T> C(A.rows(), A.cols());
        for (std::size_t i = 0; i < A.size(); ++i) C[i] = A[i] > T(0) ? A[i] : T(0);
        return push(std::move(C), needs({a}),
                    [a](Tape& t, const Tensor<T>& dC, Adjoints& adj) {
                        const Tensor<T>& A = t.value(a);
                        Tensor<T>& dA = t.adj_of(adj, a);
                        for (std::size_t i = 0; i < dC.size(); ++i)
                            if (A[i] > T(0)) dA[i] += dC[i];
                    });
    }

    // Row-wise softmax with max-subtraction. -inf entries (masked scores)
    // contribute weight exactly zero; NaN inputs propagate.
    Var softmax_rows(Var a) {
        const Tensor<T>& A = value(a);
        Tensor<T> Y(A.rows(), A.cols());
        for (std::size_t i = 0; i < A.rows(); ++i) {
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t j = 0; j < A.cols(); ++j) mx = std::max(mx, A.at(i, j));
            T denom = T(0);
            for (std::size_t j = 0; j < A.cols(); ++j) {
                const T e = std::exp(A.at(i, j) - mx);
                Y.at(i, j) = e;
                denom += e;
            }
            for (std::size_t j = 0; j < A.cols(); ++j) Y.at(i, j) /= denom;
        }
        const Var out = nodes_.size();
        return push(std::move(Y), needs({a}),
                    [a, out](Tape& t, const Tensor<T>& dY, Adjoints& adj) {
                        // dX_ij = Y_ij * (dY_ij - sum_k dY_ik * Y_ik), per row
                        const Tensor<T>& Y = t.value(out);
                        Tensor<T>& dA = t.adj_of(adj, a);
                        for (std::size_t i = 0; i < Y.rows(); ++i) {
                            T dot = T(0);
                            for (std::size_t j = 0; j < Y.cols(); ++j)
                                dot += dY.at(i, j) * Y.at(i, j);
                            for (std::size_t j = 0; j < Y.cols(); ++j)
                                dA.at(i, j) += Y.at(i, j) * (dY.at(i, j) - dot);
                        }
                    });
    }

    // Set disallowed positions to -infinity ahead of softmax.
    Var masked_fill(Var a, const Mask& mask) {
        const Tensor<T>& A = value(a);
        if (A.rows() != mask.rows || A.cols() != mask.cols) {
            throw NumericError("mask shape mismatch: " + A.shape_str() + " vs " +
                               std::to_string(mask.rows) + "x" + std::to_string(mask.cols));
        }
        for (std::size_t i = 0; i < mask.rows; ++i) {
            bool any = false;
            for (std::size_t j = 0; j < mask.cols; ++j) any = any || mask.at(i, j);
            if (!any) {
                throw NumericError("fully masked attention row " + std::to_string(i));
            }
        }
        Tensor<T> Y(A.rows(), A.cols());
        const T ninf = -std::numeric_limits<T>::infinity();
        for (std::size_t i = 0; i < A.size(); ++i)
            Y[i] = mask.allowed[i] ? A[i] : ninf;
        auto allowed = mask.allowed;
        return push(std::move(Y), needs({a}),
                    [a, allowed = std::move(allowed)](Tape& t, const Tensor<T>& dY, Adjoints& adj) {
                        Tensor<T>& dA = t.adj_of(adj, a);
                        for (std::size_t i = 0; i < dY.size(); ++i)
                            if (allowed[i]) dA[i] += dY[i];
                    });
    }

    // Per-row standardization followed by elementwise gain/bias.
    Var layernorm(Var x, Var gain, Var bias, double eps) {
        const Tensor<T>& X = value(x);
        const Tensor<T>& G = value(gain);
        const Tensor<T>& B = value(bias);
        const std::size_t d = X.cols();
        if (G.rows() != 1 || G.cols() != d || B.rows() != 1 || B.cols() != d) {
            throw NumericError("layernorm gain/bias must be 1x" + std::to_string(d) +
                               ", got " + G.shape_str() + " and " + B.shape_str());
        }
        Tensor<T> Y(X.rows(), d);
        Tensor<T> xhat(X.rows(), d);
        std::vector<T> inv_std(X.rows());
        for (std::size_t i = 0; i < X.rows(); ++i) {
            T mean = T(0);
            for (std::size_t j = 0; j < d; ++j) mean += X.at(i, j);
            mean /= static_cast<T>(d);
            T var = T(0);
            for (std::size_t j = 0; j < d; ++j) {
                const T c = X.at(i, j) - mean;
                var += c * c;
            }
            var /= static_cast<T>(d);
            const T is = T(1) / std::sqrt(var + static_cast<T>(eps));
            inv_std[i] = is;
            for (std::size_t j = 0; j < d; ++j) {
                const T xh = (X.at(i, j) - mean) * is;
                xhat.at(i, j) = xh;
                Y.at(i, j) = xh * G.at(0, j) + B.at(0, j);
            }
        }
        return push(std::move(Y), needs({x, gain, bias}),
                    [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                        Tape& t, const Tensor<T>& dY, Adjoints& adj) {
                        const Tensor<T>& G = t.value(gain);
                        const std::size_t d = dY.cols();
                        if (t.requires_grad(gain)) {
                            Tensor<T>& dG = t.adj_of(adj, gain);
                            for (std::size_t i = 0; i < dY.rows(); ++i)
                                for (std::size_t j = 0; j < d; ++j)
                                    dG.at(0, j) += dY.at(i, j) * xhat.at(i, j);
                        }
                        if (t.requires_grad(bias)) {
                            Tensor<T>& dB = t.adj_of(adj, bias);
                            for (std::size_t i = 0; i < dY.rows(); ++i)
                                for (std::size_t j = 0; j < d; ++j) dB.at(0, j) += dY.at(i, j);
                        }
                        if (t.requires_grad(x)) {
                            Tensor<T>& dX = t.adj_of(adj, x);
                            for (std::size_t i = 0; i < dY.rows(); ++i) {
                                T sum_dxh = T(0), sum_dxh_xh = T(0);
                                for (std::size_t j = 0; j < d; ++j) {
                                    const T dxh = dY.at(i, j) * G.at(0, j);
                                    sum_dxh += dxh;
                                    sum_dxh_xh += dxh * xhat.at(i, j);
                                }
                                const T inv_d = T(1) / static_cast<T>(d);
                                for (std::size_t j = 0; j < d; ++j) {
                                    const T dxh = dY.at(i, j) * G.at(0, j);
                                    dX.at(i, j) += inv_std[i] *
                                        (dxh - sum_dxh * inv_d - xhat.at(i, j) * sum_dxh_xh * inv_d);
                                }
                            }
                        }
                    });
    }

    // Inverted dropout: kept entries scaled by 1/(1-p). Identity (the same
    // var, no new node) when not training or p == 0.
    Var dropout(Var x, double p, bool training, Rng& rng) {
        if (p < 0.0 || p >= 1.0) {
            throw UsageError("dropout probability must be in [0,1), got " + std::to_string(p));
        }
        if (!training || p == 0.0) return x;
        const Tensor<T>& X = value(x);
        Tensor<T> Y(X.rows(), X.cols());
        std::vector<T> keep(X.size());
        const T inv_keep = static_cast<T>(1.0 / (1.0 - p));
        for (std::size_t i = 0; i < X.size(); ++i) {
            keep[i] = rng.uniform() < p ? T(0) : inv_keep;
            Y[i] = X[i] * keep[i];
        }
        return push(std::move(Y), needs({x}),
                    [x, keep = std::move(keep)](Tape& t, const Tensor<T>& dY, Adjoints& adj) {
                        Tensor<T>& dX = t.adj_of(adj, x);
                        for (std::size_t i = 0; i < dY.size(); ++i) dX[i] += dY[i] * keep[i];
                    });
    }

    // Gather rows of the embedding table; backward scatter-adds.
    Var embedding(Var table, const std::vector<int>& ids) {
        const Tensor<T>& E = value(table);
        for (int id : ids) {
            if (id < 0 || static_cast<std::size_t>(id) >= E.rows()) {
                throw NumericError("embedding id " + std::to_string(id) + " out of range [0," +
                                   std::to_string(E.rows()) + ")");
            }
        }
        Tensor<T> Y(ids.size(), E.cols());
        for (std::size_t i = 0; i < ids.size(); ++i)
            for (std::size_t j = 0; j < E.cols(); ++j)
                Y.at(i, j) = E.at(static_cast<std::size_t>(ids[i]), j);
        return push(std::move(Y), needs({table}),
                    [table, ids](Tape& t, const Tensor<T>& dY, Adjoints& adj) {
                        Tensor<T>& dE = t.adj_of(adj, table);
                        for (std::size_t i = 0; i < ids.size(); ++i)
                            for (std::size_t j = 0; j < dY.cols(); ++j)
                                dE.at(static_cast<std::size_t>(ids[i]), j) += dY.at(i, j);
                    });
    }

    Var slice_cols(Var x, std::size_t start, std::size_t len) {
        const Tensor<T>& X = value(x);
        if (start + len > X.cols()) {
            throw NumericError("column slice [" + std::to_string(start) + "," +
                               std::to_string(start + len) + ") exceeds " + X.shape_str());
        }
        Tensor<T> Y(X.rows(), len);
        for (std::size_t i = 0; i < X.rows(); ++i)
            for (std::size_t j = 0; j < len; ++j) Y.at(i, j) = X.at(i, start + j);
        return push(std::move(Y), needs({x}),
                    [x, start](Tape& t, const Tensor<T>& dY, Adjoints& adj) {
                        Tensor<T>& dX = t.adj_of(adj, x);
                        for (std::size_t i = 0; i < dY.rows(); ++i)
                            for (std::size_t j = 0; j < dY.cols(); ++j)
                                dX.at(i, start + j) += dY.at(i, j);
                    });
    }

    Var concat_cols(const std::vector<Var>& xs) {
        if (xs.empty()) throw UsageError("concat_cols of zero tensors");
        const std::size_t rows = value(xs[0]).rows();
        std::size_t cols = 0;
        for (Var v : xs) {
            if (value(v).rows() != rows) {
                throw NumericError("concat_cols row mismatch: " + value(xs[0]).shape_str() +
                                   " vs " + value(v).shape_str());
            }
            cols += value(v).cols();
        }
        Tensor<T> Y(rows, cols);
        std::size_t off = 0;
        for (Var v : xs) {
            const Tensor<T>& X = value(v);
            for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t j = 0; j < X.cols(); ++j) Y.at(i, off + j) = X.at(i, j);
            off += X.cols();
        }
        bool rg = false;
        for (Var v : xs) rg = rg || requires_grad(v);
        return push(std::move(Y), rg,
                    [xs](Tape& t, const Tensor<T>& dY, Adjoints& adj) {
                        std::size_t off = 0;
                        for (Var v : xs) {
                            const std::size_t c = t.value(v).cols();
                            if (t.requires_grad(v)) {
                                Tensor<T>& dX = t.adj_of(adj, v);
                                for (std::size_t i = 0; i < dY.rows(); ++i)
                                    for (std::size_t j = 0; j < c; ++j)
                                        dX.at(i, j) += dY.at(i, off + j);
                            }
                            off += c;
                        }
                    });
    }

    Var concat_rows(const std::vector<Var>& xs) {
        if (xs.empty()) throw UsageError("concat_rows of zero tensors");
        const std::size_t cols = value(xs[0]).cols();
        std::size_t rows = 0;
        for (Var v : xs) {
            if (value(v).cols() != cols) {
                throw NumericError("concat_rows col mismatch: " + value(xs[0]).shape_str() +
                                   " vs " + value(v).shape_str());
            }
            rows += value(v).rows();
        }
        Tensor<T> Y(rows, cols);
        std::size_t off = 0;
        for (Var v : xs) {
            const Tensor<T>& X = value(v);
            for (std::size_t i = 0; i < X.rows(); ++i)
                for (std::size_t j = 0; j < cols; ++j) Y.at(off + i, j) = X.at(i, j);
            off += X.rows();
        }
        bool rg = false;
        for (Var v : xs) rg = rg || requires_grad(v);
        return push(std::move(Y), rg,
                    [xs](Tape& t, const Tensor<T>& dY, Adjoints& adj) {
                        std::size_t off = 0;
                        for (Var v : xs) {
                            const std::size_t r = t.value(v).rows();
                            if (t.requires_grad(v)) {
                                Tensor<T>& dX = t.adj_of(adj, v);
                                for (std::size_t i = 0; i < r; ++i)
                                    for (std::size_t j = 0; j < dY.cols(); ++j)
                                        dX.at(i, j) += dY.at(off + i, j);
                            }
                            off += r;
                        }
                    });
    }

    Var sum_all(Var x) {
        const Tensor<T>& X = value(x);
        T acc = T(0);
        for (std::size_t i = 0; i < X.size(); ++i) acc += X[i];
        return push(Tensor<T>::scalar(acc), needs({x}),
                    [x](Tape& t, const Tensor<T>& dY, Adjoints& adj) {
                        Tensor<T>& dX = t.adj_of(adj, x);
                        for (std::size_t i = 0; i < dX.size(); ++i) dX[i] += dY[0];
                    });
    }

    Var mean_all(Var x) {
        const Tensor<T>& X = value(x);
        T acc = T(0);
        for (std::size_t i = 0; i < X.size(); ++i) acc += X[i];
        const T inv_n = T(1) / static_cast<T>(X.size());
        return push(Tensor<T>::scalar(acc * inv_n), needs({x}),
                    [x, inv_n](Tape& t, const Tensor<T>& dY, Adjoints& adj) {
                        Tensor<T>& dX = t.adj_of(adj, x);
                        for (std::size_t i = 0; i < dX.size(); ++i) dX[i] += dY[0] * inv_n;
                    });
    }

    // Mean negative log-likelihood over non-PAD target positions, with a
    // numerically stable fused log-softmax.
    Var cross_entropy(Var logits, const std::vector<int>& targets, int pad_id) {
        const Tensor<T>& L = value(logits);
        if (targets.size() != L.rows()) {
            throw UsageError("cross_entropy: " + std::to_string(targets.size()) +
                             " targets for " + std::to_string(L.rows()) + " logit rows");
        }
        const std::size_t V = L.cols();
        std::size_t n_valid = 0;
        T loss = T(0);
        for (std::size_t i = 0; i < targets.size(); ++i) {
            if (targets[i] == pad_id) continue;
            if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= V) {
                throw NumericError("cross_entropy target id " + std::to_string(targets[i]) +
                                   " out of range [0," + std::to_string(V) + ")");
            }
            ++n_valid;
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t j = 0; j < V; ++j) mx = std::max(mx, L.at(i, j));
            T denom = T(0);
            for (std::size_t j = 0; j < V; ++j) denom += std::exp(L.at(i, j) - mx);
            const T lse = std::log(denom) + mx;
            loss += lse - L.at(i, static_cast<std::size_t>(targets[i]));
        }
        if (n_valid == 0) {
            throw NumericError("cross_entropy: all target positions are PAD");
        }
        loss /= static_cast<T>(n_valid);
        return push(Tensor<T>::scalar(loss), needs({logits}),
                    [logits, targets, pad_id, n_valid](Tape& t, const Tensor<T>& dY, Adjoints& adj) {
                        const Tensor<T>& L = t.value(logits);
                        const std::size_t V = L.cols();
                        Tensor<T>& dL = t.adj_of(adj, logits);
                        const T scale = dY[0] / static_cast<T>(n_valid);
                        for (std::size_t i = 0; i < targets.size(); ++i) {
                            if (targets[i] == pad_id) continue;
                            T mx = -std::numeric_limits<T>::infinity();
                            for (std::size_t j = 0; j < V; ++j) mx = std::max(mx, L.at(i, j));
                            T denom = T(0);
                            for (std::size_t j = 0; j < V; ++j) denom += std::exp(L.at(i, j) - mx);
                            for (std::size_t j = 0; j < V; ++j) {
                                const T p = std::exp(L.at(i, j) - mx) / denom;
                                const T onehot =
                                    j == static_cast<std::size_t>(targets[i]) ? T(1) : T(0);
                                dL.at(i, j) += scale * (p - onehot);
                            }
                        }
                    });
    }

    // ---- backward ------------------------------------------------------

    // Accumulate d(loss)/d(node) into every requires_grad ancestor. Each call
    // runs an independent adjoint pass, so repeated calls add up until
    // zero_grad().
    void backward(Var loss) {
        if (!value(loss).is_scalar()) {
            throw UsageError("backward requires a scalar loss, got " + value(loss).shape_str());
        }
        Adjoints adj(loss + 1);
        adj[loss] = Tensor<T>::scalar(T(1));
        for (std::size_t i = loss + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (adj[i].size() == 0) continue;
            if (n.backward_fn) n.backward_fn(*this, adj[i], adj);
        }
        for (std::size_t i = 0; i <= loss; ++i) {
            Node& n = nodes_[i];
            if (!n.requires_grad || adj[i].size() == 0) continue;
            if (n.grad.size() == 0) n.grad = Tensor<T>(n.value.rows(), n.value.cols());
            for (std::size_t k = 0; k < adj[i].size(); ++k) n.grad[k] += adj[i][k];
        }
    }

private:
    using Adjoints = std::vector<Tensor<T>>;

    struct Node {
        Tensor<T> value;
        mutable Tensor<T> grad; // lazily allocated on first read
        bool requires_grad = false;
        std::function<void(Tape&, const Tensor<T>&, Adjoints&)> backward_fn;
    };

    Tensor<T>& adj_of(Adjoints& adj, Var v) {
        if (adj[v].size() == 0) adj[v] = Tensor<T>(value(v).rows(), value(v).cols());
        return adj[v];
    }

    bool needs(std::initializer_list<Var> vars) const {
        for (Var v : vars)
            if (nodes_[v].requires_grad) return true;
        return false;
    }

    Var push(Tensor<T> value, bool requires_grad,
             std::function<void(Tape&, const Tensor<T>&, Adjoints&)> fn) {
        Node n;
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        if (requires_grad) n.backward_fn = std::move(fn);
        nodes_.push_back(std::move(n));
        return nodes_.size() - 1;
    }

    static void matmul_into(const Tensor<T>& A, const Tensor<T>& B, Tensor<T>& C) {
        for (std::size_t i = 0; i < A.rows(); ++i)
            for (std::size_t k = 0; k < A.cols(); ++k) {
                const T av = A.at(i, k);
                if (av == T(0)) continue;
                for (std::size_t j = 0; j < B.cols(); ++j) C.at(i, j) += av * B.at(k, j);
            }
    }

    std::vector<Node> nodes_;
};

} // namespace rrg
