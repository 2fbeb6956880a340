#pragma once

#include <cmath>
#include <deque>
#include <functional>
#include <memory>
#include <vector>

#include <Eigen/Core>

#include "pfr/common.hpp"
#include "pfr/tensor.hpp"

namespace pfr::ad {

// Reverse-mode tape. A Graph owns every node of one forward pass; creation
// order is topological order, so backward() is a single reverse sweep.
// Ops only record a backward closure when some input requires a gradient,
// which makes inference passes tape-free except for the values themselves.

template <typename S>
struct Node {
    TensorT<S> value;
    TensorT<S> grad;  // allocated on first accumulation
    bool requires_grad = false;
    std::function<void()> backward;

    void ensure_grad() {
        if (grad.empty()) {
            grad = TensorT<S>(value.shape());
        }
    }
};

template <typename S>
using Ref = Node<S>*;

template <typename S>
using EMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using EMap = Eigen::Map<EMat<S>>;
template <typename S>
using ECMap = Eigen::Map<const EMat<S>>;

template <typename S>
class Graph {
public:
    Ref<S> leaf(TensorT<S> value, bool requires_grad = false) {
        nodes_.push_back(std::make_unique<Node<S>>());
        Node<S>* n = nodes_.back().get();
        n->value = std::move(value);
        n->requires_grad = requires_grad;
        return n;
    }

    Ref<S> make(TensorT<S> value, bool requires_grad, std::function<void()> backward) {
        nodes_.push_back(std::make_unique<Node<S>>());
        Node<S>* n = nodes_.back().get();
        n->value = std::move(value);
        n->requires_grad = requires_grad;
        if (requires_grad) {
            n->backward = std::move(backward);
        }
        return n;
    }

    // Root must be a scalar (shape [1]).
    void backward(Ref<S> root) {
        check(root->value.size() == 1, "backward: root must be scalar");
        root->ensure_grad();
        root->grad[0] = S(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            Node<S>* n = it->get();
            if (n->requires_grad && n->backward && !n->grad.empty()) {
                n->backward();
            }
        }
    }

    size_t size() const { return nodes_.size(); }

private:
    std::deque<std::unique_ptr<Node<S>>> nodes_;
};

namespace detail {
template <typename S>
void accum(Ref<S> n, const TensorT<S>& g) {
    n->ensure_grad();
    for (size_t i = 0; i < g.size(); ++i) {
        n->grad[i] += g[i];
    }
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename S>
Ref<S> add(Graph<S>& g, Ref<S> a, Ref<S> b) {
    check(a->value.same_shape(b->value), "add: shape mismatch");
    TensorT<S> out(a->value.shape());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] + b->value[i];
    const bool req = a->requires_grad || b->requires_grad;
    Ref<S> n = g.make(std::move(out), req, nullptr);
    if (req) {
        n->backward = [n, a, b] {
            if (a->requires_grad) detail::accum(a, n->grad);
            if (b->requires_grad) detail::accum(b, n->grad);
        };
    }
    return n;
}

template <typename S>
Ref<S> sub(Graph<S>& g, Ref<S> a, Ref<S> b) {
    check(a->value.same_shape(b->value), "sub: shape mismatch");
    TensorT<S> out(a->value.shape());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] - b->value[i];
    const bool req = a->requires_grad || b->requires_grad;
    Ref<S> n = g.make(std::move(out), req, nullptr);
    if (req) {
        n->backward = [n, a, b] {
            if (a->requires_grad) detail::accum(a, n->grad);
            if (b->requires_grad) {
                b->ensure_grad();
                for (size_t i = 0; i < n->grad.size(); ++i) b->grad[i] -= n->grad[i];
            }
        };
    }
    return n;
}

template <typename S>
Ref<S> mul(Graph<S>& g, Ref<S> a, Ref<S> b) {
    check(a->value.same_shape(b->value), "mul: shape mismatch");
    TensorT<S> out(a->value.shape());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] * b->value[i];
    const bool req = a->requires_grad || b->requires_grad;
    Ref<S> n = g.make(std::move(out), req, nullptr);
    if (req) {
        n->backward = [n, a, b] {
            if (a->requires_grad) {
                a->ensure_grad();
                for (size_t i = 0; i < n->grad.size(); ++i)
                    a->grad[i] += n->grad[i] * b->value[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (size_t i = 0; i < n->grad.size(); ++i)
                    b->grad[i] += n->grad[i] * a->value[i];
            }
        };
    }
    return n;
}

// k*x + c, constants.
template <typename S>
Ref<S> affine(Graph<S>& g, Ref<S> a, double k, double c) {
    TensorT<S> out(a->value.shape());
    const S ks = static_cast<S>(k);
    const S cs = static_cast<S>(c);
    for (size_t i = 0; i < out.size(); ++i) out[i] = ks * a->value[i] + cs;
    Ref<S> n = g.make(std::move(out), a->requires_grad, nullptr);
    if (n->requires_grad) {
        n->backward = [n, a, ks] {
            a->ensure_grad();
            for (size_t i = 0; i < n->grad.size(); ++i) a->grad[i] += ks * n->grad[i];
        };
    }
    return n;
}

template <typename S>
Ref<S> scale(Graph<S>& g, Ref<S> a, double k) {
    return affine(g, a, k, 0.0);
}

template <typename S>
Ref<S> silu(Graph<S>& g, Ref<S> a) {
    TensorT<S> out(a->value.shape());
    for (size_t i = 0; i < out.size(); ++i) {
        const S x = a->value[i];
        out[i] = x / (S(1) + std::exp(-x));
    }
    Ref<S> n = g.make(std::move(out), a->requires_grad, nullptr);
    if (n->requires_grad) {
        n->backward = [n, a] {
            a->ensure_grad();
            for (size_t i = 0; i < n->grad.size(); ++i) {
                const S x = a->value[i];
                const S sig = S(1) / (S(1) + std::exp(-x));
                a->grad[i] += n->grad[i] * sig * (S(1) + x * (S(1) - sig));
            }
        };
    }
    return n;
}

// ---------------------------------------------------------------------------
// Channel broadcast ops on [C,H,W]
// ---------------------------------------------------------------------------

template <typename S>
Ref<S> mul_channel(Graph<S>& g, Ref<S> x, Ref<S> gain) {
    check(x->value.rank() == 3 && gain->value.rank() == 1 &&
              gain->value.dim(0) == x->value.dim(0),
          "mul_channel: bad shapes");
    const int C = x->value.dim(0);
    const size_t hw = x->value.size() / static_cast<size_t>(C);
    TensorT<S> out(x->value.shape());
    for (int c = 0; c < C; ++c) {
        const S gc = gain->value[static_cast<size_t>(c)];
        for (size_t i = 0; i < hw; ++i) {
            out[c * hw + i] = x->value[c * hw + i] * gc;
        }
    }
    const bool req = x->requires_grad || gain->requires_grad;
    Ref<S> n = g.make(std::move(out), req, nullptr);
    if (req) {
        n->backward = [n, x, gain, C, hw] {
            if (x->requires_grad) {
                x->ensure_grad();
                for (int c = 0; c < C; ++c) {
                    const S gc = gain->value[static_cast<size_t>(c)];
                    for (size_t i = 0; i < hw; ++i) {
                        x->grad[c * hw + i] += n->grad[c * hw + i] * gc;
                    }
                }
            }
            if (gain->requires_grad) {
                gain->ensure_grad();
                for (int c = 0; c < C; ++c) {
                    S acc = S(0);
                    for (size_t i = 0; i < hw; ++i) {
                        acc += n->grad[c * hw + i] * x->value[c * hw + i];
                    }
                    gain->grad[static_cast<size_t>(c)] += acc;
                }
            }
        };
    }
    return n;
}

template <typename S>
Ref<S> add_channel(Graph<S>& g, Ref<S> x, Ref<S> bias) {
    check(x->value.rank() == 3 && bias->value.rank() == 1 &&
              bias->value.dim(0) == x->value.dim(0),
          "add_channel: bad shapes");
    const int C = x->value.dim(0);
    const size_t hw = x->value.size() / static_cast<size_t>(C);
    TensorT<S> out(x->value.shape());
    for (int c = 0; c < C; ++c) {
        const S bc = bias->value[static_cast<size_t>(c)];
        for (size_t i = 0; i < hw; ++i) {
            out[c * hw + i] = x->value[c * hw + i] + bc;
        }
    }
    const bool req = x->requires_grad || bias->requires_grad;
    Ref<S> n = g.make(std::move(out), req, nullptr);
    if (req) {
        n->backward = [n, x, bias, C, hw] {
            if (x->requires_grad) detail::accum(x, n->grad);
            if (bias->requires_grad) {
                bias->ensure_grad();
                for (int c = 0; c < C; ++c) {
                    S acc = S(0);
                    for (size_t i = 0; i < hw; ++i) acc += n->grad[c * hw + i];
                    bias->grad[static_cast<size_t>(c)] += acc;
                }
            }
        };
    }
    return n;
}

// ---------------------------------------------------------------------------
// Shape movement
// ---------------------------------------------------------------------------

// [C,H,W] -> [H*W, C] (token-per-pixel view for attention).
template <typename S>
Ref<S> chw_to_nc(Graph<S>& g, Ref<S> x) {
    check(x->value.rank() == 3, "chw_to_nc: need rank 3");
    const int C = x->value.dim(0);
    const int H = x->value.dim(1);
    const int W = x->value.dim(2);
    const size_t hw = static_cast<size_t>(H) * W;
    TensorT<S> out({H * W, C});
    for (int c = 0; c < C; ++c) {
        for (size_t i = 0; i < hw; ++i) {
            out[i * C + static_cast<size_t>(c)] = x->value[c * hw + i];
        }
    }
    Ref<S> n = g.make(std::move(out), x->requires_grad, nullptr);
    if (n->requires_grad) {
        n->backward = [n, x, C, hw] {
            x->ensure_grad();
            for (int c = 0; c < C; ++c) {
                for (size_t i = 0; i < hw; ++i) {
                    x->grad[c * hw + i] += n->grad[i * C + static_cast<size_t>(c)];
                }
            }
        };
    }
    return n;
}

template <typename S>
Ref<S> nc_to_chw(Graph<S>& g, Ref<S> x, int H, int W) {
    check(x->value.rank() == 2 && x->value.dim(0) == H * W, "nc_to_chw: bad shape");
    const int C = x->value.dim(1);
    const size_t hw = static_cast<size_t>(H) * W;
    TensorT<S> out({C, H, W});
    for (int c = 0; c < C; ++c) {
        for (size_t i = 0; i < hw; ++i) {
            out[c * hw + i] = x->value[i * static_cast<size_t>(C) + c];
        }
    }
    Ref<S> n = g.make(std::move(out), x->requires_grad, nullptr);
    if (n->requires_grad) {
        n->backward = [n, x, C, hw] {
            x->ensure_grad();
            for (int c = 0; c < C; ++c) {
                for (size_t i = 0; i < hw; ++i) {
                    x->grad[i * static_cast<size_t>(C) + c] += n->grad[c * hw + i];
                }
            }
        };
    }
    return n;
}

template <typename S>
Ref<S> concat_channels(Graph<S>& g, Ref<S> a, Ref<S> b) {
    check(a->value.rank() == 3 && b->value.rank() == 3 &&
              a->value.dim(1) == b->value.dim(1) && a->value.dim(2) == b->value.dim(2),
          "concat_channels: bad shapes");
    const int Ca = a->value.dim(0);
    const int Cb = b->value.dim(0);
    TensorT<S> out({Ca + Cb, a->value.dim(1), a->value.dim(2)});
    std::copy(a->value.data(), a->value.data() + a->value.size(), out.data());
    std::copy(b->value.data(), b->value.data() + b->value.size(),
              out.data() + a->value.size());
    const bool req = a->requires_grad || b->requires_grad;
    Ref<S> n = g.make(std::move(out), req, nullptr);
    if (req) {
        const size_t na = a->value.size();
        n->backward = [n, a, b, na] {
            if (a->requires_grad) {
                a->ensure_grad();
                for (size_t i = 0; i < na; ++i) a->grad[i] += n->grad[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (size_t i = 0; i < b->grad.size(); ++i)
                    b->grad[i] += n->grad[na + i];
            }
        };
    }
    return n;
}

// Channels [c0, c0+len) of a [C,H,W] tensor.
template <typename S>
Ref<S> slice_channels(Graph<S>& g, Ref<S> x, int c0, int len) {
    check(x->value.rank() == 3 && c0 >= 0 && c0 + len <= x->value.dim(0),
          "slice_channels: out of range");
    const size_t hw = static_cast<size_t>(x->value.dim(1)) * x->value.dim(2);
    TensorT<S> out({len, x->value.dim(1), x->value.dim(2)});
    std::copy(x->value.data() + c0 * hw, x->value.data() + (c0 + len) * hw, out.data());
    Ref<S> n = g.make(std::move(out), x->requires_grad, nullptr);
    if (n->requires_grad) {
        n->backward = [n, x, c0, hw] {
            x->ensure_grad();
            for (size_t i = 0; i < n->grad.size(); ++i) {
                x->grad[c0 * hw + i] += n->grad[i];
            }
        };
    }
    return n;
}

// Stack m vectors [d] into [m,d].
template <typename S>
Ref<S> stack_rows(Graph<S>& g, const std::vector<Ref<S>>& rows) {
    check(!rows.empty(), "stack_rows: empty");
    const int d = rows[0]->value.dim(0);
    bool req = false;
    for (auto r : rows) {
        check(r->value.rank() == 1 && r->value.dim(0) == d, "stack_rows: bad row");
        req = req || r->requires_grad;
    }
    TensorT<S> out({static_cast<int>(rows.size()), d});
    for (size_t i = 0; i < rows.size(); ++i) {
        std::copy(rows[i]->value.data(), rows[i]->value.data() + d,
                  out.data() + i * static_cast<size_t>(d));
    }
    Ref<S> n = g.make(std::move(out), req, nullptr);
    if (req) {
        auto rows_copy = rows;
        n->backward = [n, rows_copy, d] {
            for (size_t i = 0; i < rows_copy.size(); ++i) {
                if (!rows_copy[i]->requires_grad) continue;
                rows_copy[i]->ensure_grad();
                for (int j = 0; j < d; ++j) {
                    rows_copy[i]->grad[static_cast<size_t>(j)] +=
                        n->grad[i * static_cast<size_t>(d) + j];
                }
            }
        };
    }
    return n;
}

// Row i of a [V,d] table.
template <typename S>
Ref<S> row(Graph<S>& g, Ref<S> table, int i) {
    check(table->value.rank() == 2 && i >= 0 && i < table->value.dim(0),
          "row: index out of range");
    const int d = table->value.dim(1);
    TensorT<S> out({d});
    std::copy(table->value.data() + static_cast<size_t>(i) * d,
              table->value.data() + static_cast<size_t>(i + 1) * d, out.data());
    Ref<S> n = g.make(std::move(out), table->requires_grad, nullptr);
    if (n->requires_grad) {
        n->backward = [n, table, i, d] {
            table->ensure_grad();
            for (int j = 0; j < d; ++j) {
                table->grad[static_cast<size_t>(i) * d + j] += n->grad[static_cast<size_t>(j)];
            }
        };
    }
    return n;
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

template <typename S>
Ref<S> matmul(Graph<S>& g, Ref<S> a, Ref<S> b) {
    check(a->value.rank() == 2 && b->value.rank() == 2 &&
              a->value.dim(1) == b->value.dim(0),
          "matmul: shape mismatch");
    const int n_ = a->value.dim(0), k_ = a->value.dim(1), m_ = b->value.dim(1);
    TensorT<S> out({n_, m_});
    {
        ECMap<S> A(a->value.data(), n_, k_);
        ECMap<S> B(b->value.data(), k_, m_);
        EMap<S> C(out.data(), n_, m_);
        C.noalias() = A * B;
    }
    const bool req = a->requires_grad || b->requires_grad;
    Ref<S> n = g.make(std::move(out), req, nullptr);
    if (req) {
        n->backward = [n, a, b, n_, k_, m_] {
            ECMap<S> dY(n->grad.data(), n_, m_);
            if (a->requires_grad) {
                a->ensure_grad();
                EMap<S> dA(a->grad.data(), n_, k_);
                ECMap<S> B(b->value.data(), k_, m_);
                dA.noalias() += dY * B.transpose();
            }
            if (b->requires_grad) {
                b->ensure_grad();
                EMap<S> dB(b->grad.data(), k_, m_);
                ECMap<S> A(a->value.data(), n_, k_);
                dB.noalias() += A.transpose() * dY;
            }
        };
    }
    return n;
}

// a [n,k] x b [m,k]^T -> [n,m]
template <typename S>
Ref<S> matmul_nt(Graph<S>& g, Ref<S> a, Ref<S> b) {
    check(a->value.rank() == 2 && b->value.rank() == 2 &&
              a->value.dim(1) == b->value.dim(1),
          "matmul_nt: shape mismatch");
    const int n_ = a->value.dim(0), k_ = a->value.dim(1), m_ = b->value.dim(0);
    TensorT<S> out({n_, m_});
    {
        ECMap<S> A(a->value.data(), n_, k_);
        ECMap<S> B(b->value.data(), m_, k_);
        EMap<S> C(out.data(), n_, m_);
        C.noalias() = A * B.transpose();
    }
    const bool req = a->requires_grad || b->requires_grad;
    Ref<S> n = g.make(std::move(out), req, nullptr);
    if (req) {
        n->backward = [n, a, b, n_, k_, m_] {
            ECMap<S> dY(n->grad.data(), n_, m_);
            if (a->requires_grad) {
                a->ensure_grad();
                EMap<S> dA(a->grad.data(), n_, k_);
                ECMap<S> B(b->value.data(), m_, k_);
                dA.noalias() += dY * B;
            }
            if (b->requires_grad) {
                b->ensure_grad();
                EMap<S> dB(b->grad.data(), m_, k_);
                ECMap<S> A(a->value.data(), n_, k_);
                dB.noalias() += dY.transpose() * A;
            }
        };
    }
    return n;
}

// x [n,d] w [d,m] (+ optional bias [m]) -> [n,m]
template <typename S>
Ref<S> linear(Graph<S>& g, Ref<S> x, Ref<S> w, Ref<S> bias = nullptr) {
    Ref<S> y = matmul(g, x, w);
    if (!bias) return y;
    check(bias->value.rank() == 1 && bias->value.dim(0) == y->value.dim(1),
          "linear: bad bias");
    const int n_ = y->value.dim(0), m_ = y->value.dim(1);
    TensorT<S> out(y->value.shape());
    for (int i = 0; i < n_; ++i) {
        for (int j = 0; j < m_; ++j) {
            out[static_cast<size_t>(i) * m_ + j] =
                y->value[static_cast<size_t>(i) * m_ + j] + bias->value[static_cast<size_t>(j)];
        }
    }
    const bool req = y->requires_grad || bias->requires_grad;
    Ref<S> n = g.make(std::move(out), req, nullptr);
    if (req) {
        n->backward = [n, y, bias, n_, m_] {
            if (y->requires_grad) detail::accum(y, n->grad);
            if (bias->requires_grad) {
                bias->ensure_grad();
                for (int i = 0; i < n_; ++i) {
                    for (int j = 0; j < m_; ++j) {
                        bias->grad[static_cast<size_t>(j)] +=
                            n->grad[static_cast<size_t>(i) * m_ + j];
                    }
                }
            }
        };
    }
    return n;
}

template <typename S>
Ref<S> softmax_rows(Graph<S>& g, Ref<S> x) {
    check(x->value.rank() == 2, "softmax_rows: need rank 2");
    const int n_ = x->value.dim(0), m_ = x->value.dim(1);
    TensorT<S> out(x->value.shape());
    for (int i = 0; i < n_; ++i) {
        const S* xi = x->value.data() + static_cast<size_t>(i) * m_;
        S* oi = out.data() + static_cast<size_t>(i) * m_;
        S mx = xi[0];
        for (int j = 1; j < m_; ++j) mx = std::max(mx, xi[j]);
        S sum = S(0);
        for (int j = 0; j < m_; ++j) {
            oi[j] = std::exp(xi[j] - mx);
            sum += oi[j];
        }
        for (int j = 0; j < m_; ++j) oi[j] /= sum;
    }
    Ref<S> n = g.make(std::move(out), x->requires_grad, nullptr);
    if (n->requires_grad) {
        n->backward = [n, x, n_, m_] {
            x->ensure_grad();
            for (int i = 0; i < n_; ++i) {
                const S* yi = n->value.data() + static_cast<size_t>(i) * m_;
                const S* dyi = n->grad.data() + static_cast<size_t>(i) * m_;
                S dot = S(0);
                for (int j = 0; j < m_; ++j) dot += dyi[j] * yi[j];
                S* dxi = x->grad.data() + static_cast<size_t>(i) * m_;
                for (int j = 0; j < m_; ++j) {
                    dxi[j] += yi[j] * (dyi[j] - dot);
                }
            }
        };
    }
    return n;
}

// ---------------------------------------------------------------------------
// Convolution / pooling on [C,H,W]
// ---------------------------------------------------------------------------

namespace detail {

template <typename S>
void im2col(const TensorT<S>& x, int kh, int kw, int pad, TensorT<S>& col) {
    const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
    const int OH = H + 2 * pad - kh + 1;
    const int OW = W + 2 * pad - kw + 1;
    // col: [C*kh*kw, OH*OW]
    S* cp = col.data();
    for (int c = 0; c < C; ++c) {
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                for (int oy = 0; oy < OH; ++oy) {
                    const int iy = oy + ky - pad;
                    if (iy < 0 || iy >= H) {
                        for (int ox = 0; ox < OW; ++ox) *cp++ = S(0);
                        continue;
                    }
                    const S* xrow = x.data() + (static_cast<size_t>(c) * H + iy) * W;
                    for (int ox = 0; ox < OW; ++ox) {
                        const int ix = ox + kx - pad;
                        *cp++ = (ix < 0 || ix >= W) ? S(0) : xrow[ix];
                    }
                }
            }
        }
    }
}

template <typename S>
void col2im(const TensorT<S>& col, int C, int H, int W, int kh, int kw, int pad,
            TensorT<S>& dx) {
    const int OH = H + 2 * pad - kh + 1;
    const int OW = W + 2 * pad - kw + 1;
    const S* cp = col.data();
    for (int c = 0; c < C; ++c) {
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                for (int oy = 0; oy < OH; ++oy) {
                    const int iy = oy + ky - pad;
                    if (iy < 0 || iy >= H) {
                        cp += OW;
                        continue;
                    }
                    S* xrow = dx.data() + (static_cast<size_t>(c) * H + iy) * W;
                    for (int ox = 0; ox < OW; ++ox) {
                        const int ix = ox + kx - pad;
                        if (ix >= 0 && ix < W) xrow[ix] += cp[ox];
                    }
                    cp += OW;
                }
            }
        }
    }
}

}  // namespace detail

// Zero-padded stride-1 convolution. w is [Cout, Cin, kh, kw].
template <typename S>
Ref<S> conv2d(Graph<S>& g, Ref<S> x, Ref<S> w, Ref<S> bias, int pad) {
    check(x->value.rank() == 3 && w->value.rank() == 4 &&
              w->value.dim(1) == x->value.dim(0),
          "conv2d: shape mismatch");
    const int Cin = x->value.dim(0), H = x->value.dim(1), W = x->value.dim(2);
    const int Cout = w->value.dim(0), kh = w->value.dim(2), kw = w->value.dim(3);
    const int OH = H + 2 * pad - kh + 1;
    const int OW = W + 2 * pad - kw + 1;
    check(OH >= 1 && OW >= 1, "conv2d: output would be empty");

    const int K = Cin * kh * kw;
    auto col = std::make_shared<TensorT<S>>(std::vector<int>{K, OH * OW});
    detail::im2col(x->value, kh, kw, pad, *col);

    TensorT<S> out({Cout, OH, OW});
    {
        ECMap<S> Wm(w->value.data(), Cout, K);
        ECMap<S> Cm(col->data(), K, OH * OW);
        EMap<S> Y(out.data(), Cout, OH * OW);
        Y.noalias() = Wm * Cm;
    }
    if (bias) {
        check(bias->value.dim(0) == Cout, "conv2d: bad bias");
        const size_t hw = static_cast<size_t>(OH) * OW;
        for (int c = 0; c < Cout; ++c) {
            const S bc = bias->value[static_cast<size_t>(c)];
            for (size_t i = 0; i < hw; ++i) out[c * hw + i] += bc;
        }
    }

    const bool req =
        x->requires_grad || w->requires_grad || (bias && bias->requires_grad);
    Ref<S> n = g.make(std::move(out), req, nullptr);
    if (req) {
        n->backward = [n, x, w, bias, col, Cin, H, W, Cout, kh, kw, pad, K, OH, OW] {
            ECMap<S> dY(n->grad.data(), Cout, OH * OW);
            if (w->requires_grad) {
                w->ensure_grad();
                EMap<S> dW(w->grad.data(), Cout, K);
                ECMap<S> Cm(col->data(), K, OH * OW);
                dW.noalias() += dY * Cm.transpose();
            }
            if (bias && bias->requires_grad) {
                bias->ensure_grad();
                const size_t hw = static_cast<size_t>(OH) * OW;
                for (int c = 0; c < Cout; ++c) {
                    S acc = S(0);
                    for (size_t i = 0; i < hw; ++i) acc += n->grad[c * hw + i];
                    bias->grad[static_cast<size_t>(c)] += acc;
                }
            }
            if (x->requires_grad) {
                x->ensure_grad();
                TensorT<S> dcol({K, OH * OW});
                {
                    EMap<S> dC(dcol.data(), K, OH * OW);
                    ECMap<S> Wm(w->value.data(), Cout, K);
                    dC.noalias() = Wm.transpose() * dY;
                }
                detail::col2im(dcol, Cin, H, W, kh, kw, pad, x->grad);
            }
        };
    }
    return n;
}

template <typename S>
Ref<S> avgpool2(Graph<S>& g, Ref<S> x) {
    check(x->value.rank() == 3 && x->value.dim(1) % 2 == 0 && x->value.dim(2) % 2 == 0,
          "avgpool2: dims must be even");
    const int C = x->value.dim(0), H = x->value.dim(1), W = x->value.dim(2);
    const int OH = H / 2, OW = W / 2;
    TensorT<S> out({C, OH, OW});
    for (int c = 0; c < C; ++c) {
        for (int y = 0; y < OH; ++y) {
            for (int xw = 0; xw < OW; ++xw) {
                const S s = x->value.at(c, 2 * y, 2 * xw) + x->value.at(c, 2 * y, 2 * xw + 1) +
                            x->value.at(c, 2 * y + 1, 2 * xw) +
                            x->value.at(c, 2 * y + 1, 2 * xw + 1);
                out.at(c, y, xw) = s * S(0.25);
            }
        }
    }
    Ref<S> n = g.make(std::move(out), x->requires_grad, nullptr);
    if (n->requires_grad) {
        n->backward = [n, x, C, OH, OW] {
            x->ensure_grad();
            for (int c = 0; c < C; ++c) {
                for (int y = 0; y < OH; ++y) {
                    for (int xw = 0; xw < OW; ++xw) {
                        const S gq = n->grad.at(c, y, xw) * S(0.25);
                        x->grad.at(c, 2 * y, 2 * xw) += gq;
                        x->grad.at(c, 2 * y, 2 * xw + 1) += gq;
                        x->grad.at(c, 2 * y + 1, 2 * xw) += gq;
                        x->grad.at(c, 2 * y + 1, 2 * xw + 1) += gq;
                    }
                }
            }
        };
    }
    return n;
}

template <typename S>
Ref<S> upsample_nearest2(Graph<S>& g, Ref<S> x) {
    check(x->value.rank() == 3, "upsample_nearest2: need rank 3");
    const int C = x->value.dim(0), H = x->value.dim(1), W = x->value.dim(2);
    TensorT<S> out({C, 2 * H, 2 * W});
    for (int c = 0; c < C; ++c) {
        for (int y = 0; y < H; ++y) {
            for (int xw = 0; xw < W; ++xw) {
                const S v = x->value.at(c, y, xw);
                out.at(c, 2 * y, 2 * xw) = v;
                out.at(c, 2 * y, 2 * xw + 1) = v;
                out.at(c, 2 * y + 1, 2 * xw) = v;
                out.at(c, 2 * y + 1, 2 * xw + 1) = v;
            }
        }
    }
    Ref<S> n = g.make(std::move(out), x->requires_grad, nullptr);
    if (n->requires_grad) {
        n->backward = [n, x, C, H, W] {
            x->ensure_grad();
            for (int c = 0; c < C; ++c) {
                for (int y = 0; y < H; ++y) {
                    for (int xw = 0; xw < W; ++xw) {
                        x->grad.at(c, y, xw) +=
                            n->grad.at(c, 2 * y, 2 * xw) + n->grad.at(c, 2 * y, 2 * xw + 1) +
                            n->grad.at(c, 2 * y + 1, 2 * xw) +
                            n->grad.at(c, 2 * y + 1, 2 * xw + 1);
                    }
                }
            }
        };
    }
    return n;
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

template <typename S>
Ref<S> group_norm(Graph<S>& g, Ref<S> x, Ref<S> gamma, Ref<S> beta, int groups,
                  double eps = 1e-5) {
    check(x->value.rank() == 3, "group_norm: need rank 3");
    const int C = x->value.dim(0);
    check(C % groups == 0, "group_norm: channels not divisible by groups");
    const size_t hw = static_cast<size_t>(x->value.dim(1)) * x->value.dim(2);
    const int cg = C / groups;
    const size_t gn = static_cast<size_t>(cg) * hw;

    auto xhat = std::make_shared<TensorT<S>>(x->value.shape());
    auto inv_std = std::make_shared<std::vector<S>>(static_cast<size_t>(groups));

    TensorT<S> out(x->value.shape());
    for (int gi = 0; gi < groups; ++gi) {
        const size_t base = static_cast<size_t>(gi) * gn;
        S mean = S(0);
        for (size_t i = 0; i < gn; ++i) mean += x->value[base + i];
        mean /= static_cast<S>(gn);
        S var = S(0);
        for (size_t i = 0; i < gn; ++i) {
            const S d = x->value[base + i] - mean;
            var += d * d;
        }
        var /= static_cast<S>(gn);
        const S istd = S(1) / std::sqrt(var + static_cast<S>(eps));
        (*inv_std)[static_cast<size_t>(gi)] = istd;
        for (size_t i = 0; i < gn; ++i) {
            (*xhat)[base + i] = (x->value[base + i] - mean) * istd;
        }
    }
    for (int c = 0; c < C; ++c) {
        const S gc = gamma->value[static_cast<size_t>(c)];
        const S bc = beta->value[static_cast<size_t>(c)];
        for (size_t i = 0; i < hw; ++i) {
            out[c * hw + i] = (*xhat)[c * hw + i] * gc + bc;
        }
    }

    const bool req = x->requires_grad || gamma->requires_grad || beta->requires_grad;
    Ref<S> n = g.make(std::move(out), req, nullptr);
    if (req) {
        n->backward = [n, x, gamma, beta, xhat, inv_std, groups, C, cg, hw, gn] {
            if (gamma->requires_grad) {
                gamma->ensure_grad();
                for (int c = 0; c < C; ++c) {
                    S acc = S(0);
                    for (size_t i = 0; i < hw; ++i)
                        acc += n->grad[c * hw + i] * (*xhat)[c * hw + i];
                    gamma->grad[static_cast<size_t>(c)] += acc;
                }
            }
            if (beta->requires_grad) {
                beta->ensure_grad();
                for (int c = 0; c < C; ++c) {
                    S acc = S(0);
                    for (size_t i = 0; i < hw; ++i) acc += n->grad[c * hw + i];
                    beta->grad[static_cast<size_t>(c)] += acc;
                }
            }
            if (x->requires_grad) {
                x->ensure_grad();
                for (int gi = 0; gi < groups; ++gi) {
                    const size_t base = static_cast<size_t>(gi) * gn;
                    // dxhat = dy * gamma_c
                    S mean_dxhat = S(0);
                    S mean_dxhat_xhat = S(0);
                    for (int cc = 0; cc < cg; ++cc) {
                        const int c = gi * cg + cc;
                        const S gc = gamma->value[static_cast<size_t>(c)];
                        for (size_t i = 0; i < hw; ++i) {
                            const size_t idx = c * hw + i;
                            const S dxh = n->grad[idx] * gc;
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * (*xhat)[idx];
                        }
                    }
                    mean_dxhat /= static_cast<S>(gn);
                    mean_dxhat_xhat /= static_cast<S>(gn);
                    const S istd = (*inv_std)[static_cast<size_t>(gi)];
                    for (int cc = 0; cc < cg; ++cc) {
                        const int c = gi * cg + cc;
                        const S gc = gamma->value[static_cast<size_t>(c)];
                        for (size_t i = 0; i < hw; ++i) {
                            const size_t idx = c * hw + i;
                            const S dxh = n->grad[idx] * gc;
                            x->grad[idx] += istd * (dxh - mean_dxhat -
                                                    (*xhat)[idx] * mean_dxhat_xhat);
                        }
                    }
                    (void)base;
                }
            }
        };
    }
    return n;
}

// ---------------------------------------------------------------------------
// Reductions / scalars
// ---------------------------------------------------------------------------

template <typename S>
Ref<S> sum_sq(Graph<S>& g, Ref<S> x) {
    S acc = S(0);
    for (size_t i = 0; i < x->value.size(); ++i) acc += x->value[i] * x->value[i];
    TensorT<S> out({1});
    out[0] = acc;
    Ref<S> n = g.make(std::move(out), x->requires_grad, nullptr);
    if (n->requires_grad) {
        n->backward = [n, x] {
            x->ensure_grad();
            const S d = n->grad[0];
            for (size_t i = 0; i < x->value.size(); ++i) {
                x->grad[i] += S(2) * d * x->value[i];
            }
        };
    }
    return n;
}

template <typename S>
Ref<S> sqrt_scalar(Graph<S>& g, Ref<S> x, double eps = 1e-20) {
    check(x->value.size() == 1, "sqrt_scalar: need scalar");
    TensorT<S> out({1});
    out[0] = std::sqrt(x->value[0] + static_cast<S>(eps));
    Ref<S> n = g.make(std::move(out), x->requires_grad, nullptr);
    if (n->requires_grad) {
        n->backward = [n, x] {
            x->ensure_grad();
            x->grad[0] += n->grad[0] / (S(2) * n->value[0]);
        };
    }
    return n;
}

template <typename S>
Ref<S> add_scalars(Graph<S>& g, const std::vector<std::pair<Ref<S>, double>>& terms) {
    TensorT<S> out({1});
    bool req = false;
    for (const auto& [t, w] : terms) {
        check(t->value.size() == 1, "add_scalars: need scalars");
        out[0] += static_cast<S>(w) * t->value[0];
        req = req || t->requires_grad;
    }
    Ref<S> n = g.make(std::move(out), req, nullptr);
    if (req) {
        auto terms_copy = terms;
        n->backward = [n, terms_copy] {
            for (const auto& [t, w] : terms_copy) {
                if (!t->requires_grad) continue;
                t->ensure_grad();
                t->grad[0] += static_cast<S>(w) * n->grad[0];
            }
        };
    }
    return n;
}

// Max over all elements; subgradient routes to the first argmax.
template <typename S>
Ref<S> max_all(Graph<S>& g, Ref<S> x) {
    check(x->value.size() > 0, "max_all: empty");
    size_t arg = 0;
    S best = x->value[0];
    for (size_t i = 1; i < x->value.size(); ++i) {
        if (x->value[i] > best) {
            best = x->value[i];
            arg = i;
        }
    }
    TensorT<S> out({1});
    out[0] = best;
    Ref<S> n = g.make(std::move(out), x->requires_grad, nullptr);
    if (n->requires_grad) {
        n->backward = [n, x, arg] {
            x->ensure_grad();
            x->grad[arg] += n->grad[0];
        };
    }
    return n;
}

// y = x / s with scalar node s.
template <typename S>
Ref<S> div_by_scalar(Graph<S>& g, Ref<S> x, Ref<S> s) {
    check(s->value.size() == 1, "div_by_scalar: scalar divisor required");
    const S sv = s->value[0];
    TensorT<S> out(x->value.shape());
    for (size_t i = 0; i < out.size(); ++i) out[i] = x->value[i] / sv;
    const bool req = x->requires_grad || s->requires_grad;
    Ref<S> n = g.make(std::move(out), req, nullptr);
    if (req) {
        n->backward = [n, x, s, sv] {
            if (x->requires_grad) {
                x->ensure_grad();
                for (size_t i = 0; i < n->grad.size(); ++i) {
                    x->grad[i] += n->grad[i] / sv;
                }
            }
            if (s->requires_grad) {
                s->ensure_grad();
                S acc = S(0);
                for (size_t i = 0; i < n->grad.size(); ++i) {
                    acc += n->grad[i] * x->value[i];
                }
                s->grad[0] -= acc / (sv * sv);
            }
        };
    }
    return n;
}

}  // namespace pfr::ad
