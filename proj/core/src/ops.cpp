#include "wsgan/ops.hpp"

#include <Eigen/Dense>
#include <cmath>

namespace wsgan {

namespace {

using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ColMat = Eigen::MatrixXd;
using MapRM = Eigen::Map<RowMat>;
using CMapRM = Eigen::Map<const RowMat>;

bool needs(Node& self, size_t i) { return self.parents[i]->requires_grad; }

// p.grad += scale * g
void add_grad(Node& self, size_t i, const Tensor& g, Scalar scale = 1.0) {
    Node& p = *self.parents[i];
    if (!p.requires_grad) return;
    Tensor& dst = p.ensure_grad();
    WSGAN_CHECK(dst.size() == g.size(), "gradient numel mismatch");
    Scalar* d = dst.data();
    const Scalar* s = g.data();
    if (scale == 1.0) {
        for (int64_t k = 0; k < g.size(); ++k) d[k] += s[k];
    } else {
        for (int64_t k = 0; k < g.size(); ++k) d[k] += scale * s[k];
    }
}

// p.grad += g ∘ v
void add_grad_hadamard(Node& self, size_t i, const Tensor& g, const Tensor& v) {
    Node& p = *self.parents[i];
    if (!p.requires_grad) return;
    Tensor& dst = p.ensure_grad();
    Scalar* d = dst.data();
    const Scalar* gs = g.data();
    const Scalar* vs = v.data();
    for (int64_t k = 0; k < g.size(); ++k) d[k] += gs[k] * vs[k];
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
    WSGAN_CHECK(a.val().same_shape(b.val()), std::string(op) + ": shape mismatch " +
                                                 shape_str(a.shape()) + " vs " +
                                                 shape_str(b.shape()));
}

std::pair<int, int> rows_cols(const Var& x, const char* op) {
    WSGAN_CHECK(x.val().rank() == 2, std::string(op) + ": rank-2 tensor expected, got " +
                                         shape_str(x.shape()));
    return {x.val().dim(0), x.val().dim(1)};
}

}  // namespace

// ---------------------------------------------------------------- elementwise

Var add(const Var& a, const Var& b) {
    check_same_shape(a, b, "add");
    Tensor out(a.shape());
    const Scalar *pa = a.val().data(), *pb = b.val().data();
    for (int64_t i = 0; i < out.size(); ++i) out[i] = pa[i] + pb[i];
    return make_op(std::move(out), {a, b}, [](Node& n) {
        add_grad(n, 0, n.grad);
        add_grad(n, 1, n.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    check_same_shape(a, b, "sub");
    Tensor out(a.shape());
    const Scalar *pa = a.val().data(), *pb = b.val().data();
    for (int64_t i = 0; i < out.size(); ++i) out[i] = pa[i] - pb[i];
    return make_op(std::move(out), {a, b}, [](Node& n) {
        add_grad(n, 0, n.grad);
        add_grad(n, 1, n.grad, -1.0);
    });
}

Var mul(const Var& a, const Var& b) {
    check_same_shape(a, b, "mul");
    Tensor out(a.shape());
    const Scalar *pa = a.val().data(), *pb = b.val().data();
    for (int64_t i = 0; i < out.size(); ++i) out[i] = pa[i] * pb[i];
    Tensor av = a.val(), bv = b.val();
    return make_op(std::move(out), {a, b}, [av, bv](Node& n) {
        add_grad_hadamard(n, 0, n.grad, bv);
        add_grad_hadamard(n, 1, n.grad, av);
    });
}

Var add_scalar(const Var& a, Scalar c) {
    Tensor out(a.shape());
    const Scalar* pa = a.val().data();
    for (int64_t i = 0; i < out.size(); ++i) out[i] = pa[i] + c;
    return make_op(std::move(out), {a}, [](Node& n) { add_grad(n, 0, n.grad); });
}

Var mul_scalar(const Var& a, Scalar c) {
    Tensor out(a.shape());
    const Scalar* pa = a.val().data();
    for (int64_t i = 0; i < out.size(); ++i) out[i] = pa[i] * c;
    return make_op(std::move(out), {a}, [c](Node& n) { add_grad(n, 0, n.grad, c); });
}

Var neg(const Var& a) { return mul_scalar(a, -1.0); }

Var relu(const Var& a) {
    Tensor out(a.shape());
    const Scalar* pa = a.val().data();
    for (int64_t i = 0; i < out.size(); ++i) out[i] = pa[i] > 0.0 ? pa[i] : 0.0;
    Tensor av = a.val();
    return make_op(std::move(out), {a}, [av](Node& n) {
        if (!needs(n, 0)) return;
        Tensor g(n.grad.shape());
        for (int64_t i = 0; i < g.size(); ++i) g[i] = av[i] > 0.0 ? n.grad[i] : 0.0;
        n.parents[0]->accumulate(g);
    });
}

Var leaky_relu(const Var& a, Scalar slope) {
    Tensor out(a.shape());
    const Scalar* pa = a.val().data();
    for (int64_t i = 0; i < out.size(); ++i) out[i] = pa[i] > 0.0 ? pa[i] : slope * pa[i];
    Tensor av = a.val();
    return make_op(std::move(out), {a}, [av, slope](Node& n) {
        if (!needs(n, 0)) return;
        Tensor g(n.grad.shape());
        for (int64_t i = 0; i < g.size(); ++i) g[i] = (av[i] > 0.0 ? 1.0 : slope) * n.grad[i];
        n.parents[0]->accumulate(g);
    });
}

Var tanh_op(const Var& a) {
    Tensor out(a.shape());
    const Scalar* pa = a.val().data();
    for (int64_t i = 0; i < out.size(); ++i) out[i] = std::tanh(pa[i]);
    Tensor y = out;
    return make_op(std::move(out), {a}, [y](Node& n) {
        if (!needs(n, 0)) return;
        Tensor g(n.grad.shape());
        for (int64_t i = 0; i < g.size(); ++i) g[i] = n.grad[i] * (1.0 - y[i] * y[i]);
        n.parents[0]->accumulate(g);
    });
}

Var sigmoid(const Var& a) {
    Tensor out(a.shape());
    const Scalar* pa = a.val().data();
    for (int64_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-pa[i]));
    Tensor y = out;
    return make_op(std::move(out), {a}, [y](Node& n) {
        if (!needs(n, 0)) return;
        Tensor g(n.grad.shape());
        for (int64_t i = 0; i < g.size(); ++i) g[i] = n.grad[i] * y[i] * (1.0 - y[i]);
        n.parents[0]->accumulate(g);
    });
}

Var exp_op(const Var& a) {
    Tensor out(a.shape());
    const Scalar* pa = a.val().data();
    for (int64_t i = 0; i < out.size(); ++i) out[i] = std::exp(pa[i]);
    Tensor y = out;
    return make_op(std::move(out), {a},
                   [y](Node& n) { add_grad_hadamard(n, 0, n.grad, y); });
}

Var log_clamped(const Var& a, Scalar floor) {
    Tensor out(a.shape());
    const Scalar* pa = a.val().data();
    for (int64_t i = 0; i < out.size(); ++i) out[i] = std::log(pa[i] > floor ? pa[i] : floor);
    Tensor av = a.val();
    return make_op(std::move(out), {a}, [av, floor](Node& n) {
        if (!needs(n, 0)) return;
        Tensor g(n.grad.shape());
        for (int64_t i = 0; i < g.size(); ++i) g[i] = av[i] > floor ? n.grad[i] / av[i] : 0.0;
        n.parents[0]->accumulate(g);
    });
}

Var pow_scalar(const Var& a, Scalar e) {
    Tensor out(a.shape());
    const Scalar* pa = a.val().data();
    for (int64_t i = 0; i < out.size(); ++i) out[i] = std::pow(pa[i], e);
    Tensor av = a.val();
    return make_op(std::move(out), {a}, [av, e](Node& n) {
        if (!needs(n, 0)) return;
        Tensor g(n.grad.shape());
        for (int64_t i = 0; i < g.size(); ++i) g[i] = n.grad[i] * e * std::pow(av[i], e - 1.0);
        n.parents[0]->accumulate(g);
    });
}

Var sqrt_op(const Var& a) {
    Tensor out(a.shape());
    const Scalar* pa = a.val().data();
    for (int64_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(pa[i]);
    Tensor y = out;
    return make_op(std::move(out), {a}, [y](Node& n) {
        if (!needs(n, 0)) return;
        Tensor g(n.grad.shape());
        for (int64_t i = 0; i < g.size(); ++i) g[i] = n.grad[i] * 0.5 / y[i];
        n.parents[0]->accumulate(g);
    });
}

Var square(const Var& a) {
    Tensor out(a.shape());
    const Scalar* pa = a.val().data();
    for (int64_t i = 0; i < out.size(); ++i) out[i] = pa[i] * pa[i];
    Tensor av = a.val();
    return make_op(std::move(out), {a}, [av](Node& n) {
        if (!needs(n, 0)) return;
        Tensor g(n.grad.shape());
        for (int64_t i = 0; i < g.size(); ++i) g[i] = 2.0 * n.grad[i] * av[i];
        n.parents[0]->accumulate(g);
    });
}

Var clamp_min(const Var& a, Scalar c) {
    Tensor out(a.shape());
    const Scalar* pa = a.val().data();
    for (int64_t i = 0; i < out.size(); ++i) out[i] = pa[i] > c ? pa[i] : c;
    Tensor av = a.val();
    return make_op(std::move(out), {a}, [av, c](Node& n) {
        if (!needs(n, 0)) return;
        Tensor g(n.grad.shape());
        for (int64_t i = 0; i < g.size(); ++i) g[i] = av[i] > c ? n.grad[i] : 0.0;
        n.parents[0]->accumulate(g);
    });
}

// ----------------------------------------------------------- scalar-node ops

Var mul_scalarvar(const Var& a, const Var& s) {
    WSGAN_CHECK(s.size() == 1, "mul_scalarvar: scalar node expected");
    Tensor out(a.shape());
    const Scalar* pa = a.val().data();
    const Scalar sv = s.val()[0];
    for (int64_t i = 0; i < out.size(); ++i) out[i] = pa[i] * sv;
    Tensor av = a.val();
    return make_op(std::move(out), {a, s}, [av, sv](Node& n) {
        add_grad(n, 0, n.grad, sv);
        if (needs(n, 1)) {
            Scalar acc = 0.0;
            for (int64_t i = 0; i < n.grad.size(); ++i) acc += n.grad[i] * av[i];
            Tensor g({1}, acc);
            n.parents[1]->accumulate(g);
        }
    });
}

Var reciprocal(const Var& s) {
    Tensor out(s.shape());
    const Scalar* ps = s.val().data();
    for (int64_t i = 0; i < out.size(); ++i) out[i] = 1.0 / ps[i];
    Tensor y = out;
    return make_op(std::move(out), {s}, [y](Node& n) {
        if (!needs(n, 0)) return;
        Tensor g(n.grad.shape());
        for (int64_t i = 0; i < g.size(); ++i) g[i] = -n.grad[i] * y[i] * y[i];
        n.parents[0]->accumulate(g);
    });
}

// ----------------------------------------------------- column-vector broadcast

Var rowsum(const Var& x) {
    auto [r, c] = rows_cols(x, "rowsum");
    Tensor out({r, 1});
    const Scalar* px = x.val().data();
    for (int i = 0; i < r; ++i) {
        Scalar s = 0.0;
        for (int j = 0; j < c; ++j) s += px[static_cast<int64_t>(i) * c + j];
        out[i] = s;
    }
    return make_op(std::move(out), {x}, [r, c](Node& n) {
        if (!needs(n, 0)) return;
        Tensor g({r, c});
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) g[static_cast<int64_t>(i) * c + j] = n.grad[i];
        n.parents[0]->accumulate(g);
    });
}

Var div_colvec(const Var& x, const Var& v) {
    auto [r, c] = rows_cols(x, "div_colvec");
    WSGAN_CHECK(v.val().rank() == 2 && v.val().dim(0) == r && v.val().dim(1) == 1,
                "div_colvec: [R,1] vector expected");
    Tensor out({r, c});
    const Scalar* px = x.val().data();
    const Scalar* pv = v.val().data();
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
            out[static_cast<int64_t>(i) * c + j] = px[static_cast<int64_t>(i) * c + j] / pv[i];
    Tensor xv = x.val(), vv = v.val();
    return make_op(std::move(out), {x, v}, [xv, vv, r, c](Node& n) {
        if (needs(n, 0)) {
            Tensor g({r, c});
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j) {
                    int64_t k = static_cast<int64_t>(i) * c + j;
                    g[k] = n.grad[k] / vv[i];
                }
            n.parents[0]->accumulate(g);
        }
        if (needs(n, 1)) {
            Tensor g({r, 1});
            for (int i = 0; i < r; ++i) {
                Scalar s = 0.0;
                for (int j = 0; j < c; ++j) {
                    int64_t k = static_cast<int64_t>(i) * c + j;
                    s += n.grad[k] * xv[k];
                }
                g[i] = -s / (vv[i] * vv[i]);
            }
            n.parents[1]->accumulate(g);
        }
    });
}

Var mul_colvec(const Var& x, const Var& v) {
    auto [r, c] = rows_cols(x, "mul_colvec");
    WSGAN_CHECK(v.val().rank() == 2 && v.val().dim(0) == r && v.val().dim(1) == 1,
                "mul_colvec: [R,1] vector expected");
    Tensor out({r, c});
    const Scalar* px = x.val().data();
    const Scalar* pv = v.val().data();
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
            out[static_cast<int64_t>(i) * c + j] = px[static_cast<int64_t>(i) * c + j] * pv[i];
    Tensor xv = x.val(), vv = v.val();
    return make_op(std::move(out), {x, v}, [xv, vv, r, c](Node& n) {
        if (needs(n, 0)) {
            Tensor g({r, c});
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j) {
                    int64_t k = static_cast<int64_t>(i) * c + j;
                    g[k] = n.grad[k] * vv[i];
                }
            n.parents[0]->accumulate(g);
        }
        if (needs(n, 1)) {
            Tensor g({r, 1});
            for (int i = 0; i < r; ++i) {
                Scalar s = 0.0;
                for (int j = 0; j < c; ++j) {
                    int64_t k = static_cast<int64_t>(i) * c + j;
                    s += n.grad[k] * xv[k];
                }
                g[i] = s;
            }
            n.parents[1]->accumulate(g);
        }
    });
}

// ------------------------------------------------------------------ reductions

Var sum_all(const Var& a) {
    Scalar s = 0.0;
    const Scalar* pa = a.val().data();
    for (int64_t i = 0; i < a.size(); ++i) s += pa[i];
    Shape pshape = a.shape();
    return make_op(Tensor::scalar(s), {a}, [pshape](Node& n) {
        if (!needs(n, 0)) return;
        Tensor g(pshape, n.grad[0]);
        n.parents[0]->accumulate(g);
    });
}

Var mean_all(const Var& a) {
    WSGAN_CHECK(a.size() > 0, "mean_all of empty tensor");
    return mul_scalar(sum_all(a), 1.0 / static_cast<Scalar>(a.size()));
}

Var mse(const Var& a, const Var& b) {
    check_same_shape(a, b, "mse");
    return mean_all(square(sub(a, b)));
}

// ---------------------------------------------------------------------- matrix

Var matmul(const Var& a, const Var& b) {
    auto [m, k] = rows_cols(a, "matmul");
    auto [k2, n2] = rows_cols(b, "matmul");
    WSGAN_CHECK(k == k2, "matmul: inner dimension mismatch " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    Tensor out({m, n2});
    CMapRM A(a.val().data(), m, k), B(b.val().data(), k, n2);
    MapRM(out.data(), m, n2).noalias() = A * B;
    Tensor av = a.val(), bv = b.val();
    int n = n2;
    return make_op(std::move(out), {a, b}, [av, bv, m, k, n](Node& nd) {
        CMapRM G(nd.grad.data(), m, n);
        if (needs(nd, 0)) {
            Tensor ga({m, k});
            CMapRM B(bv.data(), k, n);
            MapRM(ga.data(), m, k).noalias() = G * B.transpose();
            nd.parents[0]->accumulate(ga);
        }
        if (needs(nd, 1)) {
            Tensor gb({k, n});
            CMapRM A(av.data(), m, k);
            MapRM(gb.data(), k, n).noalias() = A.transpose() * G;
            nd.parents[1]->accumulate(gb);
        }
    });
}

Var linear(const Var& x, const Var& w, const Var& b) {
    auto [bsz, in] = rows_cols(x, "linear");
    auto [out_f, in2] = rows_cols(w, "linear");
    WSGAN_CHECK(in == in2, "linear: input width " + std::to_string(in) +
                               " does not match weight " + shape_str(w.shape()));
    bool has_bias = b.defined();
    if (has_bias)
        WSGAN_CHECK(b.val().rank() == 1 && b.val().dim(0) == out_f, "linear: bad bias shape");

    Tensor out({bsz, out_f});
    CMapRM X(x.val().data(), bsz, in), W(w.val().data(), out_f, in);
    MapRM Y(out.data(), bsz, out_f);
    Y.noalias() = X * W.transpose();
    if (has_bias) {
        const Scalar* pb = b.val().data();
        for (int i = 0; i < bsz; ++i)
            for (int j = 0; j < out_f; ++j) out[static_cast<int64_t>(i) * out_f + j] += pb[j];
    }
    Tensor xv = x.val(), wv = w.val();
    std::vector<Var> parents = has_bias ? std::vector<Var>{x, w, b} : std::vector<Var>{x, w};
    return make_op(std::move(out), std::move(parents),
                   [xv, wv, bsz = bsz, in = in, out_f = out_f, has_bias](Node& n) {
                       CMapRM G(n.grad.data(), bsz, out_f);
                       if (needs(n, 0)) {
                           Tensor gx({bsz, in});
                           CMapRM W(wv.data(), out_f, in);
                           MapRM(gx.data(), bsz, in).noalias() = G * W;
                           n.parents[0]->accumulate(gx);
                       }
                       if (needs(n, 1)) {
                           Tensor gw({out_f, in});
                           CMapRM X(xv.data(), bsz, in);
                           MapRM(gw.data(), out_f, in).noalias() = G.transpose() * X;
                           n.parents[1]->accumulate(gw);
                       }
                       if (has_bias && needs(n, 2)) {
                           Tensor gb({out_f});
                           for (int j = 0; j < out_f; ++j) gb[j] = G.col(j).sum();
                           n.parents[2]->accumulate(gb);
                       }
                   });
}

Var transpose(const Var& x) {
    auto [m, n] = rows_cols(x, "transpose");
    Tensor out({n, m});
    const Scalar* px = x.val().data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            out[static_cast<int64_t>(j) * m + i] = px[static_cast<int64_t>(i) * n + j];
    return make_op(std::move(out), {x}, [m, n](Node& nd) {
        if (!needs(nd, 0)) return;
        Tensor g({m, n});
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
                g[static_cast<int64_t>(i) * n + j] = nd.grad[static_cast<int64_t>(j) * m + i];
        nd.parents[0]->accumulate(g);
    });
}

Var bmm(const Var& a, const Var& b) {
    WSGAN_CHECK(a.val().rank() == 3 && b.val().rank() == 3, "bmm: rank-3 tensors expected");
    int B = a.val().dim(0), m = a.val().dim(1), k = a.val().dim(2);
    WSGAN_CHECK(b.val().dim(0) == B && b.val().dim(1) == k,
                "bmm: shape mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    int n = b.val().dim(2);
    Tensor out({B, m, n});
    for (int i = 0; i < B; ++i) {
        CMapRM A(a.val().data() + static_cast<int64_t>(i) * m * k, m, k);
        CMapRM Bm(b.val().data() + static_cast<int64_t>(i) * k * n, k, n);
        MapRM(out.data() + static_cast<int64_t>(i) * m * n, m, n).noalias() = A * Bm;
    }
    Tensor av = a.val(), bv = b.val();
    return make_op(std::move(out), {a, b}, [av, bv, B, m, k, n](Node& nd) {
        bool na = needs(nd, 0), nb = needs(nd, 1);
        Tensor ga = na ? Tensor({B, m, k}) : Tensor();
        Tensor gb = nb ? Tensor({B, k, n}) : Tensor();
        for (int i = 0; i < B; ++i) {
            CMapRM G(nd.grad.data() + static_cast<int64_t>(i) * m * n, m, n);
            if (na) {
                CMapRM Bm(bv.data() + static_cast<int64_t>(i) * k * n, k, n);
                MapRM(ga.data() + static_cast<int64_t>(i) * m * k, m, k).noalias() =
                    G * Bm.transpose();
            }
            if (nb) {
                CMapRM A(av.data() + static_cast<int64_t>(i) * m * k, m, k);
                MapRM(gb.data() + static_cast<int64_t>(i) * k * n, k, n).noalias() =
                    A.transpose() * G;
            }
        }
        if (na) nd.parents[0]->accumulate(ga);
        if (nb) nd.parents[1]->accumulate(gb);
    });
}

Var transpose12(const Var& x) {
    WSGAN_CHECK(x.val().rank() == 3, "transpose12: rank-3 tensor expected");
    int B = x.val().dim(0), m = x.val().dim(1), n = x.val().dim(2);
    Tensor out({B, n, m});
    const Scalar* px = x.val().data();
    for (int b = 0; b < B; ++b)
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
                out[(static_cast<int64_t>(b) * n + j) * m + i] =
                    px[(static_cast<int64_t>(b) * m + i) * n + j];
    return make_op(std::move(out), {x}, [B, m, n](Node& nd) {
        if (!needs(nd, 0)) return;
        Tensor g({B, m, n});
        for (int b = 0; b < B; ++b)
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    g[(static_cast<int64_t>(b) * m + i) * n + j] =
                        nd.grad[(static_cast<int64_t>(b) * n + j) * m + i];
        nd.parents[0]->accumulate(g);
    });
}

// --------------------------------------------------------------------- softmax

Var softmax_rows(const Var& x) {
    auto [r, c] = rows_cols(x, "softmax_rows");
    WSGAN_CHECK(c > 0, "softmax_rows: empty rows");
    Tensor out({r, c});
    const Scalar* px = x.val().data();
    for (int i = 0; i < r; ++i) {
        const Scalar* row = px + static_cast<int64_t>(i) * c;
        Scalar m = row[0];
        for (int j = 1; j < c; ++j) m = std::max(m, row[j]);
        Scalar s = 0.0;
        for (int j = 0; j < c; ++j) {
            Scalar e = std::exp(row[j] - m);
            out[static_cast<int64_t>(i) * c + j] = e;
            s += e;
        }
        for (int j = 0; j < c; ++j) out[static_cast<int64_t>(i) * c + j] /= s;
    }
    Tensor y = out;
    return make_op(std::move(out), {x}, [y, r, c](Node& nd) {
        if (!needs(nd, 0)) return;
        Tensor g({r, c});
        for (int i = 0; i < r; ++i) {
            Scalar dot = 0.0;
            for (int j = 0; j < c; ++j) {
                int64_t k = static_cast<int64_t>(i) * c + j;
                dot += nd.grad[k] * y[k];
            }
            for (int j = 0; j < c; ++j) {
                int64_t k = static_cast<int64_t>(i) * c + j;
                g[k] = y[k] * (nd.grad[k] - dot);
            }
        }
        nd.parents[0]->accumulate(g);
    });
}

Var logsumexp_rows(const Var& x) {
    auto [r, c] = rows_cols(x, "logsumexp_rows");
    WSGAN_CHECK(c > 0, "logsumexp_rows: empty rows");
    Tensor out({r, 1});
    const Scalar* px = x.val().data();
    for (int i = 0; i < r; ++i) {
        const Scalar* row = px + static_cast<int64_t>(i) * c;
        Scalar m = row[0];
        for (int j = 1; j < c; ++j) m = std::max(m, row[j]);
        Scalar s = 0.0;
        for (int j = 0; j < c; ++j) s += std::exp(row[j] - m);
        out[i] = m + std::log(s);
    }
    Tensor xv = x.val(), y = out;
    return make_op(std::move(out), {x}, [xv, y, r, c](Node& nd) {
        if (!needs(nd, 0)) return;
        Tensor g({r, c});
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) {
                int64_t k = static_cast<int64_t>(i) * c + j;
                g[k] = std::exp(xv[k] - y[i]) * nd.grad[i];
            }
        nd.parents[0]->accumulate(g);
    });
}

Var l2_normalize_rows(const Var& x) {
    auto [r, c] = rows_cols(x, "l2_normalize_rows");
    Tensor norms({r, 1});
    const Scalar* px = x.val().data();
    for (int i = 0; i < r; ++i) {
        Scalar s = 0.0;
        for (int j = 0; j < c; ++j) {
            Scalar v = px[static_cast<int64_t>(i) * c + j];
            s += v * v;
        }
        WSGAN_CHECK(s > 0.0, "l2_normalize_rows: zero-norm row " + std::to_string(i));
        norms[i] = std::sqrt(s);
    }
    Tensor out({r, c});
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) {
            int64_t k = static_cast<int64_t>(i) * c + j;
            out[k] = px[k] / norms[i];
        }
    Tensor y = out, nv = norms;
    return make_op(std::move(out), {x}, [y, nv, r, c](Node& nd) {
        if (!needs(nd, 0)) return;
        Tensor g({r, c});
        for (int i = 0; i < r; ++i) {
            Scalar dot = 0.0;
            for (int j = 0; j < c; ++j) {
                int64_t k = static_cast<int64_t>(i) * c + j;
                dot += nd.grad[k] * y[k];
            }
            for (int j = 0; j < c; ++j) {
                int64_t k = static_cast<int64_t>(i) * c + j;
                g[k] = (nd.grad[k] - y[k] * dot) / nv[i];
            }
        }
        nd.parents[0]->accumulate(g);
    });
}

// ----------------------------------------------------------------------- shape

Var reshape(const Var& x, Shape shape) {
    Tensor out = x.val().reshaped(std::move(shape));
    return make_op(std::move(out), {x}, [](Node& n) { add_grad(n, 0, n.grad); });
}

Var concat_rows(const std::vector<Var>& xs) {
    WSGAN_CHECK(!xs.empty(), "concat_rows: empty input");
    Shape rest = xs[0].shape();
    WSGAN_CHECK(!rest.empty(), "concat_rows: rank >= 1 expected");
    int64_t row_sz = xs[0].size() / std::max(1, rest[0]);
    int total_rows = 0;
    for (const Var& v : xs) {
        Shape s = v.shape();
        WSGAN_CHECK(s.size() == rest.size(), "concat_rows: rank mismatch");
        for (size_t i = 1; i < s.size(); ++i)
            WSGAN_CHECK(s[i] == rest[i], "concat_rows: trailing dims mismatch");
        total_rows += s[0];
    }
    Shape out_shape = rest;
    out_shape[0] = total_rows;
    Tensor out(out_shape);
    int64_t off = 0;
    std::vector<int> part_rows;
    for (const Var& v : xs) {
        const Scalar* src = v.val().data();
        for (int64_t i = 0; i < v.size(); ++i) out[off + i] = src[i];
        off += v.size();
        part_rows.push_back(v.shape()[0]);
    }
    return make_op(std::move(out), xs, [part_rows, row_sz](Node& nd) {
        int64_t off = 0;
        for (size_t p = 0; p < part_rows.size(); ++p) {
            int64_t cnt = static_cast<int64_t>(part_rows[p]) * row_sz;
            if (needs(nd, p)) {
                Tensor g(nd.parents[p]->value.shape());
                for (int64_t i = 0; i < cnt; ++i) g[i] = nd.grad[off + i];
                nd.parents[p]->accumulate(g);
            }
            off += cnt;
        }
    });
}

Var slice_rows(const Var& x, int begin, int end) {
    Shape s = x.shape();
    WSGAN_CHECK(!s.empty() && begin >= 0 && begin < end && end <= s[0],
                "slice_rows: bad range [" + std::to_string(begin) + "," + std::to_string(end) +
                    ") for " + shape_str(s));
    int64_t row_sz = x.size() / s[0];
    Shape out_shape = s;
    out_shape[0] = end - begin;
    Tensor out(out_shape);
    const Scalar* px = x.val().data() + begin * row_sz;
    for (int64_t i = 0; i < out.size(); ++i) out[i] = px[i];
    return make_op(std::move(out), {x}, [s, begin, row_sz](Node& nd) {
        if (!needs(nd, 0)) return;
        Tensor g(s);
        int64_t off = begin * row_sz;
        for (int64_t i = 0; i < nd.grad.size(); ++i) g[off + i] = nd.grad[i];
        nd.parents[0]->accumulate(g);
    });
}

Var gather_rows(const Var& x, std::vector<int> idx) {
    Shape s = x.shape();
    WSGAN_CHECK(!s.empty(), "gather_rows: rank >= 1 expected");
    int64_t row_sz = x.size() / std::max(1, s[0]);
    for (int i : idx)
        WSGAN_CHECK(i >= 0 && i < s[0], "gather_rows: index out of range");
    Shape out_shape = s;
    out_shape[0] = static_cast<int>(idx.size());
    Tensor out(out_shape);
    const Scalar* px = x.val().data();
    for (size_t r = 0; r < idx.size(); ++r)
        for (int64_t j = 0; j < row_sz; ++j)
            out[static_cast<int64_t>(r) * row_sz + j] = px[idx[r] * row_sz + j];
    return make_op(std::move(out), {x}, [s, idx = std::move(idx), row_sz](Node& nd) {
        if (!needs(nd, 0)) return;
        Tensor g(s);
        for (size_t r = 0; r < idx.size(); ++r)
            for (int64_t j = 0; j < row_sz; ++j)
                g[idx[r] * row_sz + j] += nd.grad[static_cast<int64_t>(r) * row_sz + j];
        nd.parents[0]->accumulate(g);
    });
}

// ------------------------------------------------------------------------ conv

namespace {

struct ConvGeom {
    int B, C, Hs, Ws;  // source tensor dims (the large spatial tensor)
    int kh, kw, stride, pad;
    int Hg, Wg;  // sliding-window grid dims
};

// cols(row=(c,ky,kx), col=(b,gy,gx)) = src[b, c, gy*stride+ky-pad, gx*stride+kx-pad] (0 outside)
void im2col_gather(const Tensor& src, const ConvGeom& g, ColMat& cols) {
    const int K = g.C * g.kh * g.kw;
    const int64_t N = static_cast<int64_t>(g.B) * g.Hg * g.Wg;
    cols.resize(K, N);
    const Scalar* ps = src.data();
    for (int b = 0; b < g.B; ++b)
        for (int gy = 0; gy < g.Hg; ++gy)
            for (int gx = 0; gx < g.Wg; ++gx) {
                Scalar* col =
                    cols.data() + (static_cast<int64_t>(b) * g.Hg * g.Wg + gy * g.Wg + gx) * K;
                int idx = 0;
                for (int c = 0; c < g.C; ++c) {
                    const Scalar* plane = ps + (static_cast<int64_t>(b) * g.C + c) * g.Hs * g.Ws;
                    for (int ky = 0; ky < g.kh; ++ky) {
                        int sy = gy * g.stride + ky - g.pad;
                        if (sy < 0 || sy >= g.Hs) {
                            for (int kx = 0; kx < g.kw; ++kx) col[idx++] = 0.0;
                            continue;
                        }
                        for (int kx = 0; kx < g.kw; ++kx) {
                            int sx = gx * g.stride + kx - g.pad;
                            col[idx++] = (sx >= 0 && sx < g.Ws) ? plane[sy * g.Ws + sx] : 0.0;
                        }
                    }
                }
            }
}

// dst[b, c, gy*stride+ky-pad, gx*stride+kx-pad] += cols(row, col); transpose of im2col_gather
void col2im_scatter(const ColMat& cols, Tensor& dst, const ConvGeom& g) {
    const int K = g.C * g.kh * g.kw;
    Scalar* pd = dst.data();
    for (int b = 0; b < g.B; ++b)
        for (int gy = 0; gy < g.Hg; ++gy)
            for (int gx = 0; gx < g.Wg; ++gx) {
                const Scalar* col =
                    cols.data() + (static_cast<int64_t>(b) * g.Hg * g.Wg + gy * g.Wg + gx) * K;
                int idx = 0;
                for (int c = 0; c < g.C; ++c) {
                    Scalar* plane = pd + (static_cast<int64_t>(b) * g.C + c) * g.Hs * g.Ws;
                    for (int ky = 0; ky < g.kh; ++ky) {
                        int sy = gy * g.stride + ky - g.pad;
                        if (sy < 0 || sy >= g.Hs) {
                            idx += g.kw;
                            continue;
                        }
                        for (int kx = 0; kx < g.kw; ++kx) {
                            int sx = gx * g.stride + kx - g.pad;
                            if (sx >= 0 && sx < g.Ws) plane[sy * g.Ws + sx] += col[idx];
                            ++idx;
                        }
                    }
                }
            }
}

// [B,C,H,W] <-> column-major [C, B*H*W] matrices
void nchw_to_cmat(const Tensor& t, int B, int C, int HW, ColMat& m) {
    m.resize(C, static_cast<int64_t>(B) * HW);
    const Scalar* p = t.data();
    for (int b = 0; b < B; ++b)
        for (int pos = 0; pos < HW; ++pos) {
            Scalar* col = m.data() + (static_cast<int64_t>(b) * HW + pos) * C;
            for (int c = 0; c < C; ++c) col[c] = p[(static_cast<int64_t>(b) * C + c) * HW + pos];
        }
}

void cmat_to_nchw(const ColMat& m, int B, int C, int HW, Tensor& t) {
    Scalar* p = t.data();
    for (int b = 0; b < B; ++b)
        for (int pos = 0; pos < HW; ++pos) {
            const Scalar* col = m.data() + (static_cast<int64_t>(b) * HW + pos) * C;
            for (int c = 0; c < C; ++c) p[(static_cast<int64_t>(b) * C + c) * HW + pos] = col[c];
        }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
    const Tensor& xv = x.val();
    const Tensor& wv = w.val();
    WSGAN_CHECK(xv.rank() == 4, "conv2d: input must be [B,C,H,W], got " + shape_str(xv.shape()));
    WSGAN_CHECK(wv.rank() == 4, "conv2d: weight must be [Cout,Cin,kh,kw]");
    int B = xv.dim(0), Cin = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    int Cout = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
    WSGAN_CHECK(wv.dim(1) == Cin, "conv2d: channel mismatch, input " + std::to_string(Cin) +
                                      " vs weight " + std::to_string(wv.dim(1)));
    WSGAN_CHECK(stride >= 1 && pad >= 0, "conv2d: bad stride/pad");
    int OH = (H + 2 * pad - kh) / stride + 1;
    int OW = (W + 2 * pad - kw) / stride + 1;
    WSGAN_CHECK(OH >= 1 && OW >= 1, "conv2d: kernel larger than padded input");
    bool has_bias = b.defined();

    ConvGeom geom{B, Cin, H, W, kh, kw, stride, pad, OH, OW};
    const int K = Cin * kh * kw;
    const int64_t N = static_cast<int64_t>(B) * OH * OW;

    ColMat cols;
    im2col_gather(xv, geom, cols);
    CMapRM Wm(wv.data(), Cout, K);
    ColMat outm(Cout, N);
    outm.noalias() = Wm * cols;

    Tensor y({B, Cout, OH, OW});
    cmat_to_nchw(outm, B, Cout, OH * OW, y);
    if (has_bias) {
        const Scalar* pb = b.val().data();
        for (int bi = 0; bi < B; ++bi)
            for (int c = 0; c < Cout; ++c) {
                Scalar* plane = y.data() + (static_cast<int64_t>(bi) * Cout + c) * OH * OW;
                for (int i = 0; i < OH * OW; ++i) plane[i] += pb[c];
            }
    }

    Tensor xcap = xv;
    std::vector<Var> parents = has_bias ? std::vector<Var>{x, w, b} : std::vector<Var>{x, w};
    return make_op(std::move(y), std::move(parents),
                   [xcap, geom, Cout, K, N, has_bias, wv](Node& nd) {
                       ColMat dyMat;
                       nchw_to_cmat(nd.grad, geom.B, Cout, geom.Hg * geom.Wg, dyMat);
                       if (needs(nd, 1)) {
                           ColMat cols;
                           im2col_gather(xcap, geom, cols);
                           Tensor gw(nd.parents[1]->value.shape());
                           MapRM(gw.data(), Cout, K).noalias() = dyMat * cols.transpose();
                           nd.parents[1]->accumulate(gw);
                       }
                       if (needs(nd, 0)) {
                           ColMat dcols(K, N);
                           CMapRM Wm(wv.data(), Cout, K);
                           dcols.noalias() = Wm.transpose() * dyMat;
                           Tensor gx(xcap.shape());
                           col2im_scatter(dcols, gx, geom);
                           nd.parents[0]->accumulate(gx);
                       }
                       if (has_bias && needs(nd, 2)) {
                           Tensor gb({Cout});
                           for (int c = 0; c < Cout; ++c) gb[c] = dyMat.row(c).sum();
                           nd.parents[2]->accumulate(gb);
                       }
                   });
}

Var conv_transpose2d(const Var& x, const Var& w, const Var& b, int stride, int pad, int out_pad) {
    const Tensor& xv = x.val();
    const Tensor& wv = w.val();
    WSGAN_CHECK(xv.rank() == 4, "conv_transpose2d: input must be [B,C,H,W]");
    WSGAN_CHECK(wv.rank() == 4, "conv_transpose2d: weight must be [Cin,Cout,kh,kw]");
    int B = xv.dim(0), Cin = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    int Cout = wv.dim(1), kh = wv.dim(2), kw = wv.dim(3);
    WSGAN_CHECK(wv.dim(0) == Cin, "conv_transpose2d: channel mismatch, input " +
                                      std::to_string(Cin) + " vs weight " +
                                      std::to_string(wv.dim(0)));
    WSGAN_CHECK(stride >= 1 && pad >= 0 && out_pad >= 0 && out_pad < stride,
                "conv_transpose2d: bad stride/pad/out_pad");
    int OH = (H - 1) * stride - 2 * pad + kh + out_pad;
    int OW = (W - 1) * stride - 2 * pad + kw + out_pad;
    WSGAN_CHECK(OH >= 1 && OW >= 1, "conv_transpose2d: degenerate output size");
    bool has_bias = b.defined();

    // Geometry mirrors conv2d with the roles of grid and spatial swapped:
    // grid = input positions, spatial = output canvas.
    ConvGeom geom{B, Cout, OH, OW, kh, kw, stride, pad, H, W};
    const int K = Cout * kh * kw;
    const int64_t N = static_cast<int64_t>(B) * H * W;

    ColMat xMat;
    nchw_to_cmat(xv, B, Cin, H * W, xMat);
    CMapRM Wm(wv.data(), Cin, K);
    ColMat cols(K, N);
    cols.noalias() = Wm.transpose() * xMat;

    Tensor y({B, Cout, OH, OW});
    col2im_scatter(cols, y, geom);
    if (has_bias) {
        const Scalar* pb = b.val().data();
        for (int bi = 0; bi < B; ++bi)
            for (int c = 0; c < Cout; ++c) {
                Scalar* plane = y.data() + (static_cast<int64_t>(bi) * Cout + c) * OH * OW;
                for (int i = 0; i < OH * OW; ++i) plane[i] += pb[c];
            }
    }

    Tensor xcap = xv;
    std::vector<Var> parents = has_bias ? std::vector<Var>{x, w, b} : std::vector<Var>{x, w};
    return make_op(
        std::move(y), std::move(parents),
        [xcap, geom, B, Cin, Cout, K, N, has_bias, wv](Node& nd) {
            bool nx = needs(nd, 0), nw = needs(nd, 1);
            if (nx || nw) {
                ColMat dyCols;
                im2col_gather(nd.grad, geom, dyCols);  // [K, B*H*W]
                if (nw) {
                    ColMat xMat;
                    nchw_to_cmat(xcap, B, Cin, geom.Hg * geom.Wg, xMat);
                    Tensor gw(nd.parents[1]->value.shape());
                    MapRM(gw.data(), Cin, K).noalias() = xMat * dyCols.transpose();
                    nd.parents[1]->accumulate(gw);
                }
                if (nx) {
                    ColMat dxMat(Cin, N);
                    CMapRM Wm(wv.data(), Cin, K);
                    dxMat.noalias() = Wm * dyCols;
                    Tensor gx(xcap.shape());
                    cmat_to_nchw(dxMat, B, Cin, geom.Hg * geom.Wg, gx);
                    nd.parents[0]->accumulate(gx);
                }
            }
            if (has_bias && needs(nd, 2)) {
                Tensor gb({Cout});
                int HW = geom.Hs * geom.Ws;
                for (int bi = 0; bi < B; ++bi)
                    for (int c = 0; c < Cout; ++c) {
                        const Scalar* plane =
                            nd.grad.data() + (static_cast<int64_t>(bi) * Cout + c) * HW;
                        Scalar s = 0.0;
                        for (int i = 0; i < HW; ++i) s += plane[i];
                        gb[c] += s;
                    }
                nd.parents[2]->accumulate(gb);
            }
        });
}

Var batchnorm2d(const Var& x, const Var& gamma, const Var& beta, Tensor running_mean,
                Tensor running_var, bool training, Scalar momentum, Scalar eps) {
    const Tensor& xv = x.val();
    WSGAN_CHECK(xv.rank() == 4, "batchnorm2d: input must be [B,C,H,W]");
    int B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    WSGAN_CHECK(gamma.size() == C && beta.size() == C && running_mean.size() == C &&
                    running_var.size() == C,
                "batchnorm2d: parameter size mismatch");
    const int64_t n = static_cast<int64_t>(B) * H * W;
    WSGAN_CHECK(n >= 1, "batchnorm2d: empty input");
    const int HW = H * W;

    Tensor mean({C}), var({C});
    if (training) {
        for (int c = 0; c < C; ++c) {
            Scalar s = 0.0;
            for (int b = 0; b < B; ++b) {
                const Scalar* plane = xv.data() + (static_cast<int64_t>(b) * C + c) * HW;
                for (int i = 0; i < HW; ++i) s += plane[i];
            }
            mean[c] = s / static_cast<Scalar>(n);
            Scalar v = 0.0;
            for (int b = 0; b < B; ++b) {
                const Scalar* plane = xv.data() + (static_cast<int64_t>(b) * C + c) * HW;
                for (int i = 0; i < HW; ++i) {
                    Scalar d = plane[i] - mean[c];
                    v += d * d;
                }
            }
            var[c] = v / static_cast<Scalar>(n);
        }
        // running buffers track the unbiased variance
        Scalar unbias = n > 1 ? static_cast<Scalar>(n) / static_cast<Scalar>(n - 1) : 1.0;
        for (int c = 0; c < C; ++c) {
            running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * mean[c];
            running_var[c] = (1.0 - momentum) * running_var[c] + momentum * var[c] * unbias;
        }
    } else {
        for (int c = 0; c < C; ++c) {
            mean[c] = running_mean[c];
            var[c] = running_var[c];
        }
    }

    Tensor invstd({C});
    for (int c = 0; c < C; ++c) invstd[c] = 1.0 / std::sqrt(var[c] + eps);

    Tensor xhat({B, C, H, W});
    Tensor y({B, C, H, W});
    const Scalar* pg = gamma.val().data();
    const Scalar* pb = beta.val().data();
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            const Scalar* src = xv.data() + (static_cast<int64_t>(b) * C + c) * HW;
            Scalar* ph = xhat.data() + (static_cast<int64_t>(b) * C + c) * HW;
            Scalar* py = y.data() + (static_cast<int64_t>(b) * C + c) * HW;
            for (int i = 0; i < HW; ++i) {
                ph[i] = (src[i] - mean[c]) * invstd[c];
                py[i] = pg[c] * ph[i] + pb[c];
            }
        }

    Tensor gcap = gamma.val();
    return make_op(
        std::move(y), {x, gamma, beta}, [xhat, invstd, gcap, training, B, C, HW, n](Node& nd) {
            Tensor dgamma({C}), dbeta({C});
            for (int b = 0; b < B; ++b)
                for (int c = 0; c < C; ++c) {
                    const Scalar* g = nd.grad.data() + (static_cast<int64_t>(b) * C + c) * HW;
                    const Scalar* ph = xhat.data() + (static_cast<int64_t>(b) * C + c) * HW;
                    Scalar sg = 0.0, sgx = 0.0;
                    for (int i = 0; i < HW; ++i) {
                        sg += g[i];
                        sgx += g[i] * ph[i];
                    }
                    dbeta[c] += sg;
                    dgamma[c] += sgx;
                }
            if (needs(nd, 0)) {
                Tensor gx(nd.parents[0]->value.shape());
                for (int b = 0; b < B; ++b)
                    for (int c = 0; c < C; ++c) {
                        const Scalar* g = nd.grad.data() + (static_cast<int64_t>(b) * C + c) * HW;
                        const Scalar* ph = xhat.data() + (static_cast<int64_t>(b) * C + c) * HW;
                        Scalar* dst = gx.data() + (static_cast<int64_t>(b) * C + c) * HW;
                        Scalar k = gcap[c] * invstd[c];
                        if (training) {
                            Scalar mg = dbeta[c] / static_cast<Scalar>(n);
                            Scalar mgx = dgamma[c] / static_cast<Scalar>(n);
                            for (int i = 0; i < HW; ++i) dst[i] = k * (g[i] - mg - ph[i] * mgx);
                        } else {
                            for (int i = 0; i < HW; ++i) dst[i] = k * g[i];
                        }
                    }
                nd.parents[0]->accumulate(gx);
            }
            if (needs(nd, 1)) nd.parents[1]->accumulate(dgamma);
            if (needs(nd, 2)) nd.parents[2]->accumulate(dbeta);
        });
}

Var global_avg_pool(const Var& x) {
    const Tensor& xv = x.val();
    WSGAN_CHECK(xv.rank() == 4, "global_avg_pool: input must be [B,C,H,W]");
    int B = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
    Tensor out({B, C});
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            const Scalar* plane = xv.data() + (static_cast<int64_t>(b) * C + c) * HW;
            Scalar s = 0.0;
            for (int i = 0; i < HW; ++i) s += plane[i];
            out[static_cast<int64_t>(b) * C + c] = s / static_cast<Scalar>(HW);
        }
    Shape xs = xv.shape();
    return make_op(std::move(out), {x}, [xs, B, C, HW](Node& nd) {
        if (!needs(nd, 0)) return;
        Tensor g(xs);
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < C; ++c) {
                Scalar v = nd.grad[static_cast<int64_t>(b) * C + c] / static_cast<Scalar>(HW);
                Scalar* plane = g.data() + (static_cast<int64_t>(b) * C + c) * HW;
                for (int i = 0; i < HW; ++i) plane[i] = v;
            }
        nd.parents[0]->accumulate(g);
    });
}

}  // namespace wsgan
