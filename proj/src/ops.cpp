#include "ikd/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "ikd/errors.hpp"

namespace ikd {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap cmap(const double* p, std::size_t rows, std::size_t cols) {
    return ConstMap(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
MutMap mmap(double* p, std::size_t rows, std::size_t cols) {
    return MutMap(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
}

// Accumulate `g` into input `i` of `self` when that input tracks gradients.
template <class F>
void accumulate(Node& self, std::size_t i, F&& f) {
    Node& in = *self.inputs[i];
    if (!in.requires_grad) return;
    f(in.grad);
}

template <class F>
Tensor unary(const char* name, const Tensor& x, F&& forward, BackwardFn backward) {
    std::vector<double> out(x.numel());
    auto xd = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = forward(xd[i]);
    return make_op(name, x.shape(), std::move(out), {x}, std::move(backward));
}

// outer x axis x inner decomposition used by axis-wise ops.
struct AxisSplit {
    std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
    if (axis >= shape.size())
        throw IndexError("axis " + std::to_string(axis) + " invalid for shape " + shape_str(shape));
    AxisSplit s;
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    s.len = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

void check_nchw(const char* op, const Tensor& x) {
    if (x.rank() != 4) throw DimensionError(std::string(op) + ": expected NCHW input, got " + shape_str(x.shape()));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape("add", a, b);
    std::vector<double> out(a.numel());
    auto ad = a.data(), bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
    return make_op("add", a.shape(), std::move(out), {a, b}, [](Node& self) {
        for (std::size_t k = 0; k < 2; ++k)
            accumulate(self, k, [&](std::vector<double>& g) {
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
            });
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape("sub", a, b);
    std::vector<double> out(a.numel());
    auto ad = a.data(), bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] - bd[i];
    return make_op("sub", a.shape(), std::move(out), {a, b}, [](Node& self) {
        accumulate(self, 0, [&](std::vector<double>& g) {
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        });
        accumulate(self, 1, [&](std::vector<double>& g) {
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
        });
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape("mul", a, b);
    std::vector<double> out(a.numel());
    auto ad = a.data(), bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
    return make_op("mul", a.shape(), std::move(out), {a, b}, [](Node& self) {
        const auto& av = self.inputs[0]->data;
        const auto& bv = self.inputs[1]->data;
        accumulate(self, 0, [&](std::vector<double>& g) {
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bv[i];
        });
        accumulate(self, 1, [&](std::vector<double>& g) {
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * av[i];
        });
    });
}

Tensor div(const Tensor& a, const Tensor& b) {
    require_same_shape("div", a, b);
    std::vector<double> out(a.numel());
    auto ad = a.data(), bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] / bd[i];
    return make_op("div", a.shape(), std::move(out), {a, b}, [](Node& self) {
        const auto& av = self.inputs[0]->data;
        const auto& bv = self.inputs[1]->data;
        accumulate(self, 0, [&](std::vector<double>& g) {
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / bv[i];
        });
        accumulate(self, 1, [&](std::vector<double>& g) {
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i] * av[i] / (bv[i] * bv[i]);
        });
    });
}

Tensor scale(const Tensor& x, double factor) {
    return unary("scale", x, [factor](double v) { return v * factor; }, [factor](Node& self) {
        accumulate(self, 0, [&](std::vector<double>& g) {
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
        });
    });
}

Tensor add_scalar(const Tensor& x, double value) {
    return unary("add_scalar", x, [value](double v) { return v + value; }, [](Node& self) {
        accumulate(self, 0, [&](std::vector<double>& g) {
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        });
    });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
    if (bias.rank() != 1 || x.rank() == 0 || x.shape().back() != bias.dim(0))
        throw DimensionError("add_bias: " + shape_str(x.shape()) + " with bias " + shape_str(bias.shape()));
    const std::size_t n = bias.dim(0);
    std::vector<double> out(x.data().begin(), x.data().end());
    auto bd = bias.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i % n];
    return make_op("add_bias", x.shape(), std::move(out), {x, bias}, [n](Node& self) {
        accumulate(self, 0, [&](std::vector<double>& g) {
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        });
        accumulate(self, 1, [&](std::vector<double>& g) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % n] += self.grad[i];
        });
    });
}

Tensor channel_affine(const Tensor& x, std::span<const double> scale_c, std::span<const double> shift_c) {
    check_nchw("channel_affine", x);
    const std::size_t c = x.dim(1);
    if (scale_c.size() != c || shift_c.size() != c)
        throw DimensionError("channel_affine: " + std::to_string(c) + " channels but " +
                             std::to_string(scale_c.size()) + " constants");
    const std::size_t hw = x.dim(2) * x.dim(3);
    std::vector<double> sc(scale_c.begin(), scale_c.end());
    std::vector<double> out(x.numel());
    auto xd = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::size_t ch = (i / hw) % c;
        out[i] = xd[i] * sc[ch] + shift_c[ch];
    }
    return make_op("channel_affine", x.shape(), std::move(out), {x}, [sc, hw, c](Node& self) {
        accumulate(self, 0, [&](std::vector<double>& g) {
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * sc[(i / hw) % c];
        });
    });
}

Tensor relu(const Tensor& x) {
    return unary("relu", x, [](double v) { return v > 0.0 ? v : 0.0; }, [](Node& self) {
        const auto& xv = self.inputs[0]->data;
        accumulate(self, 0, [&](std::vector<double>& g) {
            for (std::size_t i = 0; i < g.size(); ++i)
                if (xv[i] > 0.0) g[i] += self.grad[i];
        });
    });
}

Tensor sigmoid(const Tensor& x) {
    auto f = [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        double e = std::exp(v);
        return e / (1.0 + e);
    };
    return unary("sigmoid", x, f, [](Node& self) {
        accumulate(self, 0, [&](std::vector<double>& g) {
            for (std::size_t i = 0; i < g.size(); ++i) {
                double y = self.data[i];
                g[i] += self.grad[i] * y * (1.0 - y);
            }
        });
    });
}

Tensor abs(const Tensor& x) {
    return unary("abs", x, [](double v) { return std::fabs(v); }, [](Node& self) {
        const auto& xv = self.inputs[0]->data;
        accumulate(self, 0, [&](std::vector<double>& g) {
            for (std::size_t i = 0; i < g.size(); ++i) {
                if (xv[i] > 0.0) g[i] += self.grad[i];
                else if (xv[i] < 0.0) g[i] -= self.grad[i];
            }
        });
    });
}

Tensor exp(const Tensor& x) {
    return unary("exp", x, [](double v) { return std::exp(v); }, [](Node& self) {
        accumulate(self, 0, [&](std::vector<double>& g) {
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * self.data[i];
        });
    });
}

Tensor sqrt(const Tensor& x) {
    return unary("sqrt", x, [](double v) { return std::sqrt(v); }, [](Node& self) {
        const auto& yv = self.data;
        accumulate(self, 0, [&](std::vector<double>& g) {
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * 0.5 / yv[i];
        });
    });
}

Tensor log(const Tensor& x) {
    return unary("log", x, [](double v) { return std::log(v); }, [](Node& self) {
        const auto& xv = self.inputs[0]->data;
        accumulate(self, 0, [&](std::vector<double>& g) {
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / xv[i];
        });
    });
}

Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    return make_op("sum", Shape{}, {s}, {x}, [](Node& self) {
        accumulate(self, 0, [&](std::vector<double>& g) {
            for (auto& v : g) v += self.grad[0];
        });
    });
}

Tensor mean(const Tensor& x) {
    const double n = static_cast<double>(x.numel());
    double s = 0.0;
    for (double v : x.data()) s += v;
    return make_op("mean", Shape{}, {s / n}, {x}, [n](Node& self) {
        accumulate(self, 0, [&](std::vector<double>& g) {
            for (auto& v : g) v += self.grad[0] / n;
        });
    });
}

Tensor max_all(const Tensor& x) {
    auto xd = x.data();
    std::size_t arg = 0;
    for (std::size_t i = 1; i < xd.size(); ++i)
        if (xd[i] > xd[arg]) arg = i;
    return make_op("max_all", Shape{}, {xd[arg]}, {x}, [arg](Node& self) {
        accumulate(self, 0, [&](std::vector<double>& g) { g[arg] += self.grad[0]; });
    });
}

Tensor l2_norm(const Tensor& x) {
    double ss = 0.0;
    for (double v : x.data()) ss += v * v;
    const double n = std::sqrt(ss);
    return make_op("l2_norm", Shape{}, {n}, {x}, [n](Node& self) {
        if (n == 0.0) return;
        const auto& xv = self.inputs[0]->data;
        accumulate(self, 0, [&](std::vector<double>& g) {
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * xv[i] / n;
        });
    });
}

Tensor dot(const Tensor& a, const Tensor& b) {
    if (a.numel() != b.numel())
        throw DimensionError("dot: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    double s = 0.0;
    auto ad = a.data(), bd = b.data();
    for (std::size_t i = 0; i < ad.size(); ++i) s += ad[i] * bd[i];
    return make_op("dot", Shape{}, {s}, {a, b}, [](Node& self) {
        const auto& av = self.inputs[0]->data;
        const auto& bv = self.inputs[1]->data;
        const double g0 = self.grad[0];
        accumulate(self, 0, [&](std::vector<double>& g) {
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += g0 * bv[i];
        });
        accumulate(self, 1, [&](std::vector<double>& g) {
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += g0 * av[i];
        });
    });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw DimensionError("matmul: cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(m * n);
    mmap(out.data(), m, n).noalias() = cmap(a.data().data(), m, k) * cmap(b.data().data(), k, n);
    return make_op("matmul", Shape{m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
        auto gc = cmap(self.grad.data(), m, n);
        const auto& av = self.inputs[0]->data;
        const auto& bv = self.inputs[1]->data;
        accumulate(self, 0, [&](std::vector<double>& g) {
            mmap(g.data(), m, k).noalias() += gc * cmap(bv.data(), k, n).transpose();
        });
        accumulate(self, 1, [&](std::vector<double>& g) {
            mmap(g.data(), k, n).noalias() += cmap(av.data(), m, k).transpose() * gc;
        });
    });
}

Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0))
        throw DimensionError("bmm: cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
    const std::size_t bs = a.dim(0), m = a.dim(1), k = a.dim(2);
    const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
    const std::size_t kb = transpose_b ? b.dim(2) : b.dim(1);
    if (kb != k)
        throw DimensionError("bmm: inner dimensions differ, " + shape_str(a.shape()) + " by " +
                             shape_str(b.shape()) + (transpose_b ? " (transposed)" : ""));
    std::vector<double> out(bs * m * n);
    const double* ap = a.data().data();
    const double* bp = b.data().data();
    for (std::size_t i = 0; i < bs; ++i) {
        auto A = cmap(ap + i * m * k, m, k);
        auto C = mmap(out.data() + i * m * n, m, n);
        if (transpose_b)
            C.noalias() = A * cmap(bp + i * n * k, n, k).transpose();
        else
            C.noalias() = A * cmap(bp + i * k * n, k, n);
    }
    return make_op("bmm", Shape{bs, m, n}, std::move(out), {a, b}, [bs, m, k, n, transpose_b](Node& self) {
        const auto& av = self.inputs[0]->data;
        const auto& bv = self.inputs[1]->data;
        accumulate(self, 0, [&](std::vector<double>& g) {
            for (std::size_t i = 0; i < bs; ++i) {
                auto G = cmap(self.grad.data() + i * m * n, m, n);
                auto GA = mmap(g.data() + i * m * k, m, k);
                if (transpose_b)
                    GA.noalias() += G * cmap(bv.data() + i * n * k, n, k);
                else
                    GA.noalias() += G * cmap(bv.data() + i * k * n, k, n).transpose();
            }
        });
        accumulate(self, 1, [&](std::vector<double>& g) {
            for (std::size_t i = 0; i < bs; ++i) {
                auto G = cmap(self.grad.data() + i * m * n, m, n);
                auto A = cmap(av.data() + i * m * k, m, k);
                if (transpose_b)
                    mmap(g.data() + i * n * k, n, k).noalias() += G.transpose() * A;
                else
                    mmap(g.data() + i * k * n, k, n).noalias() += A.transpose() * G;
            }
        });
    });
}

static Tensor linear_impl(const Tensor& x, const Tensor& w, const Tensor* bias) {
    if (x.rank() < 1 || w.rank() != 2 || x.shape().back() != w.dim(0))
        throw DimensionError("linear: cannot project " + shape_str(x.shape()) + " with " + shape_str(w.shape()));
    const std::size_t k = w.dim(0), n = w.dim(1);
    const std::size_t rows = x.numel() / k;
    if (bias && (bias->rank() != 1 || bias->dim(0) != n))
        throw DimensionError("linear: bias " + shape_str(bias->shape()) + " for output width " + std::to_string(n));
    Shape out_shape = x.shape();
    out_shape.back() = n;
    std::vector<double> out(rows * n);
    auto O = mmap(out.data(), rows, n);
    O.noalias() = cmap(x.data().data(), rows, k) * cmap(w.data().data(), k, n);
    if (bias) {
        auto bd = bias->data();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < n; ++j) out[r * n + j] += bd[j];
    }
    std::vector<Tensor> inputs{x, w};
    if (bias) inputs.push_back(*bias);
    return make_op("linear", std::move(out_shape), std::move(out), std::move(inputs), [rows, k, n](Node& self) {
        auto G = cmap(self.grad.data(), rows, n);
        const auto& xv = self.inputs[0]->data;
        const auto& wv = self.inputs[1]->data;
        accumulate(self, 0, [&](std::vector<double>& g) {
            mmap(g.data(), rows, k).noalias() += G * cmap(wv.data(), k, n).transpose();
        });
        accumulate(self, 1, [&](std::vector<double>& g) {
            mmap(g.data(), k, n).noalias() += cmap(xv.data(), rows, k).transpose() * G;
        });
        if (self.inputs.size() > 2) {
            accumulate(self, 2, [&](std::vector<double>& g) {
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[r * n + j];
            });
        }
    });
}

Tensor linear(const Tensor& x, const Tensor& w) { return linear_impl(x, w, nullptr); }
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) { return linear_impl(x, w, &bias); }

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel())
        throw DimensionError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
    return make_op("reshape", std::move(shape), x.to_vector(), {x}, [](Node& self) {
        accumulate(self, 0, [&](std::vector<double>& g) {
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        });
    });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
    const auto& in_shape = x.shape();
    const std::size_t r = in_shape.size();
    if (axes.size() != r) throw DimensionError("permute: axis list does not match rank of " + shape_str(in_shape));
    std::vector<bool> seen(r, false);
    for (auto a : axes) {
        if (a >= r || seen[a]) throw IndexError("permute: invalid axis permutation");
        seen[a] = true;
    }
    std::vector<std::size_t> in_strides(r, 1);
    for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * in_shape[i];
    Shape out_shape(r);
    for (std::size_t i = 0; i < r; ++i) out_shape[i] = in_shape[axes[i]];
    const std::size_t total = x.numel();
    // src[i] = flat input offset of output element i.
    auto src = std::make_shared<std::vector<std::size_t>>(total);
    std::vector<std::size_t> idx(r, 0);
    for (std::size_t i = 0; i < total; ++i) {
        std::size_t off = 0;
        for (std::size_t d = 0; d < r; ++d) off += idx[d] * in_strides[axes[d]];
        (*src)[i] = off;
        for (std::size_t d = r; d-- > 0;) {
            if (++idx[d] < out_shape[d]) break;
            idx[d] = 0;
        }
    }
    std::vector<double> out(total);
    auto xd = x.data();
    for (std::size_t i = 0; i < total; ++i) out[i] = xd[(*src)[i]];
    return make_op("permute", std::move(out_shape), std::move(out), {x}, [src](Node& self) {
        accumulate(self, 0, [&](std::vector<double>& g) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[(*src)[i]] += self.grad[i];
        });
    });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw ContractError("concat: no inputs");
    const Shape& ref = parts[0].shape();
    if (axis >= ref.size()) throw IndexError("concat: axis out of range for " + shape_str(ref));
    std::vector<std::size_t> lens;
    std::size_t total_len = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        bool ok = s.size() == ref.size();
        for (std::size_t d = 0; ok && d < s.size(); ++d)
            if (d != axis && s[d] != ref[d]) ok = false;
        if (!ok) throw DimensionError("concat: " + shape_str(ref) + " vs " + shape_str(s) + " along axis " +
                                      std::to_string(axis));
        lens.push_back(s[axis]);
        total_len += s[axis];
    }
    auto sp = split_axis(ref, axis);
    Shape out_shape = ref;
    out_shape[axis] = total_len;
    std::vector<double> out(sp.outer * total_len * sp.inner);
    std::size_t offset = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        auto pd = parts[p].data();
        const std::size_t chunk = lens[p] * sp.inner;
        for (std::size_t o = 0; o < sp.outer; ++o)
            std::copy_n(pd.begin() + o * chunk, chunk, out.begin() + o * total_len * sp.inner + offset * sp.inner);
        offset += lens[p];
    }
    const std::size_t outer = sp.outer, inner = sp.inner;
    return make_op("concat", std::move(out_shape), std::move(out), parts,
                   [lens, total_len, outer, inner](Node& self) {
                       std::size_t offset = 0;
                       for (std::size_t p = 0; p < lens.size(); ++p) {
                           const std::size_t chunk = lens[p] * inner;
                           accumulate(self, p, [&](std::vector<double>& g) {
                               for (std::size_t o = 0; o < outer; ++o) {
                                   const double* src = self.grad.data() + o * total_len * inner + offset * inner;
                                   double* dst = g.data() + o * chunk;
                                   for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
                               }
                           });
                           offset += lens[p];
                       }
                   });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
    auto sp = split_axis(x.shape(), axis);
    if (length == 0 || start + length > sp.len)
        throw IndexError("slice: [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") out of range for axis " + std::to_string(axis) + " of " + shape_str(x.shape()));
    Shape out_shape = x.shape();
    out_shape[axis] = length;
    std::vector<double> out(sp.outer * length * sp.inner);
    auto xd = x.data();
    for (std::size_t o = 0; o < sp.outer; ++o)
        std::copy_n(xd.begin() + (o * sp.len + start) * sp.inner, length * sp.inner,
                    out.begin() + o * length * sp.inner);
    return make_op("slice", std::move(out_shape), std::move(out), {x}, [sp, start, length](Node& self) {
        accumulate(self, 0, [&](std::vector<double>& g) {
            for (std::size_t o = 0; o < sp.outer; ++o) {
                const double* src = self.grad.data() + o * length * sp.inner;
                double* dst = g.data() + (o * sp.len + start) * sp.inner;
                for (std::size_t i = 0; i < length * sp.inner; ++i) dst[i] += src[i];
            }
        });
    });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
    auto sp = split_axis(x.shape(), axis);
    std::vector<double> out(x.numel());
    auto xd = x.data();
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t in = 0; in < sp.inner; ++in) {
            const std::size_t base = o * sp.len * sp.inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < sp.len; ++j) mx = std::max(mx, xd[base + j * sp.inner]);
            double z = 0.0;
            for (std::size_t j = 0; j < sp.len; ++j) {
                double e = std::exp(xd[base + j * sp.inner] - mx);
                out[base + j * sp.inner] = e;
                z += e;
            }
            for (std::size_t j = 0; j < sp.len; ++j) out[base + j * sp.inner] /= z;
        }
    return make_op("softmax", x.shape(), std::move(out), {x}, [sp](Node& self) {
        accumulate(self, 0, [&](std::vector<double>& g) {
            for (std::size_t o = 0; o < sp.outer; ++o)
                for (std::size_t in = 0; in < sp.inner; ++in) {
                    const std::size_t base = o * sp.len * sp.inner + in;
                    double s = 0.0;
                    for (std::size_t j = 0; j < sp.len; ++j) {
                        const std::size_t k = base + j * sp.inner;
                        s += self.grad[k] * self.data[k];
                    }
                    for (std::size_t j = 0; j < sp.len; ++j) {
                        const std::size_t k = base + j * sp.inner;
                        g[k] += self.data[k] * (self.grad[k] - s);
                    }
                }
        });
    });
}

Tensor log_softmax(const Tensor& x, std::size_t axis) {
    auto sp = split_axis(x.shape(), axis);
    std::vector<double> out(x.numel());
    auto xd = x.data();
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t in = 0; in < sp.inner; ++in) {
            const std::size_t base = o * sp.len * sp.inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < sp.len; ++j) mx = std::max(mx, xd[base + j * sp.inner]);
            double z = 0.0;
            for (std::size_t j = 0; j < sp.len; ++j) z += std::exp(xd[base + j * sp.inner] - mx);
            const double lz = mx + std::log(z);
            for (std::size_t j = 0; j < sp.len; ++j) out[base + j * sp.inner] = xd[base + j * sp.inner] - lz;
        }
    return make_op("log_softmax", x.shape(), std::move(out), {x}, [sp](Node& self) {
        accumulate(self, 0, [&](std::vector<double>& g) {
            for (std::size_t o = 0; o < sp.outer; ++o)
                for (std::size_t in = 0; in < sp.inner; ++in) {
                    const std::size_t base = o * sp.len * sp.inner + in;
                    double s = 0.0;
                    for (std::size_t j = 0; j < sp.len; ++j) s += self.grad[base + j * sp.inner];
                    for (std::size_t j = 0; j < sp.len; ++j) {
                        const std::size_t k = base + j * sp.inner;
                        g[k] += self.grad[k] - std::exp(self.data[k]) * s;
                    }
                }
        });
    });
}

Tensor masked_fill(const Tensor& x, const std::vector<std::uint8_t>& mask, double value) {
    if (mask.size() != x.numel())
        throw DimensionError("masked_fill: mask of " + std::to_string(mask.size()) + " entries for " +
                             shape_str(x.shape()));
    std::vector<double> out(x.data().begin(), x.data().end());
    for (std::size_t i = 0; i < out.size(); ++i)
        if (mask[i]) out[i] = value;
    auto keep = std::make_shared<std::vector<std::uint8_t>>(mask);
    return make_op("masked_fill", x.shape(), std::move(out), {x}, [keep](Node& self) {
        accumulate(self, 0, [&](std::vector<double>& g) {
            for (std::size_t i = 0; i < g.size(); ++i)
                if (!(*keep)[i]) g[i] += self.grad[i];
        });
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    if (x.rank() < 1) throw DimensionError("layer_norm: scalar input");
    const std::size_t n = x.shape().back();
    if (gain.shape() != Shape{n} || bias.shape() != Shape{n})
        throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                             " for width " + std::to_string(n));
    const std::size_t rows = x.numel() / n;
    auto xhat = std::make_shared<std::vector<double>>(x.numel());
    auto inv_std = std::make_shared<std::vector<double>>(rows);
    std::vector<double> out(x.numel());
    auto xd = x.data();
    auto gd = gain.data(), bd = bias.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = xd.data() + r * n;
        double mu = 0.0;
        for (std::size_t j = 0; j < n; ++j) mu += row[j];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(n);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (std::size_t j = 0; j < n; ++j) {
            const double h = (row[j] - mu) * is;
            (*xhat)[r * n + j] = h;
            out[r * n + j] = h * gd[j] + bd[j];
        }
    }
    return make_op("layer_norm", x.shape(), std::move(out), {x, gain, bias}, [xhat, inv_std, rows, n](Node& self) {
        const auto& gv = self.inputs[1]->data;
        accumulate(self, 1, [&](std::vector<double>& g) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % n] += self.grad[i] * (*xhat)[i];
        });
        accumulate(self, 2, [&](std::vector<double>& g) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % n] += self.grad[i];
        });
        accumulate(self, 0, [&](std::vector<double>& g) {
            const double inv_n = 1.0 / static_cast<double>(n);
            for (std::size_t r = 0; r < rows; ++r) {
                double m1 = 0.0, m2 = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    const double gh = self.grad[r * n + j] * gv[j];
                    m1 += gh;
                    m2 += gh * (*xhat)[r * n + j];
                }
                m1 *= inv_n;
                m2 *= inv_n;
                for (std::size_t j = 0; j < n; ++j) {
                    const double gh = self.grad[r * n + j] * gv[j];
                    g[r * n + j] += (*inv_std)[r] * (gh - m1 - (*xhat)[r * n + j] * m2);
                }
            }
        });
    });
}

namespace {

struct ConvGeometry {
    std::size_t n, c, h, w, o, kh, kw, stride, pad, ho, wo;
    std::size_t col_rows() const { return c * kh * kw; }
    std::size_t col_cols() const { return ho * wo; }
};

void im2col(const double* img, const ConvGeometry& g, double* cols) {
    const std::size_t ncols = g.col_cols();
    for (std::size_t ch = 0; ch < g.c; ++ch)
        for (std::size_t ki = 0; ki < g.kh; ++ki)
            for (std::size_t kj = 0; kj < g.kw; ++kj) {
                double* dst = cols + ((ch * g.kh + ki) * g.kw + kj) * ncols;
                for (std::size_t oi = 0; oi < g.ho; ++oi) {
                    const long ii = static_cast<long>(oi * g.stride + ki) - static_cast<long>(g.pad);
                    for (std::size_t oj = 0; oj < g.wo; ++oj) {
                        const long jj = static_cast<long>(oj * g.stride + kj) - static_cast<long>(g.pad);
                        double v = 0.0;
                        if (ii >= 0 && jj >= 0 && ii < static_cast<long>(g.h) && jj < static_cast<long>(g.w))
                            v = img[(ch * g.h + static_cast<std::size_t>(ii)) * g.w + static_cast<std::size_t>(jj)];
                        dst[oi * g.wo + oj] = v;
                    }
                }
            }
}

void col2im_add(const double* cols, const ConvGeometry& g, double* img) {
    const std::size_t ncols = g.col_cols();
    for (std::size_t ch = 0; ch < g.c; ++ch)
        for (std::size_t ki = 0; ki < g.kh; ++ki)
            for (std::size_t kj = 0; kj < g.kw; ++kj) {
                const double* src = cols + ((ch * g.kh + ki) * g.kw + kj) * ncols;
                for (std::size_t oi = 0; oi < g.ho; ++oi) {
                    const long ii = static_cast<long>(oi * g.stride + ki) - static_cast<long>(g.pad);
                    if (ii < 0 || ii >= static_cast<long>(g.h)) continue;
                    for (std::size_t oj = 0; oj < g.wo; ++oj) {
                        const long jj = static_cast<long>(oj * g.stride + kj) - static_cast<long>(g.pad);
                        if (jj < 0 || jj >= static_cast<long>(g.w)) continue;
                        img[(ch * g.h + static_cast<std::size_t>(ii)) * g.w + static_cast<std::size_t>(jj)] +=
                            src[oi * g.wo + oj];
                    }
                }
            }
}

Tensor conv2d_impl(const Tensor& x, const Tensor& weight, const Tensor* bias, std::size_t stride,
                   std::size_t padding) {
    check_nchw("conv2d", x);
    if (weight.rank() != 4 || weight.dim(1) != x.dim(1))
        throw DimensionError("conv2d: weight " + shape_str(weight.shape()) + " incompatible with input " +
                             shape_str(x.shape()));
    if (stride == 0) throw ContractError("conv2d: stride must be >= 1");
    ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), weight.dim(0), weight.dim(2), weight.dim(3),
                   stride, padding, 0, 0};
    if (g.kh > g.h + 2 * padding || g.kw > g.w + 2 * padding)
        throw DimensionError("conv2d: kernel " + shape_str(weight.shape()) + " larger than padded input " +
                             shape_str(x.shape()) + " (padding " + std::to_string(padding) + ")");
    g.ho = (g.h + 2 * padding - g.kh) / stride + 1;
    g.wo = (g.w + 2 * padding - g.kw) / stride + 1;
    if (bias && bias->shape() != Shape{g.o})
        throw DimensionError("conv2d: bias " + shape_str(bias->shape()) + " for " + std::to_string(g.o) + " filters");

    const std::size_t in_sz = g.c * g.h * g.w, out_sz = g.o * g.ho * g.wo;
    std::vector<double> out(g.n * out_sz);
    std::vector<double> cols(g.col_rows() * g.col_cols());
    auto W = cmap(weight.data().data(), g.o, g.col_rows());
    for (std::size_t i = 0; i < g.n; ++i) {
        im2col(x.data().data() + i * in_sz, g, cols.data());
        mmap(out.data() + i * out_sz, g.o, g.col_cols()).noalias() = W * cmap(cols.data(), g.col_rows(), g.col_cols());
    }
    if (bias) {
        auto bd = bias->data();
        for (std::size_t i = 0; i < g.n; ++i)
            for (std::size_t oc = 0; oc < g.o; ++oc) {
                double* p = out.data() + i * out_sz + oc * g.ho * g.wo;
                for (std::size_t k = 0; k < g.ho * g.wo; ++k) p[k] += bd[oc];
            }
    }
    std::vector<Tensor> inputs{x, weight};
    if (bias) inputs.push_back(*bias);
    return make_op("conv2d", Shape{g.n, g.o, g.ho, g.wo}, std::move(out), std::move(inputs), [g](Node& self) {
        const std::size_t in_sz = g.c * g.h * g.w, out_sz = g.o * g.ho * g.wo;
        const auto& xv = self.inputs[0]->data;
        const auto& wv = self.inputs[1]->data;
        Node& xin = *self.inputs[0];
        Node& win = *self.inputs[1];
        std::vector<double> cols(g.col_rows() * g.col_cols());
        auto W = cmap(wv.data(), g.o, g.col_rows());
        for (std::size_t i = 0; i < g.n; ++i) {
            auto G = cmap(self.grad.data() + i * out_sz, g.o, g.col_cols());
            if (win.requires_grad) {
                im2col(xv.data() + i * in_sz, g, cols.data());
                mmap(win.grad.data(), g.o, g.col_rows()).noalias() +=
                    G * cmap(cols.data(), g.col_rows(), g.col_cols()).transpose();
            }
            if (xin.requires_grad) {
                mmap(cols.data(), g.col_rows(), g.col_cols()).noalias() = W.transpose() * G;
                col2im_add(cols.data(), g, xin.grad.data() + i * in_sz);
            }
        }
        if (self.inputs.size() > 2) {
            accumulate(self, 2, [&](std::vector<double>& gb) {
                for (std::size_t i = 0; i < g.n; ++i)
                    for (std::size_t oc = 0; oc < g.o; ++oc) {
                        const double* p = self.grad.data() + i * out_sz + oc * g.ho * g.wo;
                        for (std::size_t k = 0; k < g.ho * g.wo; ++k) gb[oc] += p[k];
                    }
            });
        }
    });
}

// Shared kernel of avg_unpool2d / upsample_nearest: forward replicates,
// backward sums each block (the exact adjoint of replication).
Tensor replicate2d(const char* name, const Tensor& x, std::size_t factor) {
    check_nchw(name, x);
    if (factor < 1) throw ContractError(std::string(name) + ": factor must be >= 1");
    const std::size_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t H = h * factor, W = w * factor;
    std::vector<double> out(nc * H * W);
    auto xd = x.data();
    for (std::size_t p = 0; p < nc; ++p)
        for (std::size_t i = 0; i < H; ++i)
            for (std::size_t j = 0; j < W; ++j) out[(p * H + i) * W + j] = xd[(p * h + i / factor) * w + j / factor];
    return make_op(name, Shape{x.dim(0), x.dim(1), H, W}, std::move(out), {x}, [nc, h, w, factor](Node& self) {
        const std::size_t H = h * factor, W = w * factor;
        accumulate(self, 0, [&](std::vector<double>& g) {
            for (std::size_t p = 0; p < nc; ++p)
                for (std::size_t i = 0; i < H; ++i)
                    for (std::size_t j = 0; j < W; ++j)
                        g[(p * h + i / factor) * w + j / factor] += self.grad[(p * H + i) * W + j];
        });
    });
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, std::size_t stride, std::size_t padding) {
    return conv2d_impl(x, weight, nullptr, stride, padding);
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride, std::size_t padding) {
    return conv2d_impl(x, weight, &bias, stride, padding);
}

Tensor avg_pool2d(const Tensor& x, std::size_t factor) {
    check_nchw("avg_pool2d", x);
    if (factor < 1) throw ContractError("avg_pool2d: factor must be >= 1");
    const std::size_t nc = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
    if (H % factor || W % factor)
        throw DimensionError("avg_pool2d: " + shape_str(x.shape()) + " not divisible by " + std::to_string(factor));
    const std::size_t h = H / factor, w = W / factor;
    const double inv = 1.0 / static_cast<double>(factor * factor);
    std::vector<double> out(nc * h * w, 0.0);
    auto xd = x.data();
    for (std::size_t p = 0; p < nc; ++p)
        for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j) {
                // Shifted by the first cell so a constant block pools to itself exactly.
                const double ref = xd[(p * H + i * factor) * W + j * factor];
                double s = 0.0;
                for (std::size_t a = 0; a < factor; ++a)
                    for (std::size_t b = 0; b < factor; ++b) s += xd[(p * H + i * factor + a) * W + j * factor + b] - ref;
                out[(p * h + i) * w + j] = ref + s * inv;
            }
    return make_op("avg_pool2d", Shape{x.dim(0), x.dim(1), h, w}, std::move(out), {x},
                   [nc, h, w, factor, inv](Node& self) {
                       const std::size_t H = h * factor, W = w * factor;
                       accumulate(self, 0, [&](std::vector<double>& g) {
                           for (std::size_t p = 0; p < nc; ++p)
                               for (std::size_t i = 0; i < H; ++i)
                                   for (std::size_t j = 0; j < W; ++j)
                                       g[(p * H + i) * W + j] += self.grad[(p * h + i / factor) * w + j / factor] * inv;
                       });
                   });
}

Tensor avg_unpool2d(const Tensor& x, std::size_t factor) { return replicate2d("avg_unpool2d", x, factor); }

Tensor upsample_nearest(const Tensor& x, std::size_t factor) { return replicate2d("upsample_nearest", x, factor); }

Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids) {
    if (table.rank() != 2) throw DimensionError("embedding_lookup: table must be 2-D, got " + shape_str(table.shape()));
    const std::size_t v = table.dim(0), d = table.dim(1);
    if (ids.empty()) throw ContractError("embedding_lookup: empty id list");
    std::vector<double> out(ids.size() * d);
    auto td = table.data();
    for (std::size_t r = 0; r < ids.size(); ++r) {
        if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= v)
            throw IndexError("embedding_lookup: id " + std::to_string(ids[r]) + " outside vocabulary of " +
                             std::to_string(v));
        std::copy_n(td.begin() + static_cast<std::size_t>(ids[r]) * d, d, out.begin() + r * d);
    }
    return make_op("embedding_lookup", Shape{ids.size(), d}, std::move(out), {table}, [ids, d](Node& self) {
        accumulate(self, 0, [&](std::vector<double>& g) {
            for (std::size_t r = 0; r < ids.size(); ++r)
                for (std::size_t j = 0; j < d; ++j) g[static_cast<std::size_t>(ids[r]) * d + j] += self.grad[r * d + j];
        });
    });
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets, Reduction reduction, int ignore_index) {
    if (logits.rank() != 2 || logits.dim(0) != targets.size())
        throw DimensionError("cross_entropy: logits " + shape_str(logits.shape()) + " for " +
                             std::to_string(targets.size()) + " targets");
    const std::size_t n = logits.dim(0), v = logits.dim(1);
    auto probs = std::make_shared<std::vector<double>>(n * v);
    auto ld = logits.data();
    double total = 0.0;
    std::size_t kept = 0;
    for (std::size_t r = 0; r < n; ++r) {
        const double* row = ld.data() + r * v;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < v; ++j) {
            double e = std::exp(row[j] - mx);
            (*probs)[r * v + j] = e;
            z += e;
        }
        for (std::size_t j = 0; j < v; ++j) (*probs)[r * v + j] /= z;
        if (targets[r] == ignore_index) continue;
        if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= v)
            throw IndexError("cross_entropy: target id " + std::to_string(targets[r]) + " outside " +
                             std::to_string(v) + " classes");
        total += -(row[targets[r]] - mx - std::log(z));
        ++kept;
    }
    const double denom = (reduction == Reduction::Mean && kept > 0) ? static_cast<double>(kept) : 1.0;
    return make_op("cross_entropy", Shape{}, {total / denom}, {logits},
                   [probs, targets, n, v, denom, ignore_index](Node& self) {
                       accumulate(self, 0, [&](std::vector<double>& g) {
                           const double g0 = self.grad[0] / denom;
                           for (std::size_t r = 0; r < n; ++r) {
                               if (targets[r] == ignore_index) continue;
                               for (std::size_t j = 0; j < v; ++j) g[r * v + j] += g0 * (*probs)[r * v + j];
                               g[r * v + static_cast<std::size_t>(targets[r])] -= g0;
                           }
                       });
                   });
}

}  // namespace ikd
