#include "statex/ops.hpp"

#include "statex/error.hpp"

#include <algorithm>
#include <cmath>

namespace statex::ops {

namespace {

Eigen::Map<Eigen::ArrayXd> arr(Tensor & t) {
    return {t.data(), static_cast<Eigen::Index>(t.size())};
}

Eigen::Map<const Eigen::ArrayXd> arr(const Tensor & t) {
    return {t.data(), static_cast<Eigen::Index>(t.size())};
}

} // namespace


namespace {

void require_same(const Tensor & a, const Tensor & b, const char * what) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(what) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

} // namespace

Tensor matmul(const Tensor & a, const Tensor & b) {
    if (a.cols() != b.rows() || b.ndim() != 2) {
        throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    Tensor c({a.rows(), b.cols()});
    c.mat().noalias() = a.mat() * b.mat();
    return c;
}

Tensor matmul_stable(const Tensor & a, const Tensor & b) {
    if (a.cols() != b.rows() || b.ndim() != 2) {
        throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    // Fixed-width, zero-padded column panels: a column's value then depends
    // only on its own weights, never on how many columns sit beside it.
    constexpr std::size_t panel = 32;
    const std::size_t n = b.cols(), kdim = b.rows(), m = a.rows();
    Tensor c({m, n});
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> bp(kdim, panel), cp(m, panel);
    for (std::size_t c0 = 0; c0 < n; c0 += panel) {
        const std::size_t w = std::min(panel, n - c0);
        bp.setZero();
        bp.leftCols(w) = b.mat().middleCols(c0, w);
        cp.noalias() = a.mat() * bp;
        c.mat().middleCols(c0, w) = cp.leftCols(w);
    }
    return c;
}

void matmul_backward(const Tensor & dc, const Tensor & a, const Tensor & b, Tensor * da, Tensor * db) {
    if (da) {
        da->mat().noalias() += dc.mat() * b.mat().transpose();
    }
    if (db) {
        db->mat().noalias() += a.mat().transpose() * dc.mat();
    }
}

Tensor add(const Tensor & a, const Tensor & b) {
    require_same(a, b, "add");
    Tensor c = a;
    for (std::size_t i = 0; i < c.size(); ++i) {
        c[i] += b[i];
    }
    return c;
}

Tensor mul(const Tensor & a, const Tensor & b) {
    require_same(a, b, "mul");
    Tensor c(a.shape());
    arr(c) = arr(a) * arr(b);
    return c;
}

void add_row_bias(Tensor & x, const Tensor & bias) {
    if (bias.size() != x.cols()) {
        throw ShapeError("add_row_bias: bias " + shape_str(bias.shape()) + " for " + shape_str(x.shape()));
    }
    x.mat().rowwise() += bias.mat().row(0);
}

void row_bias_backward(const Tensor & dy, Tensor & dbias) {
    dbias.mat().row(0) += dy.mat().colwise().sum();
}

double sigmoid(double x) {
    if (x >= 0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    double e = std::exp(x);
    return e / (1.0 + e);
}

double silu(double x) {
    return x * sigmoid(x);
}

double silu_grad(double x) {
    double s = sigmoid(x);
    return s * (1.0 + x * (1.0 - s));
}

double softplus(double x) {
    return x > 30.0 ? x : std::log1p(std::exp(x));
}

double softplus_inv(double y) {
    return y > 30.0 ? y : std::log(std::expm1(y));
}

// Vectorized forms. exp(-x) overflowing to inf still gives sigmoid 0.
Tensor sigmoid(const Tensor & x) {
    Tensor y(x.shape());
    arr(y) = ((-arr(x)).exp() + 1.0).inverse();
    return y;
}

Tensor silu(const Tensor & x) {
    Tensor y(x.shape());
    arr(y) = arr(x) * ((-arr(x)).exp() + 1.0).inverse();
    return y;
}

Tensor silu_backward(const Tensor & x, const Tensor & dy) {
    require_same(x, dy, "silu_backward");
    Tensor dx(x.shape());
    Tensor s = sigmoid(x);
    arr(dx) = arr(dy) * arr(s) * (1.0 + arr(x) * (1.0 - arr(s)));
    return dx;
}

Tensor softplus(const Tensor & x) {
    Tensor y(x.shape());
    arr(y) = (arr(x) > 30.0).select(arr(x), arr(x).exp().log1p());
    return y;
}

Tensor softplus_backward(const Tensor & x, const Tensor & dy) {
    require_same(x, dy, "softplus_backward");
    Tensor dx(x.shape());
    arr(dx) = arr(dy) * arr(sigmoid(x));
    return dx;
}

Tensor exp(const Tensor & x) {
    Tensor y(x.shape());
    arr(y) = arr(x).exp();
    return y;
}

Tensor rms_norm(const Tensor & x, const Tensor & scale, std::size_t group, Tensor * inv_rms) {
    const std::size_t n = x.rows();
    const std::size_t c = x.cols();
    if (group == 0 || c % group != 0 || scale.size() != c) {
        throw ShapeError("rms_norm: x " + shape_str(x.shape()) + ", scale " + shape_str(scale.shape()) +
                         ", group " + std::to_string(group));
    }
    const std::size_t groups = c / group;
    Tensor y(x.shape());
    if (inv_rms) {
        *inv_rms = Tensor({n, groups});
    }
    for (std::size_t r = 0; r < n; ++r) {
        const double * xr = x.data() + r * c;
        double * yr = y.data() + r * c;
        for (std::size_t g = 0; g < groups; ++g) {
            double ss = 0.0;
            for (std::size_t j = g * group; j < (g + 1) * group; ++j) {
                ss += xr[j] * xr[j];
            }
            double inv = 1.0 / std::sqrt(ss / static_cast<double>(group) + kNormEps);
            for (std::size_t j = g * group; j < (g + 1) * group; ++j) {
                yr[j] = xr[j] * inv * scale[j];
            }
            if (inv_rms) {
                (*inv_rms)[r * groups + g] = inv;
            }
        }
    }
    return y;
}

Tensor rms_norm_backward(const Tensor & dy, const Tensor & x, const Tensor & scale, std::size_t group,
                         const Tensor & inv_rms, Tensor * dscale) {
    require_same(dy, x, "rms_norm_backward");
    const std::size_t n = x.rows();
    const std::size_t c = x.cols();
    const std::size_t groups = c / group;
    Tensor dx(x.shape());
    for (std::size_t r = 0; r < n; ++r) {
        const double * xr = x.data() + r * c;
        const double * dyr = dy.data() + r * c;
        double * dxr = dx.data() + r * c;
        for (std::size_t g = 0; g < groups; ++g) {
            const double inv = inv_rms[r * groups + g];
            double dot = 0.0;
            for (std::size_t j = g * group; j < (g + 1) * group; ++j) {
                double xhat = xr[j] * inv;
                dot += dyr[j] * scale[j] * xhat;
                if (dscale) {
                    (*dscale)[j] += dyr[j] * xhat;
                }
            }
            dot /= static_cast<double>(group);
            for (std::size_t j = g * group; j < (g + 1) * group; ++j) {
                double xhat = xr[j] * inv;
                dxr[j] = inv * (dyr[j] * scale[j] - xhat * dot);
            }
        }
    }
    return dx;
}

double cross_entropy(const Tensor & logits, std::span<const int> targets, Tensor * dlogits) {
    const std::size_t n = logits.rows();
    const std::size_t v = logits.cols();
    if (targets.size() != n) {
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(n) + " rows");
    }
    if (dlogits) {
        *dlogits = Tensor(logits.shape());
    }
    std::size_t counted = 0;
    for (int t : targets) {
        counted += t >= 0;
    }
    if (counted == 0) {
        return 0.0;
    }
    const double inv_count = 1.0 / static_cast<double>(counted);
    double total = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        if (targets[r] < 0) {
            continue;
        }
        if (static_cast<std::size_t>(targets[r]) >= v) {
            throw ShapeError("cross_entropy: target " + std::to_string(targets[r]) + " out of range");
        }
        const double * lr = logits.data() + r * v;
        double mx = *std::max_element(lr, lr + v);
        double z = 0.0;
        for (std::size_t j = 0; j < v; ++j) {
            z += std::exp(lr[j] - mx);
        }
        double lse = mx + std::log(z);
        total += lse - lr[targets[r]];
        if (dlogits) {
            double * dr = dlogits->data() + r * v;
            for (std::size_t j = 0; j < v; ++j) {
                dr[j] = std::exp(lr[j] - lse) * inv_count;
            }
            dr[targets[r]] -= inv_count;
        }
    }
    return total * inv_count;
}

} // namespace statex::ops
