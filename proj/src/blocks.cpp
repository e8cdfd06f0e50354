#include "statex/blocks.hpp"

#include "statex/error.hpp"
#include "statex/ops.hpp"
#include "statex/recurrence.hpp"

#include <cmath>

namespace statex {

namespace {

constexpr std::size_t kSnapshotInterval = 64;

std::size_t sequence_count(const Tensor & x, std::size_t seq_len) {
    if (seq_len == 0 || x.rows() % seq_len != 0) {
        throw ShapeError("block input has " + std::to_string(x.rows()) + " rows, not a multiple of seq_len " +
                         std::to_string(seq_len));
    }
    return x.rows() / seq_len;
}

// Runs the recurrence for every sequence of a stacked batch.
void scan_sequences(const recurrence::Dims & dims, const Tensor & q, const Tensor & k, const Tensor & v,
                    const Tensor & alpha, std::size_t seq_len, const ScanOptions & opt, Tensor & y,
                    std::vector<std::vector<std::vector<double>>> * snapshots, SequenceStates * states) {
    const std::size_t sequences = q.rows() / seq_len;
    const std::size_t wk = dims.heads * dims.d_k;
    const std::size_t wv = dims.heads * dims.d_v;
    if (states && states->size() != sequences) {
        states->assign(sequences, std::vector<double>(dims.state(), 0.0));
    }
    if (snapshots) {
        if (opt.scan != Scan::Step) {
            throw ConfigError("backward pass requires the step-recurrent scan");
        }
        snapshots->assign(sequences, {});
    }
    std::vector<double> local;
    for (std::size_t b = 0; b < sequences; ++b) {
        recurrence::Inputs in{q.data() + b * seq_len * wk, k.data() + b * seq_len * wk, v.data() + b * seq_len * wv,
                              alpha.data() + b * seq_len * wk, seq_len};
        std::vector<double> & st = states ? (*states)[b] : local;
        if (!states) {
            st.assign(dims.state(), 0.0);
        }
        double * out = y.data() + b * seq_len * wv;
        if (opt.scan == Scan::Step) {
            recurrence::step_forward(dims, in, out, st, snapshots ? &(*snapshots)[b] : nullptr, kSnapshotInterval);
        } else {
            recurrence::chunk_forward(dims, in, out, st, opt.chunk);
        }
    }
}

void scan_backward(const recurrence::Dims & dims, const Tensor & q, const Tensor & k, const Tensor & v,
                   const Tensor & alpha, std::size_t seq_len, const Tensor & dy,
                   const std::vector<std::vector<std::vector<double>>> & snapshots, Tensor & dq, Tensor & dk,
                   Tensor & dv, Tensor & dalpha) {
    const std::size_t sequences = q.rows() / seq_len;
    const std::size_t wk = dims.heads * dims.d_k;
    const std::size_t wv = dims.heads * dims.d_v;
    dq = Tensor(q.shape());
    dk = Tensor(k.shape());
    dv = Tensor(v.shape());
    dalpha = Tensor(alpha.shape());
    for (std::size_t b = 0; b < sequences; ++b) {
        const std::size_t ko = b * seq_len * wk;
        const std::size_t vo = b * seq_len * wv;
        recurrence::Inputs in{q.data() + ko, k.data() + ko, v.data() + vo, alpha.data() + ko, seq_len};
        recurrence::Grads g{dq.data() + ko, dk.data() + ko, dv.data() + vo, dalpha.data() + ko};
        recurrence::step_backward(dims, in, dy.data() + vo, g, snapshots[b], kSnapshotInterval);
    }
}

Tensor projection_backward(const Tensor & dz, const Tensor & xn, const Tensor & w, Tensor & dxn, Tensor & dw) {
    ops::matmul_backward(dz, xn, w, &dxn, &dw);
    return dxn;
}

// sigmoid(z)^(1/tau) computed as exp(-softplus(-z)/tau), floored.
Tensor gla_decay(const Tensor & za) {
    const auto n = static_cast<Eigen::Index>(za.size());
    Eigen::Map<const Eigen::ArrayXd> z(za.data(), n);
    Tensor a(za.shape());
    Eigen::Map<Eigen::ArrayXd> out(a.data(), n);
    const Eigen::ArrayXd neg = -z;
    out = ((neg > 30.0).select(neg, neg.exp().log1p()) * (-1.0 / kGateTau)).exp().max(kAlphaFloor);
    return a;
}

} // namespace

const Tensor & LayerParams::at(std::string_view name) const {
    auto it = tensors.find(std::string(name));
    if (it == tensors.end()) {
        throw ShapeError("layer " + std::to_string(index) + ": missing tensor '" + std::string(name) + "'");
    }
    return it->second;
}

const Tensor & ParamView::operator()(std::string_view name) const {
    auto it = map_->find(prefix_ + std::string(name));
    if (it == map_->end()) {
        throw ShapeError("missing parameter '" + prefix_ + std::string(name) + "'");
    }
    return it->second;
}

Tensor & GradView::operator()(std::string_view name) const {
    auto it = map_->find(prefix_ + std::string(name));
    if (it == map_->end()) {
        throw ShapeError("missing gradient slot '" + prefix_ + std::string(name) + "'");
    }
    return it->second;
}

// ----------------------------------------------------------------------------
// GLA

Tensor gla_forward(const ParamView & p, const LayerShape & shape, const Tensor & x, std::size_t seq_len,
                   const ScanOptions & opt, GlaCache * cache, SequenceStates * states) {
    sequence_count(x, seq_len);
    const std::size_t d = x.cols();
    Tensor inv_norm;
    Tensor xn = ops::rms_norm(x, p("norm"), d, &inv_norm);
    Tensor q = ops::matmul(xn, p("w_q"));
    Tensor k = ops::matmul(xn, p("w_k"));
    Tensor v = ops::matmul(xn, p("w_v"));
    Tensor za = ops::matmul(xn, p("w_a"));
    Tensor zr = ops::matmul(xn, p("w_r"));
    ops::add_row_bias(zr, p("b_r"));

    Tensor alpha = gla_decay(za);

    recurrence::Dims dims{shape.heads, shape.d_k, shape.d_v};
    Tensor o_raw({x.rows(), shape.heads * shape.d_v});
    scan_sequences(dims, q, k, v, alpha, seq_len, opt, o_raw, cache ? &cache->snapshots : nullptr, states);

    Tensor inv_out;
    Tensor o_norm = ops::rms_norm(o_raw, p("out_norm"), shape.d_v, &inv_out);
    Tensor r = ops::silu(zr);
    Tensor gated = ops::mul(r, o_norm);
    Tensor y = ops::matmul(gated, p("w_o"));

    if (cache) {
        cache->x = x;
        cache->inv_norm = std::move(inv_norm);
        cache->xn = std::move(xn);
        cache->q = std::move(q);
        cache->k = std::move(k);
        cache->v = std::move(v);
        cache->za = std::move(za);
        cache->alpha = std::move(alpha);
        cache->zr = std::move(zr);
        cache->o_raw = std::move(o_raw);
        cache->inv_out = std::move(inv_out);
        cache->o_norm = std::move(o_norm);
        cache->r = std::move(r);
        cache->gated = std::move(gated);
    }
    return y;
}

Tensor gla_backward(const ParamView & p, const LayerShape & shape, const Tensor & dy, std::size_t seq_len,
                    const GlaCache & c, const GradView & g) {
    const std::size_t d = c.x.cols();
    Tensor dgated(c.gated.shape());
    ops::matmul_backward(dy, c.gated, p("w_o"), &dgated, &g("w_o"));

    Tensor dr = ops::mul(dgated, c.o_norm);
    Tensor do_norm = ops::mul(dgated, c.r);
    Tensor dzr = ops::silu_backward(c.zr, dr);
    ops::row_bias_backward(dzr, g("b_r"));
    Tensor do_raw = ops::rms_norm_backward(do_norm, c.o_raw, p("out_norm"), shape.d_v, c.inv_out, &g("out_norm"));

    recurrence::Dims dims{shape.heads, shape.d_k, shape.d_v};
    Tensor dq, dk, dv, dalpha;
    scan_backward(dims, c.q, c.k, c.v, c.alpha, seq_len, do_raw, c.snapshots, dq, dk, dv, dalpha);

    Tensor dza = ops::sigmoid(c.za);
    for (std::size_t i = 0; i < dza.size(); ++i) {
        const double a = c.alpha[i];
        dza[i] = a > kAlphaFloor ? dalpha[i] * a * (1.0 - dza[i]) / kGateTau : 0.0;
    }

    Tensor dxn({c.x.rows(), d});
    projection_backward(dq, c.xn, p("w_q"), dxn, g("w_q"));
    projection_backward(dk, c.xn, p("w_k"), dxn, g("w_k"));
    projection_backward(dv, c.xn, p("w_v"), dxn, g("w_v"));
    projection_backward(dza, c.xn, p("w_a"), dxn, g("w_a"));
    projection_backward(dzr, c.xn, p("w_r"), dxn, g("w_r"));
    return ops::rms_norm_backward(dxn, c.x, p("norm"), d, c.inv_norm, &g("norm"));
}

// ----------------------------------------------------------------------------
// Mamba2

Tensor mamba2_forward(const ParamView & p, const LayerShape & shape, DeltaActivation act, const Tensor & x,
                      std::size_t seq_len, const ScanOptions & opt, Mamba2Cache * cache, SequenceStates * states) {
    sequence_count(x, seq_len);
    const std::size_t n = x.rows();
    const std::size_t d = x.cols();
    const std::size_t heads = shape.heads;
    const std::size_t dk = shape.d_k;
    const std::size_t dvh = shape.d_v;

    Tensor inv_norm;
    Tensor xn = ops::rms_norm(x, p("norm"), d, &inv_norm);
    Tensor v = ops::matmul(xn, p("w_v"));
    Tensor k = ops::matmul_stable(xn, p("w_k"));
    Tensor q = ops::matmul_stable(xn, p("w_q"));
    Tensor zdt = ops::matmul(xn, p("w_dt"));
    ops::add_row_bias(zdt, p("dt_bias"));
    Tensor delta = act == DeltaActivation::Softplus ? ops::softplus(zdt) : ops::silu(zdt);
    Tensor zz = ops::matmul(xn, p("w_z"));
    Tensor z = ops::silu(zz);

    const Tensor & a = p("a");
    Tensor alpha({n, heads});
    for (std::size_t t = 0; t < n; ++t) {
        for (std::size_t h = 0; h < heads; ++h) {
            double av = std::exp(-delta[t * heads + h] * a[h]);
            alpha[t * heads + h] = av < kAlphaFloor ? kAlphaFloor : av;
        }
    }

    // Shared q/k broadcast to every head; delta folds into the key.
    Tensor qh({n, heads * dk});
    Tensor kh({n, heads * dk});
    Tensor ah({n, heads * dk});
    for (std::size_t t = 0; t < n; ++t) {
        for (std::size_t h = 0; h < heads; ++h) {
            const double dl = delta[t * heads + h];
            const double al = alpha[t * heads + h];
            for (std::size_t i = 0; i < dk; ++i) {
                qh[t * heads * dk + h * dk + i] = q[t * dk + i];
                kh[t * heads * dk + h * dk + i] = dl * k[t * dk + i];
                ah[t * heads * dk + h * dk + i] = al;
            }
        }
    }

    recurrence::Dims dims{heads, dk, dvh};
    Tensor o({n, heads * dvh});
    scan_sequences(dims, qh, kh, v, ah, seq_len, opt, o, cache ? &cache->snapshots : nullptr, states);

    const Tensor & d_skip = p("d_skip");
    for (std::size_t t = 0; t < n; ++t) {
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t j = 0; j < dvh; ++j) {
                const std::size_t idx = t * heads * dvh + h * dvh + j;
                o[idx] += d_skip[h] * v[idx];
            }
        }
    }
    Tensor pz = ops::mul(o, z);
    Tensor inv_out;
    Tensor p_norm = ops::rms_norm(pz, p("out_norm"), dvh, &inv_out);
    Tensor y = ops::matmul(p_norm, p("w_o"));

    if (cache) {
        cache->x = x;
        cache->inv_norm = std::move(inv_norm);
        cache->xn = std::move(xn);
        cache->v = std::move(v);
        cache->k = std::move(k);
        cache->q = std::move(q);
        cache->zdt = std::move(zdt);
        cache->delta = std::move(delta);
        cache->alpha = std::move(alpha);
        cache->zz = std::move(zz);
        cache->z = std::move(z);
        cache->qh = std::move(qh);
        cache->kh = std::move(kh);
        cache->ah = std::move(ah);
        cache->o = std::move(o);
        cache->p = std::move(pz);
        cache->inv_out = std::move(inv_out);
        cache->p_norm = std::move(p_norm);
    }
    return y;
}

Tensor mamba2_backward(const ParamView & p, const LayerShape & shape, DeltaActivation act, const Tensor & dy,
                       std::size_t seq_len, const Mamba2Cache & c, const GradView & g) {
    const std::size_t n = c.x.rows();
    const std::size_t d = c.x.cols();
    const std::size_t heads = shape.heads;
    const std::size_t dk = shape.d_k;
    const std::size_t dvh = shape.d_v;

    Tensor dp_norm(c.p_norm.shape());
    ops::matmul_backward(dy, c.p_norm, p("w_o"), &dp_norm, &g("w_o"));
    Tensor dpz = ops::rms_norm_backward(dp_norm, c.p, p("out_norm"), dvh, c.inv_out, &g("out_norm"));
    Tensor dout = ops::mul(dpz, c.z);
    Tensor dz = ops::mul(dpz, c.o);
    Tensor dzz = ops::silu_backward(c.zz, dz);

    recurrence::Dims dims{heads, dk, dvh};
    Tensor dqh, dkh, dv, dah;
    scan_backward(dims, c.qh, c.kh, c.v, c.ah, seq_len, dout, c.snapshots, dqh, dkh, dv, dah);

    // skip connection D_h v
    const Tensor & d_skip = p("d_skip");
    Tensor & gd = g("d_skip");
    for (std::size_t t = 0; t < n; ++t) {
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t j = 0; j < dvh; ++j) {
                const std::size_t idx = t * heads * dvh + h * dvh + j;
                gd[h] += dout[idx] * c.v[idx];
                dv[idx] += d_skip[h] * dout[idx];
            }
        }
    }

    Tensor dq({n, dk});
    Tensor dk_t({n, dk});
    Tensor ddelta({n, heads});
    Tensor dalpha({n, heads});
    for (std::size_t t = 0; t < n; ++t) {
        for (std::size_t h = 0; h < heads; ++h) {
            const double dl = c.delta[t * heads + h];
            double dd = 0.0;
            double da = 0.0;
            for (std::size_t i = 0; i < dk; ++i) {
                const std::size_t idx = t * heads * dk + h * dk + i;
                dq[t * dk + i] += dqh[idx];
                dk_t[t * dk + i] += dl * dkh[idx];
                dd += dkh[idx] * c.k[t * dk + i];
                da += dah[idx];
            }
            ddelta[t * heads + h] = dd;
            dalpha[t * heads + h] = da;
        }
    }

    const Tensor & a = p("a");
    Tensor & ga = g("a");
    for (std::size_t t = 0; t < n; ++t) {
        for (std::size_t h = 0; h < heads; ++h) {
            const double al = c.alpha[t * heads + h];
            if (al > kAlphaFloor) {
                const double dl = c.delta[t * heads + h];
                ddelta[t * heads + h] += dalpha[t * heads + h] * (-a[h] * al);
                ga[h] += dalpha[t * heads + h] * (-dl * al);
            }
        }
    }
    Tensor dzdt = act == DeltaActivation::Softplus ? ops::softplus_backward(c.zdt, ddelta)
                                                   : ops::silu_backward(c.zdt, ddelta);
    ops::row_bias_backward(dzdt, g("dt_bias"));

    Tensor dxn({n, d});
    projection_backward(dv, c.xn, p("w_v"), dxn, g("w_v"));
    projection_backward(dk_t, c.xn, p("w_k"), dxn, g("w_k"));
    projection_backward(dq, c.xn, p("w_q"), dxn, g("w_q"));
    projection_backward(dzdt, c.xn, p("w_dt"), dxn, g("w_dt"));
    projection_backward(dzz, c.xn, p("w_z"), dxn, g("w_z"));
    return ops::rms_norm_backward(dxn, c.x, p("norm"), d, c.inv_norm, &g("norm"));
}

// ----------------------------------------------------------------------------
// FFN

Tensor ffn_forward(const ParamView & p, const Tensor & x, FfnCache * cache) {
    const std::size_t d = x.cols();
    Tensor inv_norm;
    Tensor xn = ops::rms_norm(x, p("norm"), d, &inv_norm);
    Tensor gate = ops::matmul(xn, p("w_gate"));
    Tensor up = ops::matmul(xn, p("w_up"));
    Tensor hidden = ops::mul(ops::silu(gate), up);
    Tensor y = ops::matmul(hidden, p("w_down"));
    if (cache) {
        cache->x = x;
        cache->inv_norm = std::move(inv_norm);
        cache->xn = std::move(xn);
        cache->gate = std::move(gate);
        cache->up = std::move(up);
        cache->hidden = std::move(hidden);
    }
    return y;
}

Tensor ffn_backward(const ParamView & p, const Tensor & dy, const FfnCache & c, const GradView & g) {
    const std::size_t d = c.x.cols();
    Tensor dhidden(c.hidden.shape());
    ops::matmul_backward(dy, c.hidden, p("w_down"), &dhidden, &g("w_down"));
    Tensor dgate = ops::silu_backward(c.gate, ops::mul(dhidden, c.up));
    Tensor dup = ops::mul(dhidden, ops::silu(c.gate));
    Tensor dxn({c.x.rows(), d});
    projection_backward(dgate, c.xn, p("w_gate"), dxn, g("w_gate"));
    projection_backward(dup, c.xn, p("w_up"), dxn, g("w_up"));
    return ops::rms_norm_backward(dxn, c.x, p("norm"), d, c.inv_norm, &g("norm"));
}

// ----------------------------------------------------------------------------
// Single-sequence entry points

std::pair<Tensor, Tensor> gla_head_step(const Tensor & s_prev, const Tensor & q, const Tensor & k, const Tensor & v,
                                        const Tensor & alpha) {
    const std::size_t dk = k.size();
    const std::size_t dv = v.size();
    if (q.size() != dk || alpha.size() != dk || s_prev.size() != dk * dv) {
        throw ShapeError("gla_head_step: S " + shape_str(s_prev.shape()) + ", q " + shape_str(q.shape()) + ", k " +
                         shape_str(k.shape()) + ", v " + shape_str(v.shape()) + ", alpha " +
                         shape_str(alpha.shape()));
    }
    std::vector<double> state(s_prev.values().begin(), s_prev.values().end());
    Tensor y({dv});
    recurrence::Dims dims{1, dk, dv};
    recurrence::Inputs in{q.data(), k.data(), v.data(), alpha.data(), 1};
    recurrence::step_forward(dims, in, y.data(), state);
    return {Tensor({dk, dv}, std::move(state)), std::move(y)};
}

namespace {

void check_finite(const Tensor & y, std::size_t layer) {
    if (!y.all_finite()) {
        throw NumericError("non-finite activations in layer " + std::to_string(layer));
    }
}

} // namespace

Tensor gla_block_forward(const Tensor & x_seq, const LayerParams & params) {
    Tensor y = gla_forward(ParamView(params.tensors, ""), params.shape, x_seq, x_seq.rows(), ScanOptions{});
    check_finite(y, params.index);
    return y;
}

Tensor mamba2_block_forward(const Tensor & x_seq, const LayerParams & params, DeltaActivation act) {
    Tensor y = mamba2_forward(ParamView(params.tensors, ""), params.shape, act, x_seq, x_seq.rows(), ScanOptions{});
    check_finite(y, params.index);
    return y;
}

Tensor chunked_scan(const Tensor & x_seq, const LayerParams & params, std::size_t chunk, DeltaActivation act) {
    if (chunk == 0) {
        throw ConfigError("chunked_scan: chunk must be >= 1");
    }
    ScanOptions opt{Scan::Chunked, chunk};
    ParamView view(params.tensors, "");
    Tensor y = params.family == Family::Gla
                   ? gla_forward(view, params.shape, x_seq, x_seq.rows(), opt)
                   : mamba2_forward(view, params.shape, act, x_seq, x_seq.rows(), opt);
    check_finite(y, params.index);
    return y;
}

} // namespace statex
