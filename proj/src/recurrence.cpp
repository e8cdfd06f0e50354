#include "statex/recurrence.hpp"

#include "statex/error.hpp"

#include <algorithm>
#include <cmath>

namespace statex::recurrence {

namespace {

// One time step for every head. y receives heads*d_v outputs.
inline void advance(const Dims & d, const double * q, const double * k, const double * v, const double * a,
                    double * s, double * y) {
    for (std::size_t h = 0; h < d.heads; ++h) {
        const double * qh = q + h * d.d_k;
        const double * kh = k + h * d.d_k;
        const double * ah = a + h * d.d_k;
        const double * vh = v + h * d.d_v;
        double * sh = s + h * d.d_k * d.d_v;
        double * yh = y + h * d.d_v;
        std::fill(yh, yh + d.d_v, 0.0);
        for (std::size_t i = 0; i < d.d_k; ++i) {
            double * row = sh + i * d.d_v;
            const double ai = ah[i];
            const double ki = kh[i];
            const double qi = qh[i];
            for (std::size_t j = 0; j < d.d_v; ++j) {
                row[j] = ai * row[j] + ki * vh[j];
                yh[j] += qi * row[j];
            }
        }
    }
}

// State only, no output.
inline void update(const Dims & d, const double * k, const double * v, const double * a, double * s) {
    for (std::size_t h = 0; h < d.heads; ++h) {
        const double * kh = k + h * d.d_k;
        const double * ah = a + h * d.d_k;
        const double * vh = v + h * d.d_v;
        double * sh = s + h * d.d_k * d.d_v;
        for (std::size_t i = 0; i < d.d_k; ++i) {
            double * row = sh + i * d.d_v;
            const double ai = ah[i];
            const double ki = kh[i];
            for (std::size_t j = 0; j < d.d_v; ++j) {
                row[j] = ai * row[j] + ki * vh[j];
            }
        }
    }
}

} // namespace

void step_forward(const Dims & d, const Inputs & in, double * y, std::vector<double> & state,
                  std::vector<std::vector<double>> * snapshots, std::size_t interval) {
    const std::size_t wk = d.heads * d.d_k;
    const std::size_t wv = d.heads * d.d_v;
    if (state.size() != d.state()) {
        state.assign(d.state(), 0.0);
    }
    if (snapshots) {
        if (interval == 0) {
            throw ConfigError("step_forward: snapshot interval must be >= 1");
        }
        snapshots->clear();
    }
    for (std::size_t t = 0; t < in.steps; ++t) {
        if (snapshots && t % interval == 0) {
            snapshots->push_back(state);
        }
        advance(d, in.q + t * wk, in.k + t * wk, in.v + t * wv, in.alpha + t * wk, state.data(), y + t * wv);
    }
}

void step_backward(const Dims & d, const Inputs & in, const double * dy, Grads & g,
                   const std::vector<std::vector<double>> & snapshots, std::size_t interval) {
    const std::size_t wk = d.heads * d.d_k;
    const std::size_t wv = d.heads * d.d_v;
    const std::size_t segments = (in.steps + interval - 1) / interval;
    if (snapshots.size() != segments) {
        throw ShapeError("step_backward: snapshot count does not match sequence length");
    }
    std::fill(g.q, g.q + in.steps * wk, 0.0);
    std::fill(g.k, g.k + in.steps * wk, 0.0);
    std::fill(g.alpha, g.alpha + in.steps * wk, 0.0);
    std::fill(g.v, g.v + in.steps * wv, 0.0);

    using Row = Eigen::Map<Eigen::VectorXd>;
    using CRow = Eigen::Map<const Eigen::VectorXd>;
    // Columns of S evolve independently, so the state is processed in column
    // tiles small enough to keep a segment's recomputed states in cache.
    const std::size_t tile = std::min<std::size_t>(d.d_v, 32);
    const std::size_t dk = d.d_k;
    Buffer ds;
    Buffer states;

    for (std::size_t h = 0; h < d.heads; ++h) {
        for (std::size_t j0 = 0; j0 < d.d_v; j0 += tile) {
            const std::size_t tw = std::min(tile, d.d_v - j0);
            const std::size_t ns = dk * tw;
            const auto n = static_cast<Eigen::Index>(tw);
            ds.assign(ns, 0.0);
            for (std::size_t seg = segments; seg-- > 0;) {
                const std::size_t begin = seg * interval;
                const std::size_t len = std::min(in.steps, begin + interval) - begin;
                states.resize((len + 1) * ns);
                const double * snap = snapshots[seg].data() + h * dk * d.d_v + j0;
                for (std::size_t i = 0; i < dk; ++i) {
                    std::copy_n(snap + i * d.d_v, tw, states.data() + i * tw);
                }
                for (std::size_t s = 0; s < len; ++s) {
                    const std::size_t t = begin + s;
                    const double * kh = in.k + t * wk + h * dk;
                    const double * ah = in.alpha + t * wk + h * dk;
                    const double * vh = in.v + t * wv + h * d.d_v + j0;
                    const double * prev = states.data() + s * ns;
                    double * cur = states.data() + (s + 1) * ns;
                    for (std::size_t i = 0; i < dk; ++i) {
                        const double ai = ah[i];
                        const double ki = kh[i];
                        for (std::size_t j = 0; j < tw; ++j) {
                            cur[i * tw + j] = ai * prev[i * tw + j] + ki * vh[j];
                        }
                    }
                }
                for (std::size_t s = len; s-- > 0;) {
                    const std::size_t t = begin + s;
                    const std::size_t ko = t * wk + h * dk;
                    const std::size_t vo = t * wv + h * d.d_v + j0;
                    const double * qh = in.q + ko;
                    const double * kh = in.k + ko;
                    const double * ah = in.alpha + ko;
                    CRow v(in.v + vo, n);
                    CRow dyv(dy + vo, n);
                    Row dv(g.v + vo, n);
                    const double * cur = states.data() + (s + 1) * ns;
                    const double * prev = states.data() + s * ns;
                    for (std::size_t i = 0; i < dk; ++i) {
                        Row dsr(ds.data() + i * tw, n);
                        CRow scr(cur + i * tw, n);
                        CRow spr(prev + i * tw, n);
                        dsr += qh[i] * dyv;
                        g.q[ko + i] += scr.dot(dyv);
                        g.k[ko + i] += dsr.dot(v);
                        g.alpha[ko + i] += dsr.dot(spr);
                        dv += kh[i] * dsr;
                        dsr *= ah[i];
                    }
                }
            }
        }
    }
}

void chunk_forward(const Dims & d, const Inputs & in, double * y, std::vector<double> & state,
                   std::size_t chunk) {
    if (chunk == 0) {
        throw ConfigError("chunked_scan: chunk must be >= 1");
    }
    if (state.size() != d.state()) {
        state.assign(d.state(), 0.0);
    }
    if (chunk == 1) {
        // a chunk of one step is the recurrence itself
        step_forward(d, in, y, state);
        return;
    }
    using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    const std::size_t wk = d.heads * d.d_k;
    const std::size_t wv = d.heads * d.d_v;
    const auto dk = static_cast<Eigen::Index>(d.d_k);
    const auto dv = static_cast<Eigen::Index>(d.d_v);

    for (std::size_t begin = 0; begin < in.steps; begin += chunk) {
        const std::size_t len = std::min(chunk, in.steps - begin);
        const auto n = static_cast<Eigen::Index>(len);
        for (std::size_t h = 0; h < d.heads; ++h) {
            Mat q(n, dk), k(n, dk), b(n, dk), v(n, dv);
            for (std::size_t s = 0; s < len; ++s) {
                const std::size_t t = begin + s;
                for (std::size_t i = 0; i < d.d_k; ++i) {
                    const std::size_t idx = t * wk + h * d.d_k + i;
                    q(s, i) = in.q[idx];
                    k(s, i) = in.k[idx];
                    double prev = s ? b(s - 1, i) : 0.0;
                    b(s, i) = prev + std::log(in.alpha[idx]);
                }
                for (std::size_t j = 0; j < d.d_v; ++j) {
                    v(s, j) = in.v[t * wv + h * d.d_v + j];
                }
            }
            Eigen::Map<Mat> s0(state.data() + h * d.d_k * d.d_v, dk, dv);

            // inter-chunk contribution from the carried state
            Mat q_decayed = q.array() * b.array().exp();
            Mat out = q_decayed * s0;

            // intra-chunk causal scores with relative decays
            Mat scores = Mat::Zero(n, n);
            for (Eigen::Index t = 0; t < n; ++t) {
                for (Eigen::Index s = 0; s <= t; ++s) {
                    double acc = 0.0;
                    for (Eigen::Index i = 0; i < dk; ++i) {
                        acc += q(t, i) * k(s, i) * std::exp(b(t, i) - b(s, i));
                    }
                    scores(t, s) = acc;
                }
            }
            out.noalias() += scores * v;

            Mat k_decayed(n, dk);
            for (Eigen::Index s = 0; s < n; ++s) {
                k_decayed.row(s) = k.row(s).array() * (b.row(n - 1) - b.row(s)).array().exp();
            }
            Mat carried = s0;
            for (Eigen::Index i = 0; i < dk; ++i) {
                carried.row(i) *= std::exp(b(n - 1, i));
            }
            carried.noalias() += k_decayed.transpose() * v;
            s0 = carried;

            for (std::size_t s = 0; s < len; ++s) {
                for (std::size_t j = 0; j < d.d_v; ++j) {
                    y[(begin + s) * wv + h * d.d_v + j] = out(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(j));
                }
            }
        }
    }
}

} // namespace statex::recurrence
