#pragma once

#include <cstddef>
#include <vector>

#include "statex/tensor.hpp"

// Diagonal-decay linear recurrence shared by both families:
//   S_t = diag(alpha_t) S_{t-1} + k_t^T v_t,   y_t = q_t S_t
// run independently per head. Rows are time steps; head h owns columns
// [h*d_k, (h+1)*d_k) of q/k/alpha and [h*d_v, (h+1)*d_v) of v/y.
namespace statex::recurrence {

struct Dims {
    std::size_t heads = 0;
    std::size_t d_k = 0;
    std::size_t d_v = 0;
    std::size_t state() const { return heads * d_k * d_v; }
};

// Row-major pointers to one sequence of `steps` rows.
struct Inputs {
    const double * q = nullptr;
    const double * k = nullptr;
    const double * v = nullptr;
    const double * alpha = nullptr;
    std::size_t steps = 0;
};

struct Grads {
    double * q = nullptr;
    double * k = nullptr;
    double * v = nullptr;
    double * alpha = nullptr;
};

// Step-by-step form. `state` holds heads*d_k*d_v values and is updated in place.
// When `snapshots` is non-null the state entering every `interval`-th step is saved.
void step_forward(const Dims & dims, const Inputs & in, double * y, std::vector<double> & state,
                  std::vector<std::vector<double>> * snapshots = nullptr, std::size_t interval = 64);

// Reverse pass over one sequence that started from a zero state. Gradients
// are written (not accumulated). Recomputes states segment by segment from
// the snapshots taken by step_forward with the same interval.
void step_backward(const Dims & dims, const Inputs & in, const double * dy, Grads & grads,
                   const std::vector<std::vector<double>> & snapshots, std::size_t interval = 64);

// Chunkwise-parallel form: identical mathematics, evaluated block by block
// with log-space cumulative decays inside each chunk.
void chunk_forward(const Dims & dims, const Inputs & in, double * y, std::vector<double> & state,
                   std::size_t chunk);

} // namespace statex::recurrence
