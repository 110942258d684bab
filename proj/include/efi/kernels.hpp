#pragma once

// Batched MLP evaluation over many observations at once. Each column of an
// input matrix is one observation. The default kernels split the columns
// into fixed-size chunks processed by an OpenMP worksharing loop; parameter
// gradients are reduced in chunk order, so results do not depend on the
// number of threads. The `serial` namespace holds the reference versions,
// which simply loop over columns with the single-observation routines.

#include "efi/nn.hpp"

#include <Eigen/Dense>

#include <span>
#include <vector>

namespace efi::kernels {

using Matrix = Eigen::MatrixXd;

inline constexpr Eigen::Index kChunkColumns = 64;

struct BatchTape {
    Matrix input;
    std::vector<Matrix> pre;  // pre[l]: d_l x N pre-activation, l = 1..H
    std::vector<Matrix> act;  // act[l]: d_l x N post-activation, l = 1..H-1
};

/// Returns d_H x N outputs. Fills `tape` when non-null (needed for backward).
Matrix forward(const nn::MlpSpec& spec, std::span<const double> flat, const Matrix& inputs,
               BatchTape* tape = nullptr);

/// Accumulates the column-summed parameter gradient into `param_grad` and,
/// when `input_grads` is non-null, writes d_0 x N per-column input gradients.
void backward(const nn::MlpSpec& spec, std::span<const double> flat, const BatchTape& tape,
              const Matrix& out_grads, std::span<double> param_grad, Matrix* input_grads);

/// Number of OpenMP threads the kernels will use (1 without OpenMP).
int max_threads();

namespace serial {

Matrix forward(const nn::MlpSpec& spec, std::span<const double> flat, const Matrix& inputs);

void backward(const nn::MlpSpec& spec, std::span<const double> flat, const Matrix& inputs,
              const Matrix& out_grads, std::span<double> param_grad, Matrix* input_grads);

}  // namespace serial

}  // namespace efi::kernels
