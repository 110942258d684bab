#pragma once

// Fully connected feed-forward network with hidden-layer activation and a
// linear output layer. Parameters live in one flat array, laid out layer by
// layer as a row-major weight matrix (d_l x d_{l-1}) followed by its bias.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace efi::nn {

enum class Activation { tanh, relu, sigmoid };

Activation parse_activation(std::string_view name);
std::string_view to_string(Activation a);

struct MlpSpec {
    std::vector<std::size_t> widths;  // d_0 (input) ... d_H (output)
    Activation activation = Activation::tanh;
    std::uint64_t seed = 0;

    std::size_t input_width() const { return widths.front(); }
    std::size_t output_width() const { return widths.back(); }
    std::size_t num_layers() const { return widths.size() - 1; }
};

/// Throws InvalidSpec unless there is at least one hidden layer and every width is positive.
void validate(const MlpSpec& spec);

/// Sum over layers of d_l * (d_{l-1} + 1).
std::size_t parameter_count(const MlpSpec& spec);

/// Offset of layer l's weight block inside the flat array (l is 1-based).
std::size_t weight_offset(const MlpSpec& spec, std::size_t layer);
std::size_t bias_offset(const MlpSpec& spec, std::size_t layer);

struct MlpParams {
    MlpSpec spec;
    std::vector<double> flat;
};

/// Glorot-uniform weights, zero biases. Deterministic in spec.seed.
MlpParams mlp_init(const MlpSpec& spec);

/// Wraps an existing flat vector; checks its length.
MlpParams make_params(MlpSpec spec, std::vector<double> flat);

double activate(Activation a, double x);
/// Derivative expressed through the pre-activation value.
double activate_derivative(Activation a, double pre);

std::vector<double> mlp_forward(const MlpParams& params, std::span<const double> input);

/// Same as mlp_forward but on a raw parameter span (used when the weights are
/// a slice of a larger vector, e.g. the data-model networks inside theta).
std::vector<double> mlp_forward(const MlpSpec& spec, std::span<const double> flat,
                                std::span<const double> input);

struct MlpGradients {
    std::vector<double> params;
    std::vector<double> input;
};

/// Reverse-mode gradients of a scalar loss L given out_grad = dL/d(output).
MlpGradients mlp_backward(const MlpParams& params, std::span<const double> input,
                          std::span<const double> out_grad);
MlpGradients mlp_backward(const MlpSpec& spec, std::span<const double> flat,
                          std::span<const double> input, std::span<const double> out_grad);

}  // namespace efi::nn
