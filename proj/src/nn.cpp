#include "efi/nn.hpp"

#include "efi/errors.hpp"
#include "efi/rng.hpp"

#include <cmath>
#include <random>

namespace efi::nn {

Activation parse_activation(std::string_view name) {
    if (name == "tanh") return Activation::tanh;
    if (name == "relu") return Activation::relu;
    if (name == "sigmoid") return Activation::sigmoid;
    throw InvalidSpec("unknown activation '" + std::string(name) + "'");
}

std::string_view to_string(Activation a) {
    switch (a) {
        case Activation::tanh: return "tanh";
        case Activation::relu: return "relu";
        case Activation::sigmoid: return "sigmoid";
    }
    return "?";
}

void validate(const MlpSpec& spec) {
    if (spec.widths.size() < 3)
        throw InvalidSpec("MLP needs an input, at least one hidden layer and an output");
    for (std::size_t l = 0; l < spec.widths.size(); ++l) {
        if (spec.widths[l] == 0)
            throw InvalidSpec("MLP layer " + std::to_string(l) + " has zero width");
    }
}

std::size_t parameter_count(const MlpSpec& spec) {
    std::size_t total = 0;
    for (std::size_t l = 1; l < spec.widths.size(); ++l)
        total += spec.widths[l] * (spec.widths[l - 1] + 1);
    return total;
}

std::size_t weight_offset(const MlpSpec& spec, std::size_t layer) {
    std::size_t off = 0;
    for (std::size_t l = 1; l < layer; ++l) off += spec.widths[l] * (spec.widths[l - 1] + 1);
    return off;
}

std::size_t bias_offset(const MlpSpec& spec, std::size_t layer) {
    return weight_offset(spec, layer) + spec.widths[layer] * spec.widths[layer - 1];
}

MlpParams mlp_init(const MlpSpec& spec) {
    validate(spec);
    MlpParams p{spec, std::vector<double>(parameter_count(spec), 0.0)};
    Rng rng(derive_seed(spec.seed, 0x6e6e));
    for (std::size_t l = 1; l < spec.widths.size(); ++l) {
        const double fan_in = static_cast<double>(spec.widths[l - 1]);
        const double fan_out = static_cast<double>(spec.widths[l]);
        const double bound = std::sqrt(6.0 / (fan_in + fan_out));
        std::uniform_real_distribution<double> u(-bound, bound);
        const std::size_t off = weight_offset(spec, l);
        for (std::size_t k = 0; k < spec.widths[l] * spec.widths[l - 1]; ++k) p.flat[off + k] = u(rng);
    }
    return p;
}

MlpParams make_params(MlpSpec spec, std::vector<double> flat) {
    validate(spec);
    if (flat.size() != parameter_count(spec))
        throw DimensionError("flat parameter length " + std::to_string(flat.size()) +
                             " does not match spec count " +
                             std::to_string(parameter_count(spec)));
    return MlpParams{std::move(spec), std::move(flat)};
}

double activate(Activation a, double x) {
    switch (a) {
        case Activation::tanh: return std::tanh(x);
        case Activation::relu: return x > 0.0 ? x : 0.0;
        case Activation::sigmoid: return 1.0 / (1.0 + std::exp(-x));
    }
    return x;
}

double activate_derivative(Activation a, double pre) {
    switch (a) {
        case Activation::tanh: {
            const double t = std::tanh(pre);
            return 1.0 - t * t;
        }
        case Activation::relu: return pre > 0.0 ? 1.0 : 0.0;
        case Activation::sigmoid: {
            const double s = 1.0 / (1.0 + std::exp(-pre));
            return s * (1.0 - s);
        }
    }
    return 1.0;
}

namespace {

void check_shapes(const MlpSpec& spec, std::span<const double> flat, std::size_t input_len) {
    if (flat.size() != parameter_count(spec))
        throw DimensionError("parameter span length " + std::to_string(flat.size()) +
                             " does not match spec count " +
                             std::to_string(parameter_count(spec)));
    if (input_len != spec.input_width())
        throw DimensionError("input length " + std::to_string(input_len) +
                             " does not match input width " +
                             std::to_string(spec.input_width()));
}

// Pre-activations of every layer; index 0 holds the input itself.
std::vector<std::vector<double>> forward_tape(const MlpSpec& spec, std::span<const double> flat,
                                              std::span<const double> input) {
    const std::size_t layers = spec.num_layers();
    std::vector<std::vector<double>> pre(layers + 1);
    pre[0].assign(input.begin(), input.end());
    std::vector<double> act(input.begin(), input.end());
    for (std::size_t l = 1; l <= layers; ++l) {
        const std::size_t rows = spec.widths[l];
        const std::size_t cols = spec.widths[l - 1];
        const double* W = flat.data() + weight_offset(spec, l);
        const double* b = flat.data() + bias_offset(spec, l);
        pre[l].assign(rows, 0.0);
        for (std::size_t r = 0; r < rows; ++r) {
            double s = b[r];
            for (std::size_t c = 0; c < cols; ++c) s += W[r * cols + c] * act[c];
            pre[l][r] = s;
        }
        if (l == layers) break;
        act.resize(rows);
        for (std::size_t r = 0; r < rows; ++r) act[r] = activate(spec.activation, pre[l][r]);
    }
    return pre;
}

}  // namespace

std::vector<double> mlp_forward(const MlpSpec& spec, std::span<const double> flat,
                                std::span<const double> input) {
    check_shapes(spec, flat, input.size());
    auto pre = forward_tape(spec, flat, input);
    return std::move(pre.back());
}

std::vector<double> mlp_forward(const MlpParams& params, std::span<const double> input) {
    return mlp_forward(params.spec, params.flat, input);
}

MlpGradients mlp_backward(const MlpSpec& spec, std::span<const double> flat,
                          std::span<const double> input, std::span<const double> out_grad) {
    check_shapes(spec, flat, input.size());
    if (out_grad.size() != spec.output_width())
        throw DimensionError("output gradient length " + std::to_string(out_grad.size()) +
                             " does not match output width " +
                             std::to_string(spec.output_width()));
    const auto pre = forward_tape(spec, flat, input);
    const std::size_t layers = spec.num_layers();

    MlpGradients g{std::vector<double>(flat.size(), 0.0), {}};
    std::vector<double> delta(out_grad.begin(), out_grad.end());  // dL/d(pre_l)
    for (std::size_t l = layers; l >= 1; --l) {
        const std::size_t rows = spec.widths[l];
        const std::size_t cols = spec.widths[l - 1];
        const double* W = flat.data() + weight_offset(spec, l);
        double* gW = g.params.data() + weight_offset(spec, l);
        double* gb = g.params.data() + bias_offset(spec, l);

        std::vector<double> prev_act(cols);
        for (std::size_t c = 0; c < cols; ++c)
            prev_act[c] = l == 1 ? pre[0][c] : activate(spec.activation, pre[l - 1][c]);

        std::vector<double> prev_delta(cols, 0.0);
        for (std::size_t r = 0; r < rows; ++r) {
            gb[r] += delta[r];
            for (std::size_t c = 0; c < cols; ++c) {
                gW[r * cols + c] += delta[r] * prev_act[c];
                prev_delta[c] += W[r * cols + c] * delta[r];
            }
        }
        if (l > 1) {
            for (std::size_t c = 0; c < cols; ++c)
                prev_delta[c] *= activate_derivative(spec.activation, pre[l - 1][c]);
        }
        delta = std::move(prev_delta);
    }
    g.input = std::move(delta);
    return g;
}

MlpGradients mlp_backward(const MlpParams& params, std::span<const double> input,
                          std::span<const double> out_grad) {
    return mlp_backward(params.spec, params.flat, input, out_grad);
}

}  // namespace efi::nn
