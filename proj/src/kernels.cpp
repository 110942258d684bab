#include "efi/kernels.hpp"

#include "efi/errors.hpp"

#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace efi::kernels {

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstWeights = Eigen::Map<const RowMajor>;
using ConstBias = Eigen::Map<const Eigen::VectorXd>;

void check(const nn::MlpSpec& spec, std::span<const double> flat, const Matrix& inputs) {
    if (flat.size() != nn::parameter_count(spec))
        throw DimensionError("parameter span does not match spec");
    if (static_cast<std::size_t>(inputs.rows()) != spec.input_width())
        throw DimensionError("input rows " + std::to_string(inputs.rows()) +
                             " do not match input width " + std::to_string(spec.input_width()));
}

void apply_activation(nn::Activation a, const Eigen::Ref<const Matrix>& pre,
                      Eigen::Ref<Matrix> out) {
    switch (a) {
        case nn::Activation::tanh: out = pre.array().tanh(); break;
        case nn::Activation::relu: out = pre.array().max(0.0); break;
        case nn::Activation::sigmoid: out = (1.0 + (-pre.array()).exp()).inverse(); break;
    }
}

// d act / d pre written through the already-computed activation where possible.
void scale_by_derivative(nn::Activation a, const Eigen::Ref<const Matrix>& pre,
                         const Eigen::Ref<const Matrix>& act, Eigen::Ref<Matrix> delta) {
    switch (a) {
        case nn::Activation::tanh: delta.array() *= 1.0 - act.array().square(); break;
        case nn::Activation::relu: delta.array() *= (pre.array() > 0.0).cast<double>(); break;
        case nn::Activation::sigmoid: delta.array() *= act.array() * (1.0 - act.array()); break;
    }
}

Eigen::Index num_chunks(Eigen::Index cols) { return (cols + kChunkColumns - 1) / kChunkColumns; }

bool parallel_ok() {
#ifdef _OPENMP
    return !omp_in_parallel();
#else
    return false;
#endif
}

}  // namespace

int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

Matrix forward(const nn::MlpSpec& spec, std::span<const double> flat, const Matrix& inputs,
               BatchTape* tape) {
    check(spec, flat, inputs);
    const std::size_t layers = spec.num_layers();
    const Eigen::Index n = inputs.cols();

    BatchTape local;
    BatchTape& t = tape ? *tape : local;
    t.input = inputs;
    t.pre.resize(layers + 1);
    t.act.resize(layers);
    for (std::size_t l = 1; l <= layers; ++l) {
        t.pre[l].resize(static_cast<Eigen::Index>(spec.widths[l]), n);
        if (l < layers) t.act[l].resize(static_cast<Eigen::Index>(spec.widths[l]), n);
    }

    const Eigen::Index chunks = num_chunks(n);
#pragma omp parallel for schedule(static) if (parallel_ok() && chunks > 1)
    for (Eigen::Index c = 0; c < chunks; ++c) {
        const Eigen::Index c0 = c * kChunkColumns;
        const Eigen::Index nc = std::min(kChunkColumns, n - c0);
        for (std::size_t l = 1; l <= layers; ++l) {
            const auto rows = static_cast<Eigen::Index>(spec.widths[l]);
            const auto cols = static_cast<Eigen::Index>(spec.widths[l - 1]);
            ConstWeights W(flat.data() + nn::weight_offset(spec, l), rows, cols);
            ConstBias b(flat.data() + nn::bias_offset(spec, l), rows);
            auto prev = l == 1 ? t.input.middleCols(c0, nc) : t.act[l - 1].middleCols(c0, nc);
            auto pre = t.pre[l].middleCols(c0, nc);
            pre.noalias() = W * prev;
            pre.colwise() += b;
            if (l < layers) apply_activation(spec.activation, pre, t.act[l].middleCols(c0, nc));
        }
    }
    return t.pre[layers];
}

void backward(const nn::MlpSpec& spec, std::span<const double> flat, const BatchTape& tape,
              const Matrix& out_grads, std::span<double> param_grad, Matrix* input_grads) {
    check(spec, flat, tape.input);
    const std::size_t layers = spec.num_layers();
    const Eigen::Index n = tape.input.cols();
    if (out_grads.rows() != static_cast<Eigen::Index>(spec.output_width()) || out_grads.cols() != n)
        throw DimensionError("output gradient matrix has the wrong shape");
    if (param_grad.size() != flat.size())
        throw DimensionError("parameter gradient span has the wrong length");
    if (input_grads) input_grads->resize(tape.input.rows(), n);

    const Eigen::Index chunks = num_chunks(n);
    const auto P = static_cast<Eigen::Index>(flat.size());
    Matrix partial = Matrix::Zero(P, chunks);

#pragma omp parallel for schedule(static) if (parallel_ok() && chunks > 1)
    for (Eigen::Index c = 0; c < chunks; ++c) {
        const Eigen::Index c0 = c * kChunkColumns;
        const Eigen::Index nc = std::min(kChunkColumns, n - c0);
        double* g = partial.col(c).data();
        Matrix delta = out_grads.middleCols(c0, nc);
        for (std::size_t l = layers; l >= 1; --l) {
            const auto rows = static_cast<Eigen::Index>(spec.widths[l]);
            const auto cols = static_cast<Eigen::Index>(spec.widths[l - 1]);
            ConstWeights W(flat.data() + nn::weight_offset(spec, l), rows, cols);
            Eigen::Map<RowMajor> gW(g + nn::weight_offset(spec, l), rows, cols);
            Eigen::Map<Eigen::VectorXd> gb(g + nn::bias_offset(spec, l), rows);
            auto prev = l == 1 ? tape.input.middleCols(c0, nc) : tape.act[l - 1].middleCols(c0, nc);
            gW.noalias() += delta * prev.transpose();
            gb += delta.rowwise().sum();
            if (l == 1 && !input_grads) break;
            Matrix back = W.transpose() * delta;
            if (l > 1) {
                scale_by_derivative(spec.activation, tape.pre[l - 1].middleCols(c0, nc),
                                    tape.act[l - 1].middleCols(c0, nc), back);
            } else {
                input_grads->middleCols(c0, nc) = back;
            }
            delta = std::move(back);
        }
    }
    for (Eigen::Index c = 0; c < chunks; ++c) {
        for (Eigen::Index k = 0; k < P; ++k) param_grad[static_cast<std::size_t>(k)] += partial(k, c);
    }
}

namespace serial {

Matrix forward(const nn::MlpSpec& spec, std::span<const double> flat, const Matrix& inputs) {
    check(spec, flat, inputs);
    Matrix out(static_cast<Eigen::Index>(spec.output_width()), inputs.cols());
    for (Eigen::Index i = 0; i < inputs.cols(); ++i) {
        const Eigen::VectorXd x = inputs.col(i);
        const auto y = nn::mlp_forward(spec, flat, std::span<const double>(x.data(), x.size()));
        for (std::size_t r = 0; r < y.size(); ++r) out(static_cast<Eigen::Index>(r), i) = y[r];
    }
    return out;
}

void backward(const nn::MlpSpec& spec, std::span<const double> flat, const Matrix& inputs,
              const Matrix& out_grads, std::span<double> param_grad, Matrix* input_grads) {
    check(spec, flat, inputs);
    if (input_grads) input_grads->resize(inputs.rows(), inputs.cols());
    for (Eigen::Index i = 0; i < inputs.cols(); ++i) {
        const Eigen::VectorXd x = inputs.col(i);
        const Eigen::VectorXd og = out_grads.col(i);
        const auto g = nn::mlp_backward(spec, flat, std::span<const double>(x.data(), x.size()),
                                        std::span<const double>(og.data(), og.size()));
        for (std::size_t k = 0; k < g.params.size(); ++k) param_grad[k] += g.params[k];
        if (input_grads) {
            for (std::size_t r = 0; r < g.input.size(); ++r)
                (*input_grads)(static_cast<Eigen::Index>(r), i) = g.input[r];
        }
    }
}

}  // namespace serial

}  // namespace efi::kernels
