#include "doctest.h"
#include "support.hpp"

#include "efi/kernels.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

using namespace efi;

namespace {

kernels::Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
    const auto v = testing::normal_vector(static_cast<std::size_t>(rows * cols), seed);
    return Eigen::Map<const kernels::Matrix>(v.data(), rows, cols);
}

nn::MlpParams net(std::vector<std::size_t> widths, nn::Activation a, std::uint64_t seed) {
    nn::MlpSpec s;
    s.widths = std::move(widths);
    s.activation = a;
    s.seed = seed;
    auto p = nn::mlp_init(s);
    const auto noise = testing::normal_vector(p.flat.size(), seed + 9, 0.1);
    for (std::size_t k = 0; k < p.flat.size(); ++k) p.flat[k] += noise[k];
    return p;
}

struct Result {
    kernels::Matrix out;
    std::vector<double> grad;
    kernels::Matrix in_grad;
};

Result batched(const nn::MlpParams& p, const kernels::Matrix& X, const kernels::Matrix& G) {
    Result r;
    kernels::BatchTape tape;
    r.out = kernels::forward(p.spec, p.flat, X, &tape);
    r.grad.assign(p.flat.size(), 0.0);
    kernels::backward(p.spec, p.flat, tape, G, r.grad, &r.in_grad);
    return r;
}

}  // namespace

TEST_CASE("batched kernels agree with the serial reference") {
    for (auto act : {nn::Activation::tanh, nn::Activation::relu, nn::Activation::sigmoid}) {
        for (Eigen::Index n : {1, 63, 64, 65, 300}) {
            const auto p = net({5, 12, 7, 3}, act, 40 + static_cast<std::uint64_t>(n));
            const auto X = random_matrix(5, n, 1);
            const auto G = random_matrix(3, n, 2);
            const auto b = batched(p, X, G);
            const auto ref_out = kernels::serial::forward(p.spec, p.flat, X);
            std::vector<double> ref_grad(p.flat.size(), 0.0);
            kernels::Matrix ref_in;
            kernels::serial::backward(p.spec, p.flat, X, G, ref_grad, &ref_in);
            CHECK((b.out - ref_out).cwiseAbs().maxCoeff() < 1e-12);
            CHECK((b.in_grad - ref_in).cwiseAbs().maxCoeff() < 1e-12);
            for (std::size_t k = 0; k < ref_grad.size(); ++k)
                CHECK(b.grad[k] == doctest::Approx(ref_grad[k]).epsilon(1e-12).scale(1.0));
        }
    }
}

TEST_CASE("backward accumulates into the parameter gradient") {
    const auto p = net({3, 4, 2}, nn::Activation::tanh, 5);
    const auto X = random_matrix(3, 10, 3);
    const auto G = random_matrix(2, 10, 4);
    kernels::BatchTape tape;
    kernels::forward(p.spec, p.flat, X, &tape);
    std::vector<double> once(p.flat.size(), 0.0), twice(p.flat.size(), 0.0);
    kernels::backward(p.spec, p.flat, tape, G, once, nullptr);
    kernels::backward(p.spec, p.flat, tape, G, twice, nullptr);
    kernels::backward(p.spec, p.flat, tape, G, twice, nullptr);
    for (std::size_t k = 0; k < once.size(); ++k) CHECK(twice[k] == doctest::Approx(2.0 * once[k]));
}

#ifdef _OPENMP
TEST_CASE("results do not depend on the thread count") {
    const auto p = net({8, 90, 30, 20}, nn::Activation::tanh, 77);
    const auto X = random_matrix(8, 500, 5);
    const auto G = random_matrix(20, 500, 6);
    const int saved = omp_get_max_threads();
    omp_set_num_threads(1);
    const auto one = batched(p, X, G);
    omp_set_num_threads(4);
    const auto four = batched(p, X, G);
    omp_set_num_threads(saved);
    CHECK(one.out == four.out);
    CHECK(one.grad == four.grad);
    CHECK(one.in_grad == four.in_grad);
}
#endif
