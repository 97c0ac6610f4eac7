#pragma once

#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vistok/gradcheck.hpp"

namespace vistok::suites {

// One measured quantity compared against a bound; passes when value <= bound.
struct Check {
    std::string name;
    double value = 0.0;
    double bound = 0.0;
    std::string detail;

    bool passed() const { return value <= bound; }
};

struct SuiteReport {
    std::string suite;
    std::vector<Check> checks;
    double seconds = 0.0;

    bool passed() const;
    double worst() const;  // largest value / bound ratio
};

void to_json(nlohmann::json& j, const Check& c);
void to_json(nlohmann::json& j, const SuiteReport& r);

// Scalar f64 function plus the point it is checked at.
struct GradCase {
    std::string name;
    ScalarFn fn;
    std::vector<Tensor<double>> inputs;
};

// Random-weighted sum, so every output coordinate reaches the gradient with its own weight.
Var<double> probe(const Var<double>& x, std::uint64_t seed = 99);

// Every autodiff primitive on one of three shape variants (0, 1, 2).
std::vector<GradCase> primitive_cases(int variant);
// Tokenizer (depth, mask) through frozen quantization, the solver encoder and decoder, and
// both aux losses through the frozen detokenizers.
std::vector<GradCase> composed_cases();

// Max relative error per case; bound tol.
SuiteReport gradient_suite(double eps = 1e-5, double tol = 1e-4);

// One-hot soft/hard equality, quantize idempotence, convex-hull bounds, EMA count conservation.
SuiteReport vq_suite(std::size_t trials = 200, std::uint64_t seed = 0);
// Random instance lists and depth grids through the codecs; box dequantization error.
SuiteReport codec_suite(std::size_t n = 1000, std::uint64_t seed = 0);
// Interpolation baseline: constants within half a bin, block-aligned masks exact, id ranges.
SuiteReport interp_suite(std::size_t n = 200, std::uint64_t seed = 0);

}  // namespace vistok::suites
