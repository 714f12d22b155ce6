#pragma once

#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "caplab/autodiff.hpp"
#include "caplab/tensor.hpp"

namespace caplab {

// Named parameter fed to grad_check. Params with requires_grad == false are
// skipped by the finite-difference probe; their reverse gradient must come
// back exactly zero.
struct ParamSpec {
    std::string name;
    Tensor value;
    bool requires_grad = true;
};

// Rebuilds the scalar under test on a fresh tape from named leaves. Must be
// deterministic: grad_check re-invokes it for every finite-difference probe.
using ScalarBuilder =
    std::function<ad::Var(ad::Tape&, const std::unordered_map<std::string, ad::Var>&)>;

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_param;
    std::size_t worst_index = 0;
    // reverse-mode gradients per parameter (zeros for frozen ones)
    std::unordered_map<std::string, Tensor> analytic;
};

// Compares reverse-mode gradients against central finite differences,
// component-wise, with relative error |a-b| / max(|a|,|b|,1e-8).
GradCheckReport grad_check(const ScalarBuilder& fn, std::vector<ParamSpec> params, double eps);

} // namespace caplab
