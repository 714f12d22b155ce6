#include "caplab/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "caplab/errors.hpp"

namespace caplab {

namespace {

double evaluate(const ScalarBuilder& fn, const std::vector<ParamSpec>& params) {
    ad::Tape tape;
    std::unordered_map<std::string, ad::Var> vars;
    for (const ParamSpec& p : params) vars[p.name] = tape.leaf(p.value, false);
    const ad::Var out = fn(tape, vars);
    if (out.size() != 1) throw ArgumentError("grad_check: function output must be scalar");
    return out.value().item();
}

} // namespace

GradCheckReport grad_check(const ScalarBuilder& fn, std::vector<ParamSpec> params, double eps) {
    if (!(eps >= 1e-6 && eps <= 1e-3))
        throw ArgumentError("grad_check: epsilon must lie in [1e-6, 1e-3]");
    for (std::size_t i = 0; i < params.size(); ++i)
        for (std::size_t j = i + 1; j < params.size(); ++j)
            if (params[i].name == params[j].name)
                throw ArgumentError("grad_check: duplicate parameter name " + params[i].name);

    GradCheckReport report;

    // reverse-mode pass
    {
        ad::Tape tape;
        std::unordered_map<std::string, ad::Var> vars;
        for (const ParamSpec& p : params) vars[p.name] = tape.leaf(p.value, p.requires_grad);
        const ad::Var out = fn(tape, vars);
        if (out.size() != 1) throw ArgumentError("grad_check: function output must be scalar");
        tape.backward(out);
        for (const ParamSpec& p : params) report.analytic[p.name] = tape.grad(vars.at(p.name));
    }

    // central finite differences, skipping frozen parameters
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        if (!params[pi].requires_grad) continue;
        const Tensor& analytic = report.analytic.at(params[pi].name);
        for (std::size_t i = 0; i < params[pi].value.size(); ++i) {
            const double saved = params[pi].value[i];
            params[pi].value[i] = saved + eps;
            const double fp = evaluate(fn, params);
            params[pi].value[i] = saved - eps;
            const double fm = evaluate(fn, params);
            params[pi].value[i] = saved;
            const double fd = (fp - fm) / (2.0 * eps);
            const double a = analytic[i];
            const double rel = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-8});
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_param = params[pi].name;
                report.worst_index = i;
            }
        }
    }
    return report;
}

} // namespace caplab
