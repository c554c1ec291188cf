#pragma once

// Finite-difference checking for parameters buried inside a model: the loss
// closure recomputes the full forward pass, so perturbing the parameter in
// place exercises exactly the path the tape differentiated.  Always runs in
// 64-bit mode; finite differences are unreliable in 32-bit.

#include <cmath>
#include <functional>
#include <vector>

#include "tensor.hpp"

namespace gradcheck {

struct Report {
    double max_rel_err = 0.0;
    double max_abs_grad = 0.0;  // of the analytic gradient, to spot dead params
    size_t checked = 0;
};

// Max relative error between the tape gradient of `loss_fn` w.r.t. `param`
// and central differences. `loss_fn` must be a pure function of the current
// parameter values. `stride` subsamples coordinates for large tensors.
inline Report param_grad_err(gsaflow::Tensor<double> param,
                             const std::function<gsaflow::Tensor<double>()> &loss_fn, double eps,
                             size_t stride = 1) {
    using namespace gsaflow;
    check_contract(eps >= 1e-6 && eps <= 1e-3, "param_grad_err: eps out of [1e-6, 1e-3]");
    check_contract(param.requires_grad(), "param_grad_err: parameter is not trainable");
    std::vector<double> analytic;
    {
        TapeScope<double> scope;
        Tensor<double> loss = loss_fn();
        check_contract(loss.numel() == 1, "param_grad_err: loss must be scalar");
        backward(loss);
        analytic = param.grad();
        if (analytic.empty()) analytic.assign(param.value().size(), 0.0);
    }
    Report rep;
    NoGradScope<double> no_grad;
    for (size_t i = 0; i < param.value().size(); i += stride) {
        double orig = param.value()[i];
        param.value()[i] = orig + eps;
        double up = loss_fn().item();
        param.value()[i] = orig - eps;
        double down = loss_fn().item();
        param.value()[i] = orig;
        double numeric = (up - down) / (2.0 * eps);
        double a = analytic[i];
        double denom = std::max(1.0, std::max(std::abs(a), std::abs(numeric)));
        rep.max_rel_err = std::max(rep.max_rel_err, std::abs(a - numeric) / denom);
        rep.max_abs_grad = std::max(rep.max_abs_grad, std::abs(a));
        ++rep.checked;
    }
    return rep;
}

}  // namespace gradcheck
