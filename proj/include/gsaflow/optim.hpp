#pragma once

#include <cmath>
#include <vector>

#include "gsaflow/tensor.hpp"

namespace gsaflow {

/// AdamW with decoupled weight decay. Parameters are registered once; step()
/// consumes gradients (they are cleared after the update) so a skipped
/// backward can never leak a stale gradient into the next update.
template <typename T>
class AdamW {
  public:
    explicit AdamW(T lr, T beta1 = T(0.9), T beta2 = T(0.999), T eps = T(1e-8),
                   T weight_decay = T(1e-2))
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {}

    void add_param(const Tensor<T> &p) {
        check_contract(p.defined(), "AdamW: undefined parameter");
        params_.push_back(p);
        m_.emplace_back(p.value().size(), T(0));
        v_.emplace_back(p.value().size(), T(0));
    }

    void add_params(const std::vector<Tensor<T>> &ps) {
        for (const auto &p : ps) add_param(p);
    }

    void step() {
        ++t_;
        const T bc1 = T(1) - std::pow(beta1_, static_cast<T>(t_));
        const T bc2 = T(1) - std::pow(beta2_, static_cast<T>(t_));
        for (size_t k = 0; k < params_.size(); ++k) {
            auto &p = params_[k];
            auto &val = p.value();
            auto &g = p.grad();
            const bool has_g = !g.empty();
            for (size_t i = 0; i < val.size(); ++i) {
                T gi = has_g ? g[i] : T(0);
                m_[k][i] = beta1_ * m_[k][i] + (T(1) - beta1_) * gi;
                v_[k][i] = beta2_ * v_[k][i] + (T(1) - beta2_) * gi * gi;
                T mhat = m_[k][i] / bc1;
                T vhat = v_[k][i] / bc2;
                val[i] -= lr_ * (mhat / (std::sqrt(vhat) + eps_) + wd_ * val[i]);
            }
            if (has_g) std::fill(g.begin(), g.end(), T(0));
        }
    }

    void zero_grad() {
        for (auto &p : params_)
            if (!p.grad().empty()) std::fill(p.grad().begin(), p.grad().end(), T(0));
    }

    int64_t step_count() const { return t_; }
    T lr() const { return lr_; }
    void set_lr(T lr) { lr_ = lr; }
    size_t param_count() const { return params_.size(); }

  private:
    T lr_, beta1_, beta2_, eps_, wd_;
    int64_t t_ = 0;
    std::vector<Tensor<T>> params_;
    std::vector<std::vector<T>> m_, v_;
};

}  // namespace gsaflow
