#pragma once

#include <map>
#include <string>

#include "sandwich/core/tensor.hpp"
#include "sandwich/model/params.hpp"

namespace sandwich {

// Adam with L2 regularization folded into the gradient (coupled weight
// decay). One instance per parameter owner; the step counter is shared by
// all parameters the instance has seen.
template <typename S>
class Adam {
public:
    Adam(double lr = 1e-3, double weight_decay = 0.0, double beta1 = 0.9, double beta2 = 0.999,
         double eps = 1e-8)
        : lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {}

    double learning_rate() const { return lr_; }

    void step(ParamSet<S>& params, const std::map<std::string, Tensor<S>>& grads) {
        ++t_;
        const double bc1 = 1.0 - std::pow(b1_, t_);
        const double bc2 = 1.0 - std::pow(b2_, t_);
        for (const auto& [name, grad] : grads) {
            if (!params.trainable(name)) continue;
            Tensor<S>& p = params.at(name);
            if (!p.same_shape(grad))
                throw ShapeError("adam: gradient shape mismatch for '" + name + "'");
            auto& st = state_[name];
            if (st.m.size() != p.size()) {
                st.m = Tensor<S>(p.shape);
                st.v = Tensor<S>(p.shape);
            }
            for (std::int64_t i = 0; i < p.size(); ++i) {
                const double g = static_cast<double>(grad[i]) + wd_ * static_cast<double>(p[i]);
                const double m = b1_ * st.m[i] + (1.0 - b1_) * g;
                const double v = b2_ * st.v[i] + (1.0 - b2_) * g * g;
                st.m[i] = static_cast<S>(m);
                st.v[i] = static_cast<S>(v);
                p[i] -= static_cast<S>(lr_ * (m / bc1) / (std::sqrt(v / bc2) + eps_));
            }
        }
    }

private:
    struct State {
        Tensor<S> m, v;
    };
    double lr_, wd_, b1_, b2_, eps_;
    std::int64_t t_ = 0;
    std::map<std::string, State> state_;
};

}  // namespace sandwich
