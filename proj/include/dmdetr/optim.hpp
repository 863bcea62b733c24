#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dmdetr/tensor.hpp"

namespace dmdetr {

// AdamW with decoupled weight decay: the decay term scales the parameter
// directly and never touches the moment estimates. Parameters are organized
// into groups so encoders and the rest of the model can use different
// learning rates.
class AdamW {
public:
    struct Group {
        std::vector<Tensor> params;
        double lr = 1e-4;
    };

    AdamW(std::vector<Group> groups, double beta1 = 0.9, double beta2 = 0.999,
          double eps = 1e-8, double weight_decay = 1e-4)
        : groups_(std::move(groups)), beta1_(beta1), beta2_(beta2), eps_(eps),
          weight_decay_(weight_decay) {
        for (auto& g : groups_) {
            GroupState gs;
            for (auto& p : g.params) {
                gs.m.emplace_back(p.size(), 0.0);
                gs.v.emplace_back(p.size(), 0.0);
            }
            state_.push_back(std::move(gs));
        }
    }

    void zero_grad() {
        for (auto& g : groups_)
            for (auto& p : g.params) p.zero_grad();
    }

    void step() {
        ++t_;
        double bc1 = 1.0 - std::pow(beta1_, t_);
        double bc2 = 1.0 - std::pow(beta2_, t_);
        for (std::size_t gi = 0; gi < groups_.size(); ++gi) {
            Group& g = groups_[gi];
            GroupState& gs = state_[gi];
            for (std::size_t pi = 0; pi < g.params.size(); ++pi) {
                Tensor& p = g.params[pi];
                if (!p.has_grad())
                    throw ContractError("adamw: parameter " + std::to_string(pi) + " of group " +
                                        std::to_string(gi) + " has no gradient");
                std::vector<double>& w = p.values();
                const std::vector<double>& grad = p.grad();
                std::vector<double>& m = gs.m[pi];
                std::vector<double>& v = gs.v[pi];
                for (std::size_t i = 0; i < w.size(); ++i) {
                    double gval = grad[i];
                    m[i] = beta1_ * m[i] + (1.0 - beta1_) * gval;
                    v[i] = beta2_ * v[i] + (1.0 - beta2_) * gval * gval;
                    double mhat = m[i] / bc1;
                    double vhat = v[i] / bc2;
                    w[i] -= g.lr * (mhat / (std::sqrt(vhat) + eps_) + weight_decay_ * w[i]);
                }
            }
        }
    }

    long long step_count() const { return t_; }
    double lr(std::size_t group) const { return groups_[group].lr; }
    void set_lr(std::size_t group, double lr) { groups_[group].lr = lr; }
    void scale_lrs(double factor) {
        for (auto& g : groups_) g.lr *= factor;
    }
    std::size_t group_count() const { return groups_.size(); }

private:
    struct GroupState {
        std::vector<std::vector<double>> m, v;
    };
    std::vector<Group> groups_;
    std::vector<GroupState> state_;
    double beta1_, beta2_, eps_, weight_decay_;
    long long t_ = 0;
};

}  // namespace dmdetr
