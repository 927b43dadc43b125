#pragma once

#include "speechssl/tensor.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace speechssl {

/// peak * min(step / warmup, sqrt(warmup / step)); linear ramp then
/// inverse-square-root decay. step >= 1.
double lr_schedule(std::int64_t step, double peak_lr, std::int64_t warmup_steps);

template <typename T>
double global_grad_norm(const std::vector<Param<T>*>& params);

/// Rescales gradients so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
template <typename T>
double clip_grad_norm(const std::vector<Param<T>*>& params, double max_norm);

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.98;
    double epsilon = 1e-8;
};

/// Adam without weight decay. Moments are keyed by parameter name; each
/// tensor keeps its own update count for bias correction.
template <typename T>
class Adam {
public:
    struct Moments {
        Mat<T> m;
        Mat<T> v;
        std::int64_t count = 0;
    };

    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    void step(const std::vector<Param<T>*>& params, double lr);

    const AdamConfig& config() const { return cfg_; }
    std::map<std::string, Moments>& moments() { return moments_; }
    const std::map<std::string, Moments>& moments() const { return moments_; }

private:
    AdamConfig cfg_;
    std::map<std::string, Moments> moments_;
};

}  // namespace speechssl
