#include "speechssl/optim.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace speechssl {

double lr_schedule(std::int64_t step, double peak_lr, std::int64_t warmup_steps) {
    if (step < 1) throw std::invalid_argument("lr_schedule: step must be >= 1");
    if (warmup_steps < 1) throw std::invalid_argument("lr_schedule: warmup must be >= 1");
    const double s = static_cast<double>(step);
    const double w = static_cast<double>(warmup_steps);
    return peak_lr * std::min(s / w, std::sqrt(w / s));
}

template <typename T>
double global_grad_norm(const std::vector<Param<T>*>& params) {
    double sq = 0.0;
    for (const auto* p : params) sq += p->grad.template cast<double>().squaredNorm();
    return std::sqrt(sq);
}

template <typename T>
double clip_grad_norm(const std::vector<Param<T>*>& params, double max_norm) {
    const double norm = global_grad_norm(params);
    if (norm > max_norm && norm > 0.0) {
        const T scale = static_cast<T>(max_norm / norm);
        for (auto* p : params) p->grad *= scale;
    }
    return norm;
}

template <typename T>
void Adam<T>::step(const std::vector<Param<T>*>& params, double lr) {
    for (auto* p : params) {
        auto& mo = moments_[p->name];
        if (mo.m.size() == 0) {
            mo.m = Mat<T>::Zero(p->value.rows(), p->value.cols());
            mo.v = Mat<T>::Zero(p->value.rows(), p->value.cols());
        }
        ++mo.count;
        const T b1 = static_cast<T>(cfg_.beta1);
        const T b2 = static_cast<T>(cfg_.beta2);
        mo.m = b1 * mo.m + (T(1) - b1) * p->grad;
        mo.v = b2 * mo.v + (T(1) - b2) * p->grad.cwiseAbs2();
        const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(mo.count));
        const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(mo.count));
        const T step_size = static_cast<T>(lr / c1);
        const T v_scale = static_cast<T>(1.0 / c2);
        const T eps = static_cast<T>(cfg_.epsilon);
        p->value.array() -=
            step_size * mo.m.array() / ((mo.v.array() * v_scale).sqrt() + eps);
    }
}

template double global_grad_norm<float>(const std::vector<Param<float>*>&);
template double global_grad_norm<double>(const std::vector<Param<double>*>&);
template double clip_grad_norm<float>(const std::vector<Param<float>*>&, double);
template double clip_grad_norm<double>(const std::vector<Param<double>*>&, double);
template class Adam<float>;
template class Adam<double>;

}  // namespace speechssl
