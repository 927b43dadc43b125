#include "speechssl/masking.hpp"

#include "speechssl/quantizer.hpp"

#include <algorithm>
#include <stdexcept>

namespace speechssl {

void MaskConfig::validate() const {
    if (!(prob >= 0.0 && prob <= 1.0)) throw std::invalid_argument("mask prob must be in [0, 1]");
    if (span_frames < 1) throw std::invalid_argument("mask span_frames must be >= 1");
    if (!(noise_std > 0.0)) throw std::invalid_argument("mask noise_std must be > 0");
}

int MaskPlan::num_masked_inputs() const {
    return static_cast<int>(std::count(input_mask.begin(), input_mask.end(), true));
}

int MaskPlan::num_targets() const {
    return static_cast<int>(std::count(target_mask.begin(), target_mask.end(), true));
}

std::vector<bool> derive_target_mask(const std::vector<bool>& input_mask) {
    const std::size_t l = input_mask.size() / kStackWindow;
    std::vector<bool> target(l, false);
    for (std::size_t i = 0; i < l; ++i) {
        for (int k = 0; k < kStackWindow; ++k) {
            if (input_mask[i * kStackWindow + k]) {
                target[i] = true;
                break;
            }
        }
    }
    return target;
}

MaskPlan sample_mask(int num_frames, const MaskConfig& cfg, RngStream& rng) {
    if (num_frames < 1) throw std::invalid_argument("sample_mask: need at least one frame");
    cfg.validate();
    MaskPlan plan;
    plan.input_mask.assign(static_cast<std::size_t>(num_frames), false);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    int covered_until = 0;  // exclusive end of the union of spans seen so far
    for (int t = 0; t < num_frames; ++t) {
        if (uni(rng) < cfg.prob) covered_until = std::max(covered_until, t + cfg.span_frames);
        if (t < covered_until) plan.input_mask[static_cast<std::size_t>(t)] = true;
    }
    plan.target_mask = derive_target_mask(plan.input_mask);
    return plan;
}

MelSpectrogram apply_mask(const MelSpectrogram& mel, const MaskPlan& plan, const MaskConfig& cfg,
                          RngStream& rng) {
    if (plan.input_mask.size() != static_cast<std::size_t>(mel.num_frames())) {
        throw std::invalid_argument("apply_mask: plan covers " +
                                    std::to_string(plan.input_mask.size()) + " frames, mel has " +
                                    std::to_string(mel.num_frames()));
    }
    MelSpectrogram out = mel;
    std::normal_distribution<double> noise(cfg.noise_mean, cfg.noise_std);
    for (int t = 0; t < mel.num_frames(); ++t) {
        if (!plan.input_mask[static_cast<std::size_t>(t)]) continue;
        for (Eigen::Index c = 0; c < out.frames.cols(); ++c) {
            out.frames(t, c) = static_cast<float>(noise(rng));
        }
    }
    return out;
}

double coverage_estimate(const MaskConfig& cfg, int num_frames, int trials, RngStream& rng) {
    if (trials < 1) throw std::invalid_argument("coverage_estimate: trials must be >= 1");
    double total = 0.0;
    for (int i = 0; i < trials; ++i) {
        const MaskPlan plan = sample_mask(num_frames, cfg, rng);
        total += static_cast<double>(plan.num_masked_inputs()) / num_frames;
    }
    return total / trials;
}

RngStream mask_start_stream(std::uint64_t seed, std::uint64_t epoch, std::string_view utt_id) {
    return make_stream({seed, stream_tag::kMaskStarts, epoch, hash_string(utt_id)});
}

RngStream mask_noise_stream(std::uint64_t seed, std::uint64_t epoch, std::string_view utt_id) {
    return make_stream({seed, stream_tag::kMaskNoise, epoch, hash_string(utt_id)});
}

}  // namespace speechssl
