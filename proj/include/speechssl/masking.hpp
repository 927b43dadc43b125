#pragma once

#include "speechssl/frontend.hpp"
#include "speechssl/rng.hpp"

#include <cstdint>
#include <string_view>
#include <vector>

namespace speechssl {

struct MaskConfig {
    double prob = 0.4;    // per-frame span-start probability
    int span_frames = 40;  // 0.4 s at a 10 ms hop
    double noise_mean = 0.0;
    double noise_std = 0.1;

    void validate() const;
};

struct MaskPlan {
    std::vector<bool> input_mask;   // per Mel frame, true = replaced by noise
    std::vector<bool> target_mask;  // per label frame, true = contributes to the loss

    int num_masked_inputs() const;
    int num_targets() const;
};

/// Label frame l is a target when any of input frames 4l..4l+3 is masked.
std::vector<bool> derive_target_mask(const std::vector<bool>& input_mask);

MaskPlan sample_mask(int num_frames, const MaskConfig& cfg, RngStream& rng);

/// Masked frames get i.i.d. Normal(noise_mean, noise_std^2) entries; all other
/// frames are copied untouched.
MelSpectrogram apply_mask(const MelSpectrogram& mel, const MaskPlan& plan, const MaskConfig& cfg,
                          RngStream& rng);

/// Mean masked fraction over `trials` independent plans.
double coverage_estimate(const MaskConfig& cfg, int num_frames, int trials, RngStream& rng);

/// Streams for one utterance in one epoch; independent of batch composition.
RngStream mask_start_stream(std::uint64_t seed, std::uint64_t epoch, std::string_view utt_id);
RngStream mask_noise_stream(std::uint64_t seed, std::uint64_t epoch, std::string_view utt_id);

}  // namespace speechssl
