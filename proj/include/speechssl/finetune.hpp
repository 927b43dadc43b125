#pragma once

#include "speechssl/ctc.hpp"
#include "speechssl/encoder.hpp"
#include "speechssl/frontend.hpp"
#include "speechssl/optim.hpp"
#include "speechssl/pretrain.hpp"
#include "speechssl/rng.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace speechssl {

struct SpecAugmentConfig {
    int num_time_masks = 2;
    int max_time_width = 80;
    double time_apply_prob = 0.2;  // per utterance; gates all time masks together
    int num_freq_masks = 2;
    int max_freq_width = 27;

    void validate() const;
};

struct FinetuneConfig {
    double encoder_lr = 2e-4;
    double decoder_lr = 2e-3;
    std::int64_t warmup_steps = 1000;
    std::int64_t freeze_steps = 1500;
    std::int64_t total_steps = 10000;
    AdamConfig adam{};
    double grad_clip = 1.0;
    std::uint64_t seed = 0;
    SpecAugmentConfig spec_augment{};

    void validate() const;
};

/// Zeroes rows [start, start + width) / columns [start, start + width),
/// clipped to the matrix.
void zero_time_span(MatF& frames, int start, int width);
void zero_freq_band(MatF& frames, int start, int width);

/// `time_masked` reports whether the per-utterance coin enabled time masking.
MelSpectrogram spec_augment(const MelSpectrogram& mel, const SpecAugmentConfig& cfg, RngStream& rng,
                            bool* time_masked = nullptr);

RngStream spec_augment_stream(std::uint64_t seed, std::int64_t epoch, const std::string& utt_id);

struct FinetuneBatch {
    std::vector<MatF> mels;
    std::vector<int> lengths;
    std::vector<std::string> ids;
    std::vector<std::vector<int>> targets;  // token ids, no blanks
    std::int64_t epoch = 0;
};

struct FinetuneMetrics {
    std::int64_t step = 0;
    double loss = 0.0;  // mean CTC loss per utterance, nats
    double encoder_lr = 0.0;
    double head_lr = 0.0;
    bool encoder_frozen = false;
    bool skipped = false;
    std::string diagnostic;
};

/// Encoder plus linear CTC head over the final layer state. The encoder only
/// receives updates once more than freeze_steps steps have been taken; its
/// schedule starts counting at that point.
class Finetuner {
public:
    Finetuner(const FinetuneConfig& cfg, const EncoderConfig& encoder_cfg, Tokenizer tokenizer);

    /// Rebuilds a finetuner (weights, tokenizer, optimizer state, step) from
    /// one of its own checkpoints.
    static Finetuner load(const std::filesystem::path& path, const FinetuneConfig& cfg = {});

    /// Copies encoder tensors from a pre-training or finetuning checkpoint:
    /// all of them for kFull, only the front end for kFeatureExtractorOnly.
    std::vector<std::string> initialize_encoder_from(const std::filesystem::path& path, InitMode mode);

    FinetuneMetrics train_step(const FinetuneBatch& batch);

    /// Per-utterance log-probabilities (inference mode, no augmentation).
    std::vector<MatD> log_probs(const std::vector<MatF>& mels, const std::vector<int>& lengths);
    /// beam_width 0 selects greedy decoding.
    std::vector<Hypothesis> decode(const std::vector<MatF>& mels, const std::vector<int>& lengths,
                                   int beam_width);

    CheckpointFile to_checkpoint() const;
    void save(const std::filesystem::path& path) const;

    const FinetuneConfig& config() const { return cfg_; }
    const Tokenizer& tokenizer() const { return tokenizer_; }
    std::int64_t step() const { return step_; }
    Encoder<float>& encoder() { return encoder_; }
    const Encoder<float>& encoder() const { return encoder_; }
    ParamStore<float>& head() { return head_; }

private:
    std::vector<Param<float>*> encoder_params();
    std::vector<Param<float>*> head_params();
    MatF head_logits(const MatF& state) const;

    FinetuneConfig cfg_;
    Tokenizer tokenizer_;
    Encoder<float> encoder_;
    ParamStore<float> head_;
    Adam<float> adam_;
    std::int64_t step_ = 0;
};

}  // namespace speechssl
