#pragma once

#include "speechssl/checkpoint.hpp"
#include "speechssl/encoder.hpp"
#include "speechssl/masking.hpp"
#include "speechssl/optim.hpp"
#include "speechssl/quantizer.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace speechssl {

struct PretrainConfig {
    double peak_lr = 8e-4;
    std::int64_t warmup_steps = 4000;
    std::int64_t total_steps = 10000;
    AdamConfig adam{};
    double grad_clip = 1.0;
    std::uint64_t seed = 0;
    MaskConfig mask{};
    QuantizerConfig quantizer{};
    std::uint64_t quantizer_seed = 0;

    void validate() const;
};

enum class InitMode { kFull, kFeatureExtractorOnly, kNone };

InitMode parse_init_mode(const std::string& s);
std::string to_string(InitMode mode);

struct StepMetrics {
    std::int64_t step = 0;  // optimizer steps taken after this call
    double loss = 0.0;
    int masked_label_frames = 0;
    double codebook_utilization = 0.0;
    double learning_rate = 0.0;
    bool skipped = false;
    std::string diagnostic;
};

/// Unmasked log-Mel input for one step. mels[b] holds at least lengths[b]
/// valid frames; extra rows are padding.
struct PretrainBatch {
    std::vector<MatF> mels;
    std::vector<int> lengths;
    std::vector<std::string> ids;
    std::int64_t epoch = 0;
};

/// Mean over rows and codebooks of -log softmax(logits)[label]. `logits` is
/// R x (N*V) with codebook j in columns [j*V, (j+1)*V); `labels` is R x N
/// row-major. Writes d(loss)/d(logits) when `grad` is non-null.
template <typename T>
double multi_softmax_loss(const Mat<T>& logits, const std::vector<std::uint16_t>& labels,
                          int num_codebooks, int vocab_size, Mat<T>* grad = nullptr);

/// Per-utterance form: logits[b] is L_b x (N*V); only label frames with
/// target_masks[b][l] set contribute. Returns the mean over all contributing
/// (frame, codebook) pairs in the batch.
template <typename T>
double multi_softmax_loss(const std::vector<Mat<T>>& logits, const std::vector<LabelTensor>& labels,
                          const std::vector<std::vector<bool>>& target_masks, int vocab_size,
                          std::vector<Mat<T>>* grads = nullptr);

/// Distinct (codebook, label) pairs observed, divided by N * V.
double codebook_utilization(const std::vector<LabelTensor>& labels, int vocab_size);

/// Self-supervised trainer state: encoder, masked-prediction head, Adam
/// moments, step counter and the frozen quantizer that supplies targets.
class Pretrainer {
public:
    Pretrainer(const PretrainConfig& cfg, const EncoderConfig& encoder_cfg);

    /// One optimisation step. Batches without any target frame, and batches
    /// whose loss is not finite, leave every parameter and the step counter
    /// untouched and come back with `skipped` set.
    StepMetrics train_step(const PretrainBatch& batch);

    /// Labels for one utterance's unmasked features; served from the label
    /// cache directory when a matching file exists, else computed.
    LabelTensor labels_for(const std::string& id, const MelSpectrogram& mel);
    void set_label_cache_dir(std::filesystem::path dir) { label_cache_dir_ = std::move(dir); }

    /// Restores from a checkpoint per `mode`; returns the restored tensor
    /// names (encoder and head tensors; optimizer moments are not listed).
    std::vector<std::string> initialize_from(const std::filesystem::path& path, InitMode mode);
    void save(const std::filesystem::path& path) const;
    CheckpointFile to_checkpoint() const;

    const PretrainConfig& config() const { return cfg_; }
    std::int64_t step() const { return step_; }
    Encoder<float>& encoder() { return encoder_; }
    const Encoder<float>& encoder() const { return encoder_; }
    ParamStore<float>& head() { return head_; }
    const QuantizerState& quantizer() const { return quantizer_; }
    Adam<float>& optimizer() { return adam_; }

    /// Encoder and head parameters in checkpoint order.
    std::vector<Param<float>*> all_params();

private:
    PretrainConfig cfg_;
    Encoder<float> encoder_;
    ParamStore<float> head_;
    Adam<float> adam_;
    QuantizerState quantizer_;
    std::int64_t step_ = 0;
    std::optional<std::filesystem::path> label_cache_dir_;
    std::map<std::uint64_t, LabelTensor> label_memo_;
};

/// Head tensors for a hidden -> N*V projection, Xavier-uniform initialised.
void add_prediction_head(ParamStore<float>& store, const std::string& prefix, int hidden,
                         int outputs, std::uint64_t seed);

// Shared checkpoint plumbing for trainers.
nlohmann::json encoder_config_to_json(const EncoderConfig& cfg);
EncoderConfig encoder_config_from_json(const nlohmann::json& j);
void append_tensors(CheckpointFile& ckpt, const std::vector<const Param<float>*>& params);
void append_moments(CheckpointFile& ckpt, nlohmann::json& counts, const Adam<float>& adam,
                    const std::vector<const Param<float>*>& params);
/// Copies the checkpoint tensor into `p`; throws CheckpointError naming the
/// tensor on a shape mismatch.
void restore_tensor(const CheckpointFile& ckpt, Param<float>& p);
void restore_moments(const CheckpointFile& ckpt, const nlohmann::json& counts, Adam<float>& adam,
                     const std::vector<Param<float>*>& params);

}  // namespace speechssl
