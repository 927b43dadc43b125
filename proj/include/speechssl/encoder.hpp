#pragma once

#include "speechssl/tensor.hpp"

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace speechssl {

struct EncoderConfig {
    int num_layers = 4;
    int hidden = 64;
    int ffn = 256;
    int heads = 4;
    int conv_kernel = 5;
    double dropout = 0.1;
    int input_dim = 80;

    static EncoderConfig desk_scale() { return {}; }
    static EncoderConfig paper_scale() { return {24, 1024, 4096, 8, 5, 0.1, 80}; }

    void validate() const;
    bool operator==(const EncoderConfig&) const = default;
};

/// Names and shapes of every encoder tensor, in canonical order. Tensors of
/// the convolutional front end carry the "extractor." prefix.
std::vector<ParamShape> encoder_parameter_shapes(const EncoderConfig& cfg);
std::int64_t count_parameters(const std::vector<ParamShape>& shapes);

inline constexpr int kMinExtractorFrames = 8;
inline const std::string kExtractorPrefix = "extractor.";

/// Output length of the stride-4 front end: floor(T/4) for T >= 8.
int extractor_output_length(int num_frames);

/// Owns tensors in insertion order; pointers stay valid for its lifetime.
template <typename T>
class ParamStore {
public:
    Param<T>* add(std::string name, std::vector<int> shape);
    Param<T>* find(const std::string& name);
    const Param<T>* find(const std::string& name) const;

    std::vector<Param<T>*> all();
    std::vector<const Param<T>*> all() const;
    void zero_grad();
    std::int64_t numel() const;

private:
    std::vector<std::unique_ptr<Param<T>>> params_;
};

/// Uniform +-1/sqrt(fan_in) weights, zero biases, unit norm gains; each tensor
/// draws from a stream keyed by (seed, tensor name).
template <typename T>
void init_parameter(Param<T>& p, std::uint64_t seed);

template <typename T>
struct EncoderOutput {
    /// layer_states[b][k]: L_b x hidden. k = 0 is the front-end output, k = i
    /// the output of Conformer layer i; the last entry also passes through the
    /// encoder's final layer norm.
    std::vector<std::vector<Mat<T>>> layer_states;
    std::vector<int> lengths;

    int num_layers() const {
        return layer_states.empty() ? 0 : static_cast<int>(layer_states.front().size());
    }
};

/// Convolutional front end (two stride-2 convolutions, ReLU, linear) followed
/// by a Conformer stack with relative-position self-attention. Utterances in
/// a batch are processed independently over their valid frames, so results
/// never depend on padding or batch composition.
template <typename T>
class Encoder {
public:
    Encoder(const EncoderConfig& cfg, std::uint64_t seed);
    ~Encoder();
    Encoder(Encoder&&) noexcept;
    Encoder& operator=(Encoder&&) noexcept;

    const EncoderConfig& config() const { return cfg_; }
    ParamStore<T>& params() { return store_; }
    const ParamStore<T>& params() const { return store_; }

    /// Training mode enables dropout with streams keyed by `step_key` and the
    /// utterance's batch position.
    void set_training(bool training, std::uint64_t step_key = 0);

    /// mels[b] has at least lengths[b] rows of input_dim channels; rows past
    /// the length are ignored.
    std::vector<Mat<T>> extract(const std::vector<Mat<T>>& mels, const std::vector<int>& lengths);
    EncoderOutput<T> forward(const std::vector<Mat<T>>& features, const std::vector<int>& lengths);
    EncoderOutput<T> encode(const std::vector<Mat<T>>& mels, const std::vector<int>& lengths);

    /// Accumulates parameter gradients. state_grads[b][k] matches
    /// layer_states[b][k]; an empty matrix means zero. Propagates through the
    /// front end too when the features came from `extract`/`encode`.
    void backward(const std::vector<std::vector<Mat<T>>>& state_grads);

    /// Post-softmax attention weights retained from the last forward pass.
    const Mat<T>& attention_weights(int utterance, int layer, int head) const;

    struct Cache;

private:
    struct Layer;

    EncoderConfig cfg_;
    std::uint64_t seed_;
    ParamStore<T> store_;
    std::vector<std::unique_ptr<Layer>> layers_;
    Param<T>* conv1_w_ = nullptr;
    Param<T>* conv1_b_ = nullptr;
    Param<T>* conv2_w_ = nullptr;
    Param<T>* conv2_b_ = nullptr;
    Param<T>* lin_w_ = nullptr;
    Param<T>* lin_b_ = nullptr;
    Param<T>* final_gamma_ = nullptr;
    Param<T>* final_beta_ = nullptr;
    bool training_ = false;
    std::uint64_t step_key_ = 0;
    std::unique_ptr<Cache> cache_;
};

/// Softmax-weighted sum over layer states, for probing a frozen encoder.
/// Returns L x hidden.
template <typename T>
Mat<T> weighted_sum(const std::vector<Mat<T>>& layer_states, const std::vector<T>& logits);

/// Gradients of weighted_sum given the output gradient.
template <typename T>
void weighted_sum_backward(const std::vector<Mat<T>>& layer_states, const std::vector<T>& logits,
                           const Mat<T>& grad_out, std::vector<Mat<T>>* grad_states,
                           std::vector<T>* grad_logits);

}  // namespace speechssl
