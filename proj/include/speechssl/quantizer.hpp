#pragma once

#include "speechssl/frontend.hpp"
#include "speechssl/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace speechssl {

inline constexpr int kStackWindow = 4;
inline constexpr double kNormEpsilon = 1e-8;

/// L x (4 * 80) frames: four consecutive Mel frames concatenated channel-wise.
struct StackedFeatures {
    MatF frames;

    int num_frames() const { return static_cast<int>(frames.rows()); }
};

struct QuantizerConfig {
    int num_codebooks = 32;
    int vocab_size = 2048;
    int codeword_dim = 16;
    int input_dim = kStackWindow * kNumMelBins;
};

/// Frozen random-projection quantizer: one projection and one codebook per
/// target stream. Nothing mutates the state after `init_quantizer`.
class QuantizerState {
public:
    QuantizerState(QuantizerConfig config, std::uint64_t seed, std::vector<MatF> projections,
                   std::vector<MatF> codebooks);

    const QuantizerConfig& config() const { return config_; }
    std::uint64_t seed() const { return seed_; }
    /// input_dim x codeword_dim; a feature row x projects to x * P.
    const MatF& projection(int j) const { return projections_[j]; }
    /// vocab_size x codeword_dim.
    const MatF& codebook(int j) const { return codebooks_[j]; }

    std::vector<unsigned char> serialize() const;
    std::uint64_t fingerprint() const;

private:
    QuantizerConfig config_;
    std::uint64_t seed_;
    std::vector<MatF> projections_;
    std::vector<MatF> codebooks_;
};

/// L x N labels, row-major by label frame.
struct LabelTensor {
    int num_frames = 0;
    int num_codebooks = 0;
    std::vector<std::uint16_t> labels;

    std::uint16_t at(int frame, int codebook) const {
        return labels[static_cast<std::size_t>(frame) * num_codebooks + codebook];
    }
    bool operator==(const LabelTensor&) const = default;
};

/// Non-overlapping stride-4 stacking; the trailing T mod 4 frames are dropped.
StackedFeatures stack_downsample(const MelSpectrogram& mel);

/// Per-channel mean/variance normalisation over the utterance's label frames.
StackedFeatures normalize(const StackedFeatures& sf);

QuantizerState init_quantizer(std::uint64_t seed, const QuantizerConfig& config);

/// labels[l, j] = argmin_i |x_l P_j - c_ij|^2, ties to the lowest index.
LabelTensor assign_labels(const QuantizerState& qs, const StackedFeatures& normalized);

/// stack -> normalize -> assign.
LabelTensor compute_labels(const QuantizerState& qs, const MelSpectrogram& mel);

// Label cache file: "MSEQ1 L N V\n" then L*N little-endian u16 labels.
void write_label_cache(const std::filesystem::path& path, const LabelTensor& labels,
                       int vocab_size);
LabelTensor read_label_cache(const std::filesystem::path& path, int* vocab_size = nullptr);

}  // namespace speechssl
