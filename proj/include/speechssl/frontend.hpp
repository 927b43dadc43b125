#pragma once

#include "speechssl/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace speechssl {

inline constexpr int kSampleRate = 16000;
inline constexpr int kNumMelBins = 80;
inline constexpr int kWindowSamples = 400;  // 25 ms at 16 kHz
inline constexpr int kHopSamples = 160;     // 10 ms at 16 kHz
inline constexpr int kFftSize = 512;
inline constexpr double kLogFloor = 1e-10;

struct AudioError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Waveform {
    std::vector<float> samples;
    int sample_rate = kSampleRate;

    double duration_seconds() const {
        return static_cast<double>(samples.size()) / sample_rate;
    }
};

/// T x 80 log-Mel energies, 25 ms Hann window, 10 ms hop, no centre padding.
struct MelSpectrogram {
    MatF frames;

    int num_frames() const { return static_cast<int>(frames.rows()); }
};

/// Header facts of a RIFF/WAVE file, read without touching the sample data.
struct WavInfo {
    int sample_rate = 0;
    int channels = 0;
    std::int64_t num_frames = 0;

    double duration_seconds() const {
        return static_cast<double>(num_frames) / sample_rate;
    }
};

WavInfo read_wav_info(const std::filesystem::path& path);

/// Reads 16-bit PCM mono or stereo. Stereo is averaged to mono; samples are
/// scaled by 1/32768.
Waveform load_audio(const std::filesystem::path& path);

/// Writes 16-bit PCM mono; samples are clipped to [-1, 1).
void write_wav(const std::filesystem::path& path, const Waveform& w);

/// Band-limited rate conversion with a Kaiser-windowed sinc kernel
/// (beta 8.6, 64 zero crossings per side). Same-rate input is returned as is.
Waveform resample(const Waveform& w, int target_rate);

/// Frame count for `num_samples` at 16 kHz; 0 when shorter than one window.
int num_mel_frames(std::int64_t num_samples);

/// HTK Mel scale.
double hz_to_mel(double hz);
double mel_to_hz(double mel);

/// 80 x 257 triangular filterbank over 0..8000 Hz for a 512-point FFT.
const MatD& mel_filterbank();

MelSpectrogram log_mel(const Waveform& w);

}  // namespace speechssl
