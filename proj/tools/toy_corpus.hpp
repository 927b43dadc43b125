#pragma once

#include "speechssl/frontend.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace speechssl::toy {

/// One stretch of a synthetic signal; frequency 0 is silence.
struct Segment {
    double frequency = 0.0;
    double seconds = 0.0;
};

Waveform render(const std::vector<Segment>& segments, double amplitude = 0.5,
                int sample_rate = kSampleRate);

/// `count` two-tone utterances of 1-2 s: one tone for the first half, a second
/// tone for the rest. Files are <dir>/utt_NNN.wav.
std::vector<std::filesystem::path> write_tone_corpus(const std::filesystem::path& dir, int count,
                                                     std::uint64_t seed);

/// Letters used by the toy transcription corpus.
inline constexpr const char* kToyAlphabet = "abcdefgh";

/// Each letter is a tone, letters are separated by short gaps and words by
/// longer silences.
Waveform speak(const std::string& text);

/// `count` utterances of random short phrases plus <dir>/transcripts.tsv.
std::vector<std::string> write_speech_corpus(const std::filesystem::path& dir, int count,
                                             std::uint64_t seed);

}  // namespace speechssl::toy
