#include "toy_corpus.hpp"

#include "speechssl/rng.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <stdexcept>

namespace speechssl::toy {
namespace {

constexpr double kLetterSeconds = 0.12;
constexpr double kGapSeconds = 0.04;
constexpr double kSpaceSeconds = 0.16;
constexpr double kEdgeSeconds = 0.1;
constexpr double kFirstToneShare = 0.3;

std::string numbered(const char* prefix, int i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s_%03d", prefix, i);
    return buf;
}

}  // namespace

Waveform render(const std::vector<Segment>& segments, double amplitude, int sample_rate) {
    Waveform w;
    w.sample_rate = sample_rate;
    for (const auto& s : segments) {
        const auto n = static_cast<std::size_t>(std::llround(s.seconds * sample_rate));
        for (std::size_t i = 0; i < n; ++i) {
            const double phase = 2.0 * std::numbers::pi * s.frequency * static_cast<double>(i) / sample_rate;
            w.samples.push_back(static_cast<float>(amplitude * std::sin(phase)));
        }
    }
    return w;
}

std::vector<std::filesystem::path> write_tone_corpus(const std::filesystem::path& dir, int count,
                                                     std::uint64_t seed) {
    std::filesystem::create_directories(dir);
    auto rng = make_stream({seed, 0x544f4e45});
    // Whole label frames (40 ms) between 1 and 2 s.
    std::uniform_int_distribution<int> label_frames(25, 50);
    std::vector<std::filesystem::path> files;
    for (int i = 0; i < count; ++i) {
        const double d = 0.04 * label_frames(rng);
        const auto path = dir / (numbered("utt", i) + ".wav");
        write_wav(path, render({{400.0, kFirstToneShare * d}, {1200.0, (1.0 - kFirstToneShare) * d}}));
        files.push_back(path);
    }
    return files;
}

Waveform speak(const std::string& text) {
    const std::string letters = kToyAlphabet;
    std::vector<Segment> segs = {{0.0, kEdgeSeconds}};
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (c == ' ') {
            segs.push_back({0.0, kSpaceSeconds});
            continue;
        }
        const auto k = letters.find(c);
        if (k == std::string::npos) throw std::invalid_argument(std::string("toy alphabet has no '") + c + "'");
        if (i > 0 && text[i - 1] != ' ') segs.push_back({0.0, kGapSeconds});
        segs.push_back({300.0 + 200.0 * static_cast<double>(k), kLetterSeconds});
    }
    segs.push_back({0.0, kEdgeSeconds});
    return render(segs);
}

std::vector<std::string> write_speech_corpus(const std::filesystem::path& dir, int count,
                                             std::uint64_t seed) {
    std::filesystem::create_directories(dir);
    auto rng = make_stream({seed, 0x53504b52});
    const std::string letters = kToyAlphabet;
    std::uniform_int_distribution<int> word_len(1, 3);
    std::uniform_int_distribution<int> words(1, 2);
    std::uniform_int_distribution<std::size_t> letter(0, letters.size() - 1);
    std::ofstream tsv(dir / "transcripts.tsv");
    std::vector<std::string> texts;
    for (int i = 0; i < count; ++i) {
        std::string text;
        const int w = words(rng);
        for (int k = 0; k < w; ++k) {
            if (k) text += ' ';
            const int len = word_len(rng);
            for (int j = 0; j < len; ++j) text += letters[letter(rng)];
        }
        const std::string id = numbered("spk", i);
        write_wav(dir / (id + ".wav"), speak(text));
        tsv << id << '\t' << text << '\n';
        texts.push_back(text);
    }
    return texts;
}

}  // namespace speechssl::toy
