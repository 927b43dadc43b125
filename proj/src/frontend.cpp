#include "speechssl/frontend.hpp"

#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstring>
#include <fstream>
#include <numeric>

namespace speechssl {
namespace {

constexpr double kPi = 3.14159265358979323846;

std::uint32_t read_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint16_t read_u16(const unsigned char* p) {
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}

void put_u16(std::vector<unsigned char>& out, std::uint16_t v) {
    out.push_back(static_cast<unsigned char>(v & 0xff));
    out.push_back(static_cast<unsigned char>(v >> 8));
}

struct ParsedWav {
    WavInfo info;
    std::size_t data_offset = 0;
};

// Walks the chunk list. With `bytes` holding only a prefix of the file, the
// data chunk bounds are checked against `file_size` instead.
ParsedWav parse_header(const std::vector<unsigned char>& bytes, std::uintmax_t file_size,
                       const std::string& where) {
    auto malformed = [&](const std::string& why) {
        return AudioError("malformed container: " + where + ": " + why);
    };
    if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
        std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
        throw malformed("missing RIFF/WAVE signature");
    }
    ParsedWav out;
    bool have_fmt = false;
    int bits = 0;
    std::size_t pos = 12;
    while (true) {
        if (pos + 8 > bytes.size()) throw malformed("no data chunk");
        const unsigned char* chunk = bytes.data() + pos;
        const std::uint32_t size = read_u32(chunk + 4);
        const std::size_t body = pos + 8;
        if (std::memcmp(chunk, "fmt ", 4) == 0) {
            if (size < 16 || body + size > bytes.size()) throw malformed("truncated fmt chunk");
            const std::uint16_t format = read_u16(bytes.data() + body);
            out.info.channels = read_u16(bytes.data() + body + 2);
            out.info.sample_rate = static_cast<int>(read_u32(bytes.data() + body + 4));
            bits = read_u16(bytes.data() + body + 14);
            std::uint16_t effective_format = format;
            if (format == 0xFFFE && size >= 26) effective_format = read_u16(bytes.data() + body + 24);
            if (effective_format != 1) {
                throw AudioError("unsupported encoding: " + where + ": format tag " +
                                 std::to_string(format));
            }
            if (bits != 16) {
                throw AudioError("unsupported encoding: " + where + ": " + std::to_string(bits) +
                                 "-bit samples");
            }
            if (out.info.channels < 1 || out.info.channels > 2) {
                throw AudioError("unsupported encoding: " + where + ": " +
                                 std::to_string(out.info.channels) + " channels");
            }
            if (out.info.sample_rate <= 0) throw malformed("sample rate is zero");
            have_fmt = true;
        } else if (std::memcmp(chunk, "data", 4) == 0) {
            if (!have_fmt) throw malformed("data chunk before fmt chunk");
            if (body + size > file_size) throw malformed("data chunk extends past end of file");
            const std::size_t frame_bytes = static_cast<std::size_t>(out.info.channels) * 2;
            if (size % frame_bytes != 0) throw malformed("partial sample frame in data chunk");
            out.info.num_frames = static_cast<std::int64_t>(size / frame_bytes);
            out.data_offset = body;
            return out;
        }
        pos = body + size + (size & 1u);
    }
}

std::vector<unsigned char> read_bytes(const std::filesystem::path& path, std::size_t limit) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw AudioError("cannot open audio file: " + path.string());
    std::vector<unsigned char> bytes;
    if (limit == 0) {
        bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    } else {
        bytes.resize(limit);
        in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(limit));
        bytes.resize(static_cast<std::size_t>(in.gcount()));
    }
    return bytes;
}

double bessel_i0(double x) { return std::cyl_bessel_i(0.0, x); }

}  // namespace

WavInfo read_wav_info(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw AudioError("missing file: " + path.string());
    const auto file_size = std::filesystem::file_size(path);
    // Headers with odd metadata chunks can be long; 64 KiB covers them.
    const auto bytes = read_bytes(path, 1 << 16);
    return parse_header(bytes, file_size, path.string()).info;
}

Waveform load_audio(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw AudioError("missing file: " + path.string());
    const auto bytes = read_bytes(path, 0);
    const ParsedWav parsed = parse_header(bytes, bytes.size(), path.string());
    const int channels = parsed.info.channels;
    Waveform w;
    w.sample_rate = parsed.info.sample_rate;
    w.samples.resize(static_cast<std::size_t>(parsed.info.num_frames));
    const unsigned char* data = bytes.data() + parsed.data_offset;
    for (std::int64_t i = 0; i < parsed.info.num_frames; ++i) {
        float acc = 0.0f;
        for (int c = 0; c < channels; ++c) {
            const auto raw = static_cast<std::int16_t>(read_u16(data + (i * channels + c) * 2));
            acc += static_cast<float>(raw) / 32768.0f;
        }
        w.samples[static_cast<std::size_t>(i)] = acc / static_cast<float>(channels);
    }
    return w;
}

void write_wav(const std::filesystem::path& path, const Waveform& w) {
    const auto data_bytes = static_cast<std::uint32_t>(w.samples.size() * 2);
    std::vector<unsigned char> out;
    out.reserve(44 + data_bytes);
    out.insert(out.end(), {'R', 'I', 'F', 'F'});
    put_u32(out, 36 + data_bytes);
    out.insert(out.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
    put_u32(out, 16);
    put_u16(out, 1);
    put_u16(out, 1);
    put_u32(out, static_cast<std::uint32_t>(w.sample_rate));
    put_u32(out, static_cast<std::uint32_t>(w.sample_rate * 2));
    put_u16(out, 2);
    put_u16(out, 16);
    out.insert(out.end(), {'d', 'a', 't', 'a'});
    put_u32(out, data_bytes);
    for (float s : w.samples) {
        const double scaled = std::round(static_cast<double>(s) * 32768.0);
        const auto v = static_cast<std::int16_t>(std::clamp(scaled, -32768.0, 32767.0));
        put_u16(out, static_cast<std::uint16_t>(v));
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) throw AudioError("cannot write audio file: " + path.string());
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
}

Waveform resample(const Waveform& w, int target_rate) {
    if (target_rate <= 0) throw std::invalid_argument("resample: target rate must be positive");
    if (w.sample_rate == target_rate) return w;

    constexpr double kBeta = 8.6;
    constexpr int kZeroCrossings = 64;

    // Output sample k sits at input time k * up / down, with up/down the
    // reduced rate ratio; there are exactly `up` distinct fractional phases.
    const std::int64_t g = std::gcd(w.sample_rate, target_rate);
    const std::int64_t up = w.sample_rate / g;
    const std::int64_t down = target_rate / g;
    const double cutoff = std::min(1.0, static_cast<double>(target_rate) / w.sample_rate);
    const double half_width = kZeroCrossings / cutoff;
    const int reach = static_cast<int>(std::ceil(half_width));
    const int taps = 2 * reach + 1;
    const double i0_beta = bessel_i0(kBeta);

    // kernel[phase][m] weights input sample (base + m - reach).
    std::vector<double> kernel(static_cast<std::size_t>(down * taps));
    for (std::int64_t phase = 0; phase < down; ++phase) {
        const double frac = static_cast<double>(phase) / down;
        for (int m = 0; m < taps; ++m) {
            const double dist = static_cast<double>(m - reach) - frac;
            double value = 0.0;
            if (std::abs(dist) < half_width) {
                const double x = cutoff * dist;
                const double sinc = (x == 0.0) ? 1.0 : std::sin(kPi * x) / (kPi * x);
                const double r = dist / half_width;
                value = cutoff * sinc * bessel_i0(kBeta * std::sqrt(1.0 - r * r)) / i0_beta;
            }
            kernel[static_cast<std::size_t>(phase * taps + m)] = value;
        }
    }

    const auto n_in = static_cast<std::int64_t>(w.samples.size());
    const std::int64_t n_out = (n_in * target_rate + w.sample_rate / 2) / w.sample_rate;
    Waveform out;
    out.sample_rate = target_rate;
    out.samples.resize(static_cast<std::size_t>(n_out));
    for (std::int64_t k = 0; k < n_out; ++k) {
        const std::int64_t num = k * up;
        const std::int64_t base = num / down;
        const std::int64_t phase = num % down;
        const double* kern = kernel.data() + phase * taps;
        double acc = 0.0;
        const std::int64_t lo = std::max<std::int64_t>(0, base - reach);
        const std::int64_t hi = std::min<std::int64_t>(n_in - 1, base + reach);
        for (std::int64_t n = lo; n <= hi; ++n) {
            acc += kern[n - base + reach] * w.samples[static_cast<std::size_t>(n)];
        }
        out.samples[static_cast<std::size_t>(k)] = static_cast<float>(acc);
    }
    return out;
}

int num_mel_frames(std::int64_t num_samples) {
    if (num_samples < kWindowSamples) return 0;
    return static_cast<int>(1 + (num_samples - kWindowSamples) / kHopSamples);
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }

double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

const MatD& mel_filterbank() {
    static const MatD bank = [] {
        constexpr int kBins = kFftSize / 2 + 1;
        const double mel_lo = hz_to_mel(0.0);
        const double mel_hi = hz_to_mel(kSampleRate / 2.0);
        std::vector<double> edges(kNumMelBins + 2);
        for (int i = 0; i < kNumMelBins + 2; ++i) {
            edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / (kNumMelBins + 1));
        }
        MatD fb = MatD::Zero(kNumMelBins, kBins);
        for (int m = 0; m < kNumMelBins; ++m) {
            const double left = edges[m], centre = edges[m + 1], right = edges[m + 2];
            for (int k = 0; k < kBins; ++k) {
                const double f = static_cast<double>(k) * kSampleRate / kFftSize;
                const double rise = (f - left) / (centre - left);
                const double fall = (right - f) / (right - centre);
                fb(m, k) = std::max(0.0, std::min(rise, fall));
            }
        }
        return fb;
    }();
    return bank;
}

MelSpectrogram log_mel(const Waveform& w) {
    if (w.sample_rate != kSampleRate) {
        throw std::invalid_argument("log_mel: expected 16 kHz input, got " +
                                    std::to_string(w.sample_rate));
    }
    const int frames = num_mel_frames(static_cast<std::int64_t>(w.samples.size()));
    if (frames == 0) {
        throw std::invalid_argument("log_mel: input shorter than one 25 ms window");
    }
    static const std::vector<double> window = [] {
        std::vector<double> h(kWindowSamples);
        for (int n = 0; n < kWindowSamples; ++n) {
            h[n] = 0.5 - 0.5 * std::cos(2.0 * kPi * n / kWindowSamples);
        }
        return h;
    }();
    const MatD& bank = mel_filterbank();
    constexpr int kBins = kFftSize / 2 + 1;

    Eigen::FFT<double> fft;
    std::vector<double> buf(kFftSize, 0.0);
    std::vector<std::complex<double>> spec;
    Eigen::VectorXd power(kBins);
    MelSpectrogram out;
    out.frames.resize(frames, kNumMelBins);
    for (int t = 0; t < frames; ++t) {
        const float* src = w.samples.data() + static_cast<std::ptrdiff_t>(t) * kHopSamples;
        for (int n = 0; n < kWindowSamples; ++n) buf[n] = window[n] * src[n];
        fft.fwd(spec, buf);
        for (int k = 0; k < kBins; ++k) power[k] = std::norm(spec[k]);
        const Eigen::VectorXd energies = bank * power;
        for (int m = 0; m < kNumMelBins; ++m) {
            out.frames(t, m) = static_cast<float>(std::log(std::max(energies[m], kLogFloor)));
        }
    }
    return out;
}

}  // namespace speechssl
