#include "speechssl/quantizer.hpp"

#include "speechssl/rng.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace speechssl {

QuantizerState::QuantizerState(QuantizerConfig config, std::uint64_t seed,
                               std::vector<MatF> projections, std::vector<MatF> codebooks)
    : config_(config),
      seed_(seed),
      projections_(std::move(projections)),
      codebooks_(std::move(codebooks)) {}

std::vector<unsigned char> QuantizerState::serialize() const {
    std::vector<unsigned char> out;
    auto put = [&](const void* p, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        out.insert(out.end(), b, b + n);
    };
    const std::int32_t dims[4] = {config_.num_codebooks, config_.vocab_size,
                                  config_.codeword_dim, config_.input_dim};
    put(dims, sizeof dims);
    put(&seed_, sizeof seed_);
    for (const auto& p : projections_) put(p.data(), sizeof(float) * p.size());
    for (const auto& c : codebooks_) put(c.data(), sizeof(float) * c.size());
    return out;
}

std::uint64_t QuantizerState::fingerprint() const {
    const auto bytes = serialize();
    return hash_string(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

StackedFeatures stack_downsample(const MelSpectrogram& mel) {
    const int t = mel.num_frames();
    if (t < kStackWindow) {
        throw std::invalid_argument("utterance too short for one label frame (" +
                                    std::to_string(t) + " frames)");
    }
    const int bins = static_cast<int>(mel.frames.cols());
    const int l = t / kStackWindow;
    StackedFeatures out;
    out.frames.resize(l, kStackWindow * bins);
    // Row-major storage makes each stacked row the contiguous block of four
    // input rows.
    for (int i = 0; i < l; ++i) {
        std::memcpy(out.frames.row(i).data(), mel.frames.row(i * kStackWindow).data(),
                    sizeof(float) * kStackWindow * bins);
    }
    return out;
}

StackedFeatures normalize(const StackedFeatures& sf) {
    const int l = sf.num_frames();
    if (l < 1) throw std::invalid_argument("normalize: no label frames");
    const MatD x = sf.frames.cast<double>();
    const RowVec<double> mean = x.colwise().mean();
    const MatD centred = x.rowwise() - mean;
    const RowVec<double> var = centred.array().square().colwise().mean();
    const RowVec<double> inv = (var.array() + kNormEpsilon).rsqrt();
    StackedFeatures out;
    out.frames = (centred.array().rowwise() * inv.array()).matrix().cast<float>();
    return out;
}

QuantizerState init_quantizer(std::uint64_t seed, const QuantizerConfig& config) {
    if (config.num_codebooks < 1 || config.vocab_size < 1 || config.codeword_dim < 1 ||
        config.input_dim < 1) {
        throw std::invalid_argument("init_quantizer: all dimensions must be >= 1");
    }
    if (config.vocab_size > 65536) {
        throw std::invalid_argument("init_quantizer: vocab_size must fit in 16 bits");
    }
    const double bound = std::sqrt(6.0 / (config.input_dim + config.codeword_dim));
    std::vector<MatF> projections;
    std::vector<MatF> codebooks;
    for (int j = 0; j < config.num_codebooks; ++j) {
        auto rng = make_stream({seed, stream_tag::kQuantizerProjection,
                                static_cast<std::uint64_t>(j)});
        std::uniform_real_distribution<double> uni(-bound, bound);
        MatF p(config.input_dim, config.codeword_dim);
        for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] = static_cast<float>(uni(rng));
        projections.push_back(std::move(p));
    }
    for (int j = 0; j < config.num_codebooks; ++j) {
        auto rng = make_stream({seed, stream_tag::kQuantizerCodebook,
                                static_cast<std::uint64_t>(j)});
        std::normal_distribution<double> normal(0.0, 1.0);
        MatF c(config.vocab_size, config.codeword_dim);
        for (Eigen::Index i = 0; i < c.size(); ++i) c.data()[i] = static_cast<float>(normal(rng));
        codebooks.push_back(std::move(c));
    }
    return QuantizerState(config, seed, std::move(projections), std::move(codebooks));
}

LabelTensor assign_labels(const QuantizerState& qs, const StackedFeatures& normalized) {
    const auto& cfg = qs.config();
    if (normalized.frames.cols() != cfg.input_dim) {
        throw std::invalid_argument("assign_labels: dimension mismatch (features have " +
                                    std::to_string(normalized.frames.cols()) +
                                    " channels, projection expects " +
                                    std::to_string(cfg.input_dim) + ")");
    }
    const int l = normalized.num_frames();
    LabelTensor out;
    out.num_frames = l;
    out.num_codebooks = cfg.num_codebooks;
    out.labels.resize(static_cast<std::size_t>(l) * cfg.num_codebooks);
    const MatD x = normalized.frames.cast<double>();
    for (int j = 0; j < cfg.num_codebooks; ++j) {
        const MatD projected = x * qs.projection(j).cast<double>();
        const MatD book = qs.codebook(j).cast<double>();
        for (int r = 0; r < l; ++r) {
            double best = std::numeric_limits<double>::infinity();
            int best_i = 0;
            for (int i = 0; i < cfg.vocab_size; ++i) {
                double d = 0.0;
                for (int k = 0; k < cfg.codeword_dim; ++k) {
                    const double diff = projected(r, k) - book(i, k);
                    d += diff * diff;
                }
                if (d < best) {
                    best = d;
                    best_i = i;
                }
            }
            out.labels[static_cast<std::size_t>(r) * cfg.num_codebooks + j] =
                static_cast<std::uint16_t>(best_i);
        }
    }
    return out;
}

LabelTensor compute_labels(const QuantizerState& qs, const MelSpectrogram& mel) {
    return assign_labels(qs, normalize(stack_downsample(mel)));
}

void write_label_cache(const std::filesystem::path& path, const LabelTensor& labels,
                       int vocab_size) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write label cache: " + path.string());
    out << "MSEQ1 " << labels.num_frames << ' ' << labels.num_codebooks << ' ' << vocab_size
        << '\n';
    for (std::uint16_t v : labels.labels) {
        const unsigned char b[2] = {static_cast<unsigned char>(v & 0xff),
                                    static_cast<unsigned char>(v >> 8)};
        out.write(reinterpret_cast<const char*>(b), 2);
    }
}

LabelTensor read_label_cache(const std::filesystem::path& path, int* vocab_size) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read label cache: " + path.string());
    std::string header;
    std::getline(in, header);
    std::istringstream hs(header);
    std::string magic;
    int l = 0, n = 0, v = 0;
    if (!(hs >> magic >> l >> n >> v) || magic != "MSEQ1" || l < 0 || n < 1 || v < 1) {
        throw std::runtime_error("malformed label cache header: " + path.string());
    }
    LabelTensor out;
    out.num_frames = l;
    out.num_codebooks = n;
    out.labels.resize(static_cast<std::size_t>(l) * n);
    for (auto& label : out.labels) {
        unsigned char b[2];
        if (!in.read(reinterpret_cast<char*>(b), 2)) {
            throw std::runtime_error("truncated label cache: " + path.string());
        }
        label = static_cast<std::uint16_t>(b[0] | (b[1] << 8));
        if (label >= v) throw std::runtime_error("label out of range in " + path.string());
    }
    if (vocab_size) *vocab_size = v;
    return out;
}

}  // namespace speechssl
