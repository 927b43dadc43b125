#include "speechssl/datapipe.hpp"

#include "speechssl/rng.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace speechssl {

namespace {

bool is_wav(const std::filesystem::path& p) {
    std::string ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return ext == ".wav";
}

}  // namespace

CorpusIndex scan_corpus(const std::filesystem::path& root, double min_duration) {
    if (!std::filesystem::is_directory(root)) {
        throw std::runtime_error("corpus root is not a directory: " + root.string());
    }
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::recursive_directory_iterator(root)) {
        if (e.is_regular_file() && is_wav(e.path())) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    CorpusIndex index;
    for (const auto& f : files) {
        WavInfo info;
        try {
            info = read_wav_info(f);
        } catch (const std::exception& e) {
            std::cerr << "warning: skipping " << f.string() << ": " << e.what() << '\n';
            ++index.skipped;
            continue;
        }
        const double duration = info.duration_seconds();
        if (duration < min_duration) {
            ++index.filtered;
            continue;
        }
        auto rel = std::filesystem::relative(f, root);
        rel.replace_extension();
        index.entries.push_back({rel.generic_string(), f, duration});
    }
    return index;
}

CorpusIndex read_manifest(const std::filesystem::path& manifest, double min_duration) {
    std::ifstream in(manifest);
    if (!in) throw std::runtime_error("cannot read manifest: " + manifest.string());
    CorpusIndex index;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string id, path, dur;
        if (!std::getline(ls, id, '\t') || !std::getline(ls, path, '\t') ||
            !std::getline(ls, dur)) {
            throw std::runtime_error(manifest.string() + ":" + std::to_string(line_no) +
                                     ": expected id<TAB>path<TAB>duration");
        }
        double duration = 0.0;
        try {
            duration = std::stod(dur);
        } catch (const std::exception&) {
            throw std::runtime_error(manifest.string() + ":" + std::to_string(line_no) +
                                     ": bad duration '" + dur + "'");
        }
        if (duration < min_duration) {
            ++index.filtered;
            continue;
        }
        std::filesystem::path p(path);
        if (p.is_relative()) p = manifest.parent_path() / p;
        index.entries.push_back({id, p, duration});
    }
    return index;
}

void write_manifest(const std::filesystem::path& manifest, const CorpusIndex& index) {
    std::ofstream out(manifest);
    if (!out) throw std::runtime_error("cannot write manifest: " + manifest.string());
    out.precision(17);
    for (const auto& e : index.entries) {
        out << e.id << '\t' << e.path.string() << '\t' << e.duration << '\n';
    }
}

Waveform crop(const Waveform& w, double max_seconds, std::uint64_t seed, std::int64_t epoch,
              const std::string& utt_id) {
    const auto max_samples = static_cast<std::size_t>(std::llround(max_seconds * w.sample_rate));
    if (w.samples.size() <= max_samples) return w;
    auto rng = make_stream(
        {seed, stream_tag::kCrop, static_cast<std::uint64_t>(epoch), hash_string(utt_id)});
    std::uniform_int_distribution<std::size_t> pick(0, w.samples.size() - max_samples);
    const std::size_t start = pick(rng);
    Waveform out;
    out.sample_rate = w.sample_rate;
    out.samples.assign(w.samples.begin() + static_cast<std::ptrdiff_t>(start),
                       w.samples.begin() + static_cast<std::ptrdiff_t>(start + max_samples));
    return out;
}

int frames_for_duration(double seconds, double max_seconds) {
    const double capped = std::min(seconds, max_seconds);
    return num_mel_frames(std::llround(capped * kSampleRate));
}

int BucketSpec::bucket_of(double seconds) const {
    for (int b = 0; b < num_buckets(); ++b) {
        if (seconds <= max_duration[static_cast<std::size_t>(b)]) return b;
    }
    return num_buckets() - 1;
}

BucketSpec build_buckets(const CorpusIndex& index, int num_buckets, int tokens_per_batch,
                         double max_seconds) {
    if (index.entries.empty()) throw std::invalid_argument("build_buckets: empty corpus index");
    if (num_buckets < 1) throw std::invalid_argument("build_buckets: need at least one bucket");
    if (tokens_per_batch < 1) throw std::invalid_argument("build_buckets: tokens_per_batch < 1");
    std::vector<double> durations;
    durations.reserve(index.entries.size());
    for (const auto& e : index.entries) durations.push_back(std::min(e.duration, max_seconds));
    std::sort(durations.begin(), durations.end());
    const auto n = static_cast<std::int64_t>(durations.size());

    std::vector<double> cuts;
    for (int k = 0; k < num_buckets; ++k) {
        const std::int64_t last = ((k + 1) * n) / num_buckets - 1;
        if (last < 0) continue;
        const double cut = durations[static_cast<std::size_t>(last)];
        if (cuts.empty() || cut > cuts.back()) cuts.push_back(cut);
    }
    if (static_cast<int>(cuts.size()) < num_buckets) {
        std::cerr << "warning: only " << cuts.size() << " distinct bucket boundaries for "
                  << num_buckets << " requested buckets; merging\n";
    }
    BucketSpec spec;
    spec.tokens_per_batch = tokens_per_batch;
    spec.max_duration = cuts;
    spec.boundaries.assign(cuts.begin(), cuts.end() - 1);
    for (double d : cuts) {
        const int frames = std::max(1, frames_for_duration(d, max_seconds));
        spec.max_frames.push_back(frames);
        spec.batch_size.push_back(std::max(1, tokens_per_batch / frames));
    }
    return spec;
}

std::vector<BatchDescriptor> schedule_epoch(const BucketSpec& spec, const CorpusIndex& index,
                                            std::int64_t epoch, std::uint64_t seed) {
    const int buckets = spec.num_buckets();
    std::vector<std::vector<std::size_t>> members(static_cast<std::size_t>(buckets));
    for (std::size_t i = 0; i < index.entries.size(); ++i) {
        members[static_cast<std::size_t>(spec.bucket_of(index.entries[i].duration))].push_back(i);
    }
    std::vector<std::vector<BatchDescriptor>> per_bucket(static_cast<std::size_t>(buckets));
    for (int b = 0; b < buckets; ++b) {
        auto& m = members[static_cast<std::size_t>(b)];
        auto rng = make_stream({seed, stream_tag::kBucketShuffle,
                                static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(b)});
        std::shuffle(m.begin(), m.end(), rng);
        const auto size = static_cast<std::size_t>(spec.batch_size[static_cast<std::size_t>(b)]);
        for (std::size_t start = 0; start < m.size(); start += size) {
            BatchDescriptor d;
            d.epoch = epoch;
            d.bucket = b;
            d.members.assign(m.begin() + static_cast<std::ptrdiff_t>(start),
                             m.begin() + static_cast<std::ptrdiff_t>(std::min(m.size(), start + size)));
            per_bucket[static_cast<std::size_t>(b)].push_back(std::move(d));
        }
    }

    std::vector<std::size_t> next(static_cast<std::size_t>(buckets), 0);
    std::size_t remaining = 0;
    for (const auto& v : per_bucket) remaining += v.size();
    auto rng = make_stream({seed, stream_tag::kBucketOrder, static_cast<std::uint64_t>(epoch)});
    std::vector<BatchDescriptor> order;
    order.reserve(remaining);
    while (remaining > 0) {
        std::uniform_int_distribution<std::size_t> draw(0, remaining - 1);
        std::size_t ticket = draw(rng);
        for (int b = 0; b < buckets; ++b) {
            const auto bi = static_cast<std::size_t>(b);
            const std::size_t left = per_bucket[bi].size() - next[bi];
            if (ticket < left) {
                order.push_back(std::move(per_bucket[bi][next[bi]++]));
                break;
            }
            ticket -= left;
        }
        --remaining;
    }
    return order;
}

Batch load_batch(const BatchDescriptor& desc, const CorpusIndex& index, const BucketSpec& spec,
                 const PipelineSettings& settings) {
    Batch batch;
    batch.epoch = desc.epoch;
    batch.bucket = desc.bucket;
    const int max_frames = spec.max_frames.at(static_cast<std::size_t>(desc.bucket));
    for (std::size_t i : desc.members) {
        const CorpusEntry& e = index.entries.at(i);
        MelSpectrogram mel;
        try {
            Waveform w = resample(load_audio(e.path), kSampleRate);
            w = crop(w, settings.max_seconds, settings.seed, desc.epoch, e.id);
            mel = log_mel(w);
        } catch (const std::exception& ex) {
            throw std::runtime_error("utterance " + e.id + ": " + ex.what());
        }
        // Resampling may round one sample past the header-derived length.
        const int frames = std::min(mel.num_frames(), max_frames);
        MatF padded = MatF::Zero(max_frames, kNumMelBins);
        padded.topRows(frames) = mel.frames.topRows(frames);
        batch.mels.push_back(std::move(padded));
        batch.lengths.push_back(frames);
        batch.ids.push_back(e.id);
    }
    return batch;
}

// ---------------------------------------------------------------------------
// PrefetchLoader

PrefetchLoader::PrefetchLoader(std::vector<BatchDescriptor> descriptors, LoadFn load, int workers,
                               int capacity)
    : descriptors_(std::move(descriptors)),
      load_(std::move(load)),
      capacity_(static_cast<std::size_t>(std::max(1, capacity))) {
    for (int i = 0; i < workers; ++i) threads_.emplace_back([this] { worker_loop(); });
}

PrefetchLoader::~PrefetchLoader() {
    {
        std::lock_guard<std::mutex> lock(mu_);
        stop_ = true;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
}

void PrefetchLoader::worker_loop() {
    while (true) {
        std::size_t idx;
        {
            std::unique_lock<std::mutex> lock(mu_);
            cv_.wait(lock, [&] {
                return stop_ || (next_to_claim_ < descriptors_.size() &&
                                 next_to_claim_ < next_to_deliver_ + capacity_);
            });
            if (stop_) return;
            idx = next_to_claim_++;
        }
        std::optional<Batch> result;
        std::exception_ptr error;
        try {
            result = load_(descriptors_[idx]);
        } catch (...) {
            error = std::current_exception();
        }
        {
            std::lock_guard<std::mutex> lock(mu_);
            if (error) {
                errors_[idx] = error;
            } else {
                ready_.emplace(idx, std::move(*result));
            }
        }
        cv_.notify_all();
    }
}

std::optional<Batch> PrefetchLoader::next() {
    if (threads_.empty()) {
        if (next_to_deliver_ >= descriptors_.size()) return std::nullopt;
        return load_(descriptors_[next_to_deliver_++]);
    }
    std::unique_lock<std::mutex> lock(mu_);
    if (next_to_deliver_ >= descriptors_.size()) return std::nullopt;
    const std::size_t idx = next_to_deliver_;
    cv_.wait(lock, [&] { return ready_.count(idx) || errors_.count(idx); });
    if (auto it = errors_.find(idx); it != errors_.end()) {
        auto error = it->second;
        errors_.erase(it);
        ++next_to_deliver_;
        lock.unlock();
        cv_.notify_all();
        std::rethrow_exception(error);
    }
    Batch out = std::move(ready_.at(idx));
    ready_.erase(idx);
    ++next_to_deliver_;
    lock.unlock();
    cv_.notify_all();
    return out;
}

}  // namespace speechssl
