#pragma once

#include "speechssl/frontend.hpp"

#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

namespace speechssl {

inline constexpr double kMinDurationSeconds = 0.3;
inline constexpr double kMaxDurationSeconds = 40.0;

struct CorpusEntry {
    std::string id;
    std::filesystem::path path;
    double duration = 0.0;  // seconds

    bool operator==(const CorpusEntry&) const = default;
};

struct CorpusIndex {
    std::vector<CorpusEntry> entries;
    int skipped = 0;  // unreadable files encountered while scanning
    int filtered = 0;  // utterances dropped for being shorter than the minimum
};

/// Recursively indexes *.wav files under `root`; ids are root-relative paths
/// without the extension. Unreadable files are skipped with a warning.
CorpusIndex scan_corpus(const std::filesystem::path& root,
                        double min_duration = kMinDurationSeconds);

/// Manifest lines: "id<TAB>path<TAB>duration_s". Relative paths resolve
/// against the manifest's directory.
CorpusIndex read_manifest(const std::filesystem::path& manifest,
                          double min_duration = kMinDurationSeconds);
void write_manifest(const std::filesystem::path& manifest, const CorpusIndex& index);

/// Identity up to `max_seconds`; longer input yields a contiguous window whose
/// start is keyed by (seed, epoch, utterance id).
Waveform crop(const Waveform& w, double max_seconds, std::uint64_t seed, std::int64_t epoch,
              const std::string& utt_id);

/// Frame count of an utterance of `seconds` after resampling to 16 kHz and
/// cropping to `max_seconds`.
int frames_for_duration(double seconds, double max_seconds = kMaxDurationSeconds);

struct BucketSpec {
    std::vector<double> boundaries;     // ascending cut points; size = buckets - 1
    std::vector<double> max_duration;   // per bucket, seconds
    std::vector<int> max_frames;        // per bucket; batches pad to this
    std::vector<int> batch_size;        // per bucket
    int tokens_per_batch = 0;

    int num_buckets() const { return static_cast<int>(max_duration.size()); }
    /// First bucket whose max duration covers `seconds`.
    int bucket_of(double seconds) const;
};

/// Equal-count split of the sorted (capped) durations; duplicate cut points
/// merge buckets. batch_size = max(1, tokens_per_batch / max_frames).
BucketSpec build_buckets(const CorpusIndex& index, int num_buckets, int tokens_per_batch,
                         double max_seconds = kMaxDurationSeconds);

struct BatchDescriptor {
    std::int64_t epoch = 0;
    int bucket = 0;
    std::vector<std::size_t> members;  // positions in the corpus index
};

/// Shuffles each bucket, chunks it into batches (last partial batch kept) and
/// orders batches by repeatedly drawing a bucket with probability
/// proportional to its remaining batch count.
std::vector<BatchDescriptor> schedule_epoch(const BucketSpec& spec, const CorpusIndex& index,
                                            std::int64_t epoch, std::uint64_t seed);

struct Batch {
    std::vector<MatF> mels;  // each max_frames x 80, zero padded
    std::vector<int> lengths;
    std::vector<std::string> ids;
    std::int64_t epoch = 0;
    int bucket = 0;
};

struct PipelineSettings {
    std::uint64_t seed = 0;
    double max_seconds = kMaxDurationSeconds;
};

/// Load, resample to 16 kHz, crop, featurise and pad one batch.
Batch load_batch(const BatchDescriptor& desc, const CorpusIndex& index, const BucketSpec& spec,
                 const PipelineSettings& settings);

/// Runs `load` on a bounded pool of workers and hands results back strictly in
/// descriptor order.
class PrefetchLoader {
public:
    using LoadFn = std::function<Batch(const BatchDescriptor&)>;

    PrefetchLoader(std::vector<BatchDescriptor> descriptors, LoadFn load, int workers,
                   int capacity = 8);
    ~PrefetchLoader();
    PrefetchLoader(const PrefetchLoader&) = delete;
    PrefetchLoader& operator=(const PrefetchLoader&) = delete;

    /// Next batch in order; nullopt once exhausted. Rethrows loader errors.
    std::optional<Batch> next();

private:
    void worker_loop();

    std::vector<BatchDescriptor> descriptors_;
    LoadFn load_;
    std::size_t capacity_;
    std::mutex mu_;
    std::condition_variable cv_;
    std::size_t next_to_claim_ = 0;
    std::size_t next_to_deliver_ = 0;
    bool stop_ = false;
    std::map<std::size_t, Batch> ready_;
    std::map<std::size_t, std::exception_ptr> errors_;
    std::vector<std::thread> threads_;
};

}  // namespace speechssl
