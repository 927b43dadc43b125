#include "speechssl/datapipe.hpp"

#include "toy_corpus.hpp"

#include <doctest.h>

#include <algorithm>
#include <fstream>
#include <set>

using namespace speechssl;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    const auto dir = fs::temp_directory_path() / "speechssl_datapipe" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

CorpusIndex synthetic_index(const std::vector<double>& durations) {
    CorpusIndex index;
    for (std::size_t i = 0; i < durations.size(); ++i) {
        index.entries.push_back({"u" + std::to_string(i), "u" + std::to_string(i) + ".wav", durations[i]});
    }
    return index;
}

Waveform tone(double seconds) { return toy::render({{440.0, seconds}}); }

std::multiset<std::size_t> scheduled_members(const std::vector<BatchDescriptor>& order) {
    std::multiset<std::size_t> seen;
    for (const auto& d : order) seen.insert(d.members.begin(), d.members.end());
    return seen;
}

}  // namespace

TEST_SUITE("datapipe") {

TEST_CASE("scan filters short and unreadable files") {
    const auto dir = fresh_dir("scan");
    write_wav(dir / "short.wav", tone(0.1));
    write_wav(dir / "mid.wav", tone(0.5));
    fs::create_directories(dir / "nested");
    write_wav(dir / "nested" / "long.wav", tone(2.0));
    std::ofstream(dir / "broken.wav") << "not a riff header";
    const CorpusIndex index = scan_corpus(dir);
    REQUIRE(index.entries.size() == 2);
    CHECK(index.skipped == 1);
    CHECK(index.filtered == 1);
    for (const auto& e : index.entries) CHECK(e.duration >= kMinDurationSeconds);
    CHECK(scan_corpus(fresh_dir("empty")).entries.empty());
}

TEST_CASE("manifest round trip") {
    const auto dir = fresh_dir("manifest");
    const CorpusIndex index = synthetic_index({1.5, 0.2, 3.25});
    write_manifest(dir / "m.tsv", index);
    const CorpusIndex back = read_manifest(dir / "m.tsv");
    REQUIRE(back.entries.size() == 2);
    for (auto [got, want] : {std::pair{0, 0}, std::pair{1, 2}}) {
        const auto& g = back.entries[static_cast<std::size_t>(got)];
        const auto& w = index.entries[static_cast<std::size_t>(want)];
        CHECK(g.id == w.id);
        CHECK(g.duration == w.duration);
        CHECK(g.path == dir / w.path);
    }
    CHECK(back.filtered == 1);
}

TEST_CASE("crop") {
    Waveform w;
    w.samples.resize(static_cast<std::size_t>(50 * kSampleRate));
    for (std::size_t i = 0; i < w.samples.size(); ++i) w.samples[i] = static_cast<float>(i);
    const Waveform short_one = tone(10.0);
    CHECK(crop(short_one, 40.0, 1, 0, "a").samples == short_one.samples);
    std::set<float> offsets;
    for (std::int64_t epoch = 0; epoch < 20; ++epoch) {
        const Waveform c = crop(w, 40.0, 1, epoch, "a");
        REQUIRE(c.samples.size() == 640000);
        CHECK(c.samples.back() - c.samples.front() == 639999.0f);
        offsets.insert(c.samples.front());
        CHECK(crop(w, 40.0, 1, epoch, "a").samples.front() == c.samples.front());
    }
    CHECK(offsets.size() >= 2);
}

TEST_CASE("sextile boundaries") {
    std::vector<double> durations;
    for (int s = 12; s >= 1; --s) durations.push_back(s);
    const BucketSpec spec = build_buckets(synthetic_index(durations), 6, 100000);
    CHECK(spec.boundaries == std::vector<double>{2, 4, 6, 8, 10});
    CHECK(spec.num_buckets() == 6);
    std::vector<int> counts(6, 0);
    for (double d : durations) ++counts[static_cast<std::size_t>(spec.bucket_of(d))];
    CHECK(counts == std::vector<int>(6, 2));
}

TEST_CASE("identical durations merge into one bucket") {
    const BucketSpec spec = build_buckets(synthetic_index(std::vector<double>(9, 3.0)), 6, 2000);
    CHECK(spec.num_buckets() == 1);
    CHECK(spec.boundaries.empty());
    CHECK_THROWS(build_buckets(CorpusIndex{}, 6, 2000));
}

TEST_CASE("batch size is inverse to bucket length") {
    // 1000 frames need 400 + 999 * 160 samples; 2000 frames need 400 + 1999 * 160.
    const double d1000 = (400.0 + 999 * 160) / kSampleRate;
    const double d2000 = (400.0 + 1999 * 160) / kSampleRate;
    const BucketSpec spec = build_buckets(synthetic_index({d1000, d2000}), 2, 4000);
    CHECK(spec.max_frames == std::vector<int>{1000, 2000});
    CHECK(spec.batch_size == std::vector<int>{4, 2});
}

TEST_CASE("tokens per batch stays within one utterance across buckets") {
    std::vector<double> durations;
    for (int i = 0; i < 300; ++i) durations.push_back(0.3 + 0.131 * i);
    const BucketSpec spec = build_buckets(synthetic_index(durations), 6, 20000);
    for (int b = 0; b < spec.num_buckets(); ++b) {
        const auto bi = static_cast<std::size_t>(b);
        const int tokens = spec.batch_size[bi] * spec.max_frames[bi];
        CHECK(tokens <= spec.tokens_per_batch);
        CHECK(tokens > spec.tokens_per_batch - spec.max_frames[bi]);
    }
}

TEST_CASE("every utterance appears once per epoch") {
    std::vector<double> durations;
    for (int i = 0; i < 157; ++i) durations.push_back(0.5 + 0.07 * ((i * 37) % 157));
    const CorpusIndex index = synthetic_index(durations);
    const BucketSpec spec = build_buckets(index, 6, 3000);
    std::multiset<std::size_t> all;
    for (std::size_t i = 0; i < index.entries.size(); ++i) all.insert(i);
    for (std::int64_t epoch = 0; epoch < 10; ++epoch) {
        const auto order = schedule_epoch(spec, index, epoch, 4);
        CHECK(scheduled_members(order) == all);
        std::size_t expected_batches = 0;
        std::vector<int> per_bucket(static_cast<std::size_t>(spec.num_buckets()), 0);
        for (std::size_t i = 0; i < index.entries.size(); ++i) {
            ++per_bucket[static_cast<std::size_t>(spec.bucket_of(index.entries[i].duration))];
        }
        for (int b = 0; b < spec.num_buckets(); ++b) {
            const auto bi = static_cast<std::size_t>(b);
            expected_batches += static_cast<std::size_t>(
                (per_bucket[bi] + spec.batch_size[bi] - 1) / spec.batch_size[bi]);
        }
        CHECK(order.size() == expected_batches);
        for (const auto& d : order) {
            for (std::size_t m : d.members) CHECK(spec.bucket_of(index.entries[m].duration) == d.bucket);
        }
    }
}

TEST_CASE("single bucket is a shuffled sequence") {
    const CorpusIndex index = synthetic_index(std::vector<double>(10, 2.0));
    const BucketSpec spec = build_buckets(index, 6, 3 * frames_for_duration(2.0));
    const auto a = schedule_epoch(spec, index, 0, 1);
    CHECK(a.size() == 4);
    CHECK(a.back().members.size() == 1);
    const auto b = schedule_epoch(spec, index, 1, 1);
    std::vector<std::size_t> fa, fb;
    for (const auto& d : a) fa.insert(fa.end(), d.members.begin(), d.members.end());
    for (const auto& d : b) fb.insert(fb.end(), d.members.begin(), d.members.end());
    CHECK(fa != fb);
}

TEST_CASE("round-robin draws buckets in proportion to remaining batches") {
    std::vector<double> durations(90, 1.0);
    durations.insert(durations.end(), 10, 2.0);
    const CorpusIndex index = synthetic_index(durations);
    const BucketSpec spec = build_buckets(index, 2, 1);
    REQUIRE(spec.batch_size == std::vector<int>{1, 1});
    double short_share = 0.0;
    for (std::int64_t epoch = 0; epoch < 200; ++epoch) {
        const auto order = schedule_epoch(spec, index, epoch, 11);
        for (std::size_t i = 0; i < 10; ++i) short_share += order[i].bucket == 0;
    }
    CHECK(std::abs(short_share / 200.0 - 9.0) < 0.5);
}

TEST_CASE("batches pad to the bucket maximum") {
    const auto dir = fresh_dir("pad");
    // 300 and 450 frames; bucket max 500 frames.
    const auto samples = [](int frames) { return (400.0 + (frames - 1) * 160.0) / kSampleRate; };
    write_wav(dir / "a.wav", tone(samples(300)));
    write_wav(dir / "b.wav", tone(samples(450)));
    CorpusIndex index = scan_corpus(dir);
    REQUIRE(index.entries.size() == 2);
    BucketSpec spec = build_buckets(index, 1, 10000);
    spec.max_frames = {500};
    spec.max_duration = {samples(500)};
    const BatchDescriptor desc{3, 0, {0, 1}};
    const Batch batch = load_batch(desc, index, spec, {5, 40.0});
    REQUIRE(batch.mels.size() == 2);
    CHECK(batch.mels[0].rows() == 500);
    CHECK(batch.mels[1].rows() == 500);
    CHECK(batch.lengths == std::vector<int>{300, 450});
    CHECK(batch.mels[0].bottomRows(200).isZero());
    CHECK(batch.epoch == 3);
    const Batch again = load_batch(desc, index, spec, {5, 40.0});
    CHECK(again.mels[0] == batch.mels[0]);
    CHECK(again.mels[1] == batch.mels[1]);

    fs::remove(dir / "a.wav");
    const std::string id = index.entries[0].id;
    CHECK_THROWS_WITH(load_batch(desc, index, spec, {5, 40.0}), doctest::Contains(id.c_str()));
}

TEST_CASE("prefetch output is independent of worker count") {
    const auto dir = fresh_dir("prefetch");
    toy::write_tone_corpus(dir, 12, 3);
    const CorpusIndex index = scan_corpus(dir);
    const BucketSpec spec = build_buckets(index, 3, 300);
    const auto order = schedule_epoch(spec, index, 2, 9);
    const PipelineSettings settings{9, 40.0};
    auto drain = [&](int workers) {
        PrefetchLoader loader(order, [&](const BatchDescriptor& d) { return load_batch(d, index, spec, settings); },
                              workers, 2);
        std::vector<Batch> out;
        while (auto b = loader.next()) out.push_back(std::move(*b));
        return out;
    };
    const auto one = drain(1), four = drain(4);
    REQUIRE(one.size() == order.size());
    REQUIRE(four.size() == order.size());
    for (std::size_t i = 0; i < one.size(); ++i) {
        CHECK(one[i].ids == four[i].ids);
        CHECK(one[i].lengths == four[i].lengths);
        REQUIRE(one[i].mels.size() == four[i].mels.size());
        for (std::size_t j = 0; j < one[i].mels.size(); ++j) CHECK(one[i].mels[j] == four[i].mels[j]);
    }
}

TEST_CASE("prefetch surfaces loader errors in order") {
    std::vector<BatchDescriptor> descs(5);
    for (std::size_t i = 0; i < descs.size(); ++i) descs[i].members = {i};
    PrefetchLoader loader(descs, [](const BatchDescriptor& d) {
        if (d.members[0] == 3) throw std::runtime_error("boom");
        Batch b;
        b.ids = {std::to_string(d.members[0])};
        return b;
    }, 3, 2);
    for (int i = 0; i < 3; ++i) CHECK(loader.next()->ids[0] == std::to_string(i));
    CHECK_THROWS_WITH(loader.next(), "boom");
}

}
