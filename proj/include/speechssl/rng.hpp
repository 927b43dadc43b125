#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

namespace speechssl {

/// All randomness in the pipeline flows through mt19937_64 streams whose
/// seeds are derived from a tuple of keys (global seed, epoch, utterance
/// hash, purpose tag, ...). Streams never depend on thread count or timing.
using RngStream = std::mt19937_64;

std::uint64_t splitmix64(std::uint64_t x);

/// Mix an ordered list of keys into one 64-bit seed.
std::uint64_t derive_seed(std::initializer_list<std::uint64_t> keys);

/// FNV-1a over the bytes of `s`; used to key streams by utterance id.
std::uint64_t hash_string(std::string_view s);

inline RngStream make_stream(std::initializer_list<std::uint64_t> keys) {
    return RngStream(derive_seed(keys));
}

// Purpose tags keep streams for different consumers disjoint.
namespace stream_tag {
inline constexpr std::uint64_t kQuantizerProjection = 0x51500001;
inline constexpr std::uint64_t kQuantizerCodebook = 0x51500002;
inline constexpr std::uint64_t kMaskStarts = 0x4d410001;
inline constexpr std::uint64_t kMaskNoise = 0x4d410002;
inline constexpr std::uint64_t kCrop = 0x44500001;
inline constexpr std::uint64_t kBucketShuffle = 0x44500002;
inline constexpr std::uint64_t kBucketOrder = 0x44500003;
inline constexpr std::uint64_t kEncoderInit = 0x454e0001;
inline constexpr std::uint64_t kDropout = 0x454e0002;
inline constexpr std::uint64_t kHeadInit = 0x454e0003;
inline constexpr std::uint64_t kSpecAugment = 0x46540001;
}  // namespace stream_tag

}  // namespace speechssl
