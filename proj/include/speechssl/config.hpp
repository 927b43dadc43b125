#pragma once

#include "speechssl/datapipe.hpp"
#include "speechssl/encoder.hpp"
#include "speechssl/finetune.hpp"
#include "speechssl/pretrain.hpp"

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

namespace speechssl {

/// Config problems; `key()` is "section.name" when one key is at fault.
class ConfigError : public std::runtime_error {
public:
    ConfigError(std::string key, const std::string& message)
        : std::runtime_error(message), key_(std::move(key)) {}
    const std::string& key() const { return key_; }

private:
    std::string key_;
};

enum class Command { kPretrain, kQuantize, kFinetune, kOther };

struct DataSettings {
    std::filesystem::path corpus_root;
    std::filesystem::path transcripts;  // "id<TAB>text" lines; finetune only
    int num_buckets = 6;
    int tokens_per_batch = 2000;  // Mel frames per batch
    double min_seconds = kMinDurationSeconds;
    double max_seconds = kMaxDurationSeconds;
    int workers = 2;
};

struct RunConfig {
    std::uint64_t seed = 0;
    std::filesystem::path output_dir = "runs/default";
    DataSettings data;
    EncoderConfig encoder = EncoderConfig::desk_scale();
    PretrainConfig pretrain;
    std::int64_t pretrain_checkpoint_every = 500;
    std::filesystem::path label_cache_dir;
    FinetuneConfig finetune;
    std::int64_t finetune_checkpoint_every = 500;
    std::filesystem::path finetune_init_from;
};

/// INI-style file: [section] headers, "key = value" lines, ';' or '#'
/// comments. Unknown sections or keys, malformed values and missing keys
/// required by `command` raise ConfigError. `seed_override` replaces
/// run.seed (and every seed that defaults to it).
RunConfig load_run_config(const std::filesystem::path& path, Command command,
                          const std::string* seed_override = nullptr);

/// Every key with its effective value; load_run_config reads it back to the
/// same RunConfig.
void write_run_config(const std::filesystem::path& path, const RunConfig& cfg);

}  // namespace speechssl
