#pragma once

#include "speechssl/encoder.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <string>

namespace speechssl {

/// Exit codes shared by every subcommand.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// Environment variable that overrides run.seed.
inline constexpr const char* kSeedEnvVar = "SPEECHSSL_SEED";

/// Reference encoder size the paper-scale inspection is compared against.
inline constexpr std::int64_t kReferenceParameterCount = 630'000'000;

struct PretrainOptions {
    std::filesystem::path config;
    std::optional<std::filesystem::path> init_from;
    std::optional<std::string> init_mode;
};

struct FinetuneOptions {
    std::filesystem::path config;
    std::optional<std::filesystem::path> init_from;
};

struct DecodeOptions {
    std::filesystem::path checkpoint;
    std::filesystem::path input;  // corpus directory or audio manifest
    std::optional<std::filesystem::path> output;  // stdout when unset
    int beam = 8;
    bool greedy = false;
};

struct ScoreOptions {
    std::filesystem::path refs;
    std::filesystem::path hyps;
    std::optional<std::filesystem::path> report;  // <hyps>.score.csv when unset
};

struct InspectOptions {
    std::optional<std::filesystem::path> checkpoint;
    bool paper_scale = false;
    bool desk_scale = false;
};

int cmd_pretrain(const PretrainOptions& opts);
int cmd_quantize(const std::filesystem::path& config, const std::filesystem::path& out_dir);
int cmd_finetune(const FinetuneOptions& opts);
int cmd_decode(const DecodeOptions& opts);
int cmd_score(const ScoreOptions& opts);
int cmd_inspect(const InspectOptions& opts, std::ostream& out);

/// "id<TAB>text" lines; a line without a tab is an id with empty text.
std::map<std::string, std::string> read_transcripts(const std::filesystem::path& path);

/// Shape-only parameter report for an encoder configuration. Returns true
/// when the total lies within `tolerance` of `reference` (skipped if
/// reference <= 0).
bool print_parameter_report(const EncoderConfig& cfg, std::int64_t reference, double tolerance,
                            std::ostream& out);

}  // namespace speechssl
