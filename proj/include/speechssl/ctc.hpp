#pragma once

#include "speechssl/tensor.hpp"

#include <stdexcept>
#include <string>
#include <vector>

namespace speechssl {

inline constexpr int kBlank = 0;

/// Character vocabulary; id 0 is the CTC blank and never produced by encode.
class Tokenizer {
public:
    Tokenizer() = default;
    /// Alphabet = every code point in `texts` plus space, sorted.
    static Tokenizer from_transcripts(const std::vector<std::string>& texts);
    /// Ids 1..n follow the code point order of `alphabet` (UTF-8).
    static Tokenizer from_alphabet(const std::string& alphabet);

    std::vector<int> encode(const std::string& text) const;
    std::string decode(const std::vector<int>& ids) const;

    /// Vocabulary size including the blank.
    int size() const { return static_cast<int>(symbols_.size()) + 1; }
    std::string alphabet() const;

private:
    std::vector<char32_t> symbols_;
};

std::u32string utf8_to_u32(const std::string& s);
std::string u32_to_utf8(const std::u32string& s);

struct CtcInfeasibleError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// -log sum over all alignments of `target` (no blanks) given T x V
/// per-frame log-probabilities. With `grad_logits`, also writes the gradient
/// with respect to the logits those log-probabilities were normalised from.
/// Throws CtcInfeasibleError when T is too short for the target.
double ctc_loss(const MatD& logprobs, const std::vector<int>& target, MatD* grad_logits = nullptr);

/// Rows of log_softmax(logits).
MatD log_softmax_rows(const MatD& logits);

struct Hypothesis {
    std::vector<int> tokens;
    double log_prob = 0.0;
};

/// Per-frame argmax, repeats collapsed, blanks removed. log_prob is the
/// best path's log probability.
Hypothesis greedy_decode(const MatD& logprobs);

/// CTC prefix beam search; equivalent prefixes are merged by log-sum-exp and
/// the prefix with the highest total probability is returned.
Hypothesis beam_decode(const MatD& logprobs, int beam_width);

enum class ScoreUnit { kWord, kChar };

/// Levenshtein distance between token sequences.
int edit_distance(const std::vector<std::u32string>& ref, const std::vector<std::u32string>& hyp);

std::vector<std::u32string> split_units(const std::string& text, ScoreUnit unit);

/// Summed edit distance over all pairs / total reference length, in percent.
double score(const std::vector<std::string>& refs, const std::vector<std::string>& hyps,
             ScoreUnit unit);

}  // namespace speechssl
