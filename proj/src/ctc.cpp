#include "speechssl/ctc.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

namespace speechssl {
namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
    if (a == kNegInf) return b;
    if (b == kNegInf) return a;
    const double hi = std::max(a, b);
    return hi + std::log1p(std::exp(std::min(a, b) - hi));
}

}  // namespace

// ---------------------------------------------------------------------------
// UTF-8 / tokenizer

std::u32string utf8_to_u32(const std::string& s) {
    std::u32string out;
    for (std::size_t i = 0; i < s.size();) {
        const auto c = static_cast<unsigned char>(s[i]);
        int len = 1;
        char32_t cp = c;
        if (c >= 0xF0) {
            len = 4;
            cp = c & 0x07;
        } else if (c >= 0xE0) {
            len = 3;
            cp = c & 0x0F;
        } else if (c >= 0xC0) {
            len = 2;
            cp = c & 0x1F;
        } else if (c >= 0x80) {
            throw std::invalid_argument("invalid UTF-8 sequence");
        }
        if (i + static_cast<std::size_t>(len) > s.size()) {
            throw std::invalid_argument("truncated UTF-8 sequence");
        }
        for (int k = 1; k < len; ++k) cp = (cp << 6) | (static_cast<unsigned char>(s[i + k]) & 0x3F);
        out.push_back(cp);
        i += static_cast<std::size_t>(len);
    }
    return out;
}

std::string u32_to_utf8(const std::u32string& s) {
    std::string out;
    for (char32_t cp : s) {
        if (cp < 0x80) {
            out.push_back(static_cast<char>(cp));
        } else if (cp < 0x800) {
            out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
            out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
        } else if (cp < 0x10000) {
            out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
            out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
            out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
        } else {
            out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
            out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
            out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
            out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
        }
    }
    return out;
}

Tokenizer Tokenizer::from_transcripts(const std::vector<std::string>& texts) {
    std::set<char32_t> chars = {U' '};
    for (const auto& t : texts) {
        for (char32_t c : utf8_to_u32(t)) chars.insert(c);
    }
    Tokenizer tok;
    tok.symbols_.assign(chars.begin(), chars.end());
    return tok;
}

Tokenizer Tokenizer::from_alphabet(const std::string& alphabet) {
    Tokenizer tok;
    const auto cps = utf8_to_u32(alphabet);
    tok.symbols_.assign(cps.begin(), cps.end());
    std::set<char32_t> unique(cps.begin(), cps.end());
    if (unique.size() != cps.size()) throw std::invalid_argument("alphabet has duplicate symbols");
    return tok;
}

std::vector<int> Tokenizer::encode(const std::string& text) const {
    std::vector<int> ids;
    for (char32_t c : utf8_to_u32(text)) {
        auto it = std::find(symbols_.begin(), symbols_.end(), c);
        if (it == symbols_.end()) {
            throw std::invalid_argument("character outside tokenizer alphabet in '" + text + "'");
        }
        ids.push_back(static_cast<int>(it - symbols_.begin()) + 1);
    }
    return ids;
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
    std::u32string out;
    for (int id : ids) {
        if (id == kBlank) continue;
        if (id < 0 || id > static_cast<int>(symbols_.size())) {
            throw std::invalid_argument("token id out of range");
        }
        out.push_back(symbols_[static_cast<std::size_t>(id - 1)]);
    }
    return u32_to_utf8(out);
}

std::string Tokenizer::alphabet() const {
    return u32_to_utf8(std::u32string(symbols_.begin(), symbols_.end()));
}

// ---------------------------------------------------------------------------
// CTC loss

MatD log_softmax_rows(const MatD& logits) {
    MatD out(logits.rows(), logits.cols());
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        const double mx = logits.row(r).maxCoeff();
        const double lse = mx + std::log((logits.row(r).array() - mx).exp().sum());
        out.row(r) = logits.row(r).array() - lse;
    }
    return out;
}

double ctc_loss(const MatD& logprobs, const std::vector<int>& target, MatD* grad_logits) {
    const auto frames = static_cast<int>(logprobs.rows());
    const auto vocab = static_cast<int>(logprobs.cols());
    if (target.empty()) throw std::invalid_argument("ctc_loss: empty target");
    for (int t : target) {
        if (t <= kBlank || t >= vocab) throw std::invalid_argument("ctc_loss: target id out of range");
    }
    int required = static_cast<int>(target.size());
    for (std::size_t i = 1; i < target.size(); ++i) required += target[i] == target[i - 1] ? 1 : 0;
    if (frames < required) {
        throw CtcInfeasibleError("ctc_loss: " + std::to_string(frames) + " frames cannot emit a " +
                                 std::to_string(target.size()) + "-token target (needs " +
                                 std::to_string(required) + ")");
    }

    // Extended label sequence with blanks: b, l1, b, l2, ..., b.
    const int s_len = 2 * static_cast<int>(target.size()) + 1;
    std::vector<int> ext(static_cast<std::size_t>(s_len), kBlank);
    for (std::size_t i = 0; i < target.size(); ++i) ext[2 * i + 1] = target[i];
    auto can_skip = [&](int s) { return s >= 2 && ext[s] != kBlank && ext[s] != ext[s - 2]; };

    MatD alpha = MatD::Constant(frames, s_len, kNegInf);
    alpha(0, 0) = logprobs(0, ext[0]);
    alpha(0, 1) = logprobs(0, ext[1]);
    for (int t = 1; t < frames; ++t) {
        for (int s = 0; s < s_len; ++s) {
            double a = alpha(t - 1, s);
            if (s >= 1) a = log_add(a, alpha(t - 1, s - 1));
            if (can_skip(s)) a = log_add(a, alpha(t - 1, s - 2));
            if (a != kNegInf) alpha(t, s) = a + logprobs(t, ext[s]);
        }
    }
    const double log_p = log_add(alpha(frames - 1, s_len - 1), alpha(frames - 1, s_len - 2));
    if (log_p == kNegInf) throw CtcInfeasibleError("ctc_loss: target has zero probability");
    if (!grad_logits) return -log_p;

    // beta(t, s): log probability of finishing from state s at frame t,
    // excluding frame t's emission.
    MatD beta = MatD::Constant(frames, s_len, kNegInf);
    beta(frames - 1, s_len - 1) = 0.0;
    beta(frames - 1, s_len - 2) = 0.0;
    for (int t = frames - 2; t >= 0; --t) {
        for (int s = 0; s < s_len; ++s) {
            double b = beta(t + 1, s) + logprobs(t + 1, ext[s]);
            if (s + 1 < s_len) b = log_add(b, beta(t + 1, s + 1) + logprobs(t + 1, ext[s + 1]));
            if (s + 2 < s_len && can_skip(s + 2)) {
                b = log_add(b, beta(t + 1, s + 2) + logprobs(t + 1, ext[s + 2]));
            }
            beta(t, s) = b;
        }
    }
    MatD occupancy = MatD::Zero(frames, vocab);
    for (int t = 0; t < frames; ++t) {
        for (int s = 0; s < s_len; ++s) {
            const double lp = alpha(t, s) + beta(t, s);
            if (lp != kNegInf) occupancy(t, ext[s]) += std::exp(lp - log_p);
        }
    }
    *grad_logits = logprobs.array().exp().matrix() - occupancy;
    return -log_p;
}

// ---------------------------------------------------------------------------
// Decoding

Hypothesis greedy_decode(const MatD& logprobs) {
    Hypothesis h;
    int prev = -1;
    for (Eigen::Index t = 0; t < logprobs.rows(); ++t) {
        Eigen::Index best = 0;
        h.log_prob += logprobs.row(t).maxCoeff(&best);
        const int k = static_cast<int>(best);
        if (k != kBlank && k != prev) h.tokens.push_back(k);
        prev = k;
    }
    return h;
}

namespace {

double exact_log_prob(const MatD& logprobs, const std::vector<int>& tokens) {
    if (tokens.empty()) return logprobs.col(kBlank).sum();
    try {
        return -ctc_loss(logprobs, tokens);
    } catch (const CtcInfeasibleError&) {
        return kNegInf;
    }
}

std::vector<std::vector<int>> prefix_beam(const MatD& logprobs, int beam_width) {
    struct Scores {
        double blank = kNegInf;      // paths ending in blank
        double non_blank = kNegInf;  // paths ending in the prefix's last token
        double total() const { return log_add(blank, non_blank); }
    };
    using Prefix = std::vector<int>;
    std::vector<std::pair<Prefix, Scores>> beam = {{Prefix{}, Scores{0.0, kNegInf}}};
    const auto vocab = static_cast<int>(logprobs.cols());
    for (Eigen::Index t = 0; t < logprobs.rows(); ++t) {
        std::map<Prefix, Scores> next;
        for (const auto& [prefix, sc] : beam) {
            const double total = sc.total();
            for (int c = 0; c < vocab; ++c) {
                const double p = logprobs(t, c);
                if (c == kBlank) {
                    auto& dst = next[prefix];
                    dst.blank = log_add(dst.blank, total + p);
                    continue;
                }
                Prefix extended = prefix;
                extended.push_back(c);
                auto& ext = next[extended];
                if (!prefix.empty() && prefix.back() == c) {
                    // A repeat only extends the prefix after a blank.
                    ext.non_blank = log_add(ext.non_blank, sc.blank + p);
                    auto& same = next[prefix];
                    same.non_blank = log_add(same.non_blank, sc.non_blank + p);
                } else {
                    ext.non_blank = log_add(ext.non_blank, total + p);
                }
            }
        }
        beam.assign(next.begin(), next.end());
        std::stable_sort(beam.begin(), beam.end(), [](const auto& a, const auto& b) {
            return a.second.total() > b.second.total();
        });
        if (static_cast<int>(beam.size()) > beam_width) beam.resize(static_cast<std::size_t>(beam_width));
    }
    std::vector<std::vector<int>> out;
    for (auto& entry : beam) out.push_back(std::move(entry.first));
    return out;
}

}  // namespace

Hypothesis beam_decode(const MatD& logprobs, int beam_width) {
    if (beam_width < 1) throw std::invalid_argument("beam_decode: beam_width must be >= 1");
    // Candidates from every narrower beam keep the result monotone in width.
    std::set<std::vector<int>> candidates;
    for (int w = 1; w <= beam_width; ++w) {
        for (auto& prefix : prefix_beam(logprobs, w)) candidates.insert(std::move(prefix));
    }
    Hypothesis h;
    h.log_prob = kNegInf;
    for (const auto& tokens : candidates) {
        const double lp = exact_log_prob(logprobs, tokens);
        if (lp > h.log_prob) {
            h.tokens = tokens;
            h.log_prob = lp;
        }
    }
    return h;
}

// ---------------------------------------------------------------------------
// Scoring

int edit_distance(const std::vector<std::u32string>& ref, const std::vector<std::u32string>& hyp) {
    std::vector<int> prev(hyp.size() + 1), cur(hyp.size() + 1);
    std::iota(prev.begin(), prev.end(), 0);
    for (std::size_t i = 1; i <= ref.size(); ++i) {
        cur[0] = static_cast<int>(i);
        for (std::size_t j = 1; j <= hyp.size(); ++j) {
            const int sub = prev[j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
            cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
        }
        std::swap(prev, cur);
    }
    return prev[hyp.size()];
}

std::vector<std::u32string> split_units(const std::string& text, ScoreUnit unit) {
    std::vector<std::u32string> out;
    if (unit == ScoreUnit::kWord) {
        std::istringstream in(text);
        std::string word;
        while (in >> word) out.push_back(utf8_to_u32(word));
    } else {
        for (char32_t c : utf8_to_u32(text)) out.emplace_back(1, c);
    }
    return out;
}

double score(const std::vector<std::string>& refs, const std::vector<std::string>& hyps,
             ScoreUnit unit) {
    if (refs.size() != hyps.size()) {
        throw std::invalid_argument("score: reference and hypothesis counts differ");
    }
    long long errors = 0, total = 0;
    for (std::size_t i = 0; i < refs.size(); ++i) {
        const auto r = split_units(refs[i], unit);
        errors += edit_distance(r, split_units(hyps[i], unit));
        total += static_cast<long long>(r.size());
    }
    if (total == 0) throw std::invalid_argument("score: total reference length is zero");
    return 100.0 * static_cast<double>(errors) / static_cast<double>(total);
}

}  // namespace speechssl
