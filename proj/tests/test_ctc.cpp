#include "oracles.hpp"

#include "speechssl/ctc.hpp"
#include "speechssl/rng.hpp"

#include <doctest.h>

#include <random>

using namespace speechssl;

namespace {

MatD random_logprobs(int t, int v, std::uint64_t seed, double scale = 1.5) {
    auto rng = make_stream({seed, 404});
    std::normal_distribution<double> n(0.0, scale);
    MatD logits(t, v);
    for (Eigen::Index i = 0; i < logits.size(); ++i) logits.data()[i] = n(rng);
    return log_softmax_rows(logits);
}

MatD peaked(const std::vector<int>& argmax, int v) {
    MatD logits = MatD::Zero(static_cast<Eigen::Index>(argmax.size()), v);
    for (std::size_t t = 0; t < argmax.size(); ++t) logits(static_cast<Eigen::Index>(t), argmax[t]) = 8.0;
    return log_softmax_rows(logits);
}

void all_targets(int v, int max_len, std::vector<int>& cur, std::vector<std::vector<int>>& out) {
    if (!cur.empty()) out.push_back(cur);
    if (static_cast<int>(cur.size()) == max_len) return;
    for (int s = 1; s < v; ++s) {
        cur.push_back(s);
        all_targets(v, max_len, cur, out);
        cur.pop_back();
    }
}

int min_frames(const std::vector<int>& target) {
    int n = static_cast<int>(target.size());
    for (std::size_t i = 1; i < target.size(); ++i) n += target[i] == target[i - 1];
    return n;
}

}  // namespace

TEST_SUITE("ctc") {

TEST_CASE("single alignment anchor") {
    const MatD lp = MatD::Constant(1, 2, std::log(0.5));
    CHECK(ctc_loss(lp, {1}) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("repeats need a separating blank") {
    const MatD lp = MatD::Constant(2, 2, std::log(0.5));
    CHECK_THROWS_AS(ctc_loss(lp, {1, 1}), CtcInfeasibleError);
    CHECK_NOTHROW(ctc_loss(MatD::Constant(3, 2, std::log(0.5)), {1, 1}));
    CHECK_THROWS(ctc_loss(lp, {}));
}

TEST_CASE("loss equals exhaustive alignment enumeration") {
    int compared = 0;
    for (int t = 1; t <= 6; ++t) {
        for (int v = 2; v <= 4; ++v) {
            for (std::uint64_t seed = 0; seed < 3; ++seed) {
                const MatD lp = random_logprobs(t, v, seed * 100 + static_cast<std::uint64_t>(t * 10 + v));
                const auto probs = oracle::output_probabilities(lp);
                std::vector<int> cur;
                std::vector<std::vector<int>> targets;
                all_targets(v, 3, cur, targets);
                for (const auto& target : targets) {
                    if (min_frames(target) > t) {
                        CHECK_THROWS_AS(ctc_loss(lp, target), CtcInfeasibleError);
                        continue;
                    }
                    const auto it = probs.find(target);
                    REQUIRE(it != probs.end());
                    CHECK(std::abs(ctc_loss(lp, target) + std::log(it->second)) < 1e-9);
                    ++compared;
                }
            }
        }
    }
    CHECK(compared > 500);
}

TEST_CASE("probability is conserved across outputs") {
    for (int t = 1; t <= 5; ++t) {
        const int v = 3;
        const MatD lp = random_logprobs(t, v, static_cast<std::uint64_t>(t));
        double total = std::exp(lp.col(kBlank).sum());
        std::vector<int> cur;
        std::vector<std::vector<int>> targets;
        all_targets(v, t, cur, targets);
        for (const auto& target : targets) {
            if (min_frames(target) <= t) total += std::exp(-ctc_loss(lp, target));
        }
        CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("gradient matches central differences") {
    auto rng = make_stream({5, 1});
    std::normal_distribution<double> n(0.0, 1.0);
    MatD logits(7, 4);
    for (Eigen::Index i = 0; i < logits.size(); ++i) logits.data()[i] = n(rng);
    const std::vector<int> target = {1, 3, 3};
    MatD grad;
    ctc_loss(log_softmax_rows(logits), target, &grad);
    for (Eigen::Index i = 0; i < logits.size(); ++i) {
        MatD up = logits, down = logits;
        up.data()[i] += 1e-5;
        down.data()[i] -= 1e-5;
        const double num =
            (ctc_loss(log_softmax_rows(up), target) - ctc_loss(log_softmax_rows(down), target)) / 2e-5;
        CHECK(std::abs(grad.data()[i] - num) < 1e-7);
    }
    CHECK(grad.rowwise().sum().cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("greedy decoding") {
    CHECK(greedy_decode(peaked({0, 1, 1, 0, 2}, 3)).tokens == std::vector<int>{1, 2});
    CHECK(greedy_decode(peaked({0, 0, 0}, 3)).tokens.empty());
    CHECK(greedy_decode(peaked({1, 0, 1}, 3)).tokens == std::vector<int>{1, 1});
    const MatD lp = peaked({0, 1, 1}, 3);
    CHECK(greedy_decode(lp).log_prob == doctest::Approx(lp(0, 0) + lp(1, 1) + lp(2, 1)));
}

TEST_CASE("greedy decoding ignores per-frame rescaling") {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        const MatD lp = random_logprobs(12, 5, seed);
        auto rng = make_stream({seed, 2});
        std::uniform_real_distribution<double> u(-3.0, 3.0);
        MatD shifted = lp;
        for (Eigen::Index t = 0; t < lp.rows(); ++t) shifted.row(t).array() += u(rng);
        CHECK(greedy_decode(shifted).tokens == greedy_decode(lp).tokens);
    }
}

TEST_CASE("beam of one equals greedy on peaked inputs") {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        auto rng = make_stream({seed, 3});
        std::uniform_int_distribution<int> u(0, 3);
        std::vector<int> argmax(10);
        for (auto& a : argmax) a = u(rng);
        const MatD lp = peaked(argmax, 4);
        CHECK(beam_decode(lp, 1).tokens == greedy_decode(lp).tokens);
    }
    CHECK_THROWS(beam_decode(peaked({0}, 2), 0));
}

TEST_CASE("wide beam equals the exhaustive best output") {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const int t = 1 + static_cast<int>(seed % 4);
        const MatD lp = random_logprobs(t, 3, seed + 1000);
        const auto probs = oracle::output_probabilities(lp);
        auto best = probs.begin();
        for (auto it = probs.begin(); it != probs.end(); ++it) {
            if (it->second > best->second) best = it;
        }
        const Hypothesis h = beam_decode(lp, 64);
        CHECK(h.tokens == best->first);
        CHECK(h.log_prob == doctest::Approx(std::log(best->second)).epsilon(1e-9));
    }
}

TEST_CASE("wider beams never lose probability") {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const MatD lp = random_logprobs(10, 4, seed + 5000, 1.0);
        double previous = -std::numeric_limits<double>::infinity();
        for (int width : {1, 2, 4, 8}) {
            const double lp_width = beam_decode(lp, width).log_prob;
            CHECK(lp_width >= previous - 1e-12);
            previous = lp_width;
        }
    }
}

TEST_CASE("error rates") {
    CHECK(score({"a b c"}, {"a b c"}, ScoreUnit::kWord) == 0.0);
    CHECK(score({"a b c"}, {"a c"}, ScoreUnit::kWord) == doctest::Approx(100.0 / 3.0));
    CHECK(score({"one two three four"}, {""}, ScoreUnit::kWord) == 100.0);
    CHECK(score({"abcd", "ef"}, {"abed", "ef"}, ScoreUnit::kChar) == doctest::Approx(100.0 / 6.0));
    CHECK(score({"ab", "cd"}, {"ba", "cd"}, ScoreUnit::kChar) == doctest::Approx(50.0));
    CHECK(edit_distance(split_units("kitten", ScoreUnit::kChar), split_units("sitting", ScoreUnit::kChar)) == 3);
    CHECK(split_units("  a  b ", ScoreUnit::kWord).size() == 2);
    CHECK(split_units("héé", ScoreUnit::kChar).size() == 3);
    CHECK_THROWS(score({""}, {"x"}, ScoreUnit::kWord));
    CHECK_THROWS(score({"a"}, {"a", "b"}, ScoreUnit::kWord));
}

TEST_CASE("tokenizer") {
    const Tokenizer tok = Tokenizer::from_transcripts({"hello world", "héllo"});
    CHECK(tok.alphabet() == " dehlorwé");
    CHECK(tok.size() == 10);
    for (const std::string text : {"hello", "world hello", "é d"}) {
        const auto ids = tok.encode(text);
        for (int id : ids) CHECK(id != kBlank);
        CHECK(tok.decode(ids) == text);
    }
    CHECK_THROWS(tok.encode("xyz"));
    CHECK(Tokenizer::from_alphabet(tok.alphabet()).encode("world") == tok.encode("world"));
    CHECK(u32_to_utf8(utf8_to_u32("añ€😀")) == "añ€😀");
    CHECK(utf8_to_u32("añ€😀").size() == 4);
}

}
