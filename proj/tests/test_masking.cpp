#include "oracles.hpp"

#include "speechssl/masking.hpp"
#include "speechssl/rng.hpp"

#include <doctest.h>

#include <cstring>

using namespace speechssl;

TEST_SUITE("masking") {

TEST_CASE("degenerate probabilities") {
    auto rng = make_stream({1});
    const MaskPlan none = sample_mask(103, MaskConfig{0.0, 40, 0.0, 0.1}, rng);
    CHECK(none.num_masked_inputs() == 0);
    CHECK(none.num_targets() == 0);
    const MaskPlan all = sample_mask(103, MaskConfig{1.0, 40, 0.0, 0.1}, rng);
    CHECK(all.num_masked_inputs() == 103);
    CHECK(all.target_mask.size() == 25);
    CHECK(all.num_targets() == 25);
}

TEST_CASE("target mask is the 4-frame OR and spans follow a start") {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        auto rng = make_stream({seed});
        const MaskConfig cfg{0.03, 7, 0.0, 0.1};
        const MaskPlan plan = sample_mask(97, cfg, rng);
        REQUIRE(plan.target_mask == derive_target_mask(plan.input_mask));
        for (std::size_t l = 0; l < plan.target_mask.size(); ++l) {
            bool any = false;
            for (std::size_t k = 0; k < 4; ++k) any |= plan.input_mask[4 * l + k];
            REQUIRE(plan.target_mask[l] == any);
        }
        // Every masked run is at least span long unless cut by the end.
        for (int t = 0; t < 97; ++t) {
            if (plan.input_mask[static_cast<std::size_t>(t)] && (t == 0 || !plan.input_mask[static_cast<std::size_t>(t - 1)])) {
                for (int k = t; k < std::min(97, t + 7); ++k) REQUIRE(plan.input_mask[static_cast<std::size_t>(k)]);
            }
        }
    }
}

TEST_CASE("interior coverage matches 1-(1-p)^span") {
    const MaskConfig cfg{0.05, 10, 0.0, 0.1};
    double covered = 0.0, count = 0.0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        auto rng = make_stream({seed, 7});
        const MaskPlan plan = sample_mask(10000, cfg, rng);
        for (int t = 9; t < 10000; ++t) {
            covered += plan.input_mask[static_cast<std::size_t>(t)];
            count += 1;
        }
    }
    CHECK(std::abs(covered / count - (1.0 - std::pow(0.95, 10))) < 0.01);
}

TEST_CASE("coverage estimate") {
    auto rng = make_stream({3});
    CHECK(coverage_estimate(MaskConfig{0.0, 40, 0.0, 0.1}, 4000, 10, rng) == 0.0);
    CHECK(coverage_estimate(MaskConfig{1.0, 40, 0.0, 0.1}, 4000, 10, rng) == 1.0);
    const double est = coverage_estimate(MaskConfig{0.01, 40, 0.0, 0.1}, 4000, 1000, rng);
    CHECK(std::abs(est - oracle::expected_coverage(0.01, 40, 4000)) < 0.01);
}

TEST_CASE("apply_mask replaces only masked frames") {
    MatF frames(12, 80);
    for (Eigen::Index i = 0; i < frames.size(); ++i) frames.data()[i] = static_cast<float>(i) * 0.01f;
    MaskPlan plan;
    plan.input_mask = {false, true, true, false, false, false, true, false, false, false, false, true};
    plan.target_mask = derive_target_mask(plan.input_mask);
    auto rng = make_stream({4});
    const MelSpectrogram out = apply_mask({frames}, plan, MaskConfig{}, rng);
    for (int t = 0; t < 12; ++t) {
        const bool same = std::memcmp(out.frames.row(t).data(), frames.row(t).data(), 80 * sizeof(float)) == 0;
        CHECK(same == !plan.input_mask[static_cast<std::size_t>(t)]);
    }
    MaskPlan none{std::vector<bool>(12, false), std::vector<bool>(3, false)};
    CHECK(apply_mask({frames}, none, MaskConfig{}, rng).frames == frames);
    MaskPlan wrong{std::vector<bool>(11, false), std::vector<bool>(2, false)};
    CHECK_THROWS(apply_mask({frames}, wrong, MaskConfig{}, rng));
}

TEST_CASE("noise moments") {
    const int frames = 12500;  // 10^6 entries
    MaskPlan plan{std::vector<bool>(frames, true), std::vector<bool>(frames / 4, true)};
    auto rng = make_stream({5});
    const MatD x = apply_mask({MatF::Zero(frames, 80)}, plan, MaskConfig{}, rng).frames.cast<double>();
    const double mean = x.mean();
    const double sd = std::sqrt((x.array() - mean).square().mean());
    CHECK(std::abs(mean) < 0.001);
    CHECK(std::abs(sd - 0.1) < 0.002);
}

TEST_CASE("streams are keyed by epoch and utterance") {
    const MaskConfig cfg{0.1, 5, 0.0, 0.1};
    auto a = mask_start_stream(1, 0, "u1");
    auto b = mask_start_stream(1, 0, "u1");
    CHECK(sample_mask(200, cfg, a).input_mask == sample_mask(200, cfg, b).input_mask);
    auto c = mask_start_stream(1, 1, "u1");
    auto d = mask_start_stream(1, 0, "u2");
    auto e = mask_start_stream(1, 0, "u1");
    const auto base = sample_mask(200, cfg, e).input_mask;
    CHECK(sample_mask(200, cfg, c).input_mask != base);
    CHECK(sample_mask(200, cfg, d).input_mask != base);
}

TEST_CASE("config validation") {
    CHECK_THROWS(MaskConfig{1.5, 40, 0.0, 0.1}.validate());
    CHECK_THROWS(MaskConfig{0.4, 0, 0.0, 0.1}.validate());
    CHECK_THROWS(MaskConfig{0.4, 40, 0.0, 0.0}.validate());
    CHECK_NOTHROW(MaskConfig{}.validate());
}

}
