// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include "fixtures.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"

#include "speechssl/checkpoint.hpp"
#include "speechssl/commands.hpp"
#include "speechssl/ctc.hpp"
#include "speechssl/datapipe.hpp"
#include "speechssl/finetune.hpp"
#include "speechssl/masking.hpp"
#include "speechssl/optim.hpp"
#include "speechssl/pretrain.hpp"
#include "speechssl/quantizer.hpp"

#include "toy_corpus.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

using namespace speechssl;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* format, double a, double b = 0.0, double c = 0.0) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), format, a, b, c);
    return buf;
}

fs::path work_dir() {
    static const fs::path dir = [] {
        const auto d = fs::temp_directory_path() / "speechssl_acceptance";
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

// Overfit settings shared by criteria 5 and 8.
constexpr int kToneUtterances = 32;
constexpr int kOverfitTokens = 800;
constexpr std::int64_t kOverfitSteps = 2000;
constexpr int kLossWindow = 100;

constexpr int kSpeechUtterances = 10;
constexpr std::int64_t kFinetuneSteps = 3000;
constexpr std::int64_t kFreezeSteps = 500;
constexpr int kFinetuneTokens = 1200;
constexpr int kEvalEvery = 100;

fs::path g_pretrained;  // written by criterion 5, consumed by criterion 8

MatF random_frames(int rows, int cols, RngStream& rng) {
    std::normal_distribution<float> n(0.0f, 1.0f);
    MatF m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
    return m;
}

Outcome quantizer_oracle() {
    auto rng = make_stream({2024, 1});
    std::uniform_int_distribution<int> n_dist(1, 4), v_dist(1, 32), d_dist(1, 8), l_dist(1, 16);
    int matched = 0;
    for (int i = 0; i < 50; ++i) {
        const QuantizerConfig cfg{n_dist(rng), v_dist(rng), d_dist(rng), kStackWindow * kNumMelBins};
        const QuantizerState qs = init_quantizer(static_cast<std::uint64_t>(i), cfg);
        const StackedFeatures x = normalize({random_frames(l_dist(rng), cfg.input_dim, rng)});
        matched += assign_labels(qs, x) == oracle::brute_force_labels(qs, x.frames);
    }
    return {matched == 50, std::to_string(matched) + "/50 instances match the exhaustive scan"};
}

Outcome euclid_cosine_agreement() {
    const QuantizerConfig cfg{4, 2048, 16, kStackWindow * kNumMelBins};
    const QuantizerState base = init_quantizer(7, cfg);
    std::vector<MatF> projections, codebooks;
    for (int j = 0; j < cfg.num_codebooks; ++j) {
        projections.push_back(base.projection(j));
        MatF cb = base.codebook(j);
        cb.rowwise().normalize();
        codebooks.push_back(3.0f * cb);
    }
    const QuantizerState qs(cfg, 7, projections, codebooks);
    auto rng = make_stream({2024, 2});
    const StackedFeatures x = normalize({random_frames(1000, cfg.input_dim, rng)});
    const LabelTensor euclid = assign_labels(qs, x);
    int mismatches = 0;
    for (int l = 0; l < 1000; ++l) {
        for (int j = 0; j < cfg.num_codebooks; ++j) {
            const Eigen::VectorXd p = (x.frames.row(l).cast<double>() * qs.projection(j).cast<double>()).transpose();
            Eigen::Index best = 0;
            (qs.codebook(j).cast<double>() * p).maxCoeff(&best);
            mismatches += euclid.at(l, j) != best;
        }
    }
    return {mismatches == 0, std::to_string(mismatches) + " mismatches over 1000 frames x 4 codebooks"};
}

Outcome gradient_check() {
    gradcheck::Problem problem(1);
    const gradcheck::Result r = problem.run(1e-4);
    return {r.failed == 0 && r.checked > 0,
            std::to_string(r.checked) + " entries, " + std::to_string(r.failed) + " over 1e-4, worst " +
                fmt("%.2e", r.worst) + " (" + r.worst_name + ")"};
}

Outcome loss_anchor() {
    const double uniform = multi_softmax_loss(MatD(MatD::Zero(8, 2048)), std::vector<std::uint16_t>(8, 3), 1, 2048);
    auto rng = make_stream({2024, 4});
    std::uniform_real_distribution<float> u(-0.5f, 0.5f);
    Waveform noise;
    noise.samples.resize(3 * kSampleRate);
    for (auto& s : noise.samples) s = u(rng);
    const MelSpectrogram mel = log_mel(noise);
    PretrainConfig cfg;
    cfg.seed = 4;
    Pretrainer fresh(cfg, EncoderConfig::desk_scale());
    const StepMetrics m = fresh.train_step({{mel.frames}, {mel.num_frames()}, {"noise"}, 0});
    const double ln_v = std::log(2048.0);
    const bool pass = std::abs(uniform - 7.6246) < 1e-4 && !m.skipped && std::abs(m.loss - ln_v) < 0.5;
    return {pass, fmt("uniform %.6f, fresh model %.4f vs ln 2048 = %.4f", uniform, m.loss, ln_v)};
}

Outcome overfit() {
    const auto corpus = work_dir() / "tones";
    toy::write_tone_corpus(corpus, kToneUtterances, 7);
    const CorpusIndex index = scan_corpus(corpus);
    const BucketSpec spec = build_buckets(index, 6, kOverfitTokens);
    PretrainConfig cfg;
    cfg.seed = 1;
    cfg.quantizer_seed = 1;
    cfg.warmup_steps = 200;
    Pretrainer a(cfg, EncoderConfig::desk_scale()), b(cfg, EncoderConfig::desk_scale());

    std::vector<double> losses;
    double first = 0.0, best_mean = std::numeric_limits<double>::infinity();
    std::int64_t reached = -1;
    bool identical = true;
    for (std::int64_t epoch = 0; a.step() < kOverfitSteps; ++epoch) {
        for (const auto& d : schedule_epoch(spec, index, epoch, cfg.seed)) {
            const Batch batch = load_batch(d, index, spec, {cfg.seed, kMaxDurationSeconds});
            const PretrainBatch pb{batch.mels, batch.lengths, batch.ids, batch.epoch};
            const StepMetrics ma = a.train_step(pb), mb = b.train_step(pb);
            identical = identical && ma.loss == mb.loss && ma.skipped == mb.skipped;
            if (ma.skipped) continue;
            if (losses.empty()) first = ma.loss;
            losses.push_back(ma.loss);
            if (losses.size() >= kLossWindow) {
                double sum = 0.0;
                for (std::size_t i = losses.size() - kLossWindow; i < losses.size(); ++i) sum += losses[i];
                const double mean = sum / kLossWindow;
                best_mean = std::min(best_mean, mean);
                if (mean < 1.0 && reached < 0) reached = ma.step;
            }
            if (a.step() >= kOverfitSteps) break;
        }
    }
    identical = identical && fixture::parameter_hash(a.encoder().params().all()) ==
                                 fixture::parameter_hash(b.encoder().params().all());
    g_pretrained = work_dir() / "pretrained.ckpt";
    a.save(g_pretrained);
    std::ostringstream detail;
    detail << fmt("first loss %.3f, best %.0f-step mean %.3f", first, kLossWindow, best_mean)
           << (reached > 0 ? ", below 1.0 at step " + std::to_string(reached) : ", never below 1.0")
           << ", same-seed runs " << (identical ? "identical" : "DIFFER");
    return {reached > 0 && reached <= kOverfitSteps && identical, detail.str()};
}

Outcome masking_statistics() {
    std::ostringstream detail;
    bool pass = true;
    for (double prob : {0.01, 0.15, 0.25, 0.4}) {
        auto rng = make_stream({2024, 6, static_cast<std::uint64_t>(prob * 100)});
        const MaskConfig cfg{prob, 40, 0.0, 0.1};
        const double est = coverage_estimate(cfg, 4000, 1000, rng);
        const double expected = oracle::expected_coverage(prob, 40, 4000);
        pass = pass && std::abs(est - expected) < 0.01;
        detail << fmt("p=%.2f: %.4f vs %.4f; ", prob, est, expected);
    }
    std::string s = detail.str();
    return {pass, s.substr(0, s.size() - 2)};
}

void targets_up_to(int v, int max_len, std::vector<int>& cur, std::vector<std::vector<int>>& out) {
    if (!cur.empty()) out.push_back(cur);
    if (static_cast<int>(cur.size()) == max_len) return;
    for (int s = 1; s < v; ++s) {
        cur.push_back(s);
        targets_up_to(v, max_len, cur, out);
        cur.pop_back();
    }
}

MatD random_logprobs(int t, int v, RngStream& rng) {
    std::normal_distribution<double> n(0.0, 1.5);
    MatD logits(t, v);
    for (Eigen::Index i = 0; i < logits.size(); ++i) logits.data()[i] = n(rng);
    return log_softmax_rows(logits);
}

Outcome ctc_oracle() {
    auto rng = make_stream({2024, 7});
    int compared = 0, loss_failures = 0;
    double worst = 0.0;
    for (int t = 1; t <= 6; ++t) {
        for (int v = 2; v <= 4; ++v) {
            const MatD lp = random_logprobs(t, v, rng);
            const auto probs = oracle::output_probabilities(lp);
            std::vector<int> cur;
            std::vector<std::vector<int>> targets;
            targets_up_to(v, 3, cur, targets);
            for (const auto& target : targets) {
                const auto it = probs.find(target);
                if (it == probs.end()) {
                    try {
                        ctc_loss(lp, target);
                        ++loss_failures;
                    } catch (const CtcInfeasibleError&) {
                    }
                    continue;
                }
                const double err = std::abs(ctc_loss(lp, target) + std::log(it->second));
                worst = std::max(worst, err);
                loss_failures += err >= 1e-9;
                ++compared;
            }
        }
    }
    int beam_matches = 0;
    for (int i = 0; i < 100; ++i) {
        const MatD lp = random_logprobs(1 + i % 4, 3, rng);
        const auto probs = oracle::output_probabilities(lp);
        auto best = probs.begin();
        for (auto it = probs.begin(); it != probs.end(); ++it) {
            if (it->second > best->second) best = it;
        }
        beam_matches += beam_decode(lp, 64).tokens == best->first;
    }
    return {loss_failures == 0 && beam_matches == 100,
            std::to_string(compared) + " loss cases, worst " + fmt("%.1e", worst) + "; beam 64 matched " +
                std::to_string(beam_matches) + "/100"};
}

double training_cer(Finetuner& ft, const CorpusIndex& index, const BucketSpec& spec,
                    const std::map<std::string, std::string>& transcripts) {
    std::vector<std::string> refs, hyps;
    for (const auto& d : schedule_epoch(spec, index, 0, 0)) {
        const Batch b = load_batch(d, index, spec, {0, kMaxDurationSeconds});
        const auto h = ft.decode(b.mels, b.lengths, 0);
        for (std::size_t i = 0; i < h.size(); ++i) {
            refs.push_back(transcripts.at(b.ids[i]));
            hyps.push_back(ft.tokenizer().decode(h[i].tokens));
        }
    }
    return score(refs, hyps, ScoreUnit::kChar);
}

Outcome finetune_overfit() {
    if (g_pretrained.empty() || !fs::exists(g_pretrained)) return {false, "no pre-trained checkpoint"};
    const auto corpus = work_dir() / "speech";
    toy::write_speech_corpus(corpus, kSpeechUtterances, 3);
    const auto transcripts = read_transcripts(corpus / "transcripts.tsv");
    const CorpusIndex index = scan_corpus(corpus);
    std::vector<std::string> texts;
    for (const auto& e : index.entries) texts.push_back(transcripts.at(e.id));
    const BucketSpec spec = build_buckets(index, 6, kFinetuneTokens);

    FinetuneConfig cfg;
    cfg.seed = 1;
    cfg.freeze_steps = kFreezeSteps;
    cfg.warmup_steps = 200;
    cfg.total_steps = kFinetuneSteps;
    Finetuner ft(cfg, EncoderConfig::desk_scale(), Tokenizer::from_transcripts(texts));
    ft.initialize_encoder_from(g_pretrained, InitMode::kFull);
    const std::uint64_t frozen_hash = fixture::parameter_hash(ft.encoder().params().all());

    bool frozen_ok = true, moved = false;
    double cer = 100.0;
    std::int64_t reached = -1;
    for (std::int64_t epoch = 0; ft.step() < kFinetuneSteps && reached < 0; ++epoch) {
        for (const auto& d : schedule_epoch(spec, index, epoch, cfg.seed)) {
            const Batch b = load_batch(d, index, spec, {cfg.seed, kMaxDurationSeconds});
            FinetuneBatch fb{b.mels, b.lengths, b.ids, {}, b.epoch};
            for (const auto& id : b.ids) fb.targets.push_back(ft.tokenizer().encode(transcripts.at(id)));
            const FinetuneMetrics m = ft.train_step(fb);
            if (m.skipped) continue;
            const bool same = fixture::parameter_hash(ft.encoder().params().all()) == frozen_hash;
            if (m.step <= kFreezeSteps) frozen_ok = frozen_ok && same;
            else moved = moved || !same;
            if (m.step % kEvalEvery == 0) {
                cer = training_cer(ft, index, spec, transcripts);
                if (cer < 5.0 && m.step > kFreezeSteps) reached = m.step;
            }
            if (ft.step() >= kFinetuneSteps || reached > 0) break;
        }
    }
    std::ostringstream detail;
    detail << "encoder hash " << (frozen_ok ? "constant" : "CHANGED") << " for " << kFreezeSteps
           << " frozen steps" << (moved ? ", then moving" : ", never moved") << "; training CER "
           << fmt("%.2f%%", cer) << (reached > 0 ? " at step " + std::to_string(reached) : " after 3000 steps");
    return {frozen_ok && moved && reached > 0, detail.str()};
}

Outcome datapipe_contracts() {
    const CorpusIndex index = scan_corpus(work_dir() / "tones");
    if (index.entries.empty()) return {false, "tone corpus missing"};
    const BucketSpec spec = build_buckets(index, 6, kOverfitTokens);
    bool partition = true;
    std::multiset<std::size_t> all;
    for (std::size_t i = 0; i < index.entries.size(); ++i) all.insert(i);
    for (std::int64_t epoch = 0; epoch < 20; ++epoch) {
        std::multiset<std::size_t> seen;
        for (const auto& d : schedule_epoch(spec, index, epoch, 5)) seen.insert(d.members.begin(), d.members.end());
        partition = partition && seen == all;
    }

    std::vector<CorpusEntry> skewed;
    for (int i = 0; i < 100; ++i) skewed.push_back({"s" + std::to_string(i), "", i < 90 ? 1.0 : 2.0});
    const CorpusIndex skewed_index{skewed, 0, 0};
    const BucketSpec skewed_spec = build_buckets(skewed_index, 2, 1);
    double short_share = 0.0;
    for (std::int64_t epoch = 0; epoch < 200; ++epoch) {
        const auto order = schedule_epoch(skewed_spec, skewed_index, epoch, 13);
        for (std::size_t i = 0; i < 10; ++i) short_share += order[i].bucket == 0;
    }
    short_share /= 200.0;
    const bool frequency = std::abs(short_share - 9.0) < 0.5;

    bool constant = true;
    for (int b = 0; b < spec.num_buckets(); ++b) {
        const auto bi = static_cast<std::size_t>(b);
        const int tokens = spec.batch_size[bi] * spec.max_frames[bi];
        constant = constant && tokens <= spec.tokens_per_batch && tokens > spec.tokens_per_batch - spec.max_frames[bi];
    }

    const auto order = schedule_epoch(spec, index, 1, 5);
    const PipelineSettings settings{5, kMaxDurationSeconds};
    auto drain = [&](int workers) {
        PrefetchLoader loader(order, [&](const BatchDescriptor& d) { return load_batch(d, index, spec, settings); },
                              workers);
        std::vector<Batch> out;
        while (auto b = loader.next()) out.push_back(std::move(*b));
        return out;
    };
    const auto one = drain(1), four = drain(4);
    bool independent = one.size() == four.size() && one.size() == order.size();
    for (std::size_t i = 0; independent && i < one.size(); ++i) {
        independent = one[i].ids == four[i].ids && one[i].lengths == four[i].lengths && one[i].mels == four[i].mels;
    }
    return {partition && frequency && constant && independent,
            std::string("partition ") + (partition ? "exact" : "BROKEN") + fmt(", first-10 short share %.2f", short_share) +
                ", tokens per batch " + (constant ? "constant" : "VARY") + ", 1 vs 4 workers " +
                (independent ? "identical" : "DIFFER")};
}

Outcome checkpoint_modes() {
    PretrainConfig cfg;
    cfg.seed = 10;
    const EncoderConfig enc = EncoderConfig::desk_scale();
    Pretrainer source(cfg, enc);
    auto rng = make_stream({2024, 10});
    const MatF mel = random_frames(160, kNumMelBins, rng);
    source.train_step({{mel}, {160}, {"x"}, 0});
    const auto first = work_dir() / "full_a.ckpt", second = work_dir() / "full_b.ckpt";
    source.save(first);
    Pretrainer restored(cfg, enc);
    restored.initialize_from(first, InitMode::kFull);
    restored.save(second);
    const bool byte_identical = slurp(first) == slurp(second);

    PretrainConfig other = cfg;
    other.seed = 11;
    Pretrainer target(other, enc);
    const auto names = target.initialize_from(first, InitMode::kFeatureExtractorOnly);
    std::set<std::string> expected;
    for (const auto& s : encoder_parameter_shapes(enc)) {
        if (s.name.rfind(kExtractorPrefix, 0) == 0) expected.insert(s.name);
    }
    const std::set<std::string> got(names.begin(), names.end());
    const CheckpointFile ckpt = read_checkpoint_file(first);
    std::set<std::string> equal_after;
    for (auto* p : target.encoder().params().all()) {
        const NamedTensor* t = ckpt.find(p->name);
        if (t && std::equal(t->data.begin(), t->data.end(), p->value.data())) equal_after.insert(p->name);
    }
    const bool exact_set = got == expected && equal_after == expected && !expected.empty();
    return {byte_identical && exact_set,
            std::string("full round trip ") + (byte_identical ? "byte-identical" : "DIFFERS") +
                ", feature_extractor_only restored " + std::to_string(got.size()) + " tensors, " +
                (exact_set ? "exactly the extractor set" : "NOT the extractor set")};
}

Outcome schedule_anchor() {
    const PretrainConfig cfg;
    const double at_warmup = lr_schedule(cfg.warmup_steps, cfg.peak_lr, cfg.warmup_steps);
    const double at_four = lr_schedule(4 * cfg.warmup_steps, cfg.peak_lr, cfg.warmup_steps);
    const bool pass = std::abs(cfg.peak_lr - 8e-4) < 1e-15 && std::abs(at_warmup - 8e-4) < 1e-12 &&
                      std::abs(at_four - 4e-4) < 1e-12;
    return {pass, fmt("warmup %.0f: lr(warmup) = %.2e, lr(4 warmup) = %.2e", static_cast<double>(cfg.warmup_steps),
                      at_warmup, at_four)};
}

Outcome inspect_count() {
    std::ostringstream out;
    const int code = cmd_inspect({std::nullopt, true, false}, out);
    const std::int64_t count = count_parameters(encoder_parameter_shapes(EncoderConfig::paper_scale()));
    const double gap = static_cast<double>(count - kReferenceParameterCount) / kReferenceParameterCount;
    const bool listed = out.str().find("layers.23.") != std::string::npos;
    const bool pass = code == kExitOk && std::abs(gap) < 0.05 && listed &&
                      out.str().find("within 5% of reference: yes") != std::string::npos;
    return {pass, std::to_string(count) + " parameters, " + fmt("%+.2f%% from 630M", 100.0 * gap) +
                      (listed ? ", per-tensor breakdown printed" : ", breakdown MISSING")};
}

}  // namespace

int main() {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
        {"quantizer oracle", quantizer_oracle},
        {"euclidean/cosine argmin", euclid_cosine_agreement},
        {"gradient check", gradient_check},
        {"loss anchor", loss_anchor},
        {"pre-training overfit", overfit},
        {"masking statistics", masking_statistics},
        {"ctc oracle", ctc_oracle},
        {"finetune overfit", finetune_overfit},
        {"datapipe", datapipe_contracts},
        {"checkpoint modes", checkpoint_modes},
        {"schedule anchor", schedule_anchor},
        {"inspect", inspect_count},
    };
    int failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const auto start = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        failures += !o.pass;
        std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << i + 1 << " (" << criteria[i].first
                  << "): " << o.detail << fmt(" [%.1f s]", secs) << std::endl;
    }
    return failures == 0 ? 0 : 1;
}
