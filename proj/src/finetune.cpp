#include "speechssl/finetune.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace speechssl {

void SpecAugmentConfig::validate() const {
    if (num_time_masks < 0 || num_freq_masks < 0) {
        throw std::invalid_argument("spec_augment: mask counts must be >= 0");
    }
    if (max_time_width < 0 || max_freq_width < 0) {
        throw std::invalid_argument("spec_augment: mask widths must be >= 0");
    }
    if (!(time_apply_prob >= 0.0 && time_apply_prob <= 1.0)) {
        throw std::invalid_argument("spec_augment: time_apply_prob must lie in [0, 1]");
    }
}

void FinetuneConfig::validate() const {
    if (!(encoder_lr > 0.0)) throw std::invalid_argument("finetune: encoder_lr must be > 0");
    if (!(decoder_lr > 0.0)) throw std::invalid_argument("finetune: decoder_lr must be > 0");
    if (warmup_steps < 1) throw std::invalid_argument("finetune: warmup_steps must be >= 1");
    if (freeze_steps < 0) throw std::invalid_argument("finetune: freeze_steps must be >= 0");
    if (total_steps < 1) throw std::invalid_argument("finetune: total_steps must be >= 1");
    if (!(grad_clip > 0.0)) throw std::invalid_argument("finetune: grad_clip must be > 0");
    spec_augment.validate();
}

void zero_time_span(MatF& frames, int start, int width) {
    const int lo = std::clamp(start, 0, static_cast<int>(frames.rows()));
    const int hi = std::clamp(start + width, lo, static_cast<int>(frames.rows()));
    frames.middleRows(lo, hi - lo).setZero();
}

void zero_freq_band(MatF& frames, int start, int width) {
    const int lo = std::clamp(start, 0, static_cast<int>(frames.cols()));
    const int hi = std::clamp(start + width, lo, static_cast<int>(frames.cols()));
    frames.middleCols(lo, hi - lo).setZero();
}

MelSpectrogram spec_augment(const MelSpectrogram& mel, const SpecAugmentConfig& cfg, RngStream& rng,
                            bool* time_masked) {
    MelSpectrogram out = mel;
    const int frames = mel.num_frames();
    const int bins = static_cast<int>(mel.frames.cols());
    std::bernoulli_distribution coin(cfg.time_apply_prob);
    const bool apply_time = coin(rng);
    if (time_masked) *time_masked = apply_time;
    if (apply_time) {
        for (int k = 0; k < cfg.num_time_masks; ++k) {
            const int width = std::uniform_int_distribution<int>(0, cfg.max_time_width)(rng);
            const int start = std::uniform_int_distribution<int>(0, std::max(0, frames - width))(rng);
            zero_time_span(out.frames, start, width);
        }
    }
    for (int k = 0; k < cfg.num_freq_masks; ++k) {
        const int width = std::uniform_int_distribution<int>(0, cfg.max_freq_width)(rng);
        const int start = std::uniform_int_distribution<int>(0, std::max(0, bins - width))(rng);
        zero_freq_band(out.frames, start, width);
    }
    return out;
}

RngStream spec_augment_stream(std::uint64_t seed, std::int64_t epoch, const std::string& utt_id) {
    return make_stream(
        {seed, stream_tag::kSpecAugment, static_cast<std::uint64_t>(epoch), hash_string(utt_id)});
}

// ---------------------------------------------------------------------------

Finetuner::Finetuner(const FinetuneConfig& cfg, const EncoderConfig& encoder_cfg, Tokenizer tokenizer)
    : cfg_(cfg), tokenizer_(std::move(tokenizer)), encoder_(encoder_cfg, cfg.seed), adam_(cfg.adam) {
    cfg_.validate();
    if (tokenizer_.size() < 2) throw std::invalid_argument("finetune: tokenizer has no symbols");
    add_prediction_head(head_, "ctc_head", encoder_cfg.hidden, tokenizer_.size(), cfg_.seed);
}

std::vector<Param<float>*> Finetuner::encoder_params() { return encoder_.params().all(); }
std::vector<Param<float>*> Finetuner::head_params() { return head_.all(); }

MatF Finetuner::head_logits(const MatF& state) const {
    const Param<float>* w = head_.find("ctc_head.weight");
    const Param<float>* b = head_.find("ctc_head.bias");
    MatF logits = state * w->value;
    logits.rowwise() += b->value.row(0);
    return logits;
}

FinetuneMetrics Finetuner::train_step(const FinetuneBatch& batch) {
    const std::size_t count = batch.mels.size();
    if (count == 0 || batch.lengths.size() != count || batch.ids.size() != count ||
        batch.targets.size() != count) {
        throw std::invalid_argument("finetune train_step: malformed batch");
    }
    const std::int64_t next = step_ + 1;
    const bool frozen = next <= cfg_.freeze_steps;

    std::vector<MatF> augmented(count);
    for (std::size_t b = 0; b < count; ++b) {
        MelSpectrogram mel{batch.mels[b].topRows(batch.lengths[b])};
        auto rng = spec_augment_stream(cfg_.seed, batch.epoch, batch.ids[b]);
        augmented[b] = spec_augment(mel, cfg_.spec_augment, rng).frames;
    }

    FinetuneMetrics metrics;
    metrics.step = step_;
    metrics.encoder_frozen = frozen;

    encoder_.set_training(true, derive_seed({cfg_.seed, static_cast<std::uint64_t>(next)}));
    encoder_.params().zero_grad();
    head_.zero_grad();
    const EncoderOutput<float> out = encoder_.encode(augmented, batch.lengths);

    Param<float>* w = head_.find("ctc_head.weight");
    Param<float>* bias = head_.find("ctc_head.bias");
    const double scale = 1.0 / static_cast<double>(count);
    double total = 0.0;
    std::vector<std::vector<MatF>> state_grads(count);
    for (std::size_t b = 0; b < count; ++b) {
        const MatF& top = out.layer_states[b].back();
        const MatD logits = head_logits(top).cast<double>();
        MatD dlogits;
        double loss = 0.0;
        try {
            loss = ctc_loss(log_softmax_rows(logits), batch.targets[b], &dlogits);
        } catch (const CtcInfeasibleError& e) {
            metrics.skipped = true;
            metrics.loss = std::numeric_limits<double>::infinity();
            metrics.diagnostic = "utterance " + batch.ids[b] + ": " + e.what() + "; step aborted";
            return metrics;
        }
        total += loss;
        const MatF g = (dlogits * scale).cast<float>();
        w->grad.noalias() += top.transpose() * g;
        bias->grad.row(0) += g.colwise().sum();
        if (!frozen) {
            state_grads[b].resize(out.layer_states[b].size());
            state_grads[b].back() = g * w->value.transpose();
        }
    }
    metrics.loss = total * scale;
    if (!std::isfinite(metrics.loss)) {
        metrics.skipped = true;
        metrics.diagnostic = "non-finite loss; step aborted";
        return metrics;
    }

    std::vector<Param<float>*> params = head_params();
    if (!frozen) {
        encoder_.backward(state_grads);
        auto enc = encoder_params();
        params.insert(params.begin(), enc.begin(), enc.end());
    }
    const double norm = clip_grad_norm(params, cfg_.grad_clip);
    if (!std::isfinite(norm)) {
        metrics.skipped = true;
        metrics.diagnostic = "non-finite gradient norm; step aborted";
        return metrics;
    }

    step_ = next;
    metrics.step = step_;
    metrics.head_lr = lr_schedule(step_, cfg_.decoder_lr, cfg_.warmup_steps);
    adam_.step(head_params(), metrics.head_lr);
    if (!frozen) {
        metrics.encoder_lr = lr_schedule(step_ - cfg_.freeze_steps, cfg_.encoder_lr, cfg_.warmup_steps);
        adam_.step(encoder_params(), metrics.encoder_lr);
    }
    return metrics;
}

std::vector<MatD> Finetuner::log_probs(const std::vector<MatF>& mels, const std::vector<int>& lengths) {
    encoder_.set_training(false);
    const EncoderOutput<float> out = encoder_.encode(mels, lengths);
    std::vector<MatD> result;
    result.reserve(mels.size());
    for (const auto& states : out.layer_states) {
        result.push_back(log_softmax_rows(head_logits(states.back()).cast<double>()));
    }
    return result;
}

std::vector<Hypothesis> Finetuner::decode(const std::vector<MatF>& mels, const std::vector<int>& lengths,
                                          int beam_width) {
    std::vector<Hypothesis> hyps;
    for (const MatD& lp : log_probs(mels, lengths)) {
        hyps.push_back(beam_width == 0 ? greedy_decode(lp) : beam_decode(lp, beam_width));
    }
    return hyps;
}

std::vector<std::string> Finetuner::initialize_encoder_from(const std::filesystem::path& path,
                                                            InitMode mode) {
    std::vector<std::string> restored;
    if (mode == InitMode::kNone) return restored;
    const CheckpointFile ckpt = read_checkpoint_file(path);
    for (auto* p : encoder_params()) {
        if (mode == InitMode::kFeatureExtractorOnly && p->name.rfind(kExtractorPrefix, 0) != 0) continue;
        restore_tensor(ckpt, *p);
        restored.push_back(p->name);
    }
    return restored;
}

CheckpointFile Finetuner::to_checkpoint() const {
    CheckpointFile ckpt;
    ckpt.meta["kind"] = "finetune";
    ckpt.meta["step"] = step_;
    ckpt.meta["encoder"] = encoder_config_to_json(encoder_.config());
    ckpt.meta["tokenizer"] = {{"alphabet", tokenizer_.alphabet()}};
    ckpt.meta["run"] = {{"seed", cfg_.seed},
                        {"encoder_lr", cfg_.encoder_lr},
                        {"decoder_lr", cfg_.decoder_lr},
                        {"warmup_steps", cfg_.warmup_steps},
                        {"freeze_steps", cfg_.freeze_steps},
                        {"total_steps", cfg_.total_steps},
                        {"grad_clip", cfg_.grad_clip}};
    std::vector<const Param<float>*> params;
    for (const auto* p : encoder_.params().all()) params.push_back(p);
    for (const auto* p : static_cast<const ParamStore<float>&>(head_).all()) params.push_back(p);
    append_tensors(ckpt, params);
    nlohmann::json counts = nlohmann::json::object();
    append_moments(ckpt, counts, adam_, params);
    ckpt.meta["adam"] = {{"beta1", adam_.config().beta1},
                         {"beta2", adam_.config().beta2},
                         {"epsilon", adam_.config().epsilon},
                         {"counts", counts}};
    return ckpt;
}

void Finetuner::save(const std::filesystem::path& path) const { write_checkpoint_file(path, to_checkpoint()); }

Finetuner Finetuner::load(const std::filesystem::path& path, const FinetuneConfig& cfg) {
    const CheckpointFile ckpt = read_checkpoint_file(path);
    try {
        if (ckpt.meta.at("kind") != "finetune") {
            throw CheckpointError("not a finetune checkpoint: " + path.string());
        }
        Finetuner ft(cfg, encoder_config_from_json(ckpt.meta.at("encoder")),
                     Tokenizer::from_alphabet(ckpt.meta.at("tokenizer").at("alphabet").get<std::string>()));
        std::vector<Param<float>*> params = ft.encoder_params();
        for (auto* p : ft.head_params()) params.push_back(p);
        for (auto* p : params) restore_tensor(ckpt, *p);
        restore_moments(ckpt, ckpt.meta.at("adam").at("counts"), ft.adam_, params);
        ft.step_ = ckpt.meta.at("step").get<std::int64_t>();
        return ft;
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("corrupt checkpoint metadata: ") + e.what());
    }
}

}  // namespace speechssl
