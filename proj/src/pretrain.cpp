#include "speechssl/pretrain.hpp"

#include "speechssl/rng.hpp"

#include <cmath>
#include <set>
#include <stdexcept>

namespace speechssl {

void PretrainConfig::validate() const {
    if (!(peak_lr > 0.0)) throw std::invalid_argument("pretrain: peak_lr must be > 0");
    if (warmup_steps < 1) throw std::invalid_argument("pretrain: warmup_steps must be >= 1");
    if (total_steps < 0) throw std::invalid_argument("pretrain: total_steps must be >= 0");
    if (!(grad_clip > 0.0)) throw std::invalid_argument("pretrain: grad_clip must be > 0");
    mask.validate();
}

InitMode parse_init_mode(const std::string& s) {
    if (s == "full") return InitMode::kFull;
    if (s == "feature_extractor_only") return InitMode::kFeatureExtractorOnly;
    if (s == "none") return InitMode::kNone;
    throw std::invalid_argument("unknown init mode '" + s +
                                "' (expected full, feature_extractor_only or none)");
}

std::string to_string(InitMode mode) {
    switch (mode) {
        case InitMode::kFull: return "full";
        case InitMode::kFeatureExtractorOnly: return "feature_extractor_only";
        case InitMode::kNone: return "none";
    }
    return "none";
}

template <typename T>
double multi_softmax_loss(const Mat<T>& logits, const std::vector<std::uint16_t>& labels,
                          int num_codebooks, int vocab_size, Mat<T>* grad) {
    const Eigen::Index rows = logits.rows();
    if (logits.cols() != static_cast<Eigen::Index>(num_codebooks) * vocab_size ||
        labels.size() != static_cast<std::size_t>(rows) * num_codebooks) {
        throw std::invalid_argument("multi_softmax_loss: shape mismatch");
    }
    if (rows == 0) throw std::invalid_argument("multi_softmax_loss: no target frames");
    const double inv_count = 1.0 / (static_cast<double>(rows) * num_codebooks);
    if (grad) grad->resize(rows, logits.cols());
    double total = 0.0;
    for (Eigen::Index r = 0; r < rows; ++r) {
        for (int j = 0; j < num_codebooks; ++j) {
            const auto seg = logits.row(r).segment(static_cast<Eigen::Index>(j) * vocab_size,
                                                   vocab_size);
            const int label = labels[static_cast<std::size_t>(r) * num_codebooks + j];
            if (label >= vocab_size) throw std::invalid_argument("label out of range");
            const T mx = seg.maxCoeff();
            const auto shifted = (seg.array() - mx).eval();
            const auto e = shifted.exp().eval();
            const double sum = static_cast<double>(e.sum());
            total += std::log(sum) - static_cast<double>(shifted(label));
            if (grad) {
                auto g = grad->row(r).segment(static_cast<Eigen::Index>(j) * vocab_size,
                                              vocab_size);
                g = (e * static_cast<T>(inv_count / sum)).matrix();
                g(label) -= static_cast<T>(inv_count);
            }
        }
    }
    return total * inv_count;
}

template <typename T>
double multi_softmax_loss(const std::vector<Mat<T>>& logits, const std::vector<LabelTensor>& labels,
                          const std::vector<std::vector<bool>>& target_masks, int vocab_size,
                          std::vector<Mat<T>>* grads) {
    if (logits.size() != labels.size() || logits.size() != target_masks.size()) {
        throw std::invalid_argument("multi_softmax_loss: batch size mismatch");
    }
    if (labels.empty()) throw std::invalid_argument("multi_softmax_loss: empty batch");
    const int n = labels.front().num_codebooks;
    std::size_t rows = 0;
    for (std::size_t b = 0; b < logits.size(); ++b) {
        if (logits[b].rows() != labels[b].num_frames ||
            target_masks[b].size() != static_cast<std::size_t>(labels[b].num_frames) ||
            labels[b].num_codebooks != n) {
            throw std::invalid_argument("multi_softmax_loss: shape mismatch in utterance " +
                                        std::to_string(b));
        }
        for (bool t : target_masks[b]) rows += t ? 1 : 0;
    }
    Mat<T> gathered(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(n) * vocab_size);
    std::vector<std::uint16_t> gathered_labels;
    gathered_labels.reserve(rows * n);
    Eigen::Index r = 0;
    for (std::size_t b = 0; b < logits.size(); ++b) {
        for (int l = 0; l < labels[b].num_frames; ++l) {
            if (!target_masks[b][l]) continue;
            gathered.row(r++) = logits[b].row(l);
            for (int j = 0; j < n; ++j) gathered_labels.push_back(labels[b].at(l, j));
        }
    }
    Mat<T> g;
    const double loss = multi_softmax_loss(gathered, gathered_labels, n, vocab_size,
                                           grads ? &g : nullptr);
    if (grads) {
        grads->resize(logits.size());
        r = 0;
        for (std::size_t b = 0; b < logits.size(); ++b) {
            (*grads)[b] = Mat<T>::Zero(logits[b].rows(), logits[b].cols());
            for (int l = 0; l < labels[b].num_frames; ++l) {
                if (target_masks[b][l]) (*grads)[b].row(l) = g.row(r++);
            }
        }
    }
    return loss;
}

template double multi_softmax_loss<float>(const Mat<float>&, const std::vector<std::uint16_t>&,
                                          int, int, Mat<float>*);
template double multi_softmax_loss<double>(const Mat<double>&, const std::vector<std::uint16_t>&,
                                           int, int, Mat<double>*);
template double multi_softmax_loss<float>(const std::vector<Mat<float>>&,
                                          const std::vector<LabelTensor>&,
                                          const std::vector<std::vector<bool>>&, int,
                                          std::vector<Mat<float>>*);
template double multi_softmax_loss<double>(const std::vector<Mat<double>>&,
                                           const std::vector<LabelTensor>&,
                                           const std::vector<std::vector<bool>>&, int,
                                           std::vector<Mat<double>>*);

double codebook_utilization(const std::vector<LabelTensor>& labels, int vocab_size) {
    if (labels.empty()) throw std::invalid_argument("codebook_utilization: no labels");
    const int n = labels.front().num_codebooks;
    std::vector<bool> seen(static_cast<std::size_t>(n) * vocab_size, false);
    std::size_t distinct = 0;
    std::size_t total = 0;
    for (const auto& lt : labels) {
        for (int l = 0; l < lt.num_frames; ++l) {
            for (int j = 0; j < n; ++j) {
                const std::size_t key = static_cast<std::size_t>(j) * vocab_size + lt.at(l, j);
                ++total;
                if (!seen[key]) {
                    seen[key] = true;
                    ++distinct;
                }
            }
        }
    }
    if (total == 0) throw std::invalid_argument("codebook_utilization: no labels");
    return static_cast<double>(distinct) / (static_cast<double>(n) * vocab_size);
}

void add_prediction_head(ParamStore<float>& store, const std::string& prefix, int hidden,
                         int outputs, std::uint64_t seed) {
    Param<float>* w = store.add(prefix + ".weight", {hidden, outputs});
    store.add(prefix + ".bias", {outputs});
    const double bound = std::sqrt(6.0 / (hidden + outputs));
    auto rng = make_stream({seed, stream_tag::kHeadInit, hash_string(w->name)});
    std::uniform_real_distribution<double> uni(-bound, bound);
    for (Eigen::Index i = 0; i < w->value.size(); ++i) {
        w->value.data()[i] = static_cast<float>(uni(rng));
    }
}

// ---------------------------------------------------------------------------
// Checkpoint plumbing

nlohmann::json encoder_config_to_json(const EncoderConfig& cfg) {
    return {{"num_layers", cfg.num_layers}, {"hidden", cfg.hidden},
            {"ffn", cfg.ffn},               {"heads", cfg.heads},
            {"conv_kernel", cfg.conv_kernel}, {"dropout", cfg.dropout},
            {"input_dim", cfg.input_dim}};
}

EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
    EncoderConfig cfg;
    cfg.num_layers = j.at("num_layers").get<int>();
    cfg.hidden = j.at("hidden").get<int>();
    cfg.ffn = j.at("ffn").get<int>();
    cfg.heads = j.at("heads").get<int>();
    cfg.conv_kernel = j.at("conv_kernel").get<int>();
    cfg.dropout = j.at("dropout").get<double>();
    cfg.input_dim = j.at("input_dim").get<int>();
    return cfg;
}

namespace {

NamedTensor to_named(const std::string& name, const std::vector<int>& shape, const MatF& m) {
    NamedTensor t;
    t.name = name;
    t.shape = shape;
    t.data.assign(m.data(), m.data() + m.size());
    return t;
}

void copy_into(const NamedTensor& t, MatF& m) {
    std::copy(t.data.begin(), t.data.end(), m.data());
}

std::string shape_string(const std::vector<int>& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? ", " : "") + std::to_string(s[i]);
    return out + "]";
}

}  // namespace

void append_tensors(CheckpointFile& ckpt, const std::vector<const Param<float>*>& params) {
    for (const auto* p : params) ckpt.tensors.push_back(to_named(p->name, p->shape, p->value));
}

void append_moments(CheckpointFile& ckpt, nlohmann::json& counts, const Adam<float>& adam,
                    const std::vector<const Param<float>*>& params) {
    for (const auto* p : params) {
        auto it = adam.moments().find(p->name);
        if (it == adam.moments().end()) continue;
        ckpt.tensors.push_back(to_named("adam.m." + p->name, p->shape, it->second.m));
        ckpt.tensors.push_back(to_named("adam.v." + p->name, p->shape, it->second.v));
        counts[p->name] = it->second.count;
    }
}

void restore_tensor(const CheckpointFile& ckpt, Param<float>& p) {
    const NamedTensor* t = ckpt.find(p.name);
    if (!t) throw CheckpointError("checkpoint is missing tensor " + p.name);
    if (t->shape != p.shape) {
        throw CheckpointError("shape mismatch for tensor " + p.name + ": checkpoint has " +
                              shape_string(t->shape) + ", config expects " +
                              shape_string(p.shape));
    }
    copy_into(*t, p.value);
}

void restore_moments(const CheckpointFile& ckpt, const nlohmann::json& counts, Adam<float>& adam,
                     const std::vector<Param<float>*>& params) {
    adam.moments().clear();
    for (auto* p : params) {
        if (!counts.contains(p->name)) continue;
        const NamedTensor* m = ckpt.find("adam.m." + p->name);
        const NamedTensor* v = ckpt.find("adam.v." + p->name);
        if (!m || !v || m->shape != p->shape || v->shape != p->shape) {
            throw CheckpointError("optimizer state for " + p->name + " is missing or misshapen");
        }
        auto& mo = adam.moments()[p->name];
        mo.m.resize(p->value.rows(), p->value.cols());
        mo.v.resize(p->value.rows(), p->value.cols());
        copy_into(*m, mo.m);
        copy_into(*v, mo.v);
        mo.count = counts.at(p->name).get<std::int64_t>();
    }
}

// ---------------------------------------------------------------------------
// Pretrainer

Pretrainer::Pretrainer(const PretrainConfig& cfg, const EncoderConfig& encoder_cfg)
    : cfg_(cfg),
      encoder_(encoder_cfg, cfg.seed),
      adam_(cfg.adam),
      quantizer_(init_quantizer(cfg.quantizer_seed, cfg.quantizer)) {
    cfg_.validate();
    if (cfg_.quantizer.input_dim != kStackWindow * encoder_cfg.input_dim) {
        throw std::invalid_argument("quantizer input_dim must equal 4 x encoder input_dim");
    }
    add_prediction_head(head_, "mlm_head", encoder_cfg.hidden,
                        cfg_.quantizer.num_codebooks * cfg_.quantizer.vocab_size, cfg_.seed);
}

std::vector<Param<float>*> Pretrainer::all_params() {
    auto params = encoder_.params().all();
    for (auto* p : head_.all()) params.push_back(p);
    return params;
}

LabelTensor Pretrainer::labels_for(const std::string& id, const MelSpectrogram& mel) {
    const int expected = mel.num_frames() / kStackWindow;
    if (label_cache_dir_) {
        const auto path = *label_cache_dir_ / (id + ".mseq");
        if (std::filesystem::exists(path)) {
            int vocab = 0;
            LabelTensor cached = read_label_cache(path, &vocab);
            if (cached.num_frames == expected &&
                cached.num_codebooks == cfg_.quantizer.num_codebooks &&
                vocab == cfg_.quantizer.vocab_size) {
                return cached;
            }
        }
    }
    const auto* bytes = reinterpret_cast<const char*>(mel.frames.data());
    const std::uint64_t key = derive_seed(
        {hash_string(id),
         hash_string(std::string_view(bytes, sizeof(float) * mel.frames.size()))});
    auto it = label_memo_.find(key);
    if (it != label_memo_.end()) return it->second;
    LabelTensor labels = compute_labels(quantizer_, mel);
    label_memo_.emplace(key, labels);
    return labels;
}

StepMetrics Pretrainer::train_step(const PretrainBatch& batch) {
    const std::size_t count = batch.mels.size();
    if (batch.lengths.size() != count || batch.ids.size() != count || count == 0) {
        throw std::invalid_argument("train_step: malformed batch");
    }
    const int n = cfg_.quantizer.num_codebooks;
    const int v = cfg_.quantizer.vocab_size;
    const auto epoch = static_cast<std::uint64_t>(batch.epoch);

    std::vector<MatF> masked(count);
    std::vector<LabelTensor> labels(count);
    std::vector<MaskPlan> plans(count);
    int targets = 0;
    for (std::size_t b = 0; b < count; ++b) {
        MelSpectrogram mel{batch.mels[b].topRows(batch.lengths[b])};
        labels[b] = labels_for(batch.ids[b], mel);
        auto starts = mask_start_stream(cfg_.seed, epoch, batch.ids[b]);
        auto noise = mask_noise_stream(cfg_.seed, epoch, batch.ids[b]);
        plans[b] = sample_mask(mel.num_frames(), cfg_.mask, starts);
        masked[b] = apply_mask(mel, plans[b], cfg_.mask, noise).frames;
        targets += plans[b].num_targets();
    }

    StepMetrics metrics;
    metrics.step = step_;
    metrics.masked_label_frames = targets;
    metrics.codebook_utilization = codebook_utilization(labels, v);
    if (targets == 0) {
        metrics.skipped = true;
        metrics.diagnostic = "no masked label frames in batch";
        return metrics;
    }

    encoder_.set_training(true, derive_seed({cfg_.seed, static_cast<std::uint64_t>(step_ + 1)}));
    encoder_.params().zero_grad();
    head_.zero_grad();
    const EncoderOutput<float> out = encoder_.encode(masked, batch.lengths);

    Param<float>* w = head_.find("mlm_head.weight");
    Param<float>* bias = head_.find("mlm_head.bias");
    const int hidden = encoder_.config().hidden;
    MatF gathered(targets, hidden);
    std::vector<std::uint16_t> target_labels;
    target_labels.reserve(static_cast<std::size_t>(targets) * n);
    std::vector<std::pair<std::size_t, int>> origin;
    for (std::size_t b = 0; b < count; ++b) {
        const MatF& top = out.layer_states[b].back();
        if (top.rows() != labels[b].num_frames) {
            throw std::logic_error("encoder output length does not match label length");
        }
        for (int l = 0; l < labels[b].num_frames; ++l) {
            if (!plans[b].target_mask[l]) continue;
            gathered.row(static_cast<Eigen::Index>(origin.size())) = top.row(l);
            origin.emplace_back(b, l);
            for (int j = 0; j < n; ++j) target_labels.push_back(labels[b].at(l, j));
        }
    }
    MatF logits = gathered * w->value;
    logits.rowwise() += bias->value.row(0);
    MatF dlogits;
    const double loss = multi_softmax_loss(logits, target_labels, n, v, &dlogits);
    metrics.loss = loss;
    if (!std::isfinite(loss)) {
        metrics.skipped = true;
        metrics.diagnostic = "non-finite loss; step aborted";
        return metrics;
    }

    w->grad.noalias() += gathered.transpose() * dlogits;
    bias->grad.row(0) += dlogits.colwise().sum();
    const MatF dgathered = dlogits * w->value.transpose();
    std::vector<std::vector<MatF>> state_grads(count);
    for (std::size_t b = 0; b < count; ++b) {
        state_grads[b].resize(out.layer_states[b].size());
        state_grads[b].back() = MatF::Zero(labels[b].num_frames, hidden);
    }
    for (std::size_t r = 0; r < origin.size(); ++r) {
        state_grads[origin[r].first].back().row(origin[r].second) =
            dgathered.row(static_cast<Eigen::Index>(r));
    }
    encoder_.backward(state_grads);

    auto params = all_params();
    const double norm = clip_grad_norm(params, cfg_.grad_clip);
    if (!std::isfinite(norm)) {
        metrics.skipped = true;
        metrics.diagnostic = "non-finite gradient norm; step aborted";
        return metrics;
    }
    ++step_;
    const double lr = lr_schedule(step_, cfg_.peak_lr, cfg_.warmup_steps);
    adam_.step(params, lr);
    metrics.step = step_;
    metrics.learning_rate = lr;
    return metrics;
}

CheckpointFile Pretrainer::to_checkpoint() const {
    CheckpointFile ckpt;
    ckpt.meta["kind"] = "pretrain";
    ckpt.meta["step"] = step_;
    ckpt.meta["encoder"] = encoder_config_to_json(encoder_.config());
    ckpt.meta["quantizer"] = {{"seed", quantizer_.seed()},
                              {"num_codebooks", cfg_.quantizer.num_codebooks},
                              {"vocab_size", cfg_.quantizer.vocab_size},
                              {"codeword_dim", cfg_.quantizer.codeword_dim},
                              {"input_dim", cfg_.quantizer.input_dim}};
    ckpt.meta["run"] = {{"seed", cfg_.seed},
                        {"peak_lr", cfg_.peak_lr},
                        {"warmup_steps", cfg_.warmup_steps},
                        {"total_steps", cfg_.total_steps},
                        {"grad_clip", cfg_.grad_clip},
                        {"mask_prob", cfg_.mask.prob},
                        {"mask_span_frames", cfg_.mask.span_frames},
                        {"noise_mean", cfg_.mask.noise_mean},
                        {"noise_std", cfg_.mask.noise_std}};
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

void Pretrainer::save(const std::filesystem::path& path) const {
    write_checkpoint_file(path, to_checkpoint());
}

std::vector<std::string> Pretrainer::initialize_from(const std::filesystem::path& path,
                                                     InitMode mode) {
    std::vector<std::string> restored;
    if (mode == InitMode::kNone) return restored;
    const CheckpointFile ckpt = read_checkpoint_file(path);
    if (mode == InitMode::kFeatureExtractorOnly) {
        for (auto* p : encoder_.params().all()) {
            if (p->name.rfind(kExtractorPrefix, 0) != 0) continue;
            restore_tensor(ckpt, *p);
            restored.push_back(p->name);
        }
        return restored;
    }
    auto params = all_params();
    for (auto* p : params) {
        restore_tensor(ckpt, *p);
        restored.push_back(p->name);
    }
    try {
        restore_moments(ckpt, ckpt.meta.at("adam").at("counts"), adam_, params);
        step_ = ckpt.meta.at("step").get<std::int64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("corrupt checkpoint metadata: ") + e.what());
    }
    return restored;
}

}  // namespace speechssl
