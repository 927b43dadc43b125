#include "speechssl/commands.hpp"

#include "speechssl/config.hpp"
#include "speechssl/datapipe.hpp"
#include "speechssl/finetune.hpp"
#include "speechssl/pretrain.hpp"
#include "speechssl/quantizer.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

namespace speechssl {
namespace {

namespace fs = std::filesystem;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

RunConfig load_config(const fs::path& path, Command command) {
    const char* env = std::getenv(kSeedEnvVar);
    const std::string seed = env ? env : "";
    return load_run_config(path, command, env ? &seed : nullptr);
}

/// Runs `body`, mapping failures onto exit codes and a one-line message.
template <typename Fn>
int guarded(Fn&& body) {
    try {
        return body();
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitFailure;
    }
}

std::string step_name(std::int64_t step) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "step_%07lld.ckpt", static_cast<long long>(step));
    return buf;
}

CorpusIndex load_index(const RunConfig& cfg) {
    CorpusIndex index = scan_corpus(cfg.data.corpus_root, cfg.data.min_seconds);
    std::cerr << "corpus: " << index.entries.size() << " utterances, " << index.skipped
              << " unreadable, " << index.filtered << " too short\n";
    if (index.entries.empty()) {
        throw std::runtime_error("no usable utterances under " + cfg.data.corpus_root.string());
    }
    return index;
}

MelSpectrogram featurize(const fs::path& path) {
    return log_mel(resample(load_audio(path), kSampleRate));
}

fs::path prepare_output_dir(const RunConfig& cfg) {
    fs::create_directories(cfg.output_dir);
    write_run_config(cfg.output_dir / "config.ini", cfg);
    return cfg.output_dir;
}

/// Iterates epochs of bucketed batches until `done` reports completion.
template <typename StepFn, typename DoneFn>
void run_epochs(const RunConfig& cfg, const CorpusIndex& index, StepFn&& on_batch, DoneFn&& done) {
    const BucketSpec spec = build_buckets(index, cfg.data.num_buckets, cfg.data.tokens_per_batch,
                                          cfg.data.max_seconds);
    const PipelineSettings settings{cfg.seed, cfg.data.max_seconds};
    for (std::int64_t epoch = 0; !done(); ++epoch) {
        auto descriptors = schedule_epoch(spec, index, epoch, cfg.seed);
        PrefetchLoader loader(
            std::move(descriptors),
            [&](const BatchDescriptor& d) { return load_batch(d, index, spec, settings); },
            cfg.data.workers);
        bool progressed = false;
        while (!done()) {
            auto batch = loader.next();
            if (!batch) break;
            progressed |= on_batch(*batch);
        }
        if (!progressed && !done()) {
            throw std::runtime_error("a full epoch produced no optimizer step; check data and mask settings");
        }
    }
}

}  // namespace

std::map<std::string, std::string> read_transcripts(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read transcripts: " + path.string());
    std::map<std::string, std::string> out;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        std::string id = line.substr(0, tab);
        std::string text = tab == std::string::npos ? "" : line.substr(tab + 1);
        if (!out.emplace(id, text).second) {
            throw std::runtime_error(path.string() + ": duplicate id '" + id + "'");
        }
    }
    return out;
}

// ---------------------------------------------------------------------------

int cmd_pretrain(const PretrainOptions& opts) {
    return guarded([&] {
        InitMode mode = InitMode::kFull;
        if (opts.init_mode) {
            try {
                mode = parse_init_mode(*opts.init_mode);
            } catch (const std::invalid_argument& e) {
                throw UsageError(e.what());
            }
        }
        if (!opts.init_from && opts.init_mode && mode != InitMode::kNone) {
            throw UsageError("--init-mode " + *opts.init_mode + " requires --init-from");
        }
        if (!opts.init_from) mode = InitMode::kNone;

        const RunConfig cfg = load_config(opts.config, Command::kPretrain);
        const CorpusIndex index = load_index(cfg);
        const fs::path out_dir = prepare_output_dir(cfg);

        Pretrainer trainer(cfg.pretrain, cfg.encoder);
        if (!cfg.label_cache_dir.empty()) trainer.set_label_cache_dir(cfg.label_cache_dir);
        if (opts.init_from) {
            const auto restored = trainer.initialize_from(*opts.init_from, mode);
            std::cerr << "init " << to_string(mode) << ": restored " << restored.size()
                      << " tensors from " << opts.init_from->string() << '\n';
        }

        std::ofstream metrics(out_dir / "metrics.csv");
        metrics << "step,loss,lr,masked_frames,utilization\n";
        metrics << std::setprecision(8);
        std::int64_t last_saved = -1;
        const std::int64_t total = cfg.pretrain.total_steps;
        run_epochs(
            cfg, index,
            [&](const Batch& b) {
                const StepMetrics m = trainer.train_step({b.mels, b.lengths, b.ids, b.epoch});
                if (m.skipped) {
                    std::cerr << "warning: step skipped: " << m.diagnostic << '\n';
                    return false;
                }
                metrics << m.step << ',' << m.loss << ',' << m.learning_rate << ','
                        << m.masked_label_frames << ',' << m.codebook_utilization << '\n';
                if (m.step % cfg.pretrain_checkpoint_every == 0) {
                    trainer.save(out_dir / step_name(m.step));
                    last_saved = m.step;
                }
                return true;
            },
            [&] { return trainer.step() >= total; });
        if (last_saved != trainer.step()) trainer.save(out_dir / step_name(trainer.step()));
        std::cout << "final checkpoint: " << (out_dir / step_name(trainer.step())).string() << '\n';
        return kExitOk;
    });
}

int cmd_quantize(const fs::path& config, const fs::path& out_dir) {
    return guarded([&] {
        const RunConfig cfg = load_config(config, Command::kQuantize);
        const CorpusIndex index = load_index(cfg);
        const QuantizerState qs = init_quantizer(cfg.pretrain.quantizer_seed, cfg.pretrain.quantizer);
        int written = 0;
        for (const auto& e : index.entries) {
            LabelTensor labels;
            try {
                labels = compute_labels(qs, featurize(e.path));
            } catch (const std::exception& ex) {
                throw std::runtime_error("utterance " + e.id + ": " + ex.what());
            }
            const fs::path target = out_dir / (e.id + ".mseq");
            fs::create_directories(target.parent_path());
            write_label_cache(target, labels, cfg.pretrain.quantizer.vocab_size);
            ++written;
        }
        std::cout << "wrote " << written << " label files to " << out_dir.string() << '\n';
        return kExitOk;
    });
}

int cmd_finetune(const FinetuneOptions& opts) {
    return guarded([&] {
        const RunConfig cfg = load_config(opts.config, Command::kFinetune);
        const auto transcripts = read_transcripts(cfg.data.transcripts);
        CorpusIndex index = load_index(cfg);
        std::vector<CorpusEntry> kept;
        for (auto& e : index.entries) {
            if (transcripts.count(e.id)) kept.push_back(std::move(e));
        }
        if (kept.size() != index.entries.size()) {
            std::cerr << "warning: " << index.entries.size() - kept.size()
                      << " utterances have no transcript and are ignored\n";
        }
        index.entries = std::move(kept);
        if (index.entries.empty()) throw std::runtime_error("no utterance has a transcript");

        std::vector<std::string> texts;
        for (const auto& e : index.entries) texts.push_back(transcripts.at(e.id));
        const fs::path out_dir = prepare_output_dir(cfg);

        Finetuner ft(cfg.finetune, cfg.encoder, Tokenizer::from_transcripts(texts));
        const fs::path init = opts.init_from ? *opts.init_from : cfg.finetune_init_from;
        if (init.empty()) {
            std::cerr << "warning: no pre-trained checkpoint given; encoder starts from random init\n";
        } else {
            const auto restored = ft.initialize_encoder_from(init, InitMode::kFull);
            std::cerr << "restored " << restored.size() << " encoder tensors from " << init.string() << '\n';
        }

        std::ofstream metrics(out_dir / "metrics.csv");
        metrics << "step,loss,encoder_lr,head_lr,encoder_frozen\n" << std::setprecision(8);
        std::int64_t last_saved = -1;
        run_epochs(
            cfg, index,
            [&](const Batch& b) {
                FinetuneBatch fb{b.mels, b.lengths, b.ids, {}, b.epoch};
                for (const auto& id : b.ids) fb.targets.push_back(ft.tokenizer().encode(transcripts.at(id)));
                const FinetuneMetrics m = ft.train_step(fb);
                if (m.skipped) {
                    std::cerr << "warning: step skipped: " << m.diagnostic << '\n';
                    return false;
                }
                metrics << m.step << ',' << m.loss << ',' << m.encoder_lr << ',' << m.head_lr << ','
                        << (m.encoder_frozen ? 1 : 0) << '\n';
                if (m.step % cfg.finetune_checkpoint_every == 0) {
                    ft.save(out_dir / step_name(m.step));
                    last_saved = m.step;
                }
                return true;
            },
            [&] { return ft.step() >= cfg.finetune.total_steps; });
        if (last_saved != ft.step()) ft.save(out_dir / step_name(ft.step()));
        std::cout << "final checkpoint: " << (out_dir / step_name(ft.step())).string() << '\n';
        return kExitOk;
    });
}

int cmd_decode(const DecodeOptions& opts) {
    return guarded([&] {
        if (!opts.greedy && opts.beam < 1) throw UsageError("--beam must be >= 1");
        Finetuner ft = Finetuner::load(opts.checkpoint);
        const CorpusIndex index =
            fs::is_directory(opts.input) ? scan_corpus(opts.input) : read_manifest(opts.input);
        std::ofstream file;
        if (opts.output) {
            file.open(*opts.output);
            if (!file) throw std::runtime_error("cannot write " + opts.output->string());
        }
        std::ostream& out = opts.output ? file : std::cout;
        for (const auto& e : index.entries) {
            MelSpectrogram mel;
            try {
                mel = featurize(e.path);
            } catch (const std::exception& ex) {
                throw std::runtime_error("utterance " + e.id + ": " + ex.what());
            }
            const auto hyp = ft.decode({mel.frames}, {mel.num_frames()}, opts.greedy ? 0 : opts.beam);
            out << e.id << '\t' << ft.tokenizer().decode(hyp.front().tokens) << '\n';
        }
        return kExitOk;
    });
}

int cmd_score(const ScoreOptions& opts) {
    return guarded([&] {
        const auto refs = read_transcripts(opts.refs);
        const auto hyps = read_transcripts(opts.hyps);
        std::vector<std::string> missing;
        for (const auto& [id, _] : refs) {
            if (!hyps.count(id)) missing.push_back(id + " (no hypothesis)");
        }
        for (const auto& [id, _] : hyps) {
            if (!refs.count(id)) missing.push_back(id + " (no reference)");
        }
        if (!missing.empty()) {
            std::string msg = "reference and hypothesis ids differ:";
            for (const auto& m : missing) msg += "\n  " + m;
            throw UsageError(msg);
        }
        std::vector<std::string> r, h;
        for (const auto& [id, text] : refs) {
            r.push_back(text);
            h.push_back(hyps.at(id));
        }
        const double wer = score(r, h, ScoreUnit::kWord);
        const double cer = score(r, h, ScoreUnit::kChar);

        const fs::path report = opts.report ? *opts.report : fs::path(opts.hyps.string() + ".score.csv");
        std::ofstream csv(report);
        if (!csv) throw std::runtime_error("cannot write " + report.string());
        csv << "id,ref_words,word_errors,ref_chars,char_errors\n";
        for (const auto& [id, text] : refs) {
            const auto rw = split_units(text, ScoreUnit::kWord);
            const auto rc = split_units(text, ScoreUnit::kChar);
            csv << id << ',' << rw.size() << ',' << edit_distance(rw, split_units(hyps.at(id), ScoreUnit::kWord))
                << ',' << rc.size() << ',' << edit_distance(rc, split_units(hyps.at(id), ScoreUnit::kChar))
                << '\n';
        }
        csv << std::fixed << std::setprecision(4) << "# WER," << wer << "\n# CER," << cer << '\n';
        std::cout << std::fixed << std::setprecision(2) << "WER " << wer << "\nCER " << cer << '\n';
        return kExitOk;
    });
}

bool print_parameter_report(const EncoderConfig& cfg, std::int64_t reference, double tolerance,
                            std::ostream& out) {
    const auto shapes = encoder_parameter_shapes(cfg);
    for (const auto& s : shapes) {
        std::ostringstream dims;
        for (std::size_t i = 0; i < s.shape.size(); ++i) dims << (i ? "x" : "") << s.shape[i];
        out << std::left << std::setw(48) << s.name << std::setw(16) << dims.str() << s.numel() << '\n';
    }
    const std::int64_t total = count_parameters(shapes);
    out << "total parameters: " << total << '\n';
    if (reference <= 0) return true;
    const double gap = static_cast<double>(total - reference) / static_cast<double>(reference);
    const bool ok = std::abs(gap) <= tolerance;
    out << "reference: " << reference << ", gap " << std::showpos << std::fixed << std::setprecision(2)
        << 100.0 * gap << std::noshowpos << "%\n";
    if (!ok) {
        out << "diagnostic: parameter count deviates from the reference by more than "
            << 100.0 * tolerance << "%; see the per-tensor breakdown above\n";
    }
    return ok;
}

int cmd_inspect(const InspectOptions& opts, std::ostream& out) {
    return guarded([&] {
        const int modes = (opts.checkpoint ? 1 : 0) + (opts.paper_scale ? 1 : 0) + (opts.desk_scale ? 1 : 0);
        if (modes != 1) throw UsageError("inspect takes exactly one of CHECKPOINT, --paper-scale, --desk-scale");
        if (opts.paper_scale) {
            out << "paper-scale encoder (shape-only)\n";
            const bool ok = print_parameter_report(EncoderConfig::paper_scale(), kReferenceParameterCount, 0.05, out);
            out << "within 5% of reference: " << (ok ? "yes" : "no") << '\n';
            return kExitOk;
        }
        if (opts.desk_scale) {
            out << "desk-scale encoder (shape-only)\n";
            print_parameter_report(EncoderConfig::desk_scale(), 0, 0.0, out);
            return kExitOk;
        }
        const CheckpointFile ckpt = read_checkpoint_file(*opts.checkpoint);
        std::int64_t model = 0, optimizer = 0;
        for (const auto& t : ckpt.tensors) {
            std::int64_t n = 1;
            for (int d : t.shape) n *= d;
            if (t.name.rfind("adam.", 0) == 0) {
                optimizer += n;
                continue;
            }
            model += n;
            std::ostringstream dims;
            for (std::size_t i = 0; i < t.shape.size(); ++i) dims << (i ? "x" : "") << t.shape[i];
            out << std::left << std::setw(48) << t.name << std::setw(16) << dims.str() << n << '\n';
        }
        out << "kind: " << ckpt.meta.value("kind", std::string("?")) << '\n';
        out << "step: " << ckpt.meta.value("step", std::int64_t{0}) << '\n';
        out << "model parameters: " << model << '\n';
        out << "optimizer state values: " << optimizer << '\n';
        if (ckpt.meta.contains("encoder")) {
            const EncoderConfig enc = encoder_config_from_json(ckpt.meta.at("encoder"));
            out << "encoder parameters (closed form): " << count_parameters(encoder_parameter_shapes(enc)) << '\n';
        }
        for (const char* key : {"encoder", "quantizer", "run", "tokenizer"}) {
            if (ckpt.meta.contains(key)) out << key << ": " << ckpt.meta.at(key).dump() << '\n';
        }
        return kExitOk;
    });
}

}  // namespace speechssl
