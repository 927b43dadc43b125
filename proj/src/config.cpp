#include "speechssl/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <fstream>
#include <functional>
#include <set>
#include <vector>

namespace speechssl {
namespace {

namespace pt = boost::property_tree;

struct Binding {
    std::string section;
    std::string name;
    std::function<void(const std::string&)> set;
    std::function<std::string()> get;
    std::set<Command> required_for;
    bool seed_like = false;  // defaults to run.seed when absent

    std::string key() const { return section + "." + name; }
};

template <typename T>
T parse_value(const std::string& text) {
    if constexpr (std::is_same_v<T, std::string>) {
        return text;
    } else if constexpr (std::is_same_v<T, bool>) {
        if (text == "true" || text == "1") return true;
        if (text == "false" || text == "0") return false;
        throw std::invalid_argument("expected true or false");
    } else if constexpr (std::is_floating_point_v<T>) {
        std::size_t used = 0;
        const double v = std::stod(text, &used);
        if (used != text.size()) throw std::invalid_argument("trailing characters");
        return static_cast<T>(v);
    } else {
        T v{};
        const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
        if (ec != std::errc() || ptr != text.data() + text.size()) {
            throw std::invalid_argument("expected an integer");
        }
        return v;
    }
}

template <typename T>
std::string format_value(const T& v) {
    if constexpr (std::is_same_v<T, std::string>) {
        return v;
    } else if constexpr (std::is_floating_point_v<T>) {
        char buf[32];
        const auto res = std::to_chars(buf, buf + sizeof(buf), v);
        return std::string(buf, res.ptr);
    } else {
        return std::to_string(v);
    }
}

template <typename T>
Binding bind(std::string section, std::string name, T& field, std::set<Command> required = {}) {
    Binding b;
    b.section = std::move(section);
    b.name = std::move(name);
    b.set = [&field](const std::string& s) { field = parse_value<T>(s); };
    b.get = [&field] { return format_value(field); };
    b.required_for = std::move(required);
    return b;
}

Binding bind_path(std::string section, std::string name, std::filesystem::path& field,
                  std::set<Command> required = {}) {
    Binding b;
    b.section = std::move(section);
    b.name = std::move(name);
    b.set = [&field](const std::string& s) { field = s; };
    b.get = [&field] { return field.string(); };
    b.required_for = std::move(required);
    return b;
}

std::vector<Binding> bindings(RunConfig& c) {
    const std::set<Command> needs_corpus = {Command::kPretrain, Command::kQuantize, Command::kFinetune};
    std::vector<Binding> b = {
        bind("run", "seed", c.seed),
        bind_path("run", "output_dir", c.output_dir),

        bind_path("data", "corpus_root", c.data.corpus_root, needs_corpus),
        bind_path("data", "transcripts", c.data.transcripts, {Command::kFinetune}),
        bind("data", "num_buckets", c.data.num_buckets),
        bind("data", "tokens_per_batch", c.data.tokens_per_batch),
        bind("data", "min_seconds", c.data.min_seconds),
        bind("data", "max_seconds", c.data.max_seconds),
        bind("data", "workers", c.data.workers),

        bind("encoder", "num_layers", c.encoder.num_layers),
        bind("encoder", "hidden", c.encoder.hidden),
        bind("encoder", "ffn", c.encoder.ffn),
        bind("encoder", "heads", c.encoder.heads),
        bind("encoder", "conv_kernel", c.encoder.conv_kernel),
        bind("encoder", "dropout", c.encoder.dropout),

        bind("pretrain", "peak_lr", c.pretrain.peak_lr),
        bind("pretrain", "warmup_steps", c.pretrain.warmup_steps),
        bind("pretrain", "total_steps", c.pretrain.total_steps),
        bind("pretrain", "grad_clip", c.pretrain.grad_clip),
        bind("pretrain", "adam_beta1", c.pretrain.adam.beta1),
        bind("pretrain", "adam_beta2", c.pretrain.adam.beta2),
        bind("pretrain", "adam_epsilon", c.pretrain.adam.epsilon),
        bind("pretrain", "checkpoint_every", c.pretrain_checkpoint_every),
        bind_path("pretrain", "label_cache_dir", c.label_cache_dir),

        bind("mask", "prob", c.pretrain.mask.prob),
        bind("mask", "span_frames", c.pretrain.mask.span_frames),
        bind("mask", "noise_mean", c.pretrain.mask.noise_mean),
        bind("mask", "noise_std", c.pretrain.mask.noise_std),

        bind("quantizer", "seed", c.pretrain.quantizer_seed),
        bind("quantizer", "num_codebooks", c.pretrain.quantizer.num_codebooks),
        bind("quantizer", "vocab_size", c.pretrain.quantizer.vocab_size),
        bind("quantizer", "codeword_dim", c.pretrain.quantizer.codeword_dim),

        bind("finetune", "encoder_lr", c.finetune.encoder_lr),
        bind("finetune", "decoder_lr", c.finetune.decoder_lr),
        bind("finetune", "warmup_steps", c.finetune.warmup_steps),
        bind("finetune", "freeze_steps", c.finetune.freeze_steps),
        bind("finetune", "total_steps", c.finetune.total_steps),
        bind("finetune", "grad_clip", c.finetune.grad_clip),
        bind("finetune", "checkpoint_every", c.finetune_checkpoint_every),
        bind_path("finetune", "init_from", c.finetune_init_from),

        bind("spec_augment", "num_time_masks", c.finetune.spec_augment.num_time_masks),
        bind("spec_augment", "max_time_width", c.finetune.spec_augment.max_time_width),
        bind("spec_augment", "time_apply_prob", c.finetune.spec_augment.time_apply_prob),
        bind("spec_augment", "num_freq_masks", c.finetune.spec_augment.num_freq_masks),
        bind("spec_augment", "max_freq_width", c.finetune.spec_augment.max_freq_width),
    };
    for (auto& x : b) x.seed_like = x.key() == "quantizer.seed";
    return b;
}

void validate(const RunConfig& c) {
    auto check = [](const std::string& key, auto&& fn) {
        try {
            fn();
        } catch (const std::invalid_argument& e) {
            throw ConfigError(key, "invalid value for '" + key + "': " + e.what());
        }
    };
    check("encoder", [&] { c.encoder.validate(); });
    check("pretrain", [&] { c.pretrain.validate(); });
    check("finetune", [&] { c.finetune.validate(); });
    auto positive = [](const std::string& key, double v) {
        if (!(v > 0)) throw ConfigError(key, "invalid value for '" + key + "': must be > 0");
    };
    positive("data.num_buckets", c.data.num_buckets);
    positive("data.tokens_per_batch", c.data.tokens_per_batch);
    positive("data.max_seconds", c.data.max_seconds);
    positive("pretrain.checkpoint_every", static_cast<double>(c.pretrain_checkpoint_every));
    positive("finetune.checkpoint_every", static_cast<double>(c.finetune_checkpoint_every));
    if (c.data.workers < 0) throw ConfigError("data.workers", "invalid value for 'data.workers': must be >= 0");
    if (c.data.min_seconds < 0) {
        throw ConfigError("data.min_seconds", "invalid value for 'data.min_seconds': must be >= 0");
    }
}

}  // namespace

RunConfig load_run_config(const std::filesystem::path& path, Command command,
                          const std::string* seed_override) {
    pt::ptree tree;
    try {
        pt::read_ini(path.string(), tree);
    } catch (const pt::ini_parser_error& e) {
        throw ConfigError("", "cannot parse config " + path.string() + ": " + e.message() +
                                  " (line " + std::to_string(e.line()) + ")");
    }
    RunConfig cfg;
    auto table = bindings(cfg);

    std::set<std::string> known;
    std::set<std::string> sections;
    for (const auto& b : table) {
        known.insert(b.key());
        sections.insert(b.section);
    }
    for (const auto& [section, body] : tree) {
        if (!sections.count(section)) {
            throw ConfigError(section, "unknown config section '" + section + "'");
        }
        for (const auto& [name, value] : body) {
            const std::string key = section + "." + name;
            if (!known.count(key)) throw ConfigError(key, "unknown config key '" + key + "'");
        }
    }

    std::set<std::string> explicitly_set;
    auto apply = [&](const Binding& b, const std::string& text) {
        try {
            b.set(text);
        } catch (const std::exception& e) {
            throw ConfigError(b.key(), "invalid value for '" + b.key() + "': '" + text + "' (" + e.what() + ")");
        }
        explicitly_set.insert(b.key());
    };
    for (const auto& b : table) {
        const auto value = tree.get_optional<std::string>(pt::ptree::path_type(b.key(), '.'));
        if (value) {
            apply(b, *value);
        } else if (b.required_for.count(command)) {
            throw ConfigError(b.key(), "missing required config key '" + b.key() + "'");
        }
    }
    if (seed_override) {
        for (const auto& b : table) {
            if (b.key() == "run.seed") apply(b, *seed_override);
        }
    }
    for (const auto& b : table) {
        if (b.seed_like && !explicitly_set.count(b.key())) b.set(std::to_string(cfg.seed));
    }
    cfg.pretrain.seed = cfg.seed;
    cfg.finetune.seed = cfg.seed;
    cfg.pretrain.quantizer.input_dim = kStackWindow * cfg.encoder.input_dim;

    // Relative paths resolve against the config file's directory.
    const auto base = path.parent_path();
    for (auto* p : {&cfg.data.corpus_root, &cfg.data.transcripts, &cfg.label_cache_dir,
                    &cfg.finetune_init_from}) {
        if (!p->empty() && p->is_relative()) *p = base / *p;
    }
    if (cfg.output_dir.is_relative()) cfg.output_dir = base / cfg.output_dir;
    validate(cfg);
    return cfg;
}

void write_run_config(const std::filesystem::path& path, const RunConfig& cfg) {
    RunConfig copy = cfg;
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write config: " + path.string());
    std::string section;
    for (const auto& b : bindings(copy)) {
        if (b.section != section) {
            if (!section.empty()) out << '\n';
            section = b.section;
            out << '[' << section << "]\n";
        }
        out << b.name << " = " << b.get() << '\n';
    }
}

}  // namespace speechssl
