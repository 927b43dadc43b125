#include "speechssl/commands.hpp"

#include <CLI11.hpp>

#include <iostream>

int main(int argc, char** argv) {
    using namespace speechssl;
    CLI::App app{"Self-supervised speech encoder: pre-training, label caching, CTC finetuning"};
    app.require_subcommand(1);

    PretrainOptions pretrain;
    std::string init_from, init_mode;
    auto* p = app.add_subcommand("pretrain", "masked-prediction pre-training");
    p->add_option("config", pretrain.config, "run config file")->required();
    p->add_option("--init-from", init_from, "checkpoint to initialise from");
    p->add_option("--init-mode", init_mode, "full | feature_extractor_only | none");

    std::string q_config, q_out;
    auto* q = app.add_subcommand("quantize", "write label-cache files for a corpus");
    q->add_option("config", q_config, "run config file")->required();
    q->add_option("out_dir", q_out, "output directory")->required();

    FinetuneOptions finetune;
    std::string ft_init;
    auto* f = app.add_subcommand("finetune", "CTC finetuning of a pre-trained encoder");
    f->add_option("config", finetune.config, "run config file")->required();
    f->add_option("--init-from", ft_init, "pre-trained checkpoint (overrides finetune.init_from)");

    DecodeOptions decode;
    std::string output;
    auto* d = app.add_subcommand("decode", "transcribe audio with a finetuned checkpoint");
    d->add_option("checkpoint", decode.checkpoint, "finetune checkpoint")->required();
    d->add_option("input", decode.input, "corpus directory or audio manifest")->required();
    d->add_option("-o,--output", output, "hypothesis file (default: stdout)");
    d->add_option("--beam", decode.beam, "beam width")->capture_default_str();
    d->add_flag("--greedy", decode.greedy, "greedy decoding instead of beam search");

    ScoreOptions scoring;
    std::string report;
    auto* s = app.add_subcommand("score", "WER / CER of hypotheses against references");
    s->add_option("refs", scoring.refs, "reference transcripts")->required();
    s->add_option("hyps", scoring.hyps, "hypothesis transcripts")->required();
    s->add_option("--report", report, "CSV report path");

    InspectOptions inspect;
    std::string ckpt;
    auto* i = app.add_subcommand("inspect", "describe a checkpoint or a model size");
    i->add_option("checkpoint", ckpt, "checkpoint file");
    i->add_flag("--paper-scale", inspect.paper_scale, "shape-only report for the paper-scale encoder");
    i->add_flag("--desk-scale", inspect.desk_scale, "shape-only report for the desk-scale encoder");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    if (p->parsed()) {
        if (!init_from.empty()) pretrain.init_from = init_from;
        if (!init_mode.empty()) pretrain.init_mode = init_mode;
        return cmd_pretrain(pretrain);
    }
    if (q->parsed()) return cmd_quantize(q_config, q_out);
    if (f->parsed()) {
        if (!ft_init.empty()) finetune.init_from = ft_init;
        return cmd_finetune(finetune);
    }
    if (d->parsed()) {
        if (!output.empty()) decode.output = output;
        return cmd_decode(decode);
    }
    if (s->parsed()) {
        if (!report.empty()) scoring.report = report;
        return cmd_score(scoring);
    }
    if (!ckpt.empty()) inspect.checkpoint = ckpt;
    return cmd_inspect(inspect, std::cout);
}
