#include "toy_corpus.hpp"

#include <CLI11.hpp>

#include <iostream>

int main(int argc, char** argv) {
    CLI::App app{"Writes small synthetic corpora for smoke runs"};
    std::string kind = "speech", dir;
    int count = 10;
    std::uint64_t seed = 0;
    app.add_option("kind", kind, "tones | speech")->check(CLI::IsMember({"tones", "speech"}));
    app.add_option("dir", dir, "output directory")->required();
    app.add_option("--count", count, "number of utterances")->capture_default_str();
    app.add_option("--seed", seed, "generator seed")->capture_default_str();
    CLI11_PARSE(app, argc, argv);
    if (kind == "tones") {
        speechssl::toy::write_tone_corpus(dir, count, seed);
    } else {
        speechssl::toy::write_speech_corpus(dir, count, seed);
    }
    std::cout << "wrote " << count << " utterances to " << dir << '\n';
    return 0;
}
