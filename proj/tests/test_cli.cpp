#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "transfo/cli.hpp"
#include "transfo/util.hpp"

using namespace transfo;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Run {
    int code = -1;
    std::string out, err;
};

Run cli(const std::vector<std::string>& args, const std::string& input = "") {
    std::istringstream in(input);
    std::ostringstream out, err;
    Run r;
    r.code = run_cli(args, in, out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string operator/(const std::string& file) const { return (path / file).string(); }
};

void write_text(const std::string& path, const std::string& text) { std::ofstream(path) << text; }

const char* kTinyConfig = R"({
  "model": {"n_layers": 1, "d_model": 16, "n_heads": 2, "d_ff": 32, "n_positions": 160},
  "train": {"total_steps": 50, "batch_size": 2, "lr": 0.003},
  "decode": {"max_new_tokens": 6, "beam_size": 2}
})";

}  // namespace

TEST_SUITE("cli") {
    TEST_CASE("usage errors exit 2") {
        CHECK(cli({}).code == kExitUsage);
        CHECK(cli({"--bogus"}).code == kExitUsage);
        CHECK(cli({"finetune", "--bogus"}).code == kExitUsage);
        auto r = cli({"finetune", "--out", "x.ckpt"});
        CHECK(r.code == kExitUsage);
        CHECK(r.err.find("--data") != std::string::npos);
        CHECK(r.err.find("Usage") != std::string::npos);
        CHECK(cli({"eval", "--checkpoint", "/nonexistent/c", "--data", "/nonexistent/d"}).code == kExitUsage);
        CHECK(cli({"gen-data"}).code == kExitUsage);

        auto help = cli({"--help"});
        CHECK(help.code == kExitOk);
        for (const char* sub : {"train-bpe", "pretrain", "finetune", "eval", "generate", "chat", "serve", "gen-data"})
            CHECK(help.out.find(sub) != std::string::npos);
        auto fhelp = cli({"finetune", "--help"});
        CHECK(fhelp.code == kExitOk);
        for (const char* flag : {"--data", "--checkpoint", "--out", "--seed", "--steps", "--lr", "--batch-size",
                                 "--n-distractors", "--config"})
            CHECK(fhelp.out.find(flag) != std::string::npos);
        auto ghelp = cli({"generate", "--help"});
        for (const char* flag : {"--beam-size", "--top-k", "--temperature", "--lambda", "--ngram-block",
                                 "--max-new-tokens", "--persona-file"})
            CHECK(ghelp.out.find(flag) != std::string::npos);
        CHECK(cli({"serve", "--help"}).out.find("--port") != std::string::npos);
    }

    TEST_CASE("stopword list flag") {
        auto r = cli({"--stopwords"});
        CHECK(r.code == kExitOk);
        const auto list = json::parse(r.out);
        REQUIRE(list.is_array());
        CHECK(list.size() >= 40);
        CHECK(std::find(list.begin(), list.end(), "i") != list.end());
    }

    TEST_CASE("pipeline on a tiny model") {
        TempDir dir("transfo_cli_test");
        write_text(dir / "tiny.json", kTinyConfig);
        REQUIRE(cli({"gen-data", "--out", dir / "d.jsonl", "--seed", "4", "--n-dialogs", "20"}).code == kExitOk);
        auto bpe = cli({"train-bpe", "--data", dir / "d.jsonl", "--out", dir / "tok.json", "--merges", "120"});
        REQUIRE(bpe.code == kExitOk);
        CHECK(json::parse(bpe.out)["merges"] == 120);

        // Both sources at once is an invalid combination.
        CHECK(cli({"train-bpe", "--data", dir / "d.jsonl", "--corpus", dir / "d.jsonl", "--out", dir / "t2.json"}).code ==
              kExitUsage);

        // Flags override the config file: 3 steps, not 50.
        auto ft = [&](const std::string& out) {
            return cli({"finetune", "--data", dir / "d.jsonl", "--tokenizer", dir / "tok.json", "--config",
                        dir / "tiny.json", "--steps", "3", "--seed", "5", "--out", out, "--metrics", out + ".jsonl"});
        };
        auto a = ft(dir / "a.ckpt");
        REQUIRE(a.code == kExitOk);
        CHECK(json::parse(a.out)["step"] == 3);
        CHECK(ft(dir / "b.ckpt").code == kExitOk);
        CHECK(read_file(dir / "a.ckpt") == read_file(dir / "b.ckpt"));
        std::ifstream metrics(dir / "a.ckpt.jsonl");
        std::size_t lines = 0;
        for (std::string line; std::getline(metrics, line); ++lines) CHECK(json::parse(line).contains("total_loss"));
        CHECK(lines == 3);

        CHECK(cli({"finetune", "--data", dir / "d.jsonl", "--tokenizer", dir / "tok.json", "--checkpoint",
                   dir / "a.ckpt", "--out", dir / "c.ckpt"})
                  .code == kExitUsage);
        CHECK(cli({"finetune", "--data", dir / "d.jsonl", "--out", dir / "c.ckpt"}).code == kExitUsage);
        write_text(dir / "bad.json", R"({"training": {}})");
        CHECK(cli({"finetune", "--data", dir / "d.jsonl", "--tokenizer", dir / "tok.json", "--config", dir / "bad.json",
                   "--out", dir / "c.ckpt"})
                  .code == kExitUsage);

        // Continue from the checkpoint, LM-only, on plain text.
        write_text(dir / "corpus.txt", "i like to ski in the winter .\nmy dog is named rex and he likes to run .\n"
                                       "we went to the beach and swam all day long in the sun .\n");
        auto pre = cli({"pretrain", "--corpus", dir / "corpus.txt", "--checkpoint", dir / "a.ckpt", "--config",
                        dir / "tiny.json", "--steps", "2", "--out", dir / "p.ckpt"});
        CHECK(pre.code == kExitOk);
        CHECK(json::parse(pre.out)["step"] == 5);

        const std::vector<std::string> ev{"eval",   "--checkpoint",   dir / "a.ckpt", "--data", dir / "d.jsonl", "--seed",
                                          "7",      "--max-examples", "4",            "--config", dir / "tiny.json"};
        auto e1 = cli(ev), e2 = cli(ev);
        REQUIRE(e1.code == kExitOk);
        CHECK(e1.out == e2.out);
        const auto report = json::parse(e1.out);
        for (const char* k : {"ppl", "hits_at_1", "f1", "n_examples", "n_scored_tokens", "seed"}) CHECK(report.contains(k));
        CHECK(report["seed"] == 7);

        write_text(dir / "persona.txt", "i like to ski .\nmy dog is named rex .\n");
        const std::vector<std::string> gen{"generate",      "--checkpoint", dir / "a.ckpt", "--persona-file",
                                           dir / "persona.txt", "--message", "hi , any pets ?", "--seed", "3",
                                           "--max-new-tokens", "6"};
        auto g1 = cli(gen);
        REQUIRE(g1.code == kExitOk);
        CHECK(g1.out == cli(gen).out);
        const auto beams = json::parse(g1.out);
        CHECK(beams["reply"] == beams["beams"][0]["text"]);
        for (const char* k : {"text", "lm_norm_score", "cls_score", "rank_score"}) CHECK(beams["beams"][0].contains(k));

        write_text(dir / "history.json", R"([{"speaker": 1, "text": "hi"}, {"speaker": 1, "text": "hello?"}])");
        auto bad_hist = gen;
        bad_hist.insert(bad_hist.end(), {"--history-file", dir / "history.json"});
        CHECK(cli(bad_hist).code == kExitUsage);

        auto chat = cli({"chat", "--checkpoint", dir / "a.ckpt", "--persona-file", dir / "persona.txt", "--max-new-tokens",
                         "5"},
                        "hello there\nwhat do you like ?\n");
        CHECK(chat.code == kExitOk);
        std::size_t replies = 0;
        for (std::size_t at = chat.out.find("bot> "); at != std::string::npos; at = chat.out.find("bot> ", at + 1))
            ++replies;
        CHECK(replies == 2);

        // A corrupt checkpoint is a runtime failure.
        write_text(dir / "junk.ckpt", "not a checkpoint");
        CHECK(cli({"eval", "--checkpoint", dir / "junk.ckpt", "--data", dir / "d.jsonl"}).code == kExitRuntime);
    }
}

TEST_SUITE("cli_smoke") {
    TEST_CASE("gen-data, train-bpe, finetune 200 steps, eval beats chance") {
        TempDir dir("transfo_cli_smoke");
        REQUIRE(cli({"gen-data", "--out", dir / "train.jsonl", "--seed", "1", "--n-dialogs", "200"}).code == kExitOk);
        REQUIRE(cli({"gen-data", "--out", dir / "eval.jsonl", "--seed", "2", "--n-dialogs", "50"}).code == kExitOk);
        REQUIRE(cli({"train-bpe", "--data", dir / "train.jsonl", "--out", dir / "tok.json"}).code == kExitOk);
        REQUIRE(cli({"finetune", "--data", dir / "train.jsonl", "--tokenizer", dir / "tok.json", "--steps", "200", "--lr",
                     "1e-3", "--seed", "3", "--out", dir / "m.ckpt"})
                    .code == kExitOk);
        auto ev = cli({"eval", "--checkpoint", dir / "m.ckpt", "--data", dir / "eval.jsonl", "--seed", "7", "--no-f1"});
        REQUIRE(ev.code == kExitOk);
        const auto report = json::parse(ev.out);
        MESSAGE("smoke report: " << ev.out);
        CHECK(report["hits_at_1"].get<double>() > 0.05);
    }
}
