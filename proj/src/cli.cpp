#include "transfo/cli.hpp"

#include <csignal>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>

#include <CLI11.hpp>

#include "transfo/data_store.hpp"
#include "transfo/decoder.hpp"
#include "transfo/errors.hpp"
#include "transfo/evaluator.hpp"
#include "transfo/service.hpp"
#include "transfo/trainer.hpp"
#include "transfo/util.hpp"

namespace transfo {

using nlohmann::json;

namespace {

// Bad flag combinations found after parsing; reported like parse errors.
class UsageError : public Error {
public:
    using Error::Error;
};

// Everything any subcommand may read. Flags that were not given keep the
// value from the config file, or the library default.
struct Flags {
    std::string data, corpus, checkpoint, out, config, persona_file, tokenizer, metrics, history_file, message;
    std::string host = "127.0.0.1", cors_origin;
    std::uint64_t seed = 0;
    std::size_t steps = 0, batch_size = 0, n_distractors = 0, beam_size = 0, top_k = 0, ngram_block = 0,
                max_new_tokens = 0, merges = 300, n_dialogs = 200, n_themes = 14, max_examples = 0,
                log_every = 50, workers = 0;
    double lr = 0.0, temperature = 0.0, lambda = 0.0;
    int port = 8642;
    bool no_f1 = false, baseline = false;
};

struct Resolved {
    json model = json::object();  // ModelConfig overrides
    TrainConfig train;
    DecodeParams decode;
};

bool given(const CLI::App* app, const std::string& name) {
    const auto* opt = app->get_option_no_throw(name);
    return opt != nullptr && opt->count() > 0;
}

// defaults <- --config file <- explicit flags.
Resolved resolve(const CLI::App* app, const Flags& f) {
    Resolved r;
    if (!f.config.empty()) {
        json j;
        try {
            j = json::parse(read_file(f.config));
        } catch (const json::parse_error& e) {
            throw ConfigError("config " + f.config + ": " + e.what());
        }
        if (!j.is_object()) throw ConfigError("config " + f.config + " must hold a JSON object");
        for (const auto& [key, value] : j.items())
            if (key != "model" && key != "train" && key != "decode")
                throw ConfigError("config " + f.config + ": unknown section '" + key + "'");
        if (j.contains("model")) r.model = j["model"];
        if (j.contains("train")) r.train = TrainConfig::from_json(j["train"], r.train);
        if (j.contains("decode")) r.decode = DecodeParams::from_json(j["decode"], r.decode);
    }
    if (given(app, "--seed")) {
        r.train.seed = f.seed;
        r.decode.seed = f.seed;
    }
    if (given(app, "--steps")) r.train.total_steps = f.steps;
    if (given(app, "--lr")) r.train.lr = f.lr;
    if (given(app, "--batch-size")) r.train.batch_size = f.batch_size;
    if (given(app, "--n-distractors")) r.train.n_distractors = f.n_distractors;
    if (given(app, "--beam-size")) r.decode.beam_size = f.beam_size;
    if (given(app, "--top-k")) r.decode.top_k = f.top_k;
    if (given(app, "--temperature")) r.decode.temperature = f.temperature;
    if (given(app, "--lambda")) r.decode.rank_lambda = f.lambda;
    if (given(app, "--ngram-block")) r.decode.ngram_block_n = f.ngram_block;
    if (given(app, "--max-new-tokens")) r.decode.max_new_tokens = f.max_new_tokens;
    r.train.validate();
    r.decode.validate();
    return r;
}

void add_decode_flags(CLI::App* app, Flags& f) {
    const DecodeParams d;
    app->add_option("--beam-size", f.beam_size, "Beam width")->default_str(std::to_string(d.beam_size));
    app->add_option("--top-k", f.top_k, "Tokens considered per expansion")->default_str(std::to_string(d.top_k));
    app->add_option("--temperature", f.temperature, "Sampling temperature; <= 0 expands deterministically")
        ->default_str(std::to_string(d.temperature));
    app->add_option("--lambda", f.lambda, "Weight of the classifier score in ranking")
        ->default_str(std::to_string(d.rank_lambda));
    app->add_option("--ngram-block", f.ngram_block, "Block n-grams copied from persona/history; 0 disables")
        ->default_str(std::to_string(d.ngram_block_n));
    app->add_option("--max-new-tokens", f.max_new_tokens, "Reply length limit")
        ->default_str(std::to_string(d.max_new_tokens));
}

void add_train_flags(CLI::App* app, Flags& f) {
    const TrainConfig t;
    app->add_option("--steps", f.steps, "Optimizer steps")->default_str(std::to_string(t.total_steps));
    app->add_option("--lr", f.lr, "Peak learning rate (linear decay to 0)")->default_str(std::to_string(t.lr));
    app->add_option("--batch-size", f.batch_size, "Examples per step")->default_str(std::to_string(t.batch_size));
    app->add_option("--metrics", f.metrics, "Write one JSON line per step to this file");
    app->add_option("--log-every", f.log_every, "Steps between stderr progress lines")->capture_default_str();
}

void add_common(CLI::App* app, Flags& f) {
    app->add_option("--seed", f.seed, "Seed for all randomness")->capture_default_str();
    app->add_option("--config", f.config, "JSON file with model/train/decode sections; flags win")
        ->check(CLI::ExistingFile);
}

// Model and tokenizer to train: continue a checkpoint, or start fresh from a tokenizer.
struct Start {
    Transformer<float> model;
    BpeModel tokenizer;
    std::uint64_t step = 0;
};

Start starting_point(const Flags& f, const Resolved& r, std::ostream& err) {
    if (!f.checkpoint.empty() && !f.tokenizer.empty())
        throw UsageError("give either --checkpoint or --tokenizer, not both");
    if (!f.checkpoint.empty()) {
        auto ck = load_checkpoint(f.checkpoint);
        err << "resuming from " << f.checkpoint << " (step " << ck.step << ")\n";
        return {restore_model(ck), ck.tokenizer, ck.step};
    }
    if (f.tokenizer.empty()) throw UsageError("a fresh model needs --tokenizer (or continue with --checkpoint)");
    auto tok = BpeModel::load(f.tokenizer);
    json mj = ModelConfig::desk(tok.size()).to_json();
    mj.merge_patch(r.model);
    mj["vocab_size"] = tok.size();
    const auto config = ModelConfig::from_json(mj);
    config.validate();
    err << "fresh model " << config.to_json().dump() << "\n";
    return {Transformer<float>::init(config, r.train.seed), std::move(tok), 0};
}

TrainObserver progress(const Flags& f, const TrainConfig& t, std::ostream& err, std::ofstream* metrics) {
    return [&f, &t, &err, metrics](const LossReport& rep) {
        if (metrics) *metrics << rep.to_json().dump() << "\n";
        if (f.log_every > 0 && ((rep.step + 1) % f.log_every == 0 || rep.step + 1 == t.total_steps))
            err << "step " << rep.step + 1 << "/" << t.total_steps << " lm " << rep.lm_loss << " cls "
                << rep.cls_loss << " total " << rep.total_loss << " lr " << rep.lr << "\n";
    };
}

std::unique_ptr<std::ofstream> open_metrics(const Flags& f) {
    if (f.metrics.empty()) return nullptr;
    auto s = std::make_unique<std::ofstream>(f.metrics, std::ios::trunc);
    if (!*s) throw Error("cannot write metrics log " + f.metrics);
    return s;
}

std::vector<std::string> read_lines(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path);
    std::vector<std::string> out;
    for (std::string line; std::getline(in, line);)
        if (!normalize_text(line).empty()) out.push_back(line);
    return out;
}

BuildOptions serving_build(const Transformer<float>& model, const TrainConfig& t) {
    BuildOptions b;
    b.max_len = model.config().n_positions;
    b.history_window = t.history_window;
    return b;
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const Flags& f, std::ostream& out, std::ostream& err) {
    const auto data = gen_synthetic(f.seed, f.n_dialogs, f.n_themes);
    save_dataset(data, f.out);
    err << "wrote " << data.dialogs.size() << " dialogs to " << f.out << "\n";
    out << json{{"out", f.out}, {"dialogs", data.dialogs.size()}, {"examples", dataset_examples(data).size()}}.dump()
        << "\n";
    return kExitOk;
}

int cmd_train_bpe(const Flags& f, std::ostream& out, std::ostream& err) {
    if (f.data.empty() == f.corpus.empty()) throw UsageError("train-bpe needs exactly one of --data or --corpus");
    const auto lines = f.data.empty() ? read_lines(f.corpus) : corpus_lines(load_dataset(f.data));
    const auto tok = BpeModel::train(lines, f.merges);
    tok.save(f.out);
    err << "learned " << tok.merges().size() << " merges from " << lines.size() << " lines\n";
    out << json{{"out", f.out}, {"vocab_size", tok.size()}, {"merges", tok.merges().size()}, {"hash", tok.content_hash()}}
               .dump()
        << "\n";
    return kExitOk;
}

int cmd_train(const CLI::App* app, const Flags& f, bool pretrain, std::ostream& out, std::ostream& err) {
    const auto r = resolve(app, f);
    if (pretrain && f.data.empty() == f.corpus.empty())
        throw UsageError("pretrain needs exactly one of --data or --corpus");
    auto start = starting_point(f, r, err);
    auto metrics = open_metrics(f);
    const auto observe = progress(f, r.train, err, metrics.get());

    std::vector<TensorRecord> opt_state;
    std::vector<LossReport> history;
    if (pretrain) {
        const auto lines = f.data.empty() ? read_lines(f.corpus) : corpus_lines(load_dataset(f.data));
        history = pretrain_lm(start.model, start.tokenizer, lines, r.train, observe, &opt_state);
    } else {
        history = finetune(start.model, start.tokenizer, load_dataset(f.data), r.train, observe, &opt_state);
    }

    json meta{{"stage", pretrain ? "pretrain" : "finetune"}, {"train", r.train.to_json()}};
    auto ck = make_checkpoint(start.model, start.tokenizer, start.step + history.size(), meta);
    ck.optimizer_state = std::move(opt_state);
    save_checkpoint(ck, f.out);
    err << "saved " << f.out << "\n";
    json summary{{"out", f.out}, {"steps", history.size()}, {"step", ck.step}};
    if (!history.empty()) summary["final"] = history.back().to_json();
    out << summary.dump() << "\n";
    return kExitOk;
}

int cmd_eval(const CLI::App* app, const Flags& f, std::ostream& out, std::ostream& err) {
    const auto r = resolve(app, f);
    const auto ck = load_checkpoint(f.checkpoint);
    const auto model = restore_model(ck);
    const auto data = load_dataset(f.data);
    EvalOptions opts;
    opts.seed = f.seed;
    if (given(app, "--n-distractors")) opts.n_distractors = f.n_distractors;
    opts.max_examples = f.max_examples;
    opts.with_f1 = !f.no_f1;
    opts.decode = r.decode;
    opts.build = serving_build(model, r.train);
    const ModelScorer scorer(model);
    const auto report = evaluate(scorer, ck.tokenizer, data, opts);
    if (f.baseline) err << "random-reply F1 baseline " << random_reply_f1(data, opts) << "\n";
    out << report.to_json().dump() << "\n";
    return kExitOk;
}

json persona_and_history(const Flags& f) {
    json body{{"persona", json::array()}, {"history", json::array()}};
    if (!f.persona_file.empty()) body["persona"] = read_lines(f.persona_file);
    if (!f.history_file.empty()) body["history"] = json::parse(read_file(f.history_file));
    return body;
}

int cmd_generate(const CLI::App* app, const Flags& f, std::ostream& out, std::ostream&) {
    const auto r = resolve(app, f);
    const auto ck = load_checkpoint(f.checkpoint);
    const auto model = restore_model(ck);
    auto body = persona_and_history(f);
    body["message"] = f.message;
    ChatRequest req;
    try {
        req = parse_chat_request(body, r.decode);
    } catch (const RequestError& e) {
        throw UsageError(e.what());
    }
    const ModelScorer scorer(model);
    const auto result = generate(scorer, ck.tokenizer, chat_example(req), req.decode, serving_build(model, r.train));
    out << chat_response(result).dump() << "\n";
    return kExitOk;
}

int cmd_chat(const CLI::App* app, const Flags& f, std::istream& in, std::ostream& out, std::ostream& err) {
    const auto r = resolve(app, f);
    const auto ck = load_checkpoint(f.checkpoint);
    const auto model = restore_model(ck);
    const ModelScorer scorer(model);
    const auto build = serving_build(model, r.train);
    ChatRequest req;
    req.persona = read_lines(f.persona_file);
    req.decode = r.decode;
    err << "persona:\n";
    for (const auto& p : req.persona) err << "  " << p << "\n";
    err << "type a message; an empty line or EOF ends the chat\n";
    for (std::size_t turn = 0;; ++turn) {
        err << "you> " << std::flush;
        std::string line;
        if (!std::getline(in, line) || normalize_text(line).empty()) break;
        req.message = line;
        req.decode.seed = r.decode.seed + turn;
        std::string reply;
        try {
            reply = generate(scorer, ck.tokenizer, chat_example(req), req.decode, build).beams.front().text;
        } catch (const InputTooLongError&) {
            // Forget the oldest exchange and retry once.
            if (req.history.size() < 2) throw;
            req.history.erase(req.history.begin(), req.history.begin() + 2);
            reply = generate(scorer, ck.tokenizer, chat_example(req), req.decode, build).beams.front().text;
        }
        out << "bot> " << reply << "\n" << std::flush;
        req.history.push_back({1, line});
        req.history.push_back({kAgentSpeaker, reply});
    }
    return kExitOk;
}

ChatService* g_serving = nullptr;

extern "C" void stop_serving(int) {
    if (g_serving) g_serving->stop();
}

int cmd_serve(const CLI::App* app, const Flags& f, std::ostream& out, std::ostream& err) {
    const auto r = resolve(app, f);
    ServiceOptions o;
    o.host = f.host;
    o.port = f.port;
    o.workers = f.workers;
    o.cors_origin = f.cors_origin;
    o.decode = r.decode;
    ChatService service(o);
    service.load_async(f.checkpoint);
    const int port = service.bind();
    err << "listening on http://" << o.host << ":" << port << " (" << service.options().workers
        << " generation workers)\n";
    out << json{{"host", o.host}, {"port", port}}.dump() << "\n" << std::flush;
    g_serving = &service;
    std::signal(SIGINT, stop_serving);
    std::signal(SIGTERM, stop_serving);
    service.serve();
    g_serving = nullptr;
    return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::istream& in, std::ostream& out, std::ostream& err) {
    CLI::App app{"Persona-conditioned dialog transformer: train, evaluate, generate and serve.", "transfo"};
    app.require_subcommand(0, 1);
    Flags f;
    bool print_stopwords = false;
    app.add_flag("--stopwords", print_stopwords, "Print the F1 stopword list as JSON and exit");

    auto* gen = app.add_subcommand("gen-data", "Write a synthetic persona dialog dataset (JSONL)");
    gen->add_option("--out", f.out, "Dataset path")->required();
    gen->add_option("--seed", f.seed, "Generator seed")->capture_default_str();
    gen->add_option("--n-dialogs", f.n_dialogs, "Number of dialogs")->capture_default_str();
    gen->add_option("--n-themes", f.n_themes, "Themes drawn from")->capture_default_str();

    auto* bpe = app.add_subcommand("train-bpe", "Learn a BPE tokenizer");
    bpe->add_option("--data", f.data, "Dataset JSONL")->check(CLI::ExistingFile);
    bpe->add_option("--corpus", f.corpus, "Plain-text file, one document per line")->check(CLI::ExistingFile);
    bpe->add_option("--merges", f.merges, "Number of merges")->capture_default_str();
    bpe->add_option("--out", f.out, "Tokenizer JSON path")->required();

    auto* pre = app.add_subcommand("pretrain", "LM-only training on plain text");
    pre->add_option("--corpus", f.corpus, "Plain-text file, one document per line")->check(CLI::ExistingFile);
    pre->add_option("--data", f.data, "Use a dataset's utterances as the corpus")->check(CLI::ExistingFile);
    pre->add_option("--checkpoint", f.checkpoint, "Continue from this checkpoint")->check(CLI::ExistingFile);
    pre->add_option("--tokenizer", f.tokenizer, "Start a fresh model with this tokenizer")->check(CLI::ExistingFile);
    pre->add_option("--out", f.out, "Checkpoint to write")->required();
    add_train_flags(pre, f);
    add_common(pre, f);

    auto* fine = app.add_subcommand("finetune", "Multi-task (LM + next-utterance classification) fine-tuning");
    fine->add_option("--data", f.data, "Training dataset JSONL")->required()->check(CLI::ExistingFile);
    fine->add_option("--checkpoint", f.checkpoint, "Start from this checkpoint")->check(CLI::ExistingFile);
    fine->add_option("--tokenizer", f.tokenizer, "Start a fresh model with this tokenizer")->check(CLI::ExistingFile);
    fine->add_option("--out", f.out, "Checkpoint to write")->required();
    fine->add_option("--n-distractors", f.n_distractors, "Distractors per example")
        ->default_str(std::to_string(TrainConfig{}.n_distractors));
    add_train_flags(fine, f);
    add_common(fine, f);

    auto* ev = app.add_subcommand("eval", "Perplexity, Hits@1 and F1 on a dataset; prints a JSON report");
    ev->add_option("--checkpoint", f.checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
    ev->add_option("--data", f.data, "Evaluation dataset JSONL")->required()->check(CLI::ExistingFile);
    ev->add_option("--n-distractors", f.n_distractors, "Distractors when the data has no eval candidates")
        ->default_str("19");
    ev->add_option("--max-examples", f.max_examples, "Cap on scored examples; 0 = all")->capture_default_str();
    ev->add_flag("--no-f1", f.no_f1, "Skip generation and report f1 = 0");
    ev->add_flag("--baseline", f.baseline, "Also log the random-reply F1 baseline to stderr");
    add_decode_flags(ev, f);
    add_common(ev, f);

    auto* gn = app.add_subcommand("generate", "Generate a reply; prints the ranked beams as JSON");
    gn->add_option("--checkpoint", f.checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
    gn->add_option("--persona-file", f.persona_file, "Persona sentences, one per line")->check(CLI::ExistingFile);
    gn->add_option("--history-file", f.history_file, "JSON array of {speaker, text} turns")
        ->check(CLI::ExistingFile);
    gn->add_option("--message", f.message, "The user's message")->required();
    add_decode_flags(gn, f);
    add_common(gn, f);

    auto* ch = app.add_subcommand("chat", "Terminal conversation with a persona");
    ch->add_option("--checkpoint", f.checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
    ch->add_option("--persona-file", f.persona_file, "Persona sentences, one per line")
        ->required()
        ->check(CLI::ExistingFile);
    add_decode_flags(ch, f);
    add_common(ch, f);

    auto* sv = app.add_subcommand("serve", "HTTP inference service");
    sv->add_option("--checkpoint", f.checkpoint, "Model checkpoint, loaded in the background")
        ->required()
        ->check(CLI::ExistingFile);
    sv->add_option("--port", f.port, "Listen port; 0 picks a free one")->capture_default_str();
    sv->add_option("--host", f.host, "Listen address")->capture_default_str();
    sv->add_option("--workers", f.workers, "Concurrent generations; 0 = CPU cores")->capture_default_str();
    sv->add_option("--cors-origin", f.cors_origin, "Allow this browser origin (enables CORS)");
    add_decode_flags(sv, f);
    add_common(sv, f);

    std::vector<const char*> argv{"transfo"};
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        if (app.exit(e, out, err) == 0) return kExitOk;
        const auto subs = app.get_subcommands();
        err << "\n" << (subs.empty() ? app.help() : subs.front()->help());
        return kExitUsage;
    }

    CLI::App* used = nullptr;
    for (auto* sub : {gen, bpe, pre, fine, ev, gn, ch, sv})
        if (sub->parsed()) used = sub;
    try {
        if (print_stopwords) {
            out << json(stopwords()).dump() << "\n";
            return kExitOk;
        }
        if (!used) {
            err << app.help();
            return kExitUsage;
        }
        if (used == gen) return cmd_gen_data(f, out, err);
        if (used == bpe) return cmd_train_bpe(f, out, err);
        if (used == pre) return cmd_train(used, f, true, out, err);
        if (used == fine) return cmd_train(used, f, false, out, err);
        if (used == ev) return cmd_eval(used, f, out, err);
        if (used == gn) return cmd_generate(used, f, out, err);
        if (used == ch) return cmd_chat(used, f, in, out, err);
        return cmd_serve(used, f, out, err);
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << "\n" << used->help();
        return kExitUsage;
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
}

}  // namespace transfo
