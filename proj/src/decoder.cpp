#include "transfo/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "transfo/errors.hpp"

namespace transfo {

using nlohmann::json;

void DecodeParams::validate() const {
    if (beam_size == 0) throw ConfigError("beam_size must be at least 1");
    if (top_k == 0) throw ConfigError("top_k must be at least 1");
    if (max_new_tokens == 0) throw ConfigError("max_new_tokens must be at least 1");
    if (min_new_tokens == 0 || min_new_tokens > max_new_tokens) {
        throw ConfigError("min_new_tokens must lie in [1, max_new_tokens]");
    }
    if (!(rank_lambda >= 0.0 && rank_lambda <= 1.0)) throw ConfigError("rank_lambda must lie in [0, 1]");
    if (!std::isfinite(temperature)) throw ConfigError("temperature must be finite");
}

json DecodeParams::to_json() const {
    return {{"beam_size", beam_size},         {"top_k", top_k},
            {"temperature", temperature},     {"max_new_tokens", max_new_tokens},
            {"ngram_block_n", ngram_block_n}, {"rank_lambda", rank_lambda},
            {"seed", seed},                   {"min_new_tokens", min_new_tokens}};
}

DecodeParams DecodeParams::from_json(const json& j, DecodeParams p) {
    if (!j.is_object()) throw ConfigError("decode parameters must be a JSON object");
    try {
        auto get = [&](const char* key, auto& field) {
            if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
        };
        get("beam_size", p.beam_size);
        get("top_k", p.top_k);
        get("temperature", p.temperature);
        get("max_new_tokens", p.max_new_tokens);
        get("ngram_block_n", p.ngram_block_n);
        get("rank_lambda", p.rank_lambda);
        get("seed", p.seed);
        get("min_new_tokens", p.min_new_tokens);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("malformed decode parameters: ") + e.what());
    }
    return p;
}

// ---------------------------------------------------------------------------
// n-gram filter

NgramFilter::NgramFilter(std::size_t n, std::span<const std::vector<int>> sources) : n_(n) {
    if (n_ == 0) return;
    for (const auto& s : sources)
        for (std::size_t i = 0; i + n_ <= s.size(); ++i) grams_.emplace(s.begin() + static_cast<long>(i), s.begin() + static_cast<long>(i + n_));
}

bool NgramFilter::blocked(std::span<const int> tokens) const {
    if (n_ == 0 || tokens.size() < n_) return false;
    const auto tail = tokens.last(n_);
    if (grams_.count(std::vector<int>(tail.begin(), tail.end()))) return true;
    // Self-repetition: the same n-gram earlier in the generated tokens.
    for (std::size_t i = 0; i + n_ < tokens.size(); ++i) {
        if (std::equal(tail.begin(), tail.end(), tokens.begin() + static_cast<long>(i))) return true;
    }
    return false;
}

bool contains_ngram(std::span<const int> tokens, std::span<const std::vector<int>> sources, std::size_t n) {
    if (n == 0) return false;
    const NgramFilter filter(n, sources);
    for (std::size_t end = n; end <= tokens.size(); ++end) {
        // Only the source set matters here, so probe each window on its own.
        if (filter.blocked(tokens.subspan(end - n, n))) return true;
    }
    return false;
}

// ---------------------------------------------------------------------------
// Ranking

std::vector<BeamHypothesis> rank(std::vector<BeamHypothesis> finished, double lambda) {
    for (auto& h : finished) {
        if (!h.finished || !h.has_cls) throw ContractError("rank: every hypothesis must be finished and scored");
        h.rank_score = (1.0 - lambda) * h.lm_norm() + lambda * h.cls_score;
    }
    std::stable_sort(finished.begin(), finished.end(), [](const BeamHypothesis& a, const BeamHypothesis& b) {
        if (a.rank_score != b.rank_score) return a.rank_score > b.rank_score;
        if (a.tokens.size() != b.tokens.size()) return a.tokens.size() < b.tokens.size();
        return a.tokens < b.tokens;
    });
    return finished;
}

// ---------------------------------------------------------------------------
// Beam search

namespace {

// Uniform in the open interval (0, 1).
double open_uniform(std::mt19937_64& rng) {
    return (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53;
}

struct Expansion {
    std::size_t parent;
    int token;
    double log_prob;  // cumulative
};

}  // namespace

std::vector<BeamHypothesis> beam_search(const SequenceScorer& scorer, const SearchSpec& spec, const DecodeParams& params) {
    params.validate();
    if (!spec.cls_input) throw ContractError("beam_search: no classifier input builder");
    const std::size_t V = scorer.vocab_size();
    if (spec.eos < 0 || static_cast<std::size_t>(spec.eos) >= V) throw ContractError("beam_search: EOS outside vocabulary");
    std::vector<char> banned(V, 0);
    for (int t : spec.banned)
        if (t >= 0 && static_cast<std::size_t>(t) < V && t != spec.eos) banned[static_cast<std::size_t>(t)] = 1;

    const NgramFilter filter(params.ngram_block_n, spec.sources);
    std::mt19937_64 rng(params.seed);
    std::vector<BeamHypothesis> live(1), finished;
    std::vector<int> scratch;

    for (std::size_t step = 0; step < params.max_new_tokens && !live.empty(); ++step) {
        std::vector<TokenizedInput> inputs;
        std::vector<ScoreQuery> queries;
        for (std::size_t i = 0; i < live.size(); ++i) {
            TokenizedInput in = spec.prefix;
            for (int t : live[i].tokens) append_token(in, t, spec.reply_state);
            queries.emplace_back(i, in.size() - 1);
            inputs.push_back(std::move(in));
        }
        const auto rows = scorer.log_probs(inputs, queries);

        std::vector<Expansion> pool;
        for (std::size_t i = 0; i < live.size(); ++i) {
            const auto& hyp = live[i];
            const auto& lp = rows[i];
            std::vector<int> admissible;
            scratch = hyp.tokens;
            scratch.push_back(0);
            for (std::size_t t = 0; t < V; ++t) {
                if (banned[t] || !std::isfinite(lp[t])) continue;
                if (static_cast<int>(t) == spec.eos && hyp.tokens.size() < params.min_new_tokens) continue;
                scratch.back() = static_cast<int>(t);
                if (filter.blocked(scratch)) continue;
                admissible.push_back(static_cast<int>(t));
            }
            auto by_prob = [&](int a, int b) { return lp[a] != lp[b] ? lp[a] > lp[b] : a < b; };
            const std::size_t k = std::min(params.top_k, admissible.size());
            std::partial_sort(admissible.begin(), admissible.begin() + static_cast<long>(k), admissible.end(), by_prob);
            admissible.resize(k);

            // Gumbel top-k: sorting by log p / T + Gumbel noise draws without
            // replacement from the tempered distribution.
            std::vector<double> key(admissible.size());
            for (std::size_t j = 0; j < admissible.size(); ++j) {
                key[j] = lp[admissible[j]];
                if (params.temperature > 0.0) key[j] = key[j] / params.temperature - std::log(-std::log(open_uniform(rng)));
            }
            std::vector<std::size_t> order(admissible.size());
            for (std::size_t j = 0; j < order.size(); ++j) order[j] = j;
            std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return key[a] > key[b]; });
            const std::size_t take = std::min(params.beam_size, order.size());
            for (std::size_t j = 0; j < take; ++j) {
                const int t = admissible[order[j]];
                pool.push_back({i, t, hyp.log_prob + lp[t]});
            }
        }

        std::stable_sort(pool.begin(), pool.end(), [](const Expansion& a, const Expansion& b) {
            if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
            if (a.parent != b.parent) return a.parent < b.parent;
            return a.token < b.token;
        });
        if (pool.size() > params.beam_size) pool.resize(params.beam_size);

        std::vector<BeamHypothesis> next;
        for (const auto& e : pool) {
            BeamHypothesis h;
            h.tokens = live[e.parent].tokens;
            h.tokens.push_back(e.token);
            h.log_prob = e.log_prob;
            h.finished = e.token == spec.eos || h.tokens.size() >= params.max_new_tokens;
            (h.finished ? finished : next).push_back(std::move(h));
        }
        live = std::move(next);
    }
    if (finished.empty()) throw DecodeExhaustedError("every beam was filtered out before producing a reply");

    std::vector<TokenizedInput> cls_inputs;
    for (const auto& h : finished) {
        std::span<const int> body(h.tokens);
        if (!body.empty() && body.back() == spec.eos) body = body.first(body.size() - 1);
        cls_inputs.push_back(spec.cls_input(body));
    }
    const auto scores = scorer.cls_scores(cls_inputs);
    for (std::size_t i = 0; i < finished.size(); ++i) {
        finished[i].cls_score = scores[i];
        finished[i].has_cls = true;
    }
    return rank(std::move(finished), params.rank_lambda);
}

// ---------------------------------------------------------------------------
// Text-level generation

json RankedReply::to_json() const {
    return {{"text", text}, {"lm_norm_score", lm_norm_score}, {"cls_score", cls_score}, {"rank_score", rank_score}};
}

GenerateResult generate(const SequenceScorer& scorer, const BpeModel& tokenizer, const DialogExample& example,
                        const DecodeParams& params, const BuildOptions& options) {
    params.validate();
    validate_example(example);
    const auto& specials = tokenizer.ids();
    const auto full = encode_context(tokenizer, example);
    // The utterance being answered must survive truncation.
    const auto ctx = fit_context(full, params.max_new_tokens + 2, options.max_len, options, 1);

    SearchSpec spec;
    spec.prefix = assemble_prefix(ctx, specials, options);
    spec.eos = specials.eos;
    spec.reply_state = speaker_state(ctx.reply_speaker);
    for (std::size_t t = 0; t < tokenizer.size(); ++t)
        if (tokenizer.is_special(static_cast<int>(t))) spec.banned.push_back(static_cast<int>(t));
    // Copy sources come from the whole example, not just the part that fit.
    spec.sources = full.persona;
    for (const auto& [speaker, toks] : full.history) spec.sources.push_back(toks);
    spec.cls_input = [&](std::span<const int> tokens) {
        if (tokens.empty()) throw ContractError("cannot score an empty reply");
        return assemble(ctx, tokens, specials, options);
    };

    GenerateResult out;
    out.context_tokens = spec.prefix.size();
    for (const auto& h : beam_search(scorer, spec, params)) {
        RankedReply r;
        r.tokens = h.tokens;
        std::span<const int> body(h.tokens);
        if (!body.empty() && body.back() == specials.eos) body = body.first(body.size() - 1);
        r.text = tokenizer.decode(body);
        r.lm_norm_score = h.lm_norm();
        r.cls_score = h.cls_score;
        r.rank_score = h.rank_score;
        out.beams.push_back(std::move(r));
    }
    return out;
}

}  // namespace transfo
