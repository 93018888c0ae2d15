#include "transfo/evaluator.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <random>
#include <unordered_set>

#include "transfo/errors.hpp"
#include "transfo/trainer.hpp"

namespace transfo {

using nlohmann::json;

json EvalReport::to_json() const {
    return {{"ppl", ppl},
            {"hits_at_1", hits_at_1},
            {"f1", f1},
            {"n_examples", n_examples},
            {"n_scored_tokens", n_scored_tokens},
            {"seed", seed}};
}

// ---------------------------------------------------------------------------
// Perplexity

NllTotal lm_nll(const SequenceScorer& scorer, std::span<const TokenizedInput> inputs) {
    NllTotal total;
    // Chunked so the per-query probability rows stay small.
    constexpr std::size_t kChunk = 32;
    for (std::size_t start = 0; start < inputs.size(); start += kChunk) {
        const auto chunk = inputs.subspan(start, std::min(kChunk, inputs.size() - start));
        std::vector<ScoreQuery> queries;
        std::vector<int> targets;
        for (std::size_t i = 0; i < chunk.size(); ++i) {
            for (std::size_t p = 0; p < chunk[i].size(); ++p) {
                if (chunk[i].lm_target_ids[p] == kIgnoreIndex) continue;
                queries.emplace_back(i, p);
                targets.push_back(chunk[i].lm_target_ids[p]);
            }
        }
        if (queries.empty()) continue;
        const auto rows = scorer.log_probs(chunk, queries);
        for (std::size_t q = 0; q < rows.size(); ++q) total.nll -= rows[q].at(static_cast<std::size_t>(targets[q]));
        total.tokens += queries.size();
    }
    return total;
}

double perplexity(const NllTotal& total) {
    if (total.tokens == 0) throw ContractError("perplexity over zero scored tokens");
    return std::exp(total.nll / static_cast<double>(total.tokens));
}

NllTotal gold_nll(const SequenceScorer& scorer, const BpeModel& tokenizer, std::span<const DialogExample> examples,
                  const BuildOptions& options) {
    BuildOptions reply_only = options;
    reply_only.lm_scope = LmScope::Reply;
    std::vector<TokenizedInput> inputs;
    for (const auto& ex : examples) inputs.push_back(build(tokenizer, ex, ex.reply, reply_only));
    return lm_nll(scorer, inputs);
}

// ---------------------------------------------------------------------------
// Hits@1

bool hit_at_1(std::span<const double> scores, std::size_t gold) {
    if (gold >= scores.size()) throw ContractError("gold index outside the candidate list");
    for (std::size_t i = 0; i < scores.size(); ++i)
        if (i != gold && !(scores[gold] > scores[i])) return false;
    return true;
}

double hits_at_1(const SequenceScorer& scorer, const BpeModel& tokenizer, std::span<const DialogExample> examples,
                 std::span<const std::size_t> gold_slots, const BuildOptions& options) {
    if (examples.empty()) throw ContractError("hits@1 over zero examples");
    if (gold_slots.size() != examples.size()) throw ContractError("hits@1: one gold slot per example required");
    std::size_t hits = 0;
    for (std::size_t e = 0; e < examples.size(); ++e) {
        const auto& ex = examples[e];
        const std::size_t n = ex.candidates.size() + 1;
        if (gold_slots[e] >= n) throw ContractError("hits@1: gold slot out of range");
        std::vector<std::vector<int>> cands;
        std::size_t longest = 0;
        for (std::size_t c = 0, d = 0; c < n; ++c) {
            cands.push_back(tokenizer.encode(c == gold_slots[e] ? ex.reply : ex.candidates[d++]));
            if (cands.back().empty()) throw ContractError("candidate text encodes to no tokens");
            longest = std::max(longest, cands.back().size());
        }
        validate_example(ex);
        // Shared context, as in training batches.
        const auto ctx = fit_context(encode_context(tokenizer, ex), longest + 2, options.max_len, options);
        std::vector<TokenizedInput> inputs;
        for (const auto& c : cands) inputs.push_back(assemble(ctx, c, tokenizer.ids(), options));
        const auto scores = scorer.cls_scores(inputs);
        hits += hit_at_1(scores, gold_slots[e]) ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(examples.size());
}

// ---------------------------------------------------------------------------
// F1

const std::vector<std::string>& stopwords() {
    static const std::vector<std::string> list = {
        "a",     "an",    "the",  "and",  "or",   "but",  "if",   "so",   "of",   "at",   "by",
        "for",   "with",  "to",   "from", "in",   "on",   "as",   "i",    "me",   "my",   "we",
        "our",   "you",   "your", "he",   "him",  "his",  "she",  "her",  "it",   "its",  "they",
        "them",  "their", "this", "that", "is",   "am",   "are",  "was",  "were", "be",   "been",
        "have",  "has",   "had",  "do",   "does", "did",  "what", "who",  "too",  "very", "just",
        "there", "im",
    };
    return list;
}

std::vector<std::string> content_words(std::string_view text) {
    static const std::unordered_set<std::string> stop(stopwords().begin(), stopwords().end());
    std::string clean;
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (c == '\'') continue;  // "i'm" -> "im"
        clean += std::ispunct(c) ? ' ' : static_cast<char>(std::tolower(c));
    }
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < clean.size()) {
        while (i < clean.size() && std::isspace(static_cast<unsigned char>(clean[i]))) ++i;
        std::size_t j = i;
        while (j < clean.size() && !std::isspace(static_cast<unsigned char>(clean[j]))) ++j;
        if (j > i) {
            std::string w = clean.substr(i, j - i);
            if (!stop.count(w)) out.push_back(std::move(w));
        }
        i = j;
    }
    return out;
}

double f1_score(std::string_view predicted, std::string_view gold) {
    const auto p = content_words(predicted);
    const auto g = content_words(gold);
    if (p.empty() || g.empty()) return 0.0;
    std::map<std::string, int> counts;
    for (const auto& w : g) ++counts[w];
    std::size_t overlap = 0;
    for (const auto& w : p) {
        auto it = counts.find(w);
        if (it != counts.end() && it->second > 0) {
            --it->second;
            ++overlap;
        }
    }
    if (overlap == 0) return 0.0;
    const double precision = static_cast<double>(overlap) / static_cast<double>(p.size());
    const double recall = static_cast<double>(overlap) / static_cast<double>(g.size());
    return 2.0 * precision * recall / (precision + recall);
}

// ---------------------------------------------------------------------------
// Whole-dataset evaluation

namespace {

std::vector<IndexedExample> indexed_eval_examples(const Dataset& dataset, const EvalOptions& options) {
    auto examples = dataset_examples(dataset);
    if (options.max_examples > 0 && examples.size() > options.max_examples) examples.resize(options.max_examples);
    if (examples.empty()) throw DataError("dataset has no speaker-2 turns to evaluate");
    const DistractorPool pool(dataset);
    std::mt19937_64 rng(options.seed);
    for (auto& ix : examples) {
        if (ix.example.candidates.empty()) {
            ix.example.candidates = pool.sample(ix.dialog, ix.example.reply, options.n_distractors, rng);
        }
    }
    return examples;
}

std::uint64_t mix(std::uint64_t seed, std::uint64_t index) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace

std::vector<DialogExample> eval_examples(const Dataset& dataset, const EvalOptions& options) {
    std::vector<DialogExample> out;
    for (auto& ix : indexed_eval_examples(dataset, options)) out.push_back(std::move(ix.example));
    return out;
}

EvalReport evaluate(const SequenceScorer& scorer, const BpeModel& tokenizer, const Dataset& dataset,
                    const EvalOptions& options) {
    const auto examples = eval_examples(dataset, options);
    EvalReport report;
    report.seed = options.seed;
    report.n_examples = examples.size();

    const auto nll = gold_nll(scorer, tokenizer, examples, options.build);
    report.ppl = perplexity(nll);
    report.n_scored_tokens = nll.tokens;

    std::mt19937_64 rng(mix(options.seed, 0x5107));
    std::vector<std::size_t> slots;
    for (const auto& ex : examples) {
        std::uniform_int_distribution<std::size_t> slot(0, ex.candidates.size());
        slots.push_back(slot(rng));
    }
    report.hits_at_1 = hits_at_1(scorer, tokenizer, examples, slots, options.build);

    if (options.with_f1) {
        double sum = 0.0;
        for (std::size_t i = 0; i < examples.size(); ++i) {
            DecodeParams p = options.decode;
            p.seed = mix(options.decode.seed ^ options.seed, i);
            try {
                const auto result = generate(scorer, tokenizer, examples[i], p, options.build);
                sum += f1_score(result.beams.front().text, examples[i].reply);
            } catch (const DecodeExhaustedError&) {
                // No reply counts as zero overlap.
            }
        }
        report.f1 = sum / static_cast<double>(examples.size());
    }
    return report;
}

double random_reply_f1(const Dataset& dataset, const EvalOptions& options) {
    const auto examples = indexed_eval_examples(dataset, options);
    const DistractorPool pool(dataset);
    std::mt19937_64 rng(mix(options.seed, 0xf1));
    double sum = 0.0;
    for (const auto& ix : examples) {
        const auto pick = pool.sample(ix.dialog, ix.example.reply, 1, rng);
        sum += f1_score(pick.front(), ix.example.reply);
    }
    return sum / static_cast<double>(examples.size());
}

}  // namespace transfo
