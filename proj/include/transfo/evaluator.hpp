#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "transfo/data_store.hpp"
#include "transfo/decoder.hpp"
#include "transfo/input_builder.hpp"
#include "transfo/scorer.hpp"
#include "transfo/tokenizer.hpp"

namespace transfo {

struct EvalReport {
    double ppl = 0.0;
    double hits_at_1 = 0.0;
    double f1 = 0.0;
    std::size_t n_examples = 0;
    std::size_t n_scored_tokens = 0;
    std::uint64_t seed = 0;

    nlohmann::json to_json() const;
};

// ---------------------------------------------------------------------------
// Perplexity

struct NllTotal {
    double nll = 0.0;
    std::size_t tokens = 0;
};

/// Summed NLL over every non-ignored LM target of the inputs.
NllTotal lm_nll(const SequenceScorer& scorer, std::span<const TokenizedInput> inputs);
/// exp(nll / tokens); throws ContractError when tokens == 0.
double perplexity(const NllTotal& total);
/// Gold-reply perplexity (reply tokens and EOS) over the examples.
NllTotal gold_nll(const SequenceScorer& scorer, const BpeModel& tokenizer, std::span<const DialogExample> examples,
                  const BuildOptions& options);

// ---------------------------------------------------------------------------
// Hits@1

/// 1 when scores[gold] is strictly greater than every other score; ties miss.
bool hit_at_1(std::span<const double> scores, std::size_t gold);

/// Each example's `candidates` are its distractors; the gold reply is
/// inserted at gold_slots[i]. Returns the hit fraction.
double hits_at_1(const SequenceScorer& scorer, const BpeModel& tokenizer, std::span<const DialogExample> examples,
                 std::span<const std::size_t> gold_slots, const BuildOptions& options);

// ---------------------------------------------------------------------------
// F1

/// The shipped stopword list, lowercase, punctuation-free.
const std::vector<std::string>& stopwords();
/// Lowercased, punctuation replaced by spaces, stopwords removed.
std::vector<std::string> content_words(std::string_view text);
/// Clipped-count overlap F1 of content words; 0 if either side is empty.
double f1_score(std::string_view predicted, std::string_view gold);

// ---------------------------------------------------------------------------
// Whole-dataset evaluation

struct EvalOptions {
    std::uint64_t seed = 0;
    std::size_t n_distractors = 19;  // used when the data carries no eval candidates
    std::size_t max_examples = 0;    // 0 = all
    bool with_f1 = true;
    DecodeParams decode;
    BuildOptions build;
};

/// The examples evaluate() scores: every agent turn, each with its
/// distractors (the stored eval candidates, else a seeded sample from other
/// dialogs), capped at max_examples.
std::vector<DialogExample> eval_examples(const Dataset& dataset, const EvalOptions& options);

EvalReport evaluate(const SequenceScorer& scorer, const BpeModel& tokenizer, const Dataset& dataset,
                    const EvalOptions& options);

/// Mean F1 of a reply drawn uniformly from other dialogs' turns against
/// each gold reply: the chance level for F1.
double random_reply_f1(const Dataset& dataset, const EvalOptions& options);

}  // namespace transfo
