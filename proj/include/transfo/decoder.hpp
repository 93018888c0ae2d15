#pragma once

#include <cstdint>
#include <functional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "transfo/input_builder.hpp"
#include "transfo/scorer.hpp"
#include "transfo/tokenizer.hpp"

namespace transfo {

struct DecodeParams {
    std::size_t beam_size = 4;
    std::size_t top_k = 40;
    double temperature = 0.8;  // <= 0 expands in log-prob order, no sampling
    std::size_t max_new_tokens = 24;
    std::size_t ngram_block_n = 3;  // 0 disables the copy filter
    double rank_lambda = 0.3;
    std::uint64_t seed = 0;
    std::size_t min_new_tokens = 1;  // EOS is masked until this many tokens exist

    /// Throws ConfigError.
    void validate() const;
    nlohmann::json to_json() const;
    /// Overlays the keys present in `j` onto `base`; throws ConfigError on bad types.
    static DecodeParams from_json(const nlohmann::json& j, DecodeParams base);
};

struct BeamHypothesis {
    std::vector<int> tokens;  // generated ids; ends with EOS when finished that way
    double log_prob = 0.0;
    bool finished = false;
    bool has_cls = false;
    double cls_score = 0.0;
    double rank_score = 0.0;

    double lm_norm() const { return tokens.empty() ? 0.0 : log_prob / static_cast<double>(tokens.size()); }
};

/// Contiguous token n-grams of a set of sources, for copy blocking.
class NgramFilter {
public:
    NgramFilter(std::size_t n, std::span<const std::vector<int>> sources);

    /// True when the trailing n-gram of `tokens` occurs in a source or earlier in `tokens`.
    bool blocked(std::span<const int> tokens) const;
    std::size_t n() const { return n_; }

private:
    std::size_t n_;
    std::set<std::vector<int>> grams_;
};

/// Whether `tokens` contains any n-gram of the sources anywhere (post-hoc check).
bool contains_ngram(std::span<const int> tokens, std::span<const std::vector<int>> sources, std::size_t n);

/// Sets rank_score = (1 - lambda) * lm_norm + lambda * cls_score and sorts
/// descending; ties go to the shorter, then the lexicographically smaller
/// hypothesis. Throws ContractError for unfinished or unscored hypotheses.
std::vector<BeamHypothesis> rank(std::vector<BeamHypothesis> finished, double lambda);

/// Everything beam search needs besides the scorer.
struct SearchSpec {
    TokenizedInput prefix;  // context up to the reply
    int eos = -1;
    int reply_state = kStateSpeaker2;
    std::vector<int> banned;  // never generated
    std::vector<std::vector<int>> sources;  // persona + history token sequences
    /// The classifier input for a finished reply (generated tokens without EOS).
    std::function<TokenizedInput(std::span<const int>)> cls_input;
};

/// Beam search with per-hypothesis sampling without replacement (Gumbel
/// top-k over the top_k most likely admissible tokens), pruning by cumulative
/// log-prob and dual-score ranking. Returns the ranked finished hypotheses.
/// Throws DecodeExhaustedError when every hypothesis dies unfinished.
std::vector<BeamHypothesis> beam_search(const SequenceScorer& scorer, const SearchSpec& spec, const DecodeParams& params);

struct RankedReply {
    std::string text;
    std::vector<int> tokens;
    double lm_norm_score = 0.0;
    double cls_score = 0.0;
    double rank_score = 0.0;

    nlohmann::json to_json() const;
};

struct GenerateResult {
    std::vector<RankedReply> beams;
    std::size_t context_tokens = 0;
};

/// Generates the reply to `example` (its `reply` and `candidates` are
/// ignored). The context is truncated to leave room for max_new_tokens;
/// throws InputTooLongError when even that fails.
GenerateResult generate(const SequenceScorer& scorer, const BpeModel& tokenizer, const DialogExample& example,
                        const DecodeParams& params, const BuildOptions& options);

}  // namespace transfo
