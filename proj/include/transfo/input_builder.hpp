#pragma once

#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "transfo/tokenizer.hpp"
#include "transfo/types.hpp"

namespace transfo {

/// Which next-token predictions the LM loss scores.
enum class LmScope { Reply, Full };

LmScope parse_lm_scope(std::string_view name);
std::string to_string(LmScope scope);

/// Persona sentences all start at this position id; 0 belongs to BOS.
inline constexpr int kPersonaPositionBase = 1;

struct BuildOptions {
    std::size_t max_len = 256;
    LmScope lm_scope = LmScope::Reply;
    bool separators = true;
    std::size_t history_window = 5;  // most recent utterances kept
};

/// One persona-conditioned reply prediction. The reply is spoken by the
/// persona owner; history speakers alternate and end with the other speaker.
struct DialogExample {
    std::vector<std::string> persona;
    std::vector<Turn> history;
    std::string reply;
    std::vector<std::string> candidates;
    int reply_speaker = 2;

    bool operator==(const DialogExample&) const = default;
};

/// Throws ContractError when speakers do not alternate into the reply.
void validate_example(const DialogExample& example);

/// A dialog context in token space.
struct EncodedContext {
    std::vector<std::vector<int>> persona;
    std::vector<std::pair<int, std::vector<int>>> history;  // (speaker, tokens)
    int reply_speaker = 2;
};

EncodedContext encode_context(const BpeModel& tokenizer, const DialogExample& example);

/// Sequence length of a fully built input for the given context and candidate length.
std::size_t built_length(const EncodedContext& ctx, std::size_t candidate_tokens, const BuildOptions& options);

/// Drops oldest history utterances, then persona sentences from the end,
/// until `reserve` tokens (candidate + EOS + CLS) fit within `budget`.
/// Applies the history window first. The newest `keep_history` utterances are
/// never dropped. Throws InputTooLongError if what must stay cannot fit.
EncodedContext fit_context(EncodedContext ctx, std::size_t reserve, std::size_t budget, const BuildOptions& options,
                           std::size_t keep_history = 0);

/// Layout: [BOS] persona_1 .. persona_k [SEP] u_1 [SEP] u_2 .. [SEP] candidate [EOS] [CLS].
/// Every persona sentence reuses positions from kPersonaPositionBase; later
/// tokens continue after the longest persona sentence. `candidate` must not
/// contain EOS.
TokenizedInput assemble(const EncodedContext& ctx, std::span<const int> candidate, const SpecialIds& specials,
                        const BuildOptions& options);

/// The generation prefix: everything up to and including the reply's [SEP].
TokenizedInput assemble_prefix(const EncodedContext& ctx, const SpecialIds& specials, const BuildOptions& options);

/// Appends one token to a prefix with the reply speaker's state and the next position.
void append_token(TokenizedInput& input, int token, int state);

/// Builds the model input for `candidate_text` as the reply, truncating the
/// context to options.max_len.
TokenizedInput build(const BpeModel& tokenizer, const DialogExample& example, std::string_view candidate_text,
                     const BuildOptions& options);

/// Whole-utterance truncation of `example` so that `candidate_text` fits in `budget` tokens.
DialogExample truncate(const BpeModel& tokenizer, const DialogExample& example, std::string_view candidate_text,
                       std::size_t budget, const BuildOptions& options = {});

/// Uniformly permutes the persona sentences.
DialogExample shuffle_persona(DialogExample example, std::mt19937_64& rng);

}  // namespace transfo
