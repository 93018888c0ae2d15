#include "transfo/input_builder.hpp"

#include <algorithm>

#include "transfo/errors.hpp"

namespace transfo {

LmScope parse_lm_scope(std::string_view name) {
    if (name == "reply") return LmScope::Reply;
    if (name == "full") return LmScope::Full;
    throw ConfigError("lm_scope must be 'reply' or 'full', got '" + std::string(name) + "'");
}

std::string to_string(LmScope scope) { return scope == LmScope::Reply ? "reply" : "full"; }

void validate_example(const DialogExample& example) {
    if (example.reply_speaker != 1 && example.reply_speaker != 2) {
        throw ContractError("reply speaker must be 1 or 2");
    }
    for (std::size_t i = 0; i < example.history.size(); ++i) {
        const int s = example.history[i].speaker;
        if (s != 1 && s != 2) throw ContractError("history turn " + std::to_string(i) + " has speaker " + std::to_string(s));
        if (i > 0 && s == example.history[i - 1].speaker) {
            throw ContractError("history turns " + std::to_string(i - 1) + " and " + std::to_string(i) +
                                " share a speaker");
        }
    }
    if (!example.history.empty() && example.history.back().speaker == example.reply_speaker) {
        throw ContractError("last history turn is spoken by the replying speaker");
    }
}

EncodedContext encode_context(const BpeModel& tokenizer, const DialogExample& example) {
    EncodedContext ctx;
    ctx.reply_speaker = example.reply_speaker;
    for (const auto& s : example.persona) ctx.persona.push_back(tokenizer.encode(s));
    for (const auto& t : example.history) ctx.history.emplace_back(t.speaker, tokenizer.encode(t.text));
    return ctx;
}

std::size_t built_length(const EncodedContext& ctx, std::size_t candidate_tokens, const BuildOptions& options) {
    const std::size_t sep = options.separators ? 1 : 0;
    std::size_t n = 1;  // BOS
    for (const auto& p : ctx.persona) n += p.size();
    for (const auto& [speaker, toks] : ctx.history) n += sep + toks.size();
    return n + sep + candidate_tokens + 2;  // EOS, CLS
}

EncodedContext fit_context(EncodedContext ctx, std::size_t reserve, std::size_t budget, const BuildOptions& options,
                           std::size_t keep_history) {
    if (ctx.history.size() > options.history_window) {
        ctx.history.erase(ctx.history.begin(),
                          ctx.history.begin() + static_cast<long>(ctx.history.size() - options.history_window));
    }
    // built_length counts EOS and CLS; `reserve` already includes them.
    auto length = [&] { return built_length(ctx, 0, options) - 2 + reserve; };
    while (length() > budget && ctx.history.size() > keep_history) ctx.history.erase(ctx.history.begin());
    while (length() > budget && !ctx.persona.empty()) ctx.persona.pop_back();
    if (length() > budget) {
        throw InputTooLongError("candidate needs " + std::to_string(length()) + " tokens with specials; budget is " +
                                std::to_string(budget));
    }
    return ctx;
}

namespace {

TokenizedInput assemble_context(const EncodedContext& ctx, const SpecialIds& specials, const BuildOptions& options) {
    TokenizedInput in;
    auto push = [&](int word, int pos, int state) {
        in.word_ids.push_back(word);
        in.position_ids.push_back(pos);
        in.state_ids.push_back(state);
    };
    push(specials.bos, 0, kStatePersona);
    std::size_t longest = 0;
    for (const auto& sentence : ctx.persona) {
        for (std::size_t i = 0; i < sentence.size(); ++i) {
            push(sentence[i], kPersonaPositionBase + static_cast<int>(i), kStatePersona);
        }
        longest = std::max(longest, sentence.size());
    }
    int pos = kPersonaPositionBase + static_cast<int>(longest);
    for (const auto& [speaker, toks] : ctx.history) {
        const int state = speaker_state(speaker);
        if (options.separators) push(specials.sep, pos++, state);
        for (int t : toks) push(t, pos++, state);
    }
    if (options.separators) push(specials.sep, pos, speaker_state(ctx.reply_speaker));
    return in;
}

}  // namespace

TokenizedInput assemble(const EncodedContext& ctx, std::span<const int> candidate, const SpecialIds& specials,
                        const BuildOptions& options) {
    if (candidate.empty()) throw ContractError("candidate must contain at least one token");
    TokenizedInput in = assemble_context(ctx, specials, options);
    const int state = speaker_state(ctx.reply_speaker);
    const std::size_t reply_start = in.size();
    for (int t : candidate) {
        if (t == specials.eos) throw ContractError("candidate tokens must not contain EOS");
        append_token(in, t, state);
    }
    append_token(in, specials.eos, state);
    const std::size_t reply_end = in.size();
    append_token(in, specials.cls, state);

    in.cls_index = in.size() - 1;
    in.reply_span = {reply_start, reply_end};
    in.lm_target_ids.assign(in.size(), kIgnoreIndex);
    const std::size_t first = options.lm_scope == LmScope::Reply ? reply_start - 1 : 0;
    for (std::size_t i = first; i + 1 < reply_end; ++i) in.lm_target_ids[i] = in.word_ids[i + 1];
    if (in.size() > options.max_len) {
        throw InputTooLongError("built input has " + std::to_string(in.size()) + " tokens; max_len is " +
                                std::to_string(options.max_len));
    }
    return in;
}

TokenizedInput assemble_prefix(const EncodedContext& ctx, const SpecialIds& specials, const BuildOptions& options) {
    TokenizedInput in = assemble_context(ctx, specials, options);
    in.lm_target_ids.assign(in.size(), kIgnoreIndex);
    in.cls_index = in.size() - 1;
    in.reply_span = {in.size(), in.size()};
    return in;
}

void append_token(TokenizedInput& input, int token, int state) {
    const int pos = input.position_ids.empty() ? 0 : input.position_ids.back() + 1;
    input.word_ids.push_back(token);
    input.position_ids.push_back(pos);
    input.state_ids.push_back(state);
    input.lm_target_ids.resize(input.word_ids.size(), kIgnoreIndex);
}

TokenizedInput build(const BpeModel& tokenizer, const DialogExample& example, std::string_view candidate_text,
                     const BuildOptions& options) {
    validate_example(example);
    const auto candidate = tokenizer.encode(candidate_text);
    if (candidate.empty()) throw ContractError("candidate text is empty");
    auto ctx = fit_context(encode_context(tokenizer, example), candidate.size() + 2, options.max_len, options);
    return assemble(ctx, candidate, tokenizer.ids(), options);
}

DialogExample truncate(const BpeModel& tokenizer, const DialogExample& example, std::string_view candidate_text,
                       std::size_t budget, const BuildOptions& options) {
    const auto candidate = tokenizer.encode(candidate_text);
    const auto full = encode_context(tokenizer, example);
    BuildOptions no_window = options;
    no_window.history_window = example.history.size();
    const auto fitted = fit_context(full, candidate.size() + 2, budget, no_window);
    DialogExample out = example;
    out.persona.resize(fitted.persona.size());
    out.history.erase(out.history.begin(),
                      out.history.begin() + static_cast<long>(example.history.size() - fitted.history.size()));
    return out;
}

DialogExample shuffle_persona(DialogExample example, std::mt19937_64& rng) {
    auto& p = example.persona;
    for (std::size_t i = p.size(); i > 1; --i) {
        std::uniform_int_distribution<std::size_t> pick(0, i - 1);
        std::swap(p[i - 1], p[pick(rng)]);
    }
    return example;
}

}  // namespace transfo
