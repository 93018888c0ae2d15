#pragma once

// Scorers with hand-rigged outputs, shared by the unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "transfo/decoder.hpp"
#include "transfo/scorer.hpp"

namespace transfo::testing {

inline std::uint64_t hash_tokens(std::uint64_t seed, std::span<const int> tokens) {
    std::uint64_t h = seed ^ 0xcbf29ce484222325ULL;
    for (int t : tokens) {
        h ^= static_cast<std::uint64_t>(t) + 0x9e3779b97f4a7c15ULL;
        h *= 0x100000001b3ULL;
        h ^= h >> 29;
    }
    return h;
}

/// Random but fixed next-token distributions keyed by the tokens generated
/// after a prefix of known length; classifier scores keyed the same way.
class RiggedScorer : public SequenceScorer {
public:
    RiggedScorer(std::size_t vocab, std::size_t prefix_len, std::uint64_t seed)
        : vocab_(vocab), prefix_len_(prefix_len), seed_(seed) {}

    std::size_t vocab_size() const override { return vocab_; }

    std::vector<double> logits_after(std::span<const int> generated) const {
        std::mt19937_64 rng(hash_tokens(seed_, generated));
        std::normal_distribution<double> n(0.0, 2.0);
        std::vector<double> out(vocab_);
        for (auto& v : out) v = n(rng);
        return out;
    }

    std::vector<std::vector<double>> log_probs(std::span<const TokenizedInput> inputs,
                                               std::span<const ScoreQuery> queries) const override {
        std::vector<std::vector<double>> out;
        for (const auto& [i, pos] : queries) {
            const auto& w = inputs[i].word_ids;
            std::span<const int> generated(w.data() + prefix_len_, pos + 1 - prefix_len_);
            out.push_back(log_softmax(logits_after(generated)));
        }
        return out;
    }

    std::vector<double> cls_scores(std::span<const TokenizedInput> inputs) const override {
        std::vector<double> out;
        for (const auto& in : inputs) {
            std::mt19937_64 rng(hash_tokens(seed_ ^ 0xc15, in.word_ids));
            out.push_back(std::normal_distribution<double>(0.0, 1.0)(rng));
        }
        return out;
    }

private:
    std::size_t vocab_;
    std::size_t prefix_len_;
    std::uint64_t seed_;
};

/// Classifier-only stub: scores come from a caller-supplied function of the
/// candidate's index within each cls_scores call and its input.
class ClsStub : public SequenceScorer {
public:
    using Fn = std::function<double(std::size_t index, const TokenizedInput& input)>;
    ClsStub(std::size_t vocab, Fn fn) : vocab_(vocab), fn_(std::move(fn)) {}

    std::size_t vocab_size() const override { return vocab_; }
    std::vector<std::vector<double>> log_probs(std::span<const TokenizedInput>,
                                               std::span<const ScoreQuery> queries) const override {
        return std::vector<std::vector<double>>(queries.size(), std::vector<double>(vocab_, -std::log(double(vocab_))));
    }
    std::vector<double> cls_scores(std::span<const TokenizedInput> inputs) const override {
        std::vector<double> out;
        for (std::size_t i = 0; i < inputs.size(); ++i) out.push_back(fn_(i, inputs[i]));
        return out;
    }

private:
    std::size_t vocab_;
    Fn fn_;
};

/// Assigns the k-th scored target of every input the probability probs[k];
/// the remaining mass is spread evenly over the other tokens.
class TargetProbStub : public SequenceScorer {
public:
    TargetProbStub(std::size_t vocab, std::vector<double> probs) : vocab_(vocab), probs_(std::move(probs)) {}

    std::size_t vocab_size() const override { return vocab_; }
    std::vector<std::vector<double>> log_probs(std::span<const TokenizedInput> inputs,
                                               std::span<const ScoreQuery> queries) const override {
        std::vector<std::vector<double>> out;
        for (const auto& [i, pos] : queries) {
            const auto& in = inputs[i];
            std::size_t k = 0;
            for (std::size_t p = 0; p < pos; ++p) k += in.lm_target_ids[p] != kIgnoreIndex;
            const double p = probs_.at(k);
            const int target = in.lm_target_ids[pos];
            std::vector<double> row(vocab_, std::log((1.0 - p) / static_cast<double>(vocab_ - 1)));
            row[static_cast<std::size_t>(target)] = std::log(p);
            out.push_back(std::move(row));
        }
        return out;
    }
    std::vector<double> cls_scores(std::span<const TokenizedInput> inputs) const override {
        return std::vector<double>(inputs.size(), 0.0);
    }

private:
    std::size_t vocab_;
    std::vector<double> probs_;
};

/// A model that wants to copy: every source token is favoured, and a token
/// that would extend the trailing tokens into a source n-gram is favoured
/// strongly. Used to stress the copy filter.
class CopyProneScorer : public SequenceScorer {
public:
    CopyProneScorer(std::size_t vocab, std::vector<std::vector<int>> sources, int eos, std::uint64_t seed)
        : vocab_(vocab), sources_(std::move(sources)), eos_(eos), seed_(seed) {}

    std::size_t vocab_size() const override { return vocab_; }

    std::vector<std::vector<double>> log_probs(std::span<const TokenizedInput> inputs,
                                               std::span<const ScoreQuery> queries) const override {
        std::vector<std::vector<double>> out;
        for (const auto& [i, pos] : queries) {
            std::span<const int> seen(inputs[i].word_ids.data(), pos + 1);
            std::mt19937_64 rng(hash_tokens(seed_, seen));
            std::normal_distribution<double> noise(0.0, 0.5);
            std::vector<double> logits(vocab_);
            for (auto& v : logits) v = noise(rng);
            for (const auto& src : sources_) {
                for (std::size_t j = 0; j < src.size(); ++j) {
                    double boost = 3.0;
                    if (j >= 2 && seen.size() >= 2 && seen[seen.size() - 2] == src[j - 2] && seen.back() == src[j - 1])
                        boost = 9.0;
                    else if (j >= 1 && seen.back() == src[j - 1])
                        boost = 6.0;
                    auto& l = logits[static_cast<std::size_t>(src[j])];
                    l = std::max(l, boost);
                }
            }
            logits[static_cast<std::size_t>(eos_)] += 1.0;
            out.push_back(log_softmax(logits));
        }
        return out;
    }

    std::vector<double> cls_scores(std::span<const TokenizedInput> inputs) const override {
        std::vector<double> out;
        for (const auto& in : inputs) out.push_back(static_cast<double>(hash_tokens(seed_, in.word_ids) % 1000) / 1000.0);
        return out;
    }

private:
    std::size_t vocab_;
    std::vector<std::vector<int>> sources_;
    int eos_;
    std::uint64_t seed_;
};

/// Exhaustive oracle for beam search at the zero-temperature limit with
/// lambda = 0: the best length-normalised sequence among all that end in EOS
/// (after at least min_len tokens) or reach max_len, with the same tie rule
/// as rank().
inline std::vector<int> exhaustive_best(const RiggedScorer& scorer, int eos, std::size_t max_len, std::size_t min_len) {
    std::vector<int> best;
    double best_score = -INFINITY;
    std::vector<int> seq;
    std::function<void(double)> walk = [&](double logp) {
        const auto lp = log_softmax(scorer.logits_after(seq));
        for (int t = 0; t < static_cast<int>(scorer.vocab_size()); ++t) {
            if (t == eos && seq.size() < min_len) continue;
            seq.push_back(t);
            const double total = logp + lp[static_cast<std::size_t>(t)];
            if (t == eos || seq.size() == max_len) {
                const double score = total / static_cast<double>(seq.size());
                const bool better = score > best_score ||
                                    (score == best_score && (seq.size() < best.size() ||
                                                             (seq.size() == best.size() && seq < best)));
                if (better) {
                    best_score = score;
                    best = seq;
                }
            } else {
                walk(total);
            }
            seq.pop_back();
        }
    };
    walk(0.0);
    return best;
}

/// Straight greedy decoding with the same masking rules as beam_search.
inline std::vector<int> greedy_reference(const SequenceScorer& scorer, const SearchSpec& spec, const DecodeParams& params) {
    const NgramFilter filter(params.ngram_block_n, spec.sources);
    std::vector<int> tokens;
    TokenizedInput in = spec.prefix;
    while (tokens.size() < params.max_new_tokens) {
        const std::vector<TokenizedInput> one{in};
        const std::vector<ScoreQuery> q{{0, in.size() - 1}};
        const auto lp = scorer.log_probs(one, q).front();
        int best = -1;
        for (int t = 0; t < static_cast<int>(lp.size()); ++t) {
            if (t != spec.eos && std::find(spec.banned.begin(), spec.banned.end(), t) != spec.banned.end()) continue;
            if (t == spec.eos && tokens.size() < params.min_new_tokens) continue;
            auto next = tokens;
            next.push_back(t);
            if (filter.blocked(next)) continue;
            if (best < 0 || lp[static_cast<std::size_t>(t)] > lp[static_cast<std::size_t>(best)]) best = t;
        }
        if (best < 0) break;
        tokens.push_back(best);
        append_token(in, best, spec.reply_state);
        if (best == spec.eos) break;
    }
    return tokens;
}

}  // namespace transfo::testing
