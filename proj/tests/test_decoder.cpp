#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "support/stubs.hpp"
#include "transfo/data_store.hpp"
#include "transfo/decoder.hpp"
#include "transfo/errors.hpp"

using namespace transfo;
using transfo::testing::RiggedScorer;

namespace {

SearchSpec rigged_spec(std::size_t prefix_len, int eos) {
    SearchSpec spec;
    for (std::size_t i = 0; i < prefix_len; ++i) append_token(spec.prefix, 0, kStatePersona);
    spec.prefix.lm_target_ids.assign(prefix_len, kIgnoreIndex);
    spec.eos = eos;
    spec.cls_input = [prefix = spec.prefix, state = spec.reply_state](std::span<const int> tokens) {
        TokenizedInput in = prefix;
        for (int t : tokens) append_token(in, t, state);
        return in;
    };
    return spec;
}

BeamHypothesis finished_hyp(std::vector<int> tokens, double log_prob, double cls) {
    BeamHypothesis h;
    h.tokens = std::move(tokens);
    h.log_prob = log_prob;
    h.finished = true;
    h.has_cls = true;
    h.cls_score = cls;
    return h;
}

struct TinyWorld {
    Dataset data = gen_synthetic(5, 10);
    BpeModel tok = BpeModel::train(corpus_lines(data), 120);
    Transformer<float> model = [&] {
        ModelConfig c;
        c.n_layers = 2;
        c.d_model = 32;
        c.n_heads = 2;
        c.d_ff = 64;
        c.vocab_size = tok.size();
        c.n_positions = 160;
        return Transformer<float>::init(c, 3);
    }();
    ModelScorer scorer{model};
    BuildOptions options = [&] {
        BuildOptions o;
        o.max_len = 160;
        return o;
    }();
};

}  // namespace

TEST_SUITE("decoder") {
    TEST_CASE("parameter validation and overlay") {
        DecodeParams p;
        p.beam_size = 0;
        CHECK_THROWS_AS(p.validate(), ConfigError);
        p = {};
        p.rank_lambda = 1.5;
        CHECK_THROWS_AS(p.validate(), ConfigError);
        p = {};
        p.max_new_tokens = 0;
        CHECK_THROWS_AS(p.validate(), ConfigError);
        auto q = DecodeParams::from_json({{"rank_lambda", 1.0}, {"beam_size", 2}}, DecodeParams{});
        CHECK(q.rank_lambda == 1.0);
        CHECK(q.beam_size == 2);
        CHECK(q.top_k == 40);
        CHECK_THROWS_AS(DecodeParams::from_json({{"beam_size", "four"}}, DecodeParams{}), ConfigError);
    }

    TEST_CASE("n-gram filter") {
        const std::vector<std::vector<int>> persona{{1, 2, 3, 4}};
        NgramFilter f(3, persona);
        CHECK(f.blocked(std::vector<int>{9, 1, 2, 3}));
        CHECK_FALSE(f.blocked(std::vector<int>{1, 2}));
        CHECK_FALSE(f.blocked(std::vector<int>{1, 2, 5}));
        // Self-repetition inside the generated tokens.
        CHECK(f.blocked(std::vector<int>{7, 8, 9, 5, 7, 8, 9}));
        CHECK_FALSE(NgramFilter(0, persona).blocked(std::vector<int>{1, 2, 3}));
        CHECK(contains_ngram(std::vector<int>{5, 2, 3, 4, 6}, persona, 3));
        CHECK_FALSE(contains_ngram(std::vector<int>{5, 2, 3, 6}, persona, 3));

        // "i like tennis" shares only the bigram "i like" with "i like to ski".
        // Enough merges that every word is a single token.
        auto tok = BpeModel::train(std::vector<std::string>{"i like to ski", "i like tennis"}, 100);
        const std::vector<std::vector<int>> src{tok.encode("i like to ski")};
        const auto cand = tok.encode("i like tennis");
        REQUIRE(cand.size() == 3);
        CHECK_FALSE(NgramFilter(3, src).blocked(cand));
        CHECK(NgramFilter(3, src).blocked(tok.encode("i like to")));
    }

    TEST_CASE("ranking formula and tie rule") {
        auto h1 = finished_hyp({1, 2}, -2.0, 2.0);  // lm_norm -1.0
        auto h2 = finished_hyp({3, 4}, -1.0, 0.0);  // lm_norm -0.5
        auto r = rank({h2, h1}, 0.5);
        CHECK(r[0].tokens == h1.tokens);
        CHECK(r[0].rank_score == doctest::Approx(0.5));
        CHECK(r[1].rank_score == doctest::Approx(-0.25));
        r = rank({h1, h2}, 0.0);
        CHECK(r[0].tokens == h2.tokens);
        r = rank({h2, h1}, 1.0);
        CHECK(r[0].tokens == h1.tokens);

        auto a = finished_hyp({1, 1, 1, 1, 1}, -5.0, 0.0);
        auto b = finished_hyp({2, 2, 2}, -3.0, 0.0);
        r = rank({a, b}, 0.0);
        CHECK(r[0].tokens.size() == 3);
        auto c = finished_hyp({1, 1, 2}, -3.0, 0.0);
        r = rank({b, c}, 0.0);
        CHECK(r[0].tokens == std::vector<int>{1, 1, 2});

        auto open = h1;
        open.finished = false;
        CHECK_THROWS_AS(rank({open}, 0.3), ContractError);
    }

    TEST_CASE("beam 1, top-k 1 equals greedy decoding") {
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            RiggedScorer scorer(12, 4, seed);
            auto spec = rigged_spec(4, 0);
            spec.banned = {1};
            spec.sources = {{3, 4, 5, 6}};
            DecodeParams p;
            p.beam_size = 1;
            p.top_k = 1;
            p.rank_lambda = 0.0;
            p.max_new_tokens = 8;
            p.seed = seed;
            const auto out = beam_search(scorer, spec, p);
            REQUIRE(out.size() == 1);
            CHECK(out[0].tokens == transfo::testing::greedy_reference(scorer, spec, p));
        }
    }

    TEST_CASE("wide zero-temperature beam finds the exhaustive optimum") {
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            RiggedScorer scorer(4, 3, 100 + seed);
            auto spec = rigged_spec(3, 0);
            DecodeParams p;
            p.beam_size = 64;
            p.top_k = 4;
            p.temperature = 0.0;
            p.rank_lambda = 0.0;
            p.ngram_block_n = 0;
            p.max_new_tokens = 3;
            const auto out = beam_search(scorer, spec, p);
            CHECK(out.front().tokens == transfo::testing::exhaustive_best(scorer, 0, 3, 1));
        }
    }

    TEST_CASE("lambda 1 orders by classifier score") {
        RiggedScorer scorer(10, 2, 7);
        auto spec = rigged_spec(2, 0);
        DecodeParams p;
        p.beam_size = 6;
        p.rank_lambda = 1.0;
        p.max_new_tokens = 5;
        const auto out = beam_search(scorer, spec, p);
        REQUIRE(out.size() >= 2);
        for (std::size_t i = 1; i < out.size(); ++i) CHECK(out[i - 1].cls_score >= out[i].cls_score);
    }

    TEST_CASE("raising lambda never demotes the top classifier hypothesis") {
        RiggedScorer scorer(10, 2, 9);
        auto spec = rigged_spec(2, 0);
        DecodeParams p;
        p.beam_size = 8;
        p.max_new_tokens = 6;
        auto pool = beam_search(scorer, spec, p);
        REQUIRE(pool.size() >= 3);
        const auto best_cls = std::max_element(pool.begin(), pool.end(), [](const auto& a, const auto& b) {
                                  return a.cls_score < b.cls_score;
                              })->tokens;
        std::size_t previous = pool.size();
        for (int i = 0; i <= 20; ++i) {
            const auto ranked = rank(pool, i / 20.0);
            const auto at = static_cast<std::size_t>(std::find_if(ranked.begin(), ranked.end(), [&](const auto& h) {
                                                         return h.tokens == best_cls;
                                                     }) - ranked.begin());
            CHECK(at <= previous);
            previous = at;
        }
        CHECK(previous == 0);
    }

    TEST_CASE("search is deterministic per seed and respects limits") {
        RiggedScorer scorer(15, 3, 1);
        auto spec = rigged_spec(3, 2);
        spec.banned = {0, 1};
        DecodeParams p;
        p.max_new_tokens = 7;
        p.seed = 42;
        const auto a = beam_search(scorer, spec, p);
        const auto b = beam_search(scorer, spec, p);
        REQUIRE(a.size() == b.size());
        for (std::size_t i = 0; i < a.size(); ++i) {
            CHECK(a[i].tokens == b[i].tokens);
            CHECK(a[i].rank_score == b[i].rank_score);
            CHECK(a[i].tokens.size() <= 7);
            CHECK(a[i].tokens.size() >= 1);
            CHECK(a[i].tokens.front() != 2);
            for (int t : a[i].tokens) CHECK((t != 0 && t != 1));
            if (i > 0) CHECK(a[i - 1].rank_score >= a[i].rank_score);
        }
    }

    TEST_CASE("a fully blocked search is exhausted") {
        RiggedScorer scorer(5, 1, 3);
        auto spec = rigged_spec(1, 0);
        spec.sources = {{0, 1, 2, 3, 4}};
        DecodeParams p;
        p.ngram_block_n = 1;
        CHECK_THROWS_AS(beam_search(scorer, spec, p), DecodeExhaustedError);
    }

    TEST_CASE("generate with a model") {
        TinyWorld w;
        const auto examples = dataset_examples(w.data);
        DecodeParams p;
        p.max_new_tokens = 10;
        for (std::size_t i = 0; i < 6; ++i) {
            auto ex = examples[i].example;
            p.seed = i;
            const auto result = generate(w.scorer, w.tok, ex, p, w.options);
            REQUIRE_FALSE(result.beams.empty());
            CHECK(result.context_tokens > 0);
            const auto again = generate(w.scorer, w.tok, ex, p, w.options);
            CHECK(again.beams.front().text == result.beams.front().text);
            CHECK(again.beams.front().rank_score == result.beams.front().rank_score);

            const auto ctx = encode_context(w.tok, ex);
            std::vector<std::vector<int>> sources = ctx.persona;
            for (const auto& h : ctx.history) sources.push_back(h.second);
            for (std::size_t b = 0; b < result.beams.size(); ++b) {
                const auto& beam = result.beams[b];
                CHECK_FALSE(contains_ngram(beam.tokens, sources, 3));
                if (b > 0) CHECK(result.beams[b - 1].rank_score >= beam.rank_score);
                CHECK(beam.rank_score == doctest::Approx(0.7 * beam.lm_norm_score + 0.3 * beam.cls_score));
            }

            // Cumulative log-prob equals a fresh per-token recomputation.
            const auto fitted = fit_context(ctx, p.max_new_tokens + 2, w.options.max_len, w.options, 1);
            auto in = assemble_prefix(fitted, w.tok.ids(), w.options);
            const auto& best = result.beams.front();
            std::vector<TokenizedInput> seq;
            std::vector<ScoreQuery> queries;
            TokenizedInput grown = in;
            for (int t : best.tokens) append_token(grown, t, kStateSpeaker2);
            for (std::size_t k = 0; k < best.tokens.size(); ++k) queries.emplace_back(0, in.size() - 1 + k);
            seq.push_back(grown);
            const auto rows = w.scorer.log_probs(seq, queries);
            double sum = 0.0;
            for (std::size_t k = 0; k < best.tokens.size(); ++k) sum += rows[k][static_cast<std::size_t>(best.tokens[k])];
            CHECK(sum / static_cast<double>(best.tokens.size()) == doctest::Approx(best.lm_norm_score).epsilon(1e-6));
        }
    }

    TEST_CASE("generate rejects a context that cannot fit") {
        TinyWorld w;
        auto ex = dataset_examples(w.data).front().example;
        DecodeParams p;
        p.max_new_tokens = 200;
        CHECK_THROWS_AS(generate(w.scorer, w.tok, ex, p, w.options), InputTooLongError);
    }
}
