#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "transfo/data_store.hpp"
#include "transfo/errors.hpp"
#include "transfo/grad_check.hpp"
#include "transfo/trainer.hpp"

using namespace transfo;

namespace {

ModelConfig tiny_config(std::size_t vocab) {
    ModelConfig c;
    c.n_layers = 2;
    c.d_model = 16;
    c.n_heads = 2;
    c.d_ff = 32;
    c.vocab_size = vocab;
    c.n_positions = 128;
    c.n_states = 4;
    c.dropout = 0.0;
    return c;
}

TokenizedInput random_sequence(std::size_t len, std::size_t reply_from, ad::Rng& rng, std::size_t vocab) {
    std::uniform_int_distribution<int> w(0, static_cast<int>(vocab) - 1);
    TokenizedInput in;
    for (std::size_t i = 0; i < len; ++i) {
        in.word_ids.push_back(w(rng));
        in.position_ids.push_back(static_cast<int>(i));
        in.state_ids.push_back(i < reply_from ? kStatePersona : kStateSpeaker2);
    }
    in.lm_target_ids.assign(len, kIgnoreIndex);
    for (std::size_t i = reply_from; i + 1 < len; ++i) in.lm_target_ids[i] = in.word_ids[i + 1];
    in.cls_index = len - 1;
    in.reply_span = {reply_from, len - 1};
    return in;
}

Dataset tiny_dataset() {
    Dataset ds;
    ds.dialogs.push_back({{"i ski"}, {{1, "hello"}, {2, "gold reply"}}, std::nullopt, std::nullopt});
    ds.dialogs.push_back({{"p"}, {{1, "t1"}, {2, "t2"}, {1, "t3"}}, std::nullopt, std::nullopt});
    ds.dialogs.push_back({{"q"}, {{1, "t4"}, {2, "t5"}, {1, "t6"}}, std::nullopt, std::nullopt});
    return ds;
}

std::vector<float> flat_parameters(const Transformer<float>& m) {
    std::vector<float> out;
    for (const auto& p : m.parameters()) out.insert(out.end(), p.tensor.data().begin(), p.tensor.data().end());
    return out;
}

}  // namespace

TEST_SUITE("trainer") {
    TEST_CASE("learning rate decays linearly to zero") {
        TrainConfig c;
        c.lr = 1e-3;
        c.total_steps = 100;
        CHECK(learning_rate(c, 0) == doctest::Approx(1e-3).epsilon(1e-15));
        CHECK(learning_rate(c, 50) == doctest::Approx(5e-4).epsilon(1e-15));
        CHECK(learning_rate(c, 100) == 0.0);
        CHECK(learning_rate(c, 150) == 0.0);
    }

    TEST_CASE("config validation and overlay") {
        TrainConfig c;
        c.lr = 0.0;
        CHECK_THROWS_AS(c.validate(), ConfigError);
        c = {};
        c.dropout = 1.0;
        CHECK_THROWS_AS(c.validate(), ConfigError);
        c = {};
        c.n_distractors = 0;
        CHECK_THROWS_AS(c.validate(), ConfigError);

        TrainConfig base;
        base.seed = 9;
        auto over = TrainConfig::from_json({{"lr", 0.5}, {"lm_scope", "full"}}, base);
        CHECK(over.lr == 0.5);
        CHECK(over.seed == 9);
        CHECK(over.lm_scope == LmScope::Full);
        CHECK(TrainConfig::from_json(over.to_json()).to_json() == over.to_json());
        CHECK_THROWS_AS(TrainConfig::from_json({{"lr", "fast"}}), ConfigError);
    }

    TEST_CASE("total loss weights the LM term by two") {
        TrainConfig c;
        CHECK(combined_loss(c, 1.0, 0.5) == 2.5);
        LossReport r;
        r.step = 3;
        const auto j = r.to_json();
        for (const char* key : {"step", "lr", "lm_loss", "cls_loss", "total_loss"}) CHECK(j.contains(key));
        CHECK(j.size() == 5);
    }

    TEST_CASE("classification loss closed forms") {
        const std::vector<int> gold{0};
        auto zero = ad::Tensor<double>::zeros({4});
        CHECK(classification_loss(zero, 4, std::span<const int>(gold)).item() == doctest::Approx(std::log(4.0)).epsilon(1e-15));
        auto two = ad::Tensor<double>::from_data({2}, {1.0, 0.0});
        CHECK(classification_loss(two, 2, std::span<const int>(gold)).item() ==
              doctest::Approx(std::log1p(std::exp(-1.0))).epsilon(1e-15));
        CHECK(std::abs(classification_loss(two, 2, std::span<const int>(gold)).item() - 0.3133) < 1e-4);
        auto far = ad::Tensor<double>::from_data({2}, {60.0, 0.0});
        CHECK(classification_loss(far, 2, std::span<const int>(gold)).item() < 1e-20);
        CHECK_THROWS_AS(classification_loss(ad::Tensor<double>::zeros({1}), 1, std::span<const int>(gold)), ContractError);
    }

    TEST_CASE("uniform model gives ln V for LM and ln N for classification") {
        auto c = tiny_config(64);
        auto m = Transformer<double>::init(c, 1);
        for (auto& p : m.parameters())
            if (p.name == "wte" || p.name == "cls.w") std::fill(p.tensor.mutable_data().begin(), p.tensor.mutable_data().end(), 0.0);
        ad::Rng rng(3);
        MultiTaskBatch b;
        b.n_examples = 2;
        b.n_candidates = 4;
        for (std::size_t i = 0; i < 8; ++i) b.sequences.push_back(random_sequence(10 + i, 4, rng, 64));
        b.gold_index = {1, 3};
        ad::NoGradGuard g;
        auto losses = compute_losses(m, b, false, rng);
        CHECK(losses.lm.item() == doctest::Approx(std::log(64.0)).epsilon(1e-12));
        CHECK(losses.cls.item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));

        // Mean semantics: a longer scored region with the same per-token NLL.
        b.sequences[1] = random_sequence(24, 4, rng, 64);
        CHECK(compute_losses(m, b, false, rng).lm.item() == doctest::Approx(std::log(64.0)).epsilon(1e-12));

        for (auto& s : b.sequences) s.lm_target_ids.assign(s.size(), kIgnoreIndex);
        CHECK_THROWS_AS(compute_losses(m, b, false, rng), ContractError);
    }

    TEST_CASE("combined loss gradient matches finite differences") {
        auto c = tiny_config(64);
        c.n_positions = 32;
        auto m = Transformer<double>::init(c, 5);
        ad::Rng rng(8);
        MultiTaskBatch b;
        b.n_examples = 2;
        b.n_candidates = 2;
        for (std::size_t i = 0; i < 4; ++i) b.sequences.push_back(random_sequence(12 - i, 5, rng, 64));
        b.gold_index = {0, 1};
        auto loss = [&] {
            ad::Rng unused(0);
            auto l = compute_losses(m, b, false, unused);
            return ad::add(ad::scale(l.lm, 2.0), l.cls);
        };
        // With a loss near 9, roundoff puts ~1e-10 of noise on every central
        // difference; entries smaller than the floor are compared absolutely.
        auto report = ad::finite_diff_check<double>(loss, m.parameters(), 1e-5, 1e-4, 1e-5);
        for (const auto& e : report.entries) CHECK_MESSAGE(!e.flagged, e.name << " rel " << e.max_rel_error << " abs " << e.max_abs_error << " idx " << e.worst_index);
    }

    TEST_CASE("AdamW with zero gradients only applies weight decay") {
        auto m = Transformer<float>::init(tiny_config(32), 2);
        auto params = m.parameters();
        std::map<std::string, std::vector<float>> before;
        for (auto& p : params) {
            before[p.name].assign(p.tensor.data().begin(), p.tensor.data().end());
            p.tensor.zero_grad();
        }
        AdamW opt(params, 0.9, 0.999, 1e-8, 0.01);
        opt.step(0.1);
        for (const auto& p : params) {
            const auto& old = before[p.name];
            const float factor = Transformer<float>::decays(p.name) ? static_cast<float>(1.0 - 0.1 * 0.01) : 1.0f;
            for (std::size_t i = 0; i < old.size(); ++i) REQUIRE(p.tensor.data()[i] == doctest::Approx(old[i] * factor).epsilon(1e-6));
        }
        CHECK(opt.steps_taken() == 1);
    }

    TEST_CASE("optimizer state round trip") {
        auto m = Transformer<float>::init(tiny_config(32), 2);
        AdamW a(m.parameters(), 0.9, 0.999, 1e-8, 0.01);
        for (auto& p : m.parameters()) std::fill(p.tensor.mutable_grad().begin(), p.tensor.mutable_grad().end(), 0.5f);
        a.step(0.01);
        AdamW b(m.parameters(), 0.9, 0.999, 1e-8, 0.01);
        b.load_state(a.state());
        CHECK(b.state() == a.state());
        auto partial = a.state();
        partial.pop_back();
        CHECK_THROWS_AS(b.load_state(partial), CheckpointError);
    }

    TEST_CASE("distractor sampling") {
        const auto ds = tiny_dataset();
        const DistractorPool pool(ds);
        std::mt19937_64 rng(1);
        CHECK(pool.sample(0, "gold reply", 0, rng).empty());
        CHECK(pool.eligible_count(0, "gold reply") == 6);

        auto all = pool.sample(0, "gold reply", 6, rng);
        std::sort(all.begin(), all.end());
        CHECK(all == std::vector<std::string>{"t1", "t2", "t3", "t4", "t5", "t6"});
        CHECK_THROWS_AS(pool.sample(0, "gold reply", 7, rng), DataError);

        // The gold text never appears even when another dialog contains it.
        for (int i = 0; i < 200; ++i) {
            for (const auto& s : pool.sample(1, "t4", 3, rng)) {
                CHECK(s != "t4");
                CHECK(s != "t1");
            }
        }

        std::map<std::string, int> counts;
        const int draws = 6000;
        const std::size_t k = 2;
        for (int i = 0; i < draws; ++i) {
            auto s = pool.sample(0, "gold reply", k, rng);
            REQUIRE(s.size() == k);
            CHECK(s[0] != s[1]);
            for (const auto& t : s) ++counts[t];
        }
        const double p = static_cast<double>(k) / 6.0;
        const double sigma = std::sqrt(draws * p * (1 - p));
        CHECK(counts.size() == 6);
        for (const auto& [text, n] : counts) CHECK_MESSAGE(std::abs(n - draws * p) <= 3 * sigma, text);

        std::mt19937_64 r1(4), r2(4);
        CHECK(pool.sample(0, "gold reply", 3, r1) == pool.sample(0, "gold reply", 3, r2));
    }

    TEST_CASE("make_batch places one gold per example") {
        const auto ds = gen_synthetic(3, 6);
        auto tok = BpeModel::train(corpus_lines(ds), 100);
        auto ex = dataset_examples(ds);
        std::vector<DialogExample> chunk;
        for (std::size_t i = 0; i < 3; ++i) {
            auto e = ex[i].example;
            e.candidates = {"i like tea", "my dog is old"};
            chunk.push_back(e);
        }
        std::mt19937_64 rng(2);
        auto b = make_batch(tok, chunk, BuildOptions{}, rng);
        CHECK(b.sequences.size() == 9);
        for (std::size_t e = 0; e < 3; ++e) {
            const auto& g = b.gold(e);
            const auto reply = tok.encode(chunk[e].reply);
            CHECK(std::vector<int>(g.word_ids.begin() + static_cast<long>(g.reply_span.first),
                                   g.word_ids.begin() + static_cast<long>(g.reply_span.first + reply.size())) == reply);
        }
        chunk[1].candidates.pop_back();
        CHECK_THROWS_AS(make_batch(tok, chunk, BuildOptions{}, rng), ContractError);
    }

    TEST_CASE("fine-tuning is deterministic per seed") {
        const auto ds = gen_synthetic(1, 8);
        auto tok = BpeModel::train(corpus_lines(ds), 60);
        TrainConfig tc;
        tc.total_steps = 50;
        tc.batch_size = 2;
        tc.lr = 1e-3;
        tc.seed = 11;
        auto run = [&] {
            auto cfg = tiny_config(tok.size());
            cfg.dropout = 0.1;
            auto m = Transformer<float>::init(cfg, 4);
            auto hist = finetune(m, tok, ds, tc);
            return std::make_pair(flat_parameters(m), hist.back().total_loss);
        };
        const auto a = run(), b = run();
        CHECK(a.first == b.first);
        CHECK(a.second == b.second);
    }

    TEST_CASE("pre-training loss falls on a small corpus") {
        auto lines = corpus_lines(gen_synthetic(2, 20));
        lines.resize(50);
        auto tok = BpeModel::train(lines, 80);
        auto m = Transformer<float>::init(tiny_config(tok.size()), 6);
        TrainConfig tc;
        tc.total_steps = 300;
        tc.lr = 3e-3;
        tc.dropout = 0.0;
        tc.pretrain_window = 32;
        // Full batch: every window every step, so the curve carries no sampling noise.
        tc.batch_size = pretrain_windows(tok, lines, 32).size();
        auto hist = pretrain_lm(m, tok, lines, tc);
        REQUIRE(hist.size() == 300);
        std::vector<double> medians;
        for (std::size_t s = 0; s < hist.size(); s += 10) {
            std::vector<double> w;
            for (std::size_t i = s; i < s + 10; ++i) w.push_back(hist[i].lm_loss);
            std::nth_element(w.begin(), w.begin() + 5, w.end());
            medians.push_back(w[5]);
        }
        CHECK(medians.back() < medians.front() - 1.0);
        std::size_t rises = 0;
        for (std::size_t i = 1; i < medians.size(); ++i) rises += medians[i] >= medians[i - 1];
        CHECK(rises == 0);

        CHECK_THROWS_AS(pretrain_windows(tok, lines, 100000), DataError);
    }

    TEST_CASE("non-finite loss aborts training") {
        const auto ds = gen_synthetic(1, 8);
        auto tok = BpeModel::train(corpus_lines(ds), 40);
        auto m = Transformer<float>::init(tiny_config(tok.size()), 4);
        for (auto& p : m.parameters())
            if (p.name == "ln_f.g") p.tensor.mutable_data()[0] = std::numeric_limits<float>::quiet_NaN();
        TrainConfig tc;
        tc.total_steps = 3;
        CHECK_THROWS_AS(finetune(m, tok, ds, tc), TrainingError);
    }
}
