#include "transfo/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "transfo/errors.hpp"
#include "transfo/util.hpp"

namespace transfo {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

void TrainConfig::validate() const {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("betas must lie in [0, 1)");
    if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
    if (lm_coef < 0.0 || cls_coef < 0.0) throw ConfigError("loss coefficients must be non-negative");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
    if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
    if (total_steps == 0) throw ConfigError("total_steps must be at least 1");
    if (n_distractors == 0) throw ConfigError("n_distractors must be at least 1");
    if (grad_clip < 0.0) throw ConfigError("grad_clip must be non-negative");
    if (pretrain_window < 2) throw ConfigError("pretrain_window must be at least 2");
}

json TrainConfig::to_json() const {
    return {{"lr", lr},
            {"beta1", beta1},
            {"beta2", beta2},
            {"adam_eps", adam_eps},
            {"weight_decay", weight_decay},
            {"lm_coef", lm_coef},
            {"cls_coef", cls_coef},
            {"dropout", dropout},
            {"batch_size", batch_size},
            {"total_steps", total_steps},
            {"n_distractors", n_distractors},
            {"seed", seed},
            {"lm_scope", to_string(lm_scope)},
            {"grad_clip", grad_clip},
            {"shuffle_persona", shuffle_persona},
            {"history_window", history_window},
            {"pretrain_window", pretrain_window}};
}

TrainConfig TrainConfig::from_json(const json& j, TrainConfig c) {
    try {
        auto get = [&](const char* key, auto& field) {
            if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
        };
        get("lr", c.lr);
        get("beta1", c.beta1);
        get("beta2", c.beta2);
        get("adam_eps", c.adam_eps);
        get("weight_decay", c.weight_decay);
        get("lm_coef", c.lm_coef);
        get("cls_coef", c.cls_coef);
        get("dropout", c.dropout);
        get("batch_size", c.batch_size);
        get("total_steps", c.total_steps);
        get("n_distractors", c.n_distractors);
        get("seed", c.seed);
        get("grad_clip", c.grad_clip);
        get("shuffle_persona", c.shuffle_persona);
        get("history_window", c.history_window);
        get("pretrain_window", c.pretrain_window);
        if (j.contains("lm_scope")) c.lm_scope = parse_lm_scope(j.at("lm_scope").get<std::string>());
    } catch (const json::exception& e) {
        throw ConfigError(std::string("malformed training config: ") + e.what());
    }
    return c;
}

TrainConfig TrainConfig::from_json(const json& j) { return from_json(j, TrainConfig{}); }

TrainConfig TrainConfig::paper_preset() {
    TrainConfig c;
    c.batch_size = 32;
    c.total_steps = 200000;
    return c;
}

double learning_rate(const TrainConfig& config, std::size_t step) {
    const double frac = static_cast<double>(step) / static_cast<double>(config.total_steps);
    return config.lr * std::max(0.0, 1.0 - frac);
}

double combined_loss(const TrainConfig& config, double lm, double cls) {
    return config.lm_coef * lm + config.cls_coef * cls;
}

json LossReport::to_json() const {
    return {{"step", step}, {"lr", lr}, {"lm_loss", lm_loss}, {"cls_loss", cls_loss}, {"total_loss", total_loss}};
}

// ---------------------------------------------------------------------------
// Optimizer

AdamW::AdamW(std::vector<ad::NamedTensor<float>> params, double beta1, double beta2, double eps, double weight_decay)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {
    for (const auto& p : params_) {
        m_.emplace_back(p.tensor.size(), 0.0f);
        v_.emplace_back(p.tensor.size(), 0.0f);
        decays_.push_back(Transformer<float>::decays(p.name));
    }
}

void AdamW::step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
        auto w = params_[k].tensor.mutable_data();
        auto g = params_[k].tensor.grad();
        auto& m = m_[k];
        auto& v = v_[k];
        const double decay = decays_[k] ? lr * wd_ : 0.0;
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double gi = g[i];
            m[i] = static_cast<float>(beta1_ * m[i] + (1.0 - beta1_) * gi);
            v[i] = static_cast<float>(beta2_ * v[i] + (1.0 - beta2_) * gi * gi);
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            w[i] = static_cast<float>(w[i] - lr * mhat / (std::sqrt(vhat) + eps_) - decay * w[i]);
        }
    }
}

std::vector<TensorRecord> AdamW::state() const {
    std::vector<TensorRecord> out;
    out.push_back({"adam.t", {1}, {static_cast<float>(t_)}});
    for (std::size_t k = 0; k < params_.size(); ++k) {
        out.push_back({"adam.m." + params_[k].name, params_[k].tensor.shape(), m_[k]});
        out.push_back({"adam.v." + params_[k].name, params_[k].tensor.shape(), v_[k]});
    }
    return out;
}

void AdamW::load_state(const std::vector<TensorRecord>& records) {
    auto find = [&](const std::string& name) -> const TensorRecord& {
        for (const auto& r : records)
            if (r.name == name) return r;
        throw CheckpointError("optimizer state is missing '" + name + "'");
    };
    t_ = static_cast<std::uint64_t>(find("adam.t").data.at(0));
    for (std::size_t k = 0; k < params_.size(); ++k) {
        const auto& m = find("adam.m." + params_[k].name);
        const auto& v = find("adam.v." + params_[k].name);
        if (m.data.size() != m_[k].size() || v.data.size() != v_[k].size()) {
            throw CheckpointError("optimizer state for '" + params_[k].name + "' has the wrong size");
        }
        m_[k] = m.data;
        v_[k] = v.data;
    }
}

// ---------------------------------------------------------------------------
// Distractors

DistractorPool::DistractorPool(const Dataset& dataset) {
    for (const auto& d : dataset.dialogs)
        for (const auto& t : d.turns) texts_.push_back(t.text);
    std::sort(texts_.begin(), texts_.end());
    texts_.erase(std::unique(texts_.begin(), texts_.end()), texts_.end());
    for (const auto& d : dataset.dialogs) {
        std::vector<std::size_t> idx;
        for (const auto& t : d.turns) {
            idx.push_back(static_cast<std::size_t>(std::lower_bound(texts_.begin(), texts_.end(), t.text) - texts_.begin()));
        }
        std::sort(idx.begin(), idx.end());
        idx.erase(std::unique(idx.begin(), idx.end()), idx.end());
        dialog_texts_.push_back(std::move(idx));
    }
}

bool DistractorPool::excluded(std::size_t text, std::size_t dialog, std::size_t gold) const {
    if (text == gold) return true;
    return dialog < dialog_texts_.size() &&
           std::binary_search(dialog_texts_[dialog].begin(), dialog_texts_[dialog].end(), text);
}

namespace {

constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();

}  // namespace

std::size_t DistractorPool::eligible_count(std::size_t dialog, std::string_view gold) const {
    std::size_t n = 0;
    auto it = std::lower_bound(texts_.begin(), texts_.end(), gold);
    const std::size_t g = (it != texts_.end() && *it == gold) ? static_cast<std::size_t>(it - texts_.begin()) : kNone;
    const std::size_t in_dialog = dialog < dialog_texts_.size() ? dialog_texts_[dialog].size() : 0;
    n = texts_.size() - in_dialog;
    if (g != kNone && !excluded(g, dialog, kNone)) --n;
    return n;
}

std::vector<std::string> DistractorPool::sample(std::size_t dialog, std::string_view gold, std::size_t k,
                                                std::mt19937_64& rng) const {
    if (k == 0) return {};
    const std::size_t eligible = eligible_count(dialog, gold);
    if (eligible < k) {
        throw DataError("need " + std::to_string(k) + " distractors but only " + std::to_string(eligible) +
                        " utterances from other dialogs are available");
    }
    auto it = std::lower_bound(texts_.begin(), texts_.end(), gold);
    const std::size_t g = (it != texts_.end() && *it == gold) ? static_cast<std::size_t>(it - texts_.begin()) : kNone;

    std::vector<std::size_t> chosen;
    if (2 * k >= eligible) {
        std::vector<std::size_t> all;
        for (std::size_t i = 0; i < texts_.size(); ++i)
            if (!excluded(i, dialog, g)) all.push_back(i);
        for (std::size_t i = 0; i < k; ++i) {
            std::uniform_int_distribution<std::size_t> pick(i, all.size() - 1);
            std::swap(all[i], all[pick(rng)]);
        }
        chosen.assign(all.begin(), all.begin() + static_cast<long>(k));
    } else {
        std::uniform_int_distribution<std::size_t> pick(0, texts_.size() - 1);
        while (chosen.size() < k) {
            const std::size_t i = pick(rng);
            if (excluded(i, dialog, g) || std::find(chosen.begin(), chosen.end(), i) != chosen.end()) continue;
            chosen.push_back(i);
        }
    }
    std::vector<std::string> out;
    for (auto i : chosen) out.push_back(texts_[i]);
    return out;
}

std::vector<std::string> sample_distractors(const Dataset& dataset, const IndexedExample& example, std::size_t k,
                                            std::mt19937_64& rng) {
    return DistractorPool(dataset).sample(example.dialog, example.example.reply, k, rng);
}

// ---------------------------------------------------------------------------
// Batches and losses

MultiTaskBatch make_batch(const BpeModel& tokenizer, std::span<const DialogExample> examples,
                          const BuildOptions& options, std::mt19937_64& rng) {
    if (examples.empty()) throw ContractError("make_batch: no examples");
    MultiTaskBatch batch;
    batch.n_examples = examples.size();
    batch.n_candidates = examples.front().candidates.size() + 1;
    for (const auto& ex : examples) {
        if (ex.candidates.size() + 1 != batch.n_candidates) {
            throw ContractError("make_batch: examples carry different numbers of distractors");
        }
        validate_example(ex);
        std::uniform_int_distribution<int> slot(0, static_cast<int>(batch.n_candidates) - 1);
        const int gold = slot(rng);
        std::vector<std::vector<int>> cands;
        std::size_t longest = 0;
        for (std::size_t c = 0, d = 0; c < batch.n_candidates; ++c) {
            const std::string& text = static_cast<int>(c) == gold ? ex.reply : ex.candidates[d++];
            cands.push_back(tokenizer.encode(text));
            if (cands.back().empty()) throw ContractError("candidate text encodes to no tokens");
            longest = std::max(longest, cands.back().size());
        }
        const auto ctx = fit_context(encode_context(tokenizer, ex), longest + 2, options.max_len, options);
        for (const auto& c : cands) batch.sequences.push_back(assemble(ctx, c, tokenizer.ids(), options));
        batch.gold_index.push_back(gold);
    }
    return batch;
}

template <typename T>
ad::Tensor<T> lm_loss(const Transformer<T>& model, const ad::Tensor<T>& hidden, std::span<const TokenizedInput> sequences,
                      std::span<const std::size_t> scored) {
    const std::size_t L = hidden.dim(1);
    std::vector<std::size_t> rows;
    std::vector<int> targets;
    for (std::size_t s : scored) {
        const auto& in = sequences[s];
        for (std::size_t i = 0; i < in.size(); ++i) {
            if (in.lm_target_ids[i] == kIgnoreIndex) continue;
            rows.push_back(s * L + i);
            targets.push_back(in.lm_target_ids[i]);
        }
    }
    if (rows.empty()) throw ContractError("LM loss: batch has no scored tokens");
    auto logits = model.lm_logits(ad::gather_rows(hidden, std::span<const std::size_t>(rows)));
    return ad::cross_entropy(logits, std::span<const int>(targets));
}

template <typename T>
ad::Tensor<T> classification_loss(const ad::Tensor<T>& scores, std::size_t n_candidates, std::span<const int> gold_index) {
    if (n_candidates < 2) throw ContractError("classification loss needs at least two candidates");
    if (scores.size() != n_candidates * gold_index.size()) {
        throw DimensionError("classification loss: " + std::to_string(scores.size()) + " scores for " +
                             std::to_string(gold_index.size()) + " examples of " + std::to_string(n_candidates));
    }
    return ad::cross_entropy(ad::reshape(scores, {gold_index.size(), n_candidates}), gold_index);
}

template <typename T>
MultiTaskLosses<T> compute_losses(const Transformer<T>& model, const MultiTaskBatch& batch, bool train, ad::Rng& rng) {
    if (batch.n_examples == 0) throw ContractError("compute_losses: empty batch");
    // One forward per example: its candidates share a context and differ only
    // in the reply, so padding stays small. The per-example losses are then
    // reweighted into the batch means.
    const std::size_t C = batch.n_candidates;
    std::vector<std::size_t> scored_tokens(batch.n_examples, 0);
    std::size_t total_tokens = 0;
    for (std::size_t e = 0; e < batch.n_examples; ++e) {
        const auto& g = batch.gold(e);
        scored_tokens[e] = static_cast<std::size_t>(
            std::count_if(g.lm_target_ids.begin(), g.lm_target_ids.end(), [](int t) { return t != kIgnoreIndex; }));
        total_tokens += scored_tokens[e];
    }
    if (total_tokens == 0) throw ContractError("LM loss: batch has no scored tokens");

    MultiTaskLosses<T> out;
    const std::span<const TokenizedInput> all(batch.sequences);
    for (std::size_t e = 0; e < batch.n_examples; ++e) {
        const auto group = all.subspan(e * C, C);
        auto hidden = model.forward(PackedBatch::pack(group), train, rng);
        std::vector<std::size_t> cls_index;
        for (const auto& s : group) cls_index.push_back(s.cls_index);
        const std::size_t gold = static_cast<std::size_t>(batch.gold_index[e]);
        const int gold_slot = batch.gold_index[e];
        auto cls = ad::scale(classification_loss(model.cls_scores(hidden, cls_index), C, std::span<const int>(&gold_slot, 1)),
                             T(1) / static_cast<T>(batch.n_examples));
        out.cls = out.cls.defined() ? ad::add(out.cls, cls) : cls;
        if (scored_tokens[e] == 0) continue;
        auto lm = ad::scale(lm_loss(model, hidden, group, std::span<const std::size_t>(&gold, 1)),
                            static_cast<T>(scored_tokens[e]) / static_cast<T>(total_tokens));
        out.lm = out.lm.defined() ? ad::add(out.lm, lm) : lm;
    }
    return out;
}

#define TRANSFO_INSTANTIATE(T)                                                                                     \
    template ad::Tensor<T> lm_loss(const Transformer<T>&, const ad::Tensor<T>&, std::span<const TokenizedInput>,   \
                                   std::span<const std::size_t>);                                                  \
    template ad::Tensor<T> classification_loss(const ad::Tensor<T>&, std::size_t, std::span<const int>);           \
    template MultiTaskLosses<T> compute_losses(const Transformer<T>&, const MultiTaskBatch&, bool, ad::Rng&);
TRANSFO_INSTANTIATE(float)
TRANSFO_INSTANTIATE(double)
#undef TRANSFO_INSTANTIATE

std::vector<TokenizedInput> pretrain_windows(const BpeModel& tokenizer, std::span<const std::string> corpus,
                                             std::size_t window) {
    std::vector<int> stream;
    for (const auto& line : corpus) {
        auto ids = tokenizer.encode(line);
        if (ids.empty()) continue;
        stream.insert(stream.end(), ids.begin(), ids.end());
        stream.push_back(tokenizer.ids().eos);
    }
    if (stream.size() < window) {
        throw DataError("corpus has " + std::to_string(stream.size()) + " tokens, fewer than one window of " +
                        std::to_string(window));
    }
    std::vector<TokenizedInput> out;
    for (std::size_t start = 0; start + window <= stream.size(); start += window) {
        TokenizedInput in;
        in.word_ids.assign(stream.begin() + static_cast<long>(start), stream.begin() + static_cast<long>(start + window));
        for (std::size_t i = 0; i < window; ++i) in.position_ids.push_back(static_cast<int>(i));
        in.state_ids.assign(window, kStateUnannotated);
        in.lm_target_ids.assign(window, kIgnoreIndex);
        for (std::size_t i = 0; i + 1 < window; ++i) in.lm_target_ids[i] = in.word_ids[i + 1];
        in.cls_index = window - 1;
        in.reply_span = {0, window};
        out.push_back(std::move(in));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training loop

Trainer::Trainer(Transformer<float>& model, TrainConfig config)
    : model_(model),
      config_(config),
      optimizer_(model.parameters(), config.beta1, config.beta2, config.adam_eps, config.weight_decay),
      dropout_rng_(config.seed ^ 0x9e3779b97f4a7c15ULL) {
    config_.validate();
    model_.set_dropout(config_.dropout);
    retain_freed_memory();
}

LossReport Trainer::step(const MultiTaskBatch& batch) {
    auto losses = compute_losses(model_, batch, true, dropout_rng_);
    return apply(losses.lm, losses.cls);
}

LossReport Trainer::lm_step(std::span<const TokenizedInput> sequences) {
    auto hidden = model_.forward(PackedBatch::pack(sequences), true, dropout_rng_);
    std::vector<std::size_t> all(sequences.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return apply(lm_loss(model_, hidden, sequences, all), {});
}

LossReport Trainer::apply(ad::Tensor<float> lm, ad::Tensor<float> cls) {
    LossReport r;
    r.step = step_;
    r.lr = learning_rate(config_, step_);
    r.lm_loss = lm.item();
    ad::Tensor<float> total;
    if (cls.defined()) {
        r.cls_loss = cls.item();
        r.total_loss = combined_loss(config_, r.lm_loss, r.cls_loss);
        total = ad::add(ad::scale(lm, static_cast<float>(config_.lm_coef)), ad::scale(cls, static_cast<float>(config_.cls_coef)));
    } else {
        r.total_loss = r.lm_loss;
        total = lm;
    }
    if (!std::isfinite(r.total_loss)) {
        throw TrainingError("non-finite loss at step " + std::to_string(step_) + " (lm " + std::to_string(r.lm_loss) +
                            ", cls " + std::to_string(r.cls_loss) + ")");
    }
    auto params = model_.parameters();
    for (auto& p : params) p.tensor.zero_grad();
    total.backward();

    double sq = 0.0;
    for (const auto& p : params)
        for (float g : p.tensor.grad()) sq += static_cast<double>(g) * g;
    r.grad_norm = std::sqrt(sq);
    if (!std::isfinite(r.grad_norm)) throw TrainingError("non-finite gradient at step " + std::to_string(step_));
    if (config_.grad_clip > 0.0 && r.grad_norm > config_.grad_clip) {
        const auto factor = static_cast<float>(config_.grad_clip / r.grad_norm);
        for (auto& p : params)
            for (float& g : p.tensor.mutable_grad()) g *= factor;
    }
    optimizer_.step(r.lr);
    ++step_;
    return r;
}

namespace {

// Cycles through item indices in a fresh seeded permutation per epoch.
class EpochSampler {
public:
    EpochSampler(std::size_t n, std::mt19937_64& rng) : order_(n), rng_(rng) {
        for (std::size_t i = 0; i < n; ++i) order_[i] = i;
        reshuffle();
    }
    std::size_t next() {
        if (cursor_ == order_.size()) reshuffle();
        return order_[cursor_++];
    }

private:
    void reshuffle() {
        std::shuffle(order_.begin(), order_.end(), rng_);
        cursor_ = 0;
    }
    std::vector<std::size_t> order_;
    std::mt19937_64& rng_;
    std::size_t cursor_ = 0;
};

}  // namespace

std::vector<LossReport> finetune(Transformer<float>& model, const BpeModel& tokenizer, const Dataset& dataset,
                                 const TrainConfig& config, const TrainObserver& observer,
                                 std::vector<TensorRecord>* optimizer_state) {
    config.validate();
    const auto examples = dataset_examples(dataset);
    if (examples.empty()) throw DataError("dataset has no speaker-2 turns to train on");
    const DistractorPool pool(dataset);
    BuildOptions options;
    options.max_len = model.config().n_positions;
    options.lm_scope = config.lm_scope;
    options.history_window = config.history_window;

    Trainer trainer(model, config);
    std::mt19937_64 rng(config.seed);
    EpochSampler sampler(examples.size(), rng);
    std::vector<LossReport> history;
    for (std::size_t s = 0; s < config.total_steps; ++s) {
        std::vector<DialogExample> chunk;
        for (std::size_t b = 0; b < config.batch_size; ++b) {
            const auto& src = examples[sampler.next()];
            DialogExample ex = config.shuffle_persona ? shuffle_persona(src.example, rng) : src.example;
            ex.candidates = pool.sample(src.dialog, ex.reply, config.n_distractors, rng);
            chunk.push_back(std::move(ex));
        }
        auto report = trainer.step(make_batch(tokenizer, chunk, options, rng));
        if (observer) observer(report);
        history.push_back(report);
    }
    if (optimizer_state) *optimizer_state = trainer.optimizer().state();
    return history;
}

std::vector<LossReport> pretrain_lm(Transformer<float>& model, const BpeModel& tokenizer,
                                    std::span<const std::string> corpus, const TrainConfig& config,
                                    const TrainObserver& observer, std::vector<TensorRecord>* optimizer_state) {
    config.validate();
    if (model.config().n_states <= kStateUnannotated) {
        throw ConfigError("pre-training needs n_states >= " + std::to_string(kStateUnannotated + 1));
    }
    const auto windows =
        pretrain_windows(tokenizer, corpus, std::min(config.pretrain_window, model.config().n_positions));
    Trainer trainer(model, config);
    std::mt19937_64 rng(config.seed);
    EpochSampler sampler(windows.size(), rng);
    std::vector<LossReport> history;
    for (std::size_t s = 0; s < config.total_steps; ++s) {
        std::vector<TokenizedInput> chunk;
        for (std::size_t b = 0; b < config.batch_size; ++b) chunk.push_back(windows[sampler.next()]);
        auto report = trainer.lm_step(chunk);
        if (observer) observer(report);
        history.push_back(report);
    }
    if (optimizer_state) *optimizer_state = trainer.optimizer().state();
    return history;
}

}  // namespace transfo
