#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "transfo/autodiff.hpp"
#include "transfo/data_store.hpp"
#include "transfo/input_builder.hpp"
#include "transfo/model.hpp"
#include "transfo/tokenizer.hpp"

namespace transfo {

struct TrainConfig {
    double lr = 6.25e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.01;
    double lm_coef = 2.0;
    double cls_coef = 1.0;
    double dropout = 0.1;
    std::size_t batch_size = 4;  // dialog examples per step, each with 1 + n_distractors sequences
    std::size_t total_steps = 1000;
    std::size_t n_distractors = 3;
    std::uint64_t seed = 0;
    LmScope lm_scope = LmScope::Reply;
    double grad_clip = 1.0;  // global L2 norm; 0 disables
    bool shuffle_persona = true;
    std::size_t history_window = 5;
    std::size_t pretrain_window = 64;  // tokens per pre-training sequence

    /// Throws ConfigError.
    void validate() const;
    nlohmann::json to_json() const;
    /// Overlays the keys present in `j` onto `base`.
    static TrainConfig from_json(const nlohmann::json& j, TrainConfig base);
    static TrainConfig from_json(const nlohmann::json& j);
    /// Batch of 32, 200k steps: far beyond a CPU budget, kept for reference.
    static TrainConfig paper_preset();
};

/// lr * (1 - step / total_steps), clamped at zero.
double learning_rate(const TrainConfig& config, std::size_t step);

/// lm_coef * lm + cls_coef * cls: the reported total of a multi-task step.
double combined_loss(const TrainConfig& config, double lm, double cls);

/// One line of the metrics log.
struct LossReport {
    std::size_t step = 0;
    double lr = 0.0;
    double lm_loss = 0.0;
    double cls_loss = 0.0;
    double total_loss = 0.0;
    double grad_norm = 0.0;

    nlohmann::json to_json() const;
};

/// Adam with decoupled weight decay, applied only where Transformer::decays says so.
class AdamW {
public:
    AdamW(std::vector<ad::NamedTensor<float>> params, double beta1, double beta2, double eps, double weight_decay);

    /// Applies one update from the parameters' current gradients.
    void step(double lr);
    std::uint64_t steps_taken() const { return t_; }

    std::vector<TensorRecord> state() const;
    void load_state(const std::vector<TensorRecord>& records);

private:
    std::vector<ad::NamedTensor<float>> params_;
    std::vector<std::vector<float>> m_, v_;
    std::vector<bool> decays_;
    double beta1_, beta2_, eps_, wd_;
    std::uint64_t t_ = 0;
};

/// Utterances usable as negatives for a dialog: every distinct text that
/// does not occur in that dialog.
class DistractorPool {
public:
    explicit DistractorPool(const Dataset& dataset);

    std::size_t eligible_count(std::size_t dialog, std::string_view gold) const;
    /// k distinct texts drawn uniformly without replacement, none equal to
    /// `gold`. Throws DataError when fewer than k are eligible.
    std::vector<std::string> sample(std::size_t dialog, std::string_view gold, std::size_t k,
                                    std::mt19937_64& rng) const;

private:
    bool excluded(std::size_t text, std::size_t dialog, std::size_t gold) const;

    std::vector<std::string> texts_;                     // sorted, unique
    std::vector<std::vector<std::size_t>> dialog_texts_;  // sorted text indices per dialog
};

std::vector<std::string> sample_distractors(const Dataset& dataset, const IndexedExample& example, std::size_t k,
                                            std::mt19937_64& rng);

/// Candidates for several examples, example-major: sequences[e * n_candidates + c].
struct MultiTaskBatch {
    std::size_t n_examples = 0;
    std::size_t n_candidates = 0;
    std::vector<TokenizedInput> sequences;
    std::vector<int> gold_index;

    const TokenizedInput& gold(std::size_t e) const {
        return sequences[e * n_candidates + static_cast<std::size_t>(gold_index[e])];
    }
};

/// Builds gold + distractor inputs for each example (its `candidates` are the
/// distractors) with the gold at a uniformly drawn slot. All examples must
/// carry the same number of distractors.
MultiTaskBatch make_batch(const BpeModel& tokenizer, std::span<const DialogExample> examples,
                          const BuildOptions& options, std::mt19937_64& rng);

template <typename T>
struct MultiTaskLosses {
    ad::Tensor<T> lm;
    ad::Tensor<T> cls;
};

/// Mean token NLL over the LM targets of the listed sequences of a forward pass.
template <typename T>
ad::Tensor<T> lm_loss(const Transformer<T>& model, const ad::Tensor<T>& hidden, std::span<const TokenizedInput> sequences,
                      std::span<const std::size_t> scored);

/// Mean over examples of -log softmax(scores)[gold]; scores holds n_candidates per example.
template <typename T>
ad::Tensor<T> classification_loss(const ad::Tensor<T>& scores, std::size_t n_candidates, std::span<const int> gold_index);

/// LM loss on gold sequences only, classification loss over all candidates.
template <typename T>
MultiTaskLosses<T> compute_losses(const Transformer<T>& model, const MultiTaskBatch& batch, bool train, ad::Rng& rng);

/// Contiguous windows of the concatenated corpus (lines joined by EOS), all
/// with the unannotated state and full LM targets. Throws DataError when the
/// corpus is shorter than one window.
std::vector<TokenizedInput> pretrain_windows(const BpeModel& tokenizer, std::span<const std::string> corpus,
                                             std::size_t window);

using TrainObserver = std::function<void(const LossReport&)>;

/// Owns one optimisation trajectory over a model.
class Trainer {
public:
    Trainer(Transformer<float>& model, TrainConfig config);

    LossReport step(const MultiTaskBatch& batch);
    LossReport lm_step(std::span<const TokenizedInput> sequences);

    std::size_t step_count() const { return step_; }
    AdamW& optimizer() { return optimizer_; }
    const TrainConfig& config() const { return config_; }

private:
    LossReport apply(ad::Tensor<float> lm, ad::Tensor<float> cls);

    Transformer<float>& model_;
    TrainConfig config_;
    AdamW optimizer_;
    ad::Rng dropout_rng_;
    std::size_t step_ = 0;
};

/// Multi-task fine-tuning for config.total_steps steps.
std::vector<LossReport> finetune(Transformer<float>& model, const BpeModel& tokenizer, const Dataset& dataset,
                                 const TrainConfig& config, const TrainObserver& observer = {},
                                 std::vector<TensorRecord>* optimizer_state = nullptr);

/// LM-only training on plain text.
std::vector<LossReport> pretrain_lm(Transformer<float>& model, const BpeModel& tokenizer,
                                    std::span<const std::string> corpus, const TrainConfig& config,
                                    const TrainObserver& observer = {},
                                    std::vector<TensorRecord>* optimizer_state = nullptr);

}  // namespace transfo
