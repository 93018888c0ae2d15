#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include "transfo/model.hpp"
#include "transfo/types.hpp"

namespace transfo {

/// (input index, position): the next-token distribution after inputs[input][0..position].
using ScoreQuery = std::pair<std::size_t, std::size_t>;

/// What decoding and evaluation need from a model. Implementations are
/// read-only and safe to call from several threads.
class SequenceScorer {
public:
    virtual ~SequenceScorer() = default;

    virtual std::size_t vocab_size() const = 0;
    /// Natural-log next-token probabilities, one row of vocab_size() per query.
    virtual std::vector<std::vector<double>> log_probs(std::span<const TokenizedInput> inputs,
                                                       std::span<const ScoreQuery> queries) const = 0;
    /// Classifier score at each input's cls_index.
    virtual std::vector<double> cls_scores(std::span<const TokenizedInput> inputs) const = 0;
};

/// Scores with a Transformer, in chunks of at most max_batch sequences.
class ModelScorer : public SequenceScorer {
public:
    explicit ModelScorer(std::shared_ptr<const Transformer<float>> model, std::size_t max_batch = 32);
    /// Non-owning; `model` must outlive the scorer.
    explicit ModelScorer(const Transformer<float>& model, std::size_t max_batch = 32);

    std::size_t vocab_size() const override { return model_->config().vocab_size; }
    std::vector<std::vector<double>> log_probs(std::span<const TokenizedInput> inputs,
                                               std::span<const ScoreQuery> queries) const override;
    std::vector<double> cls_scores(std::span<const TokenizedInput> inputs) const override;

    const Transformer<float>& model() const { return *model_; }

private:
    std::shared_ptr<const Transformer<float>> model_;
    std::size_t max_batch_;
};

/// Numerically stable log-softmax.
std::vector<double> log_softmax(std::span<const double> logits);

}  // namespace transfo
