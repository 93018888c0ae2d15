#include "transfo/scorer.hpp"

#include <algorithm>
#include <cmath>

#include "transfo/errors.hpp"
#include "transfo/util.hpp"

namespace transfo {

std::vector<double> log_softmax(std::span<const double> logits) {
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double v : logits) z += std::exp(v - mx);
    const double lz = mx + std::log(z);
    std::vector<double> out(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lz;
    return out;
}

ModelScorer::ModelScorer(std::shared_ptr<const Transformer<float>> model, std::size_t max_batch)
    : model_(std::move(model)), max_batch_(std::max<std::size_t>(1, max_batch)) {
    retain_freed_memory();
}

ModelScorer::ModelScorer(const Transformer<float>& model, std::size_t max_batch)
    : model_(std::shared_ptr<const Transformer<float>>(&model, [](const Transformer<float>*) {})),
      max_batch_(std::max<std::size_t>(1, max_batch)) {
    retain_freed_memory();
}

std::vector<std::vector<double>> ModelScorer::log_probs(std::span<const TokenizedInput> inputs,
                                                        std::span<const ScoreQuery> queries) const {
    ad::NoGradGuard no_grad;
    ad::Rng unused(0);
    std::vector<std::vector<double>> out(queries.size());
    const std::size_t V = vocab_size();
    for (std::size_t start = 0; start < inputs.size(); start += max_batch_) {
        const std::size_t stop = std::min(inputs.size(), start + max_batch_);
        std::vector<std::size_t> rows, slots;
        PackedBatch batch = PackedBatch::pack(inputs.subspan(start, stop - start));
        for (std::size_t q = 0; q < queries.size(); ++q) {
            const auto [idx, pos] = queries[q];
            if (idx < start || idx >= stop) continue;
            if (pos >= inputs[idx].size()) throw InputError("score position beyond sequence end", pos);
            rows.push_back(batch.row(idx - start, pos));
            slots.push_back(q);
        }
        if (rows.empty()) continue;
        auto hidden = model_->forward(batch, false, unused);
        auto logits = model_->lm_logits(ad::gather_rows(hidden, std::span<const std::size_t>(rows)));
        const auto data = logits.data();
        std::vector<double> row(V);
        for (std::size_t r = 0; r < rows.size(); ++r) {
            for (std::size_t v = 0; v < V; ++v) row[v] = data[r * V + v];
            out[slots[r]] = log_softmax(row);
        }
    }
    for (std::size_t q = 0; q < queries.size(); ++q) {
        if (out[q].empty()) throw InputError("score query names a missing input", queries[q].first);
    }
    return out;
}

std::vector<double> ModelScorer::cls_scores(std::span<const TokenizedInput> inputs) const {
    ad::NoGradGuard no_grad;
    ad::Rng unused(0);
    std::vector<double> out;
    out.reserve(inputs.size());
    for (std::size_t start = 0; start < inputs.size(); start += max_batch_) {
        const std::size_t stop = std::min(inputs.size(), start + max_batch_);
        auto chunk = inputs.subspan(start, stop - start);
        std::vector<std::size_t> cls;
        for (const auto& in : chunk) cls.push_back(in.cls_index);
        auto hidden = model_->forward(PackedBatch::pack(chunk), false, unused);
        auto scores = model_->cls_scores(hidden, cls);
        for (float s : scores.data()) out.push_back(s);
    }
    return out;
}

}  // namespace transfo
