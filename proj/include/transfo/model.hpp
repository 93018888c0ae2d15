#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "transfo/autodiff.hpp"
#include "transfo/grad_check.hpp"
#include "transfo/types.hpp"

namespace transfo {

struct ModelConfig {
    std::size_t n_layers = 4;
    std::size_t d_model = 128;
    std::size_t n_heads = 4;
    std::size_t d_ff = 512;
    std::size_t vocab_size = 0;
    std::size_t n_positions = 256;
    std::size_t n_states = 4;
    double dropout = 0.1;
    std::string activation = "relu";

    /// CPU-friendly default.
    static ModelConfig desk(std::size_t vocab_size);
    /// 12 layers, 768 wide, 12 heads, 512 positions.
    static ModelConfig paper(std::size_t vocab_size);

    /// Throws ConfigError.
    void validate() const;
    std::size_t head_dim() const { return d_model / n_heads; }

    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
    bool operator==(const ModelConfig&) const = default;
};

/// Right-padded batch of inputs, flattened row-major [batch, seq_len].
struct PackedBatch {
    std::size_t batch = 0;
    std::size_t seq_len = 0;
    std::vector<int> word_ids;
    std::vector<int> position_ids;
    std::vector<int> state_ids;
    std::vector<std::size_t> lengths;

    static PackedBatch pack(std::span<const TokenizedInput> inputs);
    std::size_t row(std::size_t b, std::size_t t) const { return b * seq_len + t; }
};

/// Post-norm causal transformer with tied LM head and a [CLS] scoring head.
template <typename T>
class Transformer {
public:
    using Tensor = ad::Tensor<T>;

    struct Layer {
        Tensor q_w, q_b, k_w, k_b, v_w, v_b, o_w, o_b;
        Tensor ln1_g, ln1_b;
        Tensor fc_w, fc_b, proj_w, proj_b;
        Tensor ln2_g, ln2_b;
    };

    /// Weights ~ N(0, 0.02); layer-norm gains 1; biases 0.
    static Transformer init(const ModelConfig& config, std::uint64_t seed);

    const ModelConfig& config() const { return config_; }
    /// Training-time dropout probability; throws ConfigError outside [0, 1).
    void set_dropout(double rate);

    /// Every learned tensor under its canonical checkpoint name.
    std::vector<ad::NamedTensor<T>> parameters() const;
    std::size_t parameter_count() const;
    /// Whether weight decay applies (not biases, not layer-norm parameters).
    static bool decays(const std::string& name);

    /// Hidden states [batch, seq_len, d_model].
    Tensor forward(const PackedBatch& batch, bool train, ad::Rng& rng) const;
    /// hidden [..., d_model] -> logits [..., vocab_size] via the word-embedding transpose.
    Tensor lm_logits(const Tensor& hidden) const;
    /// One score per sequence from the hidden state at cls_index -> [batch].
    Tensor cls_scores(const Tensor& hidden, std::span<const std::size_t> cls_index) const;

    const Tensor& word_embeddings() const { return wte_; }
    const Tensor& cls_weight() const { return cls_w_; }
    const Tensor& cls_bias() const { return cls_b_; }

private:
    Tensor block(const Layer& layer, const Tensor& x, const PackedBatch& batch, std::span<const std::uint8_t> mask,
                 bool train, ad::Rng& rng) const;

    ModelConfig config_;
    Tensor wte_, wpe_, wse_;
    std::vector<Layer> layers_;
    Tensor lnf_g_, lnf_b_;
    Tensor cls_w_, cls_b_;
};

extern template class Transformer<float>;
extern template class Transformer<double>;

}  // namespace transfo
