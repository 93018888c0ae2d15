#include "transfo/model.hpp"

#include <algorithm>
#include <cmath>

#include "transfo/errors.hpp"

namespace transfo {

using ad::Shape;

ModelConfig ModelConfig::desk(std::size_t vocab_size) {
    ModelConfig c;
    c.vocab_size = vocab_size;
    return c;
}

ModelConfig ModelConfig::paper(std::size_t vocab_size) {
    ModelConfig c;
    c.n_layers = 12;
    c.d_model = 768;
    c.n_heads = 12;
    c.d_ff = 3072;
    c.n_positions = 512;
    c.vocab_size = vocab_size;
    return c;
}

void ModelConfig::validate() const {
    if (n_layers == 0) throw ConfigError("n_layers must be positive");
    if (d_model == 0 || n_heads == 0) throw ConfigError("d_model and n_heads must be positive");
    if (d_model % n_heads != 0) {
        throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
                          std::to_string(n_heads));
    }
    if (d_ff == 0) throw ConfigError("d_ff must be positive");
    if (vocab_size == 0) throw ConfigError("vocab_size must be positive");
    if (n_positions == 0) throw ConfigError("n_positions must be positive");
    if (n_states < 3) throw ConfigError("n_states must be at least 3 (persona, speaker 1, speaker 2)");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
    if (activation != "relu") throw ConfigError("unsupported activation '" + activation + "'");
}

nlohmann::json ModelConfig::to_json() const {
    return {{"n_layers", n_layers},       {"d_model", d_model},   {"n_heads", n_heads},
            {"d_ff", d_ff},               {"vocab_size", vocab_size}, {"n_positions", n_positions},
            {"n_states", n_states},       {"dropout", dropout},   {"activation", activation}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    ModelConfig c;
    try {
        c.n_layers = j.at("n_layers").get<std::size_t>();
        c.d_model = j.at("d_model").get<std::size_t>();
        c.n_heads = j.at("n_heads").get<std::size_t>();
        c.d_ff = j.at("d_ff").get<std::size_t>();
        c.vocab_size = j.at("vocab_size").get<std::size_t>();
        c.n_positions = j.at("n_positions").get<std::size_t>();
        c.n_states = j.at("n_states").get<std::size_t>();
        c.dropout = j.at("dropout").get<double>();
        c.activation = j.value("activation", std::string("relu"));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed model config: ") + e.what());
    }
    return c;
}

PackedBatch PackedBatch::pack(std::span<const TokenizedInput> inputs) {
    PackedBatch p;
    p.batch = inputs.size();
    for (const auto& in : inputs) p.seq_len = std::max(p.seq_len, in.size());
    const std::size_t n = p.batch * p.seq_len;
    p.word_ids.assign(n, 0);
    p.position_ids.assign(n, 0);
    p.state_ids.assign(n, 0);
    p.lengths.reserve(p.batch);
    for (std::size_t b = 0; b < p.batch; ++b) {
        const auto& in = inputs[b];
        if (in.position_ids.size() != in.size() || in.state_ids.size() != in.size()) {
            throw DimensionError("tokenized input id sequences differ in length");
        }
        std::copy(in.word_ids.begin(), in.word_ids.end(), p.word_ids.begin() + static_cast<long>(b * p.seq_len));
        std::copy(in.position_ids.begin(), in.position_ids.end(),
                  p.position_ids.begin() + static_cast<long>(b * p.seq_len));
        std::copy(in.state_ids.begin(), in.state_ids.end(), p.state_ids.begin() + static_cast<long>(b * p.seq_len));
        p.lengths.push_back(in.size());
    }
    return p;
}

namespace {

template <typename T>
ad::Tensor<T> normal_param(Shape shape, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, 0.02);
    std::vector<T> data(ad::numel(shape));
    for (auto& v : data) v = static_cast<T>(dist(rng));
    return ad::Tensor<T>::from_data(std::move(shape), std::move(data), true);
}

template <typename T>
ad::Tensor<T> const_param(Shape shape, T value) {
    auto n = ad::numel(shape);
    return ad::Tensor<T>::from_data(std::move(shape), std::vector<T>(n, value), true);
}

void check_ids(std::span<const int> ids, std::size_t limit, std::size_t seq_len, const char* what) {
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= limit) {
            throw InputError(std::string(what) + " id " + std::to_string(ids[i]) + " out of range [0, " +
                                 std::to_string(limit) + ")",
                             seq_len ? i % seq_len : i);
        }
    }
}

}  // namespace

template <typename T>
Transformer<T> Transformer<T>::init(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    std::mt19937_64 rng(seed);
    Transformer m;
    m.config_ = config;
    const std::size_t d = config.d_model;
    m.wte_ = normal_param<T>({config.vocab_size, d}, rng);
    m.wpe_ = normal_param<T>({config.n_positions, d}, rng);
    m.wse_ = normal_param<T>({config.n_states, d}, rng);
    for (std::size_t i = 0; i < config.n_layers; ++i) {
        Layer l;
        l.q_w = normal_param<T>({d, d}, rng);
        l.q_b = const_param<T>({d}, T(0));
        l.k_w = normal_param<T>({d, d}, rng);
        l.k_b = const_param<T>({d}, T(0));
        l.v_w = normal_param<T>({d, d}, rng);
        l.v_b = const_param<T>({d}, T(0));
        l.o_w = normal_param<T>({d, d}, rng);
        l.o_b = const_param<T>({d}, T(0));
        l.ln1_g = const_param<T>({d}, T(1));
        l.ln1_b = const_param<T>({d}, T(0));
        l.fc_w = normal_param<T>({d, config.d_ff}, rng);
        l.fc_b = const_param<T>({config.d_ff}, T(0));
        l.proj_w = normal_param<T>({config.d_ff, d}, rng);
        l.proj_b = const_param<T>({d}, T(0));
        l.ln2_g = const_param<T>({d}, T(1));
        l.ln2_b = const_param<T>({d}, T(0));
        m.layers_.push_back(std::move(l));
    }
    m.lnf_g_ = const_param<T>({d}, T(1));
    m.lnf_b_ = const_param<T>({d}, T(0));
    m.cls_w_ = normal_param<T>({d, 1}, rng);
    m.cls_b_ = const_param<T>({1}, T(0));
    return m;
}

template <typename T>
std::vector<ad::NamedTensor<T>> Transformer<T>::parameters() const {
    std::vector<ad::NamedTensor<T>> out{{"wte", wte_}, {"wpe", wpe_}, {"wse", wse_}};
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const auto& l = layers_[i];
        const std::string p = "h" + std::to_string(i) + ".";
        out.push_back({p + "attn.q.w", l.q_w});
        out.push_back({p + "attn.q.b", l.q_b});
        out.push_back({p + "attn.k.w", l.k_w});
        out.push_back({p + "attn.k.b", l.k_b});
        out.push_back({p + "attn.v.w", l.v_w});
        out.push_back({p + "attn.v.b", l.v_b});
        out.push_back({p + "attn.o.w", l.o_w});
        out.push_back({p + "attn.o.b", l.o_b});
        out.push_back({p + "ln1.g", l.ln1_g});
        out.push_back({p + "ln1.b", l.ln1_b});
        out.push_back({p + "mlp.fc.w", l.fc_w});
        out.push_back({p + "mlp.fc.b", l.fc_b});
        out.push_back({p + "mlp.proj.w", l.proj_w});
        out.push_back({p + "mlp.proj.b", l.proj_b});
        out.push_back({p + "ln2.g", l.ln2_g});
        out.push_back({p + "ln2.b", l.ln2_b});
    }
    out.push_back({"ln_f.g", lnf_g_});
    out.push_back({"ln_f.b", lnf_b_});
    out.push_back({"cls.w", cls_w_});
    out.push_back({"cls.b", cls_b_});
    return out;
}

template <typename T>
std::size_t Transformer<T>::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.tensor.size();
    return n;
}

template <typename T>
bool Transformer<T>::decays(const std::string& name) {
    const bool is_bias = name.size() >= 2 && name.compare(name.size() - 2, 2, ".b") == 0;
    const bool is_norm = name.find("ln") != std::string::npos;
    return !is_bias && !is_norm;
}

template <typename T>
void Transformer<T>::set_dropout(double rate) {
    if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
    config_.dropout = rate;
}

template <typename T>
ad::Tensor<T> Transformer<T>::forward(const PackedBatch& batch, bool train, ad::Rng& rng) const {
    const std::size_t B = batch.batch;
    const std::size_t L = batch.seq_len;
    const std::size_t H = config_.n_heads;
    if (B == 0 || L == 0) throw ContractError("forward on an empty batch");
    check_ids(batch.word_ids, config_.vocab_size, L, "word");
    check_ids(batch.position_ids, config_.n_positions, L, "position");
    check_ids(batch.state_ids, config_.n_states, L, "dialog-state");

    Tensor x = ad::add(ad::add(ad::embedding(wte_, std::span<const int>(batch.word_ids)),
                               ad::embedding(wpe_, std::span<const int>(batch.position_ids))),
                       ad::embedding(wse_, std::span<const int>(batch.state_ids)));
    x = ad::dropout(x, config_.dropout, rng, train);

    // Causal mask plus key padding, shared by every layer.
    std::vector<std::uint8_t> mask(B * H * L * L);
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t h = 0; h < H; ++h) {
            std::uint8_t* m = mask.data() + (b * H + h) * L * L;
            for (std::size_t i = 0; i < L; ++i)
                for (std::size_t j = 0; j < L; ++j) m[i * L + j] = (j > i || j >= batch.lengths[b]) ? 1 : 0;
        }
    }
    for (const auto& layer : layers_) x = block(layer, x, batch, mask, train, rng);
    x = ad::layer_norm(x, lnf_g_, lnf_b_);
    return ad::reshape(x, {B, L, config_.d_model});
}

template <typename T>
ad::Tensor<T> Transformer<T>::block(const Layer& l, const Tensor& x, const PackedBatch& batch,
                                    std::span<const std::uint8_t> mask, bool train, ad::Rng& rng) const {
    const std::size_t B = batch.batch;
    const std::size_t L = batch.seq_len;
    const std::size_t H = config_.n_heads;
    const std::size_t dh = config_.head_dim();
    const std::size_t d = config_.d_model;
    const double p = config_.dropout;

    auto heads = [&](const Tensor& w, const Tensor& bias) {
        return ad::swap_middle(ad::reshape(ad::add(ad::matmul(x, w), bias), {B, L, H, dh}));
    };
    Tensor q = heads(l.q_w, l.q_b);
    Tensor k = heads(l.k_w, l.k_b);
    Tensor v = heads(l.v_w, l.v_b);

    Tensor scores = ad::scale(ad::matmul(q, k, ad::Transpose::Yes), T(1) / std::sqrt(T(dh)));
    scores = ad::masked_fill(scores, mask, T(-1e9));
    Tensor attn = ad::dropout(ad::softmax(scores), p, rng, train);
    Tensor ctx = ad::reshape(ad::swap_middle(ad::matmul(attn, v)), {B * L, d});
    Tensor a = ad::dropout(ad::add(ad::matmul(ctx, l.o_w), l.o_b), p, rng, train);
    Tensor h = ad::layer_norm(ad::add(x, a), l.ln1_g, l.ln1_b);

    Tensor m = ad::relu(ad::add(ad::matmul(h, l.fc_w), l.fc_b));
    m = ad::dropout(ad::add(ad::matmul(m, l.proj_w), l.proj_b), p, rng, train);
    return ad::layer_norm(ad::add(h, m), l.ln2_g, l.ln2_b);
}

template <typename T>
ad::Tensor<T> Transformer<T>::lm_logits(const Tensor& hidden) const {
    return ad::matmul(hidden, wte_, ad::Transpose::Yes);
}

template <typename T>
ad::Tensor<T> Transformer<T>::cls_scores(const Tensor& hidden, std::span<const std::size_t> cls_index) const {
    if (hidden.rank() != 3 || hidden.dim(0) != cls_index.size()) {
        throw DimensionError("cls_scores: hidden " + ad::to_string(hidden.shape()) + " vs " +
                             std::to_string(cls_index.size()) + " cls indices");
    }
    const std::size_t L = hidden.dim(1);
    std::vector<std::size_t> rows(cls_index.size());
    for (std::size_t b = 0; b < cls_index.size(); ++b) {
        if (cls_index[b] >= L) {
            throw InputError("cls_index " + std::to_string(cls_index[b]) + " beyond sequence length " +
                                 std::to_string(L),
                             b);
        }
        rows[b] = b * L + cls_index[b];
    }
    Tensor picked = ad::gather_rows(hidden, std::span<const std::size_t>(rows));
    return ad::reshape(ad::add(ad::matmul(picked, cls_w_), cls_b_), {cls_index.size()});
}

template class Transformer<float>;
template class Transformer<double>;

}  // namespace transfo
