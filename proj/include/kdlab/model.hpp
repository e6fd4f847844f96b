#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "kdlab/optim.hpp"
#include "kdlab/rng.hpp"
#include "kdlab/sequence.hpp"
#include "kdlab/tensor.hpp"

namespace kdlab {

enum class ModelRole { Teacher, Student, Generator };

inline const char* role_name(ModelRole r) {
    switch (r) {
        case ModelRole::Teacher: return "teacher";
        case ModelRole::Student: return "student";
        case ModelRole::Generator: return "generator";
    }
    return "?";
}

inline ModelRole role_from_name(const std::string& s) {
    if (s == "teacher") return ModelRole::Teacher;
    if (s == "student") return ModelRole::Student;
    if (s == "generator") return ModelRole::Generator;
    throw std::invalid_argument("unknown model role: " + s);
}

struct ModelConfig {
    int n_layers = 2;
    int d_model = 64;
    int n_heads = 2;
    int d_ff = 0;  // 4 * d_model when 0
    int vocab_size = 0;
    int n_classes = 2;
    int max_len = 32;

    int ff_dim() const { return d_ff > 0 ? d_ff : 4 * d_model; }
    int head_dim() const { return d_model / n_heads; }

    void validate() const {
        if (n_layers < 1 || d_model < 1 || n_heads < 1 || vocab_size < 1 || max_len < 2) {
            throw std::invalid_argument("model config: nonpositive dimension");
        }
        if (d_model % n_heads != 0) {
            throw std::invalid_argument("model config: d_model " + std::to_string(d_model) +
                                        " not divisible by n_heads " + std::to_string(n_heads));
        }
    }

    bool operator==(const ModelConfig& o) const {
        return n_layers == o.n_layers && d_model == o.d_model && n_heads == o.n_heads &&
               ff_dim() == o.ff_dim() && vocab_size == o.vocab_size && n_classes == o.n_classes &&
               max_len == o.max_len;
    }
};

inline ModelConfig teacher_default_config() { return ModelConfig{4, 128, 4, 0, 0, 2, 32}; }
inline ModelConfig student_default_config() { return ModelConfig{2, 64, 2, 0, 0, 2, 32}; }
inline ModelConfig generator_default_config() { return ModelConfig{2, 64, 2, 0, 0, 0, 32}; }

// Parameters plus architecture for one classifier or generator. Parameter
// tensors are autodiff leaves; freezing clears their gradient participation.
template <class T>
struct ModelBundle {
    ModelConfig config;
    ModelRole role = ModelRole::Teacher;
    std::string id;
    ParamMap<T> params;

    void set_trainable(bool trainable) {
        for (auto& [name, p] : params) p.node()->requires_grad = trainable;
    }

    // deep copy: fresh parameter tensors detached from any graph
    ModelBundle clone() const {
        ModelBundle c;
        c.config = config;
        c.role = role;
        c.id = id;
        for (const auto& [name, p] : params) {
            c.params[name] = Tensor<T>::from(p.data(), p.shape(), p.node()->requires_grad);
        }
        return c;
    }

    uint64_t checksum() const {
        uint64_t h = 1469598103934665603ull;
        auto mix = [&h](const void* bytes, size_t n) {
            const unsigned char* b = static_cast<const unsigned char*>(bytes);
            for (size_t i = 0; i < n; ++i) {
                h ^= b[i];
                h *= 1099511628211ull;
            }
        };
        for (const auto& [name, p] : params) {
            mix(name.data(), name.size());
            mix(p.data().data(), p.data().size() * sizeof(T));
        }
        return h;
    }

    Tensor<T>& param(const std::string& name) {
        auto it = params.find(name);
        if (it == params.end()) throw std::invalid_argument("missing parameter: " + name);
        return it->second;
    }
    const Tensor<T>& param(const std::string& name) const {
        auto it = params.find(name);
        if (it == params.end()) throw std::invalid_argument("missing parameter: " + name);
        return it->second;
    }
};

namespace detail {

template <class T>
Tensor<T> init_weight(Shape shape, Rng& rng, T std_dev = T(0.02)) {
    std::vector<T> d(numel(shape));
    for (auto& v : d) v = static_cast<T>(rng.normal(0.0, static_cast<double>(std_dev)));
    return Tensor<T>::from(std::move(d), std::move(shape), true);
}

}  // namespace detail

template <class T>
ModelBundle<T> init_model(const ModelConfig& cfg, ModelRole role, const std::string& id, Rng& rng) {
    cfg.validate();
    if (role != ModelRole::Generator && cfg.n_classes < 2) {
        throw std::invalid_argument("classifier config needs at least 2 classes");
    }
    ModelBundle<T> m;
    m.config = cfg;
    m.role = role;
    m.id = id;
    const int d = cfg.d_model, dh = cfg.head_dim(), f = cfg.ff_dim();
    m.params["embed.tok"] = detail::init_weight<T>({cfg.vocab_size, d}, rng);
    m.params["embed.pos"] = detail::init_weight<T>({cfg.max_len, d}, rng);
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string p = "l" + std::to_string(l) + ".";
        m.params[p + "ln1.g"] = Tensor<T>::full({d}, T(1), true);
        m.params[p + "ln1.b"] = Tensor<T>::zeros({d}, true);
        for (int h = 0; h < cfg.n_heads; ++h) {
            const std::string hp = p + "attn.h" + std::to_string(h) + ".";
            m.params[hp + "wq"] = detail::init_weight<T>({d, dh}, rng);
            m.params[hp + "wk"] = detail::init_weight<T>({d, dh}, rng);
            m.params[hp + "wv"] = detail::init_weight<T>({d, dh}, rng);
            m.params[hp + "wo"] = detail::init_weight<T>({dh, d}, rng);
        }
        m.params[p + "ln2.g"] = Tensor<T>::full({d}, T(1), true);
        m.params[p + "ln2.b"] = Tensor<T>::zeros({d}, true);
        m.params[p + "ffn.w1"] = detail::init_weight<T>({d, f}, rng);
        m.params[p + "ffn.b1"] = Tensor<T>::zeros({f}, true);
        m.params[p + "ffn.w2"] = detail::init_weight<T>({f, d}, rng);
        m.params[p + "ffn.b2"] = Tensor<T>::zeros({d}, true);
    }
    m.params["final_ln.g"] = Tensor<T>::full({d}, T(1), true);
    m.params["final_ln.b"] = Tensor<T>::zeros({d}, true);
    const int out_dim = role == ModelRole::Generator ? cfg.vocab_size : cfg.n_classes;
    m.params["head.w"] = detail::init_weight<T>({d, out_dim}, rng);
    m.params["head.b"] = Tensor<T>::zeros({out_dim}, true);
    return m;
}

namespace detail {

template <class T>
Tensor<T> attention_mask_bias(const std::vector<int>& attn_mask) {
    const int n = static_cast<int>(attn_mask.size());
    std::vector<T> bias(static_cast<size_t>(n) * n, T(0));
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            if (attn_mask[static_cast<size_t>(j)] == 0) bias[static_cast<size_t>(i) * n + j] = T(-1e9);
    return Tensor<T>::from(std::move(bias), {n, n}, false);
}

// pre-norm encoder stack over embedded input, final layer norm included
template <class T>
Tensor<T> encoder_forward(const ModelBundle<T>& m, Tensor<T> x, const std::vector<int>& attn_mask) {
    const ModelConfig& cfg = m.config;
    const T inv_sqrt_dh = T(1) / std::sqrt(static_cast<T>(cfg.head_dim()));
    Tensor<T> mask_bias = attention_mask_bias<T>(attn_mask);
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string p = "l" + std::to_string(l) + ".";
        Tensor<T> h1 = layer_norm_rows(x, m.param(p + "ln1.g"), m.param(p + "ln1.b"));
        Tensor<T> attn_out;
        for (int h = 0; h < cfg.n_heads; ++h) {
            const std::string hp = p + "attn.h" + std::to_string(h) + ".";
            Tensor<T> q = matmul(h1, m.param(hp + "wq"));
            Tensor<T> k = matmul(h1, m.param(hp + "wk"));
            Tensor<T> v = matmul(h1, m.param(hp + "wv"));
            Tensor<T> scores = add(scale(matmul(q, transpose(k)), inv_sqrt_dh), mask_bias);
            Tensor<T> attn = softmax_rows(scores);
            Tensor<T> head_out = matmul(matmul(attn, v), m.param(hp + "wo"));
            attn_out = attn_out.defined() ? add(attn_out, head_out) : head_out;
        }
        x = add(x, attn_out);
        Tensor<T> h2 = layer_norm_rows(x, m.param(p + "ln2.g"), m.param(p + "ln2.b"));
        Tensor<T> ff = add(matmul(gelu(add(matmul(h2, m.param(p + "ffn.w1")), m.param(p + "ffn.b1"))),
                                  m.param(p + "ffn.w2")),
                           m.param(p + "ffn.b2"));
        x = add(x, ff);
    }
    return layer_norm_rows(x, m.param("final_ln.g"), m.param("final_ln.b"));
}

template <class T>
std::vector<int> iota_positions(int n) {
    std::vector<int> idx(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
    return idx;
}

template <class T>
Tensor<T> embed_hard(const ModelBundle<T>& m, const TokenSequence& seq) {
    if (seq.length() > m.config.max_len) {
        throw std::invalid_argument("sequence length " + std::to_string(seq.length()) +
                                    " exceeds model max length " + std::to_string(m.config.max_len));
    }
    for (int id : seq.ids) {
        if (id < 0 || id >= m.config.vocab_size) {
            throw std::invalid_argument("token id " + std::to_string(id) +
                                        " outside model vocabulary of size " +
                                        std::to_string(m.config.vocab_size));
        }
    }
    Tensor<T> tok = select_rows(m.param("embed.tok"), seq.ids);
    Tensor<T> pos = select_rows(m.param("embed.pos"), iota_positions<T>(seq.length()));
    return add(tok, pos);
}

template <class T>
Tensor<T> embed_soft(const ModelBundle<T>& m, const SoftSequence<T>& soft) {
    const int len = soft.dist.rows();
    if (len > m.config.max_len) {
        throw std::invalid_argument("sequence length " + std::to_string(len) +
                                    " exceeds model max length " + std::to_string(m.config.max_len));
    }
    if (soft.dist.cols() != m.config.vocab_size) {
        throw std::invalid_argument("soft sequence vocabulary " + std::to_string(soft.dist.cols()) +
                                    " does not match model vocabulary " +
                                    std::to_string(m.config.vocab_size));
    }
    Tensor<T> tok = matmul(soft.dist, m.param("embed.tok"));
    Tensor<T> pos = select_rows(m.param("embed.pos"), iota_positions<T>(len));
    return add(tok, pos);
}

}  // namespace detail

template <class T>
struct EncodeOut {
    Tensor<T> logits;      // 1 x n_classes
    Tensor<T> cls_hidden;  // 1 x d_model, final encoder layer at position 0
};

template <class T>
EncodeOut<T> encode_hidden(const ModelBundle<T>& m, Tensor<T> hidden) {
    EncodeOut<T> out;
    out.cls_hidden = select_rows(hidden, {0});
    out.logits = add(matmul(out.cls_hidden, m.param("head.w")), m.param("head.b"));
    return out;
}

template <class T>
EncodeOut<T> encode(const ModelBundle<T>& m, const TokenSequence& seq) {
    if (m.role == ModelRole::Generator) {
        throw std::invalid_argument("encode: generator models have no classification head");
    }
    return encode_hidden(m, detail::encoder_forward(m, detail::embed_hard(m, seq), seq.attn_mask));
}

template <class T>
EncodeOut<T> encode(const ModelBundle<T>& m, const SoftSequence<T>& soft) {
    if (m.role == ModelRole::Generator) {
        throw std::invalid_argument("encode: generator models have no classification head");
    }
    return encode_hidden(m, detail::encoder_forward(m, detail::embed_soft(m, soft), soft.attn_mask));
}

// Fills the masked positions of a sequence with Gumbel-Softmax distributions
// over the vocabulary, predicted by the generator from the masked input. All
// other positions stay exact one-hots of their tokens, so gradient flows to
// the generator through the masked positions only.
template <class T>
SoftSequence<T> generator_fill(const ModelBundle<T>& gen, const TokenSequence& masked,
                               const std::vector<int>& positions, T tau, Rng& rng) {
    if (gen.role != ModelRole::Generator) {
        throw std::invalid_argument("generator_fill: model role is " + std::string(role_name(gen.role)) +
                                    ", expected generator");
    }
    SoftSequence<T> base = one_hot<T>(masked, gen.config.vocab_size);
    if (positions.empty()) return base;
    Tensor<T> hidden = detail::encoder_forward(gen, detail::embed_hard(gen, masked), masked.attn_mask);
    Tensor<T> at_masked = select_rows(hidden, positions);
    Tensor<T> logits = add(matmul(at_masked, gen.param("head.w")), gen.param("head.b"));
    Tensor<T> filled = gumbel_softmax(logits, tau, rng);
    SoftSequence<T> out;
    out.dist = scatter_rows(base.dist.data(), {masked.length(), gen.config.vocab_size}, positions, filled);
    out.attn_mask = masked.attn_mask;
    return out;
}

// argmax prediction with class probabilities, read off a fresh forward pass
template <class T>
std::pair<int, std::vector<double>> predict(const ModelBundle<T>& m, const TokenSequence& seq) {
    EncodeOut<T> out = encode(m, seq);
    const auto& logits = out.logits.data();
    double mx = static_cast<double>(logits[0]);
    for (size_t j = 1; j < logits.size(); ++j) mx = std::max(mx, static_cast<double>(logits[j]));
    std::vector<double> probs(logits.size());
    double sum = 0;
    for (size_t j = 0; j < logits.size(); ++j) {
        probs[j] = std::exp(static_cast<double>(logits[j]) - mx);
        sum += probs[j];
    }
    int best = 0;
    for (size_t j = 0; j < logits.size(); ++j) {
        probs[j] /= sum;
        if (probs[j] > probs[static_cast<size_t>(best)]) best = static_cast<int>(j);
    }
    return {best, std::move(probs)};
}

}  // namespace kdlab
