#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "kdlab/rng.hpp"
#include "kdlab/tensor.hpp"
#include "kdlab/vocab.hpp"

namespace kdlab {

// Fixed-length hard token sequence. Position 0 is always [CLS]; the
// attention mask is 1 exactly on non-[PAD] positions.
struct TokenSequence {
    std::vector<int> ids;
    std::vector<int> attn_mask;
    int label = -1;  // -1 when absent

    int length() const { return static_cast<int>(ids.size()); }

    bool operator==(const TokenSequence& o) const {
        return ids == o.ids && attn_mask == o.attn_mask && label == o.label;
    }
};

// Per-position probability distributions over the vocabulary. Produced by
// the generator; the tensor may be graph-connected.
template <class T>
struct SoftSequence {
    Tensor<T> dist;  // seq_len x vocab
    std::vector<int> attn_mask;
};

inline TokenSequence tokenize_words(const std::vector<std::string>& words, const Vocabulary& vocab,
                                    int max_len, int label = -1) {
    if (max_len < 2) throw std::invalid_argument("tokenize: max_len must be >= 2");
    TokenSequence seq;
    seq.ids.reserve(static_cast<size_t>(max_len));
    seq.ids.push_back(kClsId);
    for (const auto& w : words) {
        if (static_cast<int>(seq.ids.size()) >= max_len) break;
        seq.ids.push_back(vocab.id(w));
    }
    seq.attn_mask.assign(seq.ids.size(), 1);
    while (static_cast<int>(seq.ids.size()) < max_len) {
        seq.ids.push_back(kPadId);
        seq.attn_mask.push_back(0);
    }
    seq.label = label;
    return seq;
}

inline TokenSequence tokenize(std::string_view text, const Vocabulary& vocab, int max_len,
                              int label = -1) {
    return tokenize_words(split_words(text), vocab, max_len, label);
}

// pair encoding: [CLS] text_a [SEP] text_b
inline TokenSequence tokenize_pair(std::string_view text_a, std::string_view text_b,
                                   const Vocabulary& vocab, int max_len, int label = -1) {
    std::vector<std::string> words = split_words(text_a);
    words.push_back(reserved_literal(kSepId));
    for (auto& w : split_words(text_b)) words.push_back(std::move(w));
    return tokenize_words(words, vocab, max_len, label);
}

inline std::string detokenize(const TokenSequence& seq, const Vocabulary& vocab) {
    std::string out;
    for (int i = 0; i < seq.length(); ++i) {
        if (seq.ids[static_cast<size_t>(i)] == kClsId || seq.ids[static_cast<size_t>(i)] == kPadId) continue;
        if (!out.empty()) out += ' ';
        out += vocab.token(seq.ids[static_cast<size_t>(i)]);
    }
    return out;
}

// positions eligible for masking and substitution: real tokens that are not
// [CLS] or the pair separator
inline std::vector<int> content_positions(const TokenSequence& seq) {
    std::vector<int> out;
    for (int i = 0; i < seq.length(); ++i) {
        if (seq.attn_mask[static_cast<size_t>(i)] == 0) continue;
        const int id = seq.ids[static_cast<size_t>(i)];
        if (id == kClsId || id == kSepId || id == kPadId) continue;
        out.push_back(i);
    }
    return out;
}

// ceil(ratio * n) guarded against representation noise in ratio * n
inline int ceil_fraction(double ratio, int n) {
    if (n <= 0 || ratio <= 0.0) return 0;
    int k = static_cast<int>(std::ceil(ratio * n - 1e-9));
    return std::clamp(k, 1, n);
}

// Replaces exactly ceil(ratio * content) content tokens with [MASK], chosen
// uniformly without replacement. Draws nothing from rng when the sequence
// has no content tokens.
inline std::pair<TokenSequence, std::vector<int>> mask_tokens(const TokenSequence& seq, double ratio,
                                                              Rng& rng) {
    if (!(ratio > 0.0 && ratio <= 1.0)) {
        throw std::invalid_argument("mask_tokens: ratio must be in (0, 1]");
    }
    std::vector<int> candidates = content_positions(seq);
    const int n = static_cast<int>(candidates.size());
    const int k = ceil_fraction(ratio, n);
    std::vector<int> chosen;
    if (k > 0) {
        // partial Fisher-Yates: exactly k draws
        for (int i = 0; i < k; ++i) {
            const int j = i + rng.uniform_int(n - i);
            std::swap(candidates[static_cast<size_t>(i)], candidates[static_cast<size_t>(j)]);
        }
        chosen.assign(candidates.begin(), candidates.begin() + k);
        std::sort(chosen.begin(), chosen.end());
    }
    TokenSequence masked = seq;
    for (int pos : chosen) masked.ids[static_cast<size_t>(pos)] = kMaskId;
    return {std::move(masked), std::move(chosen)};
}

// one-hot rows for a hard sequence; constant (no gradient participation)
template <class T>
SoftSequence<T> one_hot(const TokenSequence& seq, int vocab_size) {
    std::vector<T> data(static_cast<size_t>(seq.length()) * static_cast<size_t>(vocab_size), T(0));
    for (int i = 0; i < seq.length(); ++i) {
        const int id = seq.ids[static_cast<size_t>(i)];
        if (id < 0 || id >= vocab_size) {
            throw std::invalid_argument("one_hot: token id " + std::to_string(id) +
                                        " outside vocabulary of size " + std::to_string(vocab_size));
        }
        data[static_cast<size_t>(i) * vocab_size + id] = T(1);
    }
    SoftSequence<T> soft;
    soft.dist = Tensor<T>::from(std::move(data), {seq.length(), vocab_size}, false);
    soft.attn_mask = seq.attn_mask;
    return soft;
}

}  // namespace kdlab
