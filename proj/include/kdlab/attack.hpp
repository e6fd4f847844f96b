#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "kdlab/model.hpp"
#include "kdlab/sequence.hpp"
#include "kdlab/vocab.hpp"

namespace kdlab {

// word -> ordered synonym list, loaded from `word<TAB>syn1,syn2,...` lines
struct SynonymLexicon {
    std::map<std::string, std::vector<std::string>> entries;

    const std::vector<std::string>* find(const std::string& word) const {
        auto it = entries.find(word);
        return it == entries.end() ? nullptr : &it->second;
    }

    void add(const std::string& word, std::vector<std::string> syns) {
        if (word.empty()) throw std::invalid_argument("lexicon: empty headword");
        for (const auto& s : syns) {
            if (s.empty()) throw std::invalid_argument("lexicon: empty synonym for '" + word + "'");
            if (s == word) throw std::invalid_argument("lexicon: '" + word + "' lists itself as a synonym");
        }
        auto lower = [](const std::string& w) {
            return std::none_of(w.begin(), w.end(),
                                [](unsigned char c) { return std::isupper(c); });
        };
        if (!lower(word)) throw std::invalid_argument("lexicon: headword '" + word + "' is not lowercase");
        for (const auto& s : syns)
            if (!lower(s)) throw std::invalid_argument("lexicon: synonym '" + s + "' is not lowercase");
        entries[word] = std::move(syns);
    }

    static SynonymLexicon load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("cannot open lexicon " + path);
        SynonymLexicon lex;
        std::string line;
        size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (line.empty() || line[0] == '#') continue;
            const size_t tab = line.find('\t');
            if (tab == std::string::npos) {
                throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected word<TAB>synonyms");
            }
            const std::string word = line.substr(0, tab);
            std::vector<std::string> syns;
            std::istringstream ss(line.substr(tab + 1));
            std::string s;
            while (std::getline(ss, s, ',')) {
                if (!s.empty()) syns.push_back(s);
            }
            try {
                lex.add(word, std::move(syns));
            } catch (const std::invalid_argument& e) {
                throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + e.what());
            }
        }
        return lex;
    }

    void save(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw std::runtime_error("cannot open " + path + " for writing");
        for (const auto& [word, syns] : entries) {
            out << word << '\t';
            for (size_t i = 0; i < syns.size(); ++i) out << (i ? "," : "") << syns[i];
            out << '\n';
        }
    }
};

struct AttackCandidate {
    TokenSequence original;
    TokenSequence perturbed;
    int gold = 0;
    std::vector<int> replaced_positions;  // ascending
    std::string victim_model_id;
    int prediction_before = 0;
    int prediction_after = 0;
    int source_index = -1;  // position in the source dataset
    std::string source_dataset;
    std::string original_text;
    std::string perturbed_text;
};

// the sample with token i removed, gap closed, padding restored at the end
inline TokenSequence delete_token(const TokenSequence& seq, int i) {
    if (i < 0 || i >= seq.length()) {
        throw std::invalid_argument("delete_token: position " + std::to_string(i) + " outside sequence");
    }
    TokenSequence out = seq;
    out.ids.erase(out.ids.begin() + i);
    out.ids.push_back(kPadId);
    out.attn_mask.erase(out.attn_mask.begin() + i);
    out.attn_mask.push_back(0);
    return out;
}

namespace detail {

template <class T>
double gold_probability(const ModelBundle<T>& model, const TokenSequence& seq, int gold) {
    return predict(model, seq).second[static_cast<size_t>(gold)];
}

}  // namespace detail

// How much each token props up the gold-label probability: score[i] =
// p(gold|X) - p(gold|X without token i). [CLS] and padding get -inf so they
// are never chosen for substitution.
template <class T>
std::vector<double> importance_scores(const ModelBundle<T>& model, const TokenSequence& sample) {
    if (content_positions(sample).empty()) {
        throw std::invalid_argument("importance_scores: sample has no content tokens");
    }
    const double base = detail::gold_probability(model, sample, sample.label);
    std::vector<double> scores(static_cast<size_t>(sample.length()),
                               -std::numeric_limits<double>::infinity());
    for (int i = 0; i < sample.length(); ++i) {
        if (sample.ids[static_cast<size_t>(i)] == kClsId || sample.attn_mask[static_cast<size_t>(i)] == 0) {
            continue;
        }
        scores[static_cast<size_t>(i)] = base - detail::gold_probability(model, delete_token(sample, i), sample.label);
    }
    return scores;
}

// Greedy synonym-substitution attack. Visits tokens by descending importance
// (ties to the lower position); at each, keeps the lexicon synonym that most
// reduces the gold-label probability; stops at a prediction flip or when
// ceil(budget * content length) replacements are spent. Only originals the
// model classifies correctly are attacked; misclassified ones return nothing,
// as do samples no substitution manages to flip.
template <class T>
std::optional<AttackCandidate> attack_sample(const ModelBundle<T>& model, const TokenSequence& sample,
                                             const SynonymLexicon& lexicon, const Vocabulary& vocab,
                                             double budget = 0.15) {
    if (!(budget > 0.0 && budget <= 1.0)) {
        throw std::invalid_argument("attack_sample: budget must be in (0, 1]");
    }
    auto [pred_before, probs] = predict(model, sample);
    if (pred_before != sample.label) return std::nullopt;

    const int content = static_cast<int>(content_positions(sample).size());
    if (content == 0) return std::nullopt;
    const int max_replacements = ceil_fraction(budget, content);

    std::vector<double> scores = importance_scores(model, sample);
    std::vector<int> visit_order;
    for (int i = 0; i < sample.length(); ++i) {
        if (std::isfinite(scores[static_cast<size_t>(i)])) visit_order.push_back(i);
    }
    std::stable_sort(visit_order.begin(), visit_order.end(), [&scores](int a, int b) {
        if (scores[static_cast<size_t>(a)] != scores[static_cast<size_t>(b)]) {
            return scores[static_cast<size_t>(a)] > scores[static_cast<size_t>(b)];
        }
        return a < b;
    });

    TokenSequence current = sample;
    double p_gold = probs[static_cast<size_t>(sample.label)];
    int pred_current = pred_before;
    std::vector<int> replaced;

    for (int pos : visit_order) {
        if (static_cast<int>(replaced.size()) >= max_replacements) break;
        const int id = current.ids[static_cast<size_t>(pos)];
        if (id == kUnkId || id == kSepId) continue;
        const std::vector<std::string>* syns = lexicon.find(vocab.token(id));
        if (!syns) continue;

        double best_p = p_gold;
        int best_id = -1, best_pred = pred_current;
        for (const auto& syn : *syns) {
            const int sid = vocab.id(syn);
            if (sid == kUnkId || sid == id) continue;  // out-of-vocabulary synonyms are skipped
            TokenSequence trial = current;
            trial.ids[static_cast<size_t>(pos)] = sid;
            auto [pred_t, probs_t] = predict(model, trial);
            const double p = probs_t[static_cast<size_t>(sample.label)];
            if (p < best_p) {
                best_p = p;
                best_id = sid;
                best_pred = pred_t;
            }
        }
        if (best_id < 0) continue;
        current.ids[static_cast<size_t>(pos)] = best_id;
        p_gold = best_p;
        pred_current = best_pred;
        replaced.push_back(pos);
        if (pred_current != pred_before) break;
    }

    if (pred_current == pred_before) return std::nullopt;
    std::sort(replaced.begin(), replaced.end());
    AttackCandidate c;
    c.original = sample;
    c.perturbed = current;
    c.gold = sample.label;
    c.replaced_positions = std::move(replaced);
    c.victim_model_id = model.id;
    c.prediction_before = pred_before;
    c.prediction_after = pred_current;
    c.original_text = detokenize(sample, vocab);
    c.perturbed_text = detokenize(current, vocab);
    return c;
}

struct AttackRun {
    std::vector<AttackCandidate> candidates;  // in source order
    std::vector<char> success;                // one flag per source sample
    int attempted = 0;

    int flipped() const { return static_cast<int>(candidates.size()); }
};

template <class T>
AttackRun attack_dataset(const ModelBundle<T>& model, const std::vector<TokenSequence>& data,
                         const SynonymLexicon& lexicon, const Vocabulary& vocab, double budget = 0.15,
                         const std::string& dataset_name = "") {
    AttackRun run;
    run.success.reserve(data.size());
    for (size_t i = 0; i < data.size(); ++i) {
        std::optional<AttackCandidate> c = attack_sample(model, data[i], lexicon, vocab, budget);
        run.success.push_back(c.has_value() ? 1 : 0);
        ++run.attempted;
        if (c) {
            c->source_index = static_cast<int>(i);
            c->source_dataset = dataset_name;
            run.candidates.push_back(std::move(*c));
        }
    }
    return run;
}

}  // namespace kdlab
