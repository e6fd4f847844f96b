#pragma once

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "kdlab/attack.hpp"
#include "kdlab/metrics.hpp"
#include "kdlab/model.hpp"

namespace kdlab {

struct QualityThresholds {
    double lambda_down = 0.5;
    double lambda_up = 0.99;

    void validate() const {
        if (!(lambda_down >= -1.0 && lambda_up <= 1.0 && lambda_down < lambda_up)) {
            throw std::invalid_argument("quality thresholds: need -1 <= lambda_down < lambda_up <= 1");
        }
    }

    bool keeps(double score) const { return score > lambda_down && score <= lambda_up; }
};

// Cosine similarity between the model's sequence representations of the
// original and the perturbed sample. Scored by the model that generated the
// perturbation.
template <class T>
double quality_score(const ModelBundle<T>& model, const TokenSequence& original,
                     const TokenSequence& perturbed) {
    const Tensor<T> ha = encode(model, original).cls_hidden;
    const Tensor<T> hb = encode(model, perturbed).cls_hidden;
    const auto& a = ha.data();
    const auto& b = hb.data();
    double dot = 0, na = 0, nb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += static_cast<double>(a[i]) * static_cast<double>(b[i]);
        na += static_cast<double>(a[i]) * static_cast<double>(a[i]);
        nb += static_cast<double>(b[i]) * static_cast<double>(b[i]);
    }
    if (na == 0 || nb == 0) {
        throw std::runtime_error("quality_score: zero-norm hidden state from model " + model.id);
    }
    // sqrt of the product keeps the self-comparison at exactly 1
    return std::max(-1.0, std::min(1.0, dot / std::sqrt(na * nb)));
}

struct ScoredCandidate {
    AttackCandidate candidate;
    double score = 0;
};

// keeps exactly the scores in (lambda_down, lambda_up], order preserved
inline std::vector<ScoredCandidate> filter_candidates(const std::vector<ScoredCandidate>& scored,
                                                      const QualityThresholds& th) {
    th.validate();
    std::vector<ScoredCandidate> kept;
    for (const auto& sc : scored)
        if (th.keeps(sc.score)) kept.push_back(sc);
    return kept;
}

// the K highest-scoring candidates; ties broken by source index ascending
inline std::vector<ScoredCandidate> select_top_k(std::vector<ScoredCandidate> filtered, int k) {
    if (k < 1) throw std::invalid_argument("select_top_k: K must be >= 1");
    std::stable_sort(filtered.begin(), filtered.end(), [](const ScoredCandidate& a, const ScoredCandidate& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.candidate.source_index < b.candidate.source_index;
    });
    if (static_cast<int>(filtered.size()) > k) filtered.resize(static_cast<size_t>(k));
    return filtered;
}

struct UAFTestSet {
    std::vector<ScoredCandidate> samples;  // provenance in candidate.victim_model_id
    std::map<std::string, int> per_model_counts;
    QualityThresholds thresholds;
    int k = 0;
    double budget = 0.15;
    std::string source_dataset;
    uint64_t seed = 0;
    std::vector<std::string> warnings;

    void save(const std::string& samples_path, const std::string& manifest_path,
              const std::map<std::string, uint64_t>& model_checksums) const {
        std::ofstream out(samples_path);
        if (!out) throw std::runtime_error("cannot open " + samples_path + " for writing");
        for (const auto& sc : samples) {
            const auto& c = sc.candidate;
            nlohmann::json j{{"source_dataset", c.source_dataset},
                             {"source_index", c.source_index},
                             {"original_text", c.original_text},
                             {"perturbed_text", c.perturbed_text},
                             {"gold_label", c.gold},
                             {"source_model_id", c.victim_model_id},
                             {"quality_score", sc.score},
                             {"replaced_positions", c.replaced_positions}};
            out << j.dump() << '\n';
        }
        nlohmann::json man{{"lambda_down", thresholds.lambda_down},
                           {"lambda_up", thresholds.lambda_up},
                           {"k", k},
                           {"budget", budget},
                           {"seed", seed},
                           {"source_dataset", source_dataset},
                           {"per_model_counts", per_model_counts},
                           {"warnings", warnings}};
        nlohmann::json sums = nlohmann::json::object();
        char buf[32];
        for (const auto& [id, sum] : model_checksums) {
            std::snprintf(buf, sizeof buf, "%016" PRIx64, sum);
            sums[id] = buf;
        }
        man["model_checksums"] = sums;
        std::ofstream mout(manifest_path);
        if (!mout) throw std::runtime_error("cannot open " + manifest_path + " for writing");
        mout << man.dump(2) << '\n';
    }

    // reads back the sample records; token sequences are not stored and must
    // be re-tokenized by the consumer
    static UAFTestSet load_samples(const std::string& samples_path) {
        std::ifstream in(samples_path);
        if (!in) throw std::runtime_error("cannot open " + samples_path);
        UAFTestSet set;
        std::string line;
        size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (line.empty()) continue;
            nlohmann::json j;
            try {
                j = nlohmann::json::parse(line);
            } catch (const nlohmann::json::parse_error& e) {
                throw std::runtime_error(samples_path + ":" + std::to_string(lineno) + ": " + e.what());
            }
            ScoredCandidate sc;
            sc.candidate.source_dataset = j.at("source_dataset").get<std::string>();
            sc.candidate.source_index = j.at("source_index").get<int>();
            sc.candidate.original_text = j.at("original_text").get<std::string>();
            sc.candidate.perturbed_text = j.at("perturbed_text").get<std::string>();
            sc.candidate.gold = j.at("gold_label").get<int>();
            sc.candidate.victim_model_id = j.at("source_model_id").get<std::string>();
            sc.score = j.at("quality_score").get<double>();
            sc.candidate.replaced_positions = j.at("replaced_positions").get<std::vector<int>>();
            set.samples.push_back(std::move(sc));
            set.per_model_counts[set.samples.back().candidate.victim_model_id] += 1;
        }
        return set;
    }
};

// Per-model pipeline: attack every source sample, score the flips with the
// generating model, keep the quality window, take the top K; pool everything
// with provenance. Duplicate perturbations from different models stay.
template <class T>
UAFTestSet build_uaf_set(const std::vector<const ModelBundle<T>*>& models,
                         const std::vector<TokenSequence>& data, const std::string& dataset_name,
                         const SynonymLexicon& lexicon, const Vocabulary& vocab,
                         const QualityThresholds& th, int k, double budget, uint64_t seed) {
    th.validate();
    if (k < 1) throw std::invalid_argument("build_uaf_set: K must be >= 1");
    if (models.empty()) throw std::invalid_argument("build_uaf_set: no models given");
    UAFTestSet set;
    set.thresholds = th;
    set.k = k;
    set.budget = budget;
    set.source_dataset = dataset_name;
    set.seed = seed;
    if (models.size() < 2) {
        set.warnings.push_back("only one model given; the pooled set is not cross-model");
    }
    for (const auto* m : models) {
        AttackRun run = attack_dataset(*m, data, lexicon, vocab, budget, dataset_name);
        std::vector<ScoredCandidate> scored;
        scored.reserve(run.candidates.size());
        for (auto& c : run.candidates) {
            ScoredCandidate sc;
            sc.score = quality_score(*m, c.original, c.perturbed);
            sc.candidate = std::move(c);
            scored.push_back(std::move(sc));
        }
        std::vector<ScoredCandidate> picked = select_top_k(filter_candidates(scored, th), k);
        if (picked.empty()) {
            set.warnings.push_back("model " + m->id + " contributed no candidates");
        }
        set.per_model_counts[m->id] = static_cast<int>(picked.size());
        for (auto& sc : picked) set.samples.push_back(std::move(sc));
    }
    return set;
}

// Every model against every pooled sample, grouped by source dataset. Pooled
// sequences are evaluated against their copied gold labels.
template <class T>
EvalReport evaluate_on_uaf(const std::vector<const ModelBundle<T>*>& models, const UAFTestSet& set,
                           const std::string& metric) {
    EvalReport rep;
    if (set.samples.empty()) return rep;
    for (const auto* m : models) {
        if (m->config.n_classes != models.front()->config.n_classes) {
            throw std::invalid_argument("evaluate_on_uaf: model " + m->id + " has a different class space");
        }
    }
    std::vector<std::string> groups;
    for (const auto& sc : set.samples) {
        if (std::find(groups.begin(), groups.end(), sc.candidate.source_dataset) == groups.end()) {
            groups.push_back(sc.candidate.source_dataset);
        }
    }
    for (const auto* m : models) {
        for (const auto& g : groups) {
            std::vector<int> preds, golds;
            for (const auto& sc : set.samples) {
                if (sc.candidate.source_dataset != g) continue;
                if (sc.candidate.perturbed.length() == 0) {
                    throw std::invalid_argument("evaluate_on_uaf: sample without token data (load a set via "
                                                "tokenized reconstruction first)");
                }
                preds.push_back(predict(*m, sc.candidate.perturbed).first);
                golds.push_back(sc.candidate.gold);
            }
            EvalCell cell;
            cell.model_id = m->id;
            cell.dataset = g;
            cell.metric = metric;
            cell.value = compute_metric(metric, preds, golds);
            cell.n = static_cast<int>(preds.size());
            rep.cells.push_back(std::move(cell));
        }
    }
    return rep;
}

}  // namespace kdlab
