#pragma once

#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "kdlab/sequence.hpp"
#include "kdlab/vocab.hpp"

namespace kdlab {

struct RawExample {
    int label = 0;
    std::string text_a;
    std::string text_b;  // empty for single-sentence tasks

    bool is_pair() const { return !text_b.empty(); }
};

// A labeled text dataset with its task metadata. File format: UTF-8 TSV with
// a header line `#task=<name>\tclasses=<n>\tmetric=<name>` followed by rows
// `label\ttext[\ttext_b]`.
struct LabeledDataset {
    std::string task;
    int n_classes = 2;
    std::string metric = "accuracy";
    std::vector<RawExample> examples;

    void validate() const {
        if (task.empty()) throw std::invalid_argument("dataset: empty task name");
        if (n_classes < 2) throw std::invalid_argument("dataset " + task + ": needs at least 2 classes");
        bool any_pair = false, any_single = false;
        for (size_t i = 0; i < examples.size(); ++i) {
            const auto& e = examples[i];
            if (e.label < 0 || e.label >= n_classes) {
                throw std::invalid_argument("dataset " + task + ": example " + std::to_string(i) +
                                            " has label " + std::to_string(e.label) + ", expected [0, " +
                                            std::to_string(n_classes) + ")");
            }
            if (e.text_a.empty()) {
                throw std::invalid_argument("dataset " + task + ": example " + std::to_string(i) +
                                            " has empty text");
            }
            (e.is_pair() ? any_pair : any_single) = true;
        }
        if (any_pair && any_single) {
            throw std::invalid_argument("dataset " + task + ": mixes single-sentence and pair examples");
        }
    }

    bool is_pair_task() const { return !examples.empty() && examples.front().is_pair(); }

    static LabeledDataset load_tsv(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("cannot open dataset " + path);
        LabeledDataset ds;
        std::string line;
        size_t lineno = 0;
        auto fail = [&path, &lineno](const std::string& msg) {
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + msg);
        };
        while (std::getline(in, line)) {
            ++lineno;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (line.empty()) continue;
            std::vector<std::string> cols;
            std::istringstream ss(line);
            std::string col;
            while (std::getline(ss, col, '\t')) cols.push_back(col);
            if (lineno == 1) {
                if (line[0] != '#') fail("missing header line (expected #task=...\\tclasses=...\\tmetric=...)");
                cols[0].erase(0, 1);
                for (const auto& kv : cols) {
                    const size_t eq = kv.find('=');
                    if (eq == std::string::npos) fail("malformed header field '" + kv + "'");
                    const std::string key = kv.substr(0, eq), val = kv.substr(eq + 1);
                    if (key == "task") ds.task = val;
                    else if (key == "classes") ds.n_classes = std::stoi(val);
                    else if (key == "metric") ds.metric = val;
                    else fail("unknown header field '" + key + "'");
                }
                continue;
            }
            if (cols.size() != 2 && cols.size() != 3) {
                fail("expected 2 or 3 tab-separated columns, got " + std::to_string(cols.size()));
            }
            RawExample e;
            try {
                size_t used = 0;
                e.label = std::stoi(cols[0], &used);
                if (used != cols[0].size()) throw std::invalid_argument("");
            } catch (const std::exception&) {
                fail("label '" + cols[0] + "' is not an integer");
            }
            if (e.label < 0 || e.label >= ds.n_classes) {
                fail("label " + std::to_string(e.label) + " outside [0, " + std::to_string(ds.n_classes) + ")");
            }
            e.text_a = cols[1];
            if (cols.size() == 3) e.text_b = cols[2];
            if (e.text_a.empty()) fail("empty text column");
            ds.examples.push_back(std::move(e));
        }
        if (ds.task.empty()) throw std::runtime_error(path + ": no header line found");
        ds.validate();
        return ds;
    }

    void save_tsv(const std::string& path) const {
        validate();
        std::ofstream out(path);
        if (!out) throw std::runtime_error("cannot open " + path + " for writing");
        out << "#task=" << task << "\tclasses=" << n_classes << "\tmetric=" << metric << '\n';
        for (const auto& e : examples) {
            out << e.label << '\t' << e.text_a;
            if (e.is_pair()) out << '\t' << e.text_b;
            out << '\n';
        }
    }
};

// vocabulary over every word of every example across the given datasets
inline Vocabulary build_vocab(const std::vector<const LabeledDataset*>& datasets) {
    std::set<std::string> words;
    for (const auto* ds : datasets) {
        for (const auto& e : ds->examples) {
            for (auto& w : split_words(e.text_a)) words.insert(std::move(w));
            if (e.is_pair())
                for (auto& w : split_words(e.text_b)) words.insert(std::move(w));
        }
    }
    return Vocabulary::from_tokens(words);
}

inline std::vector<TokenSequence> tokenize_dataset(const LabeledDataset& ds, const Vocabulary& vocab,
                                                   int max_len) {
    std::vector<TokenSequence> out;
    out.reserve(ds.examples.size());
    for (const auto& e : ds.examples) {
        TokenSequence seq = e.is_pair() ? tokenize_pair(e.text_a, e.text_b, vocab, max_len, e.label)
                                        : tokenize(e.text_a, vocab, max_len, e.label);
        out.push_back(std::move(seq));
    }
    return out;
}

}  // namespace kdlab
