#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace kdlab {

namespace detail {

inline void check_pairs(size_t np, size_t ng, const char* what) {
    if (np == 0) throw std::invalid_argument(std::string(what) + ": empty input");
    if (np != ng) {
        throw std::invalid_argument(std::string(what) + ": " + std::to_string(np) +
                                    " predictions vs " + std::to_string(ng) + " golds");
    }
}

}  // namespace detail

inline double accuracy(const std::vector<int>& preds, const std::vector<int>& golds) {
    detail::check_pairs(preds.size(), golds.size(), "accuracy");
    size_t correct = 0;
    for (size_t i = 0; i < preds.size(); ++i)
        if (preds[i] == golds[i]) ++correct;
    return static_cast<double>(correct) / static_cast<double>(preds.size());
}

// 2PR/(P+R) with the degenerate case pinned to 0
inline double f1_binary(const std::vector<int>& preds, const std::vector<int>& golds,
                        int positive_class = 1) {
    detail::check_pairs(preds.size(), golds.size(), "f1_binary");
    double tp = 0, fp = 0, fn = 0;
    for (size_t i = 0; i < preds.size(); ++i) {
        const bool p = preds[i] == positive_class;
        const bool g = golds[i] == positive_class;
        if (p && g) ++tp;
        else if (p && !g) ++fp;
        else if (!p && g) ++fn;
    }
    const double precision = tp + fp > 0 ? tp / (tp + fp) : 0.0;
    const double recall = tp + fn > 0 ? tp / (tp + fn) : 0.0;
    if (precision + recall == 0.0) return 0.0;
    return 2.0 * precision * recall / (precision + recall);
}

// Matthews correlation for binary labels; 0 when any marginal is empty
inline double mcc(const std::vector<int>& preds, const std::vector<int>& golds) {
    detail::check_pairs(preds.size(), golds.size(), "mcc");
    double tp = 0, tn = 0, fp = 0, fn = 0;
    for (size_t i = 0; i < preds.size(); ++i) {
        if (preds[i] != 0 && preds[i] != 1)
            throw std::invalid_argument("mcc: prediction " + std::to_string(preds[i]) + " is not binary");
        if (golds[i] != 0 && golds[i] != 1)
            throw std::invalid_argument("mcc: gold " + std::to_string(golds[i]) + " is not binary");
        if (preds[i] == 1 && golds[i] == 1) ++tp;
        else if (preds[i] == 0 && golds[i] == 0) ++tn;
        else if (preds[i] == 1 && golds[i] == 0) ++fp;
        else ++fn;
    }
    const double d1 = tp + fp, d2 = tp + fn, d3 = tn + fp, d4 = tn + fn;
    if (d1 == 0 || d2 == 0 || d3 == 0 || d4 == 0) return 0.0;
    return (tp * tn - fp * fn) / std::sqrt(d1 * d2 * d3 * d4);
}

inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    detail::check_pairs(a.size(), b.size(), "pearson");
    const size_t n = a.size();
    if (n < 2) throw std::invalid_argument("pearson: needs at least 2 pairs");
    double ma = 0, mb = 0;
    for (size_t i = 0; i < n; ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= static_cast<double>(n);
    mb /= static_cast<double>(n);
    double sab = 0, saa = 0, sbb = 0;
    for (size_t i = 0; i < n; ++i) {
        const double da = a[i] - ma, db = b[i] - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if (saa == 0 || sbb == 0) throw std::invalid_argument("pearson: zero variance");
    // rounding can push perfectly correlated data a hair past +/-1
    return std::max(-1.0, std::min(1.0, sab / std::sqrt(saa * sbb)));
}

// metric dispatch by dataset-assigned name
inline double compute_metric(const std::string& name, const std::vector<int>& preds,
                             const std::vector<int>& golds) {
    if (name == "accuracy") return accuracy(preds, golds);
    if (name == "f1") return f1_binary(preds, golds);
    if (name == "mcc") return mcc(preds, golds);
    if (name == "pearson") {
        std::vector<double> a(preds.begin(), preds.end()), b(golds.begin(), golds.end());
        return pearson(a, b);
    }
    throw std::invalid_argument("unknown metric: " + name);
}

struct EvalCell {
    std::string model_id;
    std::string dataset;
    std::string metric;
    double value = 0;
    int n = 0;  // samples evaluated
};

// Per-(model, dataset) metric values plus the two averaging modes: the plain
// mean over datasets and the sample-size-weighted mean.
struct EvalReport {
    std::vector<EvalCell> cells;

    std::vector<std::string> model_ids() const {
        std::vector<std::string> ids;
        for (const auto& c : cells)
            if (std::find(ids.begin(), ids.end(), c.model_id) == ids.end()) ids.push_back(c.model_id);
        return ids;
    }

    double average_by_dataset(const std::string& model_id) const {
        double sum = 0;
        int k = 0;
        for (const auto& c : cells)
            if (c.model_id == model_id) {
                sum += c.value;
                ++k;
            }
        if (k == 0) throw std::invalid_argument("no cells for model " + model_id);
        return sum / k;
    }

    double average_by_sample_size(const std::string& model_id) const {
        double sum = 0;
        long total = 0;
        for (const auto& c : cells)
            if (c.model_id == model_id) {
                sum += c.value * c.n;
                total += c.n;
            }
        if (total == 0) throw std::invalid_argument("no samples for model " + model_id);
        return sum / static_cast<double>(total);
    }

    void save_csv(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw std::runtime_error("cannot open " + path + " for writing");
        out << "model,dataset,metric,value,n\n";
        char buf[64];
        for (const auto& c : cells) {
            std::snprintf(buf, sizeof buf, "%.17g", c.value);
            out << c.model_id << ',' << c.dataset << ',' << c.metric << ',' << buf << ',' << c.n << '\n';
        }
    }

    static EvalReport load_csv(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("cannot open " + path);
        EvalReport rep;
        std::string line;
        size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (lineno == 1 || line.empty()) continue;  // header
            std::istringstream ss(line);
            EvalCell c;
            std::string value_s, n_s;
            if (!std::getline(ss, c.model_id, ',') || !std::getline(ss, c.dataset, ',') ||
                !std::getline(ss, c.metric, ',') || !std::getline(ss, value_s, ',') ||
                !std::getline(ss, n_s)) {
                throw std::runtime_error(path + ":" + std::to_string(lineno) + ": malformed row");
            }
            c.value = std::stod(value_s);
            c.n = std::stoi(n_s);
            rep.cells.push_back(std::move(c));
        }
        return rep;
    }

    std::string to_markdown() const {
        std::ostringstream out;
        out << "| model | dataset | metric | value | n |\n";
        out << "|---|---|---|---|---|\n";
        char buf[32];
        for (const auto& c : cells) {
            std::snprintf(buf, sizeof buf, "%.4f", c.value);
            out << "| " << c.model_id << " | " << c.dataset << " | " << c.metric << " | " << buf
                << " | " << c.n << " |\n";
        }
        for (const auto& id : model_ids()) {
            std::snprintf(buf, sizeof buf, "%.4f", average_by_dataset(id));
            out << "| " << id << " | (average by dataset) | | " << buf << " | |\n";
            std::snprintf(buf, sizeof buf, "%.4f", average_by_sample_size(id));
            out << "| " << id << " | (average by sample size) | | " << buf << " | |\n";
        }
        return out.str();
    }
};

}  // namespace kdlab
