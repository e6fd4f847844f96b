#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "kdlab/model.hpp"
#include "kdlab/optim.hpp"
#include "kdlab/rng.hpp"
#include "kdlab/sequence.hpp"
#include "kdlab/tensor.hpp"

namespace kdlab {

struct ClassifierTrainConfig {
    double lr = 1e-3;
    int epochs = 10;
    int batch_size = 16;
    uint64_t seed = 42;

    void validate() const {
        if (lr <= 0) throw std::invalid_argument("classifier training: lr must be positive");
        if (epochs < 0) throw std::invalid_argument("classifier training: negative epoch budget");
        if (batch_size < 1) throw std::invalid_argument("classifier training: batch_size must be >= 1");
    }
};

struct EpochStats {
    int epoch = 0;
    double mean_loss = 0;
    double accuracy = 0;
};

namespace detail {

inline void check_labels(const std::vector<TokenSequence>& data, int n_classes) {
    if (data.empty()) throw std::invalid_argument("training data is empty");
    for (size_t i = 0; i < data.size(); ++i) {
        const int y = data[i].label;
        if (y < 0 || y >= n_classes) {
            throw std::invalid_argument("sample " + std::to_string(i) + " has label " +
                                        std::to_string(y) + ", expected [0, " +
                                        std::to_string(n_classes) + ")");
        }
    }
}

}  // namespace detail

// Cross-entropy fine-tuning of a classifier in place. One optimizer step per
// batch, data reshuffled each epoch from the model's data substream. An epoch
// budget of zero leaves the parameters untouched.
template <class T>
std::vector<EpochStats> fit_classifier(ModelBundle<T>& model, const std::vector<TokenSequence>& data,
                                       const ClassifierTrainConfig& cfg) {
    cfg.validate();
    if (model.role == ModelRole::Generator) {
        throw std::invalid_argument("fit_classifier: generator models have no classification head");
    }
    detail::check_labels(data, model.config.n_classes);
    model.set_trainable(true);

    AdamState<T> opt;
    opt.lr = static_cast<T>(cfg.lr);
    Rng data_rng = substream(cfg.seed, std::string("data.") + role_name(model.role));

    std::vector<int> order(data.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

    std::vector<EpochStats> log;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        data_rng.shuffle(order);
        double loss_sum = 0;
        int correct = 0;
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
            const size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
            zero_grads(model.params);
            Tensor<T> acc;
            for (size_t i = start; i < end; ++i) {
                const TokenSequence& s = data[static_cast<size_t>(order[i])];
                EncodeOut<T> out = encode(model, s);
                const auto& lg = out.logits.data();
                int best = 0;
                for (size_t j = 1; j < lg.size(); ++j)
                    if (lg[j] > lg[static_cast<size_t>(best)]) best = static_cast<int>(j);
                if (best == s.label) ++correct;
                Tensor<T> ce = cross_entropy_loss(out.logits, s.label);
                acc = acc.defined() ? add(acc, ce) : ce;
            }
            Tensor<T> loss = scale(acc, T(1) / static_cast<T>(end - start));
            loss.backward();
            adam_step(model.params, opt);
            loss_sum += static_cast<double>(loss.item()) * static_cast<double>(end - start);
        }
        log.push_back({epoch, loss_sum / static_cast<double>(data.size()),
                       static_cast<double>(correct) / static_cast<double>(data.size())});
    }
    return log;
}

// Initializes a fresh classifier from the role's init substream and trains it.
template <class T>
std::pair<ModelBundle<T>, std::vector<EpochStats>> train_classifier(
    const ModelConfig& arch, ModelRole role, const std::string& id,
    const std::vector<TokenSequence>& data, const ClassifierTrainConfig& cfg) {
    Rng init_rng = substream(cfg.seed, std::string("init.") + role_name(role));
    ModelBundle<T> model = init_model<T>(arch, role, id, init_rng);
    std::vector<EpochStats> log = fit_classifier(model, data, cfg);
    return {std::move(model), std::move(log)};
}

// dev-set accuracy of a frozen classifier
template <class T>
double eval_accuracy(const ModelBundle<T>& model, const std::vector<TokenSequence>& data) {
    if (data.empty()) throw std::invalid_argument("evaluation data is empty");
    int correct = 0;
    for (const auto& s : data) {
        if (predict(model, s).first == s.label) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

}  // namespace kdlab
