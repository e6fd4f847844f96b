#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "kdlab/model.hpp"
#include "kdlab/optim.hpp"
#include "kdlab/rng.hpp"
#include "kdlab/sequence.hpp"
#include "kdlab/tensor.hpp"
#include "kdlab/train.hpp"

namespace kdlab {

enum class DistillMethod { Finetune, Vanilla, Annealing, Mate, Comkd };

inline const char* method_name(DistillMethod m) {
    switch (m) {
        case DistillMethod::Finetune: return "finetune";
        case DistillMethod::Vanilla: return "vanilla";
        case DistillMethod::Annealing: return "annealing";
        case DistillMethod::Mate: return "mate";
        case DistillMethod::Comkd: return "comkd";
    }
    return "?";
}

inline DistillMethod method_from_name(const std::string& s) {
    if (s == "finetune") return DistillMethod::Finetune;
    if (s == "vanilla") return DistillMethod::Vanilla;
    if (s == "annealing") return DistillMethod::Annealing;
    if (s == "mate") return DistillMethod::Mate;
    if (s == "comkd") return DistillMethod::Comkd;
    throw std::invalid_argument("unknown distillation method: " + s);
}

struct DistillationConfig {
    DistillMethod method = DistillMethod::Comkd;
    int max_temperature = 10;  // annealing ceiling; temperature reaches 1 at this epoch
    int kd_epochs = 10;        // phase 1: distillation passes over the training data
    int ce_epochs = 10;        // phase 2: plain cross-entropy passes (0 for single-phase methods)
    int steps_per_cycle = 10;  // generator/student interleave cycle length
    int generator_steps = 3;   // leading steps of each cycle given to the generator
    double mask_ratio = 0.3;   // fraction of content tokens masked per sample; 0 disables perturbation
    double gumbel_tau = 1.0;
    double lr = 1e-3;
    double lr_generator = 1e-3;
    bool lr_decay = true;  // student lr decays linearly to zero over all student steps
    int batch_size = 16;
    uint64_t seed = 42;
    double vanilla_alpha = 0.5;        // weight on the hard-label loss
    double vanilla_temperature = 5.0;  // softening for the KL term

    bool uses_generator() const {
        return method == DistillMethod::Mate || method == DistillMethod::Comkd;
    }
    bool has_ce_phase() const {
        return method == DistillMethod::Annealing || method == DistillMethod::Mate ||
               method == DistillMethod::Comkd;
    }

    void validate() const {
        if (max_temperature < 1) throw std::invalid_argument("distill config: max_temperature must be >= 1");
        if (kd_epochs < 0 || ce_epochs < 0) throw std::invalid_argument("distill config: negative epoch budget");
        if (!has_ce_phase() && ce_epochs != 0) {
            throw std::invalid_argument(std::string("distill config: method ") + method_name(method) +
                                        " is single-phase, ce_epochs must be 0");
        }
        if (uses_generator()) {
            if (steps_per_cycle < 1) throw std::invalid_argument("distill config: steps_per_cycle must be >= 1");
            if (generator_steps < 0 || generator_steps >= steps_per_cycle) {
                throw std::invalid_argument("distill config: generator_steps must be in [0, steps_per_cycle)");
            }
        }
        if (!(mask_ratio >= 0.0 && mask_ratio <= 1.0)) {
            throw std::invalid_argument("distill config: mask_ratio must be in [0, 1]");
        }
        if (gumbel_tau <= 0) throw std::invalid_argument("distill config: gumbel_tau must be positive");
        if (lr <= 0 || lr_generator <= 0) throw std::invalid_argument("distill config: learning rates must be positive");
        if (batch_size < 1) throw std::invalid_argument("distill config: batch_size must be >= 1");
        if (!(vanilla_alpha >= 0.0 && vanilla_alpha <= 1.0)) {
            throw std::invalid_argument("distill config: vanilla_alpha must be in [0, 1]");
        }
        if (vanilla_temperature <= 0) throw std::invalid_argument("distill config: vanilla_temperature must be positive");
    }
};

// Annealing temperature for a 1-based epoch: ramps linearly, then holds at 1.
inline double temperature(int epoch, int max_temperature) {
    if (epoch < 1) throw std::invalid_argument("temperature: epoch numbering starts at 1");
    if (max_temperature < 1) throw std::invalid_argument("temperature: max_temperature must be >= 1");
    if (epoch < max_temperature) return static_cast<double>(epoch) / static_cast<double>(max_temperature);
    return 1.0;
}

struct StepRecord {
    int phase = 1;     // 1 distillation, 2 cross-entropy
    int epoch = 0;     // 1-based within its phase
    int step = 0;      // 1-based across the whole run, both step types
    std::string step_type;  // "student" or "generator"
    double t = 1.0;    // teacher-logit scaling in effect
    double loss = 0;   // objective value of this step
    double loss_adv = 0;
    double loss_kd = 0;
    double wall_ms = 0;
};

struct TrainingLog {
    std::vector<StepRecord> steps;

    // wall_ms stays in memory only, so identical-seed runs serialize to
    // identical bytes
    void save_jsonl(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw std::runtime_error("cannot open " + path + " for writing");
        for (const auto& r : steps) {
            nlohmann::json j{{"phase", r.phase},   {"epoch", r.epoch},
                             {"step", r.step},     {"type", r.step_type},
                             {"t", r.t},           {"loss", r.loss},
                             {"loss_adv", r.loss_adv}, {"loss_kd", r.loss_kd}};
            out << j.dump() << '\n';
        }
    }

    static TrainingLog load_jsonl(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("cannot open " + path);
        TrainingLog log;
        std::string line;
        size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (line.empty()) continue;
            nlohmann::json j;
            try {
                j = nlohmann::json::parse(line);
            } catch (const nlohmann::json::parse_error& e) {
                throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + e.what());
            }
            StepRecord r;
            r.phase = j.at("phase").get<int>();
            r.epoch = j.at("epoch").get<int>();
            r.step = j.at("step").get<int>();
            r.step_type = j.at("type").get<std::string>();
            r.t = j.at("t").get<double>();
            r.loss = j.at("loss").get<double>();
            r.loss_adv = j.at("loss_adv").get<double>();
            r.loss_kd = j.at("loss_kd").get<double>();
            log.steps.push_back(std::move(r));
        }
        return log;
    }

    // annealing temperatures of phase-1 epochs, in epoch order
    std::vector<double> phase1_temperatures() const {
        std::vector<double> ts;
        int last_epoch = 0;
        for (const auto& r : steps) {
            if (r.phase != 1 || r.step_type != "student") continue;
            if (r.epoch != last_epoch) {
                ts.push_back(r.t);
                last_epoch = r.epoch;
            }
        }
        return ts;
    }
};

struct StepLosses {
    double loss = 0;
    double adv = 0;
    double kd = 0;
};

// Perturbed copy of one sample: mask a fraction of content tokens, let the
// generator fill them with Gumbel-Softmax rows. Ratio zero is an exact
// one-hot passthrough that draws no randomness.
template <class T>
SoftSequence<T> perturb_sample(const ModelBundle<T>& gen, const TokenSequence& s, double mask_ratio,
                               double gumbel_tau, Rng& mask_rng, Rng& gumbel_rng) {
    if (mask_ratio == 0.0) return one_hot<T>(s, gen.config.vocab_size);
    auto [masked, positions] = mask_tokens(s, mask_ratio, mask_rng);
    return generator_fill(gen, masked, positions, static_cast<T>(gumbel_tau), gumbel_rng);
}

// Mean over the batch of MSE between teacher and student logits on perturbed
// inputs. The generator takes ascent steps on this quantity.
template <class T>
Tensor<T> generator_objective(const ModelBundle<T>& teacher, const ModelBundle<T>& student,
                              const ModelBundle<T>& gen, const std::vector<TokenSequence>& batch,
                              const DistillationConfig& cfg, Rng& mask_rng, Rng& gumbel_rng) {
    if (batch.empty()) throw std::invalid_argument("generator_objective: empty batch");
    Tensor<T> acc;
    for (const auto& s : batch) {
        SoftSequence<T> xp = perturb_sample(gen, s, cfg.mask_ratio, cfg.gumbel_tau, mask_rng, gumbel_rng);
        Tensor<T> m = mse_loss(encode(teacher, xp).logits, encode(student, xp).logits);
        acc = acc.defined() ? add(acc, m) : m;
    }
    return scale(acc, T(1) / static_cast<T>(batch.size()));
}

// One gradient-ascent step of the generator against the frozen teacher and
// current student. Returns the objective value before the update.
template <class T>
double adversarial_generator_step(const ModelBundle<T>& teacher, const ModelBundle<T>& student,
                                  ModelBundle<T>& gen, const std::vector<TokenSequence>& batch,
                                  const DistillationConfig& cfg, Rng& mask_rng, Rng& gumbel_rng,
                                  AdamState<T>& opt) {
    zero_grads(gen.params);
    Tensor<T> obj = generator_objective(teacher, student, gen, batch, cfg, mask_rng, gumbel_rng);
    if (obj.requires_grad()) scale(obj, T(-1)).backward();
    adam_step(gen.params, opt);
    return static_cast<double>(obj.item());
}

// One student update on logit-matching losses. With a generator the loss is
// the mean of the adversarial and original-data halves; without one it is the
// original-data half alone. Teacher logits are scaled by the annealing
// temperature in both halves. A zero mask ratio makes the perturbed input the
// input itself, so both halves are one quantity and it is computed once; this
// keeps the degenerate run arithmetically identical to plain annealing.
template <class T>
StepLosses kd_student_step(const ModelBundle<T>& teacher, ModelBundle<T>& student,
                           const ModelBundle<T>* gen, const std::vector<TokenSequence>& batch,
                           double t, const DistillationConfig& cfg, Rng& mask_rng, Rng& gumbel_rng,
                           AdamState<T>& opt) {
    if (batch.empty()) throw std::invalid_argument("kd_student_step: empty batch");
    zero_grads(student.params);
    const T tt = static_cast<T>(t);
    const bool adv_half = gen != nullptr && cfg.mask_ratio > 0.0;
    Tensor<T> adv_acc, kd_acc;
    for (const auto& s : batch) {
        if (adv_half) {
            SoftSequence<T> xp = perturb_sample(*gen, s, cfg.mask_ratio, cfg.gumbel_tau, mask_rng, gumbel_rng);
            Tensor<T> a = mse_loss(scale(encode(teacher, xp).logits, tt), encode(student, xp).logits);
            adv_acc = adv_acc.defined() ? add(adv_acc, a) : a;
        }
        Tensor<T> k = mse_loss(scale(encode(teacher, s).logits, tt), encode(student, s).logits);
        kd_acc = kd_acc.defined() ? add(kd_acc, k) : k;
    }
    const T inv_b = T(1) / static_cast<T>(batch.size());
    Tensor<T> kd = scale(kd_acc, inv_b);
    Tensor<T> loss = kd;
    Tensor<T> adv;
    if (adv_half) {
        adv = scale(adv_acc, inv_b);
        loss = scale(add(adv, kd), T(0.5));
    }
    loss.backward();
    adam_step(student.params, opt);
    const double kd_val = static_cast<double>(kd.item());
    const double adv_val = adv_half ? static_cast<double>(adv.item()) : (gen ? kd_val : 0.0);
    return {static_cast<double>(loss.item()), adv_val, kd_val};
}

// One plain cross-entropy student update; shared by the fine-tuning method,
// the hard-label end of vanilla distillation, and the second phase.
template <class T>
StepLosses ce_student_step(ModelBundle<T>& student, const std::vector<TokenSequence>& batch,
                           AdamState<T>& opt) {
    if (batch.empty()) throw std::invalid_argument("ce_student_step: empty batch");
    zero_grads(student.params);
    Tensor<T> acc;
    for (const auto& s : batch) {
        Tensor<T> ce = cross_entropy_loss(encode(student, s).logits, s.label);
        acc = acc.defined() ? add(acc, ce) : ce;
    }
    Tensor<T> loss = scale(acc, T(1) / static_cast<T>(batch.size()));
    loss.backward();
    adam_step(student.params, opt);
    return {static_cast<double>(loss.item()), 0.0, 0.0};
}

// One student update on hard labels mixed with temperature-softened teacher
// agreement. Fine-tuning, and an alpha of exactly 1, short-circuit to the
// plain CE step and never touch the teacher.
template <class T>
StepLosses vanilla_student_step(const ModelBundle<T>& teacher, ModelBundle<T>& student,
                                const std::vector<TokenSequence>& batch,
                                const DistillationConfig& cfg, AdamState<T>& opt) {
    if (cfg.method == DistillMethod::Finetune || cfg.vanilla_alpha == 1.0) {
        return ce_student_step(student, batch, opt);
    }
    if (batch.empty()) throw std::invalid_argument("vanilla_student_step: empty batch");
    zero_grads(student.params);
    const T tau = static_cast<T>(cfg.vanilla_temperature);
    Tensor<T> ce_acc, kl_acc;
    for (const auto& s : batch) {
        Tensor<T> s_logits = encode(student, s).logits;
        Tensor<T> ce = cross_entropy_loss(s_logits, s.label);
        ce_acc = ce_acc.defined() ? add(ce_acc, ce) : ce;
        Tensor<T> kl = kl_divergence(encode(teacher, s).logits, s_logits, tau);
        kl_acc = kl_acc.defined() ? add(kl_acc, kl) : kl;
    }
    const double b = static_cast<double>(batch.size());
    Tensor<T> ce_term = scale(ce_acc, static_cast<T>(cfg.vanilla_alpha / b));
    Tensor<T> kl_term = scale(kl_acc, static_cast<T>((1.0 - cfg.vanilla_alpha) *
                                                     cfg.vanilla_temperature * cfg.vanilla_temperature / b));
    Tensor<T> loss = add(ce_term, kl_term);
    loss.backward();
    adam_step(student.params, opt);
    return {static_cast<double>(loss.item()), 0.0, static_cast<double>(kl_term.item())};
}

template <class T>
struct DistillResult {
    ModelBundle<T> student;
    ModelBundle<T> generator;  // left empty by methods without one
    TrainingLog log;
};

// Full distillation run. Phase 1 interleaves generator ascent steps with
// student descent steps (for generator methods) on the phase's loss; phase 2
// fine-tunes the student on hard labels with fresh optimizer moments while the
// learning-rate decay clock keeps running. The student and generator draw
// batches from independent seeded shuffles, so the student's data order does
// not depend on how many generator steps run between its updates.
template <class T>
DistillResult<T> run_distillation(const DistillationConfig& cfg, const ModelBundle<T>& teacher_in,
                                  const ModelConfig& student_arch, const ModelConfig& generator_arch,
                                  const std::vector<TokenSequence>& data) {
    cfg.validate();
    if (teacher_in.role != ModelRole::Teacher) {
        throw std::invalid_argument("run_distillation: first model must have the teacher role");
    }
    student_arch.validate();
    if (student_arch.vocab_size != teacher_in.config.vocab_size) {
        throw std::invalid_argument("run_distillation: student vocabulary does not match teacher");
    }
    if (student_arch.n_classes != teacher_in.config.n_classes) {
        throw std::invalid_argument("run_distillation: student class count does not match teacher");
    }
    if (student_arch.max_len != teacher_in.config.max_len) {
        throw std::invalid_argument("run_distillation: student max length does not match teacher");
    }
    if (teacher_in.config.n_layers < student_arch.n_layers ||
        teacher_in.config.d_model < student_arch.d_model) {
        throw std::invalid_argument("run_distillation: teacher must be at least as deep and wide as the student");
    }
    if (cfg.uses_generator()) {
        generator_arch.validate();
        if (generator_arch.vocab_size != teacher_in.config.vocab_size) {
            throw std::invalid_argument("run_distillation: generator vocabulary does not match teacher");
        }
        if (generator_arch.max_len != teacher_in.config.max_len) {
            throw std::invalid_argument("run_distillation: generator max length does not match teacher");
        }
    }
    detail::check_labels(data, teacher_in.config.n_classes);

    ModelBundle<T> teacher = teacher_in.clone();
    teacher.set_trainable(false);

    Rng init_s = substream(cfg.seed, "init.student");
    ModelBundle<T> student = init_model<T>(student_arch, ModelRole::Student, "student." + std::string(method_name(cfg.method)), init_s);
    ModelBundle<T> generator;
    if (cfg.uses_generator()) {
        Rng init_g = substream(cfg.seed, "init.generator");
        generator = init_model<T>(generator_arch, ModelRole::Generator, "generator", init_g);
    }

    Rng student_data = substream(cfg.seed, "data.student");
    Rng gen_data = substream(cfg.seed, "data.generator");
    Rng mask_rng = substream(cfg.seed, "mask");
    Rng gumbel_rng = substream(cfg.seed, "gumbel");

    const int n = static_cast<int>(data.size());
    const int bpe = (n + cfg.batch_size - 1) / cfg.batch_size;  // student batches per epoch
    const long student_total = static_cast<long>(bpe) * (cfg.kd_epochs + cfg.ce_epochs);

    AdamState<T> student_opt;
    student_opt.lr = static_cast<T>(cfg.lr);
    student_opt.total_steps = cfg.lr_decay ? student_total : 0;
    AdamState<T> gen_opt;
    gen_opt.lr = static_cast<T>(cfg.lr_generator);

    std::vector<int> order(data.size()), gen_order(data.size());
    for (size_t i = 0; i < data.size(); ++i) order[i] = gen_order[i] = static_cast<int>(i);
    int gen_pos = n;  // exhausted: first generator batch reshuffles

    auto slice = [&data](const std::vector<int>& idx, int from, int to) {
        std::vector<TokenSequence> batch;
        batch.reserve(static_cast<size_t>(to - from));
        for (int i = from; i < to; ++i) batch.push_back(data[static_cast<size_t>(idx[static_cast<size_t>(i)])]);
        return batch;
    };

    const auto t0 = std::chrono::steady_clock::now();
    auto elapsed_ms = [&t0] {
        return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    };

    const int eff_max_T = cfg.method == DistillMethod::Mate ? 1 : cfg.max_temperature;
    const bool kd_loss_phase1 = cfg.method == DistillMethod::Annealing ||
                                cfg.method == DistillMethod::Mate || cfg.method == DistillMethod::Comkd;

    TrainingLog log;
    long global_step = 0;

    for (int epoch = 1; epoch <= cfg.kd_epochs; ++epoch) {
        const double t = temperature(epoch, eff_max_T);
        student_data.shuffle(order);
        for (int b = 0; b < bpe; ++b) {
            while (cfg.uses_generator() && cfg.generator_steps > 0 &&
                   global_step % cfg.steps_per_cycle < cfg.generator_steps) {
                if (gen_pos >= n) {
                    gen_data.shuffle(gen_order);
                    gen_pos = 0;
                }
                const int take = std::min(cfg.batch_size, n - gen_pos);
                std::vector<TokenSequence> gbatch = slice(gen_order, gen_pos, gen_pos + take);
                gen_pos += take;
                const double lg = adversarial_generator_step(teacher, student, generator, gbatch, cfg,
                                                             mask_rng, gumbel_rng, gen_opt);
                ++global_step;
                log.steps.push_back({1, epoch, static_cast<int>(global_step), "generator", t, lg, lg, 0.0,
                                     elapsed_ms()});
            }
            const int from = b * cfg.batch_size;
            const int to = std::min(n, from + cfg.batch_size);
            std::vector<TokenSequence> batch = slice(order, from, to);
            StepLosses sl;
            if (kd_loss_phase1) {
                sl = kd_student_step(teacher, student, cfg.uses_generator() ? &generator : nullptr, batch,
                                     t, cfg, mask_rng, gumbel_rng, student_opt);
            } else {
                sl = vanilla_student_step(teacher, student, batch, cfg, student_opt);
            }
            ++global_step;
            log.steps.push_back({1, epoch, static_cast<int>(global_step), "student", t, sl.loss, sl.adv,
                                 sl.kd, elapsed_ms()});
        }
    }

    if (cfg.ce_epochs > 0) {
        AdamState<T> ce_opt;
        ce_opt.lr = static_cast<T>(cfg.lr);
        ce_opt.total_steps = student_opt.total_steps;
        ce_opt.decay_offset = student_opt.step;
        for (int epoch = 1; epoch <= cfg.ce_epochs; ++epoch) {
            student_data.shuffle(order);
            for (int b = 0; b < bpe; ++b) {
                const int from = b * cfg.batch_size;
                const int to = std::min(n, from + cfg.batch_size);
                std::vector<TokenSequence> batch = slice(order, from, to);
                StepLosses sl = ce_student_step(student, batch, ce_opt);
                ++global_step;
                log.steps.push_back({2, epoch, static_cast<int>(global_step), "student", 1.0, sl.loss, 0.0,
                                     0.0, elapsed_ms()});
            }
        }
    }

    return {std::move(student), std::move(generator), std::move(log)};
}

}  // namespace kdlab
