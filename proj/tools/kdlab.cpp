// Command-line surface for the distillation laboratory. Every subcommand
// writes an effective-config.ini snapshot next to its outputs; re-running
// with --config <snapshot> reproduces the outputs byte for byte.

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "kdlab/attack.hpp"
#include "kdlab/checkpoint.hpp"
#include "kdlab/dataset.hpp"
#include "kdlab/distill.hpp"
#include "kdlab/metrics.hpp"
#include "kdlab/train.hpp"
#include "kdlab/uaf.hpp"

namespace {

std::string hex64(uint64_t v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%016" PRIx64, v);
    return buf;
}

// fail fast: every input path must resolve before any work starts
void require_inputs(const std::vector<std::string>& paths) {
    for (const auto& p : paths) {
        if (p.empty()) continue;
        if (!std::filesystem::exists(p)) throw std::runtime_error("no such file: " + p);
    }
}

// an empty vector option round-trips through the config snapshot as one "" entry
std::vector<std::string> non_empty(const std::vector<std::string>& v) {
    std::vector<std::string> out;
    for (const auto& s : v)
        if (!s.empty()) out.push_back(s);
    return out;
}

std::filesystem::path prepare_out(const std::string& dir) {
    std::filesystem::create_directories(dir);
    return std::filesystem::path(dir);
}

// the section header routes the keys back to the subcommand on replay
void write_snapshot(CLI::App* cmd, const std::filesystem::path& out) {
    const auto path = out / "effective-config.ini";
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
    f << '[' << cmd->get_name() << "]\n" << cmd->config_to_str(true, false);
}

kdlab::ModelBundle<float> load_checked(const std::string& path, const kdlab::Vocabulary& vocab) {
    auto loaded = kdlab::load_model<float>(path);
    if (loaded.vocab_hash != vocab.hash()) {
        throw std::runtime_error("vocabulary mismatch for " + path + ": checkpoint vocab_hash " +
                                 hex64(loaded.vocab_hash) + ", vocabulary file hash " +
                                 hex64(vocab.hash()));
    }
    return std::move(loaded.model);
}

int shared_max_len(const std::vector<kdlab::ModelBundle<float>>& models) {
    const int len = models.front().config.max_len;
    for (const auto& m : models) {
        if (m.config.max_len != len) {
            throw std::runtime_error("models disagree on max length (" + std::to_string(len) +
                                     " vs " + std::to_string(m.config.max_len) + " for " + m.id + ")");
        }
    }
    return len;
}

std::string dataset_name(const std::string& path) {
    return std::filesystem::path(path).stem().string();
}

void emit_report(const kdlab::EvalReport& rep, const std::filesystem::path& out) {
    rep.save_csv((out / "report.csv").string());
    const std::string md = rep.to_markdown();
    std::ofstream f(out / "report.md");
    f << md;
    std::cout << md;
}

struct TrainTeacherOpts {
    std::string data, dev, out = "kdlab-out", id = "teacher";
    std::vector<std::string> vocab_extra;
    int layers = 2, d_model = 64, heads = 4, ff = 0, max_len = 12;
    double lr = 1e-3;
    int epochs = 10, batch = 16;
    uint64_t seed = 42;
};

void run_train_teacher(const TrainTeacherOpts& o, CLI::App* cmd) {
    const std::vector<std::string> extra_paths = non_empty(o.vocab_extra);
    std::vector<std::string> inputs{o.data, o.dev};
    inputs.insert(inputs.end(), extra_paths.begin(), extra_paths.end());
    require_inputs(inputs);

    auto train = kdlab::LabeledDataset::load_tsv(o.data);
    auto dev = kdlab::LabeledDataset::load_tsv(o.dev);
    std::vector<kdlab::LabeledDataset> extra;
    extra.reserve(extra_paths.size());
    for (const auto& p : extra_paths) extra.push_back(kdlab::LabeledDataset::load_tsv(p));
    std::vector<const kdlab::LabeledDataset*> sources{&train, &dev};
    for (const auto& ds : extra) sources.push_back(&ds);
    kdlab::Vocabulary vocab = kdlab::build_vocab(sources);

    kdlab::ModelConfig arch;
    arch.n_layers = o.layers;
    arch.d_model = o.d_model;
    arch.n_heads = o.heads;
    arch.d_ff = o.ff > 0 ? o.ff : 4 * o.d_model;
    arch.vocab_size = vocab.size();
    arch.n_classes = train.n_classes;
    arch.max_len = o.max_len;

    kdlab::ClassifierTrainConfig cfg;
    cfg.lr = o.lr;
    cfg.epochs = o.epochs;
    cfg.batch_size = o.batch;
    cfg.seed = o.seed;

    cmd->get_option("--ff")->default_str(std::to_string(arch.d_ff));
    const auto out = prepare_out(o.out);
    write_snapshot(cmd, out);

    auto train_tok = kdlab::tokenize_dataset(train, vocab, arch.max_len);
    auto dev_tok = kdlab::tokenize_dataset(dev, vocab, arch.max_len);
    auto [model, log] =
        kdlab::train_classifier<float>(arch, kdlab::ModelRole::Teacher, o.id, train_tok, cfg);

    vocab.save((out / "vocab.txt").string());
    kdlab::save_model(model, vocab.hash(), (out / "teacher.ckpt").string());
    std::ofstream lf(out / "train-log.jsonl");
    for (const auto& e : log) {
        nlohmann::json j{{"epoch", e.epoch}, {"mean_loss", e.mean_loss}, {"accuracy", e.accuracy}};
        lf << j.dump() << '\n';
    }
    std::printf("dev accuracy %.4f\n", kdlab::eval_accuracy(model, dev_tok));
    std::cout << "wrote " << (out / "teacher.ckpt").string() << '\n';
}

struct DistillOpts {
    std::string teacher, vocab, data, dev, out = "kdlab-out", method = "comkd";
    int student_layers = 2, student_d_model = 32, student_heads = 2, student_ff = 0;
    int generator_layers = 2, generator_d_model = 0, generator_heads = 0, generator_ff = 0;
    int max_temperature = 10, kd_epochs = 10, ce_epochs = -1;
    int steps_per_cycle = 10, generator_steps = 3;
    double mask_ratio = 0.3, gumbel_tau = 1.0, lr = 1e-3, lr_generator = 1e-3;
    bool lr_decay = true;
    int batch = 16;
    uint64_t seed = 42;
    double vanilla_alpha = 0.5, vanilla_temperature = 5.0;
};

void run_distill(const DistillOpts& o, CLI::App* cmd) {
    require_inputs({o.teacher, o.vocab, o.data, o.dev});
    auto vocab = kdlab::Vocabulary::load(o.vocab);
    auto teacher = load_checked(o.teacher, vocab);

    auto ds = kdlab::LabeledDataset::load_tsv(o.data);
    if (ds.n_classes != teacher.config.n_classes) {
        throw std::runtime_error("dataset " + dataset_name(o.data) + " declares " +
                                 std::to_string(ds.n_classes) + " classes but the teacher has " +
                                 std::to_string(teacher.config.n_classes));
    }

    kdlab::DistillationConfig cfg;
    cfg.method = kdlab::method_from_name(o.method);
    cfg.max_temperature = o.max_temperature;
    cfg.kd_epochs = o.kd_epochs;
    cfg.ce_epochs = o.ce_epochs < 0 ? (cfg.has_ce_phase() ? 10 : 0) : o.ce_epochs;
    cfg.steps_per_cycle = o.steps_per_cycle;
    cfg.generator_steps = o.generator_steps;
    cfg.mask_ratio = o.mask_ratio;
    cfg.gumbel_tau = o.gumbel_tau;
    cfg.lr = o.lr;
    cfg.lr_generator = o.lr_generator;
    cfg.lr_decay = o.lr_decay;
    cfg.batch_size = o.batch;
    cfg.seed = o.seed;
    cfg.vanilla_alpha = o.vanilla_alpha;
    cfg.vanilla_temperature = o.vanilla_temperature;

    kdlab::ModelConfig student = teacher.config;
    student.n_layers = o.student_layers;
    student.d_model = o.student_d_model;
    student.n_heads = o.student_heads;
    student.d_ff = o.student_ff > 0 ? o.student_ff : 4 * o.student_d_model;

    kdlab::ModelConfig generator = student;
    generator.n_classes = 0;
    if (o.generator_d_model > 0) generator.d_model = o.generator_d_model;
    if (o.generator_heads > 0) generator.n_heads = o.generator_heads;
    generator.d_ff = o.generator_ff > 0 ? o.generator_ff : 4 * generator.d_model;
    generator.n_layers = o.generator_layers;

    // the snapshot records resolved values for the adaptive defaults
    cmd->get_option("--ce-epochs")->default_str(std::to_string(cfg.ce_epochs));
    cmd->get_option("--student-ff")->default_str(std::to_string(student.d_ff));
    cmd->get_option("--generator-d-model")->default_str(std::to_string(generator.d_model));
    cmd->get_option("--generator-heads")->default_str(std::to_string(generator.n_heads));
    cmd->get_option("--generator-ff")->default_str(std::to_string(generator.d_ff));
    const auto out = prepare_out(o.out);
    write_snapshot(cmd, out);

    auto tok = kdlab::tokenize_dataset(ds, vocab, teacher.config.max_len);
    auto res = kdlab::run_distillation(cfg, teacher, student, generator, tok);

    kdlab::save_model(res.student, vocab.hash(), (out / "student.ckpt").string());
    if (cfg.uses_generator()) {
        kdlab::save_model(res.generator, vocab.hash(), (out / "generator.ckpt").string());
    }
    res.log.save_jsonl((out / "train-log.jsonl").string());

    if (!o.dev.empty()) {
        auto dev = kdlab::LabeledDataset::load_tsv(o.dev);
        auto dev_tok = kdlab::tokenize_dataset(dev, vocab, teacher.config.max_len);
        std::printf("student dev accuracy %.4f\n", kdlab::eval_accuracy(res.student, dev_tok));
    }
    std::cout << "wrote " << (out / "student.ckpt").string() << '\n';
}

struct UafOpts {
    std::vector<std::string> models;
    std::string vocab, data, lexicon, out = "kdlab-out";
    double lambda_down = 0.5, lambda_up = 0.99;
    int k = 1000;
    double budget = 0.15;
    uint64_t seed = 42;
};

void run_uaf(const UafOpts& o, CLI::App* cmd) {
    const std::vector<std::string> model_paths = non_empty(o.models);
    if (model_paths.size() < 2) {
        throw std::runtime_error("need at least two --model checkpoints to pool a cross-model set");
    }
    std::vector<std::string> inputs = model_paths;
    inputs.insert(inputs.end(), {o.vocab, o.data, o.lexicon});
    require_inputs(inputs);

    auto vocab = kdlab::Vocabulary::load(o.vocab);
    std::vector<kdlab::ModelBundle<float>> models;
    models.reserve(model_paths.size());
    for (const auto& p : model_paths) models.push_back(load_checked(p, vocab));
    const int max_len = shared_max_len(models);

    auto ds = kdlab::LabeledDataset::load_tsv(o.data);
    auto lexicon = kdlab::SynonymLexicon::load(o.lexicon);

    const auto out = prepare_out(o.out);
    write_snapshot(cmd, out);

    auto tok = kdlab::tokenize_dataset(ds, vocab, max_len);
    std::vector<const kdlab::ModelBundle<float>*> ptrs;
    for (const auto& m : models) ptrs.push_back(&m);

    kdlab::QualityThresholds th{o.lambda_down, o.lambda_up};
    auto set = kdlab::build_uaf_set(ptrs, tok, dataset_name(o.data), lexicon, vocab, th, o.k,
                                    o.budget, o.seed);
    for (const auto& w : set.warnings) std::cerr << "warning: " << w << '\n';

    std::map<std::string, uint64_t> sums;
    for (const auto& m : models) sums[m.id] = m.checksum();
    set.save((out / "uaf-samples.jsonl").string(), (out / "uaf-manifest.json").string(), sums);

    auto rep = kdlab::evaluate_on_uaf(ptrs, set, ds.metric);
    emit_report(rep, out);
    std::printf("pooled %zu samples from %zu models\n", set.samples.size(), models.size());
}

struct AttackOpts {
    std::string model, vocab, data, lexicon, out = "kdlab-out";
    double budget = 0.15;
};

void run_attack(const AttackOpts& o, CLI::App* cmd) {
    require_inputs({o.model, o.vocab, o.data, o.lexicon});
    auto vocab = kdlab::Vocabulary::load(o.vocab);
    auto model = load_checked(o.model, vocab);
    auto ds = kdlab::LabeledDataset::load_tsv(o.data);
    auto lexicon = kdlab::SynonymLexicon::load(o.lexicon);

    const auto out = prepare_out(o.out);
    write_snapshot(cmd, out);

    auto tok = kdlab::tokenize_dataset(ds, vocab, model.config.max_len);
    auto run = kdlab::attack_dataset(model, tok, lexicon, vocab, o.budget, dataset_name(o.data));

    std::ofstream f(out / "attacks.jsonl");
    for (const auto& c : run.candidates) {
        nlohmann::json j{{"source_index", c.source_index},
                         {"original_text", c.original_text},
                         {"perturbed_text", c.perturbed_text},
                         {"gold_label", c.gold},
                         {"prediction_before", c.prediction_before},
                         {"prediction_after", c.prediction_after},
                         {"replaced_positions", c.replaced_positions}};
        f << j.dump() << '\n';
    }
    const double rate = run.attempted > 0
                            ? static_cast<double>(run.flipped()) / static_cast<double>(run.attempted)
                            : 0.0;
    std::printf("flipped %d of %d samples (rate %.4f)\n", run.flipped(), run.attempted, rate);
}

struct EvaluateOpts {
    std::vector<std::string> models, datas;
    std::string uaf_samples, vocab, out = "kdlab-out";
    std::string metric = "accuracy";
};

void run_evaluate(const EvaluateOpts& o, CLI::App* cmd) {
    const std::vector<std::string> model_paths = non_empty(o.models);
    const std::vector<std::string> data_paths = non_empty(o.datas);
    if (data_paths.empty() && o.uaf_samples.empty()) {
        throw std::runtime_error("nothing to evaluate: pass --data or --uaf-samples");
    }
    std::vector<std::string> inputs = model_paths;
    inputs.insert(inputs.end(), data_paths.begin(), data_paths.end());
    inputs.push_back(o.vocab);
    inputs.push_back(o.uaf_samples);
    require_inputs(inputs);

    auto vocab = kdlab::Vocabulary::load(o.vocab);
    std::vector<kdlab::ModelBundle<float>> models;
    models.reserve(model_paths.size());
    for (const auto& p : model_paths) models.push_back(load_checked(p, vocab));
    const int max_len = shared_max_len(models);

    const auto out = prepare_out(o.out);
    write_snapshot(cmd, out);

    kdlab::EvalReport rep;
    for (const auto& path : data_paths) {
        auto ds = kdlab::LabeledDataset::load_tsv(path);
        for (const auto& m : models) {
            if (ds.n_classes != m.config.n_classes) {
                throw std::runtime_error("dataset " + dataset_name(path) + " declares " +
                                         std::to_string(ds.n_classes) + " classes but model " +
                                         m.id + " has " + std::to_string(m.config.n_classes));
            }
        }
        auto tok = kdlab::tokenize_dataset(ds, vocab, max_len);
        for (const auto& m : models) {
            std::vector<int> preds, golds;
            preds.reserve(tok.size());
            golds.reserve(tok.size());
            for (const auto& s : tok) {
                preds.push_back(kdlab::predict(m, s).first);
                golds.push_back(s.label);
            }
            kdlab::EvalCell cell;
            cell.model_id = m.id;
            cell.dataset = dataset_name(path);
            cell.metric = ds.metric;
            cell.value = kdlab::compute_metric(ds.metric, preds, golds);
            cell.n = static_cast<int>(preds.size());
            rep.cells.push_back(std::move(cell));
        }
    }

    if (!o.uaf_samples.empty()) {
        auto set = kdlab::UAFTestSet::load_samples(o.uaf_samples);
        // saved sets carry text only; rebuild the token sequences
        for (auto& sc : set.samples) {
            sc.candidate.perturbed =
                kdlab::tokenize(sc.candidate.perturbed_text, vocab, max_len, sc.candidate.gold);
        }
        std::vector<const kdlab::ModelBundle<float>*> ptrs;
        for (const auto& m : models) ptrs.push_back(&m);
        auto part = kdlab::evaluate_on_uaf(ptrs, set, o.metric);
        for (auto& c : part.cells) rep.cells.push_back(std::move(c));
    }

    emit_report(rep, out);
}

struct ReportOpts {
    std::string report, out = "kdlab-out";
};

void run_report(const ReportOpts& o, CLI::App* cmd) {
    require_inputs({o.report});
    auto rep = kdlab::EvalReport::load_csv(o.report);
    const auto out = prepare_out(o.out);
    write_snapshot(cmd, out);
    const std::string md = rep.to_markdown();
    std::ofstream f(out / "report.md");
    f << md;
    std::cout << md;
}

CLI::App* add_command(CLI::App& app, const std::string& name, const std::string& help,
                      std::string& out) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--out", out, "output directory")->envname("KDLAB_OUT_DIR")->capture_default_str();
    return sub;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale knowledge distillation laboratory"};
    app.require_subcommand(1);
    // one config option at the top; subcommands inherit it through fallthrough
    app.fallthrough();
    app.set_config("--config", "", "read options from an INI file (command line overrides)");

    TrainTeacherOpts tt;
    CLI::App* t = add_command(app, "train-teacher", "fine-tune a teacher classifier on a TSV corpus", tt.out);
    t->add_option("--data", tt.data, "training TSV")->required();
    t->add_option("--dev", tt.dev, "held-out TSV for the final accuracy print")->required();
    t->add_option("--vocab-extra", tt.vocab_extra, "extra TSVs whose words join the vocabulary");
    t->add_option("--id", tt.id, "model id stored in the checkpoint")->capture_default_str();
    t->add_option("--layers", tt.layers, "encoder layers")->capture_default_str();
    t->add_option("--d-model", tt.d_model, "embedding width")->capture_default_str();
    t->add_option("--heads", tt.heads, "attention heads")->capture_default_str();
    t->add_option("--ff", tt.ff, "feed-forward width (0: 4x d-model)")->capture_default_str();
    t->add_option("--max-len", tt.max_len, "sequence length including [CLS]")->capture_default_str();
    t->add_option("--lr", tt.lr, "learning rate")->capture_default_str();
    t->add_option("--epochs", tt.epochs, "training epochs")->capture_default_str();
    t->add_option("--batch-size", tt.batch, "batch size")->capture_default_str();
    t->add_option("--seed", tt.seed, "run seed")->capture_default_str();
    t->callback([&] { run_train_teacher(tt, t); });

    DistillOpts di;
    CLI::App* d = add_command(app, "distill", "train a student from a teacher checkpoint", di.out);
    d->add_option("--teacher", di.teacher, "teacher checkpoint")->required();
    d->add_option("--vocab", di.vocab, "vocabulary file")->required();
    d->add_option("--data", di.data, "training TSV")->required();
    d->add_option("--dev", di.dev, "optional held-out TSV for a final accuracy print");
    d->add_option("--method", di.method, "finetune|vanilla|annealing|mate|comkd")
        ->check(CLI::IsMember({"finetune", "vanilla", "annealing", "mate", "comkd"}))
        ->capture_default_str();
    d->add_option("--student-layers", di.student_layers, "student encoder layers")->capture_default_str();
    d->add_option("--student-d-model", di.student_d_model, "student width")->capture_default_str();
    d->add_option("--student-heads", di.student_heads, "student attention heads")->capture_default_str();
    d->add_option("--student-ff", di.student_ff, "student feed-forward width (0: 4x width)")->capture_default_str();
    d->add_option("--generator-layers", di.generator_layers, "generator encoder layers")->capture_default_str();
    d->add_option("--generator-d-model", di.generator_d_model, "generator width (0: student width)")->capture_default_str();
    d->add_option("--generator-heads", di.generator_heads, "generator heads (0: student heads)")->capture_default_str();
    d->add_option("--generator-ff", di.generator_ff, "generator feed-forward width (0: 4x width)")->capture_default_str();
    d->add_option("--max-temperature", di.max_temperature, "annealing temperature ceiling")->capture_default_str();
    d->add_option("--kd-epochs", di.kd_epochs, "distillation phase epochs")->capture_default_str();
    d->add_option("--ce-epochs", di.ce_epochs, "fine-tuning phase epochs (-1: 10 when the method has that phase, else 0)")
        ->capture_default_str();
    d->add_option("--steps-per-cycle", di.steps_per_cycle, "generator/student interleave cycle")->capture_default_str();
    d->add_option("--generator-steps", di.generator_steps, "generator steps per cycle")->capture_default_str();
    d->add_option("--mask-ratio", di.mask_ratio, "fraction of content tokens masked")->capture_default_str();
    d->add_option("--gumbel-tau", di.gumbel_tau, "gumbel-softmax temperature")->capture_default_str();
    d->add_option("--lr", di.lr, "student learning rate")->capture_default_str();
    d->add_option("--lr-generator", di.lr_generator, "generator learning rate")->capture_default_str();
    d->add_option("--lr-decay", di.lr_decay, "linear student lr decay")->capture_default_str();
    d->add_option("--batch-size", di.batch, "batch size")->capture_default_str();
    d->add_option("--seed", di.seed, "run seed")->capture_default_str();
    d->add_option("--vanilla-alpha", di.vanilla_alpha, "hard-label weight for method vanilla")->capture_default_str();
    d->add_option("--vanilla-temperature", di.vanilla_temperature, "softening for method vanilla")->capture_default_str();
    d->callback([&] { run_distill(di, d); });

    UafOpts uf;
    CLI::App* u = add_command(app, "uaf", "pool adversarial samples from several models and score them all", uf.out);
    u->add_option("--model", uf.models, "model checkpoint (repeat; at least two)")->required();
    u->add_option("--vocab", uf.vocab, "vocabulary file")->required();
    u->add_option("--data", uf.data, "source TSV to perturb")->required();
    u->add_option("--lexicon", uf.lexicon, "synonym lexicon")->required();
    u->add_option("--lambda-down", uf.lambda_down, "quality window lower bound (exclusive)")->capture_default_str();
    u->add_option("--lambda-up", uf.lambda_up, "quality window upper bound (inclusive)")->capture_default_str();
    u->add_option("--k", uf.k, "samples kept per generating model")->capture_default_str();
    u->add_option("--budget", uf.budget, "max fraction of content tokens replaced")->capture_default_str();
    u->add_option("--seed", uf.seed, "recorded in the manifest")->capture_default_str();
    u->callback([&] { run_uaf(uf, u); });

    AttackOpts at;
    CLI::App* a = add_command(app, "attack", "run the synonym-substitution attack against one model", at.out);
    a->add_option("--model", at.model, "victim checkpoint")->required();
    a->add_option("--vocab", at.vocab, "vocabulary file")->required();
    a->add_option("--data", at.data, "source TSV")->required();
    a->add_option("--lexicon", at.lexicon, "synonym lexicon")->required();
    a->add_option("--budget", at.budget, "max fraction of content tokens replaced")->capture_default_str();
    a->callback([&] { run_attack(at, a); });

    EvaluateOpts ev;
    CLI::App* e = add_command(app, "evaluate", "score models on TSV datasets or a saved adversarial set", ev.out);
    e->add_option("--model", ev.models, "model checkpoint (repeatable)")->required();
    e->add_option("--vocab", ev.vocab, "vocabulary file")->required();
    e->add_option("--data", ev.datas, "TSV dataset (repeatable)");
    e->add_option("--uaf-samples", ev.uaf_samples, "saved adversarial samples file");
    e->add_option("--metric", ev.metric, "metric for --uaf-samples scoring")->capture_default_str();
    e->callback([&] { run_evaluate(ev, e); });

    ReportOpts rp;
    CLI::App* r = add_command(app, "report", "render a report CSV as markdown", rp.out);
    r->add_option("--report", rp.report, "report CSV")->required();
    r->callback([&] { run_report(rp, r); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        return app.exit(err);
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << '\n';
        return 1;
    }
    return 0;
}
