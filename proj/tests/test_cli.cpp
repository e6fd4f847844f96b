#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <sys/wait.h>
#include <vector>

#include <json.hpp>

#include "kdlab/checkpoint.hpp"
#include "kdlab/distill.hpp"
#include "kdlab/metrics.hpp"
#include "kdlab/vocab.hpp"

namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& p, const std::string& s) {
    std::ofstream out(p, std::ios::binary);
    REQUIRE(out.good());
    out << s;
}

struct CmdResult {
    int exit_code = -1;
    std::string out, err;
};

CmdResult run_cli(const std::string& args, const std::string& tag) {
    const fs::path so = fs::temp_directory_path() / ("kdlab_cli_" + tag + ".out");
    const fs::path se = fs::temp_directory_path() / ("kdlab_cli_" + tag + ".err");
    const std::string cmd =
        std::string(KDLAB_BIN) + " " + args + " >" + so.string() + " 2>" + se.string();
    const int rc = std::system(cmd.c_str());
    CmdResult r;
    r.exit_code = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
    r.out = slurp(so);
    r.err = slurp(se);
    fs::remove(so);
    fs::remove(se);
    return r;
}

const std::string kToyTsv =
    "#task=toy\tclasses=2\tmetric=accuracy\n"
    "1\ta good movie\n"
    "0\ta bad movie\n"
    "1\tthe great film\n"
    "0\tthe awful film\n"
    "1\ttruly nice plot\n"
    "0\ttruly poor plot\n"
    "1\ta lovely story\n"
    "0\ta dull story\n";

const std::string kSynTsv =
    "good\tgreat,bad\n"
    "bad\tawful,good\n"
    "great\tgood,awful\n"
    "awful\tbad,great\n"
    "nice\tlovely,poor\n"
    "poor\tdull,nice\n"
    "lovely\tnice,dull\n"
    "dull\tpoor,lovely\n";

struct Fixture {
    fs::path ws;
    fs::path toy, dev, syn;
    fs::path teacher_dir;
    std::string teacher_args;  // without --out
};

// one workspace with a converged toy teacher, built on first use
const Fixture& fx() {
    static Fixture f = [] {
        Fixture x;
        unsetenv("KDLAB_OUT_DIR");
        x.ws = fs::temp_directory_path() / "kdlab_cli_ws";
        fs::remove_all(x.ws);
        fs::create_directories(x.ws);
        x.toy = x.ws / "toy.tsv";
        x.dev = x.ws / "toy.dev.tsv";
        x.syn = x.ws / "syn.tsv";
        spit(x.toy, kToyTsv);
        spit(x.dev, kToyTsv);
        spit(x.syn, kSynTsv);
        x.teacher_dir = x.ws / "teacher";
        x.teacher_args = "train-teacher --data " + x.toy.string() + " --dev " + x.dev.string() +
                         " --layers 1 --d-model 16 --heads 2 --max-len 6 --lr 3e-3 --epochs 30"
                         " --batch-size 4 --seed 5";
        CmdResult r = run_cli(x.teacher_args + " --out " + x.teacher_dir.string(), "fixture");
        REQUIRE(r.exit_code == 0);
        return x;
    }();
    return f;
}

std::string distill_base(const Fixture& f) {
    return "distill --teacher " + (f.teacher_dir / "teacher.ckpt").string() + " --vocab " +
           (f.teacher_dir / "vocab.txt").string() + " --data " + f.toy.string() +
           " --student-layers 1 --student-d-model 16 --student-heads 2 --batch-size 4 --seed 11";
}

struct Cleanup : Catch::EventListenerBase {
    using EventListenerBase::EventListenerBase;
    void testRunEnded(const Catch::TestRunStats&) override {
        fs::remove_all(fs::temp_directory_path() / "kdlab_cli_ws");
    }
};
CATCH_REGISTER_LISTENER(Cleanup)

}  // namespace

TEST_CASE("training the teacher writes its artifacts deterministically") {
    const Fixture& f = fx();
    for (const char* name : {"teacher.ckpt", "vocab.txt", "train-log.jsonl", "effective-config.ini"}) {
        REQUIRE(fs::exists(f.teacher_dir / name));
    }

    const fs::path again = f.ws / "teacher-again";
    CmdResult r = run_cli(f.teacher_args + " --out " + again.string(), "det");
    REQUIRE(r.exit_code == 0);
    REQUIRE(r.out.find("dev accuracy 1.0000") != std::string::npos);
    REQUIRE(slurp(again / "teacher.ckpt") == slurp(f.teacher_dir / "teacher.ckpt"));

    // inputs are read, never rewritten
    REQUIRE(slurp(f.toy) == kToyTsv);
}

TEST_CASE("a run replayed from its effective config reproduces the outputs byte for byte") {
    const Fixture& f = fx();
    const fs::path dir = f.ws / "replay";
    CmdResult first = run_cli(f.teacher_args + " --out " + dir.string(), "replay1");
    REQUIRE(first.exit_code == 0);

    std::map<std::string, std::string> bytes;
    for (const char* name : {"teacher.ckpt", "vocab.txt", "train-log.jsonl", "effective-config.ini"}) {
        bytes[name] = slurp(dir / name);
    }
    const fs::path snapshot = f.ws / "replay-snapshot.ini";
    spit(snapshot, bytes["effective-config.ini"]);
    fs::remove_all(dir);

    CmdResult second = run_cli("train-teacher --config " + snapshot.string(), "replay2");
    REQUIRE(second.exit_code == 0);
    REQUIRE(second.out == first.out);
    for (const auto& [name, content] : bytes) {
        REQUIRE(slurp(dir / name) == content);
    }
}

TEST_CASE("a missing dataset path fails fast with the path in the message") {
    const Fixture& f = fx();
    CmdResult r = run_cli("train-teacher --data " + (f.ws / "absent.tsv").string() + " --dev " +
                              f.dev.string() + " --out " + (f.ws / "x").string(),
                          "missing");
    REQUIRE(r.exit_code != 0);
    REQUIRE(r.err.find("no such file") != std::string::npos);
    REQUIRE(r.err.find("absent.tsv") != std::string::npos);
}

TEST_CASE("bad invocations exit nonzero") {
    CmdResult bare = run_cli("", "bare");
    REQUIRE(bare.exit_code != 0);

    const Fixture& f = fx();
    CmdResult bogus = run_cli(distill_base(f) + " --method bogus --out " + (f.ws / "x").string(), "bogus");
    REQUIRE(bogus.exit_code != 0);
    REQUIRE(bogus.err.find("bogus") != std::string::npos);
}

TEST_CASE("distilling with a generator method writes student, generator, and a two-phase log") {
    const Fixture& f = fx();
    const fs::path dir = f.ws / "comkd";
    CmdResult r = run_cli(distill_base(f) +
                              " --method comkd --kd-epochs 1 --ce-epochs 1 --steps-per-cycle 4"
                              " --generator-steps 1 --out " +
                              dir.string(),
                          "comkd");
    REQUIRE(r.exit_code == 0);
    REQUIRE(fs::exists(dir / "student.ckpt"));
    REQUIRE(fs::exists(dir / "generator.ckpt"));
    REQUIRE(fs::exists(dir / "train-log.jsonl"));

    const auto log = kdlab::TrainingLog::load_jsonl((dir / "train-log.jsonl").string());
    REQUIRE(!log.steps.empty());
    int transitions = 0;
    for (size_t i = 1; i < log.steps.size(); ++i) {
        if (log.steps[i].phase != log.steps[i - 1].phase) ++transitions;
    }
    REQUIRE(transitions == 1);

    const fs::path ft = f.ws / "ft";
    CmdResult r2 = run_cli(distill_base(f) + " --method finetune --kd-epochs 2 --out " + ft.string(), "ft");
    REQUIRE(r2.exit_code == 0);
    REQUIRE(fs::exists(ft / "student.ckpt"));
    REQUIRE(!fs::exists(ft / "generator.ckpt"));
}

TEST_CASE("vanilla with full hard-label weight matches plain fine-tuning") {
    const Fixture& f = fx();
    const fs::path a = f.ws / "vanilla-alpha1";
    const fs::path b = f.ws / "ft-twin";
    CmdResult ra = run_cli(distill_base(f) + " --method vanilla --vanilla-alpha 1 --kd-epochs 2 --out " +
                               a.string(),
                           "va");
    CmdResult rb = run_cli(distill_base(f) + " --method finetune --kd-epochs 2 --out " + b.string(), "vb");
    REQUIRE(ra.exit_code == 0);
    REQUIRE(rb.exit_code == 0);
    const auto ma = kdlab::load_model<float>((a / "student.ckpt").string());
    const auto mb = kdlab::load_model<float>((b / "student.ckpt").string());
    REQUIRE(ma.model.checksum() == mb.model.checksum());
}

TEST_CASE("distillation refuses a checkpoint trained on a different vocabulary") {
    const Fixture& f = fx();
    const fs::path extra = f.ws / "extra.tsv";
    spit(extra, "#task=toy\tclasses=2\tmetric=accuracy\n1\ta superb movie\n");
    const fs::path other = f.ws / "other-vocab";
    CmdResult grow = run_cli(f.teacher_args + " --vocab-extra " + extra.string() + " --out " +
                                 other.string(),
                             "grow");
    REQUIRE(grow.exit_code == 0);

    CmdResult r = run_cli("distill --teacher " + (f.teacher_dir / "teacher.ckpt").string() +
                              " --vocab " + (other / "vocab.txt").string() + " --data " +
                              f.toy.string() + " --method finetune --kd-epochs 1 --ce-epochs 0 --out " +
                              (f.ws / "x").string(),
                          "mismatch");
    REQUIRE(r.exit_code != 0);
    const auto a = kdlab::Vocabulary::load((f.teacher_dir / "vocab.txt").string());
    const auto b = kdlab::Vocabulary::load((other / "vocab.txt").string());
    char ha[32], hb[32];
    std::snprintf(ha, sizeof ha, "%016llx", static_cast<unsigned long long>(a.hash()));
    std::snprintf(hb, sizeof hb, "%016llx", static_cast<unsigned long long>(b.hash()));
    REQUIRE(r.err.find("vocabulary mismatch") != std::string::npos);
    REQUIRE(r.err.find(ha) != std::string::npos);
    REQUIRE(r.err.find(hb) != std::string::npos);
}

TEST_CASE("pooling adversarial samples emits manifest, samples, and report deterministically") {
    const Fixture& f = fx();
    const fs::path ft = f.ws / "uaf-student";
    CmdResult rs = run_cli(distill_base(f) + " --method finetune --kd-epochs 2 --out " + ft.string(), "us");
    REQUIRE(rs.exit_code == 0);

    const std::string base = "uaf --model " + (f.teacher_dir / "teacher.ckpt").string() + " --model " +
                             (ft / "student.ckpt").string() + " --vocab " +
                             (f.teacher_dir / "vocab.txt").string() + " --data " + f.toy.string() +
                             " --lexicon " + f.syn.string() + " --k 4 --seed 3";
    const fs::path dir = f.ws / "uaf";
    CmdResult r = run_cli(base + " --out " + dir.string(), "uaf1");
    REQUIRE(r.exit_code == 0);
    for (const char* name : {"uaf-samples.jsonl", "uaf-manifest.json", "report.csv", "report.md"}) {
        REQUIRE(fs::exists(dir / name));
    }

    const auto manifest = nlohmann::json::parse(slurp(dir / "uaf-manifest.json"));
    REQUIRE(manifest.at("lambda_down").get<double>() == 0.5);
    REQUIRE(manifest.at("lambda_up").get<double>() == 0.99);
    REQUIRE(manifest.at("k").get<int>() == 4);
    REQUIRE(manifest.at("per_model_counts").size() == 2);
    REQUIRE(manifest.at("model_checksums").size() == 2);

    // every pooled sample respects the window and the replacement budget
    std::istringstream lines(slurp(dir / "uaf-samples.jsonl"));
    std::string line;
    while (std::getline(lines, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line);
        const double q = j.at("quality_score").get<double>();
        REQUIRE(q > 0.5);
        REQUIRE(q <= 0.99);
        REQUIRE(j.at("replaced_positions").size() <= 1);  // ceil(0.15 * 3 words)
    }

    const fs::path dir2 = f.ws / "uaf-again";
    CmdResult r2 = run_cli(base + " --out " + dir2.string(), "uaf2");
    REQUIRE(r2.exit_code == 0);
    REQUIRE(slurp(dir2 / "uaf-samples.jsonl") == slurp(dir / "uaf-samples.jsonl"));
    REQUIRE(slurp(dir2 / "report.csv") == slurp(dir / "report.csv"));
}

TEST_CASE("evaluating on the training fixture matches the final training-log accuracy") {
    const Fixture& f = fx();
    const fs::path dir = f.ws / "eval";
    CmdResult r = run_cli("evaluate --model " + (f.teacher_dir / "teacher.ckpt").string() + " --vocab " +
                              (f.teacher_dir / "vocab.txt").string() + " --data " + f.toy.string() +
                              " --out " + dir.string(),
                          "eval");
    REQUIRE(r.exit_code == 0);
    REQUIRE(fs::exists(dir / "report.md"));

    double last_train_acc = -1;
    std::istringstream log(slurp(f.teacher_dir / "train-log.jsonl"));
    std::string line;
    while (std::getline(log, line)) {
        if (!line.empty()) last_train_acc = nlohmann::json::parse(line).at("accuracy").get<double>();
    }
    const auto rep = kdlab::EvalReport::load_csv((dir / "report.csv").string());
    REQUIRE(rep.cells.size() == 1);
    REQUIRE(rep.cells[0].metric == "accuracy");
    REQUIRE(rep.cells[0].n == 8);
    REQUIRE(rep.cells[0].value == last_train_acc);
}

TEST_CASE("evaluating a saved adversarial set re-tokenizes the perturbed text") {
    const Fixture& f = fx();
    const fs::path samples = f.ws / "handmade-samples.jsonl";
    // two perturbed sentences the converged teacher labels correctly, one gold flipped
    nlohmann::json a{{"source_dataset", "toy"},     {"source_index", 0},
                     {"original_text", "a good movie"}, {"perturbed_text", "a bad movie"},
                     {"gold_label", 0},             {"source_model_id", "handmade"},
                     {"quality_score", 0.8},        {"replaced_positions", {2}}};
    nlohmann::json b = a;
    b["original_text"] = "the great film";
    b["perturbed_text"] = "the awful film";
    b["gold_label"] = 1;  // teacher should answer 0, scoring this one wrong
    spit(samples, a.dump() + "\n" + b.dump() + "\n");

    const fs::path dir = f.ws / "eval-uaf";
    CmdResult r = run_cli("evaluate --model " + (f.teacher_dir / "teacher.ckpt").string() + " --vocab " +
                              (f.teacher_dir / "vocab.txt").string() + " --uaf-samples " +
                              samples.string() + " --out " + dir.string(),
                          "evaluaf");
    REQUIRE(r.exit_code == 0);
    const auto rep = kdlab::EvalReport::load_csv((dir / "report.csv").string());
    REQUIRE(rep.cells.size() == 1);
    REQUIRE(rep.cells[0].dataset == "toy");
    REQUIRE(rep.cells[0].n == 2);
    REQUIRE(rep.cells[0].value == 0.5);
}

TEST_CASE("the report command renders a csv as markdown") {
    const Fixture& f = fx();
    const fs::path csv = f.ws / "hand.csv";
    spit(csv,
         "model,dataset,metric,value,n\n"
         "m1,d1,accuracy,0.5,10\n"
         "m1,d2,accuracy,1,30\n");
    const fs::path dir = f.ws / "report-out";
    CmdResult r = run_cli("report --report " + csv.string() + " --out " + dir.string(), "report");
    REQUIRE(r.exit_code == 0);
    REQUIRE(r.out.find("| model | dataset | metric | value | n |") != std::string::npos);
    REQUIRE(r.out.find("(average by dataset)") != std::string::npos);
    REQUIRE(r.out.find("(average by sample size)") != std::string::npos);
    REQUIRE(slurp(dir / "report.md") == r.out);
}

TEST_CASE("models with different sequence lengths cannot be evaluated together") {
    const Fixture& f = fx();
    const fs::path longer = f.ws / "teacher-long";
    CmdResult t = run_cli("train-teacher --data " + f.toy.string() + " --dev " + f.dev.string() +
                              " --layers 1 --d-model 16 --heads 2 --max-len 8 --epochs 1"
                              " --batch-size 4 --seed 5 --out " +
                              longer.string(),
                          "long");
    REQUIRE(t.exit_code == 0);
    CmdResult r = run_cli("evaluate --model " + (f.teacher_dir / "teacher.ckpt").string() + " --model " +
                              (longer / "teacher.ckpt").string() + " --vocab " +
                              (f.teacher_dir / "vocab.txt").string() + " --data " + f.toy.string() +
                              " --out " + (f.ws / "x2").string(),
                          "maxlen");
    REQUIRE(r.exit_code != 0);
    REQUIRE(r.err.find("max length") != std::string::npos);
}

TEST_CASE("the output directory can come from the environment") {
    const Fixture& f = fx();
    const fs::path csv = f.ws / "env.csv";
    spit(csv, "model,dataset,metric,value,n\nm,d,accuracy,1,4\n");
    const fs::path dir = f.ws / "env-out";
    setenv("KDLAB_OUT_DIR", dir.string().c_str(), 1);
    CmdResult r = run_cli("report --report " + csv.string(), "env");
    unsetenv("KDLAB_OUT_DIR");
    REQUIRE(r.exit_code == 0);
    REQUIRE(fs::exists(dir / "report.md"));
}
