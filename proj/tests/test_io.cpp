#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "kdlab/checkpoint.hpp"
#include "kdlab/dataset.hpp"
#include "kdlab/distill.hpp"
#include "kdlab/metrics.hpp"
#include "kdlab/model.hpp"
#include "kdlab/vocab.hpp"

using namespace kdlab;

namespace {

std::string tmp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path);
    out << content;
}

Vocabulary io_vocab() {
    return Vocabulary::from_tokens({"good", "great", "bad", "awful", "the", "movie", "plot", "very"});
}

ModelBundle<float> io_model() {
    Vocabulary v = io_vocab();
    ModelConfig arch{2, 16, 2, 32, v.size(), 2, 8};
    Rng rng(99);
    return init_model<float>(arch, ModelRole::Teacher, "round trip fixture", rng);
}

}  // namespace

TEST_CASE("checkpoint round trip reproduces the model bit for bit") {
    Vocabulary v = io_vocab();
    auto m = io_model();
    const auto path = tmp_path("kdlab_ckpt_test.txt");
    save_model(m, v.hash(), path);

    auto loaded = load_model<float>(path);
    REQUIRE(loaded.vocab_hash == v.hash());
    REQUIRE(loaded.model.role == ModelRole::Teacher);
    REQUIRE(loaded.model.id == "round trip fixture");
    REQUIRE(loaded.model.config == m.config);
    REQUIRE(loaded.model.checksum() == m.checksum());

    // same forward pass, down to the last bit
    TokenSequence s = tokenize("the movie was very good", v, 8, 1);
    const auto before = encode(m, s).logits.data();
    const auto after = encode(loaded.model, s).logits.data();
    REQUIRE(before == after);
    std::filesystem::remove(path);
}

TEST_CASE("checkpoint survives a second generation of saves") {
    Vocabulary v = io_vocab();
    auto m = io_model();
    const auto p1 = tmp_path("kdlab_ckpt_gen1.txt");
    const auto p2 = tmp_path("kdlab_ckpt_gen2.txt");
    save_model(m, v.hash(), p1);
    auto first = load_model<float>(p1);
    save_model(first.model, first.vocab_hash, p2);
    auto second = load_model<float>(p2);
    REQUIRE(second.model.checksum() == m.checksum());
    REQUIRE(second.vocab_hash == v.hash());
    std::filesystem::remove(p1);
    std::filesystem::remove(p2);
}

TEST_CASE("checkpoint loading rejects damaged files") {
    const auto path = tmp_path("kdlab_ckpt_bad.txt");

    REQUIRE_THROWS_AS(load_model<float>(tmp_path("kdlab_no_such_ckpt.txt")), std::runtime_error);

    write_file(path, "something else entirely\n");
    REQUIRE_THROWS_WITH(load_model<float>(path), Catch::Matchers::ContainsSubstring("not a checkpoint file"));

    write_file(path, "kdlab-checkpoint v1\nparam head.b 2\n0x0p+0 0x0p+0\nend\n");
    REQUIRE_THROWS_WITH(load_model<float>(path), Catch::Matchers::ContainsSubstring("param before arch"));

    write_file(path, "kdlab-checkpoint v1\nflavor vanilla\nend\n");
    REQUIRE_THROWS_WITH(load_model<float>(path), Catch::Matchers::ContainsSubstring("unknown checkpoint key"));

    write_file(path, "kdlab-checkpoint v1\narch 1 16 2 32 13 2 8\n");
    REQUIRE_THROWS_WITH(load_model<float>(path), Catch::Matchers::ContainsSubstring("no end marker"));

    // param header promises four values but the data line holds two
    write_file(path, "kdlab-checkpoint v1\narch 1 16 2 32 13 2 8\nparam head.b 4\n0x1p+0 0x1p+1\nend\n");
    REQUIRE_THROWS_WITH(load_model<float>(path),
                        Catch::Matchers::ContainsSubstring("expected 4 values, got 2"));

    write_file(path, "kdlab-checkpoint v1\nend\n");
    REQUIRE_THROWS_WITH(load_model<float>(path), Catch::Matchers::ContainsSubstring("no arch line"));

    std::filesystem::remove(path);
}

TEST_CASE("dataset files round trip through save and load") {
    LabeledDataset ds;
    ds.task = "sentiment";
    ds.n_classes = 2;
    ds.metric = "accuracy";
    ds.examples = {{1, "a very good movie", ""},
                   {0, "the plot was awful", ""},
                   {1, "great, truly great!", ""}};
    const auto path = tmp_path("kdlab_ds_test.tsv");
    ds.save_tsv(path);

    LabeledDataset back = LabeledDataset::load_tsv(path);
    REQUIRE(back.task == ds.task);
    REQUIRE(back.n_classes == ds.n_classes);
    REQUIRE(back.metric == ds.metric);
    REQUIRE(back.examples.size() == ds.examples.size());
    for (size_t i = 0; i < ds.examples.size(); ++i) {
        REQUIRE(back.examples[i].label == ds.examples[i].label);
        REQUIRE(back.examples[i].text_a == ds.examples[i].text_a);
        REQUIRE(back.examples[i].text_b == ds.examples[i].text_b);
    }
    REQUIRE_FALSE(back.is_pair_task());
    std::filesystem::remove(path);
}

TEST_CASE("pair datasets keep their second sentence") {
    LabeledDataset ds;
    ds.task = "paraphrase";
    ds.n_classes = 2;
    ds.metric = "f1";
    ds.examples = {{1, "the movie was good", "the film was great"},
                   {0, "the movie was good", "the plot was awful"}};
    const auto path = tmp_path("kdlab_ds_pairs.tsv");
    ds.save_tsv(path);
    LabeledDataset back = LabeledDataset::load_tsv(path);
    REQUIRE(back.is_pair_task());
    REQUIRE(back.metric == "f1");
    REQUIRE(back.examples[1].text_b == "the plot was awful");
    std::filesystem::remove(path);
}

TEST_CASE("dataset loading reports the offending line") {
    const auto path = tmp_path("kdlab_ds_bad.tsv");

    REQUIRE_THROWS_AS(LabeledDataset::load_tsv(tmp_path("kdlab_no_such_ds.tsv")), std::runtime_error);

    write_file(path, "1\tno header here\n");
    REQUIRE_THROWS_WITH(LabeledDataset::load_tsv(path), Catch::Matchers::ContainsSubstring(":1: missing header"));

    write_file(path, "#task=t\tclasses=2\tmetric=accuracy\tcolor=red\n1\tok\n");
    REQUIRE_THROWS_WITH(LabeledDataset::load_tsv(path),
                        Catch::Matchers::ContainsSubstring("unknown header field 'color'"));

    write_file(path, "#task=t\tclasses=2\tmetric=accuracy\n1\tfine\nbanana\talso fine\n");
    REQUIRE_THROWS_WITH(LabeledDataset::load_tsv(path),
                        Catch::Matchers::ContainsSubstring(":3: label 'banana' is not an integer"));

    write_file(path, "#task=t\tclasses=2\tmetric=accuracy\n2\ttoo big\n");
    REQUIRE_THROWS_WITH(LabeledDataset::load_tsv(path),
                        Catch::Matchers::ContainsSubstring(":2: label 2 outside [0, 2)"));

    write_file(path, "#task=t\tclasses=2\tmetric=accuracy\n1\n");
    REQUIRE_THROWS_WITH(LabeledDataset::load_tsv(path),
                        Catch::Matchers::ContainsSubstring("expected 2 or 3 tab-separated columns"));

    write_file(path, "#task=t\tclasses=2\tmetric=accuracy\n1\ta single\n0\ta pair\tsecond half\n");
    REQUIRE_THROWS_WITH(LabeledDataset::load_tsv(path),
                        Catch::Matchers::ContainsSubstring("mixes single-sentence and pair"));

    write_file(path, "");
    REQUIRE_THROWS_WITH(LabeledDataset::load_tsv(path), Catch::Matchers::ContainsSubstring("no header line"));

    std::filesystem::remove(path);
}

TEST_CASE("windows line endings are tolerated") {
    const auto path = tmp_path("kdlab_ds_crlf.tsv");
    write_file(path, "#task=t\tclasses=2\tmetric=accuracy\r\n1\tgood movie\r\n");
    LabeledDataset ds = LabeledDataset::load_tsv(path);
    REQUIRE(ds.examples.size() == 1);
    REQUIRE(ds.examples[0].text_a == "good movie");
    std::filesystem::remove(path);
}

TEST_CASE("training logs round trip through jsonl") {
    TrainingLog log;
    log.steps.push_back({1, 1, 1, "generator", 0.1, 1.5, 1.5, 0.0, 3.25});
    log.steps.push_back({1, 1, 2, "student", 0.1, 0.875, 1.0, 0.75, 4.5});
    log.steps.push_back({2, 1, 3, "student", 1.0, 0.3333333333333333, 0.0, 0.0, 5.0});
    const auto path = tmp_path("kdlab_log_test.jsonl");
    log.save_jsonl(path);

    TrainingLog back = TrainingLog::load_jsonl(path);
    REQUIRE(back.steps.size() == log.steps.size());
    for (size_t i = 0; i < log.steps.size(); ++i) {
        const auto& a = log.steps[i];
        const auto& b = back.steps[i];
        REQUIRE(b.phase == a.phase);
        REQUIRE(b.epoch == a.epoch);
        REQUIRE(b.step == a.step);
        REQUIRE(b.step_type == a.step_type);
        REQUIRE(b.t == a.t);
        REQUIRE(b.loss == a.loss);
        REQUIRE(b.loss_adv == a.loss_adv);
        REQUIRE(b.loss_kd == a.loss_kd);
        REQUIRE(b.wall_ms == 0.0);  // timing is not persisted
    }
    std::filesystem::remove(path);
}

TEST_CASE("saved training logs carry no timing, so equal-seed runs serialize identically") {
    TrainingLog log;
    log.steps.push_back({1, 2, 3, "student", 0.5, 1.25, 0.5, 0.75, 123.456});
    const auto p1 = tmp_path("kdlab_log_a.jsonl");
    const auto p2 = tmp_path("kdlab_log_b.jsonl");
    log.save_jsonl(p1);
    log.steps[0].wall_ms = 999.0;
    log.save_jsonl(p2);
    std::ifstream a(p1), b(p2);
    std::string sa((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
    std::string sb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
    REQUIRE(sa == sb);
    REQUIRE(sa.find("wall") == std::string::npos);
    std::filesystem::remove(p1);
    std::filesystem::remove(p2);
}

TEST_CASE("training log parsing reports the corrupt line") {
    const auto path = tmp_path("kdlab_log_bad.jsonl");
    write_file(path,
               "{\"phase\":1,\"epoch\":1,\"step\":1,\"type\":\"student\",\"t\":0.5,"
               "\"loss\":1.0,\"loss_adv\":0.0,\"loss_kd\":1.0,\"wall_ms\":1.0}\n"
               "this is not json\n");
    REQUIRE_THROWS_WITH(TrainingLog::load_jsonl(path), Catch::Matchers::ContainsSubstring(":2:"));
    REQUIRE_THROWS_AS(TrainingLog::load_jsonl(tmp_path("kdlab_no_such_log.jsonl")), std::runtime_error);
    std::filesystem::remove(path);
}

TEST_CASE("evaluation reports round trip through csv") {
    EvalReport rep;
    rep.cells.push_back({"student", "sentiment", "accuracy", 1.0 / 3.0, 40});
    rep.cells.push_back({"student", "paraphrase", "f1", 0.1, 25});
    rep.cells.push_back({"teacher", "sentiment", "accuracy", 0.97499999999999998, 40});
    const auto path = tmp_path("kdlab_report_test.csv");
    rep.save_csv(path);

    EvalReport back = EvalReport::load_csv(path);
    REQUIRE(back.cells.size() == rep.cells.size());
    for (size_t i = 0; i < rep.cells.size(); ++i) {
        REQUIRE(back.cells[i].model_id == rep.cells[i].model_id);
        REQUIRE(back.cells[i].dataset == rep.cells[i].dataset);
        REQUIRE(back.cells[i].metric == rep.cells[i].metric);
        REQUIRE(back.cells[i].value == rep.cells[i].value);  // %.17g keeps every bit
        REQUIRE(back.cells[i].n == rep.cells[i].n);
    }
    REQUIRE(back.average_by_dataset("student") == rep.average_by_dataset("student"));
    REQUIRE(back.average_by_sample_size("student") == rep.average_by_sample_size("student"));
    std::filesystem::remove(path);
}

TEST_CASE("report loading rejects malformed rows") {
    const auto path = tmp_path("kdlab_report_bad.csv");
    write_file(path, "model,dataset,metric,value,n\nstudent,sentiment,accuracy\n");
    REQUIRE_THROWS_WITH(EvalReport::load_csv(path), Catch::Matchers::ContainsSubstring(":2: malformed row"));
    REQUIRE_THROWS_AS(EvalReport::load_csv(tmp_path("kdlab_no_such_report.csv")), std::runtime_error);
    std::filesystem::remove(path);
}
