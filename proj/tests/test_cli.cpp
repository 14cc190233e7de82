#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "spikegpt/harness.hpp"
#include "spikegpt/tokenizer.hpp"

using namespace spikegpt;
namespace fs = std::filesystem;

namespace {

const std::string kCorpus = std::string(TEST_DATA_DIR) + "/tiny_corpus.txt";

TrainOptions small_train(const std::string& out_dir) {
  TrainOptions o;
  o.data_path = kCorpus;
  o.out_dir = out_dir;
  o.layers = 1;
  o.embed = 16;
  o.ctx = 32;
  o.steps = 8;
  o.warmup = 4;
  o.batch = 1;
  o.val_interval = 4;
  o.val_window_cap = 2;
  o.seed = 5;
  return o;
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::trunc);
  f << content;
}

}  // namespace

TEST_CASE("tokenizer: round trip, unknown policy, vocab size") {
  CharTokenizer tok = CharTokenizer::build("hello world");
  // distinct: h e l o ' ' w r d -> 8 observed + unknown slot
  CHECK(tok.vocab_size() == 9);
  auto ids = tok.encode("hello world");
  CHECK(tok.decode(ids) == "hello world");
  for (int32_t id : ids) CHECK(id != 0);

  auto unknown = tok.encode("xyz");
  for (int32_t id : unknown) CHECK(id == 0);
  CHECK(tok.decode(unknown) == "???");

  CharTokenizer back = CharTokenizer::from_json(tok.to_json());
  CHECK(back.vocab_size() == tok.vocab_size());
  CHECK(back.decode(back.encode("hello world")) == "hello world");
  CHECK_THROWS_AS(CharTokenizer::build(""), DataError);
  CHECK_THROWS_AS(tok.decode({42}), VocabError);
}

TEST_CASE("corpus splits: 90/5/5 contiguous") {
  std::vector<int32_t> toks(1000);
  for (size_t i = 0; i < toks.size(); ++i) toks[i] = static_cast<int32_t>(i);
  CorpusSplits s = split_tokens(toks, SplitSpec{});
  CHECK(s.train.size() == 900);
  CHECK(s.val.size() == 50);
  CHECK(s.test.size() == 50);
  CHECK(s.train.front() == 0);
  CHECK(s.val.front() == 900);
  CHECK(s.test.front() == 950);
  CHECK_THROWS_AS(split_tokens(toks, SplitSpec{0.8, 0.4}), ConfigError);
}

TEST_CASE("warmup schedule: lr at step 250 is half of 6e-4, constant afterwards") {
  TrainOptions o;
  o.lr = 6e-4;
  o.warmup = 500;
  o.steps = 2000;
  CHECK(lr_at_step(o, 250) == doctest::Approx(0.5 * 6e-4).epsilon(1e-12));
  CHECK(lr_at_step(o, 500) == doctest::Approx(6e-4).epsilon(1e-12));
  CHECK(lr_at_step(o, 1700) == doctest::Approx(6e-4).epsilon(1e-12));
  o.lr_schedule = "cosine";
  CHECK(lr_at_step(o, 2000) == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(lr_at_step(o, 250) == doctest::Approx(0.5 * 6e-4).epsilon(1e-12));
}

TEST_CASE("train: two runs with one seed produce identical metric logs") {
  std::ostringstream sink;
  TrainOptions a = small_train("cli_det_a");
  TrainOptions b = small_train("cli_det_b");
  train_run(a, sink);
  train_run(b, sink);
  CHECK(slurp("cli_det_a/metrics.jsonl") == slurp("cli_det_b/metrics.jsonl"));
  fs::remove_all("cli_det_a");
  fs::remove_all("cli_det_b");
}

TEST_CASE("train: metrics log is one JSON object per line with loss and lr") {
  std::ostringstream sink;
  TrainOptions o = small_train("cli_metrics");
  TrainResult r = train_run(o, sink);
  std::ifstream f(r.metrics_path);
  std::string line;
  int64_t lines = 0;
  while (std::getline(f, line)) {
    auto j = nlohmann::json::parse(line);  // throws on malformed lines
    CHECK(j.contains("step"));
    CHECK(j.contains("loss"));
    CHECK(j.contains("lr"));
    ++lines;
  }
  CHECK(lines == o.steps);
  CHECK(r.train_losses.size() == static_cast<size_t>(o.steps));
  fs::remove_all("cli_metrics");
}

TEST_CASE("train then eval: saved checkpoint reproduces the final validation BPC") {
  std::ostringstream sink;
  TrainOptions o = small_train("cli_eval");
  TrainResult r = train_run(o, sink);

  EvalOptions eo;
  eo.checkpoint = r.last_checkpoint;
  eo.data_path = kCorpus;
  eo.split = "val";
  EvalResult ev = eval_run(eo, sink);
  CHECK(ev.bpc == doctest::Approx(r.final_val_bpc).epsilon(1e-12));
  CHECK(ev.bpc == doctest::Approx(ev.loss / std::log(2.0)).epsilon(1e-12));
  CHECK(ev.ppl == doctest::Approx(std::exp(ev.loss)).epsilon(1e-12));

  // determinism: evaluating twice is bit-identical
  EvalResult ev2 = eval_run(eo, sink);
  CHECK(ev.loss == ev2.loss);
  fs::remove_all("cli_eval");
}

TEST_CASE("eval: windowed serial evaluation matches the convolution form closely") {
  std::ostringstream sink;
  TrainOptions o = small_train("cli_dual");
  o.steps = 20;
  o.warmup = 5;
  TrainResult r = train_run(o, sink);
  EvalOptions eo;
  eo.checkpoint = r.last_checkpoint;
  eo.data_path = kCorpus;
  eo.split = "val";
  eo.dual_check = true;
  EvalResult ev = eval_run(eo, sink);
  CHECK(std::fabs(ev.dual_bpc - ev.bpc) <= 1e-4);
  fs::remove_all("cli_dual");
}

TEST_CASE("generate: greedy is deterministic, prompt excluded, temperature limit") {
  std::ostringstream sink;
  TrainOptions o = small_train("cli_gen");
  TrainResult r = train_run(o, sink);

  GenerateOptions go;
  go.checkpoint = r.last_checkpoint;
  go.prompt = "the river";
  go.n_tokens = 24;
  GenerateResult g1 = generate_run(go, sink);
  GenerateResult g2 = generate_run(go, sink);
  CHECK(g1.text == g2.text);
  CHECK(g1.text.size() == 24);
  CHECK(g1.text.find("the river") != 0);  // continuation only; echo would start with the prompt

  GenerateOptions cold = go;
  cold.sampling = "temperature";
  cold.temperature = 1e-9;
  CHECK(generate_run(cold, sink).text == g1.text);

  GenerateOptions bad = go;
  bad.sampling = "top-k";
  bad.top_k = 0;
  CHECK_THROWS_AS(generate_run(bad, sink), ConfigError);
  fs::remove_all("cli_gen");
}

TEST_CASE("tsv loading: labels sorted, errors on malformed rows") {
  write_file("cli_ok.tsv", "pos\tgreat day\nneg\tbad day\npos\tfine work\n");
  TsvDataset d = load_tsv("cli_ok.tsv");
  CHECK(d.labels == std::vector<std::string>{"neg", "pos"});
  CHECK(d.targets == std::vector<int32_t>{1, 0, 1});
  std::remove("cli_ok.tsv");

  write_file("cli_notab.tsv", "pos great day\n");
  CHECK_THROWS_AS(load_tsv("cli_notab.tsv"), DataError);
  std::remove("cli_notab.tsv");

  write_file("cli_empty.tsv", "");
  CHECK_THROWS_AS(load_tsv("cli_empty.tsv"), DataError);
  std::remove("cli_empty.tsv");

  CHECK_THROWS_AS(load_tsv("cli_missing.tsv"), IoError);
}

TEST_CASE("classify: empty test file is an error, not accuracy 1.0") {
  write_file("cli_train.tsv", "a\tgood good good\nb\tbad bad bad\na\tgood fine\nb\tpoor bad\n");
  write_file("cli_test_empty.tsv", "");
  ClassifyTrainOptions o;
  o.data_path = "cli_train.tsv";
  o.test_path = "cli_test_empty.tsv";
  o.epochs = 1;
  o.layers = 1;
  o.embed = 16;
  o.ctx = 16;
  std::ostringstream sink;
  CHECK_THROWS_AS(classify_train_run(o, sink), DataError);
  std::remove("cli_train.tsv");
  std::remove("cli_test_empty.tsv");
}

TEST_CASE("classify: swapping labels permutes the confusion matrix exactly") {
  // Build a small two-class set; train twice with labels swapped under the
  // same seed. The zero-initialized head makes fine-tuning exactly
  // permutation-equivariant, so the confusion matrix must transpose its
  // indices.
  std::ostringstream tsv1, tsv2;
  Rng rng(123);
  const char* pos_words[] = {"good", "fine", "happy", "bright"};
  const char* neg_words[] = {"bad", "poor", "sad", "gloomy"};
  for (int i = 0; i < 40; ++i) {
    bool pos = i % 2 == 0;
    const char* w = pos ? pos_words[rng.below(4)] : neg_words[rng.below(4)];
    std::string text = std::string("the day was ") + w + " indeed";
    tsv1 << (pos ? "1" : "0") << "\t" << text << "\n";
    tsv2 << (pos ? "0" : "1") << "\t" << text << "\n";  // swapped labels
  }
  write_file("cli_sym1.tsv", tsv1.str());
  write_file("cli_sym2.tsv", tsv2.str());

  auto opts = [](const std::string& data, const std::string& out) {
    ClassifyTrainOptions o;
    o.data_path = data;
    o.out_checkpoint = out;
    o.epochs = 2;
    o.batch = 4;
    o.layers = 1;
    o.embed = 16;
    o.ctx = 32;
    o.seed = 9;
    return o;
  };
  std::ostringstream sink;
  ClassifyResult r1 = classify_train_run(opts("cli_sym1.tsv", "cli_sym1.ckpt"), sink);
  ClassifyResult r2 = classify_train_run(opts("cli_sym2.tsv", "cli_sym2.ckpt"), sink);
  REQUIRE(r1.confusion.size() == 2);
  REQUIRE(r2.confusion.size() == 2);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) CHECK(r1.confusion[i][j] == r2.confusion[1 - i][1 - j]);
  CHECK(r1.accuracy == r2.accuracy);
  std::remove("cli_sym1.tsv");
  std::remove("cli_sym2.tsv");
  std::remove("cli_sym1.ckpt");
  std::remove("cli_sym2.ckpt");
}

TEST_CASE("classify eval: round trip through a saved classifier checkpoint") {
  write_file("cli_ce.tsv",
             "up\tgood fine happy\ndown\tbad poor sad\nup\tfine good day\ndown\tsad bad day\n"
             "up\thappy fine good\ndown\tpoor sad bad\nup\tgood happy\ndown\tbad sad\n"
             "up\tfine happy\ndown\tpoor bad\nup\tgood day fine\ndown\tsad poor day\n");
  ClassifyTrainOptions o;
  o.data_path = "cli_ce.tsv";
  o.out_checkpoint = "cli_ce.ckpt";
  o.epochs = 3;
  o.batch = 4;
  o.layers = 1;
  o.embed = 16;
  o.ctx = 24;
  std::ostringstream sink;
  ClassifyResult trained = classify_train_run(o, sink);

  ClassifyEvalOptions eo;
  eo.checkpoint = "cli_ce.ckpt";
  eo.data_path = "cli_ce.tsv";
  ClassifyResult r = classify_eval_run(eo, sink);
  CHECK(r.samples == 12);
  CHECK(r.labels == std::vector<std::string>{"down", "up"});

  write_file("cli_ce_bad.tsv", "sideways\tconfusing text\n");
  eo.data_path = "cli_ce_bad.tsv";
  CHECK_THROWS_AS(classify_eval_run(eo, sink), DataError);
  std::remove("cli_ce.tsv");
  std::remove("cli_ce.ckpt");
  std::remove("cli_ce_bad.tsv");
}

TEST_CASE("profile command: ledger and raster files on disk") {
  std::ostringstream sink;
  TrainOptions o = small_train("cli_prof");
  TrainResult r = train_run(o, sink);
  ProfileOptions po;
  po.checkpoint = r.last_checkpoint;
  po.text = "the miller crossed the bridge";
  po.out_dir = "cli_prof_raster";
  ProfileResult pr = profile_cmd_run(po, sink);
  CHECK(pr.ledger.tokens == 29);
  CHECK(!pr.raster_files.empty());
  for (const auto& f : pr.raster_files) CHECK(fs::exists(f));
  CHECK_THROWS_AS(profile_cmd_run(ProfileOptions{r.last_checkpoint, "", "", ""}, sink),
                  ConfigError);
  fs::remove_all("cli_prof");
  fs::remove_all("cli_prof_raster");
}

#ifdef CLI_PATH
TEST_CASE("cli binary: exit codes distinguish config, data and success") {
  std::string cli = CLI_PATH;
  auto run = [&](const std::string& args) {
    std::string cmd = cli + " " + args + " >/dev/null 2>&1";
    int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
  };
  CHECK(run("train --data /nonexistent/corpus.txt --out cli_x --steps 2 --warmup 1") == 3);
  CHECK(run("train --data " + kCorpus + " --steps 2 --warmup 5 --out cli_x") == 2);  // warmup > steps
  CHECK(run("--bogus-flag") == 2);
  CHECK(run("eval --ckpt /nonexistent.ckpt --data " + kCorpus) == 3);
  CHECK(run("train --data " + kCorpus +
            " --out cli_exit_ok --steps 2 --warmup 1 --layers 1 --embed 16 --ctx 32 --batch 1"
            " --val-interval 2 --val-windows 1") == 0);
  fs::remove_all("cli_exit_ok");
  fs::remove_all("cli_x");
}

TEST_CASE("cli binary: --json emits machine-readable output; config file applies") {
  std::string cli = CLI_PATH;
  write_file("cli_cfg.json", R"({"steps": 2, "warmup": 1, "layers": 1, "embed": 16, "ctx": 32,)"
                             R"( "batch": 1, "val-interval": 2, "val-windows": 1})");
  std::string cmd = cli + " train --data " + kCorpus +
                    " --out cli_json_run --config cli_cfg.json --json > cli_json_out.txt 2>&1";
  REQUIRE(WEXITSTATUS(std::system(cmd.c_str())) == 0);
  std::string out = slurp("cli_json_out.txt");
  size_t brace = out.rfind("\n{");
  REQUIRE(brace != std::string::npos);
  auto j = nlohmann::json::parse(out.substr(brace + 1));
  CHECK(j.contains("final_val_bpc"));
  CHECK(j.contains("checkpoint"));
  std::remove("cli_cfg.json");
  std::remove("cli_json_out.txt");
  fs::remove_all("cli_json_run");
}
#endif
