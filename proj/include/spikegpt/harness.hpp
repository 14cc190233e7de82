#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "spikegpt/model.hpp"
#include "spikegpt/synops.hpp"
#include "spikegpt/tokenizer.hpp"

namespace spikegpt {

// Exit codes shared by every subcommand.
enum ExitCode : int {
  kExitOk = 0,
  kExitError = 1,    // unexpected / internal
  kExitConfig = 2,   // flag or config problems
  kExitData = 3,     // corpus, dataset, file problems
  kExitNumeric = 4,  // NaN/Inf during compute
};

std::string read_file(const std::string& path);

struct SplitSpec {
  double train = 0.90;
  double val = 0.05;  // test = 1 - train - val
};

// Contiguous 90/5/5 token split.
struct CorpusSplits {
  std::vector<int32_t> train, val, test;
};
CorpusSplits split_tokens(const std::vector<int32_t>& tokens, const SplitSpec& spec);

struct TrainOptions {
  std::string data_path;
  std::string out_dir = "run";
  int64_t layers = 4;
  int64_t embed = 128;
  int64_t ctx = 256;
  std::string mode = "lif";
  double dropout = 0.03;
  double beta = 0.5;
  double alpha = 2.0;
  double p_k = 0.3;
  bool tied_head = true;
  int64_t steps = 2000;
  int64_t batch = 2;
  double lr = 6e-4;
  int64_t warmup = 500;
  std::string lr_schedule = "constant";  // after warmup: constant | cosine
  uint64_t seed = 1;
  SplitSpec split;
  int64_t val_interval = 100;
  int64_t val_window_cap = 32;  // windows per interim validation pass
  bool state_carry = true;
  bool json_out = false;
  void validate() const;
};

struct TrainResult {
  std::string checkpoint;       // best-validation checkpoint path
  std::string last_checkpoint;  // final-step checkpoint path
  std::string metrics_path;
  double best_val_bpc = 0.0;
  double final_val_bpc = 0.0;
  int64_t vocab = 0;
  std::vector<double> train_losses;  // one entry per step
};

double lr_at_step(const TrainOptions& o, int64_t step);
TrainResult train_run(const TrainOptions& o, std::ostream& out);

struct EvalOptions {
  std::string checkpoint;
  std::string data_path;
  std::string split = "test";  // train | val | test | all
  SplitSpec split_spec;
  bool dual_check = false;  // recompute through the convolution form
  bool json_out = false;
};

struct EvalResult {
  double loss = 0.0;
  double bpc = 0.0;
  double ppl = 0.0;
  int64_t tokens = 0;
  double dual_bpc = 0.0;  // convolution-form BPC when dual_check is set
};

EvalResult eval_run(const EvalOptions& o, std::ostream& out);

struct GenerateOptions {
  std::string checkpoint;
  std::string prompt;
  int64_t n_tokens = 128;
  std::string sampling = "greedy";  // greedy | temperature | top-k
  double temperature = 1.0;
  int top_k = 0;
  uint64_t seed = 1;
  bool json_out = false;
};

struct GenerateResult {
  std::string text;  // generated continuation only (prompt excluded)
};

GenerateResult generate_run(const GenerateOptions& o, std::ostream& out);

struct TsvDataset {
  std::vector<std::string> labels;  // sorted unique label names
  std::vector<int32_t> targets;     // per sample: index into labels
  std::vector<std::string> texts;
};
TsvDataset load_tsv(const std::string& path);

struct ClassifyTrainOptions {
  std::string base_checkpoint;  // optional pretrained LM backbone
  std::string data_path;        // label<TAB>text
  std::string test_path;        // optional; default: seeded 10% holdout
  std::string out_checkpoint = "classifier.ckpt";
  int64_t epochs = 4;
  int64_t batch = 8;
  double lr = 1e-3;
  uint64_t seed = 1;
  bool tune_backbone = true;
  // Fresh-backbone dimensions, used only when base_checkpoint is empty.
  int64_t layers = 2;
  int64_t embed = 64;
  int64_t ctx = 64;
  std::string mode = "lif";
  bool json_out = false;
};

struct ClassifyResult {
  double accuracy = 0.0;
  std::vector<std::string> labels;
  std::vector<std::vector<int64_t>> confusion;  // [true][predicted]
  int64_t samples = 0;
};

ClassifyResult classify_train_run(const ClassifyTrainOptions& o, std::ostream& out);

struct ClassifyEvalOptions {
  std::string checkpoint;
  std::string data_path;
  bool json_out = false;
};

ClassifyResult classify_eval_run(const ClassifyEvalOptions& o, std::ostream& out);

struct ProfileOptions {
  std::string checkpoint;
  std::string data_path;  // one of data_path / text
  std::string text;
  std::string out_dir;  // when set, raster CSVs are written here
  bool json_out = false;
};

struct ProfileResult {
  SynopsLedger ledger;
  std::vector<std::string> raster_files;
};

ProfileResult profile_cmd_run(const ProfileOptions& o, std::ostream& out);

}  // namespace spikegpt
