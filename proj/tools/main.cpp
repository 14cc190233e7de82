#include <exception>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "spikegpt/harness.hpp"

namespace sg = spikegpt;

namespace {

void apply_config_pair(CLI::App* cmd, const std::string& key, const std::string& text,
                       const std::string& path) {
  CLI::Option* opt = cmd->get_option_no_throw("--" + key);
  if (!opt) throw sg::ConfigError("config: unknown option '" + key + "' in " + path);
  if (opt->count() == 0) {  // command-line flags take precedence
    opt->clear();
    opt->add_result(text);
    opt->run_callback();
  }
}

// Flat JSON object mapping keys onto long option names.
void apply_json_config(CLI::App* cmd, const std::string& path) {
  nlohmann::json j = nlohmann::json::parse(sg::read_file(path));
  if (!j.is_object()) throw sg::ConfigError("config: expected a JSON object: " + path);
  for (auto& [key, value] : j.items()) {
    std::string text = value.is_string() ? value.get<std::string>() : value.dump();
    apply_config_pair(cmd, key, text, path);
  }
}

// Flat TOML: `key = value` lines, # comments, optional quotes.
void apply_toml_config(CLI::App* cmd, const std::string& path) {
  std::istringstream is(sg::read_file(path));
  std::string line;
  auto trim = [](std::string s) {
    size_t a = s.find_first_not_of(" \t\r");
    size_t b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
  };
  while (std::getline(is, line)) {
    size_t hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty() || line.front() == '[') continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw sg::ConfigError("config: malformed line '" + line + "' in " + path);
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (value.size() >= 2 && ((value.front() == '"' && value.back() == '"') ||
                              (value.front() == '\'' && value.back() == '\'')))
      value = value.substr(1, value.size() - 2);
    apply_config_pair(cmd, key, value, path);
  }
}

void apply_config(CLI::App* cmd, const std::string& path) {
  if (path.size() > 5 && path.substr(path.size() - 5) == ".json")
    apply_json_config(cmd, path);
  else
    apply_toml_config(cmd, path);
}

int guarded(const std::function<void()>& fn) {
  try {
    fn();
    return sg::kExitOk;
  } catch (const sg::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return sg::kExitConfig;
  } catch (const sg::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return sg::kExitData;
  } catch (const sg::IoError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return sg::kExitData;
  } catch (const sg::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return sg::kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return sg::kExitError;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"spikegpt: spiking RWKV character-level language model"};
  app.require_subcommand(1);

  std::string config_path;

  // ---- train ----
  auto* train = app.add_subcommand("train", "train a model on a text corpus");
  sg::TrainOptions to;
  train->add_option("--data", to.data_path, "UTF-8 text corpus")->required();
  train->add_option("--out", to.out_dir, "output directory for checkpoints and metrics");
  train->add_option("--layers", to.layers, "number of blocks");
  train->add_option("--embed", to.embed, "embedding size");
  train->add_option("--ctx", to.ctx, "training context length");
  train->add_option("--mode", to.mode, "spiking mode: lif, heaviside or none");
  train->add_option("--dropout", to.dropout, "dropout after each SRFFN block");
  train->add_option("--beta", to.beta, "LIF decay factor");
  train->add_option("--alpha", to.alpha, "surrogate gradient width");
  train->add_option("--p-k", to.p_k, "current-token bonus init");
  train->add_option("--steps", to.steps, "training steps");
  train->add_option("--batch", to.batch, "sequences per step");
  train->add_option("--lr", to.lr, "peak learning rate");
  train->add_option("--warmup", to.warmup, "linear warmup steps");
  train->add_option("--lr-schedule", to.lr_schedule, "after warmup: constant or cosine");
  train->add_option("--seed", to.seed, "RNG seed");
  train->add_option("--train-frac", to.split.train, "training fraction of the corpus");
  train->add_option("--val-frac", to.split.val, "validation fraction of the corpus");
  train->add_option("--val-interval", to.val_interval, "steps between validation passes");
  train->add_option("--val-windows", to.val_window_cap, "windows per interim validation pass");
  train->add_flag("--no-state-carry", [&to](int64_t) { to.state_carry = false; },
                  "reset recurrent state at every chunk");
  train->add_flag("--untied-head", [&to](int64_t) { to.tied_head = false; },
                  "use a separate output projection instead of the embedding");
  train->add_flag("--json", to.json_out, "emit a machine-readable summary line");
  train->add_option("--config", config_path, "JSON or TOML config file");

  // ---- eval ----
  auto* eval = app.add_subcommand("eval", "evaluate BPC/PPL on a corpus split");
  sg::EvalOptions eo;
  eval->add_option("--ckpt", eo.checkpoint, "checkpoint path")->required();
  eval->add_option("--data", eo.data_path, "UTF-8 text corpus")->required();
  eval->add_option("--split", eo.split, "train, val, test or all");
  eval->add_option("--train-frac", eo.split_spec.train, "training fraction");
  eval->add_option("--val-frac", eo.split_spec.val, "validation fraction");
  eval->add_flag("--dual-check", eo.dual_check, "also evaluate through the convolution form");
  eval->add_flag("--json", eo.json_out, "emit a machine-readable summary line");

  // ---- generate ----
  auto* gen = app.add_subcommand("generate", "continue a prompt");
  sg::GenerateOptions go;
  gen->add_option("--ckpt", go.checkpoint, "checkpoint path")->required();
  gen->add_option("--prompt", go.prompt, "prompt text")->required();
  gen->add_option("--tokens", go.n_tokens, "number of tokens to generate");
  gen->add_option("--sampling", go.sampling, "greedy, temperature or top-k");
  gen->add_option("--temperature", go.temperature, "softmax temperature");
  gen->add_option("--top-k", go.top_k, "top-k cutoff");
  gen->add_option("--seed", go.seed, "sampling seed");
  gen->add_flag("--json", go.json_out, "emit a machine-readable summary line");

  // ---- classify-train ----
  auto* ctr = app.add_subcommand("classify-train", "fine-tune a classifier on a TSV dataset");
  sg::ClassifyTrainOptions co;
  ctr->add_option("--data", co.data_path, "label<TAB>text training file")->required();
  ctr->add_option("--test", co.test_path, "optional test TSV (default: seeded 10% holdout)");
  ctr->add_option("--ckpt", co.base_checkpoint, "pretrained LM checkpoint to start from");
  ctr->add_option("--out", co.out_checkpoint, "output classifier checkpoint");
  ctr->add_option("--epochs", co.epochs, "fine-tuning epochs");
  ctr->add_option("--batch", co.batch, "samples per step");
  ctr->add_option("--lr", co.lr, "learning rate");
  ctr->add_option("--seed", co.seed, "RNG seed");
  ctr->add_flag("--head-only", [&co](int64_t) { co.tune_backbone = false; },
                "freeze the backbone, tune only the class head");
  ctr->add_option("--layers", co.layers, "fresh-backbone blocks (no --ckpt)");
  ctr->add_option("--embed", co.embed, "fresh-backbone embedding size (no --ckpt)");
  ctr->add_option("--ctx", co.ctx, "fresh-backbone context length (no --ckpt)");
  ctr->add_option("--mode", co.mode, "fresh-backbone spiking mode (no --ckpt)");
  ctr->add_flag("--json", co.json_out, "emit a machine-readable summary line");

  // ---- classify-eval ----
  auto* cev = app.add_subcommand("classify-eval", "evaluate a classifier on a TSV dataset");
  sg::ClassifyEvalOptions ceo;
  cev->add_option("--ckpt", ceo.checkpoint, "classifier checkpoint")->required();
  cev->add_option("--data", ceo.data_path, "label<TAB>text test file")->required();
  cev->add_flag("--json", ceo.json_out, "emit a machine-readable summary line");

  // ---- profile ----
  auto* prof = app.add_subcommand("profile", "SynOps accounting and spike rasters");
  sg::ProfileOptions po;
  prof->add_option("--ckpt", po.checkpoint, "checkpoint path")->required();
  prof->add_option("--data", po.data_path, "text file to profile");
  prof->add_option("--text", po.text, "inline text to profile");
  prof->add_option("--out", po.out_dir, "directory for raster CSVs");
  prof->add_flag("--json", po.json_out, "emit the full ledger as JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : sg::kExitConfig;
  }

  return guarded([&] {
    if (train->parsed()) {
      if (!config_path.empty()) apply_config(train, config_path);
      sg::train_run(to, std::cout);
    } else if (eval->parsed()) {
      sg::eval_run(eo, std::cout);
    } else if (gen->parsed()) {
      sg::generate_run(go, std::cout);
    } else if (ctr->parsed()) {
      sg::classify_train_run(co, std::cout);
    } else if (cev->parsed()) {
      sg::classify_eval_run(ceo, std::cout);
    } else if (prof->parsed()) {
      sg::profile_cmd_run(po, std::cout);
    }
  });
}
