#include "spikegpt/harness.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "spikegpt/adam.hpp"
#include "spikegpt/rng.hpp"

namespace spikegpt {

namespace fs = std::filesystem;
using Model = SpikeGpt<float>;

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open file: " + path);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

CorpusSplits split_tokens(const std::vector<int32_t>& tokens, const SplitSpec& spec) {
  if (spec.train <= 0.0 || spec.val < 0.0 || spec.train + spec.val > 1.0)
    throw ConfigError("split fractions must satisfy train > 0, val >= 0, train + val <= 1");
  int64_t n = static_cast<int64_t>(tokens.size());
  int64_t n_train = static_cast<int64_t>(static_cast<double>(n) * spec.train);
  int64_t n_val = static_cast<int64_t>(static_cast<double>(n) * spec.val);
  CorpusSplits s;
  s.train.assign(tokens.begin(), tokens.begin() + n_train);
  s.val.assign(tokens.begin() + n_train, tokens.begin() + n_train + n_val);
  s.test.assign(tokens.begin() + n_train + n_val, tokens.end());
  return s;
}

void TrainOptions::validate() const {
  if (steps < 1) throw ConfigError("train: steps must be >= 1");
  if (batch < 1) throw ConfigError("train: batch must be >= 1");
  if (warmup < 0 || warmup > steps) throw ConfigError("train: warmup must be in [0, steps]");
  if (lr <= 0.0) throw ConfigError("train: lr must be > 0");
  if (val_interval < 1) throw ConfigError("train: val-interval must be >= 1");
  if (lr_schedule != "constant" && lr_schedule != "cosine")
    throw ConfigError("train: unknown lr schedule '" + lr_schedule + "'");
}

double lr_at_step(const TrainOptions& o, int64_t step) {
  double base = o.lr;
  if (o.warmup > 0 && step <= o.warmup)
    return base * static_cast<double>(step) / static_cast<double>(o.warmup);
  if (o.lr_schedule == "cosine" && o.steps > o.warmup) {
    double t = static_cast<double>(step - o.warmup) / static_cast<double>(o.steps - o.warmup);
    return base * 0.5 * (1.0 + std::cos(t * 3.14159265358979323846));
  }
  return base;
}

namespace {

void model_zero_grad(Model& m) {
  for (auto& [name, p] : m.parameters()) {
    auto& g = p.raw_grad();
    if (!g.empty()) std::fill(g.begin(), g.end(), 0.0f);
  }
}

// Mean NLL over non-overlapping context windows with per-window state reset.
// Returns (total nll, predicted tokens).
std::pair<double, int64_t> windowed_nll(Model& m, const std::vector<int32_t>& toks, WkvForm form,
                                        int64_t max_windows = -1) {
  int64_t ctx = m.config().ctx;
  int64_t n = static_cast<int64_t>(toks.size());
  double nll = 0.0;
  int64_t count = 0, windows = 0, pos = 0;
  while (pos + 1 < n && (max_windows < 0 || windows < max_windows)) {
    int64_t len = std::min<int64_t>(ctx, n - 1 - pos);
    std::vector<int32_t> inputs(toks.begin() + pos, toks.begin() + pos + len);
    std::vector<int32_t> targets(toks.begin() + pos + 1, toks.begin() + pos + 1 + len);
    ModelState<float> st = m.fresh_state();
    Tensor<float> logits = m.forward_lm(inputs, &st, false, form);
    nll += static_cast<double>(m.lm_loss(logits, targets).item()) * static_cast<double>(len);
    count += len;
    pos += len;
    ++windows;
  }
  if (count == 0) throw DataError("eval: split is too small to evaluate");
  return {nll, count};
}

ModelConfig config_from_train_options(const TrainOptions& o, int64_t vocab) {
  ModelConfig cfg;
  cfg.layers = o.layers;
  cfg.embed = o.embed;
  cfg.ctx = o.ctx;
  cfg.vocab = vocab;
  cfg.mode = spike_mode_from(o.mode);
  cfg.beta = o.beta;
  cfg.alpha = o.alpha;
  cfg.p_k = o.p_k;
  cfg.dropout = o.dropout;
  cfg.tied_head = o.tied_head;
  cfg.seed = o.seed;
  return cfg;
}

void copy_weights_by_name(Model& dst, const Model& src) {
  for (const auto& [name, p] : src.parameters()) {
    for (auto& [dname, dp] : dst.parameters()) {
      if (dname == name) {
        if (dp.shape() != p.shape())
          throw ShapeError("weight copy: shape mismatch for '" + name + "'");
        dp.raw_value() = p.value();
        break;
      }
    }
  }
}

std::vector<int32_t> encode_clipped(const CharTokenizer& tok, const std::string& text, int64_t ctx) {
  std::vector<int32_t> ids = tok.encode(text);
  if (static_cast<int64_t>(ids.size()) > ctx) ids.resize(static_cast<size_t>(ctx));
  return ids;
}

}  // namespace

TrainResult train_run(const TrainOptions& o, std::ostream& out) {
  o.validate();
  std::string corpus = read_file(o.data_path);
  if (corpus.empty()) throw DataError("train: corpus is empty: " + o.data_path);
  CharTokenizer tok = CharTokenizer::build(corpus);
  std::vector<int32_t> all = tok.encode(corpus);
  CorpusSplits splits = split_tokens(all, o.split);

  int64_t ctx = o.ctx;
  int64_t n_chunks = (static_cast<int64_t>(splits.train.size()) - 1) / ctx;
  if (n_chunks < 1)
    throw DataError("train: corpus too small for context length " + std::to_string(ctx));

  ModelConfig cfg = config_from_train_options(o, tok.vocab_size());
  Model model(cfg);
  Adam<float> adam(model.parameters(), AdamConfig{o.lr});
  Rng order_rng(o.seed ^ 0x5eedull);

  fs::create_directories(o.out_dir);
  TrainResult res;
  res.vocab = tok.vocab_size();
  res.metrics_path = (fs::path(o.out_dir) / "metrics.jsonl").string();
  res.checkpoint = (fs::path(o.out_dir) / "best.ckpt").string();
  res.last_checkpoint = (fs::path(o.out_dir) / "last.ckpt").string();
  std::ofstream metrics(res.metrics_path, std::ios::trunc);
  if (!metrics) throw IoError("cannot write metrics log: " + res.metrics_path);

  nlohmann::json extra{{"tokenizer", tok.to_json()}};

  std::vector<int64_t> chunk_order(static_cast<size_t>(n_chunks));
  for (int64_t i = 0; i < n_chunks; ++i) chunk_order[static_cast<size_t>(i)] = i;
  order_rng.shuffle(chunk_order);
  size_t cursor = 0;

  std::vector<ModelState<float>> states;
  for (int64_t b = 0; b < o.batch; ++b) states.push_back(model.fresh_state());

  double best_val = 1e300;
  out << "training: " << n_chunks << " chunks of " << ctx << " tokens, vocab " << tok.vocab_size()
      << ", " << model.param_count() << " parameters\n";

  for (int64_t step = 1; step <= o.steps; ++step) {
    model_zero_grad(model);
    double step_loss = 0.0;
    for (int64_t b = 0; b < o.batch; ++b) {
      if (cursor >= chunk_order.size()) {
        order_rng.shuffle(chunk_order);
        cursor = 0;
      }
      int64_t chunk = chunk_order[cursor++];
      const int32_t* base = splits.train.data() + chunk * ctx;
      std::vector<int32_t> inputs(base, base + ctx);
      std::vector<int32_t> targets(base + 1, base + ctx + 1);
      if (!o.state_carry) states[static_cast<size_t>(b)] = model.fresh_state();
      Tensor<float> logits = model.forward_lm(inputs, &states[static_cast<size_t>(b)], true);
      Tensor<float> loss = model.lm_loss(logits, targets);
      loss.backward(1.0f / static_cast<float>(o.batch));
      Model::detach_state(states[static_cast<size_t>(b)]);
      step_loss += static_cast<double>(loss.item()) / static_cast<double>(o.batch);
    }
    double lr = lr_at_step(o, step);
    adam.step(lr);
    res.train_losses.push_back(step_loss);

    nlohmann::json line{{"step", step}, {"lr", lr}, {"loss", step_loss}};
    if (step % o.val_interval == 0 || step == o.steps) {
      auto [nll, n] = windowed_nll(model, splits.val, WkvForm::serial, o.val_window_cap);
      double vbpc = bpc_from_loss(nll / static_cast<double>(n));
      line["val_bpc"] = vbpc;
      if (vbpc < best_val) {
        best_val = vbpc;
        model.save(res.checkpoint, extra);
      }
      out << "step " << step << "  loss " << step_loss << "  val_bpc " << vbpc << "\n";
    }
    metrics << line.dump() << "\n";
  }
  model.save(res.last_checkpoint, extra);
  res.best_val_bpc = best_val;

  // Final full-validation pass on the last weights.
  auto [nll, n] = windowed_nll(model, splits.val, WkvForm::serial);
  res.final_val_bpc = bpc_from_loss(nll / static_cast<double>(n));
  out << "final val_bpc " << res.final_val_bpc << " (best interim " << res.best_val_bpc << ")\n";
  if (o.json_out) {
    nlohmann::json j{{"final_val_bpc", res.final_val_bpc},
                     {"best_val_bpc", res.best_val_bpc},
                     {"vocab", res.vocab},
                     {"checkpoint", res.checkpoint},
                     {"metrics", res.metrics_path}};
    out << j.dump() << "\n";
  }
  return res;
}

EvalResult eval_run(const EvalOptions& o, std::ostream& out) {
  auto [model, meta] = Model::load(o.checkpoint);
  CharTokenizer tok = CharTokenizer::from_json(meta.at("tokenizer"));
  std::string corpus = read_file(o.data_path);
  if (corpus.empty()) throw DataError("eval: corpus is empty: " + o.data_path);
  std::vector<int32_t> all = tok.encode(corpus);
  std::vector<int32_t> toks;
  if (o.split == "all") {
    toks = all;
  } else {
    CorpusSplits splits = split_tokens(all, o.split_spec);
    if (o.split == "train")
      toks = splits.train;
    else if (o.split == "val")
      toks = splits.val;
    else if (o.split == "test")
      toks = splits.test;
    else
      throw ConfigError("eval: unknown split '" + o.split + "'");
  }
  auto [nll, n] = windowed_nll(model, toks, WkvForm::serial);
  EvalResult r;
  r.tokens = n;
  r.loss = nll / static_cast<double>(n);
  r.bpc = bpc_from_loss(r.loss);
  r.ppl = ppl_from_loss(r.loss);
  out << "split " << o.split << ": " << n << " tokens, loss " << r.loss << ", bpc " << r.bpc
      << ", ppl " << r.ppl << "\n";
  if (o.dual_check) {
    auto [nll2, n2] = windowed_nll(model, toks, WkvForm::conv);
    r.dual_bpc = bpc_from_loss(nll2 / static_cast<double>(n2));
    out << "convolution-form bpc " << r.dual_bpc << " (|diff| " << std::fabs(r.dual_bpc - r.bpc)
        << ")\n";
  }
  if (o.json_out) {
    nlohmann::json j{{"split", o.split}, {"tokens", r.tokens}, {"loss", r.loss},
                     {"bpc", r.bpc},     {"ppl", r.ppl}};
    if (o.dual_check) j["dual_bpc"] = r.dual_bpc;
    out << j.dump() << "\n";
  }
  return r;
}

GenerateResult generate_run(const GenerateOptions& o, std::ostream& out) {
  auto [model, meta] = Model::load(o.checkpoint);
  CharTokenizer tok = CharTokenizer::from_json(meta.at("tokenizer"));
  if (o.prompt.empty()) throw DataError("generate: empty prompt");
  std::vector<int32_t> prompt = tok.encode(o.prompt);

  Sampling s;
  if (o.sampling == "greedy") {
    s.kind = Sampling::Kind::greedy;
  } else if (o.sampling == "temperature") {
    s.kind = Sampling::Kind::temperature;
    s.temperature = o.temperature;
  } else if (o.sampling == "top-k") {
    s.kind = Sampling::Kind::top_k;
    s.temperature = o.temperature;
    s.top_k = o.top_k;
    if (o.top_k < 1) throw ConfigError("generate: top-k sampling needs --top-k >= 1");
  } else {
    throw ConfigError("generate: unknown sampling '" + o.sampling + "'");
  }
  Rng rng(o.seed);
  std::vector<int32_t> ids = model.generate(prompt, o.n_tokens, s, rng);
  GenerateResult r{tok.decode(ids)};
  if (o.json_out)
    out << nlohmann::json{{"text", r.text}}.dump() << "\n";
  else
    out << r.text << "\n";
  return r;
}

TsvDataset load_tsv(const std::string& path) {
  std::string content = read_file(path);
  TsvDataset d;
  std::vector<std::string> raw_labels;
  std::istringstream is(content);
  std::string line;
  int64_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    size_t tab = line.find('\t');
    if (tab == std::string::npos)
      throw DataError("tsv: line " + std::to_string(lineno) + " has no tab separator: " + path);
    std::string label = line.substr(0, tab);
    std::string text = line.substr(tab + 1);
    if (label.empty()) throw DataError("tsv: empty label at line " + std::to_string(lineno));
    if (text.empty()) throw DataError("tsv: empty text at line " + std::to_string(lineno));
    raw_labels.push_back(label);
    d.texts.push_back(text);
  }
  if (d.texts.empty()) throw DataError("tsv: no samples in " + path);
  d.labels = raw_labels;
  std::sort(d.labels.begin(), d.labels.end());
  d.labels.erase(std::unique(d.labels.begin(), d.labels.end()), d.labels.end());
  d.targets.reserve(raw_labels.size());
  for (const auto& l : raw_labels) {
    auto it = std::lower_bound(d.labels.begin(), d.labels.end(), l);
    d.targets.push_back(static_cast<int32_t>(it - d.labels.begin()));
  }
  return d;
}

namespace {

ClassifyResult evaluate_classifier(Model& model, const CharTokenizer& tok,
                                   const std::vector<std::string>& labels,
                                   const TsvDataset& test) {
  ClassifyResult r;
  r.labels = labels;
  int64_t c = static_cast<int64_t>(labels.size());
  r.confusion.assign(static_cast<size_t>(c), std::vector<int64_t>(static_cast<size_t>(c), 0));
  int64_t correct = 0;
  for (size_t i = 0; i < test.texts.size(); ++i) {
    std::vector<int32_t> ids = encode_clipped(tok, test.texts[i], model.config().ctx);
    if (ids.empty()) throw DataError("classify: sample " + std::to_string(i) + " is empty");
    Tensor<float> logits = model.forward_nlu(ids, false);
    const auto& row = logits.value();
    int32_t pred = 0;
    for (int64_t j = 1; j < logits.cols(); ++j)
      if (row[static_cast<size_t>(j)] > row[static_cast<size_t>(pred)]) pred = static_cast<int32_t>(j);
    int32_t truth = test.targets[i];
    r.confusion[static_cast<size_t>(truth)][static_cast<size_t>(pred)]++;
    if (pred == truth) ++correct;
  }
  r.samples = static_cast<int64_t>(test.texts.size());
  r.accuracy = static_cast<double>(correct) / static_cast<double>(r.samples);
  return r;
}

}  // namespace

ClassifyResult classify_train_run(const ClassifyTrainOptions& o, std::ostream& out) {
  TsvDataset all = load_tsv(o.data_path);
  TsvDataset train, test;
  if (!o.test_path.empty()) {
    train = all;
    test = load_tsv(o.test_path);
    // Test labels must exist in the training label set.
    for (const auto& l : test.labels)
      if (!std::binary_search(train.labels.begin(), train.labels.end(), l))
        throw DataError("classify: test label '" + l + "' never seen in training data");
    // Re-index test targets against the training label list.
    std::vector<int32_t> remap;
    for (size_t i = 0; i < test.texts.size(); ++i) {
      const std::string& name = test.labels[static_cast<size_t>(test.targets[i])];
      auto it = std::lower_bound(train.labels.begin(), train.labels.end(), name);
      remap.push_back(static_cast<int32_t>(it - train.labels.begin()));
    }
    test.targets = remap;
    test.labels = train.labels;
  } else {
    // Seeded shuffle, 10% (at least one sample) held out as the test set.
    std::vector<size_t> idx(all.texts.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Rng split_rng(o.seed ^ 0x7e57ull);
    split_rng.shuffle(idx);
    size_t n_test = std::max<size_t>(1, idx.size() / 10);
    if (n_test >= idx.size()) throw DataError("classify: dataset too small to split");
    train.labels = test.labels = all.labels;
    for (size_t i = 0; i < idx.size(); ++i) {
      TsvDataset& dst = i < n_test ? test : train;
      dst.texts.push_back(all.texts[idx[i]]);
      dst.targets.push_back(all.targets[idx[i]]);
    }
  }
  int64_t n_classes = static_cast<int64_t>(train.labels.size());
  if (n_classes < 2) throw DataError("classify: need at least two classes");

  CharTokenizer tok;
  ModelConfig cfg;
  Model* base = nullptr;
  std::optional<std::pair<Model, nlohmann::json>> loaded;
  if (!o.base_checkpoint.empty()) {
    loaded = Model::load(o.base_checkpoint);
    base = &loaded->first;
    tok = CharTokenizer::from_json(loaded->second.at("tokenizer"));
    cfg = base->config();
  } else {
    std::string joined;
    for (const auto& t : train.texts) {
      joined += t;
      joined += '\n';
    }
    tok = CharTokenizer::build(joined);
    cfg.layers = o.layers;
    cfg.embed = o.embed;
    cfg.ctx = o.ctx;
    cfg.vocab = tok.vocab_size();
    cfg.mode = spike_mode_from(o.mode);
    cfg.seed = o.seed;
  }
  cfg.classes = n_classes;
  cfg.seed = o.seed;
  Model model(cfg);
  if (base) copy_weights_by_name(model, *base);

  std::vector<std::pair<std::string, Tensor<float>>> tuned;
  if (o.tune_backbone) {
    tuned = model.parameters();
  } else {
    for (auto& [name, p] : model.parameters())
      if (name == "nlu_head") tuned.emplace_back(name, p);
  }
  Adam<float> adam(tuned, AdamConfig{o.lr});
  Rng order_rng(o.seed ^ 0x0bdaull);

  int64_t n_train = static_cast<int64_t>(train.texts.size());
  std::vector<size_t> order(static_cast<size_t>(n_train));
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  int64_t step = 0;
  for (int64_t epoch = 0; epoch < o.epochs; ++epoch) {
    order_rng.shuffle(order);
    for (int64_t start = 0; start < n_train; start += o.batch) {
      int64_t bsz = std::min<int64_t>(o.batch, n_train - start);
      model_zero_grad(model);
      double loss_sum = 0.0;
      for (int64_t b = 0; b < bsz; ++b) {
        size_t i = order[static_cast<size_t>(start + b)];
        std::vector<int32_t> ids = encode_clipped(tok, train.texts[i], cfg.ctx);
        Tensor<float> logits = model.forward_nlu(ids, true);
        Tensor<float> loss = model.nlu_loss(logits, train.targets[i]);
        loss.backward(1.0f / static_cast<float>(bsz));
        loss_sum += static_cast<double>(loss.item()) / static_cast<double>(bsz);
      }
      adam.step(o.lr);
      ++step;
      if (step % 20 == 0) out << "epoch " << epoch << " step " << step << " loss " << loss_sum << "\n";
    }
  }

  ClassifyResult r = evaluate_classifier(model, tok, train.labels, test);
  nlohmann::json labels_json = nlohmann::json::array();
  for (const auto& l : train.labels) labels_json.push_back(l);
  model.save(o.out_checkpoint, {{"tokenizer", tok.to_json()}, {"labels", labels_json}});
  out << "test accuracy " << r.accuracy << " over " << r.samples << " samples\n";
  if (o.json_out) {
    nlohmann::json j{{"accuracy", r.accuracy}, {"samples", r.samples},
                     {"checkpoint", o.out_checkpoint}};
    out << j.dump() << "\n";
  }
  return r;
}

ClassifyResult classify_eval_run(const ClassifyEvalOptions& o, std::ostream& out) {
  auto [model, meta] = Model::load(o.checkpoint);
  if (model.config().classes <= 0)
    throw ConfigError("classify-eval: checkpoint has no classifier head");
  CharTokenizer tok = CharTokenizer::from_json(meta.at("tokenizer"));
  std::vector<std::string> labels;
  for (const auto& l : meta.at("labels")) labels.push_back(l.get<std::string>());
  TsvDataset test = load_tsv(o.data_path);
  for (const auto& l : test.labels)
    if (std::find(labels.begin(), labels.end(), l) == labels.end())
      throw DataError("classify-eval: label '" + l + "' unknown to this checkpoint");
  std::vector<int32_t> remap;
  for (size_t i = 0; i < test.texts.size(); ++i) {
    const std::string& name = test.labels[static_cast<size_t>(test.targets[i])];
    remap.push_back(static_cast<int32_t>(
        std::find(labels.begin(), labels.end(), name) - labels.begin()));
  }
  test.targets = remap;
  test.labels = labels;
  ClassifyResult r = evaluate_classifier(model, tok, labels, test);
  out << "accuracy " << r.accuracy << " over " << r.samples << " samples\n";
  if (o.json_out)
    out << nlohmann::json{{"accuracy", r.accuracy}, {"samples", r.samples}}.dump() << "\n";
  return r;
}

ProfileResult profile_cmd_run(const ProfileOptions& o, std::ostream& out) {
  auto [model, meta] = Model::load(o.checkpoint);
  CharTokenizer tok = CharTokenizer::from_json(meta.at("tokenizer"));
  std::string text;
  if (!o.text.empty() && !o.data_path.empty())
    throw ConfigError("profile: give either --text or --data, not both");
  if (!o.text.empty())
    text = o.text;
  else if (!o.data_path.empty())
    text = read_file(o.data_path);
  else
    throw ConfigError("profile: need --text or --data");
  if (text.empty()) throw DataError("profile: empty input");
  std::vector<int32_t> tokens = tok.encode(text);

  ProfileResult r;
  if (!o.out_dir.empty()) {
    fs::create_directories(o.out_dir);
    std::string prefix = (fs::path(o.out_dir) / "raster_").string();
    r.raster_files = dump_raster(model, tokens, prefix, &r.ledger);
  } else {
    r.ledger = profile_model(model, tokens);
  }
  out << r.ledger.table();
  if (o.json_out) out << r.ledger.to_json().dump() << "\n";
  return r;
}

}  // namespace spikegpt
