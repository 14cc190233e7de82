#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "spikegpt/adam.hpp"
#include "spikegpt/ops.hpp"
#include "spikegpt/rng.hpp"
#include "spikegpt/rwkv.hpp"
#include "spikegpt/spiking.hpp"
#include "spikegpt/srffn.hpp"
#include "spikegpt/tensor.hpp"

namespace spikegpt {

enum class SpikeMode { lif, heaviside, none };

inline std::string spike_mode_name(SpikeMode m) {
  switch (m) {
    case SpikeMode::lif: return "lif";
    case SpikeMode::heaviside: return "heaviside";
    case SpikeMode::none: return "none";
  }
  return "lif";
}

inline SpikeMode spike_mode_from(const std::string& s) {
  if (s == "lif") return SpikeMode::lif;
  if (s == "heaviside") return SpikeMode::heaviside;
  if (s == "none") return SpikeMode::none;
  throw ConfigError("unknown spiking mode '" + s + "' (expected lif, heaviside or none)");
}

struct ModelConfig {
  int64_t layers = 4;
  int64_t embed = 128;
  int64_t ctx = 256;
  int64_t vocab = 0;
  SpikeMode mode = SpikeMode::lif;
  double beta = 0.5;
  double alpha = 2.0;
  double p_k = 0.3;
  double dropout = 0.03;
  double lif_threshold = 1.0;
  double lif_reset = 0.0;
  bool tied_head = true;
  int64_t classes = 0;  // 0 = no classifier head
  uint64_t seed = 1;

  void validate() const {
    if (layers < 1) throw ConfigError("model: layers must be >= 1");
    if (embed < 2) throw ConfigError("model: embed must be >= 2");
    if (ctx < 2) throw ConfigError("model: ctx must be >= 2");
    if (vocab < 1) throw ConfigError("model: vocab must be >= 1");
    if (beta <= 0.0 || beta > 1.0) throw ConfigError("model: beta must be in (0, 1]");
    if (lif_threshold <= lif_reset) throw ConfigError("model: threshold must exceed reset");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model: dropout must be in [0, 1)");
    if (classes < 0) throw ConfigError("model: classes must be >= 0");
  }

  nlohmann::json to_json() const {
    return {{"layers", layers},       {"embed", embed},
            {"ctx", ctx},             {"vocab", vocab},
            {"mode", spike_mode_name(mode)},
            {"beta", beta},           {"alpha", alpha},
            {"p_k", p_k},             {"dropout", dropout},
            {"lif_threshold", lif_threshold},
            {"lif_reset", lif_reset},
            {"tied_head", tied_head}, {"classes", classes},
            {"seed", seed}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.layers = j.at("layers").get<int64_t>();
    c.embed = j.at("embed").get<int64_t>();
    c.ctx = j.at("ctx").get<int64_t>();
    c.vocab = j.at("vocab").get<int64_t>();
    c.mode = spike_mode_from(j.at("mode").get<std::string>());
    c.beta = j.at("beta").get<double>();
    c.alpha = j.at("alpha").get<double>();
    c.p_k = j.at("p_k").get<double>();
    c.dropout = j.at("dropout").get<double>();
    c.lif_threshold = j.value("lif_threshold", 1.0);
    c.lif_reset = j.value("lif_reset", 0.0);
    c.tied_head = j.at("tied_head").get<bool>();
    c.classes = j.value("classes", int64_t(0));
    c.seed = j.value("seed", uint64_t(1));
    c.validate();
    return c;
  }
};

enum class WkvForm { serial, conv };

struct Sampling {
  enum class Kind { greedy, temperature, top_k };
  Kind kind = Kind::greedy;
  double temperature = 1.0;
  int top_k = 0;
};

// Observation hooks for the profiler. `linear` fires at every matmul whose
// input sparsity matters for operation accounting; `spike` fires at every
// spike site with the binary output, the membrane trace and the fan-out of the
// site's first downstream projection group.
template <class T>
struct ForwardHooks {
  std::function<void(const std::string&, const std::vector<T>&, int64_t)> linear;
  std::function<void(const std::string&, const std::vector<T>&, const std::vector<T>&, int64_t,
                     int64_t)>
      spike;
};

template <class T>
struct BlockState {
  Tensor<T> shift1;  // previous normalized row feeding the RWKV token shift
  WkvState<T> wkv;
  LifState<T> lif1;
  Tensor<T> shift2;  // previous normalized row feeding the SRFFN token shift
  LifState<T> lif2;
};

template <class T>
using ModelState = std::vector<BlockState<T>>;

template <class T>
struct BlockParams {
  Tensor<T> ln1_g, ln1_b;
  Tensor<T> m_r, m_k, m_v;
  DecayParams<T> decay;
  Tensor<T> mask;  // fixed shift mask, not learned
  Tensor<T> ln2_g, ln2_b;
  SrffnLayer<T> srffn;
};

template <class T>
class SpikeGpt {
 public:
  explicit SpikeGpt(ModelConfig cfg) : cfg_(cfg), dropout_rng_(cfg.seed ^ 0xd0d0d0d0ull) {
    cfg_.validate();
    Rng init(cfg_.seed);
    int64_t e = cfg_.embed, v = cfg_.vocab;
    w_e_ = make_param("w_e", {v, e}, init, 1.0 / std::sqrt(static_cast<double>(e)));
    blocks_.reserve(static_cast<size_t>(cfg_.layers));
    for (int64_t n = 0; n < cfg_.layers; ++n) {
      BlockParams<T> b;
      std::string pre = "block" + std::to_string(n) + ".";
      b.ln1_g = const_param(pre + "ln1.gain", {1, e}, T(1));
      b.ln1_b = const_param(pre + "ln1.bias", {1, e}, T(0));
      b.m_r = make_param(pre + "rwkv.m_r", {e, e}, init, 1.0 / std::sqrt(static_cast<double>(e)));
      b.m_k = make_param(pre + "rwkv.m_k", {e, e}, init, 1.0 / std::sqrt(static_cast<double>(e)));
      b.m_v = make_param(pre + "rwkv.m_v", {e, e}, init, 1.0 / std::sqrt(static_cast<double>(e)));
      b.decay.w_d = decay_init(pre + "rwkv.w_d", n);
      b.decay.w_f = const_param(pre + "rwkv.w_f", {1, e}, static_cast<T>(std::log(cfg_.p_k)));
      b.mask = shift_mask<T>(e, static_cast<int>(n + 1), static_cast<int>(cfg_.layers));
      b.ln2_g = const_param(pre + "ln2.gain", {1, e}, T(1));
      b.ln2_b = const_param(pre + "ln2.bias", {1, e}, T(0));
      b.srffn.m_p = make_param(pre + "srffn.m_p", {e, e}, init, 1.0 / std::sqrt(static_cast<double>(e)));
      b.srffn.m_g = make_param(pre + "srffn.m_g", {e, 4 * e}, init, 1.0 / std::sqrt(static_cast<double>(e)));
      b.srffn.m_s = make_param(pre + "srffn.m_s", {4 * e, e}, init, 1.0 / std::sqrt(static_cast<double>(4 * e)));
      blocks_.push_back(std::move(b));
    }
    lnf_g_ = const_param("ln_f.gain", {1, e}, T(1));
    lnf_b_ = const_param("ln_f.bias", {1, e}, T(0));
    if (!cfg_.tied_head)
      head_ = make_param("head", {v, e}, init, 1.0 / std::sqrt(static_cast<double>(e)));
    if (cfg_.classes > 0)
      // Zero init keeps fine-tuning exactly permutation-equivariant in the labels.
      nlu_head_ = const_param("nlu_head", {cfg_.classes, e}, T(0));
  }

  const ModelConfig& config() const { return cfg_; }

  std::vector<std::pair<std::string, Tensor<T>>>& parameters() { return params_; }
  const std::vector<std::pair<std::string, Tensor<T>>>& parameters() const { return params_; }

  int64_t param_count() const {
    int64_t n = 0;
    for (const auto& [name, p] : params_) n += p.numel();
    return n;
  }

  const BlockParams<T>& block(int64_t n) const { return blocks_.at(static_cast<size_t>(n)); }
  Tensor<T> embedding() const { return w_e_; }

  ModelState<T> fresh_state() const {
    ModelState<T> st;
    st.reserve(static_cast<size_t>(cfg_.layers));
    for (int64_t n = 0; n < cfg_.layers; ++n)
      st.push_back({Tensor<T>::zeros({1, cfg_.embed}), WkvState<T>::zeros(cfg_.embed),
                    LifState<T>::zeros(cfg_.embed), Tensor<T>::zeros({1, cfg_.embed}),
                    LifState<T>::zeros(cfg_.embed)});
    return st;
  }

  static void detach_state(ModelState<T>& st) {
    for (auto& b : st) {
      b.shift1 = b.shift1.detach();
      b.wkv.detach();
      b.lif1.detach();
      b.shift2 = b.shift2.detach();
      b.lif2.detach();
    }
  }

  // Streaming state footprint per layer, in scalars, by role. Independent of
  // sequence length by construction; the profiler asserts this.
  struct StateFootprint {
    int64_t wkv_accumulators;
    int64_t lif_state;
    int64_t shift_rows;
  };
  StateFootprint state_footprint_per_layer() const {
    int64_t e = cfg_.embed;
    return {2 * e, cfg_.mode == SpikeMode::lif ? 2 * e : 0, 2 * e};
  }

  // Full LM forward: spike embedding, L blocks, final norm, head. Causal by
  // construction. `state` carries streaming context; pass nullptr for an
  // ephemeral fresh state.
  Tensor<T> forward_lm(const std::vector<int32_t>& tokens, ModelState<T>* state, bool training,
                       WkvForm form = WkvForm::serial, ForwardHooks<T>* hooks = nullptr) {
    if (tokens.empty()) throw DataError("forward: empty token sequence");
    if (form == WkvForm::conv && static_cast<int64_t>(tokens.size()) > cfg_.ctx)
      throw ConfigError("forward: parallel form limited to ctx=" + std::to_string(cfg_.ctx) +
                        " tokens, got " + std::to_string(tokens.size()));
    ModelState<T> local;
    if (!state) {
      local = fresh_state();
      state = &local;
    }
    Tensor<T> y = backbone(tokens, *state, training, form, hooks);
    if (hooks && hooks->linear) hooks->linear("head", y.value(), cfg_.vocab);
    Tensor<T> logits = cfg_.tied_head ? matmul_nt(y, w_e_) : matmul_nt(y, head_);
    check_finite(logits, "head");
    return logits;
  }

  // Mean token-level negative log-likelihood. targets[i] is the id following
  // input token i.
  Tensor<T> lm_loss(Tensor<T> logits, const std::vector<int32_t>& targets) {
    return softmax_xent(logits, targets);
  }

  // Classifier forward: backbone, mean-pool the pre-head representation over
  // all positions, then the linear class head.
  Tensor<T> forward_nlu(const std::vector<int32_t>& tokens, bool training,
                        ForwardHooks<T>* hooks = nullptr) {
    if (cfg_.classes <= 0) throw ConfigError("forward_nlu: model has no classifier head");
    if (tokens.empty()) throw DataError("forward_nlu: empty token sequence");
    ModelState<T> local = fresh_state();
    Tensor<T> y = backbone(tokens, local, training, WkvForm::serial, hooks);
    Tensor<T> pooled = mean_rows(y);
    if (hooks && hooks->linear) hooks->linear("nlu_head", pooled.value(), cfg_.classes);
    return matmul_nt(pooled, nlu_head_);
  }

  Tensor<T> nlu_loss(Tensor<T> class_logits, int32_t label) {
    return softmax_xent(class_logits, std::vector<int32_t>{label});
  }

  // Streaming decoder with persistent O(E)-per-layer state. Returns only the
  // newly generated ids.
  std::vector<int32_t> generate(const std::vector<int32_t>& prompt, int64_t n_tokens,
                                const Sampling& sampling, Rng& sample_rng) {
    if (n_tokens < 1) throw ConfigError("generate: n_tokens must be >= 1");
    if (prompt.empty()) throw DataError("generate: empty prompt");
    ModelState<T> st = fresh_state();
    Tensor<T> logits = forward_lm(prompt, &st, false);
    std::vector<int32_t> out;
    out.reserve(static_cast<size_t>(n_tokens));
    int64_t vcols = logits.cols();
    const T* last = logits.value().data() + (logits.rows() - 1) * vcols;
    for (int64_t i = 0; i < n_tokens; ++i) {
      int32_t next = sample_row(last, vcols, sampling, sample_rng);
      out.push_back(next);
      if (i + 1 == n_tokens) break;
      logits = forward_lm({next}, &st, false);
      last = logits.value().data();
    }
    return out;
  }

  static int32_t sample_row(const T* logits, int64_t n, const Sampling& s, Rng& rng) {
    auto argmax = [&] {
      int64_t best = 0;
      for (int64_t j = 1; j < n; ++j)
        if (logits[j] > logits[best]) best = j;
      return static_cast<int32_t>(best);
    };
    if (s.kind == Sampling::Kind::greedy || s.temperature <= 0.0) return argmax();
    std::vector<int64_t> pool;
    if (s.kind == Sampling::Kind::top_k && s.top_k > 0 && s.top_k < n) {
      pool.resize(static_cast<size_t>(n));
      for (int64_t j = 0; j < n; ++j) pool[static_cast<size_t>(j)] = j;
      std::partial_sort(pool.begin(), pool.begin() + s.top_k, pool.end(),
                        [&](int64_t a, int64_t b) {
                          return logits[a] > logits[b] || (logits[a] == logits[b] && a < b);
                        });
      pool.resize(static_cast<size_t>(s.top_k));
    } else {
      pool.resize(static_cast<size_t>(n));
      for (int64_t j = 0; j < n; ++j) pool[static_cast<size_t>(j)] = j;
    }
    double mx = -1e300;
    for (int64_t j : pool) mx = std::max(mx, static_cast<double>(logits[j]));
    std::vector<double> w(pool.size());
    double sum = 0.0;
    for (size_t i = 0; i < pool.size(); ++i) {
      w[i] = std::exp((static_cast<double>(logits[pool[i]]) - mx) / s.temperature);
      sum += w[i];
    }
    double u = rng.uniform() * sum;
    double acc = 0.0;
    for (size_t i = 0; i < pool.size(); ++i) {
      acc += w[i];
      if (u < acc) return static_cast<int32_t>(pool[i]);
    }
    return static_cast<int32_t>(pool.back());
  }

  // ---- checkpoint io -------------------------------------------------------

  void save(const std::string& path, const nlohmann::json& extra = nlohmann::json::object()) const {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open checkpoint for writing: " + path);
    nlohmann::json j = extra;
    j["config"] = cfg_.to_json();
    std::string cfg_text = j.dump();
    f.write("SGPT", 4);
    put_u32(f, kCheckpointVersion);
    put_u32(f, static_cast<uint32_t>(cfg_text.size()));
    f.write(cfg_text.data(), static_cast<std::streamsize>(cfg_text.size()));
    put_u32(f, static_cast<uint32_t>(params_.size()));
    for (const auto& [name, p] : params_) {
      put_u32(f, static_cast<uint32_t>(name.size()));
      f.write(name.data(), static_cast<std::streamsize>(name.size()));
      f.put(static_cast<char>(dtype_tag()));
      f.put(static_cast<char>(p.shape().size()));
      for (int64_t d : p.shape()) put_u64(f, static_cast<uint64_t>(d));
      f.write(reinterpret_cast<const char*>(p.value().data()),
              static_cast<std::streamsize>(p.value().size() * sizeof(T)));
    }
    if (!f) throw IoError("write failed for checkpoint: " + path);
  }

  static std::pair<SpikeGpt<T>, nlohmann::json> load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint: " + path);
    nlohmann::json j = read_header(f, path);
    SpikeGpt<T> model(ModelConfig::from_json(j.at("config")));
    model.read_tensors(f, path);
    return {std::move(model), std::move(j)};
  }

  // Strict load into this model: config shapes must match exactly.
  void load_weights(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint: " + path);
    read_header(f, path);
    read_tensors(f, path);
  }

  Rng& dropout_rng() { return dropout_rng_; }

 private:
  static constexpr uint32_t kCheckpointVersion = 1;

  Tensor<T> backbone(const std::vector<int32_t>& tokens, ModelState<T>& st, bool training,
                     WkvForm form, ForwardHooks<T>* hooks) {
    if (static_cast<int64_t>(st.size()) != cfg_.layers)
      throw ShapeError("forward: state has wrong number of layers");
    int64_t t_len = static_cast<int64_t>(tokens.size());
    int64_t e = cfg_.embed;
    Tensor<T> x = embedding_rows(w_e_, tokens);
    if (cfg_.mode != SpikeMode::none) {
      Tensor<T> pre = x;
      x = heaviside_spike(x, static_cast<T>(cfg_.alpha));
      emit_spike(hooks, "embed.spike", x, pre, 3 * e);
    }
    for (int64_t n = 0; n < cfg_.layers; ++n) {
      BlockParams<T>& blk = blocks_[static_cast<size_t>(n)];
      BlockState<T>& bs = st[static_cast<size_t>(n)];
      std::string pre = "block" + std::to_string(n) + ".";

      Tensor<T> a = layernorm(x, blk.ln1_g, blk.ln1_b);
      Tensor<T> a_last = slice_rows(a, t_len - 1, 1);
      a = token_shift(a, blk.mask, bs.shift1);
      bs.shift1 = a_last;
      if (hooks && hooks->linear) {
        hooks->linear(pre + "rwkv.m_r", a.value(), e);
        hooks->linear(pre + "rwkv.m_k", a.value(), e);
        hooks->linear(pre + "rwkv.m_v", a.value(), e);
      }
      Tensor<T> r = matmul(a, blk.m_r);
      Tensor<T> k = matmul(a, blk.m_k);
      Tensor<T> v = matmul(a, blk.m_v);
      Tensor<T> wkv_out;
      if (form == WkvForm::serial) {
        auto [y, next] = wkv_serial(r, k, v, blk.decay, bs.wkv);
        wkv_out = y;
        bs.wkv = next;
      } else {
        // The convolution form assumes a zero initial state; windowed eval
        // resets state per window.
        for (T av : bs.wkv.a.value())
          if (av != T(0)) throw ConfigError("forward: parallel form requires zero wkv state");
        wkv_out = wkv_parallel(r, k, v, blk.decay);
      }
      auto s1 = apply_spike_site(wkv_out, bs.lif1, pre + "rwkv.spike", hooks, 5 * e);
      x = add(x, s1);

      Tensor<T> b = layernorm(x, blk.ln2_g, blk.ln2_b);
      Tensor<T> b_last = slice_rows(b, t_len - 1, 1);
      b = token_shift(b, blk.mask, bs.shift2);
      bs.shift2 = b_last;
      if (hooks && hooks->linear) {
        hooks->linear(pre + "srffn.m_p", b.value(), e);
        hooks->linear(pre + "srffn.m_g", b.value(), 4 * e);
      }
      Tensor<T> gate = sigmoid(matmul(b, blk.srffn.m_p));
      Tensor<T> hidden = square(relu(matmul(b, blk.srffn.m_g)));
      if (hooks && hooks->linear) hooks->linear(pre + "srffn.m_s", hidden.value(), e);
      Tensor<T> out = mul(gate, matmul(hidden, blk.srffn.m_s));
      out = dropout(out, cfg_.dropout, dropout_rng_, training);
      int64_t fanout2 = (n + 1 < cfg_.layers) ? 3 * e : cfg_.vocab;
      auto s2 = apply_spike_site(out, bs.lif2, pre + "srffn.spike", hooks, fanout2);
      x = add(x, s2);
    }
    return layernorm(x, lnf_g_, lnf_b_);
  }

  // Mode-dependent spike site over a {T,E} drive. LIF steps through rows with
  // carried state; heaviside is stateless; none passes the drive through.
  Tensor<T> apply_spike_site(Tensor<T> drive, LifState<T>& lif, const std::string& site,
                             ForwardHooks<T>* hooks, int64_t fanout) {
    check_finite(drive, site);
    if (cfg_.mode == SpikeMode::none) return drive;
    if (cfg_.mode == SpikeMode::heaviside) {
      Tensor<T> s = heaviside_spike(drive, static_cast<T>(cfg_.alpha));
      emit_spike(hooks, site, s, drive, fanout);
      return s;
    }
    LifConfig lc{cfg_.beta, cfg_.lif_threshold, cfg_.lif_reset, cfg_.alpha};
    int64_t t_len = drive.rows();
    std::vector<Tensor<T>> rows;
    rows.reserve(static_cast<size_t>(t_len));
    std::vector<T> membrane;
    bool capture = hooks && hooks->spike;
    if (capture) membrane.reserve(static_cast<size_t>(drive.numel()));
    for (int64_t t = 0; t < t_len; ++t) {
      auto step = lif_step(slice_rows(drive, t, 1), lif, lc);
      lif = step.state;
      rows.push_back(step.spikes);
      if (capture)
        membrane.insert(membrane.end(), step.membrane.value().begin(), step.membrane.value().end());
    }
    Tensor<T> s = t_len == 1 ? rows[0] : concat_rows(rows);
    if (capture) {
      Tensor<T> mem = Tensor<T>::from(drive.shape(), std::move(membrane));
      emit_spike(hooks, site, s, mem, fanout);
    }
    return s;
  }

  void emit_spike(ForwardHooks<T>* hooks, const std::string& site, const Tensor<T>& spikes,
                  const Tensor<T>& membrane, int64_t fanout) {
    if (hooks && hooks->spike)
      hooks->spike(site, spikes.value(), membrane.value(), spikes.cols(), fanout);
  }

  void check_finite(const Tensor<T>& t, const std::string& where) const {
    if (!t.all_finite()) throw NumericError("non-finite activations at " + where);
  }

  Tensor<T> make_param(const std::string& name, Shape shape, Rng& rng, double bound) {
    std::vector<T> data(static_cast<size_t>(shape_numel(shape)));
    for (auto& v : data) v = static_cast<T>(rng.uniform(-bound, bound));
    Tensor<T> p = Tensor<T>::param(name, std::move(shape), std::move(data));
    params_.emplace_back(name, p);
    return p;
  }

  Tensor<T> const_param(const std::string& name, Shape shape, T v) {
    std::vector<T> data(static_cast<size_t>(shape_numel(shape)), v);
    Tensor<T> p = Tensor<T>::param(name, std::move(shape), std::move(data));
    params_.emplace_back(name, p);
    return p;
  }

  // Log-decay init: per-step decay rates ramp from 0.3 to 5 across channels,
  // faster layers decaying harder with depth. Always strictly negative.
  Tensor<T> decay_init(const std::string& name, int64_t layer) {
    int64_t e = cfg_.embed;
    double depth = cfg_.layers > 1
                       ? static_cast<double>(layer) / static_cast<double>(cfg_.layers - 1)
                       : 0.0;
    double power = 0.7 + 1.3 * depth;
    double lo = std::log(0.3), hi = std::log(5.0);
    std::vector<T> data(static_cast<size_t>(e));
    for (int64_t i = 0; i < e; ++i) {
      double frac = e > 1 ? static_cast<double>(i) / static_cast<double>(e - 1) : 0.0;
      data[static_cast<size_t>(i)] = static_cast<T>(-std::exp(lo + (hi - lo) * std::pow(frac, power)));
    }
    Tensor<T> p = Tensor<T>::param(name, {1, e}, std::move(data));
    params_.emplace_back(name, p);
    return p;
  }

  static uint8_t dtype_tag() { return sizeof(T) == 4 ? 0 : 1; }

  static void put_u32(std::ostream& f, uint32_t v) {
    char b[4] = {static_cast<char>(v), static_cast<char>(v >> 8), static_cast<char>(v >> 16),
                 static_cast<char>(v >> 24)};
    f.write(b, 4);
  }
  static void put_u64(std::ostream& f, uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>(v >> (8 * i));
    f.write(b, 8);
  }
  static uint32_t get_u32(std::istream& f) {
    unsigned char b[4];
    f.read(reinterpret_cast<char*>(b), 4);
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
  }
  static uint64_t get_u64(std::istream& f) {
    unsigned char b[8];
    f.read(reinterpret_cast<char*>(b), 8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
    return v;
  }

  static nlohmann::json read_header(std::istream& f, const std::string& path) {
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "SGPT", 4) != 0)
      throw DataError("not a checkpoint (bad magic bytes): " + path);
    uint32_t version = get_u32(f);
    if (version != kCheckpointVersion)
      throw DataError("unsupported checkpoint version " + std::to_string(version) + ": " + path);
    uint32_t len = get_u32(f);
    std::string text(len, '\0');
    f.read(text.data(), len);
    if (!f) throw DataError("truncated checkpoint header: " + path);
    return nlohmann::json::parse(text);
  }

  void read_tensors(std::istream& f, const std::string& path) {
    uint32_t count = get_u32(f);
    if (count != params_.size())
      throw DataError("checkpoint has " + std::to_string(count) + " tensors, model expects " +
                      std::to_string(params_.size()) + ": " + path);
    for (uint32_t i = 0; i < count; ++i) {
      uint32_t nlen = get_u32(f);
      std::string name(nlen, '\0');
      f.read(name.data(), nlen);
      int dtype = f.get();
      int rank = f.get();
      Shape dims(static_cast<size_t>(rank));
      for (int d = 0; d < rank; ++d) dims[static_cast<size_t>(d)] = static_cast<int64_t>(get_u64(f));
      if (!f) throw DataError("truncated tensor record in checkpoint: " + path);
      auto it = std::find_if(params_.begin(), params_.end(),
                             [&](const auto& pr) { return pr.first == name; });
      if (it == params_.end()) throw DataError("unknown tensor '" + name + "' in checkpoint");
      Tensor<T>& p = it->second;
      if (dims != p.shape())
        throw ShapeError("checkpoint tensor '" + name + "' has shape " + shape_str(dims) +
                         ", model expects " + shape_str(p.shape()));
      int64_t n = shape_numel(dims);
      if (dtype == dtype_tag()) {
        f.read(reinterpret_cast<char*>(p.raw_value().data()),
               static_cast<std::streamsize>(n * sizeof(T)));
      } else if (dtype == 0) {
        std::vector<float> tmp(static_cast<size_t>(n));
        f.read(reinterpret_cast<char*>(tmp.data()), static_cast<std::streamsize>(n * sizeof(float)));
        for (int64_t j = 0; j < n; ++j) p.raw_value()[static_cast<size_t>(j)] = static_cast<T>(tmp[static_cast<size_t>(j)]);
      } else if (dtype == 1) {
        std::vector<double> tmp(static_cast<size_t>(n));
        f.read(reinterpret_cast<char*>(tmp.data()), static_cast<std::streamsize>(n * sizeof(double)));
        for (int64_t j = 0; j < n; ++j) p.raw_value()[static_cast<size_t>(j)] = static_cast<T>(tmp[static_cast<size_t>(j)]);
      } else {
        throw DataError("unknown dtype tag in checkpoint tensor '" + name + "'");
      }
      if (!f) throw DataError("truncated tensor payload in checkpoint: " + path);
    }
  }

  ModelConfig cfg_;
  Rng dropout_rng_;
  std::vector<std::pair<std::string, Tensor<T>>> params_;
  Tensor<T> w_e_;
  std::vector<BlockParams<T>> blocks_;
  Tensor<T> lnf_g_, lnf_b_;
  Tensor<T> head_;
  Tensor<T> nlu_head_;
};

// Loss/BPC/PPL relations.
inline double bpc_from_loss(double loss) { return loss / std::log(2.0); }
inline double ppl_from_loss(double loss) { return std::exp(loss); }

}  // namespace spikegpt
