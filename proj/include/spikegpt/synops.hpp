#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "spikegpt/errors.hpp"
#include "spikegpt/model.hpp"

namespace spikegpt {

// Spike-gated accumulate count for a binary tensor feeding a linear layer:
// nnz(spikes) * out_features. Dense baseline is numel * out_features.
// Declared-spiking inputs must be exactly binary.
template <class T>
int64_t count_linear_synops(const std::vector<T>& spike_input, int64_t out_features) {
  int64_t nnz = 0;
  for (T v : spike_input) {
    if (v == T(1))
      ++nnz;
    else if (v != T(0))
      throw ContractError("count_linear_synops: non-binary input at a declared spiking site");
  }
  return nnz * out_features;
}

struct SpikeSiteRow {
  std::string site;
  int64_t width = 0;          // neurons per step
  int64_t fanout = 0;         // out features of the first downstream projection group
  int64_t neuron_steps = 0;
  int64_t spikes = 0;
  int64_t gated_macs = 0;     // spikes * fanout
  int64_t dense_macs = 0;     // neuron_steps * fanout

  double firing_rate() const {
    return neuron_steps ? static_cast<double>(spikes) / static_cast<double>(neuron_steps) : 0.0;
  }
};

struct LinearSiteRow {
  std::string site;
  int64_t out_features = 0;
  int64_t in_elems = 0;
  int64_t nnz = 0;
  bool binary = true;         // stays true only if every observed input was binary
  int64_t dense_macs = 0;
  int64_t nnz_macs = 0;
};

// Accounting perimeter (declared here and in every report): spike sparsity is
// attributed to each spike site's first downstream projection group, with
// normalization, token shift and state updates treated as elementwise state
// ops outside the SynOps count. Linear sites are additionally classified by
// their literal runtime input (binary vs full precision); full-precision sites
// contribute nonzero-MAC and dense-MAC columns only.
struct SynopsLedger {
  static constexpr const char* kPerimeter =
      "spike-gated accumulates counted at each spike site against the fan-out of its first "
      "downstream projection group; layernorm/token-shift/state updates counted as state ops, "
      "not SynOps; full-precision sites reported separately and never mixed into the binarized "
      "column";

  std::vector<SpikeSiteRow> spike_sites;
  std::vector<LinearSiteRow> linear_sites;
  int64_t tokens = 0;
  int64_t state_ops = 0;  // elementwise LIF/WKV/shift update count, reported separately

  // Running totals accumulated during forwards, cross-checked against the
  // per-site rows by check_consistency().
  int64_t tot_gated = 0;
  int64_t tot_gated_dense = 0;
  int64_t tot_spikes = 0;
  int64_t tot_neuron_steps = 0;
  int64_t tot_fp_nnz_macs = 0;
  int64_t tot_fp_dense_macs = 0;

  int64_t wkv_state_elems_per_layer = 0;
  int64_t streaming_state_elems_per_layer = 0;

  SpikeSiteRow& spike_row(const std::string& site, int64_t width, int64_t fanout) {
    for (auto& r : spike_sites)
      if (r.site == site) return r;
    spike_sites.push_back({site, width, fanout});
    return spike_sites.back();
  }

  LinearSiteRow& linear_row(const std::string& site, int64_t out_features) {
    for (auto& r : linear_sites)
      if (r.site == site) return r;
    linear_sites.push_back({site, out_features});
    return linear_sites.back();
  }

  bool has_spiking_sites() const { return !spike_sites.empty(); }

  // Binarized SynOps / dense-MAC ratio over the spiking perimeter. With no
  // spiking sites (mode none) the model is its own dense baseline: ratio 1.
  double synops_ratio() const {
    if (!has_spiking_sites()) return 1.0;
    return tot_gated_dense ? static_cast<double>(tot_gated) / static_cast<double>(tot_gated_dense)
                           : 0.0;
  }

  // Fan-out-weighted mean firing rate recomputed from the per-site rows; by
  // the accounting identity this must equal synops_ratio().
  double weighted_firing_rate() const {
    if (!has_spiking_sites()) return 1.0;
    double num = 0.0, den = 0.0;
    for (const auto& r : spike_sites) {
      num += static_cast<double>(r.spikes) * static_cast<double>(r.fanout);
      den += static_cast<double>(r.neuron_steps) * static_cast<double>(r.fanout);
    }
    return den ? num / den : 0.0;
  }

  double mean_firing_rate() const {
    return tot_neuron_steps ? static_cast<double>(tot_spikes) / static_cast<double>(tot_neuron_steps)
                            : 0.0;
  }

  void check_consistency() const {
    int64_t gated = 0, gated_dense = 0, spikes = 0, steps = 0;
    for (const auto& r : spike_sites) {
      if (r.spikes < 0 || r.spikes > r.neuron_steps)
        throw ContractError("ledger: firing rate outside [0,1] at " + r.site);
      if (r.gated_macs > r.dense_macs)
        throw ContractError("ledger: synops exceed dense MACs at " + r.site);
      gated += r.gated_macs;
      gated_dense += r.dense_macs;
      spikes += r.spikes;
      steps += r.neuron_steps;
    }
    if (gated != tot_gated || gated_dense != tot_gated_dense || spikes != tot_spikes ||
        steps != tot_neuron_steps)
      throw ContractError("ledger: per-site rows disagree with running totals");
    int64_t fp_nnz = 0, fp_dense = 0;
    for (const auto& r : linear_sites) {
      if (r.nnz_macs > r.dense_macs)
        throw ContractError("ledger: nnz MACs exceed dense MACs at " + r.site);
      if (!r.binary) {
        fp_nnz += r.nnz_macs;
        fp_dense += r.dense_macs;
      }
    }
    if (fp_nnz != tot_fp_nnz_macs || fp_dense != tot_fp_dense_macs)
      throw ContractError("ledger: full-precision totals disagree with rows");
    if (has_spiking_sites()) {
      double diff = std::fabs(synops_ratio() - weighted_firing_rate());
      if (diff > 1e-6)
        throw ContractError("ledger: synops ratio does not match weighted firing rate");
    }
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["perimeter"] = kPerimeter;
    j["tokens"] = tokens;
    j["binarized"] = {{"synops", tot_gated},
                      {"dense_macs", tot_gated_dense},
                      {"ratio", synops_ratio()},
                      {"weighted_firing_rate", weighted_firing_rate()},
                      {"mean_firing_rate", mean_firing_rate()}};
    j["full_precision"] = {{"nnz_macs", tot_fp_nnz_macs}, {"dense_macs", tot_fp_dense_macs}};
    j["state_ops"] = state_ops;
    j["state"] = {{"wkv_elems_per_layer", wkv_state_elems_per_layer},
                  {"streaming_elems_per_layer", streaming_state_elems_per_layer}};
    nlohmann::json sites = nlohmann::json::array();
    for (const auto& r : spike_sites)
      sites.push_back({{"site", r.site},
                       {"width", r.width},
                       {"fanout", r.fanout},
                       {"neuron_steps", r.neuron_steps},
                       {"spikes", r.spikes},
                       {"firing_rate", r.firing_rate()},
                       {"synops", r.gated_macs},
                       {"dense_macs", r.dense_macs}});
    j["spike_sites"] = sites;
    nlohmann::json lins = nlohmann::json::array();
    for (const auto& r : linear_sites)
      lins.push_back({{"site", r.site},
                      {"out_features", r.out_features},
                      {"in_elems", r.in_elems},
                      {"nnz", r.nnz},
                      {"binary_input", r.binary},
                      {"dense_macs", r.dense_macs},
                      {"nnz_macs", r.nnz_macs}});
    j["linear_sites"] = lins;
    return j;
  }

  std::string table() const {
    std::ostringstream os;
    os << "SynOps report (" << tokens << " tokens)\n";
    os << "perimeter: " << kPerimeter << "\n\n";
    os << "spike sites:\n";
    char buf[256];
    std::snprintf(buf, sizeof(buf), "  %-22s %10s %8s %12s %14s %8s\n", "site", "spikes", "rate",
                  "synops", "dense MACs", "fanout");
    os << buf;
    for (const auto& r : spike_sites) {
      std::snprintf(buf, sizeof(buf), "  %-22s %10lld %8.4f %12lld %14lld %8lld\n", r.site.c_str(),
                    static_cast<long long>(r.spikes), r.firing_rate(),
                    static_cast<long long>(r.gated_macs), static_cast<long long>(r.dense_macs),
                    static_cast<long long>(r.fanout));
      os << buf;
    }
    std::snprintf(buf, sizeof(buf),
                  "\nbinarized SynOps: %lld / dense %lld (ratio %.6f, weighted firing rate %.6f, "
                  "mean firing rate %.6f)\n",
                  static_cast<long long>(tot_gated), static_cast<long long>(tot_gated_dense),
                  synops_ratio(), weighted_firing_rate(), mean_firing_rate());
    os << buf;
    std::snprintf(buf, sizeof(buf), "full-precision sites: %lld nnz MACs / %lld dense MACs\n",
                  static_cast<long long>(tot_fp_nnz_macs), static_cast<long long>(tot_fp_dense_macs));
    os << buf;
    std::snprintf(buf, sizeof(buf), "state ops (LIF/WKV/shift updates): %lld\n",
                  static_cast<long long>(state_ops));
    os << buf;
    std::snprintf(buf, sizeof(buf),
                  "streaming state: %lld scalars per layer (wkv accumulators: %lld), independent "
                  "of sequence length\n",
                  static_cast<long long>(streaming_state_elems_per_layer),
                  static_cast<long long>(wkv_state_elems_per_layer));
    os << buf;
    return os.str();
  }
};

// Collects per-site spike events and membrane traces across profile windows.
struct RasterCollector {
  struct SiteTrace {
    std::string site;
    int64_t width = 0;
    int64_t steps = 0;
    std::vector<std::pair<int64_t, int64_t>> events;  // (time step, neuron index)
    std::vector<double> membrane;                     // row-major steps x width
  };
  std::vector<SiteTrace> traces;

  SiteTrace& trace(const std::string& site, int64_t width) {
    for (auto& t : traces)
      if (t.site == site) return t;
    traces.push_back({site, width});
    return traces.back();
  }

  // One CSV pair per site: "<prefix><site>_spikes.csv" with (step, neuron)
  // events and "<prefix><site>_membrane.csv" with the steps x width potential
  // matrix.
  std::vector<std::string> write(const std::string& prefix) const {
    std::vector<std::string> written;
    for (const auto& t : traces) {
      std::string safe = t.site;
      for (auto& ch : safe)
        if (ch == '.') ch = '_';
      {
        std::string path = prefix + safe + "_spikes.csv";
        std::ofstream f(path);
        if (!f) throw IoError("cannot write raster: " + path);
        f << "step,neuron\n";
        for (const auto& [step, neuron] : t.events) f << step << "," << neuron << "\n";
        written.push_back(path);
      }
      {
        std::string path = prefix + safe + "_membrane.csv";
        std::ofstream f(path);
        if (!f) throw IoError("cannot write raster: " + path);
        for (int64_t s = 0; s < t.steps; ++s) {
          for (int64_t j = 0; j < t.width; ++j)
            f << (j ? "," : "") << t.membrane[static_cast<size_t>(s * t.width + j)];
          f << "\n";
        }
        written.push_back(path);
      }
    }
    return written;
  }
};

// Instrumented eval forward over `tokens`, processed in windows of at most the
// model context with state reset per window (matching windowed evaluation).
// Counters are linear in the number of windows processed.
template <class T>
SynopsLedger profile_model(SpikeGpt<T>& model, const std::vector<int32_t>& tokens,
                           RasterCollector* raster = nullptr) {
  if (tokens.empty()) throw DataError("profile: empty token sequence");
  const ModelConfig& cfg = model.config();
  SynopsLedger ledger;
  auto fp = model.state_footprint_per_layer();
  ledger.wkv_state_elems_per_layer = fp.wkv_accumulators;
  ledger.streaming_state_elems_per_layer = fp.wkv_accumulators + fp.lif_state + fp.shift_rows;
  if (ledger.wkv_state_elems_per_layer != 2 * cfg.embed)
    throw ContractError("profile: wkv state is not 2E accumulators per layer");

  ForwardHooks<T> hooks;
  int64_t window_base = 0;
  hooks.linear = [&](const std::string& site, const std::vector<T>& in, int64_t out_features) {
    auto& row = ledger.linear_row(site, out_features);
    int64_t nnz = 0;
    bool binary = true;
    for (T v : in) {
      if (v != T(0)) {
        ++nnz;
        if (v != T(1)) binary = false;
      }
    }
    row.in_elems += static_cast<int64_t>(in.size());
    row.nnz += nnz;
    row.binary = row.binary && binary;
    row.dense_macs += static_cast<int64_t>(in.size()) * out_features;
    row.nnz_macs += nnz * out_features;
  };
  hooks.spike = [&](const std::string& site, const std::vector<T>& spikes,
                    const std::vector<T>& membrane, int64_t width, int64_t fanout) {
    int64_t gated = count_linear_synops(spikes, fanout);
    auto& row = ledger.spike_row(site, width, fanout);
    int64_t steps = static_cast<int64_t>(spikes.size());
    int64_t nspikes = gated / (fanout ? fanout : 1);
    row.neuron_steps += steps;
    row.spikes += nspikes;
    row.gated_macs += gated;
    row.dense_macs += steps * fanout;
    ledger.tot_gated += gated;
    ledger.tot_gated_dense += steps * fanout;
    ledger.tot_spikes += nspikes;
    ledger.tot_neuron_steps += steps;
    if (raster && site != "embed.spike") {
      auto& tr = raster->trace(site, width);
      int64_t rows = steps / width;
      for (int64_t s = 0; s < rows; ++s)
        for (int64_t j = 0; j < width; ++j)
          if (spikes[static_cast<size_t>(s * width + j)] != T(0))
            tr.events.emplace_back(window_base + s, j);
      for (T v : membrane) tr.membrane.push_back(static_cast<double>(v));
      tr.steps += rows;
    }
  };

  int64_t pos = 0;
  int64_t n = static_cast<int64_t>(tokens.size());
  while (pos < n) {
    int64_t len = std::min<int64_t>(cfg.ctx, n - pos);
    std::vector<int32_t> window(tokens.begin() + pos, tokens.begin() + pos + len);
    ModelState<T> st = model.fresh_state();
    model.forward_lm(window, &st, false, WkvForm::serial, &hooks);
    // Elementwise state updates, reported apart from SynOps: LIF + WKV + shift
    // touches per token per layer.
    ledger.state_ops += len * cfg.layers * ((cfg.mode == SpikeMode::lif ? 2 : 0) + 2 + 2) * cfg.embed;
    ledger.tokens += len;
    window_base += len;
    pos += len;
  }

  // Full-precision totals from the (non-binary) linear rows.
  ledger.tot_fp_nnz_macs = 0;
  ledger.tot_fp_dense_macs = 0;
  for (const auto& r : ledger.linear_sites)
    if (!r.binary) {
      ledger.tot_fp_nnz_macs += r.nnz_macs;
      ledger.tot_fp_dense_macs += r.dense_macs;
    }
  ledger.check_consistency();
  return ledger;
}

// Raster CSV emission for a token stream, returning the written paths.
template <class T>
std::vector<std::string> dump_raster(SpikeGpt<T>& model, const std::vector<int32_t>& tokens,
                                     const std::string& prefix, SynopsLedger* ledger_out = nullptr) {
  RasterCollector raster;
  SynopsLedger ledger = profile_model(model, tokens, &raster);
  if (ledger_out) *ledger_out = ledger;
  return raster.write(prefix);
}

}  // namespace spikegpt
