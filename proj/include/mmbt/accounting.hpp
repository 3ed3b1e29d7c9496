// Symbolic cost model over schedules: parameters, multiply-accumulates,
// FLOPs and stored activation elements, broken down per block. Nothing here
// builds tensors or runs a forward pass.
//
// Conventions
//   macs         one multiply-accumulate per product term; bias adds are free
//   flops        2 * macs + 5 per softmax, LayerNorm and GELU element
//   activations  per-sample scalars kept for the backward pass
#pragma once

#include <cstdint>
#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmbt/fusion.hpp"
#include "mmbt/schedule.hpp"

namespace mmbt {

using Count = std::uint64_t;

struct CostRow {
  std::string name;
  Count params = 0;
  Count macs = 0;
  Count flops = 0;
  Count activations = 0;
  // Parts of macs: token-wise projections (qkv, proj, skip, patch conv),
  // attention (scores, relative positions, weighted sum) and the MLP.
  Count macs_projection = 0;
  Count macs_attention = 0;
  Count macs_mlp = 0;
  Count elementwise = 0;  // softmax + LayerNorm + GELU elements
};

struct CostReport {
  std::string name;
  std::vector<CostRow> rows;
  Count params = 0, macs = 0, flops = 0, activations = 0;

  void add(CostRow row) {
    row.flops = 2 * row.macs + 5 * row.elementwise;
    params += row.params;
    macs += row.macs;
    flops += row.flops;
    activations += row.activations;
    rows.push_back(std::move(row));
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["name"] = name;
    j["totals"] = {{"params", params}, {"macs", macs}, {"flops", flops},
                   {"activations", activations}};
    auto& arr = j["blocks"] = nlohmann::json::array();
    for (const auto& r : rows) {
      arr.push_back({{"name", r.name},
                     {"params", r.params},
                     {"macs", r.macs},
                     {"flops", r.flops},
                     {"activations", r.activations}});
    }
    return j;
  }

  std::string to_text() const {
    std::ostringstream out;
    char line[160];
    std::snprintf(line, sizeof line, "%-14s %14s %18s %18s %14s\n", name.c_str(), "params",
                  "macs", "flops", "activations");
    out << line;
    for (const auto& r : rows) {
      std::snprintf(line, sizeof line, "%-14s %14llu %18llu %18llu %14llu\n", r.name.c_str(),
                    (unsigned long long)r.params, (unsigned long long)r.macs,
                    (unsigned long long)r.flops, (unsigned long long)r.activations);
      out << line;
    }
    std::snprintf(line, sizeof line, "%-14s %14llu %18llu %18llu %14llu\n", "total",
                  (unsigned long long)params, (unsigned long long)macs,
                  (unsigned long long)flops, (unsigned long long)activations);
    out << line;
    std::snprintf(line, sizeof line, "params %.2fM  macs %.2fG  flops %.2fG  activations %.2fM\n",
                  params / 1e6, macs / 1e9, flops / 1e9, activations / 1e6);
    out << line;
    return out.str();
  }
};

inline Count linear_params(Count in, Count out) { return in * out + out; }

/// Pre-norm block given resolved geometry (class token included in counts).
inline CostRow block_cost(const BlockGeometry& g, bool has_rel_pos, std::string name) {
  CostRow r;
  r.name = std::move(name);
  const Count d_in = g.d_in, da = g.d_out, hid = g.mlp_hidden, h = g.heads;
  const Count n_in = g.n_in, nq = g.n_q, nkv = g.n_kv;
  Count rel_rows = 0;
  if (has_rel_pos) {
    for (auto rows : g.rel_rows) rel_rows += rows;
  }
  const bool skip_proj = d_in != da;

  r.params = 2 * d_in + linear_params(d_in, 3 * da) + linear_params(da, da) + 2 * da +
             linear_params(da, hid) + linear_params(hid, da) + h * rel_rows * g.head_dim;
  if (skip_proj) r.params += linear_params(d_in, da);

  r.macs_projection = n_in * d_in * 3 * da + nq * da * da + (skip_proj ? nq * d_in * da : 0);
  // Scores and weighted sum over all heads, plus Q times each axis table.
  r.macs_attention = 2 * nq * nkv * da + nq * rel_rows * da;
  r.macs_mlp = 2 * nq * da * hid;
  r.macs = r.macs_projection + r.macs_attention + r.macs_mlp;
  r.elementwise = n_in * d_in + h * nq * nkv + nq * da + nq * hid;

  r.activations = n_in * d_in          // LN1 output
                  + 3 * n_in * da      // qkv
                  + h * nq * nkv       // attention probabilities
                  + nq * da            // concatenated heads
                  + nq * da            // A'
                  + nq * da            // LN2 output
                  + 2 * nq * hid       // MLP hidden before and after GELU
                  + nq * da;           // block output
  if (g.q_pooled) r.activations += nq * da + nq * d_in;  // pooled Q and pooled skip
  if (g.kv_pooled) r.activations += 2 * nkv * da;
  if (has_rel_pos) r.activations += h * nq * rel_rows;
  return r;
}

inline CostReport cost_report(const StageSchedule& s) {
  CostReport rep;
  rep.name = s.name;
  {
    CostRow r;
    r.name = "patch_embed";
    const Count kvol = numel(s.patch.kernel);
    const Count c0 = s.patch.channels, p = numel(s.patch.grid);
    r.params = c0 * s.in_channels * kvol + c0 + c0;  // conv, bias, class token
    if (s.abs_pos_embed) r.params += (p + 1) * c0;
    r.macs_projection = p * c0 * s.in_channels * kvol;
    r.macs = r.macs_projection;
    r.activations = s.in_channels * numel(s.input_extent) + (p + 1) * c0;
    rep.add(r);
  }
  for (std::size_t i = 0; i < s.blocks.size(); ++i) {
    rep.add(block_cost(s.geometry(i), s.rel_pos, "block " + std::to_string(i)));
  }
  {
    CostRow r;
    r.name = "norm";
    const Count d = s.final_channels();
    r.params = 2 * d;
    r.elementwise = (numel(s.final_grid()) + 1) * d;
    rep.add(r);
  }
  return rep;
}

inline Count count_params(const StageSchedule& s) { return cost_report(s).params; }
inline Count count_macs(const StageSchedule& s) { return cost_report(s).macs; }
inline Count count_flops(const StageSchedule& s) { return cost_report(s).flops; }
inline Count count_activations(const StageSchedule& s) { return cost_report(s).activations; }

/// Plain transformer block over n tokens of width d (fusion passes).
inline CostRow transformer_block_cost(Count n, Count d, Count heads, Count mlp_ratio,
                                      std::string name) {
  BlockGeometry g;
  g.d_in = g.d_out = d;
  g.heads = heads;
  g.head_dim = d / heads;
  g.mlp_hidden = mlp_ratio * d;
  g.n_in = g.n_q = g.n_kv = n;
  return block_cost(g, false, std::move(name));
}

/// Parameters of the fusion stack: bottleneck tokens plus two blocks per layer.
inline Count fusion_params(Count width, const FusionConfig& cfg) {
  auto blk = transformer_block_cost(1, width, cfg.heads, cfg.mlp_ratio, "").params;
  return cfg.tokens * width + 2 * cfg.blocks * blk;
}

struct FusionCostReport {
  std::size_t blocks = 0;
  AttentionCost per_block;
  Count bottleneck_total = 0, merged_total = 0;
  double ratio = 0.0;  // bottleneck / merged

  nlohmann::json to_json() const {
    return {{"blocks", blocks},
            {"bottleneck_per_block", per_block.bottleneck},
            {"merged_per_block", per_block.merged},
            {"bottleneck_total", bottleneck_total},
            {"merged_total", merged_total},
            {"ratio", ratio},
            {"precondition", per_block.precondition}};
  }
};

/// Score-matrix elements of K fusion layers (per head), bottleneck vs merged.
inline FusionCostReport fusion_cost_report(Count n, Count m, Count l, std::size_t k) {
  FusionCostReport r;
  r.blocks = k;
  r.per_block = attention_cost(n, m, l);
  r.bottleneck_total = k * r.per_block.bottleneck;
  r.merged_total = k * r.per_block.merged;
  r.ratio = static_cast<double>(r.bottleneck_total) / static_cast<double>(r.merged_total);
  return r;
}

}  // namespace mmbt
