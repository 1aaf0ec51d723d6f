#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mergevit/vit.hpp"

namespace mergevit {

// Analytic per-forward-pass FLOPs, per image.
//
// Conventions (chosen so the closed forms agree with the instrumented
// counter in the actual forward pass):
//   - one multiply-add = 2 FLOPs; a linear layer [NxK]->[NxM] costs
//     2*N*K*M + N*M (bias)
//   - softmax: 5 FLOPs per element, layer norm: 8, GELU: 10
//   - residual adds: 1 FLOP per element
struct CostReport {
  std::string name;
  double flops_embedding = 0;
  double flops_blocks_pre_merge = 0;
  double flops_merger = 0;
  double flops_blocks_post_merge = 0;
  double flops_head = 0;
  double params_total = 0;
  // Encoder-only FLOPs ratio against the same config with the merger
  // removed. 1.0 when no merger is configured; slightly above 1.0 when the
  // merger sits after the last block (pure overhead).
  double ratio_vs_backbone = 1.0;

  double flops_encoder() const {
    return flops_blocks_pre_merge + flops_merger + flops_blocks_post_merge;
  }
  double flops_total() const {
    return flops_embedding + flops_encoder() + flops_head;
  }
};

// One encoder block at a given token count.
double block_flops(int tokens, int hidden_dim, int mlp_dim, int num_heads);

CostReport model_cost(const ModelConfig& config);

// Named configurations: S/32, B/32, B/16, L/32, L/16, H/14 and the
// grid-20 H/11, each with a "Merger-" twin (mid-network merger, 8 output
// tokens).
struct VariantEntry {
  std::string name;
  ModelConfig config;
};

const std::vector<VariantEntry>& variant_catalog();
std::vector<std::string> variant_names();

// Throws ConfigError listing the valid names when `name` is unknown.
ModelConfig variant_config(const std::string& name);

struct ParetoRow {
  std::string name;
  double flops = 0;
  double params = 0;
  std::optional<double> metric;
  bool on_frontier = false;
};

// Rows sorted by FLOPs ascending. A row is on the frontier when no other row
// has <= FLOPs and >= metric with at least one strict inequality; rows
// without a metric value are treated as equal-metric.
std::vector<ParetoRow> pareto_table(
    const std::vector<std::pair<std::string, ModelConfig>>& configs,
    const std::vector<std::pair<std::string, double>>& metrics = {});

// CSV/JSON emission for the `cost` subcommand. Columns:
// variant,flops_forward,params,ratio_vs_backbone
std::string cost_table_csv(const std::vector<CostReport>& reports);
std::string cost_table_json(const std::vector<CostReport>& reports);

}  // namespace mergevit
