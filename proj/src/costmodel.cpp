#include "mergevit/costmodel.hpp"

#include <algorithm>
#include <sstream>

#include "json.hpp"

namespace mergevit {

namespace {

constexpr double kSoftmax = 5.0, kLayerNorm = 8.0, kGelu = 10.0;

double linear_flops(double n, double in, double out) { return 2.0 * n * in * out + n * out; }

double embedding_flops(const ModelConfig& c) {
  const double np = c.num_patches();
  // patch projection + positional add
  return linear_flops(np, c.patch_dim(), c.hidden_dim) + np * c.hidden_dim;
}

double merger_flops(int spatial_tokens, int hidden_dim, int output_tokens) {
  const double n = spatial_tokens, d = hidden_dim, m = output_tokens;
  return kLayerNorm * n * d      // dedicated pre-merge layer norm
         + 2.0 * n * d * m       // scores
         + kSoftmax * n * m      // per-token softmax
         + 2.0 * n * m * d;      // weighted sums
}

double head_flops(const ModelConfig& c, int final_tokens) {
  double f = kLayerNorm * double(final_tokens) * c.hidden_dim;
  if (!c.use_cls_token) f += double(final_tokens) * c.hidden_dim;  // mean pool
  f += linear_flops(1, c.hidden_dim, c.num_classes);
  return f;
}

double param_count(const ModelConfig& c) {
  const double d = c.hidden_dim, mlp = c.mlp_dim;
  double p = double(c.patch_dim()) * d + d;  // patch embedding
  p += double(c.num_patches()) * d;          // positional embeddings
  if (c.use_cls_token) p += d;
  p += c.depth * (2 * (2 * d)                // two layer norms
                  + 4 * (d * d + d)          // QKVO
                  + (d * mlp + mlp) + (mlp * d + d));
  if (c.merger) p += d * c.merger->output_tokens + 2 * d;
  p += 2 * d;                     // head layer norm
  p += d * c.num_classes + c.num_classes;
  return p;
}

ModelConfig backbone(int patch, int image, int grid_override, int d, int depth, int heads,
                     int mlp) {
  ModelConfig c;
  c.image_size = image;
  c.patch_size = patch;
  c.channels = 3;
  c.hidden_dim = d;
  c.depth = depth;
  c.num_heads = heads;
  c.mlp_dim = mlp;
  c.num_classes = 18291;  // upstream label space
  c.use_cls_token = true;
  c.grid_override = grid_override;
  return c;
}

ModelConfig with_merger(ModelConfig c) {
  MergerConfig m;
  m.placement = c.depth / 2;
  m.output_tokens = 8;
  m.preserve_cls = true;
  c.merger = m;
  return c;
}

}  // namespace

double block_flops(int tokens, int hidden_dim, int mlp_dim, int num_heads) {
  if (tokens < 1 || hidden_dim < 1 || mlp_dim < 1 || num_heads < 1)
    throw ConfigError("block_flops: all arguments must be positive");
  const double n = tokens, d = hidden_dim, mlp = mlp_dim, h = num_heads;
  double f = 0;
  f += kLayerNorm * n * d;                       // pre-attention LN
  f += 4.0 * linear_flops(n, d, d);              // Q, K, V, O projections
  f += 2.0 * 2.0 * n * n * d;                    // QK^T and PV matmuls
  f += h * n * n;                                // score scaling
  f += kSoftmax * h * n * n;                     // attention softmax
  f += n * d;                                    // residual
  f += kLayerNorm * n * d;                       // pre-MLP LN
  f += linear_flops(n, d, mlp);                  // MLP up
  f += kGelu * n * mlp;                          // GELU
  f += linear_flops(n, mlp, d);                  // MLP down
  f += n * d;                                    // residual
  return f;
}

CostReport model_cost(const ModelConfig& c) {
  c.validate();
  CostReport r;
  const int n_tok = c.num_tokens();
  const double per_block = block_flops(n_tok, c.hidden_dim, c.mlp_dim, c.num_heads);
  r.flops_embedding = embedding_flops(c);
  r.params_total = param_count(c);
  const double backbone_encoder = c.depth * per_block;

  if (!c.merger) {
    r.flops_blocks_pre_merge = backbone_encoder;
    r.flops_head = head_flops(c, n_tok);
    r.ratio_vs_backbone = 1.0;
    return r;
  }

  const MergerConfig& m = *c.merger;
  const bool keep_cls = c.use_cls_token && m.preserve_cls;
  const int spatial = keep_cls ? n_tok - 1 : n_tok;
  const int post_tokens = m.output_tokens + (keep_cls ? 1 : 0);

  r.flops_blocks_pre_merge = m.placement * per_block;
  r.flops_merger = merger_flops(spatial, c.hidden_dim, m.output_tokens);
  r.flops_blocks_post_merge =
      (c.depth - m.placement) * block_flops(post_tokens, c.hidden_dim, c.mlp_dim, c.num_heads);
  r.flops_head = head_flops(c, post_tokens);
  r.ratio_vs_backbone = r.flops_encoder() / backbone_encoder;
  return r;
}

const std::vector<VariantEntry>& variant_catalog() {
  static const std::vector<VariantEntry> catalog = [] {
    std::vector<VariantEntry> v;
    const ModelConfig s32 = backbone(32, 224, 0, 512, 8, 8, 2048);
    const ModelConfig b32 = backbone(32, 224, 0, 768, 12, 12, 3072);
    const ModelConfig b16 = backbone(16, 224, 0, 768, 12, 12, 3072);
    const ModelConfig l32 = backbone(32, 224, 0, 1024, 24, 16, 4096);
    const ModelConfig l16 = backbone(16, 224, 0, 1024, 24, 16, 4096);
    const ModelConfig h14 = backbone(14, 224, 0, 1280, 32, 16, 5120);
    // 224 is not divisible by 11; the H/11 variant runs a 20x20 patch grid.
    const ModelConfig h11 = backbone(11, 224, 20, 1280, 32, 16, 5120);
    v.push_back({"S/32", s32});
    v.push_back({"B/32", b32});
    v.push_back({"B/16", b16});
    v.push_back({"L/32", l32});
    v.push_back({"L/16", l16});
    v.push_back({"H/14", h14});
    v.push_back({"H/11", h11});
    for (const auto& base : std::vector<VariantEntry>(v))
      v.push_back({"Merger-" + base.name, with_merger(base.config)});
    return v;
  }();
  return catalog;
}

std::vector<std::string> variant_names() {
  std::vector<std::string> names;
  for (const auto& e : variant_catalog()) names.push_back(e.name);
  return names;
}

ModelConfig variant_config(const std::string& name) {
  for (const auto& e : variant_catalog())
    if (e.name == name) return e.config;
  std::string valid;
  for (const auto& e : variant_catalog()) valid += (valid.empty() ? "" : ", ") + e.name;
  throw ConfigError("unknown variant '" + name + "'; valid names: " + valid);
}

std::vector<ParetoRow> pareto_table(
    const std::vector<std::pair<std::string, ModelConfig>>& configs,
    const std::vector<std::pair<std::string, double>>& metrics) {
  if (configs.empty()) throw ConfigError("pareto_table: empty config list");
  std::vector<ParetoRow> rows;
  for (const auto& [name, cfg] : configs) {
    CostReport r = model_cost(cfg);
    ParetoRow row;
    row.name = name;
    row.flops = r.flops_total();
    row.params = r.params_total;
    for (const auto& [mname, mval] : metrics)
      if (mname == name) row.metric = mval;
    rows.push_back(row);
  }
  std::stable_sort(rows.begin(), rows.end(),
                   [](const ParetoRow& a, const ParetoRow& b) { return a.flops < b.flops; });
  auto metric_of = [](const ParetoRow& r) { return r.metric.value_or(0.0); };
  for (auto& r : rows) {
    r.on_frontier = true;
    for (const auto& other : rows) {
      if (&other == &r) continue;
      const bool no_worse =
          other.flops <= r.flops && metric_of(other) >= metric_of(r);
      const bool strictly_better =
          other.flops < r.flops || metric_of(other) > metric_of(r);
      if (no_worse && strictly_better) {
        r.on_frontier = false;
        break;
      }
    }
  }
  return rows;
}

std::string cost_table_csv(const std::vector<CostReport>& reports) {
  std::ostringstream os;
  os << "variant,flops_forward,params,ratio_vs_backbone\n";
  for (const auto& r : reports) {
    os << r.name << ',' << std::lround(r.flops_total()) << ',' << std::lround(r.params_total)
       << ',';
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", r.ratio_vs_backbone);
    os << buf << '\n';
  }
  return os.str();
}

std::string cost_table_json(const std::vector<CostReport>& reports) {
  nlohmann::ordered_json out = nlohmann::ordered_json::array();
  for (const auto& r : reports) {
    nlohmann::ordered_json j;
    j["variant"] = r.name;
    j["flops_forward"] = r.flops_total();
    j["flops_embedding"] = r.flops_embedding;
    j["flops_blocks_pre_merge"] = r.flops_blocks_pre_merge;
    j["flops_merger"] = r.flops_merger;
    j["flops_blocks_post_merge"] = r.flops_blocks_post_merge;
    j["flops_head"] = r.flops_head;
    j["params"] = r.params_total;
    j["ratio_vs_backbone"] = r.ratio_vs_backbone;
    out.push_back(j);
  }
  return out.dump(2) + "\n";
}

}  // namespace mergevit
