#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mergevit/merger.hpp"
#include "mergevit/rng.hpp"
#include "mergevit/tensor.hpp"

namespace mergevit {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct ModelConfig {
  int image_size = 64;
  int patch_size = 8;
  int channels = 1;
  int hidden_dim = 64;
  int depth = 6;
  int num_heads = 4;
  int mlp_dim = 256;
  int num_classes = 10;
  bool use_cls_token = true;
  // When non-zero, overrides the patch grid side that would otherwise be
  // image_size / patch_size (used by catalog variants whose image size is not
  // divisible by the patch size, e.g. H/11 with a 20x20 grid).
  int grid_override = 0;
  std::optional<MergerConfig> merger;

  int grid() const { return grid_override > 0 ? grid_override : image_size / patch_size; }
  int num_patches() const { return grid() * grid(); }
  int num_tokens() const { return num_patches() + (use_cls_token ? 1 : 0); }
  int patch_dim() const { return patch_size * patch_size * channels; }
  int head_dim() const { return hidden_dim / num_heads; }

  void validate() const {
    if (grid_override == 0 && image_size % patch_size != 0)
      throw ConfigError("image_size " + std::to_string(image_size) +
                        " not divisible by patch_size " + std::to_string(patch_size));
    if (hidden_dim % num_heads != 0)
      throw ConfigError("hidden_dim " + std::to_string(hidden_dim) +
                        " not divisible by num_heads " + std::to_string(num_heads));
    if (depth < 1) throw ConfigError("depth must be >= 1");
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
    if (merger) {
      if (merger->placement < 1 || merger->placement > depth)
        throw ConfigError("merger placement " + std::to_string(merger->placement) +
                          " outside 1.." + std::to_string(depth));
      if (merger->output_tokens < 1) throw ConfigError("merger output_tokens must be >= 1");
    }
  }
};

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

template <typename T>
struct EncoderBlockParams {
  Tensor<T> ln1_gamma, ln1_beta;
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;  // all [D x D] / [D]
  Tensor<T> ln2_gamma, ln2_beta;
  Tensor<T> w1, b1;  // [D x mlp], [mlp]
  Tensor<T> w2, b2;  // [mlp x D], [D]
};

template <typename T>
struct ModelParams {
  Tensor<T> embed_w;  // [patch_dim x D]
  Tensor<T> embed_b;  // [D]
  Tensor<T> posemb;   // [num_patches x D]; covers patch tokens only
  Tensor<T> cls;      // [1 x D] when use_cls_token
  std::vector<EncoderBlockParams<T>> blocks;
  std::optional<MergerParams<T>> merger;
  Tensor<T> head_ln_gamma, head_ln_beta;
  Tensor<T> head_w;  // [D x num_classes]
  Tensor<T> head_b;  // [num_classes]
};

namespace detail {
template <typename T>
Tensor<T> trunc_normal(std::vector<int> shape, Rng& rng, double stddev = 0.02) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data) v = T(rng.truncated_normal(stddev));
  return t;
}
template <typename T>
Tensor<T> ones(std::vector<int> shape) {
  Tensor<T> t(std::move(shape));
  t.fill(T(1));
  return t;
}
}  // namespace detail

// Parameters are drawn in named_params order so a (config, seed) pair always
// produces the same initialization.
template <typename T>
ModelParams<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const int d = cfg.hidden_dim;
  ModelParams<T> p;
  p.embed_w = detail::trunc_normal<T>({cfg.patch_dim(), d}, rng);
  p.embed_b = Tensor<T>({d});
  p.posemb = Tensor<T>({cfg.num_patches(), d});
  for (auto& v : p.posemb.data) v = T(rng.normal(0.0, 0.02));
  if (cfg.use_cls_token) p.cls = detail::trunc_normal<T>({1, d}, rng);
  p.blocks.resize(cfg.depth);
  for (auto& b : p.blocks) {
    b.ln1_gamma = detail::ones<T>({d});
    b.ln1_beta = Tensor<T>({d});
    b.wq = detail::trunc_normal<T>({d, d}, rng);
    b.bq = Tensor<T>({d});
    b.wk = detail::trunc_normal<T>({d, d}, rng);
    b.bk = Tensor<T>({d});
    b.wv = detail::trunc_normal<T>({d, d}, rng);
    b.bv = Tensor<T>({d});
    b.wo = detail::trunc_normal<T>({d, d}, rng);
    b.bo = Tensor<T>({d});
    b.ln2_gamma = detail::ones<T>({d});
    b.ln2_beta = Tensor<T>({d});
    b.w1 = detail::trunc_normal<T>({d, cfg.mlp_dim}, rng);
    b.b1 = Tensor<T>({cfg.mlp_dim});
    b.w2 = detail::trunc_normal<T>({cfg.mlp_dim, d}, rng);
    b.b2 = Tensor<T>({d});
  }
  if (cfg.merger) p.merger = init_merger_params<T>(d, cfg.merger->output_tokens, rng);
  p.head_ln_gamma = detail::ones<T>({d});
  p.head_ln_beta = Tensor<T>({d});
  p.head_w = detail::trunc_normal<T>({d, cfg.num_classes}, rng);
  p.head_b = Tensor<T>({cfg.num_classes});
  return p;
}

template <typename T>
ModelParams<T> zeros_like(const ModelParams<T>& p) {
  ModelParams<T> z;
  z.embed_w = Tensor<T>(p.embed_w.shape);
  z.embed_b = Tensor<T>(p.embed_b.shape);
  z.posemb = Tensor<T>(p.posemb.shape);
  if (!p.cls.data.empty()) z.cls = Tensor<T>(p.cls.shape);
  z.blocks.resize(p.blocks.size());
  for (std::size_t i = 0; i < p.blocks.size(); ++i) {
    const auto& b = p.blocks[i];
    auto& o = z.blocks[i];
    o.ln1_gamma = Tensor<T>(b.ln1_gamma.shape);
    o.ln1_beta = Tensor<T>(b.ln1_beta.shape);
    o.wq = Tensor<T>(b.wq.shape);
    o.bq = Tensor<T>(b.bq.shape);
    o.wk = Tensor<T>(b.wk.shape);
    o.bk = Tensor<T>(b.bk.shape);
    o.wv = Tensor<T>(b.wv.shape);
    o.bv = Tensor<T>(b.bv.shape);
    o.wo = Tensor<T>(b.wo.shape);
    o.bo = Tensor<T>(b.bo.shape);
    o.ln2_gamma = Tensor<T>(b.ln2_gamma.shape);
    o.ln2_beta = Tensor<T>(b.ln2_beta.shape);
    o.w1 = Tensor<T>(b.w1.shape);
    o.b1 = Tensor<T>(b.b1.shape);
    o.w2 = Tensor<T>(b.w2.shape);
    o.b2 = Tensor<T>(b.b2.shape);
  }
  if (p.merger) z.merger = MergerParams<T>{Tensor<T>(p.merger->w.shape),
                                           Tensor<T>(p.merger->ln_gamma.shape),
                                           Tensor<T>(p.merger->ln_beta.shape)};
  z.head_ln_gamma = Tensor<T>(p.head_ln_gamma.shape);
  z.head_ln_beta = Tensor<T>(p.head_ln_beta.shape);
  z.head_w = Tensor<T>(p.head_w.shape);
  z.head_b = Tensor<T>(p.head_b.shape);
  return z;
}

// Stable parameter paths; also the checkpoint key set.
template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> named_params(ModelParams<T>& p) {
  std::vector<std::pair<std::string, Tensor<T>*>> out;
  out.emplace_back("embed/W", &p.embed_w);
  out.emplace_back("embed/b", &p.embed_b);
  out.emplace_back("posemb", &p.posemb);
  if (!p.cls.data.empty()) out.emplace_back("cls", &p.cls);
  for (std::size_t i = 0; i < p.blocks.size(); ++i) {
    const std::string base = "block" + std::to_string(i) + "/";
    auto& b = p.blocks[i];
    out.emplace_back(base + "ln1/gamma", &b.ln1_gamma);
    out.emplace_back(base + "ln1/beta", &b.ln1_beta);
    out.emplace_back(base + "attn/Wq", &b.wq);
    out.emplace_back(base + "attn/bq", &b.bq);
    out.emplace_back(base + "attn/Wk", &b.wk);
    out.emplace_back(base + "attn/bk", &b.bk);
    out.emplace_back(base + "attn/Wv", &b.wv);
    out.emplace_back(base + "attn/bv", &b.bv);
    out.emplace_back(base + "attn/Wo", &b.wo);
    out.emplace_back(base + "attn/bo", &b.bo);
    out.emplace_back(base + "ln2/gamma", &b.ln2_gamma);
    out.emplace_back(base + "ln2/beta", &b.ln2_beta);
    out.emplace_back(base + "mlp/W1", &b.w1);
    out.emplace_back(base + "mlp/b1", &b.b1);
    out.emplace_back(base + "mlp/W2", &b.w2);
    out.emplace_back(base + "mlp/b2", &b.b2);
  }
  if (p.merger) {
    out.emplace_back("merger/W", &p.merger->w);
    out.emplace_back("merger/ln_gamma", &p.merger->ln_gamma);
    out.emplace_back("merger/ln_beta", &p.merger->ln_beta);
  }
  out.emplace_back("head_ln/gamma", &p.head_ln_gamma);
  out.emplace_back("head_ln/beta", &p.head_ln_beta);
  out.emplace_back("head/W", &p.head_w);
  out.emplace_back("head/b", &p.head_b);
  return out;
}

template <typename T, typename U>
ModelParams<U> cast_params(const ModelParams<T>& p) {
  ModelParams<U> o;
  o.embed_w = p.embed_w.template cast<U>();
  o.embed_b = p.embed_b.template cast<U>();
  o.posemb = p.posemb.template cast<U>();
  if (!p.cls.data.empty()) o.cls = p.cls.template cast<U>();
  o.blocks.resize(p.blocks.size());
  for (std::size_t i = 0; i < p.blocks.size(); ++i) {
    const auto& b = p.blocks[i];
    auto& t = o.blocks[i];
    t.ln1_gamma = b.ln1_gamma.template cast<U>();
    t.ln1_beta = b.ln1_beta.template cast<U>();
    t.wq = b.wq.template cast<U>();
    t.bq = b.bq.template cast<U>();
    t.wk = b.wk.template cast<U>();
    t.bk = b.bk.template cast<U>();
    t.wv = b.wv.template cast<U>();
    t.bv = b.bv.template cast<U>();
    t.wo = b.wo.template cast<U>();
    t.bo = b.bo.template cast<U>();
    t.ln2_gamma = b.ln2_gamma.template cast<U>();
    t.ln2_beta = b.ln2_beta.template cast<U>();
    t.w1 = b.w1.template cast<U>();
    t.b1 = b.b1.template cast<U>();
    t.w2 = b.w2.template cast<U>();
    t.b2 = b.b2.template cast<U>();
  }
  if (p.merger) o.merger = p.merger->template cast<U>();
  o.head_ln_gamma = p.head_ln_gamma.template cast<U>();
  o.head_ln_beta = p.head_ln_beta.template cast<U>();
  o.head_w = p.head_w.template cast<U>();
  o.head_b = p.head_b.template cast<U>();
  return o;
}

// ---------------------------------------------------------------------------
// Patch extraction
// ---------------------------------------------------------------------------

// [H x W x C] image -> [num_patches x patch_size^2*C], patches in row-major
// grid order, pixels within a patch in row-major (y, x, c) order. Lossless.
template <typename T>
Tensor<T> patchify(const Tensor<T>& image, int patch_size) {
  if (image.shape.size() != 3)
    throw ConfigError("patchify expects an [H x W x C] image, got " + shape_str(image.shape));
  const int h = image.shape[0], w = image.shape[1], c = image.shape[2];
  if (h % patch_size != 0 || w % patch_size != 0)
    throw ConfigError("image " + std::to_string(h) + "x" + std::to_string(w) +
                      " not divisible by patch_size " + std::to_string(patch_size));
  const int gh = h / patch_size, gw = w / patch_size;
  Tensor<T> out({gh * gw, patch_size * patch_size * c});
  for (int gy = 0; gy < gh; ++gy)
    for (int gx = 0; gx < gw; ++gx) {
      T* dst = out.row_ptr(gy * gw + gx);
      for (int py = 0; py < patch_size; ++py) {
        const T* src =
            image.data.data() + ((static_cast<std::size_t>(gy * patch_size + py) * w) +
                                 static_cast<std::size_t>(gx) * patch_size) *
                                    c;
        std::copy(src, src + static_cast<std::size_t>(patch_size) * c,
                  dst + static_cast<std::size_t>(py) * patch_size * c);
      }
    }
  return out;
}

template <typename T>
Tensor<T> unpatchify(const Tensor<T>& patches, int patch_size, int height, int width, int channels) {
  const int gh = height / patch_size, gw = width / patch_size;
  if (patches.rows() != gh * gw || patches.cols() != patch_size * patch_size * channels)
    throw ConfigError("unpatchify: patch matrix " + shape_str(patches.shape) +
                      " inconsistent with target image");
  Tensor<T> img({height, width, channels});
  for (int gy = 0; gy < gh; ++gy)
    for (int gx = 0; gx < gw; ++gx) {
      const T* src = patches.row_ptr(gy * gw + gx);
      for (int py = 0; py < patch_size; ++py) {
        T* dst = img.data.data() + ((static_cast<std::size_t>(gy * patch_size + py) * width) +
                                    static_cast<std::size_t>(gx) * patch_size) *
                                       channels;
        std::copy(src + static_cast<std::size_t>(py) * patch_size * channels,
                  src + static_cast<std::size_t>(py + 1) * patch_size * channels, dst);
      }
    }
  return img;
}

// ---------------------------------------------------------------------------
// Multi-head self-attention
// ---------------------------------------------------------------------------

namespace detail {
template <typename T>
Tensor<T> head_slice(const Tensor<T>& x, int head, int head_dim) {
  Tensor<T> out({x.rows(), head_dim});
  for (int i = 0; i < x.rows(); ++i) {
    const T* src = x.row_ptr(i) + head * head_dim;
    std::copy(src, src + head_dim, out.row_ptr(i));
  }
  return out;
}

template <typename T>
void head_scatter_add(Tensor<T>& dst, const Tensor<T>& part, int head, int head_dim) {
  for (int i = 0; i < dst.rows(); ++i) {
    T* d = dst.row_ptr(i) + head * head_dim;
    const T* s = part.row_ptr(i);
    for (int j = 0; j < head_dim; ++j) d[j] += s[j];
  }
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  Tensor<T> y = matmul(x, w);
  add_row_inplace(y, b);
  return y;
}
}  // namespace detail

template <typename T>
struct AttentionCache {
  Tensor<T> x;  // attention input [N x D]
  Tensor<T> q, k, v;
  std::vector<Tensor<T>> probs;  // per head [N x N]
  Tensor<T> concat;              // heads merged back, pre output projection
};

// Scaled dot-product attention over all tokens. Scores are scaled by
// 1/sqrt(head_dim); attention weight rows sum to 1.
template <typename T>
Tensor<T> attention(const Tensor<T>& x, const EncoderBlockParams<T>& p, int num_heads,
                    AttentionCache<T>* cache = nullptr) {
  require_matrix(x, "attention input");
  const int n = x.rows(), d = x.cols();
  const int hd = d / num_heads;
  const T scale = T(1) / std::sqrt(T(hd));

  Tensor<T> q = detail::linear(x, p.wq, p.bq);
  Tensor<T> k = detail::linear(x, p.wk, p.bk);
  Tensor<T> v = detail::linear(x, p.wv, p.bv);

  Tensor<T> concat({n, d});
  std::vector<Tensor<T>> probs;
  probs.reserve(num_heads);
  for (int h = 0; h < num_heads; ++h) {
    Tensor<T> qh = detail::head_slice(q, h, hd);
    Tensor<T> kh = detail::head_slice(k, h, hd);
    Tensor<T> vh = detail::head_slice(v, h, hd);
    Tensor<T> scores = matmul_nt(qh, kh);
    for (auto& s : scores.data) s *= scale;
    FlopCounter::add(scores.size());
    Tensor<T> ph = softmax_rows(scores);
    Tensor<T> oh = matmul(ph, vh);
    detail::head_scatter_add(concat, oh, h, hd);
    probs.push_back(std::move(ph));
  }
  Tensor<T> out = detail::linear(concat, p.wo, p.bo);
  if (cache) {
    cache->x = x;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->probs = std::move(probs);
    cache->concat = std::move(concat);
  }
  return out;
}

template <typename T>
Tensor<T> attention_backward(const AttentionCache<T>& c, const EncoderBlockParams<T>& p,
                             int num_heads, const Tensor<T>& dout, EncoderBlockParams<T>& g) {
  const int n = c.x.rows(), d = c.x.cols();
  const int hd = d / num_heads;
  const T scale = T(1) / std::sqrt(T(hd));

  add_inplace(g.wo, matmul_tn(c.concat, dout));
  add_inplace(g.bo, col_sums(dout));
  Tensor<T> dconcat = matmul_nt(dout, p.wo);

  Tensor<T> dq({n, d}), dk({n, d}), dv({n, d});
  for (int h = 0; h < num_heads; ++h) {
    Tensor<T> doh = detail::head_slice(dconcat, h, hd);
    Tensor<T> qh = detail::head_slice(c.q, h, hd);
    Tensor<T> kh = detail::head_slice(c.k, h, hd);
    Tensor<T> vh = detail::head_slice(c.v, h, hd);
    const Tensor<T>& ph = c.probs[h];

    Tensor<T> dph = matmul_nt(doh, vh);
    Tensor<T> dvh = matmul_tn(ph, doh);
    Tensor<T> ds = softmax_rows_backward(ph, dph);
    for (auto& s : ds.data) s *= scale;
    Tensor<T> dqh = matmul(ds, kh);
    Tensor<T> dkh = matmul_tn(ds, qh);

    detail::head_scatter_add(dq, dqh, h, hd);
    detail::head_scatter_add(dk, dkh, h, hd);
    detail::head_scatter_add(dv, dvh, h, hd);
  }

  add_inplace(g.wq, matmul_tn(c.x, dq));
  add_inplace(g.bq, col_sums(dq));
  add_inplace(g.wk, matmul_tn(c.x, dk));
  add_inplace(g.bk, col_sums(dk));
  add_inplace(g.wv, matmul_tn(c.x, dv));
  add_inplace(g.bv, col_sums(dv));

  Tensor<T> dx = matmul_nt(dq, p.wq);
  add_inplace(dx, matmul_nt(dk, p.wk));
  add_inplace(dx, matmul_nt(dv, p.wv));
  return dx;
}

// ---------------------------------------------------------------------------
// Pre-norm encoder block: x + Att(LN(x)), then + MLP(LN(.))
// ---------------------------------------------------------------------------

template <typename T>
struct BlockCache {
  Tensor<T> x;
  Tensor<T> n1;
  AttentionCache<T> attn;
  Tensor<T> h;
  Tensor<T> n2;
  Tensor<T> m1;
  Tensor<T> g;
};

template <typename T>
Tensor<T> encoder_block(const Tensor<T>& x, const EncoderBlockParams<T>& p, int num_heads,
                        BlockCache<T>* cache = nullptr) {
  Tensor<T> n1 = layer_norm(x, p.ln1_gamma, p.ln1_beta);
  AttentionCache<T> ac;
  Tensor<T> a = attention(n1, p, num_heads, cache ? &ac : nullptr);
  Tensor<T> h = add(x, a);
  Tensor<T> n2 = layer_norm(h, p.ln2_gamma, p.ln2_beta);
  Tensor<T> m1 = detail::linear(n2, p.w1, p.b1);
  Tensor<T> g = gelu(m1);
  Tensor<T> m2 = detail::linear(g, p.w2, p.b2);
  Tensor<T> out = add(h, m2);
  if (cache) {
    cache->x = x;
    cache->n1 = std::move(n1);
    cache->attn = std::move(ac);
    cache->h = std::move(h);
    cache->n2 = std::move(n2);
    cache->m1 = std::move(m1);
    cache->g = std::move(g);
  }
  return out;
}

template <typename T>
Tensor<T> encoder_block_backward(const BlockCache<T>& c, const EncoderBlockParams<T>& p,
                                 int num_heads, const Tensor<T>& dout, EncoderBlockParams<T>& g) {
  // out = h + m2
  Tensor<T> dh = dout;
  const Tensor<T>& dm2 = dout;
  add_inplace(g.w2, matmul_tn(c.g, dm2));
  add_inplace(g.b2, col_sums(dm2));
  Tensor<T> dg = matmul_nt(dm2, p.w2);
  Tensor<T> dm1 = gelu_backward(c.m1, dg);
  add_inplace(g.w1, matmul_tn(c.n2, dm1));
  add_inplace(g.b1, col_sums(dm1));
  Tensor<T> dn2 = matmul_nt(dm1, p.w1);
  Tensor<T> dh2;
  layer_norm_backward(c.h, p.ln2_gamma, dn2, &dh2, &g.ln2_gamma, &g.ln2_beta);
  add_inplace(dh, dh2);

  // h = x + attention(n1)
  Tensor<T> dx = dh;
  Tensor<T> dn1 = attention_backward(c.attn, p, num_heads, dh, g);
  Tensor<T> dx1;
  layer_norm_backward(c.x, p.ln1_gamma, dn1, &dx1, &g.ln1_gamma, &g.ln1_beta);
  add_inplace(dx, dx1);
  return dx;
}

// ---------------------------------------------------------------------------
// Positional embedding resize (bilinear over the 2-D grid, align-corners)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> resize_posemb(const Tensor<T>& posemb, int new_grid) {
  require_matrix(posemb, "resize_posemb");
  const int n_old = posemb.rows(), d = posemb.cols();
  int g_old = static_cast<int>(std::lround(std::sqrt(double(n_old))));
  if (g_old * g_old != n_old)
    throw ConfigError("resize_posemb: " + std::to_string(n_old) + " embeddings is not a square grid");
  if (new_grid < 1) throw ConfigError("resize_posemb: new grid must be >= 1");
  if (new_grid == g_old) return posemb;

  Tensor<T> out({new_grid * new_grid, d});
  for (int oy = 0; oy < new_grid; ++oy) {
    for (int ox = 0; ox < new_grid; ++ox) {
      // align-corners mapping; collapses to the grid center when either side
      // is a single cell
      const double sy = (new_grid > 1 && g_old > 1)
                            ? double(oy) * (g_old - 1) / (new_grid - 1)
                            : (g_old - 1) * 0.5;
      const double sx = (new_grid > 1 && g_old > 1)
                            ? double(ox) * (g_old - 1) / (new_grid - 1)
                            : (g_old - 1) * 0.5;
      const int y0 = std::min(static_cast<int>(sy), g_old - 1);
      const int x0 = std::min(static_cast<int>(sx), g_old - 1);
      const int y1 = std::min(y0 + 1, g_old - 1);
      const int x1 = std::min(x0 + 1, g_old - 1);
      const T fy = T(sy - y0), fx = T(sx - x0);
      const T* p00 = posemb.row_ptr(y0 * g_old + x0);
      const T* p01 = posemb.row_ptr(y0 * g_old + x1);
      const T* p10 = posemb.row_ptr(y1 * g_old + x0);
      const T* p11 = posemb.row_ptr(y1 * g_old + x1);
      T* dst = out.row_ptr(oy * new_grid + ox);
      for (int j = 0; j < d; ++j) {
        const T top = p00[j] * (T(1) - fx) + p01[j] * fx;
        const T bot = p10[j] * (T(1) - fx) + p11[j] * fx;
        dst[j] = top * (T(1) - fy) + bot * fy;
      }
    }
  }
  ensure_finite(out, "resize_posemb");
  return out;
}

// ---------------------------------------------------------------------------
// Full model forward/backward (single image; batching loops outside)
// ---------------------------------------------------------------------------

template <typename T>
struct ForwardCache {
  Tensor<T> patches;
  std::vector<BlockCache<T>> blocks;
  std::vector<int> tokens_entering_block;  // token count seen by each block
  bool merged = false;
  MergeCache<T> merge;
  int tokens_after_merge = 0;
  Tensor<T> final_tokens;
  Tensor<T> feature;  // [1 x D]
};

// Embed patches, add positional embeddings, prepend cls, run the blocks with
// the merger (if configured) applied after `placement` blocks, layer-norm and
// classify. Returns logits [1 x num_classes].
template <typename T>
Tensor<T> forward_single(const ModelConfig& cfg, const ModelParams<T>& params,
                         const Tensor<T>& image, ForwardCache<T>* cache = nullptr) {
  Tensor<T> patches = patchify(image, cfg.patch_size);
  if (patches.rows() != params.posemb.rows())
    throw ShapeError("forward: image yields " + std::to_string(patches.rows()) +
                     " patches but positional embeddings have " +
                     std::to_string(params.posemb.rows()) +
                     " rows; resize them first (resize_posemb)");
  Tensor<T> emb = detail::linear(patches, params.embed_w, params.embed_b);
  add_inplace(emb, params.posemb);

  Tensor<T> x;
  if (cfg.use_cls_token) {
    x = Tensor<T>({emb.rows() + 1, cfg.hidden_dim});
    std::copy(params.cls.data.begin(), params.cls.data.end(), x.data.begin());
    std::copy(emb.data.begin(), emb.data.end(), x.data.begin() + cfg.hidden_dim);
  } else {
    x = std::move(emb);
  }

  if (cache) {
    cache->patches = std::move(patches);
    cache->blocks.resize(cfg.depth);
    cache->tokens_entering_block.clear();
    cache->merged = false;
  }

  for (int b = 0; b < cfg.depth; ++b) {
    if (cache) cache->tokens_entering_block.push_back(x.rows());
    x = encoder_block(x, params.blocks[b], cfg.num_heads, cache ? &cache->blocks[b] : nullptr);
    if (cfg.merger && cfg.merger->placement == b + 1) {
      MergeCache<T>* mc = cache ? &cache->merge : nullptr;
      if (cfg.use_cls_token && cfg.merger->preserve_cls)
        x = merge_with_cls(x, *params.merger, mc);
      else
        x = merge(x, *params.merger, mc);
      if (cache) {
        cache->merged = true;
        cache->tokens_after_merge = x.rows();
      }
    }
  }

  Tensor<T> normed = layer_norm(x, params.head_ln_gamma, params.head_ln_beta);
  Tensor<T> feature({1, cfg.hidden_dim});
  if (cfg.use_cls_token) {
    std::copy(normed.row_ptr(0), normed.row_ptr(0) + cfg.hidden_dim, feature.data.begin());
  } else {
    for (int i = 0; i < normed.rows(); ++i) {
      const T* r = normed.row_ptr(i);
      for (int j = 0; j < cfg.hidden_dim; ++j) feature.data[j] += r[j];
    }
    for (auto& v : feature.data) v /= T(normed.rows());
    FlopCounter::add(normed.size());
  }
  Tensor<T> logits = detail::linear(feature, params.head_w, params.head_b);
  if (cache) {
    cache->final_tokens = std::move(x);
    cache->feature = std::move(feature);
  }
  return logits;
}

// Batch forward: images stacked into [B x num_classes] logits.
template <typename T>
Tensor<T> forward_batch(const ModelConfig& cfg, const ModelParams<T>& params,
                        const std::vector<Tensor<T>>& images) {
  if (images.empty()) throw ConfigError("forward_batch: empty batch");
  Tensor<T> logits({static_cast<int>(images.size()), cfg.num_classes});
  for (std::size_t i = 0; i < images.size(); ++i) {
    Tensor<T> row = forward_single(cfg, params, images[i]);
    std::copy(row.data.begin(), row.data.end(), logits.row_ptr(static_cast<int>(i)));
  }
  return logits;
}

// Softmax cross-entropy for one logits row; fills dlogits with (p - onehot).
template <typename T>
T cross_entropy(const Tensor<T>& logits, int label, Tensor<T>* dlogits = nullptr) {
  const int k = static_cast<int>(logits.size());
  if (label < 0 || label >= k)
    throw ConfigError("cross_entropy: label " + std::to_string(label) + " outside 0.." +
                      std::to_string(k - 1));
  T mx = logits.data[0];
  for (T v : logits.data) mx = std::max(mx, v);
  T sum = 0;
  for (T v : logits.data) sum += std::exp(v - mx);
  const T lse = std::log(sum) + mx;
  const T loss = lse - logits.data[label];
  if (dlogits) {
    *dlogits = Tensor<T>({1, k});
    for (int j = 0; j < k; ++j) dlogits->data[j] = std::exp(logits.data[j] - lse);
    dlogits->data[label] -= T(1);
  }
  if (!std::isfinite(loss)) throw NumericError("cross_entropy produced a non-finite loss");
  return loss;
}

// Accumulates parameter gradients for one image given dlogits (already scaled
// by any 1/batch factor). Returns nothing; input-image gradients are not
// propagated past the patch embedding.
template <typename T>
void backward_single(const ModelConfig& cfg, const ModelParams<T>& params,
                     const ForwardCache<T>& cache, const Tensor<T>& dlogits,
                     ModelParams<T>& grads) {
  add_inplace(grads.head_w, matmul_tn(cache.feature, dlogits));
  add_inplace(grads.head_b, col_sums(dlogits));
  Tensor<T> dfeature = matmul_nt(dlogits, params.head_w);

  const int nf = cache.final_tokens.rows();
  Tensor<T> dnormed({nf, cfg.hidden_dim});
  if (cfg.use_cls_token) {
    std::copy(dfeature.data.begin(), dfeature.data.end(), dnormed.row_ptr(0));
  } else {
    for (int i = 0; i < nf; ++i) {
      T* r = dnormed.row_ptr(i);
      for (int j = 0; j < cfg.hidden_dim; ++j) r[j] = dfeature.data[j] / T(nf);
    }
  }
  Tensor<T> dx;
  layer_norm_backward(cache.final_tokens, params.head_ln_gamma, dnormed, &dx,
                      &grads.head_ln_gamma, &grads.head_ln_beta);

  MergerGrads<T> mgrads;
  if (grads.merger) mgrads = zero_merger_grads(*params.merger);
  for (int b = cfg.depth - 1; b >= 0; --b) {
    if (cache.merged && cfg.merger->placement == b + 1) {
      if (cfg.use_cls_token && cfg.merger->preserve_cls)
        dx = merge_with_cls_backward(cache.merge, *params.merger, dx, mgrads);
      else
        dx = merge_backward(cache.merge, *params.merger, dx, mgrads);
    }
    dx = encoder_block_backward(cache.blocks[b], params.blocks[b], cfg.num_heads, dx,
                                grads.blocks[b]);
  }
  if (grads.merger) {
    add_inplace(grads.merger->w, mgrads.w);
    add_inplace(grads.merger->ln_gamma, mgrads.ln_gamma);
    add_inplace(grads.merger->ln_beta, mgrads.ln_beta);
  }

  Tensor<T> demb;
  if (cfg.use_cls_token) {
    for (int j = 0; j < cfg.hidden_dim; ++j) grads.cls.data[j] += dx.data[j];
    demb = Tensor<T>({dx.rows() - 1, cfg.hidden_dim});
    std::copy(dx.data.begin() + cfg.hidden_dim, dx.data.end(), demb.data.begin());
  } else {
    demb = std::move(dx);
  }
  add_inplace(grads.posemb, demb);
  add_inplace(grads.embed_w, matmul_tn(cache.patches, demb));
  add_inplace(grads.embed_b, col_sums(demb));
}

// Mean cross-entropy over a mini-batch; when `grads` is given, accumulates
// d(mean loss)/d(params) into it.
template <typename T>
T model_loss(const ModelConfig& cfg, const ModelParams<T>& params,
             const std::vector<Tensor<T>>& images, const std::vector<int>& labels,
             ModelParams<T>* grads = nullptr) {
  if (images.size() != labels.size() || images.empty())
    throw ConfigError("model_loss: batch images/labels mismatch");
  const T inv_b = T(1) / T(images.size());
  T total = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    ForwardCache<T> cache;
    Tensor<T> logits = forward_single(cfg, params, images[i], grads ? &cache : nullptr);
    Tensor<T> dlogits;
    total += cross_entropy(logits, labels[i], grads ? &dlogits : nullptr);
    if (grads) {
      for (auto& v : dlogits.data) v *= inv_b;
      backward_single(cfg, params, cache, dlogits, *grads);
    }
  }
  return total * inv_b;
}

}  // namespace mergevit
