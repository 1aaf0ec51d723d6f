#pragma once

#include "mergevit/rng.hpp"
#include "mergevit/tensor.hpp"

namespace mergevit {

// Token merger configuration. `placement` is the number of encoder blocks
// applied before the merger; `output_tokens` is M, the fixed output count.
struct MergerConfig {
  int placement = 0;
  int output_tokens = 8;
  bool preserve_cls = true;
};

template <typename T>
struct MergerParams {
  Tensor<T> w;         // [D x M]
  Tensor<T> ln_gamma;  // [D]
  Tensor<T> ln_beta;   // [D]

  int latent_dim() const { return w.rows(); }
  int output_tokens() const { return w.cols(); }

  template <typename U>
  MergerParams<U> cast() const {
    return {w.template cast<U>(), ln_gamma.template cast<U>(), ln_beta.template cast<U>()};
  }
};

template <typename T>
MergerParams<T> init_merger_params(int hidden_dim, int output_tokens, Rng& rng) {
  MergerParams<T> p;
  p.w = Tensor<T>({hidden_dim, output_tokens});
  for (auto& v : p.w.data) v = T(rng.truncated_normal(0.02));
  p.ln_gamma = Tensor<T>({hidden_dim});
  p.ln_gamma.fill(T(1));
  p.ln_beta = Tensor<T>({hidden_dim});
  return p;
}

template <typename T>
struct MergeCache {
  Tensor<T> x;        // raw input [N x D]
  Tensor<T> z;        // layer-normed input [N x D]
  Tensor<T> weights;  // softmax scores [N x M], rows sum to 1
};

// Core merge on an already-normalized input: scores = z W, per-input-token
// softmax over the M scores, output = weights^T z. Output has exactly M rows
// for any N >= 1.
template <typename T>
Tensor<T> merge_core(const Tensor<T>& z, const Tensor<T>& w, Tensor<T>* weights_out = nullptr) {
  require_matrix(z, "merge input");
  if (z.cols() != w.rows())
    throw ShapeError("merge: token width " + shape_str(z.shape) + " vs W " + shape_str(w.shape));
  Tensor<T> weights = softmax_rows(matmul(z, w));
  Tensor<T> y = matmul_tn(weights, z);
  if (weights_out) *weights_out = std::move(weights);
  return y;
}

// Full merge: layer norm (the merger owns its own gamma/beta), then merge_core.
template <typename T>
Tensor<T> merge(const Tensor<T>& x, const MergerParams<T>& params, MergeCache<T>* cache = nullptr) {
  Tensor<T> z = layer_norm(x, params.ln_gamma, params.ln_beta);
  Tensor<T> weights;
  Tensor<T> y = merge_core(z, params.w, &weights);
  if (cache) {
    cache->x = x;
    cache->z = std::move(z);
    cache->weights = std::move(weights);
  }
  return y;
}

// First row of x is the cls token; it bypasses merging and is re-prepended,
// so (N+1) tokens in -> (M+1) tokens out.
template <typename T>
Tensor<T> merge_with_cls(const Tensor<T>& x, const MergerParams<T>& params,
                         MergeCache<T>* cache = nullptr) {
  require_matrix(x, "merge_with_cls input");
  if (x.rows() < 2)
    throw ConfigError("merge_with_cls: need at least one token besides cls, got " +
                      std::to_string(x.rows()) + " rows");
  const int n = x.rows() - 1, d = x.cols();
  Tensor<T> spatial({n, d});
  std::copy(x.data.begin() + d, x.data.end(), spatial.data.begin());
  Tensor<T> merged = merge(spatial, params, cache);
  Tensor<T> out({merged.rows() + 1, d});
  std::copy(x.data.begin(), x.data.begin() + d, out.data.begin());
  std::copy(merged.data.begin(), merged.data.end(), out.data.begin() + d);
  return out;
}

template <typename T>
struct MergerGrads {
  Tensor<T> w;
  Tensor<T> ln_gamma;
  Tensor<T> ln_beta;
};

template <typename T>
MergerGrads<T> zero_merger_grads(const MergerParams<T>& p) {
  return {Tensor<T>(p.w.shape), Tensor<T>(p.ln_gamma.shape), Tensor<T>(p.ln_beta.shape)};
}

// Exact gradients of merge. dY is [M x D]; returns dX and accumulates into
// the parameter gradients.
template <typename T>
Tensor<T> merge_backward(const MergeCache<T>& cache, const MergerParams<T>& params,
                         const Tensor<T>& dy, MergerGrads<T>& grads) {
  // y = weights^T z  =>  d_weights = z dy^T, dz = weights dy
  Tensor<T> dweights = matmul_nt(cache.z, dy);
  Tensor<T> dz = matmul(cache.weights, dy);
  // through the per-token softmax
  Tensor<T> dscores = softmax_rows_backward(cache.weights, dweights);
  // scores = z W
  add_inplace(dz, matmul_nt(dscores, params.w));
  add_inplace(grads.w, matmul_tn(cache.z, dscores));
  // through the merger's layer norm
  Tensor<T> dx;
  layer_norm_backward(cache.x, params.ln_gamma, dz, &dx, &grads.ln_gamma, &grads.ln_beta);
  return dx;
}

// cls-bypass variant: row 0 of d_out flows straight to the cls row.
template <typename T>
Tensor<T> merge_with_cls_backward(const MergeCache<T>& cache, const MergerParams<T>& params,
                                  const Tensor<T>& dy, MergerGrads<T>& grads) {
  const int d = dy.cols();
  Tensor<T> dmerged({dy.rows() - 1, d});
  std::copy(dy.data.begin() + d, dy.data.end(), dmerged.data.begin());
  Tensor<T> dspatial = merge_backward(cache, params, dmerged, grads);
  Tensor<T> dx({dspatial.rows() + 1, d});
  std::copy(dy.data.begin(), dy.data.begin() + d, dx.data.begin());
  std::copy(dspatial.data.begin(), dspatial.data.end(), dx.data.begin() + d);
  return dx;
}

}  // namespace mergevit
