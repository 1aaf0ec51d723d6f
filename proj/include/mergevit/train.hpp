#pragma once

#include <algorithm>
#include <chrono>
#include <string>
#include <thread>
#include <vector>

#include "mergevit/costmodel.hpp"
#include "mergevit/dataset.hpp"
#include "mergevit/vit.hpp"

namespace mergevit {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// Optimizer/loop settings; the model and dataset live in RunConfig.
struct TrainLoopSpec {
  AdamConfig adam;
  int batch_size = 64;
  int steps = 2000;
  std::uint64_t seed = 0;
  double eval_fraction = 0.2;
  int eval_interval = 0;  // 0 -> steps/10
  int num_threads = 0;    // 0 -> min(4, hardware)
  bool cosine_lr = true;
  std::string precision = "f32";  // "f32" | "f64"
  bool head_only = false;         // linear-probe mode: train only the head
};

struct RunConfig {
  ModelConfig model;
  SyntheticDatasetSpec dataset;
  TrainLoopSpec train;

  void validate() const {
    model.validate();
    if (dataset.image_size != model.image_size)
      throw ConfigError("dataset.image_size differs from model.image_size");
    if (dataset.channels != model.channels)
      throw ConfigError("dataset.channels differs from model.channels");
    if (dataset.num_classes != model.num_classes)
      throw ConfigError("dataset.num_classes differs from model.num_classes");
    if (train.batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (train.steps < 1) throw ConfigError("train.steps must be >= 1");
    if (train.eval_fraction < 0.0 || train.eval_fraction >= 1.0)
      throw ConfigError("train.eval_fraction must be in [0, 1)");
    if (train.precision != "f32" && train.precision != "f64")
      throw ConfigError("train.precision must be f32 or f64");
  }
};

struct EvalPoint {
  int step = 0;
  double train_accuracy = 0;
  double eval_accuracy = 0;
};

struct TrainReport {
  RunConfig config;
  std::string status = "ok";  // "ok" | "diverged"
  int diverged_at_step = -1;
  std::vector<double> loss_curve;  // one entry per completed step
  std::vector<EvalPoint> eval_curve;
  double final_train_accuracy = 0;
  double final_eval_accuracy = 0;
  double flops_per_image_forward = 0;
  int resolved_threads = 1;
  // Wall clock is reported separately (stderr / timing sidecar); it is
  // excluded from the canonical report JSON so identical (config, seed)
  // runs serialize byte-identically.
  double wall_clock_seconds = 0;
};

template <typename T>
struct TrainResult {
  TrainReport report;
  ModelParams<T> params;
};

namespace detail {

inline int resolve_threads(int requested) {
  if (requested > 0) return requested;
  const unsigned hw = std::thread::hardware_concurrency();
  return static_cast<int>(std::min(4u, hw == 0 ? 1u : hw));
}

// Static contiguous partition; chunks are combined in index order afterwards
// so results do not depend on scheduling.
template <typename Fn>
void parallel_chunks(int n_items, int n_threads, Fn&& fn) {
  const int t = std::max(1, std::min(n_threads, n_items));
  if (t == 1) {
    fn(0, 0, n_items);
    return;
  }
  std::vector<std::thread> workers;
  std::vector<std::exception_ptr> errors(t);
  const int base = n_items / t, rem = n_items % t;
  int begin = 0;
  for (int i = 0; i < t; ++i) {
    const int len = base + (i < rem ? 1 : 0);
    workers.emplace_back([&, i, begin, len] {
      try {
        fn(i, begin, begin + len);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    });
    begin += len;
  }
  for (auto& w : workers) w.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

template <typename T>
void add_params(ModelParams<T>& dst, ModelParams<T>& src) {
  auto d = named_params(dst);
  auto s = named_params(src);
  for (std::size_t i = 0; i < d.size(); ++i) add_inplace(*d[i].second, *s[i].second);
}

}  // namespace detail

template <typename T>
double evaluate_accuracy(const ModelConfig& cfg, const ModelParams<T>& params,
                         const std::vector<Tensor<T>>& images, const std::vector<int>& labels,
                         const std::vector<int>& indices, int num_threads) {
  if (indices.empty()) return 0.0;
  std::vector<int> correct_per_thread(std::max(1, num_threads), 0);
  detail::parallel_chunks(static_cast<int>(indices.size()), num_threads,
                          [&](int tid, int begin, int end) {
                            int correct = 0;
                            for (int i = begin; i < end; ++i) {
                              const int idx = indices[i];
                              Tensor<T> logits = forward_single(cfg, params, images[idx]);
                              int argmax = 0;
                              for (int j = 1; j < static_cast<int>(logits.size()); ++j)
                                if (logits.data[j] > logits.data[argmax]) argmax = j;
                              if (argmax == labels[idx]) ++correct;
                            }
                            correct_per_thread[tid] += correct;
                          });
  int total = 0;
  for (int c : correct_per_thread) total += c;
  return static_cast<double>(total) / static_cast<double>(indices.size());
}

// Adam on softmax cross-entropy over the synthetic dataset. Deterministic for
// a fixed (config, seed, thread count): batch chunks are accumulated in chunk
// order. A non-finite loss aborts the run and is reported, never retried.
template <typename T>
TrainResult<T> train_typed(const RunConfig& config, const ModelParams<T>* warm_start = nullptr) {
  config.validate();
  const auto t_start = std::chrono::steady_clock::now();
  const ModelConfig& cfg = config.model;
  const TrainLoopSpec& loop = config.train;
  const int threads = detail::resolve_threads(loop.num_threads);

  Dataset ds = generate_dataset(config.dataset);
  std::vector<Tensor<T>> images;
  images.reserve(ds.images.size());
  for (const auto& img : ds.images) {
    if constexpr (std::is_same_v<T, float>)
      images.push_back(img);
    else
      images.push_back(img.template cast<T>());
  }

  const int n = static_cast<int>(images.size());
  const int n_eval = std::min(n - 1, static_cast<int>(std::lround(n * loop.eval_fraction)));
  const int n_train = n - n_eval;
  std::vector<int> train_idx(n_train), eval_idx(n_eval);
  for (int i = 0; i < n_train; ++i) train_idx[i] = i;
  for (int i = 0; i < n_eval; ++i) eval_idx[i] = n_train + i;
  // fixed subsample for periodic train-split accuracy
  std::vector<int> train_probe(train_idx.begin(),
                               train_idx.begin() + std::min(n_train, std::max(n_eval, 64)));

  TrainResult<T> result;
  result.params = warm_start ? *warm_start : init_params<T>(cfg, loop.seed);
  TrainReport& report = result.report;
  report.config = config;
  report.resolved_threads = threads;
  report.flops_per_image_forward = model_cost(cfg).flops_total();

  ModelParams<T> m_state = zeros_like(result.params);
  ModelParams<T> v_state = zeros_like(result.params);
  auto param_refs = named_params(result.params);
  auto m_refs = named_params(m_state);
  auto v_refs = named_params(v_state);

  Rng data_rng(mix_seed(loop.seed, 0xba7c4e5ULL));
  const int interval = loop.eval_interval > 0 ? loop.eval_interval : std::max(1, loop.steps / 10);

  std::vector<ModelParams<T>> thread_grads;
  for (int t = 0; t < threads; ++t) thread_grads.push_back(zeros_like(result.params));
  std::vector<double> thread_loss(threads, 0.0);

  int adam_t = 0;
  for (int step = 0; step < loop.steps; ++step) {
    // batch_size >= train split turns every step into an identical
    // full-batch step
    std::vector<int> batch;
    if (loop.batch_size >= n_train) {
      batch = train_idx;
    } else {
      batch.resize(loop.batch_size);
      for (auto& b : batch) b = train_idx[data_rng.uniform_int(0, n_train - 1)];
    }
    const int bsz = static_cast<int>(batch.size());

    bool failed = false;
    for (int t = 0; t < threads; ++t) thread_loss[t] = 0.0;
    try {
      detail::parallel_chunks(bsz, threads, [&](int tid, int begin, int end) {
        const T inv_b = T(1) / T(bsz);
        for (int i = begin; i < end; ++i) {
          ForwardCache<T> cache;
          Tensor<T> logits = forward_single(cfg, result.params, images[batch[i]], &cache);
          Tensor<T> dlogits;
          thread_loss[tid] += cross_entropy(logits, ds.labels[batch[i]], &dlogits);
          for (auto& v : dlogits.data) v *= inv_b;
          backward_single(cfg, result.params, cache, dlogits, thread_grads[tid]);
        }
      });
    } catch (const NumericError&) {
      failed = true;
    }

    double loss = 0;
    for (int t = 0; t < threads; ++t) loss += thread_loss[t];
    loss /= bsz;
    if (failed || !std::isfinite(loss)) {
      report.status = "diverged";
      report.diverged_at_step = step;
      break;
    }
    report.loss_curve.push_back(loss);

    // combine per-thread gradients in chunk order
    ModelParams<T>& grads = thread_grads[0];
    for (int t = 1; t < threads; ++t) detail::add_params(grads, thread_grads[t]);

    const double progress = loop.steps > 1 ? double(step) / double(loop.steps) : 0.0;
    const double lr = loop.cosine_lr
                          ? loop.adam.lr * 0.5 * (1.0 + std::cos(progress * 3.14159265358979323846))
                          : loop.adam.lr;
    ++adam_t;
    auto grad_refs = named_params(grads);
    const T b1 = T(loop.adam.beta1), b2 = T(loop.adam.beta2);
    const T bc1 = T(1) - std::pow(b1, T(adam_t));
    const T bc2 = T(1) - std::pow(b2, T(adam_t));
    for (std::size_t p = 0; p < param_refs.size(); ++p) {
      if (loop.head_only && param_refs[p].first.rfind("head", 0) != 0) {
        grad_refs[p].second->fill(T(0));
        continue;
      }
      Tensor<T>& theta = *param_refs[p].second;
      Tensor<T>& gm = *m_refs[p].second;
      Tensor<T>& gv = *v_refs[p].second;
      Tensor<T>& gr = *grad_refs[p].second;
      for (std::size_t i = 0; i < theta.data.size(); ++i) {
        const T g = gr.data[i];
        gm.data[i] = b1 * gm.data[i] + (T(1) - b1) * g;
        gv.data[i] = b2 * gv.data[i] + (T(1) - b2) * g * g;
        const T mhat = gm.data[i] / bc1;
        const T vhat = gv.data[i] / bc2;
        theta.data[i] -= T(lr) * (mhat / (std::sqrt(vhat) + T(loop.adam.eps)) +
                                  T(loop.adam.weight_decay) * theta.data[i]);
      }
      gr.fill(T(0));
    }

    if ((step + 1) % interval == 0 || step + 1 == loop.steps) {
      EvalPoint pt;
      pt.step = step + 1;
      pt.train_accuracy =
          evaluate_accuracy(cfg, result.params, images, ds.labels, train_probe, threads);
      pt.eval_accuracy = n_eval > 0 ? evaluate_accuracy(cfg, result.params, images, ds.labels,
                                                        eval_idx, threads)
                                    : pt.train_accuracy;
      report.eval_curve.push_back(pt);
    }
  }

  if (!report.eval_curve.empty()) {
    report.final_train_accuracy = report.eval_curve.back().train_accuracy;
    report.final_eval_accuracy = report.eval_curve.back().eval_accuracy;
  }
  report.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return result;
}

// Precision-dispatching wrapper; returns the report and (optionally) writes
// the final checkpoint through the callback.
TrainReport train(const RunConfig& config);

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

struct SweepRow {
  int x = 0;  // placement or output token count
  std::uint64_t seed = 0;
  double flops = 0;  // analytic forward FLOPs per image for the row's config
  double accuracy = 0;
  std::string status = "ok";
};

struct SweepTable {
  std::string kind;  // "placement" | "tokens"
  std::vector<SweepRow> rows;
};

SweepTable sweep_placement(const RunConfig& base, const std::vector<int>& placements,
                           const std::vector<std::uint64_t>& seeds);
SweepTable sweep_tokens(const RunConfig& base, const std::vector<int>& token_counts,
                        const std::vector<std::uint64_t>& seeds);

std::string sweep_csv(const SweepTable& table);

// ---------------------------------------------------------------------------
// Variable-resolution evaluation
// ---------------------------------------------------------------------------

struct VarResResult {
  double zero_shot_accuracy = 0;
  int tokens_entering_second_half = 0;
  bool activations_finite = false;
  double finetuned_accuracy = 0;
  TrainReport finetune_report;
};

// Takes a model trained at config.model.image_size, resizes its positional
// embeddings to the new image size, evaluates zero-shot, then finetunes for
// `finetune_steps` on a dataset regenerated at the new size.
VarResResult eval_variable_resolution(const RunConfig& base, const ModelParams<float>& trained,
                                      int new_image_size, int finetune_steps);

// ---------------------------------------------------------------------------
// Report serialization (canonical; excludes wall clock)
// ---------------------------------------------------------------------------

std::string report_to_json(const TrainReport& report);
std::string loss_curve_csv(const TrainReport& report);
std::string eval_curve_csv(const TrainReport& report);

}  // namespace mergevit
