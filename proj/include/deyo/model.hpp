#pragma once

// Small classifier used for adaptation experiments:
//
//   flatten -> dense(H) -> norm (batch or layer) -> ReLU -> dense(C)
//
// Only the normalization affine parameters (gamma, beta) are trainable at
// adaptation time. Batch-norm always normalizes with statistics of the batch
// being evaluated; no running statistics are kept.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "deyo/data.hpp"
#include "deyo/errors.hpp"
#include "deyo/numerics.hpp"
#include "deyo/transforms.hpp"

namespace deyo {

enum class NormKind { batch, layer };

inline std::string_view to_string(NormKind k) noexcept {
  return k == NormKind::batch ? "batch" : "layer";
}

inline NormKind parse_norm_kind(std::string_view s) {
  if (s == "batch" || s == "batch_norm" || s == "bn") return NormKind::batch;
  if (s == "layer" || s == "layer_norm" || s == "ln") return NormKind::layer;
  throw ConfigError("unknown norm kind '" + std::string(s) + "'");
}

struct NormLayer {
  NormKind kind = NormKind::batch;
  std::vector<double> gamma;
  std::vector<double> beta;
  double eps = 1e-5;

  friend bool operator==(const NormLayer&, const NormLayer&) = default;
};

/// Every learnable tensor plus the adaptation momentum buffers, which are
/// aligned with the trainable (gamma, beta) parameters.
struct ModelParams {
  Matrix w1;  // input_dim x hidden
  std::vector<double> b1;
  NormLayer norm;
  Matrix w2;  // hidden x classes
  std::vector<double> b2;
  std::vector<double> momentum_gamma;
  std::vector<double> momentum_beta;

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

struct ModelShape {
  std::size_t input_dim = 28 * 28 * 3;
  std::size_t hidden = 128;
  std::size_t classes = 2;
  NormKind norm = NormKind::batch;
};

struct ModelState {
  ModelParams params;
  std::optional<ModelParams> saved;

  std::size_t input_dim() const noexcept { return params.w1.rows(); }
  std::size_t hidden() const noexcept { return params.w1.cols(); }
  std::size_t classes() const noexcept { return params.w2.cols(); }
  NormKind norm_kind() const noexcept { return params.norm.kind; }
  /// Size of the trainable mask: gamma followed by beta.
  std::size_t trainable_count() const noexcept { return 2 * hidden(); }
};

/// He-normal first layer, 1/sqrt(H) output layer, gamma = 1, beta = 0.
inline ModelState make_model(const ModelShape& shape, Rng& rng) {
  if (shape.hidden < 1) throw ConfigError("hidden width must be >= 1");
  if (shape.classes < 2) throw ConfigError("need at least 2 classes");
  if (shape.input_dim < 1) throw ConfigError("input dimension must be >= 1");
  ModelState m;
  auto& p = m.params;
  p.w1 = Matrix(shape.input_dim, shape.hidden);
  const double s1 = std::sqrt(2.0 / static_cast<double>(shape.input_dim));
  for (double& v : p.w1.data()) v = rng.normal(0.0, s1);
  p.b1.assign(shape.hidden, 0.0);
  p.norm.kind = shape.norm;
  p.norm.gamma.assign(shape.hidden, 1.0);
  p.norm.beta.assign(shape.hidden, 0.0);
  p.w2 = Matrix(shape.hidden, shape.classes);
  const double s2 = std::sqrt(1.0 / static_cast<double>(shape.hidden));
  for (double& v : p.w2.data()) v = rng.normal(0.0, s2);
  p.b2.assign(shape.classes, 0.0);
  p.momentum_gamma.assign(shape.hidden, 0.0);
  p.momentum_beta.assign(shape.hidden, 0.0);
  return m;
}

struct Prediction {
  std::vector<double> logits;
  std::vector<double> probs;
  std::size_t pseudo_label = 0;
  double entropy = 0.0;
};

/// Run-level operation counts: samples through the main forward, samples
/// through the auxiliary (transformed-input) forward, samples that contributed
/// to a backward pass, and selected samples.
struct OpCounters {
  std::size_t forwards_main = 0;
  std::size_t forwards_aux = 0;
  std::size_t backwards = 0;
  std::size_t selected = 0;

  OpCounters& operator+=(const OpCounters& o) noexcept {
    forwards_main += o.forwards_main;
    forwards_aux += o.forwards_aux;
    backwards += o.backwards;
    selected += o.selected;
    return *this;
  }
  friend bool operator==(const OpCounters&, const OpCounters&) = default;
};

/// Normalization statistics: per feature for batch-norm, per sample for layer-norm.
struct NormStats {
  std::vector<double> mean;
  std::vector<double> inv_std;
};

/// Intermediate activations kept for the backward pass.
struct ForwardCache {
  Matrix xhat;    // normalized pre-activations, N x H
  Matrix y;       // gamma * xhat + beta, N x H
  Matrix logits;  // N x C
  NormStats stats;
};

namespace detail {

inline void require_input(const ModelState& m, const Matrix& x) {
  if (x.rows() == 0) throw ConfigError("forward: empty batch");
  if (x.cols() != m.input_dim()) {
    throw DimensionError("forward: input dimension " + std::to_string(x.cols()) +
                         " != model input dimension " + std::to_string(m.input_dim()));
  }
}

/// x * W1 + b1, skipping zero inputs (colored digit images are mostly zero).
inline Matrix dense_in(const ModelParams& p, const Matrix& x) {
  const std::size_t n = x.rows(), h = p.w1.cols();
  Matrix z(n, h);
  for (std::size_t i = 0; i < n; ++i) {
    auto zr = z.row(i);
    std::copy(p.b1.begin(), p.b1.end(), zr.begin());
    const auto xr = x.row(i);
    for (std::size_t d = 0; d < xr.size(); ++d) {
      const double v = xr[d];
      if (v == 0.0) continue;
      const auto wr = p.w1.row(d);
      for (std::size_t j = 0; j < h; ++j) zr[j] += v * wr[j];
    }
  }
  return z;
}

inline NormStats batch_stats(const Matrix& z, double eps) {
  const std::size_t n = z.rows(), h = z.cols();
  NormStats s{std::vector<double>(h, 0.0), std::vector<double>(h, 0.0)};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < h; ++j) s.mean[j] += z(i, j);
  for (double& m : s.mean) m /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < h; ++j) {
      const double d = z(i, j) - s.mean[j];
      s.inv_std[j] += d * d;
    }
  for (double& v : s.inv_std) v = 1.0 / std::sqrt(v / static_cast<double>(n) + eps);
  return s;
}

inline NormStats layer_stats(const Matrix& z, double eps) {
  const std::size_t n = z.rows(), h = z.cols();
  NormStats s{std::vector<double>(n, 0.0), std::vector<double>(n, 0.0)};
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = z.row(i);
    double m = 0.0;
    for (double v : r) m += v;
    m /= static_cast<double>(h);
    double var = 0.0;
    for (double v : r) var += (v - m) * (v - m);
    s.mean[i] = m;
    s.inv_std[i] = 1.0 / std::sqrt(var / static_cast<double>(h) + eps);
  }
  return s;
}

/// `fixed_stats`, when given, replaces batch-norm statistics of this batch.
inline ForwardCache forward_cached(const ModelState& m, const Matrix& x,
                                   const NormStats* fixed_stats = nullptr) {
  require_input(m, x);
  const auto& p = m.params;
  const std::size_t n = x.rows(), h = m.hidden(), c = m.classes();
  if (p.norm.kind == NormKind::batch && n < 2 && fixed_stats == nullptr) {
    throw ConfigError(
        "batch-norm needs a batch of at least 2 samples; use layer-norm (model.norm=layer) for "
        "batch size 1");
  }
  ForwardCache cache;
  Matrix z = dense_in(p, x);
  if (p.norm.kind == NormKind::batch) {
    cache.stats = fixed_stats ? *fixed_stats : batch_stats(z, p.norm.eps);
  } else {
    cache.stats = layer_stats(z, p.norm.eps);
  }
  cache.xhat = Matrix(n, h);
  cache.y = Matrix(n, h);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < h; ++j) {
      const double xh = p.norm.kind == NormKind::batch
                            ? (z(i, j) - cache.stats.mean[j]) * cache.stats.inv_std[j]
                            : (z(i, j) - cache.stats.mean[i]) * cache.stats.inv_std[i];
      cache.xhat(i, j) = xh;
      cache.y(i, j) = p.norm.gamma[j] * xh + p.norm.beta[j];
    }
  cache.logits = Matrix(n, c);
  for (std::size_t i = 0; i < n; ++i) {
    auto lr = cache.logits.row(i);
    std::copy(p.b2.begin(), p.b2.end(), lr.begin());
    for (std::size_t j = 0; j < h; ++j) {
      const double a = cache.y(i, j);
      if (a <= 0.0) continue;
      const auto wr = p.w2.row(j);
      for (std::size_t k = 0; k < c; ++k) lr[k] += a * wr[k];
    }
  }
  return cache;
}

inline Prediction make_prediction(std::span<const double> logits) {
  Prediction pr;
  pr.logits.assign(logits.begin(), logits.end());
  pr.probs = softmax(logits);
  pr.pseudo_label = argmax(pr.probs);
  pr.entropy = entropy(pr.probs);
  return pr;
}

}  // namespace detail

inline std::vector<Prediction> predictions_from(const ForwardCache& cache) {
  std::vector<Prediction> out;
  out.reserve(cache.logits.rows());
  for (std::size_t i = 0; i < cache.logits.rows(); ++i)
    out.push_back(detail::make_prediction(cache.logits.row(i)));
  return out;
}

inline std::vector<Prediction> forward(const ModelState& model, const Matrix& inputs) {
  return predictions_from(detail::forward_cached(model, inputs));
}

/// Same as forward() and adds the batch size to `counters.forwards_main`.
inline std::vector<Prediction> forward(const ModelState& model, const Matrix& inputs,
                                       OpCounters& counters) {
  auto out = forward(model, inputs);
  counters.forwards_main += inputs.rows();
  return out;
}

inline std::vector<Prediction> forward(const ModelState& model, const Batch& batch,
                                       OpCounters& counters) {
  return forward(model, pack_inputs(batch.samples), counters);
}

// ---------------------------------------------------------------------------
// Gradients

/// Gradient restricted to the trainable mask.
struct NormGradient {
  std::vector<double> gamma;
  std::vector<double> beta;

  /// gamma entries followed by beta entries.
  std::vector<double> flatten() const {
    std::vector<double> out(gamma);
    out.insert(out.end(), beta.begin(), beta.end());
    return out;
  }
  bool is_zero() const noexcept {
    auto z = [](double v) { return v == 0.0; };
    return std::all_of(gamma.begin(), gamma.end(), z) && std::all_of(beta.begin(), beta.end(), z);
  }
};

struct FullGradient {
  Matrix w1;
  std::vector<double> b1;
  NormGradient norm;
  Matrix w2;
  std::vector<double> b2;
};

/// d Ent / d logits = -p_k (log p_k + Ent), using log-softmax for stability.
inline std::vector<double> entropy_logit_grad(std::span<const double> logits) {
  const auto logp = log_softmax(logits);
  std::vector<double> p(logp.size());
  double ent = 0.0;
  for (std::size_t k = 0; k < logp.size(); ++k) {
    p[k] = std::exp(logp[k]);
    ent -= p[k] * logp[k];
  }
  std::vector<double> g(logp.size());
  for (std::size_t k = 0; k < logp.size(); ++k) g[k] = -p[k] * (logp[k] + ent);
  return g;
}

namespace detail {

/// Backpropagates `dlogits` to the norm affine parameters and, when `full`,
/// through the normalization into the first dense layer.
inline FullGradient backward(const ModelState& m, const Matrix& x, const ForwardCache& cache,
                             const Matrix& dlogits, bool full) {
  const auto& p = m.params;
  const std::size_t n = x.rows(), h = m.hidden(), c = m.classes();
  FullGradient g;
  g.norm.gamma.assign(h, 0.0);
  g.norm.beta.assign(h, 0.0);
  Matrix dy(n, h);
  for (std::size_t i = 0; i < n; ++i) {
    const auto dl = dlogits.row(i);
    bool any = false;
    for (double v : dl) any = any || v != 0.0;
    if (!any) continue;
    for (std::size_t j = 0; j < h; ++j) {
      if (cache.y(i, j) <= 0.0) continue;  // ReLU
      const auto wr = p.w2.row(j);
      double s = 0.0;
      for (std::size_t k = 0; k < c; ++k) s += dl[k] * wr[k];
      dy(i, j) = s;
    }
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < h; ++j) {
      g.norm.gamma[j] += dy(i, j) * cache.xhat(i, j);
      g.norm.beta[j] += dy(i, j);
    }
  if (!full) return g;

  g.w2 = Matrix(h, c);
  g.b2.assign(c, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto dl = dlogits.row(i);
    for (std::size_t k = 0; k < c; ++k) g.b2[k] += dl[k];
    for (std::size_t j = 0; j < h; ++j) {
      const double a = cache.y(i, j);
      if (a <= 0.0) continue;
      auto gr = g.w2.row(j);
      for (std::size_t k = 0; k < c; ++k) gr[k] += a * dl[k];
    }
  }

  // dxhat -> dz through the normalization statistics
  Matrix dz(n, h);
  if (p.norm.kind == NormKind::batch) {
    const double nn = static_cast<double>(n);
    for (std::size_t j = 0; j < h; ++j) {
      double sum = 0.0, sum_x = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double dxh = dy(i, j) * p.norm.gamma[j];
        sum += dxh;
        sum_x += dxh * cache.xhat(i, j);
      }
      for (std::size_t i = 0; i < n; ++i) {
        const double dxh = dy(i, j) * p.norm.gamma[j];
        dz(i, j) = cache.stats.inv_std[j] / nn * (nn * dxh - sum - cache.xhat(i, j) * sum_x);
      }
    }
  } else {
    const double hh = static_cast<double>(h);
    for (std::size_t i = 0; i < n; ++i) {
      double sum = 0.0, sum_x = 0.0;
      for (std::size_t j = 0; j < h; ++j) {
        const double dxh = dy(i, j) * p.norm.gamma[j];
        sum += dxh;
        sum_x += dxh * cache.xhat(i, j);
      }
      for (std::size_t j = 0; j < h; ++j) {
        const double dxh = dy(i, j) * p.norm.gamma[j];
        dz(i, j) = cache.stats.inv_std[i] / hh * (hh * dxh - sum - cache.xhat(i, j) * sum_x);
      }
    }
  }

  g.w1 = Matrix(m.input_dim(), h);
  g.b1.assign(h, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto dzr = dz.row(i);
    for (std::size_t j = 0; j < h; ++j) g.b1[j] += dzr[j];
    const auto xr = x.row(i);
    for (std::size_t d = 0; d < xr.size(); ++d) {
      const double v = xr[d];
      if (v == 0.0) continue;
      auto gr = g.w1.row(d);
      for (std::size_t j = 0; j < h; ++j) gr[j] += v * dzr[j];
    }
  }
  return g;
}

inline std::size_t count_positive(std::span<const double> w) {
  return static_cast<std::size_t>(std::count_if(w.begin(), w.end(), [](double v) { return v > 0.0; }));
}

inline void check_weights(std::span<const double> weights, std::size_t n) {
  if (weights.size() != n)
    throw DimensionError("weights length " + std::to_string(weights.size()) + " != batch size " +
                         std::to_string(n));
  for (double w : weights)
    if (!std::isfinite(w) || w < 0.0) throw NumericInputError("weights must be finite and >= 0");
}

}  // namespace detail

/// Gradient w.r.t. (gamma, beta) of  sum_i w_i * Ent(x_i) / max(1, #{w_i > 0})
/// using an existing forward cache. Weights are treated as constants.
inline NormGradient grad_adapt_params(const ModelState& model, const Matrix& inputs,
                                      const ForwardCache& cache, std::span<const double> weights) {
  detail::check_weights(weights, inputs.rows());
  const std::size_t selected = detail::count_positive(weights);
  if (selected == 0) {
    return {std::vector<double>(model.hidden(), 0.0), std::vector<double>(model.hidden(), 0.0)};
  }
  const double denom = static_cast<double>(selected);
  Matrix dlogits(inputs.rows(), model.classes());
  for (std::size_t i = 0; i < inputs.rows(); ++i) {
    if (weights[i] == 0.0) continue;
    const double scale = weights[i] / denom;
    const auto g = entropy_logit_grad(cache.logits.row(i));
    for (std::size_t k = 0; k < g.size(); ++k) dlogits(i, k) = scale * g[k];
  }
  return detail::backward(model, inputs, cache, dlogits, false).norm;
}

inline NormGradient grad_adapt_params(const ModelState& model, const Matrix& inputs,
                                      std::span<const double> weights) {
  return grad_adapt_params(model, inputs, detail::forward_cached(model, inputs), weights);
}

/// The weighted entropy loss whose gradient grad_adapt_params() returns.
inline double weighted_entropy_loss(const ModelState& model, const Matrix& inputs,
                                    std::span<const double> weights) {
  detail::check_weights(weights, inputs.rows());
  const std::size_t selected = detail::count_positive(weights);
  if (selected == 0) return 0.0;
  const auto preds = forward(model, inputs);
  double s = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) s += weights[i] * preds[i].entropy;
  return s / static_cast<double>(selected);
}

/// Momentum SGD on the trainable mask only:  v <- momentum * v + g;  theta <- theta - lr * v.
inline void sgd_step(ModelState& model, const NormGradient& grad, double lr, double momentum) {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("sgd_step: lr must be finite and >= 0");
  auto& p = model.params;
  const std::size_t h = model.hidden();
  if (grad.gamma.size() != h || grad.beta.size() != h)
    throw DimensionError("sgd_step: gradient does not match the trainable mask");
  for (std::size_t j = 0; j < h; ++j) {
    p.momentum_gamma[j] = momentum * p.momentum_gamma[j] + grad.gamma[j];
    p.norm.gamma[j] -= lr * p.momentum_gamma[j];
    p.momentum_beta[j] = momentum * p.momentum_beta[j] + grad.beta[j];
    p.norm.beta[j] -= lr * p.momentum_beta[j];
  }
}

// ---------------------------------------------------------------------------
// Snapshot / reset

inline void snapshot(ModelState& model) { model.saved = model.params; }

inline void reset(ModelState& model) {
  if (!model.saved) throw StateError("reset called without a prior snapshot");
  model.params = *model.saved;
}

// ---------------------------------------------------------------------------
// Supervised pretraining

struct PretrainOptions {
  std::size_t epochs = 20;
  std::size_t batch_size = 64;
  double lr = 0.005;
  double momentum = 0.9;
  /// When set, after the warm-up epochs only samples whose PLPD under
  /// `transform` exceeds this threshold contribute to the loss.
  std::optional<double> plpd_filter;
  double warmup_fraction = 0.25;
  TransformSpec transform;
};

struct PretrainReport {
  std::size_t steps = 0;
  std::size_t steps_after_warmup = 0;
  std::size_t skipped_batches = 0;
  std::size_t warmup_epochs = 0;
  std::vector<double> epoch_loss;
  std::vector<double> epoch_accuracy;
};

inline std::size_t warmup_epochs(const PretrainOptions& opt) {
  return static_cast<std::size_t>(
      std::lround(std::clamp(opt.warmup_fraction, 0.0, 1.0) * static_cast<double>(opt.epochs)));
}

/// Cross-entropy training of all parameters with momentum SGD.
///
/// `rng` drives the per-epoch shuffles; transforms for the PLPD filter use a
/// generator forked from it so that a filter that always passes reproduces
/// unfiltered training exactly.
inline PretrainReport pretrain(ModelState& model, std::span<const LabeledImage> train,
                               const PretrainOptions& opt, Rng& rng) {
  if (train.empty()) throw ConfigError("pretrain: empty training set");
  if (opt.batch_size == 0) throw ConfigError("pretrain: batch_size must be >= 1");
  auto& p = model.params;
  const std::size_t h = model.hidden(), c = model.classes();
  for (const auto& s : train)
    if (s.class_label < 0 || static_cast<std::size_t>(s.class_label) >= c)
      throw ConfigError("pretrain: label out of range");

  FullGradient vel;
  vel.w1 = Matrix(p.w1.rows(), p.w1.cols());
  vel.b1.assign(h, 0.0);
  vel.norm.gamma.assign(h, 0.0);
  vel.norm.beta.assign(h, 0.0);
  vel.w2 = Matrix(p.w2.rows(), p.w2.cols());
  vel.b2.assign(c, 0.0);
  auto update = [&](std::vector<double>& theta, std::vector<double>& v, const std::vector<double>& g) {
    for (std::size_t i = 0; i < theta.size(); ++i) {
      v[i] = opt.momentum * v[i] + g[i];
      theta[i] -= opt.lr * v[i];
    }
  };

  Rng transform_rng = rng.fork(0x504c5044);  // "PLPD"
  PretrainReport report;
  report.warmup_epochs = warmup_epochs(opt);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    const bool filtering = opt.plpd_filter.has_value() && epoch >= report.warmup_epochs;
    double loss_sum = 0.0;
    std::size_t correct = 0, seen = 0;

    std::vector<std::pair<std::size_t, std::size_t>> ranges;
    for (std::size_t b = 0; b < order.size(); b += opt.batch_size)
      ranges.emplace_back(b, std::min(order.size(), b + opt.batch_size));
    if (p.norm.kind == NormKind::batch && ranges.size() >= 2 &&
        ranges.back().second - ranges.back().first == 1) {
      ranges[ranges.size() - 2].second = ranges.back().second;
      ranges.pop_back();
    }

    for (const auto& [begin, end] : ranges) {
      const std::size_t n = end - begin;
      if (p.norm.kind == NormKind::batch && n < 2) {
        ++report.skipped_batches;
        continue;
      }
      std::vector<LabeledImage const*> items;
      Matrix x(n, model.input_dim());
      for (std::size_t i = 0; i < n; ++i) {
        const auto& s = train[order[begin + i]];
        items.push_back(&s);
        std::copy(s.image.pixels.begin(), s.image.pixels.end(), x.row(i).begin());
      }
      const auto cache = detail::forward_cached(model, x);

      std::vector<bool> use(n, true);
      if (filtering) {
        std::vector<ImageGrid> shuffled;
        shuffled.reserve(n);
        for (const auto* s : items) shuffled.push_back(apply_transform(s->image, opt.transform, transform_rng));
        const auto aux = detail::forward_cached(model, pack_inputs(std::span<const ImageGrid>(shuffled)));
        for (std::size_t i = 0; i < n; ++i) {
          const auto pm = softmax(cache.logits.row(i));
          const auto pa = softmax(aux.logits.row(i));
          const std::size_t yhat = argmax(pm);
          use[i] = (pm[yhat] - pa[yhat]) > *opt.plpd_filter;
        }
      }
      const std::size_t used = static_cast<std::size_t>(std::count(use.begin(), use.end(), true));

      Matrix dlogits(n, c);
      for (std::size_t i = 0; i < n; ++i) {
        const auto logp = log_softmax(cache.logits.row(i));
        const auto label = static_cast<std::size_t>(items[i]->class_label);
        if (argmax(logp) == label) ++correct;
        ++seen;
        if (!use[i]) continue;
        loss_sum -= logp[label];
        const double inv = 1.0 / static_cast<double>(used);
        for (std::size_t k = 0; k < c; ++k)
          dlogits(i, k) = (std::exp(logp[k]) - (k == label ? 1.0 : 0.0)) * inv;
      }
      if (used == 0) {
        ++report.skipped_batches;
        continue;
      }
      const auto g = detail::backward(model, x, cache, dlogits, true);
      update(p.w1.data(), vel.w1.data(), g.w1.data());
      update(p.b1, vel.b1, g.b1);
      update(p.norm.gamma, vel.norm.gamma, g.norm.gamma);
      update(p.norm.beta, vel.norm.beta, g.norm.beta);
      update(p.w2.data(), vel.w2.data(), g.w2.data());
      update(p.b2, vel.b2, g.b2);
      ++report.steps;
      if (epoch >= report.warmup_epochs) ++report.steps_after_warmup;
    }
    report.epoch_loss.push_back(loss_sum / static_cast<double>(std::max<std::size_t>(1, seen)));
    report.epoch_accuracy.push_back(static_cast<double>(correct) /
                                    static_cast<double>(std::max<std::size_t>(1, seen)));
  }
  return report;
}

/// Fraction of samples whose argmax matches the class label, evaluated in
/// batches of `batch_size` (batch-norm statistics come from each batch).
inline double accuracy(const ModelState& model, std::span<const LabeledImage> samples,
                       std::size_t batch_size = 64) {
  if (samples.empty()) return 0.0;
  std::size_t correct = 0;
  for (std::size_t b = 0; b < samples.size(); b += batch_size) {
    std::size_t end = std::min(samples.size(), b + batch_size);
    if (samples.size() - end == 1) end = samples.size();
    const auto preds = forward(model, pack_inputs(samples.subspan(b, end - b)));
    for (std::size_t i = 0; i < preds.size(); ++i)
      if (static_cast<int>(preds[i].pseudo_label) == samples[b + i].class_label) ++correct;
    if (end == samples.size()) break;
  }
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout (little-endian): 8-byte magic "DEYOCKPT", u32 version, u32 norm kind
// (0 batch, 1 layer), u64 input_dim, u64 hidden, u64 classes, f64 eps, then
// f64 arrays w1, b1, gamma, beta, w2, b2, momentum_gamma, momentum_beta.

inline constexpr std::array<char, 8> kCheckpointMagic{'D', 'E', 'Y', 'O', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {
inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
}
inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
}
inline void put_f64s(std::vector<std::uint8_t>& out, std::span<const double> v) {
  for (double d : v) put_u64(out, std::bit_cast<std::uint64_t>(d));
}

class ByteReader {
public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}
  std::uint64_t u64() { return le(8); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::vector<double> f64s(std::size_t n) {
    if (n > (bytes_.size() - pos_) / 8) throw FormatError("checkpoint: truncated array", pos_);
    std::vector<double> v(n);
    for (double& d : v) d = f64();
    return v;
  }
  std::size_t pos() const noexcept { return pos_; }
  bool done() const noexcept { return pos_ == bytes_.size(); }
  void expect(std::span<const char> magic) {
    if (bytes_.size() < magic.size()) throw FormatError("checkpoint: truncated magic", 0);
    for (std::size_t i = 0; i < magic.size(); ++i)
      if (bytes_[i] != static_cast<std::uint8_t>(magic[i])) throw FormatError("checkpoint: bad magic", i);
    pos_ = magic.size();
  }

private:
  std::uint64_t le(int width) {
    if (pos_ + static_cast<std::size_t>(width) > bytes_.size())
      throw FormatError("checkpoint: truncated", pos_);
    std::uint64_t v = 0;
    for (int b = 0; b < width; ++b) v |= std::uint64_t{bytes_[pos_++]} << (8 * b);
    return v;
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};
}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const ModelState& model) {
  const auto& p = model.params;
  std::vector<std::uint8_t> out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, p.norm.kind == NormKind::batch ? 0u : 1u);
  detail::put_u64(out, model.input_dim());
  detail::put_u64(out, model.hidden());
  detail::put_u64(out, model.classes());
  detail::put_f64s(out, std::span<const double>(&p.norm.eps, 1));
  detail::put_f64s(out, p.w1.data());
  detail::put_f64s(out, p.b1);
  detail::put_f64s(out, p.norm.gamma);
  detail::put_f64s(out, p.norm.beta);
  detail::put_f64s(out, p.w2.data());
  detail::put_f64s(out, p.b2);
  detail::put_f64s(out, p.momentum_gamma);
  detail::put_f64s(out, p.momentum_beta);
  return out;
}

inline ModelState decode_checkpoint(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  r.expect(kCheckpointMagic);
  const auto version = r.u32();
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint: unsupported version " + std::to_string(version), 8);
  const auto kind = r.u32();
  if (kind > 1) throw FormatError("checkpoint: bad norm kind", 12);
  const auto d = r.u64(), h = r.u64(), c = r.u64();
  if (d == 0 || h == 0 || c < 2) throw FormatError("checkpoint: bad shape", r.pos());
  ModelState m;
  auto& p = m.params;
  p.norm.kind = kind == 0 ? NormKind::batch : NormKind::layer;
  p.norm.eps = r.f64();
  p.w1 = Matrix(d, h, r.f64s(d * h));
  p.b1 = r.f64s(h);
  p.norm.gamma = r.f64s(h);
  p.norm.beta = r.f64s(h);
  p.w2 = Matrix(h, c, r.f64s(h * c));
  p.b2 = r.f64s(c);
  p.momentum_gamma = r.f64s(h);
  p.momentum_beta = r.f64s(h);
  if (!r.done()) throw FormatError("checkpoint: trailing bytes", r.pos());
  return m;
}

inline void save_checkpoint(const ModelState& model, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(model);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline ModelState load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file_bytes(path));
}

}  // namespace deyo
