#pragma once

// Online test-time adaptation with entropy and PLPD sample selection and
// weighting. Each batch is predicted first and the model is updated
// afterwards, so reported accuracy always comes from pre-update predictions.

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "deyo/data.hpp"
#include "deyo/errors.hpp"
#include "deyo/metrics.hpp"
#include "deyo/model.hpp"
#include "deyo/numerics.hpp"
#include "deyo/transforms.hpp"

namespace deyo {

struct AdaptConfig {
  double tau_ent = 0.5 * std::log(1000.0);
  double tau_plpd = 0.2;
  double ent0 = 0.4 * std::log(1000.0);
  TransformSpec transform;
  double lr = 0.0025;
  double momentum = 0.9;
  bool use_ent_select = true;
  bool use_plpd_select = true;
  bool use_ent_weight = true;
  bool use_plpd_weight = true;
  /// false evaluates the frozen model: main forward only, no updates.
  bool update = true;
  bool reset_at_end = false;

  /// Full method with thresholds derived from the class count.
  static AdaptConfig deyo(std::size_t classes) {
    AdaptConfig c;
    const double ln_c = std::log(static_cast<double>(classes));
    c.tau_ent = 0.5 * ln_c;
    c.ent0 = 0.4 * ln_c;
    return c;
  }

  /// Entropy minimization on every sample with unit weights.
  static AdaptConfig tent(std::size_t classes) {
    AdaptConfig c = deyo(classes);
    c.use_ent_select = c.use_plpd_select = c.use_ent_weight = c.use_plpd_weight = false;
    return c;
  }

  /// Spurious-correlation (ColoredMNIST) setting: no entropy filtering,
  /// Ent0 = ln C, PLPD threshold 0.5.
  static AdaptConfig biased(std::size_t classes) {
    AdaptConfig c = deyo(classes);
    c.use_ent_select = false;
    c.ent0 = std::log(static_cast<double>(classes));
    c.tau_plpd = 0.5;
    return c;
  }

  static AdaptConfig frozen(std::size_t classes) {
    AdaptConfig c = deyo(classes);
    c.update = false;
    return c;
  }

  bool needs_plpd() const noexcept { return use_plpd_select || use_plpd_weight; }

  void validate(std::size_t classes) const {
    const double ln_c = std::log(static_cast<double>(classes));
    if (!(tau_ent > 0.0 && tau_ent <= ln_c + 1e-12))
      throw ConfigError("adapt.tau_ent must lie in (0, ln C]");
    if (!std::isfinite(tau_plpd)) throw ConfigError("adapt.tau_plpd must be finite");
    if (!std::isfinite(ent0)) throw ConfigError("adapt.ent0 must be finite");
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("adapt.lr must be finite and >= 0");
    if (!std::isfinite(momentum)) throw ConfigError("adapt.momentum must be finite");
  }
};

/// Probability drop of the pseudo-label (taken from `on_input`) when the
/// input is replaced by its transformed version.
inline double plpd(const Prediction& on_input, const Prediction& on_transformed) {
  const std::size_t y = on_input.pseudo_label;
  return on_input.probs.at(y) - on_transformed.probs.at(y);
}

/// Every enabled criterion must pass: entropy < tau_ent, PLPD > tau_plpd.
inline bool select(double entropy, double plpd_value, const AdaptConfig& cfg) noexcept {
  if (cfg.use_ent_select && !(entropy < cfg.tau_ent)) return false;
  if (cfg.use_plpd_select && !(plpd_value > cfg.tau_plpd)) return false;
  return true;
}

/// alpha = [ent] exp(-(Ent - Ent0)) + [plpd] exp(PLPD); 1 when both terms are off.
inline double weight(double entropy, double plpd_value, const AdaptConfig& cfg) noexcept {
  if (!cfg.use_ent_weight && !cfg.use_plpd_weight) return 1.0;
  double a = 0.0;
  if (cfg.use_ent_weight) a += std::exp(-(entropy - cfg.ent0));
  if (cfg.use_plpd_weight) a += std::exp(plpd_value);
  return a;
}

struct SampleDiagnostics {
  double entropy = 0.0;
  double plpd = std::numeric_limits<double>::quiet_NaN();  // NaN when not measured
  bool survived = false;  // passed the entropy gate (or it is disabled)
  bool selected = false;
  double weight = 0.0;    // 0 for unselected samples
  std::size_t pseudo_label = 0;
  int label = 0;
  int group = 0;
  bool correct = false;
  int area = 0;           // 1..4, 0 when PLPD was not measured
};

struct BatchDiagnostics {
  std::vector<SampleDiagnostics> samples;
  OpCounters counters;
  std::size_t survivors = 0;
  /// Gradient applied by this batch's step; empty when no step was taken.
  NormGradient gradient;
  bool updated = false;
};

namespace detail {

/// Auxiliary forward on transformed inputs. Batch-norm uses statistics of the
/// transformed batch itself; a single transformed sample falls back to the
/// statistics of the main batch.
inline std::vector<Prediction> aux_forward(const ModelState& model, const Matrix& inputs,
                                           const ForwardCache& main_cache) {
  if (model.norm_kind() == NormKind::batch && inputs.rows() < 2)
    return predictions_from(forward_cached(model, inputs, &main_cache.stats));
  return predictions_from(forward_cached(model, inputs));
}

}  // namespace detail

/// One step of the online loop on `batch`:
///   1. main forward (predictions recorded before any update)
///   2. entropy gate
///   3. transform survivors, auxiliary forward, PLPD
///   4. PLPD gate
///   5. weights for the selected samples
///   6. loss sum(alpha * Ent) / max(1, #selected)
///   7. one momentum-SGD step on the norm affine parameters
inline BatchDiagnostics adapt_batch(ModelState& model, const Batch& batch, const AdaptConfig& cfg,
                                    Rng& transform_rng) {
  if (batch.empty()) throw ConfigError("adapt_batch: empty batch");
  const Matrix inputs = pack_inputs(batch.samples);
  const auto cache = detail::forward_cached(model, inputs);
  const auto preds = predictions_from(cache);
  const std::size_t n = preds.size();

  BatchDiagnostics diag;
  diag.counters.forwards_main = n;
  diag.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& s = diag.samples[i];
    s.entropy = preds[i].entropy;
    s.pseudo_label = preds[i].pseudo_label;
    s.label = batch.samples[i].class_label;
    s.group = batch.samples[i].group_id;
    s.correct = static_cast<int>(s.pseudo_label) == s.label;
  }
  if (!cfg.update) return diag;

  std::vector<std::size_t> survivors;
  for (std::size_t i = 0; i < n; ++i) {
    auto& s = diag.samples[i];
    s.survived = !cfg.use_ent_select || s.entropy < cfg.tau_ent;
    if (s.survived) survivors.push_back(i);
  }
  diag.survivors = survivors.size();

  if (cfg.needs_plpd() && !survivors.empty()) {
    std::vector<ImageGrid> transformed;
    transformed.reserve(survivors.size());
    for (std::size_t i : survivors)
      transformed.push_back(apply_transform(batch.samples[i].image, cfg.transform, transform_rng));
    const auto aux = detail::aux_forward(model, pack_inputs(std::span<const ImageGrid>(transformed)), cache);
    diag.counters.forwards_aux = survivors.size();
    for (std::size_t k = 0; k < survivors.size(); ++k) {
      auto& s = diag.samples[survivors[k]];
      s.plpd = plpd(preds[survivors[k]], aux[k]);
      s.area = area_of(s.entropy, s.plpd, cfg.tau_ent, cfg.tau_plpd);
    }
  }

  std::vector<double> weights(n, 0.0);
  std::size_t selected = 0;
  for (std::size_t i : survivors) {
    auto& s = diag.samples[i];
    if (cfg.use_plpd_select && !(s.plpd > cfg.tau_plpd)) continue;
    s.selected = true;
    s.weight = weight(s.entropy, s.plpd, cfg);
    weights[i] = s.weight;
    ++selected;
  }
  diag.counters.selected = selected;
  if (selected == 0) return diag;

  diag.gradient = grad_adapt_params(model, inputs, cache, weights);
  diag.counters.backwards = selected;
  sgd_step(model, diag.gradient, cfg.lr, cfg.momentum);
  diag.updated = true;
  return diag;
}

struct RunResult {
  std::vector<BatchDiagnostics> batches;
  OpCounters counters;
  std::size_t samples = 0;
  std::size_t correct = 0;
  double accuracy = 0.0;

  /// Per-sample records (confidence = -entropy) in stream order.
  std::vector<EvalRecord> records() const {
    std::vector<EvalRecord> out;
    out.reserve(samples);
    for (const auto& b : batches)
      for (const auto& s : b.samples)
        out.push_back({-s.entropy, s.correct, s.entropy, s.plpd, s.group});
    return out;
  }
};

/// Sequential adaptation over a stream. The transform generator is seeded
/// from `cfg.transform.seed`; with `reset_at_end` the model is restored to
/// its state at stream start.
inline RunResult run_stream(ModelState& model, std::span<const Batch> stream, const AdaptConfig& cfg) {
  cfg.validate(model.classes());
  if (cfg.reset_at_end) snapshot(model);
  Rng transform_rng(cfg.transform.seed);
  RunResult res;
  res.batches.reserve(stream.size());
  for (const auto& batch : stream) {
    auto diag = adapt_batch(model, batch, cfg, transform_rng);
    res.counters += diag.counters;
    for (const auto& s : diag.samples) {
      ++res.samples;
      if (s.correct) ++res.correct;
    }
    res.batches.push_back(std::move(diag));
  }
  res.accuracy = res.samples == 0 ? 0.0 : static_cast<double>(res.correct) / static_cast<double>(res.samples);
  if (cfg.reset_at_end) reset(model);
  return res;
}

/// Frozen-model pass that measures entropy and PLPD for every sample, for
/// confidence-metric analyses. The model is not modified.
inline std::vector<EvalRecord> measure_stream(const ModelState& model, std::span<const Batch> stream,
                                              const TransformSpec& transform, OpCounters* counters = nullptr) {
  Rng rng(transform.seed);
  std::vector<EvalRecord> out;
  for (const auto& batch : stream) {
    const Matrix inputs = pack_inputs(batch.samples);
    const auto cache = detail::forward_cached(model, inputs);
    const auto preds = predictions_from(cache);
    std::vector<ImageGrid> transformed;
    transformed.reserve(batch.size());
    for (const auto& s : batch.samples) transformed.push_back(apply_transform(s.image, transform, rng));
    const auto aux = detail::aux_forward(model, pack_inputs(std::span<const ImageGrid>(transformed)), cache);
    if (counters) {
      counters->forwards_main += batch.size();
      counters->forwards_aux += batch.size();
    }
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const bool correct = static_cast<int>(preds[i].pseudo_label) == batch.samples[i].class_label;
      out.push_back({-preds[i].entropy, correct, preds[i].entropy, plpd(preds[i], aux[i]),
                     batch.samples[i].group_id});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Component ablation

struct AblationFlags {
  bool ent_select = false;
  bool plpd_select = false;
  bool ent_weight = false;
  bool plpd_weight = false;

  /// Row number 1..16 in the canonical ablation table ordering.
  int row() const noexcept {
    return 1 + 8 * ent_select + 4 * plpd_select + 2 * ent_weight + plpd_weight;
  }
  static AblationFlags from_row(int row) {
    if (row < 1 || row > 16) throw ConfigError("ablation row must be in 1..16");
    const int b = row - 1;
    return {(b & 8) != 0, (b & 4) != 0, (b & 2) != 0, (b & 1) != 0};
  }
  void apply(AdaptConfig& cfg) const noexcept {
    cfg.use_ent_select = ent_select;
    cfg.use_plpd_select = plpd_select;
    cfg.use_ent_weight = ent_weight;
    cfg.use_plpd_weight = plpd_weight;
  }
  std::string label() const {
    std::string s = "(" + std::to_string(row()) + ")";
    switch (row()) {
      case 1: s += " Tent"; break;
      case 6: s += " PLPD"; break;
      case 11: s += " Ent"; break;
      case 16: s += " DeYO"; break;
      default: break;
    }
    auto list = [](bool e, bool p) {
      if (e && p) return std::string("Ent+PLPD");
      if (e) return std::string("Ent");
      if (p) return std::string("PLPD");
      return std::string("-");
    };
    return s + " select=" + list(ent_select, plpd_select) + " weight=" + list(ent_weight, plpd_weight);
  }
};

struct AblationCell {
  AblationFlags flags;
  std::string label;
  RunResult result;
};

/// All 16 selection/weighting combinations, each adapted from a copy of
/// `model` with the same transform seed. Row 1 is Tent, row 16 the full method.
inline std::vector<AblationCell> ablation_grid(const ModelState& model, std::span<const Batch> stream,
                                               const AdaptConfig& base) {
  std::vector<AblationCell> cells;
  cells.reserve(16);
  for (int row = 1; row <= 16; ++row) {
    const auto flags = AblationFlags::from_row(row);
    AdaptConfig cfg = base;
    flags.apply(cfg);
    ModelState copy = model;
    cells.push_back({flags, flags.label(), run_stream(copy, stream, cfg)});
  }
  return cells;
}

}  // namespace deyo
