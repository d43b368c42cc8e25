#pragma once

// Experiment runner: flat key=value configuration, presets, per-seed
// pretrain/adapt/evaluate loops, sweeps, the ablation grid, and artifact
// emission (summary.json, diagnostics.csv, rc_curve.csv, sweep.csv,
// ablation.csv). Every byte written depends only on the config and seeds.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <utility>
#include <vector>

#include <json.hpp>

#include "deyo/adapt.hpp"
#include "deyo/data.hpp"
#include "deyo/errors.hpp"
#include "deyo/metrics.hpp"
#include "deyo/model.hpp"
#include "deyo/theory.hpp"
#include "deyo/transforms.hpp"

namespace deyo {

// ---------------------------------------------------------------------------
// Text formatting

/// Shortest round-trip decimal form; empty for NaN.
inline std::string format_double(double v) {
  if (std::isnan(v)) return {};
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::string join_seeds(const std::vector<std::uint64_t>& seeds) {
  std::string s;
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(seeds[i]);
  }
  return s;
}

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.emplace_back(trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline double parse_number(std::string_view key, std::string_view v) {
  double out = 0.0;
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc{} || res.ptr != v.data() + v.size() || v.empty())
    throw ConfigError("config key '" + std::string(key) + "': expected a number, got '" + std::string(v) + "'");
  return out;
}

inline std::uint64_t parse_unsigned(std::string_view key, std::string_view v) {
  std::uint64_t out = 0;
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc{} || res.ptr != v.data() + v.size() || v.empty())
    throw ConfigError("config key '" + std::string(key) + "': expected a non-negative integer, got '" +
                      std::string(v) + "'");
  return out;
}

inline bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("config key '" + std::string(key) + "': expected true/false, got '" + std::string(v) + "'");
}

template <class F>
auto rethrow_with_key(std::string_view key, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const ConfigError& e) {
    throw ConfigError("config key '" + std::string(key) + "': " + e.what());
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Configuration

enum class Dataset { synth, colored_mnist };
enum class Method { none, tent, deyo, ablation_cell };

inline std::string_view to_string(Dataset d) noexcept {
  return d == Dataset::synth ? "synth" : "colored_mnist";
}

inline std::string_view to_string(Method m) noexcept {
  switch (m) {
    case Method::none: return "none";
    case Method::tent: return "tent";
    case Method::deyo: return "deyo";
    case Method::ablation_cell: return "ablation_cell";
  }
  return "deyo";
}

inline std::string mix_to_string(const std::vector<MixComponent>& mix) {
  std::string s;
  for (std::size_t i = 0; i < mix.size(); ++i) {
    if (i) s += ',';
    s += std::string(to_string(mix[i].transform.kind)) + ':' + format_double(mix[i].fraction);
  }
  return s;
}

struct RunConfig {
  Dataset dataset = Dataset::synth;
  std::string data_root;        // empty: $DEYO_DATA_ROOT, then "data/mnist"
  std::size_t train_size = 4000;  // 0 keeps every available sample
  std::size_t test_size = 2000;
  std::size_t iid_size = 1000;    // held-out set drawn with the train color flip
  SynthOptions synth;
  NormKind norm = NormKind::batch;
  std::size_t hidden = 128;
  std::string checkpoint;       // loaded instead of pretraining when set
  PretrainOptions pretrain;
  ScenarioSpec scenario;
  Method method = Method::deyo;
  int ablation_row = 16;
  AdaptConfig adapt = AdaptConfig::deyo(2);
  std::vector<std::uint64_t> seeds{0};
  std::string output_dir = "out";
  bool measure = true;          // frozen-model PLPD pass for AURC and areas

  static constexpr std::size_t kClasses = 2;

  /// Every settable key with its current value, sorted. `output_dir` is
  /// excluded so artifacts do not depend on where they are written.
  std::map<std::string, std::string> to_flat() const {
    std::map<std::string, std::string> m;
    m["dataset"] = to_string(dataset);
    m["data.root"] = data_root;
    m["data.train_size"] = std::to_string(train_size);
    m["data.test_size"] = std::to_string(test_size);
    m["data.iid_size"] = std::to_string(iid_size);
    m["synth.jitter"] = format_double(synth.jitter);
    m["synth.thickness"] = format_double(synth.thickness);
    m["synth.clutter"] = std::to_string(synth.clutter);
    m["model.norm"] = to_string(norm);
    m["model.hidden"] = std::to_string(hidden);
    m["model.checkpoint"] = checkpoint;
    m["pretrain.epochs"] = std::to_string(pretrain.epochs);
    m["pretrain.batch_size"] = std::to_string(pretrain.batch_size);
    m["pretrain.lr"] = format_double(pretrain.lr);
    m["pretrain.momentum"] = format_double(pretrain.momentum);
    m["pretrain.plpd_filter"] = pretrain.plpd_filter ? format_double(*pretrain.plpd_filter) : "none";
    m["pretrain.warmup_fraction"] = format_double(pretrain.warmup_fraction);
    m["scenario.kind"] = to_string(scenario.kind);
    m["scenario.batch_size"] = std::to_string(scenario.batch_size);
    m["scenario.mix"] = mix_to_string(scenario.mix);
    m["method"] = to_string(method);
    m["ablation.row"] = std::to_string(ablation_row);
    m["adapt.tau_ent"] = format_double(adapt.tau_ent);
    m["adapt.tau_plpd"] = format_double(adapt.tau_plpd);
    m["adapt.ent0"] = format_double(adapt.ent0);
    m["adapt.lr"] = format_double(adapt.lr);
    m["adapt.momentum"] = format_double(adapt.momentum);
    m["adapt.use_ent_select"] = adapt.use_ent_select ? "true" : "false";
    m["adapt.use_plpd_select"] = adapt.use_plpd_select ? "true" : "false";
    m["adapt.use_ent_weight"] = adapt.use_ent_weight ? "true" : "false";
    m["adapt.use_plpd_weight"] = adapt.use_plpd_weight ? "true" : "false";
    m["adapt.reset_at_end"] = adapt.reset_at_end ? "true" : "false";
    m["transform.kind"] = to_string(adapt.transform.kind);
    m["transform.patch_grid"] = std::to_string(adapt.transform.patch_grid);
    m["transform.occlusion_fraction"] = format_double(adapt.transform.occlusion_fraction);
    m["transform.noise_sigma"] = format_double(adapt.transform.noise_sigma);
    m["seeds"] = join_seeds(seeds);
    m["analysis.measure"] = measure ? "true" : "false";
    return m;
  }

  /// Sets one dotted key. Unknown keys and malformed values throw
  /// ConfigError naming the key.
  void set(std::string_view key, std::string_view value) {
    using namespace detail;
    const std::string v(trim(value));
    auto num = [&] { return parse_number(key, v); };
    auto uns = [&] { return static_cast<std::size_t>(parse_unsigned(key, v)); };
    auto flag = [&] { return parse_bool(key, v); };

    if (key == "dataset") {
      if (v == "synth") dataset = Dataset::synth;
      else if (v == "colored_mnist" || v == "colored-mnist") dataset = Dataset::colored_mnist;
      else throw ConfigError("config key 'dataset': expected synth or colored_mnist, got '" + v + "'");
    } else if (key == "data.root") data_root = v;
    else if (key == "data.train_size") train_size = uns();
    else if (key == "data.test_size") test_size = uns();
    else if (key == "data.iid_size") iid_size = uns();
    else if (key == "synth.profile") {
      if (v == "clean") synth = SynthOptions{};
      else if (v == "hard") synth = SynthOptions::hard();
      else throw ConfigError("config key 'synth.profile': expected clean or hard, got '" + v + "'");
    } else if (key == "synth.jitter") synth.jitter = num();
    else if (key == "synth.thickness") synth.thickness = num();
    else if (key == "synth.clutter") synth.clutter = uns();
    else if (key == "model.norm") norm = rethrow_with_key(key, [&] { return parse_norm_kind(v); });
    else if (key == "model.hidden") hidden = uns();
    else if (key == "model.checkpoint") checkpoint = v;
    else if (key == "pretrain.epochs") pretrain.epochs = uns();
    else if (key == "pretrain.batch_size") pretrain.batch_size = uns();
    else if (key == "pretrain.lr") pretrain.lr = num();
    else if (key == "pretrain.momentum") pretrain.momentum = num();
    else if (key == "pretrain.plpd_filter") {
      if (v == "none" || v.empty()) pretrain.plpd_filter.reset();
      else pretrain.plpd_filter = num();
    } else if (key == "pretrain.warmup_fraction") pretrain.warmup_fraction = num();
    else if (key == "scenario.kind") scenario.kind = rethrow_with_key(key, [&] { return parse_scenario_kind(v); });
    else if (key == "scenario.batch_size") scenario.batch_size = uns();
    else if (key == "scenario.mix") scenario.mix = parse_mix(key, v);
    else if (key == "method") {
      if (v == "none") method = Method::none;
      else if (v == "tent") method = Method::tent;
      else if (v == "deyo") method = Method::deyo;
      else if (v == "ablation_cell") method = Method::ablation_cell;
      else throw ConfigError("config key 'method': expected none, tent, deyo or ablation_cell, got '" + v + "'");
    } else if (key == "ablation.row") {
      const auto row = uns();
      if (row < 1 || row > 16) throw ConfigError("config key 'ablation.row': must be in 1..16");
      ablation_row = static_cast<int>(row);
    } else if (key == "adapt.tau_ent") adapt.tau_ent = num();
    else if (key == "adapt.tau_plpd") adapt.tau_plpd = num();
    else if (key == "adapt.ent0") adapt.ent0 = num();
    else if (key == "adapt.lr") adapt.lr = num();
    else if (key == "adapt.momentum") adapt.momentum = num();
    else if (key == "adapt.use_ent_select") adapt.use_ent_select = flag();
    else if (key == "adapt.use_plpd_select") adapt.use_plpd_select = flag();
    else if (key == "adapt.use_ent_weight") adapt.use_ent_weight = flag();
    else if (key == "adapt.use_plpd_weight") adapt.use_plpd_weight = flag();
    else if (key == "adapt.reset_at_end") adapt.reset_at_end = flag();
    else if (key == "transform.kind")
      adapt.transform.kind = rethrow_with_key(key, [&] { return parse_transform_kind(v); });
    else if (key == "transform.patch_grid") adapt.transform.patch_grid = uns();
    else if (key == "transform.occlusion_fraction") adapt.transform.occlusion_fraction = num();
    else if (key == "transform.noise_sigma") adapt.transform.noise_sigma = num();
    else if (key == "seeds") {
      seeds.clear();
      for (const auto& s : split(v, ',')) seeds.push_back(parse_unsigned(key, s));
      if (seeds.empty()) throw ConfigError("config key 'seeds': at least one seed is required");
    } else if (key == "output_dir") output_dir = v;
    else if (key == "analysis.measure") measure = flag();
    else throw ConfigError("unknown config key '" + std::string(key) + "'");
  }

  /// The adaptation settings a run actually uses, after applying `method`.
  AdaptConfig resolved_adapt() const {
    AdaptConfig a = adapt;
    switch (method) {
      case Method::none: a.update = false; break;
      case Method::tent: AblationFlags{}.apply(a); break;
      case Method::ablation_cell: AblationFlags::from_row(ablation_row).apply(a); break;
      case Method::deyo: break;
    }
    return a;
  }

  std::filesystem::path resolved_data_root() const {
    if (!data_root.empty()) return data_root;
    if (const char* env = std::getenv(kDataRootEnv); env && *env) return env;
    return "data/mnist";
  }

  void validate() const {
    if (seeds.empty()) throw ConfigError("config key 'seeds': at least one seed is required");
    if (hidden == 0) throw ConfigError("config key 'model.hidden': must be >= 1");
    if (test_size == 0 && dataset == Dataset::synth) throw ConfigError("config key 'data.test_size': must be >= 1");
    if (train_size == 0 && dataset == Dataset::synth && checkpoint.empty())
      throw ConfigError("config key 'data.train_size': must be >= 1 for synth");
    if (scenario.kind == ScenarioKind::batch_size_1 && norm == NormKind::batch)
      throw ConfigError("batch_size_1 scenario with model.norm=batch: batch statistics need >= 2 samples; "
                        "set model.norm=layer");
    if (scenario.batch_size == 0) throw ConfigError("config key 'scenario.batch_size': must be >= 1");
    resolved_adapt().validate(kClasses);
  }

 private:
  static std::vector<MixComponent> parse_mix(std::string_view key, std::string_view v) {
    std::vector<MixComponent> mix;
    if (detail::trim(v).empty()) return mix;
    for (const auto& item : detail::split(v, ',')) {
      const auto parts = detail::split(item, ':');
      if (parts.size() != 2)
        throw ConfigError("config key '" + std::string(key) + "': expected kind:fraction, got '" + item + "'");
      MixComponent m;
      m.transform.kind = detail::rethrow_with_key(key, [&] { return parse_transform_kind(parts[0]); });
      m.fraction = detail::parse_number(key, parts[1]);
      mix.push_back(m);
    }
    return mix;
  }
};

/// Parses `key = value` lines; blank lines and lines starting with '#' are skipped.
inline std::vector<std::pair<std::string, std::string>> parse_config_text(std::string_view text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::size_t line_no = 0;
  for (const auto& raw : detail::split(text, '\n')) {
    ++line_no;
    const auto line = detail::trim(raw);
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key=value, got '" +
                        std::string(line) + "'");
    out.emplace_back(std::string(detail::trim(line.substr(0, eq))), std::string(detail::trim(line.substr(eq + 1))));
  }
  return out;
}

inline void apply_pairs(RunConfig& cfg, const std::vector<std::pair<std::string, std::string>>& pairs) {
  for (const auto& [k, v] : pairs) cfg.set(k, v);
}

inline void load_config_file(RunConfig& cfg, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  apply_pairs(cfg, parse_config_text(ss.str()));
}

inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names{"mild", "label-shift", "bs1", "biased", "ablation"};
  return names;
}

/// Key/value pairs of a named preset, applied on top of the defaults.
inline std::vector<std::pair<std::string, std::string>> preset_pairs(std::string_view name) {
  const std::string ln2 = format_double(std::log(2.0));
  // Spurious-correlation setup: color-reliant pretraining on the hard glyph
  // profile, PLPD selection only, Ent0 = ln C, larger desk-scale step size.
  const std::vector<std::pair<std::string, std::string>> biased{
      {"synth.profile", "hard"},       {"data.train_size", "2000"},       {"data.test_size", "10000"},
      {"scenario.kind", "mild"},       {"method", "deyo"},                {"adapt.use_ent_select", "false"},
      {"adapt.ent0", ln2},             {"adapt.tau_plpd", "0.5"},         {"adapt.lr", "0.1"},
      {"seeds", "0,1,2,3,4"}};
  if (name == "mild") return {{"scenario.kind", "mild"}, {"method", "deyo"}};
  if (name == "label-shift" || name == "label_shift") return {{"scenario.kind", "label_shift"}, {"method", "deyo"}};
  if (name == "bs1") {
    return {{"scenario.kind", "batch_size_1"}, {"model.norm", "layer"}, {"method", "deyo"},
            {"adapt.lr", format_double(0.0025 / 16.0)}};
  }
  if (name == "biased") return biased;
  if (name == "ablation") {
    auto p = biased;
    p.emplace_back("adapt.use_ent_select", "true");
    p.emplace_back("adapt.tau_ent", format_double(0.5 * std::log(2.0)));
    p.emplace_back("adapt.ent0", format_double(0.4 * std::log(2.0)));
    p.emplace_back("seeds", "0,1,2");
    return p;
  }
  throw ConfigError("unknown preset '" + std::string(name) + "' (expected mild, label-shift, bs1, biased or ablation)");
}

inline RunConfig preset(std::string_view name) {
  RunConfig cfg;
  apply_pairs(cfg, preset_pairs(name));
  return cfg;
}

// ---------------------------------------------------------------------------
// Per-seed preparation

struct MnistCache {
  std::optional<MnistSplit> train, test;
};

struct SeedContext {
  std::uint64_t seed = 0;
  ModelState model;             // pretrained, never adapted
  std::vector<Batch> stream;
  std::size_t test_samples = 0;
  double train_accuracy = std::numeric_limits<double>::quiet_NaN();
  double iid_accuracy = std::numeric_limits<double>::quiet_NaN();
};

namespace detail {

inline std::vector<LabeledImage> take_colored(const MnistSplit& split, std::size_t limit, Split which, Rng& rng,
                                              std::optional<double> flip = std::nullopt) {
  const std::size_t n = limit == 0 ? split.images.size() : std::min(limit, split.images.size());
  return build_colored_mnist(std::span<const ImageGrid>(split.images).first(n),
                             std::span<const int>(split.labels).first(n), which, rng, flip);
}

}  // namespace detail

/// Builds the data, pretrains (or loads) the model, and orders the test
/// stream for one seed. Generators for each stage are forked from the seed.
inline SeedContext prepare_seed(const RunConfig& cfg, std::uint64_t seed, MnistCache& cache,
                                const std::optional<ModelState>& loaded = std::nullopt) {
  const Rng root(seed);
  Rng train_rng = root.fork(1), test_rng = root.fork(2), iid_rng = root.fork(3);
  Rng init_rng = root.fork(4), pretrain_rng = root.fork(5);

  std::vector<LabeledImage> train, test, iid;
  const bool need_train = !loaded;
  if (cfg.dataset == Dataset::synth) {
    if (need_train) train = synth_fallback(cfg.train_size, train_rng, Split::train, cfg.synth);
    test = synth_fallback(cfg.test_size, test_rng, Split::test, cfg.synth);
    if (cfg.iid_size > 0) iid = synth_fallback(cfg.iid_size, iid_rng, Split::train, cfg.synth);
  } else {
    const auto dir = cfg.resolved_data_root();
    if (need_train && !cache.train) cache.train = load_mnist_split(dir, true);
    if (!cache.test) cache.test = load_mnist_split(dir, false);
    if (need_train) train = detail::take_colored(*cache.train, cfg.train_size, Split::train, train_rng);
    test = detail::take_colored(*cache.test, cfg.test_size, Split::test, test_rng);
    if (cfg.iid_size > 0)
      iid = detail::take_colored(*cache.test, cfg.iid_size, Split::test, iid_rng, kTrainColorFlip);
  }

  SeedContext ctx;
  ctx.seed = seed;
  if (loaded) {
    ctx.model = *loaded;
  } else {
    ctx.model = make_model({train.front().image.size(), cfg.hidden, RunConfig::kClasses, cfg.norm}, init_rng);
    PretrainOptions po = cfg.pretrain;
    po.transform = cfg.adapt.transform;
    const auto report = pretrain(ctx.model, train, po, pretrain_rng);
    if (!report.epoch_accuracy.empty()) ctx.train_accuracy = report.epoch_accuracy.back();
  }
  if (ctx.model.input_dim() != test.front().image.size())
    throw DimensionError("model input size does not match the dataset images");
  if (!iid.empty()) ctx.iid_accuracy = accuracy(ctx.model, iid, cfg.scenario.batch_size < 2 ? 64 : cfg.scenario.batch_size);

  ScenarioSpec sc = cfg.scenario;
  sc.seed = seed;
  for (auto& m : sc.mix) m.transform.seed = seed;
  ctx.test_samples = test.size();
  ctx.stream = make_stream(std::move(test), sc);
  return ctx;
}

inline std::optional<ModelState> load_configured_checkpoint(const RunConfig& cfg) {
  if (cfg.checkpoint.empty()) return std::nullopt;
  return load_checkpoint(cfg.checkpoint);
}

// ---------------------------------------------------------------------------
// Per-seed evaluation

struct SeedResult {
  std::uint64_t seed = 0;
  RunResult run;
  GroupReport groups;
  double aurc_entropy = 0.0;                 // adapted run, all samples
  std::optional<double> worst_aurc_entropy;  // frozen model, its worst group
  std::optional<double> worst_aurc_plpd;
  std::optional<RCCurve> worst_rc_entropy;
  std::optional<RCCurve> worst_rc_plpd;
  std::optional<AreaReport> areas;
  QuartileReport quartiles;
  bool has_quartiles = false;
  double train_accuracy = 0.0;
  double iid_accuracy = 0.0;
};

inline SeedResult evaluate_seed(const RunConfig& cfg, const SeedContext& ctx, const AdaptConfig& adapt) {
  SeedResult r;
  r.seed = ctx.seed;
  r.train_accuracy = ctx.train_accuracy;
  r.iid_accuracy = ctx.iid_accuracy;
  AdaptConfig a = adapt;
  a.transform.seed = ctx.seed;
  ModelState model = ctx.model;
  r.run = run_stream(model, ctx.stream, a);
  const auto records = r.run.records();
  const std::vector<int> expected{0, 1, 2, 3};
  r.groups = group_accuracies(records, expected);
  r.aurc_entropy = rc_curve(records, ConfidenceKey::negative_entropy).aurc;
  if (records.size() >= 4) {
    r.quartiles = entropy_quartile_accuracy(records);
    r.has_quartiles = true;
  }
  if (cfg.measure) {
    const auto frozen = measure_stream(ctx.model, ctx.stream, a.transform);
    const auto g = group_accuracies(frozen);
    std::vector<EvalRecord> worst;
    for (const auto& rec : frozen)
      if (rec.group_id == g.worst_group_id) worst.push_back(rec);
    if (!worst.empty()) {
      r.worst_rc_entropy = rc_curve(worst, ConfidenceKey::negative_entropy);
      r.worst_rc_plpd = rc_curve(worst, ConfidenceKey::plpd);
      r.worst_aurc_entropy = r.worst_rc_entropy->aurc;
      r.worst_aurc_plpd = r.worst_rc_plpd->aurc;
    }
    r.areas = area_partition(frozen, a.tau_ent, a.tau_plpd);
  }
  return r;
}

struct RunSummary {
  RunConfig config;
  std::vector<SeedResult> seeds;
};

// ---------------------------------------------------------------------------
// Artifacts

namespace detail {

inline nlohmann::ordered_json number_or_null(double v) {
  if (!std::isfinite(v)) return nullptr;
  return v;
}

inline nlohmann::ordered_json counters_json(const OpCounters& c) {
  nlohmann::ordered_json j;
  j["forwards_main"] = c.forwards_main;
  j["forwards_aux"] = c.forwards_aux;
  j["backwards"] = c.backwards;
  j["selected"] = c.selected;
  return j;
}

inline double median_of(std::vector<double> v) { return v.empty() ? 0.0 : median(std::move(v)); }

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("write failed: " + path.string());
}

}  // namespace detail

inline nlohmann::ordered_json summary_json(const RunSummary& s) {
  using nlohmann::ordered_json;
  using detail::number_or_null;
  ordered_json j;
  ordered_json cfg = ordered_json::object();
  for (const auto& [k, v] : s.config.to_flat()) cfg[k] = v;
  j["config"] = cfg;

  std::vector<double> acc, worst, aurc_run, aurc_we, aurc_wp;
  OpCounters total;
  ordered_json seeds = ordered_json::array();
  for (const auto& r : s.seeds) {
    ordered_json e;
    e["seed"] = r.seed;
    e["samples"] = r.run.samples;
    e["accuracy"] = r.groups.average;
    e["worst_group"] = r.groups.worst_group;
    e["worst_group_id"] = r.groups.worst_group_id;
    ordered_json groups = ordered_json::array();
    for (const auto& g : r.groups.groups)
      groups.push_back({{"group", g.group_id}, {"count", g.count}, {"accuracy", g.accuracy}});
    e["groups"] = groups;
    if (!r.groups.warnings.empty()) e["warnings"] = r.groups.warnings;
    e["pretrain"] = {{"train_accuracy", number_or_null(r.train_accuracy)},
                     {"iid_accuracy", number_or_null(r.iid_accuracy)}};
    ordered_json aurc;
    aurc["entropy"] = r.aurc_entropy;
    if (r.worst_aurc_entropy) aurc["frozen_worst_group_entropy"] = *r.worst_aurc_entropy;
    if (r.worst_aurc_plpd) aurc["frozen_worst_group_plpd"] = *r.worst_aurc_plpd;
    e["aurc"] = aurc;
    if (r.has_quartiles) {
      ordered_json q;
      q["edges"] = {r.quartiles.q1, r.quartiles.q2, r.quartiles.q3};
      ordered_json bins = ordered_json::array();
      for (const auto& b : r.quartiles.bins) bins.push_back({{"count", b.count}, {"accuracy", number_or_null(b.accuracy)}});
      q["bins"] = bins;
      e["entropy_quartiles"] = q;
    }
    if (r.areas) {
      ordered_json areas = ordered_json::array();
      for (std::size_t a = 0; a < 4; ++a) {
        const auto& st = r.areas->areas[a];
        areas.push_back({{"area", a + 1}, {"count", st.count}, {"share", st.share},
                         {"accuracy", number_or_null(st.accuracy)}});
      }
      e["areas"] = areas;
    }
    e["counters"] = detail::counters_json(r.run.counters);
    seeds.push_back(e);

    acc.push_back(r.groups.average);
    worst.push_back(r.groups.worst_group);
    aurc_run.push_back(r.aurc_entropy);
    if (r.worst_aurc_entropy) aurc_we.push_back(*r.worst_aurc_entropy);
    if (r.worst_aurc_plpd) aurc_wp.push_back(*r.worst_aurc_plpd);
    total += r.run.counters;
  }
  j["seeds"] = seeds;

  auto agg = [&](auto fn) {
    ordered_json a;
    a["accuracy"] = fn(acc);
    a["worst_group"] = fn(worst);
    a["aurc_entropy"] = fn(aurc_run);
    if (!aurc_we.empty()) a["frozen_worst_group_aurc_entropy"] = fn(aurc_we);
    if (!aurc_wp.empty()) a["frozen_worst_group_aurc_plpd"] = fn(aurc_wp);
    return a;
  };
  j["mean"] = agg([](const std::vector<double>& v) { return mean(v); });
  j["median"] = agg([](const std::vector<double>& v) { return detail::median_of(v); });
  j["counters"] = detail::counters_json(total);
  return j;
}

inline std::string diagnostics_csv(const RunSummary& s) {
  std::string out = "seed,batch_idx,entropy,plpd,selected,weight,pred,label,group,area\n";
  for (const auto& r : s.seeds) {
    const std::string seed = std::to_string(r.seed);
    for (std::size_t b = 0; b < r.run.batches.size(); ++b) {
      const std::string batch = std::to_string(b);
      for (const auto& d : r.run.batches[b].samples) {
        out += seed;
        out += ',';
        out += batch;
        out += ',';
        out += format_double(d.entropy);
        out += ',';
        out += format_double(d.plpd);
        out += d.selected ? ",1," : ",0,";
        out += format_double(d.weight);
        out += ',';
        out += std::to_string(d.pseudo_label);
        out += ',';
        out += std::to_string(d.label);
        out += ',';
        out += std::to_string(d.group);
        out += ',';
        out += std::to_string(d.area);
        out += '\n';
      }
    }
  }
  return out;
}

/// Frozen-model worst-group risk-coverage curves, one row per coverage point.
inline std::string rc_curve_csv(const RunSummary& s) {
  std::string out = "seed,metric,coverage,risk\n";
  for (const auto& r : s.seeds) {
    const auto emit = [&](const char* metric, const std::optional<RCCurve>& c) {
      if (!c) return;
      for (std::size_t k = 0; k < c->coverage.size(); ++k)
        out += std::to_string(r.seed) + ',' + metric + ',' + format_double(c->coverage[k]) + ',' +
               format_double(c->risk[k]) + '\n';
    };
    emit("entropy", r.worst_rc_entropy);
    emit("plpd", r.worst_rc_plpd);
  }
  return out;
}

inline void write_run_artifacts(const RunSummary& s, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  detail::write_text(dir / "summary.json", summary_json(s).dump(2) + "\n");
  detail::write_text(dir / "diagnostics.csv", diagnostics_csv(s));
  detail::write_text(dir / "rc_curve.csv", rc_curve_csv(s));
}

// ---------------------------------------------------------------------------
// Verbs

using ProgressFn = std::function<void(const std::string&)>;

inline RunSummary run_experiment(const RunConfig& cfg, const ProgressFn& progress = {}) {
  cfg.validate();
  const auto loaded = load_configured_checkpoint(cfg);
  MnistCache cache;
  RunSummary summary;
  summary.config = cfg;
  const AdaptConfig adapt = cfg.resolved_adapt();
  for (const auto seed : cfg.seeds) {
    const auto ctx = prepare_seed(cfg, seed, cache, loaded);
    summary.seeds.push_back(evaluate_seed(cfg, ctx, adapt));
    if (progress) {
      const auto& r = summary.seeds.back();
      progress("seed " + std::to_string(seed) + ": accuracy " + format_double(r.groups.average) +
               ", worst-group " + format_double(r.groups.worst_group));
    }
  }
  return summary;
}

/// `run` verb: evaluates every seed and writes the three run artifacts.
inline RunSummary run(const RunConfig& cfg, const ProgressFn& progress = {}) {
  auto summary = run_experiment(cfg, progress);
  write_run_artifacts(summary, cfg.output_dir);
  return summary;
}

inline const std::vector<std::string>& sweep_params() {
  static const std::vector<std::string> p{"tau_plpd", "patch_grid", "transform_kind", "tau_ent", "ent0"};
  return p;
}

inline std::string sweep_key(std::string_view param) {
  if (param == "tau_plpd") return "adapt.tau_plpd";
  if (param == "patch_grid") return "transform.patch_grid";
  if (param == "transform_kind") return "transform.kind";
  if (param == "tau_ent") return "adapt.tau_ent";
  if (param == "ent0") return "adapt.ent0";
  throw ConfigError("unknown sweep parameter '" + std::string(param) +
                    "' (expected tau_plpd, patch_grid, transform_kind, tau_ent or ent0)");
}

struct SweepRow {
  std::string value;
  double accuracy = 0.0;      // mean over seeds
  double worst_group = 0.0;   // mean over seeds
  std::size_t selected = 0;   // summed over seeds
};

/// One adaptation run per value. Data and pretraining depend only on the
/// seed, so each seed is prepared once and shared by all values.
inline std::vector<SweepRow> sweep(const RunConfig& base, std::string_view param,
                                   const std::vector<std::string>& values, const ProgressFn& progress = {}) {
  const std::string key = sweep_key(param);
  if (values.empty()) throw ConfigError("sweep: no values given");
  std::vector<RunConfig> cfgs;
  for (const auto& v : values) {
    RunConfig c = base;
    c.set(key, v);
    c.validate();
    cfgs.push_back(std::move(c));
  }
  base.validate();
  const auto loaded = load_configured_checkpoint(base);
  MnistCache cache;
  std::vector<SweepRow> rows(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) rows[i].value = values[i];
  for (const auto seed : base.seeds) {
    const auto ctx = prepare_seed(base, seed, cache, loaded);
    for (std::size_t i = 0; i < cfgs.size(); ++i) {
      RunConfig c = cfgs[i];
      c.measure = false;
      const auto r = evaluate_seed(c, ctx, c.resolved_adapt());
      rows[i].accuracy += r.groups.average / static_cast<double>(base.seeds.size());
      rows[i].worst_group += r.groups.worst_group / static_cast<double>(base.seeds.size());
      rows[i].selected += r.run.counters.selected;
      if (progress) progress("seed " + std::to_string(seed) + " " + std::string(param) + "=" + values[i]);
    }
  }
  return rows;
}

inline std::string sweep_csv(std::string_view param, const std::vector<SweepRow>& rows) {
  std::string out = "param,value,avg_acc,worst_group_acc,selected\n";
  for (const auto& r : rows)
    out += std::string(param) + ',' + r.value + ',' + format_double(r.accuracy) + ',' +
           format_double(r.worst_group) + ',' + std::to_string(r.selected) + '\n';
  return out;
}

struct AblationRow {
  int row = 0;
  std::string label;
  double accuracy = 0.0;     // mean over seeds
  double worst_group = 0.0;  // mean over seeds
  OpCounters counters;       // summed over seeds
};

inline std::vector<AblationRow> ablation(const RunConfig& base, const ProgressFn& progress = {}) {
  base.validate();
  const auto loaded = load_configured_checkpoint(base);
  MnistCache cache;
  std::vector<AblationRow> rows(16);
  const double n = static_cast<double>(base.seeds.size());
  for (const auto seed : base.seeds) {
    const auto ctx = prepare_seed(base, seed, cache, loaded);
    AdaptConfig a = base.adapt;
    a.transform.seed = seed;
    const auto cells = ablation_grid(ctx.model, ctx.stream, a);
    for (std::size_t i = 0; i < cells.size(); ++i) {
      const auto g = group_accuracies(cells[i].result.records());
      rows[i].row = cells[i].flags.row();
      rows[i].label = cells[i].label;
      rows[i].accuracy += g.average / n;
      rows[i].worst_group += g.worst_group / n;
      rows[i].counters += cells[i].result.counters;
    }
    if (progress) progress("seed " + std::to_string(seed) + ": 16 cells done");
  }
  return rows;
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string out = "row,label,avg_acc,worst_group_acc,forwards_main,forwards_aux,backwards\n";
  for (const auto& r : rows)
    out += std::to_string(r.row) + ",\"" + r.label + "\"," + format_double(r.accuracy) + ',' +
           format_double(r.worst_group) + ',' + std::to_string(r.counters.forwards_main) + ',' +
           std::to_string(r.counters.forwards_aux) + ',' + std::to_string(r.counters.backwards) + '\n';
  return out;
}

inline nlohmann::ordered_json theory_report_json(const theory::TheoryReport& rep) {
  nlohmann::ordered_json j;
  j["seed"] = rep.seed;
  j["trials"] = rep.trials;
  j["agreements"] = rep.agreements;
  j["skipped"] = rep.skipped;
  j["harmful"] = rep.harmful;
  j["max_closed_form_error"] = rep.max_closed_form_error;
  nlohmann::ordered_json ce = nlohmann::ordered_json::array();
  for (const auto& c : rep.counterexamples)
    ce.push_back({{"trial", c.trial}, {"condition", c.condition}, {"gap_change", c.gap_change}});
  j["counterexamples"] = ce;
  return j;
}

struct PretrainResult {
  ModelState model;
  double train_accuracy = 0.0;
  double iid_accuracy = 0.0;
};

/// Pretrains on the first configured seed and writes a checkpoint.
inline PretrainResult pretrain_checkpoint(const RunConfig& cfg, const std::filesystem::path& out) {
  RunConfig c = cfg;
  c.checkpoint.clear();
  c.validate();
  MnistCache cache;
  auto ctx = prepare_seed(c, c.seeds.front(), cache);
  if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
  save_checkpoint(ctx.model, out);
  return {std::move(ctx.model), ctx.train_accuracy, ctx.iid_accuracy};
}

}  // namespace deyo
