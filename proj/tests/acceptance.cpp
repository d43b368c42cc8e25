// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "deyo/experiment.hpp"

using namespace deyo;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + what;
    }
  }
};

int failures = 0;

void report(int id, const std::string& name, const std::function<Outcome()>& body) {
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o.pass = false;
    o.detail = std::string("exception: ") + e.what();
  }
  if (!o.pass) ++failures;
  std::printf("%s criterion %d: %s%s%s\n", o.pass ? "PASS" : "FAIL", id, name.c_str(), o.detail.empty() ? "" : " | ",
              o.detail.c_str());
  std::fflush(stdout);
}

std::string fmt(double v) { return format_double(v); }

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Matrix random_inputs(std::size_t n, std::size_t d, Rng& rng) {
  Matrix x(n, d);
  for (double& v : x.data()) v = rng.uniform(-1.0, 1.0);
  return x;
}

ModelState random_model(std::size_t d, std::size_t h, std::size_t c, NormKind norm, Rng& rng) {
  auto m = make_model({d, h, c, norm}, rng);
  for (auto& g : m.params.norm.gamma) g = rng.uniform(0.5, 1.5);
  for (auto& b : m.params.norm.beta) b = rng.uniform(-0.5, 0.5);
  return m;
}

/// Small pretrained BN model and test stream on 12x12 glyphs.
std::pair<ModelState, std::vector<Batch>> small_stream(std::uint64_t seed) {
  Rng rng(seed);
  SynthOptions opt;
  opt.size = 12;
  opt.jitter = 1.0;
  opt.thickness = 1.5;
  const auto train = synth_fallback(200, rng, 0.2, opt);
  auto test = synth_fallback(128, rng, 0.9, opt);
  auto model = make_model({12 * 12 * 3, 16, 2, NormKind::batch}, rng);
  PretrainOptions po;
  po.epochs = 3;
  po.batch_size = 16;
  pretrain(model, train, po, rng);
  ScenarioSpec sc;
  sc.batch_size = 16;
  sc.seed = seed;
  return {std::move(model), make_stream(std::move(test), sc)};
}

}  // namespace

int main() {
  report(1, "harmful-sample condition sign equals brute-force gap change sign", [] {
    Outcome o;
    const auto t0 = Clock::now();
    const auto rep = theory::verify_sign_agreement(1000, 2024, 1e-9);
    const double dt = seconds_since(t0);
    o.require(rep.trials == 1000, "trials " + std::to_string(rep.trials));
    o.require(rep.agreements == 1000, "agreements " + std::to_string(rep.agreements) + "/1000");
    o.require(dt < 5.0, "runtime " + fmt(dt) + " s >= 5 s");
    o.detail = o.detail.empty() ? std::to_string(rep.agreements) + "/1000 agree in " + fmt(dt) + " s" : o.detail;
    return o;
  });

  report(2, "weighted entropy loss gradient matches central finite differences", [] {
    Outcome o;
    const auto t0 = Clock::now();
    Rng rng(77);
    double worst = 0.0;
    std::size_t configs = 0;
    while (configs < 50) {
      const std::size_t d = 2 + rng.index(6), h = 2 + rng.index(6), c = 2 + rng.index(4);
      const auto norm = rng.bernoulli(0.5) ? NormKind::batch : NormKind::layer;
      const std::size_t n = 2 + rng.index(7);
      auto m = random_model(d, h, c, norm, rng);
      const auto x = random_inputs(n, d, rng);
      std::vector<double> w(n);
      for (auto& v : w) v = rng.bernoulli(0.3) ? 0.0 : rng.uniform(0.1, 3.0);
      if (std::all_of(w.begin(), w.end(), [](double v) { return v == 0.0; })) w[0] = 1.0;
      const auto g = grad_adapt_params(m, x, w);
      const double eps = 1e-6;
      auto check = [&](std::vector<double>& theta, const std::vector<double>& analytic) {
        for (std::size_t j = 0; j < theta.size(); ++j) {
          const double keep = theta[j];
          theta[j] = keep + eps;
          const double up = weighted_entropy_loss(m, x, w);
          theta[j] = keep - eps;
          const double down = weighted_entropy_loss(m, x, w);
          theta[j] = keep;
          const double fd = (up - down) / (2.0 * eps);
          const double rel = std::abs(analytic[j] - fd) / std::max({std::abs(analytic[j]), std::abs(fd), 1e-7});
          worst = std::max(worst, rel);
        }
      };
      check(m.params.norm.gamma, g.gamma);
      check(m.params.norm.beta, g.beta);
      ++configs;
    }
    const double dt = seconds_since(t0);
    o.require(worst < 1e-4, "max relative error " + fmt(worst));
    o.require(dt < 30.0, "runtime " + fmt(dt) + " s >= 30 s");
    if (o.pass) o.detail = "50 configurations, max relative error " + fmt(worst) + " in " + fmt(dt) + " s";
    return o;
  });

  report(3, "Tent flags reduce to mean entropy; ablation row 1 equals Tent", [] {
    Outcome o;
    auto [model, stream] = small_stream(5);
    // per-batch gradient identity
    double worst = 0.0;
    {
      auto m = model;
      const auto cfg = AdaptConfig::tent(2);
      Rng trng(0);
      for (const auto& b : stream) {
        const auto before = m;
        const auto d = adapt_batch(m, b, cfg, trng);
        const std::vector<double> ones(b.size(), 1.0);
        const auto direct = grad_adapt_params(before, pack_inputs(b.samples), ones).flatten();
        const auto got = d.gradient.flatten();
        if (got.size() != direct.size()) {
          o.require(false, "gradient size mismatch");
          break;
        }
        for (std::size_t i = 0; i < got.size(); ++i) worst = std::max(worst, std::abs(got[i] - direct[i]));
      }
    }
    o.require(worst <= 1e-12, "max gradient difference " + fmt(worst));
    // row 1 of the grid versus a plain Tent run
    const auto cells = ablation_grid(model, stream, AdaptConfig::deyo(2));
    auto m = model;
    const auto tent = run_stream(m, stream, AdaptConfig::tent(2));
    const auto& row1 = cells.front().result;
    bool same = row1.counters == tent.counters && row1.batches.size() == tent.batches.size();
    for (std::size_t i = 0; same && i < tent.batches.size(); ++i) {
      same = row1.batches[i].gradient.flatten() == tent.batches[i].gradient.flatten();
      for (std::size_t k = 0; same && k < tent.batches[i].samples.size(); ++k) {
        const auto& a = row1.batches[i].samples[k];
        const auto& b = tent.batches[i].samples[k];
        same = a.entropy == b.entropy && a.pseudo_label == b.pseudo_label && a.weight == b.weight;
      }
    }
    o.require(same, "row 1 differs from Tent");
    if (o.pass) o.detail = "max gradient difference " + fmt(worst) + ", row 1 identical";
    return o;
  });

  report(4, "formula spot checks", [] {
    Outcome o;
    for (std::size_t c : {2u, 10u, 1000u}) {
      const std::vector<double> p(c, 1.0 / static_cast<double>(c));
      const double e = entropy(p);
      o.require(std::abs(e - std::log(static_cast<double>(c))) <= 1e-12, "entropy(uniform " + std::to_string(c) + ")");
    }
    Prediction pr;
    pr.probs = {0.2, 0.5, 0.3};
    pr.pseudo_label = 1;
    o.require(std::abs(plpd(pr, pr)) <= 1e-12, "PLPD(identity)");
    Rng rng(1);
    ImageGrid img(4, 4, 3);
    for (double& v : img.pixels) v = rng.uniform();
    TransformSpec id;
    id.kind = TransformKind::identity;
    o.require(apply_transform(img, id, rng) == img, "identity transform");
    const auto cfg = AdaptConfig::deyo(1000);
    o.require(std::abs(weight(cfg.ent0, 0.0, cfg) - 2.0) <= 1e-12, "alpha(Ent0, 0)");
    return o;
  });

  // Desk-scale biased-scenario runs shared by criteria 5, 6 and 7.
  const RunConfig biased = preset("biased");
  std::vector<double> wg_none, wg_tent, wg_deyo;
  std::vector<std::pair<double, double>> aurcs;
  std::vector<OpCounters> deyo_totals;
  std::vector<std::pair<OpCounters, OpCounters>> deyo_tallies;  // (summed per-batch, reported)
  double biased_seconds = 0.0;
  std::string biased_error;
  try {
    const auto t0 = Clock::now();
    MnistCache cache;
    for (const auto seed : biased.seeds) {
      const auto ctx = prepare_seed(biased, seed, cache);
      auto run_method = [&](const char* method, bool measure) {
        RunConfig c = biased;
        c.set("method", method);
        c.measure = measure;
        return evaluate_seed(c, ctx, c.resolved_adapt());
      };
      const auto none = run_method("none", true);
      const auto tent = run_method("tent", false);
      const auto deyo = run_method("deyo", false);
      wg_none.push_back(none.groups.worst_group);
      wg_tent.push_back(tent.groups.worst_group);
      wg_deyo.push_back(deyo.groups.worst_group);
      aurcs.emplace_back(none.worst_aurc_entropy.value_or(NAN), none.worst_aurc_plpd.value_or(NAN));
      OpCounters sum;
      std::size_t survivors = 0, selected = 0;
      for (const auto& b : deyo.run.batches) {
        sum += b.counters;
        survivors += b.survivors;
        for (const auto& s : b.samples) selected += s.selected;
      }
      OpCounters tallies;
      tallies.forwards_main = deyo.run.samples;
      tallies.forwards_aux = survivors;
      tallies.backwards = selected;
      tallies.selected = selected;
      deyo_totals.push_back(deyo.run.counters);
      deyo_tallies.emplace_back(sum, tallies);
      std::printf("  seed %llu: worst-group none %s, tent %s, deyo %s; worst-group AURC entropy %s, plpd %s\n",
                  static_cast<unsigned long long>(seed), fmt(none.groups.worst_group).c_str(),
                  fmt(tent.groups.worst_group).c_str(), fmt(deyo.groups.worst_group).c_str(),
                  fmt(aurcs.back().first).c_str(), fmt(aurcs.back().second).c_str());
      std::fflush(stdout);
    }
    biased_seconds = seconds_since(t0);
  } catch (const std::exception& e) {
    biased_error = e.what();
  }

  report(5, "biased desk scale: median DeYO worst-group beats Tent, frozen and 50%", [&] {
    Outcome o;
    if (!biased_error.empty()) {
      o.require(false, biased_error);
      return o;
    }
    o.require(wg_deyo.size() == 5, "expected 5 seeds");
    const double d = median(wg_deyo), t = median(wg_tent), f = median(wg_none);
    o.require(d > t, "DeYO " + fmt(d) + " <= Tent " + fmt(t));
    o.require(d > f, "DeYO " + fmt(d) + " <= frozen " + fmt(f));
    o.require(d > 0.5, "DeYO " + fmt(d) + " <= 0.5");
    o.require(biased_seconds < 300.0, "runtime " + fmt(biased_seconds) + " s >= 300 s");
    if (o.pass)
      o.detail = "median worst-group DeYO " + fmt(d) + ", Tent " + fmt(t) + ", frozen " + fmt(f) + " in " +
                 fmt(biased_seconds) + " s";
    return o;
  });

  report(6, "worst-group AURC: entropy above patch PLPD on every seed", [&] {
    Outcome o;
    if (!biased_error.empty()) {
      o.require(false, biased_error);
      return o;
    }
    o.require(aurcs.size() == 5, "expected 5 seeds");
    for (std::size_t i = 0; i < aurcs.size(); ++i)
      o.require(aurcs[i].first > aurcs[i].second,
                "seed " + std::to_string(i) + ": entropy " + fmt(aurcs[i].first) + " <= plpd " + fmt(aurcs[i].second));
    return o;
  });

  report(7, "operation counters match per-batch tallies", [&] {
    Outcome o;
    if (!biased_error.empty()) {
      o.require(false, biased_error);
      return o;
    }
    for (std::size_t i = 0; i < deyo_totals.size(); ++i) {
      const auto& c = deyo_totals[i];
      o.require(c.forwards_aux <= c.forwards_main, "aux > main");
      o.require(c.backwards <= c.forwards_aux, "backwards > aux");
      o.require(deyo_tallies[i].first == c, "per-batch sum differs");
      o.require(deyo_tallies[i].second == c, "survivor/selected tallies differ");
    }
    // entropy gate active as well
    auto [model, stream] = small_stream(9);
    const auto r = run_stream(model, stream, AdaptConfig::deyo(2));
    std::size_t survivors = 0, selected = 0;
    for (const auto& b : r.batches) {
      survivors += b.survivors;
      for (const auto& s : b.samples) selected += s.selected;
    }
    o.require(r.counters.forwards_main == 128 && r.counters.forwards_aux == survivors &&
                  r.counters.backwards == selected,
              "entropy-gated run tallies differ");
    o.require(r.counters.forwards_aux <= r.counters.forwards_main && r.counters.backwards <= r.counters.forwards_aux,
              "entropy-gated ordering");
    return o;
  });

  report(8, "label-shift permutation; batch-size-1 with layer norm runs, batch norm rejected", [] {
    Outcome o;
    Rng rng(8);
    const auto samples = synth_fallback(400, rng, Split::test);
    ScenarioSpec ls;
    ls.kind = ScenarioKind::label_shift;
    ls.seed = 8;
    std::vector<LabeledImage> flat;
    for (const auto& b : make_stream(samples, ls)) flat.insert(flat.end(), b.samples.begin(), b.samples.end());
    std::size_t transitions = 0;
    for (std::size_t i = 1; i < flat.size(); ++i) transitions += flat[i].class_label != flat[i - 1].class_label;
    o.require(transitions <= 1, "class transitions " + std::to_string(transitions));
    auto key = [](std::vector<LabeledImage> v) {
      std::vector<std::pair<int, std::vector<double>>> k;
      for (auto& s : v) k.emplace_back(s.group_id * 10 + s.source_digit, std::move(s.image.pixels));
      std::sort(k.begin(), k.end());
      return k;
    };
    o.require(key(flat) == key(samples), "multiset differs");

    RunConfig cfg = preset("bs1");
    cfg.set("data.train_size", "200");
    cfg.set("data.test_size", "64");
    cfg.set("data.iid_size", "0");
    cfg.set("model.hidden", "16");
    cfg.set("pretrain.epochs", "2");
    const auto s = run_experiment(cfg);
    o.require(s.seeds.size() == 1 && s.seeds[0].run.samples == 64, "layer-norm bs1 run incomplete");
    cfg.set("model.norm", "batch");
    bool rejected = false;
    try {
      run_experiment(cfg);
    } catch (const ConfigError&) {
      rejected = true;
    }
    o.require(rejected, "batch-norm bs1 not rejected");
    return o;
  });

  report(9, "transform properties", [] {
    Outcome o;
    Rng rng(9);
    for (int trial = 0; trial < 50; ++trial) {
      ImageGrid img(28, 28, 3);
      for (double& v : img.pixels) v = rng.uniform();
      auto sorted = [](std::vector<double> v) {
        std::sort(v.begin(), v.end());
        return v;
      };
      const auto base = sorted(img.pixels);
      o.require(sorted(patch_shuffle(img, 4, rng).pixels) == base, "patch shuffle multiset");
      o.require(sorted(pixel_shuffle(img, rng).pixels) == base, "pixel shuffle multiset");
      o.require(patch_shuffle(img, 1, rng) == img, "n = 1 identity");
    }
    const TransformSpec def;
    o.require(def.patch_grid == 4 && 28 % def.patch_grid == 0, "default grid divides 28");
    return o;
  });

  report(10, "repeated run writes byte-identical summary and diagnostics", [] {
    Outcome o;
    RunConfig cfg = preset("biased");
    cfg.set("data.train_size", "300");
    cfg.set("data.test_size", "256");
    cfg.set("seeds", "0,1");
    const auto root = std::filesystem::temp_directory_path() / "deyo_acceptance_det";
    std::filesystem::remove_all(root);
    cfg.output_dir = (root / "a").string();
    run(cfg);
    cfg.output_dir = (root / "b").string();
    run(cfg);
    for (const char* f : {"summary.json", "diagnostics.csv"}) {
      const auto a = slurp(root / "a" / f), b = slurp(root / "b" / f);
      o.require(!a.empty() && a == b, std::string(f) + " differs");
    }
    std::filesystem::remove_all(root);
    return o;
  });

  std::printf("%s: %d criteria failed\n", failures == 0 ? "ALL PASS" : "FAILURES", failures);
  return failures == 0 ? 0 : 1;
}
