#pragma once

// Small fixtures shared by the unit suites.

#include <cstddef>
#include <vector>

#include "deyo/data.hpp"
#include "deyo/model.hpp"
#include "deyo/numerics.hpp"
#include "deyo/transforms.hpp"

namespace deyo::testing {

inline ImageGrid random_image(std::size_t h, std::size_t w, std::size_t c, Rng& rng) {
  ImageGrid img(h, w, c);
  for (double& v : img.pixels) v = rng.uniform();
  return img;
}

/// Image whose pixel at flat index i holds i / size, so every value is distinct.
inline ImageGrid ramp_image(std::size_t h, std::size_t w, std::size_t c) {
  ImageGrid img(h, w, c);
  for (std::size_t i = 0; i < img.size(); ++i) img.pixels[i] = static_cast<double>(i) / static_cast<double>(img.size());
  return img;
}

inline Matrix random_inputs(std::size_t n, std::size_t d, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Matrix x(n, d);
  for (double& v : x.data()) v = rng.uniform(lo, hi);
  return x;
}

/// Model with perturbed gamma/beta so that no parameter sits at its init value.
inline ModelState random_model(std::size_t d, std::size_t h, std::size_t c, NormKind norm, Rng& rng) {
  auto m = make_model({d, h, c, norm}, rng);
  for (auto& g : m.params.norm.gamma) g = rng.uniform(0.5, 1.5);
  for (auto& b : m.params.norm.beta) b = rng.uniform(-0.5, 0.5);
  for (auto& b : m.params.b1) b = rng.uniform(-0.2, 0.2);
  for (auto& b : m.params.b2) b = rng.uniform(-0.2, 0.2);
  return m;
}

/// Tiny labeled set on 2x2 single-channel images; class 1 is brighter.
inline std::vector<LabeledImage> toy_separable(std::size_t n, Rng& rng) {
  std::vector<LabeledImage> out;
  for (std::size_t i = 0; i < n; ++i) {
    const int cls = static_cast<int>(i % 2);
    ImageGrid img(2, 2, 1);
    for (double& v : img.pixels) v = cls == 1 ? rng.uniform(0.6, 1.0) : rng.uniform(0.0, 0.4);
    out.push_back({img, cls, 2 * cls + cls, cls == 1 ? 7 : 2});
  }
  return out;
}

inline Batch make_batch(std::vector<LabeledImage> samples) { return Batch{std::move(samples)}; }

}  // namespace deyo::testing
