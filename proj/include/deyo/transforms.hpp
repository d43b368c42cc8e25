#pragma once

// Object-destructive image transforms (patch shuffle, pixel shuffle, center
// occlusion) used to measure how much a prediction depends on object shape,
// plus additive Gaussian noise for building corrupted test streams.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "deyo/errors.hpp"
#include "deyo/numerics.hpp"

namespace deyo {

/// Height x width x channels image, interleaved (HWC) storage, values in [0, 1].
struct ImageGrid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 1;
  std::vector<double> pixels;

  ImageGrid() = default;
  ImageGrid(std::size_t h, std::size_t w, std::size_t c, double fill = 0.0)
      : height(h), width(w), channels(c), pixels(h * w * c, fill) {}

  std::size_t size() const noexcept { return pixels.size(); }
  std::size_t offset(std::size_t y, std::size_t x, std::size_t ch = 0) const noexcept {
    return (y * width + x) * channels + ch;
  }
  double& at(std::size_t y, std::size_t x, std::size_t ch = 0) noexcept {
    return pixels[offset(y, x, ch)];
  }
  double at(std::size_t y, std::size_t x, std::size_t ch = 0) const noexcept {
    return pixels[offset(y, x, ch)];
  }

  std::vector<double> channel_means() const {
    std::vector<double> m(channels, 0.0);
    const std::size_t n = height * width;
    if (n == 0) return m;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t c = 0; c < channels; ++c) m[c] += pixels[p * channels + c];
    for (double& v : m) v /= static_cast<double>(n);
    return m;
  }

  friend bool operator==(const ImageGrid&, const ImageGrid&) = default;
};

enum class TransformKind { identity, patch_shuffle, pixel_shuffle, center_occlusion, gaussian_noise };

inline std::string_view to_string(TransformKind k) noexcept {
  switch (k) {
    case TransformKind::identity: return "identity";
    case TransformKind::patch_shuffle: return "patch_shuffle";
    case TransformKind::pixel_shuffle: return "pixel_shuffle";
    case TransformKind::center_occlusion: return "center_occlusion";
    case TransformKind::gaussian_noise: return "gaussian_noise";
  }
  return "identity";
}

/// Accepts the canonical names plus the short forms `patch`, `pixel`, `occlusion`, `noise`.
inline TransformKind parse_transform_kind(std::string_view s) {
  if (s == "identity" || s == "none") return TransformKind::identity;
  if (s == "patch_shuffle" || s == "patch") return TransformKind::patch_shuffle;
  if (s == "pixel_shuffle" || s == "pixel") return TransformKind::pixel_shuffle;
  if (s == "center_occlusion" || s == "occlusion") return TransformKind::center_occlusion;
  if (s == "gaussian_noise" || s == "noise") return TransformKind::gaussian_noise;
  throw ConfigError("unknown transform kind '" + std::string(s) + "'");
}

struct TransformSpec {
  TransformKind kind = TransformKind::patch_shuffle;
  std::size_t patch_grid = 4;  // n x n patches
  double occlusion_fraction = 0.5;
  double noise_sigma = 0.1;
  std::uint64_t seed = 0;  // seeds the per-run transform generator
};

/// Moves patch `perm[k]` of the input to patch slot `k` of the output.
inline ImageGrid patch_shuffle_with(const ImageGrid& img, std::size_t n,
                                    std::span<const std::size_t> perm) {
  if (n == 0) throw DimensionError("patch_shuffle: grid size must be >= 1");
  if (img.height % n != 0 || img.width % n != 0) {
    throw DimensionError("patch_shuffle: image " + std::to_string(img.height) + "x" +
                         std::to_string(img.width) + " not divisible into " + std::to_string(n) +
                         "x" + std::to_string(n) + " patches");
  }
  if (perm.size() != n * n) throw DimensionError("patch_shuffle: permutation length != n*n");
  const std::size_t ph = img.height / n;
  const std::size_t pw = img.width / n;
  ImageGrid out(img.height, img.width, img.channels);
  for (std::size_t dst = 0; dst < n * n; ++dst) {
    const std::size_t src = perm[dst];
    const std::size_t dy = (dst / n) * ph, dx = (dst % n) * pw;
    const std::size_t sy = (src / n) * ph, sx = (src % n) * pw;
    for (std::size_t y = 0; y < ph; ++y) {
      const auto first = img.pixels.begin() + static_cast<std::ptrdiff_t>(img.offset(sy + y, sx));
      std::copy(first, first + static_cast<std::ptrdiff_t>(pw * img.channels),
                out.pixels.begin() + static_cast<std::ptrdiff_t>(out.offset(dy + y, dx)));
    }
  }
  return out;
}

inline ImageGrid patch_shuffle(const ImageGrid& img, std::size_t n, Rng& rng) {
  if (n == 0) throw DimensionError("patch_shuffle: grid size must be >= 1");
  const auto perm = rng.permutation(n * n);
  return patch_shuffle_with(img, n, perm);
}

/// Output pixel position p takes input pixel `perm[p]`; channels move together.
inline ImageGrid pixel_shuffle_with(const ImageGrid& img, std::span<const std::size_t> perm) {
  const std::size_t n = img.height * img.width;
  if (perm.size() != n) throw DimensionError("pixel_shuffle: permutation length != h*w");
  ImageGrid out(img.height, img.width, img.channels);
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t c = 0; c < img.channels; ++c)
      out.pixels[p * img.channels + c] = img.pixels[perm[p] * img.channels + c];
  return out;
}

inline ImageGrid pixel_shuffle(const ImageGrid& img, Rng& rng) {
  const auto perm = rng.permutation(img.height * img.width);
  return pixel_shuffle_with(img, perm);
}

/// Central block whose area is `fraction` of the image. Side lengths are
/// rounded to the nearest pixel; the block is centered with floor offsets.
struct OcclusionBox {
  std::size_t top, left, height, width;
};

inline OcclusionBox occlusion_box(std::size_t height, std::size_t width, double fraction) {
  const double side = std::sqrt(fraction);
  const auto bh = std::min(height, static_cast<std::size_t>(std::lround(side * static_cast<double>(height))));
  const auto bw = std::min(width, static_cast<std::size_t>(std::lround(side * static_cast<double>(width))));
  return {(height - bh) / 2, (width - bw) / 2, bh, bw};
}

/// Fills the central block with the per-channel image mean.
inline ImageGrid center_occlusion(const ImageGrid& img, double fraction) {
  if (!(fraction > 0.0 && fraction < 1.0))
    throw ConfigError("center_occlusion: fraction must lie in (0, 1)");
  const auto means = img.channel_means();
  const auto box = occlusion_box(img.height, img.width, fraction);
  ImageGrid out = img;
  for (std::size_t y = box.top; y < box.top + box.height; ++y)
    for (std::size_t x = box.left; x < box.left + box.width; ++x)
      for (std::size_t c = 0; c < img.channels; ++c) out.at(y, x, c) = means[c];
  return out;
}

inline ImageGrid gaussian_noise(const ImageGrid& img, double sigma, Rng& rng) {
  if (sigma < 0.0) throw ConfigError("gaussian_noise: sigma must be >= 0");
  ImageGrid out = img;
  if (sigma == 0.0) return out;
  for (double& v : out.pixels) v = std::clamp(v + sigma * rng.normal(), 0.0, 1.0);
  return out;
}

inline ImageGrid apply_transform(const ImageGrid& img, const TransformSpec& spec, Rng& rng) {
  switch (spec.kind) {
    case TransformKind::identity: return img;
    case TransformKind::patch_shuffle: return patch_shuffle(img, spec.patch_grid, rng);
    case TransformKind::pixel_shuffle: return pixel_shuffle(img, rng);
    case TransformKind::center_occlusion: return center_occlusion(img, spec.occlusion_fraction);
    case TransformKind::gaussian_noise: return gaussian_noise(img, spec.noise_sigma, rng);
  }
  return img;
}

}  // namespace deyo
