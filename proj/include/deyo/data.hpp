#pragma once

// Dataset ingestion (MNIST IDX), the two-class ColoredMNIST construction,
// a procedural fallback with the same class/color coupling, and ordering of
// test samples into scenario streams.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "deyo/errors.hpp"
#include "deyo/numerics.hpp"
#include "deyo/transforms.hpp"

namespace deyo {

/// One test or train example. `group_id = 2 * class_label + color_bit`.
struct LabeledImage {
  ImageGrid image;
  int class_label = 0;
  int group_id = 0;
  int source_digit = 0;

  int color_bit() const noexcept { return group_id % 2; }
  friend bool operator==(const LabeledImage&, const LabeledImage&) = default;
};

struct Batch {
  std::vector<LabeledImage> samples;

  std::size_t size() const noexcept { return samples.size(); }
  bool empty() const noexcept { return samples.empty(); }
};

/// Flattens a set of same-shaped images into an N x (h*w*c) input matrix.
inline Matrix pack_inputs(std::span<const LabeledImage> samples) {
  if (samples.empty()) return {};
  const std::size_t dim = samples.front().image.size();
  Matrix m(samples.size(), dim);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& px = samples[i].image.pixels;
    if (px.size() != dim) throw DimensionError("pack_inputs: images have different sizes");
    std::copy(px.begin(), px.end(), m.row(i).begin());
  }
  return m;
}

inline Matrix pack_inputs(std::span<const ImageGrid> images) {
  if (images.empty()) return {};
  const std::size_t dim = images.front().size();
  Matrix m(images.size(), dim);
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].size() != dim) throw DimensionError("pack_inputs: images have different sizes");
    std::copy(images[i].pixels.begin(), images[i].pixels.end(), m.row(i).begin());
  }
  return m;
}

// ---------------------------------------------------------------------------
// IDX files

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

/// Decoded IDX payload. For images, `values` holds count*rows*cols pixels
/// scaled to [0, 1]; for labels it holds raw label bytes as doubles.
struct IdxArray {
  std::uint32_t magic = 0;
  std::vector<std::uint32_t> dims;
  std::vector<double> values;

  bool is_images() const noexcept { return magic == kIdxImagesMagic; }
  std::size_t count() const noexcept { return dims.empty() ? 0 : dims[0]; }
};

namespace detail {
inline std::uint32_t read_be32(std::span<const std::uint8_t> bytes, std::size_t offset) {
  if (offset + 4 > bytes.size()) throw FormatError("IDX: truncated header", bytes.size());
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}
inline void write_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}
}  // namespace detail

/// Parses a big-endian IDX blob of unsigned bytes: 3-d images (magic 0x803)
/// or 1-d labels (magic 0x801). Anything else is a FormatError.
inline IdxArray parse_idx(std::span<const std::uint8_t> bytes) {
  IdxArray out;
  out.magic = detail::read_be32(bytes, 0);
  std::size_t ndims = 0;
  if (out.magic == kIdxImagesMagic) {
    ndims = 3;
  } else if (out.magic == kIdxLabelsMagic) {
    ndims = 1;
  } else {
    char buf[11];
    std::snprintf(buf, sizeof buf, "0x%08x", out.magic);
    throw FormatError(std::string("IDX: unsupported magic ") + buf, 0);
  }
  std::size_t offset = 4;
  std::size_t payload = 1;
  for (std::size_t d = 0; d < ndims; ++d) {
    out.dims.push_back(detail::read_be32(bytes, offset));
    payload *= out.dims.back();
    offset += 4;
  }
  if (bytes.size() - offset != payload) {
    throw FormatError("IDX: header declares " + std::to_string(payload) + " payload bytes but " +
                          std::to_string(bytes.size() - offset) + " are present",
                      offset);
  }
  out.values.resize(payload);
  const double scale = out.is_images() ? 255.0 : 1.0;
  for (std::size_t i = 0; i < payload; ++i) out.values[i] = bytes[offset + i] / scale;
  return out;
}

inline std::vector<std::uint8_t> write_idx_images(std::span<const ImageGrid> images) {
  std::vector<std::uint8_t> out;
  detail::write_be32(out, kIdxImagesMagic);
  const std::uint32_t rows = images.empty() ? 0 : static_cast<std::uint32_t>(images[0].height);
  const std::uint32_t cols = images.empty() ? 0 : static_cast<std::uint32_t>(images[0].width);
  detail::write_be32(out, static_cast<std::uint32_t>(images.size()));
  detail::write_be32(out, rows);
  detail::write_be32(out, cols);
  for (const auto& img : images) {
    if (img.height != rows || img.width != cols || img.channels != 1)
      throw DimensionError("write_idx_images: images must share one grayscale shape");
    for (double v : img.pixels)
      out.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  }
  return out;
}

inline std::vector<std::uint8_t> write_idx_labels(std::span<const int> labels) {
  std::vector<std::uint8_t> out;
  detail::write_be32(out, kIdxLabelsMagic);
  detail::write_be32(out, static_cast<std::uint32_t>(labels.size()));
  for (int l : labels) out.push_back(static_cast<std::uint8_t>(l));
  return out;
}

/// Splits a decoded image array into grayscale grids.
inline std::vector<ImageGrid> idx_to_images(const IdxArray& arr) {
  if (!arr.is_images()) throw FormatError("IDX: expected an image file", 0);
  const std::size_t n = arr.dims[0], h = arr.dims[1], w = arr.dims[2];
  std::vector<ImageGrid> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    ImageGrid g(h, w, 1);
    std::copy_n(arr.values.begin() + static_cast<std::ptrdiff_t>(i * h * w), h * w, g.pixels.begin());
    out.push_back(std::move(g));
  }
  return out;
}

inline std::vector<int> idx_to_labels(const IdxArray& arr) {
  if (arr.magic != kIdxLabelsMagic) throw FormatError("IDX: expected a label file", 0);
  std::vector<int> out(arr.values.size());
  std::transform(arr.values.begin(), arr.values.end(), out.begin(),
                 [](double v) { return static_cast<int>(v); });
  return out;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct MnistSplit {
  std::vector<ImageGrid> images;
  std::vector<int> labels;
};

inline constexpr const char* kDataRootEnv = "DEYO_DATA_ROOT";

/// Loads `{train,t10k}-{images-idx3,labels-idx1}-ubyte` from `root`.
inline MnistSplit load_mnist_split(const std::filesystem::path& root, bool train) {
  const std::string prefix = train ? "train" : "t10k";
  const auto images_path = root / (prefix + "-images-idx3-ubyte");
  const auto labels_path = root / (prefix + "-labels-idx1-ubyte");
  std::vector<std::string> missing;
  for (const auto& p : {images_path, labels_path})
    if (!std::filesystem::exists(p)) missing.push_back(p.string());
  if (!missing.empty()) {
    std::string msg = "MNIST files not found; expected:";
    for (const auto& m : missing) msg += "\n  " + m;
    msg += "\nset data.root or " + std::string(kDataRootEnv) + ", or use dataset=synth";
    throw DataError(msg);
  }
  MnistSplit split;
  split.images = idx_to_images(parse_idx(read_file_bytes(images_path)));
  split.labels = idx_to_labels(parse_idx(read_file_bytes(labels_path)));
  if (split.images.size() != split.labels.size())
    throw DataError("MNIST image/label counts differ under " + root.string());
  return split;
}

// ---------------------------------------------------------------------------
// ColoredMNIST

enum class Split { train, test };

inline constexpr double kTrainColorFlip = 0.2;
inline constexpr double kTestColorFlip = 0.9;

inline double default_color_flip(Split split) noexcept {
  return split == Split::train ? kTrainColorFlip : kTestColorFlip;
}

inline int digit_to_class(int digit) noexcept { return digit <= 4 ? 0 : 1; }

/// Paints a grayscale digit into the red channel (color bit 1) or the green
/// channel (color bit 0) of a three-channel image.
inline ImageGrid colorize(const ImageGrid& gray, int color_bit) {
  ImageGrid out(gray.height, gray.width, 3);
  const std::size_t channel = color_bit == 1 ? 0 : 1;
  for (std::size_t p = 0; p < gray.height * gray.width; ++p)
    out.pixels[p * 3 + channel] = gray.pixels[p * gray.channels];
  return out;
}

/// Two-class colored digits. The color bit agrees with the class except with
/// probability `flip_p` (0.2 for train, 0.9 for test unless overridden).
inline std::vector<LabeledImage> build_colored_mnist(std::span<const ImageGrid> digits,
                                                     std::span<const int> labels, Split split,
                                                     Rng& rng,
                                                     std::optional<double> flip_p = std::nullopt) {
  if (digits.size() != labels.size())
    throw DimensionError("build_colored_mnist: digit and label counts differ");
  const double p = flip_p.value_or(default_color_flip(split));
  std::vector<LabeledImage> out;
  out.reserve(digits.size());
  for (std::size_t i = 0; i < digits.size(); ++i) {
    const int cls = digit_to_class(labels[i]);
    const int color = cls ^ static_cast<int>(rng.bernoulli(p));
    out.push_back({colorize(digits[i], color), cls, 2 * cls + color, labels[i]});
  }
  return out;
}

inline std::array<std::size_t, 4> group_counts(std::span<const LabeledImage> samples) {
  std::array<std::size_t, 4> counts{};
  for (const auto& s : samples) ++counts.at(static_cast<std::size_t>(s.group_id));
  return counts;
}

// ---------------------------------------------------------------------------
// Procedural fallback

namespace detail {

inline void stamp_segment(ImageGrid& g, double x0, double y0, double x1, double y1,
                          double thickness, double intensity) {
  const double dx = x1 - x0, dy = y1 - y0;
  const double len2 = dx * dx + dy * dy;
  for (std::size_t y = 0; y < g.height; ++y) {
    for (std::size_t x = 0; x < g.width; ++x) {
      const double px = static_cast<double>(x), py = static_cast<double>(y);
      double t = len2 > 0 ? ((px - x0) * dx + (py - y0) * dy) / len2 : 0.0;
      t = std::clamp(t, 0.0, 1.0);
      const double d = std::hypot(px - (x0 + t * dx), py - (y0 + t * dy));
      const double v = std::clamp(0.5 * thickness + 0.5 - d, 0.0, 1.0) * intensity;
      g.at(y, x) = std::max(g.at(y, x), v);
    }
  }
}

inline void stamp_ring(ImageGrid& g, double cx, double cy, double rx, double ry,
                       double thickness, double intensity) {
  for (std::size_t y = 0; y < g.height; ++y) {
    for (std::size_t x = 0; x < g.width; ++x) {
      const double ux = (static_cast<double>(x) - cx) / rx;
      const double uy = (static_cast<double>(y) - cy) / ry;
      const double r = std::hypot(ux, uy);
      // radial distance to the ellipse, in pixels, along the mean radius
      const double d = std::abs(r - 1.0) * 0.5 * (rx + ry);
      const double v = std::clamp(0.5 * thickness + 0.5 - d, 0.0, 1.0) * intensity;
      g.at(y, x) = std::max(g.at(y, x), v);
    }
  }
}

}  // namespace detail

/// Knobs for the procedural glyphs. Defaults are tuned so a small MLP learns
/// both the color shortcut and the stroke shape at desk scale.
struct SynthOptions {
  std::size_t size = 28;
  double jitter = 3.0;        // max center offset in pixels
  double thickness = 2.0;
  std::size_t clutter = 1;    // class-independent stray strokes per glyph

  /// Wider placement, heavier strokes and more clutter. Shape stays fully
  /// predictive but is slower to learn than color, so a pretrained model
  /// leans on the color shortcut.
  static SynthOptions hard() { return {28, 8.0, 3.0, 6}; }
};

/// Grayscale glyph: class 0 draws a closed ring, class 1 an open cross.
inline ImageGrid synth_glyph(int cls, Rng& rng, const SynthOptions& opt = {}) {
  ImageGrid g(opt.size, opt.size, 1);
  const double c = 0.5 * static_cast<double>(opt.size - 1);
  const double cx = c + rng.uniform(-opt.jitter, opt.jitter);
  const double cy = c + rng.uniform(-opt.jitter, opt.jitter);
  const double intensity = rng.uniform(0.7, 1.0);
  const double thick = opt.thickness * rng.uniform(0.8, 1.2);
  const double scale = static_cast<double>(opt.size) / 28.0;
  if (cls == 0) {
    detail::stamp_ring(g, cx, cy, scale * rng.uniform(4.5, 7.5), scale * rng.uniform(5.5, 8.5),
                       thick, intensity);
  } else {
    const double a = rng.uniform(0.0, M_PI);
    const double b = a + 0.5 * M_PI + rng.uniform(-0.35, 0.35);
    for (double ang : {a, b}) {
      const double half = scale * rng.uniform(6.0, 9.0);
      detail::stamp_segment(g, cx - half * std::cos(ang), cy - half * std::sin(ang),
                            cx + half * std::cos(ang), cy + half * std::sin(ang), thick, intensity);
    }
  }
  const double lim = static_cast<double>(opt.size - 1);
  for (std::size_t k = 0; k < opt.clutter; ++k) {
    const double x0 = rng.uniform(0.0, lim), y0 = rng.uniform(0.0, lim);
    const double ang = rng.uniform(0.0, 2.0 * M_PI);
    const double len = scale * rng.uniform(3.0, 6.0);
    detail::stamp_segment(g, x0, y0, x0 + len * std::cos(ang), y0 + len * std::sin(ang),
                          thick, intensity * rng.uniform(0.5, 1.0));
  }
  return g;
}

/// Procedural stand-in for ColoredMNIST. Classes are balanced in expectation;
/// `source_digit` is drawn from the digits that map to the sampled class.
inline std::vector<LabeledImage> synth_fallback(std::size_t n, Rng& rng, double flip_p,
                                                const SynthOptions& opt = {}) {
  if (n == 0) throw ConfigError("synth_fallback: n must be >= 1");
  std::vector<LabeledImage> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int cls = static_cast<int>(rng.bernoulli(0.5));
    const int digit = 5 * cls + static_cast<int>(rng.index(5));
    const int color = cls ^ static_cast<int>(rng.bernoulli(flip_p));
    out.push_back({colorize(synth_glyph(cls, rng, opt), color), cls, 2 * cls + color, digit});
  }
  return out;
}

inline std::vector<LabeledImage> synth_fallback(std::size_t n, Rng& rng, Split split,
                                                const SynthOptions& opt = {}) {
  return synth_fallback(n, rng, default_color_flip(split), opt);
}

// ---------------------------------------------------------------------------
// Scenario streams

enum class ScenarioKind { mild, label_shift, batch_size_1, mixed };

inline std::string_view to_string(ScenarioKind k) noexcept {
  switch (k) {
    case ScenarioKind::mild: return "mild";
    case ScenarioKind::label_shift: return "label_shift";
    case ScenarioKind::batch_size_1: return "batch_size_1";
    case ScenarioKind::mixed: return "mixed";
  }
  return "mild";
}

inline ScenarioKind parse_scenario_kind(std::string_view s) {
  if (s == "mild") return ScenarioKind::mild;
  if (s == "label_shift" || s == "label-shift") return ScenarioKind::label_shift;
  if (s == "batch_size_1" || s == "bs1") return ScenarioKind::batch_size_1;
  if (s == "mixed") return ScenarioKind::mixed;
  throw ConfigError("unknown scenario kind '" + std::string(s) + "'");
}

struct MixComponent {
  TransformSpec transform;
  double fraction = 1.0;
};

struct ScenarioSpec {
  ScenarioKind kind = ScenarioKind::mild;
  std::size_t batch_size = 64;
  std::vector<MixComponent> mix;  // used by `mixed`
  std::uint64_t seed = 0;
  /// Batch-norm needs at least two samples per batch; a trailing singleton
  /// batch is folded into its predecessor when set.
  bool merge_singleton_tail = true;
};

namespace detail {
inline std::vector<Batch> chunk(std::vector<LabeledImage> ordered, std::size_t batch_size,
                                bool merge_singleton_tail) {
  std::vector<Batch> out;
  for (std::size_t i = 0; i < ordered.size(); i += batch_size) {
    Batch b;
    const std::size_t end = std::min(ordered.size(), i + batch_size);
    b.samples.assign(std::make_move_iterator(ordered.begin() + static_cast<std::ptrdiff_t>(i)),
                     std::make_move_iterator(ordered.begin() + static_cast<std::ptrdiff_t>(end)));
    out.push_back(std::move(b));
  }
  if (merge_singleton_tail && batch_size > 1 && out.size() >= 2 && out.back().size() == 1) {
    auto tail = std::move(out.back().samples.front());
    out.pop_back();
    out.back().samples.push_back(std::move(tail));
  }
  return out;
}
}  // namespace detail

/// Orders test samples into batches for one scenario.
///
/// mild: global shuffle. label_shift: classes in random order, each class
/// contiguous and shuffled internally (imbalance ratio infinity).
/// batch_size_1: mild order with single-sample batches. mixed: each sample
/// gets a transform drawn by the mix fractions, then mild order. The order
/// shuffle always happens first so a mix of pure identity reproduces mild.
inline std::vector<Batch> make_stream(std::vector<LabeledImage> samples, const ScenarioSpec& spec) {
  if (samples.empty()) throw ConfigError("make_stream: no samples");
  Rng rng(spec.seed);
  std::size_t batch_size = spec.batch_size;
  if (batch_size == 0) throw ConfigError("make_stream: batch_size must be >= 1");

  switch (spec.kind) {
    case ScenarioKind::mild:
    case ScenarioKind::mixed:
      rng.shuffle(std::span<LabeledImage>(samples));
      break;
    case ScenarioKind::batch_size_1:
      rng.shuffle(std::span<LabeledImage>(samples));
      batch_size = 1;
      break;
    case ScenarioKind::label_shift: {
      int max_class = 0;
      for (const auto& s : samples) max_class = std::max(max_class, s.class_label);
      std::vector<std::vector<LabeledImage>> by_class(static_cast<std::size_t>(max_class) + 1);
      for (auto& s : samples) by_class[static_cast<std::size_t>(s.class_label)].push_back(std::move(s));
      auto order = rng.permutation(by_class.size());
      samples.clear();
      for (std::size_t c : order) {
        rng.shuffle(std::span<LabeledImage>(by_class[c]));
        std::move(by_class[c].begin(), by_class[c].end(), std::back_inserter(samples));
      }
      break;
    }
  }

  if (spec.kind == ScenarioKind::mixed) {
    if (spec.mix.empty()) throw ConfigError("mixed scenario needs at least one mix component");
    double total = 0.0;
    for (const auto& m : spec.mix) {
      if (m.fraction < 0.0) throw ConfigError("mix fractions must be >= 0");
      total += m.fraction;
    }
    if (std::abs(total - 1.0) > 1e-9) throw ConfigError("mix fractions must sum to 1");
    for (auto& s : samples) {
      const double u = rng.uniform();
      double acc = 0.0;
      std::size_t pick = spec.mix.size() - 1;
      for (std::size_t k = 0; k < spec.mix.size(); ++k) {
        acc += spec.mix[k].fraction;
        if (u < acc) {
          pick = k;
          break;
        }
      }
      s.image = apply_transform(s.image, spec.mix[pick].transform, rng);
    }
  }
  return detail::chunk(std::move(samples), batch_size, spec.merge_singleton_tail);
}

}  // namespace deyo
