#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "deyo/transforms.hpp"
#include "support.hpp"

using namespace deyo;
using deyo::testing::ramp_image;
using deyo::testing::random_image;

namespace {

std::vector<double> sorted_pixels(const ImageGrid& img) {
  auto v = img.pixels;
  std::sort(v.begin(), v.end());
  return v;
}

}  // namespace

TEST(PatchShuffle, SingleGridIsIdentity) {
  Rng rng(1);
  const auto img = random_image(28, 28, 3, rng);
  EXPECT_EQ(patch_shuffle(img, 1, rng), img);
}

TEST(PatchShuffle, IdentityPermutationIsIdentity) {
  const auto img = ramp_image(8, 8, 2);
  const std::vector<std::size_t> id{0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15};
  EXPECT_EQ(patch_shuffle_with(img, 4, id), img);
}

TEST(PatchShuffle, SwapCornersMatchesHandOracle) {
  // 4x4 single channel, values 0..15 row-major; swap the top-left and
  // bottom-right 2x2 patches.
  ImageGrid img(4, 4, 1);
  for (std::size_t i = 0; i < 16; ++i) img.pixels[i] = static_cast<double>(i);
  const std::vector<std::size_t> perm{3, 1, 2, 0};
  const auto out = patch_shuffle_with(img, 2, perm);
  const std::vector<double> expect{10, 11, 2, 3,   //
                                   14, 15, 6, 7,   //
                                   8, 9, 0, 1,     //
                                   12, 13, 4, 5};
  EXPECT_EQ(out.pixels, expect);
}

TEST(PatchShuffle, IndivisibleDimensionsThrow) {
  Rng rng(2);
  const auto img = random_image(28, 28, 1, rng);
  EXPECT_THROW(patch_shuffle(img, 3, rng), DimensionError);
  EXPECT_THROW(patch_shuffle(img, 0, rng), DimensionError);
  for (std::size_t n : {1u, 2u, 4u, 7u, 14u, 28u}) EXPECT_NO_THROW(patch_shuffle(img, n, rng));
}

TEST(PatchShuffle, DefaultGridDividesColoredDigits) {
  const TransformSpec spec;
  EXPECT_EQ(spec.kind, TransformKind::patch_shuffle);
  EXPECT_EQ(spec.patch_grid, 4u);
  EXPECT_EQ(28 % spec.patch_grid, 0u);
}

TEST(PatchShuffle, PreservesPixelMultisetAndPatchContents) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const auto img = random_image(12, 12, 3, rng);
    const std::size_t n = std::vector<std::size_t>{1, 2, 3, 4, 6}[rng.index(5)];
    const auto out = patch_shuffle(img, n, rng);
    EXPECT_EQ(sorted_pixels(out), sorted_pixels(img));
    // each output patch equals some input patch verbatim
    const std::size_t p = 12 / n;
    for (std::size_t dst = 0; dst < n * n; ++dst) {
      bool found = false;
      for (std::size_t src = 0; src < n * n && !found; ++src) {
        bool same = true;
        for (std::size_t y = 0; y < p && same; ++y)
          for (std::size_t x = 0; x < p && same; ++x)
            for (std::size_t c = 0; c < 3 && same; ++c)
              same = out.at((dst / n) * p + y, (dst % n) * p + x, c) == img.at((src / n) * p + y, (src % n) * p + x, c);
        found = same;
      }
      EXPECT_TRUE(found);
    }
  }
}

TEST(PixelShuffle, ConstantImageUnchanged) {
  Rng rng(4);
  ImageGrid img(5, 5, 3);
  for (std::size_t i = 0; i < img.size(); i += 3) {
    img.pixels[i] = 0.2;
    img.pixels[i + 1] = 0.5;
    img.pixels[i + 2] = 0.9;
  }
  EXPECT_EQ(pixel_shuffle(img, rng), img);
}

TEST(PixelShuffle, ChannelMeansPreservedExactly) {
  Rng rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    const auto img = random_image(7, 9, 3, rng);
    const auto out = pixel_shuffle(img, rng);
    EXPECT_EQ(sorted_pixels(out), sorted_pixels(img));
    const auto a = img.channel_means(), b = out.channel_means();
    // Summation order differs, so compare per-channel sorted sums.
    for (std::size_t c = 0; c < 3; ++c) {
      std::vector<double> va, vb;
      for (std::size_t p = 0; p < 63; ++p) {
        va.push_back(img.pixels[p * 3 + c]);
        vb.push_back(out.pixels[p * 3 + c]);
      }
      std::sort(va.begin(), va.end());
      std::sort(vb.begin(), vb.end());
      EXPECT_EQ(va, vb);
      EXPECT_NEAR(a[c], b[c], 1e-15);
    }
  }
}

TEST(PixelShuffle, ForcedTranspositionMatchesHandOracle) {
  // 2x2, two channels; swap positions 0 and 3.
  ImageGrid img(2, 2, 2);
  img.pixels = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8};
  const std::vector<std::size_t> perm{3, 1, 2, 0};
  const auto out = pixel_shuffle_with(img, perm);
  const std::vector<double> expect{0.7, 0.8, 0.3, 0.4, 0.5, 0.6, 0.1, 0.2};
  EXPECT_EQ(out.pixels, expect);
}

TEST(CenterOcclusion, QuarterOfFourByFourIsCenterBlock) {
  ImageGrid img(4, 4, 1);
  for (std::size_t i = 0; i < 16; ++i) img.pixels[i] = static_cast<double>(i) / 16.0;
  const auto out = center_occlusion(img, 0.25);
  const double mean = 7.5 / 16.0;
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x) {
      const bool center = y >= 1 && y <= 2 && x >= 1 && x <= 2;
      EXPECT_DOUBLE_EQ(out.at(y, x), center ? mean : img.at(y, x)) << y << "," << x;
    }
}

TEST(CenterOcclusion, BorderUnchanged) {
  Rng rng(6);
  const auto img = random_image(28, 28, 3, rng);
  const auto out = center_occlusion(img, 0.25);
  const auto box = occlusion_box(28, 28, 0.25);
  EXPECT_EQ(box.height, 14u);
  EXPECT_EQ(box.top, 7u);
  for (std::size_t y = 0; y < 28; ++y)
    for (std::size_t x = 0; x < 28; ++x) {
      const bool inside = y >= box.top && y < box.top + box.height && x >= box.left && x < box.left + box.width;
      if (inside) continue;
      for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(out.at(y, x, c), img.at(y, x, c));
    }
}

TEST(CenterOcclusion, NearFullCoverageIsConstantAtMean) {
  Rng rng(7);
  const auto img = random_image(4, 4, 1, rng);
  const auto out = center_occlusion(img, 0.999);
  const double m = img.channel_means()[0];
  for (double v : out.pixels) EXPECT_NEAR(v, m, 1e-15);
}

TEST(CenterOcclusion, FractionOutsideOpenIntervalThrows) {
  const ImageGrid img(4, 4, 1);
  EXPECT_THROW(center_occlusion(img, 0.0), ConfigError);
  EXPECT_THROW(center_occlusion(img, 1.0), ConfigError);
}

TEST(GaussianNoise, ZeroSigmaUnchanged) {
  Rng rng(8);
  const auto img = random_image(6, 6, 3, rng);
  EXPECT_EQ(gaussian_noise(img, 0.0, rng), img);
  EXPECT_THROW(gaussian_noise(img, -0.1, rng), ConfigError);
}

TEST(GaussianNoise, OutputsStayInUnitInterval) {
  Rng rng(9);
  const auto img = random_image(10, 10, 3, rng);
  const auto out = gaussian_noise(img, 2.0, rng);
  for (double v : out.pixels) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(GaussianNoise, EmpiricalStdMatchesSigma) {
  Rng rng(10);
  ImageGrid gray(1, 1, 1);
  gray.pixels[0] = 0.5;
  const int n = 10000;
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double v = gaussian_noise(gray, 0.1, rng).pixels[0];
    s += v;
    s2 += v * v;
  }
  const double var = s2 / n - (s / n) * (s / n);
  EXPECT_NEAR(std::sqrt(var), 0.1, 0.005);
}

TEST(Transforms, DeterministicGivenSeed) {
  Rng src(11);
  const auto img = random_image(28, 28, 3, src);
  for (auto kind : {TransformKind::identity, TransformKind::patch_shuffle, TransformKind::pixel_shuffle,
                    TransformKind::center_occlusion, TransformKind::gaussian_noise}) {
    TransformSpec spec;
    spec.kind = kind;
    Rng a(99), b(99);
    EXPECT_EQ(apply_transform(img, spec, a), apply_transform(img, spec, b)) << to_string(kind);
    const auto out = apply_transform(img, spec, a);
    for (double v : out.pixels) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(Transforms, ParseKinds) {
  EXPECT_EQ(parse_transform_kind("patch"), TransformKind::patch_shuffle);
  EXPECT_EQ(parse_transform_kind("pixel_shuffle"), TransformKind::pixel_shuffle);
  EXPECT_EQ(parse_transform_kind("occlusion"), TransformKind::center_occlusion);
  EXPECT_EQ(parse_transform_kind("noise"), TransformKind::gaussian_noise);
  EXPECT_EQ(parse_transform_kind(to_string(TransformKind::identity)), TransformKind::identity);
  EXPECT_THROW(parse_transform_kind("blur"), ConfigError);
}
