#include <gtest/gtest.h>

#include <random>

#include "priorseg/core.hpp"
#include "test_util.hpp"

using namespace priorseg;
using priorseg::testing::random_labels;

TEST(OnehotEncode, SinglePixelClassTwo) {
  LabelMap m(1, 1);
  m.set(0, 0, 2);
  const auto e = onehot_encode(m);
  const float expected[] = {0, 0, 1, 0, 0, 0};
  for (int k = 0; k < kNumClasses; ++k) EXPECT_EQ(e(0, 0, k), expected[k]);
}

TEST(OnehotEncode, AllBackground) {
  const auto e = onehot_encode(LabelMap(4, 4));
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c) {
      EXPECT_EQ(e(r, c, 0), 1.0f);
      for (int k = 1; k < kNumClasses; ++k) EXPECT_EQ(e(r, c, k), 0.0f);
    }
}

TEST(OnehotEncode, MatchesPerPixelLoopAndSumsToOne) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const auto m = random_labels(8, 8, rng);
    const auto e = onehot_encode<double>(m);
    for (std::size_t r = 0; r < 8; ++r)
      for (std::size_t c = 0; c < 8; ++c) {
        double sum = 0;
        for (int k = 0; k < kNumClasses; ++k) {
          EXPECT_EQ(e(r, c, k), m(r, c) == k ? 1.0 : 0.0);
          sum += e(r, c, k);
        }
        EXPECT_EQ(sum, 1.0);
      }
    EXPECT_EQ(onehot_decode(e), m);
  }
}

TEST(OnehotDecode, ArgmaxAndLowestIndexTie) {
  Array3<float> p(1, 2, kNumClasses, 0.0f);
  p(0, 0, 0) = 0.2f;
  p(0, 0, 1) = 0.2f;
  p(0, 0, 2) = 0.6f;
  p(0, 1, 0) = 0.5f;
  p(0, 1, 1) = 0.5f;
  const auto m = onehot_decode(p);
  EXPECT_EQ(m(0, 0), 2);
  EXPECT_EQ(m(0, 1), 0);
}

TEST(OnehotDecode, RejectsNonFiniteAndWrongChannelCount) {
  Array3<float> p(2, 2, kNumClasses, 0.0f);
  p(1, 0, 3) = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(onehot_decode(p), Error);
  EXPECT_THROW(onehot_decode(Array3<float>(2, 2, 5)), Error);
}

TEST(LabelMapTest, RejectsOutOfRangeClass) {
  Array2<std::uint8_t> a(2, 3, 0);
  a(1, 2) = 6;
  try {
    LabelMap m(a);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("(1,2)"), std::string::npos);
  }
  LabelMap ok(2, 2);
  EXPECT_THROW(ok.set(0, 0, 9), Error);
}

TEST(NormalizeIntensity, LinearRescale) {
  Array2<float> s(1, 3);
  s.data = {0, 50, 100};
  const auto n = normalize_intensity(s);
  EXPECT_FLOAT_EQ(n.data[0], 0.0f);
  EXPECT_FLOAT_EQ(n.data[1], 0.5f);
  EXPECT_FLOAT_EQ(n.data[2], 1.0f);
}

TEST(NormalizeIntensity, ConstantSliceGivesZeros) {
  const auto n = normalize_intensity(Array2<float>(5, 4, 7.3f));
  for (float v : n.data) EXPECT_EQ(v, 0.0f);
}

TEST(NormalizeIntensity, RangeIsUnitAndIdempotent) {
  std::mt19937_64 rng(9);
  std::normal_distribution<float> d(40.0f, 25.0f);
  for (int t = 0; t < 20; ++t) {
    Array2<float> s(17, 23);
    for (auto& v : s.data) v = d(rng);
    const auto n = normalize_intensity(s);
    EXPECT_EQ(*std::min_element(n.data.begin(), n.data.end()), 0.0f);
    EXPECT_EQ(*std::max_element(n.data.begin(), n.data.end()), 1.0f);
    EXPECT_EQ(normalize_intensity(n), n);
  }
}

namespace {
ChannelStack ramp_stack(std::size_t rows, std::size_t cols, std::size_t nc) {
  ChannelStack s;
  s.channels = Array3<float>(rows, cols, nc);
  for (std::size_t i = 0; i < s.channels.size(); ++i) s.channels.data[i] = static_cast<float>(i);
  return s;
}
}  // namespace

TEST(ExtractPatch, WholeSliceAtOrigin) {
  std::mt19937_64 rng(1);
  const auto stack = ramp_stack(64, 64, 4);
  const auto target = random_labels(64, 64, rng);
  const auto p = extract_patch(stack, target, {0, 0});
  EXPECT_EQ(p.data, stack.channels);
  EXPECT_EQ(p.target, target);
}

TEST(ExtractPatch, OffsetWindowMatchesElementwise) {
  std::mt19937_64 rng(2);
  const auto stack = ramp_stack(128, 128, 3);
  const auto target = random_labels(128, 128, rng);
  const auto p = extract_patch(stack, target, {10, 20});
  for (std::size_t r = 0; r < 64; ++r)
    for (std::size_t c = 0; c < 64; ++c) {
      for (std::size_t k = 0; k < 3; ++k) ASSERT_EQ(p.data(r, c, k), stack.channels(10 + r, 20 + c, k));
      ASSERT_EQ(p.target(r, c), target(10 + r, 20 + c));
    }
}

TEST(ExtractPatch, OutOfBoundsOriginFails) {
  std::mt19937_64 rng(3);
  EXPECT_THROW(extract_patch(ramp_stack(128, 128, 3), random_labels(128, 128, rng), {100, 100}), Error);
}

TEST(ExtractPatch, TilingReconstructsSlice) {
  std::mt19937_64 rng(4);
  const auto stack = ramp_stack(128, 192, 4);
  const auto target = random_labels(128, 192, rng);
  Array3<float> rebuilt(128, 192, 4, -1.0f);
  for (std::size_t r0 = 0; r0 < 128; r0 += 64)
    for (std::size_t c0 = 0; c0 < 192; c0 += 64) {
      const auto p = extract_patch(stack, target, {r0, c0});
      for (std::size_t r = 0; r < 64; ++r)
        for (std::size_t c = 0; c < 64; ++c)
          for (std::size_t k = 0; k < 4; ++k) rebuilt(r0 + r, c0 + c, k) = p.data(r, c, k);
    }
  EXPECT_EQ(rebuilt, stack.channels);
}

TEST(VolumeValidation, ShapeSpacingAndLabelChecks) {
  Volume v;
  v.subject_id = "s";
  v.modalities[Modality::T1] = Array3<float>(2, 3, 4);
  v.modalities[Modality::T1IR] = Array3<float>(2, 3, 4);
  EXPECT_NO_THROW(validate(v));
  v.modalities[Modality::T2FLAIR] = Array3<float>(2, 3, 5);
  EXPECT_THROW(validate(v), Error);
  v.modalities[Modality::T2FLAIR] = Array3<float>(2, 3, 4);
  v.labels = Array3<std::uint8_t>(2, 3, 4, 0);
  v.labels->data[5] = 6;
  EXPECT_THROW(validate(v), Error);
  v.labels->data[5] = 5;
  EXPECT_NO_THROW(validate(v));
  v.spacing[1] = 0.0;
  EXPECT_THROW(validate(v), Error);
}

TEST(PriorValue, RescalesClassIndex) {
  EXPECT_EQ(prior_value(0), 0.0f);
  EXPECT_EQ(prior_value(5), 1.0f);
  for (std::uint8_t k = 0; k < kNumClasses; ++k)
    EXPECT_EQ(std::lround(prior_value(k) * (kNumClasses - 1)), k);
}

TEST(Palette, FigureGrays) {
  EXPECT_EQ(kPalette[0].gray, 0);
  EXPECT_EQ(kPalette[3].gray, 255);
  EXPECT_LT(kPalette[1].gray, kPalette[2].gray);
  EXPECT_LT(kPalette[2].gray, kPalette[3].gray);
}
