#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "atlas_replay/datagen.hpp"
#include "atlas_replay/image.hpp"
#include "fixtures.hpp"

using namespace atlas_replay;

namespace {

Image from_rows(std::vector<std::vector<float>> rows) {
  Image img(rows.size(), rows.front().size());
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) img.at(y, x) = rows[y][x];
  return img;
}

double mass(const Image& img) {
  double s = 0;
  for (float v : img.pixels) s += v;
  return s;
}

// Pools every pixel of the first `count` cases of a domain into one histogram.
Histogram pooled_histogram(const std::string& tag, std::size_t count) {
  Histogram h;
  const auto domain = default_domain(tag);
  for (std::size_t i = 0; i < count; ++i) {
    auto part = histogram64(render_case(domain, 64, 11, i).scan);
    for (std::size_t b = 0; b < Histogram::kBins; ++b) h.bins[b] += part.bins[b];
    h.total += part.total;
  }
  return h;
}

}  // namespace

TEST(ApplyRigid, IdentityNearestIsBitIdentical) {
  auto img = fixtures::blob_image(32, 3);
  EXPECT_EQ(apply_rigid(img, RigidTransform::identity(), Interpolation::nearest), img);
}

TEST(ApplyRigid, TranslationMovesImpulse) {
  Image img(9, 9);
  img.at(4, 2) = 1.0f;
  for (auto interp : {Interpolation::nearest, Interpolation::bilinear}) {
    auto out = apply_rigid(img, {0.0, 3.0, 0.0}, interp);
    Image expect(9, 9);
    expect.at(4, 5) = 1.0f;
    EXPECT_EQ(out, expect);
  }
}

TEST(ApplyRigid, QuarterTurnMatchesHandRotation) {
  const Image in = from_rows({{1, 2, 3, 4, 5},
                              {6, 0, 0, 0, 0},
                              {7, 0, 9, 0, 0},
                              {0, 0, 0, 0, 8},
                              {0, 0, 0, 0, 0}});
  // Each row of the expected output is an input column read bottom to top.
  const Image expect = from_rows({{0, 0, 7, 6, 1},
                                  {0, 0, 0, 0, 2},
                                  {0, 0, 9, 0, 3},
                                  {0, 0, 0, 0, 4},
                                  {0, 8, 0, 0, 5}});
  EXPECT_EQ(apply_rigid(in, {radians(90.0), 0.0, 0.0}, Interpolation::nearest), expect);
}

TEST(ApplyRigid, OutsideSamplesReadZero) {
  Image img(8, 8, 1.0f);
  auto out = apply_rigid(img, {0.0, 0.0, 4.0}, Interpolation::nearest);
  for (std::size_t x = 0; x < 8; ++x) {
    EXPECT_EQ(out.at(0, x), 0.0f);
    EXPECT_EQ(out.at(7, x), 1.0f);
  }
}

TEST(ApplyRigid, BilinearPreservesMaskMassAtSmallTransforms) {
  const auto domain = default_domain("A");
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> ang(-5.0, 5.0), sh(-3.0, 3.0);
  for (std::size_t i = 0; i < 10; ++i) {
    const Image mask = render_case(domain, 64, 5, i).mask;
    const RigidTransform t{radians(ang(rng)), sh(rng), sh(rng)};
    const double m0 = mass(mask), m1 = mass(apply_rigid(mask, t, Interpolation::bilinear));
    EXPECT_NEAR(m1, m0, 0.05 * m0) << "case " << i;
  }
}

TEST(RigidTransform, ComposeWithInverseIsIdentity) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> ang(-3.0, 3.0), sh(-20.0, 20.0);
  for (int i = 0; i < 20; ++i) {
    const RigidTransform t{ang(rng), sh(rng), sh(rng)};
    for (const auto& id : {compose(t, inverse(t)), compose(inverse(t), t)}) {
      EXPECT_NEAR(id.angle, 0.0, 1e-6);
      EXPECT_NEAR(id.tx, 0.0, 1e-6);
      EXPECT_NEAR(id.ty, 0.0, 1e-6);
    }
  }
}

TEST(RigidTransform, ComposeMatchesSequentialApplication) {
  auto img = fixtures::blob_image(32, 8);
  const RigidTransform a{radians(7.0), 2.0, -1.0}, b{radians(-4.0), -3.0, 2.5};
  auto twice = apply_rigid(apply_rigid(img, b, Interpolation::bilinear), a, Interpolation::bilinear);
  auto once = apply_rigid(img, compose(a, b), Interpolation::bilinear);
  // Double resampling blurs; compare away from the border with a loose bound.
  double err = 0;
  for (std::size_t y = 8; y < 24; ++y)
    for (std::size_t x = 8; x < 24; ++x) err = std::max(err, static_cast<double>(std::abs(twice.at(y, x) - once.at(y, x))));
  EXPECT_LT(err, 0.08);
}

TEST(RigidAlign, IdenticalImagesGiveIdentity) {
  auto img = render_case(default_domain("A"), 64, 1, 0).scan;
  auto t = rigid_align(img, img);
  EXPECT_LE(std::abs(degrees(t.angle)), 0.25);
  EXPECT_LE(std::abs(t.tx), 0.25);
  EXPECT_LE(std::abs(t.ty), 0.25);
}

TEST(RigidAlign, RecoversTranslation) {
  auto moving = render_case(default_domain("B"), 64, 2, 3).scan;
  auto fixed = apply_rigid(moving, {0.0, 5.0, -3.0}, Interpolation::bilinear);
  auto t = rigid_align(moving, fixed);
  EXPECT_NEAR(t.tx, 5.0, 0.5);
  EXPECT_NEAR(t.ty, -3.0, 0.5);
  EXPECT_NEAR(degrees(t.angle), 0.0, 1.0);
}

TEST(RigidAlign, RecoversRotation) {
  auto moving = render_case(default_domain("C"), 64, 2, 4).scan;
  auto fixed = apply_rigid(moving, {radians(10.0), 0.0, 0.0}, Interpolation::bilinear);
  auto t = rigid_align(moving, fixed);
  EXPECT_NEAR(degrees(t.angle), 10.0, 1.0);
}

TEST(RigidAlign, RecoversRandomTransformsOverSeeds) {
  const char* tags[] = {"A", "B", "C", "D"};
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    std::mt19937_64 rng(seed * 7919);
    std::uniform_real_distribution<double> ang(-15.0, 15.0), sh(-0.2 * 64, 0.2 * 64);
    // Keep |t| within 20% of the width as a vector length.
    double tx = sh(rng), ty = sh(rng);
    const double norm = std::hypot(tx, ty);
    if (norm > 0.2 * 64) tx *= 0.2 * 64 / norm, ty *= 0.2 * 64 / norm;
    const RigidTransform truth{radians(ang(rng)), tx, ty};
    auto moving = render_case(default_domain(tags[seed % 4]), 64, seed, seed).scan;
    auto fixed = apply_rigid(moving, truth, Interpolation::bilinear);
    auto t = rigid_align(moving, fixed);
    EXPECT_NEAR(degrees(t.angle), degrees(truth.angle), 1.0) << "seed " << seed;
    EXPECT_NEAR(t.tx, truth.tx, 0.5) << "seed " << seed;
    EXPECT_NEAR(t.ty, truth.ty, 0.5) << "seed " << seed;
  }
}

TEST(RigidAlign, ConstantInputIsDegenerate) {
  Image flat(32, 32, 0.5f);
  auto img = fixtures::blob_image(32, 1);
  EXPECT_THROW(rigid_align(flat, img), DegenerateInput);
  EXPECT_THROW(rigid_align(img, flat), DegenerateInput);
}

TEST(RigidAlign, GridMismatchIsInvalidShape) {
  EXPECT_THROW(rigid_align(fixtures::blob_image(32, 1), fixtures::blob_image(16, 1)), InvalidShape);
}

TEST(NormalizeIntensity, FullRangeImageUnchanged) {
  auto img = fixtures::blob_image(16, 2);
  EXPECT_EQ(normalize_intensity(img), img);
}

TEST(NormalizeIntensity, AnalyticRescale) {
  Image img(1, 3, std::vector<float>{2, 4, 6});
  EXPECT_EQ(normalize_intensity(img).pixels, (std::vector<float>{0.0f, 0.5f, 1.0f}));
}

TEST(NormalizeIntensity, ConstantMapsToZeros) {
  EXPECT_EQ(normalize_intensity(Image(4, 4, 7.0f)), Image(4, 4, 0.0f));
}

TEST(Histogram64, AllZeroImage) {
  auto h = histogram64(Image(10, 10, 0.0f));
  EXPECT_EQ(h.bins[0], 100u);
  EXPECT_EQ(h.total, 100u);
}

TEST(Histogram64, ValueOneLandsInLastBin) {
  auto h = histogram64(Image(1, 1, 1.0f));
  EXPECT_EQ(h.bins[63], 1u);
}

TEST(Histogram64, BinEdges) {
  Image img(1, 3, std::vector<float>{1.0f / 64.0f, 0.5f, 63.0f / 64.0f - 1e-6f});
  auto h = histogram64(img);
  EXPECT_EQ(h.bins[1], 1u);
  EXPECT_EQ(h.bins[32], 1u);
  EXPECT_EQ(h.bins[62], 1u);
}

TEST(Histogram64, CountsSumToPixelCount) {
  auto img = fixtures::blob_image(24, 6);
  auto h = histogram64(img);
  std::uint64_t s = 0;
  for (auto b : h.bins) s += b;
  EXPECT_EQ(s, h.total);
  EXPECT_EQ(h.total, img.size());
}

TEST(Histogram64, OutOfRangeIsContractViolation) {
  EXPECT_THROW(histogram64(Image(1, 1, 1.5f)), ContractViolation);
  EXPECT_THROW(histogram64(Image(1, 1, -0.1f)), ContractViolation);
  EXPECT_THROW(histogram64(Image(1, 1, std::nanf(""))), ContractViolation);
}

TEST(Histogram64, DomainsAAndBDiffer) {
  auto a = pooled_histogram("A", 10), b = pooled_histogram("B", 10);
  EXPECT_GT(histogram_l1(a, b), 0.2);
  EXPECT_NEAR(histogram_l1(a, a), 0.0, 1e-12);
}

TEST(GlobalNcc, KnownValues) {
  auto img = fixtures::blob_image(16, 9);
  EXPECT_NEAR(global_ncc(img, img), 1.0, 1e-9);
  Image neg(16, 16);
  for (std::size_t i = 0; i < img.size(); ++i) neg.pixels[i] = 1.0f - img.pixels[i];
  EXPECT_NEAR(global_ncc(img, neg), -1.0, 1e-6);
  EXPECT_EQ(global_ncc(img, Image(16, 16, 0.3f)), 0.0);
}
