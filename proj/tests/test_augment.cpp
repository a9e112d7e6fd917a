#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "cekd/augment.hpp"

namespace cekd {
namespace {

Tensor random_image(RngStream& rng, std::size_t c, std::size_t h, std::size_t w) {
  Tensor t({c, h, w});
  for (double& v : t.values()) v = rng.uniform();
  return t;
}

SemanticMap uniform_map(std::size_t h, std::size_t w) {
  return semantic_map(Tensor({h, w}, 1.0));
}

TEST(MixUp, Endpoint) {
  RngStream rng(1);
  const Tensor a = random_image(rng, 3, 5, 4), b = random_image(rng, 3, 5, 4);
  const MixedSample m = mixup(a, b, 1.0);
  EXPECT_EQ(m.image, a);
  EXPECT_EQ(m.w_a, 1.0);
  EXPECT_EQ(m.w_b, 0.0);
}

TEST(MixUp, ConstantHalfway) {
  const MixedSample m = mixup(Tensor({1, 3, 3}, 0.0), Tensor({1, 3, 3}, 200.0), 0.5);
  for (double v : m.image.values()) EXPECT_EQ(v, 100.0);
  EXPECT_EQ(m.w_a, 0.5);
  EXPECT_EQ(m.w_b, 0.5);
}

TEST(MixUp, ElementwiseRecomputation) {
  RngStream rng(2);
  const Tensor a = random_image(rng, 2, 6, 6), b = random_image(rng, 2, 6, 6);
  const MixedSample m = mixup(a, b, 0.3);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(m.image[i], 0.3 * a[i] + 0.7 * b[i], 1e-12);
}

TEST(MixUp, ShapeMismatchThrows) {
  EXPECT_THROW(mixup(Tensor({1, 2, 2}), Tensor({1, 2, 3}), 0.5), std::invalid_argument);
}

TEST(MixUp, SwapSymmetry) {
  RngStream rng(3);
  const Tensor a = random_image(rng, 1, 4, 4), b = random_image(rng, 1, 4, 4);
  const MixedSample m = mixup(a, b, 0.25), r = mixup(b, a, 0.75);
  EXPECT_LE(max_abs_diff(m.image, r.image), 1e-15);
  EXPECT_EQ(m.w_a, r.w_b);
  EXPECT_EQ(m.w_b, r.w_a);
}

TEST(Box, EmptyAndFull) {
  RngStream rng(4);
  for (int i = 0; i < 50; ++i) {
    const BoxMask empty = sample_box(9, 7, 0.0, rng);
    EXPECT_TRUE(empty.empty());
    EXPECT_EQ(empty.area_ratio(9, 7), 0.0);
    const BoxMask full = sample_box(9, 7, 1.0, rng);
    EXPECT_EQ(full, (BoxMask{0, 0, 9, 7}));
    EXPECT_EQ(full.area_ratio(9, 7), 1.0);
  }
}

TEST(Box, QuarterUnclipped) {
  const BoxMask b = box_at(8, 8, 0.25, 4, 4);
  EXPECT_EQ(b.height(), 4u);
  EXPECT_EQ(b.width(), 4u);
  EXPECT_EQ(b.area_ratio(8, 8), 0.25);
}

TEST(Box, ClippedAtCorner) {
  const BoxMask b = box_at(8, 8, 0.25, 0, 0);
  EXPECT_EQ(b, (BoxMask{0, 0, 2, 2}));
  EXPECT_EQ(b.area_ratio(8, 8), 4.0 / 64.0);
}

TEST(CutMix, EmptyAndFullBox) {
  RngStream rng(5);
  const Tensor a = random_image(rng, 3, 6, 5), b = random_image(rng, 3, 6, 5);
  const MixedSample e = cutmix(a, b, BoxMask{});
  EXPECT_EQ(e.image, a);
  EXPECT_EQ(e.w_a, 1.0);
  EXPECT_EQ(e.w_b, 0.0);
  const MixedSample f = cutmix(a, b, BoxMask{0, 0, 6, 5});
  EXPECT_EQ(f.image, b);
  EXPECT_EQ(f.w_a, 0.0);
  EXPECT_EQ(f.w_b, 1.0);
}

TEST(CutMix, ExhaustiveProvenance) {
  RngStream rng(6);
  const Tensor a = random_image(rng, 1, 8, 8), b = random_image(rng, 1, 8, 8);
  const BoxMask box = box_at(8, 8, 0.25, 3, 5);
  const MixedSample m = cutmix(a, b, box);
  EXPECT_EQ(m.w_b, 0.25);
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x)
      EXPECT_EQ(m.image(0, y, x), box.contains(y, x) ? b(0, y, x) : a(0, y, x));
}

TEST(CutMix, RejectsOutOfBoundsBox) {
  EXPECT_THROW(cutmix(Tensor({1, 4, 4}), Tensor({1, 4, 4}), BoxMask{0, 0, 5, 2}),
               std::invalid_argument);
}

TEST(SemanticMap, Examples) {
  const SemanticMap u = uniform_map(3, 4);
  for (double v : u.values.values()) EXPECT_NEAR(v, 1.0 / 12.0, 1e-15);
  const SemanticMap neg = semantic_map(Tensor({2, 2}, -1.0));
  for (double v : neg.values.values()) EXPECT_EQ(v, 0.25);
  const SemanticMap m = semantic_map(Tensor({2, 2}, {1, 3, 0, 0}));
  EXPECT_EQ(m.values, Tensor({2, 2}, {0.25, 0.75, 0, 0}));
}

TEST(RegionTransform, IdentityConstantAndHandEvaluated) {
  RngStream rng(7);
  const Tensor r = random_image(rng, 2, 3, 5);
  EXPECT_EQ(region_transform(r, 3, 5), r);
  const Tensor c = region_transform(Tensor({1, 3, 4}, 0.7), 7, 2);
  for (double v : c.values()) EXPECT_NEAR(v, 0.7, 1e-15);
  const Tensor s = region_transform(Tensor({1, 2, 2}, {0, 2, 0, 2}), 1, 3);
  EXPECT_NEAR(s(0, 0, 0), 0.0, 1e-12);
  EXPECT_NEAR(s(0, 0, 1), 1.0, 1e-12);
  EXPECT_NEAR(s(0, 0, 2), 2.0, 1e-12);
}

TEST(SnapMix, EmptyBoxesKeepFirstImage) {
  RngStream rng(8);
  const Tensor a = random_image(rng, 1, 6, 6), b = random_image(rng, 1, 6, 6);
  const MixedSample m = snapmix_with_boxes(a, b, uniform_map(6, 6), uniform_map(6, 6), {}, {});
  EXPECT_EQ(m.image, a);
  EXPECT_EQ(m.w_a, 1.0);
  EXPECT_EQ(m.w_b, 0.0);
}

TEST(SnapMix, UniformMapsReduceToAreaRatios) {
  RngStream rng(9);
  const Tensor a = random_image(rng, 1, 8, 8), b = random_image(rng, 1, 8, 8);
  const BoxMask ba = box_at(8, 8, 0.25, 4, 4), bb = box_at(8, 8, 0.5625, 4, 4);
  const MixedSample m = snapmix_with_boxes(a, b, uniform_map(8, 8), uniform_map(8, 8), ba, bb);
  EXPECT_NEAR(m.w_a, 1.0 - ba.area_ratio(8, 8), 1e-12);
  EXPECT_NEAR(m.w_b, bb.area_ratio(8, 8), 1e-12);
}

TEST(SnapMix, ConcentratedMassInsideBox) {
  RngStream rng(10);
  const Tensor a = random_image(rng, 1, 4, 4), b = random_image(rng, 1, 4, 4);
  Tensor cam({4, 4}, 0.0);
  cam(1, 1) = 5.0;
  const BoxMask box{0, 0, 2, 2};
  const MixedSample m = snapmix_with_boxes(a, b, semantic_map(cam), uniform_map(4, 4), box, box);
  EXPECT_NEAR(m.w_a, 0.0, 1e-9);
  EXPECT_NEAR(m.w_b, 0.25, 1e-12);
}

TEST(SnapMix, PastesResizedRegion) {
  RngStream rng(11);
  const Tensor a = random_image(rng, 1, 8, 8), b = random_image(rng, 1, 8, 8);
  const BoxMask ba{1, 2, 5, 6}, bb{3, 3, 5, 5};
  const MixedSample m = snapmix_with_boxes(a, b, uniform_map(8, 8), uniform_map(8, 8), ba, bb);
  const Tensor patch = region_transform(crop(b, bb), 4, 4);
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x)
      EXPECT_EQ(m.image(0, y, x), ba.contains(y, x) ? patch(0, y - 1, x - 2) : a(0, y, x));
}

TEST(SnapMix, WeightBoundsUnderRandomCams) {
  RngStream rng(12);
  for (int trial = 0; trial < 200; ++trial) {
    const Tensor a = random_image(rng, 1, 6, 6), b = random_image(rng, 1, 6, 6);
    Tensor ca({6, 6}), cb({6, 6});
    for (double& v : ca.values()) v = rng.normal();
    for (double& v : cb.values()) v = rng.normal();
    RngStream local = rng.child(static_cast<std::uint64_t>(trial));
    const MixedSample m = snapmix(a, b, semantic_map(ca), semantic_map(cb), local, 1.0);
    EXPECT_GE(m.w_a, 0.0);
    EXPECT_LE(m.w_a, 1.0);
    EXPECT_GE(m.w_b, 0.0);
    EXPECT_LE(m.w_b, 1.0);
  }
}

class BatchFixture : public ::testing::Test {
 protected:
  void SetUp() override {
    RngStream rng(13);
    images = Tensor({6, 1, 5, 5});
    for (double& v : images.values()) v = rng.uniform();
    labels = {0, 1, 2, 3, 4, 5};
  }
  Tensor images;
  std::vector<std::size_t> labels;
  CamProvider cams = [](const Tensor& image, std::size_t) {
    return Tensor({image.dim(1), image.dim(2)}, 1.0);
  };
};

TEST_F(BatchFixture, ZeroProbabilityPassesThrough) {
  for (MixKind k : {MixKind::MixUp, MixKind::CutMix, MixKind::SnapMix}) {
    const MixedBatch b = apply_augmentation(images, labels, {k, 1.0, 0.0}, cams, RngStream(1));
    EXPECT_EQ(b.images, images);
    for (std::size_t i = 0; i < b.size(); ++i) {
      EXPECT_EQ(b.label_a[i], labels[i]);
      EXPECT_EQ(b.label_b[i], labels[i]);
      EXPECT_EQ(b.w_a[i], 1.0);
      EXPECT_EQ(b.w_b[i], 0.0);
    }
  }
}

TEST_F(BatchFixture, MixUpBlendsRecomputeFromLambda) {
  const Tensor pair = Tensor({2, 1, 5, 5}, std::vector<double>(images.values().begin(),
                                                              images.values().begin() + 50));
  const MixedBatch b = apply_augmentation(pair, {0, 1}, {MixKind::MixUp, 2.0, 1.0}, nullptr,
                                          RngStream(2));
  for (std::size_t i = 0; i < 2; ++i) {
    const std::size_t j = b.partner[i];
    ASSERT_TRUE(b.mixed[i]);
    EXPECT_EQ(b.w_a[i], b.lambda[i]);
    EXPECT_EQ(b.label_b[i], j);
    const MixedSample ref = mixup(pair.item(i), pair.item(j), b.lambda[i]);
    for (std::size_t p = 0; p < 25; ++p) EXPECT_EQ(b.images.slice(i)[p], ref.image[p]);
  }
}

TEST_F(BatchFixture, DeterministicAndPermutation) {
  const MixMethod m{MixKind::CutMix, 3.0, 1.0};
  const MixedBatch a = apply_augmentation(images, labels, m, nullptr, RngStream(3));
  const MixedBatch b = apply_augmentation(images, labels, m, nullptr, RngStream(3));
  EXPECT_EQ(a.images, b.images);
  EXPECT_EQ(a.w_b, b.w_b);
  EXPECT_EQ(std::set<std::size_t>(a.partner.begin(), a.partner.end()).size(), labels.size());
}

TEST_F(BatchFixture, SharedPairingAcrossMethods) {
  const auto pairing = make_pairing(labels.size(), RngStream(4));
  const MixedBatch h1 =
      apply_augmentation(images, labels, pairing, {MixKind::SnapMix, 5, 1}, cams, RngStream(5));
  const MixedBatch h2 =
      apply_augmentation(images, labels, pairing, {MixKind::MixUp, 5, 1}, cams, RngStream(6));
  EXPECT_EQ(h1.partner, h2.partner);
  EXPECT_EQ(h1.label_b, h2.label_b);
}

TEST_F(BatchFixture, SnapMixNeedsProvider) {
  EXPECT_THROW(apply_augmentation(images, labels, {MixKind::SnapMix, 5, 1}, nullptr, RngStream(1)),
               std::invalid_argument);
}

TEST(MixMethod, Validation) {
  EXPECT_THROW((MixMethod{MixKind::MixUp, 0.0, 0.5}.validate()), std::invalid_argument);
  EXPECT_THROW((MixMethod{MixKind::MixUp, 1.0, 1.5}.validate()), std::invalid_argument);
  EXPECT_EQ(parse_mix_kind("cutmix"), MixKind::CutMix);
  EXPECT_FALSE(parse_mix_kind("cutout").has_value());
}

}  // namespace
}  // namespace cekd
