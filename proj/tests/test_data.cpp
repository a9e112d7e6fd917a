#include <gtest/gtest.h>

#include <set>

#include "cekd/data.hpp"
#include "cekd/pnm.hpp"

namespace cekd {
namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("cekd_test_data_" + name);
  fs::remove_all(dir);
  return dir;
}

DatasetSpec small_spec() {
  DatasetSpec s;
  s.samples_per_class = 20;
  s.test_per_class = 5;
  s.image_hw = 16;
  s.marker_size = 3;
  s.jitter = 1;
  return s;
}

TEST(Spec, ValidationAndJson) {
  DatasetSpec s;
  EXPECT_NO_THROW(s.validate());
  s.marker_size = 16;
  EXPECT_THROW(s.validate(), ConfigError);
  s = DatasetSpec{};
  s.noise_std = -1.0;
  EXPECT_THROW(s.validate(), ConfigError);

  json j = small_spec();
  const DatasetSpec back = dataset_spec_from_json(j);
  EXPECT_EQ(json(back), j);
  j["bogus"] = 1;
  EXPECT_THROW(dataset_spec_from_json(j), ConfigError);
}

TEST(Generate, Deterministic) {
  const Dataset a = generate_synthetic(small_spec()), b = generate_synthetic(small_spec());
  ASSERT_EQ(a.samples.size(), b.samples.size());
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    EXPECT_EQ(a.samples[i].image, b.samples[i].image);
    EXPECT_EQ(a.samples[i].id, b.samples[i].id);
  }
  EXPECT_EQ(a.manifest.test_ids, b.manifest.test_ids);
}

TEST(Generate, NoiselessClassesAreConstant) {
  DatasetSpec s = small_spec();
  s.noise_std = 0.0;
  s.jitter = 0;
  const Dataset d = generate_synthetic(s);
  std::vector<const Tensor*> first(s.num_classes, nullptr);
  for (const Sample& x : d.samples) {
    if (first[x.label] == nullptr) first[x.label] = &x.image;
    EXPECT_EQ(x.image, *first[x.label]);
  }
  for (std::size_t a = 0; a < s.num_classes; ++a)
    for (std::size_t b = a + 1; b < s.num_classes; ++b) EXPECT_NE(*first[a], *first[b]);
}

TEST(Generate, SplitAndRangeInvariants) {
  const Dataset d = generate_synthetic(DatasetSpec{});
  EXPECT_EQ(d.samples.size(), 8u * 160u);
  EXPECT_EQ(d.test.size(), 8u * 40u);
  std::set<std::string> ids, train, test;
  for (const Sample& s : d.samples) {
    ids.insert(s.id);
    for (double v : s.image.values()) {
      ASSERT_GE(v, 0.0);
      ASSERT_LE(v, 1.0);
    }
  }
  EXPECT_EQ(ids.size(), d.samples.size());
  for (std::size_t i : d.train) train.insert(d.samples[i].id);
  for (std::size_t i : d.test) test.insert(d.samples[i].id);
  for (const auto& id : test) EXPECT_EQ(train.count(id), 0u);
  EXPECT_EQ(train.size() + test.size(), ids.size());
}

TEST(Generate, NearestCentroidAboveChance) {
  const Dataset d = generate_synthetic(DatasetSpec{});
  const std::size_t k = d.spec.num_classes;
  const std::size_t px = d.samples[0].image.size();
  std::vector<std::vector<double>> centroid(k, std::vector<double>(px, 0.0));
  std::vector<double> count(k, 0.0);
  for (std::size_t i : d.train) {
    const Sample& s = d.samples[i];
    for (std::size_t p = 0; p < px; ++p) centroid[s.label][p] += s.image[p];
    count[s.label] += 1.0;
  }
  for (std::size_t c = 0; c < k; ++c)
    for (double& v : centroid[c]) v /= count[c];
  std::size_t correct = 0;
  for (std::size_t i : d.test) {
    const Sample& s = d.samples[i];
    std::size_t best = 0;
    double best_dist = 1e300;
    for (std::size_t c = 0; c < k; ++c) {
      double dist = 0.0;
      for (std::size_t p = 0; p < px; ++p) dist += (s.image[p] - centroid[c][p]) * (s.image[p] - centroid[c][p]);
      if (dist < best_dist) best_dist = dist, best = c;
    }
    correct += best == s.label;
  }
  const double acc = static_cast<double>(correct) / static_cast<double>(d.test.size());
  EXPECT_GT(acc, 1.0 / static_cast<double>(k) + 0.1);
  EXPECT_LT(acc, 0.95);  // the task should not be solvable by template matching alone
}

TEST(Pnm, HeaderAndZeroPayload) {
  const std::string bytes = encode_pnm(Tensor({1, 2, 3}, 0.0));
  EXPECT_EQ(bytes.substr(0, 11), "P5\n3 2\n255\n");
  EXPECT_EQ(bytes.size(), 11u + 6u);
  for (std::size_t i = 11; i < bytes.size(); ++i) EXPECT_EQ(bytes[i], '\0');
}

TEST(Pnm, HandBuiltFixture) {
  const std::string fixture = std::string("P5\n2 2\n255\n") + '\x00' + '\x55' + '\xAA' + '\xFF';
  const Tensor t = decode_pnm(fixture);
  const double expect[] = {0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0};
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(t[i], expect[i], 1.0 / 255.0);
}

TEST(Pnm, RoundTripWithinQuantization) {
  RngStream rng(3);
  for (std::size_t c : {1u, 3u}) {
    Tensor x({c, 5, 7});
    for (double& v : x.values()) v = rng.uniform();
    const Tensor y = decode_pnm(encode_pnm(x));
    EXPECT_LE(max_abs_diff(x, y), 1.0 / 255.0);
    EXPECT_EQ(decode_pnm(encode_pnm(y)), y);
  }
}

TEST(Pnm, MalformedInputReportsOffset) {
  EXPECT_THROW(decode_pnm("P4\n1 1\n255\n\x01"), ParseError);
  try {
    decode_pnm("P5\n4 4\n255\n\x01\x02");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 13u);
  }
  try {
    decode_pnm("P5\n4 x\n255\n");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 5u);
  }
  EXPECT_THROW(decode_pnm("P5\n1 1\n300\n\x01"), ParseError);
  EXPECT_NO_THROW(decode_pnm("P5 # comment\n1 1\n255\n\x01"));
}

TEST(DatasetIo, SaveLoadRoundTrip) {
  const fs::path dir = scratch_dir("roundtrip");
  const Dataset d = generate_synthetic(small_spec());
  save_dataset(d, dir);
  EXPECT_TRUE(fs::exists(dir / "labels.tsv"));
  EXPECT_TRUE(fs::exists(dir / "manifest.json"));
  EXPECT_TRUE(fs::exists(dir / "images" / (d.samples[0].id + ".pgm")));
  const Dataset back = load_dataset(dir);
  ASSERT_EQ(back.samples.size(), d.samples.size());
  for (std::size_t i = 0; i < d.samples.size(); ++i) {
    EXPECT_EQ(back.samples[i].image, d.samples[i].image);  // generator is on the 8-bit grid
    EXPECT_EQ(back.samples[i].label, d.samples[i].label);
  }
  EXPECT_EQ(back.test, d.test);
  EXPECT_EQ(back.manifest.spec_hash, d.manifest.spec_hash);
  fs::remove_all(dir);
}

TEST(DatasetIo, MissingDirectoryIsIoError) {
  EXPECT_THROW(load_dataset(scratch_dir("missing")), IoError);
}

TEST(BatchIter, DeterministicCoveringAndVarying) {
  const Dataset d = generate_synthetic(small_spec());
  const auto a = batch_iter(d.train, 32, 7, 0), b = batch_iter(d.train, 32, 7, 0);
  EXPECT_EQ(a, b);
  std::set<std::size_t> seen;
  for (const auto& batch : a) {
    EXPECT_GE(batch.size(), 2u);
    seen.insert(batch.begin(), batch.end());
  }
  EXPECT_GE(seen.size() + 1, d.train.size());
  const std::set<std::size_t> test(d.test.begin(), d.test.end());
  for (std::size_t i : seen) EXPECT_EQ(test.count(i), 0u);
  bool differs = false;
  for (std::size_t e = 1; e <= 3; ++e) differs |= batch_iter(d.train, 32, 7, e) != a;
  EXPECT_TRUE(differs);
}

TEST(BatchIter, DropsSingletonTail) {
  std::vector<std::size_t> idx(9);
  std::iota(idx.begin(), idx.end(), 0);
  const auto batches = batch_iter(idx, 4, 1, 0);
  EXPECT_EQ(batches.size(), 2u);
  EXPECT_THROW(batch_iter(idx, 1, 1, 0), std::invalid_argument);
}

TEST(Transforms, FlipInvolutionAndSymmetry) {
  RngStream rng(4);
  Tensor x({2, 4, 5});
  for (double& v : x.values()) v = rng.uniform();
  EXPECT_EQ(flip_horizontal(flip_horizontal(x)), x);
  Tensor sym({1, 3, 4});
  for (std::size_t y = 0; y < 3; ++y)
    for (std::size_t c = 0; c < 2; ++c) sym(0, y, c) = sym(0, y, 3 - c) = rng.uniform();
  EXPECT_EQ(flip_horizontal(sym), sym);
}

TEST(Transforms, CropOffsetsBoundedAndRangePreserved) {
  RngStream rng(5);
  Tensor x({1, 8, 8});
  for (double& v : x.values()) v = rng.uniform();
  for (std::uint64_t i = 0; i < 500; ++i) {
    RngStream r = rng.child(i);
    const TransformDraw d = draw_transform(r);
    EXPECT_LE(d.oy, 2 * kCropPad);
    EXPECT_LE(d.ox, 2 * kCropPad);
    const Tensor y = basic_transforms(x, rng.child(i));
    for (double v : y.values()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
  EXPECT_EQ(pad_crop(x, 2, 2, 2), x);
}

}  // namespace
}  // namespace cekd
