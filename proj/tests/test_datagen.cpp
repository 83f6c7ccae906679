// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <set>

#include "largo/datagen.hpp"

using namespace largo;

namespace {

DatasetSpec seg_spec(std::size_t n = 2, std::size_t classes = 3) {
  DatasetSpec s;
  s.n_modalities = n;
  s.classes = classes;
  s.size = 24;
  s.image_size = 24;
  s.radius_min = 3;
  s.radius_max = 6;
  s.noise.assign(n, 0.3);
  s.seed = 11;
  return s;
}

DatasetSpec cls_spec() {
  DatasetSpec s;
  s.task = Task::classification;
  s.classes = 10;
  s.size = 50;
  s.widths = {16, 24};
  s.noise = {0.5, 1.0};
  s.seed = 5;
  return s;
}

bool same(const Dataset& a, const Dataset& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto &x = a.samples[i], &y = b.samples[i];
    if (x.id != y.id || x.label != y.label || !(x.target == y.target)) return false;
    for (std::size_t n = 0; n < x.modalities.size(); ++n)
      if (!(x.modalities[n] == y.modalities[n])) return false;
  }
  return true;
}

}  // namespace

TEST(Datagen, SameSeedIsBitwiseIdentical) {
  EXPECT_TRUE(same(generate(seg_spec()), generate(seg_spec())));
  EXPECT_TRUE(same(generate(cls_spec()), generate(cls_spec())));
}

TEST(Datagen, DifferentSeedDiffers) {
  auto s = seg_spec();
  s.seed = 12;
  EXPECT_FALSE(same(generate(seg_spec()), generate(s)));
}

TEST(Datagen, SegmentationShapesAndRange) {
  const auto spec = seg_spec(3, 4);
  const Dataset d = generate(spec);
  ASSERT_EQ(d.size(), spec.size);
  std::set<double> seen;
  for (const auto& s : d.samples) {
    ASSERT_EQ(s.modalities.size(), 3u);
    for (const auto& m : s.modalities) EXPECT_EQ(m.shape(), (Shape{1, 24, 24}));
    EXPECT_EQ(s.target.shape(), (Shape{24, 24}));
    for (double v : s.target.data()) {
      EXPECT_EQ(v, std::floor(v));
      EXPECT_GE(v, 0.0);
      EXPECT_LT(v, 4.0);
      seen.insert(v);
    }
  }
  EXPECT_EQ(seen.size(), 4u);
}

TEST(Datagen, ZeroNoiseRendersTheVisibleClassesExactly) {
  auto spec = seg_spec();
  spec.noise = {0.0, 0.0};
  const Dataset d = generate(spec);
  for (const auto& s : d.samples)
    for (std::size_t p = 0; p < s.target.size(); ++p) {
      const int c = int(s.target[p]);
      // class 1 lives in modality 0, class 2 in modality 1; the class-2 disk
      // may cover class-1 pixels in the target, so only check one direction
      if (c == 1) EXPECT_EQ(s.modalities[0][p], 1.0);
      if (c == 2) EXPECT_EQ(s.modalities[1][p], 1.0);
      if (c == 0) {
        EXPECT_EQ(s.modalities[0][p], 0.0);
        EXPECT_EQ(s.modalities[1][p], 0.0);
      }
    }
}

TEST(Datagen, ModalityCarriesNoInformationAboutInvisibleClass) {
  // class 1 is visible in modality 0 only: modality 1 must not depend on it
  const auto spec = seg_spec();
  for (std::size_t id = 0; id < 10; ++id) {
    EXPECT_TRUE(render_modality(spec, id, 1) == render_modality(spec, id, 1, 1));
    EXPECT_FALSE(render_modality(spec, id, 0) == render_modality(spec, id, 0, 1));
  }
}

TEST(Datagen, CustomVisibilityIsHonored) {
  auto spec = seg_spec();
  spec.visibility = {{1, 1}, {0, 1}};
  for (std::size_t id = 0; id < 5; ++id) {
    EXPECT_FALSE(render_modality(spec, id, 1) == render_modality(spec, id, 1, 1));
    EXPECT_TRUE(render_modality(spec, id, 0) == render_modality(spec, id, 0, 2));
  }
}

TEST(Datagen, InvisibleClassIsRejected) {
  auto spec = seg_spec();
  spec.visibility = {{1, 0}, {0, 0}};
  try {
    generate(spec);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("class 2"), std::string::npos);
  }
}

TEST(Datagen, OtherSpecErrors) {
  auto s = seg_spec();
  s.noise = {0.1};
  EXPECT_THROW(generate(s), ConfigError);
  s = seg_spec();
  s.radius_max = 20;
  EXPECT_THROW(generate(s), ConfigError);
  auto c = cls_spec();
  c.widths = {16};
  EXPECT_THROW(generate(c), ConfigError);
}

TEST(Datagen, ClassificationZeroNoiseIsSeparableFromEitherModality) {
  auto spec = cls_spec();
  spec.noise = {0.0, 0.0};
  const Dataset d = generate(spec);
  for (std::size_t n = 0; n < 2; ++n) {
    // nearest prototype recovers the label exactly
    for (const auto& s : d.samples) {
      std::size_t best = 0;
      double best_d = 1e300;
      for (std::size_t c = 0; c < spec.classes; ++c) {
        double dist = 0.0;
        for (std::size_t k = 0; k < spec.widths[n]; ++k) {
          const double e = s.modalities[n][k] - d.prototypes[n].at(c, k);
          dist += e * e;
        }
        if (dist < best_d) best_d = dist, best = c;
      }
      EXPECT_EQ(best, s.label);
    }
  }
}

TEST(Datagen, ClassificationWidthsAndLabels) {
  const Dataset d = generate(cls_spec());
  for (const auto& s : d.samples) {
    EXPECT_EQ(s.modalities[0].shape(), (Shape{16}));
    EXPECT_EQ(s.modalities[1].shape(), (Shape{24}));
    EXPECT_LT(s.label, 10u);
  }
}

TEST(Datagen, ApplySubset) {
  const Dataset d = generate(seg_spec(3, 4));
  const auto& s = d.samples[0];
  const auto full = apply_subset(s, ModalityMask::full(3));
  ASSERT_EQ(full.size(), 3u);
  for (std::size_t n = 0; n < 3; ++n) EXPECT_TRUE(full.at(n) == s.modalities[n]);
  const auto one = apply_subset(s, ModalityMask::of({2}, 3));
  ASSERT_EQ(one.size(), 1u);
  EXPECT_TRUE(one.at(2) == s.modalities[2]);
  EXPECT_THROW(apply_subset(s, ModalityMask(0, 3)), ModalityError);
  EXPECT_THROW(apply_subset(s, ModalityMask::full(2)), ModalityError);
}

TEST(Datagen, SplitIsDisjointAndCovering) {
  auto spec = seg_spec();
  spec.size = 23;
  const Dataset d = generate(spec);
  const Split sp = split(d);
  EXPECT_EQ(sp.validation.size(), 5u);  // ceil(0.2 * 23)
  std::set<std::size_t> ids;
  for (auto i : sp.train) ids.insert(d.samples[i].id);
  for (auto i : sp.validation) EXPECT_TRUE(ids.insert(d.samples[i].id).second);
  EXPECT_EQ(ids.size(), 23u);
}

TEST(Datagen, ChanceFloorMatchesBruteForce) {
  const Dataset d = generate(seg_spec());
  std::vector<std::size_t> idx{0, 1, 2, 3, 4, 5};
  double total = 0.0;
  for (int c = 1; c < 3; ++c) {
    double every = 0.0, none = 0.0;
    for (auto i : idx) {
      double g = 0.0;
      for (double v : d.samples[i].target.data()) g += (int(v) == c);
      const double P = double(d.samples[i].target.size());
      every += 200.0 * g / (g + P);
      none += g == 0 ? 100.0 : 0.0;
    }
    total += std::max(every, none) / 6.0;
  }
  EXPECT_NEAR(chance_floor_dice(d, idx), total / 2.0, 1e-12);
}

TEST(Datagen, SpecJsonRoundTrip) {
  auto spec = seg_spec(3, 4);
  spec.visibility = {{1, 0, 0}, {0, 1, 1}, {1, 1, 1}};
  const DatasetSpec back = dataset_spec_from_json(to_json(spec));
  EXPECT_EQ(to_json(back), to_json(spec));
  EXPECT_TRUE(same(generate(back), generate(spec)));
}
