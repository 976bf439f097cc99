#include <gtest/gtest.h>

#include "patchforge/datagen.hpp"
#include "patchforge/localizer.hpp"

using namespace patchforge;

namespace {

ModelConfig micro_config() {
  ModelConfig cfg;
  cfg.patch = 8;
  cfg.stride = 4;
  cfg.backbone = {{4, 4}, 1};
  cfg.head = {8, 4};
  cfg.seed = 11;
  return cfg;
}

ImageBuffer random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0, 1);
  ImageBuffer img(h, w, 3);
  for (double& v : img.values) v = u(rng);
  return img;
}

}  // namespace

TEST(Activation, SinglePatchHoldsEveryChannel) {
  Tensor<double> f(Shape{1, 5}, {0.1, 0.2, 0.3, 0.4, 0.5});
  EXPECT_EQ(activation_counts(f), (std::vector<std::size_t>{5}));
}

TEST(Activation, EngineeredSplit) {
  Tensor<double> f(Shape{2, 4}, {9, 9, 9, 0, 1, 1, 1, 5});
  EXPECT_EQ(activation_counts(f), (std::vector<std::size_t>{3, 1}));
}

TEST(Activation, CountsSumToChannels) {
  Model<double> m(micro_config());
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto cache = build_cache(m, random_image(20 + seed, 28, seed));
    const ActivationMap a = activation_map(cache, m.config().pooling);
    EXPECT_EQ(std::accumulate(a.counts.begin(), a.counts.end(), std::size_t{0}), m.feature_width());
    EXPECT_EQ(a.counts.size(), a.rows * a.cols);
    EXPECT_EQ(a.heat.height, 20 + seed);
    EXPECT_EQ(*std::max_element(a.heat.values.begin(), a.heat.values.end()), 1.0);
    EXPECT_GE(*std::min_element(a.heat.values.begin(), a.heat.values.end()), 0.0);
  }
}

TEST(Activation, NeedsMaxPooling) {
  ModelConfig cfg = micro_config();
  cfg.pooling = PoolingConfig{Pooling::mean, Pooling::min};
  Model<double> m(cfg);
  EXPECT_THROW(activation_map(m, random_image(16, 16, 1)), ConfigError);
}

TEST(Rasterize, AveragesOverlaps) {
  const PatchGrid g = tile(8, 12, 8, 4);
  const ImageBuffer r = rasterize(g, {1.0, 3.0});
  EXPECT_EQ(r.at(0, 0, 0), 1.0);
  EXPECT_EQ(r.at(0, 0, 5), 2.0);
  EXPECT_EQ(r.at(0, 7, 11), 3.0);
}

TEST(Saliency, ShapeRangeAndZeroModel) {
  Model<double> m(micro_config());
  const ImageBuffer img = random_image(17, 23, 2);
  const ImageBuffer s = saliency(m, img);
  EXPECT_EQ(s.height, 17u);
  EXPECT_EQ(s.width, 23u);
  EXPECT_EQ(s.channels, 1u);
  for (double v : s.values) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  for (std::size_t i = 0; i < m.params().size(); ++i) {
    if (m.params().name(i).rfind("head.out", 0) == 0) std::fill(m.params()[i].values().begin(), m.params()[i].values().end(), 0.0);
  }
  for (double v : saliency(m, img).values) EXPECT_EQ(v, 0.0);
}

TEST(Roi, FullFrameEqualsGlobalScore) {
  Model<double> m(micro_config());
  for (auto [h, w] : {std::pair<std::size_t, std::size_t>{16, 16}, {21, 30}}) {
    const ImageBuffer img = random_image(h, w, h + w);
    const RoiBox full{0, 0, static_cast<long>(h), static_cast<long>(w)};
    const RoiResult direct = score_roi(m, img, full);
    EXPECT_EQ(direct.score.score, m.score(img).score);
    EXPECT_EQ(direct.score.logit, m.score(img).logit);
    EXPECT_EQ(direct.backbone_patch_evaluations, m.grid_for(img).count());
    const auto cache = build_cache(m, img);
    EXPECT_EQ(score_roi(m, img, full, &cache).score.logit, cache.global.logit);
    EXPECT_EQ(cache.global.logit, m.score(img).logit);
  }
}

TEST(Roi, CachedMatchesRecomputed) {
  Model<double> m(micro_config());
  const ImageBuffer img = random_image(32, 40, 3);
  const auto cache = build_cache(m, img);
  for (const RoiBox& b : scan_boxes(cache.grid)) {
    const RoiResult c = score_roi(m, img, b, &cache);
    const RoiResult r = score_roi(m, img, b);
    EXPECT_EQ(c.backbone_patch_evaluations, 0u);
    EXPECT_GT(r.backbone_patch_evaluations, 0u);
    EXPECT_NEAR(c.score.score, r.score.score, 1e-12);
  }
}

TEST(Roi, BadBoxes) {
  Model<double> m(micro_config());
  const ImageBuffer img = random_image(24, 24, 4);
  EXPECT_THROW(score_roi(m, img, {0, 0, 7, 24}), InputError);
  EXPECT_THROW(score_roi(m, img, {-1, 0, 8, 8}), InputError);
  EXPECT_THROW(score_roi(m, img, {20, 0, 8, 8}), InputError);
  // 10x10 at offset 2 with stride 4 holds no complete patch
  EXPECT_THROW(score_roi(m, img, {2, 2, 9, 9}), InputError);
  EXPECT_NO_THROW(score_roi(m, img, {4, 4, 8, 8}));
  const auto cache = build_cache(m, img);
  EXPECT_THROW(score_roi(m, random_image(16, 16, 5), {0, 0, 8, 8}, &cache), InputError);
}

TEST(Scan, MenuAndOrder) {
  const PatchGrid g = tile(16, 16, 8, 8);
  const auto boxes = scan_boxes(g);
  ASSERT_EQ(boxes.size(), 5u);
  EXPECT_EQ(boxes[0].height, 8);
  EXPECT_EQ(boxes[1].height, 16);
  EXPECT_EQ(boxes[4].top, 8);
  EXPECT_EQ(boxes[4].left, 8);
}

TEST(Scan, TiesGoToScanOrder) {
  auto boxes = scan_boxes(tile(32, 32, 8, 8));
  for (auto& b : boxes) b.score = 0.5;
  const auto picked = select_boxes(boxes, 3);
  ASSERT_EQ(picked.size(), 3u);
  EXPECT_EQ(picked[0].top, 0);
  EXPECT_EQ(picked[0].left, 0);
  EXPECT_EQ(picked[0].height, 8);
  EXPECT_EQ(picked[1].left, 8);
  EXPECT_EQ(picked[2].left, 16);
}

TEST(Scan, HotRegionWinsAndBoxesNeverOverlap) {
  auto boxes = scan_boxes(tile(32, 32, 8, 8));
  Rng rng(3);
  for (auto& b : boxes) b.score = uniform(rng, 0, 0.5);
  for (auto& b : boxes) {
    if (b.top == 16 && b.left == 8 && b.height == 16) b.score = 0.9;
  }
  const auto picked = select_boxes(boxes, 6);
  EXPECT_EQ(picked[0].top, 16);
  EXPECT_EQ(picked[0].left, 8);
  for (std::size_t i = 0; i < picked.size(); ++i) {
    for (std::size_t j = i + 1; j < picked.size(); ++j) EXPECT_FALSE(picked[i].overlaps(picked[j]));
    if (i) {
      EXPECT_LE(picked[i].score, picked[i - 1].score);
    }
  }
}

TEST(Scan, AutoScanIsDeterministicAndCached) {
  Model<double> m(micro_config());
  const ImageBuffer img = random_image(32, 32, 6);
  const auto a = auto_box_scan(m, img, 3);
  const auto b = auto_box_scan(m, build_cache(m, img), 3);
  ASSERT_EQ(a.size(), 3u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].to_json(), b[i].to_json());
    EXPECT_EQ(a[i].origin, BoxOrigin::automatic);
    EXPECT_NEAR(a[i].score, score_roi(m, img, a[i]).score.score, 1e-12);
  }
  EXPECT_THROW(auto_box_scan(m, img, 0), InputError);
}

TEST(Heat, PgmEncoding) {
  ImageBuffer h(2, 3, 1);
  h.values = {0, 0.5, 1, 1, 0, 0};
  const std::string pgm = heat_to_pgm(h);
  EXPECT_EQ(pgm.substr(0, 2), "P5");
  EXPECT_EQ(static_cast<unsigned char>(pgm[pgm.size() - 4]), 255);
}
