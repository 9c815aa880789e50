#include "instrgen/errors.hpp"
#include "instrgen/feature_provider.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <fstream>

using namespace instrgen;
using instrgen::testing::random_matrix;
using instrgen::testing::TempDir;

namespace {

struct Projector {
  nn::ParameterRegistry reg;
  Rng rng{21};
  ProviderManifest manifest = instrgen::testing::tiny_manifest();
  FeatureProjector proj{reg, "features", manifest, 8, rng};
};

RawImageFeatures raw_with(const ProviderManifest& m, Eigen::Index k, std::uint64_t seed) {
  RawImageFeatures r;
  r.image_id = "img" + std::to_string(seed);
  r.det_visual = random_matrix(k, m.d_dv, seed);
  r.det_label = random_matrix(k, m.d_dt, seed + 1);
  for (Eigen::Index i = 0; i < k; ++i) r.det_label_names.push_back("cup");
  r.sgm_text = random_matrix(1, m.d_sg, seed + 2);
  r.grid_single = random_matrix(1, m.d_g1, seed + 3);
  r.grid_multi = random_matrix(1, m.d_g2, seed + 4);
  r.grid_mllm = random_matrix(1, m.d_g3, seed + 5);
  return r;
}

// Explicit-loop affine map y = x W + b.
Matrix loop_affine(const nn::Linear& l, const Matrix& x) {
  Matrix y(x.rows(), l.out_features());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    for (Eigen::Index c = 0; c < y.cols(); ++c) {
      double s = l.bias->value(0, c);
      for (Eigen::Index k = 0; k < x.cols(); ++k) s += x(r, k) * l.weight->value(k, c);
      y(r, c) = s;
    }
  }
  return y;
}

double max_abs(const Matrix& a, const Matrix& b) { return (a - b).cwiseAbs().maxCoeff(); }

SyntheticDataset small_dataset() { return generate_synthetic_dataset(6, 3, {4.0 / 6, 1.0 / 6, 1.0 / 6}); }

}  // namespace

TEST(SyntheticBackend, RepeatedLookupIsBitIdentical) {
  const auto ds = small_dataset();
  const auto backend = make_synthetic_backend(ds);
  const auto id = ds.scenes[0].target_image_id();
  EXPECT_EQ(backend.get_raw_features(id), backend.get_raw_features(id));
}

TEST(SyntheticBackend, UnknownIdThrows) {
  const auto backend = make_synthetic_backend(small_dataset());
  EXPECT_THROW(backend.get_raw_features("xx"), UnknownImage);
}

TEST(SyntheticBackend, FeaturesRegenerateFromSceneAttributesAndSeed) {
  const auto ds = small_dataset();
  const auto backend = make_synthetic_backend(ds);
  const Scene& s = ds.scenes[1];
  const auto& m = ds.manifest;
  const RawImageFeatures tar = backend.get_raw_features(s.target_image_id());

  RowVector grid = RowVector::Zero(m.d_g1);
  for (const auto& w : {s.target.color, s.target.category, s.target.support, s.target.room}) {
    grid += synthetic_embedding("grid_single", w, m.d_g1, ds.seed);
  }
  grid += ds.noise_scale * synthetic_noise("grid_single", s.target_image_id(), 0, m.d_g1, ds.seed);
  EXPECT_EQ(tar.grid_single, grid);

  ASSERT_EQ(tar.detections(), static_cast<Eigen::Index>(s.target_detections.size()));
  for (Eigen::Index r = 0; r < tar.detections(); ++r) {
    const auto& obj = s.target_detections[static_cast<std::size_t>(r)];
    const RowVector v = synthetic_embedding("det_visual", obj.color, m.d_dv, ds.seed) +
                        synthetic_embedding("det_visual", obj.category, m.d_dv, ds.seed) +
                        ds.noise_scale * synthetic_noise("det_visual", s.target_image_id(), r, m.d_dv, ds.seed);
    EXPECT_EQ(RowVector(tar.det_visual.row(r)), v);
    EXPECT_EQ(tar.det_label_names[static_cast<std::size_t>(r)], obj.category);
  }
}

TEST(SyntheticBackend, TargetDetectionsContainTheTargetObject) {
  const auto ds = small_dataset();
  for (const auto& s : ds.scenes) {
    bool found = false;
    for (const auto& o : s.target_detections) found |= o.color == s.target.color && o.category == s.target.category;
    EXPECT_TRUE(found) << s.scene_id;
  }
}

TEST(SyntheticEmbedding, DependsOnEveryKeyComponent) {
  const RowVector a = synthetic_embedding("f", "red", 16, 1);
  EXPECT_EQ(a, synthetic_embedding("f", "red", 16, 1));
  EXPECT_NE(a, synthetic_embedding("g", "red", 16, 1));
  EXPECT_NE(a, synthetic_embedding("f", "blue", 16, 1));
  EXPECT_NE(a, synthetic_embedding("f", "red", 16, 2));
}

TEST(Validation, RejectsDimensionMismatchAndNonFiniteValues) {
  const auto m = instrgen::testing::tiny_manifest();
  RawImageFeatures r = raw_with(m, 2, 1);
  EXPECT_NO_THROW(validate_features(r, m));
  r.grid_multi = RowVector::Zero(m.d_g2 + 1);
  EXPECT_THROW(validate_features(r, m), ManifestMismatch);
  r = raw_with(m, 2, 1);
  r.sgm_text(0) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(validate_features(r, m), InvalidFeatures);
  r = raw_with(m, 2, 1);
  r.det_label = random_matrix(3, m.d_dt, 2);
  EXPECT_THROW(validate_features(r, m), InvalidFeatures);
}

TEST(FileCache, RoundTripsTheSyntheticBackendExactly) {
  TempDir dir("cache");
  const auto ds = small_dataset();
  const auto backend = make_synthetic_backend(ds);
  write_feature_cache(backend, dir.path());
  const FileCacheBackend cache(dir.path());
  EXPECT_EQ(cache.manifest(), backend.manifest());
  EXPECT_EQ(cache.image_ids(), backend.image_ids());
  for (const auto& id : backend.image_ids()) EXPECT_EQ(cache.get_raw_features(id), backend.get_raw_features(id));
  EXPECT_THROW(cache.get_raw_features("xx"), UnknownImage);
}

TEST(FileCache, StoredDimsDisagreeingWithManifestThrowOnLookup) {
  TempDir dir("cache_bad");
  const auto ds = small_dataset();
  const auto backend = make_synthetic_backend(ds);
  write_feature_cache(backend, dir.path());
  ProviderManifest wrong = backend.manifest();
  wrong.d_g1 += 1;
  std::ofstream(dir.path() / "manifest.json") << manifest_to_json(wrong);
  const FileCacheBackend cache(dir.path());
  EXPECT_THROW(cache.get_raw_features(ds.scenes[0].target_image_id()), ManifestMismatch);
}

TEST(Projector, DetectionTokensMatchLoopOracle) {
  Projector p;
  const RawImageFeatures r = raw_with(p.manifest, 3, 4);
  const Matrix tokens = p.proj.build_detection_tokens(r).value();
  ASSERT_EQ(tokens.rows(), 3);
  ASSERT_EQ(tokens.cols(), 8);
  Matrix joined(3, p.manifest.d_dv + p.manifest.d_dt);
  for (Eigen::Index i = 0; i < 3; ++i) {
    for (Eigen::Index c = 0; c < p.manifest.d_dv; ++c) joined(i, c) = r.det_visual(i, c);
    for (Eigen::Index c = 0; c < p.manifest.d_dt; ++c) joined(i, p.manifest.d_dv + c) = r.det_label(i, c);
  }
  EXPECT_LT(max_abs(tokens, loop_affine(p.proj.detection(), joined)), 1e-12);
}

TEST(Projector, NoDetectionsYieldsTheNullToken) {
  Projector p;
  const Matrix tokens = p.proj.build_detection_tokens(raw_with(p.manifest, 0, 4)).value();
  ASSERT_EQ(tokens.rows(), 1);
  EXPECT_EQ(tokens, p.proj.null_token()->value);
}

TEST(Projector, SgmTokenMatchesOracleAndVanishesForZeroInput) {
  Projector p;
  RawImageFeatures r = raw_with(p.manifest, 1, 5);
  EXPECT_LT(max_abs(p.proj.build_sgm_token(r).value(), loop_affine(p.proj.sgm(), r.sgm_text)), 1e-12);
  EXPECT_EQ(p.proj.build_sgm_token(r).value(), p.proj.build_sgm_token(r).value());
  r.sgm_text.setZero();
  p.proj.sgm().bias->value.setZero();
  EXPECT_TRUE(p.proj.build_sgm_token(r).value().isZero(0.0));
}

TEST(Projector, RegionAssemblyStacksTargetBeforeReceptacle) {
  Projector p;
  const RawImageFeatures tar = raw_with(p.manifest, 2, 6);
  const RawImageFeatures rec = raw_with(p.manifest, 3, 7);
  const auto region = p.proj.assemble_region(tar, rec);
  ASSERT_EQ(region.size(), 2u);
  EXPECT_EQ(region[0].rows(), 5);
  Matrix expected(5, 8);
  expected << p.proj.build_detection_tokens(tar).value(), p.proj.build_detection_tokens(rec).value();
  EXPECT_EQ(region[0].value(), expected);
  Matrix sgm(2, 8);
  sgm << p.proj.build_sgm_token(tar).value(), p.proj.build_sgm_token(rec).value();
  EXPECT_EQ(region[1].value(), sgm);
}

TEST(Projector, GridAssemblyMatchesPerSourceOracle) {
  Projector p;
  const RawImageFeatures tar = raw_with(p.manifest, 1, 8);
  const RawImageFeatures rec = raw_with(p.manifest, 2, 9);
  const auto grid = p.proj.assemble_grid(tar, rec);
  ASSERT_EQ(grid.size(), 3u);
  const RowVector* t[3] = {&tar.grid_single, &tar.grid_multi, &tar.grid_mllm};
  const RowVector* r[3] = {&rec.grid_single, &rec.grid_multi, &rec.grid_mllm};
  for (int s = 0; s < 3; ++s) {
    ASSERT_EQ(grid[static_cast<std::size_t>(s)].rows(), 2);
    Matrix expected(2, 8);
    expected << loop_affine(p.proj.grid(s), *t[s]), loop_affine(p.proj.grid(s), *r[s]);
    EXPECT_LT(max_abs(grid[static_cast<std::size_t>(s)].value(), expected), 1e-12);
  }
}

TEST(Projector, IdenticalImagesGiveIdenticalHalves) {
  Projector p;
  const RawImageFeatures img = raw_with(p.manifest, 2, 10);
  const FeatureBundle b = p.proj.assemble(img, img);
  EXPECT_EQ(b.region[0].value().topRows(2), b.region[0].value().bottomRows(2));
  for (const auto& g : b.grid) EXPECT_EQ(g.value().row(0), g.value().row(1));
}

TEST(Projector, SwappingImagesSwapsRowHalves) {
  Projector p;
  const RawImageFeatures a = raw_with(p.manifest, 2, 11);
  const RawImageFeatures b = raw_with(p.manifest, 3, 12);
  const FeatureBundle ab = p.proj.assemble(a, b);
  const FeatureBundle ba = p.proj.assemble(b, a);
  EXPECT_EQ(ab.region[0].value().topRows(2), ba.region[0].value().bottomRows(2));
  EXPECT_EQ(ab.region[0].value().bottomRows(3), ba.region[0].value().topRows(3));
  EXPECT_EQ(ab.region[1].value().row(0), ba.region[1].value().row(1));
  for (std::size_t s = 0; s < 3; ++s) {
    EXPECT_EQ(ab.grid[s].value().row(0), ba.grid[s].value().row(1));
    EXPECT_EQ(ab.grid[s].value().row(1), ba.grid[s].value().row(0));
  }
}

TEST(Projector, BiasFreeProjectionIsLinear) {
  Projector p;
  p.proj.grid(1).bias->value.setZero();
  RawImageFeatures a = raw_with(p.manifest, 1, 13);
  const Matrix base = p.proj.assemble_grid(a, a)[1].value();
  a.grid_multi *= 2.5;
  EXPECT_LT(max_abs(p.proj.assemble_grid(a, a)[1].value(), 2.5 * base), 1e-12);
}
