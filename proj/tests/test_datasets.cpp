#include "instrgen/datasets.hpp"
#include "instrgen/errors.hpp"
#include "instrgen/pipeline.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <set>
#include <sstream>

using namespace instrgen;
using instrgen::testing::TempDir;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::map<std::string, std::string> directory_contents(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = slurp(e.path());
  }
  return out;
}

bool contains_word(const std::string& sentence, const std::string& word) {
  const auto toks = metrics::tokenize(sentence);
  return std::find(toks.begin(), toks.end(), word) != toks.end();
}

}  // namespace

TEST(Generator, SameSeedGivesByteIdenticalFiles) {
  TempDir a("ds_a");
  TempDir b("ds_b");
  write_dataset_dir(generate_synthetic_dataset(12, 5, {0.5, 0.25, 0.25}), a.path());
  write_dataset_dir(generate_synthetic_dataset(12, 5, {0.5, 0.25, 0.25}), b.path());
  const auto ca = directory_contents(a.path());
  EXPECT_GT(ca.size(), 12u);
  EXPECT_EQ(ca, directory_contents(b.path()));
  EXPECT_NE(generate_synthetic_dataset(12, 6, {0.5, 0.25, 0.25}).train,
            generate_synthetic_dataset(12, 5, {0.5, 0.25, 0.25}).train);
}

TEST(Generator, SplitSizesFollowRatios) {
  const auto ds = generate_synthetic_dataset(100, 1, {0.8, 0.1, 0.1});
  EXPECT_EQ(ds.train.size(), 80u);
  EXPECT_EQ(ds.val.size(), 10u);
  EXPECT_EQ(ds.test.size(), 10u);
  EXPECT_EQ(ds.scenes.size(), 100u);
}

TEST(Generator, SplitsAreDisjoint) {
  const auto ds = generate_synthetic_dataset(50, 2, {0.6, 0.2, 0.2});
  std::set<std::string> seen;
  for (const auto* split : {&ds.train, &ds.val, &ds.test}) {
    for (const auto& p : *split) EXPECT_TRUE(seen.insert(p.sample_id).second) << p.sample_id;
  }
  EXPECT_EQ(seen.size(), 50u);
}

TEST(Generator, BadRatiosAreRejected) {
  EXPECT_THROW(generate_synthetic_dataset(10, 1, {0.5, 0.5, 0.5}), BadRatios);
  EXPECT_THROW(generate_synthetic_dataset(10, 1, {1.2, -0.1, -0.1}), BadRatios);
  EXPECT_THROW(generate_synthetic_dataset(0, 1, {0.8, 0.1, 0.1}), BadRatios);
}

// Cross-check every reference against the scene record it was rendered from.
TEST(Generator, ReferencesCarryTheSceneAttributes) {
  const GeneratorConfig cfg;
  const auto ds = generate_synthetic_dataset(60, 3, {1.0, 0.0, 0.0}, cfg);
  std::map<std::string, const Scene*> by_id;
  for (const auto& s : ds.scenes) by_id[s.scene_id] = &s;
  for (const auto& p : ds.train) {
    const Scene& s = *by_id.at(p.sample_id);
    ASSERT_GE(p.references.size(), 1u);
    ASSERT_LE(p.references.size(), 3u);
    EXPECT_EQ(p.target_image_id, s.target_image_id());
    for (const auto& r : p.references) {
      EXPECT_TRUE(contains_word(r, s.target.color)) << r;
      EXPECT_TRUE(contains_word(r, s.target.category)) << r;
      EXPECT_TRUE(contains_word(r, s.receptacle.category)) << r;
      // Every closed-vocabulary word in the sentence belongs to this scene.
      for (const auto& tok : metrics::tokenize(r)) {
        if (std::count(cfg.colors.begin(), cfg.colors.end(), tok)) EXPECT_EQ(tok, s.target.color);
        if (std::count(cfg.rooms.begin(), cfg.rooms.end(), tok)) EXPECT_EQ(tok, s.target.room);
        if (std::count(cfg.materials.begin(), cfg.materials.end(), tok)) EXPECT_EQ(tok, s.receptacle.material);
        if (std::count(cfg.supports.begin(), cfg.supports.end(), tok)) EXPECT_EQ(tok, s.target.support);
      }
    }
    EXPECT_EQ(p.references[0], render_reference(reference_templates()[0], s));
  }
}

TEST(Generator, EveryImageIdResolvesInTheBackend) {
  const auto ds = generate_synthetic_dataset(20, 4, {0.5, 0.25, 0.25});
  const auto backend = make_synthetic_backend(ds);
  for (const auto& p : ds.all_pairs()) {
    EXPECT_TRUE(backend.contains(p.target_image_id));
    EXPECT_TRUE(backend.contains(p.receptacle_image_id));
  }
}

TEST(SceneRecords, JsonRoundTrip) {
  const auto ds = generate_synthetic_dataset(5, 7, {0.6, 0.2, 0.2});
  for (const auto& s : ds.scenes) EXPECT_EQ(scene_from_json(scene_to_json(s)), s);
  TempDir dir("scenes");
  write_dataset_dir(ds, dir.path());
  EXPECT_EQ(load_scenes(dir.path() / "scenes"), ds.scenes);
}

TEST(DatasetIo, SaveLoadRoundTrip) {
  const auto ds = generate_synthetic_dataset(10, 8, {0.8, 0.1, 0.1});
  TempDir dir("io");
  save_dataset(ds.train, dir.path() / "train.jsonl");
  EXPECT_EQ(load_dataset(dir.path() / "train.jsonl"), ds.train);
}

TEST(DatasetIo, MalformedLineReportsItsNumber) {
  const auto ds = generate_synthetic_dataset(10, 8, {1.0, 0.0, 0.0});
  TempDir dir("bad");
  const fs::path path = dir.path() / "d.jsonl";
  save_dataset(ds.train, path);
  std::string text = slurp(path);
  std::size_t pos = 0;
  for (int line = 1; line < 7; ++line) pos = text.find('\n', pos) + 1;
  text.insert(pos, "{not json");
  std::ofstream(path, std::ios::binary) << text;
  try {
    load_dataset(path);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 7u);
  }
}

TEST(DatasetIo, DanglingImageIdIsDetected) {
  auto ds = generate_synthetic_dataset(6, 9, {1.0, 0.0, 0.0});
  const auto backend = make_synthetic_backend(ds);
  TempDir dir("dangling");
  auto pairs = ds.train;
  pairs[2].receptacle_image_id = "ghost_rec";
  save_dataset(pairs, dir.path() / "d.jsonl");
  EXPECT_THROW(load_dataset(dir.path() / "d.jsonl", &backend), DanglingImageId);
  EXPECT_NO_THROW(load_dataset(dir.path() / "d.jsonl"));
}

TEST(Vocab, SingleReferenceGivesFourWordsAndFourSpecials) {
  const Vocab v = Vocab::build({{"s", "a", "b", {"move the cup ."}}});
  EXPECT_EQ(v.size(), 8);
  EXPECT_EQ(v.token(Vocab::kPad), "<pad>");
  EXPECT_EQ(v.token(Vocab::kUnk), "<unk>");
  for (int i = Vocab::kSpecials; i < v.size(); ++i) EXPECT_FALSE(v.is_special(i));
}

TEST(Vocab, OrdersByFrequencyThenLexicographically) {
  const Vocab v = Vocab::build({{"s", "a", "b", {"b a c a", "c"}}});
  EXPECT_EQ(v.token(4), "a");
  EXPECT_EQ(v.token(5), "c");
  EXPECT_EQ(v.token(6), "b");
}

TEST(Vocab, EncodeDecodeRoundTripAndUnknownWords) {
  const auto ds = generate_synthetic_dataset(30, 1, {1.0, 0.0, 0.0});
  const Vocab v = Vocab::build(ds.train);
  for (const auto& p : ds.train) {
    for (const auto& r : p.references) EXPECT_EQ(v.decode(v.encode(r)), metrics::join(metrics::tokenize(r)));
  }
  const auto ids = v.encode("move the zeppelin");
  EXPECT_EQ(ids.back(), Vocab::kUnk);
  EXPECT_EQ(v.id("zeppelin"), Vocab::kUnk);
  std::set<int> seen;
  for (const auto& t : v.tokens()) EXPECT_TRUE(seen.insert(v.id(t)).second);
}

TEST(Vocab, DecodeStopsAtEosAndSkipsPadAndBos) {
  const Vocab v = Vocab::from_tokens({"move", "cup"});
  EXPECT_EQ(v.decode({Vocab::kBos, 4, Vocab::kPad, 5, Vocab::kEos, 4}), "move cup");
  EXPECT_EQ(v.decode({4, Vocab::kUnk}), "move <unk>");
}

TEST(Augmentation, OneSentencePerPairStableAndReloadable) {
  auto toy = instrgen::testing::toy_data(8, 3, instrgen::testing::tiny_manifest());
  const auto backend = make_synthetic_backend(toy.dataset);
  InstructionModel model(instrgen::testing::tiny_dims(), toy.dataset.manifest, Vocab::build(toy.dataset.train), 4);
  const auto a = emit_augmented_dataset(model, toy.dataset.train, backend, 3);
  const auto b = emit_augmented_dataset(model, toy.dataset.train, backend, 3);
  EXPECT_EQ(a, b);
  ASSERT_EQ(a.size(), toy.dataset.train.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].references.size(), 1u);
    EXPECT_LE(model.decoder_target_ids(a[i].references[0]).size(), static_cast<std::size_t>(model.dims().max_len));
    EXPECT_LE(model.text_branch_ids(a[i].references[0]).size(), static_cast<std::size_t>(model.dims().max_text_len));
    EXPECT_EQ(a[i].target_image_id, toy.dataset.train[i].target_image_id);
    EXPECT_EQ(a[i].receptacle_image_id, toy.dataset.train[i].receptacle_image_id);
  }
  TempDir dir("aug");
  save_dataset(a, dir.path() / "aug.jsonl");
  EXPECT_EQ(load_dataset(dir.path() / "aug.jsonl", &backend), a);
}
