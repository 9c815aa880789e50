#include "instrgen/datasets.hpp"

#include "instrgen/errors.hpp"
#include "instrgen/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace instrgen {
namespace {

using ojson = nlohmann::ordered_json;

template <typename T>
const T& pick(const std::vector<T>& v, Rng& rng) {
  std::uniform_int_distribution<std::size_t> d(0, v.size() - 1);
  return v[d(rng)];
}

int uniform_int(int lo, int hi, Rng& rng) {
  std::uniform_int_distribution<int> d(lo, hi);
  return d(rng);
}

void replace_all(std::string& s, const std::string& from, const std::string& to) {
  for (std::size_t pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size())) {
    s.replace(pos, from.size(), to);
  }
}

ojson objects_to_json(const std::vector<DetectedObject>& objs) {
  ojson arr = ojson::array();
  for (const auto& o : objs) arr.push_back({{"color", o.color}, {"category", o.category}});
  return arr;
}

std::vector<DetectedObject> objects_from_json(const ojson& arr) {
  std::vector<DetectedObject> out;
  for (const auto& o : arr) {
    out.push_back({o.at("color").get<std::string>(), o.at("category").get<std::string>()});
  }
  return out;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

bool Scene::operator==(const Scene& o) const {
  auto same_objects = [](const std::vector<DetectedObject>& a, const std::vector<DetectedObject>& b) {
    return std::equal(a.begin(), a.end(), b.begin(), b.end(), [](const auto& x, const auto& y) {
      return x.color == y.color && x.category == y.category;
    });
  };
  return scene_id == o.scene_id && target == o.target && receptacle == o.receptacle &&
         same_objects(target_detections, o.target_detections) &&
         same_objects(receptacle_detections, o.receptacle_detections) && seed == o.seed;
}

std::vector<std::string> reference_templates() {
  return {
      "move the {color} {category} on the {support} to the {material} {receptacle} in the {room}.",
      "put the {color} {category} from the {support} {relation} the {receptacle} in the {room}.",
      "bring the {color} {category} to the {receptacle} in the {room}.",
      "take the {color} {category} and place it {relation} the {material} {receptacle}.",
  };
}

std::string render_reference(const std::string& templ, const Scene& s) {
  std::string out = templ;
  replace_all(out, "{color}", s.target.color);
  replace_all(out, "{category}", s.target.category);
  replace_all(out, "{support}", s.target.support);
  replace_all(out, "{room}", s.target.room);
  replace_all(out, "{receptacle}", s.receptacle.category);
  replace_all(out, "{material}", s.receptacle.material);
  replace_all(out, "{relation}", s.receptacle.relation);
  return out;
}

std::vector<SamplePair> SyntheticDataset::all_pairs() const {
  std::vector<SamplePair> all = train;
  all.insert(all.end(), val.begin(), val.end());
  all.insert(all.end(), test.begin(), test.end());
  return all;
}

SyntheticDataset generate_synthetic_dataset(int n, std::uint64_t seed, SplitRatios ratios,
                                            const GeneratorConfig& cfg) {
  if (n < 1) throw BadRatios("need at least one scene");
  if (ratios.train < 0 || ratios.val < 0 || ratios.test < 0 ||
      std::abs(ratios.train + ratios.val + ratios.test - 1.0) > 1e-6) {
    throw BadRatios("split ratios must be nonnegative and sum to 1");
  }
  const int n_train = static_cast<int>(std::lround(n * ratios.train));
  const int n_val = static_cast<int>(std::lround(n * ratios.val));
  if (n_train + n_val > n) throw BadRatios("rounded splits exceed the scene count");

  SyntheticDataset ds;
  ds.seed = seed;
  ds.noise_scale = cfg.noise_scale;
  ds.manifest = cfg.manifest;
  ds.manifest.backend_name = "synthetic";
  {
    std::set<std::string> nouns(cfg.categories.begin(), cfg.categories.end());
    nouns.insert(cfg.supports.begin(), cfg.supports.end());
    nouns.insert(cfg.receptacles.begin(), cfg.receptacles.end());
    ds.manifest.vocabulary.assign(nouns.begin(), nouns.end());
  }

  const auto templates = reference_templates();
  const int width = static_cast<int>(std::to_string(n - 1).size());
  for (int i = 0; i < n; ++i) {
    Scene s;
    std::string idx = std::to_string(i);
    s.scene_id = "scene" + std::string(static_cast<std::size_t>(std::max(0, width - static_cast<int>(idx.size()))), '0') + idx;
    s.seed = mix_seed(seed, static_cast<std::uint64_t>(i));
    Rng rng(s.seed);
    s.target.color = pick(cfg.colors, rng);
    s.target.category = pick(cfg.categories, rng);
    s.target.support = pick(cfg.supports, rng);
    s.target.room = pick(cfg.rooms, rng);
    s.receptacle.category = pick(cfg.receptacles, rng);
    s.receptacle.material = pick(cfg.materials, rng);
    s.receptacle.room = s.target.room;
    s.receptacle.relation = pick(cfg.relations, rng);

    const int n_distract = uniform_int(0, cfg.max_distractors, rng);
    s.target_detections.push_back({s.target.color, s.target.category});
    while (static_cast<int>(s.target_detections.size()) < n_distract + 1) {
      DetectedObject d{pick(cfg.colors, rng), pick(cfg.categories, rng)};
      if (d.color == s.target.color && d.category == s.target.category) continue;
      s.target_detections.push_back(d);
    }
    std::shuffle(s.target_detections.begin(), s.target_detections.end(), rng);
    const int n_near = uniform_int(0, cfg.max_distractors, rng);
    for (int k = 0; k < n_near; ++k) {
      s.receptacle_detections.push_back({pick(cfg.colors, rng), pick(cfg.categories, rng)});
    }

    SamplePair p;
    p.sample_id = s.scene_id;
    p.target_image_id = s.target_image_id();
    p.receptacle_image_id = s.receptacle_image_id();
    const int n_refs = uniform_int(cfg.min_references, cfg.max_references, rng);
    std::vector<std::size_t> extra(templates.size() - 1);
    for (std::size_t t = 0; t < extra.size(); ++t) extra[t] = t + 1;
    std::shuffle(extra.begin(), extra.end(), rng);
    p.references.push_back(render_reference(templates[0], s));
    for (int r = 1; r < n_refs && static_cast<std::size_t>(r) <= extra.size(); ++r) {
      p.references.push_back(render_reference(templates[extra[static_cast<std::size_t>(r - 1)]], s));
    }

    if (i < n_train) {
      ds.train.push_back(std::move(p));
    } else if (i < n_train + n_val) {
      ds.val.push_back(std::move(p));
    } else {
      ds.test.push_back(std::move(p));
    }
    ds.scenes.push_back(std::move(s));
  }
  return ds;
}

std::vector<ImageDescription> describe_images(const Scene& s) {
  ImageDescription tar;
  tar.image_id = s.target_image_id();
  tar.objects = s.target_detections;
  tar.scene_words = {s.target.color, s.target.category, s.target.support, s.target.room};
  tar.description_words = tar.scene_words;

  ImageDescription rec;
  rec.image_id = s.receptacle_image_id();
  rec.objects = s.receptacle_detections;
  rec.scene_words = {s.receptacle.material, s.receptacle.category, s.receptacle.room};
  rec.description_words = {s.receptacle.material, s.receptacle.category, s.receptacle.relation,
                           s.receptacle.room};
  return {tar, rec};
}

SyntheticBackend make_synthetic_backend(const SyntheticDataset& ds) {
  std::vector<ImageDescription> images;
  for (const auto& s : ds.scenes) {
    for (auto& d : describe_images(s)) images.push_back(std::move(d));
  }
  return SyntheticBackend(ds.manifest, std::move(images), ds.seed, ds.noise_scale);
}

metrics::ImageAttributes target_attributes(const Scene& s) {
  return {{s.target.color, s.target.category, s.target.room}};
}

metrics::ImageAttributes receptacle_attributes(const Scene& s) {
  return {{s.receptacle.material, s.receptacle.category, s.receptacle.room}};
}

AttributeIndex::AttributeIndex(const std::vector<Scene>& scenes) {
  for (const auto& s : scenes) {
    index_[s.target_image_id()] = target_attributes(s);
    index_[s.receptacle_image_id()] = receptacle_attributes(s);
  }
}

const metrics::ImageAttributes& AttributeIndex::at(const std::string& image_id) const {
  auto it = index_.find(image_id);
  if (it == index_.end()) throw MissingAttributes("no scene record for image '" + image_id + "'");
  return it->second;
}

std::string scene_to_json(const Scene& s) {
  ojson j;
  j["scene_id"] = s.scene_id;
  j["seed"] = s.seed;
  j["target"] = {{"color", s.target.color},
                 {"category", s.target.category},
                 {"support_surface", s.target.support},
                 {"room", s.target.room}};
  j["receptacle"] = {{"category", s.receptacle.category},
                     {"material", s.receptacle.material},
                     {"room", s.receptacle.room},
                     {"relation", s.receptacle.relation}};
  j["target_detections"] = objects_to_json(s.target_detections);
  j["receptacle_detections"] = objects_to_json(s.receptacle_detections);
  return j.dump(2);
}

Scene scene_from_json(const std::string& text) {
  try {
    const ojson j = ojson::parse(text);
    Scene s;
    s.scene_id = j.at("scene_id").get<std::string>();
    s.seed = j.at("seed").get<std::uint64_t>();
    const auto& t = j.at("target");
    s.target = {t.at("color").get<std::string>(), t.at("category").get<std::string>(),
                t.at("support_surface").get<std::string>(), t.at("room").get<std::string>()};
    const auto& r = j.at("receptacle");
    s.receptacle = {r.at("category").get<std::string>(), r.at("material").get<std::string>(),
                    r.at("room").get<std::string>(), r.at("relation").get<std::string>()};
    s.target_detections = objects_from_json(j.at("target_detections"));
    s.receptacle_detections = objects_from_json(j.at("receptacle_detections"));
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(0, std::string("scene record: ") + e.what());
  }
}

void write_dataset_dir(const SyntheticDataset& ds, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir / "scenes", ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  save_dataset(ds.train, dir / "train.jsonl");
  save_dataset(ds.val, dir / "val.jsonl");
  save_dataset(ds.test, dir / "test.jsonl");
  for (const auto& s : ds.scenes) {
    std::ofstream out(dir / "scenes" / (s.scene_id + ".json"));
    if (!out) throw IoError("cannot write scene " + s.scene_id);
    out << scene_to_json(s) << '\n';
  }
  write_feature_cache(make_synthetic_backend(ds), dir / "features");
}

std::vector<Scene> load_scenes(const std::filesystem::path& scenes_dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(scenes_dir)) throw IoError("no scene directory at " + scenes_dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(scenes_dir)) {
    if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<Scene> scenes;
  for (const auto& f : files) scenes.push_back(scene_from_json(read_file(f)));
  return scenes;
}

void save_dataset(const std::vector<SamplePair>& pairs, const std::filesystem::path& path) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& p : pairs) {
    ojson j;
    j["sample_id"] = p.sample_id;
    j["target_image_id"] = p.target_image_id;
    j["receptacle_image_id"] = p.receptacle_image_id;
    j["references"] = p.references;
    out << j.dump() << '\n';
  }
  if (!out) throw IoError("short write to " + path.string());
}

std::vector<SamplePair> load_dataset(const std::filesystem::path& path, const FeatureBackend* backend) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::vector<SamplePair> pairs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    SamplePair p;
    try {
      const ojson j = ojson::parse(line);
      p.sample_id = j.at("sample_id").get<std::string>();
      p.target_image_id = j.at("target_image_id").get<std::string>();
      p.receptacle_image_id = j.at("receptacle_image_id").get<std::string>();
      p.references = j.at("references").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(lineno, e.what());
    }
    if (p.references.empty()) throw ParseError(lineno, "sample has no references");
    if (backend) {
      for (const auto* id : {&p.target_image_id, &p.receptacle_image_id}) {
        if (!backend->contains(*id)) {
          throw DanglingImageId("line " + std::to_string(lineno) + " references '" + *id + "'");
        }
      }
    }
    pairs.push_back(std::move(p));
  }
  return pairs;
}

Vocab::Vocab() : tokens_{"<pad>", "<bos>", "<eos>", "<unk>"} {
  for (int i = 0; i < kSpecials; ++i) ids_[tokens_[static_cast<std::size_t>(i)]] = i;
}

Vocab Vocab::build(const std::vector<SamplePair>& pairs) {
  std::map<std::string, int> freq;
  for (const auto& p : pairs) {
    for (const auto& r : p.references) {
      for (const auto& t : metrics::tokenize(r)) ++freq[t];
    }
  }
  std::vector<std::pair<std::string, int>> words(freq.begin(), freq.end());
  std::stable_sort(words.begin(), words.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens;
  for (const auto& [w, _] : words) tokens.push_back(w);
  return from_tokens(tokens);
}

Vocab Vocab::from_tokens(const std::vector<std::string>& tokens) {
  Vocab v;
  for (const auto& t : tokens) {
    if (v.ids_.count(t) != 0) continue;
    v.ids_[t] = static_cast<int>(v.tokens_.size());
    v.tokens_.push_back(t);
  }
  return v;
}

int Vocab::id(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnk : it->second;
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || id >= size()) throw ShapeMismatch("token id out of range");
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocab::encode(const std::string& text) const {
  std::vector<int> ids;
  for (const auto& t : metrics::tokenize(text)) ids.push_back(id(t));
  return ids;
}

std::string Vocab::decode(const std::vector<int>& ids) const {
  metrics::Tokens words;
  for (int i : ids) {
    if (i == kEos) break;
    if (i == kPad || i == kBos) continue;
    words.push_back(token(i));
  }
  return metrics::join(words);
}

}  // namespace instrgen
