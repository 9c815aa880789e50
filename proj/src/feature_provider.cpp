#include "instrgen/feature_provider.hpp"

#include "instrgen/errors.hpp"
#include "instrgen/rng.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <sstream>

namespace instrgen {
namespace {

using nlohmann::json;

void check_dim(const char* field, Eigen::Index got, Eigen::Index want, const std::string& id) {
  if (got != want) {
    throw ManifestMismatch(id + ": " + field + " has width " + std::to_string(got) +
                           ", manifest says " + std::to_string(want));
  }
}

json to_json(const RowVector& v) {
  json arr = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v(i));
  return arr;
}

json to_json(const Matrix& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

RowVector vector_from_json(const json& arr, const std::string& what) {
  if (!arr.is_array()) throw InvalidFeatures(what + " is not an array");
  RowVector v(static_cast<Eigen::Index>(arr.size()));
  for (std::size_t i = 0; i < arr.size(); ++i) {
    if (!arr[i].is_number()) throw InvalidFeatures(what + " holds a non-number");
    v(static_cast<Eigen::Index>(i)) = arr[i].get<double>();
  }
  return v;
}

// Width comes from the first row; an empty list takes the manifest width.
Matrix matrix_from_json(const json& rows, Eigen::Index empty_cols, const std::string& what) {
  if (!rows.is_array()) throw InvalidFeatures(what + " is not an array");
  if (rows.empty()) return Matrix(0, empty_cols);
  const RowVector first = vector_from_json(rows[0], what);
  Matrix m(static_cast<Eigen::Index>(rows.size()), first.size());
  m.row(0) = first;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const RowVector r = vector_from_json(rows[i], what);
    if (r.size() != first.size()) throw InvalidFeatures(what + " is ragged");
    m.row(static_cast<Eigen::Index>(i)) = r;
  }
  return m;
}

ag::Var row_constant(const RowVector& v) { return ag::constant(Matrix(v)); }

}  // namespace

void ProviderManifest::validate() const {
  for (Eigen::Index d : {d_dv, d_dt, d_sg, d_g1, d_g2, d_g3}) {
    if (d <= 0) throw ConfigError("manifest dimensions must be positive");
  }
  if (backend_name == "synthetic" && vocabulary.empty()) {
    throw ConfigError("synthetic manifest needs a non-empty vocabulary");
  }
}

void validate_features(const RawImageFeatures& raw, const ProviderManifest& m) {
  const auto& id = raw.image_id;
  check_dim("det_visual", raw.det_visual.cols(), m.d_dv, id);
  check_dim("det_label", raw.det_label.cols(), m.d_dt, id);
  check_dim("sgm_text", raw.sgm_text.size(), m.d_sg, id);
  check_dim("grid_single", raw.grid_single.size(), m.d_g1, id);
  check_dim("grid_multi", raw.grid_multi.size(), m.d_g2, id);
  check_dim("grid_mllm", raw.grid_mllm.size(), m.d_g3, id);
  if (raw.det_visual.rows() != raw.det_label.rows() ||
      static_cast<std::size_t>(raw.det_visual.rows()) != raw.det_label_names.size()) {
    throw InvalidFeatures(id + ": detection rows, label rows and names disagree");
  }
  const bool finite = raw.det_visual.allFinite() && raw.det_label.allFinite() &&
                      raw.sgm_text.allFinite() && raw.grid_single.allFinite() &&
                      raw.grid_multi.allFinite() && raw.grid_mllm.allFinite();
  if (!finite) throw InvalidFeatures(id + ": non-finite value");
}

RowVector synthetic_embedding(std::string_view field, std::string_view token, Eigen::Index dim,
                              std::uint64_t seed) {
  Rng rng(mix_seed(seed, fnv1a64(token, fnv1a64(field))));
  std::normal_distribution<double> dist(0.0, 1.0);
  RowVector v(dim);
  for (Eigen::Index i = 0; i < dim; ++i) v(i) = dist(rng);
  return v;
}

RowVector synthetic_noise(std::string_view field, std::string_view image_id, Eigen::Index row,
                          Eigen::Index dim, std::uint64_t seed) {
  const std::uint64_t key = fnv1a64(image_id, fnv1a64(field, 0x6e6f697365ULL));
  Rng rng(mix_seed(mix_seed(seed, key), static_cast<std::uint64_t>(row)));
  std::normal_distribution<double> dist(0.0, 1.0);
  RowVector v(dim);
  for (Eigen::Index i = 0; i < dim; ++i) v(i) = dist(rng);
  return v;
}

SyntheticBackend::SyntheticBackend(ProviderManifest manifest, std::vector<ImageDescription> images,
                                   std::uint64_t seed, double noise_scale)
    : manifest_(std::move(manifest)), seed_(seed), noise_scale_(noise_scale) {
  manifest_.validate();
  for (auto& img : images) {
    const std::string id = img.image_id;
    images_.emplace(id, std::move(img));
  }
}

bool SyntheticBackend::contains(const std::string& image_id) const {
  return images_.count(image_id) != 0;
}

std::vector<std::string> SyntheticBackend::image_ids() const {
  std::vector<std::string> ids;
  for (const auto& [id, _] : images_) ids.push_back(id);
  return ids;
}

RawImageFeatures SyntheticBackend::get_raw_features(const std::string& image_id) const {
  auto it = images_.find(image_id);
  if (it == images_.end()) throw UnknownImage("no synthetic image '" + image_id + "'");
  const ImageDescription& img = it->second;
  const auto& m = manifest_;

  RawImageFeatures raw;
  raw.image_id = image_id;
  const auto k = static_cast<Eigen::Index>(img.objects.size());
  raw.det_visual = Matrix::Zero(k, m.d_dv);
  raw.det_label = Matrix::Zero(k, m.d_dt);
  for (Eigen::Index r = 0; r < k; ++r) {
    const auto& obj = img.objects[static_cast<std::size_t>(r)];
    raw.det_visual.row(r) = synthetic_embedding("det_visual", obj.color, m.d_dv, seed_) +
                            synthetic_embedding("det_visual", obj.category, m.d_dv, seed_) +
                            noise_scale_ * synthetic_noise("det_visual", image_id, r, m.d_dv, seed_);
    raw.det_label.row(r) = synthetic_embedding("det_label", obj.category, m.d_dt, seed_);
    raw.det_label_names.push_back(obj.category);
  }

  auto sum_of = [&](std::string_view field, const std::vector<std::string>& words, Eigen::Index dim) {
    RowVector v = RowVector::Zero(dim);
    for (const auto& w : words) v += synthetic_embedding(field, w, dim, seed_);
    return v;
  };
  raw.sgm_text = sum_of("sgm", img.description_words, m.d_sg);
  raw.grid_single = sum_of("grid_single", img.scene_words, m.d_g1) +
                    noise_scale_ * synthetic_noise("grid_single", image_id, 0, m.d_g1, seed_);
  raw.grid_multi = sum_of("grid_multi", img.scene_words, m.d_g2) +
                   noise_scale_ * synthetic_noise("grid_multi", image_id, 0, m.d_g2, seed_);
  raw.grid_mllm = sum_of("grid_mllm", img.scene_words, m.d_g3) +
                  noise_scale_ * synthetic_noise("grid_mllm", image_id, 0, m.d_g3, seed_);
  validate_features(raw, m);
  return raw;
}

std::string manifest_to_json(const ProviderManifest& m) {
  json j;
  j["d_dv"] = m.d_dv;
  j["d_dt"] = m.d_dt;
  j["d_sg"] = m.d_sg;
  j["d_g1"] = m.d_g1;
  j["d_g2"] = m.d_g2;
  j["d_g3"] = m.d_g3;
  j["backend_name"] = m.backend_name;
  j["vocabulary"] = m.vocabulary;
  return j.dump(2);
}

ProviderManifest manifest_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    ProviderManifest m;
    m.d_dv = j.at("d_dv").get<Eigen::Index>();
    m.d_dt = j.at("d_dt").get<Eigen::Index>();
    m.d_sg = j.at("d_sg").get<Eigen::Index>();
    m.d_g1 = j.at("d_g1").get<Eigen::Index>();
    m.d_g2 = j.at("d_g2").get<Eigen::Index>();
    m.d_g3 = j.at("d_g3").get<Eigen::Index>();
    m.backend_name = j.at("backend_name").get<std::string>();
    m.vocabulary = j.at("vocabulary").get<std::vector<std::string>>();
    m.validate();
    return m;
  } catch (const json::exception& e) {
    throw InvalidFeatures(std::string("manifest.json: ") + e.what());
  }
}

FileCacheBackend::FileCacheBackend(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  const fs::path manifest_path = dir / "manifest.json";
  std::ifstream in(manifest_path);
  if (!in) throw IoError("cannot read " + manifest_path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  manifest_ = manifest_from_json(ss.str());

  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file() || entry.path().extension() != ".json" ||
        entry.path().filename() == "manifest.json") {
      continue;
    }
    std::ifstream f(entry.path());
    json j;
    try {
      j = json::parse(f);
    } catch (const json::exception& e) {
      throw InvalidFeatures(entry.path().string() + ": " + e.what());
    }
    RawImageFeatures raw;
    try {
      raw.image_id = j.at("image_id").get<std::string>();
      raw.det_visual = matrix_from_json(j.at("det_visual"), manifest_.d_dv, raw.image_id + ".det_visual");
      raw.det_label = matrix_from_json(j.at("det_label"), manifest_.d_dt, raw.image_id + ".det_label");
      raw.det_label_names = j.at("det_label_names").get<std::vector<std::string>>();
      raw.sgm_text = vector_from_json(j.at("sgm_text"), "sgm_text");
      raw.grid_single = vector_from_json(j.at("grid_single"), "grid_single");
      raw.grid_multi = vector_from_json(j.at("grid_multi"), "grid_multi");
      raw.grid_mllm = vector_from_json(j.at("grid_mllm"), "grid_mllm");
    } catch (const json::exception& e) {
      throw InvalidFeatures(entry.path().string() + ": " + e.what());
    }
    const std::string id = raw.image_id;
    records_.emplace(id, std::move(raw));
  }
}

bool FileCacheBackend::contains(const std::string& image_id) const {
  return records_.count(image_id) != 0;
}

std::vector<std::string> FileCacheBackend::image_ids() const {
  std::vector<std::string> ids;
  for (const auto& [id, _] : records_) ids.push_back(id);
  return ids;
}

RawImageFeatures FileCacheBackend::get_raw_features(const std::string& image_id) const {
  auto it = records_.find(image_id);
  if (it == records_.end()) throw UnknownImage("no cached features for '" + image_id + "'");
  validate_features(it->second, manifest_);
  return it->second;
}

void write_feature_cache(const FeatureBackend& backend, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  {
    std::ofstream out(dir / "manifest.json");
    if (!out) throw IoError("cannot write " + (dir / "manifest.json").string());
    out << manifest_to_json(backend.manifest()) << '\n';
  }
  for (const auto& id : backend.image_ids()) {
    const RawImageFeatures raw = backend.get_raw_features(id);
    json j;
    j["image_id"] = raw.image_id;
    j["det_visual"] = to_json(raw.det_visual);
    j["det_label"] = to_json(raw.det_label);
    j["det_label_names"] = raw.det_label_names;
    j["sgm_text"] = to_json(raw.sgm_text);
    j["grid_single"] = to_json(raw.grid_single);
    j["grid_multi"] = to_json(raw.grid_multi);
    j["grid_mllm"] = to_json(raw.grid_mllm);
    std::ofstream out(dir / (id + ".json"));
    if (!out) throw IoError("cannot write feature record for " + id);
    out << j.dump() << '\n';
    if (!out) throw IoError("short write for " + id);
  }
}

FeatureProjector::FeatureProjector(nn::ParameterRegistry& reg, const std::string& name,
                                   const ProviderManifest& m, Eigen::Index d_model, Rng& rng)
    : det_(reg, name + ".detection", m.d_dv + m.d_dt, d_model, rng),
      null_(reg.normal(name + ".null_token", 1, d_model, 0.5, rng)),
      sgm_(reg, name + ".sgm", m.d_sg, d_model, rng),
      d_model_(d_model) {
  grid_.emplace_back(reg, name + ".grid_single", m.d_g1, d_model, rng);
  grid_.emplace_back(reg, name + ".grid_multi", m.d_g2, d_model, rng);
  grid_.emplace_back(reg, name + ".grid_mllm", m.d_g3, d_model, rng);
}

ag::Var FeatureProjector::build_detection_tokens(const RawImageFeatures& raw) const {
  if (raw.detections() == 0) return ag::param(null_);
  Matrix joined(raw.det_visual.rows(), raw.det_visual.cols() + raw.det_label.cols());
  joined << raw.det_visual, raw.det_label;
  return det_(ag::constant(std::move(joined)));
}

ag::Var FeatureProjector::build_sgm_token(const RawImageFeatures& raw) const {
  return sgm_(row_constant(raw.sgm_text));
}

std::vector<ag::Var> FeatureProjector::assemble_region(const RawImageFeatures& target,
                                                       const RawImageFeatures& receptacle) const {
  const std::vector<ag::Var> det{build_detection_tokens(target), build_detection_tokens(receptacle)};
  const std::vector<ag::Var> sgm{build_sgm_token(target), build_sgm_token(receptacle)};
  return {ag::row_concat(det), ag::row_concat(sgm)};
}

std::vector<ag::Var> FeatureProjector::assemble_grid(const RawImageFeatures& target,
                                                     const RawImageFeatures& receptacle) const {
  const RowVector* tar[3] = {&target.grid_single, &target.grid_multi, &target.grid_mllm};
  const RowVector* rec[3] = {&receptacle.grid_single, &receptacle.grid_multi, &receptacle.grid_mllm};
  std::vector<ag::Var> out;
  for (std::size_t s = 0; s < 3; ++s) {
    const std::vector<ag::Var> pair{grid_[s](row_constant(*tar[s])), grid_[s](row_constant(*rec[s]))};
    out.push_back(ag::row_concat(pair));
  }
  return out;
}

FeatureBundle FeatureProjector::assemble(const RawImageFeatures& target,
                                         const RawImageFeatures& receptacle) const {
  return {assemble_region(target, receptacle), assemble_grid(target, receptacle)};
}

}  // namespace instrgen
