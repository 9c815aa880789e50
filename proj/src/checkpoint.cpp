#include "instrgen/checkpoint.hpp"

#include "instrgen/errors.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace instrgen {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

constexpr char kMagic[] = "IGCKPT01";
constexpr std::size_t kMagicLen = 8;

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes, std::size_t end) : bytes_(bytes), end_(end) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string str(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  void doubles(double* dst, std::size_t n) {
    if (n > (end_ - pos_) / sizeof(double)) throw CorruptCheckpoint("checkpoint truncated");
    std::memcpy(dst, bytes_.data() + pos_, n * sizeof(double));
    pos_ += n * sizeof(double);
  }

  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (n > end_ - pos_) throw CorruptCheckpoint("checkpoint truncated");
  }

  const std::string& bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

nlohmann::json manifest_json(const ProviderManifest& m) { return nlohmann::json::parse(manifest_to_json(m)); }

}  // namespace

nlohmann::json dims_to_json(const ModelDims& d) {
  return nlohmann::json{{"d_model", d.d_model},       {"queries", d.queries},
                        {"layers", d.layers},         {"heads", d.heads},
                        {"ffn_multiplier", d.ffn_multiplier}, {"max_text_len", d.max_text_len},
                        {"d_dec", d.d_dec},           {"lm_layers", d.lm_layers},
                        {"lm_heads", d.lm_heads},     {"max_len", d.max_len}};
}

ModelDims dims_from_json(const nlohmann::json& j, ModelDims d) {
  try {
    if (j.contains("d_model")) d.d_model = j.at("d_model").get<Eigen::Index>();
    if (j.contains("queries")) d.queries = j.at("queries").get<int>();
    if (j.contains("layers")) d.layers = j.at("layers").get<int>();
    if (j.contains("heads")) d.heads = j.at("heads").get<int>();
    if (j.contains("ffn_multiplier")) d.ffn_multiplier = j.at("ffn_multiplier").get<int>();
    if (j.contains("max_text_len")) d.max_text_len = j.at("max_text_len").get<int>();
    if (j.contains("d_dec")) d.d_dec = j.at("d_dec").get<Eigen::Index>();
    if (j.contains("lm_layers")) d.lm_layers = j.at("lm_layers").get<int>();
    if (j.contains("lm_heads")) d.lm_heads = j.at("lm_heads").get<int>();
    if (j.contains("max_len")) d.max_len = j.at("max_len").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model dims: ") + e.what());
  }
  if (d.d_model <= 0 || d.d_dec <= 0 || d.queries <= 0 || d.heads <= 0 || d.lm_heads <= 0 ||
      d.d_model % d.heads != 0 || d.d_dec % d.lm_heads != 0 || d.max_len < 2 || d.max_text_len < 2) {
    throw ConfigError("inconsistent model dims");
  }
  return d;
}

Checkpoint capture_checkpoint(const InstructionModel& model, std::string stage, int epoch,
                              std::string config_hash, std::vector<std::string> lineage,
                              nlohmann::json metrics) {
  Checkpoint c;
  c.stage = std::move(stage);
  c.epoch = epoch;
  c.config_hash = std::move(config_hash);
  c.metrics = std::move(metrics);
  c.lineage = std::move(lineage);
  c.dims = model.dims();
  c.manifest = model.manifest();
  c.vocab = model.vocab().tokens();
  c.model_seed = model.seed();
  c.lm_frozen = model.decoder().lm().frozen();
  for (const auto& p : model.registry().all()) c.parameters.emplace_back(p->name, p->value);
  return c;
}

std::string serialize_checkpoint(const Checkpoint& c) {
  nlohmann::ordered_json meta;
  meta["stage"] = c.stage;
  meta["epoch"] = c.epoch;
  meta["config_hash"] = c.config_hash;
  meta["lineage"] = c.lineage;
  meta["metrics"] = c.metrics;
  meta["dims"] = dims_to_json(c.dims);
  meta["manifest"] = manifest_json(c.manifest);
  meta["vocab"] = c.vocab;
  meta["model_seed"] = c.model_seed;
  meta["lm_frozen"] = c.lm_frozen;
  const std::string m = meta.dump();

  std::string out(kMagic, kMagicLen);
  put<std::uint64_t>(out, m.size());
  out += m;
  put<std::uint64_t>(out, c.parameters.size());
  for (const auto& [name, value] : c.parameters) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint64_t>(out, static_cast<std::uint64_t>(value.rows()));
    put<std::uint64_t>(out, static_cast<std::uint64_t>(value.cols()));
    out.append(reinterpret_cast<const char*>(value.data()),
               static_cast<std::size_t>(value.size()) * sizeof(double));
  }
  put<std::uint64_t>(out, fnv1a64(out));
  return out;
}

Checkpoint parse_checkpoint(const std::string& bytes) {
  if (bytes.size() < kMagicLen + 3 * sizeof(std::uint64_t) || bytes.compare(0, kMagicLen, kMagic) != 0) {
    throw CorruptCheckpoint("not a checkpoint or truncated header");
  }
  const std::size_t body = bytes.size() - sizeof(std::uint64_t);
  std::uint64_t stored = 0;
  std::memcpy(&stored, bytes.data() + body, sizeof(stored));
  if (stored != fnv1a64(std::string_view(bytes.data(), body))) {
    throw CorruptCheckpoint("checksum mismatch (truncated or modified file)");
  }

  Reader r(bytes, body);
  r.str(kMagicLen);
  const auto meta_len = r.get<std::uint64_t>();
  Checkpoint c;
  try {
    const auto meta = nlohmann::json::parse(r.str(meta_len));
    c.stage = meta.at("stage").get<std::string>();
    c.epoch = meta.at("epoch").get<int>();
    c.config_hash = meta.at("config_hash").get<std::string>();
    c.lineage = meta.at("lineage").get<std::vector<std::string>>();
    c.metrics = meta.at("metrics");
    c.dims = dims_from_json(meta.at("dims"));
    c.manifest = manifest_from_json(meta.at("manifest").dump());
    c.vocab = meta.at("vocab").get<std::vector<std::string>>();
    c.model_seed = meta.at("model_seed").get<std::uint64_t>();
    c.lm_frozen = meta.at("lm_frozen").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw CorruptCheckpoint(std::string("bad metadata: ") + e.what());
  }
  const auto count = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint32_t>();
    std::string name = r.str(name_len);
    const auto rows = r.get<std::uint64_t>();
    const auto cols = r.get<std::uint64_t>();
    if (rows > (1u << 24) || cols > (1u << 24)) throw CorruptCheckpoint("implausible shape for " + name);
    Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    r.doubles(m.data(), static_cast<std::size_t>(rows * cols));
    c.parameters.emplace_back(std::move(name), std::move(m));
  }
  if (r.pos() != body) throw CorruptCheckpoint("trailing bytes after parameters");
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::string bytes = serialize_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_checkpoint(ss.str());
}

std::optional<std::string> config_hash_warning(const Checkpoint& ckpt, const std::string& expected_hash) {
  if (ckpt.config_hash == expected_hash) return std::nullopt;
  return "warning: checkpoint (" + ckpt.stage + ") was written with config " + ckpt.config_hash +
         ", current config is " + expected_hash;
}

std::unique_ptr<InstructionModel> restore_model(const Checkpoint& ckpt) {
  auto model = std::make_unique<InstructionModel>(ckpt.dims, ckpt.manifest, Vocab::from_tokens(ckpt.vocab),
                                                  ckpt.model_seed);
  load_parameters(*model, ckpt);
  model->decoder().lm().set_frozen(ckpt.lm_frozen);
  return model;
}

void load_parameters(InstructionModel& model, const Checkpoint& ckpt, const std::string& prefix) {
  std::size_t loaded = 0;
  for (const auto& [name, value] : ckpt.parameters) {
    if (name.rfind(prefix, 0) != 0) continue;
    const ParamPtr p = model.registry().find(name);
    if (!p) throw CorruptCheckpoint("checkpoint parameter '" + name + "' is not part of the model");
    if (p->value.rows() != value.rows() || p->value.cols() != value.cols()) {
      throw CorruptCheckpoint("shape mismatch for '" + name + "'");
    }
    p->value = value;
    ++loaded;
  }
  const std::size_t expected = prefix.empty() ? model.registry().all().size()
                                              : model.registry().with_prefix(prefix).size();
  if (loaded != expected) throw CorruptCheckpoint("checkpoint is missing parameters under '" + prefix + "'");
}

}  // namespace instrgen
