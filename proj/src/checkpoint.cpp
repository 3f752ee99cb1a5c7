#include "vteam/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <sstream>

#include "vteam/error.hpp"
#include "vteam/hash.hpp"

namespace fs = std::filesystem;

namespace vteam {
namespace {

constexpr const char* kMagic = "VTEAM-CHECKPOINT 1";

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes little-endian hosts");

void append_tensor(std::string& out, const std::string& name, const Tensor& t) {
  out += name + " " + std::to_string(t.n()) + " " + std::to_string(t.c()) + " " + std::to_string(t.h()) + " " +
         std::to_string(t.w()) + "\n";
  out.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(double));
}

std::string serialize_body(const EmbeddingModel& model, const std::map<std::string, std::string>& metadata,
                           const std::map<std::string, Tensor>& extras) {
  std::string body = std::string(kMagic) + "\n";
  for (const auto& [k, v] : model.descriptor().to_key_values()) body += "descriptor." + k + "=" + v + "\n";
  for (const auto& [k, v] : metadata) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw CheckpointError("metadata key/value contains a reserved character: " + k);
    }
    body += "meta." + k + "=" + v + "\n";
  }
  body += "parameter_count=" + std::to_string(model.parameter_count()) + "\n";
  const ConstParameterList params = model.parameters();
  body += "tensors=" + std::to_string(params.size() + extras.size()) + "\n";
  for (const Parameter* p : params) append_tensor(body, p->name, p->value);
  for (const auto& [name, t] : extras) append_tensor(body, "extra." + name, t);
  return body;
}

class Reader {
 public:
  explicit Reader(std::string data) : data_(std::move(data)) {}
  std::string line() {
    const auto end = data_.find('\n', pos_);
    if (end == std::string::npos) throw CheckpointError("truncated checkpoint");
    std::string out = data_.substr(pos_, end - pos_);
    pos_ = end + 1;
    return out;
  }
  void bytes(void* dst, std::size_t n) {
    if (pos_ + n > data_.size()) throw CheckpointError("truncated tensor payload");
    std::memcpy(dst, data_.data() + pos_, n);
    pos_ += n;
  }
  std::size_t pos() const { return pos_; }
  const std::string& data() const { return data_; }

 private:
  std::string data_;
  std::size_t pos_ = 0;
};

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Splits off and verifies the fixed-length trailing hash line; returns (body, hash).
std::pair<std::string, std::string> verified_body(std::string data, const fs::path& path) {
  constexpr std::size_t kTrailer = 7 + 64 + 1;  // "sha256=" + hex + '\n'
  if (data.size() < kTrailer || data.back() != '\n') throw CheckpointError("truncated checkpoint " + path.string());
  const std::string tail = data.substr(data.size() - kTrailer, kTrailer - 1);
  if (tail.rfind("sha256=", 0) != 0) throw CheckpointError("checkpoint lacks a content hash: " + path.string());
  const std::string hash = tail.substr(7);
  data.resize(data.size() - kTrailer);
  if (sha256_hex(data) != hash) throw CheckpointError("checkpoint hash mismatch: " + path.string());
  return {std::move(data), hash};
}

}  // namespace

std::string save_checkpoint(const EmbeddingModel& model, const fs::path& path,
                            const std::map<std::string, std::string>& metadata,
                            const std::map<std::string, Tensor>& extras) {
  const std::string body = serialize_body(model, metadata, extras);
  const std::string hash = sha256_hex(body);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint " + tmp.string());
    out << body << "sha256=" << hash << "\n";
    if (!out) throw CheckpointError("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
  return hash;
}

std::string model_hash(const EmbeddingModel& model) { return sha256_hex(serialize_body(model, {}, {})); }

std::string checkpoint_hash(const fs::path& path) { return verified_body(read_file(path), path).second; }

LoadedCheckpoint load_checkpoint(const fs::path& path) {
  auto [body, hash] = verified_body(read_file(path), path);
  Reader r(std::move(body));
  if (r.line() != kMagic) throw CheckpointError("not a checkpoint file: " + path.string());

  std::map<std::string, std::string> descriptor_kv, metadata;
  std::size_t declared_params = 0, tensor_count = 0;
  for (;;) {
    const std::string l = r.line();
    const auto eq = l.find('=');
    if (eq == std::string::npos) throw CheckpointError("malformed header line: " + l);
    const std::string key = l.substr(0, eq), value = l.substr(eq + 1);
    if (key.rfind("descriptor.", 0) == 0) {
      descriptor_kv[key.substr(11)] = value;
    } else if (key.rfind("meta.", 0) == 0) {
      metadata[key.substr(5)] = value;
    } else if (key == "parameter_count") {
      declared_params = std::stoull(value);
    } else if (key == "tensors") {
      tensor_count = std::stoull(value);
      break;
    } else {
      throw CheckpointError("unknown header key: " + key);
    }
  }

  ModelDescriptor descriptor;
  try {
    descriptor = ModelDescriptor::from_key_values(descriptor_kv);
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint descriptor rejected: ") + e.what());
  }
  LoadedCheckpoint out{EmbeddingModel(descriptor), std::move(metadata), {}, hash};
  if (out.model.parameter_count() != declared_params) {
    throw CheckpointError("descriptor implies " + std::to_string(out.model.parameter_count()) +
                          " parameters but checkpoint declares " + std::to_string(declared_params));
  }

  std::map<std::string, Parameter*> by_name;
  for (Parameter* p : out.model.parameters()) by_name[p->name] = p;
  std::size_t filled = 0;
  for (std::size_t i = 0; i < tensor_count; ++i) {
    std::istringstream header(r.line());
    std::string name;
    int n = 0, c = 0, h = 0, w = 0;
    if (!(header >> name >> n >> c >> h >> w)) throw CheckpointError("malformed tensor header");
    Tensor t(n, c, h, w);
    r.bytes(t.data(), t.size() * sizeof(double));
    if (name.rfind("extra.", 0) == 0) {
      out.extras[name.substr(6)] = std::move(t);
      continue;
    }
    auto it = by_name.find(name);
    if (it == by_name.end()) throw CheckpointError("tensor '" + name + "' does not exist in the described model");
    if (!it->second->value.same_shape(t)) {
      throw CheckpointError("tensor '" + name + "' has shape " + t.shape_string() + ", model expects " +
                            it->second->value.shape_string());
    }
    it->second->value = std::move(t);
    ++filled;
  }
  if (filled != by_name.size()) {
    throw CheckpointError("checkpoint provides " + std::to_string(filled) + " of " +
                          std::to_string(by_name.size()) + " model tensors");
  }
  if (r.pos() != r.data().size()) throw CheckpointError("trailing bytes after tensor table");
  return out;
}

}  // namespace vteam
