#ifndef USP_ARCHIVE_HPP
#define USP_ARCHIVE_HPP

// Portable named-tensor container shared by every stage.
//
// Layout:
//   "USPK" | u16 version | u64 manifest length | manifest (UTF-8 JSON) | payload
// The payload is the concatenation of little-endian float32 tensors at the
// byte offsets listed in the manifest.

#include "usp/nn.hpp"

#include <json.hpp>

#include <bit>
#include <filesystem>
#include <fstream>

namespace usp {

static_assert(std::endian::native == std::endian::little, "on-disk formats assume a little-endian host");

using json = nlohmann::json;

struct TensorRecord {
  std::string name;
  std::vector<std::int64_t> shape;
  std::vector<float> data;
  std::string section = "main";
  bool trainable = true;

  std::int64_t numel() const {
    std::int64_t n = 1;
    for (auto s : shape) n *= s;
    return n;
  }
};

namespace io {

inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".partial";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw io_error("cannot open " + tmp + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw io_error("short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

template <typename V>
void put(std::string& buf, V v) {
  buf.append(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename V>
V get(const std::string& buf, std::size_t& pos) {
  if (pos + sizeof(V) > buf.size()) throw io_error("unexpected end of data");
  V v;
  std::memcpy(&v, buf.data() + pos, sizeof v);
  pos += sizeof v;
  return v;
}

}  // namespace io

class CheckpointArchive {
 public:
  static constexpr std::uint16_t kVersion = 1;

  std::string stage;                 // codec | pretrain | generator | classifier
  json config = json::object();      // resolved configuration of the producing stage
  std::vector<std::string> parents;  // digests of the archives this one was derived from, oldest first
  json meta = json::object();

  void put(TensorRecord rec) {
    USP_CHECK(rec.numel() == static_cast<std::int64_t>(rec.data.size()), "archive: shape/data mismatch for " + rec.name);
    auto it = index_.find(rec.name);
    if (it != index_.end()) {
      tensors_[it->second] = std::move(rec);
      return;
    }
    index_[rec.name] = tensors_.size();
    tensors_.push_back(std::move(rec));
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const TensorRecord& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw invalid_argument("archive: missing tensor " + name);
    return tensors_[it->second];
  }
  TensorRecord& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw invalid_argument("archive: missing tensor " + name);
    return tensors_[it->second];
  }
  void remove(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) return;
    tensors_.erase(tensors_.begin() + static_cast<std::ptrdiff_t>(it->second));
    reindex();
  }
  const std::vector<TensorRecord>& tensors() const { return tensors_; }

  std::string config_digest() const { return digest_of(config.dump()); }

  std::string tensor_digest(const std::string& name) const {
    const auto& t = get(name);
    return Digest{}.str(t.name).floats(std::span<const float>(t.data)).hex();
  }

  /// Digest of the serialized bytes; identifies the archive in parent chains.
  std::string digest() const { return digest_of(serialize()); }

  std::string serialize() const {
    json manifest;
    manifest["version"] = kVersion;
    manifest["stage"] = stage;
    manifest["config"] = config;
    manifest["config_digest"] = config_digest();
    manifest["parents"] = parents;
    manifest["meta"] = meta;
    json list = json::array();
    std::uint64_t offset = 0;
    for (const auto& t : tensors_) {
      list.push_back({{"name", t.name},
                      {"shape", t.shape},
                      {"dtype", "f32le"},
                      {"offset", offset},
                      {"section", t.section},
                      {"trainable", t.trainable}});
      offset += t.data.size() * sizeof(float);
    }
    manifest["tensors"] = std::move(list);
    const std::string text = manifest.dump();
    std::string out = "USPK";
    io::put<std::uint16_t>(out, kVersion);
    io::put<std::uint64_t>(out, text.size());
    out += text;
    out.reserve(out.size() + offset);
    for (const auto& t : tensors_)
      out.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(float));
    return out;
  }

  static CheckpointArchive deserialize(const std::string& bytes) {
    if (bytes.size() < 14 || bytes.compare(0, 4, "USPK") != 0) throw io_error("archive: bad magic");
    std::size_t pos = 4;
    const auto version = io::get<std::uint16_t>(bytes, pos);
    if (version != kVersion) throw io_error("archive: unsupported version " + std::to_string(version));
    const auto len = io::get<std::uint64_t>(bytes, pos);
    if (pos + len > bytes.size()) throw io_error("archive: truncated manifest");
    const json manifest = json::parse(bytes.substr(pos, len));
    pos += len;
    const std::size_t payload = pos;
    CheckpointArchive a;
    a.stage = manifest.at("stage").get<std::string>();
    a.config = manifest.at("config");
    a.parents = manifest.at("parents").get<std::vector<std::string>>();
    a.meta = manifest.at("meta");
    std::uint64_t expected = 0;
    for (const auto& e : manifest.at("tensors")) {
      if (e.at("dtype") != "f32le") throw io_error("archive: unsupported dtype");
      TensorRecord t;
      t.name = e.at("name").get<std::string>();
      t.shape = e.at("shape").get<std::vector<std::int64_t>>();
      t.section = e.value("section", "main");
      t.trainable = e.value("trainable", true);
      const auto off = e.at("offset").get<std::uint64_t>();
      if (off != expected) throw io_error("archive: tensor offsets are not contiguous at " + t.name);
      const auto n = static_cast<std::size_t>(t.numel());
      if (payload + off + n * sizeof(float) > bytes.size()) throw io_error("archive: truncated payload");
      t.data.resize(n);
      std::memcpy(t.data.data(), bytes.data() + payload + off, n * sizeof(float));
      expected = off + n * sizeof(float);
      if (a.contains(t.name)) throw io_error("archive: duplicate tensor name " + t.name);
      a.put(std::move(t));
    }
    if (payload + expected != bytes.size()) throw io_error("archive: trailing bytes after payload");
    return a;
  }

  void save(const std::filesystem::path& path) const { io::write_file_atomic(path, serialize()); }
  static CheckpointArchive load(const std::filesystem::path& path) { return deserialize(io::read_file(path)); }

  // ---- conversion to and from live parameter stores ----------------------

  template <typename T>
  void store_params(const nn::ParamStore<T>& store) {
    for (const auto& p : store.params()) {
      TensorRecord r;
      r.name = p.name;
      r.shape = p.shape;
      r.section = p.section;
      r.trainable = p.trainable;
      const auto& v = p.var.value();
      r.data.resize(static_cast<std::size_t>(v.size()));
      for (Eigen::Index i = 0; i < v.size(); ++i) r.data[static_cast<std::size_t>(i)] = static_cast<float>(v.data()[i]);
      put(std::move(r));
    }
  }

  /// Copies every store tensor present in the archive. With `strict`, a store
  /// tensor missing from the archive is an error.
  template <typename T>
  void load_params(nn::ParamStore<T>& store, bool strict = true) const {
    for (auto& p : store.params()) {
      if (!contains(p.name)) {
        if (strict) throw invalid_argument("archive: missing tensor " + p.name);
        continue;
      }
      const auto& r = get(p.name);
      if (r.shape != p.shape) throw invalid_argument("archive: shape mismatch for " + p.name);
      auto& v = p.var.mutable_value();
      for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = static_cast<T>(r.data[static_cast<std::size_t>(i)]);
    }
  }

 private:
  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < tensors_.size(); ++i) index_[tensors_[i].name] = i;
  }

  std::vector<TensorRecord> tensors_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace usp

#endif  // USP_ARCHIVE_HPP
