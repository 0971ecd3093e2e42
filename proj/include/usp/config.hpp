#ifndef USP_CONFIG_HPP
#define USP_CONFIG_HPP

// Key-value configuration documents.
//
//   # comment
//   version = 1
//   gen.framework = sit
//   [arm usp_dit]            keys below are stored as arm.usp_dit.<key>
//   gen.init = pretrain
//
// Every key must appear in the schema (arm overrides must name schema keys);
// unknown keys, malformed values and unsupported versions are config errors.
// Values are typed (int, float, bool, string) and resolved against schema
// defaults, so a resolved config is a flat JSON object with every key present.

#include "usp/archive.hpp"

#include <fstream>
#include <map>
#include <sstream>

namespace usp::config {

inline constexpr int kSchemaVersion = 1;

enum class Type { integer, real, boolean, string };

struct KeySpec {
  std::string name;
  Type type;
  json fallback;
  std::string help;
};

// clang-format off
inline const std::vector<KeySpec>& schema() {
  static const std::vector<KeySpec> keys = {
    {"version",                     Type::integer, kSchemaVersion, "schema version"},
    {"seed",                        Type::integer, 0,              "master seed; every stage derives its own stream"},
    {"data.train",                  Type::string,  "synth:10000:1", "training images (synth:<n>:<seed> | cifar:<files> | folder:<dir>)"},
    {"data.test",                   Type::string,  "synth:2000:2", "held-out images for probes and reference statistics"},
    {"data.image_size",             Type::integer, 32,             "side of procedural images"},
    {"data.norm",                   Type::string,  "vae_half",     "pixel normalization (vae_half | imagenet)"},
    {"codec.kind",                  Type::string,  "vae",          "vae | identity"},
    {"codec.channels",              Type::integer, 4,              "latent channels C"},
    {"codec.stride",                Type::integer, 4,              "downsampling factor f"},
    {"codec.width",                 Type::integer, 32,             "conv width"},
    {"codec.epochs",                Type::integer, 8,              "codec training epochs"},
    {"codec.batch",                 Type::integer, 32,             "codec batch"},
    {"codec.lr",                    Type::real,    1e-3,           "codec learning rate"},
    {"codec.max_recon_mse",         Type::real,    0.05,           "holdout reconstruction gate"},
    {"model.preset",                Type::string,  "tiny",         "trunk preset (micro | tiny | base | large | xl)"},
    {"model.patch",                 Type::integer, 2,              "patch size p"},
    {"model.mask_ratio",            Type::real,    0.75,           "masked token fraction"},
    {"model.per_patch_norm",        Type::boolean, true,           "standardize each target patch"},
    {"model.noisy_pretrain",        Type::boolean, false,          "diffuse inputs before masking"},
    {"pretrain.epochs",             Type::integer, 100,            "pretraining epochs"},
    {"pretrain.batch",              Type::integer, 128,            "pretraining batch"},
    {"pretrain.lr",                 Type::real,    -1.0,           "peak lr (negative: 1.5e-4 * batch / 256)"},
    {"pretrain.weight_decay",       Type::real,    0.05,           "AdamW weight decay"},
    {"sft.epochs",                  Type::integer, 10,             "supervised fine-tune epochs of the SFT source"},
    {"sft.lr",                      Type::real,    1e-3,           "SFT peak lr"},
    {"transplant.reinit_last_k",    Type::integer, 0,              "re-initialize the last k blocks after transplant"},
    {"transplant.reinit_patchconv", Type::boolean, false,          "fresh PatchConv (control)"},
    {"gen.framework",               Type::string,  "dit",          "dit (DDPM) | sit (flow)"},
    {"gen.init",                    Type::string,  "pretrain",     "pretrain | sft | random"},
    {"gen.steps",                   Type::integer, 20000,          "generator training steps"},
    {"gen.batch",                   Type::integer, 64,             "generator batch"},
    {"gen.lr",                      Type::real,    1e-4,           "constant generator lr"},
    {"gen.gate_bias",               Type::real,    0.0,            "initial adaLN gate bias"},
    {"gen.class_dropout",           Type::real,    0.1,            "label dropout for guidance"},
    {"gen.learned_sigma",           Type::boolean, false,          "learned DDPM variance"},
    {"gen.checkpoint_every",        Type::integer, 2500,           "checkpoint period (0: final only)"},
    {"embed.epochs",                Type::integer, 4,              "embedder training epochs"},
    {"embed.batch",                 Type::integer, 64,             "embedder batch"},
    {"embed.input",                 Type::string,  "pixels",       "pixels | latents"},
    {"eval.samples",                Type::integer, 2000,           "generated samples per FD evaluation"},
    {"eval.sample_steps",           Type::integer, 100,            "sampler steps for evaluation"},
    {"eval.cfg_scale",              Type::real,    1.0,            "guidance scale for evaluation samples (1: off)"},
    {"probe.epochs",                Type::integer, 100,            "linear probe epochs"},
    {"probe.optimizer",             Type::string,  "sgd",          "sgd | lars"},
    {"probe.encoder",               Type::boolean, false,          "probe the pretrained and a random-init trunk"},
    {"probe.layerwise",             Type::boolean, false,          "layerwise probe of the trained generator"},
    {"curves.threshold",            Type::real,    -1.0,           "FD threshold for speedup reports (negative: none)"},
  };
  return keys;
}
// clang-format on

inline const KeySpec* find_key(const std::string& name) {
  for (const auto& k : schema())
    if (k.name == name) return &k;
  return nullptr;
}

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

/// Parses a textual value as the key's type.
inline json parse_value(const KeySpec& k, const std::string& text) {
  try {
    std::size_t used = 0;
    switch (k.type) {
      case Type::integer: {
        const long long v = std::stoll(text, &used);
        if (used != text.size()) break;
        return v;
      }
      case Type::real: {
        const double v = std::stod(text, &used);
        if (used != text.size()) break;
        return v;
      }
      case Type::boolean:
        if (text == "true") return true;
        if (text == "false") return false;
        break;
      case Type::string:
        return text;
    }
  } catch (const std::exception&) {
  }
  throw config_error("config: bad value '" + text + "' for key " + k.name);
}

inline std::string format_value(const json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); }

/// A parsed document: top-level keys and named arm sections of overrides.
struct Document {
  json values = json::object();
  std::vector<std::pair<std::string, json>> arms;  // in file order

  void set(const std::string& key, const std::string& text, const std::string& arm = {}) {
    const KeySpec* k = find_key(key);
    if (!k) throw config_error("config: unknown key '" + key + "'");
    if (!arm.empty() && key == "version") throw config_error("config: version cannot be overridden per arm");
    json& target = arm.empty() ? values : arm_values(arm);
    target[key] = parse_value(*k, text);
  }

  json& arm_values(const std::string& name) {
    for (auto& [n, v] : arms)
      if (n == name) return v;
    arms.emplace_back(name, json::object());
    return arms.back().second;
  }

  /// Schema defaults overlaid with top-level values, then with one arm's overrides.
  json resolved(const std::string& arm = {}) const {
    json out = json::object();
    for (const auto& k : schema()) out[k.name] = k.fallback;
    for (const auto& [key, v] : values.items()) out[key] = v;
    if (!arm.empty()) {
      bool found = false;
      for (const auto& [n, v] : arms)
        if (n == arm) {
          found = true;
          for (const auto& [key, val] : v.items()) out[key] = val;
        }
      if (!found) throw config_error("config: unknown arm '" + arm + "'");
    }
    if (out.at("version").get<int>() != kSchemaVersion)
      throw config_error("config: unsupported version " + out.at("version").dump());
    return out;
  }
};

inline Document parse(const std::string& text) {
  Document d;
  std::istringstream in(text);
  std::string line, arm;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw config_error("config line " + std::to_string(lineno) + ": unterminated section");
      std::istringstream sec(line.substr(1, line.size() - 2));
      std::string kind, name, extra;
      sec >> kind >> name >> extra;
      if (kind != "arm" || name.empty() || !extra.empty())
        throw config_error("config line " + std::to_string(lineno) + ": sections must read [arm <name>]");
      arm = name;
      d.arm_values(arm);
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw config_error("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    try {
      d.set(key, value, arm);
    } catch (const Error& e) {
      throw config_error("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (!d.values.contains("version")) throw config_error("config: missing version key");
  return d;
}

inline Document load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw config_error("config: cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

/// Canonical text of a document (schema order, arms in order).
inline std::string render(const Document& d) {
  std::ostringstream out;
  for (const auto& k : schema())
    if (d.values.contains(k.name)) out << k.name << " = " << format_value(d.values.at(k.name)) << "\n";
  for (const auto& [name, v] : d.arms) {
    out << "\n[arm " << name << "]\n";
    for (const auto& k : schema())
      if (v.contains(k.name)) out << k.name << " = " << format_value(v.at(k.name)) << "\n";
  }
  return out.str();
}

/// Published schema as text (key, type, default, help).
inline std::string schema_text() {
  std::ostringstream out;
  out << "# schema version " << kSchemaVersion << "\n";
  for (const auto& k : schema()) {
    const char* t = k.type == Type::integer ? "int" : k.type == Type::real ? "float" : k.type == Type::boolean ? "bool" : "string";
    out << k.name << " (" << t << ", default " << format_value(k.fallback) << "): " << k.help << "\n";
  }
  return out.str();
}

/// Keys whose resolved values differ.
inline std::vector<std::string> diff_keys(const json& a, const json& b) {
  std::vector<std::string> out;
  for (const auto& k : schema())
    if (a.value(k.name, json()) != b.value(k.name, json())) out.push_back(k.name);
  return out;
}

}  // namespace usp::config

#endif  // USP_CONFIG_HPP
