#ifndef USP_TRANSPLANT_HPP
#define USP_TRANSPLANT_HPP

// Maps a pretrained ViT encoder onto generator and classifier layouts.
//
// Generator mapping:
//   patchconv.*           -> patchconv.*            (copied, or fresh for the random-PatchConv control)
//   pos_embed             -> pos_embed              (bicubic regrid, identity on equal grids)
//   enc.block{i}.*        -> trunk.block{i}.*       (LN scale/bias, attention, MLP)
//   enc.norm.*            -> final.norm.*
//   cls_token, decoder    -> dropped
//   t_embed, y_embed, adaln, final.adaln, final.linear -> fresh (modulation heads zero)

#include "usp/diffusion.hpp"

#include <iostream>
#include <set>

namespace usp::transplant {

using diffusion::Generator;
using diffusion::GeneratorConfig;
using diffusion::Modulation;
using ag::Var;

// ---------------------------------------------------------------------------
// Positional regridding

/// Catmull-Rom kernel (a = -0.5).
inline double cubic_weight(double x) {
  constexpr double a = -0.5;
  x = std::abs(x);
  if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
  return 0.0;
}

/// Resampling matrix [dst, src] along one axis with half-pixel centers and edge clamping.
inline MatD cubic_axis(int src, int dst) {
  MatD w = MatD::Zero(dst, src);
  for (int i = 0; i < dst; ++i) {
    const double x = (i + 0.5) * static_cast<double>(src) / dst - 0.5;
    const double base = std::floor(x);
    const double f = x - base;
    for (int k = -1; k <= 2; ++k) {
      const int j = std::clamp(static_cast<int>(base) + k, 0, src - 1);
      w(i, j) += cubic_weight(f - k);
    }
  }
  return w;
}

/// Channel-wise bicubic resampling of a row-major [rows_s*cols_s, d] table onto
/// a rows_d x cols_d grid. Equal grids return the input unchanged. A 1x1 source
/// is broadcast (with a warning) since it carries no spatial signal.
inline MatD interpolate_posembed(const MatD& src, int rows_s, int cols_s, int rows_d, int cols_d,
                                 std::string* warning = nullptr) {
  USP_CHECK(rows_s > 0 && cols_s > 0 && rows_d > 0 && cols_d > 0, "interpolate_posembed: empty grid");
  USP_CHECK(src.rows() == static_cast<Eigen::Index>(rows_s) * cols_s,
            "interpolate_posembed: source rows do not match the source grid (class position must be excluded)");
  if (rows_s == rows_d && cols_s == cols_d) return src;
  if (rows_s == 1 && cols_s == 1) {
    const std::string msg = "interpolate_posembed: 1x1 source grid broadcast as a constant";
    if (warning) *warning = msg;
    else std::cerr << "warning: " << msg << "\n";
    return src.replicate(static_cast<Eigen::Index>(rows_d) * cols_d, 1);
  }
  const MatD wy = cubic_axis(rows_s, rows_d), wx = cubic_axis(cols_s, cols_d);
  MatD out = MatD::Zero(static_cast<Eigen::Index>(rows_d) * cols_d, src.cols());
  for (int y = 0; y < rows_d; ++y)
    for (int x = 0; x < cols_d; ++x)
      for (int sy = 0; sy < rows_s; ++sy) {
        if (wy(y, sy) == 0.0) continue;
        for (int sx = 0; sx < cols_s; ++sx) {
          const double w = wy(y, sy) * wx(x, sx);
          if (w != 0.0) out.row(y * cols_d + x) += w * src.row(sy * cols_s + sx);
        }
      }
  return out;
}

// ---------------------------------------------------------------------------
// Report

struct TransplantReport {
  struct Mapped {
    std::string source, dest;
    std::vector<std::int64_t> shape;
  };
  struct Interpolated {
    std::string source, dest;
    std::array<int, 2> from_grid, to_grid;
    std::string method = "bicubic";
  };
  struct Reinitialized {
    std::string dest, scheme;
  };
  std::vector<Mapped> mapped;
  std::vector<Interpolated> interpolated;
  std::vector<Reinitialized> reinitialized;
  std::vector<std::string> dropped;
  std::vector<std::string> unmatched_dest;

  json to_json() const {
    json j;
    j["mapped"] = json::array();
    for (const auto& m : mapped) j["mapped"].push_back({{"source", m.source}, {"dest", m.dest}, {"shape", m.shape}});
    j["interpolated"] = json::array();
    for (const auto& m : interpolated)
      j["interpolated"].push_back(
          {{"source", m.source}, {"dest", m.dest}, {"from_grid", m.from_grid}, {"to_grid", m.to_grid}, {"method", m.method}});
    j["reinitialized"] = json::array();
    for (const auto& r : reinitialized) j["reinitialized"].push_back({{"dest", r.dest}, {"scheme", r.scheme}});
    j["dropped"] = dropped;
    j["unmatched_dest"] = unmatched_dest;
    return j;
  }
  static TransplantReport from_json(const json& j) {
    TransplantReport r;
    for (const auto& m : j.at("mapped")) r.mapped.push_back({m.at("source"), m.at("dest"), m.at("shape")});
    for (const auto& m : j.at("interpolated"))
      r.interpolated.push_back({m.at("source"), m.at("dest"), m.at("from_grid"), m.at("to_grid"), m.at("method")});
    for (const auto& m : j.at("reinitialized")) r.reinitialized.push_back({m.at("dest"), m.at("scheme")});
    r.dropped = j.at("dropped").get<std::vector<std::string>>();
    r.unmatched_dest = j.at("unmatched_dest").get<std::vector<std::string>>();
    return r;
  }

  /// Destination names covered by mapped, interpolated and reinitialized.
  std::vector<std::string> covered() const {
    std::vector<std::string> out;
    for (const auto& m : mapped) out.push_back(m.dest);
    for (const auto& m : interpolated) out.push_back(m.dest);
    for (const auto& r : reinitialized) out.push_back(r.dest);
    return out;
  }

  /// Moves `dest` into the reinitialized list with the given scheme; a source
  /// that fed it becomes dropped.
  void mark_reinitialized(const std::string& dest, const std::string& scheme) {
    for (const auto& m : mapped)
      if (m.dest == dest) dropped.push_back(m.source);
    std::erase_if(mapped, [&](const Mapped& m) { return m.dest == dest; });
    std::erase_if(interpolated, [&](const Interpolated& m) { return m.dest == dest; });
    std::erase_if(reinitialized, [&](const Reinitialized& m) { return m.dest == dest; });
    reinitialized.push_back({dest, scheme});
  }
};

// ---------------------------------------------------------------------------
// Source encoders

/// The encoder configuration recorded by a pretraining or classifier archive.
inline vit::PretrainModelConfig source_model(const CheckpointArchive& a) {
  if (a.stage != "pretrain" && a.stage != "classifier")
    throw invalid_argument("transplant: source must be a pretrain or classifier archive, got '" + a.stage + "'");
  if (a.config.value("arch", "vit") != "vit") throw invalid_argument("transplant: conv classifiers have no ViT trunk");
  return vit::PretrainModelConfig::from_json(a.config.at("model"));
}

/// A standalone ViT encoder (no decoder) loaded from an archive.
template <typename T>
struct SourceVit {
  vit::PretrainModelConfig cfg;
  nn::ParamStore<T> store;
  vit::VitEncoder<T> enc;

  explicit SourceVit(const CheckpointArchive& a) : cfg(source_model(a)) {
    Rng rng(0);
    enc = vit::VitEncoder<T>::create(store, rng, cfg.encoder, cfg.latent_channels, cfg.patch, cfg.grid());
    a.load_params(store);
  }
  /// Token forward without the class token: [N, C*S*S] -> [N*T, h] after the final norm.
  Var<T> tokens(const Mat<T>& latents, std::vector<Var<T>>* layers = nullptr) const {
    const Mat<T> patches = vit::patchify_raw<T>(latents, cfg.latent_channels, cfg.latent_size, cfg.patch);
    return enc.run(enc.embed(Var<T>::constant(patches)), latents.rows(), cfg.tokens(), layers);
  }
};

inline void check_geometry(const vit::PretrainModelConfig& src, const GeneratorConfig& dst) {
  const auto& a = src.encoder;
  const auto& b = dst.trunk;
  if (a.depth != b.depth || a.heads != b.heads || a.dim != b.dim || a.mlp_ratio != b.mlp_ratio)
    throw config_error("transplant: generator trunk geometry differs from the pretrained encoder");
  if (src.patch != dst.patch || src.latent_channels != dst.latent_channels)
    throw config_error("transplant: patch size or latent channels differ between source and generator");
}

// ---------------------------------------------------------------------------
// Generator transplant

struct TransplantOptions {
  bool reinit_patchconv = false;  // control: encoder blocks loaded, patch embedding left random
  std::uint64_t seed = 0;
};

struct TransplantResult {
  CheckpointArchive archive;  // stage "generator", zero training steps
  TransplantReport report;
};

namespace detail {

/// Source name feeding a generator tensor, or empty when it is freshly initialized.
inline std::string source_for(const std::string& dest) {
  if (dest.rfind("patchconv.", 0) == 0) return dest;
  if (dest == "pos_embed") return dest;
  if (dest.rfind("trunk.block", 0) == 0) {
    const auto dot = dest.find('.', 11);
    const std::string rest = dest.substr(dot + 1);
    if (rest.rfind("adaln.", 0) == 0) return {};
    return "enc.block" + dest.substr(11, dot - 11) + "." + rest;
  }
  if (dest.rfind("final.norm.", 0) == 0) return "enc.norm." + dest.substr(11);
  return {};
}

inline std::string fresh_scheme(const std::string& dest, const GeneratorConfig& cfg) {
  if (dest.find("adaln.weight") != std::string::npos) return "zeros";
  if (dest.find("adaln.bias") != std::string::npos)
    return dest.rfind("trunk.", 0) == 0 && cfg.gate_bias != 0.0 ? "zeros, gate bias " + std::to_string(cfg.gate_bias)
                                                                 : "zeros";
  if (dest.rfind("final.linear.", 0) == 0) return "zeros";
  if (dest.size() > 5 && dest.compare(dest.size() - 5, 5, ".bias") == 0) return "zeros";
  if (dest.find(".ln") != std::string::npos || dest.rfind("final.norm.", 0) == 0) return "ones";
  return "trunc_normal(0.02)";
}

inline void copy_record(CheckpointArchive& out, const TensorRecord& src, const std::string& dest) {
  TensorRecord r = out.get(dest);
  if (r.shape != src.shape)
    throw config_error("transplant: shape mismatch " + src.name + " -> " + dest);
  r.data = src.data;
  out.put(std::move(r));
}

}  // namespace detail

/// Initializes a generator from a pretrained (or fine-tuned) encoder.
inline TransplantResult adapt_vit_to_generator(const CheckpointArchive& src, const GeneratorConfig& cfg,
                                               const TransplantOptions& opt = {}) {
  const auto scfg = source_model(src);
  check_geometry(scfg, cfg);
  Generator<float> fresh(cfg, derive_seed(opt.seed, "transplant.init"));
  CheckpointArchive out;
  out.store_params(fresh.params());
  TransplantReport rep;
  std::set<std::string> used;
  for (const auto& p : fresh.params().params()) {
    const std::string s = detail::source_for(p.name);
    const bool fresh_patch = opt.reinit_patchconv && p.name.rfind("patchconv.", 0) == 0;
    if (s.empty() || fresh_patch) {
      rep.reinitialized.push_back({p.name, detail::fresh_scheme(p.name, cfg)});
      continue;
    }
    if (!src.contains(s)) {
      rep.unmatched_dest.push_back(p.name);
      continue;
    }
    used.insert(s);
    const auto& rec = src.get(s);
    if (p.name == "pos_embed") {
      MatD table(scfg.tokens(), scfg.encoder.dim);
      for (Eigen::Index i = 0; i < table.size(); ++i) table.data()[i] = rec.data[static_cast<std::size_t>(i)];
      const MatD regrid = interpolate_posembed(table, scfg.grid(), scfg.grid(), cfg.grid(), cfg.grid());
      TensorRecord r = out.get(p.name);
      for (Eigen::Index i = 0; i < regrid.size(); ++i) r.data[static_cast<std::size_t>(i)] = static_cast<float>(regrid.data()[i]);
      out.put(std::move(r));
      rep.interpolated.push_back({s, p.name, {scfg.grid(), scfg.grid()}, {cfg.grid(), cfg.grid()}, "bicubic"});
    } else {
      detail::copy_record(out, rec, p.name);
      rep.mapped.push_back({s, p.name, rec.shape});
    }
  }
  for (const auto& t : src.tensors())
    if (!used.count(t.name)) rep.dropped.push_back(t.name);
  if (!rep.unmatched_dest.empty())
    throw config_error("transplant: destination tensors without a source: " + rep.unmatched_dest.front());

  out.stage = "generator";
  out.config = {{"generator", cfg.to_json()},
                {"train", {{"init", "transplant"}, {"source", src.digest()}, {"reinit_patchconv", opt.reinit_patchconv},
                           {"seed", opt.seed}}}};
  out.parents = src.parents;
  out.parents.push_back(src.digest());
  out.meta["steps"] = 0;
  out.meta["transplant_report"] = rep.to_json();
  return {std::move(out), std::move(rep)};
}

/// Replaces the last k transformer blocks of a generator or pretraining
/// archive by fresh initialization (modulation heads stay zero).
inline CheckpointArchive reinit_last_k(const CheckpointArchive& a, int k, std::uint64_t seed) {
  std::string prefix;
  int depth = 0;
  CheckpointArchive fresh;
  if (a.stage == "generator") {
    const auto cfg = GeneratorConfig::from_json(a.config.at("generator"));
    depth = cfg.trunk.depth;
    prefix = "trunk.block";
    if (k > 0) fresh.store_params(Generator<float>(cfg, derive_seed(seed, "reinit")).params());
  } else if (a.stage == "pretrain" || a.stage == "classifier") {
    const auto cfg = source_model(a);
    depth = cfg.encoder.depth;
    prefix = "enc.block";
    if (k > 0) {
      Rng rng(derive_seed(seed, "reinit"));
      nn::ParamStore<float> s;
      vit::VitEncoder<float>::create(s, rng, cfg.encoder, cfg.latent_channels, cfg.patch, cfg.grid());
      fresh.store_params(s);
    }
  } else {
    throw invalid_argument("reinit_last_k: unsupported archive stage '" + a.stage + "'");
  }
  if (k < 0 || k > depth) throw config_error("reinit_last_k: k must lie in [0, depth]");
  if (k == 0) return a;
  CheckpointArchive out = a;
  std::optional<TransplantReport> rep;
  if (a.meta.contains("transplant_report")) rep = TransplantReport::from_json(a.meta.at("transplant_report"));
  for (int i = depth - k; i < depth; ++i) {
    const std::string pre = prefix + std::to_string(i) + ".";
    for (const auto& t : fresh.tensors())
      if (t.name.rfind(pre, 0) == 0) {
        TensorRecord r = out.get(t.name);
        r.data = t.data;
        out.put(std::move(r));
        if (rep) rep->mark_reinitialized(t.name, "reinit_last_k: " + detail::fresh_scheme(t.name, GeneratorConfig{}));
      }
  }
  out.meta["reinit_last_k"] = k;
  out.meta["reinit_seed"] = seed;
  if (rep) out.meta["transplant_report"] = rep->to_json();
  return out;
}

// ---------------------------------------------------------------------------
// Verification

struct VerifyReport {
  double max_abs = 0.0;
  double tolerance = 0.0;
  bool pass = true;
  int batch = -1;          // location of the largest deviation
  Eigen::Index row = -1, col = -1;
  int first_block = -1;    // first block whose output deviates beyond tolerance (-1: none)
  std::vector<double> per_block;

  json to_json() const {
    return {{"max_abs", max_abs}, {"tolerance", tolerance}, {"pass", pass},   {"batch", batch},
            {"row", row},         {"col", col},             {"first_block", first_block}, {"per_block", per_block}};
  }
};

/// Gate-forced dual forward: the generator trunk with shift = 0, scale = 0,
/// gate = 1 must reproduce the source encoder over the same patch tokens.
inline VerifyReport verify_transplant(const CheckpointArchive& source, const CheckpointArchive& generator,
                                      double tolerance = 1e-5, int batches = 100, int batch_size = 8,
                                      std::uint64_t seed = 0) {
  const SourceVit<float> vitm(source);
  const auto gen = diffusion::load_generator(generator);
  check_geometry(vitm.cfg, gen.config());
  USP_CHECK(vitm.cfg.latent_size == gen.config().latent_size,
            "verify_transplant: latent grids differ; the dual forward needs equal token grids");
  const auto& gc = gen.config();
  VerifyReport rep;
  rep.tolerance = tolerance;
  rep.per_block.assign(static_cast<std::size_t>(gc.trunk.depth), 0.0);
  ag::NoGradGuard ng;
  Rng rng(derive_seed(seed, "verify"));
  for (int b = 0; b < batches; ++b) {
    const MatF lat = randn<float>(rng, batch_size, gc.latent_dim());
    std::vector<Var<float>> la, lb;
    const MatF va = vitm.tokens(lat, &la).value();
    const std::vector<double> t(static_cast<std::size_t>(batch_size), 0.0);
    const std::vector<int> y(static_cast<std::size_t>(batch_size), gc.null_class());
    const MatF vb = gen.trunk(gen.embed(lat), gen.conditioning(t, y), batch_size, Modulation::forced_identity, &lb).value();
    for (std::size_t i = 0; i < la.size(); ++i)
      rep.per_block[i] =
          std::max(rep.per_block[i], static_cast<double>((la[i].value() - lb[i].value()).cwiseAbs().maxCoeff()));
    Eigen::Index r = 0, c = 0;
    const double dev = (va - vb).cwiseAbs().maxCoeff(&r, &c);
    if (!std::isfinite(dev)) throw numeric_error("verify_transplant: non-finite forward");
    if (dev > rep.max_abs || rep.batch < 0) {
      rep.max_abs = dev;
      rep.batch = b;
      rep.row = r;
      rep.col = c;
    }
  }
  for (std::size_t i = 0; i < rep.per_block.size(); ++i)
    if (rep.per_block[i] > tolerance) {
      rep.first_block = static_cast<int>(i);
      break;
    }
  rep.pass = rep.max_abs <= tolerance;
  return rep;
}

// ---------------------------------------------------------------------------
// Classifier layout

enum class ClassifierMode { linear_probe, finetune, sft_source };

inline ClassifierMode parse_classifier_mode(const std::string& s) {
  if (s == "linear_probe") return ClassifierMode::linear_probe;
  if (s == "finetune") return ClassifierMode::finetune;
  if (s == "sft_source") return ClassifierMode::sft_source;
  throw config_error("unknown classifier mode '" + s + "' (linear_probe|finetune|sft_source)");
}
inline std::string classifier_mode_name(ClassifierMode m) {
  return m == ClassifierMode::linear_probe ? "linear_probe" : m == ClassifierMode::finetune ? "finetune" : "sft_source";
}

/// ViT encoder with a linear head on the normalized class token.
template <typename T>
class ClassifierModel {
 public:
  ClassifierModel(const vit::PretrainModelConfig& cfg, int num_classes, std::uint64_t seed)
      : cfg_(cfg), num_classes_(num_classes) {
    cfg.validate();
    USP_CHECK(num_classes >= 1, "classifier: num_classes must be >= 1");
    Rng rng(seed);
    enc_ = vit::VitEncoder<T>::create(store_, rng, cfg.encoder, cfg.latent_channels, cfg.patch, cfg.grid());
    head_ = nn::Linear<T>::create(store_, rng, "head", cfg.encoder.dim, num_classes, true, "head");
  }

  const vit::PretrainModelConfig& config() const { return cfg_; }
  int num_classes() const { return num_classes_; }
  nn::ParamStore<T>& params() { return store_; }
  const nn::ParamStore<T>& params() const { return store_; }
  const vit::VitEncoder<T>& encoder() const { return enc_; }
  const nn::Linear<T>& head() const { return head_; }

  /// Encoder output with the class token first: [N*(1+T), h]. Block outputs are
  /// appended to `layers` when given.
  Var<T> encode(const Mat<T>& latents, std::vector<Var<T>>* layers = nullptr) const {
    const Mat<T> patches = vit::patchify_raw<T>(latents, cfg_.latent_channels, cfg_.latent_size, cfg_.patch);
    const Eigen::Index n = latents.rows(), tk = cfg_.tokens();
    std::vector<std::vector<Eigen::Index>> rows(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < tk; ++j) rows[static_cast<std::size_t>(i)].push_back(i * tk + j);
    return enc_.run(enc_.prepend_cls(enc_.embed(Var<T>::constant(patches)), rows), n, tk + 1, layers);
  }
  /// Normalized class-token features [N, h].
  Var<T> features(const Mat<T>& latents) const {
    const Var<T> x = encode(latents);
    std::vector<ag::RowRef> refs;
    for (Eigen::Index i = 0; i < latents.rows(); ++i) refs.push_back({0, i * (cfg_.tokens() + 1)});
    return ag::gather_rows<T>({x}, refs);
  }
  Var<T> logits(const Mat<T>& latents) const { return head_(features(latents)); }

 private:
  vit::PretrainModelConfig cfg_;
  int num_classes_;
  nn::ParamStore<T> store_;
  vit::VitEncoder<T> enc_;
  nn::Linear<T> head_;
};

/// Encoder, patch embedding and class token copied; zero head appended. In
/// linear_probe mode every encoder tensor is marked frozen.
inline CheckpointArchive adapt_vit_to_classifier(const CheckpointArchive& src, int num_classes, ClassifierMode mode) {
  const auto cfg = source_model(src);
  if (!src.contains("cls_token")) throw invalid_argument("adapt_vit_to_classifier: source has no class token");
  ClassifierModel<float> model(cfg, num_classes, 0);
  for (auto& p : model.params().params()) {
    if (p.section == "head") continue;
    if (!src.contains(p.name)) throw invalid_argument("adapt_vit_to_classifier: source is missing " + p.name);
  }
  src.load_params(model.params(), false);
  if (mode == ClassifierMode::linear_probe) model.params().freeze({"patchconv", "cls_token", "enc."});
  CheckpointArchive out;
  out.stage = "classifier";
  out.config = {{"model", cfg.to_json()}, {"num_classes", num_classes}, {"mode", classifier_mode_name(mode)}};
  out.parents = src.parents;
  out.parents.push_back(src.digest());
  out.store_params(model.params());
  out.meta["steps"] = 0;
  return out;
}

/// Rebuilds a classifier (trainability flags restored from the archive).
inline ClassifierModel<float> load_classifier(const CheckpointArchive& a) {
  if (a.stage != "classifier") throw invalid_argument("expected a classifier archive, got '" + a.stage + "'");
  const auto cfg = source_model(a);
  ClassifierModel<float> m(cfg, a.config.at("num_classes").get<int>(), 0);
  a.load_params(m.params());
  for (auto& p : m.params().params())
    if (!a.get(p.name).trainable) {
      p.trainable = false;
      p.var.set_requires_grad(false);
    }
  return m;
}

}  // namespace usp::transplant

#endif  // USP_TRANSPLANT_HPP
