#ifndef USP_PIPELINE_HPP
#define USP_PIPELINE_HPP

// Content-addressed experiment execution.
//
// A stage is identified by digest(stage name, resolved inputs), where inputs
// include the output digests of the stages it consumes. Its outputs live in
// <root>/stages/<stage>-<key>/ next to done.json, which records the digest of
// every output file. A stage whose done.json verifies is skipped; one whose
// outputs no longer match is refused unless forced. A .lock file holding the
// owner pid guards each stage directory while it runs.
//
// Stage graph of one arm:
//   codec -> cache -> pretrain -> [sft] -> init -> gen -> curve
//   embedder -> ref ------------------------------------^
//   pretrain -> probe            gen -> layer_probe
//
// Metric CSVs carry zeroed wall-clock columns, so reruns reproduce them
// bitwise; real timings go to *.timings sidecars, which are not digested.

#include "usp/config.hpp"
#include "usp/eval.hpp"

#include <unistd.h>

#include <functional>
#include <iostream>

namespace usp::pipeline {

namespace fs = std::filesystem;

inline std::string file_digest(const fs::path& p) { return digest_of(io::read_file(p)); }

struct StageRecord {
  std::string stage, key;
  fs::path dir;
  std::map<std::string, std::string> outputs;  // relative path -> digest
  bool skipped = false;

  fs::path file(const std::string& name) const { return dir / name; }
  const std::string& digest(const std::string& name) const {
    auto it = outputs.find(name);
    if (it == outputs.end()) throw invalid_argument("stage " + stage + " has no output " + name);
    return it->second;
  }
  json to_json() const { return {{"key", key}, {"outputs", outputs}}; }
};

class RunStore {
 public:
  RunStore(fs::path root, bool force = false, bool verbose = false)
      : root_(std::move(root)), force_(force), verbose_(verbose) {
    fs::create_directories(root_);
  }

  const fs::path& root() const { return root_; }
  bool verbose() const { return verbose_; }
  int executed() const { return executed_; }
  int skipped() const { return skipped_; }

  StageRecord run(const std::string& stage, const json& inputs, const std::function<void(const fs::path&)>& body) {
    StageRecord r;
    r.stage = stage;
    r.key = digest_of(stage + "\n" + inputs.dump());
    r.dir = root_ / "stages" / (stage + "-" + r.key);
    const fs::path done = r.dir / "done.json";
    if (fs::exists(done)) {
      const json d = json::parse(io::read_file(done));
      bool intact = true;
      for (const auto& [name, digest] : d.at("outputs").items()) {
        r.outputs[name] = digest.get<std::string>();
        if (!fs::exists(r.dir / name) || file_digest(r.dir / name) != r.outputs[name]) intact = false;
      }
      if (intact) {
        r.skipped = true;
        ++skipped_;
        log("skip " + stage + " " + r.key);
        return r;
      }
      if (!force_)
        throw digest_mismatch("stage " + stage + " " + r.key + ": stored outputs do not match their recorded digests; "
                              "rerun with --force to overwrite");
      r.outputs.clear();
    }
    acquire(r.dir);
    try {
      for (const auto& e : fs::directory_iterator(r.dir))
        if (e.path().filename() != ".lock") fs::remove_all(e.path());
      log("run  " + stage + " " + r.key);
      body(r.dir);
      for (const auto& e : fs::recursive_directory_iterator(r.dir)) {
        if (!e.is_regular_file()) continue;
        const std::string rel = fs::relative(e.path(), r.dir).generic_string();
        if (rel == ".lock" || rel == "done.json" || rel.ends_with(".timings")) continue;
        r.outputs[rel] = file_digest(e.path());
      }
      io::write_file_atomic(done, json{{"stage", stage}, {"key", r.key}, {"inputs", inputs}, {"outputs", r.outputs}}.dump(2));
    } catch (...) {
      fs::remove(r.dir / ".lock");
      throw;
    }
    fs::remove(r.dir / ".lock");
    ++executed_;
    return r;
  }

  /// Loaded datasets, memoized by (spec, size).
  const data::ImageBatch& images(const std::string& spec, int size) {
    const std::string k = spec + "@" + std::to_string(size);
    auto it = images_.find(k);
    if (it != images_.end()) return it->second;
    return images_.emplace(k, load_images(spec, size)).first->second;
  }

  static data::ImageBatch load_images(const std::string& spec, int size) {
    if (spec.rfind("synth:", 0) == 0) {
      const auto c2 = spec.find(':', 6);
      if (c2 == std::string::npos) throw config_error("dataset spec synth:<n>:<seed> expected, got " + spec);
      return data::synth_shapes(std::stol(spec.substr(6, c2 - 6)), std::stoull(spec.substr(c2 + 1)), size);
    }
    return data::load_dataset(spec);
  }

  void log(const std::string& msg) const {
    if (verbose_) std::cerr << "[manifest] " << msg << "\n";
  }

 private:
  void acquire(const fs::path& dir) {
    fs::create_directories(dir);
    const fs::path lock = dir / ".lock";
    if (fs::exists(lock)) {
      const std::string owner = io::read_file(lock);
      const bool alive = !owner.empty() && fs::exists("/proc/" + owner) && owner != std::to_string(::getpid());
      if (alive && !force_) throw config_error("stage directory " + dir.string() + " is locked by pid " + owner);
      fs::remove(lock);
    }
    std::FILE* f = std::fopen(lock.c_str(), "wx");
    if (!f) throw config_error("cannot lock " + dir.string());
    std::fputs(std::to_string(::getpid()).c_str(), f);
    std::fclose(f);
  }

  fs::path root_;
  bool force_, verbose_;
  int executed_ = 0, skipped_ = 0;
  std::map<std::string, data::ImageBatch> images_;
};

// ---------------------------------------------------------------------------
// Resolved configuration accessors

inline json pick(const json& cfg, std::initializer_list<const char*> prefixes) {
  json out = json::object();
  for (const auto& [k, v] : cfg.items())
    for (const char* p : prefixes)
      if (k == p || k.rfind(std::string(p) + ".", 0) == 0) out[k] = v;
  return out;
}

inline std::uint64_t stage_seed(const json& cfg, const char* tag) {
  return derive_seed(cfg.at("seed").get<std::uint64_t>(), tag);
}

inline codec::LatentCodecConfig codec_config(const json& cfg) {
  codec::LatentCodecConfig c;
  const std::string kind = cfg.at("codec.kind");
  if (kind == "identity") {
    c.identity = true;
    c.channels = 3;
    c.stride = 1;
  } else if (kind == "vae") {
    c.channels = cfg.at("codec.channels");
    c.stride = cfg.at("codec.stride");
    c.width = cfg.at("codec.width");
  } else {
    throw config_error("codec.kind must be vae or identity, got " + kind);
  }
  c.validate();
  return c;
}

inline vit::PretrainModelConfig model_config(const json& cfg) {
  auto m = vit::PretrainModelConfig::preset_named(cfg.at("model.preset"));
  const auto cc = codec_config(cfg);
  const int size = cfg.at("data.image_size");
  if (size % cc.stride != 0) throw config_error("data.image_size must be divisible by the codec stride");
  m.patch = cfg.at("model.patch");
  m.latent_channels = cc.channels;
  m.latent_size = size / cc.stride;
  m.mask_ratio = cfg.at("model.mask_ratio");
  m.per_patch_norm = cfg.at("model.per_patch_norm");
  m.noisy_pretrain = cfg.at("model.noisy_pretrain");
  try {
    m.validate();
  } catch (const Error& e) {
    throw config_error(e.what());
  }
  return m;
}

inline diffusion::GeneratorConfig generator_config(const json& cfg, int num_classes) {
  auto g = diffusion::GeneratorConfig::matching(model_config(cfg), diffusion::parse_framework(cfg.at("gen.framework")));
  g.num_classes = num_classes;
  g.class_dropout = cfg.at("gen.class_dropout");
  g.learned_sigma = cfg.at("gen.learned_sigma");
  g.gate_bias = cfg.at("gen.gate_bias");
  return g;
}

inline eval::SampleOptions sample_options(const json& cfg) {
  eval::SampleOptions so;
  so.n = cfg.at("eval.samples");
  so.steps = cfg.at("eval.sample_steps");
  so.cfg_scale = cfg.at("eval.cfg_scale");
  so.seed = stage_seed(cfg, "eval.sample");
  return so;
}

inline eval::ProbeOptions probe_options(const json& cfg) {
  eval::ProbeOptions o;
  o.epochs = cfg.at("probe.epochs");
  const std::string opt = cfg.at("probe.optimizer");
  if (opt != "sgd" && opt != "lars") throw config_error("probe.optimizer must be sgd or lars");
  o.lars = opt == "lars";
  o.seed = stage_seed(cfg, "probe");
  return o;
}

// ---------------------------------------------------------------------------
// One arm

struct ArmResult {
  std::string name;
  json config;
  std::map<std::string, StageRecord> stages;
  std::vector<eval::CurvePoint> curve;
  std::optional<double> probe_pretrained, probe_random;
  std::vector<double> layer_probe;

  double final_fd() const { return curve.empty() ? std::numeric_limits<double>::quiet_NaN() : curve.back().fd; }

  json to_json() const {
    json stages_j = json::object();
    for (const auto& [k, v] : stages) stages_j[k] = v.to_json();
    json j{{"config_digest", digest_of(config.dump())}, {"stages", stages_j}};
    j["final_fd"] = curve.empty() ? json() : json(curve.back().fd);
    j["final_class_score"] = curve.empty() ? json() : json(curve.back().class_score);
    if (probe_pretrained) j["probe_pretrained"] = *probe_pretrained;
    if (probe_random) j["probe_random"] = *probe_random;
    if (!layer_probe.empty()) j["layer_probe"] = layer_probe;
    return j;
  }
};

inline std::string csv_number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::vector<eval::CurvePoint> read_curve(const fs::path& p) {
  std::vector<eval::CurvePoint> out;
  std::istringstream in(io::read_file(p));
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    eval::CurvePoint c;
    char comma;
    std::istringstream ls(line);
    ls >> c.step >> comma >> c.fd >> comma >> c.class_score;
    out.push_back(c);
  }
  return out;
}

inline ArmResult run_arm(RunStore& store, const std::string& name, const json& cfg) {
  ArmResult r;
  r.name = name;
  r.config = cfg;
  const int size = cfg.at("data.image_size");
  const auto norm = codec::NormalizationSpec::from_name(cfg.at("data.norm"));
  const std::string train_spec = cfg.at("data.train"), test_spec = cfg.at("data.test");
  auto train_images = [&]() -> const data::ImageBatch& { return store.images(train_spec, size); };
  auto test_images = [&]() -> const data::ImageBatch& { return store.images(test_spec, size); };
  auto num_classes = [&] { return std::max(train_images().num_classes(), test_images().num_classes()); };

  // codec
  const auto cc = codec_config(cfg);
  auto& codec_st = r.stages["codec"] = store.run(
      "codec", {{"config", pick(cfg, {"data.train", "data.image_size", "data.norm", "codec", "seed"})}},
      [&](const fs::path& dir) {
        codec::CodecTrainOptions o;
        o.epochs = cfg.at("codec.epochs");
        o.batch = cfg.at("codec.batch");
        o.lr = cfg.at("codec.lr");
        o.max_recon_mse = cfg.at("codec.max_recon_mse");
        o.seed = stage_seed(cfg, "codec");
        o.verbose = store.verbose();
        auto res = codec::train_codec(train_images(), cc, norm, o);
        res.archive.save(dir / "codec.uspk");
      });
  const codec::FrozenCodec codec(CheckpointArchive::load(codec_st.file("codec.uspk")));

  // latent caches
  auto& cache_st = r.stages["cache"] = store.run(
      "cache", {{"codec", codec_st.digest("codec.uspk")}, {"train", train_spec}, {"test", test_spec}, {"size", size}},
      [&](const fs::path& dir) {
        codec::write_cache(codec::build_cache(train_images(), codec, norm), dir / "train.uspc");
        codec::write_cache(codec::build_cache(test_images(), codec, norm, false), dir / "test.uspc");
      });
  const auto train_cache = codec::read_cache(cache_st.file("train.uspc"));
  const auto test_cache = codec::read_cache(cache_st.file("test.uspc"));
  const auto train_set = eval::LabeledLatents::from_cache(train_cache);
  const auto test_set = eval::LabeledLatents::from_cache(test_cache);

  // embedder and reference statistics
  const std::string embed_input = cfg.at("embed.input");
  json embed_inputs{{"config", pick(cfg, {"data.train", "data.image_size", "embed", "seed"})}};
  if (embed_input == "latents") embed_inputs["cache"] = cache_st.digest("train.uspc");
  auto& embed_st = r.stages["embedder"] = store.run("embedder", embed_inputs, [&](const fs::path& dir) {
    eval::EmbedderConfig ec;
    ec.input = embed_input;
    ec.num_classes = num_classes();
    eval::EmbedderTrainOptions eo;
    eo.epochs = cfg.at("embed.epochs");
    eo.batch = cfg.at("embed.batch");
    eo.seed = stage_seed(cfg, "embedder");
    eo.verbose = store.verbose();
    MatF x = train_images().pixels;
    std::vector<int> y = train_images().labels;
    if (embed_input == "latents") {
      ec.in_channels = train_cache.channels;
      ec.image_size = train_cache.height;
      x = train_set.latents;
      y = train_set.labels;
    } else {
      ec.image_size = size;
    }
    const auto a = eval::train_embedder(x, y, ec, eo);
    a.save(dir / "embedder.uspk");
    const eval::FrozenEmbedder emb(a);
    const MatF test_x = embed_input == "latents" ? test_set.latents : test_images().pixels;
    const double acc = eval::accuracy(emb.probabilities(test_x), test_images().labels);
    io::write_file_atomic(dir / "embedder.json", json{{"test_top1", acc}}.dump(2));
  });
  const eval::FrozenEmbedder emb(CheckpointArchive::load(embed_st.file("embedder.uspk")));
  auto& ref_st = r.stages["ref"] = store.run(
      "ref", {{"embedder", embed_st.digest("embedder.uspk")}, {"test", test_spec}, {"size", size},
              {"codec", embed_input == "latents" ? json(codec_st.digest("codec.uspk")) : json()}},
      [&](const fs::path& dir) { eval::save_stats(eval::reference_stats(test_images(), emb, &codec), dir / "ref.usps"); });
  const auto ref = eval::load_stats(ref_st.file("ref.usps"));

  // pretraining
  const std::string init = cfg.at("gen.init");
  if (init != "pretrain" && init != "sft" && init != "random") throw config_error("gen.init must be pretrain, sft or random");
  const auto mc = model_config(cfg);
  const bool need_pretrain = init != "random" || cfg.at("probe.encoder").get<bool>();
  pretrain::PretrainOptions popt;
  popt.model = mc;
  popt.epochs = cfg.at("pretrain.epochs");
  popt.batch = cfg.at("pretrain.batch");
  popt.peak_lr = cfg.at("pretrain.lr");
  popt.weight_decay = cfg.at("pretrain.weight_decay");
  popt.seed = stage_seed(cfg, "pretrain");
  popt.verbose = store.verbose();
  if (need_pretrain) {
    r.stages["pretrain"] = store.run(
        "pretrain", {{"cache", cache_st.digest("train.uspc")}, {"options", popt.to_json()}}, [&](const fs::path& dir) {
          auto res = pretrain::run_pretrain(train_cache, codec.fingerprint(), popt);
          res.archive.save(dir / "pretrain.uspk");
          pretrain::write_metrics_csv(res.metrics, dir / "metrics.csv", false);
          pretrain::write_metrics_csv(res.metrics, dir / "metrics.timings");
        });
  }

  if (cfg.at("probe.encoder").get<bool>()) {
    const auto& pre = r.stages.at("pretrain");
    const auto po = probe_options(cfg);
    auto& st = r.stages["probe"] = store.run(
        "probe", {{"pretrain", pre.digest("pretrain.uspk")}, {"cache", cache_st.to_json()}, {"probe", po.to_json()}},
        [&](const fs::path& dir) {
          const auto trained = CheckpointArchive::load(pre.file("pretrain.uspk"));
          mlm::MaskedLatentModel<float> fresh(mc, derive_seed(popt.seed, "pretrain.init"));
          const auto random = pretrain::detail::model_archive(fresh, popt, codec.fingerprint(), 0);
          const auto a = eval::linear_probe(trained, train_set, test_set, po);
          const auto b = eval::linear_probe(random, train_set, test_set, po);
          io::write_file_atomic(dir / "probe.csv",
                                "trunk,top1\npretrained," + csv_number(a.top1) + "\nrandom," + csv_number(b.top1) + "\n");
        });
    std::istringstream in(io::read_file(st.file("probe.csv")));
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      const auto c = line.find(',');
      const double v = std::stod(line.substr(c + 1));
      (line.substr(0, c) == "pretrained" ? r.probe_pretrained : r.probe_random) = v;
    }
  }

  // initialization
  const auto gcfg = generator_config(cfg, num_classes());
  std::string init_digest = "random";
  std::optional<CheckpointArchive> init_archive;
  if (init != "random") {
    const auto& pre = r.stages.at("pretrain");
    std::string src_file = pre.file("pretrain.uspk").string(), src_digest = pre.digest("pretrain.uspk");
    if (init == "sft") {
      eval::FinetuneOptions fo;
      fo.epochs = cfg.at("sft.epochs");
      fo.lr = cfg.at("sft.lr");
      fo.seed = stage_seed(cfg, "sft");
      fo.verbose = store.verbose();
      auto& sft = r.stages["sft"] = store.run(
          "sft", {{"pretrain", src_digest}, {"cache", cache_st.to_json()}, {"options", fo.to_json()}},
          [&](const fs::path& dir) {
            auto res = eval::finetune_classify(CheckpointArchive::load(src_file), train_set, test_set, fo,
                                               transplant::ClassifierMode::sft_source);
            res.archive.save(dir / "sft.uspk");
            io::write_file_atomic(dir / "sft.json", res.probe.to_json().dump(2));
          });
      src_file = sft.file("sft.uspk").string();
      src_digest = sft.digest("sft.uspk");
    }
    const int k = cfg.at("transplant.reinit_last_k");
    auto& st = r.stages["init"] = store.run(
        "init", {{"source", src_digest}, {"generator", gcfg.to_json()}, {"transplant", pick(cfg, {"transplant"})},
                 {"seed", cfg.at("seed")}},
        [&](const fs::path& dir) {
          transplant::TransplantOptions to;
          to.reinit_patchconv = cfg.at("transplant.reinit_patchconv");
          to.seed = stage_seed(cfg, "transplant");
          auto res = transplant::adapt_vit_to_generator(CheckpointArchive::load(src_file), gcfg, to);
          CheckpointArchive a = k > 0 ? transplant::reinit_last_k(res.archive, k, stage_seed(cfg, "reinit")) : res.archive;
          a.save(dir / "init.uspk");
          io::write_file_atomic(dir / "report.json", a.meta.at("transplant_report").dump(2));
        });
    init_archive = CheckpointArchive::load(st.file("init.uspk"));
    init_digest = st.digest("init.uspk");
  }

  // generator training
  diffusion::GenTrainOptions go;
  go.model = gcfg;
  go.steps = cfg.at("gen.steps");
  go.batch = cfg.at("gen.batch");
  go.lr = cfg.at("gen.lr");
  go.seed = stage_seed(cfg, "gen");
  go.checkpoint_every = cfg.at("gen.checkpoint_every");
  go.verbose = store.verbose();
  auto& gen_st = r.stages["gen"] = store.run(
      "gen", {{"cache", cache_st.digest("train.uspc")}, {"init", init_digest}, {"options", go.to_json()},
               {"checkpoint_every", go.checkpoint_every}},
      [&](const fs::path& dir) {
        auto res = diffusion::train_generator(train_cache, codec.fingerprint(), go, init_archive ? &*init_archive : nullptr,
                                              dir);
        diffusion::write_step_csv(res.metrics, dir / "metrics.csv", false);
        diffusion::write_step_csv(res.metrics, dir / "metrics.timings");
      });

  // FD curve over checkpoints
  const auto so = sample_options(cfg);
  auto& curve_st = r.stages["curve"] = store.run(
      "curve", {{"gen", gen_st.to_json()}, {"embedder", embed_st.digest("embedder.uspk")}, {"ref", ref_st.digest("ref.usps")},
                {"codec", codec_st.digest("codec.uspk")}, {"sample", so.to_json()}},
      [&](const fs::path& dir) {
        std::string warn;
        const auto curve = eval::convergence_curve(gen_st.dir, ref, emb, codec, so, &warn, dir / "fd");
        if (!warn.empty()) std::cerr << "warning: " << warn << "\n";
        std::string csv = "step,fd,class_score\n";
        for (const auto& p : curve)
          csv += std::to_string(p.step) + "," + csv_number(p.fd) + "," + csv_number(p.class_score) + "\n";
        io::write_file_atomic(dir / "curve.csv", csv);
      });
  r.curve = read_curve(curve_st.file("curve.csv"));

  if (cfg.at("probe.layerwise").get<bool>()) {
    const auto ckpts = eval::list_checkpoints(gen_st.dir);
    if (ckpts.empty()) throw config_error("layerwise probe: generator stage has no checkpoints");
    const auto last = ckpts.back().second;
    const auto po = probe_options(cfg);
    auto& st = r.stages["layer_probe"] = store.run(
        "layer_probe", {{"gen", file_digest(last)}, {"cache", cache_st.to_json()}, {"probe", po.to_json()}},
        [&](const fs::path& dir) {
          const auto res = eval::layerwise_probe(CheckpointArchive::load(last), train_set, test_set, po);
          std::string csv = "layer,top1\n";
          for (std::size_t l = 0; l < res.per_layer.size(); ++l) csv += std::to_string(l) + "," + csv_number(res.per_layer[l]) + "\n";
          io::write_file_atomic(dir / "layer_probe.csv", csv);
        });
    std::istringstream in(io::read_file(st.file("layer_probe.csv")));
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) r.layer_probe.push_back(std::stod(line.substr(line.find(',') + 1)));
  }
  return r;
}

// ---------------------------------------------------------------------------
// Manifests

struct ManifestResult {
  std::vector<ArmResult> arms;
  json summary;
  int executed = 0, skipped = 0;
};

/// Runs every arm of a manifest document in file order and writes
/// summary.json, curves.csv, probes.csv and layer_probe.csv under `root`.
inline ManifestResult run_manifest(const config::Document& doc, const fs::path& root, bool force = false,
                                   bool verbose = false, const std::vector<std::string>& only = {}) {
  RunStore store(root, force, verbose);
  ManifestResult out;
  std::string curves = "run,step,fd,class_score\n", probes = "run,trunk,top1\n", layers = "run,layer,top1\n";
  json arms = json::object();
  const json base = doc.resolved();
  for (const auto& [name, overrides] : doc.arms) {
    if (!only.empty() && std::find(only.begin(), only.end(), name) == only.end()) continue;
    const json cfg = doc.resolved(name);
    out.arms.push_back(run_arm(store, name, cfg));
    const auto& a = out.arms.back();
    for (const auto& p : a.curve)
      curves += name + "," + std::to_string(p.step) + "," + csv_number(p.fd) + "," + csv_number(p.class_score) + "\n";
    if (a.probe_pretrained) probes += name + ",pretrained," + csv_number(*a.probe_pretrained) + "\n";
    if (a.probe_random) probes += name + ",random," + csv_number(*a.probe_random) + "\n";
    for (std::size_t l = 0; l < a.layer_probe.size(); ++l)
      layers += name + "," + std::to_string(l) + "," + csv_number(a.layer_probe[l]) + "\n";
    arms[name] = a.to_json();
  }
  out.summary = {{"manifest", digest_of(config::render(doc))}, {"arms", arms}};
  const double threshold = base.at("curves.threshold");
  if (threshold > 0.0) {
    json sp = json::object();
    for (const auto& a : out.arms)
      for (const auto& b : out.arms)
        if (a.name != b.name && a.config.at("gen.framework") == b.config.at("gen.framework") &&
            a.config.at("gen.init") == "random" && b.config.at("gen.init") != "random") {
          const double s = eval::speedup_ratio(a.curve, b.curve, threshold);
          sp[b.name + "/" + a.name] = std::isfinite(s) ? json(s) : json();
        }
    out.summary["speedup"] = {{"threshold", threshold}, {"ratios", sp}};
  }
  io::write_file_atomic(root / "summary.json", out.summary.dump(2));
  io::write_file_atomic(root / "curves.csv", curves);
  io::write_file_atomic(root / "probes.csv", probes);
  io::write_file_atomic(root / "layer_probe.csv", layers);
  out.executed = store.executed();
  out.skipped = store.skipped();
  return out;
}

// ---------------------------------------------------------------------------
// Ablation grids

/// Config key driven by each ablation axis.
inline std::string axis_key(const std::string& axis) {
  static const std::map<std::string, std::string> keys = {
      {"mask_ratio", "model.mask_ratio"},       {"per_patch_norm", "model.per_patch_norm"},
      {"image_norm", "data.norm"},              {"resolution", "data.image_size"},
      {"vae_choice", "codec.kind"},             {"reinit_last_k", "transplant.reinit_last_k"},
      {"init_source", "gen.init"},              {"noisy_pretrain", "model.noisy_pretrain"},
      {"gate_bias", "gen.gate_bias"}};
  auto it = keys.find(axis);
  if (it == keys.end())
    throw config_error("unknown ablation axis '" + axis +
                       "' (mask_ratio|per_patch_norm|image_norm|resolution|vae_choice|reinit_last_k|init_source|"
                       "noisy_pretrain|gate_bias)");
  return it->second;
}

struct AblationGrid {
  std::string axis;
  std::vector<std::string> values;
  config::Document base;

  /// Manifest with one arm per value, named <axis>=<value>.
  config::Document manifest() const {
    if (values.empty()) throw config_error("ablation: no values given");
    const std::string key = axis_key(axis);
    config::Document d;
    d.values = base.values;
    for (const auto& v : values) d.set(key, v, axis + "=" + v);
    // purity: resolved arms differ from each other only in the axis key
    const json first = d.resolved(d.arms.front().first);
    for (const auto& [name, _] : d.arms)
      for (const auto& k : config::diff_keys(first, d.resolved(name)))
        if (k != key) throw config_error("ablation: arm " + name + " differs outside the axis in " + k);
    return d;
  }
};

struct AblationResult {
  ManifestResult manifest;
  std::string table;  // CSV
};

inline AblationResult run_ablation(const AblationGrid& grid, const fs::path& root, bool force = false,
                                   bool verbose = false) {
  AblationResult r;
  r.manifest = run_manifest(grid.manifest(), root, force, verbose);
  std::string csv = "axis,value,final_fd,final_class_score,probe_pretrained,probe_random\n";
  for (std::size_t i = 0; i < r.manifest.arms.size(); ++i) {
    const auto& a = r.manifest.arms[i];
    csv += grid.axis + "," + grid.values[i] + "," + (a.curve.empty() ? "" : csv_number(a.final_fd())) + "," +
           (a.curve.empty() ? "" : csv_number(a.curve.back().class_score)) + "," +
           (a.probe_pretrained ? csv_number(*a.probe_pretrained) : "") + "," +
           (a.probe_random ? csv_number(*a.probe_random) : "") + "\n";
  }
  io::write_file_atomic(root / "ablation.csv", csv);
  r.table = csv;
  return r;
}

// ---------------------------------------------------------------------------
// Plot data

/// Long-format label,x,y rows from the metric CSVs of manifest roots.
/// fd_curve reads curves.csv (x = step, y = fd); layer_probe reads
/// layer_probe.csv (x = layer, y = top1). Labels are <root name>/<arm>.
inline std::string emit_plotdata(const std::vector<fs::path>& roots, const std::string& kind) {
  std::string file, x_col, y_col;
  if (kind == "fd_curve") {
    file = "curves.csv", x_col = "step", y_col = "fd";
  } else if (kind == "layer_probe") {
    file = "layer_probe.csv", x_col = "layer", y_col = "top1";
  } else {
    throw config_error("plot kind must be fd_curve, layer_probe or restoration_panel");
  }
  std::string out = "label,x,y\n";
  for (const auto& root : roots) {
    const fs::path p = root / file;
    if (!fs::exists(p)) throw config_error("plotdata: missing " + p.string());
    std::istringstream in(io::read_file(p));
    std::string header, line;
    std::getline(in, header);
    std::vector<std::string> cols;
    {
      std::istringstream hs(header);
      std::string c;
      while (std::getline(hs, c, ',')) cols.push_back(c);
    }
    auto col = [&](const std::string& n) {
      auto it = std::find(cols.begin(), cols.end(), n);
      if (it == cols.end()) throw config_error("plotdata: " + p.string() + " has no column " + n);
      return static_cast<std::size_t>(it - cols.begin());
    };
    const std::size_t xi = col(x_col), yi = col(y_col), ri = col("run");
    while (std::getline(in, line)) {
      std::vector<std::string> f;
      std::istringstream ls(line);
      std::string c;
      while (std::getline(ls, c, ',')) f.push_back(c);
      if (f.size() < cols.size()) continue;
      out += root.filename().string() + "/" + f[ri] + "," + f[xi] + "," + f[yi] + "\n";
    }
  }
  return out;
}

/// Writes (ground truth, masked, restored) PPM triplets for n images; returns the file paths.
inline std::vector<fs::path> restoration_panel(const CheckpointArchive& pretrained, const codec::FrozenCodec& codec,
                                               const data::ImageBatch& images, double ratio, std::uint64_t seed,
                                               const fs::path& out_dir) {
  const auto model = pretrain::load_model(pretrained);
  const auto r = mlm::restore(images, model, codec, ratio, seed);
  std::vector<fs::path> files;
  const int h = images.height, w = images.width;
  auto put = [&](const MatF& m, Eigen::Index i, const std::string& tag) {
    char name[64];
    std::snprintf(name, sizeof name, "%04lld_%s.ppm", static_cast<long long>(i), tag.c_str());
    const fs::path p = out_dir / name;
    const RowVec<float> row = m.row(i);
    io::write_file_atomic(p, data::encode_ppm(row.data(), h, w));
    files.push_back(p);
  };
  for (Eigen::Index i = 0; i < images.size(); ++i) {
    put(images.pixels, i, "gt");
    put(r.masked_pixels, i, "masked");
    put(r.restored_pixels, i, "restored");
  }
  return files;
}

}  // namespace usp::pipeline

#endif  // USP_PIPELINE_HPP
