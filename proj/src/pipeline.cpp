#include "regconsist/pipeline.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <ostream>
#include <set>

#include "regconsist/error.hpp"
#include "regconsist/hash.hpp"
#include "regconsist/io.hpp"
#include "regconsist/parallel.hpp"

namespace regconsist::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Reads one JSON object, rejecting keys that were never asked for.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("config '" + path_ + "' must be an object");
  }
  Section(const Section&) = delete;

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError("config key '" + path_ + "." + key + "' has the wrong type: " + e.what());
    }
  }

  template <typename T>
  void get_optional(const char* key, std::optional<T>& out) {
    seen_.insert(key);
    if (!j_.contains(key) || j_.at(key).is_null()) return;
    T v{};
    get(key, v);
    out = v;
  }

  const json& sub(const char* key) {
    seen_.insert(key);
    static const json empty = json::object();
    return j_.contains(key) ? j_.at(key) : empty;
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError("unknown config key '" + (path_.empty() ? key : path_ + "." + key) + "'");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace

ExperimentConfig default_config() {
  ExperimentConfig c;
  c.supervise.finetune.base_lr = 1.0;
  c.supervise.finetune.iters = 1000;
  return c;
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  ExperimentConfig c = default_config();
  Section root(j, "");
  int version = 0;
  root.get("version", version);
  if (version != kConfigVersion) {
    throw ConfigError("config version must be " + std::to_string(kConfigVersion) + " (got " + std::to_string(version) + ")");
  }
  {
    Section ds(root.sub("dataset"), "dataset");
    std::optional<std::string> manifest;
    ds.get_optional("manifest", manifest);
    if (manifest) c.manifest = fs::path(*manifest);
    Section w(ds.sub("synthworld"), "dataset.synthworld");
    w.get("seed", c.world.seed);
    w.get("n_objects", c.world.n_objects);
    w.get_optional("camera_height", c.world.camera_height);
    w.get("grid_step", c.world.grid_step);
    w.get("yaw_step", c.world.yaw_step);
    Section ext(w.sub("extent"), "dataset.synthworld.extent");
    ext.get("x", c.world.extent.x);
    ext.get("z", c.world.extent.z);
    ext.get("y", c.world.extent.y);
    ext.finish();
    Section cam(w.sub("camera"), "dataset.synthworld.camera");
    cam.get("fx", c.world.camera.fx);
    cam.get("fy", c.world.camera.fy);
    cam.get("cx", c.world.camera.cx);
    cam.get("cy", c.world.camera.cy);
    cam.get("width", c.world.camera.width);
    cam.get("height", c.world.camera.height);
    cam.finish();
    w.finish();
    ds.finish();
  }
  {
    Section s(root.sub("pairing"), "pairing");
    s.get("iou_low", c.pairing.iou_low);
    s.get("iou_high", c.pairing.iou_high);
    s.get("epsilon_rel", c.pairing.epsilon_rel);
    s.get("stride", c.pairing.stride);
    s.finish();
  }
  {
    Section s(root.sub("regions"), "regions");
    s.get("source", c.region_source);
    s.get("scale", c.segment.scale);
    s.get("sigma", c.segment.sigma);
    std::string mode = regions::to_string(c.segment.mode);
    s.get("mode", mode);
    try {
      c.segment.mode = regions::parse_sigma_mode(mode);
    } catch (const InvalidArgument& e) {
      throw ConfigError(std::string("regions.mode: ") + e.what());
    }
    s.get("min_size", c.segment.min_size);
    s.finish();
  }
  {
    Section s(root.sub("matching"), "matching");
    s.get("tau_region", c.tau_region);
    s.finish();
  }
  {
    Section s(root.sub("sampling"), "sampling");
    std::string strategy = c.sampling.strategy();
    s.get("strategy", strategy);
    try {
      sampling::parse_strategy(strategy, c.sampling);
    } catch (const InvalidArgument& e) {
      throw ConfigError(std::string("sampling.strategy: ") + e.what());
    }
    s.get("pairs", c.sampling.pairs);
    s.get("seed", c.sampling.seed);
    s.get("preview_batches", c.preview_batches);
    s.finish();
  }
  {
    Section s(root.sub("augment"), "augment");
    s.get("crop_size", c.augment.crop_size);
    s.get("strong_scale", c.augment.strong_scale);
    s.get("weak_scale", c.augment.weak_scale);
    s.get("ratio", c.augment.ratio);
    s.get("brightness", c.augment.brightness);
    s.get("contrast", c.augment.contrast);
    s.get("saturation", c.augment.saturation);
    s.get("hue", c.augment.hue);
    s.get("jitter_p", c.augment.jitter_p);
    s.get("grayscale_p", c.augment.grayscale_p);
    s.get("blur_p", c.augment.blur_p);
    s.get("blur_sigma", c.augment.blur_sigma);
    s.finish();
  }
  {
    Section s(root.sub("ssl"), "ssl");
    s.get("lambda", c.ssl.lambda);
    s.get("grad_clip_norm", c.ssl.grad_clip_norm);
    s.get("base_lr", c.ssl.base_lr);
    s.get("final_lr_factor", c.ssl.final_lr_factor);
    s.get("warmup_iters", c.ssl.warmup_iters);
    s.get("total_iters", c.ssl.total_iters);
    s.get("view_pairs_per_step", c.ssl.view_pairs_per_step);
    s.get("center", c.ssl.center);
    s.get("seed", c.ssl.seed);
    s.get("channels", c.ssl.encoder.channels);
    s.get("feature_dim", c.ssl.encoder.feature_dim);
    s.finish();
  }
  {
    Section s(root.sub("supervise"), "supervise");
    auto& sv = c.supervise;
    s.get("init", sv.init);
    s.get("fraction", sv.fraction);
    s.get_optional("test_split_fraction", sv.test_split_fraction);
    s.get("split_seed", sv.split_seed);
    s.get("mode", sv.mode);
    s.get("probe_iters", sv.probe_iters);
    s.get("probe_lr", sv.probe_lr);
    s.get("num_classes", sv.num_classes);
    s.get("overlays", sv.overlays);
    s.get("gamma", sv.finetune.gamma);
    s.get("base_lr", sv.finetune.base_lr);
    s.get("power", sv.finetune.power);
    s.get("weight_decay", sv.finetune.weight_decay);
    s.get("iters", sv.finetune.iters);
    s.get("input_size", sv.finetune.input_size);
    s.get("frames_per_step", sv.finetune.frames_per_step);
    s.get("seed", sv.finetune.seed);
    s.finish();
  }
  root.finish();
  c.validate();
  return c;
}

json ExperimentConfig::to_json() const {
  json j;
  j["version"] = kConfigVersion;
  j["dataset"]["manifest"] = manifest ? json(manifest->string()) : json(nullptr);
  auto& w = j["dataset"]["synthworld"];
  w["seed"] = world.seed;
  w["n_objects"] = world.n_objects;
  w["camera_height"] = world.camera_height ? json(*world.camera_height) : json(nullptr);
  w["grid_step"] = world.grid_step;
  w["yaw_step"] = world.yaw_step;
  w["extent"] = {{"x", world.extent.x}, {"z", world.extent.z}, {"y", world.extent.y}};
  w["camera"] = {{"fx", world.camera.fx}, {"fy", world.camera.fy},       {"cx", world.camera.cx},
                 {"cy", world.camera.cy}, {"width", world.camera.width}, {"height", world.camera.height}};
  j["pairing"] = {{"iou_low", pairing.iou_low},
                  {"iou_high", pairing.iou_high},
                  {"epsilon_rel", pairing.epsilon_rel},
                  {"stride", pairing.stride}};
  j["regions"] = {{"source", region_source},
                  {"scale", segment.scale},
                  {"sigma", segment.sigma},
                  {"mode", regions::to_string(segment.mode)},
                  {"min_size", segment.min_size}};
  j["matching"] = {{"tau_region", tau_region}};
  j["sampling"] = {{"strategy", sampling.strategy()},
                   {"pairs", sampling.pairs},
                   {"seed", sampling.seed},
                   {"preview_batches", preview_batches}};
  j["augment"] = {{"crop_size", augment.crop_size},   {"strong_scale", augment.strong_scale},
                  {"weak_scale", augment.weak_scale}, {"ratio", augment.ratio},
                  {"brightness", augment.brightness}, {"contrast", augment.contrast},
                  {"saturation", augment.saturation}, {"hue", augment.hue},
                  {"jitter_p", augment.jitter_p},     {"grayscale_p", augment.grayscale_p},
                  {"blur_p", augment.blur_p},         {"blur_sigma", augment.blur_sigma}};
  j["ssl"] = {{"lambda", ssl.lambda},
              {"grad_clip_norm", ssl.grad_clip_norm},
              {"base_lr", ssl.base_lr},
              {"final_lr_factor", ssl.final_lr_factor},
              {"warmup_iters", ssl.warmup_iters},
              {"total_iters", ssl.total_iters},
              {"view_pairs_per_step", ssl.view_pairs_per_step},
              {"center", ssl.center},
              {"seed", ssl.seed},
              {"channels", ssl.encoder.channels},
              {"feature_dim", ssl.encoder.feature_dim}};
  const auto& sv = supervise;
  j["supervise"] = {{"init", sv.init},
                    {"fraction", sv.fraction},
                    {"test_split_fraction", sv.test_split_fraction ? json(*sv.test_split_fraction) : json(nullptr)},
                    {"split_seed", sv.split_seed},
                    {"mode", sv.mode},
                    {"probe_iters", sv.probe_iters},
                    {"probe_lr", sv.probe_lr},
                    {"num_classes", sv.num_classes},
                    {"overlays", sv.overlays},
                    {"gamma", sv.finetune.gamma},
                    {"base_lr", sv.finetune.base_lr},
                    {"power", sv.finetune.power},
                    {"weight_decay", sv.finetune.weight_decay},
                    {"iters", sv.finetune.iters},
                    {"input_size", sv.finetune.input_size},
                    {"frames_per_step", sv.finetune.frames_per_step},
                    {"seed", sv.finetune.seed}};
  return j;
}

void ExperimentConfig::validate() const {
  auto wrap = [](auto&& fn) {
    try {
      fn();
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      throw ConfigError(e.what());
    }
  };
  wrap([&] { world.camera.validate(); });
  if (world.n_objects < 1) throw ConfigError("dataset.synthworld.n_objects must be >= 1");
  if (!(pairing.iou_low >= 0.0 && pairing.iou_low < pairing.iou_high && pairing.iou_high <= 1.0)) {
    throw ConfigError("pairing: require 0 <= iou_low < iou_high <= 1");
  }
  if (!(pairing.epsilon_rel > 0.0) || pairing.stride < 1) throw ConfigError("pairing: epsilon_rel > 0 and stride >= 1");
  if (region_source != "segment" && region_source != "labels") {
    throw ConfigError("regions.source must be 'segment' or 'labels'");
  }
  if (!(segment.scale > 0.0) || !(segment.sigma >= 0.0) || segment.min_size < 1) {
    throw ConfigError("regions: scale > 0, sigma >= 0 and min_size >= 1 required");
  }
  if (!(tau_region > 0.0 && tau_region <= 1.0)) throw ConfigError("matching.tau_region must lie in (0, 1]");
  wrap([&] { sampling.validate(); });
  if (preview_batches < 0) throw ConfigError("sampling.preview_batches must be >= 0");
  wrap([&] { augment.validate(); });
  wrap([&] { ssl.validate(); });
  const auto& sv = supervise;
  if (sv.init.empty()) throw ConfigError("supervise.init must be 'pretrained', 'random' or a checkpoint path");
  if (sv.mode != "linear_probe" && sv.mode != "full") throw ConfigError("supervise.mode must be 'linear_probe' or 'full'");
  if (!(sv.fraction > 0.0 && sv.fraction < 1.0)) throw ConfigError("supervise.fraction must lie in (0, 1)");
  if (sv.test_split_fraction && !(*sv.test_split_fraction >= sv.fraction && *sv.test_split_fraction < 1.0)) {
    throw ConfigError("supervise.test_split_fraction must lie in [fraction, 1)");
  }
  if (sv.probe_iters < 0 || !(sv.probe_lr > 0.0) || sv.num_classes < 0 || sv.overlays < 0) {
    throw ConfigError("supervise: probe_iters >= 0, probe_lr > 0, num_classes >= 0, overlays >= 0 required");
  }
  wrap([&] { sv.finetune.validate(); });
}

ExperimentConfig load_config(const fs::path& path) {
  json j;
  try {
    j = json::parse(io::read_text(path));
  } catch (const json::exception& e) {
    throw ConfigError("cannot parse config " + path.string() + ": " + e.what());
  } catch (const IoError& e) {
    throw ConfigError(e.what());
  }
  return ExperimentConfig::from_json(j);
}

ExperimentConfig with_seed(ExperimentConfig config, std::uint64_t seed) {
  config.sampling.seed = seed;
  config.ssl.seed = seed;
  config.supervise.split_seed = seed;
  config.supervise.finetune.seed = seed;
  return config;
}

const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names{"genworld",    "pair-select", "segment",  "match-regions",
                                              "sample-pairs", "pretrain",    "finetune", "eval"};
  return names;
}

std::vector<std::string> stage_dependencies(const std::string& stage, const ExperimentConfig& config) {
  if (stage == "genworld") return {};
  if (stage == "pair-select") return {"genworld"};
  if (stage == "segment") return {"pair-select"};
  if (stage == "match-regions") return {"segment"};
  if (stage == "sample-pairs") return {"match-regions"};
  if (stage == "pretrain") return {"sample-pairs"};
  if (stage == "finetune") return {config.supervise.init == "pretrained" ? "pretrain" : "genworld"};
  if (stage == "eval") return {"finetune"};
  throw InvalidArgument("unknown stage '" + stage + "'");
}

namespace {

// The config sections a stage reads; its provenance hash covers exactly these.
json stage_config(const std::string& stage, const ExperimentConfig& config) {
  const json all = config.to_json();
  json j;
  if (stage == "genworld") {
    j["dataset"] = all["dataset"];
  } else if (stage == "pair-select") {
    j["pairing"] = all["pairing"];
  } else if (stage == "segment") {
    j["regions"] = all["regions"];
  } else if (stage == "match-regions") {
    j["matching"] = all["matching"];
  } else if (stage == "sample-pairs") {
    j["sampling"] = all["sampling"];
  } else if (stage == "pretrain") {
    j["augment"] = all["augment"];
    j["ssl"] = all["ssl"];
  } else if (stage == "finetune") {
    j["supervise"] = all["supervise"];
    j["supervise"].erase("overlays");
    if (config.supervise.init == "random") {
      j["ssl"] = {{"seed", config.ssl.seed}, {"channels", all["ssl"]["channels"]}, {"feature_dim", all["ssl"]["feature_dim"]}};
    } else if (config.supervise.init != "pretrained") {
      const fs::path ckpt(config.supervise.init);
      j["init_checkpoint"] = fs::exists(ckpt) ? sha256_file(ckpt) : std::string("missing");
    }
  } else if (stage == "eval") {
    j["overlays"] = config.supervise.overlays;
  }
  return j;
}

std::string config_hash(const std::string& stage, const ExperimentConfig& config) {
  return sha256_hex(stage_config(stage, config).dump());
}

fs::path stage_dir(const fs::path& workdir, const std::string& stage) { return workdir / stage; }
fs::path provenance_path(const fs::path& workdir, const std::string& stage) {
  return stage_dir(workdir, stage) / "provenance.json";
}

void log_line(const RunOptions& o, const std::string& text) {
  if (o.log) *o.log << text << std::endl;
}

// Output files of a stage directory, relative paths sorted.
std::vector<std::string> list_outputs(const fs::path& dir) {
  std::vector<std::string> out;
  if (!fs::exists(dir)) return out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), dir).generic_string();
    if (rel != "provenance.json") out.push_back(rel);
  }
  std::sort(out.begin(), out.end());
  return out;
}

json read_json(const fs::path& path) {
  try {
    return json::parse(io::read_text(path));
  } catch (const json::exception& e) {
    throw FormatError("cannot parse " + path.string() + ": " + e.what());
  }
}

bool outputs_intact(const fs::path& dir, const json& prov) {
  const auto& outputs = prov.at("outputs");
  if (list_outputs(dir).size() != outputs.size()) return false;
  for (const auto& [rel, hash] : outputs.items()) {
    const auto p = dir / rel;
    if (!fs::exists(p) || sha256_file(p) != hash.get<std::string>()) return false;
  }
  return true;
}

// Clears a stage directory; keeps the directory itself (it may be a symlink target).
void reset_dir(const fs::path& dir) {
  fs::create_directories(dir);
  for (const auto& e : fs::directory_iterator(dir)) fs::remove_all(e.path());
}

struct Context {
  const ExperimentConfig& config;
  const RunOptions& options;
  fs::path dir;

  fs::path upstream(const std::string& stage) const { return stage_dir(options.workdir, stage); }
};

io::DatasetManifest load_dataset(const Context& ctx) {
  const json ref = read_json(ctx.upstream("genworld") / "dataset.json");
  return io::load_manifest(ref.at("manifest").get<std::string>());
}

std::vector<Frame> load_frames(const io::DatasetManifest& manifest, const std::vector<std::string>& ids, int jobs) {
  std::vector<Frame> frames(ids.size());
  parallel_for(ids.size(), jobs, [&](std::size_t i) { frames[i] = io::load_frame(manifest, ids[i]); });
  return frames;
}

const CameraModel& shared_camera(const io::DatasetManifest& manifest) {
  if (manifest.frames.empty()) throw InvalidArgument("dataset has no frames");
  const CameraModel& cam = manifest.camera_for(manifest.frames.front().id);
  for (const auto& f : manifest.frames) {
    if (manifest.camera_for(f.id) != cam) throw InvalidArgument("all frames must share one camera model");
  }
  return cam;
}

fs::path region_path(const fs::path& segment_dir, const std::string& id) { return segment_dir / "regions" / (id + ".pgm"); }

std::string pair_name(const geometry::ViewPair& vp) { return vp.id1 + "__" + vp.id2; }

int num_classes_for(const ExperimentConfig& config, const io::DatasetManifest& manifest) {
  if (config.supervise.num_classes > 0) return config.supervise.num_classes;
  if (manifest.class_names.empty()) {
    throw ConfigError("supervise.num_classes must be set when the manifest has no class names");
  }
  return static_cast<int>(manifest.class_names.size());
}

void run_genworld(const Context& ctx) {
  fs::path manifest_path;
  if (ctx.config.manifest) {
    manifest_path = fs::absolute(*ctx.config.manifest);
    io::load_manifest(manifest_path).validate();
  } else {
    manifest_path = fs::absolute(synthworld::write_world(ctx.config.world, ctx.dir / "world", ctx.options.jobs));
  }
  const auto manifest = io::load_manifest(manifest_path);
  io::write_text(ctx.dir / "dataset.json",
                 json{{"manifest", manifest_path.string()}, {"manifest_hash", io::manifest_hash(manifest)},
                      {"frames", manifest.frames.size()}}
                         .dump(2) +
                     "\n");
}

void run_pair_select(const Context& ctx) {
  const auto manifest = load_dataset(ctx);
  auto opts = ctx.config.pairing;
  opts.jobs = ctx.options.jobs;
  opts.cache_dir = ctx.options.workdir / "cache";
  const auto pairs = geometry::select_view_pairs(manifest, opts);
  geometry::save_view_pairs(pairs, ctx.dir / "view_pairs.jsonl");
  log_line(ctx.options, "  " + std::to_string(pairs.size()) + " view pairs in band");
}

void run_segment(const Context& ctx) {
  const auto manifest = load_dataset(ctx);
  const auto ids = manifest.frame_ids();
  std::vector<int> counts(ids.size(), 0);
  parallel_for(ids.size(), ctx.options.jobs, [&](std::size_t i) {
    const Frame f = io::load_frame(manifest, ids[i]);
    regions::RegionMap map;
    if (ctx.config.region_source == "labels") {
      if (!f.labels) throw InvalidArgument("regions.source=labels but frame '" + f.id + "' has no labels");
      map = regions::region_map_from_labels(*f.labels);
    } else {
      map = regions::segment_graph(f.rgb, ctx.config.segment);
    }
    counts[i] = map.count;
    regions::save_region_map(map, region_path(ctx.dir, ids[i]), ctx.dir / "regions" / (ids[i] + ".json"));
  });
  double mean = 0.0;
  for (int c : counts) mean += c;
  mean /= std::max<std::size_t>(1, counts.size());
  io::write_text(ctx.dir / "summary.json",
                 json{{"frames", ids.size()}, {"mean_regions", mean}, {"source", ctx.config.region_source}}.dump(2) + "\n");
}

void run_match_regions(const Context& ctx) {
  const auto manifest = load_dataset(ctx);
  const auto& cam = shared_camera(manifest);
  const auto pairs = geometry::load_view_pairs(ctx.upstream("pair-select") / "view_pairs.jsonl");
  const fs::path seg = ctx.upstream("segment");
  std::vector<std::string> lines(pairs.size());
  std::vector<std::size_t> n_matches(pairs.size(), 0);
  parallel_for(pairs.size(), ctx.options.jobs, [&](std::size_t i) {
    const auto& vp = pairs[i];
    const Frame f1 = io::load_frame(manifest, vp.id1);
    const Frame f2 = io::load_frame(manifest, vp.id2);
    const auto r1 = regions::load_region_map(region_path(seg, vp.id1));
    const auto r2 = regions::load_region_map(region_path(seg, vp.id2));
    const auto table = matching::region_iou_table(matching::warp_region_map(r1, f1, f2, cam, ctx.config.pairing.epsilon_rel), r2);
    matching::save_iou_table(table, ctx.dir / "tables" / (pair_name(vp) + ".jsonl"));
    const auto matches = matching::match_regions(table, ctx.config.tau_region);
    n_matches[i] = matches.size();
    for (const auto& m : matches) {
      lines[i] += json{{"id1", vp.id1}, {"id2", vp.id2}, {"u", m.u}, {"v", m.v}, {"iou", m.iou}}.dump() + "\n";
    }
  });
  std::string all;
  for (const auto& l : lines) all += l;
  io::write_text(ctx.dir / "matches.jsonl", all);
  const auto with_match = std::count_if(n_matches.begin(), n_matches.end(), [](auto n) { return n > 0; });
  io::write_text(ctx.dir / "summary.json",
                 json{{"view_pairs", pairs.size()}, {"view_pairs_with_match", with_match}}.dump(2) + "\n");
}

void run_sample_pairs(const Context& ctx) {
  const auto manifest = load_dataset(ctx);
  const auto& cam = shared_camera(manifest);
  const auto pairs = geometry::load_view_pairs(ctx.upstream("pair-select") / "view_pairs.jsonl");
  const fs::path seg = ctx.upstream("segment");
  json summary = json::array();
  int written = 0;
  for (std::size_t i = 0; i < pairs.size() && written < ctx.config.preview_batches; ++i) {
    const auto& vp = pairs[i];
    const auto data = sampling::build_view_pair_data(
        io::load_frame(manifest, vp.id1), io::load_frame(manifest, vp.id2), cam, regions::load_region_map(region_path(seg, vp.id1)),
        regions::load_region_map(region_path(seg, vp.id2)), ctx.config.pairing.epsilon_rel, ctx.config.tau_region);
    auto sc = ctx.config.sampling;
    sc.seed = sampling::mix_seed(ctx.config.sampling.seed, i);
    PairBatch batch;
    try {
      batch = sampling::sample_pair_batch(data, sc);
    } catch (const InvalidArgument&) {
      continue;
    }
    io::save_pair_batch(batch, ctx.dir / "batches" / (pair_name(vp) + ".rcpairs"));
    summary.push_back({{"id1", vp.id1},
                       {"id2", vp.id2},
                       {"emitted", batch.pairs.size()},
                       {"supply_exact", sampling::pair_supply_size(data, sampling::Matcher::kExact)},
                       {"supply_region", sampling::pair_supply_size(data, sampling::Matcher::kRegion)}});
    ++written;
  }
  io::write_text(ctx.dir / "summary.json",
                 json{{"strategy", ctx.config.sampling.strategy()}, {"pairs", ctx.config.sampling.pairs}, {"batches", summary}}
                         .dump(2) +
                     "\n");
}

void run_pretrain(const Context& ctx) {
  const auto manifest = load_dataset(ctx);
  ssl::PretrainData data;
  data.camera = shared_camera(manifest);
  data.view_pairs = geometry::load_view_pairs(ctx.upstream("pair-select") / "view_pairs.jsonl");
  data.frames = load_frames(manifest, manifest.frame_ids(), ctx.options.jobs);
  const fs::path seg = ctx.upstream("segment");
  for (const auto& f : data.frames) data.regions.push_back(regions::load_region_map(region_path(seg, f.id)));
  data.epsilon_rel = ctx.config.pairing.epsilon_rel;
  data.tau_region = ctx.config.tau_region;
  const int every = std::max(1, ctx.config.ssl.total_iters / 10);
  const auto result = ssl::pretrain(data, ctx.config.sampling, ctx.config.ssl, ctx.config.augment, ctx.options.jobs,
                                    [&](const ssl::LossRecord& r) {
                                      if (r.iter % every == 0 || r.iter + 1 == ctx.config.ssl.total_iters) {
                                        char buf[96];
                                        std::snprintf(buf, sizeof(buf), "  iter %d loss %.4f lr %.5f", r.iter, r.loss, r.lr);
                                        log_line(ctx.options, buf);
                                      }
                                    });
  io::save_archive(ssl::encoder_archive(result.encoder), ctx.dir / "encoder.ckpt");
  ssl::write_loss_csv(result.log, ctx.dir / "loss.csv");
  io::write_text(ctx.dir / "summary.json", json{{"usable_view_pairs", result.usable_view_pairs},
                                                {"skipped_view_pairs", result.skipped_view_pairs},
                                                {"final_loss", result.log.back().loss}}
                                                   .dump(2) +
                                               "\n");
}

void run_finetune(const Context& ctx) {
  const auto manifest = load_dataset(ctx);
  const auto& sv = ctx.config.supervise;
  const int k = num_classes_for(ctx.config, manifest);
  const auto train_ids = supervise::split_labeled(manifest, sv.fraction, sv.split_seed).first;
  const auto test_ids = supervise::split_labeled(manifest, sv.test_split_fraction.value_or(sv.fraction), sv.split_seed).second;
  const auto train = load_frames(manifest, train_ids, ctx.options.jobs);
  ssl::Encoder enc;
  if (sv.init == "pretrained") {
    enc = ssl::encoder_from_archive(io::load_archive(ctx.upstream("pretrain") / "encoder.ckpt"));
  } else if (sv.init == "random") {
    enc = ssl::initial_encoder(ctx.config.ssl);
  } else {
    enc = ssl::encoder_from_archive(io::load_archive(sv.init));
  }
  auto model = supervise::SegModel::create(std::move(enc), k, sampling::mix_seed(sv.finetune.seed, 0x4ead));
  std::vector<double> losses;
  if (sv.mode == "full" && sv.probe_iters > 0) {
    auto probe = sv.finetune;
    probe.linear_probe = true;
    probe.iters = sv.probe_iters;
    probe.base_lr = sv.probe_lr;
    probe.frames_per_step = 0;
    auto r = supervise::finetune(std::move(model), train, probe, manifest.ignore_label, ctx.options.jobs);
    model = std::move(r.model);
    losses = std::move(r.losses);
  }
  auto cfg = sv.finetune;
  cfg.linear_probe = sv.mode == "linear_probe";
  auto r = supervise::finetune(std::move(model), train, cfg, manifest.ignore_label, ctx.options.jobs);
  losses.insert(losses.end(), r.losses.begin(), r.losses.end());
  io::save_archive(supervise::model_archive(r.model), ctx.dir / "model.ckpt");
  io::write_text(ctx.dir / "split.json", json{{"train", train_ids}, {"test", test_ids}}.dump(2) + "\n");
  std::string csv = "iter,loss\n";
  for (std::size_t i = 0; i < losses.size(); ++i) csv += std::to_string(i) + "," + std::to_string(losses[i]) + "\n";
  io::write_text(ctx.dir / "loss.csv", csv);
  log_line(ctx.options, "  trained on " + std::to_string(train.size()) + " frames, final loss " + std::to_string(losses.back()));
}

void run_eval(const Context& ctx) {
  const auto manifest = load_dataset(ctx);
  const auto model = supervise::model_from_archive(io::load_archive(ctx.upstream("finetune") / "model.ckpt"));
  const auto split = read_json(ctx.upstream("finetune") / "split.json");
  const auto test_ids = split.at("test").get<std::vector<std::string>>();
  const auto test = load_frames(manifest, test_ids, ctx.options.jobs);
  const int k = num_classes_for(ctx.config, manifest);
  const auto report = supervise::evaluate_miou(model, test, k, ctx.config.supervise.finetune.input_size,
                                               manifest.ignore_label, ctx.options.jobs);
  io::write_text(ctx.dir / "report.json", supervise::report_to_json(report, manifest.class_names));
  for (int i = 0; i < ctx.config.supervise.overlays && i < static_cast<int>(test.size()); ++i) {
    const auto& f = test[static_cast<std::size_t>(i)];
    supervise::write_overlay(f, supervise::predict(model, f, ctx.config.supervise.finetune.input_size),
                             ctx.dir / "overlays" / (f.id + ".ppm"));
  }
  char buf[96];
  std::snprintf(buf, sizeof(buf), "  mIoU %.4f (gt classes %.4f) over %zu frames", report.miou, report.miou_gt, test.size());
  log_line(ctx.options, buf);
}

json expected_inputs(const std::string& stage, const ExperimentConfig& config, const fs::path& workdir) {
  json inputs = json::object();
  for (const auto& dep : stage_dependencies(stage, config)) {
    const auto prov = provenance_path(workdir, dep);
    if (!fs::exists(prov)) {
      throw DependencyError("stage '" + stage + "' needs the outputs of '" + dep + "'; run `regconsist " + dep + "` first");
    }
    const json dep_prov = read_json(prov);
    if (dep_prov.at("config_hash").get<std::string>() != config_hash(dep, config)) {
      throw DependencyError("outputs of '" + dep + "' were produced with a different config; run `regconsist " + dep +
                            "` first");
    }
    inputs[dep] = sha256_file(prov);
  }
  return inputs;
}

}  // namespace

StageResult run_stage(const std::string& stage, const ExperimentConfig& config, const RunOptions& options) {
  if (std::find(stage_names().begin(), stage_names().end(), stage) == stage_names().end()) {
    throw InvalidArgument("unknown stage '" + stage + "'");
  }
  config.validate();
  const json inputs = expected_inputs(stage, config, options.workdir);
  const std::string chash = config_hash(stage, config);
  StageResult result{stage, stage_dir(options.workdir, stage), false};
  const fs::path prov_path = provenance_path(options.workdir, stage);
  if (!options.force && fs::exists(prov_path)) {
    const json prov = read_json(prov_path);
    if (prov.value("config_hash", "") == chash && prov.value("inputs", json::object()) == inputs &&
        prov.value("tool_version", "") == kToolVersion && outputs_intact(result.dir, prov)) {
      result.up_to_date = true;
      log_line(options, stage + ": up to date");
      return result;
    }
  }
  log_line(options, stage + ": running");
  reset_dir(result.dir);
  const Context ctx{config, options, result.dir};
  if (stage == "genworld") {
    run_genworld(ctx);
  } else if (stage == "pair-select") {
    run_pair_select(ctx);
  } else if (stage == "segment") {
    run_segment(ctx);
  } else if (stage == "match-regions") {
    run_match_regions(ctx);
  } else if (stage == "sample-pairs") {
    run_sample_pairs(ctx);
  } else if (stage == "pretrain") {
    run_pretrain(ctx);
  } else if (stage == "finetune") {
    run_finetune(ctx);
  } else {
    run_eval(ctx);
  }
  io::write_text(result.dir / "config.json", config.to_json().dump(2) + "\n");
  json outputs = json::object();
  for (const auto& rel : list_outputs(result.dir)) outputs[rel] = sha256_file(result.dir / rel);
  const json prov{{"stage", stage},
                  {"tool_version", kToolVersion},
                  {"config_hash", chash},
                  {"config", stage_config(stage, config)},
                  {"inputs", inputs},
                  {"outputs", outputs}};
  io::write_text(prov_path, prov.dump(2) + "\n");
  return result;
}

std::vector<StageResult> run_all(const ExperimentConfig& config, const RunOptions& options) {
  std::vector<StageResult> results;
  for (const auto& stage : stage_names()) {
    if (stage == "pretrain" && config.supervise.init != "pretrained") continue;
    results.push_back(run_stage(stage, config, options));
  }
  return results;
}

std::string AblationTable::to_csv() const {
  std::string csv = "value";
  for (auto s : seeds) csv += ",miou_seed" + std::to_string(s);
  csv += ",mean\n";
  char buf[64];
  for (const auto& row : rows) {
    csv += row.value;
    for (double m : row.miou) {
      std::snprintf(buf, sizeof(buf), ",%.6f", m);
      csv += buf;
    }
    std::snprintf(buf, sizeof(buf), ",%.6f\n", row.mean);
    csv += buf;
  }
  return csv;
}

namespace {

// Runs the chain up to eval in `run_dir`, sharing stage outputs through a
// content-addressed store keyed by (stage config, inputs).
double run_shared_chain(const ExperimentConfig& config, const fs::path& run_dir, const fs::path& store,
                        const RunOptions& options) {
  RunOptions o = options;
  o.workdir = run_dir;
  fs::create_directories(run_dir);
  for (const auto& stage : stage_names()) {
    if (stage == "pretrain" && config.supervise.init != "pretrained") continue;
    const json inputs = expected_inputs(stage, config, run_dir);
    const std::string key = sha256_hex(config_hash(stage, config) + inputs.dump()).substr(0, 24);
    const fs::path target = fs::absolute(store / (stage + "-" + key));
    const fs::path link = run_dir / stage;
    fs::create_directories(target);
    if (fs::is_symlink(link) || fs::exists(link)) fs::remove_all(link);
    fs::create_directory_symlink(target, link);
    run_stage(stage, config, o);
  }
  return read_json(run_dir / "eval" / "report.json").at("miou").get<double>();
}

std::string sanitize(const std::string& v) {
  std::string s = v;
  for (auto& ch : s) {
    if (!std::isalnum(static_cast<unsigned char>(ch)) && ch != '.' && ch != '-') ch = '_';
  }
  return s;
}

}  // namespace

AblationTable run_ablation(const ExperimentConfig& config, const std::string& axis,
                           const std::vector<std::string>& values, const std::vector<std::uint64_t>& seeds,
                           const RunOptions& options) {
  if (values.empty() || seeds.empty()) throw InvalidArgument("ablation needs at least one value and one seed");
  std::vector<ExperimentConfig> configs;
  for (const auto& v : values) {
    ExperimentConfig c = config;
    try {
      if (axis == "strategy") {
        sampling::parse_strategy(v, c.sampling);
      } else if (axis == "iou_band") {
        const auto colon = v.find(':');
        if (colon == std::string::npos) throw InvalidArgument("iou_band values look like 0.3:0.7");
        c.pairing.iou_low = std::stod(v.substr(0, colon));
        c.pairing.iou_high = std::stod(v.substr(colon + 1));
      } else if (axis == "fraction") {
        c.supervise.fraction = std::stod(v);
        if (!config.supervise.test_split_fraction) {
          double hi = 0.0;
          for (const auto& w : values) hi = std::max(hi, std::stod(w));
          c.supervise.test_split_fraction = hi;
        }
      } else {
        throw InvalidArgument("unknown ablation axis '" + axis + "' (expected strategy, iou_band or fraction)");
      }
    } catch (const std::logic_error&) {
      throw ConfigError("bad value '" + v + "' for ablation axis '" + axis + "'");
    }
    c.validate();
    configs.push_back(std::move(c));
  }
  AblationTable table;
  table.axis = axis;
  table.seeds = seeds;
  const fs::path base = options.workdir / "ablate";
  for (std::size_t i = 0; i < values.size(); ++i) {
    AblationRow row;
    row.value = values[i];
    for (auto seed : seeds) {
      log_line(options, "ablate " + axis + "=" + values[i] + " seed " + std::to_string(seed));
      const auto run_dir = base / axis / sanitize(values[i]) / ("seed" + std::to_string(seed));
      row.miou.push_back(run_shared_chain(with_seed(configs[i], seed), run_dir, base / "store", options));
    }
    for (double m : row.miou) row.mean += m;
    row.mean /= static_cast<double>(row.miou.size());
    table.rows.push_back(std::move(row));
  }
  io::write_text(base / (axis + ".csv"), table.to_csv());
  return table;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  if (dynamic_cast<const DependencyError*>(&e)) return 3;
  if (dynamic_cast<const NumericalError*>(&e)) return 4;
  return 1;
}

}  // namespace regconsist::pipeline
