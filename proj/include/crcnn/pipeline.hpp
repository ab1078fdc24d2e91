#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "crcnn/backbone.hpp"
#include "crcnn/context.hpp"
#include "crcnn/dataio.hpp"
#include "crcnn/error.hpp"
#include "crcnn/eval.hpp"
#include "crcnn/geometry.hpp"
#include "crcnn/head.hpp"
#include "crcnn/synthetic.hpp"
#include "crcnn/tensor.hpp"

namespace crcnn {

enum class FeaturePath { kRoiPool, kCropResize };

inline std::string feature_path_name(FeaturePath p) {
  return p == FeaturePath::kRoiPool ? "roipool" : "cropresize";
}

inline FeaturePath parse_feature_path(const std::string& s) {
  if (s == "roipool") return FeaturePath::kRoiPool;
  if (s == "cropresize") return FeaturePath::kCropResize;
  throw ValidationError("feature path must be 'roipool' or 'cropresize', got '" + s + "'");
}

struct PipelineConfig {
  SamplingSpec sampling{32, 2};
  std::size_t crop_train = 224;
  std::size_t crop_test = 256;
  double expand_scale = 1.5;
  // Expansion for the RoI path; the RoI baseline pools the raw box.
  double roi_expand_scale = 1.0;
  FeaturePath feature_path = FeaturePath::kCropResize;
  bool use_scene = true;
  bool use_lfb = true;
  std::int64_t window_seconds = 61;
  double lfb_dropout = 0.0;
  std::size_t roi_out = 7;
  std::size_t roi_sampling_ratio = 2;
  // Whole-frame resolution for the scene clip; 0 keeps the native frame size.
  std::size_t scene_size = 0;
  BackboneConfig backbone;
  TrainHyper head;
  LabelMode label_mode = LabelMode::kMultiLabel;
  double train_fraction = 0.7;
  std::uint64_t seed = 0;

  void validate() const {
    sampling.validate();
    CRCNN_ENFORCE(crop_train % 16 == 0 && crop_test % 16 == 0 && crop_train > 0 && crop_test > 0,
                  "crop sizes must be positive multiples of 16");
    CRCNN_ENFORCE(sampling.num_frames % 2 == 0, "T must be even for the backbone");
    CRCNN_ENFORCE(expand_scale >= 1.0 && roi_expand_scale >= 1.0, "expansion scales must be >= 1");
    CRCNN_ENFORCE(window_seconds >= 1 && window_seconds % 2 == 1, "window_seconds must be odd");
    CRCNN_ENFORCE(lfb_dropout >= 0.0 && lfb_dropout < 1.0, "lfb dropout must be in [0,1)");
    CRCNN_ENFORCE(roi_out >= 1 && roi_sampling_ratio >= 1, "roi grid must be >= 1");
    CRCNN_ENFORCE(scene_size % 16 == 0, "scene_size must be a multiple of 16");
    CRCNN_ENFORCE(train_fraction > 0.0 && train_fraction < 1.0, "train_fraction must be in (0,1)");
    backbone.validate();
  }
};

inline nlohmann::json to_json(const PipelineConfig& c) {
  std::vector<std::vector<std::size_t>> kernels;
  for (const Triple& k : c.backbone.stage_kernels) kernels.push_back({k[0], k[1], k[2]});
  return {
      {"num_frames", c.sampling.num_frames},
      {"stride", c.sampling.stride},
      {"crop_train", c.crop_train},
      {"crop_test", c.crop_test},
      {"expand_scale", c.expand_scale},
      {"roi_expand_scale", c.roi_expand_scale},
      {"feature_path", feature_path_name(c.feature_path)},
      {"use_scene", c.use_scene},
      {"use_lfb", c.use_lfb},
      {"window_seconds", c.window_seconds},
      {"lfb_dropout", c.lfb_dropout},
      {"roi_out", c.roi_out},
      {"roi_sampling_ratio", c.roi_sampling_ratio},
      {"scene_size", c.scene_size},
      {"backbone",
       {{"stage_channels", c.backbone.stage_channels},
        {"spatial_strides", c.backbone.spatial_strides},
        {"temporal_strides", c.backbone.temporal_strides},
        {"stage_kernels", kernels},
        {"final_dilation", c.backbone.final_dilation},
        {"nonlocal_stage", c.backbone.nonlocal_stage},
        {"seed", c.backbone.seed}}},
      {"head",
       {{"lr", c.head.lr},
        {"iters", c.head.iters},
        {"weight_decay", c.head.weight_decay},
        {"dropout", c.head.dropout},
        {"batch_size", c.head.batch_size},
        {"momentum", c.head.momentum},
        {"warmup_iters", c.head.warmup_iters},
        {"decay_at", c.head.decay_at},
        {"decay_factor", c.head.decay_factor}}},
      {"label_mode", c.label_mode == LabelMode::kMultiLabel ? "multilabel" : "singlelabel"},
      {"train_fraction", c.train_fraction},
      {"seed", c.seed}};
}

// Fields absent from the document keep their defaults.
inline PipelineConfig pipeline_config_from_json(const nlohmann::json& j,
                                                PipelineConfig c = PipelineConfig{}) {
  auto opt = [](const nlohmann::json& o, const char* key, auto& field) {
    if (o.contains(key)) field = o.at(key).get<std::decay_t<decltype(field)>>();
  };
  try {
    opt(j, "num_frames", c.sampling.num_frames);
    opt(j, "stride", c.sampling.stride);
    opt(j, "crop_train", c.crop_train);
    opt(j, "crop_test", c.crop_test);
    opt(j, "expand_scale", c.expand_scale);
    opt(j, "roi_expand_scale", c.roi_expand_scale);
    if (j.contains("feature_path")) c.feature_path = parse_feature_path(j.at("feature_path"));
    opt(j, "use_scene", c.use_scene);
    opt(j, "use_lfb", c.use_lfb);
    opt(j, "window_seconds", c.window_seconds);
    opt(j, "lfb_dropout", c.lfb_dropout);
    opt(j, "roi_out", c.roi_out);
    opt(j, "roi_sampling_ratio", c.roi_sampling_ratio);
    opt(j, "scene_size", c.scene_size);
    opt(j, "train_fraction", c.train_fraction);
    opt(j, "seed", c.seed);
    if (j.contains("label_mode")) {
      const std::string m = j.at("label_mode");
      CRCNN_ENFORCE(m == "multilabel" || m == "singlelabel", "bad label_mode '", m, "'");
      c.label_mode = m == "multilabel" ? LabelMode::kMultiLabel : LabelMode::kSingleLabel;
    }
    if (j.contains("backbone")) {
      const auto& b = j.at("backbone");
      opt(b, "stage_channels", c.backbone.stage_channels);
      opt(b, "spatial_strides", c.backbone.spatial_strides);
      opt(b, "temporal_strides", c.backbone.temporal_strides);
      if (b.contains("stage_kernels")) {
        c.backbone.stage_kernels.clear();
        for (const auto& k : b.at("stage_kernels")) {
          const auto v = k.get<std::vector<std::size_t>>();
          CRCNN_ENFORCE(v.size() == 3, "stage_kernels entries need 3 extents");
          c.backbone.stage_kernels.push_back({v[0], v[1], v[2]});
        }
      }
      opt(b, "final_dilation", c.backbone.final_dilation);
      opt(b, "nonlocal_stage", c.backbone.nonlocal_stage);
      opt(b, "seed", c.backbone.seed);
    }
    if (j.contains("head")) {
      const auto& h = j.at("head");
      opt(h, "lr", c.head.lr);
      opt(h, "iters", c.head.iters);
      opt(h, "weight_decay", c.head.weight_decay);
      opt(h, "dropout", c.head.dropout);
      opt(h, "batch_size", c.head.batch_size);
      opt(h, "momentum", c.head.momentum);
      opt(h, "warmup_iters", c.head.warmup_iters);
      opt(h, "decay_at", c.head.decay_at);
      opt(h, "decay_factor", c.head.decay_factor);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

inline nlohmann::json read_json_file(const fs::path& path) {
  const std::string text = detail::read_bytes(path);
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

// Deterministic ~70/30 split by hashed video id.
inline bool is_train_video(const std::string& video_id, double train_fraction = 0.7) {
  const std::uint64_t h = mix64(fnv1a(video_id));
  return static_cast<double>(h % 10000) < train_fraction * 10000.0;
}

// ---------------------------------------------------------------------------
// Dataset on disk

struct Dataset {
  fs::path root;
  nlohmann::json manifest;
  std::size_t fps = 1;
  std::vector<GroundTruth> annotations;
  std::vector<Proposal> proposals;
  std::map<std::string, std::string> video_files;

  Tensor load_frames(const std::string& video_id) const {
    const auto it = video_files.find(video_id);
    CRCNN_ENFORCE(it != video_files.end(), "video '", video_id, "' not in manifest");
    Tensor frames = find_tensor(tensor_container_read(root / it->second), "frames");
    CRCNN_ENFORCE(frames.rank() == 4 && frames.dim(3) == 3, "video '", video_id,
                  "' frames must be [N,H,W,3]");
    return frames;
  }
};

inline Dataset load_dataset(const fs::path& root) {
  if (!fs::exists(root / "manifest.json")) {
    throw IoError("no manifest.json under " + root.string());
  }
  Dataset ds;
  ds.root = root;
  ds.manifest = read_json_file(root / "manifest.json");
  try {
    ds.fps = ds.manifest.at("spec").at("fps").get<std::size_t>();
    for (const auto& v : ds.manifest.at("videos")) {
      ds.video_files[v.at("video_id").get<std::string>()] = v.at("file").get<std::string>();
    }
    ds.annotations = parse_annotations(root / ds.manifest.at("annotations").get<std::string>());
    ds.proposals = parse_proposals(root / ds.manifest.at("proposals").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("manifest: " + std::string(e.what()));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Feature extraction

struct ActorRecord {
  std::string video_id;
  std::int64_t timestamp = 0;
  std::int64_t person_id = 0;  // proposal index within the key frame
  Box box;
  double score = 0.0;
  bool train = false;
  Tensor actor;
  std::optional<Tensor> scene;
};

struct FeatureSet {
  FeaturePath path = FeaturePath::kCropResize;
  std::vector<ActorRecord> records;
  std::size_t skipped_keyframes = 0;
};

namespace detail {

using KeyFrame = std::pair<std::string, std::int64_t>;

inline std::map<KeyFrame, std::vector<Proposal>> proposals_by_keyframe(
    const std::vector<Proposal>& proposals) {
  std::map<KeyFrame, std::vector<Proposal>> out;
  for (const Proposal& p : proposals) out[{p.video_id, p.timestamp}].push_back(p);
  return out;
}

}  // namespace detail

// Actor features along the configured path, plus the scene feature of each
// key-frame clip when requested. Training-split actors get a random box
// expansion in [1, s] at crop_train; the rest use s at crop_test.
inline FeatureSet extract_features(const Dataset& ds, const PipelineConfig& cfg,
                                   const BackboneWeights& weights) {
  cfg.validate();
  FeatureSet fs_out;
  fs_out.path = cfg.feature_path;
  const auto by_kf = detail::proposals_by_keyframe(ds.proposals);
  std::set<detail::KeyFrame> annotated;
  for (const GroundTruth& g : ds.annotations) annotated.insert({g.video_id, g.timestamp});
  for (const auto& kf : annotated) {
    if (!by_kf.count(kf)) ++fs_out.skipped_keyframes;
  }

  std::string loaded_id;
  Tensor frames;
  for (const auto& [kf, props] : by_kf) {
    const auto& [video_id, t] = kf;
    if (video_id != loaded_id) {
      frames = ds.load_frames(video_id);
      loaded_id = video_id;
    }
    const bool train = is_train_video(video_id, cfg.train_fraction);
    const std::size_t key = key_frame_index(t, ds.fps, frames.dim(0));
    Tensor clip = gather_clip(frames, sample_clip_indices(key, cfg.sampling, frames.dim(0)));
    if (cfg.scene_size > 0) clip = crop_resize_clip(clip, Box{}, cfg.scene_size, cfg.scene_size);

    std::optional<Tensor> featmap;
    std::optional<Tensor> scene;
    if (cfg.feature_path == FeaturePath::kRoiPool || cfg.use_scene) {
      featmap = forward(weights, clip);
      if (cfg.use_scene) scene = global_avg_pool(*featmap);
    }
    for (std::size_t i = 0; i < props.size(); ++i) {
      ActorRecord r;
      r.video_id = video_id;
      r.timestamp = t;
      r.person_id = static_cast<std::int64_t>(i);
      r.box = props[i].box;
      r.score = props[i].score;
      r.train = train;
      r.scene = scene;
      Rng aug(derive_seed(derive_seed(cfg.seed, fnv1a(video_id)),
                          static_cast<std::uint64_t>(t) * 1000 + i));
      if (cfg.feature_path == FeaturePath::kCropResize) {
        const double s = train ? aug.uniform(1.0, cfg.expand_scale) : cfg.expand_scale;
        const std::size_t crop = train ? cfg.crop_train : cfg.crop_test;
        r.actor = actor_feature(weights, clip, expand_box(r.box, s), crop, crop);
      } else {
        const double s = train ? aug.uniform(1.0, cfg.roi_expand_scale) : cfg.roi_expand_scale;
        r.actor = roi_pool_3d(*featmap, expand_box(r.box, s), cfg.roi_out, cfg.roi_out,
                              cfg.roi_sampling_ratio);
      }
      fs_out.records.push_back(std::move(r));
    }
  }
  return fs_out;
}

inline FeatureBank build_bank(const FeatureSet& fset) {
  FeatureBank bank;
  for (const ActorRecord& r : fset.records) bank.add(r.video_id, r.timestamp, r.person_id, r.actor);
  return bank;
}

inline std::string features_jsonl(const FeatureSet& fset) {
  std::string out;
  for (const ActorRecord& r : fset.records) {
    nlohmann::json j;
    j["video_id"] = r.video_id;
    j["timestamp"] = r.timestamp;
    j["person_id"] = r.person_id;
    j["box"] = {r.box.x1, r.box.y1, r.box.x2, r.box.y2};
    j["score"] = r.score;
    j["split"] = r.train ? "train" : "val";
    j["path"] = feature_path_name(fset.path);
    j["actor"] = std::vector<double>(r.actor.values().begin(), r.actor.values().end());
    if (r.scene) j["scene"] = std::vector<double>(r.scene->values().begin(), r.scene->values().end());
    out += j.dump();
    out += '\n';
  }
  return out;
}

inline FeatureSet read_features(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  FeatureSet fset;
  std::string line;
  std::size_t n = 0;
  std::optional<std::size_t> actor_dim, scene_dim;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      ActorRecord r;
      r.video_id = j.at("video_id").get<std::string>();
      r.timestamp = j.at("timestamp").get<std::int64_t>();
      r.person_id = j.at("person_id").get<std::int64_t>();
      const auto b = j.at("box").get<std::vector<double>>();
      CRCNN_ENFORCE(b.size() == 4, "box needs 4 coordinates");
      r.box = {b[0], b[1], b[2], b[3]};
      check_box(r.box);
      r.score = j.at("score").get<double>();
      r.train = j.at("split").get<std::string>() == "train";
      fset.path = parse_feature_path(j.at("path").get<std::string>());
      r.actor = Tensor::vector(j.at("actor").get<std::vector<double>>());
      if (j.contains("scene")) r.scene = Tensor::vector(j.at("scene").get<std::vector<double>>());
      if (!actor_dim) actor_dim = r.actor.size();
      CRCNN_ENFORCE(r.actor.size() == *actor_dim, "actor dimension changes between records");
      const std::size_t sd = r.scene ? r.scene->size() : 0;
      if (!scene_dim) scene_dim = sd;
      CRCNN_ENFORCE(sd == *scene_dim, "scene feature presence/dimension changes between records");
      fset.records.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    } catch (const ValidationError& e) {
      throw ValidationError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return fset;
}

// ---------------------------------------------------------------------------
// Fusion, training, inference

// Labels of the best-overlapping ground truth at IoU >= 0.5, else none.
inline std::vector<int> proposal_labels(const ActorRecord& r,
                                        const std::map<detail::KeyFrame, std::vector<GroundTruth>>& gts) {
  const auto it = gts.find({r.video_id, r.timestamp});
  if (it == gts.end()) return {};
  double best = 0.0;
  const GroundTruth* match = nullptr;
  for (const GroundTruth& g : it->second) {
    const double o = iou(r.box, g.box);
    if (o > best) {
      best = o;
      match = &g;
    }
  }
  if (!match || best < kIouThreshold) return {};
  return {match->class_ids.begin(), match->class_ids.end()};
}

struct HeadModel {
  ClassifierParams params;
  FeatureNormalizer normalizer;
  FusionLayout layout;
  std::optional<LfbParams> lfb;
};

inline NamedTensors head_to_tensors(const HeadModel& m) {
  NamedTensors out;
  out.emplace_back("head.weights", m.params.weights);
  out.emplace_back("head.bias", m.params.bias);
  out.emplace_back("head.mode",
                   Tensor::vector({m.params.mode == LabelMode::kMultiLabel ? 0.0 : 1.0}));
  out.emplace_back("head.layout", Tensor::vector({static_cast<double>(m.layout.actor),
                                                  static_cast<double>(m.layout.scene),
                                                  static_cast<double>(m.layout.longterm)}));
  out.emplace_back("head.norm_mean", m.normalizer.mean);
  out.emplace_back("head.norm_inv_std", m.normalizer.inv_std);
  if (m.lfb) {
    for (auto& nt : lfb_to_tensors(*m.lfb)) out.push_back(std::move(nt));
  }
  return out;
}

inline HeadModel head_from_tensors(const NamedTensors& named) {
  HeadModel m;
  m.params.weights = find_tensor(named, "head.weights");
  m.params.bias = find_tensor(named, "head.bias");
  m.params.mode = find_tensor(named, "head.mode")[0] == 0.0 ? LabelMode::kMultiLabel
                                                             : LabelMode::kSingleLabel;
  const Tensor& l = find_tensor(named, "head.layout");
  CRCNN_ENFORCE(l.size() == 3, "bad head.layout");
  m.layout = {static_cast<std::size_t>(l[0]), static_cast<std::size_t>(l[1]),
              static_cast<std::size_t>(l[2])};
  m.normalizer = {find_tensor(named, "head.norm_mean"), find_tensor(named, "head.norm_inv_std")};
  CRCNN_ENFORCE(m.params.weights.rank() == 2 && m.params.weights.dim(1) == m.layout.total() &&
                    m.normalizer.mean.size() == m.layout.total(),
                "head parameters disagree with the stored fusion layout");
  if (m.layout.longterm > 0) m.lfb = lfb_from_tensors(named);
  return m;
}

inline FusionLayout layout_for(const FeatureSet& fset, const PipelineConfig& cfg) {
  CRCNN_ENFORCE(!fset.records.empty(), "no feature records");
  const ActorRecord& r = fset.records.front();
  FusionLayout l;
  l.actor = r.actor.size();
  if (cfg.use_scene) {
    CRCNN_ENFORCE(r.scene.has_value(), "scene features requested but not extracted");
    l.scene = r.scene->size();
  }
  if (cfg.use_lfb) l.longterm = kLongTermDim;
  return l;
}

// Fused vectors for every record, in record order. LFB is evaluated per key
// frame over all of its actors; training records run LFB in training mode.
inline std::vector<Tensor> fuse_records(const FeatureSet& fset, const FusionLayout& layout,
                                        const FeatureBank* bank, const LfbParams* lfb,
                                        std::uint64_t seed) {
  std::vector<std::optional<Tensor>> longterm(fset.records.size());
  if (layout.longterm > 0) {
    CRCNN_ENFORCE(bank && lfb, "long-term features need a bank and LFB parameters");
    if (bank->dim()) {
      CRCNN_ENFORCE(*bank->dim() == layout.actor, "bank feature dimension ", *bank->dim(),
                    " does not match actor dimension ", layout.actor);
    }
    std::map<detail::KeyFrame, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < fset.records.size(); ++i) {
      groups[{fset.records[i].video_id, fset.records[i].timestamp}].push_back(i);
    }
    for (const auto& [kf, idx] : groups) {
      std::vector<Tensor> actors;
      for (std::size_t i : idx) actors.push_back(fset.records[i].actor);
      const bool train = fset.records[idx.front()].train;
      Rng rng(derive_seed(derive_seed(seed, fnv1a(kf.first)), static_cast<std::uint64_t>(kf.second)));
      const auto lt = long_term_feature(*lfb, actors, *bank, kf.first, kf.second,
                                        train && lfb->dropout_rate > 0 ? &rng : nullptr);
      for (std::size_t k = 0; k < idx.size(); ++k) longterm[idx[k]] = lt[k];
    }
  }
  std::vector<Tensor> out;
  out.reserve(fset.records.size());
  for (std::size_t i = 0; i < fset.records.size(); ++i) {
    const ActorRecord& r = fset.records[i];
    out.push_back(fuse(r.actor, layout.scene ? r.scene : std::nullopt, longterm[i], layout));
  }
  return out;
}

inline std::map<detail::KeyFrame, std::vector<GroundTruth>> index_ground_truth(
    const std::vector<GroundTruth>& gts) {
  std::map<detail::KeyFrame, std::vector<GroundTruth>> out;
  for (const GroundTruth& g : gts) out[{g.video_id, g.timestamp}].push_back(g);
  return out;
}

inline std::size_t infer_num_classes(const std::vector<GroundTruth>& gts) {
  int mx = -1;
  for (const GroundTruth& g : gts) {
    for (int c : g.class_ids) mx = std::max(mx, c);
  }
  CRCNN_ENFORCE(mx >= 0, "no labeled ground truth");
  return static_cast<std::size_t>(mx + 1);
}

// Trains the classifier on the training split of a feature set.
inline HeadModel train_head(const FeatureSet& fset, const FeatureBank* bank,
                            const std::vector<GroundTruth>& gts, const PipelineConfig& cfg,
                            std::size_t num_classes) {
  HeadModel m;
  m.layout = layout_for(fset, cfg);
  if (m.layout.longterm > 0) {
    m.lfb = init_lfb(m.layout.actor, derive_seed(cfg.seed, 0x1f), cfg.lfb_dropout,
                     cfg.window_seconds);
  }
  const auto fused = fuse_records(fset, m.layout, bank, m.lfb ? &*m.lfb : nullptr, cfg.seed);
  const auto gt_index = index_ground_truth(gts);
  std::vector<Tensor> train_x;
  std::vector<std::vector<int>> train_y;
  for (std::size_t i = 0; i < fset.records.size(); ++i) {
    if (!fset.records[i].train) continue;
    auto labels = proposal_labels(fset.records[i], gt_index);
    if (cfg.label_mode == LabelMode::kSingleLabel && labels.size() != 1) continue;
    train_x.push_back(fused[i]);
    train_y.push_back(std::move(labels));
  }
  CRCNN_ENFORCE(!train_x.empty(), "training split is empty");
  m.normalizer = FeatureNormalizer::fit(train_x);
  std::vector<TrainSample> samples;
  for (std::size_t i = 0; i < train_x.size(); ++i) {
    samples.push_back({m.normalizer.apply(train_x[i]), train_y[i]});
  }
  TrainHyper hyper = cfg.head;
  hyper.seed = derive_seed(cfg.seed, 0x4ead);
  m.params = train_classifier(samples, num_classes, cfg.label_mode, hyper);
  return m;
}

enum class Split { kTrain, kVal, kAll };

inline bool in_split(const ActorRecord& r, Split s) {
  return s == Split::kAll || (s == Split::kTrain) == r.train;
}

// Raw scores (one per class) for each record of the split, in record order.
inline std::vector<std::pair<const ActorRecord*, Tensor>> score_records(
    const FeatureSet& fset, const FeatureBank* bank, const HeadModel& model, Split split) {
  const FusionLayout want = layout_for(
      fset, [&] {
        PipelineConfig c;
        c.use_scene = model.layout.scene > 0;
        c.use_lfb = model.layout.longterm > 0;
        return c;
      }());
  CRCNN_ENFORCE(want == model.layout, "feature dimensions (", want.actor, "+", want.scene, "+",
                want.longterm, ") do not match the trained head (", model.layout.actor, "+",
                model.layout.scene, "+", model.layout.longterm, ")");
  const auto fused = fuse_records(fset, model.layout, bank, model.lfb ? &*model.lfb : nullptr, 0);
  std::vector<std::pair<const ActorRecord*, Tensor>> out;
  for (std::size_t i = 0; i < fset.records.size(); ++i) {
    if (!in_split(fset.records[i], split)) continue;
    out.emplace_back(&fset.records[i], classify(model.params, model.normalizer.apply(fused[i])));
  }
  return out;
}

// One detection per (proposal, class).
inline std::vector<Detection> infer_detections(const FeatureSet& fset, const FeatureBank* bank,
                                               const HeadModel& model, Split split) {
  std::vector<Detection> dets;
  for (const auto& [rec, scores] : score_records(fset, bank, model, split)) {
    for (std::size_t c = 0; c < scores.size(); ++c) {
      dets.push_back({rec->video_id, rec->timestamp, rec->box, static_cast<int>(c), scores[c]});
    }
  }
  return dets;
}

// ---------------------------------------------------------------------------
// Evaluation reports

struct EvalOptions {
  bool size_bins = false;
  bool count_bins = false;
};

struct EvalReport {
  MapResult overall;
  std::optional<BinnedMap> by_size;
  std::optional<BinnedMap> by_count;
  std::size_t num_detections = 0;
  std::size_t num_ground_truth = 0;
};

// Ground truth is restricted to the videos that appear in the detections, so
// a validation-split run is not charged for training videos.
inline EvalReport evaluate(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts,
                           const EvalOptions& opt) {
  std::set<std::string> videos;
  std::set<int> det_classes;
  for (const Detection& d : dets) {
    videos.insert(d.video_id);
    det_classes.insert(d.class_id);
  }
  std::vector<GroundTruth> kept;
  std::set<int> gt_classes;
  for (const GroundTruth& g : gts) {
    if (!videos.count(g.video_id)) continue;
    kept.push_back(g);
    gt_classes.insert(g.class_ids.begin(), g.class_ids.end());
  }
  bool overlap = false;
  for (int c : det_classes) overlap = overlap || gt_classes.count(c);
  CRCNN_ENFORCE(overlap, "detections and ground truth share no class");
  EvalReport r;
  r.num_detections = dets.size();
  r.num_ground_truth = kept.size();
  r.overall = frame_map(dets, kept);
  if (opt.size_bins) r.by_size = binned_map(dets, kept, Binning::kSize);
  if (opt.count_bins) r.by_count = binned_map(dets, kept, Binning::kCount);
  return r;
}

inline nlohmann::json to_json(const MapResult& m) {
  nlohmann::json per = nlohmann::json::object();
  for (const auto& [c, ap] : m.per_class) {
    per[std::to_string(c)] = {{"ap", ap}, {"num_gt", m.num_gt.at(c)}};
  }
  return {{"map", m.map}, {"per_class", per}};
}

inline nlohmann::json to_json(const BinnedMap& b) {
  nlohmann::json bins = nlohmann::json::array();
  for (const BinResult& r : b.bins) {
    nlohmann::json j = {{"label", r.label}, {"range", r.range}, {"num_gt", r.num_gt},
                        {"num_det", r.num_det}};
    j["map"] = r.result ? nlohmann::json(r.result->map) : nlohmann::json(nullptr);
    bins.push_back(j);
  }
  return {{"bins", bins}, {"warnings", b.warnings}};
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j = {{"overall", to_json(r.overall)},
                      {"num_detections", r.num_detections},
                      {"num_ground_truth", r.num_ground_truth}};
  if (r.by_size) j["size_bins"] = to_json(*r.by_size);
  if (r.by_count) j["count_bins"] = to_json(*r.by_count);
  return j;
}

namespace detail {

inline std::string pct(double v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%6.2f", 100.0 * v);
  return buf;
}

inline std::string render_bins(const std::string& title, const BinnedMap& b) {
  std::ostringstream os;
  os << title << "\n";
  for (const BinResult& r : b.bins) {
    char line[128];
    std::snprintf(line, sizeof line, "  %-4s %-18s gt=%-5zu mAP=%s\n", r.label.c_str(),
                  r.range.c_str(), r.num_gt, r.result ? pct(r.result->map).c_str() : "   n/a");
    os << line;
  }
  if (b.warnings) os << "  warning: " << b.warnings << " frame(s) exceed the last count bin\n";
  return os.str();
}

}  // namespace detail

inline std::string render_text(const EvalReport& r) {
  std::ostringstream os;
  os << "frame mAP@0.5: " << detail::pct(r.overall.map) << "  (" << r.overall.per_class.size()
     << " classes, " << r.num_ground_truth << " gt boxes, " << r.num_detections
     << " detections)\n";
  os << "per-class AP\n";
  for (const auto& [c, ap] : r.overall.per_class) {
    os << "  class " << c << ": " << detail::pct(ap) << "  (gt=" << r.overall.num_gt.at(c) << ")\n";
  }
  if (r.by_size) os << detail::render_bins("size bins (share of image area)", *r.by_size);
  if (r.by_count) os << detail::render_bins("actor-count bins", *r.by_count);
  return os.str();
}

// ---------------------------------------------------------------------------
// Comparison harness

struct PathResult {
  FeaturePath path;
  EvalReport report;
};

struct ScaleResult {
  double scale;
  double map;
};

struct ContextResult {
  std::string variant;
  double map;
};

struct CompareReport {
  std::vector<PathResult> paths;
  std::vector<ScaleResult> scales;
  std::vector<ContextResult> context;

  const PathResult& path(FeaturePath p) const {
    for (const auto& r : paths) {
      if (r.path == p) return r;
    }
    throw ValidationError("path not in report: " + feature_path_name(p));
  }
};

struct CompareOptions {
  bool paths = true;
  std::vector<double> scales;
  bool context = false;
};

// Trains a head on the training split and evaluates the validation split.
inline EvalReport train_and_evaluate(const Dataset& ds, const FeatureSet& fset,
                                     const PipelineConfig& cfg, std::size_t num_classes,
                                     const EvalOptions& eval_opt) {
  std::optional<FeatureBank> bank;
  if (cfg.use_lfb) bank = build_bank(fset);
  const HeadModel head = train_head(fset, bank ? &*bank : nullptr, ds.annotations, cfg, num_classes);
  const auto dets = infer_detections(fset, bank ? &*bank : nullptr, head, Split::kVal);
  return evaluate(dets, ds.annotations, eval_opt);
}

// Path comparison runs actor-only heads with identical seeds and
// hyperparameters, so the feature extractor is the only varying factor.
inline CompareReport run_compare(const Dataset& ds, const PipelineConfig& cfg,
                                 const CompareOptions& opt) {
  cfg.validate();
  const BackboneWeights weights = init_backbone(cfg.backbone);
  const std::size_t num_classes = infer_num_classes(ds.annotations);
  CompareReport report;
  PipelineConfig actor_only = cfg;
  actor_only.use_scene = false;
  actor_only.use_lfb = false;
  if (opt.paths) {
    for (FeaturePath p : {FeaturePath::kRoiPool, FeaturePath::kCropResize}) {
      PipelineConfig c = actor_only;
      c.feature_path = p;
      const FeatureSet fset = extract_features(ds, c, weights);
      report.paths.push_back({p, train_and_evaluate(ds, fset, c, num_classes, {true, true})});
    }
  }
  for (double s : opt.scales) {
    PipelineConfig c = actor_only;
    c.feature_path = FeaturePath::kCropResize;
    c.expand_scale = s;
    const FeatureSet fset = extract_features(ds, c, weights);
    report.scales.push_back({s, train_and_evaluate(ds, fset, c, num_classes, {}).overall.map});
  }
  if (opt.context) {
    PipelineConfig c = cfg;
    c.feature_path = FeaturePath::kCropResize;
    c.use_scene = true;
    const FeatureSet fset = extract_features(ds, c, weights);
    const std::array<std::tuple<const char*, bool, bool>, 3> variants = {
        std::tuple{"actor", false, false}, std::tuple{"actor+scene", true, false},
        std::tuple{"actor+scene+lfb", true, true}};
    for (const auto& [name, scene, lfb] : variants) {
      PipelineConfig v = c;
      v.use_scene = scene;
      v.use_lfb = lfb;
      report.context.push_back({name, train_and_evaluate(ds, fset, v, num_classes, {}).overall.map});
    }
  }
  return report;
}

inline nlohmann::json to_json(const CompareReport& r) {
  nlohmann::json j = nlohmann::json::object();
  if (!r.paths.empty()) {
    nlohmann::json paths = nlohmann::json::object();
    for (const auto& p : r.paths) paths[feature_path_name(p.path)] = to_json(p.report);
    j["paths"] = paths;
    if (r.paths.size() == 2) {
      const auto& roi = r.path(FeaturePath::kRoiPool).report;
      const auto& crop = r.path(FeaturePath::kCropResize).report;
      nlohmann::json delta = {{"overall", crop.overall.map - roi.overall.map}};
      nlohmann::json bins = nlohmann::json::array();
      if (roi.by_size && crop.by_size) {
        for (std::size_t b = 0; b < roi.by_size->bins.size(); ++b) {
          const auto& rb = roi.by_size->bins[b];
          const auto& cb = crop.by_size->bins[b];
          nlohmann::json e = {{"label", rb.label}, {"range", rb.range}};
          e["delta"] = rb.result && cb.result ? nlohmann::json(cb.result->map - rb.result->map)
                                              : nlohmann::json(nullptr);
          bins.push_back(e);
        }
      }
      delta["size_bins"] = bins;
      j["delta"] = delta;
    }
  }
  if (!r.scales.empty()) {
    nlohmann::json s = nlohmann::json::array();
    for (const auto& e : r.scales) s.push_back({{"scale", e.scale}, {"map", e.map}});
    j["scales"] = s;
  }
  if (!r.context.empty()) {
    nlohmann::json s = nlohmann::json::array();
    for (const auto& e : r.context) s.push_back({{"variant", e.variant}, {"map", e.map}});
    j["context"] = s;
  }
  return j;
}

inline std::string render_text(const CompareReport& r) {
  std::ostringstream os;
  if (r.paths.size() == 2) {
    const auto& roi = r.path(FeaturePath::kRoiPool).report;
    const auto& crop = r.path(FeaturePath::kCropResize).report;
    os << "method        overall";
    for (SizeBin b : kAllSizeBins) {
      char h[16];
      std::snprintf(h, sizeof h, " %7s", std::string(size_bin_name(b)).c_str());
      os << h;
    }
    os << "\n";
    auto row = [&os](const char* name, const EvalReport& e) {
      char h[32];
      std::snprintf(h, sizeof h, "%-12s %s", name, detail::pct(e.overall.map).c_str());
      os << h;
      for (const auto& b : e.by_size->bins) {
        os << "  " << (b.result ? detail::pct(b.result->map) : std::string("   n/a"));
      }
      os << "\n";
    };
    row("roipool", roi);
    row("cropresize", crop);
    char h[32];
    std::snprintf(h, sizeof h, "%-12s %+6.2f", "improvement", 100.0 * (crop.overall.map - roi.overall.map));
    os << h;
    for (std::size_t b = 0; b < roi.by_size->bins.size(); ++b) {
      const auto& rb = roi.by_size->bins[b];
      const auto& cb = crop.by_size->bins[b];
      if (rb.result && cb.result) {
        char d[16];
        std::snprintf(d, sizeof d, "  %+6.2f", 100.0 * (cb.result->map - rb.result->map));
        os << d;
      } else {
        os << "     n/a";
      }
    }
    os << "\n";
  }
  if (!r.scales.empty()) {
    os << "expansion scale sweep (cropresize, actor only)\n";
    for (const auto& s : r.scales) os << "  s=" << s.scale << "  mAP=" << detail::pct(s.map) << "\n";
  }
  if (!r.context.empty()) {
    os << "context ablation (cropresize)\n";
    for (const auto& c : r.context) os << "  " << c.variant << "  mAP=" << detail::pct(c.map) << "\n";
  }
  return os.str();
}

}  // namespace crcnn
