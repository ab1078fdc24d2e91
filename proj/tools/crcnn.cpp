#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "crcnn/pipeline.hpp"

namespace fs = std::filesystem;
using namespace crcnn;

namespace {

// Flags that mirror PipelineConfig fields; set flags override --config.
struct ConfigFlags {
  std::string config_file;
  std::vector<std::function<void(PipelineConfig&)>> setters;

  template <typename T>
  void add(CLI::App* app, const std::string& name, const std::string& help,
           std::function<void(PipelineConfig&, const T&)> set) {
    auto value = std::make_shared<T>();
    CLI::Option* opt = app->add_option(name, *value, help);
    setters.push_back([opt, value, set](PipelineConfig& c) {
      if (opt->count() > 0) set(c, *value);
    });
  }

  void attach(CLI::App* app) {
    app->add_option("--config", config_file, "JSON pipeline config");
    add<std::size_t>(app, "--num-frames", "clip length T",
                     [](auto& c, auto v) { c.sampling.num_frames = v; });
    add<std::size_t>(app, "--stride", "frame stride tau", [](auto& c, auto v) { c.sampling.stride = v; });
    add<std::size_t>(app, "--crop-train", "train crop size", [](auto& c, auto v) { c.crop_train = v; });
    add<std::size_t>(app, "--crop-test", "test crop size", [](auto& c, auto v) { c.crop_test = v; });
    add<double>(app, "--expand-scale", "box expansion s", [](auto& c, auto v) { c.expand_scale = v; });
    add<std::string>(app, "--feature-path", "roipool | cropresize",
                     [](auto& c, const auto& v) { c.feature_path = parse_feature_path(v); });
    add<bool>(app, "--use-scene", "fuse scene features", [](auto& c, auto v) { c.use_scene = v; });
    add<bool>(app, "--use-lfb", "fuse long-term features", [](auto& c, auto v) { c.use_lfb = v; });
    add<std::int64_t>(app, "--window-seconds", "bank window (odd)",
                      [](auto& c, auto v) { c.window_seconds = v; });
    add<double>(app, "--lfb-dropout", "LFB dropout (training)", [](auto& c, auto v) { c.lfb_dropout = v; });
    add<std::size_t>(app, "--scene-size", "scene clip resolution, 0 = native",
                     [](auto& c, auto v) { c.scene_size = v; });
    add<std::uint64_t>(app, "--backbone-seed", "backbone init seed",
                       [](auto& c, auto v) { c.backbone.seed = v; });
    add<double>(app, "--lr", "head learning rate", [](auto& c, auto v) { c.head.lr = v; });
    add<std::size_t>(app, "--iters", "head SGD iterations", [](auto& c, auto v) { c.head.iters = v; });
    add<double>(app, "--dropout", "head input dropout", [](auto& c, auto v) { c.head.dropout = v; });
    add<std::string>(app, "--label-mode", "multilabel | singlelabel", [](auto& c, const auto& v) {
      CRCNN_ENFORCE(v == "multilabel" || v == "singlelabel", "bad --label-mode '", v, "'");
      c.label_mode = v == "multilabel" ? LabelMode::kMultiLabel : LabelMode::kSingleLabel;
    });
    add<std::uint64_t>(app, "--seed", "pipeline seed", [](auto& c, auto v) { c.seed = v; });
  }

  PipelineConfig resolve() const {
    PipelineConfig c;
    if (!config_file.empty()) c = pipeline_config_from_json(read_json_file(config_file));
    for (const auto& s : setters) s(c);
    c.validate();
    return c;
  }
};

void write_json(const fs::path& path, const nlohmann::json& j) {
  detail::write_text(path, j.dump(2) + "\n");
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "all") return Split::kAll;
  throw ValidationError("--split must be train, val or all");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"crcnn: actor-centric action detection on synthetic video"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic glyph dataset");
  std::string spec_file, synth_out;
  std::optional<std::uint64_t> synth_seed;
  synth->add_option("--spec", spec_file, "JSON synthetic spec (defaults when omitted)");
  synth->add_option("--seed", synth_seed, "override the spec seed");
  synth->add_option("--out", synth_out, "dataset directory")->required();

  // extract
  ConfigFlags extract_cfg;
  auto* extract = app.add_subcommand("extract", "extract actor/scene features and the bank");
  std::string ex_dataset, ex_out;
  extract->add_option("--dataset", ex_dataset, "dataset directory")->required();
  extract->add_option("--out", ex_out, "output directory")->required();
  extract_cfg.attach(extract);

  // bank
  auto* bank_cmd = app.add_subcommand("bank", "build a feature bank from a features file");
  std::string bk_features, bk_out;
  bank_cmd->add_option("--features", bk_features, "features JSONL")->required();
  bank_cmd->add_option("--out", bk_out, "bank JSONL")->required();

  // train
  ConfigFlags train_cfg;
  auto* train = app.add_subcommand("train", "train the action classifier on the train split");
  std::string tr_dataset, tr_features, tr_bank, tr_out;
  train->add_option("--dataset", tr_dataset, "dataset directory (annotations)")->required();
  train->add_option("--features", tr_features, "features JSONL")->required();
  train->add_option("--bank", tr_bank, "bank JSONL (needed with --use-lfb)");
  train->add_option("--out", tr_out, "head container")->required();
  train_cfg.attach(train);

  // infer
  auto* infer = app.add_subcommand("infer", "score proposals with a trained head");
  std::string in_features, in_bank, in_head, in_out, in_split = "val";
  infer->add_option("--features", in_features, "features JSONL")->required();
  infer->add_option("--bank", in_bank, "bank JSONL (needed when the head uses LFB)");
  infer->add_option("--head", in_head, "head container")->required();
  infer->add_option("--split", in_split, "train | val | all");
  infer->add_option("--out", in_out, "detections CSV")->required();

  // eval
  auto* eval = app.add_subcommand("eval", "frame-level mAP of detections");
  std::string ev_dets, ev_ann, ev_json;
  bool ev_size = false, ev_count = false;
  eval->add_option("--detections", ev_dets, "detections CSV")->required();
  eval->add_option("--annotations", ev_ann, "annotations CSV")->required();
  eval->add_flag("--size-bins", ev_size, "break down by box size");
  eval->add_flag("--count-bins", ev_count, "break down by actors per frame");
  eval->add_option("--json", ev_json, "write the machine-readable report here");

  // compare
  ConfigFlags compare_cfg;
  auto* compare = app.add_subcommand("compare", "roipool vs cropresize, scale sweep, context ablation");
  std::string cmp_dataset, cmp_json;
  std::vector<double> cmp_scales;
  bool cmp_context = false, cmp_no_paths = false;
  compare->add_option("--dataset", cmp_dataset, "dataset directory")->required();
  compare->add_option("--scales", cmp_scales, "expansion scales to sweep")->delimiter(',');
  compare->add_flag("--context", cmp_context, "run the scene/LFB ablation");
  compare->add_flag("--no-paths", cmp_no_paths, "skip the path comparison");
  compare->add_option("--json", cmp_json, "write the machine-readable report here");
  compare_cfg.attach(compare);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (*synth) {
      SyntheticSpec spec;
      if (!spec_file.empty()) spec = synthetic_spec_from_json(read_json_file(spec_file));
      if (synth_seed) spec.seed = *synth_seed;
      const auto ds = generate_synthetic(spec, synth_out);
      std::printf("wrote %zu videos, %zu annotations, %zu proposals to %s\n",
                  ds.manifest.at("videos").size(), ds.annotations.size(), ds.proposals.size(),
                  synth_out.c_str());
    } else if (*extract) {
      const PipelineConfig cfg = extract_cfg.resolve();
      const Dataset ds = load_dataset(ex_dataset);
      const BackboneWeights weights = init_backbone(cfg.backbone);
      const FeatureSet fset = extract_features(ds, cfg, weights);
      const FeatureBank bank = build_bank(fset);
      fs::create_directories(ex_out);
      detail::write_text(fs::path(ex_out) / "features.jsonl", features_jsonl(fset));
      bank_write(fs::path(ex_out) / "bank.jsonl", bank);
      tensor_container_write(fs::path(ex_out) / "backbone.crcn", backbone_to_tensors(weights));
      write_json(fs::path(ex_out) / "config.json", to_json(cfg));
      const nlohmann::json summary = {{"records", fset.records.size()},
                                      {"bank_entries", bank.size()},
                                      {"skipped_keyframes", fset.skipped_keyframes},
                                      {"feature_path", feature_path_name(cfg.feature_path)},
                                      {"backbone_fingerprint", hex64(weights.fingerprint())}};
      write_json(fs::path(ex_out) / "summary.json", summary);
      std::printf("%zu actor features, %zu bank entries, %zu key frames skipped (no proposals)\n",
                  fset.records.size(), bank.size(), fset.skipped_keyframes);
    } else if (*bank_cmd) {
      const FeatureBank bank = build_bank(read_features(bk_features));
      bank_write(bk_out, bank);
      std::printf("%zu bank entries\n", bank.size());
    } else if (*train) {
      const PipelineConfig cfg = train_cfg.resolve();
      const Dataset ds = load_dataset(tr_dataset);
      const FeatureSet fset = read_features(tr_features);
      std::optional<FeatureBank> bank;
      if (cfg.use_lfb) {
        CRCNN_ENFORCE(!tr_bank.empty(), "--use-lfb needs --bank");
        bank = bank_read(tr_bank);
      }
      const HeadModel head = train_head(fset, bank ? &*bank : nullptr, ds.annotations, cfg,
                                        infer_num_classes(ds.annotations));
      tensor_container_write(tr_out, head_to_tensors(head));
      std::printf("trained head: %zu classes, fused dim %zu\n", head.params.num_classes(),
                  head.layout.total());
    } else if (*infer) {
      const Split split = parse_split(in_split);
      const HeadModel head = head_from_tensors(tensor_container_read(in_head));
      const FeatureSet fset = read_features(in_features);
      std::optional<FeatureBank> bank;
      if (head.layout.longterm > 0) {
        CRCNN_ENFORCE(!in_bank.empty(), "head uses long-term features; pass --bank");
        bank = bank_read(in_bank);
      }
      const auto dets = infer_detections(fset, bank ? &*bank : nullptr, head, split);
      write_detections(in_out, dets);
      std::printf("%zu detections\n", dets.size());
    } else if (*eval) {
      const auto report = evaluate(parse_detections(ev_dets), parse_annotations(ev_ann),
                                   {ev_size, ev_count});
      std::fputs(render_text(report).c_str(), stdout);
      if (!ev_json.empty()) write_json(ev_json, to_json(report));
    } else if (*compare) {
      const PipelineConfig cfg = compare_cfg.resolve();
      const Dataset ds = load_dataset(cmp_dataset);
      const CompareReport report = run_compare(ds, cfg, {!cmp_no_paths, cmp_scales, cmp_context});
      std::fputs(render_text(report).c_str(), stdout);
      if (!cmp_json.empty()) write_json(cmp_json, to_json(report));
    }
  } catch (const IoError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const fs::filesystem_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
