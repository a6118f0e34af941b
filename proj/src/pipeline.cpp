#include "avedit/pipeline.hpp"

#include "avedit/dataset_update.hpp"
#include "avedit/driving.hpp"
#include "avedit/error.hpp"
#include "avedit/image.hpp"
#include "avedit/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>

namespace avedit {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string hex(uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string stem(int index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%05d", index);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

void write_manifest(const RunContext& ctx, const std::string& command, const fs::path& dir, json inputs) {
  json m = {{"command", command},
            {"version", kVersion},
            {"seed", ctx.config.seed},
            {"config_hash", hex(config_hash(ctx.config))},
            {"editor", to_string(ctx.editor)},
            {"inputs", std::move(inputs)},
            {"config", to_json(ctx.config)}};
  write_text(dir / "manifest.json", m.dump(2) + "\n");
}

// Collects JSON lines in memory and writes them once, so a failed run never
// leaves a partial log that looks complete.
class JsonLines {
 public:
  LogSink sink() {
    return [this](const std::string& line) { text_ += line + "\n"; };
  }
  void write(const fs::path& path) const { write_text(path, text_); }

 private:
  std::string text_;
};

Dataset load_dataset_checked(const fs::path& path) {
  if (!fs::exists(path / "manifest.json")) {
    throw StageError("no dataset at " + path.string() + "; run synth first or pass --dataset");
  }
  return load_dataset(path);
}

ModelSet load_models_checked(const fs::path& path, const std::string& missing_hint) {
  if (!fs::exists(path / "head.ckpt")) throw StageError("no checkpoint at " + path.string() + "; " + missing_hint);
  return ModelSet::load(path);
}

// Toy-editor target for a frame, restricted to the routed region the way the
// loop's blend restricts real edits.
ReferenceFn toy_reference(const RunConfig& config) {
  auto transform = hue_rule_transform(config.toy_rules);
  const EditConfig editor = config.edit.editor;
  return [transform, editor](const FrameRecord& f) {
    const auto target = quantize_u8(transform(f.image_gt, editor.instruction, &f));
    return blend(target, f.image_gt, select_region(editor.instruction, editor.region_lexicon, f.masks));
  };
}

json metrics_json(const CheckpointMetrics& m) {
  return {{"iter", m.iter},
          {"masked_error", m.masked_error},
          {"unmasked_error", m.unmasked_error},
          {"full_error", m.full_error},
          {"locality_ok", m.locality_ok}};
}

}  // namespace

EditorKind editor_kind_from_string(const std::string& s) {
  if (s == "toy") return EditorKind::Toy;
  if (s == "external") return EditorKind::External;
  throw ConfigError("unknown editor '" + s + "' (expected toy or external)");
}

std::string to_string(EditorKind k) { return k == EditorKind::Toy ? "toy" : "external"; }

std::unique_ptr<Denoiser> make_denoiser(EditorKind kind, const RunConfig& config) {
  if (kind == EditorKind::Toy) return toy_denoiser(hue_rule_transform(config.toy_rules));
  const char* address = std::getenv(kEditorSocketEnv);
  return std::make_unique<ExternalDenoiser>(address ? address : "");
}

std::vector<torch::Tensor> read_frame_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw MissingFileError("missing frame directory " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() == ".png") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<torch::Tensor> frames;
  for (const auto& f : files) frames.push_back(read_png_rgb(f));
  return frames;
}

void write_frame_dir(const fs::path& dir, const std::vector<torch::Tensor>& frames) {
  fs::create_directories(dir);
  for (size_t i = 0; i < frames.size(); ++i) write_png_rgb(dir / (stem(static_cast<int>(i)) + ".png"), frames[i]);
}

json cmd_synth(const RunContext& ctx) {
  const auto ds = synth_sequence(ctx.config.scene);
  const auto dir = ctx.out / "dataset";
  save_dataset(ds, dir);
  write_manifest(ctx, "synth", ctx.out / "synth", json::object());
  return {{"command", "synth"}, {"dataset", dir.string()}, {"frames", ds.frames.size()},
          {"dataset_hash", hex(dataset_hash(ds))}};
}

json cmd_fit(const RunContext& ctx, const std::optional<fs::path>& dataset_path) {
  const auto dpath = dataset_path.value_or(ctx.out / "dataset");
  const auto ds = load_dataset_checked(dpath);
  const auto& cfg = ctx.config;
  auto models = make_model_set(cfg.model, ds.expr_dim, cfg.seed);
  const auto options = cfg.render_options(ds);
  const auto dir = ctx.out / "fit";
  JsonLines log;
  FitReport report;
  try {
    report = fit_reconstruction(ds, models, cfg.fit_schedule(), options, log.sink(), cfg.perceptual_config());
  } catch (const NumericError&) {
    log.write(dir / "log.jsonl");
    models.save(dir / "diagnostic");
    throw;
  }
  models.save(dir / "models");
  log.write(dir / "log.jsonl");
  json curve = json::array();
  for (const auto& [it, p] : report.heldout_psnr) curve.push_back({{"iter", it}, {"heldout_psnr", p}});
  json rep = {{"final_heldout_psnr", report.final_heldout_psnr},
              {"final_train_psnr", report.final_train_psnr},
              {"final_loss", report.steps.empty() ? 0.0 : report.steps.back().loss},
              {"heldout_frames", holdout_indices(static_cast<int>(ds.frames.size()), cfg.fit.holdout_stride)},
              {"eval", curve},
              {"model_hash", hex(models.hash())}};
  write_text(dir / "report.json", rep.dump(2) + "\n");
  write_manifest(ctx, "fit", dir, {{"dataset", dpath.string()}, {"dataset_hash", hex(dataset_hash(ds))}});
  rep["command"] = "fit";
  rep["checkpoint"] = (dir / "models").string();
  return rep;
}

json cmd_edit(const RunContext& ctx, const std::optional<fs::path>& checkpoint, const std::optional<fs::path>& dataset_path) {
  const auto& cfg = ctx.config;
  const auto cpath = checkpoint.value_or(ctx.out / "fit" / "models");
  auto models = load_models_checked(cpath, "edit needs a reconstruction checkpoint; run fit first");
  if (cfg.edit.editor.instruction.empty()) throw ConfigError("edit needs an instruction (edit.instruction)");
  const auto dpath = dataset_path.value_or(ctx.out / "dataset");
  const auto ds = load_dataset_checked(dpath);
  const auto options = cfg.render_options(ds);
  auto denoiser = make_denoiser(ctx.editor, cfg);
  const IdentityCodec codec;

  const auto dir = ctx.out / "edit";
  EditRunOptions run;
  JsonLines log;
  run.log = log.sink();
  if (cfg.edit.snapshot_every > 0) run.snapshot_dir = dir / "snapshots";
  if (ctx.editor == EditorKind::Toy) run.reference = toy_reference(cfg);

  const auto before = evaluate_edit(ds, models, cfg.edit.editor, options, run.reference, 0);
  auto report = edit_sequence(ds, models, cfg.edit.editor, cfg.edit_schedule(), *denoiser, codec, options, run);

  models.save(dir / "models");
  save_dataset(report.dataset, dir / "dataset");
  log.write(dir / "log.jsonl");

  std::vector<torch::Tensor> renders, originals;
  for (const auto& f : report.dataset.frames) {
    renders.push_back(render_eval(f, models, options));
    originals.push_back(f.image_gt);
  }
  write_frame_dir(dir / "renders", renders);

  json trace = json::array();
  for (const auto& m : report.trace) trace.push_back(metrics_json(m));
  const auto& last = report.trace.back();
  json rep = {{"instruction", cfg.edit.editor.instruction},
              {"edit_events", report.events.size()},
              {"before", metrics_json(before)},
              {"trace", trace},
              {"final", metrics_json(last)},
              {"locality_violations", report.locality_violations},
              {"deformation_hash_before", hex(report.deformation_hash_before)},
              {"deformation_hash_after", hex(report.deformation_hash_after)},
              {"pixel_mse_edited", pixel_mse_consistency(renders)},
              {"pixel_mse_ground_truth", pixel_mse_consistency(originals)},
              {"model_hash", hex(models.hash())}};
  write_text(dir / "report.json", rep.dump(2) + "\n");
  write_manifest(ctx, "edit", dir,
                 {{"checkpoint", cpath.string()}, {"dataset", dpath.string()}, {"dataset_hash", hex(dataset_hash(ds))}});
  rep["command"] = "edit";
  rep["checkpoint"] = (dir / "models").string();
  return rep;
}

json cmd_drive(const RunContext& ctx, const fs::path& reference, const std::optional<fs::path>& checkpoint,
               const std::optional<fs::path>& dataset_path) {
  const auto cpath = checkpoint.value_or(ctx.out / "edit" / "models");
  auto models = load_models_checked(cpath, "drive needs an edited checkpoint; run edit first or pass --checkpoint");
  const auto dpath = dataset_path.value_or(ctx.out / "dataset");
  const auto ds = load_dataset_checked(dpath);
  const auto entries = load_reference_codes(reference);
  const auto frames = transfer(models, entries, ds.intrinsics, ds.image_size, ctx.config.render_options(ds));
  const auto dir = ctx.out / "drive";
  write_frame_dir(dir / "frames", frames);
  write_manifest(ctx, "drive", dir, {{"checkpoint", cpath.string()}, {"reference", reference.string()}});
  return {{"command", "drive"}, {"frames", frames.size()}, {"output", (dir / "frames").string()}};
}

json cmd_eval(const RunContext& ctx, const std::optional<fs::path>& frames_dir, const std::optional<std::string>& prompt) {
  const auto fpath = frames_dir.value_or(ctx.out / "edit" / "renders");
  const auto frames = read_frame_dir(fpath);
  std::string text = prompt.value_or(ctx.config.edit.editor.instruction);
  if (!prompt && text.empty() && fs::exists(ctx.out / "edit" / "manifest.json")) {
    // Fall back to the instruction the edit run used.
    text = read_config_json(ctx.out / "edit" / "manifest.json").at("edit").value("instruction", "");
  }
  const RandomProjectionEmbedder embedder;
  json rep = {{"frames", frames.size()}, {"prompt", text}};
  rep["pixel_mse"] = frames.size() >= 2 ? json(pixel_mse_consistency(frames)) : json(nullptr);
  rep["tem_con"] = frames.size() >= 2 ? json(temporal_embedding_consistency(frames, embedder)) : json(nullptr);
  rep["clip_text"] = text.empty() ? json(nullptr) : json(text_alignment(frames, text, embedder));
  const auto dir = ctx.out / "eval";
  write_text(dir / "report.json", rep.dump(2) + "\n");
  write_manifest(ctx, "eval", dir, {{"frames", fpath.string()}});
  rep["command"] = "eval";
  return rep;
}

json cmd_render(const RunContext& ctx, const std::vector<int>& indices, const std::optional<fs::path>& checkpoint,
                const std::optional<fs::path>& dataset_path) {
  const auto cpath = checkpoint.value_or(ctx.out / "fit" / "models");
  auto models = load_models_checked(cpath, "render needs a checkpoint; run fit first or pass --checkpoint");
  const auto dpath = dataset_path.value_or(ctx.out / "dataset");
  const auto ds = load_dataset_checked(dpath);
  const auto options = ctx.config.render_options(ds);
  std::vector<int> which = indices;
  if (which.empty()) which = holdout_indices(static_cast<int>(ds.frames.size()), ctx.config.fit.holdout_stride);
  const auto dir = ctx.out / "render";
  fs::create_directories(dir);
  json per_frame = json::array();
  double sum = 0.0;
  for (int i : which) {
    if (i < 0 || i >= static_cast<int>(ds.frames.size())) {
      throw ValidationError("frame index " + std::to_string(i) + " outside [0," + std::to_string(ds.frames.size()) + ")");
    }
    const auto& f = ds.frames[static_cast<size_t>(i)];
    const auto img = render_eval(f, models, options);
    write_png_rgb(dir / (stem(i) + ".png"), img);
    const double p = psnr(img, f.image_gt);
    sum += p;
    per_frame.push_back({{"frame", i}, {"psnr", p}});
  }
  json rep = {{"frames", per_frame}, {"mean_psnr", which.empty() ? 0.0 : sum / static_cast<double>(which.size())}};
  write_text(dir / "report.json", rep.dump(2) + "\n");
  write_manifest(ctx, "render", dir, {{"checkpoint", cpath.string()}, {"dataset", dpath.string()}});
  rep["command"] = "render";
  return rep;
}

}  // namespace avedit
