#include "avedit/dataset_update.hpp"

#include "avedit/error.hpp"
#include "avedit/image.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <cstdio>

namespace avedit {

namespace {

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

bool known_mask(const std::string& name) {
  return std::any_of(kMaskNames.begin(), kMaskNames.end(), [&](const char* m) { return name == m; });
}

std::string iter_dir_name(int iter) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "iter_%06d", iter);
  return buf;
}

}  // namespace

void check_lexicon(const RegionLexicon& lexicon) {
  for (const auto& [keyword, mask] : lexicon) {
    if (keyword.empty()) throw ValidationError("region lexicon has an empty keyword");
    if (!known_mask(mask)) throw ValidationError("region lexicon routes '" + keyword + "' to unknown mask '" + mask + "'");
  }
}

RegionSelection select_region(const std::string& instruction, const RegionLexicon& lexicon, const MaskSet& masks) {
  const std::string text = lower(instruction);
  RegionSelection sel;
  for (const auto& [keyword, mask] : lexicon) {
    if (text.find(lower(keyword)) == std::string::npos) continue;
    if (std::find(sel.mask_names.begin(), sel.mask_names.end(), mask) == sel.mask_names.end()) {
      sel.mask_names.push_back(mask);
    }
  }
  if (sel.mask_names.empty()) return sel;
  sel.global = false;
  for (const auto& name : sel.mask_names) {
    auto it = masks.find(name);
    if (it == masks.end()) throw ValidationError("instruction routes to mask '" + name + "' which the frame lacks");
    sel.mask = sel.mask.defined() ? torch::maximum(sel.mask, it->second) : it->second.clone();
  }
  return sel;
}

torch::Tensor blend(const torch::Tensor& edited, const torch::Tensor& original, const RegionSelection& region) {
  if (!edited.sizes().equals(original.sizes())) throw DimensionError("blend: edited and original images differ in size");
  if (region.global) return edited.clone();
  if (region.mask.dim() != 2 || region.mask.size(0) != edited.size(0) || region.mask.size(1) != edited.size(1)) {
    throw DimensionError("blend: mask size differs from image size");
  }
  const auto inside = (region.mask > 0.5).unsqueeze(-1);
  return torch::where(inside, edited.to(original.dtype()), original);
}

DUState::DUState(Dataset ds, EditConfig config, int period, uint64_t seed)
    : dataset(std::move(ds)),
      edit_config(std::move(config)),
      update_period(period),
      gen(torch::make_generator<torch::CPUGeneratorImpl>(seed)) {
  check();
}

void DUState::check() const {
  if (dataset.frames.empty()) throw ContractError("dataset update needs at least one frame");
  if (update_period < 1) throw ValidationError("update_period must be >= 1");
  if (update_cursor < 0 || update_cursor >= static_cast<int>(dataset.frames.size())) {
    throw ContractError("update cursor out of range");
  }
  if (nerf_iters_since_update < 0 || total_iters < 0) throw ContractError("negative dataset-update counter");
}

EditEvent edit_frame(DUState& state, int frame_index, ModelSet& models, Denoiser& denoiser, const LatentCodec& codec,
                     const RenderOptions& options) {
  auto& frame = state.dataset.frames.at(static_cast<size_t>(frame_index));
  EditEvent ev;
  ev.frame = frame_index;
  try {
    const auto region = select_region(state.edit_config.instruction, state.edit_config.region_lexicon, frame.masks);
    ev.global = region.global;
    const auto rendered = render_eval(frame, models, options);
    denoiser.bind_frame(&frame);
    DdimTrace trace;
    torch::Tensor edited;
    {
      torch::NoGradGuard ng;
      edited = ddim_edit(frame.image_gt, rendered, state.edit_config, denoiser, codec, state.gen, &trace);
    }
    denoiser.bind_frame(nullptr);
    ev.t = trace.t;
    frame.edit_target = blend(quantize_u8(edited.to(torch::kFloat32)), frame.image_gt, region);
  } catch (const Error& e) {
    denoiser.bind_frame(nullptr);
    throw Error(e.kind(), "editing frame " + std::to_string(frame_index) + ": " + e.what());
  }
  return ev;
}

DUStepResult du_step(DUState& state, Trainer& trainer, Denoiser& denoiser, const LatentCodec& codec,
                     const RenderOptions& options) {
  state.check();
  DUStepResult out;
  ++state.nerf_iters_since_update;
  if (state.nerf_iters_since_update >= state.update_period) {
    out.edit = edit_frame(state, state.update_cursor, trainer.models(), denoiser, codec, options);
    state.update_cursor = (state.update_cursor + 1) % static_cast<int>(state.dataset.frames.size());
    state.nerf_iters_since_update = 0;
    ++state.edit_events;
  }
  std::vector<int> all(state.dataset.frames.size());
  for (size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
  const int fi = trainer.sample_frame(all);
  out.train = trainer.step(state.dataset.frames[static_cast<size_t>(fi)]);
  ++state.total_iters;
  return out;
}

void DUSchedule::validate() const {
  std::vector<std::string> bad;
  if (total_iters < 0) bad.push_back("total_iters must be >= 0");
  if (update_period < 1) bad.push_back("update_period must be >= 1");
  if (eval_every < 1) bad.push_back("eval_every must be >= 1");
  if (snapshot_every < 0) bad.push_back("snapshot_every must be >= 0");
  if (!(learning_rate >= 0.0)) bad.push_back("learning_rate must be >= 0");
  if (!(loss_alpha >= 0.0)) bad.push_back("loss_alpha must be >= 0");
  if (!bad.empty()) {
    std::string msg = "invalid edit schedule:";
    for (const auto& b : bad) msg += " " + b + ";";
    throw ValidationError(msg);
  }
}

CheckpointMetrics evaluate_edit(const Dataset& dataset, ModelSet& models, const EditConfig& config,
                                const RenderOptions& options, const ReferenceFn& reference, int iter) {
  CheckpointMetrics m;
  m.iter = iter;
  double in_sum = 0.0, in_count = 0.0, out_sum = 0.0, out_count = 0.0, full_sum = 0.0, full_count = 0.0;
  for (const auto& f : dataset.frames) {
    const auto region = select_region(config.instruction, config.region_lexicon, f.masks);
    const auto render = render_eval(f, models, options);
    const auto ref = reference ? reference(f) : f.edit_target;
    const auto err_ref = (render - ref).abs();
    full_sum += err_ref.sum().item<double>();
    full_count += static_cast<double>(err_ref.numel());
    if (region.global) {
      in_sum += err_ref.sum().item<double>();
      in_count += static_cast<double>(err_ref.numel());
      continue;
    }
    const auto inside = region.mask.unsqueeze(-1).expand_as(render);
    in_sum += (err_ref * inside).sum().item<double>();
    in_count += inside.sum().item<double>();
    out_sum += ((render - f.image_gt).abs() * (1.0 - inside)).sum().item<double>();
    out_count += (1.0 - inside).sum().item<double>();
    const auto outside = (region.mask < 0.5).unsqueeze(-1).expand_as(render);
    if (!torch::equal(f.edit_target.masked_select(outside), f.image_gt.masked_select(outside))) m.locality_ok = false;
  }
  m.masked_error = in_count > 0 ? in_sum / in_count : 0.0;
  m.unmasked_error = out_count > 0 ? out_sum / out_count : 0.0;
  m.full_error = full_count > 0 ? full_sum / full_count : 0.0;
  return m;
}

EditReport edit_sequence(const Dataset& dataset, ModelSet& models, const EditConfig& config,
                         const DUSchedule& schedule, Denoiser& denoiser, const LatentCodec& codec,
                         const RenderOptions& options, const EditRunOptions& run) {
  schedule.validate();
  config.validate();
  check_lexicon(config.region_lexicon);

  TrainSchedule ts;
  ts.stage = Stage::Edit;
  ts.total_iters = schedule.total_iters;
  ts.learning_rate = schedule.learning_rate;
  ts.loss_alpha = schedule.loss_alpha;
  ts.eval_every = schedule.eval_every;
  ts.holdout_stride = 0;
  ts.seed = schedule.seed;
  Trainer trainer(models, ts, options);

  DUState state(dataset, config, schedule.update_period, schedule.seed + 1);
  for (auto& f : state.dataset.frames) f.edit_target = f.image_gt.clone();

  EditReport report;
  report.deformation_hash_before = models.deformation_hash();

  auto checkpoint = [&](int iter) {
    auto m = evaluate_edit(state.dataset, models, config, options, run.reference, iter);
    if (!m.locality_ok) ++report.locality_violations;
    report.trace.push_back(m);
    if (run.log) {
      run.log(nlohmann::json{{"event", "eval"},
                             {"iter", iter},
                             {"masked_error", m.masked_error},
                             {"unmasked_error", m.unmasked_error},
                             {"full_error", m.full_error},
                             {"locality_ok", m.locality_ok}}
                  .dump());
    }
  };

  for (int it = 0; it < schedule.total_iters; ++it) {
    const auto res = du_step(state, trainer, denoiser, codec, options);
    if (res.edit) {
      report.events.push_back(*res.edit);
      const auto& f = state.dataset.frames[static_cast<size_t>(res.edit->frame)];
      if (!res.edit->global) {
        const auto region = select_region(config.instruction, config.region_lexicon, f.masks);
        const auto outside = (region.mask < 0.5).unsqueeze(-1).expand_as(f.image_gt);
        if (!torch::equal(f.edit_target.masked_select(outside), f.image_gt.masked_select(outside))) {
          ++report.locality_violations;
        }
      }
    }
    if (run.log) {
      nlohmann::json line{{"iter", res.train.iter},
                          {"frame", res.train.frame},
                          {"edited_frame", res.edit ? nlohmann::json(res.edit->frame) : nlohmann::json(nullptr)},
                          {"loss", res.train.loss},
                          {"photometric", res.train.photometric},
                          {"perceptual", res.train.perceptual}};
      if (res.edit) line["edit_t"] = res.edit->t;
      run.log(line.dump());
    }
    const int done = it + 1;
    if (done % schedule.eval_every == 0 && done < schedule.total_iters) checkpoint(done);
    if (run.snapshot_dir && schedule.snapshot_every > 0 && done % schedule.snapshot_every == 0) {
      const auto dir = *run.snapshot_dir / iter_dir_name(done);
      models.save(dir / "models");
      save_dataset(state.dataset, dir / "dataset");
    }
  }
  checkpoint(schedule.total_iters);
  report.deformation_hash_after = models.deformation_hash();
  report.dataset = std::move(state.dataset);
  return report;
}

}  // namespace avedit
