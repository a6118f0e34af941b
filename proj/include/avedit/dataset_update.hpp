#pragma once

#include "avedit/editor.hpp"
#include "avedit/scene.hpp"
#include "avedit/training.hpp"

#include <torch/torch.h>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace avedit {

// Region picked for an instruction: either the whole frame or the union of
// the routed masks.
struct RegionSelection {
  bool global = true;
  std::vector<std::string> mask_names;  // routed masks in lexicon order, deduplicated
  torch::Tensor mask;                   // [H,W] in {0,1}; undefined when global
};

// Case-insensitive substring match of every lexicon keyword, in order. Throws
// ValidationError naming the mask when a routed mask is absent from `masks`.
RegionSelection select_region(const std::string& instruction, const RegionLexicon& lexicon, const MaskSet& masks);

// Throws ValidationError if a lexicon entry routes to an unknown mask name.
void check_lexicon(const RegionLexicon& lexicon);

// Global: edited. Otherwise mask * edited + (1 - mask) * original, selected
// per pixel so pixels outside the mask are copied from `original` exactly.
torch::Tensor blend(const torch::Tensor& edited, const torch::Tensor& original, const RegionSelection& region);

struct DUState {
  Dataset dataset;
  EditConfig edit_config;
  int update_period = 10;
  int update_cursor = 0;
  int nerf_iters_since_update = 0;
  int total_iters = 0;
  int edit_events = 0;
  torch::Generator gen;

  DUState(Dataset dataset, EditConfig config, int update_period, uint64_t seed);
  void check() const;
};

struct EditEvent {
  int frame = -1;
  double t = 0.0;
  bool global = true;
};

struct DUStepResult {
  StepRecord train;
  std::optional<EditEvent> edit;
};

// One loop iteration: bump the counter, run an edit event first when the
// counter reaches the update period, then one optimisation step on a frame
// drawn by the trainer.
DUStepResult du_step(DUState& state, Trainer& trainer, Denoiser& denoiser, const LatentCodec& codec,
                     const RenderOptions& options);

// Re-edits one frame: render, DDIM edit conditioned on image_gt, quantise to
// 8 bits, blend over image_gt and store as edit_target.
EditEvent edit_frame(DUState& state, int frame_index, ModelSet& models, Denoiser& denoiser, const LatentCodec& codec,
                     const RenderOptions& options);

struct DUSchedule {
  int total_iters = 2000;
  int update_period = 10;
  int eval_every = 200;
  int snapshot_every = 0;  // 0 disables snapshots
  double learning_rate = 1e-4;
  double loss_alpha = 0.5;
  uint64_t seed = 0;

  void validate() const;
};

// Error of the current renders at a checkpoint.
struct CheckpointMetrics {
  int iter = 0;
  double masked_error = 0.0;    // mean |render - reference| inside S_key (whole frame when global)
  double unmasked_error = 0.0;  // mean |render - image_gt| outside S_key (0 when global)
  double full_error = 0.0;      // mean |render - reference| over every pixel
  bool locality_ok = true;      // stored targets bit-equal to image_gt outside S_key
};

// Per-frame reference image for error reporting, e.g. the toy editor's target.
using ReferenceFn = std::function<torch::Tensor(const FrameRecord& frame)>;

struct EditReport {
  Dataset dataset;  // with final edit targets
  std::vector<CheckpointMetrics> trace;
  std::vector<EditEvent> events;
  uint64_t deformation_hash_before = 0;
  uint64_t deformation_hash_after = 0;
  int locality_violations = 0;
};

struct EditRunOptions {
  LogSink log;
  std::optional<std::filesystem::path> snapshot_dir;
  ReferenceFn reference;  // defaults to edit_target
};

// Alternates dataset edits and fine-tuning of F_theta and U. D_theta, the
// torso latent and the subject codes stay fixed.
EditReport edit_sequence(const Dataset& dataset, ModelSet& models, const EditConfig& config,
                         const DUSchedule& schedule, Denoiser& denoiser, const LatentCodec& codec,
                         const RenderOptions& options, const EditRunOptions& run = {});

// Checkpoint metrics of `models` on `dataset` for `config`'s routed region.
CheckpointMetrics evaluate_edit(const Dataset& dataset, ModelSet& models, const EditConfig& config,
                                const RenderOptions& options, const ReferenceFn& reference, int iter = 0);

}  // namespace avedit
