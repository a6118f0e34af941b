#include "avedit/training.hpp"

#include "avedit/error.hpp"
#include "avedit/hash.hpp"
#include "avedit/image.hpp"

#include <json.hpp>

#include <cmath>
#include <sstream>

namespace avedit {

namespace F = torch::nn::functional;

torch::Tensor photometric_loss(const torch::Tensor& rendered, const torch::Tensor& target) {
  if (!rendered.sizes().equals(target.sizes())) throw DimensionError("photometric_loss: image sizes differ");
  return (rendered - target).pow(2).mean();
}

RandomConvExtractor::RandomConvExtractor(uint64_t seed, std::vector<int> channels) {
  if (channels.empty()) throw ValidationError("perceptual extractor needs at least one level");
  auto gen = torch::make_generator<torch::CPUGeneratorImpl>(seed);
  int in = 3;
  for (int out : channels) {
    const double scale = std::sqrt(2.0 / (9.0 * in));
    weights_.push_back(torch::randn({out, in, 3, 3}, gen, torch::kFloat64) * scale);
    biases_.push_back(torch::zeros({out}, torch::kFloat64));
    in = out;
  }
}

std::vector<torch::Tensor> RandomConvExtractor::features(const torch::Tensor& image) const {
  if (image.dim() != 3 || image.size(2) != 3) throw DimensionError("perceptual extractor expects [H,W,3]");
  auto x = image.permute({2, 0, 1}).unsqueeze(0);
  std::vector<torch::Tensor> out;
  for (size_t l = 0; l < weights_.size(); ++l) {
    x = F::conv2d(x, weights_[l].to(image.dtype()), F::Conv2dFuncOptions().bias(biases_[l].to(image.dtype())).stride(2).padding(1));
    out.push_back(x);
    x = torch::relu(x);
  }
  return out;
}

void PerceptualConfig::validate() const {
  if (!extractor) throw ValidationError("perceptual config has no extractor");
  if (!layer_weights.empty() && static_cast<int>(layer_weights.size()) != extractor->levels()) {
    throw ValidationError("perceptual config: " + std::to_string(layer_weights.size()) + " layer weights for " +
                          std::to_string(extractor->levels()) + " levels");
  }
  for (double w : layer_weights) {
    if (!(w >= 0.0)) throw ValidationError("perceptual layer weights must be >= 0");
  }
}

PerceptualConfig default_perceptual_config() {
  PerceptualConfig c;
  c.extractor = std::make_shared<RandomConvExtractor>();
  c.layer_weights.assign(static_cast<size_t>(c.extractor->levels()), 1.0);
  return c;
}

torch::Tensor perceptual_loss(const torch::Tensor& rendered, const torch::Tensor& target,
                              const PerceptualConfig& config) {
  if (!rendered.sizes().equals(target.sizes())) throw DimensionError("perceptual_loss: image sizes differ");
  config.validate();
  const auto fa = config.extractor->features(rendered);
  const auto fb = config.extractor->features(target);
  auto loss = torch::zeros({}, rendered.options());
  for (size_t l = 0; l < fa.size(); ++l) {
    const double w = config.layer_weights.empty() ? 1.0 : config.layer_weights[l];
    loss = loss + w * (fa[l] - fb[l]).pow(2).mean();
  }
  return loss;
}

LossTerms total_loss(const torch::Tensor& rendered, const torch::Tensor& target, double alpha,
                     const PerceptualConfig& config) {
  LossTerms t;
  t.photometric = photometric_loss(rendered, target);
  t.perceptual = perceptual_loss(rendered, target, config);
  t.total = t.photometric + alpha * t.perceptual;
  return t;
}

std::string to_string(Stage s) { return s == Stage::Reconstruct ? "reconstruct" : "edit"; }

void TrainSchedule::validate() const {
  std::vector<std::string> bad;
  if (total_iters < 0) bad.push_back("total_iters must be >= 0");
  if (!(learning_rate >= 0.0)) bad.push_back("learning_rate must be >= 0");
  if (!(loss_alpha >= 0.0)) bad.push_back("loss_alpha must be >= 0");
  if (eval_every < 1) bad.push_back("eval_every must be >= 1");
  if (holdout_stride < 0 || holdout_stride == 1) bad.push_back("holdout_stride must be 0 or >= 2");
  if (!bad.empty()) {
    std::string msg = "invalid train schedule:";
    for (const auto& b : bad) msg += " " + b + ";";
    throw ValidationError(msg);
  }
}

std::vector<int> training_indices(int n_frames, int holdout_stride) {
  std::vector<int> out;
  for (int i = 0; i < n_frames; ++i) {
    if (holdout_stride == 0 || i % holdout_stride != holdout_stride / 2) out.push_back(i);
  }
  return out;
}

std::vector<int> holdout_indices(int n_frames, int holdout_stride) {
  std::vector<int> out;
  if (holdout_stride == 0) return out;
  for (int i = 0; i < n_frames; ++i) {
    if (i % holdout_stride == holdout_stride / 2) out.push_back(i);
  }
  return out;
}

namespace {

void copy_parameters(torch::nn::Module& dst, const torch::nn::Module& src) {
  torch::NoGradGuard ng;
  auto d = dst.named_parameters(true);
  for (const auto& item : src.named_parameters(true)) d[item.key()].copy_(item.value());
}

PortraitModel clone_model(const PortraitModel& m) {
  PortraitModel c(m->region(), m->encoding(), m->net_spec(), m->dims());
  copy_parameters(*c, *m);
  return c;
}

}  // namespace

ModelSet ModelSet::clone() const {
  ModelSet c;
  c.head = clone_model(head);
  c.torso = clone_model(torso);
  c.codes = SubjectCodes(static_cast<int>(codes->z_id.numel()), static_cast<int>(codes->z_ill.numel()));
  copy_parameters(*c.codes, *codes);
  return c;
}

uint64_t ModelSet::hash() const {
  Fnv1a h;
  h.update_value(parameter_hash(*head));
  h.update_value(parameter_hash(*torso));
  h.update_value(parameter_hash(*codes));
  return h.digest();
}

uint64_t ModelSet::deformation_hash() const {
  auto h = head;
  auto t = torso;
  std::vector<torch::Tensor> all = h->deformation_parameters();
  for (const auto& p : t->deformation_parameters()) all.push_back(p);
  return tensors_hash(all);
}

void ModelSet::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  auto h = head;
  auto t = torso;
  auto c = codes;
  save_checkpoint(dir / "head.ckpt", h);
  save_checkpoint(dir / "torso.ckpt", t);
  save_subject_codes(dir / "codes.ckpt", c);
}

ModelSet ModelSet::load(const std::filesystem::path& dir) {
  ModelSet m;
  m.head = load_checkpoint(dir / "head.ckpt");
  m.torso = load_checkpoint(dir / "torso.ckpt");
  m.codes = load_subject_codes(dir / "codes.ckpt");
  if (m.head->region() != Region::Head || m.torso->region() != Region::Torso) {
    throw ManifestError("checkpoint directory " + dir.string() + " has swapped head/torso models");
  }
  return m;
}

ModelSet make_model_set(const ModelConfig& config, int expr_dim, uint64_t seed) {
  if (config.dims.expr != expr_dim) {
    throw DimensionError("model expr dim " + std::to_string(config.dims.expr) + " != dataset expr dim " +
                         std::to_string(expr_dim));
  }
  ModelSet m;
  m.head = make_portrait_model(Region::Head, config.encoding, config.net_spec, config.dims, seed);
  m.torso = make_portrait_model(Region::Torso, config.encoding, config.net_spec, config.dims, seed + 1);
  m.codes = make_subject_codes(config.dims, seed + 2);
  return m;
}

Trainer::Trainer(ModelSet models, const TrainSchedule& schedule, const RenderOptions& options,
                 PerceptualConfig perceptual)
    : models_(std::move(models)),
      schedule_(schedule),
      options_(options),
      perceptual_(std::move(perceptual)),
      gen_(torch::make_generator<torch::CPUGeneratorImpl>(schedule.seed)) {
  schedule_.validate();
  perceptual_.validate();
  std::vector<torch::Tensor> params;
  const bool edit = schedule_.stage == Stage::Edit;
  for (auto* m : {&models_.head, &models_.torso}) {
    for (auto& p : (*m)->deformation_parameters()) {
      p.requires_grad_(!edit);
      if (!edit) params.push_back(p);
    }
    for (auto& p : (*m)->appearance_parameters()) {
      p.requires_grad_(true);
      params.push_back(p);
    }
  }
  for (auto& p : models_.codes->parameters()) {
    p.requires_grad_(!edit);
    if (!edit) params.push_back(p);
  }
  optimizer_ = std::make_unique<torch::optim::Adam>(params, torch::optim::AdamOptions(schedule_.learning_rate));
}

int Trainer::sample_frame(const std::vector<int>& pool) {
  if (pool.empty()) throw ContractError("no frames to sample from");
  const auto k = torch::randint(static_cast<int64_t>(pool.size()), {1}, gen_, torch::kInt64).item<int64_t>();
  return pool[static_cast<size_t>(k)];
}

StepRecord Trainer::step(const FrameRecord& frame) {
  auto opts = options_;
  opts.stratified = true;
  optimizer_->zero_grad();
  const auto render = render_frame(frame, models_.head, models_.torso, models_.codes, opts, &gen_);
  const auto target = frame.edit_target.to(render.rgb.dtype());
  const auto terms = total_loss(render.rgb, target, schedule_.loss_alpha, perceptual_);

  StepRecord rec;
  rec.iter = iter_;
  rec.frame = frame.index;
  rec.loss = terms.total.item<double>();
  rec.photometric = terms.photometric.item<double>();
  rec.perceptual = terms.perceptual.item<double>();
  if (!std::isfinite(rec.loss)) {
    std::ostringstream msg;
    msg << "non-finite loss at iteration " << iter_ << " on frame " << frame.index;
    if (diagnostic_dir_) {
      models_.save(*diagnostic_dir_);
      msg << "; snapshot written to " << diagnostic_dir_->string();
    }
    throw NumericError(msg.str());
  }
  terms.total.backward();
  optimizer_->step();
  ++iter_;
  return rec;
}

torch::Tensor render_eval(const FrameRecord& frame, ModelSet& models, const RenderOptions& options) {
  torch::NoGradGuard ng;
  auto opts = options;
  opts.stratified = false;
  return render_frame(frame, models.head, models.torso, models.codes, opts).rgb.to(torch::kFloat32);
}

double mean_psnr(const Dataset& dataset, ModelSet& models, const std::vector<int>& indices,
                 const RenderOptions& options) {
  if (indices.empty()) return 0.0;
  double sum = 0.0;
  for (int i : indices) {
    const auto& f = dataset.frames.at(static_cast<size_t>(i));
    sum += psnr(render_eval(f, models, options), f.image_gt);
  }
  return sum / static_cast<double>(indices.size());
}

FitReport fit_reconstruction(const Dataset& dataset, ModelSet& models, const TrainSchedule& schedule,
                             const RenderOptions& options, const LogSink& log, PerceptualConfig perceptual) {
  schedule.validate();
  if (schedule.stage != Stage::Reconstruct) throw ContractError("fit_reconstruction needs a reconstruct schedule");
  for (const auto& f : dataset.frames) {
    if (!torch::equal(f.edit_target, f.image_gt)) {
      throw ContractError("frame " + std::to_string(f.index) + " carries an edit target; reconstruct from originals");
    }
  }
  const int n = static_cast<int>(dataset.frames.size());
  const auto train = training_indices(n, schedule.holdout_stride);
  auto heldout = holdout_indices(n, schedule.holdout_stride);

  Trainer trainer(models, schedule, options, std::move(perceptual));
  FitReport report;
  auto evaluate = [&](int iter) {
    const double p = mean_psnr(dataset, models, heldout.empty() ? train : heldout, options);
    report.heldout_psnr.emplace_back(iter, p);
    if (log) log(nlohmann::json{{"event", "eval"}, {"iter", iter}, {"heldout_psnr", p}}.dump());
  };
  for (int it = 0; it < schedule.total_iters; ++it) {
    const int fi = trainer.sample_frame(train);
    const auto rec = trainer.step(dataset.frames[static_cast<size_t>(fi)]);
    report.steps.push_back(rec);
    if (log) {
      log(nlohmann::json{{"iter", rec.iter},
                         {"frame", rec.frame},
                         {"loss", rec.loss},
                         {"photometric", rec.photometric},
                         {"perceptual", rec.perceptual}}
              .dump());
    }
    if ((it + 1) % schedule.eval_every == 0 && it + 1 < schedule.total_iters) evaluate(it + 1);
  }
  evaluate(schedule.total_iters);
  report.final_heldout_psnr = report.heldout_psnr.back().second;
  report.final_train_psnr = mean_psnr(dataset, models, train, options);
  return report;
}

}  // namespace avedit
