#include "avedit/config.hpp"

#include "avedit/error.hpp"
#include "avedit/hash.hpp"

#include <fstream>

namespace avedit {

using nlohmann::json;

namespace {

const char* type_name(const json& j) { return j.type_name(); }

bool same_kind(const json& a, const json& b) {
  if (a.is_number() && b.is_number()) return !(a.is_number_integer() && b.is_number_float());
  return a.type() == b.type();
}

// Every key of `given` must exist in `schema` with a compatible type.
void check_against(const json& schema, const json& given, const std::string& path) {
  if (!given.is_object()) throw ConfigError("config: '" + path + "' must be an object");
  for (const auto& [key, value] : given.items()) {
    const std::string here = path.empty() ? key : path + "." + key;
    if (!schema.contains(key)) throw ConfigError("config: unknown key '" + here + "'");
    const auto& expected = schema.at(key);
    if (!same_kind(expected, value)) {
      throw ConfigError("config: '" + here + "' must be " + type_name(expected) + ", got " + type_name(value));
    }
    if (expected.is_object()) check_against(expected, value, here);
  }
}

void merge_into(json& base, const json& patch) {
  for (const auto& [key, value] : patch.items()) {
    if (value.is_object() && base[key].is_object()) {
      merge_into(base[key], value);
    } else {
      base[key] = value;
    }
  }
}

json hue_rules_json(const std::vector<HueRule>& rules) {
  json a = json::array();
  for (const auto& r : rules) a.push_back({{"keyword", r.keyword}, {"degrees", r.degrees}, {"region", r.region}});
  return a;
}

}  // namespace

RenderOptions RunConfig::render_options(const Dataset& dataset) const {
  return render_options_for(dataset, render.samples, render.guide_halfwidth);
}

TrainSchedule RunConfig::fit_schedule() const {
  TrainSchedule s;
  s.stage = Stage::Reconstruct;
  s.total_iters = fit.iters;
  s.learning_rate = fit.learning_rate;
  s.loss_alpha = fit.loss_alpha;
  s.eval_every = fit.eval_every;
  s.holdout_stride = fit.holdout_stride;
  s.seed = seed;
  return s;
}

DUSchedule RunConfig::edit_schedule() const {
  DUSchedule s;
  s.total_iters = edit.iters;
  s.update_period = edit.update_period;
  s.eval_every = edit.eval_every;
  s.snapshot_every = edit.snapshot_every;
  s.learning_rate = edit.learning_rate;
  s.loss_alpha = edit.loss_alpha;
  s.seed = seed;
  return s;
}

PerceptualConfig RunConfig::perceptual_config() const {
  PerceptualConfig c;
  c.extractor = std::make_shared<RandomConvExtractor>(perceptual.seed);
  c.layer_weights = perceptual.layer_weights;
  return c;
}

json to_json(const RunConfig& c) {
  const auto& e = c.edit.editor;
  json lexicon = json::array();
  for (const auto& [k, v] : e.region_lexicon) lexicon.push_back({k, v});
  return {
      {"seed", c.seed},
      {"scene",
       {{"n_frames", c.scene.n_frames},
        {"image_size", c.scene.image_size},
        {"expr_dim", c.scene.expr_dim},
        {"motion_seed", c.scene.motion_seed},
        {"head_texture_seed", c.scene.head_texture_seed},
        {"torso_texture_seed", c.scene.torso_texture_seed},
        {"background_color", c.scene.background_color},
        {"motion_scale", c.scene.motion_scale},
        {"expression_scale", c.scene.expression_scale}}},
      {"model",
       {{"encoding",
         {{"pos_deform", c.model.encoding.pos_deform},
          {"pos_field", c.model.encoding.pos_field},
          {"dir", c.model.encoding.dir},
          {"include_raw", c.model.encoding.include_raw}}},
        {"net",
         {{"trunk_layers", c.model.net_spec.trunk_layers},
          {"trunk_width", c.model.net_spec.trunk_width},
          {"head_layers", c.model.net_spec.head_layers},
          {"head_width", c.model.net_spec.head_width},
          {"feature_dim", c.model.net_spec.feature_dim},
          {"deform_layers", c.model.net_spec.deform_layers},
          {"deform_width", c.model.net_spec.deform_width},
          {"upsampler_width", c.model.net_spec.upsampler_width},
          {"upsample_factor", c.model.net_spec.upsample_factor}}},
        {"dims",
         {{"id", c.model.dims.id},
          {"expr", c.model.dims.expr},
          {"ill", c.model.dims.ill},
          {"torso_w", c.model.dims.torso_w}}}}},
      {"render", {{"samples", c.render.samples}, {"guide_halfwidth", c.render.guide_halfwidth}}},
      {"fit",
       {{"iters", c.fit.iters},
        {"learning_rate", c.fit.learning_rate},
        {"loss_alpha", c.fit.loss_alpha},
        {"eval_every", c.fit.eval_every},
        {"holdout_stride", c.fit.holdout_stride}}},
      {"edit",
       {{"instruction", e.instruction},
        {"s_T", e.s_T},
        {"s_I", e.s_I},
        {"t_min", e.t_min},
        {"t_max", e.t_max},
        {"denoise_steps", e.denoise_steps},
        {"lexicon", lexicon},
        {"iters", c.edit.iters},
        {"update_period", c.edit.update_period},
        {"eval_every", c.edit.eval_every},
        {"snapshot_every", c.edit.snapshot_every},
        {"learning_rate", c.edit.learning_rate},
        {"loss_alpha", c.edit.loss_alpha}}},
      {"perceptual", {{"seed", c.perceptual.seed}, {"layer_weights", c.perceptual.layer_weights}}},
      {"toy_editor", {{"rules", hue_rules_json(c.toy_rules)}}},
  };
}

RunConfig config_from_json(const json& given) {
  const json schema = to_json(RunConfig{});
  check_against(schema, given, "");
  json j = schema;
  merge_into(j, given);

  RunConfig c;
  try {
    c.seed = j.at("seed").get<uint64_t>();
    const auto& s = j.at("scene");
    c.scene.n_frames = s.at("n_frames");
    c.scene.image_size = s.at("image_size");
    c.scene.expr_dim = s.at("expr_dim");
    c.scene.motion_seed = s.at("motion_seed");
    c.scene.head_texture_seed = s.at("head_texture_seed");
    c.scene.torso_texture_seed = s.at("torso_texture_seed");
    c.scene.background_color = s.at("background_color").get<std::array<float, 3>>();
    c.scene.motion_scale = s.at("motion_scale");
    c.scene.expression_scale = s.at("expression_scale");

    const auto& m = j.at("model");
    const auto& en = m.at("encoding");
    c.model.encoding.pos_deform = en.at("pos_deform");
    c.model.encoding.pos_field = en.at("pos_field");
    c.model.encoding.dir = en.at("dir");
    c.model.encoding.include_raw = en.at("include_raw");
    const auto& n = m.at("net");
    c.model.net_spec.trunk_layers = n.at("trunk_layers");
    c.model.net_spec.trunk_width = n.at("trunk_width");
    c.model.net_spec.head_layers = n.at("head_layers");
    c.model.net_spec.head_width = n.at("head_width");
    c.model.net_spec.feature_dim = n.at("feature_dim");
    c.model.net_spec.deform_layers = n.at("deform_layers");
    c.model.net_spec.deform_width = n.at("deform_width");
    c.model.net_spec.upsampler_width = n.at("upsampler_width");
    c.model.net_spec.upsample_factor = n.at("upsample_factor");
    const auto& d = m.at("dims");
    c.model.dims.id = d.at("id");
    c.model.dims.expr = d.at("expr");
    c.model.dims.ill = d.at("ill");
    c.model.dims.torso_w = d.at("torso_w");

    c.render.samples = j.at("render").at("samples");
    c.render.guide_halfwidth = j.at("render").at("guide_halfwidth");

    const auto& f = j.at("fit");
    c.fit.iters = f.at("iters");
    c.fit.learning_rate = f.at("learning_rate");
    c.fit.loss_alpha = f.at("loss_alpha");
    c.fit.eval_every = f.at("eval_every");
    c.fit.holdout_stride = f.at("holdout_stride");

    const auto& e = j.at("edit");
    c.edit.editor.instruction = e.at("instruction");
    c.edit.editor.s_T = e.at("s_T");
    c.edit.editor.s_I = e.at("s_I");
    c.edit.editor.t_min = e.at("t_min");
    c.edit.editor.t_max = e.at("t_max");
    c.edit.editor.denoise_steps = e.at("denoise_steps");
    c.edit.editor.region_lexicon.clear();
    for (const auto& pair : e.at("lexicon")) {
      if (!pair.is_array() || pair.size() != 2) throw ConfigError("config: edit.lexicon entries must be [keyword, mask]");
      c.edit.editor.region_lexicon.emplace_back(pair[0].get<std::string>(), pair[1].get<std::string>());
    }
    c.edit.iters = e.at("iters");
    c.edit.update_period = e.at("update_period");
    c.edit.eval_every = e.at("eval_every");
    c.edit.snapshot_every = e.at("snapshot_every");
    c.edit.learning_rate = e.at("learning_rate");
    c.edit.loss_alpha = e.at("loss_alpha");

    c.perceptual.seed = j.at("perceptual").at("seed");
    c.perceptual.layer_weights = j.at("perceptual").at("layer_weights").get<std::vector<double>>();

    c.toy_rules.clear();
    for (const auto& r : j.at("toy_editor").at("rules")) {
      HueRule rule;
      rule.keyword = r.at("keyword");
      rule.degrees = r.at("degrees");
      rule.region = r.value("region", "foreground");
      c.toy_rules.push_back(rule);
    }
  } catch (const json::exception& ex) {
    throw ConfigError(std::string("config: ") + ex.what());
  }

  // Semantic checks.
  const auto spec_bad = spec_violations(c.scene);
  if (!spec_bad.empty()) {
    std::string msg = "config: invalid scene:";
    for (const auto& b : spec_bad) msg += " " + b + ";";
    throw ConfigError(msg);
  }
  if (c.model.dims.expr != c.scene.expr_dim) {
    throw ConfigError("config: model.dims.expr (" + std::to_string(c.model.dims.expr) + ") must equal scene.expr_dim (" +
                      std::to_string(c.scene.expr_dim) + ")");
  }
  if (c.render.samples < 2) throw ConfigError("config: render.samples must be >= 2");
  if (!(c.render.guide_halfwidth > 0.0)) throw ConfigError("config: render.guide_halfwidth must be > 0");
  if (c.scene.image_size % c.model.net_spec.upsample_factor != 0) {
    throw ConfigError("config: scene.image_size must be divisible by model.net.upsample_factor");
  }
  for (const auto& r : c.toy_rules) {
    if (r.region != "foreground" && r.region != "all") {
      bool known = false;
      for (const char* name : kMaskNames) known = known || r.region == name;
      if (!known) throw ConfigError("config: toy rule region '" + r.region + "' is not a mask name");
    }
  }
  try {
    c.edit.editor.validate();
    check_lexicon(c.edit.editor.region_lexicon);
    c.fit_schedule().validate();
    c.edit_schedule().validate();
    c.perceptual_config().validate();
  } catch (const ValidationError& ex) {
    throw ConfigError(std::string("config: ") + ex.what());
  }
  return c;
}

json read_config_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingFileError("missing config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& ex) {
    throw ConfigError("cannot parse config " + path.string() + ": " + ex.what());
  }
  if (j.is_object() && j.contains("command") && j.contains("config")) return j.at("config");
  return j;
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json* node = &j;
  size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object()) throw ConfigError("override '" + key + "': '" + part + "' is not inside an object");
    if (dot == std::string::npos) {
      json value = json::parse(text, nullptr, false);
      if (value.is_discarded()) value = text;
      (*node)[part] = value;
      return;
    }
    if (!node->contains(part)) (*node)[part] = json::object();
    node = &(*node)[part];
    start = dot + 1;
  }
}

RunConfig resolve_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  json j = path.empty() ? json::object() : read_config_json(path);
  for (const auto& o : overrides) apply_override(j, o);
  return config_from_json(j);
}

uint64_t config_hash(const RunConfig& config) {
  Fnv1a h;
  h.update(to_json(config).dump());
  return h.digest();
}

}  // namespace avedit
