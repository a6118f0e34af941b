#include "avedit/error.hpp"
#include "avedit/fields.hpp"

#include <json.hpp>

#include <cstring>
#include <fstream>

namespace avedit {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'A', 'V', 'E', 'D', 'C', 'K', 'P', 'T'};
constexpr uint32_t kCheckpointVersion = 1;

json encoding_json(const EncodingConfig& e) {
  return {{"pos_deform", e.pos_deform}, {"pos_field", e.pos_field}, {"dir", e.dir}, {"include_raw", e.include_raw}};
}

EncodingConfig encoding_from(const json& j) {
  EncodingConfig e;
  e.pos_deform = j.at("pos_deform");
  e.pos_field = j.at("pos_field");
  e.dir = j.at("dir");
  e.include_raw = j.at("include_raw");
  return e;
}

json spec_json(const FieldNetSpec& s) {
  return {{"trunk_layers", s.trunk_layers},     {"trunk_width", s.trunk_width},
          {"head_layers", s.head_layers},       {"head_width", s.head_width},
          {"feature_dim", s.feature_dim},       {"deform_layers", s.deform_layers},
          {"deform_width", s.deform_width},     {"upsampler_width", s.upsampler_width},
          {"upsample_factor", s.upsample_factor}};
}

FieldNetSpec spec_from(const json& j) {
  FieldNetSpec s;
  s.trunk_layers = j.at("trunk_layers");
  s.trunk_width = j.at("trunk_width");
  s.head_layers = j.at("head_layers");
  s.head_width = j.at("head_width");
  s.feature_dim = j.at("feature_dim");
  s.deform_layers = j.at("deform_layers");
  s.deform_width = j.at("deform_width");
  s.upsampler_width = j.at("upsampler_width");
  s.upsample_factor = j.at("upsample_factor");
  return s;
}

json dims_json(const LatentDims& d) { return {{"id", d.id}, {"expr", d.expr}, {"ill", d.ill}, {"torso_w", d.torso_w}}; }

LatentDims dims_from(const json& j) {
  LatentDims d;
  d.id = j.at("id");
  d.expr = j.at("expr");
  d.ill = j.at("ill");
  d.torso_w = j.at("torso_w");
  return d;
}

void write_archive(const fs::path& path, json header, const torch::nn::Module& module) {
  json table = json::array();
  std::vector<torch::Tensor> payload;
  for (const auto& item : module.named_parameters(true)) {
    auto t = item.value().detach().to(torch::kFloat32).contiguous();
    table.push_back({{"name", item.key()}, {"shape", t.sizes().vec()}});
    payload.push_back(t);
  }
  header["format_version"] = kCheckpointVersion;
  header["tensors"] = table;
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out.write(kMagic, sizeof(kMagic));
  const uint32_t version = kCheckpointVersion;
  const uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(len));
  for (const auto& t : payload) {
    out.write(reinterpret_cast<const char*>(t.data_ptr<float>()), static_cast<std::streamsize>(t.numel() * 4));
  }
  if (!out) throw IoError("write failed: " + path.string());
}

struct Archive {
  json header;
  std::vector<std::pair<std::string, torch::Tensor>> tensors;
};

Archive read_archive(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingFileError("missing checkpoint: " + path.string());
  char magic[8];
  uint32_t version = 0;
  uint64_t len = 0;
  in.read(magic, sizeof(magic));
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw ManifestError("not a checkpoint: " + path.string());
  if (version != kCheckpointVersion) throw ManifestError("unsupported checkpoint version " + std::to_string(version));
  if (len > (1u << 26)) throw ManifestError("checkpoint header too large");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  Archive a;
  try {
    a.header = json::parse(text);
    for (const auto& entry : a.header.at("tensors")) {
      auto shape = entry.at("shape").get<std::vector<int64_t>>();
      auto t = torch::empty(shape, torch::kFloat32);
      in.read(reinterpret_cast<char*>(t.data_ptr<float>()), static_cast<std::streamsize>(t.numel() * 4));
      a.tensors.emplace_back(entry.at("name").get<std::string>(), t);
    }
  } catch (const json::exception& e) {
    throw ManifestError("malformed checkpoint header in " + path.string() + ": " + e.what());
  }
  if (!in) throw ManifestError("truncated checkpoint: " + path.string());
  return a;
}

void assign_parameters(torch::nn::Module& module, const Archive& a, const fs::path& path) {
  auto params = module.named_parameters(true);
  if (params.size() != a.tensors.size()) throw ManifestError("parameter count mismatch in " + path.string());
  torch::NoGradGuard ng;
  for (const auto& [name, t] : a.tensors) {
    auto* p = params.find(name);
    if (!p) throw ManifestError("unknown parameter '" + name + "' in " + path.string());
    if (!p->sizes().equals(t.sizes())) throw ManifestError("shape mismatch for '" + name + "' in " + path.string());
    p->copy_(t);
  }
}

}  // namespace

void save_checkpoint(const fs::path& path, PortraitModel& model) {
  json header = {{"kind", "portrait_model"},
                 {"region", to_string(model->region())},
                 {"encoding", encoding_json(model->encoding())},
                 {"net_spec", spec_json(model->net_spec())},
                 {"dims", dims_json(model->dims())}};
  write_archive(path, std::move(header), *model);
}

PortraitModel load_checkpoint(const fs::path& path) {
  const Archive a = read_archive(path);
  PortraitModel model{nullptr};
  try {
    if (a.header.at("kind") != "portrait_model") throw ManifestError(path.string() + " is not a portrait model");
    model = PortraitModel(region_from_string(a.header.at("region")), encoding_from(a.header.at("encoding")),
                          spec_from(a.header.at("net_spec")), dims_from(a.header.at("dims")));
  } catch (const json::exception& e) {
    throw ManifestError("malformed checkpoint header in " + path.string() + ": " + e.what());
  }
  assign_parameters(*model, a, path);
  return model;
}

void save_subject_codes(const fs::path& path, SubjectCodes& codes) {
  write_archive(path, {{"kind", "subject_codes"}}, *codes);
}

SubjectCodes load_subject_codes(const fs::path& path) {
  const Archive a = read_archive(path);
  if (a.header.value("kind", "") != "subject_codes") throw ManifestError(path.string() + " is not a subject code archive");
  int64_t id = -1, ill = -1;
  for (const auto& [name, t] : a.tensors) {
    if (name == "z_id") id = t.numel();
    if (name == "z_ill") ill = t.numel();
  }
  if (id < 0 || ill < 0) throw ManifestError("subject code archive lacks z_id/z_ill");
  SubjectCodes codes(static_cast<int>(id), static_cast<int>(ill));
  assign_parameters(*codes, a, path);
  return codes;
}

}  // namespace avedit
