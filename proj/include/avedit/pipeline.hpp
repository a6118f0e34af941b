#pragma once

#include "avedit/config.hpp"
#include "avedit/editor.hpp"

#include <json.hpp>

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace avedit {

inline constexpr const char* kVersion = "0.1.0";

enum class EditorKind { Toy, External };
EditorKind editor_kind_from_string(const std::string& s);
std::string to_string(EditorKind k);

// Shared inputs of every command. Output layout below `out`:
//   dataset/                      synth
//   fit/{models,log.jsonl,report.json,manifest.json}
//   edit/{models,dataset,renders,snapshots,log.jsonl,report.json,manifest.json}
//   drive/{frames,manifest.json}  render/{NNNNN.png,report.json,manifest.json}
//   eval/{report.json,manifest.json}
struct RunContext {
  RunConfig config;
  EditorKind editor = EditorKind::Toy;
  std::filesystem::path out;
};

// Builds the denoiser for `kind`. External reads its address from the
// AVEDIT_EDITOR_SOCKET environment variable.
std::unique_ptr<Denoiser> make_denoiser(EditorKind kind, const RunConfig& config);

// Each command returns a JSON summary and writes a manifest recording the
// resolved config, its hash, the seed and the code version.
nlohmann::json cmd_synth(const RunContext& ctx);
nlohmann::json cmd_fit(const RunContext& ctx, const std::optional<std::filesystem::path>& dataset = std::nullopt);
nlohmann::json cmd_edit(const RunContext& ctx, const std::optional<std::filesystem::path>& checkpoint = std::nullopt,
                        const std::optional<std::filesystem::path>& dataset = std::nullopt);
nlohmann::json cmd_drive(const RunContext& ctx, const std::filesystem::path& reference,
                         const std::optional<std::filesystem::path>& checkpoint = std::nullopt,
                         const std::optional<std::filesystem::path>& dataset = std::nullopt);
nlohmann::json cmd_eval(const RunContext& ctx, const std::optional<std::filesystem::path>& frames = std::nullopt,
                        const std::optional<std::string>& prompt = std::nullopt);
nlohmann::json cmd_render(const RunContext& ctx, const std::vector<int>& frames,
                          const std::optional<std::filesystem::path>& checkpoint = std::nullopt,
                          const std::optional<std::filesystem::path>& dataset = std::nullopt);

// Numbered PNGs in `dir`, sorted by name.
std::vector<torch::Tensor> read_frame_dir(const std::filesystem::path& dir);
void write_frame_dir(const std::filesystem::path& dir, const std::vector<torch::Tensor>& frames);

}  // namespace avedit
