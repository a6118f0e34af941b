// avedit: synth / fit / edit / drive / eval / render for toy portrait sequences.

#include "avedit/error.hpp"
#include "avedit/pipeline.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <iostream>
#include <optional>

namespace {

struct CommonFlags {
  std::string config;
  std::optional<uint64_t> seed;
  std::string editor = "toy";
  std::string out = "run";
  std::vector<std::string> sets;
};

std::optional<std::filesystem::path> opt_path(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return std::filesystem::path(s);
}

void print_error(const std::string& kind, const std::string& message) {
  std::cerr << nlohmann::json{{"error", {{"kind", kind}, {"message", message}}}}.dump() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  torch::set_num_threads(1);

  CLI::App app{"Expression-conditioned portrait fields with iterative dataset-update editing"};
  app.require_subcommand(1);
  CommonFlags flags;
  app.add_option("--config", flags.config, "JSON config file (a run manifest also works)");
  app.add_option("--seed", flags.seed, "Seed overriding the config's seed");
  app.add_option("--editor", flags.editor, "Editing backend")->check(CLI::IsMember({"toy", "external"}));
  app.add_option("--out", flags.out, "Run directory");
  app.add_option("--set", flags.sets, "Config override key=value (repeatable)");

  std::string dataset, checkpoint, reference, frames_dir, prompt, instruction;
  std::vector<int> frames;

  auto* synth = app.add_subcommand("synth", "Generate a synthetic portrait dataset");
  auto* fit = app.add_subcommand("fit", "Reconstruct head and torso models");
  fit->add_option("--dataset", dataset, "Dataset directory (default OUT/dataset)");
  auto* edit = app.add_subcommand("edit", "Edit the reconstruction with an instruction");
  edit->add_option("--instruction", instruction, "Edit instruction (overrides edit.instruction)");
  edit->add_option("--checkpoint", checkpoint, "Reconstruction checkpoint (default OUT/fit/models)");
  edit->add_option("--dataset", dataset, "Dataset directory (default OUT/dataset)");
  auto* drive = app.add_subcommand("drive", "Render under a reference sequence's codes and poses");
  drive->add_option("--reference", reference, "Directory holding codes/*.json")->required();
  drive->add_option("--checkpoint", checkpoint, "Checkpoint (default OUT/edit/models)");
  drive->add_option("--dataset", dataset, "Dataset for intrinsics (default OUT/dataset)");
  auto* eval = app.add_subcommand("eval", "Consistency and text-alignment metrics for a frame sequence");
  eval->add_option("--frames", frames_dir, "Directory of PNG frames (default OUT/edit/renders)");
  eval->add_option("--prompt", prompt, "Prompt for text alignment (default edit.instruction)");
  auto* render = app.add_subcommand("render", "Render dataset frames from a checkpoint");
  render->add_option("--frames", frames, "Frame indices (default: held-out frames)")->delimiter(',');
  render->add_option("--checkpoint", checkpoint, "Checkpoint (default OUT/fit/models)");
  render->add_option("--dataset", dataset, "Dataset directory (default OUT/dataset)");
  for (auto* sub : {synth, fit, edit, drive, eval, render}) sub->fallthrough();

  CLI11_PARSE(app, argc, argv);

  try {
    auto overrides = flags.sets;
    if (flags.seed) overrides.push_back("seed=" + std::to_string(*flags.seed));
    if (!instruction.empty()) overrides.push_back("edit.instruction=" + nlohmann::json(instruction).dump());

    avedit::RunContext ctx;
    ctx.config = avedit::resolve_config(flags.config, overrides);
    ctx.editor = avedit::editor_kind_from_string(flags.editor);
    ctx.out = flags.out;

    nlohmann::json summary;
    if (*synth) {
      summary = avedit::cmd_synth(ctx);
    } else if (*fit) {
      summary = avedit::cmd_fit(ctx, opt_path(dataset));
    } else if (*edit) {
      summary = avedit::cmd_edit(ctx, opt_path(checkpoint), opt_path(dataset));
    } else if (*drive) {
      summary = avedit::cmd_drive(ctx, reference, opt_path(checkpoint), opt_path(dataset));
    } else if (*eval) {
      summary = avedit::cmd_eval(ctx, opt_path(frames_dir),
                                 prompt.empty() ? std::nullopt : std::optional<std::string>(prompt));
    } else if (*render) {
      summary = avedit::cmd_render(ctx, frames, opt_path(checkpoint), opt_path(dataset));
    }
    std::cout << summary.dump(2) << "\n";
    return 0;
  } catch (const avedit::Error& e) {
    print_error(e.kind(), e.what());
    return 2;
  } catch (const std::exception& e) {
    print_error("internal", e.what());
    return 1;
  }
}
