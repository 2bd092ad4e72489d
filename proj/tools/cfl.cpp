// Command-line front end. Exit code 1 means a usage or config error; 2 means
// the command itself failed.

#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cfl/commands.hpp"

namespace {

using namespace cfl;
namespace fs = std::filesystem;

struct GlobalOptions {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string output_root;
};

RunConfig resolve_config(const GlobalOptions& g) {
  RunConfig cfg = g.config_path.empty() ? RunConfig{} : load_config(g.config_path);
  for (const auto& kv : g.overrides) apply_setting(cfg, kv);
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return cfg;
}

fs::path output_root(const GlobalOptions& g) {
  if (!g.output_root.empty()) return g.output_root;
  if (const char* env = std::getenv("CFL_OUTPUT_ROOT"); env && *env) return env;
  return ".";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Open-set semi-supervised toy detector"};
  app.require_subcommand(1);
  GlobalOptions g;
  app.add_option("-c,--config", g.config_path, "key=value config file")->check(CLI::ExistingFile);
  app.add_option("-s,--set", g.overrides, "override one config key (key=value); repeatable, wins over the file");
  app.add_option("-o,--output-root", g.output_root, "root for run directories (default: $CFL_OUTPUT_ROOT or .)");

  bool force = false;
  auto* mk = app.add_subcommand("make-splits", "render the labeled, unlabeled and test splits");
  mk->add_flag("--force", force, "rebuild an existing split directory");

  std::string stage = "both";
  auto* tr = app.add_subcommand("train", "run training stage 1, stage 2 or both");
  tr->add_option("--stage", stage, "1, 2 or both")->check(CLI::IsMember({"1", "2", "both"}));

  std::string split = "test", net = "teacher", checkpoint;
  int max_images = -1;
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint and render annotated images");
  ev->add_option("--split", split, "test or unlabeled-diagnostic")->check(CLI::IsMember({"test", "unlabeled-diagnostic"}));
  ev->add_option("--net", net, "teacher or student")->check(CLI::IsMember({"teacher", "student"}));
  ev->add_option("--checkpoint", checkpoint, "checkpoint file (default: latest stage checkpoint of the run)");
  ev->add_option("--max-images", max_images, "annotated images to write (-1: all, 0: none)");

  auto* ab = app.add_subcommand("ablate", "train and evaluate the fc x uc component grid");
  auto* rp = app.add_subcommand("report", "render loss curves and the ablation table to PNG");
  auto* sc = app.add_subcommand("config", "print the resolved configuration");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    const RunConfig cfg = resolve_config(g);
    const cmd::RunPaths paths = cmd::run_paths(output_root(g), cfg);
    if (*sc) {
      std::cout << to_text(cfg);
    } else if (*mk) {
      cmd::make_splits(cfg, paths, force, std::cout);
    } else if (*tr) {
      const auto st = stage == "1" ? cmd::Stage::One : stage == "2" ? cmd::Stage::Two : cmd::Stage::Both;
      cmd::train(cfg, paths, st, std::cout);
    } else if (*ev) {
      const auto s = split == "test" ? cmd::EvalSplit::Test : cmd::EvalSplit::UnlabeledDiagnostic;
      const auto n = net == "teacher" ? cmd::Net::Teacher : cmd::Net::Student;
      const fs::path ck = checkpoint.empty() ? cmd::default_checkpoint(paths) : fs::path(checkpoint);
      const auto rep = cmd::evaluate(cfg, paths, ck, s, n, max_images, paths.eval_dir(s, n), std::cout);
      std::cout << "results in " << rep.dir.string() << "\n";
    } else if (*ab) {
      cmd::ablate(cfg, paths, std::cout);
    } else if (*rp) {
      cmd::report(paths, std::cout);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
