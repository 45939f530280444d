// occmem: gen / train / eval / viz / config
// exit codes: 0 ok, 1 usage or config error, 2 data error, 3 numeric failure

#include <CLI11.hpp>

#include <iostream>
#include <sstream>

#include "occmem/app/commands.hpp"

using namespace occmem;
namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::vector<std::pair<std::string, std::string>> flags;  // key, value

  void add_to(CLI::App* cmd) {
    cmd->add_option("-c,--config", config, "key = value config file");
    cmd->add_option("--set", sets, "override one key, KEY=VALUE (repeatable)");
  }
  // flag -> config key, recorded only when given
  void map(CLI::App* cmd, const std::string& flag, const std::string& key, const std::string& help) {
    cmd->add_option_function<std::string>(
        flag, [this, key](const std::string& v) { flags.emplace_back(key, v); }, help);
  }

  io::RunConfig resolve() const {
    std::vector<io::Assignment> a;
    if (!config.empty()) a = io::parse_config_file(config);
    for (const auto& [k, v] : flags) a.push_back({k, v, "command line"});
    for (const auto& s : sets) a.push_back(io::parse_assignment(s, "--set " + s));
    return io::resolve_config(a);
  }
};

std::vector<fs::path> split_list(const std::string& s, const std::string& runs) {
  std::vector<fs::path> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    fs::path p = item;
    if (!fs::exists(p) && !runs.empty()) p = fs::path(runs) / item;
    if (fs::is_directory(p)) p /= app::kWeights;
    if (!fs::exists(p)) throw DataError("no weights for '" + item + "' (tried '" + p.string() + "')");
    out.push_back(p);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Occlusion-aware video object detection with spatio-temporal memory"};
  app.set_version_flag("--version", std::string("occmem ") + app::kVersion);
  app.require_subcommand(1);

  Common gen_c, train_c, eval_c, viz_c, cfg_c;

  app::GenOptions gen_o;
  auto* gen = app.add_subcommand("gen", "generate a synthetic occlusion dataset");
  gen_c.add_to(gen);
  gen->add_option("-o,--out", gen_o.out, "dataset directory")->required();
  gen->add_flag("--force", gen_o.force, "overwrite a non-empty output directory");
  gen_c.map(gen, "--seed", "seed", "master seed");
  gen_c.map(gen, "--preset", "preset", "staged or assembly");

  app::TrainOptions train_o;
  std::string init_path;
  auto* train = app.add_subcommand("train", "pretrain a frame detector, then fine-tune on video");
  train_c.add_to(train);
  train->add_option("-d,--data", train_o.data, "dataset directory")->required();
  train->add_option("-o,--out", train_o.out, "run directory")->required();
  train->add_flag("--resume", train_o.resume, "continue from the run directory's checkpoint");
  train->add_flag("--force", train_o.force, "clear a non-empty run directory");
  train->add_flag("--from-scratch", train_o.from_scratch, "skip pretraining; random init");
  train->add_option("--init", init_path, "frame-detector archive to fine-tune from (skips pretraining)");
  train->add_option("--stop-after", train_o.stop_after, "checkpoint and stop after this many updates");
  train_c.map(train, "--seed", "seed", "master seed");
  train_c.map(train, "--cell", "model.cell", "none, stmm, matchtrans, learned_align");
  train_c.map(train, "--direction", "model.direction", "forward or bidirectional");
  train_c.map(train, "--bptt", "train.bptt", "unrolled frames per update");
  train_c.map(train, "--steps", "train.steps", "video fine-tuning updates");
  train_c.map(train, "--pretrain-steps", "pretrain.steps", "frame-level pretraining updates");

  app::EvalCmdOptions eval_o;
  auto* ev = app.add_subcommand("eval", "evaluate weights on a dataset split");
  eval_c.add_to(ev);
  ev->add_option("-w,--weights", eval_o.weights, "weight archive")->required();
  ev->add_option("-d,--data", eval_o.data, "dataset directory")->required();
  ev->add_option("-o,--out", eval_o.report, "report JSON path")->required();
  eval_c.map(ev, "--split", "eval.split", "train or test");

  app::VizOptions viz_o;
  std::string weights, compare, runs;
  auto* viz = app.add_subcommand("viz", "write detection overlays, memory heatmaps and strips");
  viz_c.add_to(viz);
  viz->add_option("-w,--weights", weights, "weight archive");
  viz->add_option("--compare", compare, "comma-separated archives or run names (see --runs)");
  viz->add_option("--runs", runs, "directory holding <name>/weights.occw for --compare");
  viz->add_option("-d,--data", viz_o.data, "dataset directory")->required();
  viz->add_option("-o,--out", viz_o.out, "output directory")->required();
  viz->add_option("-s,--sequence", viz_o.sequence, "sequence index within the split");
  viz->add_option("--first", viz_o.first, "first frame");
  viz->add_option("--count", viz_o.count, "number of frames (default: to the end)");
  viz_c.map(viz, "--split", "eval.split", "train or test");

  auto* cfg = app.add_subcommand("config", "print the resolved config (or the key reference)");
  cfg_c.add_to(cfg);
  bool keys = false;
  cfg->add_flag("--keys", keys, "list every key with its description");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*gen) return app::cmd_gen(gen_c.resolve(), gen_o);
    if (*train) {
      if (!init_path.empty()) train_o.init = init_path;
      return app::cmd_train(train_c.resolve(), train_o);
    }
    if (*ev) return app::cmd_eval(eval_c.resolve(), eval_o);
    if (*viz) {
      if (!weights.empty() && !compare.empty()) throw ContractError("use either --weights or --compare");
      viz_o.weights = compare.empty() ? split_list(weights, "") : split_list(compare, runs);
      return app::cmd_viz(viz_c.resolve(), viz_o);
    }
    if (*cfg) {
      if (keys) {
        for (const auto& k : io::config_keys())
          std::printf("%-26s %s\n", k.name.c_str(), k.doc.c_str());
      } else {
        std::fputs(io::resolved_text(cfg_c.resolve()).c_str(), stdout);
      }
      return 0;
    }
  } catch (const ContractError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
