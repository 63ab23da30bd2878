// Command-line surface: collect scripted demos, run the two training
// stages, evaluate checkpoints, run the four-configuration ablation, and
// export fusion-weight traces. Exit code 0 on success; any acdit error
// prints a message to stderr and exits nonzero.
#include <malloc.h>

#include <cstdio>
#include <exception>
#include <fstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "acdit/dataset.hpp"
#include "acdit/eval.hpp"
#include "acdit/training.hpp"

namespace {

// The pipeline runs in 32-bit floats; checkpoints are dtype-tagged, so
// everything written and read by this tool stays consistent.
using Real = float;

std::vector<acdit::Task> parse_tasks(const std::string& csv) {
  std::vector<acdit::Task> tasks;
  size_t start = 0;
  while (start <= csv.size()) {
    size_t comma = csv.find(',', start);
    if (comma == std::string::npos) comma = csv.size();
    std::string name = csv.substr(start, comma - start);
    if (!name.empty()) tasks.push_back(acdit::task_from_name(name));
    start = comma + 1;
  }
  if (tasks.empty()) throw acdit::ConfigError("eval: no tasks given");
  return tasks;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw acdit::FormatError("cannot write " + path);
  os << text;
  if (!os) throw acdit::FormatError("write failed for " + path);
}

int run(int argc, char** argv) {
  CLI::App app{"conditional-diffusion mobile-manipulation policy toolkit"};
  app.require_subcommand(1);

  // collect ----------------------------------------------------------------
  auto* collect = app.add_subcommand("collect", "record scripted demonstrations");
  std::string collect_task = "navigate_pick";
  int collect_episodes = 200;
  uint64_t collect_seed = 0;
  std::string collect_out;
  collect->add_option("--task", collect_task, "task name");
  collect->add_option("--episodes", collect_episodes, "number of episodes");
  collect->add_option("--seed", collect_seed, "first episode seed");
  collect->add_option("--out", collect_out, "dataset output path")->required();

  // train --------------------------------------------------------------
  auto* train_cmd = app.add_subcommand("train", "run one training stage");
  std::string train_config;
  int train_stage = 0;  // 0 -> use the config file's stage
  std::string train_out;
  train_cmd->add_option("--config", train_config, "key=value config file")->required();
  train_cmd->add_option("--stage", train_stage, "override config stage (1 or 2)");
  train_cmd->add_option("--out", train_out, "override checkpoint output path");

  // eval ---------------------------------------------------------------
  auto* eval_cmd = app.add_subcommand("eval", "closed-loop success-rate evaluation");
  std::string eval_ckpt, eval_tasks = "navigate_pick", eval_out;
  int eval_episodes = 50, eval_repeats = 3, eval_stride = 1;
  uint64_t eval_seed_base = acdit::kEvalSeedBase;
  eval_cmd->add_option("--checkpoint", eval_ckpt, "model checkpoint")->required();
  eval_cmd->add_option("--tasks", eval_tasks, "comma-separated task names");
  eval_cmd->add_option("--episodes", eval_episodes, "episodes per repeat");
  eval_cmd->add_option("--repeats", eval_repeats, "independent repeats");
  eval_cmd->add_option("--stride", eval_stride, "actions executed per prediction");
  eval_cmd->add_option("--seed-base", eval_seed_base, "first episode seed");
  eval_cmd->add_option("--out", eval_out, "report CSV output path");

  // ablate -------------------------------------------------------------
  auto* ablate_cmd = app.add_subcommand("ablate", "train and score the four configurations");
  std::string ablate_config, ablate_out;
  ablate_cmd->add_option("--config", ablate_config, "key=value config file")->required();
  ablate_cmd->add_option("--out", ablate_out, "table CSV output path")->required();

  // inspect-weights -----------------------------------------------------
  auto* inspect = app.add_subcommand("inspect-weights", "export per-step fusion weights");
  std::string inspect_ckpt, inspect_task = "navigate_pick", inspect_out;
  uint64_t inspect_seed = acdit::kEvalSeedBase;
  int inspect_stride = 1;
  inspect->add_option("--checkpoint", inspect_ckpt, "model checkpoint")->required();
  inspect->add_option("--task", inspect_task, "task name");
  inspect->add_option("--seed", inspect_seed, "episode seed");
  inspect->add_option("--stride", inspect_stride, "actions executed per prediction");
  inspect->add_option("--out", inspect_out, "trace CSV output path")->required();

  CLI11_PARSE(app, argc, argv);

  if (*collect) {
    acdit::Task task = acdit::task_from_name(collect_task);
    acdit::Dataset ds = acdit::collect_demos(task, collect_episodes, collect_seed);
    acdit::save_dataset(ds, collect_out);
    std::printf("wrote %zu trajectories to %s\n", ds.trajs.size(), collect_out.c_str());
  } else if (*train_cmd) {
    acdit::TrainConfig tc = acdit::load_train_config(train_config);
    if (train_stage != 0) tc.stage = train_stage;
    if (!train_out.empty()) tc.out = train_out;
    acdit::TrainResult res = acdit::train<Real>(tc);
    std::printf("stage %d: %d steps, loss %.6g -> %.6g, checkpoint %s\n",
                tc.stage, res.steps_run, res.first_loss, res.final_loss,
                res.checkpoint_path.c_str());
  } else if (*eval_cmd) {
    acdit::EvalReport rep = acdit::evaluate<Real>(
        eval_ckpt, parse_tasks(eval_tasks), eval_episodes, eval_repeats, {},
        eval_stride, eval_seed_base);
    std::string csv = rep.to_csv();
    if (!eval_out.empty()) write_text(eval_out, csv);
    std::fputs(csv.c_str(), stdout);
    std::printf("checkpoint fnv1a %016llx\n",
                static_cast<unsigned long long>(rep.config_hash));
  } else if (*ablate_cmd) {
    acdit::AblateConfig ac = acdit::load_ablate_config(ablate_config);
    ac.out = ablate_out;
    std::vector<acdit::AblateRow> rows = acdit::ablate<Real>(ac);
    std::string csv = acdit::ablate_csv(rows);
    write_text(ablate_out, csv);
    std::fputs(csv.c_str(), stdout);
  } else if (*inspect) {
    acdit::Task task = acdit::task_from_name(inspect_task);
    acdit::WeightInspection wi = acdit::inspect_weights<Real>(
        inspect_ckpt, task, inspect_seed, inspect_out, {}, inspect_stride);
    std::printf("%s\n", wi.summary.c_str());
    std::printf("trace written to %s\n", inspect_out.c_str());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  // Keep large training buffers off mmap so freed memory is reused in place;
  // per-step allocation patterns then stay identical across steps.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_MMAP_MAX, 0);
  try {
    return run(argc, argv);
  } catch (const acdit::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
