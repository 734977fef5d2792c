// pmmrec command-line driver: one subcommand per pipeline phase.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "pmmrec/config.hpp"
#include "pmmrec/data.hpp"
#include "pmmrec/eval.hpp"
#include "pmmrec/gradcheck_suite.hpp"
#include "pmmrec/synthetic.hpp"
#include "pmmrec/training.hpp"
#include "pmmrec/transfer.hpp"

extern char** environ;

namespace fs = std::filesystem;
using namespace pmmrec;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

fs::path out_path(const RunConfig& c, const std::string& name) { return fs::path(c.out_dir) / name; }

void prepare_out_dir(const RunConfig& c) {
  std::error_code ec;
  fs::create_directories(c.out_dir, ec);
  if (ec) throw std::runtime_error("cannot create out_dir " + c.out_dir + ": " + ec.message());
  std::ofstream os(out_path(c, "resolved_config.txt"));
  if (!os) throw std::runtime_error("cannot write " + out_path(c, "resolved_config.txt").string());
  os << dump_config(c);
}

void require_key(const std::string& value, const std::string& key) {
  if (value.empty()) throw ConfigError("config key '" + key + "' must be set for this command");
}

Dataset load_input(const RunConfig& c) {
  require_key(c.items, "items");
  require_key(c.interactions, "interactions");
  return load_dataset(c.items, c.interactions);
}

SplitDataset load_split(const RunConfig& c) {
  SplitDataset split = filter_and_split(load_input(c), c.min_interactions);
  if (split.users.empty()) {
    throw DataError(c.interactions + ": no users left after filtering at min_interactions=" +
                    std::to_string(c.min_interactions));
  }
  return split;
}

EvalOptions eval_options(const RunConfig& c) {
  EvalOptions o;
  o.batch = c.eval_batch;
  o.threads = c.train.threads;
  o.exclude_history = c.exclude_history;
  return o;
}

std::string dataset_name(const RunConfig& c) { return fs::path(c.interactions).stem().string(); }

std::string mode_label(const RunConfig& c) {
  return c.from_scratch ? "scratch" : std::string(to_string(c.mode));
}

int cmd_gen_data(const RunConfig& c) {
  const SyntheticData data = generate_synthetic(c.synthetic);
  write_dataset(data.source, out_path(c, "source_items.tsv").string(),
                out_path(c, "source_interactions.tsv").string());
  write_dataset(data.target, out_path(c, "target_items.tsv").string(),
                out_path(c, "target_interactions.tsv").string());
  std::cout << format_stats({{"source", dataset_stats(data.source)},
                             {"target", dataset_stats(data.target)}});
  return kExitOk;
}

int cmd_pretrain(const RunConfig& c) {
  const SplitDataset split = load_split(c);
  std::ofstream log(out_path(c, "pretrain_log.jsonl"));
  const TrainResult r = pretrain(c.model, split, c.train, jsonl_sink(log));
  write_bundle(r.best, out_path(c, "pretrained.ckpt").string());
  std::cout << "pretrain: best epoch " << r.best_epoch << ", valid HR@10 " << r.best_hr10 << "\n";
  return kExitOk;
}

int cmd_finetune(const RunConfig& c) {
  const SplitDataset split = load_split(c);
  std::ofstream log(out_path(c, "finetune_log.jsonl"));
  TrainResult r;
  if (c.from_scratch) {
    r = train_from_scratch(split, c.train, c.model, jsonl_sink(log));
  } else {
    require_key(c.bundle, "bundle");
    const CheckpointBundle bundle = read_bundle(c.bundle);
    r = finetune(bundle, c.mode, split, c.train, bundle.config, jsonl_sink(log));
  }
  write_bundle(r.best, out_path(c, "finetuned.ckpt").string());
  std::cout << "finetune (" << mode_label(c) << "): best epoch " << r.best_epoch
            << ", valid HR@10 " << r.best_hr10 << "\n";
  return kExitOk;
}

int cmd_evaluate(const RunConfig& c) {
  require_key(c.bundle, "bundle");
  const SplitDataset split = load_split(c);
  Model model = load_model(read_bundle(c.bundle));
  MetricsReport r = evaluate(model, split, c.phase == "valid" ? EvalPhase::valid : EvalPhase::test,
                             eval_options(c));
  r.dataset = dataset_name(c);
  r.mode = mode_label(c);
  std::ofstream(out_path(c, "metrics.jsonl")) << r.json().dump() << '\n';
  std::cout << r.table();
  return kExitOk;
}

int cmd_cold_eval(const RunConfig& c) {
  require_key(c.bundle, "bundle");
  const SplitDataset split = load_split(c);
  Model model = load_model(read_bundle(c.bundle));
  MetricsReport m = evaluate_cold_start(model, split, c.cold_threshold, eval_options(c));
  m.dataset = dataset_name(c);
  m.mode = mode_label(c);
  MetricsReport base = evaluate_cold_start(random_scorer(split.catalog.size(), c.seed), split,
                                           c.cold_threshold, eval_options(c));
  base.dataset = dataset_name(c);
  base.mode = "random";
  std::ofstream os(out_path(c, "cold_metrics.jsonl"));
  os << m.json().dump() << '\n' << base.json().dump() << '\n';
  std::cout << m.table() << base.table();
  return kExitOk;
}

int cmd_grad_check(const RunConfig& c) {
  const auto results = run_gradcheck_suite(c.gradcheck_step, c.gradcheck_tol, c.seed);
  std::ofstream os(out_path(c, "gradcheck.jsonl"));
  bool ok = true;
  for (const auto& r : results) {
    ok = ok && r.report.passed();
    nlohmann::json j{{"objective", r.objective},
                     {"passed", r.report.passed()},
                     {"max_relative_error", r.report.max_relative_error()},
                     {"tolerance", c.gradcheck_tol},
                     {"seconds", r.seconds}};
    os << j.dump() << '\n';
    std::cout << (r.report.passed() ? "PASS " : "FAIL ") << r.objective
              << " max_rel_err=" << r.report.max_relative_error() << '\n';
    for (const auto& e : r.report.entries)
      if (!e.passed) std::cout << "  " << e.name << " max_rel_err=" << e.max_relative_error << '\n';
  }
  return ok ? kExitOk : kExitRuntime;
}

int cmd_stats(const RunConfig& c) {
  const Dataset ds = load_input(c);
  const std::string name = dataset_name(c);
  const SplitDataset split = filter_and_split(ds, c.min_interactions);
  std::cout << format_stats({{name, dataset_stats(ds)}, {name + "*", dataset_stats(split.merged())}});
  std::cout << "(* after filtering at min_interactions=" << c.min_interactions << ")\n";
  return kExitOk;
}

int cmd_describe(const RunConfig& c) {
  require_key(c.bundle, "bundle");
  std::cout << describe_bundle(read_bundle(c.bundle));
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pmmrec: multi-modal sequential recommendation with transferable pre-training"};
  app.require_subcommand(1);
  std::string config_file;
  std::vector<std::string> overrides;

  struct Command {
    const char* name;
    const char* help;
    int (*run)(const RunConfig&);
  };
  const std::vector<Command> commands = {
      {"gen-data", "write synthetic source and target datasets to out_dir", cmd_gen_data},
      {"pretrain", "multi-task pre-training on items/interactions", cmd_pretrain},
      {"finetune", "fine-tune a bundle under a transfer mode (or from_scratch=true)", cmd_finetune},
      {"evaluate", "leave-one-out HR/NDCG of a bundle", cmd_evaluate},
      {"cold-eval", "cold-start item evaluation against a random baseline", cmd_cold_eval},
      {"grad-check", "finite-difference check of every objective", cmd_grad_check},
      {"stats", "dataset summary table", cmd_stats},
      {"describe", "print the groups and tensors of a bundle", cmd_describe},
  };
  std::vector<std::pair<CLI::App*, const Command*>> subs;
  for (const auto& cmd : commands) {
    CLI::App* sub = app.add_subcommand(cmd.name, cmd.help);
    sub->add_option("-c,--config", config_file, "key = value configuration file");
    sub->add_option("overrides", overrides, "key=value pairs overriding the file");
    subs.emplace_back(sub, &cmd);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    RunConfig cfg = parse_config(config_file, overrides, environment_overrides(environ));
    for (const auto& [sub, cmd] : subs) {
      if (!sub->parsed()) continue;
      if (std::string(cmd->name) != "describe" && std::string(cmd->name) != "stats") {
        prepare_out_dir(cfg);
      }
      return cmd->run(cfg);
    }
    return kExitValidation;
  } catch (const CheckpointError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::invalid_argument& e) {
    // ConfigError, DataError, TransferError and other bad inputs.
    std::cerr << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "runtime failure: " << e.what() << '\n';
    return kExitRuntime;
  }
}
