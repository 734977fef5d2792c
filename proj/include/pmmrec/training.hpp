#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "pmmrec/data.hpp"
#include "pmmrec/eval.hpp"
#include "pmmrec/objectives.hpp"
#include "pmmrec/optimizer.hpp"
#include "pmmrec/transfer.hpp"

namespace pmmrec {

/// Parses a comma-separated objective set such as "dap,nicl,nid,rcl".
/// At most one of vcl / icl / nicl may appear.
inline ObjectiveConfig parse_objectives(const std::string& list, ObjectiveConfig base = {}) {
  base.dap = base.nid = base.rcl = false;
  base.contrastive = ContrastiveVariant::none;
  std::stringstream ss(list);
  std::string name;
  bool any = false;
  while (std::getline(ss, name, ',')) {
    name.erase(0, name.find_first_not_of(" \t"));
    name.erase(name.find_last_not_of(" \t") + 1);
    if (name.empty()) continue;
    std::transform(name.begin(), name.end(), name.begin(), ::tolower);
    any = true;
    ContrastiveVariant v = ContrastiveVariant::none;
    if (name == "dap") base.dap = true;
    else if (name == "nid") base.nid = true;
    else if (name == "rcl") base.rcl = true;
    else if (name == "vcl") v = ContrastiveVariant::vcl;
    else if (name == "icl") v = ContrastiveVariant::icl;
    else if (name == "nicl") v = ContrastiveVariant::nicl;
    else throw std::invalid_argument("unknown objective '" + name + "'");
    if (v != ContrastiveVariant::none) {
      if (base.contrastive != ContrastiveVariant::none) {
        throw std::invalid_argument("objectives: only one of vcl, icl, nicl may be enabled");
      }
      base.contrastive = v;
    }
  }
  if (!any) throw std::invalid_argument("objectives: empty objective set");
  return base;
}

inline std::string objectives_string(const ObjectiveConfig& c) {
  std::vector<std::string> parts;
  if (c.dap) parts.push_back("dap");
  if (c.contrastive != ContrastiveVariant::none) parts.emplace_back(to_string(c.contrastive));
  if (c.nid) parts.push_back("nid");
  if (c.rcl) parts.push_back("rcl");
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) out += (i ? "," : "") + parts[i];
  return out;
}

struct TrainConfig {
  AdamWConfig optimizer;
  std::size_t max_epochs = 500;
  std::size_t patience = 10;
  std::size_t batch_size = 16;
  std::size_t max_len = 20;
  std::uint64_t seed = 1;
  ObjectiveConfig objectives;
  std::size_t trainable_top_blocks = 0;  // 0 = all blocks
  std::size_t threads = 1;               // evaluation workers

  void validate() const {
    optimizer.validate();
    if (patience < 1) throw std::invalid_argument("patience must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (max_len < 2) throw std::invalid_argument("max_len must be >= 2");
  }
};

/// True when the best value (first occurrence of the maximum) is at least
/// `patience` epochs old.
inline bool should_stop(const std::vector<double>& history, std::size_t patience) {
  if (patience < 1) throw std::invalid_argument("should_stop: patience must be >= 1");
  if (history.empty()) throw std::invalid_argument("should_stop: empty history");
  const auto best = static_cast<std::size_t>(
      std::max_element(history.begin(), history.end()) - history.begin());
  return history.size() - 1 - best >= patience;
}

/// One line of the training log. Epoch 0 is the evaluation before any update.
struct EpochRecord {
  std::string phase;
  std::size_t epoch = 0;
  std::size_t steps = 0;
  std::size_t rejected_steps = 0;
  double loss = 0.0;
  double dap = 0.0;
  double contrastive = 0.0;
  double nid = 0.0;
  double rcl = 0.0;
  double valid_hr10 = 0.0;
  double valid_ndcg10 = 0.0;
  double wall_time_s = 0.0;

  nlohmann::json json() const {
    return {{"phase", phase},         {"epoch", epoch},
            {"steps", steps},         {"rejected_steps", rejected_steps},
            {"loss", loss},           {"dap", dap},
            {"contrastive", contrastive}, {"nid", nid},
            {"rcl", rcl},             {"valid_HR@10", valid_hr10},
            {"valid_NDCG@10", valid_ndcg10}, {"wall_time_s", wall_time_s}};
  }
};

struct TrainResult {
  CheckpointBundle best;  // parameters of the best validation epoch
  std::size_t best_epoch = 0;
  double best_hr10 = 0.0;
  std::vector<EpochRecord> log;
};

using EpochSink = std::function<void(const EpochRecord&)>;

/// JSON-lines sink writing one record per epoch.
inline EpochSink jsonl_sink(std::ostream& os) {
  return [&os](const EpochRecord& r) { os << r.json().dump() << '\n' << std::flush; };
}

namespace detail {

inline std::vector<Tensor> snapshot(const std::vector<Parameter*>& params) {
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const Parameter* p : params) out.push_back(p->value);
  return out;
}

inline void restore(const std::vector<Parameter*>& params, const std::vector<Tensor>& values) {
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = values[i];
}

}  // namespace detail

/// Epoch loop shared by pre-training and fine-tuning: seeded batches,
/// AdamW steps, validation HR@10 after each epoch, early stopping, and the
/// best snapshot restored into `model` on return.
inline TrainResult train_model(Model& model, const SplitDataset& split, const TrainConfig& cfg,
                               const std::string& phase, const EpochSink& sink = {}) {
  cfg.validate();
  if (split.users.empty()) throw std::invalid_argument(phase + ": dataset has no users");
  model.set_trainable_top_blocks(cfg.trainable_top_blocks);
  const std::vector<Parameter*> params = model.parameters();
  const std::vector<Parameter*> trainable = model.trainable_parameters();
  AdamW opt(cfg.optimizer);
  EvalOptions eval_opt;
  eval_opt.threads = cfg.threads;
  const auto start = std::chrono::steady_clock::now();
  const std::size_t max_len = std::min(cfg.max_len, model.config().max_len);
  const bool contrastive = cfg.objectives.contrastive != ContrastiveVariant::none;

  TrainResult result;
  std::vector<double> history;
  std::vector<Tensor> best_values;
  auto evaluate_epoch = [&](EpochRecord& rec) {
    const auto report = evaluate(model, split, EvalPhase::valid, eval_opt);
    rec.valid_hr10 = report.hr_at(10);
    rec.valid_ndcg10 = report.ndcg_at(10);
    rec.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    history.push_back(rec.valid_hr10);
    if (best_values.empty() || rec.valid_hr10 > result.best_hr10) {
      result.best_hr10 = rec.valid_hr10;
      result.best_epoch = rec.epoch;
      best_values = detail::snapshot(params);
    }
    result.log.push_back(rec);
    if (sink) sink(rec);
  };

  EpochRecord initial;
  initial.phase = phase;
  evaluate_epoch(initial);

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    EpochRecord rec;
    rec.phase = phase;
    rec.epoch = epoch;
    const auto batches =
        make_batches(split, cfg.batch_size, max_len, derive_seed(cfg.seed, "epoch", epoch), contrastive);
    Rng dropout_rng(derive_seed(cfg.seed, "dropout", epoch));
    for (const Batch& batch : batches) {
      model.zero_grad();
      Tape tape;
      LossBreakdown lb = total_loss(tape, model, split.catalog, batch, cfg.objectives, &dropout_rng);
      tape.backward(lb.total);
      const StepReport step = opt.step(trainable);
      if (!step.applied) {
        ++rec.rejected_steps;
        continue;
      }
      model.mark_updated();
      ++rec.steps;
      rec.loss += lb.total.value().item();
      rec.dap += lb.dap;
      rec.contrastive += lb.contrastive;
      rec.nid += lb.nid;
      rec.rcl += lb.rcl;
    }
    if (rec.steps > 0) {
      const double n = static_cast<double>(rec.steps);
      rec.loss /= n;
      rec.dap /= n;
      rec.contrastive /= n;
      rec.nid /= n;
      rec.rcl /= n;
    }
    evaluate_epoch(rec);
    if (should_stop(history, cfg.patience)) break;
  }
  detail::restore(params, best_values);
  model.mark_updated();
  result.best = bundle_from_model(model);
  return result;
}

/// Multi-task pre-training of a freshly initialized model on the source data.
inline TrainResult pretrain(Model& model, const SplitDataset& source, const TrainConfig& cfg,
                            const EpochSink& sink = {}) {
  return train_model(model, source, cfg, "pretrain", sink);
}

inline TrainResult pretrain(const ModelConfig& mcfg, const SplitDataset& source,
                            const TrainConfig& cfg, const EpochSink& sink = {}) {
  Model model(mcfg, derive_seed(cfg.seed, "model"));
  return pretrain(model, source, cfg, sink);
}

/// Fine-tuning with next-item prediction only. Components come from the
/// bundle according to `mode`; the rest start from fresh initialization.
inline TrainResult finetune(const CheckpointBundle& bundle, TransferMode mode,
                            const SplitDataset& target, TrainConfig cfg, const ModelConfig& mcfg,
                            const EpochSink& sink = {}) {
  Model model = load_components(bundle, mode, derive_seed(cfg.seed, "fresh"), mcfg);
  cfg.objectives = ObjectiveConfig::dap_only();
  return train_model(model, target, cfg, "finetune", sink);
}

/// The "no pre-training" baseline: the full architecture from random
/// initialization, trained with next-item prediction only.
inline TrainResult train_from_scratch(const SplitDataset& target, TrainConfig cfg,
                                      const ModelConfig& mcfg, const EpochSink& sink = {}) {
  Model model(mcfg, derive_seed(cfg.seed, "fresh"), ItemRoute::fused,
              Model::components_for(ItemRoute::fused, false));
  cfg.objectives = ObjectiveConfig::dap_only();
  return train_model(model, target, cfg, "scratch", sink);
}

}  // namespace pmmrec
