#pragma once

#include <chrono>
#include <random>
#include <string>
#include <vector>

#include "pmmrec/gradcheck.hpp"
#include "pmmrec/objectives.hpp"
#include "pmmrec/synthetic.hpp"

namespace pmmrec {

struct SuiteResult {
  std::string objective;
  GradientCheckReport report;
  double seconds = 0.0;
};

/// The small fixed setting the suite runs in: B=2, L=4, d=8, p=4, q=4.
inline ModelConfig gradcheck_model_config() {
  ModelConfig mc;
  mc.d = 8;
  mc.n_heads = 2;
  mc.encoder_blocks = 1;
  mc.user_blocks = 1;
  mc.vocab_size = 50;
  mc.p_max = 4;
  mc.q = 4;
  mc.patch_dim = 4;
  mc.max_len = 4;
  return mc;
}

/// Objective sets checked one by one, ending with the weighted total.
inline std::vector<std::pair<std::string, ObjectiveConfig>> gradcheck_objectives() {
  auto only = [](bool dap, ContrastiveVariant c, bool nid, bool rcl) {
    ObjectiveConfig oc;
    oc.dap = dap;
    oc.contrastive = c;
    oc.nid = nid;
    oc.rcl = rcl;
    return oc;
  };
  using CV = ContrastiveVariant;
  return {{"dap", only(true, CV::none, false, false)},
          {"vcl", only(false, CV::vcl, false, false)},
          {"icl", only(false, CV::icl, false, false)},
          {"nicl", only(false, CV::nicl, false, false)},
          {"nid", only(false, CV::none, true, false)},
          {"rcl", only(false, CV::none, false, true)},
          {"total", only(true, CV::nicl, true, true)}};
}

/// Analytic vs central-difference gradients of every parameter for each
/// objective. Parameters are moved off their initialization (N(0, 0.5)
/// added) so no gradient sits at a degenerate symmetric point.
inline std::vector<SuiteResult> run_gradcheck_suite(double step, double tol, std::uint64_t seed = 1) {
  SyntheticConfig sc;
  sc.q = 4;
  sc.patch_dim = 4;
  sc.vocab_size = 50;
  sc.tokens_per_item = 4;
  sc.L_min = 4;
  sc.L_max = 4;
  sc.n_items = 12;
  sc.n_users = 10;
  sc.seed = seed;
  const SyntheticData data = generate_synthetic(sc);
  Model model(gradcheck_model_config(), derive_seed(seed, "gradcheck.model"));
  Rng rng(derive_seed(seed, "gradcheck.perturb"));
  std::normal_distribution<double> jitter(0.0, 0.5);
  for (Parameter* p : model.parameters())
    for (double& v : p->value.values()) v += jitter(rng);
  Batch batch;
  batch.sequences = {data.source.users[0].items, data.source.users[1].items};
  batch.rng_seed = derive_seed(seed, "gradcheck.batch");

  std::vector<SuiteResult> out;
  for (const auto& [name, oc] : gradcheck_objectives()) {
    const auto t0 = std::chrono::steady_clock::now();
    SuiteResult r;
    r.objective = name;
    r.report = check_parameter_gradients(
        [&](Tape& t) { return total_loss(t, model, data.source.catalog, batch, oc).total; },
        model.parameters(), step, tol);
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace pmmrec
