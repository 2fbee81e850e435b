#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "hcvrp/policy.hpp"
#include "hcvrp/stats.hpp"

namespace hcvrp {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct TrainConfig {
  int iterations = 50;
  int batches_per_iteration = 2500;  // M
  int batch_size = 512;              // B
  double lr0 = 1e-4;
  double lr_decay = 0.995;  // applied per iteration
  double grad_clip_norm = 3.0;
  double alpha = 0.05;        // t-test significance for baseline replacement
  int ttest_eval_size = 1000;
  std::uint64_t seed = 1;
  // problem family trained on
  int num_customers = 40;
  FleetSpec fleet = fleet_for(FleetPreset::V3, Objective::MinMax);
  Objective objective = Objective::MinMax;
  ArchConfig arch;

  long instances_per_iteration() const {
    return static_cast<long>(batches_per_iteration) * batch_size;
  }

  void check() const {
    if (iterations < 0 || batches_per_iteration <= 0 || batch_size <= 0)
      throw ConfigError("train config: sizes must be positive");
    if (lr0 <= 0 || lr_decay <= 0 || grad_clip_norm <= 0)
      throw ConfigError("train config: optimizer constants must be positive");
    if (!(alpha > 0.0 && alpha < 1.0))
      throw ConfigError("train config: alpha must lie in (0,1)");
    if (ttest_eval_size < 2)
      throw ConfigError("train config: t-test needs at least two instances");
    if (num_customers < 1)
      throw ConfigError("train config: need at least one customer");
    fleet.check();
    arch.check();
  }
};

// Laptop-scale preset: small instances and a slim network, every code path.
inline TrainConfig desk_config(Objective objective) {
  TrainConfig c;
  c.iterations = 10;
  c.batches_per_iteration = 100;
  c.batch_size = 128;
  c.num_customers = 10;
  c.objective = objective;
  c.fleet = fleet_for(FleetPreset::V3, objective);
  c.arch.dim = 64;
  c.arch.encoder_layers = 2;
  return c;
}

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
  nlohmann::json j;
  j["iterations"] = c.iterations;
  j["batches_per_iteration"] = c.batches_per_iteration;
  j["batch_size"] = c.batch_size;
  j["lr0"] = c.lr0;
  j["lr_decay"] = c.lr_decay;
  j["grad_clip_norm"] = c.grad_clip_norm;
  j["alpha"] = c.alpha;
  j["ttest_eval_size"] = c.ttest_eval_size;
  j["seed"] = c.seed;
  j["num_customers"] = c.num_customers;
  j["capacities"] = c.fleet.capacities;
  j["speeds"] = c.fleet.speeds;
  j["objective"] = to_string(c.objective);
  j["arch"] = arch_to_json(c.arch);
  return j;
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.iterations = j.at("iterations").get<int>();
  c.batches_per_iteration = j.at("batches_per_iteration").get<int>();
  c.batch_size = j.at("batch_size").get<int>();
  c.lr0 = j.at("lr0").get<double>();
  c.lr_decay = j.at("lr_decay").get<double>();
  c.grad_clip_norm = j.at("grad_clip_norm").get<double>();
  c.alpha = j.at("alpha").get<double>();
  c.ttest_eval_size = j.at("ttest_eval_size").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.num_customers = j.at("num_customers").get<int>();
  c.fleet.capacities = j.at("capacities").get<std::vector<int>>();
  c.fleet.speeds = j.at("speeds").get<std::vector<double>>();
  c.objective = parse_objective(j.at("objective").get<std::string>());
  c.arch = arch_from_json(j.at("arch"));
  c.check();
  return c;
}

inline std::uint64_t config_hash(const TrainConfig& c) {
  const std::string dump = train_config_to_json(c).dump();
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
  for (unsigned char ch : dump) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step = 0;
  std::map<std::string, ad::Matrix> m, v;
};

inline void adam_step(PolicyW<ad::Matrix>& weights,
                      const std::map<std::string, ad::Matrix>& grads,
                      AdamState& opt, double lr) {
  opt.step += 1;
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(opt.step));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(opt.step));
  visit_params(weights, [&](const std::string& name, ad::Matrix& w) {
    const ad::Matrix& g = grads.at(name);
    auto [mit, fresh_m] = opt.m.try_emplace(
        name, ad::Matrix::Zero(w.rows(), w.cols()));
    auto [vit, fresh_v] = opt.v.try_emplace(
        name, ad::Matrix::Zero(w.rows(), w.cols()));
    ad::Matrix& m = mit->second;
    ad::Matrix& v = vit->second;
    m = opt.beta1 * m + (1.0 - opt.beta1) * g;
    v = opt.beta2 * v + (1.0 - opt.beta2) * g.cwiseProduct(g);
    const ad::Matrix mhat = m / bc1;
    const ad::Matrix vhat = v / bc2;
    w.array() -= lr * mhat.array() / (vhat.array().sqrt() + opt.eps);
  });
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct BatchMetrics {
  int iteration = 0;  // zero-based
  int batch = 0;
  double mean_cost = 0.0;
  double baseline_cost = 0.0;
  double grad_norm = 0.0;  // after clipping
  double lr = 0.0;
};

struct IterationMetrics {
  int iteration = 0;
  double p_value = 1.0;
  bool baseline_replaced = false;
  double eval_cost = 0.0;           // policy greedy mean on the eval set
  double eval_baseline_cost = 0.0;  // baseline greedy mean on the eval set
};

inline nlohmann::json to_json(const BatchMetrics& m) {
  return {{"iteration", m.iteration},   {"batch", m.batch},
          {"mean_cost", m.mean_cost},   {"baseline_cost", m.baseline_cost},
          {"grad_norm", m.grad_norm},   {"lr", m.lr}};
}

inline nlohmann::json to_json(const IterationMetrics& m) {
  return {{"iteration", m.iteration},
          {"p_value", m.p_value},
          {"baseline_replaced", m.baseline_replaced},
          {"eval_cost", m.eval_cost},
          {"eval_baseline_cost", m.eval_baseline_cost}};
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

// Policy-gradient training with a greedy-rollout baseline. The baseline
// network is a frozen copy of the policy, replaced whenever the policy beats
// it significantly on a held-aside evaluation set (one-sided paired t-test).
class Trainer {
 public:
  explicit Trainer(const TrainConfig& config)
      : config_(config),
        theta_(init_policy_params(config.arch, config.fleet.size(),
                                  seed_for(kInitStream, 0, 0))),
        phi_(theta_) {
    config_.check();
  }

  const TrainConfig& config() const { return config_; }
  const PolicyParams& policy() const { return theta_; }
  const PolicyParams& baseline() const { return phi_; }
  int iteration() const { return iteration_; }

  double current_lr() const {
    return config_.lr0 * std::pow(config_.lr_decay, iteration_);
  }

  std::vector<Instance> make_batch(int iteration, int batch_index) const {
    std::vector<Instance> out;
    out.reserve(config_.batch_size);
    for (int b = 0; b < config_.batch_size; ++b) {
      const long slot =
          static_cast<long>(batch_index) * config_.batch_size + b;
      out.push_back(generate_instance(
          config_.num_customers, config_.fleet, config_.objective,
          seed_for(kTrainInstanceStream, iteration, slot)));
    }
    return out;
  }

  // One REINFORCE step on one batch: sampled rollouts under the policy,
  // greedy baseline rollouts under the frozen copy, advantage-weighted
  // log-probability gradient, global-norm clipping, Adam update.
  BatchMetrics train_batch(const std::vector<Instance>& batch,
                           int batch_index) {
    require(!batch.empty(), "train_batch: empty batch");
    const int b_count = static_cast<int>(batch.size());

    std::vector<Rng> action_rngs;
    action_rngs.reserve(b_count);
    for (int b = 0; b < b_count; ++b) {
      const long slot = static_cast<long>(batch_index) * b_count + b;
      action_rngs.emplace_back(seed_for(kActionStream, iteration_, slot));
    }

    ad::Tape tape(true);
    auto sampled = batch_rollout(tape, theta_, batch, Decode::Sample,
                                 BnMode::Train, &action_rngs,
                                 &theta_.bn_stats);

    ad::Tape baseline_tape(false);
    auto baseline = batch_rollout(baseline_tape, phi_, batch, Decode::Greedy,
                                  BnMode::Infer);

    std::vector<double> advantage(b_count);
    double mean_cost = 0.0, mean_baseline = 0.0;
    for (int b = 0; b < b_count; ++b) {
      const double cost = sampled.results[b].solution.objective;
      const double base = baseline.results[b].solution.objective;
      advantage[b] = cost - base;
      mean_cost += cost;
      mean_baseline += base;
    }
    mean_cost /= b_count;
    mean_baseline /= b_count;

    const ad::Mat loss = tape.weighted_sum(sampled.log_prob_node, advantage,
                                           1.0 / b_count);
    if (!std::isfinite(loss.value()(0, 0)))
      throw DataError("train_batch: non-finite loss at iteration " +
                      std::to_string(iteration_) + ", batch " +
                      std::to_string(batch_index));
    tape.backward(loss);

    // Collect per-parameter gradients by their canonical names.
    std::map<std::string, ad::Matrix> grads;
    visit_params(sampled.bound.w, [&](const std::string& name,
                                      const ad::Mat& leaf) {
      grads[name] = tape.grad(leaf);
    });
    double norm_sq = 0.0;
    for (const auto& [name, g] : grads) {
      if (!g.allFinite())
        throw DataError("train_batch: non-finite gradient in " + name);
      norm_sq += g.squaredNorm();
    }
    double norm = std::sqrt(norm_sq);
    if (norm > config_.grad_clip_norm && norm > 0.0) {
      const double factor = config_.grad_clip_norm / norm;
      for (auto& [name, g] : grads) g *= factor;
      norm = config_.grad_clip_norm;
    }

    adam_step(theta_.weights, grads, opt_, current_lr());

    BatchMetrics metrics;
    metrics.iteration = iteration_;
    metrics.batch = batch_index;
    metrics.mean_cost = mean_cost;
    metrics.baseline_cost = mean_baseline;
    metrics.grad_norm = norm;
    metrics.lr = current_lr();
    return metrics;
  }

  // Greedy costs of both networks on the persistent evaluation set; replaces
  // the baseline when the policy is significantly better, then resamples the
  // set.
  IterationMetrics maybe_update_baseline() {
    const std::vector<Instance> eval = eval_set();
    const std::vector<double> policy_costs = greedy_costs(theta_, eval);
    const std::vector<double> baseline_costs = greedy_costs(phi_, eval);
    const auto test = stats::one_sided_paired_ttest(policy_costs,
                                                    baseline_costs);
    IterationMetrics metrics;
    metrics.iteration = iteration_;
    metrics.p_value = test.p_value;
    metrics.eval_cost = mean_of(policy_costs);
    metrics.eval_baseline_cost = mean_of(baseline_costs);
    if (test.p_value < config_.alpha) {
      phi_ = theta_;
      eval_epoch_ += 1;
      metrics.baseline_replaced = true;
    }
    return metrics;
  }

  using MetricsSink = std::function<void(const nlohmann::json&)>;

  // Runs the remaining iterations, emitting one metrics record per batch and
  // per iteration end, checkpointing after every iteration.
  void run(const std::string& checkpoint_path, const MetricsSink& sink) {
    for (; iteration_ < config_.iterations;) {
      for (int b = 0; b < config_.batches_per_iteration; ++b) {
        const BatchMetrics m = train_batch(make_batch(iteration_, b), b);
        if (sink) sink(to_json(m));
      }
      const IterationMetrics im = maybe_update_baseline();
      if (sink) sink(to_json(im));
      iteration_ += 1;
      if (!checkpoint_path.empty()) save_checkpoint(checkpoint_path);
    }
  }

  // -------------------------------------------------------------------------
  // Checkpointing
  // -------------------------------------------------------------------------

  nlohmann::json checkpoint_to_json() const {
    nlohmann::json j;
    j["version"] = kCheckpointVersion;
    j["config"] = train_config_to_json(config_);
    j["config_hash"] = config_hash(config_);
    j["iteration"] = iteration_;
    j["eval_epoch"] = eval_epoch_;
    j["policy"] = policy_to_json(theta_);
    j["baseline"] = policy_to_json(phi_);
    auto& opt = j["optimizer"];
    opt["step"] = opt_.step;
    auto& m = opt["m"] = nlohmann::json::object();
    auto& v = opt["v"] = nlohmann::json::object();
    for (const auto& [name, mat] : opt_.m) m[name] = matrix_to_json(mat);
    for (const auto& [name, mat] : opt_.v) v[name] = matrix_to_json(mat);
    return j;
  }

  void save_checkpoint(const std::string& path) const {
    const std::string tmp = path + ".tmp";
    {
      std::ofstream out(tmp);
      if (!out) throw DataError("cannot open for writing: " + tmp);
      out << checkpoint_to_json().dump() << "\n";
    }
    std::filesystem::rename(tmp, path);
  }

  static Trainer from_checkpoint_json(const nlohmann::json& j) {
    if (!j.contains("version") ||
        j["version"].get<int>() != kCheckpointVersion)
      throw DataError("checkpoint: missing or unsupported version");
    Trainer t(train_config_from_json(j.at("config")));
    t.iteration_ = j.at("iteration").get<int>();
    t.eval_epoch_ = j.at("eval_epoch").get<int>();
    t.theta_ = policy_from_json(j.at("policy"));
    t.phi_ = policy_from_json(j.at("baseline"));
    t.opt_ = AdamState{};
    t.opt_.step = j.at("optimizer").at("step").get<long>();
    for (const auto& [name, mat] : j.at("optimizer").at("m").items())
      t.opt_.m[name] = matrix_from_json(mat);
    for (const auto& [name, mat] : j.at("optimizer").at("v").items())
      t.opt_.v[name] = matrix_from_json(mat);
    return t;
  }

  static Trainer load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open checkpoint: " + path);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("checkpoint: malformed json: ") + e.what());
    }
    return from_checkpoint_json(j);
  }

  // Resuming under a different configuration is refused.
  static Trainer resume(const std::string& path, const TrainConfig& expect) {
    Trainer t = load_checkpoint(path);
    if (train_config_to_json(t.config_) != train_config_to_json(expect))
      throw ConfigError("resume: checkpoint was trained with a different "
                        "configuration");
    return t;
  }

  std::vector<Instance> eval_set() const {
    std::vector<Instance> out;
    out.reserve(config_.ttest_eval_size);
    for (int i = 0; i < config_.ttest_eval_size; ++i)
      out.push_back(generate_instance(
          config_.num_customers, config_.fleet, config_.objective,
          seed_for(kEvalInstanceStream, eval_epoch_, i)));
    return out;
  }

  std::vector<double> greedy_costs(const PolicyParams& params,
                                   const std::vector<Instance>& instances,
                                   int chunk = 256) const {
    std::vector<double> costs;
    costs.reserve(instances.size());
    for (std::size_t start = 0; start < instances.size();
         start += static_cast<std::size_t>(chunk)) {
      const std::size_t now =
          std::min(static_cast<std::size_t>(chunk), instances.size() - start);
      const std::vector<Instance> slice(instances.begin() + start,
                                        instances.begin() + start + now);
      ad::Tape tape(false);
      auto out =
          batch_rollout(tape, params, slice, Decode::Greedy, BnMode::Infer);
      for (const auto& r : out.results)
        costs.push_back(r.solution.objective);
    }
    return costs;
  }

 private:
  enum Stream : std::uint64_t {
    kTrainInstanceStream = 1,
    kActionStream = 2,
    kEvalInstanceStream = 3,
    kInitStream = 4,
  };

  std::uint64_t seed_for(std::uint64_t stream, long a, long b) const {
    return derive_seed(config_.seed, stream,
                       (static_cast<std::uint64_t>(a) << 32) ^
                           static_cast<std::uint64_t>(b));
  }

  static double mean_of(const std::vector<double>& xs) {
    double s = 0.0;
    for (double x : xs) s += x;
    return xs.empty() ? 0.0 : s / static_cast<double>(xs.size());
  }

  TrainConfig config_;
  PolicyParams theta_;
  PolicyParams phi_;
  AdamState opt_;
  int iteration_ = 0;
  int eval_epoch_ = 0;
};

}  // namespace hcvrp
