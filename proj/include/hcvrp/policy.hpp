#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "hcvrp/autodiff.hpp"
#include "hcvrp/env.hpp"
#include "hcvrp/instance.hpp"
#include "hcvrp/rng.hpp"

namespace hcvrp {

// ---------------------------------------------------------------------------
// Architecture
// ---------------------------------------------------------------------------

struct ArchConfig {
  int dim = 128;           // embedding width
  int heads = 8;           // attention heads
  int encoder_layers = 3;  // self-attention layers in the encoder
  int ff_encoder = 512;    // encoder feed-forward width
  int ff_decoder = 512;    // decoder feed-forward width
  double logit_clip = 10.0;  // tanh clipping constant for node logits

  int dim_k() const { return dim / heads; }

  void check() const {
    if (dim <= 0 || heads <= 0 || dim % heads != 0)
      throw ConfigError("arch: dim must be a positive multiple of heads");
    if (encoder_layers <= 0 || ff_encoder <= 0 || ff_decoder <= 0)
      throw ConfigError("arch: widths and layer counts must be positive");
    if (logit_clip <= 0) throw ConfigError("arch: logit clip must be positive");
  }

  bool operator==(const ArchConfig&) const = default;
};

// ---------------------------------------------------------------------------
// Weights
// ---------------------------------------------------------------------------

template <class M>
struct EncoderLayerW {
  M wq, wk, wv, wo;
  M bn1_gamma, bn1_beta;
  M ff_w1, ff_b1, ff_w2, ff_b2;
  M bn2_gamma, bn2_beta;
};

template <class M>
struct PolicyW {
  M in_w, in_b;  // raw feature projection
  std::vector<EncoderLayerW<M>> layers;
  // vehicle selection decoder
  M veh_w1, veh_b1;
  M veh_ff_w1, veh_ff_b1, veh_ff_w2, veh_ff_b2;
  M route_w2, route_b2;
  M route_ff_w1, route_ff_b1, route_ff_w2, route_ff_b2;
  M veh_w3, veh_b3;
  // node selection decoder
  M placeholder;  // stands in for the last-node embedding at the first step
  M glimpse_wq, glimpse_wk, glimpse_wv, glimpse_wo;
  M comp_wq, comp_wk;
};

// Visits every parameter with a stable name, in a fixed order.
template <class W, class F>
void visit_params(W& w, F&& f) {
  f("in_w", w.in_w);
  f("in_b", w.in_b);
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    auto& layer = w.layers[l];
    const std::string p = "enc" + std::to_string(l) + ".";
    f(p + "wq", layer.wq);
    f(p + "wk", layer.wk);
    f(p + "wv", layer.wv);
    f(p + "wo", layer.wo);
    f(p + "bn1_gamma", layer.bn1_gamma);
    f(p + "bn1_beta", layer.bn1_beta);
    f(p + "ff_w1", layer.ff_w1);
    f(p + "ff_b1", layer.ff_b1);
    f(p + "ff_w2", layer.ff_w2);
    f(p + "ff_b2", layer.ff_b2);
    f(p + "bn2_gamma", layer.bn2_gamma);
    f(p + "bn2_beta", layer.bn2_beta);
  }
  f("veh_w1", w.veh_w1);
  f("veh_b1", w.veh_b1);
  f("veh_ff_w1", w.veh_ff_w1);
  f("veh_ff_b1", w.veh_ff_b1);
  f("veh_ff_w2", w.veh_ff_w2);
  f("veh_ff_b2", w.veh_ff_b2);
  f("route_w2", w.route_w2);
  f("route_b2", w.route_b2);
  f("route_ff_w1", w.route_ff_w1);
  f("route_ff_b1", w.route_ff_b1);
  f("route_ff_w2", w.route_ff_w2);
  f("route_ff_b2", w.route_ff_b2);
  f("veh_w3", w.veh_w3);
  f("veh_b3", w.veh_b3);
  f("placeholder", w.placeholder);
  f("glimpse_wq", w.glimpse_wq);
  f("glimpse_wk", w.glimpse_wk);
  f("glimpse_wv", w.glimpse_wv);
  f("glimpse_wo", w.glimpse_wo);
  f("comp_wq", w.comp_wq);
  f("comp_wk", w.comp_wk);
}

struct BnStats {
  Eigen::RowVectorXd mean, var;
};

// Full model state: hyperparameters, trainable weights, and the
// normalization statistics gathered during training.
struct PolicyParams {
  ArchConfig arch;
  int fleet_size = 0;  // m; decoder widths depend on it
  PolicyW<ad::Matrix> weights;
  std::vector<std::array<BnStats, 2>> bn_stats;  // [layer][sublayer]
};

namespace detail {

inline void expect_shape(const ad::Matrix& m, long rows, long cols,
                         const std::string& name) {
  if (m.rows() != rows || m.cols() != cols)
    throw DataError("policy weights: " + name + " has shape " +
                    std::to_string(m.rows()) + "x" + std::to_string(m.cols()) +
                    ", expected " + std::to_string(rows) + "x" +
                    std::to_string(cols));
}

}  // namespace detail

inline void check_policy_shapes(const PolicyParams& p) {
  p.arch.check();
  if (p.fleet_size <= 0) throw DataError("policy weights: fleet size not set");
  const int dim = p.arch.dim, m = p.fleet_size;
  const int ffe = p.arch.ff_encoder, ffd = p.arch.ff_decoder;
  using detail::expect_shape;
  expect_shape(p.weights.in_w, 2 + m, dim, "in_w");
  expect_shape(p.weights.in_b, 1, dim, "in_b");
  if (static_cast<int>(p.weights.layers.size()) != p.arch.encoder_layers ||
      p.bn_stats.size() != p.weights.layers.size())
    throw DataError("policy weights: encoder layer count mismatch");
  for (std::size_t l = 0; l < p.weights.layers.size(); ++l) {
    const auto& L = p.weights.layers[l];
    const std::string pre = "enc" + std::to_string(l) + ".";
    expect_shape(L.wq, dim, dim, pre + "wq");
    expect_shape(L.wk, dim, dim, pre + "wk");
    expect_shape(L.wv, dim, dim, pre + "wv");
    expect_shape(L.wo, dim, dim, pre + "wo");
    expect_shape(L.bn1_gamma, 1, dim, pre + "bn1_gamma");
    expect_shape(L.bn1_beta, 1, dim, pre + "bn1_beta");
    expect_shape(L.ff_w1, dim, ffe, pre + "ff_w1");
    expect_shape(L.ff_b1, 1, ffe, pre + "ff_b1");
    expect_shape(L.ff_w2, ffe, dim, pre + "ff_w2");
    expect_shape(L.ff_b2, 1, dim, pre + "ff_b2");
    expect_shape(L.bn2_gamma, 1, dim, pre + "bn2_gamma");
    expect_shape(L.bn2_beta, 1, dim, pre + "bn2_beta");
    for (int s = 0; s < 2; ++s)
      if (p.bn_stats[l][s].mean.size() != dim ||
          p.bn_stats[l][s].var.size() != dim)
        throw DataError("policy weights: bn stats width mismatch");
  }
  expect_shape(p.weights.veh_w1, 3 * m, dim, "veh_w1");
  expect_shape(p.weights.veh_b1, 1, dim, "veh_b1");
  expect_shape(p.weights.veh_ff_w1, dim, ffd, "veh_ff_w1");
  expect_shape(p.weights.veh_ff_b1, 1, ffd, "veh_ff_b1");
  expect_shape(p.weights.veh_ff_w2, ffd, dim, "veh_ff_w2");
  expect_shape(p.weights.veh_ff_b2, 1, dim, "veh_ff_b2");
  expect_shape(p.weights.route_w2, m * dim, dim, "route_w2");
  expect_shape(p.weights.route_b2, 1, dim, "route_b2");
  expect_shape(p.weights.route_ff_w1, dim, ffd, "route_ff_w1");
  expect_shape(p.weights.route_ff_b1, 1, ffd, "route_ff_b1");
  expect_shape(p.weights.route_ff_w2, ffd, dim, "route_ff_w2");
  expect_shape(p.weights.route_ff_b2, 1, dim, "route_ff_b2");
  expect_shape(p.weights.veh_w3, 2 * dim, m, "veh_w3");
  expect_shape(p.weights.veh_b3, 1, m, "veh_b3");
  expect_shape(p.weights.placeholder, 1, dim, "placeholder");
  expect_shape(p.weights.glimpse_wq, 2 * dim + 1, dim, "glimpse_wq");
  expect_shape(p.weights.glimpse_wk, dim, dim, "glimpse_wk");
  expect_shape(p.weights.glimpse_wv, dim, dim, "glimpse_wv");
  expect_shape(p.weights.glimpse_wo, dim, dim, "glimpse_wo");
  expect_shape(p.weights.comp_wq, dim, p.arch.dim_k(), "comp_wq");
  expect_shape(p.weights.comp_wk, dim, p.arch.dim_k(), "comp_wk");
}

// Weight matrices start uniform in (-1/sqrt(fan_in), 1/sqrt(fan_in)), biases
// at zero, normalization at identity.
inline PolicyParams init_policy_params(const ArchConfig& arch, int fleet_size,
                                       std::uint64_t seed) {
  arch.check();
  if (fleet_size <= 0) throw ConfigError("init_policy_params: fleet size");
  PolicyParams p;
  p.arch = arch;
  p.fleet_size = fleet_size;
  const int dim = arch.dim, m = fleet_size;
  const int ffe = arch.ff_encoder, ffd = arch.ff_decoder;
  Rng rng(derive_seed(seed, 0xF17));

  auto weight = [&](long rows, long cols) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(rows));
    ad::Matrix w(rows, cols);
    for (long r = 0; r < rows; ++r)
      for (long c = 0; c < cols; ++c) w(r, c) = rng.uniform(-bound, bound);
    return w;
  };
  auto zeros = [&](long cols) { return ad::Matrix::Zero(1, cols); };
  auto ones = [&](long cols) { return ad::Matrix::Ones(1, cols); };

  p.weights.in_w = weight(2 + m, dim);
  p.weights.in_b = zeros(dim);
  p.weights.layers.resize(arch.encoder_layers);
  p.bn_stats.resize(arch.encoder_layers);
  for (int l = 0; l < arch.encoder_layers; ++l) {
    auto& L = p.weights.layers[l];
    L.wq = weight(dim, dim);
    L.wk = weight(dim, dim);
    L.wv = weight(dim, dim);
    L.wo = weight(dim, dim);
    L.bn1_gamma = ones(dim);
    L.bn1_beta = zeros(dim);
    L.ff_w1 = weight(dim, ffe);
    L.ff_b1 = zeros(ffe);
    L.ff_w2 = weight(ffe, dim);
    L.ff_b2 = zeros(dim);
    L.bn2_gamma = ones(dim);
    L.bn2_beta = zeros(dim);
    for (int s = 0; s < 2; ++s) {
      p.bn_stats[l][s].mean = Eigen::RowVectorXd::Zero(dim);
      p.bn_stats[l][s].var = Eigen::RowVectorXd::Ones(dim);
    }
  }
  p.weights.veh_w1 = weight(3 * m, dim);
  p.weights.veh_b1 = zeros(dim);
  p.weights.veh_ff_w1 = weight(dim, ffd);
  p.weights.veh_ff_b1 = zeros(ffd);
  p.weights.veh_ff_w2 = weight(ffd, dim);
  p.weights.veh_ff_b2 = zeros(dim);
  p.weights.route_w2 = weight(m * dim, dim);
  p.weights.route_b2 = zeros(dim);
  p.weights.route_ff_w1 = weight(dim, ffd);
  p.weights.route_ff_b1 = zeros(ffd);
  p.weights.route_ff_w2 = weight(ffd, dim);
  p.weights.route_ff_b2 = zeros(dim);
  p.weights.veh_w3 = weight(2 * dim, m);
  p.weights.veh_b3 = zeros(m);
  p.weights.placeholder = weight(1, dim);
  p.weights.glimpse_wq = weight(2 * dim + 1, dim);
  p.weights.glimpse_wk = weight(dim, dim);
  p.weights.glimpse_wv = weight(dim, dim);
  p.weights.glimpse_wo = weight(dim, dim);
  p.weights.comp_wq = weight(dim, arch.dim_k());
  p.weights.comp_wk = weight(dim, arch.dim_k());
  check_policy_shapes(p);
  return p;
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

enum class BnMode { Train, Infer };
enum class Decode { Greedy, Sample };

// Weight handles living on a tape.
struct BoundPolicy {
  const PolicyParams* params = nullptr;
  PolicyW<ad::Mat> w;
};

inline BoundPolicy bind_policy(ad::Tape& tape, const PolicyParams& params,
                               bool trainable) {
  BoundPolicy bound;
  bound.params = &params;
  bound.w.layers.resize(params.weights.layers.size());
  std::vector<const ad::Matrix*> sources;
  visit_params(params.weights,
               [&](const std::string&, const ad::Matrix& m) {
                 sources.push_back(&m);
               });
  std::size_t at = 0;
  visit_params(bound.w, [&](const std::string&, ad::Mat& slot) {
    slot = tape.leaf(*sources[at++], trainable);
  });
  return bound;
}

// Row i of the result: (x_i, y_i, d_i/Q^1, ..., d_i/Q^m).
inline ad::Matrix enhance_features(const Instance& instance) {
  const int n1 = instance.num_nodes();
  const int m = instance.num_vehicles();
  ad::Matrix f(n1, 2 + m);
  for (int i = 0; i < n1; ++i) {
    f(i, 0) = instance.coords[i][0];
    f(i, 1) = instance.coords[i][1];
    for (int v = 0; v < m; ++v)
      f(i, 2 + v) = static_cast<double>(instance.demands[i]) /
                    instance.fleet.capacities[v];
  }
  return f;
}

struct Embeddings {
  ad::Mat nodes;  // (B*N) x dim
  ad::Mat graph;  // B x dim, per-instance mean of node embeddings
};

// Input projection followed by attention layers; each layer is a multi-head
// self-attention sublayer and a feed-forward sublayer, both wrapped with a
// skip connection and batch normalization.
inline Embeddings encode(ad::Tape& t, const BoundPolicy& bp,
                         const ad::Mat& features, int batch, int nodes_per,
                         BnMode mode,
                         std::vector<std::array<BnStats, 2>>* stats_update) {
  const ArchConfig& arch = bp.params->arch;
  auto bn = [&](const ad::Mat& x, const ad::Mat& gamma, const ad::Mat& beta,
                int layer, int sub) {
    if (mode == BnMode::Train) {
      BnStats* s =
          stats_update != nullptr ? &(*stats_update)[layer][sub] : nullptr;
      return t.batchnorm_train(x, gamma, beta, s != nullptr ? &s->mean : nullptr,
                               s != nullptr ? &s->var : nullptr);
    }
    const BnStats& s = bp.params->bn_stats[layer][sub];
    return t.batchnorm_infer(x, gamma, beta, s.mean, s.var);
  };

  ad::Mat h = t.linear(features, bp.w.in_w, bp.w.in_b);
  for (std::size_t l = 0; l < bp.w.layers.size(); ++l) {
    const auto& L = bp.w.layers[l];
    const ad::Mat q = t.linear(h, L.wq);
    const ad::Mat k = t.linear(h, L.wk);
    const ad::Mat v = t.linear(h, L.wv);
    const ad::Mat z =
        t.block_attention(q, k, v, batch, nodes_per, nodes_per, arch.heads);
    const ad::Mat mha = t.linear(z, L.wo);
    const ad::Mat r =
        bn(t.add(h, mha), L.bn1_gamma, L.bn1_beta, static_cast<int>(l), 0);
    const ad::Mat ff =
        t.linear(t.relu(t.linear(r, L.ff_w1, L.ff_b1)), L.ff_w2, L.ff_b2);
    h = bn(t.add(r, ff), L.bn2_gamma, L.bn2_beta, static_cast<int>(l), 1);
  }
  return {h, t.block_row_mean(h, nodes_per)};
}

namespace detail {

inline ad::Mat decoder_ff(ad::Tape& t, const ad::Mat& x, const ad::Mat& w1,
                          const ad::Mat& b1, const ad::Mat& w2,
                          const ad::Mat& b2) {
  return t.linear(t.relu(t.linear(x, w1, b1)), w2, b2);
}

}  // namespace detail

// Probability over vehicles from the vehicle feature context (last location
// and accumulated time of every vehicle) and the max-pooled embeddings of
// every partial route.
inline ad::Mat vehicle_probs(ad::Tape& t, const BoundPolicy& bp,
                             const Embeddings& emb,
                             const std::vector<State>& states,
                             const std::vector<const Instance*>& instances,
                             int nodes_per) {
  const int batch = static_cast<int>(states.size());
  const int m = bp.params->fleet_size;
  ad::Matrix ctx(batch, 3 * m);
  std::vector<std::vector<std::vector<int>>> groups(batch);
  for (int b = 0; b < batch; ++b) {
    groups[b].resize(m);
    for (int i = 0; i < m; ++i) {
      const VehicleState& v = states[b].vehicles[i];
      const auto& pos = instances[b]->coords[v.position()];
      ctx(b, 3 * i) = pos[0];
      ctx(b, 3 * i + 1) = pos[1];
      ctx(b, 3 * i + 2) = v.time;
      groups[b][i] = v.route;
    }
  }
  const ad::Mat hv = detail::decoder_ff(
      t, t.linear(t.constant(std::move(ctx)), bp.w.veh_w1, bp.w.veh_b1),
      bp.w.veh_ff_w1, bp.w.veh_ff_b1, bp.w.veh_ff_w2, bp.w.veh_ff_b2);
  const ad::Mat pooled = t.block_group_rowmax(emb.nodes, nodes_per, groups);
  const ad::Mat hr = detail::decoder_ff(
      t, t.linear(pooled, bp.w.route_w2, bp.w.route_b2), bp.w.route_ff_w1,
      bp.w.route_ff_b1, bp.w.route_ff_w2, bp.w.route_ff_b2);
  const ad::Mat logits =
      t.linear(t.concat_cols({hv, hr}), bp.w.veh_w3, bp.w.veh_b3);
  const std::vector<std::vector<std::uint8_t>> open(
      batch, std::vector<std::uint8_t>(m, 1));
  return t.softmax_masked(logits, open);
}

// Keys/values of the node embeddings reused across decode steps.
struct DecodeCache {
  ad::Mat glimpse_k, glimpse_v;  // (B*N) x dim
  ad::Mat comp_k;                // (B*N) x dim_k
};

inline DecodeCache make_decode_cache(ad::Tape& t, const BoundPolicy& bp,
                                     const Embeddings& emb) {
  return {t.linear(emb.nodes, bp.w.glimpse_wk),
          t.linear(emb.nodes, bp.w.glimpse_wv),
          t.linear(emb.nodes, bp.w.comp_wk)};
}

// Probability over nodes for the selected vehicles: glimpse attention over
// the node embeddings followed by a tanh-clipped compatibility layer and a
// masked softmax.
inline ad::Mat node_probs(ad::Tape& t, const BoundPolicy& bp,
                          const Embeddings& emb, const DecodeCache& cache,
                          const std::vector<State>& states,
                          const std::vector<const Instance*>& instances,
                          const std::vector<int>& chosen_vehicle,
                          const std::vector<std::vector<std::uint8_t>>& masks,
                          int nodes_per, int step_index,
                          ad::Matrix* logits_out = nullptr) {
  const ArchConfig& arch = bp.params->arch;
  const int batch = static_cast<int>(states.size());
  ad::Mat last;
  if (step_index == 0) {
    last = t.broadcast_row(bp.w.placeholder, batch);
  } else {
    std::vector<int> rows(batch);
    for (int b = 0; b < batch; ++b)
      rows[b] =
          b * nodes_per + states[b].vehicles[chosen_vehicle[b]].position();
    last = t.gather_rows(emb.nodes, rows);
  }
  ad::Matrix load(batch, 1);
  for (int b = 0; b < batch; ++b) {
    const int v = chosen_vehicle[b];
    load(b, 0) = states[b].vehicles[v].remaining /
                 instances[b]->fleet.capacities[v];
  }
  const ad::Mat ctx =
      t.concat_cols({emb.graph, last, t.constant(std::move(load))});
  const ad::Mat q = t.linear(ctx, bp.w.glimpse_wq);
  const ad::Mat glimpse = t.linear(
      t.block_attention(q, cache.glimpse_k, cache.glimpse_v, batch, 1,
                        nodes_per, arch.heads),
      bp.w.glimpse_wo);
  const ad::Mat qc = t.linear(glimpse, bp.w.comp_wq);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(arch.dim_k()));
  const ad::Mat u =
      t.scale(t.tanh(t.block_dot(qc, cache.comp_k, nodes_per, inv_sqrt)),
              arch.logit_clip);
  if (logits_out != nullptr) *logits_out = u.value();
  return t.softmax_masked(u, masks);
}

// ---------------------------------------------------------------------------
// Rollouts
// ---------------------------------------------------------------------------

struct RolloutResult {
  Solution solution;
  double log_prob = 0.0;
  std::vector<Action> actions;
  std::vector<double> picked_probs;  // vehicle then node probability, per step
};

struct BatchRolloutOutput {
  std::vector<RolloutResult> results;
  ad::Mat log_prob_node;  // (B x 1); backpropagatable when the tape records
  BoundPolicy bound;      // parameter leaves used by this rollout
  int steps = 0;
};

namespace detail {

inline int argmax_row(const ad::Matrix& m, long row) {
  int best = 0;
  for (long c = 1; c < m.cols(); ++c)
    if (m(row, c) > m(row, best)) best = static_cast<int>(c);
  return best;
}

inline bool productive(const State& s, int vehicle) {
  return !s.at_depot(vehicle) || any_customer_feasible(s, vehicle);
}

}  // namespace detail

// Constructs solutions for a batch of same-shape instances under one policy.
// The encoder runs once; each step picks a vehicle, then a node for it, until
// every customer is served. Greedy decoding takes the argmax (lowest index on
// ties) but skips vehicles whose only move is idling at the depot; sampling
// draws from the distributions using the per-instance streams.
inline BatchRolloutOutput batch_rollout(
    ad::Tape& tape, const PolicyParams& params,
    const std::vector<Instance>& instances, Decode decode, BnMode mode,
    std::vector<Rng>* rngs = nullptr,
    std::vector<std::array<BnStats, 2>>* stats_update = nullptr,
    const std::vector<std::vector<Action>>* forced = nullptr) {
  require(!instances.empty(), "batch_rollout: empty batch");
  const int batch = static_cast<int>(instances.size());
  const int nodes_per = instances.front().num_nodes();
  const int m = params.fleet_size;
  for (const auto& inst : instances) {
    inst.check();
    require(inst.num_nodes() == nodes_per && inst.num_vehicles() == m,
            "batch_rollout: instances must share n and m");
    if (!inst.serviceable())
      throw DataError("batch_rollout: some demand exceeds every capacity");
  }
  if (decode == Decode::Sample)
    require(rngs != nullptr && static_cast<int>(rngs->size()) == batch,
            "batch_rollout: sampling needs one rng per instance");

  const BoundPolicy bp = bind_policy(tape, params, tape.recording());

  ad::Matrix features(static_cast<long>(batch) * nodes_per, 2 + m);
  std::vector<DistanceTable> dists;
  dists.reserve(batch);
  std::vector<const Instance*> ptrs(batch);
  for (int b = 0; b < batch; ++b) {
    features.middleRows(static_cast<long>(b) * nodes_per, nodes_per) =
        enhance_features(instances[b]);
    dists.push_back(distance_table(instances[b]));
    ptrs[b] = &instances[b];
  }

  const Embeddings emb = encode(tape, bp, tape.constant(std::move(features)),
                                batch, nodes_per, mode, stats_update);
  const DecodeCache cache = make_decode_cache(tape, bp, emb);

  std::vector<State> states;
  states.reserve(batch);
  std::vector<std::uint8_t> active(batch, 1);
  int remaining = batch;
  for (int b = 0; b < batch; ++b) states.push_back(init_state(instances[b]));

  BatchRolloutOutput out;
  out.results.resize(batch);
  ad::Mat logp = tape.constant(ad::Matrix::Zero(batch, 1));
  const long step_cap = 10L * nodes_per + 20L * m + 64;
  int t_step = 0;

  while (remaining > 0) {
    require(t_step < step_cap, "batch_rollout: step cap exceeded");
    const ad::Mat pv = vehicle_probs(tape, bp, emb, states, ptrs, nodes_per);
    const ad::Matrix& pv_val = pv.value();

    std::vector<int> vehicle(batch, 0);
    for (int b = 0; b < batch; ++b) {
      if (!active[b]) continue;
      if (forced != nullptr) {
        vehicle[b] = (*forced)[b][t_step].vehicle;
      } else if (decode == Decode::Greedy) {
        // probability order, skipping pure stays
        std::vector<int> order(m);
        for (int i = 0; i < m; ++i) order[i] = i;
        std::stable_sort(order.begin(), order.end(), [&](int a, int c) {
          return pv_val(b, a) > pv_val(b, c);
        });
        int pick = -1;
        for (int i : order)
          if (detail::productive(states[b], i)) {
            pick = i;
            break;
          }
        require(pick >= 0, "batch_rollout: no productive vehicle");
        vehicle[b] = pick;
      } else {
        std::vector<double> row(m);
        for (int i = 0; i < m; ++i) row[i] = pv_val(b, i);
        vehicle[b] = (*rngs)[b].sample_index(row);
      }
    }
    const ad::Mat vlog = tape.gather_log(pv, vehicle, active);

    std::vector<std::vector<std::uint8_t>> masks(batch);
    for (int b = 0; b < batch; ++b) {
      if (active[b]) {
        masks[b] = feasibility_mask(states[b], instances[b], vehicle[b]);
      } else {
        masks[b].assign(nodes_per, 0);
        masks[b][0] = 1;
      }
    }
    const ad::Mat pn = node_probs(tape, bp, emb, cache, states, ptrs, vehicle,
                                  masks, nodes_per, t_step);
    const ad::Matrix& pn_val = pn.value();

    std::vector<int> node(batch, 0);
    for (int b = 0; b < batch; ++b) {
      if (!active[b]) continue;
      if (forced != nullptr) {
        node[b] = (*forced)[b][t_step].node;
      } else if (decode == Decode::Greedy) {
        node[b] = detail::argmax_row(pn_val, b);
      } else {
        std::vector<double> row(nodes_per);
        for (int j = 0; j < nodes_per; ++j) row[j] = pn_val(b, j);
        node[b] = (*rngs)[b].sample_index(row);
      }
    }
    const ad::Mat nlog = tape.gather_log(pn, node, active);
    logp = tape.add(logp, tape.add(vlog, nlog));

    for (int b = 0; b < batch; ++b) {
      if (!active[b]) continue;
      const Action action{vehicle[b], node[b]};
      out.results[b].actions.push_back(action);
      out.results[b].picked_probs.push_back(pv_val(b, vehicle[b]));
      out.results[b].picked_probs.push_back(pn_val(b, node[b]));
      states[b] = step(states[b], action, instances[b], dists[b]).first;
      if (is_terminal(states[b])) {
        active[b] = 0;
        --remaining;
      }
    }
    ++t_step;
  }

  out.steps = t_step;
  out.log_prob_node = logp;
  out.bound = bp;
  for (int b = 0; b < batch; ++b) {
    out.results[b].solution = finalize(states[b], instances[b], dists[b]);
    out.results[b].log_prob = logp.value()(b, 0);
  }
  return out;
}

// Single-instance rollout on a throwaway tape.
inline RolloutResult rollout(const Instance& instance,
                             const PolicyParams& params, Decode decode,
                             Rng* rng = nullptr) {
  ad::Tape tape(false);
  std::vector<Rng> rngs;
  if (decode == Decode::Sample) {
    require(rng != nullptr, "rollout: sampling needs an rng");
    rngs.push_back(*rng);
  }
  auto out = batch_rollout(tape, params, {instance}, decode, BnMode::Infer,
                           decode == Decode::Sample ? &rngs : nullptr);
  if (decode == Decode::Sample) *rng = rngs.front();
  return std::move(out.results.front());
}

// Replays a fixed action sequence and returns the summed log-probability as
// a differentiable scalar. Used for gradient verification.
inline ad::Mat forced_rollout_logprob(ad::Tape& tape,
                                      const PolicyParams& params,
                                      const Instance& instance,
                                      const std::vector<Action>& actions,
                                      BnMode mode = BnMode::Train) {
  const std::vector<std::vector<Action>> forced{actions};
  auto out = batch_rollout(tape, params, {instance}, Decode::Greedy, mode,
                           nullptr, nullptr, &forced);
  return tape.sum_all(out.log_prob_node);
}

// Best of `count` sampled rollouts. Sample k draws from its own stream
// derived from (seed, k), so a longer run extends a shorter one: the best
// objective is non-increasing in `count`.
inline RolloutResult sample_best(const Instance& instance,
                                 const PolicyParams& params, int count,
                                 std::uint64_t seed, int chunk = 256) {
  require(count >= 1, "sample_best: count must be >= 1");
  RolloutResult best;
  best.solution.objective = std::numeric_limits<double>::infinity();
  for (int start = 0; start < count; start += chunk) {
    const int now = std::min(chunk, count - start);
    std::vector<Instance> copies(now, instance);
    std::vector<Rng> rngs;
    rngs.reserve(now);
    for (int k = 0; k < now; ++k)
      rngs.emplace_back(derive_seed(seed, 0xBE5, start + k));
    ad::Tape tape(false);
    auto out = batch_rollout(tape, params, copies, Decode::Sample,
                             BnMode::Infer, &rngs);
    for (int k = 0; k < now; ++k)
      if (out.results[k].solution.objective < best.solution.objective)
        best = std::move(out.results[k]);
  }
  return best;
}

// ---------------------------------------------------------------------------
// Checkpoint serialization
// ---------------------------------------------------------------------------

inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json matrix_to_json(const ad::Matrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (long r = 0; r < m.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (long c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline ad::Matrix matrix_from_json(const nlohmann::json& j) {
  const long rows = static_cast<long>(j.size());
  if (rows == 0) throw DataError("checkpoint: empty matrix");
  const long cols = static_cast<long>(j.at(0).size());
  ad::Matrix m(rows, cols);
  for (long r = 0; r < rows; ++r) {
    if (static_cast<long>(j.at(r).size()) != cols)
      throw DataError("checkpoint: ragged matrix");
    for (long c = 0; c < cols; ++c) m(r, c) = j.at(r).at(c).get<double>();
  }
  return m;
}

inline nlohmann::json arch_to_json(const ArchConfig& a) {
  return {{"dim", a.dim},
          {"heads", a.heads},
          {"encoder_layers", a.encoder_layers},
          {"ff_encoder", a.ff_encoder},
          {"ff_decoder", a.ff_decoder},
          {"logit_clip", a.logit_clip}};
}

inline ArchConfig arch_from_json(const nlohmann::json& j) {
  ArchConfig a;
  a.dim = j.at("dim").get<int>();
  a.heads = j.at("heads").get<int>();
  a.encoder_layers = j.at("encoder_layers").get<int>();
  a.ff_encoder = j.at("ff_encoder").get<int>();
  a.ff_decoder = j.at("ff_decoder").get<int>();
  a.logit_clip = j.at("logit_clip").get<double>();
  a.check();
  return a;
}

inline nlohmann::json policy_to_json(const PolicyParams& p) {
  nlohmann::json j;
  j["arch"] = arch_to_json(p.arch);
  j["fleet_size"] = p.fleet_size;
  auto& weights = j["weights"] = nlohmann::json::object();
  visit_params(p.weights, [&](const std::string& name, const ad::Matrix& m) {
    weights[name] = matrix_to_json(m);
  });
  auto& stats = j["bn_stats"] = nlohmann::json::array();
  for (const auto& layer : p.bn_stats) {
    nlohmann::json pair = nlohmann::json::array();
    for (const auto& s : layer) {
      nlohmann::json one;
      one["mean"] = std::vector<double>(s.mean.begin(), s.mean.end());
      one["var"] = std::vector<double>(s.var.begin(), s.var.end());
      pair.push_back(std::move(one));
    }
    stats.push_back(std::move(pair));
  }
  return j;
}

inline PolicyParams policy_from_json(const nlohmann::json& j) {
  PolicyParams p;
  p.arch = arch_from_json(j.at("arch"));
  p.fleet_size = j.at("fleet_size").get<int>();
  p.weights.layers.resize(p.arch.encoder_layers);
  const auto& weights = j.at("weights");
  visit_params(p.weights, [&](const std::string& name, ad::Matrix& m) {
    if (!weights.contains(name))
      throw DataError("checkpoint: missing weight " + name);
    m = matrix_from_json(weights.at(name));
  });
  const auto& stats = j.at("bn_stats");
  p.bn_stats.resize(stats.size());
  for (std::size_t l = 0; l < p.bn_stats.size(); ++l) {
    for (int s = 0; s < 2; ++s) {
      const auto mean =
          stats.at(l).at(s).at("mean").get<std::vector<double>>();
      const auto var = stats.at(l).at(s).at("var").get<std::vector<double>>();
      p.bn_stats[l][s].mean =
          Eigen::Map<const Eigen::RowVectorXd>(mean.data(), mean.size());
      p.bn_stats[l][s].var =
          Eigen::Map<const Eigen::RowVectorXd>(var.data(), var.size());
    }
  }
  check_policy_shapes(p);
  return p;
}

}  // namespace hcvrp
