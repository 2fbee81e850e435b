#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <type_traits>
#include <utility>
#include <vector>

#include "hcvrp/common.hpp"

namespace hcvrp::ad {

using Matrix = Eigen::MatrixXd;

class Tape;

// Handle to a value stored on a tape.
struct Mat {
  Tape* tape = nullptr;
  int index = -1;

  bool valid() const { return tape != nullptr && index >= 0; }
  const Matrix& value() const;
  long rows() const { return value().rows(); }
  long cols() const { return value().cols(); }
};

// Reverse-mode tape over dense matrices. Operations append nodes; backward()
// walks them once in reverse. With recording off the same operations compute
// values only, so forward code is written once for training and inference.
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}

  bool recording() const { return recording_; }
  void set_recording(bool on) { recording_ = on; }

  void clear() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }

  Mat leaf(Matrix value, bool needs_grad = false) {
    return push(std::move(value), needs_grad && recording_, nullptr);
  }

  Mat constant(Matrix value) { return leaf(std::move(value), false); }

  const Matrix& value(const Mat& m) const { return nodes_[m.index].value; }

  // Gradient of a leaf after backward(); zero matrix if it was never touched.
  Matrix grad(const Mat& m) const {
    const Node& node = nodes_[m.index];
    if (node.grad.size() == 0)
      return Matrix::Zero(node.value.rows(), node.value.cols());
    return node.grad;
  }

  void backward(const Mat& root) {
    require(recording_, "backward: tape is not recording");
    require(root.tape == this, "backward: foreign handle");
    require(nodes_[root.index].value.size() == 1,
            "backward: root must be scalar");
    grad_ref(root.index)(0, 0) = 1.0;
    for (int i = root.index; i >= 0; --i) {
      Node& node = nodes_[i];
      if (node.backward && node.grad.size() != 0) node.backward(*this, node);
    }
  }

  // -------------------------------------------------------------------------
  // Operations
  // -------------------------------------------------------------------------

  // y = x W + b (b broadcast over rows; pass invalid b for no bias).
  Mat linear(const Mat& x, const Mat& w, const Mat& b = {}) {
    Matrix y = value(x) * value(w);
    if (b.valid()) y.rowwise() += value(b).row(0);
    const bool ng =
        needs(x) || needs(w) || (b.valid() && needs(b));
    const int xi = x.index, wi = w.index, bi = b.valid() ? b.index : -1;
    return push(std::move(y), ng, [xi, wi, bi](Tape& t, const Node& out) {
      const Matrix& g = out.grad;
      if (t.node_needs(xi)) t.grad_ref(xi).noalias() += g * t.val(wi).transpose();
      if (t.node_needs(wi)) t.grad_ref(wi).noalias() += t.val(xi).transpose() * g;
      if (bi >= 0 && t.node_needs(bi)) t.grad_ref(bi) += g.colwise().sum();
    });
  }

  Mat add(const Mat& a, const Mat& b) {
    Matrix y = value(a) + value(b);
    const int ai = a.index, bi = b.index;
    return push(std::move(y), needs(a) || needs(b),
                [ai, bi](Tape& t, const Node& out) {
                  if (t.node_needs(ai)) t.grad_ref(ai) += out.grad;
                  if (t.node_needs(bi)) t.grad_ref(bi) += out.grad;
                });
  }

  Mat scale(const Mat& a, double s) {
    Matrix y = value(a) * s;
    const int ai = a.index;
    return push(std::move(y), needs(a), [ai, s](Tape& t, const Node& out) {
      if (t.node_needs(ai)) t.grad_ref(ai) += out.grad * s;
    });
  }

  Mat relu(const Mat& a) {
    Matrix y = value(a).cwiseMax(0.0);
    const int ai = a.index;
    return push(std::move(y), needs(a), [ai](Tape& t, const Node& out) {
      if (!t.node_needs(ai)) return;
      t.grad_ref(ai).array() +=
          (t.val(ai).array() > 0.0).cast<double>() * out.grad.array();
    });
  }

  Mat tanh(const Mat& a) {
    Matrix y = value(a).array().tanh();
    const int ai = a.index;
    return push(std::move(y), needs(a), [ai](Tape& t, const Node& out) {
      if (!t.node_needs(ai)) return;
      t.grad_ref(ai).array() +=
          (1.0 - out.value.array().square()) * out.grad.array();
    });
  }

  Mat concat_cols(const std::vector<Mat>& parts) {
    require(!parts.empty(), "concat_cols: empty");
    const long rows = parts.front().rows();
    long cols = 0;
    bool ng = false;
    for (const auto& p : parts) {
      require(p.rows() == rows, "concat_cols: row mismatch");
      cols += p.cols();
      ng = ng || needs(p);
    }
    Matrix y(rows, cols);
    std::vector<int> idx;
    std::vector<long> widths;
    long at = 0;
    for (const auto& p : parts) {
      y.middleCols(at, p.cols()) = value(p);
      idx.push_back(p.index);
      widths.push_back(p.cols());
      at += p.cols();
    }
    return push(std::move(y), ng,
                [idx, widths](Tape& t, const Node& out) {
                  long at = 0;
                  for (std::size_t i = 0; i < idx.size(); ++i) {
                    if (t.node_needs(idx[i]))
                      t.grad_ref(idx[i]) += out.grad.middleCols(at, widths[i]);
                    at += widths[i];
                  }
                });
  }

  // Mean over each block of `block_rows` consecutive rows: (B*N)xD -> BxD.
  Mat block_row_mean(const Mat& a, int block_rows) {
    const Matrix& x = value(a);
    require(x.rows() % block_rows == 0, "block_row_mean: bad block size");
    const long blocks = x.rows() / block_rows;
    Matrix y(blocks, x.cols());
    for (long b = 0; b < blocks; ++b)
      y.row(b) = x.middleRows(b * block_rows, block_rows).colwise().mean();
    const int ai = a.index;
    return push(std::move(y), needs(a),
                [ai, block_rows](Tape& t, const Node& out) {
                  if (!t.node_needs(ai)) return;
                  Matrix& g = t.grad_ref(ai);
                  for (long b = 0; b < out.grad.rows(); ++b)
                    g.middleRows(b * block_rows, block_rows).rowwise() +=
                        out.grad.row(b) / static_cast<double>(block_rows);
                });
  }

  // Multi-head attention core. q: (B*Nq)xD, k,v: (B*Nk)xD with D split into
  // `heads` equal column blocks. Softmax runs per instance block and head.
  Mat block_attention(const Mat& q, const Mat& k, const Mat& v, int batch,
                      int q_rows, int k_rows, int heads) {
    const Matrix& qv = value(q);
    const Matrix& kv = value(k);
    const Matrix& vv = value(v);
    const long dim = qv.cols();
    require(dim % heads == 0, "block_attention: dim not divisible by heads");
    const long dk = dim / heads;
    require(qv.rows() == static_cast<long>(batch) * q_rows &&
                kv.rows() == static_cast<long>(batch) * k_rows &&
                vv.rows() == kv.rows() && kv.cols() == dim && vv.cols() == dim,
            "block_attention: shape mismatch");
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));
    Matrix out(qv.rows(), dim);
    Matrix attn(static_cast<long>(batch) * q_rows,
                static_cast<long>(heads) * k_rows);
    for (int b = 0; b < batch; ++b) {
      for (int h = 0; h < heads; ++h) {
        const auto qb = qv.block(b * q_rows, h * dk, q_rows, dk);
        const auto kb = kv.block(b * k_rows, h * dk, k_rows, dk);
        const auto vb = vv.block(b * k_rows, h * dk, k_rows, dk);
        Matrix scores = qb * kb.transpose() * inv_sqrt;
        for (long r = 0; r < scores.rows(); ++r) {
          const double mx = scores.row(r).maxCoeff();
          scores.row(r) = (scores.row(r).array() - mx).exp();
          scores.row(r) /= scores.row(r).sum();
        }
        attn.block(b * q_rows, h * k_rows, q_rows, k_rows) = scores;
        out.block(b * q_rows, h * dk, q_rows, dk).noalias() = scores * vb;
      }
    }
    const int qi = q.index, ki = k.index, vi = v.index;
    return push(
        std::move(out), needs(q) || needs(k) || needs(v),
        [qi, ki, vi, batch, q_rows, k_rows, heads, dk, inv_sqrt,
         attn = std::move(attn)](Tape& t, const Node& out_node) {
          const Matrix& g = out_node.grad;
          const bool nq = t.node_needs(qi), nk = t.node_needs(ki),
                     nv = t.node_needs(vi);
          for (int b = 0; b < batch; ++b) {
            for (int h = 0; h < heads; ++h) {
              const auto a = attn.block(b * q_rows, h * k_rows, q_rows, k_rows);
              const auto gb = g.block(b * q_rows, h * dk, q_rows, dk);
              const auto qb = t.val(qi).block(b * q_rows, h * dk, q_rows, dk);
              const auto kb = t.val(ki).block(b * k_rows, h * dk, k_rows, dk);
              const auto vb = t.val(vi).block(b * k_rows, h * dk, k_rows, dk);
              if (nv)
                t.grad_ref(vi)
                    .block(b * k_rows, h * dk, k_rows, dk)
                    .noalias() += a.transpose() * gb;
              if (nq || nk) {
                Matrix da = gb * vb.transpose();  // q_rows x k_rows
                Matrix ds(q_rows, k_rows);
                for (long r = 0; r < ds.rows(); ++r) {
                  const double dot = da.row(r).cwiseProduct(a.row(r)).sum();
                  ds.row(r) =
                      (a.row(r).array() * (da.row(r).array() - dot)).matrix();
                }
                ds *= inv_sqrt;
                if (nq)
                  t.grad_ref(qi)
                      .block(b * q_rows, h * dk, q_rows, dk)
                      .noalias() += ds * kb;
                if (nk)
                  t.grad_ref(ki)
                      .block(b * k_rows, h * dk, k_rows, dk)
                      .noalias() += ds.transpose() * qb;
              }
            }
          }
        });
  }

  // Row-wise dot products per block: q is BxD, k is (B*N)xD; out(b,j) =
  // scale * <q(b), k(b*N+j)>.
  Mat block_dot(const Mat& q, const Mat& k, int block_rows, double s) {
    const Matrix& qv = value(q);
    const Matrix& kv = value(k);
    require(kv.rows() == qv.rows() * block_rows && kv.cols() == qv.cols(),
            "block_dot: shape mismatch");
    Matrix y(qv.rows(), block_rows);
    for (long b = 0; b < qv.rows(); ++b)
      y.row(b) =
          (kv.middleRows(b * block_rows, block_rows) * qv.row(b).transpose())
              .transpose() *
          s;
    const int qi = q.index, ki = k.index;
    return push(std::move(y), needs(q) || needs(k),
                [qi, ki, block_rows, s](Tape& t, const Node& out) {
                  const Matrix& g = out.grad;
                  for (long b = 0; b < g.rows(); ++b) {
                    const auto kb = t.val(ki).middleRows(b * block_rows,
                                                         block_rows);
                    if (t.node_needs(qi))
                      t.grad_ref(qi).row(b).noalias() += g.row(b) * kb * s;
                    if (t.node_needs(ki))
                      t.grad_ref(ki)
                          .middleRows(b * block_rows, block_rows)
                          .noalias() +=
                          g.row(b).transpose() * t.val(qi).row(b) * s;
                  }
                });
  }

  // Per (block, group) column-wise max over a set of rows of `a`.
  // groups[b][i] lists row offsets within block b; output row b holds the
  // per-group maxima side by side: B x (groups_per_block * D).
  Mat block_group_rowmax(const Mat& a, int block_rows,
                         const std::vector<std::vector<std::vector<int>>>& groups) {
    const Matrix& x = value(a);
    const long batch = static_cast<long>(groups.size());
    require(x.rows() == batch * block_rows, "block_group_rowmax: shape");
    const long dim = x.cols();
    const long per = static_cast<long>(groups.front().size());
    Matrix y(batch, per * dim);
    Eigen::MatrixXi arg(batch, per * dim);
    for (long b = 0; b < batch; ++b) {
      for (long gidx = 0; gidx < per; ++gidx) {
        const auto& rows = groups[b][gidx];
        require(!rows.empty(), "block_group_rowmax: empty group");
        for (long c = 0; c < dim; ++c) {
          double best = -std::numeric_limits<double>::infinity();
          int best_row = -1;
          for (int r : rows) {
            const double v = x(b * block_rows + r, c);
            if (v > best) {
              best = v;
              best_row = static_cast<int>(b * block_rows + r);
            }
          }
          y(b, gidx * dim + c) = best;
          arg(b, gidx * dim + c) = best_row;
        }
      }
    }
    const int ai = a.index;
    return push(std::move(y), needs(a),
                [ai, arg = std::move(arg)](Tape& t, const Node& out) {
                  if (!t.node_needs(ai)) return;
                  Matrix& g = t.grad_ref(ai);
                  for (long b = 0; b < out.grad.rows(); ++b)
                    for (long c = 0; c < out.grad.cols(); ++c)
                      g(arg(b, c), c % g.cols()) += out.grad(b, c);
                });
  }

  // Picks one row of `a` per output row.
  Mat gather_rows(const Mat& a, std::vector<int> rows) {
    const Matrix& x = value(a);
    Matrix y(static_cast<long>(rows.size()), x.cols());
    for (std::size_t b = 0; b < rows.size(); ++b) y.row(b) = x.row(rows[b]);
    const int ai = a.index;
    return push(std::move(y), needs(a),
                [ai, rows = std::move(rows)](Tape& t, const Node& out) {
                  if (!t.node_needs(ai)) return;
                  Matrix& g = t.grad_ref(ai);
                  for (std::size_t b = 0; b < rows.size(); ++b)
                    g.row(rows[b]) += out.grad.row(b);
                });
  }

  // Repeats a 1xD row `count` times.
  Mat broadcast_row(const Mat& a, int count) {
    const Matrix& x = value(a);
    require(x.rows() == 1, "broadcast_row: expected a single row");
    Matrix y = x.replicate(count, 1);
    const int ai = a.index;
    return push(std::move(y), needs(a), [ai](Tape& t, const Node& out) {
      if (t.node_needs(ai)) t.grad_ref(ai) += out.grad.colwise().sum();
    });
  }

  // Row-wise softmax with a hard mask: masked entries come out exactly 0.
  Mat softmax_masked(const Mat& logits,
                     const std::vector<std::vector<std::uint8_t>>& mask) {
    const Matrix& x = value(logits);
    require(static_cast<long>(mask.size()) == x.rows(),
            "softmax_masked: mask rows");
    Matrix y = Matrix::Zero(x.rows(), x.cols());
    for (long r = 0; r < x.rows(); ++r) {
      require(static_cast<long>(mask[r].size()) == x.cols(),
              "softmax_masked: mask cols");
      double mx = -std::numeric_limits<double>::infinity();
      for (long c = 0; c < x.cols(); ++c)
        if (mask[r][c]) mx = std::max(mx, x(r, c));
      require(std::isfinite(mx), "softmax_masked: empty mask row");
      double sum = 0.0;
      for (long c = 0; c < x.cols(); ++c) {
        if (!mask[r][c]) continue;
        y(r, c) = std::exp(x(r, c) - mx);
        sum += y(r, c);
      }
      y.row(r) /= sum;
    }
    const int xi = logits.index;
    return push(std::move(y), needs(logits), [xi](Tape& t, const Node& out) {
      if (!t.node_needs(xi)) return;
      Matrix& g = t.grad_ref(xi);
      for (long r = 0; r < out.grad.rows(); ++r) {
        const auto p = out.value.row(r).array();
        const auto go = out.grad.row(r).array();
        const double dot = (go * p).sum();
        g.row(r).array() += p * (go - dot);
      }
    });
  }

  // log of one picked probability per row; inactive rows contribute 0.
  Mat gather_log(const Mat& probs, std::vector<int> picks,
                 std::vector<std::uint8_t> active) {
    const Matrix& p = value(probs);
    require(static_cast<long>(picks.size()) == p.rows() &&
                active.size() == picks.size(),
            "gather_log: shape");
    Matrix y = Matrix::Zero(p.rows(), 1);
    for (long b = 0; b < p.rows(); ++b) {
      if (!active[b]) continue;
      const double v = p(b, picks[b]);
      require(v > 0.0, "gather_log: picked a zero-probability action");
      y(b, 0) = std::log(v);
    }
    const int pi = probs.index;
    return push(std::move(y), needs(probs),
                [pi, picks = std::move(picks),
                 active = std::move(active)](Tape& t, const Node& out) {
                  if (!t.node_needs(pi)) return;
                  Matrix& g = t.grad_ref(pi);
                  for (long b = 0; b < out.grad.rows(); ++b)
                    if (active[b])
                      g(b, picks[b]) +=
                          out.grad(b, 0) / t.val(pi)(b, picks[b]);
                });
  }

  Mat sum_all(const Mat& x) {
    Matrix y(1, 1);
    y(0, 0) = value(x).sum();
    const int xi = x.index;
    return push(std::move(y), needs(x), [xi](Tape& t, const Node& out) {
      if (t.node_needs(xi)) t.grad_ref(xi).array() += out.grad(0, 0);
    });
  }

  // Scalar: sum_b weights[b] * x(b,0) * s.
  Mat weighted_sum(const Mat& x, std::vector<double> weights, double s = 1.0) {
    const Matrix& xv = value(x);
    require(xv.cols() == 1 &&
                static_cast<long>(weights.size()) == xv.rows(),
            "weighted_sum: shape");
    double acc = 0.0;
    for (long b = 0; b < xv.rows(); ++b) acc += weights[b] * xv(b, 0);
    Matrix y(1, 1);
    y(0, 0) = acc * s;
    const int xi = x.index;
    return push(std::move(y), needs(x),
                [xi, s, weights = std::move(weights)](Tape& t,
                                                      const Node& out) {
                  if (!t.node_needs(xi)) return;
                  Matrix& g = t.grad_ref(xi);
                  for (long b = 0; b < g.rows(); ++b)
                    g(b, 0) += out.grad(0, 0) * weights[b] * s;
                });
  }

  // Batch normalization over rows (training mode): per-column statistics
  // across all rows. Running stats are updated in place when given.
  Mat batchnorm_train(const Mat& x, const Mat& gamma, const Mat& beta,
                      Eigen::RowVectorXd* running_mean = nullptr,
                      Eigen::RowVectorXd* running_var = nullptr,
                      double momentum = 0.1, double eps = 1e-5) {
    const Matrix& xv = value(x);
    const long rows = xv.rows();
    require(rows >= 1, "batchnorm_train: empty input");
    Eigen::RowVectorXd mean = xv.colwise().mean();
    Matrix centered = xv.rowwise() - mean;
    Eigen::RowVectorXd var =
        centered.array().square().colwise().sum() / static_cast<double>(rows);
    Eigen::RowVectorXd inv_std = (var.array() + eps).sqrt().inverse();
    Matrix xhat = centered * inv_std.asDiagonal();
    Eigen::RowVectorXd gamma_row = value(gamma).row(0);
    Eigen::RowVectorXd beta_row = value(beta).row(0);
    Matrix y = (xhat * gamma_row.asDiagonal()).rowwise() + beta_row;
    if (running_mean != nullptr && running_var != nullptr) {
      const double unbias =
          rows > 1 ? static_cast<double>(rows) / (rows - 1) : 1.0;
      *running_mean = (1.0 - momentum) * (*running_mean) + momentum * mean;
      *running_var =
          (1.0 - momentum) * (*running_var) + momentum * (var * unbias);
    }
    const int xi = x.index, gi = gamma.index, bi = beta.index;
    return push(
        std::move(y), needs(x) || needs(gamma) || needs(beta),
        [xi, gi, bi, xhat = std::move(xhat), inv_std = std::move(inv_std),
         rows](Tape& t, const Node& out) {
          const Matrix& g = out.grad;
          if (t.node_needs(gi))
            t.grad_ref(gi) +=
                (g.array() * xhat.array()).colwise().sum().matrix();
          if (t.node_needs(bi)) t.grad_ref(bi) += g.colwise().sum();
          if (!t.node_needs(xi)) return;
          Eigen::RowVectorXd gamma_row = t.val(gi).row(0);
          Matrix dxhat = g * gamma_row.asDiagonal();
          Eigen::RowVectorXd sum_dxhat = dxhat.colwise().sum();
          Eigen::RowVectorXd sum_dxhat_xhat =
              (dxhat.array() * xhat.array()).colwise().sum();
          Matrix dx = dxhat * static_cast<double>(rows) -
                      xhat * sum_dxhat_xhat.asDiagonal();
          dx.rowwise() -= sum_dxhat;
          Eigen::RowVectorXd scl = inv_std / static_cast<double>(rows);
          t.grad_ref(xi) += dx * scl.asDiagonal();
        });
  }

  // Batch normalization with frozen statistics (inference mode).
  Mat batchnorm_infer(const Mat& x, const Mat& gamma, const Mat& beta,
                      const Eigen::RowVectorXd& mean,
                      const Eigen::RowVectorXd& var, double eps = 1e-5) {
    const Matrix& xv = value(x);
    Eigen::RowVectorXd inv_std = (var.array() + eps).sqrt().inverse();
    Matrix xhat = (xv.rowwise() - mean) * inv_std.asDiagonal();
    Eigen::RowVectorXd gamma_row = value(gamma).row(0);
    Eigen::RowVectorXd beta_row = value(beta).row(0);
    Matrix y = (xhat * gamma_row.asDiagonal()).rowwise() + beta_row;
    const int xi = x.index, gi = gamma.index, bi = beta.index;
    return push(std::move(y), needs(x) || needs(gamma) || needs(beta),
                [xi, gi, bi, xhat = std::move(xhat),
                 inv_std = std::move(inv_std)](Tape& t, const Node& out) {
                  const Matrix& g = out.grad;
                  if (t.node_needs(gi))
                    t.grad_ref(gi) +=
                        (g.array() * xhat.array()).colwise().sum().matrix();
                  if (t.node_needs(bi)) t.grad_ref(bi) += g.colwise().sum();
                  if (t.node_needs(xi)) {
                    Eigen::RowVectorXd scl =
                        (t.val(gi).row(0).array() * inv_std.array()).matrix();
                    t.grad_ref(xi) += g * scl.asDiagonal();
                  }
                });
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool needs_grad = false;
    std::function<void(Tape&, const Node&)> backward;
  };

  friend struct Mat;

  bool needs(const Mat& m) const {
    return m.valid() && nodes_[m.index].needs_grad;
  }
  bool node_needs(int i) const { return i >= 0 && nodes_[i].needs_grad; }
  const Matrix& val(int i) const { return nodes_[i].value; }

  Matrix& grad_ref(int i) {
    Node& n = nodes_[i];
    if (n.grad.size() == 0)
      n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  template <class Fn>
  Mat push(Matrix value, bool needs_grad, Fn&& bw) {
    Node node;
    node.value = std::move(value);
    node.needs_grad = needs_grad && recording_;
    if (node.needs_grad)
      if constexpr (!std::is_same_v<std::decay_t<Fn>, std::nullptr_t>)
        node.backward = std::forward<Fn>(bw);
    nodes_.push_back(std::move(node));
    const int idx = static_cast<int>(nodes_.size()) - 1;
    return Mat{this, idx};
  }

  bool recording_ = true;
  std::vector<Node> nodes_;
};

inline const Matrix& Mat::value() const { return tape->value(*this); }

}  // namespace hcvrp::ad
