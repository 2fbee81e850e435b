#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <functional>

#include "hcvrp/autodiff.hpp"
#include "hcvrp/rng.hpp"

using namespace hcvrp;
using ad::Matrix;

namespace {

Matrix random_matrix(long rows, long cols, Rng& rng, double scale = 1.0) {
  Matrix m(rows, cols);
  for (long r = 0; r < rows; ++r)
    for (long c = 0; c < cols; ++c) m(r, c) = rng.uniform(-scale, scale);
  return m;
}

// Central finite differences of a scalar function of several matrices,
// compared entry-wise against the tape gradients.
void check_gradients(
    std::vector<Matrix> inputs,
    const std::function<ad::Mat(ad::Tape&, const std::vector<ad::Mat>&)>& f,
    double tol = 1e-6, double eps = 1e-6) {
  ad::Tape tape;
  std::vector<ad::Mat> leaves;
  for (auto& m : inputs) leaves.push_back(tape.leaf(m, true));
  const ad::Mat loss = f(tape, leaves);
  REQUIRE(loss.value().size() == 1);
  tape.backward(loss);
  std::vector<Matrix> grads;
  for (const auto& leaf : leaves) grads.push_back(tape.grad(leaf));

  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (long r = 0; r < inputs[k].rows(); ++r) {
      for (long c = 0; c < inputs[k].cols(); ++c) {
        auto eval = [&](double delta) {
          std::vector<Matrix> shifted = inputs;
          shifted[k](r, c) += delta;
          ad::Tape t2;
          std::vector<ad::Mat> l2;
          for (auto& m : shifted) l2.push_back(t2.leaf(m, true));
          return f(t2, l2).value()(0, 0);
        };
        const double fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
        const double got = grads[k](r, c);
        const double denom = std::max({1.0, std::abs(fd), std::abs(got)});
        INFO("input ", k, " entry (", r, ",", c, "): fd=", fd, " ad=", got);
        CHECK(std::abs(fd - got) / denom < tol);
      }
    }
  }
}

}  // namespace

TEST_CASE("linear with bias") {
  Rng rng(1);
  check_gradients(
      {random_matrix(3, 4, rng), random_matrix(4, 5, rng),
       random_matrix(1, 5, rng)},
      [](ad::Tape& t, const std::vector<ad::Mat>& in) {
        return t.sum_all(t.linear(in[0], in[1], in[2]));
      });
}

TEST_CASE("relu, tanh, add, scale chain") {
  Rng rng(2);
  check_gradients(
      {random_matrix(3, 3, rng), random_matrix(3, 3, rng)},
      [](ad::Tape& t, const std::vector<ad::Mat>& in) {
        const auto a = t.relu(in[0]);
        const auto b = t.tanh(in[1]);
        return t.sum_all(t.scale(t.add(a, b), 1.7));
      });
}

TEST_CASE("concat_cols and block_row_mean") {
  Rng rng(3);
  check_gradients(
      {random_matrix(6, 2, rng), random_matrix(6, 3, rng)},
      [](ad::Tape& t, const std::vector<ad::Mat>& in) {
        const auto cat = t.concat_cols({in[0], in[1]});
        return t.sum_all(t.tanh(t.block_row_mean(cat, 3)));
      });
}

TEST_CASE("block_attention (two blocks, two heads)") {
  Rng rng(4);
  const int batch = 2, nq = 3, nk = 4, dim = 4;
  check_gradients(
      {random_matrix(batch * nq, dim, rng), random_matrix(batch * nk, dim, rng),
       random_matrix(batch * nk, dim, rng)},
      [=](ad::Tape& t, const std::vector<ad::Mat>& in) {
        return t.sum_all(
            t.tanh(t.block_attention(in[0], in[1], in[2], batch, nq, nk, 2)));
      },
      1e-5);
}

TEST_CASE("block_dot") {
  Rng rng(5);
  check_gradients(
      {random_matrix(3, 4, rng), random_matrix(9, 4, rng)},
      [](ad::Tape& t, const std::vector<ad::Mat>& in) {
        return t.sum_all(t.tanh(t.block_dot(in[0], in[1], 3, 0.5)));
      });
}

TEST_CASE("block_group_rowmax") {
  Rng rng(6);
  const std::vector<std::vector<std::vector<int>>> groups = {
      {{0, 1}, {2}}, {{1, 2, 3}, {0, 3}}};
  check_gradients(
      {random_matrix(8, 3, rng)},
      [&](ad::Tape& t, const std::vector<ad::Mat>& in) {
        return t.sum_all(t.tanh(t.block_group_rowmax(in[0], 4, groups)));
      });
}

TEST_CASE("gather_rows and broadcast_row") {
  Rng rng(7);
  check_gradients(
      {random_matrix(5, 3, rng), random_matrix(1, 3, rng)},
      [](ad::Tape& t, const std::vector<ad::Mat>& in) {
        const auto picked = t.gather_rows(in[0], {4, 0, 2});
        const auto wide = t.broadcast_row(in[1], 3);
        return t.sum_all(t.tanh(t.add(picked, wide)));
      });
}

TEST_CASE("softmax_masked and gather_log") {
  Rng rng(8);
  const std::vector<std::vector<std::uint8_t>> mask = {
      {1, 1, 0, 1}, {0, 1, 1, 1}, {1, 1, 1, 1}};
  check_gradients(
      {random_matrix(3, 4, rng)},
      [&](ad::Tape& t, const std::vector<ad::Mat>& in) {
        const auto p = t.softmax_masked(in[0], mask);
        // masked entries are exactly zero
        REQUIRE(p.value()(0, 2) == 0.0);
        REQUIRE(p.value()(1, 0) == 0.0);
        const auto logs = t.gather_log(p, {0, 2, 3}, {1, 1, 1});
        return t.weighted_sum(logs, {1.0, -2.0, 0.5});
      });
}

TEST_CASE("gather_log skips inactive rows") {
  ad::Tape tape;
  Matrix probs(2, 2);
  probs << 0.25, 0.75, 0.5, 0.5;
  const auto leaf = tape.leaf(probs, true);
  const auto logs = tape.gather_log(leaf, {1, 0}, {1, 0});
  CHECK(logs.value()(0, 0) == doctest::Approx(std::log(0.75)));
  CHECK(logs.value()(1, 0) == 0.0);
}

TEST_CASE("batchnorm training mode") {
  Rng rng(9);
  check_gradients(
      {random_matrix(6, 3, rng), random_matrix(1, 3, rng, 0.5),
       random_matrix(1, 3, rng, 0.5)},
      [](ad::Tape& t, const std::vector<ad::Mat>& in) {
        return t.sum_all(
            t.tanh(t.batchnorm_train(in[0], in[1], in[2])));
      },
      1e-5);
}

TEST_CASE("batchnorm inference mode") {
  Rng rng(10);
  Eigen::RowVectorXd mean(3), var(3);
  mean << 0.1, -0.2, 0.3;
  var << 1.2, 0.8, 2.0;
  check_gradients(
      {random_matrix(4, 3, rng), random_matrix(1, 3, rng, 0.5),
       random_matrix(1, 3, rng, 0.5)},
      [&](ad::Tape& t, const std::vector<ad::Mat>& in) {
        return t.sum_all(
            t.tanh(t.batchnorm_infer(in[0], in[1], in[2], mean, var)));
      });
}

TEST_CASE("batchnorm running statistics update") {
  ad::Tape tape(false);
  Matrix x(4, 2);
  x << 1, 10, 2, 20, 3, 30, 4, 40;
  Eigen::RowVectorXd rm = Eigen::RowVectorXd::Zero(2);
  Eigen::RowVectorXd rv = Eigen::RowVectorXd::Ones(2);
  const auto g = tape.constant(Matrix::Ones(1, 2));
  const auto b = tape.constant(Matrix::Zero(1, 2));
  tape.batchnorm_train(tape.constant(x), g, b, &rm, &rv, 0.1);
  CHECK(rm(0) == doctest::Approx(0.1 * 2.5));
  CHECK(rm(1) == doctest::Approx(0.1 * 25.0));
  // unbiased variance of {1,2,3,4} is 5/3
  CHECK(rv(0) == doctest::Approx(0.9 + 0.1 * 5.0 / 3.0));
}

TEST_CASE("non-recording tape computes values without gradients") {
  ad::Tape tape(false);
  Rng rng(11);
  const auto x = tape.leaf(random_matrix(3, 3, rng), true);
  const auto y = tape.sum_all(tape.relu(x));
  CHECK(y.value().size() == 1);
  CHECK_THROWS_AS(tape.backward(y), ContractViolation);
}

TEST_CASE("composite network-like graph") {
  Rng rng(12);
  // Two-layer toy: attention over 2 blocks, mean pool, linear head.
  const int batch = 2, nodes = 3, dim = 4;
  check_gradients(
      {random_matrix(batch * nodes, dim, rng), random_matrix(dim, dim, rng),
       random_matrix(dim, dim, rng), random_matrix(dim, dim, rng),
       random_matrix(dim, 1, rng)},
      [=](ad::Tape& t, const std::vector<ad::Mat>& in) {
        const auto q = t.linear(in[0], in[1]);
        const auto k = t.linear(in[0], in[2]);
        const auto v = t.linear(in[0], in[3]);
        const auto z = t.block_attention(q, k, v, batch, nodes, nodes, 2);
        const auto pooled = t.block_row_mean(z, nodes);
        return t.sum_all(t.linear(pooled, in[4]));
      },
      1e-5);
}
