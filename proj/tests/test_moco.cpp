#include <cmath>
#include <deque>
#include <vector>

#include "doctest.h"
#include "retseg/moco.hpp"
#include "retseg/nn.hpp"

using namespace retseg;

namespace {

Tensor unit_rows(int n, int d, RngStream& rng) {
  Tensor t = Tensor::zeros({n, d});
  for (auto& v : t.data()) v = rng.normal();
  return l2_normalize<float>(nullptr, t);
}

// Independent reference: per-sample softmax cross-entropy with the positive
// at class 0, all in double.
double ce_oracle(const Tensor& q, const Tensor& k_pos, const Tensor& queue, double tau) {
  const int n = q.dim(0), d = q.dim(1);
  const int kneg = queue.defined() && queue.size() > 0 ? queue.dim(0) : 0;
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    std::vector<double> logits;
    double dot = 0.0;
    for (int j = 0; j < d; ++j)
      dot += static_cast<double>(q.data()[i * d + j]) * k_pos.data()[i * d + j];
    logits.push_back(dot / tau);
    for (int m = 0; m < kneg; ++m) {
      double acc = 0.0;
      for (int j = 0; j < d; ++j)
        acc += static_cast<double>(q.data()[i * d + j]) * queue.data()[m * d + j];
      logits.push_back(acc / tau);
    }
    double z = 0.0;
    for (double l : logits) z += std::exp(l);
    total += -std::log(std::exp(logits[0]) / z);
  }
  return total / n;
}

}  // namespace

TEST_SUITE("moco") {

TEST_CASE("info_nce closed form: ln(1 + 2/e)") {
  Tensor q = Tensor::from_data({1, 2}, {1.0f, 0.0f});
  Tensor k = Tensor::from_data({1, 2}, {1.0f, 0.0f});
  Tensor queue = Tensor::from_data({2, 2}, {0.0f, 1.0f, 0.0f, -1.0f});
  Tensor loss = info_nce(nullptr, q, k, queue, 1.0f);
  CHECK(loss.item() == doctest::Approx(std::log(1.0 + 2.0 / std::exp(1.0))).epsilon(1e-6));
}

TEST_CASE("info_nce matches the cross-entropy oracle on 1000 random instances") {
  RngStream rng(17);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 1 + rng.uniform_int(4);
    const int d = 2 + rng.uniform_int(6);
    const int kneg = rng.uniform_int(9);
    Tensor q = unit_rows(n, d, rng);
    Tensor k = unit_rows(n, d, rng);
    Tensor queue = kneg > 0 ? unit_rows(kneg, d, rng) : Tensor();
    const float tau = 0.05f + 0.5f * rng.uniform();
    Tensor loss = info_nce(nullptr, q, k, queue, tau);
    worst = std::max(worst, std::abs(loss.item() - ce_oracle(q, k, queue, tau)));
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("info_nce gradient reaches q only and matches finite differences") {
  RngStream rng(5);
  Tensor q = unit_rows(3, 6, rng);
  Tensor k = unit_rows(3, 6, rng);
  Tensor queue = unit_rows(7, 6, rng);
  q.set_requires_grad(true);
  k.set_requires_grad(true);
  FloatTape tape;
  Tensor loss = info_nce(&tape, q, k, queue, 0.2f);
  backward(loss);
  CHECK(!k.has_grad());

  double diff_sq = 0.0, num_sq = 0.0;
  for (std::size_t idx = 0; idx < q.size(); ++idx) {
    Tensor qp = q.clone();
    const float eps = 1e-3f;
    qp.data()[idx] += eps;
    const double fp = ce_oracle(qp, k, queue, 0.2);
    qp.data()[idx] -= 2 * eps;
    const double fm = ce_oracle(qp, k, queue, 0.2);
    const double numeric = (fp - fm) / (2.0 * eps);
    diff_sq += (numeric - q.grad()[idx]) * (numeric - q.grad()[idx]);
    num_sq += numeric * numeric;
  }
  CHECK(std::sqrt(diff_sq) / std::sqrt(num_sq) < 1e-3);
}

TEST_CASE("info_nce is invariant to queue row order") {
  RngStream rng(23);
  Tensor q = unit_rows(2, 4, rng);
  Tensor k = unit_rows(2, 4, rng);
  Tensor queue = unit_rows(6, 4, rng);
  Tensor perm = Tensor::zeros({6, 4});
  const int order[6] = {4, 0, 5, 2, 1, 3};
  for (int m = 0; m < 6; ++m)
    for (int j = 0; j < 4; ++j) perm.data()[m * 4 + j] = queue.data()[order[m] * 4 + j];
  const float a = info_nce(nullptr, q, k, queue, 0.07f).item();
  const float b = info_nce(nullptr, q, k, perm, 0.07f).item();
  CHECK(a == doctest::Approx(b).epsilon(1e-7));
}

TEST_CASE("info_nce rejects non-positive temperature") {
  Tensor q = Tensor::zeros({1, 2});
  CHECK_THROWS_AS(info_nce(nullptr, q, q, Tensor(), 0.0f), ValueError);
}

TEST_CASE("key queue replays a FIFO ring buffer exactly") {
  for (int cap : {4, 16, 4096}) {
    RngStream rng = RngStream::keyed(31, {static_cast<std::uint64_t>(cap)});
    const int d = 3;
    KeyQueue queue(cap, d);
    // reference: every inserted row with global index g lands in slot g % cap
    std::vector<std::vector<float>> slots(static_cast<std::size_t>(cap));
    long g = 0;
    for (int round = 0; round < 12; ++round) {
      const int n = 1 + rng.uniform_int(std::min(cap, 64));
      Tensor keys = unit_rows(n, d, rng);
      queue.enqueue(keys);
      for (int i = 0; i < n; ++i, ++g) {
        auto& slot = slots[static_cast<std::size_t>(g % cap)];
        slot.assign(keys.data().begin() + i * d, keys.data().begin() + (i + 1) * d);
      }
      CHECK(queue.filled() == std::min<long>(g, cap));
      CHECK(queue.ptr() == static_cast<int>(g % cap));
      Tensor snap = queue.snapshot();
      REQUIRE(snap.dim(0) == queue.filled());
      for (int s = 0; s < snap.dim(0); ++s)
        for (int j = 0; j < d; ++j)
          CHECK(snap.data()[s * d + j] == slots[static_cast<std::size_t>(s)][static_cast<std::size_t>(j)]);
    }
  }
}

TEST_CASE("key queue rejects oversized batches and bad shapes") {
  KeyQueue queue(4, 3);
  RngStream rng(1);
  CHECK_THROWS_AS(queue.enqueue(unit_rows(5, 3, rng)), ValueError);
  CHECK_THROWS_AS(queue.enqueue(unit_rows(2, 2, rng)), ShapeError);
}

TEST_CASE("momentum update fixed points") {
  UNetConfig cfg;
  cfg.encoder_levels = 2;
  cfg.base_filters = 4;
  MoCoState st = make_moco_state(cfg, 8, 3);

  // construction already applied alpha=0: exact copy
  for (std::size_t i = 0; i < st.theta_m.size(); ++i) {
    const auto& em = st.theta_m.entries()[i].tensor;
    const auto& ee = st.theta_e.entries()[i].tensor;
    for (std::size_t k = 0; k < em.size(); ++k) CHECK(em.data()[k] == ee.data()[k]);
  }

  // perturb the query side, alpha=1 must leave trainable entries untouched
  for (auto& e : st.theta_e.entries())
    for (auto& v : e.tensor.data()) v += 0.25f;
  std::vector<std::vector<float>> before;
  for (const auto& e : st.theta_m.entries()) before.push_back(e.tensor.data());
  momentum_update(st.theta_m, st.theta_e, 1.0f);
  for (std::size_t i = 0; i < st.theta_m.size(); ++i) {
    const auto& e = st.theta_m.entries()[i];
    if (!e.trainable) continue;  // buffers are copied outright at any alpha
    for (std::size_t k = 0; k < e.tensor.size(); ++k)
      CHECK(e.tensor.data()[k] == before[i][k]);
  }

  momentum_update(st.theta_m, st.theta_e, 0.0f);
  for (std::size_t i = 0; i < st.theta_m.size(); ++i) {
    const auto& em = st.theta_m.entries()[i].tensor;
    const auto& ee = st.theta_e.entries()[i].tensor;
    for (std::size_t k = 0; k < em.size(); ++k) CHECK(em.data()[k] == ee.data()[k]);
  }
}

TEST_CASE("pretrain_step trains the query but never the momentum encoder") {
  UNetConfig cfg;
  cfg.encoder_levels = 2;
  cfg.base_filters = 4;
  MoCoState st = make_moco_state(cfg, 16, 7);
  AdamState adam(st.theta_e);
  RngStream rng(41);
  Tensor va = Tensor::zeros({2, 3, 8, 8});
  Tensor vb = Tensor::zeros({2, 3, 8, 8});
  for (auto& v : va.data()) v = rng.uniform();
  for (auto& v : vb.data()) v = rng.uniform();

  // pre-fill so negatives exist
  st.queue.enqueue(unit_rows(8, cfg.encoder_channel_widths().back(), rng));

  std::vector<float> query_before = st.query.encoder[0].block1.w.data();
  std::vector<float> mom_before = st.momentum.encoder[0].block1.w.data();
  const float loss = pretrain_step(st, adam, va, vb, 1e-3f, 0.0f);
  CHECK(std::isfinite(loss));
  CHECK(loss > 0.0f);

  // analytic gradient of theta_m is identically zero: no grad buffer was
  // ever allocated for the momentum entries
  for (const auto& e : st.theta_m.entries()) {
    if (!e.trainable) continue;
    if (e.tensor.has_grad())
      for (float gv : e.tensor.grad()) CHECK(gv == 0.0f);
  }

  bool query_changed = false;
  for (std::size_t i = 0; i < query_before.size(); ++i)
    if (st.query.encoder[0].block1.w.data()[i] != query_before[i]) query_changed = true;
  CHECK(query_changed);

  // momentum weights moved by EMA toward the new query weights
  for (std::size_t i = 0; i < mom_before.size(); ++i) {
    const float expected = st.alpha * mom_before[i] +
                           (1.0f - st.alpha) * st.query.encoder[0].block1.w.data()[i];
    CHECK(st.momentum.encoder[0].block1.w.data()[i] == doctest::Approx(expected).epsilon(1e-6));
  }

  // the key batch was enqueued
  CHECK(st.queue.filled() == 10);
}

TEST_CASE("projection head output is l2-normalized") {
  RngStream rng(2);
  ProjectionHead head = build_projection_head(8, rng);
  Tensor feats = he_init({3, 8, 4, 4}, 8, rng);
  Tensor out = project<float>(nullptr, feats, head);
  REQUIRE(out.dim(0) == 3);
  REQUIRE(out.dim(1) == 8);
  for (int i = 0; i < 3; ++i) {
    double ss = 0.0;
    for (int j = 0; j < 8; ++j) ss += static_cast<double>(out.data()[i * 8 + j]) * out.data()[i * 8 + j];
    CHECK(std::sqrt(ss) == doctest::Approx(1.0).epsilon(1e-5));
  }
  Tensor bad = he_init({1, 4, 4, 4}, 4, rng);
  CHECK_THROWS_AS(project<float>(nullptr, bad, head), ShapeError);
}

TEST_CASE("encoder checkpoint keeps encoder entries, optionally the head") {
  UNetConfig cfg;
  cfg.encoder_levels = 2;
  cfg.base_filters = 4;
  MoCoState st = make_moco_state(cfg, 4, 1);
  CheckpointData enc = encoder_checkpoint_data(st, false);
  CheckpointData with_head = encoder_checkpoint_data(st, true);
  CHECK(enc.tensors.size() > 0);
  CHECK(with_head.tensors.size() == enc.tensors.size() + 4);
  for (const auto& [name, t] : enc.tensors) CHECK(name.rfind("encoder.", 0) == 0);
}

}  // TEST_SUITE
