// Acceptance gate: runs every top-level acceptance criterion and prints one
// PASS/FAIL line each. Exit code 0 only when all criteria hold.
//
// Usage: retseg_acceptance [name-substring ...]
//   With arguments, only criteria whose name contains one of the substrings
//   run (useful while calibrating the desk-scale experiments).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "retseg/augment.hpp"
#include "retseg/checkpoint.hpp"
#include "retseg/config.hpp"
#include "retseg/data.hpp"
#include "retseg/eval.hpp"
#include "retseg/gradcheck.hpp"
#include "retseg/moco.hpp"
#include "retseg/probe.hpp"
#include "retseg/train.hpp"
#include "retseg/unet.hpp"

using namespace retseg;
namespace fs = std::filesystem;
using clk = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

Tensor rand_weights(const std::vector<int>& shape, RngStream& rng) {
  Tensor t = Tensor::zeros(shape);
  for (auto& v : t.data()) v = rng.normal();
  return t;
}

// ---------------------------------------------------------------------------
// gradient correctness: every differentiable primitive, 20 seeds, f64 oracle
// ---------------------------------------------------------------------------

template <class MakeInputs, class F32, class F64>
double sweep(MakeInputs make_inputs, F32 f32, F64 f64, int seeds = 20) {
  double worst = 0.0;
  for (std::uint64_t s = 1; s <= static_cast<std::uint64_t>(seeds); ++s) {
    RngStream rng = RngStream::keyed(s, {0xACC3u});
    std::vector<Tensor> inputs = make_inputs(rng);
    GradCheckOptions opt;
    opt.eps = 1e-4;
    worst = std::max(worst,
                     grad_check(
                         inputs, [&](FloatTape* t) { return f32(t, inputs); },
                         [&](const std::vector<TensorT<double>>& in) { return f64(in); }, opt));
  }
  return worst;
}

Outcome check_gradients() {
  const auto t0 = clk::now();
  std::ostringstream detail;
  double worst_primitive = 0.0;
  auto track = [&](const char* name, double err) {
    worst_primitive = std::max(worst_primitive, err);
    if (err >= 1e-3) detail << " " << name << "=" << err;
  };

  Tensor w, b, rw;
  track("conv2d", sweep(
                      [&](RngStream& rng) {
                        Tensor x = he_init({2, 3, 5, 5}, 3, rng);
                        w = he_init({4, 3, 3, 3}, 27, rng);
                        b = he_init({4}, 4, rng);
                        rw = rand_weights({2, 4, 5, 5}, rng);
                        return std::vector<Tensor>{x, w, b};
                      },
                      [&](FloatTape* t, std::vector<Tensor>& in) {
                        return sum(t, mul(t, conv2d(t, in[0], in[1], in[2], 1, Pad::Same), rw));
                      },
                      [&](const std::vector<TensorT<double>>& in) {
                        Tape<double> t;
                        auto y = conv2d<double>(&t, in[0], in[1], in[2], 1, Pad::Same);
                        return sum(&t, mul(&t, y, to_double(rw))).item();
                      }));

  track("conv_transpose2d", sweep(
                                [&](RngStream& rng) {
                                  Tensor x = he_init({1, 3, 4, 4}, 3, rng);
                                  w = he_init({3, 2, 2, 2}, 12, rng);
                                  b = he_init({2}, 2, rng);
                                  rw = rand_weights({1, 2, 8, 8}, rng);
                                  return std::vector<Tensor>{x, w, b};
                                },
                                [&](FloatTape* t, std::vector<Tensor>& in) {
                                  return sum(t, mul(t, conv_transpose2d(t, in[0], in[1], in[2]), rw));
                                },
                                [&](const std::vector<TensorT<double>>& in) {
                                  Tape<double> t;
                                  auto y = conv_transpose2d<double>(&t, in[0], in[1], in[2]);
                                  return sum(&t, mul(&t, y, to_double(rw))).item();
                                }));

  track("maxpool2", sweep(
                        [&](RngStream& rng) {
                          // distinct well-separated values: no window ties,
                          // so the finite-difference step stays off the kink
                          Tensor x = Tensor::zeros({2, 2, 6, 6});
                          for (std::size_t i = 0; i < x.data().size(); ++i)
                            x.data()[i] = static_cast<float>(i) * 0.013f - 0.9f;
                          for (std::size_t i = x.data().size(); i > 1; --i)
                            std::swap(x.data()[i - 1],
                                      x.data()[static_cast<std::size_t>(
                                          rng.uniform_int(static_cast<int>(i)))]);
                          rw = rand_weights({2, 2, 3, 3}, rng);
                          return std::vector<Tensor>{x};
                        },
                        [&](FloatTape* t, std::vector<Tensor>& in) {
                          return sum(t, mul(t, maxpool2(t, in[0]), rw));
                        },
                        [&](const std::vector<TensorT<double>>& in) {
                          Tape<double> t;
                          return sum(&t, mul(&t, maxpool2(&t, in[0]), to_double(rw))).item();
                        }));

  track("relu+sigmoid", sweep(
                            [&](RngStream& rng) {
                              Tensor x = he_init({3, 7}, 7, rng);
                              rw = rand_weights({3, 7}, rng);
                              return std::vector<Tensor>{x};
                            },
                            [&](FloatTape* t, std::vector<Tensor>& in) {
                              return sum(t, mul(t, sigmoid(t, relu(t, in[0])), rw));
                            },
                            [&](const std::vector<TensorT<double>>& in) {
                              Tape<double> t;
                              return sum(&t, mul(&t, sigmoid(&t, relu(&t, in[0])), to_double(rw)))
                                  .item();
                            }));

  track("batchnorm-train", sweep(
                               [&](RngStream& rng) {
                                 Tensor x = he_init({2, 3, 4, 4}, 3, rng);
                                 Tensor gamma = Tensor::full({3}, 1.0f);
                                 Tensor beta = Tensor::zeros({3});
                                 for (auto& v : gamma.data()) v += 0.2f * rng.normal();
                                 for (auto& v : beta.data()) v = 0.2f * rng.normal();
                                 rw = rand_weights({2, 3, 4, 4}, rng);
                                 return std::vector<Tensor>{x, gamma, beta};
                               },
                               [&](FloatTape* t, std::vector<Tensor>& in) {
                                 BatchNormState st(3);
                                 st.gamma = in[1];
                                 st.beta = in[2];
                                 return sum(t, mul(t, batchnorm(t, in[0], st, Mode::Train), rw));
                               },
                               [&](const std::vector<TensorT<double>>& in) {
                                 Tape<double> t;
                                 BatchNormStateT<double> st(3);
                                 st.gamma = in[1];
                                 st.beta = in[2];
                                 return sum(&t, mul(&t, batchnorm(&t, in[0], st, Mode::Train),
                                                    to_double(rw)))
                                     .item();
                               }));

  Tensor rm, rv;
  track("batchnorm-eval", sweep(
                              [&](RngStream& rng) {
                                Tensor x = he_init({1, 2, 4, 4}, 2, rng);
                                rm = rand_weights({2}, rng);
                                rv = Tensor::from_data({2}, {0.7f, 1.9f});
                                rw = rand_weights({1, 2, 4, 4}, rng);
                                return std::vector<Tensor>{x};
                              },
                              [&](FloatTape* t, std::vector<Tensor>& in) {
                                BatchNormState st(2);
                                st.running_mean = rm.clone();
                                st.running_var = rv.clone();
                                return sum(t, mul(t, batchnorm(t, in[0], st, Mode::Eval), rw));
                              },
                              [&](const std::vector<TensorT<double>>& in) {
                                Tape<double> t;
                                BatchNormStateT<double> st(2);
                                st.running_mean = to_double(rm);
                                st.running_var = to_double(rv);
                                return sum(&t, mul(&t, batchnorm(&t, in[0], st, Mode::Eval),
                                                   to_double(rw)))
                                    .item();
                              }));

  track("gap+linear+l2norm", sweep(
                                 [&](RngStream& rng) {
                                   Tensor x = he_init({2, 3, 4, 4}, 3, rng);
                                   w = he_init({3, 5}, 3, rng);
                                   b = he_init({5}, 5, rng);
                                   rw = rand_weights({2, 5}, rng);
                                   return std::vector<Tensor>{x, w, b};
                                 },
                                 [&](FloatTape* t, std::vector<Tensor>& in) {
                                   Tensor v = linear(t, global_avg_pool(t, in[0]), in[1], in[2]);
                                   return sum(t, mul(t, l2_normalize(t, v), rw));
                                 },
                                 [&](const std::vector<TensorT<double>>& in) {
                                   Tape<double> t;
                                   auto v = linear(&t, global_avg_pool(&t, in[0]), in[1], in[2]);
                                   return sum(&t, mul(&t, l2_normalize(&t, v), to_double(rw)))
                                       .item();
                                 }));

  Tensor target;
  track("bce", sweep(
                   [&](RngStream& rng) {
                     Tensor x = he_init({1, 1, 4, 4}, 1, rng);
                     target = Tensor::zeros({1, 1, 4, 4});
                     for (auto& v : target.data()) v = rng.bernoulli(0.4f) ? 1.0f : 0.0f;
                     return std::vector<Tensor>{x};
                   },
                   [&](FloatTape* t, std::vector<Tensor>& in) {
                     return bce_masked(t, sigmoid(t, in[0]), target, Tensor());
                   },
                   [&](const std::vector<TensorT<double>>& in) {
                     Tape<double> t;
                     auto p = sigmoid(&t, in[0]);
                     return bce_masked<double>(&t, p, to_double(target), TensorT<double>()).item();
                   }));

  Tensor cb;
  track("elementwise+concat",
        sweep(
            [&](RngStream& rng) {
              Tensor a = he_init({1, 2, 2, 2}, 2, rng);
              cb = he_init({1, 3, 2, 2}, 3, rng);
              rw = rand_weights({1, 5, 2, 2}, rng);
              return std::vector<Tensor>{a, cb};
            },
            [&](FloatTape* t, std::vector<Tensor>& in) {
              Tensor c = concat_channels(t, in[0], in[1]);
              return mean(t, mul(t, sub(t, c, scale(t, c, 0.3f)), add(t, c, rw)));
            },
            [&](const std::vector<TensorT<double>>& in) {
              Tape<double> t;
              auto c = concat_channels(&t, in[0], in[1]);
              return mean(&t, mul(&t, sub(&t, c, scale(&t, c, 0.3)), add(&t, c, to_double(rw))))
                  .item();
            }));

  // full 16x16 U-Net composite
  double worst_composite = 0.0;
  for (std::uint64_t s = 1; s <= 5; ++s) {
    UNetConfig cfg;
    cfg.encoder_levels = 3;
    cfg.base_filters = 4;
    RngStream rng = RngStream::keyed(s, {0xC3u});
    UNetModel model = build_unet(cfg, rng);
    Tensor x = he_init({1, 3, 16, 16}, 3, rng);
    Tensor tgt = Tensor::zeros({1, 1, 16, 16});
    for (auto& v : tgt.data()) v = rng.bernoulli(0.3f) ? 1.0f : 0.0f;
    UNetModelT<double> dmodel = cast_unet<double>(model);
    GradCheckOptions opt;
    opt.max_coords_per_input = 6;
    opt.eps = 1e-4;
    worst_composite = std::max(
        worst_composite,
        grad_check(
            {x},
            [&](FloatTape* tape) {
              Tensor pred = forward(model, x, Mode::Train, tape);
              return bce_masked(tape, pred, tgt, Tensor());
            },
            [&](const std::vector<TensorT<double>>& in) {
              TensorT<double> pred =
                  forward(dmodel, in[0], Mode::Train, static_cast<Tape<double>*>(nullptr));
              return bce_masked<double>(nullptr, pred, to_double(tgt), TensorT<double>()).item();
            },
            opt));
  }

  const double secs = std::chrono::duration<double>(clk::now() - t0).count();
  Outcome o;
  o.pass = worst_primitive < 1e-3 && worst_composite < 1e-2 && secs < 300.0;
  std::ostringstream os;
  os << "primitives max rel err " << worst_primitive << " (< 1e-3), composite " << worst_composite
     << " (< 1e-2), " << secs << " s (< 300)";
  if (!detail.str().empty()) os << ", offenders:" << detail.str();
  o.detail = os.str();
  return o;
}

// ---------------------------------------------------------------------------
// InfoNCE oracle
// ---------------------------------------------------------------------------

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

Tensor unit_rows(int n, int d, RngStream& rng) {
  Tensor t = Tensor::zeros({n, d});
  for (auto& v : t.data()) v = rng.normal();
  return l2_normalize<float>(nullptr, t);
}

Outcome check_infonce() {
  Outcome o;
  // closed form: one positive at similarity 1, two orthogonal negatives, tau 1
  Tensor q = Tensor::from_data({1, 2}, {1.0f, 0.0f});
  Tensor kp = Tensor::from_data({1, 2}, {1.0f, 0.0f});
  Tensor negs = Tensor::from_data({2, 2}, {0.0f, 1.0f, 0.0f, -1.0f});
  const double closed = std::log(1.0 + 2.0 / std::exp(1.0));
  const double closed_err = std::abs(info_nce(nullptr, q, kp, negs, 1.0f).item() - closed);

  RngStream rng(17);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 1 + rng.uniform_int(4);
    const int d = 2 + rng.uniform_int(6);
    const int kneg = rng.uniform_int(9);
    Tensor qq = unit_rows(n, d, rng);
    Tensor kk = unit_rows(n, d, rng);
    Tensor queue = kneg > 0 ? unit_rows(kneg, d, rng) : Tensor();
    const float tau = 0.05f + 0.5f * rng.uniform();
    worst = std::max(worst,
                     std::abs(static_cast<double>(info_nce(nullptr, qq, kk, queue, tau).item()) -
                              ce_oracle(qq, kk, queue, tau)));
  }
  o.pass = worst < 1e-6 && closed_err < 1e-6;
  std::ostringstream os;
  os << "1000-instance max |err| " << worst << " (< 1e-6), closed form ln(1+2/e) err " << closed_err;
  o.detail = os.str();
  return o;
}

// ---------------------------------------------------------------------------
// MoCo mechanics
// ---------------------------------------------------------------------------

Outcome check_moco_mechanics() {
  Outcome o;
  std::ostringstream os;
  bool ok = true;

  // FIFO oracle over random insertion sequences
  for (int cap : {4, 16, 4096}) {
    RngStream rng = RngStream::keyed(31, {static_cast<std::uint64_t>(cap)});
    const int d = 3;
    KeyQueue queue(cap, d);
    std::vector<std::vector<float>> slots(static_cast<std::size_t>(cap));
    long g = 0;
    for (int round = 0; round < 10; ++round) {
      const int n = 1 + rng.uniform_int(std::min(cap, 64));
      Tensor keys = unit_rows(n, d, rng);
      queue.enqueue(keys);
      for (int i = 0; i < n; ++i, ++g)
        slots[static_cast<std::size_t>(g % cap)]
            .assign(keys.data().begin() + i * d, keys.data().begin() + (i + 1) * d);
      Tensor snap = queue.snapshot();
      if (snap.dim(0) != std::min<long>(g, cap)) ok = false;
      for (int s = 0; s < snap.dim(0) && ok; ++s)
        for (int j = 0; j < d; ++j)
          if (snap.data()[s * d + j] != slots[static_cast<std::size_t>(s)][static_cast<std::size_t>(j)])
            ok = false;
    }
  }
  os << (ok ? "queue FIFO oracle ok" : "queue FIFO oracle FAILED");

  // momentum fixed points
  UNetConfig cfg;
  cfg.encoder_levels = 2;
  cfg.base_filters = 4;
  MoCoState st = make_moco_state(cfg, 16, 3);
  for (auto& e : st.theta_e.entries())
    for (auto& v : e.tensor.data()) v += 0.25f;
  std::vector<std::vector<float>> before;
  for (const auto& e : st.theta_m.entries()) before.push_back(e.tensor.data());
  momentum_update(st.theta_m, st.theta_e, 1.0f);
  bool fixed1 = true;
  for (std::size_t i = 0; i < st.theta_m.size(); ++i) {
    if (!st.theta_m.entries()[i].trainable) continue;
    if (st.theta_m.entries()[i].tensor.data() != before[i]) fixed1 = false;
  }
  momentum_update(st.theta_m, st.theta_e, 0.0f);
  bool fixed0 = true;
  for (std::size_t i = 0; i < st.theta_m.size(); ++i)
    if (st.theta_m.entries()[i].tensor.data() != st.theta_e.entries()[i].tensor.data())
      fixed0 = false;
  os << "; alpha=1 fixed point " << (fixed1 ? "exact" : "FAILED") << "; alpha=0 copy "
     << (fixed0 ? "exact" : "FAILED");

  // zero momentum gradients during pretrain_step
  MoCoState st2 = make_moco_state(cfg, 16, 7);
  AdamState adam(st2.theta_e);
  RngStream rng(41);
  Tensor va = Tensor::zeros({2, 3, 8, 8});
  Tensor vb = Tensor::zeros({2, 3, 8, 8});
  for (auto& v : va.data()) v = rng.uniform();
  for (auto& v : vb.data()) v = rng.uniform();
  st2.queue.enqueue(unit_rows(8, cfg.encoder_channel_widths().back(), rng));
  pretrain_step(st2, adam, va, vb, 1e-3f, 0.0f);
  bool zero_grads = true;
  for (const auto& e : st2.theta_m.entries()) {
    if (!e.trainable || !e.tensor.has_grad()) continue;
    for (float gv : e.tensor.grad())
      if (gv != 0.0f) zero_grads = false;
  }
  os << "; theta_m gradient identically zero " << (zero_grads ? "ok" : "FAILED");

  o.pass = ok && fixed1 && fixed0 && zero_grads;
  o.detail = os.str();
  return o;
}

// ---------------------------------------------------------------------------
// metric oracles
// ---------------------------------------------------------------------------

double dice_oracle(const std::vector<Image>& probs, const std::vector<Mask>& gts,
                   const std::vector<Mask>& fovs, float threshold) {
  long tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < probs.size(); ++i)
    for (std::size_t p = 0; p < probs[i].size(); ++p) {
      if (!fovs.empty() && !fovs[i].empty() && fovs[i].v[p] == 0.0f) continue;
      const bool pred = probs[i].v[p] >= threshold;
      const bool pos = gts[i].v[p] > 0.0f;
      tp += pred && pos;
      fp += pred && !pos;
      fn += !pred && pos;
    }
  const long denom = 2 * tp + fp + fn;
  return denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
}

double ap_oracle(const std::vector<float>& scores, const std::vector<std::uint8_t>& labels) {
  std::vector<float> distinct = scores;
  std::sort(distinct.begin(), distinct.end(), std::greater<float>());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  long positives = 0;
  for (auto l : labels) positives += l;
  double ap = 0.0, prev_recall = 0.0;
  for (float t : distinct) {
    long tp = 0, fp = 0;
    for (std::size_t i = 0; i < scores.size(); ++i)
      if (scores[i] >= t) (labels[i] ? tp : fp) += 1;
    ap += (static_cast<double>(tp) / positives - prev_recall) * (static_cast<double>(tp) / (tp + fp));
    prev_recall = static_cast<double>(tp) / positives;
  }
  return ap;
}

Outcome check_metrics() {
  Outcome o;
  std::ostringstream os;

  // hand cases
  Image pr(2, 2, 1), gt(2, 2, 1);
  pr.v = {0.9f, 0.8f, 0.1f, 0.2f};
  gt.v = {1.0f, 0.0f, 1.0f, 0.0f};
  const bool dice_hand = pooled_dice({pr}, {gt}, {}, 0.5f) == 0.5;
  const double ap_hand = auprc(pr_curve({0.9f, 0.8f, 0.7f, 0.6f}, {1, 1, 0, 1}));
  const bool ap_hand_ok = std::abs(ap_hand - 11.0 / 12.0) < 1e-12;

  RngStream rng(101);
  double worst_dice = 0.0, worst_ap = 0.0;
  for (int trial = 0; trial < 500; ++trial) {
    const int n = 1 + rng.uniform_int(3);
    const int h = 2 + rng.uniform_int(5), w = 2 + rng.uniform_int(5);
    std::vector<Image> probs;
    std::vector<Mask> gts, fovs;
    const bool use_fov = rng.bernoulli(0.5f);
    for (int i = 0; i < n; ++i) {
      Image p(h, w, 1), g(h, w, 1), f(h, w, 1);
      for (auto& v : p.v) v = rng.uniform();
      for (auto& v : g.v) v = rng.bernoulli(0.4f) ? 1.0f : 0.0f;
      for (auto& v : f.v) v = rng.bernoulli(0.8f) ? 1.0f : 0.0f;
      f.v[0] = 1.0f;
      probs.push_back(p);
      gts.push_back(g);
      if (use_fov) fovs.push_back(f);
    }
    const float thr = rng.uniform();
    worst_dice = std::max(worst_dice, std::abs(pooled_dice(probs, gts, fovs, thr) -
                                               dice_oracle(probs, gts, fovs, thr)));
  }
  for (int trial = 0; trial < 500; ++trial) {
    const int n = 4 + rng.uniform_int(40);
    std::vector<float> scores(static_cast<std::size_t>(n));
    std::vector<std::uint8_t> labels(static_cast<std::size_t>(n));
    bool any = false;
    for (int i = 0; i < n; ++i) {
      scores[static_cast<std::size_t>(i)] = static_cast<float>(rng.uniform_int(10)) / 10.0f;
      labels[static_cast<std::size_t>(i)] = rng.bernoulli(0.3f) ? 1 : 0;
      any = any || labels[static_cast<std::size_t>(i)];
    }
    if (!any) labels[0] = 1;
    worst_ap = std::max(worst_ap, std::abs(auprc(pr_curve(scores, labels)) - ap_oracle(scores, labels)));
  }

  o.pass = dice_hand && ap_hand_ok && worst_dice < 1e-9 && worst_ap < 1e-9;
  os << "dice hand case " << (dice_hand ? "exact" : "FAILED") << ", AP 11/12 hand case "
     << (ap_hand_ok ? "exact" : "FAILED") << ", 500-instance max err: dice " << worst_dice
     << ", auprc " << worst_ap << " (< 1e-9)";
  o.detail = os.str();
  return o;
}

// ---------------------------------------------------------------------------
// schedule and statistics
// ---------------------------------------------------------------------------

Outcome check_schedule() {
  Outcome o;
  ScheduleConfig cfg;  // 1e-2 -> 1e-8, period 50
  const bool e0 = cosine_lr(0, cfg) == cfg.eta_max;
  const bool e50 = cosine_lr(50, cfg) == cfg.eta_max;
  const double midpoint =
      0.5 * (static_cast<double>(cfg.eta_max) + static_cast<double>(cfg.eta_min));
  const double mid_err = std::abs(static_cast<double>(cosine_lr(25, cfg)) - midpoint);
  o.pass = e0 && e50 && mid_err < 1e-9;
  std::ostringstream os;
  os << "lr(0)=" << cosine_lr(0, cfg) << " lr(25)=" << cosine_lr(25, cfg)
     << " lr(50)=" << cosine_lr(50, cfg) << ", midpoint err " << mid_err << " (< 1e-9)";
  o.detail = os.str();
  return o;
}

Outcome check_statistics() {
  Outcome o;
  TInterval one = paired_tci({1.0, 2.0, 3.0, 4.0}, Sided::One);
  TInterval two = paired_tci({1.0, 2.0, 3.0, 4.0}, Sided::Two);
  const bool lower_ok = std::abs(one.lower - 0.981) < 1e-3;
  const bool sym = std::abs((two.mean - two.lower) - (two.upper - two.mean)) < 1e-12;
  o.pass = lower_ok && sym && one.upper == std::numeric_limits<double>::infinity();
  std::ostringstream os;
  os << "one-sided 95% lower bound " << one.lower << " (0.981 +/- 0.001), two-sided symmetric "
     << (sym ? "yes" : "NO");
  o.detail = os.str();
  return o;
}

// ---------------------------------------------------------------------------
// desk-scale experiments: shared pretrained encoder
// ---------------------------------------------------------------------------

struct DeskScale {
  std::vector<Sample> unlabeled;  // 512
  std::vector<Sample> labeled;    // 32
  std::string encoder_path;       // pretrained encoder checkpoint
  UNetConfig arch;
  bool ready = false;
};

DeskScale g_desk;

UNetConfig desk_arch() {
  UNetConfig cfg;
  cfg.encoder_levels = 3;
  cfg.base_filters = 8;
  return cfg;
}

void ensure_desk_scale() {
  if (g_desk.ready) return;
  const auto t0 = clk::now();
  g_desk.arch = desk_arch();

  SynthConfig synth;
  synth.size = 160;
  g_desk.unlabeled = synth_generate(512, synth, 2024);
  g_desk.labeled = synth_generate(32, synth, 4048);

  const fs::path dir = fs::temp_directory_path() / "retseg_acceptance";
  fs::create_directories(dir);
  g_desk.encoder_path = (dir / "encoder.ntc").string();

  MoCoState state = make_moco_state(g_desk.arch, 256, 1);
  PretrainConfig cfg;
  cfg.epochs = 50;
  cfg.batch_size = 16;
  cfg.queue_len = 256;
  cfg.seed = 1;
  cfg.augment.resize_crop_size = 160;
  cfg.augment.view_crop_size = 128;
  PretrainResult res = pretrain(state, g_desk.unlabeled, cfg);
  save_checkpoint_raw(g_desk.encoder_path, res.encoder_checkpoint.tensors);
  std::cerr << "  [setup] pretrained 50 epochs over 512 images in "
            << std::chrono::duration<double>(clk::now() - t0).count() << " s, final loss "
            << res.history.back().loss << "\n";
  g_desk.ready = true;
}

double arm_test_dice(bool pretrained, std::uint64_t seed, const std::vector<Sample>& train_set,
                     const std::vector<Sample>& test_set) {
  RngStream rng = RngStream::keyed(seed, {0xA2Bu, pretrained ? 1u : 0u});
  UNetModel model = build_unet(g_desk.arch, rng);
  TrainRunConfig cfg;
  cfg.epochs = 60;
  cfg.batch_size = 1;
  cfg.weight_decay = 1e-4f;
  cfg.checkpoint_every = 1000;  // only the final checkpoint matters here
  cfg.seed = seed;
  if (pretrained) cfg.init_encoder_checkpoint = g_desk.encoder_path;
  finetune(model, train_set, {}, cfg);

  // threshold from the training set, dice pooled over the held-out test set
  std::vector<Image> train_probs;
  std::vector<Mask> train_gts, train_fovs;
  for (const auto& s : train_set) {
    train_probs.push_back(predict_tta(model, s.image));
    train_gts.push_back(s.targets.at("vessels"));
    train_fovs.push_back(s.fov);
  }
  const float thr = select_threshold(train_probs, train_gts, train_fovs);
  std::vector<Image> probs;
  std::vector<Mask> gts, fovs;
  for (const auto& s : test_set) {
    probs.push_back(predict_tta(model, s.image));
    gts.push_back(s.targets.at("vessels"));
    fovs.push_back(s.fov);
  }
  return pooled_dice(probs, gts, fovs, thr);
}

Outcome check_fewshot() {
  ensure_desk_scale();
  Outcome o;
  std::ostringstream os;
  const std::vector<Sample> test_set(g_desk.labeled.begin() + 16, g_desk.labeled.end());
  int wins = 0;
  os << "per-seed dice (pretrained vs baseline):";
  for (std::uint64_t seed = 1; seed <= 4; ++seed) {
    const std::vector<Sample> train_set{g_desk.labeled[static_cast<std::size_t>(seed - 1)]};
    const double base = arm_test_dice(false, seed, train_set, test_set);
    const double pre = arm_test_dice(true, seed, train_set, test_set);
    wins += pre >= base;
    os << " [" << pre << " vs " << base << "]";
  }
  o.pass = wins >= 3;
  os << " -> pretrained wins " << wins << "/4 (need >= 3)";
  o.detail = os.str();
  return o;
}

Outcome check_probe_effect() {
  ensure_desk_scale();
  Outcome o;

  RngStream rng_pre = RngStream::keyed(900, {0xFEEDu});
  UNetModel pre = build_unet(g_desk.arch, rng_pre);
  load_checkpoint(g_desk.encoder_path, pre.params, "encoder.");
  RngStream rng_rand = RngStream::keyed(901, {0xFEEDu});
  UNetModel rnd = build_unet(g_desk.arch, rng_rand);

  CorrelationMatrix m_pre = feature_target_correlation(pre, g_desk.labeled, {"vessels"});
  CorrelationMatrix m_rnd = feature_target_correlation(rnd, g_desk.labeled, {"vessels"});
  const float r_pre = max_abs_r(m_pre, "vessels");
  const float r_rnd = max_abs_r(m_rnd, "vessels");
  o.pass = r_pre - r_rnd >= 0.05f;
  std::ostringstream os;
  os << "max |r| pretrained " << r_pre << " vs random " << r_rnd << " (margin "
     << r_pre - r_rnd << ", need >= 0.05)";
  o.detail = os.str();
  return o;
}

// ---------------------------------------------------------------------------
// protocol fidelity
// ---------------------------------------------------------------------------

Outcome check_protocol() {
  Outcome o;
  std::ostringstream os;

  // TTA flip equivariance, exact
  UNetConfig cfg;
  cfg.encoder_levels = 2;
  cfg.base_filters = 4;
  RngStream rng(7);
  UNetModel model = build_unet(cfg, rng);
  SynthConfig scfg;
  scfg.size = 32;
  Sample s = synth_sample(scfg, 5, 0);
  Image base = predict_tta(model, s.image);
  Image fh = predict_tta(model, hflip(s.image));
  Image fv = predict_tta(model, vflip(s.image));
  Image rh = hflip(base), rv = vflip(base);
  bool tta_exact = true;
  for (std::size_t i = 0; i < base.size(); ++i)
    if (fh.v[i] != rh.v[i] || fv.v[i] != rv.v[i]) tta_exact = false;
  os << "TTA flip equivariance " << (tta_exact ? "exact" : "FAILED");

  // checkpoint bitwise round trip
  const fs::path dir = fs::temp_directory_path() / "retseg_acceptance";
  fs::create_directories(dir);
  const std::string path = (dir / "roundtrip.ntc").string();
  save_checkpoint(path, model.params);
  CheckpointData ckpt = read_checkpoint(path);
  bool bitwise = true;
  for (const auto& e : model.params.entries())
    if (!ckpt.contains(e.name) || ckpt.at(e.name).data() != e.tensor.data()) bitwise = false;
  os << "; checkpoint round-trip " << (bitwise ? "bitwise" : "FAILED");

  // threshold selection self-consistency
  RngStream trng(303);
  bool thr_ok = true;
  for (int trial = 0; trial < 20; ++trial) {
    Image pr(6, 6, 1), gt(6, 6, 1);
    for (auto& v : pr.v) v = trng.uniform();
    bool any = false;
    for (auto& v : gt.v) {
      v = trng.bernoulli(0.3f) ? 1.0f : 0.0f;
      any = any || v > 0.0f;
    }
    if (!any) gt.v[0] = 1.0f;
    const float thr = select_threshold({pr}, {gt}, {});
    const double at_thr = pooled_dice({pr}, {gt}, {}, thr);
    for (int gi = 0; gi <= 100; ++gi)
      if (pooled_dice({pr}, {gt}, {}, static_cast<float>(gi) / 100.0f) > at_thr) thr_ok = false;
  }
  os << "; threshold attains its grid maximum " << (thr_ok ? "yes" : "NO");

  o.pass = tta_exact && bitwise && thr_ok;
  o.detail = os.str();
  return o;
}

// ---------------------------------------------------------------------------
// evaluation protocol end-to-end on packaged synthetic data
// ---------------------------------------------------------------------------

Outcome check_evaluation_protocol() {
  // The published numbers need the real datasets (see README for the manual
  // reproduction path); this criterion exercises the identical protocol
  // end-to-end on synthetic stand-in data.
  ensure_desk_scale();
  Outcome o;
  RngStream rng = RngStream::keyed(77, {0xE7A1u});
  UNetModel model = build_unet(g_desk.arch, rng);
  load_checkpoint(g_desk.encoder_path, model.params, "encoder.");

  const std::vector<Sample> train_set(g_desk.labeled.begin(), g_desk.labeled.begin() + 4);
  const std::vector<Sample> test_set(g_desk.labeled.begin() + 16, g_desk.labeled.begin() + 20);

  std::vector<Image> train_probs;
  std::vector<Mask> train_gts, train_fovs;
  for (const auto& s : train_set) {
    train_probs.push_back(predict_tta(model, s.image));
    train_gts.push_back(s.targets.at("vessels"));
    train_fovs.push_back(s.fov);
  }
  EvalReport report;
  report.threshold = select_threshold(train_probs, train_gts, train_fovs);

  std::vector<Image> probs;
  std::vector<Mask> gts, fovs;
  for (const auto& s : test_set) {
    probs.push_back(predict_tta(model, s.image));
    gts.push_back(s.targets.at("vessels"));
    fovs.push_back(s.fov);
  }
  report.dice = pooled_dice(probs, gts, fovs, report.threshold, &report.counts);
  std::vector<float> scores;
  std::vector<std::uint8_t> labels;
  pool_pixels(probs, gts, fovs, scores, labels);
  report.auprc = auprc(pr_curve(scores, labels));
  report.has_auprc = true;

  const std::string text = format_report(report);
  o.pass = report.threshold >= 0.0f && report.threshold <= 1.0f && report.dice >= 0.0 &&
           report.dice <= 1.0 && report.auprc > 0.0 && report.auprc <= 1.0 &&
           !text.empty();
  std::ostringstream os;
  os << "threshold " << report.threshold << ", pooled dice " << report.dice << ", auprc "
     << report.auprc << " (protocol executes end-to-end; real-data reproduction is manual)";
  o.detail = os.str();
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> filters;
  for (int i = 1; i < argc; ++i) filters.emplace_back(argv[i]);
  auto selected = [&](const std::string& name) {
    if (filters.empty()) return true;
    for (const auto& f : filters)
      if (name.find(f) != std::string::npos) return true;
    return false;
  };

  struct Criterion {
    const char* name;
    Outcome (*run)();
  };
  const Criterion criteria[] = {
      {"gradient-correctness", check_gradients},
      {"infonce-oracle", check_infonce},
      {"moco-mechanics", check_moco_mechanics},
      {"metric-oracles", check_metrics},
      {"schedule", check_schedule},
      {"statistics", check_statistics},
      {"fewshot-effect", check_fewshot},
      {"probe-effect", check_probe_effect},
      {"protocol-fidelity", check_protocol},
      {"evaluation-protocol", check_evaluation_protocol},
  };

  bool all_pass = true;
  for (const auto& c : criteria) {
    if (!selected(c.name)) continue;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    all_pass = all_pass && o.pass;
    std::cout << (o.pass ? "[PASS] " : "[FAIL] ") << c.name << " — " << o.detail << std::endl;
  }
  return all_pass ? 0 : 1;
}
