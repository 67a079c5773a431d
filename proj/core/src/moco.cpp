#include "retseg/moco.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <sstream>

#include "retseg/errors.hpp"

namespace fs = std::filesystem;

namespace retseg {

ProjectionHead build_projection_head(int dim, RngStream& rng) {
  ProjectionHead h;
  h.fc1_w = he_init({dim, dim}, dim, rng);
  h.fc1_b = Tensor::zeros({dim});
  h.fc2_w = he_init({dim, dim}, dim, rng);
  h.fc2_b = Tensor::zeros({dim});
  h.fc1_w.set_requires_grad(true);
  h.fc1_b.set_requires_grad(true);
  h.fc2_w.set_requires_grad(true);
  h.fc2_b.set_requires_grad(true);
  return h;
}

void register_head_params(ModelParams& params, ProjectionHead& head) {
  params.add("proj.fc1.w", head.fc1_w);
  params.add("proj.fc1.b", head.fc1_b);
  params.add("proj.fc2.w", head.fc2_w);
  params.add("proj.fc2.b", head.fc2_b);
}

KeyQueue::KeyQueue(int capacity, int dim) : capacity_(capacity), dim_(dim) {
  if (capacity < 1) throw ValueError("KeyQueue: capacity must be >= 1");
  if (dim < 1) throw ValueError("KeyQueue: dim must be >= 1");
  data_.assign(static_cast<std::size_t>(capacity) * dim, 0.0f);
}

void KeyQueue::enqueue(const Tensor& keys) {
  if (keys.rank() != 2 || keys.dim(1) != dim_)
    throw ShapeError("KeyQueue::enqueue: expected Nx" + std::to_string(dim_) + " keys, got " +
                     shape_str(keys.shape()));
  const int n = keys.dim(0);
  if (n > capacity_)
    throw ValueError("KeyQueue::enqueue: batch of " + std::to_string(n) +
                     " exceeds queue capacity " + std::to_string(capacity_));
  for (int i = 0; i < n; ++i) {
    std::copy(keys.ptr() + static_cast<std::size_t>(i) * dim_,
              keys.ptr() + static_cast<std::size_t>(i + 1) * dim_,
              data_.begin() + static_cast<std::size_t>(ptr_) * dim_);
    ptr_ = (ptr_ + 1) % capacity_;
    filled_ = std::min(filled_ + 1, capacity_);
  }
}

Tensor KeyQueue::snapshot() const {
  Tensor t = Tensor::zeros({filled_, dim_});
  std::copy(data_.begin(), data_.begin() + static_cast<std::size_t>(filled_) * dim_, t.ptr());
  return t;
}

Tensor info_nce(FloatTape* tape, const Tensor& q, const Tensor& k_pos, const Tensor& queue,
                float tau) {
  if (tau <= 0.0f) throw ValueError("info_nce: tau must be > 0");
  if (q.rank() != 2 || k_pos.rank() != 2) throw ShapeError("info_nce: q and k_pos must be NxD");
  check_same_shape(q, k_pos, "info_nce");
  const int n = q.dim(0), d = q.dim(1);
  if (queue.defined() && queue.size() > 0 && (queue.rank() != 2 || queue.dim(1) != d))
    throw ShapeError("info_nce: queue must be KxD with D matching q");
  const int kneg = (queue.defined() && queue.size() > 0) ? queue.dim(0) : 0;

  // softmax over logits (q.k+/tau, q.K/tau) with the positive at class 0
  auto probs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n) * (kneg + 1));
  double loss_acc = 0.0;
  std::vector<double> logits(static_cast<std::size_t>(kneg) + 1);
  for (int i = 0; i < n; ++i) {
    const float* qi = q.ptr() + static_cast<std::size_t>(i) * d;
    const float* ki = k_pos.ptr() + static_cast<std::size_t>(i) * d;
    double dot = 0.0;
    for (int j = 0; j < d; ++j) dot += static_cast<double>(qi[j]) * ki[j];
    logits[0] = dot / tau;
    for (int m = 0; m < kneg; ++m) {
      const float* km = queue.ptr() + static_cast<std::size_t>(m) * d;
      double acc = 0.0;
      for (int j = 0; j < d; ++j) acc += static_cast<double>(qi[j]) * km[j];
      logits[static_cast<std::size_t>(m) + 1] = acc / tau;
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double l : logits) z += std::exp(l - mx);
    for (std::size_t c = 0; c < logits.size(); ++c)
      (*probs)[static_cast<std::size_t>(i) * (kneg + 1) + c] = std::exp(logits[c] - mx) / z;
    loss_acc += -(logits[0] - mx - std::log(z));
  }
  Tensor out = Tensor::scalar(static_cast<float>(loss_acc / n));
  Tensor qc = q, kc = k_pos, quc = queue, outc = out;
  detail::finish_node(tape, out, [qc, kc, quc, outc, probs, n, d, kneg, tau]() mutable {
    if (!outc.has_grad() || !qc.wants_grad()) return;
    const float g0 = outc.grad()[0] / static_cast<float>(n);
    for (int i = 0; i < n; ++i) {
      float* gq = qc.grad().data() + static_cast<std::size_t>(i) * d;
      const double* pi = probs->data() + static_cast<std::size_t>(i) * (kneg + 1);
      const float* ki = kc.ptr() + static_cast<std::size_t>(i) * d;
      const float c0 = g0 * static_cast<float>(pi[0] - 1.0) / tau;
      for (int j = 0; j < d; ++j) gq[j] += c0 * ki[j];
      for (int m = 0; m < kneg; ++m) {
        const float cm = g0 * static_cast<float>(pi[m + 1]) / tau;
        const float* km = quc.ptr() + static_cast<std::size_t>(m) * d;
        for (int j = 0; j < d; ++j) gq[j] += cm * km[j];
      }
    }
  });
  return out;
}

void momentum_update(ModelParams& theta_m, const ModelParams& theta_e, float alpha) {
  if (theta_m.size() != theta_e.size())
    throw ShapeError("momentum_update: parameter lists differ in length");
  for (std::size_t i = 0; i < theta_m.entries().size(); ++i) {
    auto& em = theta_m.entries()[i];
    const auto& ee = theta_e.entries()[i];
    if (em.name != ee.name || em.tensor.shape() != ee.tensor.shape())
      throw ShapeError("momentum_update: mismatch at entry '" + em.name + "'");
    auto& dm = em.tensor.data();
    const auto& de = ee.tensor.data();
    if (em.trainable) {
      for (std::size_t k = 0; k < dm.size(); ++k)
        dm[k] = alpha * dm[k] + (1.0f - alpha) * de[k];
    } else {
      // running statistics are measurements, not weights: copy, don't average
      dm = de;
    }
  }
}

namespace {

ModelParams moco_param_view(UNetModel& model, ProjectionHead& head) {
  ModelParams view;
  for (auto& e : model.params.entries())
    if (e.name.rfind("encoder.", 0) == 0) view.add(e.name, e.tensor, e.trainable);
  register_head_params(view, head);
  return view;
}

}  // namespace

MoCoState make_moco_state(const UNetConfig& config, int queue_len, std::uint64_t seed, float tau,
                          float alpha) {
  MoCoState s;
  RngStream rng = RngStream::keyed(seed, {0x30C0u});
  s.query = build_unet(config, rng);
  s.query_head = build_projection_head(config.encoder_channel_widths().back(), rng);
  RngStream rng2 = RngStream::keyed(seed, {0x30C1u});
  s.momentum = build_unet(config, rng2);
  s.momentum_head = build_projection_head(config.encoder_channel_widths().back(), rng2);
  s.theta_e = moco_param_view(s.query, s.query_head);
  s.theta_m = moco_param_view(s.momentum, s.momentum_head);
  momentum_update(s.theta_m, s.theta_e, 0.0f);  // start as an exact copy
  s.queue = KeyQueue(queue_len, config.encoder_channel_widths().back());
  s.tau = tau;
  s.alpha = alpha;
  return s;
}

float pretrain_step(MoCoState& state, AdamState& adam, const Tensor& view_a, const Tensor& view_b,
                    float lr, float weight_decay) {
  if (view_a.dim(0) < 2) throw ValueError("pretrain_step: batch size must be >= 2");
  FloatTape tape;
  Tensor feats = encoder_features(state.query, view_a, Mode::Train, &tape);
  Tensor q = project(&tape, feats, state.query_head);
  // keys come from the momentum branch with no recording, so no gradient
  // can reach theta_m
  Tensor feats_m =
      encoder_features(state.momentum, view_b, Mode::Train, static_cast<FloatTape*>(nullptr));
  Tensor k = project(static_cast<FloatTape*>(nullptr), feats_m, state.momentum_head);
  Tensor loss = info_nce(&tape, q, k, state.queue.snapshot(), state.tau);
  state.theta_e.zero_grads();
  backward(loss);
  adam_step(state.theta_e, adam, lr, weight_decay);
  momentum_update(state.theta_m, state.theta_e, state.alpha);
  state.queue.enqueue(k);
  return loss.item();
}

CheckpointData encoder_checkpoint_data(const MoCoState& state, bool include_head) {
  CheckpointData ckpt;
  for (const auto& e : state.theta_e.entries()) {
    if (e.name.rfind("encoder.", 0) == 0 || (include_head && e.name.rfind("proj.", 0) == 0))
      ckpt.tensors.emplace_back(e.name, e.tensor.clone());
  }
  return ckpt;
}

namespace {

std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed,
                                          std::initializer_list<std::uint64_t> key) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  RngStream rng = RngStream::keyed(seed, key);
  for (std::size_t i = n - 1; i > 0; --i)
    std::swap(order[i], order[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(i + 1)))]);
  return order;
}

Tensor make_view_batch(const std::vector<Sample>& dataset, const std::vector<std::size_t>& order,
                       std::size_t pos, std::size_t end, const PretrainConfig& cfg, int view) {
  std::vector<Image> views;
  views.reserve(end - pos);
  for (std::size_t k = pos; k < end; ++k) {
    RngStream rng = RngStream::keyed(
        cfg.seed, {0x71E3u, static_cast<std::uint64_t>(view), static_cast<std::uint64_t>(order[k]),
                   static_cast<std::uint64_t>(pos), static_cast<std::uint64_t>(k - pos)});
    views.push_back(pretrain_view(dataset[order[k]].image, cfg.augment, rng));
  }
  return images_to_batch(views);
}

Tensor make_epoch_view_batch(const std::vector<Sample>& dataset,
                             const std::vector<std::size_t>& order, std::size_t pos,
                             std::size_t end, const PretrainConfig& cfg, int epoch, int view) {
  std::vector<Image> views;
  views.reserve(end - pos);
  for (std::size_t k = pos; k < end; ++k) {
    RngStream rng = RngStream::keyed(
        cfg.seed, {0x71E4u, static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(view),
                   static_cast<std::uint64_t>(order[k])});
    views.push_back(pretrain_view(dataset[order[k]].image, cfg.augment, rng));
  }
  return images_to_batch(views);
}

}  // namespace

PretrainResult pretrain(MoCoState& state, const std::vector<Sample>& dataset,
                        const PretrainConfig& cfg) {
  if (dataset.size() < 2) throw ValueError("pretrain: need at least 2 unlabeled images");
  PretrainResult result;
  AdamState adam(state.theta_e);
  if (!cfg.checkpoint_dir.empty()) fs::create_directories(cfg.checkpoint_dir);

  // cold start: fill the queue with momentum-encoder keys before the first
  // optimizer step, so early losses see a full negative set
  {
    const auto order = shuffled_indices(dataset.size(), cfg.seed, {0xF111u});
    std::size_t pos = 0;
    while (!state.queue.full()) {
      const std::size_t end =
          std::min(order.size(), pos + static_cast<std::size_t>(cfg.batch_size));
      Tensor xb = make_view_batch(dataset, order, pos, end, cfg, 1);
      Tensor feats =
          encoder_features(state.momentum, xb, Mode::Train, static_cast<FloatTape*>(nullptr));
      Tensor k = project(static_cast<FloatTape*>(nullptr), feats, state.momentum_head);
      state.queue.enqueue(k);
      pos = end < order.size() ? end : 0;
    }
  }

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const float lr = cosine_lr(epoch, cfg.schedule);
    const auto order =
        shuffled_indices(dataset.size(), cfg.seed, {0x10C0u, static_cast<std::uint64_t>(epoch)});
    int step = 0;
    for (std::size_t pos = 0; pos + 1 < order.size();
         pos += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end =
          std::min(order.size(), pos + static_cast<std::size_t>(cfg.batch_size));
      if (end - pos < 2) break;  // batch statistics are undefined on one image
      Tensor xa = make_epoch_view_batch(dataset, order, pos, end, cfg, epoch, 0);
      Tensor xb = make_epoch_view_batch(dataset, order, pos, end, cfg, epoch, 1);
      const float loss = pretrain_step(state, adam, xa, xb, lr, cfg.weight_decay);
      result.history.push_back({epoch, step, loss, lr});
      ++step;
    }
    const bool checkpoint_now =
        ((epoch + 1) % cfg.checkpoint_every == 0) || (epoch == cfg.epochs - 1);
    if (checkpoint_now && !cfg.checkpoint_dir.empty()) {
      CheckpointData ckpt = encoder_checkpoint_data(state, cfg.include_head);
      std::ostringstream name;
      name << "encoder_epoch" << epoch << ".ntc";
      const std::string path = (fs::path(cfg.checkpoint_dir) / name.str()).string();
      save_checkpoint_raw(path, ckpt.tensors);
      result.final_path = path;
    }
  }
  result.encoder_checkpoint = encoder_checkpoint_data(state, cfg.include_head);
  return result;
}

std::string pretrain_csv(const std::vector<PretrainLossRow>& history) {
  std::ostringstream os;
  os << "epoch,step,loss,lr\n";
  for (const auto& r : history)
    os << r.epoch << "," << r.step << "," << r.loss << "," << r.lr << "\n";
  return os.str();
}

}  // namespace retseg
