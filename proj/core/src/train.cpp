#include "retseg/train.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <sstream>

#include "retseg/errors.hpp"
#include "retseg/eval.hpp"
#include "retseg/nn.hpp"

namespace fs = std::filesystem;

namespace retseg {

AdamState::AdamState(const ModelParams& params) {
  m.resize(params.size());
  v.resize(params.size());
  for (std::size_t i = 0; i < params.entries().size(); ++i) {
    const auto& e = params.entries()[i];
    if (!e.trainable) continue;
    m[i] = Tensor::zeros(e.tensor.shape());
    v[i] = Tensor::zeros(e.tensor.shape());
  }
}

void adam_step(ModelParams& params, AdamState& state, float lr, float weight_decay) {
  ++state.step;
  const float bc1 = 1.0f - std::pow(state.beta1, static_cast<float>(state.step));
  const float bc2 = 1.0f - std::pow(state.beta2, static_cast<float>(state.step));
  for (std::size_t i = 0; i < params.entries().size(); ++i) {
    auto& e = params.entries()[i];
    if (!e.trainable || !e.tensor.has_grad()) continue;
    auto& p = e.tensor.data();
    const auto& g = e.tensor.grad();
    auto& mi = state.m[i].data();
    auto& vi = state.v[i].data();
    for (std::size_t k = 0; k < p.size(); ++k) {
      const float grad = g[k] + weight_decay * p[k];
      mi[k] = state.beta1 * mi[k] + (1.0f - state.beta1) * grad;
      vi[k] = state.beta2 * vi[k] + (1.0f - state.beta2) * grad * grad;
      const float mhat = mi[k] / bc1;
      const float vhat = vi[k] / bc2;
      p[k] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

float cosine_lr(int epoch, const ScheduleConfig& cfg) {
  if (epoch < 0) throw ValueError("cosine_lr: epoch must be >= 0");
  if (cfg.kind == ScheduleConfig::Kind::Constant) return cfg.eta_max;
  if (cfg.period < 1) throw ValueError("cosine_lr: period must be >= 1");
  const int phase = epoch % cfg.period;
  const double c = std::cos(3.14159265358979323846 * static_cast<double>(phase) /
                            static_cast<double>(cfg.period));
  return static_cast<float>(cfg.eta_min + 0.5 * (cfg.eta_max - cfg.eta_min) * (1.0 + c));
}

Tensor segmentation_loss(FloatTape* tape, const Tensor& pred, const Tensor& target,
                         const Tensor& fov) {
  return bce_masked(tape, pred, target, fov);
}

namespace {

Tensor masks_to_batch(const std::vector<const Mask*>& masks) {
  const int h = masks[0]->h, w = masks[0]->w;
  Tensor t = Tensor::zeros({static_cast<int>(masks.size()), 1, h, w});
  for (std::size_t i = 0; i < masks.size(); ++i)
    std::copy(masks[i]->v.begin(), masks[i]->v.end(),
              t.data().begin() + static_cast<std::ptrdiff_t>(i * masks[i]->size()));
  return t;
}

CheckpointData make_training_checkpoint(const ModelParams& params, const AdamState& adam,
                                        int epoch) {
  CheckpointData ckpt;
  for (const auto& e : params.entries()) ckpt.tensors.emplace_back(e.name, e.tensor.clone());
  for (std::size_t i = 0; i < params.entries().size(); ++i) {
    if (!params.entries()[i].trainable) continue;
    ckpt.tensors.emplace_back("adam.m." + params.entries()[i].name, adam.m[i].clone());
    ckpt.tensors.emplace_back("adam.v." + params.entries()[i].name, adam.v[i].clone());
  }
  ckpt.tensors.emplace_back("meta.adam_step", Tensor::scalar(static_cast<float>(adam.step)));
  ckpt.tensors.emplace_back("meta.epoch", Tensor::scalar(static_cast<float>(epoch)));
  return ckpt;
}

int restore_training_checkpoint(const CheckpointData& ckpt, ModelParams& params,
                                AdamState& adam) {
  for (std::size_t i = 0; i < params.entries().size(); ++i) {
    auto& e = params.entries()[i];
    e.tensor.data() = ckpt.at(e.name).data();
    if (e.trainable) {
      adam.m[i].data() = ckpt.at("adam.m." + e.name).data();
      adam.v[i].data() = ckpt.at("adam.v." + e.name).data();
    }
  }
  adam.step = static_cast<long>(ckpt.at("meta.adam_step").item());
  return static_cast<int>(ckpt.at("meta.epoch").item());
}

double validation_dice(UNetModel& model, const std::vector<Sample>& val_set,
                       const std::string& target, TrainCounters& counters) {
  std::vector<Image> probs;
  std::vector<Mask> gts, fovs;
  for (const auto& s : val_set) {
    Tensor y = forward(model, image_to_tensor(s.image), Mode::Eval,
                       static_cast<FloatTape*>(nullptr));
    ++counters.val_forward_images;
    probs.push_back(tensor_to_image(y));
    gts.push_back(s.targets.at(target));
    fovs.push_back(s.fov);
  }
  return pooled_dice(probs, gts, fovs, 0.5f);
}

}  // namespace

FinetuneResult finetune(UNetModel& model, const std::vector<Sample>& train_set,
                        const std::vector<Sample>& val_set, const TrainRunConfig& cfg) {
  if (train_set.empty()) throw ValueError("finetune: empty training set");
  for (const auto& s : train_set)
    if (!s.targets.count(cfg.target))
      throw ValueError("finetune: sample " + s.id + " lacks target '" + cfg.target + "'");

  if (!cfg.init_encoder_checkpoint.empty())
    load_checkpoint(cfg.init_encoder_checkpoint, model.params, "encoder.");

  AdamState adam(model.params);
  int start_epoch = 0;
  if (!cfg.resume_checkpoint.empty()) {
    const CheckpointData ckpt = read_checkpoint(cfg.resume_checkpoint);
    start_epoch = restore_training_checkpoint(ckpt, model.params, adam) + 1;
  }
  if (!cfg.checkpoint_dir.empty()) fs::create_directories(cfg.checkpoint_dir);

  FinetuneResult result;
  for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    const float lr = cosine_lr(epoch, cfg.schedule);

    std::vector<std::size_t> order(train_set.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    RngStream shuffle_rng = RngStream::keyed(cfg.seed, {0xE0u, static_cast<std::uint64_t>(epoch)});
    for (std::size_t i = order.size() - 1; i > 0; --i)
      std::swap(order[i],
                order[static_cast<std::size_t>(shuffle_rng.uniform_int(static_cast<int>(i + 1)))]);

    double loss_acc = 0.0;
    std::size_t batches = 0;
    for (std::size_t pos = 0; pos < order.size(); pos += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), pos + static_cast<std::size_t>(cfg.batch_size));
      std::vector<Sample> aug;
      aug.reserve(end - pos);
      for (std::size_t k = pos; k < end; ++k) {
        RngStream rng = RngStream::keyed(
            cfg.seed, {0xA06u, static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(order[k])});
        aug.push_back(finetune_augment(train_set[order[k]], cfg.augment, rng));
        ++result.counters.augmented_samples;
      }
      std::vector<Image> imgs;
      std::vector<const Mask*> tgts;
      bool any_fov = false;
      for (const auto& s : aug) {
        imgs.push_back(s.image);
        tgts.push_back(&s.targets.at(cfg.target));
        if (!s.fov.empty()) any_fov = true;
      }
      Tensor x = images_to_batch(imgs);
      Tensor t = masks_to_batch(tgts);
      Tensor fov;
      if (any_fov) {
        std::vector<const Mask*> fovs;
        for (const auto& s : aug) fovs.push_back(&s.fov);
        fov = masks_to_batch(fovs);
      }
      FloatTape tape;
      Tensor pred = forward(model, x, Mode::Train, &tape);
      Tensor loss = segmentation_loss(&tape, pred, t, fov);
      model.params.zero_grads();
      backward(loss);
      adam_step(model.params, adam, lr, cfg.weight_decay);
      loss_acc += static_cast<double>(loss.item());
      ++batches;
      ++result.counters.gradient_batches;
    }

    HistoryRow row;
    row.epoch = epoch;
    row.lr = lr;
    row.train_loss = loss_acc / static_cast<double>(batches);

    const bool checkpoint_now =
        ((epoch + 1) % cfg.checkpoint_every == 0) || (epoch == cfg.epochs - 1);
    if (checkpoint_now) {
      CheckpointRecord rec;
      rec.epoch = epoch;
      rec.data = make_training_checkpoint(model.params, adam, epoch);
      if (!val_set.empty()) {
        rec.val_dice = validation_dice(model, val_set, cfg.target, result.counters);
        rec.has_val = true;
        row.val_dice = rec.val_dice;
        row.has_val = true;
      }
      if (!cfg.checkpoint_dir.empty()) {
        std::ostringstream name;
        name << "ckpt_epoch" << epoch << ".ntc";
        rec.path = (fs::path(cfg.checkpoint_dir) / name.str()).string();
        save_checkpoint_raw(rec.path, rec.data.tensors);
      }
      result.checkpoints.push_back(std::move(rec));
    }
    result.history.push_back(row);
  }

  result.best_checkpoint = select_checkpoint(result.checkpoints);
  result.best_epoch = result.checkpoints[result.best_checkpoint].epoch;
  return result;
}

std::size_t select_checkpoint(const std::vector<CheckpointRecord>& checkpoints) {
  if (checkpoints.empty()) throw ValueError("select_checkpoint: no checkpoints");
  std::size_t best = checkpoints.size() - 1;  // no validation: last checkpoint wins
  double best_dice = -1.0;
  bool any_val = false;
  for (std::size_t i = 0; i < checkpoints.size(); ++i) {
    if (!checkpoints[i].has_val) continue;
    any_val = true;
    if (checkpoints[i].val_dice > best_dice) {
      best_dice = checkpoints[i].val_dice;
      best = i;
    }
  }
  if (!any_val) return checkpoints.size() - 1;
  return best;
}

int epochs_to_best(const FinetuneResult& result) { return result.best_epoch; }

std::string history_csv(const std::vector<HistoryRow>& history) {
  std::ostringstream os;
  os << "epoch,lr,train_loss,val_dice\n";
  for (const auto& r : history) {
    os << r.epoch << "," << r.lr << "," << r.train_loss << ",";
    if (r.has_val) os << r.val_dice;
    os << "\n";
  }
  return os.str();
}

}  // namespace retseg
