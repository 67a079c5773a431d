#pragma once

#include <string>
#include <vector>

#include "retseg/augment.hpp"
#include "retseg/checkpoint.hpp"
#include "retseg/data.hpp"
#include "retseg/params.hpp"
#include "retseg/unet.hpp"

namespace retseg {

// Adam with bias correction; weight decay enters as an L2 term added to the
// gradient. Moment buffers are kept per trainable parameter, in registry
// order.
struct AdamState {
  std::vector<Tensor> m, v;  // parallel to params.entries(); empty for buffers
  long step = 0;
  float beta1 = 0.9f, beta2 = 0.999f, eps = 1e-8f;

  AdamState() = default;
  explicit AdamState(const ModelParams& params);
};

void adam_step(ModelParams& params, AdamState& state, float lr, float weight_decay);

struct ScheduleConfig {
  enum class Kind { CosineRestarts, Constant };
  Kind kind = Kind::CosineRestarts;
  float eta_max = 1e-2f;
  float eta_min = 1e-8f;
  int period = 50;  // epochs per restart
};

float cosine_lr(int epoch, const ScheduleConfig& cfg);

// Pixel-wise BCE averaged over in-FOV pixels; fov may be undefined.
Tensor segmentation_loss(FloatTape* tape, const Tensor& pred, const Tensor& target,
                         const Tensor& fov);

struct TrainRunConfig {
  int epochs = 1500;
  int batch_size = 4;
  float weight_decay = 0.0f;
  int checkpoint_every = 10;
  std::uint64_t seed = 1;
  ScheduleConfig schedule;
  FinetuneAugmentConfig augment;
  std::string target = "vessels";
  std::string checkpoint_dir;          // when set, checkpoints are also written to disk
  std::string init_encoder_checkpoint; // when set, encoder weights loaded before training
  std::string resume_checkpoint;       // when set, resumes epoch counter, params and Adam state
};

struct CheckpointRecord {
  int epoch = 0;
  CheckpointData data;
  std::string path;  // empty if kept in memory only
  double val_dice = 0.0;
  bool has_val = false;
};

struct HistoryRow {
  int epoch = 0;
  float lr = 0.0f;
  double train_loss = 0.0;
  double val_dice = 0.0;
  bool has_val = false;
};

struct TrainCounters {
  std::size_t augmented_samples = 0;
  std::size_t gradient_batches = 0;
  std::size_t val_forward_images = 0;
};

struct FinetuneResult {
  std::vector<HistoryRow> history;
  std::vector<CheckpointRecord> checkpoints;
  std::size_t best_checkpoint = 0;  // index into checkpoints
  int best_epoch = 0;
  TrainCounters counters;
};

// Supervised fine-tuning loop. The model is trained in place; checkpoints
// carry parameters, BN buffers and Adam state, so a resumed run reproduces
// the uninterrupted one bit for bit.
FinetuneResult finetune(UNetModel& model, const std::vector<Sample>& train_set,
                        const std::vector<Sample>& val_set, const TrainRunConfig& cfg);

// Argmax of validation Dice; ties go to the earliest epoch. Records without
// validation fall back to the last checkpoint.
std::size_t select_checkpoint(const std::vector<CheckpointRecord>& checkpoints);

int epochs_to_best(const FinetuneResult& result);

std::string history_csv(const std::vector<HistoryRow>& history);

}  // namespace retseg
