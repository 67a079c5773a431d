#pragma once

#include <string>
#include <vector>

#include "retseg/augment.hpp"
#include "retseg/checkpoint.hpp"
#include "retseg/data.hpp"
#include "retseg/train.hpp"
#include "retseg/unet.hpp"

namespace retseg {

// Two fully connected 128-unit layers on top of globally averaged encoder
// features, ReLU after the first; output rows are l2-normalized. Discarded
// after pre-training.
template <class T>
struct ProjectionHeadT {
  TensorT<T> fc1_w, fc1_b, fc2_w, fc2_b;
};

using ProjectionHead = ProjectionHeadT<float>;

ProjectionHead build_projection_head(int dim, RngStream& rng);

void register_head_params(ModelParams& params, ProjectionHead& head);

template <class U, class T>
inline ProjectionHeadT<U> cast_head(const ProjectionHeadT<T>& src) {
  auto cast_tensor = [](const TensorT<T>& t) {
    std::vector<U> d(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) d[i] = static_cast<U>(t.data()[i]);
    return TensorT<U>::from_data(t.shape(), std::move(d));
  };
  ProjectionHeadT<U> h;
  h.fc1_w = cast_tensor(src.fc1_w);
  h.fc1_b = cast_tensor(src.fc1_b);
  h.fc2_w = cast_tensor(src.fc2_w);
  h.fc2_b = cast_tensor(src.fc2_b);
  return h;
}

// GAP -> fc1 -> ReLU -> fc2 -> l2_normalize; input is an NxCxhxw feature map
// whose channel count must match fc1.
template <class T>
inline TensorT<T> project(Tape<T>* tape, const TensorT<T>& features, ProjectionHeadT<T>& head) {
  if (features.rank() != 4 || features.dim(1) != head.fc1_w.dim(0))
    throw ShapeError("project: expected Nx" + std::to_string(head.fc1_w.dim(0)) +
                     "xhxw features, got " + shape_str(features.shape()));
  TensorT<T> v = global_avg_pool(tape, features);
  v = linear(tape, v, head.fc1_w, head.fc1_b);
  v = relu(tape, v);
  v = linear(tape, v, head.fc2_w, head.fc2_b);
  return l2_normalize(tape, v);
}

// Fixed-capacity FIFO ring buffer of key vectors.
class KeyQueue {
 public:
  KeyQueue() = default;
  KeyQueue(int capacity, int dim);

  void enqueue(const Tensor& keys);  // NxD, N <= capacity
  Tensor snapshot() const;           // filled x D, storage order (not age order)

  int capacity() const { return capacity_; }
  int dim() const { return dim_; }
  int ptr() const { return ptr_; }
  int filled() const { return filled_; }
  bool full() const { return filled_ == capacity_; }

 private:
  int capacity_ = 0, dim_ = 0, ptr_ = 0, filled_ = 0;
  std::vector<float> data_;
};

// Eq.: per-sample -log( exp(q.k+/tau) / (exp(q.k+/tau) + sum_neg exp(q.k/tau)) ),
// averaged over the batch. Gradient reaches q only; k_pos and queue are
// treated as constants.
Tensor info_nce(FloatTape* tape, const Tensor& q, const Tensor& k_pos, const Tensor& queue,
                float tau);

// theta_m <- alpha * theta_m + (1 - alpha) * theta_e for trainable entries;
// buffers (BN running stats) are copied outright. Entry lists must mirror
// each other exactly.
void momentum_update(ModelParams& theta_m, const ModelParams& theta_e, float alpha);

struct MoCoState {
  UNetModel query, momentum;
  ProjectionHead query_head, momentum_head;
  ModelParams theta_e, theta_m;  // encoder + head views of the two networks
  KeyQueue queue;
  float tau = 0.07f;
  float alpha = 0.999f;
};

// Momentum network starts as an exact copy of the query network.
MoCoState make_moco_state(const UNetConfig& config, int queue_len, std::uint64_t seed,
                          float tau = 0.07f, float alpha = 0.999f);

// One optimizer step on pre-augmented view batches; returns the loss.
float pretrain_step(MoCoState& state, AdamState& adam, const Tensor& view_a,
                    const Tensor& view_b, float lr, float weight_decay);

struct PretrainConfig {
  int epochs = 600;
  int batch_size = 64;
  int queue_len = 4096;
  float tau = 0.07f;
  float alpha = 0.999f;
  float weight_decay = 1e-4f;
  int checkpoint_every = 10;
  std::uint64_t seed = 1;
  ScheduleConfig schedule;  // cosine restarts 1e-2 -> 1e-8, period 50
  PretrainAugmentConfig augment;
  std::string checkpoint_dir;  // when set, encoder checkpoints are written
  bool include_head = false;   // also store the projection head
};

struct PretrainLossRow {
  int epoch = 0;
  int step = 0;
  float loss = 0.0f;
  float lr = 0.0f;
};

struct PretrainResult {
  std::vector<PretrainLossRow> history;
  CheckpointData encoder_checkpoint;  // final state
  std::string final_path;             // empty when checkpoint_dir unset
};

CheckpointData encoder_checkpoint_data(const MoCoState& state, bool include_head);

// Full pre-training loop over unlabeled images: the queue is first filled by
// the momentum encoder (no optimizer steps), then shuffled epochs of
// two-view batches run pretrain_step. Batches with fewer than 2 images are
// dropped (batch statistics are undefined otherwise).
PretrainResult pretrain(MoCoState& state, const std::vector<Sample>& dataset,
                        const PretrainConfig& cfg);

std::string pretrain_csv(const std::vector<PretrainLossRow>& history);

}  // namespace retseg
