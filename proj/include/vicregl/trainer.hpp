#pragma once

#include <optional>
#include <string>

#include "vicregl/checkpoint.hpp"
#include "vicregl/config.hpp"
#include "vicregl/data.hpp"
#include "vicregl/losses.hpp"
#include "vicregl/model.hpp"

namespace vicregl {

/// Full pretraining recipe. Every field is addressable through RunConfig by
/// the dotted path given in to_config().
struct TrainConfig {
  // loss
  double alpha = 0.75;
  std::size_t gamma1 = 6;  // matches kept when both maps come from large views
  std::size_t gamma2 = 2;  // matches kept when a small view is involved
  VicregWeights weights;
  LocalLossOptions local;

  // views
  bool multicrop = true;
  std::size_t n_small = 6;
  std::size_t resolution = 64;
  std::size_t small_resolution = 32;
  double area_lo = 0.2, area_hi = 1.0;
  double aspect_lo = 0.75, aspect_hi = 4.0 / 3.0;
  double flip_prob = 0.5;
  AugmentConfig jitter{0.4, 0.4, 0.2, 0.2};

  // optimization
  std::string optimizer = "sgd";  // "sgd" (momentum) or "adamw" (decoupled wd)
  double momentum = 0.9;
  double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;
  std::size_t batch_size = 64;
  std::size_t epochs = 8;
  double warmup_epochs = 1.0;
  double base_lr = 0.005;
  double final_lr = 1e-4;
  double weight_decay = 1e-6;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;  // steps; 0 = at epoch boundaries

  EncoderConfig encoder;
  HeadConfig heads;

  static TrainConfig from_config(const RunConfig& rc);
  void to_config(RunConfig& rc) const;
  void validate() const;
};

/// Linear ramp 0 -> base_lr over warmup, then cosine decay to final_lr.
double cosine_schedule(std::size_t step, std::size_t total_steps,
                       std::size_t warmup_steps, double base_lr, double final_lr);

/// SGD with momentum, or Adam with decoupled weight decay. Parameters whose
/// gradient buffer was never touched by backward are left untouched.
class Optimizer {
 public:
  Optimizer(const TrainConfig& cfg, ParamStore& store);
  void apply(double lr);
  void pack_state(CheckpointData& data) const;
  void restore_state(const CheckpointData& data);

 private:
  const TrainConfig& cfg_;
  ParamStore& store_;
  std::vector<Tensor> momentum_;   // sgd: velocity; adamw: first moment
  std::vector<Tensor> second_;     // adamw only
  std::size_t adam_t_ = 0;
};

struct StepStats {
  std::size_t step = 0;
  double lr = 0.0;
  LossBreakdown breakdown;
  double embed_std_min = 0.0, embed_std_mean = 0.0;
};

class Trainer {
 public:
  Trainer(TrainConfig cfg, const Dataset& dataset);

  /// One optimizer update on the given sample indices. Aborts with a
  /// per-term diagnostic dump if the loss goes non-finite.
  StepStats train_step(const std::vector<std::size_t>& batch_indices);

  /// Full run: metrics.jsonl + checkpoints under out_dir, resumable from
  /// <out_dir>/ckpt_latest.vrgl. Returns the final checkpoint path.
  std::string pretrain(const std::string& out_dir, bool resume = false);

  VicreglModel& model() { return model_; }
  const TrainConfig& config() const { return cfg_; }
  std::size_t steps_per_epoch() const;
  std::size_t total_steps() const;
  std::size_t current_step() const { return step_; }
  Rng& rng() { return rng_; }

  CheckpointData make_checkpoint() const;
  void restore_checkpoint(const CheckpointData& data);

 private:
  ViewBatch forward_view(const Tensor& images, std::vector<PositionGrid> grids,
                         bool large);
  LossResult compute_loss(const std::vector<ViewBatch>& views) const;

  TrainConfig cfg_;
  const Dataset& dataset_;
  VicreglModel model_;
  Optimizer optimizer_;
  Rng rng_;
  std::size_t step_ = 0;
};

}  // namespace vicregl
