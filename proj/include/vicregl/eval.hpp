#pragma once

#include <string>
#include <vector>

#include "vicregl/data.hpp"
#include "vicregl/model.hpp"

namespace vicregl {

struct ProbeConfig {
  std::vector<double> lr_sweep{1.0, 0.3, 0.1, 0.03};
  std::size_t epochs = 15;
  std::size_t batch_size = 128;      // classification probe
  std::size_t seg_batch_size = 32;   // segmentation probe
  double momentum = 0.9;
  double train_fraction = 0.8;
  std::uint64_t seed = 0;
  bool concat_stages = false;  // probe the concatenation of all stage maps
  std::size_t feature_batch = 64;
};

struct ProbeResult {
  std::string metric;             // "top1_accuracy" or "miou"
  double value = 0.0;
  std::vector<double> per_class;  // per-class accuracy / IoU (-1 = class absent)
  double best_lr = 0.0;
  std::string config_snapshot;
};

/// Dataset-level mean IoU: intersections and unions accumulate over all mask
/// pairs per class; classes absent from both prediction and ground truth are
/// skipped.
double miou(const std::vector<std::vector<std::uint8_t>>& pred,
            const std::vector<std::vector<std::uint8_t>>& gt,
            std::size_t num_classes);
std::vector<double> per_class_iou(const std::vector<std::vector<std::uint8_t>>& pred,
                                  const std::vector<std::vector<std::uint8_t>>& gt,
                                  std::size_t num_classes);

/// Trains a softmax linear layer on fixed feature rows, sweeping the probe
/// learning rates, and reports held-out top-1 accuracy.
ProbeResult train_linear_classifier(const Tensor& features,
                                    const std::vector<int>& labels,
                                    std::size_t num_classes, const ProbeConfig& cfg);

/// Frozen-backbone linear classification on pooled representations.
ProbeResult linear_probe_classify(VicreglModel& model, const Dataset& dataset,
                                  const ProbeConfig& cfg);

/// Frozen-backbone linear segmentation: per-position linear layer on the
/// feature map, bilinearly upsampled to input resolution, per-pixel argmax.
ProbeResult linear_probe_segment(VicreglModel& model, const Dataset& dataset,
                                 const ProbeConfig& cfg);

}  // namespace vicregl
