#pragma once

#include <cstdint>
#include <deque>
#include <string>
#include <vector>

#include "vicregl/autodiff.hpp"
#include "vicregl/rng.hpp"

namespace vicregl {

/// Small residual encoder: stem conv (stride 2) followed by one residual
/// block per stage. Output stride is 2 * product(stage_strides).
struct EncoderConfig {
  std::size_t stem_channels = 8;
  std::vector<std::size_t> stage_channels{16, 32, 64};
  std::vector<std::size_t> stage_strides{2, 2, 2};
  bool batch_norm = true;
  std::size_t input_resolution = 64;

  std::size_t output_stride() const {
    std::size_t s = 2;
    for (auto st : stage_strides) s *= st;
    return s;
  }
  std::size_t output_channels() const {
    return stage_channels.empty() ? stem_channels : stage_channels.back();
  }
};

/// Head dimensions; first entry of each list must equal the encoder output
/// channels. norm toggles batch normalization between hidden layers.
struct HeadConfig {
  std::vector<std::size_t> projector_dims{64, 32, 32, 32};
  std::vector<std::size_t> expander_dims{64, 256, 256, 256};
  bool projector_norm = true;
  bool expander_norm = true;
};

/// Trainable parameters and stat buffers, addressable by name in a stable
/// registration order.
class ParamStore {
 public:
  ad::Var add_param(const std::string& name, Tensor value);
  /// Returned pointer stays valid for the life of the store (deque-backed).
  Tensor* add_buffer(const std::string& name, Tensor value);

  std::vector<std::pair<std::string, ad::Var>>& params() { return params_; }
  const std::vector<std::pair<std::string, ad::Var>>& params() const { return params_; }
  std::deque<std::pair<std::string, Tensor>>& buffers() { return buffers_; }
  const std::deque<std::pair<std::string, Tensor>>& buffers() const { return buffers_; }

  ad::Var find_param(const std::string& name) const;
  std::size_t param_count() const;

 private:
  std::vector<std::pair<std::string, ad::Var>> params_;
  std::deque<std::pair<std::string, Tensor>> buffers_;
};

/// Encoder + local projector + global expander with named parameters.
/// Initialization is fan-in-scaled normal, drawn from a single seeded stream
/// in registration order, so a seed pins every weight.
class VicreglModel {
 public:
  VicreglModel(EncoderConfig enc, HeadConfig heads, std::uint64_t init_seed);
  VicreglModel(const VicreglModel&) = delete;
  VicreglModel& operator=(const VicreglModel&) = delete;

  /// (B,3,H,W) -> (B,C,H/os,W/os); H and W must be divisible by the stride.
  ad::Var encode(const ad::Var& images, bool training);

  /// Per-stage feature maps (after each residual stage), last == encode().
  std::vector<ad::Var> encode_stages(const ad::Var& images, bool training);

  /// Channelwise spatial mean: (B,C,H,W) -> (B,C).
  static ad::Var pool(const ad::Var& feature_map);

  /// Identical MLP applied at every spatial position: (B,C,H,W) -> (B,D,H,W).
  ad::Var local_project(const ad::Var& feature_map, bool training);

  /// Row-matrix variant used by the loss layer: (B,C,H,W) -> (B*H*W, D).
  ad::Var local_project_rows(const ad::Var& feature_map, bool training);

  /// Expander MLP on pooled representations: (B,C) -> (B,Dg).
  ad::Var global_expand(const ad::Var& pooled, bool training);

  ParamStore& store() { return store_; }
  const ParamStore& store() const { return store_; }
  const EncoderConfig& encoder_config() const { return enc_; }
  const HeadConfig& head_config() const { return heads_; }

  /// FNV-1a hash over parameter and buffer bytes; detects any backbone drift.
  std::uint64_t state_hash() const;

 private:
  struct Conv {
    ad::Var w, b;
    std::size_t stride = 1, pad = 0;
  };
  struct Norm {
    ad::Var gamma, beta;
    Tensor* run_mean = nullptr;
    Tensor* run_var = nullptr;
    bool active = false;
  };
  struct Block {
    Conv conv1, conv2, skip;
    Norm bn1, bn2, bn_skip;
    bool has_skip = false;
  };
  struct Mlp {
    std::vector<ad::Var> w, b;
    std::vector<Norm> norms;  // between hidden layers
  };

  Conv make_conv(const std::string& name, std::size_t cin, std::size_t cout,
                 std::size_t k, std::size_t stride, std::size_t pad, bool bias);
  Norm make_norm(const std::string& name, std::size_t channels, bool active);
  Mlp make_mlp(const std::string& name, const std::vector<std::size_t>& dims,
               bool norm);
  ad::Var apply_norm2d(const Norm& n, const ad::Var& x, bool training);
  ad::Var apply_norm_rows(const Norm& n, const ad::Var& x, bool training);
  ad::Var mlp_rows(const Mlp& m, const ad::Var& rows, bool training);

  EncoderConfig enc_;
  HeadConfig heads_;
  ParamStore store_;
  Rng init_rng_;

  Conv stem_;
  Norm stem_bn_;
  std::vector<Block> blocks_;
  Mlp projector_, expander_;
};

}  // namespace vicregl
