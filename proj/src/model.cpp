#include "vicregl/model.hpp"

#include <cmath>
#include <cstring>

namespace vicregl {

ad::Var ParamStore::add_param(const std::string& name, Tensor value) {
  ad::Var v = ad::leaf(std::move(value));
  params_.emplace_back(name, v);
  return v;
}

Tensor* ParamStore::add_buffer(const std::string& name, Tensor value) {
  buffers_.emplace_back(name, std::move(value));
  return &buffers_.back().second;
}

ad::Var ParamStore::find_param(const std::string& name) const {
  for (const auto& [n, v] : params_)
    if (n == name) return v;
  VRL_CHECK(false, "no parameter named '", name, "'");
  return {};
}

std::size_t ParamStore::param_count() const {
  std::size_t n = 0;
  for (const auto& [name, v] : params_) n += v.value().numel();
  return n;
}

namespace {

Tensor he_normal(Rng& rng, std::vector<std::size_t> shape, std::size_t fan_in) {
  Tensor t(std::move(shape));
  const double sd = std::sqrt(2.0 / double(fan_in));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.normal(0.0, sd);
  return t;
}

}  // namespace

VicreglModel::Conv VicreglModel::make_conv(const std::string& name, std::size_t cin,
                                           std::size_t cout, std::size_t k,
                                           std::size_t stride, std::size_t pad,
                                           bool bias) {
  Conv c;
  c.stride = stride;
  c.pad = pad;
  c.w = store_.add_param(name + ".w", he_normal(init_rng_, {cout, cin, k, k},
                                                cin * k * k));
  if (bias) c.b = store_.add_param(name + ".b", Tensor({cout}));
  return c;
}

VicreglModel::Norm VicreglModel::make_norm(const std::string& name,
                                           std::size_t channels, bool active) {
  Norm n;
  n.active = active;
  if (!active) return n;
  n.gamma = store_.add_param(name + ".gamma", Tensor({channels}, 1.0));
  n.beta = store_.add_param(name + ".beta", Tensor({channels}));
  n.run_mean = store_.add_buffer(name + ".run_mean", Tensor({channels}));
  n.run_var = store_.add_buffer(name + ".run_var", Tensor({channels}, 1.0));
  return n;
}

VicreglModel::Mlp VicreglModel::make_mlp(const std::string& name,
                                         const std::vector<std::size_t>& dims,
                                         bool norm) {
  VRL_CHECK_ARG(dims.size() >= 2, name, ": MLP needs at least two dims");
  Mlp m;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    const std::string layer = name + "." + std::to_string(i);
    m.w.push_back(store_.add_param(layer + ".w",
                                   he_normal(init_rng_, {dims[i + 1], dims[i]},
                                             dims[i])));
    m.b.push_back(store_.add_param(layer + ".b", Tensor({dims[i + 1]})));
    const bool hidden = i + 2 < dims.size();
    m.norms.push_back(make_norm(layer + ".bn", dims[i + 1], hidden && norm));
  }
  return m;
}

VicreglModel::VicreglModel(EncoderConfig enc, HeadConfig heads, std::uint64_t init_seed)
    : enc_(std::move(enc)), heads_(std::move(heads)), init_rng_(init_seed) {
  VRL_CHECK_ARG(enc_.stage_channels.size() == enc_.stage_strides.size(),
                "encoder: stage_channels and stage_strides must align");
  VRL_CHECK_ARG(heads_.projector_dims.front() == enc_.output_channels(),
                "projector input dim ", heads_.projector_dims.front(),
                " != encoder output channels ", enc_.output_channels());
  VRL_CHECK_ARG(heads_.expander_dims.front() == enc_.output_channels(),
                "expander input dim must equal encoder output channels");

  stem_ = make_conv("encoder.stem", 3, enc_.stem_channels, 3, 2, 1,
                    !enc_.batch_norm);
  stem_bn_ = make_norm("encoder.stem.bn", enc_.stem_channels, enc_.batch_norm);

  std::size_t cin = enc_.stem_channels;
  for (std::size_t s = 0; s < enc_.stage_channels.size(); ++s) {
    const std::size_t cout = enc_.stage_channels[s];
    const std::size_t stride = enc_.stage_strides[s];
    const std::string base = "encoder.stage" + std::to_string(s);
    Block b;
    b.conv1 = make_conv(base + ".conv1", cin, cout, 3, stride, 1, !enc_.batch_norm);
    b.bn1 = make_norm(base + ".bn1", cout, enc_.batch_norm);
    b.conv2 = make_conv(base + ".conv2", cout, cout, 3, 1, 1, !enc_.batch_norm);
    b.bn2 = make_norm(base + ".bn2", cout, enc_.batch_norm);
    b.has_skip = stride != 1 || cin != cout;
    if (b.has_skip) {
      b.skip = make_conv(base + ".skip", cin, cout, 1, stride, 0, !enc_.batch_norm);
      b.bn_skip = make_norm(base + ".skip.bn", cout, enc_.batch_norm);
    }
    blocks_.push_back(std::move(b));
    cin = cout;
  }

  projector_ = make_mlp("projector", heads_.projector_dims, heads_.projector_norm);
  expander_ = make_mlp("expander", heads_.expander_dims, heads_.expander_norm);
}

ad::Var VicreglModel::apply_norm2d(const Norm& n, const ad::Var& x, bool training) {
  if (!n.active) return x;
  return ad::batchnorm2d(x, n.gamma, n.beta, *n.run_mean, *n.run_var, training);
}

ad::Var VicreglModel::apply_norm_rows(const Norm& n, const ad::Var& x, bool training) {
  if (!n.active) return x;
  return ad::batchnorm_rows(x, n.gamma, n.beta, *n.run_mean, *n.run_var, training);
}

std::vector<ad::Var> VicreglModel::encode_stages(const ad::Var& images, bool training) {
  VRL_CHECK_ARG(images.value().rank() == 4 && images.value().dim(1) == 3,
                "encode: input must be (B,3,H,W)");
  const std::size_t os = enc_.output_stride();
  VRL_CHECK_ARG(images.value().dim(2) % os == 0 && images.value().dim(3) % os == 0,
                "encode: resolution ", images.value().dim(2), "x",
                images.value().dim(3), " is not divisible by the output stride ", os);

  ad::Var x = ad::conv2d(images, stem_.w, stem_.b, stem_.stride, stem_.pad);
  x = ad::relu(apply_norm2d(stem_bn_, x, training));

  std::vector<ad::Var> stages;
  for (auto& b : blocks_) {
    ad::Var h = ad::conv2d(x, b.conv1.w, b.conv1.b, b.conv1.stride, b.conv1.pad);
    h = ad::relu(apply_norm2d(b.bn1, h, training));
    h = ad::conv2d(h, b.conv2.w, b.conv2.b, b.conv2.stride, b.conv2.pad);
    h = apply_norm2d(b.bn2, h, training);
    ad::Var skip = x;
    if (b.has_skip) {
      skip = ad::conv2d(x, b.skip.w, b.skip.b, b.skip.stride, b.skip.pad);
      skip = apply_norm2d(b.bn_skip, skip, training);
    }
    x = ad::relu(ad::add(h, skip));
    stages.push_back(x);
  }
  return stages;
}

ad::Var VicreglModel::encode(const ad::Var& images, bool training) {
  return encode_stages(images, training).back();
}

ad::Var VicreglModel::pool(const ad::Var& feature_map) {
  return ad::global_avg_pool(feature_map);
}

ad::Var VicreglModel::mlp_rows(const Mlp& m, const ad::Var& rows, bool training) {
  ad::Var x = rows;
  for (std::size_t i = 0; i < m.w.size(); ++i) {
    x = ad::linear(x, m.w[i], m.b[i]);
    if (i + 1 < m.w.size()) x = ad::relu(apply_norm_rows(m.norms[i], x, training));
  }
  return x;
}

ad::Var VicreglModel::local_project_rows(const ad::Var& feature_map, bool training) {
  VRL_CHECK_ARG(feature_map.value().rank() == 4 &&
                    feature_map.value().dim(1) == heads_.projector_dims.front(),
                "local_project: channels ", feature_map.value().dim(1),
                " do not match projector input ", heads_.projector_dims.front());
  return mlp_rows(projector_, ad::rows_from_map(feature_map), training);
}

ad::Var VicreglModel::local_project(const ad::Var& feature_map, bool training) {
  ad::Var rows = local_project_rows(feature_map, training);
  return ad::map_from_rows(rows, feature_map.value().dim(0), feature_map.value().dim(2),
                           feature_map.value().dim(3));
}

ad::Var VicreglModel::global_expand(const ad::Var& pooled, bool training) {
  VRL_CHECK_ARG(pooled.value().rank() == 2 &&
                    pooled.value().dim(1) == heads_.expander_dims.front(),
                "global_expand: input dim ", pooled.value().dim(1),
                " does not match expander input ", heads_.expander_dims.front());
  return mlp_rows(expander_, pooled, training);
}

std::uint64_t VicreglModel::state_hash() const {
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto mix_bytes = [&h](const void* data, std::size_t n) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ull;
    }
  };
  for (const auto& [name, v] : store_.params())
    mix_bytes(v.value().data(), v.value().numel() * sizeof(double));
  for (const auto& [name, t] : store_.buffers())
    mix_bytes(t.data(), t.numel() * sizeof(double));
  return h;
}

}  // namespace vicregl
