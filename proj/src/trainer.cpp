#include "vicregl/trainer.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "vicregl/verify.hpp"

namespace vicregl {

// -------------------------------------------------------------- TrainConfig

TrainConfig TrainConfig::from_config(const RunConfig& rc) {
  TrainConfig c;
  c.alpha = rc.get_double("loss.alpha", c.alpha);
  c.gamma1 = rc.get_size("loss.gamma1", c.gamma1);
  c.gamma2 = rc.get_size("loss.gamma2", c.gamma2);
  c.weights.lambda_inv = rc.get_double("loss.lambda", c.weights.lambda_inv);
  c.weights.mu_var = rc.get_double("loss.mu", c.weights.mu_var);
  c.weights.nu_cov = rc.get_double("loss.nu", c.weights.nu_cov);
  c.local.use_location = rc.get_bool("loss.use_location", c.local.use_location);
  c.local.use_feature = rc.get_bool("loss.use_feature", c.local.use_feature);
  c.local.local_variance = rc.get_bool("loss.local_variance", c.local.local_variance);
  c.local.local_covariance =
      rc.get_bool("loss.local_covariance", c.local.local_covariance);
  c.local.normalize_feature_match =
      rc.get_bool("loss.normalize_feature_match", c.local.normalize_feature_match);

  c.multicrop = rc.get_bool("multicrop.enabled", c.multicrop);
  c.n_small = rc.get_size("multicrop.n_small", c.n_small);
  c.resolution = rc.get_size("augment.resolution", c.resolution);
  c.small_resolution = rc.get_size("multicrop.small_resolution", c.small_resolution);
  c.area_lo = rc.get_double("augment.area_lo", c.area_lo);
  c.area_hi = rc.get_double("augment.area_hi", c.area_hi);
  c.aspect_lo = rc.get_double("augment.aspect_lo", c.aspect_lo);
  c.aspect_hi = rc.get_double("augment.aspect_hi", c.aspect_hi);
  c.flip_prob = rc.get_double("augment.flip_prob", c.flip_prob);
  c.jitter.brightness = rc.get_double("augment.brightness", c.jitter.brightness);
  c.jitter.contrast = rc.get_double("augment.contrast", c.jitter.contrast);
  c.jitter.saturation = rc.get_double("augment.saturation", c.jitter.saturation);
  c.jitter.grayscale_prob =
      rc.get_double("augment.grayscale_prob", c.jitter.grayscale_prob);

  c.optimizer = rc.get_str("optim.kind", c.optimizer);
  c.momentum = rc.get_double("optim.momentum", c.momentum);
  c.adam_beta1 = rc.get_double("optim.adam_beta1", c.adam_beta1);
  c.adam_beta2 = rc.get_double("optim.adam_beta2", c.adam_beta2);
  c.adam_eps = rc.get_double("optim.adam_eps", c.adam_eps);
  c.batch_size = rc.get_size("optim.batch_size", c.batch_size);
  c.epochs = rc.get_size("optim.epochs", c.epochs);
  c.warmup_epochs = rc.get_double("optim.warmup_epochs", c.warmup_epochs);
  c.base_lr = rc.get_double("optim.base_lr", c.base_lr);
  c.final_lr = rc.get_double("optim.final_lr", c.final_lr);
  c.weight_decay = rc.get_double("optim.weight_decay", c.weight_decay);
  c.seed = rc.get_u64("seed", c.seed);
  c.checkpoint_every = rc.get_size("optim.checkpoint_every", c.checkpoint_every);

  c.encoder.stem_channels = rc.get_size("model.stem_channels", c.encoder.stem_channels);
  c.encoder.stage_channels =
      rc.get_size_list("model.stage_channels", c.encoder.stage_channels);
  c.encoder.stage_strides =
      rc.get_size_list("model.stage_strides", c.encoder.stage_strides);
  c.encoder.batch_norm = rc.get_bool("model.batch_norm", c.encoder.batch_norm);
  c.encoder.input_resolution = c.resolution;
  c.heads.projector_dims =
      rc.get_size_list("model.projector_dims", c.heads.projector_dims);
  c.heads.expander_dims = rc.get_size_list("model.expander_dims", c.heads.expander_dims);
  c.heads.projector_norm = rc.get_bool("model.projector_norm", c.heads.projector_norm);
  c.heads.expander_norm = rc.get_bool("model.expander_norm", c.heads.expander_norm);
  c.validate();
  return c;
}

namespace {
std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(v[i]);
  }
  return s;
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}
}  // namespace

void TrainConfig::to_config(RunConfig& rc) const {
  rc.set("loss.alpha", fmt_double(alpha));
  rc.set("loss.gamma1", std::to_string(gamma1));
  rc.set("loss.gamma2", std::to_string(gamma2));
  rc.set("loss.lambda", fmt_double(weights.lambda_inv));
  rc.set("loss.mu", fmt_double(weights.mu_var));
  rc.set("loss.nu", fmt_double(weights.nu_cov));
  rc.set("loss.use_location", local.use_location ? "true" : "false");
  rc.set("loss.use_feature", local.use_feature ? "true" : "false");
  rc.set("loss.local_variance", local.local_variance ? "true" : "false");
  rc.set("loss.local_covariance", local.local_covariance ? "true" : "false");
  rc.set("loss.normalize_feature_match",
         local.normalize_feature_match ? "true" : "false");
  rc.set("multicrop.enabled", multicrop ? "true" : "false");
  rc.set("multicrop.n_small", std::to_string(n_small));
  rc.set("multicrop.small_resolution", std::to_string(small_resolution));
  rc.set("augment.resolution", std::to_string(resolution));
  rc.set("augment.area_lo", fmt_double(area_lo));
  rc.set("augment.area_hi", fmt_double(area_hi));
  rc.set("augment.aspect_lo", fmt_double(aspect_lo));
  rc.set("augment.aspect_hi", fmt_double(aspect_hi));
  rc.set("augment.flip_prob", fmt_double(flip_prob));
  rc.set("augment.brightness", fmt_double(jitter.brightness));
  rc.set("augment.contrast", fmt_double(jitter.contrast));
  rc.set("augment.saturation", fmt_double(jitter.saturation));
  rc.set("augment.grayscale_prob", fmt_double(jitter.grayscale_prob));
  rc.set("optim.kind", optimizer);
  rc.set("optim.momentum", fmt_double(momentum));
  rc.set("optim.adam_beta1", fmt_double(adam_beta1));
  rc.set("optim.adam_beta2", fmt_double(adam_beta2));
  rc.set("optim.adam_eps", fmt_double(adam_eps));
  rc.set("optim.batch_size", std::to_string(batch_size));
  rc.set("optim.epochs", std::to_string(epochs));
  rc.set("optim.warmup_epochs", fmt_double(warmup_epochs));
  rc.set("optim.base_lr", fmt_double(base_lr));
  rc.set("optim.final_lr", fmt_double(final_lr));
  rc.set("optim.weight_decay", fmt_double(weight_decay));
  rc.set("seed", std::to_string(seed));
  rc.set("optim.checkpoint_every", std::to_string(checkpoint_every));
  rc.set("model.stem_channels", std::to_string(encoder.stem_channels));
  rc.set("model.stage_channels", join_sizes(encoder.stage_channels));
  rc.set("model.stage_strides", join_sizes(encoder.stage_strides));
  rc.set("model.batch_norm", encoder.batch_norm ? "true" : "false");
  rc.set("model.projector_dims", join_sizes(heads.projector_dims));
  rc.set("model.expander_dims", join_sizes(heads.expander_dims));
  rc.set("model.projector_norm", heads.projector_norm ? "true" : "false");
  rc.set("model.expander_norm", heads.expander_norm ? "true" : "false");
}

void TrainConfig::validate() const {
  VRL_CHECK_ARG(alpha >= 0.0 && alpha <= 1.0, "alpha must lie in [0,1], got ", alpha);
  VRL_CHECK_ARG(gamma1 >= 1 && gamma2 >= 1, "gamma values must be >= 1");
  VRL_CHECK_ARG(batch_size >= 2, "batch_size must be >= 2 for the variance term");
  VRL_CHECK_ARG(warmup_epochs <= double(epochs) || epochs == 0,
                "warmup_epochs must not exceed epochs");
  VRL_CHECK_ARG(optimizer == "sgd" || optimizer == "adamw",
                "optimizer must be 'sgd' or 'adamw', got '", optimizer, "'");
  VRL_CHECK_ARG(area_lo > 0.0 && area_lo <= area_hi && area_hi <= 1.0,
                "augment area range must satisfy 0 < lo <= hi <= 1");
}

// ----------------------------------------------------------------- schedule

double cosine_schedule(std::size_t step, std::size_t total_steps,
                       std::size_t warmup_steps, double base_lr, double final_lr) {
  VRL_CHECK_ARG(step <= total_steps && warmup_steps <= total_steps,
                "cosine_schedule: step ", step, " / warmup ", warmup_steps,
                " outside total ", total_steps);
  if (warmup_steps > 0 && step < warmup_steps)
    return base_lr * double(step) / double(warmup_steps);
  if (total_steps == warmup_steps) return step < total_steps ? base_lr : final_lr;
  const double progress =
      double(step - warmup_steps) / double(total_steps - warmup_steps);
  return final_lr + 0.5 * (base_lr - final_lr) * (1.0 + std::cos(M_PI * progress));
}

// ---------------------------------------------------------------- Optimizer

Optimizer::Optimizer(const TrainConfig& cfg, ParamStore& store)
    : cfg_(cfg), store_(store) {
  for (const auto& [name, v] : store_.params()) {
    momentum_.emplace_back(v.value().shape());
    if (cfg_.optimizer == "adamw") second_.emplace_back(v.value().shape());
  }
}

void Optimizer::apply(double lr) {
  const bool adam = cfg_.optimizer == "adamw";
  if (adam) ++adam_t_;
  for (std::size_t i = 0; i < store_.params().size(); ++i) {
    auto& v = store_.params()[i].second;
    Tensor& w = v.mutable_value();
    const Tensor& g = v.grad();
    if (g.numel() != w.numel()) continue;  // never touched by backward
    Tensor& m = momentum_[i];
    if (!adam) {
      for (std::size_t k = 0; k < w.numel(); ++k) {
        m[k] = cfg_.momentum * m[k] + (g[k] + cfg_.weight_decay * w[k]);
        w[k] -= lr * m[k];
      }
    } else {
      Tensor& s = second_[i];
      const double bc1 = 1.0 - std::pow(cfg_.adam_beta1, double(adam_t_));
      const double bc2 = 1.0 - std::pow(cfg_.adam_beta2, double(adam_t_));
      for (std::size_t k = 0; k < w.numel(); ++k) {
        m[k] = cfg_.adam_beta1 * m[k] + (1.0 - cfg_.adam_beta1) * g[k];
        s[k] = cfg_.adam_beta2 * s[k] + (1.0 - cfg_.adam_beta2) * g[k] * g[k];
        const double mhat = m[k] / bc1, shat = s[k] / bc2;
        w[k] -= lr * (mhat / (std::sqrt(shat) + cfg_.adam_eps) +
                      cfg_.weight_decay * w[k]);
      }
    }
  }
}

void Optimizer::pack_state(CheckpointData& data) const {
  for (std::size_t i = 0; i < store_.params().size(); ++i) {
    const auto& name = store_.params()[i].first;
    data.tensors.emplace_back("opt/m/" + name, momentum_[i]);
    if (!second_.empty()) data.tensors.emplace_back("opt/v/" + name, second_[i]);
  }
  data.tensors.emplace_back("opt/t", Tensor::scalar(double(adam_t_)));
}

void Optimizer::restore_state(const CheckpointData& data) {
  for (std::size_t i = 0; i < store_.params().size(); ++i) {
    const auto& name = store_.params()[i].first;
    const Tensor* m = data.find("opt/m/" + name);
    VRL_CHECK(m && m->same_shape(momentum_[i]), "checkpoint missing optimizer state for ",
              name);
    momentum_[i] = *m;
    if (!second_.empty()) {
      const Tensor* s = data.find("opt/v/" + name);
      VRL_CHECK(s && s->same_shape(second_[i]),
                "checkpoint missing adam second moment for ", name);
      second_[i] = *s;
    }
  }
  const Tensor* t = data.find("opt/t");
  VRL_CHECK(t != nullptr, "checkpoint missing opt/t");
  adam_t_ = std::size_t((*t)[0]);
}

// ------------------------------------------------------------------ Trainer

Trainer::Trainer(TrainConfig cfg, const Dataset& dataset)
    : cfg_(std::move(cfg)),
      dataset_(dataset),
      model_(cfg_.encoder, cfg_.heads, cfg_.seed),
      optimizer_(cfg_, model_.store()),
      rng_(cfg_.seed ^ 0x7f4a7c15ull) {
  cfg_.validate();
  VRL_CHECK_ARG(dataset_.size() >= cfg_.batch_size,
                "dataset smaller than one batch (", dataset_.size(), " < ",
                cfg_.batch_size, ")");
}

std::size_t Trainer::steps_per_epoch() const {
  return std::max<std::size_t>(1, dataset_.size() / cfg_.batch_size);
}

std::size_t Trainer::total_steps() const { return cfg_.epochs * steps_per_epoch(); }

ViewBatch Trainer::forward_view(const Tensor& images, std::vector<PositionGrid> grids,
                                bool large) {
  const std::size_t os = cfg_.encoder.output_stride();
  ad::Var input = ad::constant(images);
  ad::Var map = model_.encode(input, true);
  ViewBatch v;
  v.batch = images.dim(0);
  v.map_h = images.dim(2) / os;
  v.map_w = images.dim(3) / os;
  v.grids = std::move(grids);
  v.rows = model_.local_project_rows(map, true);
  v.global_embedding = model_.global_expand(VicreglModel::pool(map), true);
  v.is_large = large;
  return v;
}

LossResult Trainer::compute_loss(const std::vector<ViewBatch>& views) const {
  if (views.size() == 2)
    return total_loss_two_view(views[0], views[1], cfg_.alpha, cfg_.gamma1,
                               cfg_.weights, cfg_.local);
  return total_loss_multicrop(views, cfg_.alpha, cfg_.gamma1, cfg_.gamma2,
                              cfg_.weights, cfg_.local);
}

StepStats Trainer::train_step(const std::vector<std::size_t>& batch_indices) {
  const std::size_t B = batch_indices.size();
  VRL_CHECK_ARG(B >= 2, "train_step: batch must have at least 2 samples");
  const std::size_t n_views = 2 + (cfg_.multicrop ? cfg_.n_small : 0);
  const std::size_t os = cfg_.encoder.output_stride();

  std::vector<Tensor> images;
  std::vector<std::vector<PositionGrid>> grids(n_views);
  for (std::size_t v = 0; v < n_views; ++v) {
    const std::size_t res = v < 2 ? cfg_.resolution : cfg_.small_resolution;
    images.emplace_back(std::vector<std::size_t>{B, 3, res, res});
    grids[v].resize(B);
  }

  for (std::size_t b = 0; b < B; ++b) {
    const SeedSample& sample = dataset_.samples.at(batch_indices[b]);
    for (std::size_t v = 0; v < n_views; ++v) {
      const std::size_t res = v < 2 ? cfg_.resolution : cfg_.small_resolution;
      CropRect crop = sample_view_spec(rng_, {sample.height(), sample.width()},
                                       {cfg_.area_lo, cfg_.area_hi},
                                       {cfg_.aspect_lo, cfg_.aspect_hi}, {res, res},
                                       cfg_.flip_prob);
      Tensor view = apply_view(sample, crop, cfg_.jitter, rng_);
      std::copy(view.data(), view.data() + view.numel(),
                images[v].data() + b * view.numel());
      grids[v][b] = position_grid(crop, res / os, res / os, int(v));
    }
  }

  std::vector<ViewBatch> views;
  for (std::size_t v = 0; v < n_views; ++v)
    views.push_back(forward_view(images[v], std::move(grids[v]), v < 2));

  LossResult loss = compute_loss(views);

  const auto& bd = loss.breakdown;
  if (!std::isfinite(bd.total)) {
    std::ostringstream os_msg;
    os_msg << "non-finite loss at step " << step_ + 1 << ": total=" << bd.total
           << " invariance=" << bd.invariance << " variance=" << bd.variance
           << " covariance=" << bd.covariance << " global=" << bd.global_vicreg
           << " local_location=" << bd.local_location
           << " local_feature=" << bd.local_feature;
    throw std::runtime_error(os_msg.str());
  }

  const double lr =
      cosine_schedule(step_, total_steps(),
                      std::size_t(cfg_.warmup_epochs * double(steps_per_epoch())),
                      cfg_.base_lr, cfg_.final_lr);
  ad::backward(loss.total);
  optimizer_.apply(lr);

  // collapse statistics over the two large-view embedding batches
  const Tensor& g0 = views[0].global_embedding.value();
  const Tensor& g1 = views[1].global_embedding.value();
  Tensor stacked({2 * B, g0.dim(1)});
  std::copy(g0.data(), g0.data() + g0.numel(), stacked.data());
  std::copy(g1.data(), g1.data() + g1.numel(), stacked.data() + g0.numel());
  const auto stats = verify::collapse_monitor(stacked);

  ++step_;
  StepStats out;
  out.step = step_;
  out.lr = lr;
  out.breakdown = bd;
  out.embed_std_min = stats.min_std;
  out.embed_std_mean = stats.mean_std;
  return out;
}

CheckpointData Trainer::make_checkpoint() const {
  CheckpointData data;
  pack_model_state(model_, data);
  optimizer_.pack_state(data);
  data.tensors.emplace_back("state/step", Tensor::scalar(double(step_)));
  data.tensors.emplace_back("state/rng", tensor_from_string(rng_.save_state()));
  RunConfig rc;
  cfg_.to_config(rc);
  data.tensors.emplace_back("state/config", tensor_from_string(rc.resolved_text()));
  data.config_hash = rc.hash();
  return data;
}

void Trainer::restore_checkpoint(const CheckpointData& data) {
  restore_model_state(model_, data);
  optimizer_.restore_state(data);
  const Tensor* step = data.find("state/step");
  VRL_CHECK(step != nullptr, "checkpoint missing state/step");
  step_ = std::size_t((*step)[0]);
  const Tensor* rng_state = data.find("state/rng");
  VRL_CHECK(rng_state != nullptr, "checkpoint missing state/rng");
  rng_.load_state(string_from_tensor(*rng_state));
}

namespace {

nlohmann::json stats_to_json(const StepStats& s) {
  nlohmann::json j;
  j["step"] = s.step;
  j["lr"] = s.lr;
  j["invariance"] = s.breakdown.invariance;
  j["variance"] = s.breakdown.variance;
  j["covariance"] = s.breakdown.covariance;
  j["global_vicreg"] = s.breakdown.global_vicreg;
  j["local_location"] = s.breakdown.local_location;
  j["local_feature"] = s.breakdown.local_feature;
  j["total"] = s.breakdown.total;
  j["embed_std_min"] = s.embed_std_min;
  j["embed_std_mean"] = s.embed_std_mean;
  return j;
}

}  // namespace

std::string Trainer::pretrain(const std::string& out_dir, bool resume) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const std::string metrics_path = out_dir + "/metrics.jsonl";
  const std::string latest_path = out_dir + "/ckpt_latest.vrgl";

  {
    RunConfig rc;
    cfg_.to_config(rc);
    std::ofstream cfg_out(out_dir + "/config.resolved");
    cfg_out << rc.resolved_text();
  }

  if (resume && fs::exists(latest_path)) {
    restore_checkpoint(load_checkpoint(latest_path));
    // drop any metrics written past the checkpointed step
    std::vector<std::string> keep;
    std::ifstream in(metrics_path);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line, nullptr, false);
      if (!j.is_discarded() && j.value("step", std::size_t(0)) <= step_)
        keep.push_back(line);
    }
    in.close();
    std::ofstream out(metrics_path, std::ios::trunc);
    for (const auto& l : keep) out << l << "\n";
  } else {
    std::ofstream out(metrics_path, std::ios::trunc);  // fresh run
    save_checkpoint(out_dir + "/ckpt_step_000000.vrgl", make_checkpoint());
    save_checkpoint(latest_path, make_checkpoint());
  }

  const std::size_t spe = steps_per_epoch();
  const std::size_t total = total_steps();
  std::ofstream metrics(metrics_path, std::ios::app);

  auto checkpoint_now = [&](std::size_t step) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "/ckpt_step_%06zu.vrgl", step);
    const CheckpointData data = make_checkpoint();
    save_checkpoint(out_dir + buf, data);
    save_checkpoint(latest_path, data);
  };

  while (step_ < total) {
    const std::size_t epoch = step_ / spe;
    // epoch permutation from a dedicated stream so mid-epoch resume can
    // rebuild the same order
    Rng perm_rng(cfg_.seed ^ (0x9e3779b97f4a7c15ull + epoch * 0x2545f4914f6cdd1dull));
    std::vector<std::size_t> perm(dataset_.size());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    perm_rng.shuffle(perm.begin(), perm.end());

    for (std::size_t off = step_ % spe; off < spe && step_ < total; ++off) {
      std::vector<std::size_t> batch(perm.begin() + off * cfg_.batch_size,
                                     perm.begin() + (off + 1) * cfg_.batch_size);
      const StepStats stats = train_step(batch);
      metrics << stats_to_json(stats).dump() << "\n";
      metrics.flush();
      const bool cadence_hit =
          cfg_.checkpoint_every > 0
              ? (step_ % cfg_.checkpoint_every == 0)
              : (step_ % spe == 0);
      if (cadence_hit || step_ == total) checkpoint_now(step_);
    }
  }
  if (!fs::exists(latest_path)) checkpoint_now(step_);
  return latest_path;
}

}  // namespace vicregl
