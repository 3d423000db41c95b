#include <chrono>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "vicregl/data.hpp"
#include "vicregl/trainer.hpp"

using namespace vicregl;
namespace fs = std::filesystem;

namespace {

// tiny corpus + tiny model so each step runs in milliseconds
Dataset tiny_dataset(std::size_t n = 8, std::size_t canvas = 16) {
  ShapesConfig cfg;
  cfg.canvas = canvas;
  cfg.seed = 3;
  Dataset ds;
  ds.class_count = ShapesConfig::kNumClasses;
  ds.has_masks = true;
  ds.has_labels = true;
  for (std::size_t i = 0; i < n; ++i) ds.samples.push_back(make_shapes_sample(cfg, i));
  return ds;
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.encoder.stem_channels = 4;
  c.encoder.stage_channels = {6, 8};
  c.encoder.stage_strides = {2, 2};
  c.heads.projector_dims = {8, 6, 6};
  c.heads.expander_dims = {8, 10, 10};
  c.resolution = 16;
  c.encoder.input_resolution = 16;
  c.small_resolution = 8;
  c.multicrop = false;
  c.gamma1 = 3;
  c.gamma2 = 1;
  c.batch_size = 4;
  c.epochs = 2;
  c.warmup_epochs = 1.0;
  c.base_lr = 0.02;
  c.final_lr = 0.002;
  c.seed = 5;
  c.jitter = {};  // keep unit steps cheap
  return c;
}

std::string temp_dir(const char* stem) {
  auto p = fs::temp_directory_path() /
           (std::string(stem) +
            std::to_string(std::chrono::steady_clock::now().time_since_epoch().count()));
  fs::create_directories(p);
  return p.string();
}

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("cosine schedule hits its three pinned points and ramps linearly") {
  CHECK(cosine_schedule(0, 100, 10, 0.5, 0.01) == 0.0);
  CHECK(cosine_schedule(10, 100, 10, 0.5, 0.01) == doctest::Approx(0.5));
  CHECK(cosine_schedule(100, 100, 10, 0.5, 0.01) == doctest::Approx(0.01));
  CHECK(cosine_schedule(5, 100, 10, 0.5, 0.01) == doctest::Approx(0.25));
  // halfway through decay sits at the midpoint of base and final
  CHECK(cosine_schedule(55, 100, 10, 0.5, 0.01) == doctest::Approx(0.255));
  CHECK(cosine_schedule(0, 10, 0, 0.5, 0.01) == doctest::Approx(0.5 + 0.0).epsilon(1));
  CHECK_THROWS_AS(cosine_schedule(11, 10, 0, 0.5, 0.01), std::invalid_argument);
}

TEST_CASE("zero learning rate leaves parameters bit-identical") {
  Dataset ds = tiny_dataset();
  TrainConfig cfg = tiny_config();
  cfg.base_lr = 0.0;
  cfg.final_lr = 0.0;
  Trainer tr(cfg, ds);
  std::vector<Tensor> before;
  for (const auto& [n, v] : tr.model().store().params()) before.push_back(v.value());
  tr.train_step({0, 1, 2, 3});
  std::size_t i = 0;
  for (const auto& [n, v] : tr.model().store().params()) {
    for (std::size_t k = 0; k < v.value().numel(); ++k)
      CHECK(v.value()[k] == before[i][k]);
    ++i;
  }
}

TEST_CASE("identical config and seed give identical loss sequences") {
  Dataset ds = tiny_dataset();
  TrainConfig cfg = tiny_config();
  Trainer a(cfg, ds), b(cfg, ds);
  for (int s = 0; s < 3; ++s) {
    StepStats sa = a.train_step({0, 1, 2, 3});
    StepStats sb = b.train_step({0, 1, 2, 3});
    CHECK(sa.breakdown.total == sb.breakdown.total);
    CHECK(sa.breakdown.local_location == sb.breakdown.local_location);
    CHECK(sa.embed_std_min == sb.embed_std_min);
  }
}

TEST_CASE("alpha=1 training produces pure global-criterion gradients") {
  Dataset ds = tiny_dataset();
  TrainConfig cfg = tiny_config();
  cfg.alpha = 1.0;
  Trainer tr(cfg, ds);
  VicreglModel& m = tr.model();

  // forward in eval mode so batch-norm has no side effects between passes
  Rng rng(17);
  Tensor imgs({4, 3, 16, 16});
  for (std::size_t i = 0; i < imgs.numel(); ++i) imgs[i] = rng.uniform();
  std::vector<PositionGrid> grids;
  for (int i = 0; i < 4; ++i)
    grids.push_back(position_grid({0, 0, 16, 16, false, 16, 16}, 2, 2, 0));

  auto forward_views = [&](bool) {
    ad::Var map_a = m.encode(ad::constant(imgs), false);
    ViewBatch va{m.local_project_rows(map_a, false), 4, 2, 2, grids,
                 m.global_expand(VicreglModel::pool(map_a), false), true};
    ad::Var map_b = m.encode(ad::constant(imgs), false);
    ViewBatch vb{m.local_project_rows(map_b, false), 4, 2, 2, grids,
                 m.global_expand(VicreglModel::pool(map_b), false), true};
    return std::make_pair(va, vb);
  };

  auto [va, vb] = forward_views(true);
  LossResult full = total_loss_two_view(va, vb, 1.0, 2, cfg.weights, cfg.local);
  ad::backward(full.total);
  std::vector<Tensor> grads_full;
  for (const auto& [n, v] : m.store().params())
    grads_full.push_back(v.grad().numel() ? v.grad() : Tensor());

  auto [va2, vb2] = forward_views(true);
  LossResult global_only =
      vicreg_loss(va2.global_embedding, vb2.global_embedding, cfg.weights);
  ad::backward(global_only.total);

  std::size_t i = 0;
  for (const auto& [name, v] : m.store().params()) {
    const bool projector = name.rfind("projector", 0) == 0;
    if (!projector && grads_full[i].numel() > 0 && v.grad().numel() > 0) {
      CAPTURE(name);
      for (std::size_t k = 0; k < v.grad().numel(); ++k)
        CHECK(grads_full[i][k] == v.grad()[k]);  // bit-exact
    }
    ++i;
  }
  CHECK(full.breakdown.total == global_only.breakdown.total);
}

TEST_CASE("pretrain with epochs=0 emits only the initialization checkpoint") {
  Dataset ds = tiny_dataset();
  TrainConfig cfg = tiny_config();
  cfg.epochs = 0;
  cfg.warmup_epochs = 0.0;
  Trainer tr(cfg, ds);
  const std::string dir = temp_dir("pretrain_zero_");
  tr.pretrain(dir);
  CHECK(fs::exists(dir + "/ckpt_step_000000.vrgl"));
  CHECK(fs::exists(dir + "/ckpt_latest.vrgl"));
  CHECK(fs::exists(dir + "/config.resolved"));
  std::size_t ckpts = 0;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".vrgl") ++ckpts;
  CHECK(ckpts == 2);  // step 0 + latest
  // metrics file exists and is empty
  CHECK(slurp(dir + "/metrics.jsonl").empty());
  fs::remove_all(dir);
}

TEST_CASE("interrupted runs resume with a gapless metrics log") {
  Dataset ds = tiny_dataset();
  TrainConfig cfg = tiny_config();  // 2 epochs x 2 steps
  const std::string dir_full = temp_dir("pretrain_full_");
  const std::string dir_resumed = temp_dir("pretrain_resume_");

  {
    Trainer tr(cfg, ds);
    tr.pretrain(dir_full);
  }
  {
    TrainConfig first = cfg;
    first.epochs = 1;  // "interrupted" after epoch 1
    Trainer tr(first, ds);
    tr.pretrain(dir_resumed);
  }
  {
    Trainer tr(cfg, ds);
    tr.pretrain(dir_resumed, /*resume=*/true);
  }

  const std::string a = slurp(dir_full + "/metrics.jsonl");
  const std::string b = slurp(dir_resumed + "/metrics.jsonl");
  CHECK(a == b);  // byte-identical, steps 1..4 with no gap

  CHECK(slurp(dir_full + "/ckpt_latest.vrgl") == slurp(dir_resumed + "/ckpt_latest.vrgl"));
  fs::remove_all(dir_full);
  fs::remove_all(dir_resumed);
}

TEST_CASE("train config round-trips through the dotted-path document") {
  TrainConfig cfg = tiny_config();
  cfg.alpha = 0.33;
  cfg.local.use_feature = false;
  cfg.optimizer = "adamw";
  RunConfig rc;
  cfg.to_config(rc);
  TrainConfig back = TrainConfig::from_config(rc);
  CHECK(back.alpha == cfg.alpha);
  CHECK(back.local.use_feature == false);
  CHECK(back.optimizer == "adamw");
  CHECK(back.encoder.stage_channels == cfg.encoder.stage_channels);
  CHECK(back.heads.expander_dims == cfg.heads.expander_dims);

  RunConfig rc2;
  rc2.set("loss.alpha", "1.5");
  CHECK_THROWS_AS(TrainConfig::from_config(rc2), std::invalid_argument);
}

TEST_CASE("every ablation switch trains without error and zeroes its component") {
  Dataset ds = tiny_dataset();
  struct Case {
    const char* name;
    void (*mutate)(TrainConfig&);
    bool expect_zero_loc, expect_zero_feat;
  };
  const Case cases[] = {
      {"no_location", [](TrainConfig& c) { c.local.use_location = false; }, true, false},
      {"no_feature", [](TrainConfig& c) { c.local.use_feature = false; }, false, true},
      {"no_local_variance", [](TrainConfig& c) { c.local.local_variance = false; },
       false, false},
      {"no_local_covariance", [](TrainConfig& c) { c.local.local_covariance = false; },
       false, false},
      {"no_multicrop", [](TrainConfig& c) { c.multicrop = false; }, false, false},
  };
  for (const auto& cs : cases) {
    CAPTURE(cs.name);
    TrainConfig cfg = tiny_config();
    cs.mutate(cfg);
    Trainer tr(cfg, ds);
    StepStats stats = tr.train_step({0, 1, 2, 3});
    CHECK(std::isfinite(stats.breakdown.total));
    if (cs.expect_zero_loc) CHECK(stats.breakdown.local_location == 0.0);
    if (cs.expect_zero_feat) CHECK(stats.breakdown.local_feature == 0.0);
    const double recon =
        cfg.alpha * stats.breakdown.global_vicreg +
        (1.0 - cfg.alpha) * (stats.breakdown.local_location +
                             stats.breakdown.local_feature);
    CHECK(stats.breakdown.total == doctest::Approx(recon).epsilon(1e-10));
  }
}

TEST_CASE("adamw optimizer runs and updates parameters") {
  Dataset ds = tiny_dataset();
  TrainConfig cfg = tiny_config();
  cfg.optimizer = "adamw";
  cfg.base_lr = 0.001;
  Trainer tr(cfg, ds);
  Tensor before = tr.model().store().params()[0].second.value();
  tr.train_step({0, 1, 2, 3});
  tr.train_step({4, 5, 6, 7});
  const Tensor& after = tr.model().store().params()[0].second.value();
  bool changed = false;
  for (std::size_t i = 0; i < before.numel(); ++i) changed = changed || after[i] != before[i];
  CHECK(changed);
}
