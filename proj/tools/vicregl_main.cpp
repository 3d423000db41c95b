#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"
#include "vicregl/checkpoint.hpp"
#include "vicregl/config.hpp"
#include "vicregl/data.hpp"
#include "vicregl/eval.hpp"
#include "vicregl/trainer.hpp"
#include "vicregl/verify.hpp"
#include "vicregl/visualize.hpp"

namespace {

using namespace vicregl;

std::unique_ptr<VicreglModel> model_from_checkpoint(const std::string& path,
                                                    TrainConfig* cfg_out = nullptr) {
  const CheckpointData data = load_checkpoint(path);
  const Tensor* cfg_tensor = data.find("state/config");
  VRL_CHECK(cfg_tensor != nullptr, "checkpoint ", path, " carries no config record");
  RunConfig rc;
  rc.load_string(string_from_tensor(*cfg_tensor), path + ":config");
  TrainConfig cfg = TrainConfig::from_config(rc);
  auto model = std::make_unique<VicreglModel>(cfg.encoder, cfg.heads, cfg.seed);
  restore_model_state(*model, data);
  if (cfg_out) *cfg_out = cfg;
  return model;
}

void append_probe_record(const std::string& out_dir, const ProbeResult& res,
                         const std::string& ckpt, const std::string& data_path) {
  if (out_dir.empty()) return;
  std::filesystem::create_directories(out_dir);
  nlohmann::json j;
  j["metric"] = res.metric;
  j["value"] = res.value;
  j["per_class"] = res.per_class;
  j["best_lr"] = res.best_lr;
  j["config"] = res.config_snapshot;
  j["checkpoint"] = ckpt;
  j["data"] = data_path;
  std::ofstream os(out_dir + "/probe_results.jsonl", std::ios::app);
  os << j.dump() << "\n";
}

int run(int argc, char** argv) {
  CLI::App app{"VICRegL pretraining, evaluation and verification"};
  app.require_subcommand(1);

  // ---- gen-data ----
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic shapes dataset");
  std::string gen_out;
  std::size_t gen_n = 0;
  ShapesConfig shapes;
  gen->add_option("--out", gen_out, "output .vdsb path")->required();
  gen->add_option("--n", gen_n, "number of samples")
      ->required()
      ->check(CLI::PositiveNumber);
  gen->add_option("--size", shapes.canvas, "canvas resolution");
  gen->add_option("--seed", shapes.seed, "generator seed");
  gen->add_option("--min-shapes", shapes.min_shapes, "min shapes per image");
  gen->add_option("--max-shapes", shapes.max_shapes, "max shapes per image");
  gen->add_option("--color-jitter", shapes.color_jitter, "palette jitter amplitude");

  // ---- pretrain ----
  auto* pre = app.add_subcommand("pretrain", "run VICRegL pretraining");
  std::string pre_data, pre_out, pre_config;
  bool pre_resume = false;
  double f_alpha = 0.0;
  std::size_t f_gamma1 = 0, f_gamma2 = 0, f_epochs = 0, f_batch = 0, f_seed = 0,
              f_nsmall = 0;
  double f_lr = 0.0;
  bool f_multicrop = true;
  pre->add_option("--data", pre_data, "dataset path (.vdsb or png dir)")->required();
  pre->add_option("--out-dir", pre_out, "run directory")->required();
  pre->add_option("--config", pre_config, "config file (flags override it)")
      ->check(CLI::ExistingFile);
  auto* alpha_opt = pre->add_option("--alpha", f_alpha, "global/local trade-off")
                        ->check(CLI::Range(0.0, 1.0));
  auto* g1_opt = pre->add_option("--gamma1", f_gamma1, "matches kept, large views");
  auto* g2_opt = pre->add_option("--gamma2", f_gamma2, "matches kept, small views");
  auto* mc_opt = pre->add_flag("--multicrop,!--no-multicrop", f_multicrop,
                               "enable multi-crop views");
  auto* ns_opt = pre->add_option("--n-small", f_nsmall, "small views per sample");
  auto* ep_opt = pre->add_option("--epochs", f_epochs, "training epochs");
  auto* bs_opt = pre->add_option("--batch", f_batch, "batch size");
  auto* lr_opt = pre->add_option("--lr", f_lr, "base learning rate");
  auto* seed_opt = pre->add_option("--seed", f_seed, "run seed");
  pre->add_flag("--resume", pre_resume, "resume from the latest checkpoint");

  // ---- eval ----
  std::string ev_ckpt, ev_data, ev_out;
  std::size_t ev_epochs = 0, ev_seed = 0;
  bool ev_concat = false;
  auto add_eval_opts = [&](CLI::App* cmd) {
    cmd->add_option("--ckpt", ev_ckpt, "checkpoint path")->required();
    cmd->add_option("--data", ev_data, "labeled dataset path")->required();
    cmd->add_option("--out-dir", ev_out, "where probe records are appended");
    cmd->add_option("--epochs", ev_epochs, "probe epochs");
    cmd->add_option("--seed", ev_seed, "probe seed");
    cmd->add_flag("--concat-stages", ev_concat, "probe all stages concatenated");
  };
  auto* ecls = app.add_subcommand("eval-cls", "frozen linear classification probe");
  add_eval_opts(ecls);
  auto* eseg = app.add_subcommand("eval-seg", "frozen linear segmentation probe");
  add_eval_opts(eseg);

  // ---- verify ----
  auto* ver = app.add_subcommand("verify", "run the verification suite");
  std::string ver_filter;
  ver->add_option("--filter", ver_filter, "substring filter on check names");

  // ---- visualize-matches ----
  auto* vis = app.add_subcommand("visualize-matches",
                                 "render crop rectangles and top matches");
  std::string vis_data, vis_ckpt, vis_out = ".";
  std::size_t vis_index = 0, vis_gamma = 6, vis_lines = 10, vis_seed = 0;
  vis->add_option("--data", vis_data, "dataset path")->required();
  vis->add_option("--index", vis_index, "sample index");
  vis->add_option("--ckpt", vis_ckpt, "checkpoint (default: seeded random weights)");
  vis->add_option("--out-dir", vis_out, "output directory");
  vis->add_option("--gamma", vis_gamma, "matches selected");
  vis->add_option("--max-lines", vis_lines, "matches drawn");
  vis->add_option("--seed", vis_seed, "crop sampling seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  if (gen->parsed()) {
    gen_shapes(shapes, gen_n, gen_out);
    std::cout << "wrote " << gen_n << " samples to " << gen_out << "\n";
    return 0;
  }

  if (pre->parsed()) {
    RunConfig rc;
    if (!pre_config.empty()) rc.load_file(pre_config);
    if (alpha_opt->count()) rc.set("loss.alpha", std::to_string(f_alpha));
    if (g1_opt->count()) rc.set("loss.gamma1", std::to_string(f_gamma1));
    if (g2_opt->count()) rc.set("loss.gamma2", std::to_string(f_gamma2));
    if (mc_opt->count()) rc.set("multicrop.enabled", f_multicrop ? "true" : "false");
    if (ns_opt->count()) rc.set("multicrop.n_small", std::to_string(f_nsmall));
    if (ep_opt->count()) rc.set("optim.epochs", std::to_string(f_epochs));
    if (bs_opt->count()) rc.set("optim.batch_size", std::to_string(f_batch));
    if (lr_opt->count()) rc.set("optim.base_lr", std::to_string(f_lr));
    if (seed_opt->count()) rc.set("seed", std::to_string(f_seed));
    TrainConfig cfg = TrainConfig::from_config(rc);
    Dataset ds = load_dataset(pre_data);
    Trainer trainer(cfg, ds);
    const std::string final_ckpt = trainer.pretrain(pre_out, pre_resume);
    std::cout << "final checkpoint: " << final_ckpt << "\n";
    return 0;
  }

  if (ecls->parsed() || eseg->parsed()) {
    VRL_CHECK(std::filesystem::exists(ev_ckpt), "checkpoint not found: ", ev_ckpt);
    auto model = model_from_checkpoint(ev_ckpt);
    Dataset ds = load_dataset(ev_data);
    ProbeConfig pc;
    pc.seed = ev_seed;
    pc.concat_stages = ev_concat;
    if (ev_epochs > 0) pc.epochs = ev_epochs;
    const std::uint64_t before = model->state_hash();
    ProbeResult res = ecls->parsed() ? linear_probe_classify(*model, ds, pc)
                                     : linear_probe_segment(*model, ds, pc);
    VRL_CHECK(model->state_hash() == before, "probe modified the frozen backbone");
    std::cout << res.metric << " = " << res.value << " (best lr " << res.best_lr
              << ", backbone frozen)\n";
    append_probe_record(ev_out, res, ev_ckpt, ev_data);
    return 0;
  }

  if (ver->parsed()) return verify::run_suite(ver_filter, std::cout) ? 0 : 1;

  if (vis->parsed()) {
    Dataset ds = load_dataset(vis_data);
    VRL_CHECK(vis_index < ds.size(), "index ", vis_index, " outside dataset of ",
              ds.size(), " samples");
    std::unique_ptr<VicreglModel> model;
    if (!vis_ckpt.empty()) {
      model = model_from_checkpoint(vis_ckpt);
    } else {
      TrainConfig dflt;
      model = std::make_unique<VicreglModel>(dflt.encoder, dflt.heads, vis_seed);
    }
    const SeedSample& sample = ds.samples[vis_index];
    const std::size_t res = model->encoder_config().input_resolution;
    Rng rng(vis_seed);
    CropRect a = sample_view_spec(rng, {sample.height(), sample.width()}, {0.2, 1.0},
                                  {0.75, 4.0 / 3.0}, {res, res}, 0.5);
    CropRect b = sample_view_spec(rng, {sample.height(), sample.width()}, {0.2, 1.0},
                                  {0.75, 4.0 / 3.0}, {res, res}, 0.5);
    VisualizeOptions opts;
    opts.gamma = vis_gamma;
    opts.max_lines = vis_lines;
    ImageU8 canvas = render_matches(sample, a, b, *model, opts);
    std::filesystem::create_directories(vis_out);
    const std::string out_path =
        vis_out + "/matches_" + std::to_string(vis_index) + ".png";
    write_png(out_path, canvas);
    std::cout << "wrote " << out_path << "\n";
    return 0;
  }

  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
