// Command-line front end: train, sample, eval, posviz, sweep, corpus,
// ablation and config.

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "rpe2d/checkpoint.hpp"
#include "rpe2d/config.hpp"
#include "rpe2d/errors.hpp"
#include "rpe2d/experiment.hpp"
#include "rpe2d/pipeline.hpp"
#include "rpe2d/pnm.hpp"

namespace {

using namespace rpe2d;

RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  RunConfig cfg = path.empty() ? RunConfig{} : parse_config(read_file(path));
  for (const auto& o : overrides) apply_assignment(cfg, o);
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  rpe2d::nn::keep_heap_mapped();
  CLI::App app{"Randomized 2D positional encodings for diffusion transformers"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  auto add_config = [&](CLI::App* cmd) {
    cmd->add_option("-c,--config", config_path, "key = value config file");
    cmd->add_option("--set", overrides, "override a config key (key=value), repeatable");
  };

  // train
  std::string out_dir = "run";
  auto* train = app.add_subcommand("train", "train a model, writing checkpoints and loss.tsv");
  add_config(train);
  train->add_option("-o,--out", out_dir, "output directory");

  // sample
  std::string checkpoint;
  SampleRequest req;
  std::optional<std::size_t> label;
  std::optional<std::int64_t> steps;
  std::optional<double> cfg_scale;
  auto* sample = app.add_subcommand("sample", "sample images from a checkpoint");
  sample->add_option("checkpoint", checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
  sample->add_option("-r,--resolution", req.resolution, "output side length in pixels")->required();
  sample->add_option("-n,--count", req.count, "number of images");
  sample->add_option("--class", label, "class label (default: cycle through trained classes)");
  sample->add_option("--seed", req.seed, "sampling seed");
  sample->add_option("--steps", steps, "sampling steps (default: diffusion.steps)");
  sample->add_option("--cfg-scale", cfg_scale, "guidance scale (default: diffusion.cfg_scale)");
  sample->add_flag("--shift,!--no-shift", req.shift, "timestep shift when resolution differs");
  sample->add_flag("--attn-scale,!--no-attn-scale", req.attn_scale,
                   "attention logit scale when resolution differs");
  sample->add_option("-o,--out", out_dir, "output directory");

  // eval
  std::string sample_dir;
  std::uint64_t ref_seed = 12345;
  std::string report_path;
  auto* eval = app.add_subcommand("eval", "score a directory of samples against the synthetic classes");
  eval->add_option("dir", sample_dir, "directory containing manifest.txt")->required();
  eval->add_option("--ref-seed", ref_seed, "seed of the reference renders");
  eval->add_option("-o,--out", report_path, "report path (default: stdout)");

  // posviz
  std::string variant = "grid";
  std::int64_t h = 8, w = 8, H = 32, W = 32;
  std::uint64_t viz_seed = 0;
  std::string pgm_path;
  auto* posviz = app.add_subcommand("posviz", "draw sampled training positions");
  posviz->add_option("--variant", variant, "grid, equispaced or naive");
  posviz->add_option("--rows", h, "patch rows");
  posviz->add_option("--cols", w, "patch columns");
  posviz->add_option("--max-h", H, "maximum row position");
  posviz->add_option("--max-w", W, "maximum column position");
  posviz->add_option("--seed", viz_seed, "sampler seed");
  posviz->add_option("--pgm", pgm_path, "also write a PGM image");

  // sweep
  SweepOptions sweep_opt;
  auto* sweep = app.add_subcommand("sweep", "train and evaluate one rpe2d model per max position");
  add_config(sweep);
  sweep->add_option("--max-positions", sweep_opt.max_positions, "values for rpe.max_h = rpe.max_w");
  sweep->add_option("-r,--resolution", sweep_opt.resolution, "sampling resolution");
  sweep->add_option("--per-class", sweep_opt.per_class, "samples per class");
  sweep->add_option("--seed", sweep_opt.sampling.seed, "sampling seed");
  sweep->add_option("--steps", steps, "sampling steps (default: diffusion.steps)");
  sweep->add_flag("--shift,!--no-shift", sweep_opt.sampling.shift, "timestep shift");
  sweep->add_flag("--attn-scale,!--no-attn-scale", sweep_opt.sampling.attn_scale, "attention scale");
  sweep->add_option("-o,--out", out_dir, "output directory");

  // corpus
  std::size_t per_class = 16;
  std::size_t resolution = 16;
  std::vector<std::int64_t> classes{0, 1, 2, 3, 4, 5, 6, 7};
  std::uint64_t corpus_seed = 0;
  auto* corpus = app.add_subcommand("corpus", "render a synthetic corpus with a manifest");
  corpus->add_option("-r,--resolution", resolution, "side length in pixels");
  corpus->add_option("--per-class", per_class, "images per class");
  corpus->add_option("--classes", classes, "class ids");
  corpus->add_option("--seed", corpus_seed, "render seed");
  corpus->add_option("-o,--out", out_dir, "output directory");

  // ablation
  AblationOptions abl;
  auto* ablation = app.add_subcommand("ablation", "ext vs rpe2d with augmentation and both corrections");
  add_config(ablation);
  ablation->add_option("-r,--resolution", abl.test_resolution, "sampling resolution");
  ablation->add_option("--per-class", abl.per_class, "samples per class");
  ablation->add_option("--sample-seed", abl.sample_seed, "sampling seed");
  ablation->add_option("-o,--out", out_dir, "output directory");

  // config
  auto* config = app.add_subcommand("config", "print the effective configuration");
  add_config(config);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      const RunConfig cfg = load_config(config_path, overrides);
      const auto path = train_run(cfg, out_dir, &std::cerr);
      std::cout << path.string() << '\n';
    } else if (*sample) {
      const LoadedModel probe = load_model(checkpoint);
      req.label = label;
      req.steps = steps.value_or(probe.cfg.sample_steps);
      req.cfg_scale = cfg_scale.value_or(probe.cfg.cfg_scale);
      sample_to_dir(checkpoint, req, out_dir);
      std::cout << out_dir << '\n';
    } else if (*eval) {
      const EvalReport rep = eval_dir(sample_dir, ref_seed);
      if (report_path.empty()) std::cout << rep.to_tsv();
      else write_file(report_path, rep.to_tsv());
    } else if (*posviz) {
      const auto canvas = position_canvas(parse_rpe_variant(variant), h, w, H, W, viz_seed);
      std::cout << canvas_text(canvas);
      if (!pgm_path.empty()) write_pnm(pgm_path, canvas_image(canvas));
    } else if (*sweep) {
      const RunConfig cfg = load_config(config_path, overrides);
      sweep_opt.sampling.steps = steps.value_or(cfg.sample_steps);
      sweep_opt.sampling.cfg_scale = cfg.cfg_scale;
      run_sweep(cfg, sweep_opt, out_dir, &std::cerr);
      std::cout << read_file((std::filesystem::path(out_dir) / "sweep_summary.tsv").string());
    } else if (*corpus) {
      write_corpus(out_dir, classes, per_class, resolution, corpus_seed);
      std::cout << out_dir << '\n';
    } else if (*ablation) {
      const RunConfig cfg = load_config(config_path, overrides);
      const AblationResult res = run_ablation(cfg, abl, out_dir, &std::cerr);
      std::cout << res.table();
      std::cout << "rpe2d beats ext: " << (res.rpe_beats_ext() ? "yes" : "no")
                << "; improving components: " << res.improving_steps() << "/3\n";
    } else if (*config) {
      std::cout << dump_config(load_config(config_path, overrides));
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const CapacityError& e) {
    std::cerr << "capacity error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
