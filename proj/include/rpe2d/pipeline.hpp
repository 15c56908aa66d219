#pragma once

// Training loop, sampling to disk, evaluation of sample directories,
// position visualisation and the max-position sweep.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "rpe2d/checkpoint.hpp"
#include "rpe2d/conditioning.hpp"
#include "rpe2d/config.hpp"
#include "rpe2d/data_eval.hpp"
#include "rpe2d/diffusion.hpp"
#include "rpe2d/model.hpp"
#include "rpe2d/pnm.hpp"
#include "rpe2d/posenc.hpp"
#include "rpe2d/random_positions.hpp"
#include "rpe2d/rng.hpp"

namespace rpe2d {

namespace fs = std::filesystem;

// Positions seen by one training sample at the training resolution.
inline TokenPositions training_positions(const RunConfig& cfg, SeededRng& rng) {
  const std::int64_t g = cfg.train_grid();
  if (cfg.strategy != Strategy::rpe2d) return from_grid(identity_grid(g, g), cfg.pe_base);
  switch (cfg.variant) {
    case RpeVariant::grid:
      return from_grid(sample_grid_positions(g, g, cfg.max_h, cfg.max_w, rng), cfg.pe_base);
    case RpeVariant::equispaced:
      return from_grid(sample_equispaced_positions(g, g, cfg.max_h, cfg.max_w, rng), cfg.pe_base);
    case RpeVariant::naive:
      return from_flat(std::size_t(g), std::size_t(g),
                       sample_naive_positions(g, g, cfg.max_h, cfg.max_w, rng), cfg.pe_base);
  }
  throw ConfigError("unknown rpe.variant");
}

// Positions used when sampling at `resolution` pixels per side.
inline TokenPositions sampling_positions(const RunConfig& cfg, std::int64_t resolution) {
  const std::int64_t p = std::int64_t(cfg.model.patch);
  if (resolution < p || resolution % p != 0) {
    throw ConfigError("resolution " + std::to_string(resolution) + " is not a multiple of patch " +
                      std::to_string(p));
  }
  const std::int64_t g = resolution / p;
  if (cfg.strategy == Strategy::rpe2d) {
    const bool over = cfg.variant == RpeVariant::naive ? g * g > cfg.max_h * cfg.max_w
                                                       : (g > cfg.max_h || g > cfg.max_w);
    if (over) {
      throw CapacityError("resolution " + std::to_string(resolution) + " needs a " +
                          std::to_string(g) + "x" + std::to_string(g) +
                          " patch grid, beyond max positions H=" + std::to_string(cfg.max_h) +
                          ", W=" + std::to_string(cfg.max_w));
    }
    if (cfg.variant == RpeVariant::naive) {
      return from_flat(std::size_t(g), std::size_t(g),
                       naive_test_positions(g, g, cfg.max_h, cfg.max_w), cfg.pe_base);
    }
  }
  return strategy_token_positions(cfg.pe(resolution));
}

// One training example after augmentation, before noising.
struct TrainExample {
  nn::Tensor image;
  Conditioning cond;
  TokenPositions pos;
  std::int64_t t = 0;
  nn::Tensor noise;
};

// Everything random about sample b of step `step` comes from its own seed.
inline TrainExample draw_example(const RunConfig& cfg, std::uint64_t step, std::uint64_t b) {
  SeededRng rng(derive_seed(cfg.seed, step, b));
  TrainExample ex;
  const auto cls = std::size_t(cfg.classes[std::size_t(rng.uniform_int(0, std::int64_t(cfg.classes.size()) - 1))]);
  const std::int64_t res = cfg.resolution;
  if (cfg.aug_enabled) {
    const std::int64_t orig =
        cfg.original_sizes[std::size_t(rng.uniform_int(0, std::int64_t(cfg.original_sizes.size()) - 1))];
    const auto base = generate<float>(cls, std::size_t(orig), rng, cfg.model.channels);
    AugmentedSample<float> s = augment(base, res * res, rng, cfg.aug);
    ex.image = std::move(s.image);
    ex.cond.micro = s.cond;
  } else {
    ex.image = generate<float>(cls, std::size_t(res), rng, cfg.model.channels);
    ex.cond.micro = MicroCondition::full_frame(res, res);
  }
  if (!rng.bernoulli(cfg.class_drop)) ex.cond.label = cls;
  ex.pos = training_positions(cfg, rng);
  ex.t = rng.uniform_int(0, cfg.T - 1);
  ex.noise = nn::Tensor(ex.image.shape);
  for (auto& v : ex.noise.data) v = float(rng.normal());
  return ex;
}

// Holds a lock file for the lifetime of a training run.
class DirLock {
 public:
  explicit DirLock(const fs::path& dir) : path_(dir / "train.lock") {
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f) {
      throw InputError("training directory is locked (" + path_.string() +
                       "); remove it if no other run is active");
    }
    std::fclose(f);
  }
  ~DirLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  fs::path path_;
};

class Trainer {
 public:
  explicit Trainer(RunConfig cfg)
      : cfg_(std::move(cfg)),
        model_(cfg_.model, derive_seed(cfg_.seed, 0x6d6f64656cull)),
        opt_(cfg_.optimizer()),
        sched_(cfg_.schedule()) {}

  // Runs one optimizer step on a fresh batch; returns the mean loss.
  double step() {
    const std::uint64_t s = step_ + 1;
    model_.zero_grad();
    double total = 0;
    const float inv_b = 1.0f / float(cfg_.batch);
    for (std::int64_t b = 0; b < cfg_.batch; ++b) {
      TrainExample ex = draw_example(cfg_, s, std::uint64_t(b));
      nn::Tape<float> tape;
      nn::Var loss = diffusion_loss(model_, tape, ex.image, ex.t, ex.noise, ex.cond, ex.pos, sched_);
      const double l = tape.value(loss)[0];
      if (!std::isfinite(l)) throw NumericError("non-finite loss at step " + std::to_string(s));
      total += l;
      tape.backward(tape.scale(loss, inv_b));
    }
    opt_.step(model_.parameters());
    step_ = s;
    return total / double(cfg_.batch);
  }

  std::uint64_t global_step() const { return step_; }
  const RunConfig& config() const { return cfg_; }
  DiT<float>& model() { return model_; }
  Checkpoint checkpoint() const { return make_checkpoint(cfg_, model_, opt_.state(), step_); }

 private:
  RunConfig cfg_;
  DiT<float> model_;
  nn::AdamW<float> opt_;
  DiffusionSchedule sched_;
  std::uint64_t step_ = 0;
};

inline std::string checkpoint_name(std::uint64_t step) {
  std::ostringstream os;
  os << "checkpoint_" << std::setw(6) << std::setfill('0') << step << ".ckpt";
  return os.str();
}

inline std::string format_loss(double v) {
  std::ostringstream os;
  os << std::setprecision(9) << v;
  return os.str();
}

// Trains from scratch into `out_dir`: loss.tsv, checkpoint_NNNNNN.ckpt at
// step 0, every checkpoint_interval steps and at the end, plus final.ckpt.
// Returns the path of the final checkpoint.
inline fs::path train_run(const RunConfig& cfg, const fs::path& out_dir, std::ostream* progress = nullptr) {
  cfg.validate();
  fs::create_directories(out_dir);
  DirLock lock(out_dir);
  Trainer tr(cfg);
  std::ofstream log(out_dir / "loss.tsv", std::ios::trunc);
  if (!log) throw InputError("cannot write " + (out_dir / "loss.tsv").string());
  save_checkpoint((out_dir / checkpoint_name(0)).string(), tr.checkpoint());
  for (std::int64_t s = 1; s <= cfg.train_steps; ++s) {
    double loss = 0;
    try {
      loss = tr.step();
    } catch (const NumericError&) {
      save_checkpoint((out_dir / "emergency.ckpt").string(), tr.checkpoint());
      throw;
    }
    log << s << '\t' << format_loss(loss) << '\n';
    if (s % cfg.checkpoint_interval == 0 || s == cfg.train_steps) {
      log.flush();
      save_checkpoint((out_dir / checkpoint_name(std::uint64_t(s))).string(), tr.checkpoint());
    }
    if (progress && (s % 100 == 0 || s == cfg.train_steps)) {
      *progress << "step " << s << " loss " << format_loss(loss) << '\n';
    }
  }
  const fs::path final_path = out_dir / "final.ckpt";
  save_checkpoint(final_path.string(), tr.checkpoint());
  return final_path;
}

// Model and configuration restored from a checkpoint.
struct LoadedModel {
  RunConfig cfg;
  DiT<float> model;
};

inline LoadedModel load_model(const std::string& path) {
  const Checkpoint ck = load_checkpoint(path);
  RunConfig cfg = parse_config(ck.config_text);
  LoadedModel lm{cfg, DiT<float>(cfg.model, 0)};
  load_parameters(lm.model, ck);
  return lm;
}

struct SampleRequest {
  std::int64_t resolution = 16;
  std::size_t count = 8;
  std::optional<std::size_t> label;  // nullopt: cycle through the configured classes
  std::uint64_t seed = 0;
  std::int64_t steps = 250;
  double cfg_scale = 4.0;
  bool shift = false;
  bool attn_scale = false;
};

struct GeneratedImage {
  nn::Tensor image;
  std::size_t class_id = 0;
  std::uint64_t seed = 0;
};

inline std::size_t request_class(const RunConfig& cfg, const SampleRequest& req, std::size_t i) {
  return req.label ? *req.label : std::size_t(cfg.classes[i % cfg.classes.size()]);
}

inline GeneratedImage sample_one(DiT<float>& model, const RunConfig& cfg, const SampleRequest& req,
                                 const TokenPositions& pos, const DiffusionSchedule& sched,
                                 std::size_t i) {
  SampleOptions opt;
  opt.steps = req.steps;
  opt.guidance = req.cfg_scale;
  opt.use_shift = req.shift;
  opt.use_attn_scale = req.attn_scale;
  opt.train_tokens = cfg.train_tokens();
  GeneratedImage g;
  g.class_id = request_class(cfg, req, i);
  g.seed = derive_seed(req.seed, i);
  SeededRng rng(g.seed);
  g.image = sample(model, std::size_t(req.resolution), std::size_t(req.resolution), g.class_id, opt,
                   sched, pos, rng)
                .image;
  return g;
}

inline std::vector<GeneratedImage> sample_images(DiT<float>& model, const RunConfig& cfg,
                                                 const SampleRequest& req) {
  const TokenPositions pos = sampling_positions(cfg, req.resolution);
  const DiffusionSchedule sched = cfg.schedule();
  std::vector<GeneratedImage> out;
  for (std::size_t i = 0; i < req.count; ++i) out.push_back(sample_one(model, cfg, req, pos, sched, i));
  return out;
}

inline std::string positions_text(const TokenPositions& p) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "rows\t" << p.rows << "\ncols\t" << p.cols << "\nbase_x\t" << p.base_x << "\nbase_y\t"
     << p.base_y << '\n';
  auto list = [&os](const char* name, const std::vector<double>& v) {
    os << name;
    for (double x : v) os << '\t' << x;
    os << '\n';
  };
  if (p.is_flat()) {
    list("flat", p.flat);
  } else {
    list("xs", p.xs);
    list("ys", p.ys);
  }
  return os.str();
}

inline std::string image_name(std::uint64_t seed, std::size_t index, std::size_t channels) {
  std::ostringstream os;
  os << "sample_" << seed << '_' << std::setw(4) << std::setfill('0') << index
     << (channels == 1 ? ".pgm" : ".ppm");
  return os.str();
}

// Writes images named by seed and index, manifest.txt (path, class, seed per
// line) and positions.txt recording the grid the encoding used.
inline void write_samples(const fs::path& dir, const std::vector<GeneratedImage>& images,
                          const TokenPositions& pos, std::uint64_t seed) {
  fs::create_directories(dir);
  std::ostringstream manifest;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const std::string name = image_name(seed, i, images[i].image.shape.at(0));
    write_pnm((dir / name).string(), images[i].image);
    manifest << name << '\t' << images[i].class_id << '\t' << images[i].seed << '\n';
  }
  write_file((dir / "manifest.txt").string(), manifest.str());
  write_file((dir / "positions.txt").string(), positions_text(pos));
}

inline void sample_to_dir(const std::string& checkpoint, const SampleRequest& req, const fs::path& dir) {
  LoadedModel lm = load_model(checkpoint);
  const auto images = sample_images(lm.model, lm.cfg, req);
  write_samples(dir, images, sampling_positions(lm.cfg, req.resolution), req.seed);
}

// Renders a synthetic corpus in the same layout as sample output.
inline void write_corpus(const fs::path& dir, const std::vector<std::int64_t>& classes,
                         std::size_t per_class, std::size_t resolution, std::uint64_t seed,
                         std::size_t channels = 1) {
  fs::create_directories(dir);
  std::ostringstream manifest;
  std::size_t index = 0;
  for (auto c : classes)
    for (std::size_t i = 0; i < per_class; ++i, ++index) {
      const std::uint64_t s = derive_seed(seed, std::uint64_t(c), i);
      SeededRng rng(s);
      const std::string name = image_name(seed, index, channels);
      write_pnm((dir / name).string(), generate<float>(std::size_t(c), resolution, rng, channels));
      manifest << name << '\t' << c << '\t' << s << '\n';
    }
  write_file((dir / "manifest.txt").string(), manifest.str());
}

// Reads manifest.txt and groups the listed images by class.
inline std::map<std::size_t, std::vector<nn::Tensor>> read_sample_dir(const fs::path& dir) {
  const fs::path mpath = dir / "manifest.txt";
  if (!fs::exists(mpath)) throw InputError("no manifest.txt in " + dir.string());
  std::istringstream in(read_file(mpath.string()));
  std::map<std::size_t, std::vector<nn::Tensor>> by_class;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string path;
    long long cls = -1;
    std::uint64_t seed = 0;
    if (!std::getline(ls, path, '\t') || !(ls >> cls >> seed) || cls < 0 ||
        cls >= std::int64_t(kSyntheticClasses)) {
      throw InputError(mpath.string() + ":" + std::to_string(lineno) + ": malformed manifest line");
    }
    // Decode into a fresh tensor so PNM quantisation applies uniformly.
    by_class[std::size_t(cls)].push_back(read_pnm<float>((dir / path).string()));
  }
  if (by_class.empty()) throw InputError("manifest in " + dir.string() + " lists no images");
  return by_class;
}

inline EvalReport eval_dir(const fs::path& dir, std::uint64_t reference_seed) {
  return evaluate(read_sample_dir(dir), reference_seed);
}

// Text rendering of where the sampled positions fall inside the H x W range:
// '#' marks a used position, '.' an unused one. The naive variant is drawn
// with its 1-D positions wrapped row-major onto the same canvas.
inline std::vector<std::vector<bool>> position_canvas(RpeVariant variant, std::int64_t h,
                                                      std::int64_t w, std::int64_t H,
                                                      std::int64_t W, std::uint64_t seed) {
  SeededRng rng(seed);
  std::vector<std::vector<bool>> canvas(std::size_t(H), std::vector<bool>(std::size_t(W), false));
  if (variant == RpeVariant::naive) {
    for (auto p : sample_naive_positions(h, w, H, W, rng))
      canvas[std::size_t((p - 1) / W)][std::size_t((p - 1) % W)] = true;
    return canvas;
  }
  const PositionGrid g = variant == RpeVariant::grid ? sample_grid_positions(h, w, H, W, rng)
                                                     : sample_equispaced_positions(h, w, H, W, rng);
  for (auto x : g.xs)
    for (auto y : g.ys) canvas[std::size_t(x - 1)][std::size_t(y - 1)] = true;
  return canvas;
}

inline std::string canvas_text(const std::vector<std::vector<bool>>& canvas) {
  std::string out;
  for (const auto& row : canvas) {
    for (bool b : row) out += b ? '#' : '.';
    out += '\n';
  }
  return out;
}

inline nn::Tensor canvas_image(const std::vector<std::vector<bool>>& canvas) {
  const std::size_t H = canvas.size(), W = H ? canvas[0].size() : 0;
  nn::Tensor img({1, H, W}, -1.0f);
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j)
      if (canvas[i][j]) img.data[i * W + j] = 1.0f;
  return img;
}

struct SweepOptions {
  std::vector<std::int64_t> max_positions{32, 64, 128, 256};
  std::int64_t resolution = 32;       // sampling resolution
  std::size_t per_class = 4;
  SampleRequest sampling;             // resolution, count and label are overridden
};

// Trains one rpe2d model per max position value, samples, evaluates, and
// writes sweep_H<value>/report.tsv plus a summary table.
inline std::vector<EvalReport> run_sweep(RunConfig cfg, const SweepOptions& opt, const fs::path& out_dir,
                                         std::ostream* progress = nullptr) {
  cfg.strategy = Strategy::rpe2d;
  fs::create_directories(out_dir);
  std::vector<EvalReport> reports;
  std::ostringstream summary;
  summary << "max_position\tmean_spectral_peak_error\tmean_histogram_w1\tcombined\n" << std::fixed
          << std::setprecision(6);
  for (auto hw : opt.max_positions) {
    cfg.max_h = cfg.max_w = hw;
    cfg.validate();
    const fs::path dir = out_dir / ("sweep_H" + std::to_string(hw));
    if (progress) *progress << "sweep H=W=" << hw << '\n';
    const fs::path ck = train_run(cfg, dir / "train");
    LoadedModel lm = load_model(ck.string());
    SampleRequest req = opt.sampling;
    req.resolution = opt.resolution;
    req.count = opt.per_class * cfg.classes.size();
    req.label.reset();
    const auto images = sample_images(lm.model, lm.cfg, req);
    write_samples(dir / "samples", images, sampling_positions(lm.cfg, req.resolution), req.seed);
    EvalReport rep = eval_dir(dir / "samples", cfg.eval_seed);
    write_file((dir / "report.tsv").string(), rep.to_tsv());
    summary << hw << '\t' << rep.mean_spectral_error() << '\t' << rep.mean_w1() << '\t'
            << rep.combined() << '\n';
    reports.push_back(std::move(rep));
  }
  write_file((out_dir / "sweep_summary.tsv").string(), summary.str());
  return reports;
}

}  // namespace rpe2d
