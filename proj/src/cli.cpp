#include "fpm/cli.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <numbers>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "fpm/config.hpp"
#include "fpm/error.hpp"
#include "fpm/io.hpp"
#include "fpm/joint.hpp"
#include "fpm/noise.hpp"
#include "fpm/phantom.hpp"
#include "fpm/recon.hpp"

namespace fpm {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

// Outputs are written under "<final>.part" and renamed into place only after
// the whole subcommand has succeeded.
class Staging {
 public:
  Staging() = default;
  Staging(const Staging&) = delete;
  Staging& operator=(const Staging&) = delete;
  ~Staging() {
    if (committed_) return;
    std::error_code ec;
    for (const auto& [tmp, final] : items_) fs::remove_all(tmp, ec);
  }

  fs::path stage(const fs::path& final) {
    fs::path tmp = final;
    tmp += ".part";
    std::error_code ec;
    if (final.has_parent_path()) fs::create_directories(final.parent_path(), ec);
    fs::remove_all(tmp, ec);
    items_.emplace_back(tmp, final);
    return tmp;
  }

  void commit() {
    for (const auto& [tmp, final] : items_) {
      std::error_code ec;
      if (fs::is_directory(final)) {
        if (!fs::exists(final / "manifest.json"))
          throw IoError("refusing to replace directory " + final.string());
        fs::remove_all(final, ec);
      }
      fs::rename(tmp, final, ec);
      if (ec) throw IoError("cannot move " + tmp.string() + " to " + final.string());
    }
    committed_ = true;
  }

 private:
  std::vector<std::pair<fs::path, fs::path>> items_;
  bool committed_ = false;
};

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config, "run configuration file")->required();
  cmd->add_option("--seed", c.seed, "override the config seed");
}

RunConfig load(const Common& c) {
  RunConfig cfg = load_config(c.config);
  if (c.seed) {
    cfg.seed = *c.seed;
    cfg.finalize();
  }
  return cfg;
}

LedSet leds_of(const RunConfig& cfg) { return select_centermost(cfg.optics, cfg.optics.num_leds); }

std::vector<ComplexImage> read_fields(const fs::path& path) {
  const ArrayFile a = read_array(path);
  if (a.dims.size() == 2) return {as_complex_image(a)};
  return as_complex_images(a);
}

std::vector<RealImage> read_images(const fs::path& path) {
  const ArrayFile a = read_array(path);
  if (a.dims.size() == 2) return {as_real_image(a)};
  return as_real_images(a);
}

std::vector<ImageStack> read_stacks(const fs::path& path, const RunConfig& cfg) {
  auto stacks = as_stacks(read_array(path));
  for (const auto& s : stacks)
    if (s.size() != static_cast<std::size_t>(cfg.optics.num_leds))
      throw SizeError(path.string() + " holds " + std::to_string(s.size()) +
                      "-image stacks, config expects " + std::to_string(cfg.optics.num_leds));
  return stacks;
}

IlluminationPattern read_pattern(const fs::path& path) {
  if (fs::is_directory(path)) return load_checkpoint(path).pattern;
  const auto v = as_series(read_array(path));
  if (v.size() < 2) throw SizeError("pattern file needs LED weights followed by the exposure");
  IlluminationPattern p;
  p.weights = Eigen::Map<const Eigen::ArrayXd>(v.data(), static_cast<Index>(v.size() - 1));
  p.exposure_ms = v.back();
  p.validate();
  return p;
}

std::vector<TrainingExample> examples_from(const std::vector<ImageStack>* stacks,
                                           const std::vector<RealImage>* images,
                                           const std::vector<ComplexImage>& targets, double pitch) {
  const std::size_t n = stacks ? stacks->size() : images->size();
  if (targets.size() != n)
    throw SizeError(std::to_string(n) + " inputs but " + std::to_string(targets.size()) + " targets");
  std::vector<TrainingExample> out(n);
  for (std::size_t k = 0; k < n; ++k) {
    if (stacks) out[k].stack = (*stacks)[k];
    if (images) out[k].image = (*images)[k];
    out[k].target = ComplexField{targets[k], pitch};
  }
  return out;
}

void write_json(Staging& st, const fs::path& path, const json& j) {
  write_text(st.stage(path), j.dump(2) + "\n");
}

// ---------------------------------------------------------------------------

struct PhantomArgs {
  Common common;
  std::string out;
};

void run_phantom(const PhantomArgs& a, std::ostream& out) {
  const RunConfig cfg = load(a.common);
  const LedSet leds = leds_of(cfg);
  const double cutoff =
      (cfg.optics.objective_na + max_illumination_na(cfg.optics, leds)) / cfg.optics.wavelength_um;
  std::vector<ComplexImage> fields;
  for (int k = 0; k < cfg.phantom_count; ++k) {
    PhantomSpec spec = cfg.phantom;
    spec.seed = cfg.seed + static_cast<std::uint64_t>(k);
    ComplexField f = generate_phantom(spec);
    if (cfg.phantom_bandlimit) f = bandlimit(f, cutoff);
    fields.push_back(std::move(f.values));
  }
  Staging st;
  write_array(st.stage(a.out), to_array(fields));
  st.commit();
  out << "wrote " << fields.size() << " phantom(s) of " << cfg.phantom.rows << "x" << cfg.phantom.cols
      << " to " << a.out << "\n";
}

struct SimulateArgs {
  Common common;
  std::string phantoms;
  std::string out;
  std::string targets;
  std::string pattern;
  std::string images;
  int repeats = 0;
};

void run_simulate(const SimulateArgs& a, std::ostream& out, int threads) {
  const RunConfig cfg = load(a.common);
  const LedSet leds = leds_of(cfg);
  std::vector<ComplexField> phantoms;
  for (auto& f : read_fields(a.phantoms))
    phantoms.push_back(ComplexField{std::move(f), cfg.optics.highres_pitch_um()});
  if (phantoms.empty()) throw SizeError("no phantoms in " + a.phantoms);
  if (!a.images.empty() && a.pattern.empty()) throw ConfigError("--images needs --pattern");

  Staging st;
  if (a.repeats > 0) {
    if (!cfg.noise_enabled) throw ConfigError("--repeats needs noise.enabled = true");
    RenderSettings rs = cfg.render_settings(threads);
    rs.noise.reset();
    const auto clean = render_training_set({phantoms[0]}, cfg.optics, leds, rs);
    const RealImage& scene = clean[0].stack.images[0];
    std::vector<RealImage> reps;
    const Rng root(cfg.seed);
    for (int r = 0; r < a.repeats; ++r) {
      Rng rng = root.split(static_cast<std::uint64_t>(r));
      reps.push_back(apply_sensor_noise(scene, cfg.noise, rng));
    }
    write_array(st.stage(a.out), to_array(reps));
    st.commit();
    out << "wrote " << a.repeats << " repeated captures to " << a.out << "\n";
    return;
  }

  const auto examples = render_training_set(phantoms, cfg.optics, leds, cfg.render_settings(threads));
  std::vector<ImageStack> stacks;
  std::vector<ComplexImage> targets;
  for (const auto& e : examples) {
    stacks.push_back(e.stack);
    targets.push_back(e.target.values);
  }
  std::vector<RealImage> images;
  if (!a.pattern.empty()) {
    const IlluminationPattern pattern = read_pattern(a.pattern);
    const auto noise = cfg.noise_model();
    for (auto& e : capture_pattern_images(examples, pattern, noise ? &*noise : nullptr, cfg.seed))
      images.push_back(std::move(e.image));
  }
  write_array(st.stage(a.out), to_array(stacks));
  if (!a.targets.empty()) write_array(st.stage(a.targets), to_array(targets));
  if (!a.images.empty()) write_array(st.stage(a.images), to_array(images));
  st.commit();
  out << "wrote " << stacks.size() << " stack(s) of " << leds.size() << " images to " << a.out << "\n";
}

struct CalibrateArgs {
  Common common;
  std::string input;
  std::string out;
};

void run_calibrate(const CalibrateArgs& a, std::ostream& out) {
  load(a.common);
  const auto repeats = read_images(a.input);
  const NoiseCalibration c = calibrate_noise(repeats);
  json j;
  j["repeats"] = repeats.size();
  j["slope"] = c.slope;
  j["m"] = std::isfinite(c.m) ? json(c.m) : json(nullptr);
  Staging st;
  write_json(st, a.out, j);
  st.commit();
  out << "slope " << c.slope << "\n";
}

struct ReconstructArgs {
  Common common;
  std::string input;
  std::size_t index = 0;
  std::string out;
  std::string truth;
  std::string metrics;
  std::string loss;
};

void run_reconstruct(const ReconstructArgs& a, std::ostream& out, int threads) {
  const RunConfig cfg = load(a.common);
  const LedSet leds = leds_of(cfg);
  const auto stacks = read_stacks(a.input, cfg);
  if (a.index >= stacks.size())
    throw SizeError("stack index " + std::to_string(a.index) + " out of " + std::to_string(stacks.size()));
  ImageStack stack = stacks[a.index];
  if (cfg.subtract_background)
    stack = subtract_background(stack, estimate_background(stack, cfg.background));

  ReconResult res = reconstruct(stack, cfg.optics, cfg.recon, leds, threads);
  ComplexField object = res.object;
  object.values /= std::sqrt(cfg.render_gain);

  std::vector<double> loss(res.patches.front().loss_history.size(), 0.0);
  for (const auto& p : res.patches)
    for (std::size_t i = 0; i < loss.size(); ++i) loss[i] += p.loss_history[i];

  json m;
  m["iterations"] = cfg.recon.iterations;
  m["patches"] = res.patches.size();
  m["initial_loss"] = loss.front();
  m["final_loss"] = loss.back();
  m["loss_ratio"] = loss.back() / loss.front();
  if (!a.truth.empty()) {
    const auto truths = read_fields(a.truth);
    if (a.index >= truths.size()) throw SizeError("truth file has no field " + std::to_string(a.index));
    const ComplexField truth{truths[a.index], cfg.optics.highres_pitch_um()};
    if (truth.rows() != object.rows() || truth.cols() != object.cols())
      throw SizeError("truth field shape differs from the reconstruction");
    const auto mask = synthetic_passband(cfg.optics, leds, object.rows(), object.cols());
    m["passband_error"] = passband_error(object, truth, mask);
  }

  Staging st;
  write_array(st.stage(a.out), to_array(object.values));
  if (!a.metrics.empty()) write_json(st, a.metrics, m);
  if (!a.loss.empty()) write_array(st.stage(a.loss), to_array(loss));
  st.commit();
  out << m.dump() << "\n";
}

struct TrainArgs {
  Common common;
  std::string stacks;
  std::string targets;
  std::string out;
};

void run_train(const TrainArgs& a, std::ostream& out, int threads) {
  const RunConfig cfg = load(a.common);
  const auto stacks = read_stacks(a.stacks, cfg);
  const auto targets = read_fields(a.targets);
  const auto data = examples_from(&stacks, nullptr, targets, cfg.optics.highres_pitch_um());
  TrainSettings ts = cfg.train;
  ts.threads = threads;
  const auto noise = cfg.noise_model();
  const TrainResult r = train_joint(data, cfg.optics, noise ? &*noise : nullptr, ts);

  Staging st;
  const fs::path dir = st.stage(a.out);
  save_checkpoint(dir, r.model, r.pattern);
  write_array(dir / "loss.fpma", to_array(r.history.step_loss));
  st.commit();
  out << "steps " << r.history.step_loss.size() << " loss " << r.history.step_loss.front() << " -> "
      << r.history.step_loss.back() << " exposure " << r.pattern.exposure_ms << " ms\n";
}

struct FinetuneArgs {
  Common common;
  std::string checkpoint;
  std::string images;
  std::string targets;
  std::string out;
};

void run_finetune(const FinetuneArgs& a, std::ostream& out, int threads) {
  const RunConfig cfg = load(a.common);
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const auto images = read_images(a.images);
  const auto targets = read_fields(a.targets);
  const auto data = examples_from(nullptr, &images, targets, cfg.optics.highres_pitch_um());
  TrainSettings ts = cfg.train;
  ts.arch = ck.model.arch;
  ts.threads = threads;
  const TrainResult r = finetune(data, ck.pattern, ck.model, ts);

  Staging st;
  const fs::path dir = st.stage(a.out);
  save_checkpoint(dir, r.model, r.pattern);
  write_array(dir / "loss.fpma", to_array(r.history.step_loss));
  st.commit();
  out << "steps " << r.history.step_loss.size() << " loss " << r.history.step_loss.front() << " -> "
      << r.history.step_loss.back() << "\n";
}

struct PredictArgs {
  Common common;
  std::string checkpoint;
  std::string input;
  std::string out;
};

void run_predict(const PredictArgs& a, std::ostream& out) {
  load(a.common);
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const ArrayFile in = read_array(a.input);
  const bool single = in.dims.size() == 2;
  const auto images = single ? std::vector<RealImage>{as_real_image(in)} : as_real_images(in);
  std::vector<ComplexImage> fields;
  for (const auto& im : images) fields.push_back(predict_single_shot(im, ck.model).values);
  Staging st;
  write_array(st.stage(a.out), single ? to_array(fields.front()) : to_array(fields));
  st.commit();
  out << "predicted " << fields.size() << " field(s) of " << fields.front().rows() << "x"
      << fields.front().cols() << "\n";
}

struct ReportArgs {
  Common common;
  std::string object;
  std::string loss;
  std::string metrics;
  std::string intensity;
  std::optional<double> export_scale;
  std::string out;
};

std::vector<std::uint16_t> to_u16(const RealImage& im, double lo, double hi) {
  std::vector<std::uint16_t> px(static_cast<std::size_t>(im.size()));
  const double span = hi > lo ? hi - lo : 1.0;
  for (Index k = 0; k < im.size(); ++k)
    px[static_cast<std::size_t>(k)] =
        static_cast<std::uint16_t>(std::lround(std::clamp((im(k) - lo) / span, 0.0, 1.0) * 65535.0));
  return px;
}

void run_report(const ReportArgs& a, std::ostream& out) {
  load(a.common);
  if (a.object.empty() && a.loss.empty() && a.intensity.empty())
    throw ConfigError("report needs at least one of --object, --loss, --intensity");
  Staging st;
  const fs::path dir = st.stage(a.out);
  fs::create_directories(dir);
  std::ostringstream summary;
  summary.precision(10);

  if (!a.object.empty()) {
    const ComplexImage o = as_complex_image(read_array(a.object));
    const RealImage amp = o.abs();
    const RealImage phase = o.arg();
    write_pgm16(dir / "amplitude.pgm", o.rows(), o.cols(), to_u16(amp, 0.0, amp.maxCoeff()));
    write_pgm16(dir / "phase.pgm", o.rows(), o.cols(), to_u16(phase, -std::numbers::pi, std::numbers::pi));
    summary << "object_rows " << o.rows() << "\nobject_cols " << o.cols() << "\namplitude_min "
            << amp.minCoeff() << "\namplitude_max " << amp.maxCoeff() << "\namplitude_mean " << amp.mean()
            << "\nphase_min " << phase.minCoeff() << "\nphase_max " << phase.maxCoeff() << "\n";
  }
  if (!a.loss.empty()) {
    const auto loss = as_series(read_array(a.loss));
    if (loss.empty()) throw SizeError("empty loss history");
    const Pgm16 plot = plot_series(loss);
    write_pgm16(dir / "loss.pgm", plot.rows, plot.cols, plot.pixels);
    summary << "loss_steps " << loss.size() << "\nloss_initial " << loss.front() << "\nloss_final "
            << loss.back() << "\nloss_min " << *std::min_element(loss.begin(), loss.end()) << "\n";
  }
  if (!a.intensity.empty()) {
    const RealImage im = as_real_image(read_array(a.intensity));
    write_pgm16(dir / "intensity.pgm", im, a.export_scale);
    summary << "intensity_max " << im.maxCoeff() << "\n";
  }
  if (!a.metrics.empty()) {
    const auto bytes = read_bytes(a.metrics);
    json m;
    try {
      m = json::parse(bytes.begin(), bytes.end());
    } catch (const json::exception& e) {
      throw FormatError(a.metrics + ": " + e.what(), 0);
    }
    for (const auto& [k, v] : m.items()) summary << k << " " << v.dump() << "\n";
  }
  write_text(dir / "summary.txt", summary.str());
  st.commit();
  out << summary.str();
}

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Config:
    case ErrorKind::Size:
    case ErrorKind::Contract: return kExitConfig;
    case ErrorKind::Numeric:
    case ErrorKind::Domain: return kExitNumeric;
    case ErrorKind::Io:
    case ErrorKind::Format: return kExitIo;
  }
  return kExitUnknown;
}

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Fourier ptychography: simulation, reconstruction and single-shot learning", "fpm"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "fpm 1.0");
  bool print_defaults = false;
  app.add_flag("--print-defaults", print_defaults, "print every config key with its default and exit");

  PhantomArgs ph;
  auto* c_ph = app.add_subcommand("phantom", "generate phantoms as a (count, H, W) c128 array");
  add_common(c_ph, ph.common);
  c_ph->add_option("-o,--out", ph.out, "output array")->required();

  SimulateArgs si;
  auto* c_si = app.add_subcommand("simulate", "render single-LED stacks, targets and pattern images");
  add_common(c_si, si.common);
  c_si->add_option("-p,--phantoms", si.phantoms, "phantom array")->required();
  c_si->add_option("-o,--out", si.out, "output stacks (N, n, h, w)")->required();
  c_si->add_option("--targets", si.targets, "output training targets (N, H, W) c128");
  c_si->add_option("--pattern", si.pattern, "pattern file or checkpoint directory");
  c_si->add_option("--images", si.images, "output pattern images (N, h, w)");
  c_si->add_option("--repeats", si.repeats, "write this many noisy captures of one image instead")
      ->check(CLI::PositiveNumber);

  CalibrateArgs ca;
  auto* c_ca = app.add_subcommand("calibrate", "fit the noise slope to repeated captures");
  add_common(c_ca, ca.common);
  c_ca->add_option("-i,--input", ca.input, "repeats (R, h, w)")->required();
  c_ca->add_option("-o,--out", ca.out, "output JSON")->required();

  ReconstructArgs re;
  auto* c_re = app.add_subcommand("reconstruct", "iterative reconstruction of one stack");
  add_common(c_re, re.common);
  c_re->add_option("-i,--input", re.input, "stacks (n, h, w) or (N, n, h, w)")->required();
  c_re->add_option("--index", re.index, "stack to reconstruct");
  c_re->add_option("-o,--out", re.out, "output object (H, W) c128")->required();
  c_re->add_option("--truth", re.truth, "true fields for the passband error");
  c_re->add_option("--metrics", re.metrics, "output metrics JSON");
  c_re->add_option("--loss", re.loss, "output loss history");

  TrainArgs tr;
  auto* c_tr = app.add_subcommand("train", "joint pattern and CNN training");
  add_common(c_tr, tr.common);
  c_tr->add_option("--stacks", tr.stacks, "training stacks (N, n, h, w)")->required();
  c_tr->add_option("--targets", tr.targets, "training targets (N, H, W) c128")->required();
  c_tr->add_option("-o,--out", tr.out, "output checkpoint directory")->required();

  FinetuneArgs fi;
  auto* c_fi = app.add_subcommand("finetune", "CNN training on measured pattern images");
  add_common(c_fi, fi.common);
  c_fi->add_option("--checkpoint", fi.checkpoint, "input checkpoint directory")->required();
  c_fi->add_option("--images", fi.images, "measured images (N, h, w)")->required();
  c_fi->add_option("--targets", fi.targets, "targets (N, H, W) c128")->required();
  c_fi->add_option("-o,--out", fi.out, "output checkpoint directory")->required();

  PredictArgs pr;
  auto* c_pr = app.add_subcommand("predict", "single-shot reconstruction from one image");
  add_common(c_pr, pr.common);
  c_pr->add_option("--checkpoint", pr.checkpoint, "checkpoint directory")->required();
  c_pr->add_option("-i,--input", pr.input, "image (h, w) or images (N, h, w)")->required();
  c_pr->add_option("-o,--out", pr.out, "output field(s) c128")->required();

  ReportArgs rp;
  auto* c_rp = app.add_subcommand("report", "PGM images, loss plot and a text summary");
  add_common(c_rp, rp.common);
  c_rp->add_option("--object", rp.object, "complex object (H, W)");
  c_rp->add_option("--loss", rp.loss, "loss history");
  c_rp->add_option("--metrics", rp.metrics, "metrics JSON to include in the summary");
  c_rp->add_option("--intensity", rp.intensity, "intensity image exported at 16 bits");
  c_rp->add_option("--export-scale", rp.export_scale, "multiply intensities before export");
  c_rp->add_option("-o,--out", rp.out, "output directory")->required();

  // --print-defaults stands alone.
  if (args.size() == 1 && args[0] == "--print-defaults") {
    out << default_config_text();
    return kExitOk;
  }

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      app.exit(e, out, err);
      return kExitOk;
    }
    err << "error: usage: " << one_line(e.what()) << "\n";
    return kExitConfig;
  }

  try {
    const int threads = threads_from_env();
    if (c_ph->parsed()) run_phantom(ph, out);
    if (c_si->parsed()) run_simulate(si, out, threads);
    if (c_ca->parsed()) run_calibrate(ca, out);
    if (c_re->parsed()) run_reconstruct(re, out, threads);
    if (c_tr->parsed()) run_train(tr, out, threads);
    if (c_fi->parsed()) run_finetune(fi, out, threads);
    if (c_pr->parsed()) run_predict(pr, out);
    if (c_rp->parsed()) run_report(rp, out);
  } catch (const Error& e) {
    err << "error: " << to_string(e.kind()) << ": " << one_line(e.what()) << "\n";
    return exit_code(e.kind());
  } catch (const fs::filesystem_error& e) {
    err << "error: io: " << one_line(e.what()) << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    err << "error: internal: " << one_line(e.what()) << "\n";
    return kExitUnknown;
  }
  return kExitOk;
}

int run_cli(int argc, char** argv) {
  return run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}

}  // namespace fpm
