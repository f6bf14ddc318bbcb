#include "fpm/config.hpp"

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <type_traits>
#include <vector>

#include "fpm/error.hpp"

namespace fpm {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& v) {
  T out{};
  const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || end != v.data() + v.size())
    throw ConfigError("'" + v + "' is not a valid number");
  return out;
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("'" + v + "' is not true or false");
}

std::string format(double v) {
  char buf[64];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

struct Key {
  std::string name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define FPM_NUM(key, member)                                                            \
  Key {                                                                                 \
    key, [](RunConfig& c, const std::string& v) {                                       \
      c.member = parse_number<std::remove_reference_t<decltype(c.member)>>(v);          \
    },                                                                                  \
        [](const RunConfig& c) {                                                        \
          if constexpr (std::is_floating_point_v<std::remove_cvref_t<decltype(c.member)>>) \
            return format(c.member);                                                    \
          else                                                                          \
            return std::to_string(c.member);                                            \
        }                                                                               \
  }

#define FPM_BOOL(key, member)                                                               \
  Key {                                                                                     \
    key, [](RunConfig& c, const std::string& v) { c.member = parse_bool(v); },              \
        [](const RunConfig& c) { return std::string(c.member ? "true" : "false"); }         \
  }

const std::vector<Key>& keys() {
  static const std::vector<Key> table = {
      FPM_NUM("seed", seed),
      FPM_NUM("optics.wavelength_um", optics.wavelength_um),
      FPM_NUM("optics.objective_na", optics.objective_na),
      FPM_NUM("optics.magnification", optics.magnification),
      FPM_NUM("optics.sensor_pixel_um", optics.sensor_pixel_um),
      FPM_NUM("optics.bit_depth", optics.bit_depth),
      FPM_NUM("optics.led_pitch_mm", optics.led_pitch_mm),
      FPM_NUM("optics.led_z_mm", optics.led_z_mm),
      FPM_NUM("optics.led_grid_rows", optics.led_grid_rows),
      FPM_NUM("optics.led_grid_cols", optics.led_grid_cols),
      FPM_NUM("optics.num_leds", optics.num_leds),
      FPM_NUM("optics.upsample", optics.upsample),
      FPM_BOOL("noise.enabled", noise_enabled),
      FPM_NUM("noise.m", noise.m),
      FPM_NUM("recon.learning_rate", recon.learning_rate),
      FPM_NUM("recon.iterations", recon.iterations),
      FPM_NUM("recon.patch_rows", recon.patch_rows),
      FPM_NUM("recon.patch_cols", recon.patch_cols),
      FPM_NUM("recon.overlap", recon.overlap),
      FPM_NUM("recon.margin", recon.margin),
      FPM_BOOL("recon.pupil_phase_learning", recon.pupil_phase_learning),
      FPM_BOOL("recon.subtract_background", subtract_background),
      FPM_NUM("recon.background_row", background.row),
      FPM_NUM("recon.background_col", background.col),
      FPM_NUM("recon.background_rows", background.rows),
      FPM_NUM("recon.background_cols", background.cols),
      FPM_NUM("train.epochs", train.epochs),
      FPM_NUM("train.batch_size", train.batch_size),
      FPM_NUM("train.learning_rate", train.learning_rate),
      FPM_NUM("train.gradient_weight", train.gradient_weight),
      FPM_BOOL("train.train_pattern", train.train_pattern),
      FPM_NUM("train.blocks", train.arch.blocks),
      FPM_NUM("train.channels", train.arch.channels),
      FPM_NUM("train.kernel", train.arch.kernel),
      FPM_NUM("train.leaky_slope", train.arch.leaky_slope),
      Key{"phantom.kind",
          [](RunConfig& c, const std::string& v) { c.phantom.kind = parse_phantom_kind(v); },
          [](const RunConfig& c) { return to_string(c.phantom.kind); }},
      FPM_NUM("phantom.rows", phantom.rows),
      FPM_NUM("phantom.cols", phantom.cols),
      FPM_NUM("phantom.amplitude_min", phantom.amplitude_min),
      FPM_NUM("phantom.amplitude_max", phantom.amplitude_max),
      FPM_NUM("phantom.phase_min", phantom.phase_min),
      FPM_NUM("phantom.phase_max", phantom.phase_max),
      FPM_NUM("phantom.feature_um", phantom.feature_um),
      FPM_NUM("phantom.bar_count", phantom.bar_count),
      FPM_NUM("phantom.blob_count", phantom.blob_count),
      FPM_NUM("phantom.count", phantom_count),
      FPM_BOOL("phantom.bandlimit", phantom_bandlimit),
      FPM_NUM("render.gain", render_gain),
      Key{"render.mode",
          [](RunConfig& c, const std::string& v) {
            if (v == "oracle")
              c.render_mode = TargetMode::Oracle;
            else if (v == "pipeline")
              c.render_mode = TargetMode::Pipeline;
            else
              throw ConfigError("render.mode must be oracle or pipeline, got '" + v + "'");
          },
          [](const RunConfig& c) {
            return std::string(c.render_mode == TargetMode::Oracle ? "oracle" : "pipeline");
          }},
  };
  return table;
}

#undef FPM_NUM
#undef FPM_BOOL

}  // namespace

void RunConfig::finalize() {
  noise.bit_depth = optics.bit_depth;
  noise.seed = seed;
  train.seed = seed;
  train.arch.upsample = optics.upsample;
  phantom.seed = seed;
  phantom.pitch_um = optics.highres_pitch_um();
  optics.validate();
  noise.validate();
  recon.validate();
  train.validate();
  phantom.validate();
  if (background.row < 0 || background.col < 0 || background.rows < 1 || background.cols < 1)
    throw ConfigError("background window must have a non-negative origin and positive size");
  if (phantom_count < 1) throw ConfigError("phantom.count must be at least 1");
  if (!(render_gain > 0.0)) throw ConfigError("render.gain must be positive");
}

std::optional<NoiseModel> RunConfig::noise_model() const {
  if (!noise_enabled) return std::nullopt;
  return noise;
}

RenderSettings RunConfig::render_settings(int threads) const {
  RenderSettings rs;
  rs.gain = render_gain;
  rs.noise = noise_model();
  rs.mode = render_mode;
  rs.recon = recon;
  rs.threads = threads;
  return rs;
}

RunConfig parse_config(const std::string& text) {
  RunConfig cfg;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string line = trim(raw.substr(0, raw.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = "line " + std::to_string(line_no) + ": ";
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const auto& table = keys();
    const auto it = std::find_if(table.begin(), table.end(), [&](const Key& k) { return k.name == key; });
    if (it == table.end()) throw ConfigError(where + "unknown key '" + key + "'");
    if (!seen.insert(key).second) throw ConfigError(where + "repeated key '" + key + "'");
    if (value.empty()) throw ConfigError(where + "missing value for '" + key + "'");
    try {
      it->set(cfg, value);
    } catch (const Error& e) {
      throw ConfigError(where + key + ": " + e.what());
    }
  }
  cfg.finalize();
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  try {
    return parse_config(text.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string default_config_text() {
  RunConfig cfg;
  cfg.finalize();
  std::string out;
  for (const auto& k : keys()) out += k.name + " = " + k.get(cfg) + "\n";
  return out;
}

int threads_from_env() {
  const char* v = std::getenv("FPM_THREADS");
  if (v == nullptr || *v == '\0') return 1;
  const int n = parse_number<int>(v);
  if (n < 1) throw ConfigError("FPM_THREADS must be a positive integer");
  return n;
}

}  // namespace fpm
