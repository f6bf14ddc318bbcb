#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "fpm/joint.hpp"
#include "fpm/noise.hpp"
#include "fpm/optics.hpp"
#include "fpm/phantom.hpp"
#include "fpm/recon.hpp"

namespace fpm {

/// Everything a CLI run needs, read from a flat `key = value` document.
/// `#` starts a comment; blank lines are ignored; every key is optional and
/// unknown or repeated keys are rejected.
struct RunConfig {
  OpticsConfig optics;

  bool noise_enabled = false;
  /// Noise bit depth follows optics.bit_depth; the seed follows `seed`.
  NoiseModel noise;

  ReconSettings recon;
  bool subtract_background = false;
  DarkWindow background;

  /// Architecture upsampling follows optics.upsample.
  TrainSettings train;

  /// Grid pitch follows the high-res pitch of the optics; phantom k of a
  /// batch uses seed + k.
  PhantomSpec phantom;
  int phantom_count = 1;
  bool phantom_bandlimit = true;

  double render_gain = 10000.0;
  TargetMode render_mode = TargetMode::Oracle;

  std::uint64_t seed = 0;

  /// Propagates the shared values (seed, bit depth, pitch, upsampling) into
  /// the module structs and validates them. Throws ConfigError.
  void finalize();

  std::optional<NoiseModel> noise_model() const;
  RenderSettings render_settings(int threads) const;
};

/// Throws ConfigError naming the line of the first defect.
RunConfig parse_config(const std::string& text);
/// A missing or unreadable file is a ConfigError.
RunConfig load_config(const std::filesystem::path& path);

/// Every key with its default value, one per line.
std::string default_config_text();

/// Worker count from FPM_THREADS (default 1). Throws ConfigError on junk.
int threads_from_env();

}  // namespace fpm
