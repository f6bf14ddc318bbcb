#pragma once

#include <complex>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "fpm/joint.hpp"
#include "fpm/optics.hpp"
#include "fpm/types.hpp"

namespace fpm {

// FPMA array file, all fields little-endian:
//   "FPMA" | version u16 = 1 | dtype u16 | ndim u32 | dims u64 x ndim | payload
// Payload is row-major with the last dimension fastest.

enum class ArrayType : std::uint16_t { F64 = 1, C128 = 2, U16 = 3 };

inline constexpr std::uint16_t kArrayVersion = 1;

const char* to_string(ArrayType type);
std::size_t element_size(ArrayType type);

struct ArrayFile {
  ArrayType dtype = ArrayType::F64;
  std::vector<std::uint64_t> dims;
  std::vector<double> f64;
  std::vector<std::complex<double>> c128;
  std::vector<std::uint16_t> u16;

  std::uint64_t element_count() const;
  /// Throws SizeError when the payload length disagrees with the dims.
  void validate() const;

  static ArrayFile real(std::vector<std::uint64_t> dims, std::vector<double> values);
  static ArrayFile complex(std::vector<std::uint64_t> dims, std::vector<std::complex<double>> values);
  static ArrayFile uint16(std::vector<std::uint64_t> dims, std::vector<std::uint16_t> values);
};

std::vector<std::uint8_t> encode_array(const ArrayFile& array);
/// Throws FormatError naming the byte offset of the first defect.
ArrayFile decode_array(const std::vector<std::uint8_t>& bytes);

/// Writes through a temporary file and a rename, so a failed write leaves no
/// partial output.
void write_array(const std::filesystem::path& path, const ArrayFile& array);
ArrayFile read_array(const std::filesystem::path& path);

void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

// Conversions. Readers throw SizeError on a dtype or rank mismatch.
ArrayFile to_array(const RealImage& image);
ArrayFile to_array(const ComplexImage& image);
/// (n, H, W) f64.
ArrayFile to_array(const std::vector<RealImage>& images);
/// (n, H, W) c128.
ArrayFile to_array(const std::vector<ComplexImage>& fields);
/// (N, n, H, W) f64.
ArrayFile to_array(const std::vector<ImageStack>& stacks);
ArrayFile to_array(const std::vector<double>& series);

RealImage as_real_image(const ArrayFile& a);
ComplexImage as_complex_image(const ArrayFile& a);
std::vector<RealImage> as_real_images(const ArrayFile& a);
std::vector<ComplexImage> as_complex_images(const ArrayFile& a);
/// Accepts (n, H, W) as one stack or (N, n, H, W) as N stacks.
std::vector<ImageStack> as_stacks(const ArrayFile& a);
std::vector<double> as_series(const ArrayFile& a);

/// Binary 16-bit PGM (P5, maxval 65535). Pixels are round(value * scale);
/// without a scale any value outside [0, 65535] throws DomainError instead
/// of clipping. With a scale, out-of-range values still throw.
void write_pgm16(const std::filesystem::path& path, const RealImage& image,
                 std::optional<double> scale = std::nullopt);
void write_pgm16(const std::filesystem::path& path, Index rows, Index cols,
                 const std::vector<std::uint16_t>& pixels);

struct Pgm16 {
  Index rows = 0;
  Index cols = 0;
  std::vector<std::uint16_t> pixels;
};
Pgm16 read_pgm16(const std::filesystem::path& path);

/// Line plot of a series on a white canvas, log10 vertical axis when every
/// value is positive.
Pgm16 plot_series(const std::vector<double>& values, Index width = 480, Index height = 240);

/// Model checkpoint directory: manifest.json, one FPMA file per tensor and
/// pattern.fpma holding the LED weights followed by the exposure in ms.
void save_checkpoint(const std::filesystem::path& dir, const CnnModel& model,
                     const IlluminationPattern& pattern);
struct Checkpoint {
  CnnModel model;
  IlluminationPattern pattern;
};
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace fpm
