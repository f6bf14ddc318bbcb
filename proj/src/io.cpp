#include "fpm/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>

#include <json.hpp>

#include "fpm/error.hpp"

namespace fpm {

namespace fs = std::filesystem;

const char* to_string(ArrayType type) {
  switch (type) {
    case ArrayType::F64: return "f64";
    case ArrayType::C128: return "c128";
    case ArrayType::U16: return "u16";
  }
  return "?";
}

std::size_t element_size(ArrayType type) {
  switch (type) {
    case ArrayType::F64: return 8;
    case ArrayType::C128: return 16;
    case ArrayType::U16: return 2;
  }
  return 0;
}

std::uint64_t ArrayFile::element_count() const {
  std::uint64_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

void ArrayFile::validate() const {
  std::uint64_t have = 0;
  switch (dtype) {
    case ArrayType::F64: have = f64.size(); break;
    case ArrayType::C128: have = c128.size(); break;
    case ArrayType::U16: have = u16.size(); break;
  }
  if (have != element_count())
    throw SizeError(std::string(to_string(dtype)) + " array holds " + std::to_string(have) +
                    " values for " + std::to_string(element_count()) + " elements");
}

ArrayFile ArrayFile::real(std::vector<std::uint64_t> dims, std::vector<double> values) {
  ArrayFile a;
  a.dtype = ArrayType::F64;
  a.dims = std::move(dims);
  a.f64 = std::move(values);
  a.validate();
  return a;
}

ArrayFile ArrayFile::complex(std::vector<std::uint64_t> dims,
                             std::vector<std::complex<double>> values) {
  ArrayFile a;
  a.dtype = ArrayType::C128;
  a.dims = std::move(dims);
  a.c128 = std::move(values);
  a.validate();
  return a;
}

ArrayFile ArrayFile::uint16(std::vector<std::uint64_t> dims, std::vector<std::uint16_t> values) {
  ArrayFile a;
  a.dtype = ArrayType::U16;
  a.dims = std::move(dims);
  a.u16 = std::move(values);
  a.validate();
  return a;
}

namespace {

template <typename U>
void put(std::vector<std::uint8_t>& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f64(std::vector<std::uint8_t>& out, double v) { put(out, std::bit_cast<std::uint64_t>(v)); }

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : bytes_(b) {}

  template <typename U>
  U get(const char* what) {
    if (bytes_.size() - pos_ < sizeof(U))
      throw FormatError(std::string("truncated ") + what, bytes_.size());
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(U{bytes_[pos_ + i]} << (8 * i));
    pos_ += sizeof(U);
    return v;
  }
  double get_f64() { return std::bit_cast<double>(get<std::uint64_t>("payload")); }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_array(const ArrayFile& a) {
  a.validate();
  std::vector<std::uint8_t> out = {'F', 'P', 'M', 'A'};
  put(out, kArrayVersion);
  put(out, static_cast<std::uint16_t>(a.dtype));
  put(out, static_cast<std::uint32_t>(a.dims.size()));
  for (auto d : a.dims) put(out, d);
  out.reserve(out.size() + a.element_count() * element_size(a.dtype));
  switch (a.dtype) {
    case ArrayType::F64:
      for (double v : a.f64) put_f64(out, v);
      break;
    case ArrayType::C128:
      for (const auto& v : a.c128) {
        put_f64(out, v.real());
        put_f64(out, v.imag());
      }
      break;
    case ArrayType::U16:
      for (auto v : a.u16) put(out, v);
      break;
  }
  return out;
}

ArrayFile decode_array(const std::vector<std::uint8_t>& bytes) {
  Reader in(bytes);
  if (bytes.size() < 4) throw FormatError("truncated magic", bytes.size());
  if (!std::equal(bytes.begin(), bytes.begin() + 4, "FPMA")) throw FormatError("bad magic", 0);
  in.get<std::uint32_t>("magic");
  const auto version = in.get<std::uint16_t>("version");
  if (version != kArrayVersion)
    throw FormatError("unsupported version " + std::to_string(version), 4);
  const auto code = in.get<std::uint16_t>("dtype");
  if (code < 1 || code > 3) throw FormatError("unknown dtype code " + std::to_string(code), 6);
  ArrayFile a;
  a.dtype = static_cast<ArrayType>(code);
  const auto ndim = in.get<std::uint32_t>("rank");
  if (ndim > 8) throw FormatError("rank " + std::to_string(ndim) + " exceeds 8", 8);
  std::uint64_t count = 1;
  for (std::uint32_t i = 0; i < ndim; ++i) {
    const auto d = in.get<std::uint64_t>("dims");
    if (d != 0 && count > (std::uint64_t{1} << 48) / d)
      throw FormatError("dims overflow", in.pos() - 8);
    count *= d;
    a.dims.push_back(d);
  }
  const std::uint64_t need = count * element_size(a.dtype);
  if (in.remaining() < need)
    throw FormatError("truncated payload: " + std::to_string(need) + " bytes expected, " +
                          std::to_string(in.remaining()) + " present",
                      bytes.size());
  if (in.remaining() > need)
    throw FormatError("trailing bytes after payload", in.pos() + need);
  switch (a.dtype) {
    case ArrayType::F64:
      a.f64.resize(count);
      for (auto& v : a.f64) v = in.get_f64();
      break;
    case ArrayType::C128:
      a.c128.resize(count);
      for (auto& v : a.c128) {
        const double re = in.get_f64();
        v = {re, in.get_f64()};
      }
      break;
    case ArrayType::U16:
      a.u16.resize(count);
      for (auto& v : a.u16) v = in.get<std::uint16_t>("payload");
      break;
  }
  return a;
}

void write_bytes(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  fs::path tmp = path;
  tmp += ".part";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw IoError("cannot move output into place at " + path.string());
  }
}

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_text(const fs::path& path, const std::string& text) {
  write_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

void write_array(const fs::path& path, const ArrayFile& array) {
  write_bytes(path, encode_array(array));
}

ArrayFile read_array(const fs::path& path) {
  try {
    return decode_array(read_bytes(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what(), e.offset());
  }
}

// ---------------------------------------------------------------------------
// Conversions

namespace {

using Dims = std::vector<std::uint64_t>;

std::uint64_t u(Index v) { return static_cast<std::uint64_t>(v); }

void expect(const ArrayFile& a, ArrayType type, std::size_t rank, const char* what) {
  a.validate();
  if (a.dtype != type || a.dims.size() != rank)
    throw SizeError(std::string(what) + " needs a rank-" + std::to_string(rank) + " " +
                    to_string(type) + " array, got rank " + std::to_string(a.dims.size()) + " " +
                    to_string(a.dtype));
}

}  // namespace

ArrayFile to_array(const RealImage& im) {
  return ArrayFile::real({u(im.rows()), u(im.cols())}, {im.data(), im.data() + im.size()});
}

ArrayFile to_array(const ComplexImage& im) {
  return ArrayFile::complex({u(im.rows()), u(im.cols())}, {im.data(), im.data() + im.size()});
}

ArrayFile to_array(const std::vector<RealImage>& images) {
  if (images.empty()) return ArrayFile::real({0, 0, 0}, {});
  std::vector<double> v;
  for (const auto& im : images) {
    if (im.rows() != images[0].rows() || im.cols() != images[0].cols())
      throw SizeError("images differ in shape");
    v.insert(v.end(), im.data(), im.data() + im.size());
  }
  return ArrayFile::real({images.size(), u(images[0].rows()), u(images[0].cols())}, std::move(v));
}

ArrayFile to_array(const std::vector<ComplexImage>& fields) {
  if (fields.empty()) return ArrayFile::complex({0, 0, 0}, {});
  std::vector<std::complex<double>> v;
  for (const auto& im : fields) {
    if (im.rows() != fields[0].rows() || im.cols() != fields[0].cols())
      throw SizeError("fields differ in shape");
    v.insert(v.end(), im.data(), im.data() + im.size());
  }
  return ArrayFile::complex({fields.size(), u(fields[0].rows()), u(fields[0].cols())}, std::move(v));
}

ArrayFile to_array(const std::vector<ImageStack>& stacks) {
  if (stacks.empty()) return ArrayFile::real({0, 0, 0, 0}, {});
  const ImageStack& s0 = stacks[0];
  std::vector<double> v;
  for (const auto& s : stacks) {
    if (s.size() != s0.size() || s.rows() != s0.rows() || s.cols() != s0.cols())
      throw SizeError("stacks differ in shape");
    for (const auto& im : s.images) v.insert(v.end(), im.data(), im.data() + im.size());
  }
  return ArrayFile::real({stacks.size(), s0.size(), u(s0.rows()), u(s0.cols())}, std::move(v));
}

ArrayFile to_array(const std::vector<double>& series) {
  return ArrayFile::real({series.size()}, series);
}

RealImage as_real_image(const ArrayFile& a) {
  expect(a, ArrayType::F64, 2, "image");
  RealImage im(static_cast<Index>(a.dims[0]), static_cast<Index>(a.dims[1]));
  std::copy(a.f64.begin(), a.f64.end(), im.data());
  return im;
}

ComplexImage as_complex_image(const ArrayFile& a) {
  expect(a, ArrayType::C128, 2, "complex field");
  ComplexImage im(static_cast<Index>(a.dims[0]), static_cast<Index>(a.dims[1]));
  std::copy(a.c128.begin(), a.c128.end(), im.data());
  return im;
}

std::vector<RealImage> as_real_images(const ArrayFile& a) {
  expect(a, ArrayType::F64, 3, "image list");
  const auto rows = static_cast<Index>(a.dims[1]), cols = static_cast<Index>(a.dims[2]);
  std::vector<RealImage> out;
  for (std::uint64_t k = 0; k < a.dims[0]; ++k) {
    RealImage im(rows, cols);
    std::copy_n(a.f64.begin() + static_cast<std::ptrdiff_t>(k * u(rows * cols)), rows * cols, im.data());
    out.push_back(std::move(im));
  }
  return out;
}

std::vector<ComplexImage> as_complex_images(const ArrayFile& a) {
  expect(a, ArrayType::C128, 3, "field list");
  const auto rows = static_cast<Index>(a.dims[1]), cols = static_cast<Index>(a.dims[2]);
  std::vector<ComplexImage> out;
  for (std::uint64_t k = 0; k < a.dims[0]; ++k) {
    ComplexImage im(rows, cols);
    std::copy_n(a.c128.begin() + static_cast<std::ptrdiff_t>(k * u(rows * cols)), rows * cols,
                im.data());
    out.push_back(std::move(im));
  }
  return out;
}

std::vector<ImageStack> as_stacks(const ArrayFile& a) {
  a.validate();
  if (a.dtype != ArrayType::F64 || (a.dims.size() != 3 && a.dims.size() != 4))
    throw SizeError("image stacks need a rank-3 or rank-4 f64 array");
  const bool single = a.dims.size() == 3;
  const std::uint64_t count = single ? 1 : a.dims[0];
  const std::size_t o = single ? 0 : 1;
  const std::uint64_t n = a.dims[o];
  const auto rows = static_cast<Index>(a.dims[o + 1]), cols = static_cast<Index>(a.dims[o + 2]);
  std::vector<ImageStack> out;
  auto it = a.f64.begin();
  for (std::uint64_t s = 0; s < count; ++s) {
    ImageStack st;
    for (std::uint64_t l = 0; l < n; ++l) {
      RealImage im(rows, cols);
      std::copy_n(it, rows * cols, im.data());
      it += rows * cols;
      st.images.push_back(std::move(im));
      st.led_index.push_back(static_cast<int>(l));
      st.exposure_ms.push_back(IlluminationPattern::kMaxExposureMs);
    }
    out.push_back(std::move(st));
  }
  return out;
}

std::vector<double> as_series(const ArrayFile& a) {
  expect(a, ArrayType::F64, 1, "series");
  return a.f64;
}

// ---------------------------------------------------------------------------
// 16-bit PGM

void write_pgm16(const fs::path& path, Index rows, Index cols, const std::vector<std::uint16_t>& px) {
  if (u(rows * cols) != px.size()) throw SizeError("pixel count differs from the image shape");
  const std::string header = "P5\n" + std::to_string(cols) + " " + std::to_string(rows) + "\n65535\n";
  std::vector<std::uint8_t> bytes(header.begin(), header.end());
  for (auto v : px) {
    bytes.push_back(static_cast<std::uint8_t>(v >> 8));
    bytes.push_back(static_cast<std::uint8_t>(v & 0xff));
  }
  write_bytes(path, bytes);
}

void write_pgm16(const fs::path& path, const RealImage& image, std::optional<double> scale) {
  const double s = scale.value_or(1.0);
  if (!(s > 0.0) || !std::isfinite(s)) throw ConfigError("export scale must be positive");
  std::vector<std::uint16_t> px(static_cast<std::size_t>(image.size()));
  for (Index k = 0; k < image.size(); ++k) {
    const double v = std::round(image(k) * s);
    if (!(v >= 0.0 && v <= 65535.0))
      throw DomainError("pixel value " + std::to_string(image(k) * s) + " at index " +
                        std::to_string(k) + " does not fit 16 bits" +
                        (scale ? "" : "; pass an export scale"));
    px[static_cast<std::size_t>(k)] = static_cast<std::uint16_t>(v);
  }
  write_pgm16(path, image.rows(), image.cols(), px);
}

Pgm16 read_pgm16(const fs::path& path) {
  const auto bytes = read_bytes(path);
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) ++pos;
    if (start == pos) throw FormatError("truncated PGM header", pos);
    return std::string(bytes.begin() + static_cast<std::ptrdiff_t>(start),
                       bytes.begin() + static_cast<std::ptrdiff_t>(pos));
  };
  if (token() != "P5") throw FormatError("not a binary PGM", 0);
  Pgm16 img;
  img.cols = std::stol(token());
  img.rows = std::stol(token());
  if (token() != "65535") throw FormatError("not a 16-bit PGM", pos);
  ++pos;
  const std::size_t need = static_cast<std::size_t>(img.rows * img.cols) * 2;
  if (bytes.size() - pos != need) throw FormatError("PGM payload length mismatch", bytes.size());
  img.pixels.resize(need / 2);
  for (std::size_t i = 0; i < img.pixels.size(); ++i)
    img.pixels[i] = static_cast<std::uint16_t>((bytes[pos + 2 * i] << 8) | bytes[pos + 2 * i + 1]);
  return img;
}

Pgm16 plot_series(const std::vector<double>& values, Index width, Index height) {
  Pgm16 img{height, width, std::vector<std::uint16_t>(static_cast<std::size_t>(width * height), 65535)};
  if (values.empty() || width < 8 || height < 8) return img;
  const bool log_axis = std::all_of(values.begin(), values.end(), [](double v) { return v > 0.0; });
  std::vector<double> y;
  for (double v : values) y.push_back(log_axis ? std::log10(v) : v);
  double lo = *std::min_element(y.begin(), y.end());
  double hi = *std::max_element(y.begin(), y.end());
  if (!(hi > lo)) {
    lo -= 0.5;
    hi += 0.5;
  }
  const Index margin = 4;
  const Index w = width - 2 * margin, h = height - 2 * margin;
  auto set = [&](Index r, Index c) {
    if (r >= 0 && r < height && c >= 0 && c < width)
      img.pixels[static_cast<std::size_t>(r * width + c)] = 0;
  };
  for (Index c = margin; c < width - margin; ++c) set(height - margin, c);
  for (Index r = margin; r <= height - margin; ++r) set(r, margin - 1);
  auto row_of = [&](double v) {
    return margin + static_cast<Index>(std::lround((hi - v) / (hi - lo) * static_cast<double>(h - 1)));
  };
  Index prev = -1;
  for (Index c = 0; c < w; ++c) {
    const std::size_t i = values.size() == 1 ? 0
                          : static_cast<std::size_t>(std::lround(static_cast<double>(c) / static_cast<double>(w - 1) *
                                                                 static_cast<double>(values.size() - 1)));
    const Index r = row_of(y[i]);
    const Index from = prev < 0 ? r : std::min(prev, r), to = prev < 0 ? r : std::max(prev, r);
    for (Index rr = from; rr <= to; ++rr) set(rr, margin + c);
    prev = r;
  }
  return img;
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const fs::path& dir, const CnnModel& model, const IlluminationPattern& pattern) {
  model.validate();
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string());
  nlohmann::json manifest;
  manifest["format"] = "fpm-checkpoint";
  manifest["version"] = 1;
  manifest["arch"] = {{"blocks", model.arch.blocks},
                      {"channels", model.arch.channels},
                      {"kernel", model.arch.kernel},
                      {"upsample", model.arch.upsample},
                      {"leaky_slope", model.arch.leaky_slope}};
  manifest["output_pitch_um"] = model.output_pitch_um;
  manifest["input_shape"] = {model.input_rows, model.input_cols};
  manifest["parameter_count"] = model.parameter_count();
  nlohmann::json tensors = nlohmann::json::array();
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    const auto& t = model.params[i];
    const std::string name = "param_" + std::to_string(i) + ".fpma";
    Dims dims;
    for (auto d : t.shape()) dims.push_back(u(d));
    write_array(dir / name, ArrayFile::real(dims, {t.real().data(), t.real().data() + t.size()}));
    tensors.push_back(name);
  }
  manifest["tensors"] = tensors;
  std::vector<double> p(pattern.weights.data(), pattern.weights.data() + pattern.weights.size());
  p.push_back(pattern.exposure_ms);
  write_array(dir / "pattern.fpma", to_array(p));
  manifest["pattern"] = "pattern.fpma";
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

Checkpoint load_checkpoint(const fs::path& dir) {
  const auto text = read_bytes(dir / "manifest.json");
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(text.begin(), text.end());
    if (m.at("format") != "fpm-checkpoint" || m.at("version") != 1)
      throw FormatError("not a version 1 checkpoint manifest", 0);
    Checkpoint c;
    const auto& a = m.at("arch");
    c.model.arch.blocks = a.at("blocks").get<int>();
    c.model.arch.channels = a.at("channels").get<int>();
    c.model.arch.kernel = a.at("kernel").get<int>();
    c.model.arch.upsample = a.at("upsample").get<int>();
    c.model.arch.leaky_slope = a.at("leaky_slope").get<double>();
    c.model.output_pitch_um = m.at("output_pitch_um").get<double>();
    c.model.input_rows = m.at("input_shape").at(0).get<Index>();
    c.model.input_cols = m.at("input_shape").at(1).get<Index>();
    for (const auto& name : m.at("tensors")) {
      const ArrayFile arr = read_array(dir / name.get<std::string>());
      if (arr.dtype != ArrayType::F64) throw FormatError("model tensors must be f64", 6);
      diff::Shape shape;
      for (auto d : arr.dims) shape.push_back(static_cast<Index>(d));
      c.model.params.push_back(diff::Tensor::real(
          shape, Eigen::Map<const Eigen::ArrayXd>(arr.f64.data(), static_cast<Index>(arr.f64.size()))));
    }
    c.model.validate();
    const std::vector<double> p = as_series(read_array(dir / m.at("pattern").get<std::string>()));
    if (p.size() < 2) throw FormatError("pattern file holds fewer than 2 values", 0);
    c.pattern.weights = Eigen::Map<const Eigen::ArrayXd>(p.data(), static_cast<Index>(p.size() - 1));
    c.pattern.exposure_ms = p.back();
    c.pattern.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad checkpoint manifest: " + std::string(e.what()), 0);
  }
}

}  // namespace fpm
