#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "advdecomp/error.hpp"
#include "advdecomp/rng.hpp"
#include "advdecomp/tensor.hpp"

namespace advdecomp {

enum class Split { Train, Test };

inline const char* split_name(Split s) { return s == Split::Train ? "train" : "test"; }

struct Dataset {
  std::string name;
  Tensor inputs;  // [N, C, H, W], every element in [-1, 1]
  std::vector<int> labels;
  std::size_t classes = 0;
  Split split = Split::Train;

  std::size_t size() const noexcept { return labels.size(); }
  Shape example_shape() const { return Shape(inputs.shape().begin() + 1, inputs.shape().end()); }
};

// Throws unless the dataset satisfies its range and label invariants.
inline void validate_dataset(const Dataset& d) {
  if (d.inputs.rank() != 4 || d.inputs.dim(0) != d.labels.size())
    throw FormatError("data", detail::concat(d.name, ": inputs ", shape_str(d.inputs.shape()), " vs ",
                                             d.labels.size(), " labels"));
  for (std::size_t i = 0; i < d.inputs.size(); ++i) {
    const float v = d.inputs[i];
    if (!(v >= -1.0f && v <= 1.0f))
      throw FormatError("data", detail::concat(d.name, ": element ", i, " = ", v, " outside [-1, 1]"));
  }
  for (std::size_t i = 0; i < d.labels.size(); ++i)
    if (d.labels[i] < 0 || static_cast<std::size_t>(d.labels[i]) >= d.classes)
      throw FormatError("data", detail::concat(d.name, ": label ", d.labels[i], " at ", i, " outside [0, ",
                                               d.classes, ")"));
}

inline Dataset take_first(const Dataset& d, std::size_t k) {
  const std::size_t n = std::min(k, d.size());
  Dataset out;
  out.name = d.name + (n < d.size() ? ":first" + std::to_string(n) : "");
  out.inputs = slice_rows(d.inputs, 0, n);
  out.labels.assign(d.labels.begin(), d.labels.begin() + static_cast<std::ptrdiff_t>(n));
  out.classes = d.classes;
  out.split = d.split;
  return out;
}

inline float rescale_pixel(std::uint8_t v) { return static_cast<float>(v) / 127.5f - 1.0f; }

// ---- synthetic ------------------------------------------------------------

struct SyntheticSpec {
  std::uint64_t seed = 1;
  std::size_t classes = 10;
  std::size_t train_per_class = 500;
  std::size_t test_per_class = 200;
  std::size_t channels = 1;
  std::size_t height = 16;
  std::size_t width = 16;
  // Peak absolute value of each class template.
  double template_amplitude = 0.07;
  // Per-pixel Gaussian noise added to every example.
  double noise_std = 0.002;
  // Number of random low-frequency cosine modes summed per template.
  std::size_t modes = 4;
  // Highest spatial frequency (cycles per image) a mode may use.
  std::size_t max_frequency = 2;
  // Per-example smooth nuisance field shared by all classes: `nuisance_modes`
  // random cosine modes with N(0, 1) weights, scaled by `nuisance_amplitude`.
  double nuisance_amplitude = 0.2;
  std::size_t nuisance_modes = 8;
  // Per-example template contrast exp(contrast_spread * N(0, 1)); spreads
  // the class margins so that some examples are much easier to flip.
  double contrast_spread = 0.0;
  // Fraction of examples whose template is scaled by `robust_contrast`.
  double robust_fraction = 0.5;
  double robust_contrast = 6.0;

  std::string id() const {
    return detail::concat("synthetic:v1:seed=", seed, ":classes=", classes, ":train=", train_per_class,
                          ":test=", test_per_class, ":shape=", channels, "x", height, "x", width,
                          ":amp=", template_amplitude, ":noise=", noise_std, ":modes=", modes,
                          ":fmax=", max_frequency, ":nuis=", nuisance_amplitude, "x", nuisance_modes,
                          ":contrast=", contrast_spread, ":robust=", robust_fraction, "x", robust_contrast);
  }
};

// One smooth [C,H,W] template per class, shared by the train and test splits.
inline std::vector<std::vector<float>> synthetic_templates(const SyntheticSpec& spec) {
  Rng rng(mix64(spec.seed, 0x7e3, 0));
  const std::size_t plane = spec.height * spec.width;
  std::vector<std::vector<float>> templates;
  for (std::size_t c = 0; c < spec.classes; ++c) {
    std::vector<double> t(spec.channels * plane, 0.0);
    for (std::size_t ch = 0; ch < spec.channels; ++ch) {
      for (std::size_t m = 0; m < spec.modes; ++m) {
        const double fy = static_cast<double>(rng.below(spec.max_frequency + 1));
        const double fx = static_cast<double>(rng.below(spec.max_frequency + 1));
        const double phase = 2.0 * std::numbers::pi * rng.uniform();
        const double amp = rng.normal();
        for (std::size_t i = 0; i < spec.height; ++i)
          for (std::size_t j = 0; j < spec.width; ++j) {
            const double arg = 2.0 * std::numbers::pi *
                                   (fy * static_cast<double>(i) / static_cast<double>(spec.height) +
                                    fx * static_cast<double>(j) / static_cast<double>(spec.width)) +
                               phase;
            t[ch * plane + i * spec.width + j] += amp * std::cos(arg);
          }
      }
    }
    double peak = 0.0;
    for (double v : t) peak = std::max(peak, std::abs(v));
    std::vector<float> tf(t.size());
    for (std::size_t i = 0; i < t.size(); ++i)
      tf[i] = static_cast<float>(peak > 0.0 ? t[i] / peak * spec.template_amplitude : 0.0);
    templates.push_back(std::move(tf));
  }
  return templates;
}

// Unit-peak cosine modes spanning the nuisance subspace.
inline std::vector<std::vector<double>> nuisance_basis(const SyntheticSpec& spec) {
  Rng rng(mix64(spec.seed, 0x7e3, 1));
  std::vector<std::vector<double>> basis;
  const std::size_t plane = spec.height * spec.width;
  for (std::size_t m = 0; m < spec.nuisance_modes; ++m) {
    std::vector<double> b(spec.channels * plane);
    const double fy = static_cast<double>(rng.below(spec.max_frequency + 1));
    const double fx = static_cast<double>(rng.below(spec.max_frequency + 1));
    const double phase = 2.0 * std::numbers::pi * rng.uniform();
    for (std::size_t ch = 0; ch < spec.channels; ++ch)
      for (std::size_t i = 0; i < spec.height; ++i)
        for (std::size_t j = 0; j < spec.width; ++j)
          b[ch * plane + i * spec.width + j] =
              std::cos(2.0 * std::numbers::pi *
                           (fy * static_cast<double>(i) / static_cast<double>(spec.height) +
                            fx * static_cast<double>(j) / static_cast<double>(spec.width)) +
                       phase);
    basis.push_back(std::move(b));
  }
  return basis;
}

// Class-interleaved examples: template + Gaussian pixel noise, clamped to [-1, 1].
inline Dataset generate_synthetic(const SyntheticSpec& spec, Split split) {
  if (spec.classes < 2) throw ConfigError("data", "synthetic dataset needs at least 2 classes");
  const auto templates = synthetic_templates(spec);
  const std::size_t per_class = split == Split::Train ? spec.train_per_class : spec.test_per_class;
  const std::size_t n = per_class * spec.classes;
  const std::size_t ex = spec.channels * spec.height * spec.width;
  Dataset d;
  d.name = spec.id() + ":" + split_name(split);
  d.classes = spec.classes;
  d.split = split;
  d.inputs = Tensor({n, spec.channels, spec.height, spec.width});
  d.labels.resize(n);
  const auto basis = nuisance_basis(spec);
  Rng rng(mix64(spec.seed, 0x5a1, split == Split::Train ? 1 : 2));
  std::vector<double> field(ex);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t cls = i % spec.classes;
    d.labels[i] = static_cast<int>(cls);
    std::fill(field.begin(), field.end(), 0.0);
    for (const auto& b : basis) {
      const double w = spec.nuisance_amplitude * rng.normal();
      for (std::size_t p = 0; p < ex; ++p) field[p] += w * b[p];
    }
    double contrast = std::exp(spec.contrast_spread * rng.normal());
    if (spec.robust_fraction > 0.0 && rng.uniform() < spec.robust_fraction) contrast *= spec.robust_contrast;
    float* dst = d.inputs.raw() + i * ex;
    for (std::size_t p = 0; p < ex; ++p) {
      const double v = contrast * templates[cls][p] + field[p] + spec.noise_std * rng.normal();
      dst[p] = static_cast<float>(std::clamp(v, -1.0, 1.0));
    }
  }
  validate_dataset(d);
  return d;
}

// ---- binary helpers -------------------------------------------------------

namespace io {

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path, const char* stage) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(stage, "cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("io", "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("io", "short write to " + path.string());
}

inline std::uint32_t read_be32(std::span<const std::uint8_t> b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

inline void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

}  // namespace io

// ---- IDX ------------------------------------------------------------------

constexpr std::uint32_t kIdxImageMagic = 0x00000803;  // u8, 3 dims: N, H, W
constexpr std::uint32_t kIdxImage4Magic = 0x00000804;  // u8, 4 dims: N, C, H, W
constexpr std::uint32_t kIdxLabelMagic = 0x00000801;  // u8, 1 dim: N

inline Dataset parse_idx(std::span<const std::uint8_t> images, std::span<const std::uint8_t> labels,
                         std::string name, std::size_t classes = 10, Split split = Split::Train) {
  if (images.size() < 4) throw FormatError("data", "idx images: header truncated at offset 0");
  const std::uint32_t magic = io::read_be32(images, 0);
  if (magic != kIdxImageMagic && magic != kIdxImage4Magic)
    throw FormatError("data", detail::concat("idx images: bad magic 0x", std::hex, magic, " at offset 0"));
  const std::size_t ndim = magic & 0xff;
  const std::size_t header = 4 + 4 * ndim;
  if (images.size() < header)
    throw FormatError("data", detail::concat("idx images: header needs ", header, " bytes, file has ", images.size()));
  std::vector<std::size_t> dims(ndim);
  for (std::size_t i = 0; i < ndim; ++i) dims[i] = io::read_be32(images, 4 + 4 * i);
  const std::size_t n = dims[0];
  const std::size_t c = ndim == 4 ? dims[1] : 1;
  const std::size_t h = dims[ndim - 2], w = dims[ndim - 1];
  const std::size_t expected = header + n * c * h * w;
  if (images.size() != expected)
    throw FormatError("data", detail::concat("idx images: expected ", expected, " bytes (header ", header,
                                             " + payload ", n * c * h * w, "), got ", images.size()));

  if (labels.size() < 8) throw FormatError("data", "idx labels: header truncated at offset 0");
  const std::uint32_t lmagic = io::read_be32(labels, 0);
  if (lmagic != kIdxLabelMagic)
    throw FormatError("data", detail::concat("idx labels: bad magic 0x", std::hex, lmagic, " at offset 0"));
  const std::size_t ln = io::read_be32(labels, 4);
  if (ln != n)
    throw FormatError("data", detail::concat("idx: image count ", n, " (offset 4) != label count ", ln, " (offset 4)"));
  if (labels.size() != 8 + ln)
    throw FormatError("data", detail::concat("idx labels: expected ", 8 + ln, " bytes, got ", labels.size()));

  Dataset d;
  d.name = std::move(name);
  d.classes = classes;
  d.split = split;
  d.inputs = Tensor({n, c, h, w});
  for (std::size_t i = 0; i < d.inputs.size(); ++i) d.inputs[i] = rescale_pixel(images[header + i]);
  d.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    d.labels[i] = labels[8 + i];
    if (static_cast<std::size_t>(d.labels[i]) >= classes)
      throw FormatError("data", detail::concat("idx labels: label ", d.labels[i], " at offset ", 8 + i,
                                               " outside [0, ", classes, ")"));
  }
  validate_dataset(d);
  return d;
}

inline Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                        std::size_t classes = 10, Split split = Split::Train) {
  const auto images = io::read_file(images_path, "data");
  const auto labels = io::read_file(labels_path, "data");
  const std::string name = detail::concat("idx:", std::hex,
                                          fnv1a64({reinterpret_cast<const char*>(images.data()), images.size()}), ":",
                                          fnv1a64({reinterpret_cast<const char*>(labels.data()), labels.size()}));
  return parse_idx(images, labels, name, classes, split);
}

inline std::uint8_t quantize_pixel(float v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround((static_cast<double>(v) + 1.0) * 127.5), 0L, 255L));
}

// Writes the dataset as an IDX image/label pair (lossy: pixels are quantized
// to 8 bits).
inline std::pair<std::vector<std::uint8_t>, std::vector<std::uint8_t>> encode_idx(const Dataset& d) {
  std::vector<std::uint8_t> img, lab;
  const Shape& s = d.inputs.shape();
  const bool single = s[1] == 1;
  io::put_be32(img, single ? kIdxImageMagic : kIdxImage4Magic);
  io::put_be32(img, static_cast<std::uint32_t>(s[0]));
  if (!single) io::put_be32(img, static_cast<std::uint32_t>(s[1]));
  io::put_be32(img, static_cast<std::uint32_t>(s[2]));
  io::put_be32(img, static_cast<std::uint32_t>(s[3]));
  for (float v : d.inputs.storage()) img.push_back(quantize_pixel(v));
  io::put_be32(lab, kIdxLabelMagic);
  io::put_be32(lab, static_cast<std::uint32_t>(d.labels.size()));
  for (int l : d.labels) lab.push_back(static_cast<std::uint8_t>(l));
  return {std::move(img), std::move(lab)};
}

// ---- CIFAR-10 binary batches ----------------------------------------------

constexpr std::size_t kCifarRecord = 3073;

inline Dataset parse_cifar10(std::span<const std::uint8_t> bytes, std::string name, Split split = Split::Test) {
  if (bytes.size() % kCifarRecord != 0)
    throw FormatError("data", detail::concat("cifar10: length ", bytes.size(), " is not a multiple of ", kCifarRecord));
  const std::size_t n = bytes.size() / kCifarRecord;
  Dataset d;
  d.name = std::move(name);
  d.classes = 10;
  d.split = split;
  d.inputs = Tensor({n, 3, 32, 32});
  d.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* rec = bytes.data() + i * kCifarRecord;
    if (rec[0] > 9)
      throw FormatError("data", detail::concat("cifar10: label ", int{rec[0]}, " > 9 in record ", i, " (offset ",
                                               i * kCifarRecord, ")"));
    d.labels[i] = rec[0];
    float* dst = d.inputs.raw() + i * 3072;
    for (std::size_t p = 0; p < 3072; ++p) dst[p] = rescale_pixel(rec[1 + p]);
  }
  validate_dataset(d);
  return d;
}

inline Dataset load_cifar10_bin(const std::vector<std::filesystem::path>& paths, Split split = Split::Test) {
  std::vector<std::uint8_t> all;
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : paths) {
    auto bytes = io::read_file(p, "data");
    if (bytes.size() % kCifarRecord != 0)
      throw FormatError("data", detail::concat("cifar10: ", p.string(), " length ", bytes.size(),
                                               " is not a multiple of ", kCifarRecord));
    h = splitmix64(h ^ fnv1a64({reinterpret_cast<const char*>(bytes.data()), bytes.size()}));
    all.insert(all.end(), bytes.begin(), bytes.end());
  }
  return parse_cifar10(all, detail::concat("cifar10:", std::hex, h), split);
}

}  // namespace advdecomp
