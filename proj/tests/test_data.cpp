#include <catch_amalgamated.hpp>

#include <fstream>

#include "advdecomp/dataset.hpp"
#include "support.hpp"

using namespace advdecomp;
using namespace testsupport;
using Catch::Matchers::ContainsSubstring;

namespace {

std::vector<std::uint8_t> idx_images(std::uint32_t n, std::uint32_t h, std::uint32_t w, std::uint8_t fill) {
  std::vector<std::uint8_t> b;
  io::put_be32(b, kIdxImageMagic);
  io::put_be32(b, n);
  io::put_be32(b, h);
  io::put_be32(b, w);
  b.resize(b.size() + n * h * w, fill);
  return b;
}

std::vector<std::uint8_t> idx_labels(std::vector<std::uint8_t> labels) {
  std::vector<std::uint8_t> b;
  io::put_be32(b, kIdxLabelMagic);
  io::put_be32(b, static_cast<std::uint32_t>(labels.size()));
  b.insert(b.end(), labels.begin(), labels.end());
  return b;
}

}  // namespace

TEST_CASE("synthetic data is deterministic in the seed", "[data]") {
  SyntheticSpec s = small_spec();
  const Dataset a = generate_synthetic(s, Split::Train), b = generate_synthetic(s, Split::Train);
  CHECK(a.inputs == b.inputs);
  CHECK(a.labels == b.labels);
  CHECK(a.name == b.name);
  s.seed = 2;
  const Dataset c = generate_synthetic(s, Split::Train);
  CHECK_FALSE(a.inputs == c.inputs);
  CHECK(a.name != c.name);
  // Train and test share templates but not examples.
  const Dataset t = generate_synthetic(small_spec(), Split::Test);
  CHECK(t.size() == 200);
  CHECK(t.split == Split::Test);
  CHECK_FALSE(slice_rows(a.inputs, 0, 10) == slice_rows(t.inputs, 0, 10));
}

TEST_CASE("synthetic data satisfies the range and label invariants", "[data][property]") {
  SyntheticSpec s = small_spec();
  s.nuisance_amplitude = 0.9;  // pushes many pixels past the clamp
  const Dataset d = generate_synthetic(s, Split::Train);
  REQUIRE(d.inputs.shape() == Shape{600, 1, 16, 16});
  std::size_t at_edge = 0;
  for (float v : d.inputs.storage()) {
    REQUIRE(v >= -1.0f);
    REQUIRE(v <= 1.0f);
    at_edge += std::abs(v) == 1.0f;
  }
  CHECK(at_edge > 0);
  std::vector<std::size_t> counts(10, 0);
  for (int y : d.labels) ++counts.at(static_cast<std::size_t>(y));
  for (auto c : counts) CHECK(c == 60);
}

TEST_CASE("synthetic edge cases", "[data]") {
  SyntheticSpec s = small_spec();
  s.train_per_class = 0;
  const Dataset d = generate_synthetic(s, Split::Train);
  CHECK(d.size() == 0);
  CHECK(d.inputs.dim(0) == 0);
  s.classes = 1;
  CHECK_THROWS_AS(generate_synthetic(s, Split::Train), ConfigError);
}

TEST_CASE("every registered architecture reaches 85% on the default data", "[data][slow]") {
  const SyntheticSpec s;
  const Dataset tr = generate_synthetic(s, Split::Train), te = generate_synthetic(s, Split::Test);
  REQUIRE(tr.size() == s.classes * s.train_per_class);
  REQUIRE(te.size() == s.classes * s.test_per_class);
  for (const auto& arch : registered_architectures()) {
    const auto spec = make_architecture(arch, tr.example_shape(), s.classes);
    const auto m = train(init_model(spec, model_seed(1, arch, 0)), tr, TrainConfig{}, &te);
    INFO(arch << " test accuracy " << m.fingerprint.test_accuracy);
    CHECK(m.fingerprint.test_accuracy >= 0.85);
  }
}

TEST_CASE("rescale endpoints", "[data]") {
  CHECK(rescale_pixel(0) == -1.0f);
  CHECK(rescale_pixel(255) == 1.0f);
  for (int v = 0; v < 256; ++v) CHECK(quantize_pixel(rescale_pixel(static_cast<std::uint8_t>(v))) == v);
}

TEST_CASE("idx parsing", "[data][idx]") {
  auto img = idx_images(2, 3, 4, 0);
  img[16 + 5] = 255;
  const Dataset d = parse_idx(img, idx_labels({3, 7}), "toy");
  REQUIRE(d.inputs.shape() == Shape{2, 1, 3, 4});
  CHECK(d.inputs[0] == -1.0f);
  CHECK(d.inputs[5] == 1.0f);
  CHECK(d.labels == std::vector<int>{3, 7});

  SECTION("bad magic") {
    auto bad = img;
    bad[3] = 0x05;
    CHECK_THROWS_WITH(parse_idx(bad, idx_labels({3, 7}), "x"), ContainsSubstring("magic"));
    CHECK_THROWS_WITH(parse_idx(img, bad, "x"), ContainsSubstring("magic"));
  }
  SECTION("truncated payload names expected and actual sizes") {
    auto bad = img;
    bad.pop_back();
    CHECK_THROWS_WITH(parse_idx(bad, idx_labels({3, 7}), "x"),
                      ContainsSubstring("expected 40") && ContainsSubstring("got 39"));
  }
  SECTION("count mismatch") {
    CHECK_THROWS_WITH(parse_idx(img, idx_labels({3}), "x"), ContainsSubstring("label count 1"));
  }
  SECTION("label out of range") {
    CHECK_THROWS_WITH(parse_idx(img, idx_labels({3, 10}), "x"), ContainsSubstring("offset 9"));
  }
  SECTION("truncated header") {
    std::vector<std::uint8_t> tiny(img.begin(), img.begin() + 6);
    CHECK_THROWS_AS(parse_idx(tiny, idx_labels({3, 7}), "x"), FormatError);
  }
}

TEST_CASE("idx round trip through files", "[data][idx]") {
  const auto dir = temp_dir("idx");
  const Dataset d = take_first(small_test_set(), 30);
  auto [img, lab] = encode_idx(d);
  io::write_file(dir / "img.idx", img);
  io::write_file(dir / "lab.idx", lab);
  const Dataset back = load_idx(dir / "img.idx", dir / "lab.idx", 10, Split::Test);
  CHECK(back.labels == d.labels);
  REQUIRE(back.inputs.shape() == d.inputs.shape());
  for (std::size_t i = 0; i < d.inputs.size(); ++i) CHECK(std::abs(back.inputs[i] - d.inputs[i]) <= 0.5f / 127.5f + 1e-6f);
  // Loading twice is byte-stable.
  const Dataset again = load_idx(dir / "img.idx", dir / "lab.idx", 10, Split::Test);
  CHECK(again.inputs == back.inputs);
  CHECK(again.name == back.name);
  auto [img2, lab2] = encode_idx(back);
  CHECK(img2 == img);
  CHECK(lab2 == lab);
  CHECK_THROWS_AS(load_idx(dir / "missing.idx", dir / "lab.idx"), Error);
}

TEST_CASE("multi-channel idx uses the 4-dim magic", "[data][idx]") {
  Dataset d;
  d.name = "rgb";
  d.classes = 2;
  d.inputs = random_tensor({3, 3, 2, 2}, 5);
  d.labels = {0, 1, 1};
  auto [img, lab] = encode_idx(d);
  CHECK(io::read_be32(img, 0) == kIdxImage4Magic);
  const Dataset back = parse_idx(img, lab, "rgb", 2);
  CHECK(back.inputs.shape() == d.inputs.shape());
}

TEST_CASE("cifar10 binary batches", "[data][cifar]") {
  std::vector<std::uint8_t> bytes(2 * kCifarRecord, 0);
  bytes[0] = 4;
  bytes[kCifarRecord] = 9;
  bytes[kCifarRecord + 1] = 255;  // first red pixel of record 1
  const Dataset d = parse_cifar10(bytes, "c");
  REQUIRE(d.inputs.shape() == Shape{2, 3, 32, 32});
  CHECK(d.labels == std::vector<int>{4, 9});
  for (std::size_t i = 0; i < 3072; ++i) REQUIRE(d.inputs[i] == -1.0f);
  CHECK(d.inputs[3072] == 1.0f);
  CHECK(take_first(d, 1).size() == 1);
  CHECK(take_first(d, 2000).size() == 2);

  auto bad = bytes;
  bad.pop_back();
  CHECK_THROWS_WITH(parse_cifar10(bad, "c"), ContainsSubstring("multiple of 3073"));
  bad = bytes;
  bad[kCifarRecord] = 10;
  CHECK_THROWS_WITH(parse_cifar10(bad, "c"), ContainsSubstring("record 1"));

  const auto dir = temp_dir("cifar");
  io::write_file(dir / "a.bin", std::span<const std::uint8_t>(bytes.data(), kCifarRecord));
  io::write_file(dir / "b.bin", std::span<const std::uint8_t>(bytes.data() + kCifarRecord, kCifarRecord));
  const Dataset both = load_cifar10_bin({dir / "a.bin", dir / "b.bin"});
  CHECK(both.inputs == d.inputs);
  CHECK(both.labels == d.labels);
}

TEST_CASE("take_first of a large test split", "[data][cifar]") {
  std::vector<std::uint8_t> bytes(2500 * kCifarRecord, 128);
  for (std::size_t i = 0; i < 2500; ++i) bytes[i * kCifarRecord] = static_cast<std::uint8_t>(i % 10);
  const Dataset d = parse_cifar10(bytes, "c");
  const Dataset first = take_first(d, 2000);
  CHECK(first.size() == 2000);
  CHECK(first.inputs.dim(0) == 2000);
  CHECK(first.labels[1999] == 9);
}

TEST_CASE("validate_dataset rejects out-of-range data", "[data]") {
  Dataset d;
  d.name = "bad";
  d.classes = 2;
  d.inputs = Tensor({1, 1, 1, 2}, std::vector<float>{0.0f, 1.5f});
  d.labels = {0};
  CHECK_THROWS_WITH(validate_dataset(d), ContainsSubstring("outside [-1, 1]"));
  d.inputs[1] = 0.0f;
  d.labels = {2};
  CHECK_THROWS_AS(validate_dataset(d), FormatError);
}
