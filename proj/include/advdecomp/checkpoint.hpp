#pragma once

// Model checkpoint format:
//
//   "ADVD" | u16 version | u32 meta_len | metadata JSON (UTF-8) |
//   float32 little-endian parameter payloads, in architecture order
//
// The metadata records arch_id, input shape, class count, init seed, training
// fingerprint and every tensor shape; shapes are checked against the
// registered architecture on load.

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "advdecomp/attack.hpp"
#include "advdecomp/dataset.hpp"
#include "advdecomp/error.hpp"
#include "advdecomp/model.hpp"

namespace advdecomp {

constexpr std::uint16_t kCheckpointVersion = 1;

inline nlohmann::json fingerprint_json(const TrainFingerprint& f) {
  return {{"epochs", f.epochs},
          {"batch_size", f.batch_size},
          {"learning_rate", f.learning_rate},
          {"momentum", f.momentum},
          {"dataset_id", f.dataset_id},
          {"train_accuracy", f.train_accuracy},
          {"test_accuracy", f.test_accuracy}};
}

inline TrainFingerprint fingerprint_from_json(const nlohmann::json& j) {
  TrainFingerprint f;
  f.epochs = j.at("epochs").get<std::size_t>();
  f.batch_size = j.at("batch_size").get<std::size_t>();
  f.learning_rate = j.at("learning_rate").get<double>();
  f.momentum = j.at("momentum").get<double>();
  f.dataset_id = j.at("dataset_id").get<std::string>();
  f.train_accuracy = j.at("train_accuracy").get<double>();
  f.test_accuracy = j.at("test_accuracy").get<double>();
  return f;
}

inline std::vector<std::uint8_t> save_checkpoint(const ModelInstance& m) {
  nlohmann::json shapes = nlohmann::json::array();
  for (const auto& p : m.params) shapes.push_back(p.shape());
  const nlohmann::json meta = {{"arch_id", m.arch_id()},
                               {"input_shape", m.arch.input_shape},
                               {"classes", m.arch.classes},
                               {"seed", m.init_seed},
                               {"fingerprint", fingerprint_json(m.fingerprint)},
                               {"tensor_shapes", shapes}};
  const std::string js = meta.dump();
  std::vector<std::uint8_t> b = {'A', 'D', 'V', 'D'};
  archive::put_u16(b, kCheckpointVersion);
  archive::put_u32(b, static_cast<std::uint32_t>(js.size()));
  b.insert(b.end(), js.begin(), js.end());
  for (const auto& p : m.params) archive::put_floats(b, p.data());
  return b;
}

inline ModelInstance load_checkpoint(std::span<const std::uint8_t> bytes) {
  archive::Reader r(bytes, "checkpoint");
  if (r.bytes(4) != "ADVD") throw FormatError("checkpoint", "bad magic (expected ADVD)");
  const std::uint16_t version = r.u16();
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint", detail::concat("unsupported version ", version, " (expected ", kCheckpointVersion, ")"));
  const std::uint32_t len = r.u32();
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(r.bytes(len));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("checkpoint", std::string("malformed metadata JSON: ") + e.what());
  }
  ModelInstance m;
  std::vector<Shape> shapes;
  try {
    const std::string arch_id = meta.at("arch_id").get<std::string>();
    m.arch = make_architecture(arch_id, meta.at("input_shape").get<Shape>(), meta.at("classes").get<std::size_t>());
    m.init_seed = meta.at("seed").get<std::uint64_t>();
    m.fingerprint = fingerprint_from_json(meta.at("fingerprint"));
    shapes = meta.at("tensor_shapes").get<std::vector<Shape>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint", std::string("metadata: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError("checkpoint", std::string("unregistered architecture: ") + e.what());
  }
  const auto expected = m.arch.param_shapes();
  if (shapes != expected)
    throw FormatError("checkpoint", "tensor shapes do not match the registered " + m.arch_id() + " architecture");
  for (const auto& s : shapes) {
    Tensor t(s);
    r.floats(t.data());
    m.params.push_back(std::move(t));
  }
  if (r.remaining() != 0) throw FormatError("checkpoint", detail::concat(r.remaining(), " trailing bytes after payload"));
  return m;
}

inline void write_checkpoint(const std::filesystem::path& path, const ModelInstance& m) {
  io::write_file(path, save_checkpoint(m));
}

inline ModelInstance read_checkpoint(const std::filesystem::path& path) {
  return load_checkpoint(io::read_file(path, "checkpoint"));
}

}  // namespace advdecomp
