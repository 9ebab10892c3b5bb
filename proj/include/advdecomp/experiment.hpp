#pragma once

// End-to-end experiment runner: configuration, cohort training with
// checkpoint reuse, decompositions, evaluation and report persistence.
//
// Output directory layout:
//
//   <out_dir>/checkpoints/<arch>_<copy>.advd
//   <out_dir>/perturbations/*.advp (+ *_decomposition.json sidecars)
//   <out_dir>/reports/<experiment>/report.{csv,json}
//   <out_dir>/manifest.json

#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "advdecomp/attack.hpp"
#include "advdecomp/checkpoint.hpp"
#include "advdecomp/dataset.hpp"
#include "advdecomp/decomposition.hpp"
#include "advdecomp/error.hpp"
#include "advdecomp/evaluation.hpp"
#include "advdecomp/model.hpp"
#include "advdecomp/rng.hpp"
#include "advdecomp/train.hpp"

namespace advdecomp {

inline constexpr const char* kCodeVersion = "advdecomp 0.1.0";

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string hash_bytes(std::span<const std::uint8_t> b) {
  return hex64(fnv1a64({reinterpret_cast<const char*>(b.data()), b.size()}));
}

inline std::string hash_text(const std::string& s) { return hex64(fnv1a64(s)); }

// ---- configuration --------------------------------------------------------

struct Ratio {
  std::string label;  // "b:a"
  double b = 1.0;
  double a = 1.0;
};

inline Ratio parse_ratio(const std::string& s) {
  const auto colon = s.find(':');
  Ratio r{s, 0.0, 0.0};
  try {
    if (colon == std::string::npos) throw std::invalid_argument(s);
    std::size_t used = 0;
    r.b = std::stod(s.substr(0, colon), &used);
    if (used != colon) throw std::invalid_argument(s);
    const std::string rest = s.substr(colon + 1);
    r.a = std::stod(rest, &used);
    if (used != rest.size()) throw std::invalid_argument(s);
  } catch (const std::exception&) {
    throw ConfigError("config", "ratio '" + s + "' is not of the form b:a");
  }
  if (r.a < 0.0 || r.b < 0.0 || (r.a == 0.0 && r.b == 0.0))
    throw ConfigError("config", "ratio '" + s + "' must have non-negative parts, not both zero");
  return r;
}

struct DatasetConfig {
  std::string type = "synthetic";  // synthetic | idx | cifar10-bin
  std::size_t eval_examples = 400;  // first k test examples are attacked
  std::size_t classes = 10;         // idx only
  SyntheticSpec synthetic;
  std::string train_images, train_labels, test_images, test_labels;  // idx
  std::vector<std::string> train_files, test_files;                  // cifar10-bin
};

struct NoiseRoles {
  std::string arch = "cnn_b";
  std::size_t attack_copies = 1;
  std::size_t average_copies = 9;
  std::size_t test_copies = 5;

  std::size_t total() const { return attack_copies + average_copies + test_copies; }
};

struct ArchRoles {
  std::size_t source_copies = 4;  // also the per-architecture data ensemble size
  std::size_t test_copies = 4;
};

struct SweepGrids {
  std::vector<double> alpha{0.1, 0.5, 0.8, 1.0, 1.2, 1.5, 2.0};
  std::vector<double> epsilon{0.01, 0.03, 0.06};
  std::vector<std::size_t> iterations{5, 10, 100};
  std::vector<std::size_t> models{3, 5, 10};
  std::vector<std::string> ratios{"2:1", "1.5:1", "1:1", "1:2"};
  std::vector<std::size_t> convergence{2, 4, 8};
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::string out_dir = "runs/desk";
  std::size_t jobs = 1;
  FoolingMode fooling_mode = FoolingMode::LabelChange;
  DatasetConfig dataset;
  std::vector<std::string> architectures{"mlp", "cnn_a", "cnn_b", "cnn_wide"};
  TrainConfig train;
  AttackConfig attack;
  std::size_t attack_batch = 100;
  NoiseRoles noise;
  ArchRoles arch;
  SweepGrids sweeps;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);

  // Hash of everything that determines results (excludes out_dir and jobs).
  std::string hash() const {
    auto j = to_json();
    j.erase("out_dir");
    j.erase("jobs");
    return hash_text(j.dump());
  }

  TrainConfig train_config() const {
    TrainConfig t = train;
    t.global_seed = seed;
    return t;
  }

  AttackOptions attack_options() const { return {attack_batch, jobs}; }
};

namespace config_detail {

using json = nlohmann::json;

inline std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

inline void check_object(const json& j, const std::string& path) {
  if (!j.is_object()) throw ConfigError("config", "'" + (path.empty() ? std::string("<root>") : path) + "' must be an object");
}

inline void check_keys(const json& j, const std::string& path, std::initializer_list<const char*> allowed) {
  check_object(j, path);
  for (const auto& [k, v] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || k == a;
    if (!ok) throw ConfigError("config", "unknown key '" + join(path, k) + "'");
  }
}

template <typename T>
void read(const json& j, const std::string& path, const char* key, T& out) {
  const auto it = j.find(key);
  if (it == j.end()) return;
  try {
    if constexpr (std::is_unsigned_v<T>) {
      if (!it->is_number_integer() || it->get<std::int64_t>() < 0) throw std::invalid_argument("expected a non-negative integer");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!it->is_number()) throw std::invalid_argument("expected a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!it->is_string()) throw std::invalid_argument("expected a string");
    }
    out = it->get<T>();
  } catch (const std::exception& e) {
    throw ConfigError("config", "key '" + join(path, key) + "': " + e.what());
  }
}

}  // namespace config_detail

inline void ExperimentConfig::validate() const {
  const auto& d = dataset;
  if (d.type == "idx") {
    for (const auto& [key, val] : {std::pair<const char*, const std::string*>{"dataset.train_images", &d.train_images},
                                   {"dataset.train_labels", &d.train_labels},
                                   {"dataset.test_images", &d.test_images},
                                   {"dataset.test_labels", &d.test_labels}})
      if (val->empty()) throw ConfigError("config", std::string("missing dataset path: '") + key + "' is required when dataset.type is \"idx\"");
  } else if (d.type == "cifar10-bin") {
    if (d.train_files.empty())
      throw ConfigError("config", "missing dataset path: 'dataset.train_files' is required when dataset.type is \"cifar10-bin\"");
    if (d.test_files.empty())
      throw ConfigError("config", "missing dataset path: 'dataset.test_files' is required when dataset.type is \"cifar10-bin\"");
  } else if (d.type != "synthetic") {
    throw ConfigError("config", "dataset.type must be one of synthetic, idx, cifar10-bin (got '" + d.type + "')");
  }
  if (d.eval_examples < 1) throw ConfigError("config", "dataset.eval_examples must be >= 1");
  if (architectures.empty()) throw ConfigError("config", "architectures must list at least one architecture");
  for (const auto& a : architectures) registry_index(a);
  registry_index(noise.arch);
  if (noise.attack_copies != 1) throw ConfigError("config", "noise.attack_copies must be 1");
  if (noise.average_copies < 1) throw ConfigError("config", "noise.average_copies must be >= 1");
  if (noise.test_copies < 1) throw ConfigError("config", "noise.test_copies must be >= 1");
  if (arch.source_copies < 1 || arch.test_copies < 1)
    throw ConfigError("config", "arch.source_copies and arch.test_copies must be >= 1");
  if (jobs < 1) throw ConfigError("config", "jobs must be >= 1");
  if (attack_batch < 1) throw ConfigError("config", "attack.batch must be >= 1");
  try {
    train.validate();
    attack.validate();
  } catch (const Error& e) {
    throw ConfigError("config", e.what());
  }
  for (double a : sweeps.alpha)
    if (!(a >= 0.0)) throw ConfigError("config", "sweeps.alpha entries must be >= 0");
  for (double e : sweeps.epsilon)
    if (!(e > 0.0)) throw ConfigError("config", "sweeps.epsilon entries must be > 0");
  for (std::size_t i : sweeps.iterations)
    if (i < 1) throw ConfigError("config", "sweeps.iterations entries must be >= 1");
  for (std::size_t m : sweeps.models)
    if (m < 2 || m - 1 > noise.average_copies)
      throw ConfigError("config", detail::concat("sweeps.models entries must lie in [2, noise.average_copies + 1 = ",
                                                 noise.average_copies + 1, "]"));
  for (const auto& r : sweeps.ratios) parse_ratio(r);
  for (std::size_t n : sweeps.convergence)
    if (n < 1 || n > noise.attack_copies + noise.average_copies)
      throw ConfigError("config", detail::concat("sweeps.convergence entries must lie in [1, ",
                                                 noise.attack_copies + noise.average_copies, "]"));
}

inline nlohmann::ordered_json ExperimentConfig::to_json() const {
  nlohmann::ordered_json j;
  j["seed"] = seed;
  j["out_dir"] = out_dir;
  j["jobs"] = jobs;
  j["fooling_mode"] = fooling_mode == FoolingMode::LabelChange ? "label_change" : "misclassification";
  const auto& s = dataset.synthetic;
  nlohmann::ordered_json syn;
  syn["seed"] = s.seed;
  syn["classes"] = s.classes;
  syn["train_per_class"] = s.train_per_class;
  syn["test_per_class"] = s.test_per_class;
  syn["channels"] = s.channels;
  syn["height"] = s.height;
  syn["width"] = s.width;
  syn["template_amplitude"] = s.template_amplitude;
  syn["noise_std"] = s.noise_std;
  syn["modes"] = s.modes;
  syn["max_frequency"] = s.max_frequency;
  syn["nuisance_amplitude"] = s.nuisance_amplitude;
  syn["nuisance_modes"] = s.nuisance_modes;
  syn["contrast_spread"] = s.contrast_spread;
  syn["robust_fraction"] = s.robust_fraction;
  syn["robust_contrast"] = s.robust_contrast;
  nlohmann::ordered_json ds;
  ds["type"] = dataset.type;
  ds["eval_examples"] = dataset.eval_examples;
  ds["classes"] = dataset.classes;
  ds["synthetic"] = syn;
  ds["train_images"] = dataset.train_images;
  ds["train_labels"] = dataset.train_labels;
  ds["test_images"] = dataset.test_images;
  ds["test_labels"] = dataset.test_labels;
  ds["train_files"] = dataset.train_files;
  ds["test_files"] = dataset.test_files;
  j["dataset"] = ds;
  j["architectures"] = architectures;
  j["train"] = {{"epochs", train.epochs},
                {"batch_size", train.batch_size},
                {"learning_rate", train.learning_rate},
                {"momentum", train.momentum}};
  j["attack"] = {{"epsilon", attack.epsilon},
                 {"iterations", attack.iterations},
                 {"step_size", attack.step_size},
                 {"batch", attack_batch}};
  j["noise"] = {{"arch", noise.arch},
                {"attack_copies", noise.attack_copies},
                {"average_copies", noise.average_copies},
                {"test_copies", noise.test_copies}};
  j["arch"] = {{"source_copies", arch.source_copies}, {"test_copies", arch.test_copies}};
  j["sweeps"] = {{"alpha", sweeps.alpha},
                 {"epsilon", sweeps.epsilon},
                 {"iterations", sweeps.iterations},
                 {"models", sweeps.models},
                 {"ratios", sweeps.ratios},
                 {"convergence", sweeps.convergence}};
  return j;
}

inline ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  using namespace config_detail;
  ExperimentConfig c;
  check_keys(j, "",
             {"seed", "out_dir", "jobs", "fooling_mode", "dataset", "architectures", "train", "attack", "noise", "arch",
              "sweeps"});
  read(j, "", "seed", c.seed);
  read(j, "", "out_dir", c.out_dir);
  read(j, "", "jobs", c.jobs);
  if (j.contains("fooling_mode")) {
    std::string m;
    read(j, "", "fooling_mode", m);
    if (m == "label_change")
      c.fooling_mode = FoolingMode::LabelChange;
    else if (m == "misclassification")
      c.fooling_mode = FoolingMode::Misclassification;
    else
      throw ConfigError("config", "key 'fooling_mode': expected label_change or misclassification");
  }
  if (j.contains("dataset")) {
    const auto& d = j["dataset"];
    check_keys(d, "dataset",
               {"type", "eval_examples", "classes", "synthetic", "train_images", "train_labels", "test_images",
                "test_labels", "train_files", "test_files"});
    read(d, "dataset", "type", c.dataset.type);
    read(d, "dataset", "eval_examples", c.dataset.eval_examples);
    read(d, "dataset", "classes", c.dataset.classes);
    read(d, "dataset", "train_images", c.dataset.train_images);
    read(d, "dataset", "train_labels", c.dataset.train_labels);
    read(d, "dataset", "test_images", c.dataset.test_images);
    read(d, "dataset", "test_labels", c.dataset.test_labels);
    read(d, "dataset", "train_files", c.dataset.train_files);
    read(d, "dataset", "test_files", c.dataset.test_files);
    if (d.contains("synthetic")) {
      const auto& s = d["synthetic"];
      const std::string p = "dataset.synthetic";
      check_keys(s, p,
                 {"seed", "classes", "train_per_class", "test_per_class", "channels", "height", "width",
                  "template_amplitude", "noise_std", "modes", "max_frequency", "nuisance_amplitude", "nuisance_modes",
                  "contrast_spread", "robust_fraction", "robust_contrast"});
      auto& o = c.dataset.synthetic;
      read(s, p, "seed", o.seed);
      read(s, p, "classes", o.classes);
      read(s, p, "train_per_class", o.train_per_class);
      read(s, p, "test_per_class", o.test_per_class);
      read(s, p, "channels", o.channels);
      read(s, p, "height", o.height);
      read(s, p, "width", o.width);
      read(s, p, "template_amplitude", o.template_amplitude);
      read(s, p, "noise_std", o.noise_std);
      read(s, p, "modes", o.modes);
      read(s, p, "max_frequency", o.max_frequency);
      read(s, p, "nuisance_amplitude", o.nuisance_amplitude);
      read(s, p, "nuisance_modes", o.nuisance_modes);
      read(s, p, "contrast_spread", o.contrast_spread);
      read(s, p, "robust_fraction", o.robust_fraction);
      read(s, p, "robust_contrast", o.robust_contrast);
    }
  }
  read(j, "", "architectures", c.architectures);
  if (j.contains("train")) {
    const auto& t = j["train"];
    check_keys(t, "train", {"epochs", "batch_size", "learning_rate", "momentum"});
    read(t, "train", "epochs", c.train.epochs);
    read(t, "train", "batch_size", c.train.batch_size);
    read(t, "train", "learning_rate", c.train.learning_rate);
    read(t, "train", "momentum", c.train.momentum);
  }
  if (j.contains("attack")) {
    const auto& a = j["attack"];
    check_keys(a, "attack", {"epsilon", "iterations", "step_size", "batch"});
    read(a, "attack", "epsilon", c.attack.epsilon);
    read(a, "attack", "iterations", c.attack.iterations);
    read(a, "attack", "step_size", c.attack.step_size);
    read(a, "attack", "batch", c.attack_batch);
  }
  if (j.contains("noise")) {
    const auto& n = j["noise"];
    check_keys(n, "noise", {"arch", "attack_copies", "average_copies", "test_copies"});
    read(n, "noise", "arch", c.noise.arch);
    read(n, "noise", "attack_copies", c.noise.attack_copies);
    read(n, "noise", "average_copies", c.noise.average_copies);
    read(n, "noise", "test_copies", c.noise.test_copies);
  }
  if (j.contains("arch")) {
    const auto& a = j["arch"];
    check_keys(a, "arch", {"source_copies", "test_copies"});
    read(a, "arch", "source_copies", c.arch.source_copies);
    read(a, "arch", "test_copies", c.arch.test_copies);
  }
  if (j.contains("sweeps")) {
    const auto& s = j["sweeps"];
    check_keys(s, "sweeps", {"alpha", "epsilon", "iterations", "models", "ratios", "convergence"});
    read(s, "sweeps", "alpha", c.sweeps.alpha);
    read(s, "sweeps", "epsilon", c.sweeps.epsilon);
    read(s, "sweeps", "iterations", c.sweeps.iterations);
    read(s, "sweeps", "models", c.sweeps.models);
    read(s, "sweeps", "ratios", c.sweeps.ratios);
    read(s, "sweeps", "convergence", c.sweeps.convergence);
  }
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path, "config");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config", path.string() + ": " + e.what());
  }
  return ExperimentConfig::from_json(j);
}

// ---- datasets ---------------------------------------------------------------

struct DataBundle {
  Dataset train;
  Dataset test;
  Dataset eval;  // first eval_examples of test
};

inline DataBundle load_data(const DatasetConfig& d) {
  DataBundle b;
  if (d.type == "synthetic") {
    b.train = generate_synthetic(d.synthetic, Split::Train);
    b.test = generate_synthetic(d.synthetic, Split::Test);
  } else if (d.type == "idx") {
    b.train = load_idx(d.train_images, d.train_labels, d.classes, Split::Train);
    b.test = load_idx(d.test_images, d.test_labels, d.classes, Split::Test);
  } else {
    std::vector<std::filesystem::path> tr(d.train_files.begin(), d.train_files.end());
    std::vector<std::filesystem::path> te(d.test_files.begin(), d.test_files.end());
    b.train = load_cifar10_bin(tr, Split::Train);
    b.test = load_cifar10_bin(te, Split::Test);
  }
  if (b.train.example_shape() != b.test.example_shape())
    throw ShapeError("data", "train and test example shapes differ");
  if (d.eval_examples > b.test.size())
    throw ConfigError("config", detail::concat("dataset.eval_examples = ", d.eval_examples, " exceeds the ",
                                               b.test.size(), " test examples"));
  b.eval = take_first(b.test, d.eval_examples);
  return b;
}

// ---- workspace ----------------------------------------------------------------

// Owns the data, the trained models and the output directory of one config.
class Workspace {
public:
  explicit Workspace(ExperimentConfig cfg) : cfg_(std::move(cfg)), root_(cfg_.out_dir) {
    cfg_.validate();
    data_ = load_data(cfg_.dataset);
    const auto mpath = root_ / "manifest.json";
    if (std::filesystem::exists(mpath)) {
      const auto bytes = io::read_file(mpath, "manifest");
      try {
        manifest_ = nlohmann::json::parse(bytes.begin(), bytes.end());
      } catch (const nlohmann::json::parse_error& e) {
        throw FormatError("manifest", mpath.string() + ": " + e.what());
      }
    }
    if (!manifest_.is_object()) manifest_ = nlohmann::json::object();
    if (!manifest_.contains("checkpoints")) manifest_["checkpoints"] = nlohmann::json::object();
    if (!manifest_.contains("reports")) manifest_["reports"] = nlohmann::json::object();
  }

  std::function<void(const std::string&)> log = [](const std::string&) {};

  const ExperimentConfig& config() const { return cfg_; }
  const DataBundle& data() const { return data_; }
  const Dataset& eval_set() const { return data_.eval; }
  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path dir(const std::string& sub) const { return root_ / sub; }

  std::size_t trained_count() const { return trained_; }
  std::size_t reused_count() const { return reused_; }

  // Copies [first, first + count) of `arch`, training (in parallel) whatever
  // has no reusable checkpoint.
  std::vector<const ModelInstance*> models(const std::string& arch, std::size_t first, std::size_t count) {
    std::vector<std::pair<std::string, std::size_t>> want;
    for (std::size_t c = first; c < first + count; ++c) want.emplace_back(arch, c);
    ensure(want);
    std::vector<const ModelInstance*> out;
    for (const auto& w : want) out.push_back(&models_.at(w));
    return out;
  }

  void ensure(const std::vector<std::pair<std::string, std::size_t>>& want) {
    std::vector<std::pair<std::string, std::size_t>> missing;
    for (const auto& w : want) {
      if (models_.count(w)) continue;
      if (auto m = try_reuse(w.first, w.second)) {
        models_.emplace(w, std::move(*m));
        ++reused_;
      } else if (std::find(missing.begin(), missing.end(), w) == missing.end()) {
        missing.push_back(w);
      }
    }
    if (missing.empty()) return;
    const Shape in_shape = data_.train.example_shape();
    const TrainConfig tc = cfg_.train_config();
    std::vector<ModelInstance> trained(missing.size());
    parallel_for(missing.size(), cfg_.jobs, [&](std::size_t t) {
      const auto& [arch, copy] = missing[t];
      const auto spec = make_architecture(arch, in_shape, data_.train.classes);
      const std::uint64_t seed = model_seed(cfg_.seed, arch, copy);
      try {
        trained[t] = train(init_model(spec, seed), data_.train, tc, &data_.test);
      } catch (const Error& e) {
        throw Error("train", detail::concat("training ", arch, " copy ", copy, " (seed ", seed, ") failed: ", e.what()));
      }
    });
    for (std::size_t t = 0; t < missing.size(); ++t) {
      const auto& m = trained[t];
      log(detail::concat("trained ", m.tag(), " test accuracy ", m.fingerprint.test_accuracy));
      const auto bytes = save_checkpoint(m);
      const std::string name = checkpoint_name(missing[t].first, missing[t].second);
      io::write_file(dir("checkpoints") / (name + ".advd"), bytes);
      manifest_["checkpoints"][name] = {{"file", "checkpoints/" + name + ".advd"},
                                        {"arch", m.arch_id()},
                                        {"copy", missing[t].second},
                                        {"seed", m.init_seed},
                                        {"key", checkpoint_key(missing[t].first, missing[t].second)},
                                        {"file_hash", hash_bytes(bytes)},
                                        {"test_accuracy", m.fingerprint.test_accuracy}};
      models_.emplace(missing[t], std::move(trained[t]));
      ++trained_;
    }
    save_manifest();
  }

  // Hash over the checkpoints of `ms`, in order.
  std::string cohort_hash(const std::vector<const ModelInstance*>& ms) const {
    std::string acc;
    for (const auto* m : ms) {
      acc += m->tag();
      acc += '=';
      acc += hash_bytes(save_checkpoint(*m));
      acc += ';';
    }
    return hash_text(acc);
  }

  nlohmann::json provenance(const std::string& experiment, const std::vector<const ModelInstance*>& ms) const {
    return {{"experiment", experiment},
            {"config_hash", cfg_.hash()},
            {"cohort_hash", cohort_hash(ms)},
            {"code_version", kCodeVersion},
            {"seed", cfg_.seed},
            {"dataset", data_.train.name},
            {"eval_examples", data_.eval.size()},
            {"attack", cfg_.attack.to_json()}};
  }

  // Writes reports/<name>/report.{csv,json} and records hashes in the manifest.
  void write_report(const std::string& name, const TransferReport& r) {
    const auto d = dir("reports") / name;
    const std::string csv = emit_csv(r), js = emit_json(r);
    write_text(d / "report.csv", csv);
    write_text(d / "report.json", js);
    manifest_["reports"][name] = {{"csv", "reports/" + name + "/report.csv"},
                                  {"csv_hash", hash_text(csv)},
                                  {"json_hash", hash_text(js)},
                                  {"cohort_hash", r.metadata.value("cohort_hash", std::string())}};
    save_manifest();
  }

  void save_manifest() {
    manifest_["code_version"] = kCodeVersion;
    manifest_["config_hash"] = cfg_.hash();
    manifest_["dataset"] = data_.train.name;
    write_text(root_ / "manifest.json", manifest_.dump(2) + "\n");
  }

  const nlohmann::json& manifest() const { return manifest_; }

  static std::string checkpoint_name(const std::string& arch, std::size_t copy) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "_%02zu", copy);
    return arch + buf;
  }

  // Identifies what a checkpoint must have been trained from.
  std::string checkpoint_key(const std::string& arch, std::size_t copy) const {
    const TrainConfig tc = cfg_.train_config();
    const nlohmann::json k = {{"arch", arch},
                              {"input_shape", data_.train.example_shape()},
                              {"classes", data_.train.classes},
                              {"seed", model_seed(cfg_.seed, arch, copy)},
                              {"epochs", tc.epochs},
                              {"batch_size", tc.batch_size},
                              {"learning_rate", tc.learning_rate},
                              {"momentum", tc.momentum},
                              {"train", data_.train.name},
                              {"test", data_.test.name},
                              {"code_version", kCodeVersion}};
    return hash_text(k.dump());
  }

private:
  std::optional<ModelInstance> try_reuse(const std::string& arch, std::size_t copy) {
    const std::string name = checkpoint_name(arch, copy);
    const auto& cks = manifest_["checkpoints"];
    if (!cks.contains(name)) return std::nullopt;
    const auto& e = cks[name];
    if (e.value("key", std::string()) != checkpoint_key(arch, copy)) {
      log("checkpoint " + name + " does not match the config; retraining");
      return std::nullopt;
    }
    const auto path = dir("checkpoints") / (name + ".advd");
    if (!std::filesystem::exists(path)) return std::nullopt;
    const auto bytes = io::read_file(path, "checkpoint");
    if (hash_bytes(bytes) != e.value("file_hash", std::string())) {
      log("checkpoint " + name + " changed on disk; retraining");
      return std::nullopt;
    }
    ModelInstance m = load_checkpoint(bytes);
    const TrainConfig tc = cfg_.train_config();
    if (m.arch_id() != arch || m.init_seed != model_seed(cfg_.seed, arch, copy) ||
        m.fingerprint.dataset_id != data_.train.name || m.fingerprint.epochs != tc.epochs ||
        m.fingerprint.batch_size != tc.batch_size || m.fingerprint.learning_rate != tc.learning_rate ||
        m.fingerprint.momentum != tc.momentum) {
      log("checkpoint " + name + " fingerprint does not match the config; retraining");
      return std::nullopt;
    }
    return m;
  }

  ExperimentConfig cfg_;
  std::filesystem::path root_;
  DataBundle data_;
  nlohmann::json manifest_;
  std::map<std::pair<std::string, std::size_t>, ModelInstance> models_;
  std::size_t trained_ = 0;
  std::size_t reused_ = 0;
};

// ---- experiments ----------------------------------------------------------

template <typename Fn>
auto in_stage(const std::string& context, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const Error& e) {
    throw Error(e.stage(), context + ": " + e.what());
  }
}

inline std::vector<const ModelInstance*> concat_models(std::initializer_list<std::vector<const ModelInstance*>> parts) {
  std::vector<const ModelInstance*> out;
  for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

inline nlohmann::json tags_of(const std::vector<const ModelInstance*>& ms) {
  nlohmann::json t = nlohmann::json::array();
  for (const auto* m : ms) t.push_back(m->tag());
  return t;
}

struct NoiseCohort {
  std::vector<const ModelInstance*> orig, avg, test;

  std::vector<const ModelInstance*> all() const { return concat_models({orig, avg, test}); }

  ModelCohort groups() const {
    ModelCohort c;
    c.add_group("M_orig", orig);
    c.add_group("M_avg", avg);
    c.add_group("M_test", test);
    c.check_disjoint();
    return c;
  }
};

// Copy 0 is attacked; copies 1..n_avg form the noise-reduction ensemble; the
// test group always uses the copies after the configured average group.
inline NoiseCohort noise_cohort(Workspace& ws, std::optional<std::size_t> n_avg = std::nullopt) {
  const auto& n = ws.config().noise;
  NoiseCohort c;
  c.orig = ws.models(n.arch, 0, 1);
  c.avg = ws.models(n.arch, 1, n_avg.value_or(n.average_copies));
  c.test = ws.models(n.arch, 1 + n.average_copies, n.test_copies);
  return c;
}

// Runs (or reloads from perturbations/) the noise decomposition for one
// attack setting.
inline NoiseDecomposition noise_decomposition(Workspace& ws, const NoiseCohort& c, const AttackConfig& attack,
                                              const std::string& prefix) {
  const auto& ev = ws.eval_set();
  std::vector<const ModelInstance*> ms = concat_models({c.orig, c.avg});
  const std::string key =
      hash_text(nlohmann::json{{"attack", attack.to_json()}, {"cohort", ws.cohort_hash(ms)}, {"eval", ev.name},
                               {"examples", ev.size()}, {"code_version", kCodeVersion}}
                    .dump());
  const auto pdir = ws.dir("perturbations");
  const auto raw_p = pdir / (prefix + "_raw.advp"), nr_p = pdir / (prefix + "_nr.advp");
  if (std::filesystem::exists(raw_p) && std::filesystem::exists(nr_p)) {
    try {
      Perturbation dx = read_perturbation(raw_p), nr = read_perturbation(nr_p);
      if (dx.provenance.value("cache_key", std::string()) == key && nr.provenance.value("cache_key", std::string()) == key &&
          dx.delta.shape() == ev.inputs.shape() && nr.delta.shape() == ev.inputs.shape())
        return split_noise(std::move(dx), std::move(nr));
    } catch (const FormatError&) {
      ws.log("perturbation archive " + raw_p.string() + " unreadable; recomputing");
    }
  }
  NoiseDecomposition d = in_stage("noise decomposition", [&] {
    return decompose_noise(ms, ev.inputs, ev.labels, attack, ws.config().attack_options());
  });
  d.dx.provenance["cache_key"] = key;
  d.dx_nr.provenance["cache_key"] = key;
  write_decomposition(pdir, prefix, d);
  return d;
}

inline nlohmann::json cohort_metadata(const NoiseCohort& c) {
  return {{"M_orig", tags_of(c.orig)}, {"M_avg", tags_of(c.avg)}, {"M_test", tags_of(c.test)}};
}

inline TransferReport noise_table(Workspace& ws, const NoiseCohort& c, const NoiseDecomposition& d,
                                  const AttackConfig& attack, const std::string& name) {
  const auto& ev = ws.eval_set();
  TransferReport r = transfer_table(c.groups(), {{"raw", &d.dx.delta}, {"nr", &d.dx_nr.delta}, {"noise", &d.dx_noise.delta}},
                                    ev.inputs, ev.labels, ws.config().fooling_mode, ws.config().jobs);
  r.metadata.update(ws.provenance(name, c.all()));
  r.metadata["attack"] = attack.to_json();
  r.metadata["groups"] = cohort_metadata(c);
  r.metadata["mean_a"] = d.coeffs.mean_a();
  r.metadata["mean_b"] = d.coeffs.mean_b();
  r.metadata["degenerate_examples"] = d.degenerate_count();
  double worst = 0.0;
  for (double o : d.orthogonality) worst = std::max(worst, o);
  r.metadata["max_orthogonality"] = worst;
  return r;
}

inline TransferReport run_noise_experiment(Workspace& ws) {
  const auto c = in_stage("noise experiment: train", [&] { return noise_cohort(ws); });
  const auto d = noise_decomposition(ws, c, ws.config().attack, "noise");
  TransferReport r = in_stage("noise experiment: evaluate", [&] { return noise_table(ws, c, d, ws.config().attack, "noise"); });
  r.metadata["reference_full_scale"] = {
      {"description", "ResNet18 cohort on CIFAR-10, eps 0.03, 10 iterations; not asserted"},
      {"raw", {{"M_orig", 0.683}, {"M_avg", 0.456}, {"M_test", 0.467}}},
      {"nr", {{"M_orig", 0.637}, {"M_avg", 0.619}, {"M_test", 0.595}}},
      {"noise", {{"M_orig", 0.602}, {"M_avg", 0.198}, {"M_test", 0.203}}},
      {"mean_a", 1.319},
      {"mean_b", 0.386}};
  ws.write_report("noise", r);
  return r;
}

// Rows: nr (sign-maximized 1:0), each configured b:a ratio, raw (unmodified).
inline TransferReport run_recombination_sweep(Workspace& ws) {
  const auto& cfg = ws.config();
  const auto c = in_stage("recombine experiment: train", [&] { return noise_cohort(ws); });
  const auto d = noise_decomposition(ws, c, cfg.attack, "noise");
  std::vector<Perturbation> combos;
  std::vector<std::string> labels{"nr"};
  combos.push_back(recombine(d.dx_noise.delta, d.dx_nr.delta, 1.0, 0.0, cfg.attack.epsilon));
  for (const auto& s : cfg.sweeps.ratios) {
    const Ratio r = parse_ratio(s);
    combos.push_back(recombine(d.dx_noise.delta, d.dx_nr.delta, r.b, r.a, cfg.attack.epsilon));
    labels.push_back(r.label);
  }
  std::vector<LabeledPerturbation> lp;
  nlohmann::json degenerate = nlohmann::json::object();
  for (std::size_t i = 0; i < combos.size(); ++i) {
    lp.push_back({labels[i], &combos[i].delta});
    degenerate[labels[i]] = combos[i].provenance["degenerate_examples"].size();
    write_perturbation(ws.dir("perturbations") / ("recombined_" + std::to_string(i) + ".advp"), combos[i]);
  }
  lp.push_back({"raw", &d.dx.delta});
  const auto& ev = ws.eval_set();
  TransferReport r = in_stage("recombine experiment: evaluate", [&] {
    return transfer_table(c.groups(), lp, ev.inputs, ev.labels, cfg.fooling_mode, cfg.jobs);
  });
  r.metadata.update(ws.provenance("recombine", c.all()));
  r.metadata["groups"] = cohort_metadata(c);
  r.metadata["ratio_convention"] = "b:a = weight on unit(dx_nr) : weight on unit(dx_noise)";
  r.metadata["ratios"] = labels;
  r.metadata["mean_a"] = d.coeffs.mean_a();
  r.metadata["mean_b"] = d.coeffs.mean_b();
  r.metadata["degenerate_examples"] = degenerate;
  r.metadata["reference_full_scale"] = {
      {"description", "ResNet18 cohort on CIFAR-10; not asserted"},
      {"nr", {0.658, 0.636, 0.651}},
      {"2:1", {0.685, 0.637, 0.652}},
      {"1.5:1", {0.694, 0.612, 0.628}},
      {"1:1", {0.698, 0.560, 0.564}},
      {"1:2", {0.700, 0.531, 0.535}},
      {"raw", {0.698, 0.510, 0.510}},
      {"columns", {"M_orig", "M_avg", "M_test"}}};
  ws.write_report("recombine", r);
  return r;
}

inline std::string alpha_label(double a) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "alpha=%g", a);
  return buf;
}

// dx - alpha * P_nr(dx) over the alpha grid, on M_orig and M_avg; the
// per-alpha (M_orig - M_avg) difference is stored in metadata.
inline TransferReport run_alpha_sweep(Workspace& ws) {
  const auto& cfg = ws.config();
  const auto c = in_stage("alpha experiment: train", [&] { return noise_cohort(ws); });
  const auto d = noise_decomposition(ws, c, cfg.attack, "noise");
  std::vector<Perturbation> res;
  for (double a : cfg.sweeps.alpha) res.push_back(alpha_residual(d.dx, d.dx_nr, a));
  std::vector<LabeledPerturbation> lp{{"raw", &d.dx.delta}, {"nr", &d.dx_nr.delta}};
  for (std::size_t i = 0; i < res.size(); ++i) lp.push_back({alpha_label(cfg.sweeps.alpha[i]), &res[i].delta});
  ModelCohort groups;
  groups.add_group("M_orig", c.orig);
  groups.add_group("M_avg", c.avg);
  const auto& ev = ws.eval_set();
  TransferReport r = in_stage("alpha experiment: evaluate", [&] {
    return transfer_table(groups, lp, ev.inputs, ev.labels, cfg.fooling_mode, cfg.jobs);
  });
  nlohmann::json diffs = nlohmann::json::array();
  for (const auto& p : lp)
    diffs.push_back({{"kind", p.label}, {"difference", round4(r.value(p.label, "M_orig") - r.value(p.label, "M_avg"))}});
  r.metadata.update(ws.provenance("alpha", concat_models({c.orig, c.avg})));
  r.metadata["groups"] = {{"M_orig", tags_of(c.orig)}, {"M_avg", tags_of(c.avg)}};
  r.metadata["alpha"] = cfg.sweeps.alpha;
  r.metadata["difference"] = diffs;
  r.metadata["reference_full_scale"] = {
      {"description", "ResNet18 cohort on CIFAR-10, M_orig - M_avg in points; not asserted"},
      {"difference", {{"raw", 22.7}, {"nr", 1.8}, {"0.1", 24.5}, {"0.5", 34.3}, {"0.8", 38.3}, {"1.0", 36.1},
                      {"1.2", 40.6}, {"1.5", 33.5}, {"2.0", 26.3}}}};
  ws.write_report("alpha", r);
  return r;
}

// For each source architecture: dx_nr on its source copies, dx_data from the
// other architectures' source copies, evaluated on both held-out sets.
inline TransferReport run_arch_experiment(Workspace& ws) {
  const auto& cfg = ws.config();
  if (cfg.architectures.size() < 2)
    throw ConfigError("experiment", "the architecture experiment needs at least 2 architectures");
  const std::size_t ns = cfg.arch.source_copies, nt = cfg.arch.test_copies;
  std::map<std::string, std::vector<const ModelInstance*>> role, held;
  in_stage("arch experiment: train", [&] {
    std::vector<std::pair<std::string, std::size_t>> want;
    for (const auto& a : cfg.architectures)
      for (std::size_t c = 0; c < ns + nt; ++c) want.emplace_back(a, c);
    ws.ensure(want);
    for (const auto& a : cfg.architectures) {
      role[a] = ws.models(a, 0, ns);
      held[a] = ws.models(a, ns, nt);
    }
    return 0;
  });
  const auto& ev = ws.eval_set();
  TransferReport out;
  out.mode = cfg.fooling_mode;
  nlohmann::json margins = nlohmann::json::object(), groups = nlohmann::json::object();
  double arch_sum = 0.0, data_sum = 0.0;
  std::vector<const ModelInstance*> everyone;
  for (const auto& a : cfg.architectures) everyone = concat_models({everyone, role[a], held[a]});
  for (const auto& src : cfg.architectures) {
    const std::string ctx = "arch experiment (source " + src + ")";
    std::vector<const ModelInstance*> other_role, other_held;
    std::vector<EnsembleTarget> others;
    for (const auto& a : cfg.architectures) {
      if (a == src) continue;
      other_role = concat_models({other_role, role[a]});
      other_held = concat_models({other_held, held[a]});
      others.emplace_back(role[a]);
    }
    const ArchDecomposition d = in_stage(ctx + ": decompose", [&] {
      Perturbation nr = ifgsm(EnsembleTarget(role[src]), ev.inputs, ev.labels, cfg.attack, nullptr, cfg.attack_options());
      return decompose_arch_data(others, nr, ev.inputs, ev.labels, cfg.attack, cfg.attack_options());
    });
    write_decomposition(ws.dir("perturbations"), "arch_" + src, d);
    ModelCohort cohort;
    cohort.add_group("M_source", role[src]);
    cohort.add_group("M_other", other_role);
    cohort.add_group("M'_source", held[src]);
    cohort.add_group("M'_other", other_held);
    cohort.check_disjoint();
    const TransferReport r = in_stage(ctx + ": evaluate", [&] {
      return transfer_table(cohort,
                            {{src + "/nr", &d.dx_nr.delta}, {src + "/data", &d.dx_data.delta}, {src + "/arch", &d.dx_arch.delta}},
                            ev.inputs, ev.labels, cfg.fooling_mode, cfg.jobs);
    });
    out.rows.insert(out.rows.end(), r.rows.begin(), r.rows.end());
    const double am = r.value(src + "/arch", "M'_source") - r.value(src + "/arch", "M'_other");
    const double dm = r.value(src + "/data", "M'_source") - r.value(src + "/data", "M'_other");
    arch_sum += am;
    data_sum += dm;
    margins[src] = {{"arch", round4(am)}, {"data", round4(dm)}, {"degenerate_examples", d.degenerate_count()}};
    groups[src] = {{"M_source", tags_of(role[src])}, {"M_other", tags_of(other_role)},
                   {"M'_source", tags_of(held[src])}, {"M'_other", tags_of(other_held)}};
  }
  const double k = static_cast<double>(cfg.architectures.size());
  out.metadata["metric"] = metric_name(cfg.fooling_mode);
  out.metadata["examples"] = ev.size();
  out.metadata.update(ws.provenance("arch", everyone));
  out.metadata["architectures"] = cfg.architectures;
  out.metadata["groups"] = groups;
  out.metadata["margins"] = margins;  // M'_source - M'_other
  out.metadata["mean_arch_margin"] = round4(arch_sum / k);
  out.metadata["mean_data_margin"] = round4(data_sum / k);
  out.metadata["reference_full_scale"] = {
      {"description", "ResNet18 source on CIFAR-10; columns M_source, M_other, M'_source, M'_other; not asserted"},
      {"nr", {0.609, 0.507, 0.594, 0.507}},
      {"data", {0.546, 0.614, 0.548, 0.608}},
      {"arch", {0.524, 0.267, 0.369, 0.303}}};
  ws.write_report("arch", out);
  return out;
}

struct SweepReports {
  std::vector<std::pair<std::string, TransferReport>> reports;  // name -> report
  nlohmann::ordered_json convergence;
};

inline std::string grid_name(const char* axis, double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%s=%g", axis, v);
  return buf;
}

// Noise experiment repeated over the epsilon, iteration and model-count
// grids (one report each), plus the direction-convergence diagnostic.
inline SweepReports run_hyper_sweeps(Workspace& ws) {
  const auto& cfg = ws.config();
  SweepReports out;
  const auto base = in_stage("sweeps: train", [&] { return noise_cohort(ws); });
  auto point = [&](const std::string& name, const NoiseCohort& c, const AttackConfig& ac) {
    // The grid point matching the base setting shares the noise archives.
    const bool is_base = ac.to_json() == cfg.attack.to_json() && c.avg.size() == cfg.noise.average_copies;
    const auto d = noise_decomposition(ws, c, ac, is_base ? "noise" : "sweep_" + name);
    TransferReport r = in_stage("sweeps (" + name + "): evaluate", [&] { return noise_table(ws, c, d, ac, "sweeps/" + name); });
    ws.write_report("sweeps/" + name, r);
    out.reports.emplace_back(name, std::move(r));
  };
  for (double e : cfg.sweeps.epsilon) {
    AttackConfig ac = cfg.attack;
    ac.epsilon = e;
    point(grid_name("epsilon", e), base, ac);
  }
  for (std::size_t it : cfg.sweeps.iterations) {
    AttackConfig ac = cfg.attack;
    ac.iterations = it;
    point(grid_name("iterations", static_cast<double>(it)), base, ac);
  }
  for (std::size_t m : cfg.sweeps.models) point(grid_name("models", static_cast<double>(m)), noise_cohort(ws, m - 1), cfg.attack);

  // Single-model attack directions on the attack + average copies.
  const auto& ev = ws.eval_set();
  const auto pool = concat_models({base.orig, base.avg});
  std::vector<Tensor> dirs(pool.size());
  in_stage("sweeps: convergence", [&] {
    AttackOptions opts = cfg.attack_options();
    opts.jobs = 1;
    parallel_for(pool.size(), cfg.jobs, [&](std::size_t i) {
      dirs[i] = ifgsm(*pool[i], ev.inputs, ev.labels, cfg.attack, nullptr, opts).delta;
    });
    return 0;
  });
  const auto dist = direction_convergence(dirs, cfg.sweeps.convergence);
  nlohmann::ordered_json conv;
  conv["diagnostic"] = "mean over examples of ||g(n) - g(N)||, g(k) = mean of k unit single-model attack directions";
  conv["N"] = pool.size();
  conv["examples"] = ev.size();
  conv["models"] = tags_of(pool);
  conv["grid"] = cfg.sweeps.convergence;
  nlohmann::ordered_json vals = nlohmann::ordered_json::array();
  for (double v : dist) vals.push_back(round4(v));
  conv["distance"] = vals;
  const auto prov = ws.provenance("sweeps/convergence", pool);
  conv["provenance"] = nlohmann::ordered_json::parse(prov.dump());
  write_text(ws.dir("reports") / "sweeps" / "convergence.json", conv.dump(2) + "\n");
  out.convergence = std::move(conv);
  return out;
}

}  // namespace advdecomp
