// advdecomp command-line driver.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "advdecomp/experiment.hpp"

namespace fs = std::filesystem;
using namespace advdecomp;

namespace {

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  std::optional<std::size_t> jobs;
};

ExperimentConfig resolve_config(const Globals& g) {
  ExperimentConfig cfg = g.config_path.empty() ? ExperimentConfig{} : load_config(g.config_path);
  if (g.seed) cfg.seed = *g.seed;
  if (g.out_dir) cfg.out_dir = *g.out_dir;
  if (g.jobs) cfg.jobs = *g.jobs;
  cfg.validate();
  return cfg;
}

std::unique_ptr<Workspace> open_workspace(const Globals& g) {
  auto ws = std::make_unique<Workspace>(resolve_config(g));
  ws->log = [](const std::string& s) { std::cerr << s << '\n'; };
  return ws;
}

ReportFormat parse_format(const std::string& f) { return f == "json" ? ReportFormat::Json : ReportFormat::Csv; }

void print_report(const TransferReport& r, const std::string& format) {
  if (format == "table")
    std::cout << format_table(r);
  else
    std::cout << emit_report(r, parse_format(format));
}

std::vector<const ModelInstance*> keep(std::vector<ModelInstance>& store, const std::vector<std::string>& paths) {
  store.reserve(store.size() + paths.size());
  std::vector<const ModelInstance*> out;
  for (const auto& p : paths) {
    store.push_back(read_checkpoint(p));
    out.push_back(&store.back());
  }
  return out;
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

std::pair<std::string, std::string> split_assign(const std::string& s, const char* what) {
  const auto eq = s.find('=');
  if (eq == std::string::npos || eq == 0 || eq + 1 == s.size())
    throw ConfigError("cli", std::string(what) + " must be NAME=VALUE (got '" + s + "')");
  return {s.substr(0, eq), s.substr(eq + 1)};
}

std::string read_text(const fs::path& p) {
  const auto b = io::read_file(p, "report");
  return {b.begin(), b.end()};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Decompose adversarial perturbations into model-specific and transferable components."};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config_path, "JSON experiment config")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "global seed (overrides config)");
  app.add_option("--out-dir", g.out_dir, "output directory (overrides config)");
  app.add_option("--jobs", g.jobs, "parallel jobs (overrides config)")->check(CLI::PositiveNumber);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "write the configured dataset as IDX files under <out-dir>/data");

  // train-cohort
  auto* tc = app.add_subcommand("train-cohort", "train (or reuse) copies of the configured architectures");
  std::vector<std::string> tc_arch;
  std::size_t tc_copies = 0;
  tc->add_option("--arch", tc_arch, "architecture ids (default: config architectures)");
  tc->add_option("--copies", tc_copies, "copies per architecture (default: arch source + test copies)");

  // attack
  auto* at = app.add_subcommand("attack", "iFGSM on one checkpoint or an ensemble of checkpoints");
  std::vector<std::string> at_ck;
  std::string at_out, at_warm;
  std::optional<double> at_eps;
  std::optional<std::size_t> at_iters;
  at->add_option("--checkpoint", at_ck, "model checkpoint(s); several form a mean-loss ensemble")->required();
  at->add_option("--out", at_out, "output perturbation archive")->required();
  at->add_option("--warm-start", at_warm, "perturbation archive to start from")->check(CLI::ExistingFile);
  at->add_option("--epsilon", at_eps, "L-infinity budget");
  at->add_option("--iterations", at_iters, "iFGSM iterations");

  // decompose
  auto* dc = app.add_subcommand("decompose", "split perturbations into components");
  dc->require_subcommand(1);
  auto* dcn = dc->add_subcommand("noise", "dx -> (dx_nr, dx_noise)");
  std::string dcn_raw, dcn_nr, dc_prefix = "cli";
  std::vector<std::string> dcn_ck;
  dcn->add_option("--raw", dcn_raw, "raw perturbation archive")->check(CLI::ExistingFile);
  dcn->add_option("--nr", dcn_nr, "noise-reduced perturbation archive")->check(CLI::ExistingFile);
  dcn->add_option("--checkpoint", dcn_ck, "checkpoints: the first is attacked, the rest are averaged");
  dcn->add_option("--prefix", dc_prefix, "archive name prefix under <out-dir>/perturbations");
  auto* dca = dc->add_subcommand("arch", "dx_nr -> (dx_data, dx_arch)");
  std::string dca_nr;
  std::vector<std::string> dca_other;
  dca->add_option("--nr", dca_nr, "noise-reduced perturbation archive")->required()->check(CLI::ExistingFile);
  dca->add_option("--other", dca_other, "comma-separated checkpoints of one other architecture (repeatable)")
      ->required();
  dca->add_option("--prefix", dc_prefix, "archive name prefix under <out-dir>/perturbations");

  // recombine
  auto* rc = app.add_subcommand("recombine", "sign-maximized recombination of noise and nr components");
  std::string rc_noise, rc_nr, rc_prefix = "cli";
  std::vector<std::string> rc_ratios;
  std::optional<double> rc_eps;
  rc->add_option("--noise", rc_noise, "noise component archive")->required()->check(CLI::ExistingFile);
  rc->add_option("--nr", rc_nr, "noise-reduced component archive")->required()->check(CLI::ExistingFile);
  rc->add_option("--ratio", rc_ratios, "b:a weights on unit(nr):unit(noise)")->required();
  rc->add_option("--epsilon", rc_eps, "sign-maximization budget (default: config epsilon)");
  rc->add_option("--prefix", rc_prefix, "archive name prefix under <out-dir>/perturbations");

  // eval
  auto* ev = app.add_subcommand("eval", "fooling ratios of perturbations on groups of checkpoints");
  std::vector<std::string> ev_pert, ev_group;
  std::string ev_format = "csv", ev_mode, ev_out;
  ev->add_option("--perturbation", ev_pert, "LABEL=archive (repeatable)")->required();
  ev->add_option("--group", ev_group, "NAME=ck1,ck2,... (repeatable)")->required();
  ev->add_option("--format", ev_format, "csv | json | table")->check(CLI::IsMember({"csv", "json", "table"}));
  ev->add_option("--mode", ev_mode, "label_change | misclassification")
      ->check(CLI::IsMember({"label_change", "misclassification"}));
  ev->add_option("--out", ev_out, "also write the report here");

  // experiment
  auto* ex = app.add_subcommand("experiment", "run a full experiment");
  std::string ex_name, ex_format = "table";
  ex->add_option("name", ex_name, "noise | recombine | arch | alpha | sweeps | all")
      ->required()
      ->check(CLI::IsMember({"noise", "recombine", "arch", "alpha", "sweeps", "all"}));
  ex->add_option("--format", ex_format, "csv | json | table")->check(CLI::IsMember({"csv", "json", "table"}));

  // report
  auto* rp = app.add_subcommand("report", "re-emit a saved report");
  std::string rp_path, rp_format = "table";
  rp->add_option("path", rp_path, "report.csv or report.json")->required()->check(CLI::ExistingFile);
  rp->add_option("--format", rp_format, "csv | json | table")->check(CLI::IsMember({"csv", "json", "table"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*gen) {
      const ExperimentConfig cfg = resolve_config(g);
      const DataBundle data = load_data(cfg.dataset);
      const fs::path dir = fs::path(cfg.out_dir) / "data";
      for (const auto* d : {&data.train, &data.test}) {
        const auto [img, lab] = encode_idx(*d);
        const std::string s = split_name(d->split);
        io::write_file(dir / (s + "-images.idx"), img);
        io::write_file(dir / (s + "-labels.idx"), lab);
        std::cout << (dir / (s + "-images.idx")).string() << '\n' << (dir / (s + "-labels.idx")).string() << '\n';
      }
    } else if (*tc) {
      auto ws = open_workspace(g);
      const auto& cfg = ws->config();
      if (tc_arch.empty()) tc_arch = cfg.architectures;
      if (tc_copies == 0) tc_copies = cfg.arch.source_copies + cfg.arch.test_copies;
      std::vector<std::pair<std::string, std::size_t>> want;
      for (const auto& a : tc_arch)
        for (std::size_t c = 0; c < tc_copies; ++c) want.emplace_back(a, c);
      ws->ensure(want);
      for (const auto& a : tc_arch)
        for (const auto* m : ws->models(a, 0, tc_copies))
          std::printf("%-10s seed %-20llu test_accuracy %.4f\n", m->arch_id().c_str(),
                      static_cast<unsigned long long>(m->init_seed), m->fingerprint.test_accuracy);
      std::printf("trained %zu, reused %zu\n", ws->trained_count(), ws->reused_count());
    } else if (*at) {
      ExperimentConfig cfg = resolve_config(g);
      if (at_eps) cfg.attack.epsilon = *at_eps;
      if (at_iters) cfg.attack.iterations = *at_iters;
      cfg.attack.validate();
      const DataBundle data = load_data(cfg.dataset);
      std::vector<ModelInstance> store;
      const auto ms = keep(store, at_ck);
      std::optional<Perturbation> warm;
      if (!at_warm.empty()) warm = read_perturbation(at_warm);
      const Perturbation p = ifgsm(EnsembleTarget(ms), data.eval.inputs, data.eval.labels, cfg.attack,
                                   warm ? &warm->delta : nullptr, cfg.attack_options(), at_warm);
      write_perturbation(at_out, p);
      std::cout << at_out << '\n';
    } else if (*dcn) {
      auto ws = open_workspace(g);
      const auto& cfg = ws->config();
      NoiseDecomposition d;
      if (!dcn_raw.empty() || !dcn_nr.empty()) {
        if (dcn_raw.empty() || dcn_nr.empty()) throw ConfigError("cli", "decompose noise: --raw and --nr go together");
        d = split_noise(read_perturbation(dcn_raw), read_perturbation(dcn_nr));
      } else {
        if (dcn_ck.size() < 2) throw ConfigError("cli", "decompose noise: pass --raw/--nr or at least 2 --checkpoint");
        std::vector<ModelInstance> store;
        const auto ms = keep(store, dcn_ck);
        d = decompose_noise(ms, ws->eval_set().inputs, ws->eval_set().labels, cfg.attack, cfg.attack_options());
      }
      write_decomposition(ws->dir("perturbations"), dc_prefix, d);
      std::printf("mean_a %.6f mean_b %.6f degenerate %zu\n", d.coeffs.mean_a(), d.coeffs.mean_b(),
                  d.coeffs.degenerate_count());
    } else if (*dca) {
      auto ws = open_workspace(g);
      const auto& cfg = ws->config();
      std::vector<ModelInstance> store;
      std::size_t total = 0;
      for (const auto& grp : dca_other) total += split_commas(grp).size();
      store.reserve(total);
      std::vector<EnsembleTarget> others;
      for (const auto& grp : dca_other) others.emplace_back(keep(store, split_commas(grp)));
      const Perturbation nr = read_perturbation(dca_nr);
      const auto d = decompose_arch_data(others, nr, ws->eval_set().inputs, ws->eval_set().labels, cfg.attack,
                                         cfg.attack_options());
      write_decomposition(ws->dir("perturbations"), dc_prefix, d);
      std::printf("degenerate %zu\n", d.degenerate_count());
    } else if (*rc) {
      const ExperimentConfig cfg = resolve_config(g);
      const Perturbation noise = read_perturbation(rc_noise), nr = read_perturbation(rc_nr);
      const double eps = rc_eps.value_or(cfg.attack.epsilon);
      for (const auto& s : rc_ratios) {
        const Ratio r = parse_ratio(s);
        std::string tag = r.label;
        for (char& c : tag)
          if (c == ':') c = '-';
        const fs::path out = fs::path(cfg.out_dir) / "perturbations" / (rc_prefix + "_" + tag + ".advp");
        write_perturbation(out, recombine(noise.delta, nr.delta, r.b, r.a, eps));
        std::cout << out.string() << '\n';
      }
    } else if (*ev) {
      ExperimentConfig cfg = resolve_config(g);
      if (ev_mode == "misclassification") cfg.fooling_mode = FoolingMode::Misclassification;
      if (ev_mode == "label_change") cfg.fooling_mode = FoolingMode::LabelChange;
      const DataBundle data = load_data(cfg.dataset);
      std::vector<Perturbation> perts;
      std::vector<std::string> labels;
      for (const auto& s : ev_pert) {
        auto [label, path] = split_assign(s, "--perturbation");
        labels.push_back(label);
        perts.push_back(read_perturbation(path));
      }
      std::size_t total = 0;
      for (const auto& s : ev_group) total += split_commas(split_assign(s, "--group").second).size();
      std::vector<ModelInstance> store;
      store.reserve(total);
      ModelCohort cohort;
      std::vector<const ModelInstance*> all;
      for (const auto& s : ev_group) {
        auto [name, list] = split_assign(s, "--group");
        auto ms = keep(store, split_commas(list));
        all.insert(all.end(), ms.begin(), ms.end());
        cohort.add_group(name, ms);
      }
      std::vector<LabeledPerturbation> lp;
      for (std::size_t i = 0; i < perts.size(); ++i) lp.push_back({labels[i], &perts[i].delta});
      TransferReport r = transfer_table(cohort, lp, data.eval.inputs, data.eval.labels, cfg.fooling_mode, cfg.jobs);
      std::string acc;
      for (const auto* m : all) acc += m->tag() + "=" + hash_bytes(save_checkpoint(*m)) + ";";
      r.metadata["cohort_hash"] = hash_text(acc);
      r.metadata["config_hash"] = cfg.hash();
      r.metadata["code_version"] = kCodeVersion;
      if (!ev_out.empty()) write_text(ev_out, emit_report(r, fs::path(ev_out).extension() == ".json" ? ReportFormat::Json : ReportFormat::Csv));
      print_report(r, ev_format);
    } else if (*ex) {
      auto ws = open_workspace(g);
      auto run = [&](const std::string& name) {
        if (name == "noise") {
          print_report(run_noise_experiment(*ws), ex_format);
        } else if (name == "recombine") {
          print_report(run_recombination_sweep(*ws), ex_format);
        } else if (name == "alpha") {
          print_report(run_alpha_sweep(*ws), ex_format);
        } else if (name == "arch") {
          print_report(run_arch_experiment(*ws), ex_format);
        } else {
          const auto s = run_hyper_sweeps(*ws);
          for (const auto& [n, r] : s.reports) {
            std::cout << "== " << n << '\n';
            print_report(r, ex_format);
          }
          std::cout << "== convergence\n" << s.convergence.dump(2) << '\n';
        }
      };
      if (ex_name == "all") {
        for (const char* n : {"noise", "recombine", "alpha", "arch", "sweeps"}) {
          std::cout << "### " << n << '\n';
          run(n);
        }
      } else {
        run(ex_name);
      }
    } else if (*rp) {
      const std::string text = read_text(rp_path);
      const TransferReport r = fs::path(rp_path).extension() == ".json" ? parse_json_report(text) : parse_csv_report(text);
      print_report(r, rp_format);
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: [internal] " << e.what() << '\n';
    return 1;
  }
  return 0;
}
