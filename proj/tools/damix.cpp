// damix: synthetic data generation, two-stage training runs, the invariant
// suite and report emission.
//
// Exit codes: 0 success, 1 config error, 2 runtime abort, 3 verification
// failure.

#include <CLI11.hpp>

#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "damix/config.hpp"
#include "damix/errors.hpp"
#include "damix/numerics/tensor_io.hpp"
#include "damix/run.hpp"
#include "damix/verify/suite.hpp"

namespace fs = std::filesystem;

namespace {

enum Exit { ok = 0, config_error = 1, runtime_abort = 2, verification_failure = 3 };

damix::ExperimentConfig load_config(const std::string& path, std::optional<std::uint64_t> seed, bool benchmark) {
  const damix::ExperimentConfig base =
      benchmark ? damix::ExperimentConfig::benchmark() : damix::ExperimentConfig::defaults();
  damix::ExperimentConfig cfg = path.empty() ? base : damix::ExperimentConfig::from_file(damix::ConfigFile::load(path), base);
  if (seed) cfg.seed = *seed;
  cfg.validate();
  return cfg;
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t comma = std::min(text.find(',', pos), text.size());
    const std::string item = text.substr(pos, comma - pos);
    try {
      std::size_t used = 0;
      out.push_back(std::stoull(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw damix::ConfigError("bad seed list '" + text + "'");
    }
    pos = comma + 1;
  }
  return out;
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw damix::IoError("cannot write " + path.string());
}

damix::Tensor ints_as_tensor(const std::vector<int>& v) {
  std::vector<double> d(v.begin(), v.end());
  return damix::Tensor({v.size()}, std::move(d));
}

int cmd_run(const std::string& config_path, const std::string& stage, std::optional<std::uint64_t> seed,
            const std::optional<fs::path>& out, bool ablation, const std::string& seeds, bool benchmark) {
  const damix::ExperimentConfig cfg = load_config(config_path, seed, benchmark);
  damix::RunOptions opt;
  opt.stage = stage == "pretrain" ? damix::StageSelect::pretrain : damix::StageSelect::all;
  opt.out_root = damix::output_root(out);

  if (ablation) {
    const std::vector<std::uint64_t> list = seeds.empty() ? std::vector<std::uint64_t>{cfg.seed} : parse_seeds(seeds);
    const auto rows = damix::run_ablation(cfg, list, opt);
    const fs::path csv = opt.out_root / ("ablation-" + cfg.hash() + ".csv");
    damix::write_ablation_csv(csv, rows);
    bool all_ok = true;
    for (const auto& r : rows) {
      std::cout << "seed " << r.seed << "  " << r.variant << "  rank1 " << damix::format_number(r.rank1) << "  mAP "
                << damix::format_number(r.mean_ap) << (r.ok ? "" : "  FAILED") << "\n";
      all_ok = all_ok && r.ok;
    }
    std::cout << "wrote " << csv.string() << "\n";
    return all_ok ? ok : runtime_abort;
  }

  const damix::RunResult res = damix::run_experiment(cfg, opt);
  const auto& m = res.manifest;
  for (const auto& w : res.log.warnings) std::cerr << "warning: " << w << "\n";
  if (!m.ok()) {
    std::cerr << "run failed in stage " << m.failed_stage << ": " << m.diagnostic << "\n";
    std::cerr << "manifest: " << (m.dir / "manifest.json").string() << "\n";
    return runtime_abort;
  }
  if (!res.log.epochs.empty() && res.log.epochs.back().evaluated) {
    const auto& r = res.log.epochs.back().metrics.retrieval;
    std::cout << m.variant << "  mAP " << damix::format_number(r.mean_ap) << "  rank1 " << damix::format_number(r.rank(1))
              << "\n";
  }
  std::cout << "manifest: " << (m.dir / "manifest.json").string() << "\n";
  return ok;
}

int cmd_verify(bool full, const std::string& scratch_flag) {
  const fs::path scratch = scratch_flag.empty() ? fs::temp_directory_path() / "damix_verify" : fs::path(scratch_flag);
  fs::remove_all(scratch);
  fs::create_directories(scratch);
  std::vector<damix::verify::CriterionReport> reports = damix::verify::invariant_suite(scratch);
  if (full) {
    const std::vector<std::uint64_t> seeds{0, 1, 2};
    auto ab = damix::verify::ablation(damix::ExperimentConfig::benchmark(), seeds);
    reports.push_back(std::move(ab.directional));
    reports.push_back(std::move(ab.domain_gap));
  }
  bool all = true;
  for (const auto& r : reports) {
    std::cout << damix::verify::format(r);
    all = all && r.passed();
  }
  fs::remove_all(scratch);
  return all ? ok : verification_failure;
}

int cmd_report(const std::vector<std::string>& manifests, const std::string& format, const std::string& out) {
  std::vector<damix::RunManifest> list;
  for (const auto& p : manifests) list.push_back(damix::RunManifest::read(p));
  const std::string text =
      damix::build_report(list, format == "json" ? damix::ReportFormat::json : damix::ReportFormat::csv);
  if (out.empty()) {
    std::cout << text;
  } else {
    write_file(out, text);
  }
  return ok;
}

int cmd_gen_data(const std::string& config_path, std::optional<std::uint64_t> seed, const std::optional<fs::path>& out,
                 bool benchmark) {
  const damix::ExperimentConfig cfg = load_config(config_path, seed, benchmark);
  const damix::pipeline::SyntheticData data = damix::make_data(cfg);
  const fs::path dir = damix::output_root(out) / ("data-" + damix::run_dir_name(cfg));
  damix::TensorArchive ar;
  std::string summary = "domain,role,samples,identities\n";
  for (const auto& ds : data.domains) {
    const std::string p = "domain" + std::to_string(ds.domain);
    ar.put(p + ".inputs", ds.inputs);
    ar.put(p + ".labels", ints_as_tensor(ds.labels));
    ar.put(p + ".identities", ints_as_tensor(ds.identities));
    const std::set<int> ids(ds.identities.begin(), ds.identities.end());
    summary += std::to_string(ds.domain) + "," + (ds.role == damix::pipeline::Role::source ? "source" : "target") + "," +
               std::to_string(ds.size()) + "," + std::to_string(ids.size()) + "\n";
  }
  ar.put("eval.query", data.eval.query);
  ar.put("eval.query_ids", ints_as_tensor(data.eval.query_ids));
  ar.put("eval.gallery", data.eval.gallery);
  ar.put("eval.gallery_ids", ints_as_tensor(data.eval.gallery_ids));
  ar.set_meta("eval.domain", std::to_string(data.eval.domain));
  ar.save(dir);
  write_file(dir / "domains.csv", summary);
  write_file(dir / "config.toml", cfg.canonical());
  std::cout << "wrote " << dir.string() << "\n";
  return ok;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"damix: domain-adaptive re-identification experiments on synthetic data"};
  app.require_subcommand(1);

  std::string config_path, stage = "all", seeds, format = "csv", report_out, scratch;
  std::optional<std::uint64_t> seed;
  std::optional<fs::path> out;
  bool ablation = false, full = false, benchmark = false;
  std::vector<std::string> manifests;

  CLI::App* run = app.add_subcommand("run", "generate data, pretrain, adapt and evaluate");
  run->add_option("config", config_path, "experiment config (sectioned key = value)");
  run->add_option("--stage", stage, "stop after this stage")->check(CLI::IsMember({"pretrain", "all"}));
  run->add_option("--seed", seed, "override the config seed");
  run->add_option("--out", out, "output root (default $DAMIX_OUT or ./runs)");
  run->add_flag("--ablation", ablation, "run all six normalization x fusion variants");
  run->add_option("--seeds", seeds, "comma-separated seeds for --ablation");
  run->add_flag("--benchmark", benchmark, "start from the benchmark settings instead of the full-scale defaults");

  CLI::App* verify = app.add_subcommand("verify", "run the invariant and gradient suite");
  verify->add_flag("--full", full, "also run the three-seed ablation benchmark");
  verify->add_option("--scratch", scratch, "scratch directory for throwaway runs");

  CLI::App* report = app.add_subcommand("report", "per-epoch metrics of one or more runs");
  report->add_option("manifests", manifests, "manifest.json files or run directories")->required();
  report->add_option("--format", format, "csv or json")->check(CLI::IsMember({"csv", "json"}));
  report->add_option("--out", report_out, "write to this file instead of stdout");

  CLI::App* gen = app.add_subcommand("gen-data", "write the synthetic datasets of a config");
  gen->add_option("config", config_path, "experiment config");
  gen->add_option("--seed", seed, "override the config seed");
  gen->add_option("--out", out, "output root (default $DAMIX_OUT or ./runs)");
  gen->add_flag("--benchmark", benchmark, "start from the benchmark settings");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? ok : config_error;
  }

  try {
    if (*run) return cmd_run(config_path, stage, seed, out, ablation, seeds, benchmark);
    if (*verify) return cmd_verify(full, scratch);
    if (*report) return cmd_report(manifests, format, report_out);
    if (*gen) return cmd_gen_data(config_path, seed, out, benchmark);
  } catch (const damix::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return config_error;
  } catch (const damix::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return runtime_abort;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return runtime_abort;
  }
  return ok;
}
