#include "damix/run.hpp"

#include <charconv>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "damix/errors.hpp"
#include "damix/numerics/random.hpp"
#include "damix/numerics/tensor_io.hpp"

namespace damix {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

std::string format_number(double v) {
  char buf[32];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

fs::path output_root(const std::optional<fs::path>& flag) {
  if (flag && !flag->empty()) return *flag;
  if (const char* env = std::getenv("DAMIX_OUT"); env != nullptr && *env != '\0') return env;
  return "runs";
}

std::string variant_name(const pipeline::ModelConfig& model) {
  return std::string(norm::to_string(model.norm)) + (model.use_mdif ? "+mdif" : "");
}

std::string run_dir_name(const ExperimentConfig& config) {
  return config.hash() + "-s" + std::to_string(config.seed);
}

RunSeeds RunSeeds::from(std::uint64_t seed) {
  return {mix_seed(seed, 1), mix_seed(seed, 2), mix_seed(seed, 3), mix_seed(seed, 4)};
}

pipeline::SyntheticData make_data(const ExperimentConfig& config) {
  pipeline::SyntheticSpec spec = config.data;
  spec.seed = RunSeeds::from(config.seed).data;
  return pipeline::generate_synthetic(spec);
}

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string train_log_csv(const pipeline::TrainLog& log) {
  std::string out = "stage,epoch,iter,lr,id,id_mdif,triplet,total\n";
  for (const auto& s : log.steps) {
    out += s.stage + "," + std::to_string(s.epoch) + "," + std::to_string(s.iter) + "," + format_number(s.lr) + "," +
           format_number(s.id) + "," + format_number(s.id_mdif) + "," + format_number(s.triplet) + "," +
           format_number(s.total) + "\n";
  }
  return out;
}

std::vector<std::pair<std::size_t, std::size_t>> domain_pairs(std::size_t n) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = a + 1; b < n; ++b) out.emplace_back(a, b);
  return out;
}

std::string metrics_csv(const pipeline::TrainLog& log) {
  std::vector<int> domains;
  for (const auto& e : log.epochs) {
    if (e.evaluated) {
      domains = e.metrics.gap.distances.domains;
      break;
    }
  }
  std::string out = "epoch,num_clusters,noise,mAP,rank1,rank5,rank10";
  for (auto [a, b] : domain_pairs(domains.size())) {
    out += ",dist_" + std::to_string(domains[a]) + "_" + std::to_string(domains[b]);
  }
  out += ",inter_combined,intra_combined\n";
  for (const auto& e : log.epochs) {
    if (!e.evaluated) continue;
    const auto& r = e.metrics.retrieval;
    out += std::to_string(e.epoch) + "," + std::to_string(e.num_clusters) + "," + std::to_string(e.noise) + "," +
           format_number(r.mean_ap) + "," + format_number(r.rank(1)) + "," + format_number(r.rank(5)) + "," +
           format_number(r.rank(10));
    for (auto [a, b] : domain_pairs(domains.size())) out += "," + format_number(e.metrics.gap.distances.distance.at(a, b));
    out += "," + format_number(e.metrics.gap.interclass_combined) + "," + format_number(e.metrics.gap.intraclass_combined) + "\n";
  }
  return out;
}

std::string distances_csv(const pipeline::TrainLog& log) {
  std::string out = "epoch,domain_a,domain_b,distance\n";
  for (const auto& e : log.epochs) {
    if (!e.evaluated) continue;
    const auto& d = e.metrics.gap.distances;
    for (std::size_t a = 0; a < d.domains.size(); ++a) {
      for (std::size_t b = 0; b < d.domains.size(); ++b) {
        out += std::to_string(e.epoch) + "," + std::to_string(d.domains[a]) + "," + std::to_string(d.domains[b]) + "," +
               format_number(d.distance.at(a, b)) + "\n";
      }
    }
  }
  return out;
}

json metrics_json(const pipeline::TrainLog& log) {
  json epochs = json::array();
  for (const auto& e : log.epochs) {
    if (!e.evaluated) continue;
    const auto& r = e.metrics.retrieval;
    const auto& g = e.metrics.gap;
    json dist = json::array();
    for (std::size_t a = 0; a < g.distances.domains.size(); ++a) {
      json row = json::array();
      for (std::size_t b = 0; b < g.distances.domains.size(); ++b) row.push_back(g.distances.distance.at(a, b));
      dist.push_back(row);
    }
    json inter = json::object(), intra = json::object();
    for (const auto& [d, v] : g.interclass) inter[std::to_string(d)] = v;
    for (const auto& [d, v] : g.intraclass) intra[std::to_string(d)] = v;
    epochs.push_back({{"epoch", e.epoch},
                      {"num_clusters", e.num_clusters},
                      {"noise", e.noise},
                      {"mAP", r.mean_ap},
                      {"rank1", r.rank(1)},
                      {"rank5", r.rank(5)},
                      {"rank10", r.rank(10)},
                      {"domains", g.distances.domains},
                      {"domain_distance", dist},
                      {"interclass", inter},
                      {"intraclass", intra},
                      {"interclass_combined", g.interclass_combined},
                      {"intraclass_combined", g.intraclass_combined}});
  }
  return {{"epochs", epochs}, {"warnings", log.warnings}};
}

void save_model(const pipeline::ReidModel& model, const fs::path& dir) {
  TensorArchive ar;
  model.save(ar);
  ar.save(dir);
}

}  // namespace

void RunManifest::write() const {
  std::vector<std::string> files;
  for (const auto& s : stages) files.push_back(s.checkpoint + "/manifest.json");
  for (const auto& [k, v] : reports) files.push_back(v);
  for (const auto& p : pseudo_labels) files.push_back(p);
  for (const auto& f : files) {
    if (!fs::exists(dir / f)) throw IoError("run manifest references missing file " + (dir / f).string());
  }
  json stages_json = json::array();
  for (const auto& s : stages) stages_json.push_back({{"name", s.name}, {"checkpoint", s.checkpoint}, {"seconds", s.seconds}});
  json reports_json = json::object();
  for (const auto& [k, v] : reports) reports_json[k] = v;
  const json j = {{"config_hash", config_hash},
                  {"seed", seed},
                  {"variant", variant},
                  {"status", status},
                  {"failed_stage", failed_stage},
                  {"diagnostic", diagnostic},
                  {"stages", stages_json},
                  {"reports", reports_json},
                  {"pseudo_labels", pseudo_labels}};
  write_text(dir / "manifest.json", j.dump(2) + "\n");
}

RunManifest RunManifest::read(const fs::path& path) {
  const fs::path file = fs::is_directory(path) ? path / "manifest.json" : path;
  RunManifest m;
  m.dir = file.parent_path();
  try {
    const json j = json::parse(read_text(file));
    m.config_hash = j.at("config_hash").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.variant = j.at("variant").get<std::string>();
    m.status = j.at("status").get<std::string>();
    m.failed_stage = j.value("failed_stage", "");
    m.diagnostic = j.value("diagnostic", "");
    for (const auto& s : j.at("stages")) {
      m.stages.push_back({s.at("name").get<std::string>(), s.at("checkpoint").get<std::string>(), s.at("seconds").get<double>()});
    }
    for (const auto& [k, v] : j.at("reports").items()) m.reports[k] = v.get<std::string>();
    if (j.contains("pseudo_labels")) m.pseudo_labels = j.at("pseudo_labels").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw IoError("malformed manifest " + file.string() + ": " + e.what());
  } catch (const IoError&) {
    throw IoError("cannot read manifest " + file.string());
  }
  return m;
}

Pretrained run_pretrain(const ExperimentConfig& config, const pipeline::SyntheticData& data) {
  const RunSeeds seeds = RunSeeds::from(config.seed);
  Pretrained out{pipeline::ReidModel(config.model, seeds.init), {}, 0.0};
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<pipeline::DomainDataset> sources = data.sources();
  pipeline::pretrain_stage(out.model, sources, config.pretrain, seeds.pretrain, out.log);
  out.seconds = seconds_since(t0);
  return out;
}

RunResult run_from_pretrained(const ExperimentConfig& config, const pipeline::SyntheticData& data,
                              const Pretrained& pretrained, const RunOptions& options) {
  RunResult res;
  RunManifest& m = res.manifest;
  m.config_hash = config.hash();
  m.seed = config.seed;
  m.variant = variant_name(config.model);
  const bool persist = !options.out_root.empty();
  if (persist) {
    m.dir = options.out_root / run_dir_name(config);
    fs::create_directories(m.dir);
    write_text(m.dir / "config.toml", config.canonical());
    m.reports["config"] = "config.toml";
    save_model(pretrained.model, m.dir / "checkpoints/pretrain");
  }
  m.stages.push_back({"pretrain", "checkpoints/pretrain", pretrained.seconds});
  res.log = pretrained.log;

  if (options.stage == StageSelect::all) {
    pipeline::ReidModel model = pretrained.model;
    model.set_variant(config.model.norm, config.model.use_mdif);
    const auto t0 = std::chrono::steady_clock::now();
    try {
      const std::vector<pipeline::DomainDataset> sources = data.sources();
      pipeline::DomainDataset target = data.target();
      pipeline::convert_for_adaptation(model, sources, target, config.adapt.stage.plan);
      const pipeline::EvalHooks hooks{&data.eval, data.domains, config.per_sample_variance};
      pipeline::adapt_stage(model, sources, target, config.adapt, RunSeeds::from(config.seed).adapt, hooks, res.log);
      if (persist) save_model(model, m.dir / "checkpoints/adapt");
      m.stages.push_back({"adapt", "checkpoints/adapt", seconds_since(t0)});
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      m.status = "failed";
      m.failed_stage = "adapt";
      m.diagnostic = e.what();
    }
  }

  if (persist) {
    write_text(m.dir / "train_log.csv", train_log_csv(res.log));
    m.reports["train_log"] = "train_log.csv";
    if (options.stage == StageSelect::all) {
      write_text(m.dir / "metrics.csv", metrics_csv(res.log));
      write_text(m.dir / "metrics.json", metrics_json(res.log).dump(2) + "\n");
      write_text(m.dir / "domain_distances.csv", distances_csv(res.log));
      m.reports["metrics_csv"] = "metrics.csv";
      m.reports["metrics_json"] = "metrics.json";
      m.reports["domain_distances"] = "domain_distances.csv";
      for (const auto& a : res.log.assignments) {
        char name[48];
        std::snprintf(name, sizeof name, "pseudo_labels/epoch_%03d.csv", a.epoch);
        fs::create_directories(m.dir / "pseudo_labels");
        cluster::write_assignment_csv(m.dir / name, a);
        m.pseudo_labels.push_back(name);
      }
    }
    m.write();
  }
  return res;
}

RunResult run_experiment(const ExperimentConfig& config, const RunOptions& options) {
  config.validate();
  const pipeline::SyntheticData data = make_data(config);
  try {
    const Pretrained pre = run_pretrain(config, data);
    return run_from_pretrained(config, data, pre, options);
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    // Stage 1 aborted: record it and stop.
    RunResult res;
    RunManifest& m = res.manifest;
    m.config_hash = config.hash();
    m.seed = config.seed;
    m.variant = variant_name(config.model);
    m.status = "failed";
    m.failed_stage = "pretrain";
    m.diagnostic = e.what();
    if (!options.out_root.empty()) {
      m.dir = options.out_root / run_dir_name(config);
      fs::create_directories(m.dir);
      write_text(m.dir / "config.toml", config.canonical());
      m.reports["config"] = "config.toml";
      m.write();
    }
    return res;
  }
}

std::vector<pipeline::ModelConfig> ablation_variants(const pipeline::ModelConfig& base) {
  std::vector<pipeline::ModelConfig> out;
  for (norm::NormKind k : {norm::NormKind::bn, norm::NormKind::dsbn, norm::NormKind::rdsbn}) {
    for (bool mdif : {false, true}) {
      pipeline::ModelConfig m = base;
      m.norm = k;
      m.use_mdif = mdif;
      out.push_back(m);
    }
  }
  return out;
}

std::vector<AblationRow> run_ablation(const ExperimentConfig& config, std::span<const std::uint64_t> seeds,
                                      const RunOptions& options) {
  config.validate();
  std::vector<AblationRow> rows;
  for (std::uint64_t seed : seeds) {
    ExperimentConfig cs = config;
    cs.seed = seed;
    const pipeline::SyntheticData data = make_data(cs);
    std::optional<Pretrained> bn_pre, ds_pre;
    for (const pipeline::ModelConfig& variant : ablation_variants(config.model)) {
      ExperimentConfig cv = cs;
      cv.model = variant;
      const bool bn = variant.norm == norm::NormKind::bn;
      std::optional<Pretrained>& pre = bn ? bn_pre : ds_pre;
      AblationRow row;
      row.seed = seed;
      row.variant = variant_name(variant);
      try {
        if (!pre) pre = run_pretrain(cv, data);
        const RunResult r = run_from_pretrained(cv, data, *pre, options);
        row.ok = r.manifest.ok();
        if (row.ok && !r.log.epochs.empty() && r.log.epochs.back().evaluated) {
          const auto& met = r.log.epochs.back().metrics;
          row.rank1 = met.retrieval.rank(1);
          row.mean_ap = met.retrieval.mean_ap;
          row.distance = met.gap.distances.distance;
          row.domains = met.gap.distances.domains;
        } else {
          row.ok = false;
        }
      } catch (const ConfigError&) {
        throw;
      } catch (const Error&) {
        row.ok = false;
      }
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

void write_ablation_csv(const fs::path& path, std::span<const AblationRow> rows) {
  std::string out = "seed,variant,ok,rank1,mAP";
  std::vector<int> domains;
  for (const auto& r : rows) {
    if (r.ok) {
      domains = r.domains;
      break;
    }
  }
  for (auto [a, b] : domain_pairs(domains.size())) out += ",dist_" + std::to_string(domains[a]) + "_" + std::to_string(domains[b]);
  out += "\n";
  for (const auto& r : rows) {
    out += std::to_string(r.seed) + "," + r.variant + "," + (r.ok ? "1" : "0") + "," + format_number(r.rank1) + "," +
           format_number(r.mean_ap);
    for (auto [a, b] : domain_pairs(domains.size())) out += "," + (r.ok ? format_number(r.distance.at(a, b)) : "");
    out += "\n";
  }
  write_text(path, out);
}

namespace {

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    return header.size();
  }
};

Table parse_csv(const std::string& text) {
  Table t;
  std::istringstream in(text);
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (first) {
      t.header = cells;
      first = false;
    } else {
      t.rows.push_back(cells);
    }
  }
  return t;
}

std::vector<std::string> report_columns(const Table& t) {
  std::vector<std::string> cols = {"mAP", "rank1", "rank5", "rank10"};
  for (const auto& h : t.header)
    if (h.rfind("dist_", 0) == 0) cols.push_back(h);
  return cols;
}

}  // namespace

std::string build_report(std::span<const RunManifest> manifests, ReportFormat format) {
  if (manifests.empty()) throw IoError("report needs at least one manifest");
  std::vector<Table> tables;
  std::vector<std::string> gaps;
  for (const RunManifest& m : manifests) {
    auto it = m.reports.find("metrics_csv");
    if (it == m.reports.end()) {
      gaps.push_back((m.dir / "manifest.json").string() + " lists no metrics_csv");
      tables.emplace_back();
      continue;
    }
    const fs::path p = m.dir / it->second;
    if (!fs::exists(p)) {
      gaps.push_back(p.string());
      tables.emplace_back();
      continue;
    }
    tables.push_back(parse_csv(read_text(p)));
  }
  if (!gaps.empty()) {
    std::string msg = "missing metric files:";
    for (const auto& g : gaps) msg += "\n  " + g;
    throw IoError(msg);
  }

  std::vector<std::string> labels;
  for (std::size_t i = 0; i < manifests.size(); ++i) {
    std::string l = manifests[i].variant + "@s" + std::to_string(manifests[i].seed);
    for (std::size_t j = 0; j < i; ++j)
      if (labels[j] == l) l += "#" + std::to_string(i);
    labels.push_back(l);
  }
  const std::vector<std::string> cols = report_columns(tables.front());
  auto value = [&](std::size_t run, const std::string& epoch, const std::string& col) -> std::optional<double> {
    const Table& t = tables[run];
    const std::size_t ec = t.column("epoch"), cc = t.column(col);
    if (ec == t.header.size() || cc == t.header.size()) return std::nullopt;
    for (const auto& r : t.rows) {
      if (r.size() > cc && r[ec] == epoch) return std::stod(r[cc]);
    }
    return std::nullopt;
  };
  std::vector<std::string> epochs;
  {
    const std::size_t ec = tables.front().column("epoch");
    for (const auto& r : tables.front().rows)
      if (ec < r.size()) epochs.push_back(r[ec]);
  }

  if (format == ReportFormat::json) {
    json runs = json::array();
    for (std::size_t i = 0; i < manifests.size(); ++i) {
      json rows = json::array();
      for (const auto& e : epochs) {
        json row = {{"epoch", std::stoi(e)}};
        for (const auto& c : cols) {
          if (auto v = value(i, e, c)) row[c] = *v;
        }
        if (i > 0) {
          json delta = json::object();
          for (const auto& c : cols) {
            auto a = value(0, e, c), b = value(i, e, c);
            if (a && b) delta[c] = *b - *a;
          }
          row["delta"] = delta;
        }
        rows.push_back(row);
      }
      runs.push_back({{"label", labels[i]}, {"manifest", (manifests[i].dir / "manifest.json").string()}, {"epochs", rows}});
    }
    return json{{"baseline", labels.front()}, {"runs", runs}}.dump(2) + "\n";
  }

  std::string out = "epoch";
  if (manifests.size() == 1) {
    for (const auto& c : cols) out += "," + c;
  } else {
    for (const auto& l : labels)
      for (const auto& c : cols) out += "," + l + ":" + c;
    for (std::size_t i = 1; i < labels.size(); ++i)
      for (const auto& c : cols) out += ",delta:" + labels[i] + ":" + c;
  }
  out += "\n";
  for (const auto& e : epochs) {
    out += e;
    for (std::size_t i = 0; i < manifests.size(); ++i) {
      for (const auto& c : cols) {
        auto v = value(i, e, c);
        out += "," + (v ? format_number(*v) : "");
      }
    }
    for (std::size_t i = 1; i < manifests.size(); ++i) {
      for (const auto& c : cols) {
        auto a = value(0, e, c), b = value(i, e, c);
        out += "," + (a && b ? format_number(*b - *a) : "");
      }
    }
    out += "\n";
  }
  return out;
}

}  // namespace damix
