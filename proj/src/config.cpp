#include "damix/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>

#include "damix/errors.hpp"

namespace damix {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// Drops a trailing comment that is not inside quotes.
std::string strip_comment(const std::string& line) {
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') quoted = !quoted;
    if (line[i] == '#' && !quoted) return line.substr(0, i);
  }
  return line;
}

}  // namespace

ConfigFile ConfigFile::parse(const std::string& text, const std::string& origin) {
  ConfigFile cf;
  cf.origin_ = origin;
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string s = trim(strip_comment(line));
    if (s.empty()) continue;
    const std::string where = origin + ":" + std::to_string(lineno);
    if (s.front() == '[') {
      if (s.back() != ']' || s.size() < 3) throw ConfigError(where + ": malformed section header '" + s + "'");
      section = trim(s.substr(1, s.size() - 2));
      if (cf.values_.count(section) != 0) throw ConfigError(where + ": duplicate section [" + section + "]");
      cf.values_[section];
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    const std::string key = trim(s.substr(0, eq));
    std::string value = trim(s.substr(eq + 1));
    if (key.empty() || value.empty()) throw ConfigError(where + ": empty key or value");
    if (value.front() == '"') {
      if (value.size() < 2 || value.back() != '"') throw ConfigError(where + ": unterminated string");
      value = value.substr(1, value.size() - 2);
    }
    auto& sec = cf.values_[section];
    if (sec.count(key) != 0) throw ConfigError(where + ": duplicate key '" + key + "'");
    sec[key] = value;
  }
  return cf;
}

ConfigFile ConfigFile::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

bool ConfigFile::has(const std::string& section, const std::string& key) const {
  auto it = values_.find(section);
  return it != values_.end() && it->second.count(key) != 0;
}

const std::string& ConfigFile::raw(const std::string& section, const std::string& key) const {
  auto it = values_.find(section);
  if (it == values_.end() || it->second.count(key) == 0) {
    throw ConfigError(origin_ + ": missing [" + section + "] " + key);
  }
  return it->second.at(key);
}

namespace {

double parse_double(const std::string& v, const std::string& name) {
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(out)) {
    throw ConfigError(name + ": expected a number, got '" + v + "'");
  }
  return out;
}

std::uint64_t parse_uint(const std::string& v, const std::string& name) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError(name + ": expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

bool parse_bool(const std::string& v, const std::string& name) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw ConfigError(name + ": expected true or false, got '" + v + "'");
}

std::vector<std::size_t> parse_list(const std::string& v, const std::string& name) {
  if (v.size() < 2 || v.front() != '[' || v.back() != ']') throw ConfigError(name + ": expected [a, b, ...]");
  std::vector<std::size_t> out;
  std::stringstream ss(v.substr(1, v.size() - 2));
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    out.push_back(static_cast<std::size_t>(parse_uint(item, name)));
  }
  return out;
}

std::string format_double(double v) {
  char buf[32];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

// One config field: how to read it from text and write it back canonically.
struct Field {
  std::string section;
  std::string key;
  std::function<void(ExperimentConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

template <typename T>
Field size_field(std::string section, std::string key, T ExperimentConfig::*outer, std::size_t T::*member) {
  return {section, key,
          [=](ExperimentConfig& c, const std::string& v, const std::string& n) {
            (c.*outer).*member = static_cast<std::size_t>(parse_uint(v, n));
          },
          [=](const ExperimentConfig& c) { return std::to_string((c.*outer).*member); }};
}

template <typename T>
Field double_field(std::string section, std::string key, T ExperimentConfig::*outer, double T::*member) {
  return {section, key,
          [=](ExperimentConfig& c, const std::string& v, const std::string& n) { (c.*outer).*member = parse_double(v, n); },
          [=](const ExperimentConfig& c) { return format_double((c.*outer).*member); }};
}

// Fields shared by both training stages, addressed through an accessor.
void stage_fields(std::vector<Field>& f, const std::string& sec,
                  std::function<pipeline::StageConfig&(ExperimentConfig&)> get_mut,
                  std::function<const pipeline::StageConfig&(const ExperimentConfig&)> get) {
  auto num = [&](const std::string& key, std::function<double&(pipeline::StageConfig&)> mut,
                 std::function<double(const pipeline::StageConfig&)> read) {
    f.push_back({sec, key, [=](ExperimentConfig& c, const std::string& v, const std::string& n) { mut(get_mut(c)) = parse_double(v, n); },
                 [=](const ExperimentConfig& c) { return format_double(read(get(c))); }});
  };
  auto count = [&](const std::string& key, std::function<std::size_t&(pipeline::StageConfig&)> mut,
                   std::function<std::size_t(const pipeline::StageConfig&)> read) {
    f.push_back({sec, key,
                 [=](ExperimentConfig& c, const std::string& v, const std::string& n) {
                   mut(get_mut(c)) = static_cast<std::size_t>(parse_uint(v, n));
                 },
                 [=](const ExperimentConfig& c) { return std::to_string(read(get(c))); }});
  };
  count("epochs", [](auto& s) -> std::size_t& { return s.epochs; }, [](const auto& s) { return s.epochs; });
  count("iters_per_epoch", [](auto& s) -> std::size_t& { return s.iters_per_epoch; },
        [](const auto& s) { return s.iters_per_epoch; });
  num("lr", [](auto& s) -> double& { return s.adam.lr; }, [](const auto& s) { return s.adam.lr; });
  num("weight_decay", [](auto& s) -> double& { return s.adam.weight_decay; }, [](const auto& s) { return s.adam.weight_decay; });
  num("beta1", [](auto& s) -> double& { return s.adam.beta1; }, [](const auto& s) { return s.adam.beta1; });
  num("beta2", [](auto& s) -> double& { return s.adam.beta2; }, [](const auto& s) { return s.adam.beta2; });
  num("adam_eps", [](auto& s) -> double& { return s.adam.eps; }, [](const auto& s) { return s.adam.eps; });
  num("gamma", [](auto& s) -> double& { return s.gamma; }, [](const auto& s) { return s.gamma; });
  num("margin", [](auto& s) -> double& { return s.margin; }, [](const auto& s) { return s.margin; });
  count("identities_per_domain", [](auto& s) -> std::size_t& { return s.plan.identities_per_domain; },
        [](const auto& s) { return s.plan.identities_per_domain; });
  count("samples_per_identity", [](auto& s) -> std::size_t& { return s.plan.samples_per_identity; },
        [](const auto& s) { return s.plan.samples_per_identity; });
  f.push_back({sec, "milestones",
               [=](ExperimentConfig& c, const std::string& v, const std::string& n) { get_mut(c).milestones = parse_list(v, n); },
               [=](const ExperimentConfig& c) {
                 std::string out = "[";
                 const auto& m = get(c).milestones;
                 for (std::size_t i = 0; i < m.size(); ++i) out += (i ? ", " : "") + std::to_string(m[i]);
                 return out + "]";
               }});
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    using E = ExperimentConfig;
    using S = pipeline::SyntheticSpec;
    using M = pipeline::ModelConfig;
    std::vector<Field> f;
    f.push_back({"", "seed", [](E& c, const std::string& v, const std::string& n) { c.seed = parse_uint(v, n); },
                 [](const E& c) { return std::to_string(c.seed); }});

    f.push_back(size_field("data", "num_domains", &E::data, &S::num_domains));
    f.push_back(size_field("data", "identities_per_domain", &E::data, &S::identities_per_domain));
    f.push_back(size_field("data", "samples_per_identity", &E::data, &S::samples_per_identity));
    f.push_back(size_field("data", "channels", &E::data, &S::channels));
    f.push_back(size_field("data", "length", &E::data, &S::length));
    f.push_back(double_field("data", "style_scale", &E::data, &S::style_scale));
    f.push_back(double_field("data", "style_shift", &E::data, &S::style_shift));
    f.push_back(double_field("data", "style_mixing", &E::data, &S::style_mixing));
    f.push_back(double_field("data", "instance_jitter", &E::data, &S::instance_jitter));
    f.push_back(double_field("data", "noise", &E::data, &S::noise));
    f.push_back(size_field("data", "eval_identities", &E::data, &S::eval_identities));
    f.push_back(size_field("data", "eval_samples_per_identity", &E::data, &S::eval_samples_per_identity));
    f.push_back(size_field("data", "queries_per_identity", &E::data, &S::queries_per_identity));

    f.push_back(size_field("model", "hidden", &E::model, &M::hidden));
    f.push_back(size_field("model", "blocks", &E::model, &M::blocks));
    f.push_back(size_field("model", "rectifier_rank", &E::model, &M::rectifier_rank));
    f.push_back(double_field("model", "slope", &E::model, &M::slope));
    f.push_back(double_field("model", "bn_eps", &E::model, &M::bn_eps));
    f.push_back(double_field("model", "bn_momentum", &E::model, &M::bn_momentum));
    f.push_back(double_field("model", "agent_momentum", &E::model, &M::agent_momentum));
    f.push_back({"model", "norm", [](E& c, const std::string& v, const std::string&) { c.model.norm = norm::parse_norm_kind(v); },
                 [](const E& c) { return std::string("\"") + norm::to_string(c.model.norm) + "\""; }});
    f.push_back({"model", "mdif", [](E& c, const std::string& v, const std::string& n) { c.model.use_mdif = parse_bool(v, n); },
                 [](const E& c) { return std::string(c.model.use_mdif ? "true" : "false"); }});

    stage_fields(f, "pretrain", [](E& c) -> pipeline::StageConfig& { return c.pretrain; },
                 [](const E& c) -> const pipeline::StageConfig& { return c.pretrain; });
    stage_fields(f, "adapt", [](E& c) -> pipeline::StageConfig& { return c.adapt.stage; },
                 [](const E& c) -> const pipeline::StageConfig& { return c.adapt.stage; });
    f.push_back({"adapt", "cluster_on_fused",
                 [](E& c, const std::string& v, const std::string& n) { c.adapt.cluster_on_fused = parse_bool(v, n); },
                 [](const E& c) { return std::string(c.adapt.cluster_on_fused ? "true" : "false"); }});

    f.push_back({"cluster", "eps", [](E& c, const std::string& v, const std::string& n) { c.adapt.cluster.eps = parse_double(v, n); },
                 [](const E& c) { return format_double(c.adapt.cluster.eps); }});
    f.push_back({"cluster", "min_pts",
                 [](E& c, const std::string& v, const std::string& n) {
                   c.adapt.cluster.min_pts = static_cast<std::size_t>(parse_uint(v, n));
                 },
                 [](const E& c) { return std::to_string(c.adapt.cluster.min_pts); }});

    f.push_back({"eval", "per_sample_variance",
                 [](E& c, const std::string& v, const std::string& n) { c.per_sample_variance = parse_bool(v, n); },
                 [](const E& c) { return std::string(c.per_sample_variance ? "true" : "false"); }});
    return f;
  }();
  return table;
}

}  // namespace

ExperimentConfig ExperimentConfig::defaults() {
  ExperimentConfig c;
  c.pretrain.epochs = 80;
  c.pretrain.iters_per_epoch = 20;
  c.pretrain.adam.lr = 3.5e-4;
  c.pretrain.milestones = {40, 70};
  c.adapt.stage.epochs = 40;
  c.adapt.stage.iters_per_epoch = 20;
  c.adapt.stage.adam.lr = 3.5e-4;
  c.adapt.stage.milestones = {};
  return c;
}

ExperimentConfig ExperimentConfig::benchmark() {
  ExperimentConfig c = defaults();
  c.pretrain.epochs = 20;
  c.pretrain.adam.lr = 3e-3;
  c.pretrain.milestones = {15};
  c.pretrain.plan.identities_per_domain = 4;
  c.adapt.stage.epochs = 8;
  c.adapt.stage.iters_per_epoch = 30;
  c.adapt.stage.plan.identities_per_domain = 4;
  c.adapt.cluster.eps = 0.35;
  return c;
}

ExperimentConfig ExperimentConfig::from_file(const ConfigFile& file, ExperimentConfig base) {
  for (const auto& [section, keys] : file.sections()) {
    for (const auto& [key, value] : keys) {
      bool known = false;
      for (const Field& f : fields()) {
        if (f.section == section && f.key == key) {
          f.set(base, value, (section.empty() ? "" : "[" + section + "] ") + key);
          known = true;
          break;
        }
      }
      if (!known) throw ConfigError("unknown config key " + (section.empty() ? "" : "[" + section + "] ") + key);
    }
  }
  base.validate();
  return base;
}

void ExperimentConfig::validate() const {
  data.validate();
  if (data.channels == 0) throw ConfigError("[data] channels must be positive");
  model.validate();
  pretrain.validate();
  adapt.stage.validate();
  if (!(adapt.cluster.eps > 0.0)) throw ConfigError("[cluster] eps must be positive");
  if (adapt.cluster.min_pts == 0) throw ConfigError("[cluster] min_pts must be at least 1");
  if (pretrain.plan.identities_per_domain > data.identities_per_domain) {
    throw ConfigError("[pretrain] identities_per_domain exceeds [data] identities_per_domain");
  }
}

std::string ExperimentConfig::canonical() const {
  std::string out;
  std::string section = "\x01";
  for (const Field& f : fields()) {
    if (f.section != section) {
      section = f.section;
      if (!section.empty()) out += "[" + section + "]\n";
    }
    out += f.key + " = " + f.get(*this) + "\n";
  }
  return out;
}

std::uint64_t fnv1a64(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string ExperimentConfig::hash() const {
  ExperimentConfig c = *this;
  c.seed = 0;
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(c.canonical())));
  return buf;
}

}  // namespace damix
