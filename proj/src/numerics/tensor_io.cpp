#include "damix/numerics/tensor_io.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "damix/errors.hpp"

namespace damix {

static_assert(std::endian::native == std::endian::little, "tensor format assumes a little-endian host");

namespace {

constexpr std::array<char, 4> kMagic = {'D', 'M', 'X', '1'};

template <typename T>
void put_raw(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get_raw(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw IoError("truncated tensor stream");
  return v;
}

// Names become file stems; keep them to a portable alphabet.
std::string file_stem(const std::string& name) {
  std::string s = name;
  for (char& c : s) {
    const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '_' ||
                    c == '-' || c == '.';
    if (!ok) c = '_';
  }
  return s;
}

}  // namespace

void write_tensor(std::ostream& out, const Tensor& t) {
  out.write(kMagic.data(), kMagic.size());
  put_raw<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t e : t.shape()) put_raw<std::uint64_t>(out, static_cast<std::uint64_t>(e));
  out.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  if (!out) throw IoError("failed writing tensor");
}

Tensor read_tensor(std::istream& in) {
  std::array<char, 4> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) throw IoError("bad tensor magic (expected DMX1)");
  const auto rank = get_raw<std::uint32_t>(in);
  if (rank == 0 || rank > 16) throw IoError("implausible tensor rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& e : shape) e = static_cast<std::size_t>(get_raw<std::uint64_t>(in));
  std::vector<double> data(shape_size(shape));
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
  if (!in) throw IoError("truncated tensor payload");
  return Tensor(std::move(shape), std::move(data));
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  write_tensor(out, t);
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return read_tensor(in);
}

Tensor parse_csv_tensor(const std::string& text) {
  std::istringstream lines(text);
  std::string line;
  std::vector<double> data;
  std::size_t rows = 0, cols = 0;
  while (std::getline(lines, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos || line[line.find_first_not_of(" \t")] == '#') continue;
    std::istringstream fields(line);
    std::string cell;
    std::size_t n = 0;
    while (std::getline(fields, cell, ',')) {
      try {
        std::size_t used = 0;
        data.push_back(std::stod(cell, &used));
        if (cell.find_first_not_of(" \t\r", used) != std::string::npos) throw std::invalid_argument(cell);
      } catch (const std::exception&) {
        throw IoError("csv row " + std::to_string(rows + 1) + ": not a number: '" + cell + "'");
      }
      ++n;
    }
    if (rows == 0) {
      cols = n;
    } else if (n != cols) {
      throw IoError("csv row " + std::to_string(rows + 1) + " has " + std::to_string(n) + " fields, expected " +
                    std::to_string(cols));
    }
    ++rows;
  }
  if (rows == 0 || cols == 0) throw IoError("csv tensor is empty");
  return Tensor({rows, cols}, std::move(data));
}

Tensor load_csv_tensor(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_csv_tensor(ss.str());
}

const Tensor& TensorArchive::get(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw LookupError("archive has no tensor '" + name + "'");
  return it->second;
}

const std::string& TensorArchive::meta(const std::string& key) const {
  auto it = meta_.find(key);
  if (it == meta_.end()) throw LookupError("archive has no metadata '" + key + "'");
  return it->second;
}

void TensorArchive::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir / "tensors");
  nlohmann::ordered_json manifest;
  manifest["format"] = "DMX1";
  nlohmann::ordered_json entries = nlohmann::ordered_json::object();
  for (const auto& [name, t] : tensors_) {
    const std::string rel = "tensors/" + file_stem(name) + ".dmx";
    save_tensor(dir / rel, t);
    entries[name] = rel;
  }
  manifest["tensors"] = entries;
  manifest["meta"] = meta_;
  std::ofstream out(dir / "manifest.json");
  if (!out) throw IoError("cannot write manifest in " + dir.string());
  out << manifest.dump(2) << '\n';
}

TensorArchive TensorArchive::load(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError("missing manifest.json in " + dir.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed manifest " + (dir / "manifest.json").string() + ": " + e.what());
  }
  TensorArchive a;
  for (const auto& [name, rel] : manifest.at("tensors").items()) a.put(name, load_tensor(dir / rel.get<std::string>()));
  if (manifest.contains("meta")) {
    for (const auto& [k, v] : manifest["meta"].items()) a.set_meta(k, v.get<std::string>());
  }
  return a;
}

}  // namespace damix
