#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>

#include "damix/numerics/tensor.hpp"

namespace damix {

// Binary layout, all little-endian:
//   "DMX1" | u32 rank | rank x u64 extents | f64 payload (row-major)
void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);

void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

/// Comma-separated rows of numbers -> N x C matrix (one row gives 1 x C).
/// Blank lines and lines starting with '#' are skipped.
Tensor parse_csv_tensor(const std::string& text);
Tensor load_csv_tensor(const std::filesystem::path& path);

/// Named tensors stored as one DMX1 file each plus a JSON manifest mapping
/// names to files. Extra metadata (integers, strings) rides in the manifest.
class TensorArchive {
 public:
  void put(const std::string& name, const Tensor& t) { tensors_[name] = t; }
  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
  const std::map<std::string, Tensor>& tensors() const { return tensors_; }

  void set_meta(const std::string& key, const std::string& value) { meta_[key] = value; }
  const std::string& meta(const std::string& key) const;
  bool has_meta(const std::string& key) const { return meta_.count(key) != 0; }

  /// Writes <dir>/manifest.json and <dir>/tensors/*.dmx.
  void save(const std::filesystem::path& dir) const;
  static TensorArchive load(const std::filesystem::path& dir);

 private:
  std::map<std::string, Tensor> tensors_;
  std::map<std::string, std::string> meta_;
};

}  // namespace damix
