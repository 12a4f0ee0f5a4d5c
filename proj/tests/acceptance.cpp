// One pass/fail line per acceptance criterion. Exit status is nonzero when
// any criterion fails.

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <iostream>

#include "damix/verify/suite.hpp"

int main(int argc, char** argv) {
  namespace fs = std::filesystem;
  const fs::path scratch = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "damix_acceptance";
  fs::remove_all(scratch);
  fs::create_directories(scratch);

  std::vector<damix::verify::CriterionReport> reports = damix::verify::invariant_suite(scratch);
  const std::array<std::uint64_t, 3> seeds{0, 1, 2};
  damix::verify::AblationOutcome ab = damix::verify::ablation(damix::ExperimentConfig::benchmark(), seeds);
  reports.push_back(std::move(ab.directional));
  reports.push_back(std::move(ab.domain_gap));
  std::sort(reports.begin(), reports.end(), [](const auto& a, const auto& b) { return a.id < b.id; });

  bool all = true;
  for (const auto& r : reports) {
    std::cout << damix::verify::format(r);
    all = all && r.passed();
  }
  std::cout << (all ? "all criteria pass\n" : "some criteria fail\n");
  fs::remove_all(scratch);
  return all ? 0 : 1;
}
