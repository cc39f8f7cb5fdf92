#pragma once

// Subcommand entry points and the small shared plumbing (option structs,
// list parsing, digest comments for CSV artifacts).

#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace latte::cli {

struct VerifyOptions {
  std::string precision = "f64";
  uint64_t seed = 0;
  std::string tol_overrides;          // comma-separated check=value pairs
  bool break_stabilization = false;   // swap the stabilized scan for the raw recursion
  std::string out = "verify_report.csv";
};

struct TrainCliOptions {
  std::string config_path;
  std::string task = "mqar";
  std::string mixer;                  // empty keeps the config's mixer_kind
  long long steps = 0;                // 0 keeps the default
  std::string out_dir = "run";
  std::string corpus;                 // text task: byte corpus path, empty -> synthetic
  long long eval_every = 0;           // 0 -> steps/20
};

struct BenchOptions {
  std::string seq_lens = "512,1024,2048,4096,8192";
  std::string mixers = "latte,attention";
  int d_model = 256;
  int repeat = 3;
  uint64_t seed = 0;
  long long token_budget = 0;         // tokens per forward; 0 -> max seq len
  double mem_limit_gb = 4.0;
  std::string out = "bench.csv";
};

struct DiagnoseOptions {
  std::string checkpoint;
  std::string input;                  // token or text file; empty -> seeded random tokens
  std::string out = "diagnose.csv";
};

int cmd_verify(const VerifyOptions& opt);
int cmd_train(const TrainCliOptions& opt);
int cmd_bench(const BenchOptions& opt);
int cmd_diagnose(const DiagnoseOptions& opt);

inline std::vector<std::string> split_list(const std::string& csv) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(csv);
  while (std::getline(in, item, ',')) {
    const size_t a = item.find_first_not_of(" \t");
    if (a == std::string::npos) continue;
    const size_t b = item.find_last_not_of(" \t");
    out.push_back(item.substr(a, b - a + 1));
  }
  return out;
}

inline uint64_t fnv1a64(const std::string& s) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string hex64(uint64_t h) {
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}

/// Opens a CSV artifact and writes the digest comment line all outputs carry.
inline std::ofstream open_csv(const std::string& path, const std::string& digest) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open output file: " + path);
  out << "# config_digest=" << digest << "\n";
  return out;
}

}  // namespace latte::cli
