#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "whisq/rng.hpp"
#include "whisq/tensor.hpp"

namespace whisq::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::uint64_t counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("whisq-" + tag + "-" + std::to_string(mix_seed(reinterpret_cast<std::uintptr_t>(this), ++counter) % 1000000007));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline Tensor random_tensor(Rng& rng, std::vector<std::size_t> shape, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.storage()) v = scale * rng.normal();
  return t;
}

inline std::vector<double> random_vector(Rng& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(lo, hi);
  return v;
}

inline std::vector<unsigned char> read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const std::filesystem::path& p, const std::vector<unsigned char>& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::trunc);
  out << s;
}

/// Every file under `root` with its bytes, keyed by relative path.
inline std::vector<std::pair<std::string, std::vector<unsigned char>>> snapshot_tree(const std::filesystem::path& root) {
  std::vector<std::pair<std::string, std::vector<unsigned char>>> out;
  for (const auto& e : std::filesystem::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out.emplace_back(std::filesystem::relative(e.path(), root).string(), read_bytes(e.path()));
  }
  std::sort(out.begin(), out.end());
  return out;
}

/// Exact optimal transport cost between uniform measures on the rows of x
/// and y with cost |x - y|^2 / 2. Both clouds are replicated to lcm(n, m)
/// equal-mass atoms, where an optimal plan is a permutation, and the
/// minimum over all permutations is found by dynamic programming over
/// subsets of the targets. Meant for at most 4 points per side.
inline double exact_ot(const Tensor& x, const Tensor& y) {
  const std::size_t n = x.rows(), m = y.rows(), d = x.cols();
  const std::size_t L = std::lcm(n, m);
  const std::size_t rx = L / n, ry = L / m;
  std::vector<double> dp(std::size_t{1} << L, std::numeric_limits<double>::infinity());
  dp[0] = 0.0;
  for (std::size_t mask = 0; mask + 1 < dp.size(); ++mask) {
    if (dp[mask] == std::numeric_limits<double>::infinity()) continue;
    const auto i = static_cast<std::size_t>(__builtin_popcountll(mask)) / rx;  // source atom being placed
    for (std::size_t j = 0; j < L; ++j) {
      if (mask & (std::size_t{1} << j)) continue;
      double c = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = x.at(i, k) - y.at(j / ry, k);
        c += diff * diff;
      }
      const std::size_t next = mask | (std::size_t{1} << j);
      dp[next] = std::min(dp[next], dp[mask] + 0.5 * c);
    }
  }
  return dp.back() / static_cast<double>(L);
}

}  // namespace whisq::testing
