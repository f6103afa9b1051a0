#pragma once

#include <algorithm>
#include <atomic>
#include <cstring>
#include <filesystem>
#include <random>
#include <string>
#include <unistd.h>

#include "mslae/params.hpp"
#include "mslae/tensor.hpp"

namespace testutil {

inline mslae::Tensor uniform(const mslae::Shape& s, uint64_t seed, float lo = -1.0f, float hi = 1.0f) {
  std::mt19937_64 g(seed);
  std::uniform_real_distribution<float> u(lo, hi);
  std::vector<float> v(static_cast<size_t>(s.numel()));
  for (float& x : v) x = u(g);
  return mslae::Tensor::from_data(s, std::move(v));
}

inline mslae::Tensor iota(const mslae::Shape& s, float start = 1.0f) {
  std::vector<float> v(static_cast<size_t>(s.numel()));
  for (size_t i = 0; i < v.size(); ++i) v[i] = start + static_cast<float>(i);
  return mslae::Tensor::from_data(s, std::move(v));
}

inline void randomize(mslae::ParameterSet& ps, uint64_t seed) {
  std::mt19937_64 g(seed);
  std::normal_distribution<float> n(0.0f, 0.5f);
  for (const auto& e : ps.entries()) {
    mslae::Tensor t = e.value;
    for (float& v : t.mutable_data()) v = e.kind == mslae::ParamKind::bn_gamma ? 1.0f + 0.2f * n(g) : n(g);
  }
}

inline void zero(mslae::ParameterSet& ps) {
  for (const auto& e : ps.entries()) {
    mslae::Tensor t = e.value;
    for (float& v : t.mutable_data()) v = 0.0f;
  }
}

inline bool same_bits(const mslae::Tensor& a, const mslae::Tensor& b) {
  if (!(a.shape() == b.shape())) return false;
  auto x = a.data(), y = b.data();
  return std::equal(x.begin(), x.end(), y.begin(),
                    [](float p, float q) { return std::memcmp(&p, &q, sizeof(float)) == 0; });
}

// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("mslae-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& p) const { return path_ / p; }

 private:
  std::filesystem::path path_;
};

}  // namespace testutil
