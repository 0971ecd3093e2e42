#ifndef USP_CORE_HPP
#define USP_CORE_HPP

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace usp {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

using MatF = Mat<float>;
using MatD = Mat<double>;

// ---------------------------------------------------------------------------
// Errors. Each kind maps onto a process exit code used by the CLI.

enum class ErrorKind { invalid = 1, config = 2, numeric = 3, digest = 4, io = 5 };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }
  int exit_code() const noexcept { return kind_ == ErrorKind::io ? 1 : static_cast<int>(kind_); }

 private:
  ErrorKind kind_;
};

inline Error invalid_argument(const std::string& msg) { return Error(ErrorKind::invalid, msg); }
inline Error config_error(const std::string& msg) { return Error(ErrorKind::config, msg); }
inline Error numeric_error(const std::string& msg) { return Error(ErrorKind::numeric, msg); }
inline Error digest_mismatch(const std::string& msg) { return Error(ErrorKind::digest, msg); }
inline Error io_error(const std::string& msg) { return Error(ErrorKind::io, msg); }

#define USP_CHECK(cond, msg)                                  \
  do {                                                        \
    if (!(cond)) throw ::usp::invalid_argument(std::string(msg)); \
  } while (0)

// ---------------------------------------------------------------------------
// Content digests (64-bit FNV-1a). Used for fingerprints and run addressing,
// not for security.

class Digest {
 public:
  Digest& bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h_ ^= p[i];
      h_ *= 0x100000001b3ULL;
    }
    return *this;
  }
  Digest& str(std::string_view s) {
    u64(s.size());
    return bytes(s.data(), s.size());
  }
  Digest& u64(std::uint64_t v) { return bytes(&v, sizeof v); }
  Digest& f64(double v) { return bytes(&v, sizeof v); }
  template <typename T>
  Digest& floats(std::span<const T> v) {
    u64(v.size());
    return bytes(v.data(), v.size_bytes());
  }

  std::uint64_t value() const { return h_; }
  std::string hex() const { return to_hex(h_); }

  static std::string to_hex(std::uint64_t v) {
    static constexpr char kDigits[] = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
      out[i] = kDigits[v & 0xf];
      v >>= 4;
    }
    return out;
  }

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

inline std::string digest_of(std::string_view s) { return Digest{}.str(s).hex(); }

// ---------------------------------------------------------------------------
// Random numbers. Every draw goes through this generator so that results are
// reproducible bit-for-bit across runs on the same build.

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Counter-based seed derivation: a stage tag (and optional counter) fans one
/// master seed out into independent streams.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view tag, std::uint64_t counter = 0) {
  return splitmix64(master ^ splitmix64(Digest{}.str(tag).value() + counter));
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) { reseed(seed); }

  void reseed(std::uint64_t seed) {
    std::uint64_t s = seed;
    for (auto& w : state_) w = s = splitmix64(s);
    has_spare_ = false;
  }

  // xoshiro256**
  std::uint64_t next() {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw invalid_argument("Rng::below: empty range");
    // Lemire-style rejection keeps the distribution exact.
    const std::uint64_t threshold = (0 - n) % n;
    for (;;) {
      const std::uint64_t r = next();
      if (r >= threshold) return r % n;
    }
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    do u1 = uniform(); while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  /// Normal(0, std) truncated to [-2 std, 2 std].
  double trunc_normal(double std) {
    for (;;) {
      const double z = normal();
      if (std::abs(z) <= 2.0) return z * std;
    }
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
  }

  std::array<std::uint64_t, 4> state() const { return state_; }
  void set_state(const std::array<std::uint64_t, 4>& s) {
    state_ = s;
    has_spare_ = false;
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  std::array<std::uint64_t, 4> state_{};
  double spare_ = 0.0;
  bool has_spare_ = false;
};

template <typename T>
Mat<T> randn(Rng& rng, Eigen::Index rows, Eigen::Index cols, double std = 1.0) {
  Mat<T> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(rng.normal() * std);
  return m;
}

template <typename T>
bool all_finite(const Mat<T>& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i)
    if (!std::isfinite(m.data()[i])) return false;
  return true;
}

}  // namespace usp

#endif  // USP_CORE_HPP
