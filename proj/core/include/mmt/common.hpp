#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace mmt {

// Error taxonomy shared by all modules. Everything derives from mmt::Error so
// callers can catch broadly; tests catch the specific class.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error { using Error::Error; };           // dimension mismatch
struct EmptySupportError : Error { using Error::Error; };    // all-masked / empty reduction
struct VocabError : Error { using Error::Error; };           // id out of range, unknown token
struct PairingError : Error { using Error::Error; };         // sentence/image count mismatch
struct KindError : Error { using Error::Error; };            // wrong feature kind for an op
struct ParamError : Error { using Error::Error; };           // invalid argument / usage
struct DeterminismError : Error { using Error::Error; };     // non-reproducible closure
struct DegenerateBatchError : Error { using Error::Error; }; // too few samples for statistics
struct LengthError : Error { using Error::Error; };          // sentence over hard cap
struct IoError : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };
struct CompatibilityError : Error { using Error::Error; };   // checkpoint/vocab mismatch
struct NonFiniteError : Error { using Error::Error; };       // NaN/Inf surfaced by an op
struct DivergenceError : Error { using Error::Error; };      // training loss went non-finite

// Working precision of every tensor store. A single global switch, not a
// per-tensor property: Double stores exact IEEE doubles (used by gradient
// checks); Single rounds every stored value (op outputs, parameters,
// optimizer state) through float32 so stored numerics match a
// single-precision pipeline while inner accumulations stay double.
enum class Precision { kSingle, kDouble };

namespace detail {
inline bool g_round_single = false;
}

inline void set_precision(Precision p) { detail::g_round_single = (p == Precision::kSingle); }
inline Precision get_precision() {
  return detail::g_round_single ? Precision::kSingle : Precision::kDouble;
}

inline double store_round(double x) {
  return detail::g_round_single ? static_cast<double>(static_cast<float>(x)) : x;
}

class PrecisionScope {
 public:
  explicit PrecisionScope(Precision p) : prev_(get_precision()) { set_precision(p); }
  ~PrecisionScope() { set_precision(prev_); }
  PrecisionScope(const PrecisionScope&) = delete;
  PrecisionScope& operator=(const PrecisionScope&) = delete;

 private:
  Precision prev_;
};

// Reserved token ids, fixed across every vocabulary. The decoder never emits
// kPad or kStart; kEnd terminates generation.
namespace tok {
constexpr int kPad = 0;
constexpr int kStart = 1;
constexpr int kEnd = 2;
constexpr int kUnk = 3;
constexpr int kReserved = 4;
}  // namespace tok

// splitmix64 finalizer; derives independent named streams from one run seed.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream = 0) {
  return std::mt19937_64(mix_seed(seed, stream));
}

}  // namespace mmt
