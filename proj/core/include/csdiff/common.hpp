#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

#include <ATen/core/Generator.h>

namespace csdiff {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when an input violates an operation's precondition (shapes, ranges, empty inputs).
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Raised when a file or external resource cannot be read or written.
class IoError : public Error {
 public:
  using Error::Error;
};

std::string trim(std::string_view text);
std::string to_lower(std::string_view text);

/// splitmix64 finalizer; used to derive independent seeds from one root seed.
std::uint64_t mix_seed(std::uint64_t value);

/// Seeded random stream with portable (library-independent) sampling routines.
///
/// All randomness in training flows through `Rng::split`, so each purpose
/// (noise, modality swaps, keyword dropout, ...) gets its own stream and the
/// draws of one purpose never perturb another.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 bits of resolution.
  double uniform();
  bool bernoulli(double p);
  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n);

  /// Derives an independent stream keyed by `purpose`.
  Rng split(std::string_view purpose) const;

  /// A torch CPU generator seeded from the next draw of this stream.
  at::Generator torch_generator();

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace csdiff
