#pragma once

#include <cmath>
#include <cstdint>

namespace bondlab {

// Counter-based Gaussian noise. Every draw is a pure function of
// (seed, path, step, factor), so path ensembles are bit-identical no matter
// how paths are scheduled across threads. The mixer is splitmix64
// (Steele/Lea/Flood), applied to the packed counter; normals come from one
// Box-Muller evaluation per counter.
namespace rng {

inline std::uint64_t splitmix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Uniform in the open interval (0, 1); never returns an endpoint.
inline double uniform(std::uint64_t key) {
  const std::uint64_t bits = splitmix64(key) >> 11;  // 53 random bits
  return (static_cast<double>(bits) + 0.5) * 0x1.0p-53;
}

inline std::uint64_t pack(std::uint64_t seed, std::uint64_t path,
                          std::uint64_t step, std::uint64_t factor,
                          std::uint64_t lane) {
  std::uint64_t k = splitmix64(seed);
  k = splitmix64(k ^ (path + 0x632be59bd9b4e019ULL));
  k = splitmix64(k ^ (step + 0x9e6c63d0876a9a62ULL));
  k = splitmix64(k ^ (factor + 0xc2b2ae3d27d4eb4fULL));
  return k ^ lane;
}

/// Standard normal draw addressed by (seed, path, step, factor).
inline double normal(std::uint64_t seed, std::uint64_t path,
                     std::uint64_t step, std::uint64_t factor) {
  const double u1 = uniform(pack(seed, path, step, factor, 0));
  const double u2 = uniform(pack(seed, path, step, factor, 1));
  return std::sqrt(-2.0 * std::log(u1)) *
         std::cos(6.283185307179586476925286766559 * u2);
}

}  // namespace rng
}  // namespace bondlab
