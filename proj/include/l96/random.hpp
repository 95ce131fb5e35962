#ifndef L96_RANDOM_HPP_
#define L96_RANDOM_HPP_

#include <cstdint>
#include <initializer_list>
#include <random>

namespace l96 {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace detail

/// Roles for hierarchical seed splitting. Each role gets its own stream family
/// so that, e.g., changing the number of model realizations never moves the
/// initial-condition perturbations.
enum class SeedRole : std::uint64_t {
  spin_up = 1,
  perfect_states = 2,
  perturbation = 3,
  model = 4,
  mixed_model = 5,
  training = 6,
  init_weights = 7,
  climatology = 8,
  test = 99,
};

/// Counter-based split: the derived seed depends only on (master, role, indices).
inline std::uint64_t derive_seed(std::uint64_t master, SeedRole role,
                                 std::initializer_list<std::uint64_t> idx = {}) {
  std::uint64_t h = detail::splitmix64(master ^ 0x5851f42d4c957f2dULL);
  h = detail::splitmix64(h ^ static_cast<std::uint64_t>(role));
  for (auto v : idx) h = detail::splitmix64(h ^ (v + 0x632be59bd9b4e019ULL));
  return h;
}

/// Gaussian/uniform draws for one trajectory or one realization.
class NoiseStream {
 public:
  explicit NoiseStream(std::uint64_t seed = 0) : engine_(seed) {}

  void reseed(std::uint64_t seed) {
    engine_.seed(seed);
    normal_.reset();
  }
  double normal() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace l96

#endif  // L96_RANDOM_HPP_
