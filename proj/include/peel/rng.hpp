#pragma once

#include <cstdint>
#include <random>

#include "peel/tensor.hpp"

namespace peel {

// Deterministic Gaussian stream. std::normal_distribution's bit stream is
// implementation-defined, so Box-Muller is done by hand on top of
// mt19937_64 to keep every seeded artifact bitwise reproducible.
class GaussianRng {
  public:
    explicit GaussianRng(std::uint64_t seed) : eng_(seed) {}

    // Uniform in [0,1).
    double uniform();
    // Standard normal.
    double normal();
    // mean + sigma * N(0,1).
    double normal(double mean, double sigma) { return mean + sigma * normal(); }

    void fill_normal(Tensor& t, double mean, double sigma);
    std::uint64_t next_u64() { return eng_(); }

  private:
    std::mt19937_64 eng_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// splitmix64 step; used to derive per-layer / per-block seeds from a root
// seed without correlated streams.
std::uint64_t mix_seed(std::uint64_t root, std::uint64_t salt);

} // namespace peel
