#include "peel/rng.hpp"

#include <cmath>

namespace peel {

double GaussianRng::uniform() {
    // 53-bit mantissa from the top bits of one 64-bit draw.
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
}

double GaussianRng::normal() {
    if (have_spare_) {
        have_spare_ = false;
        return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.141592653589793238462643383279502884 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
}

void GaussianRng::fill_normal(Tensor& t, double mean, double sigma) {
    for (double& v : t.data) v = mean + sigma * normal();
}

std::uint64_t mix_seed(std::uint64_t root, std::uint64_t salt) {
    std::uint64_t z = root + 0x9e3779b97f4a7c15ULL * (salt + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

} // namespace peel
