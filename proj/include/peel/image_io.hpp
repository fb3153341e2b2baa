#pragma once

#include <cstddef>
#include <string>

#include "peel/errors.hpp"
#include "peel/tensor.hpp"

namespace peel {

// Binary netpbm images on the 0-255 scale: P6 (RGB) for 3-channel tensors,
// P5 (gray) for 1-channel. Chosen for bit-exact, dependency-free fixtures.

struct ImageWriteStats {
    std::size_t clamped = 0; // pixels whose rounded value left [0, 255]
};

// Writes img (C,H,W with C in {1,3}) rounding each value to the nearest
// integer and clamping to [0, 255]. Returns how many pixels were clamped.
ImageWriteStats write_image(const std::string& path, const Tensor& img);

// Reads a P6 file into a (3,H,W) tensor or a P5 file into (1,H,W), with
// values on the 0-255 scale. Only maxval 255 is accepted.
Tensor read_image(const std::string& path);

} // namespace peel
