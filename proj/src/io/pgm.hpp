#pragma once

#include <string>

#include "core/tensor.hpp"

namespace fmpl {

// P2 PGM, maxval 65535; values mapped round(65535 * clamp(v / vmax, 0, 1)),
// vmax carried in a header comment so images are bit-exact goldens.
void write_pgm(const std::string& path, const double* data, int width, int height,
               double vmax);
void write_pgm(const std::string& path, const Tensor& image, double vmax);

}  // namespace fmpl
