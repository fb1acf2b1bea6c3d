#include "io/pgm.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace fmpl {

void write_pgm(const std::string& path, const double* data, int width, int height,
               double vmax) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_pgm: cannot open " + path);
  char head[96];
  std::snprintf(head, sizeof(head), "P2\n# vmax=%.17g\n%d %d\n65535\n", vmax, width,
                height);
  os << head;
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      double v = vmax > 0.0 ? data[int64_t(y) * width + x] / vmax : 0.0;
      v = std::clamp(v, 0.0, 1.0);
      int q = int(std::lround(65535.0 * v));
      os << q << (x + 1 < width ? ' ' : '\n');
    }
  }
  if (!os) throw std::runtime_error("write_pgm: write failed " + path);
}

void write_pgm(const std::string& path, const Tensor& image, double vmax) {
  if (image.ndim() != 2) throw ShapeError("write_pgm: expects rank-2 tensor");
  write_pgm(path, image.ptr(), image.dim(1), image.dim(0), vmax);
}

}  // namespace fmpl
