#include "tak/tensor.hpp"

namespace tak {

IntGrid downsample2_nearest(const IntGrid& g) {
  IntGrid out((g.dims[0] + 1) / 2, (g.dims[1] + 1) / 2, (g.dims[2] + 1) / 2);
  for (int z = 0; z < out.dims[0]; ++z)
    for (int y = 0; y < out.dims[1]; ++y)
      for (int x = 0; x < out.dims[2]; ++x) out.at(z, y, x) = g.at(2 * z, 2 * y, 2 * x);
  return out;
}

}  // namespace tak
