#pragma once

#include "esoseg/volume.hpp"

#include <vector>

namespace esoseg::postproc {

/// Voxels strictly below `cutoff` HU are replaced by `mean_eso_hu`.
Volume3D preprocess_ct(const Volume3D& ct, double mean_eso_hu, double cutoff = -150.0);

/// Offsets of the 6-connected ball of the given radius (|dx|+|dy|+|dz| <= r).
std::vector<Index3> structuring_element(int radius);

/// Outside voxels count as background.
Volume3D dilate(const Volume3D& mask, int radius = 1);
/// Outside voxels count as foreground.
Volume3D erode(const Volume3D& mask, int radius = 1);
Volume3D morphological_closing(const Volume3D& mask, int radius = 1);

}  // namespace esoseg::postproc
