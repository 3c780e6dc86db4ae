#include "esoseg/postproc.hpp"

#include <cstdlib>

namespace esoseg::postproc {

Volume3D preprocess_ct(const Volume3D& ct, double mean_eso_hu, double cutoff) {
  if (ct.kind != VolumeKind::HU) throw DataError("preprocess_ct expects an HU volume");
  Volume3D out = ct;
  out.data = (ct.data < cutoff).select(mean_eso_hu, ct.data);
  return out;
}

std::vector<Index3> structuring_element(int radius) {
  if (radius < 0) throw DataError("structuring element radius must be non-negative");
  std::vector<Index3> se;
  for (long dz = -radius; dz <= radius; ++dz)
    for (long dy = -radius; dy <= radius; ++dy)
      for (long dx = -radius; dx <= radius; ++dx)
        if (std::labs(dx) + std::labs(dy) + std::labs(dz) <= radius) se.push_back({dx, dy, dz});
  return se;
}

namespace {

// Dilation (hit = any) or erosion (hit = all) with a symmetric element.
Volume3D morph(const Volume3D& mask, int radius, bool dilation) {
  if (mask.kind != VolumeKind::Mask) throw DataError("morphology expects a mask volume");
  const auto se = structuring_element(radius);
  Volume3D out = mask.like(VolumeKind::Mask);
  for (long z = 0; z < mask.nz(); ++z)
    for (long y = 0; y < mask.ny(); ++y)
      for (long x = 0; x < mask.nx(); ++x) {
        bool any = false, all = true;
        for (const auto& o : se) {
          const long qx = x + o[0], qy = y + o[1], qz = z + o[2];
          const bool v = mask.contains(qx, qy, qz) ? mask(qx, qy, qz) != 0.0 : !dilation;
          any = any || v;
          all = all && v;
          if (dilation ? any : !all) break;
        }
        out(x, y, z) = (dilation ? any : all) ? 1.0 : 0.0;
      }
  return out;
}

}  // namespace

Volume3D dilate(const Volume3D& mask, int radius) { return morph(mask, radius, true); }

Volume3D erode(const Volume3D& mask, int radius) { return morph(mask, radius, false); }

Volume3D morphological_closing(const Volume3D& mask, int radius) { return erode(dilate(mask, radius), radius); }

}  // namespace esoseg::postproc
