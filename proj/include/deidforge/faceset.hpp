#pragma once

#include <string>
#include <vector>

#include "deidforge/facegeom.hpp"
#include "deidforge/image.hpp"

namespace deidforge {

/// Aligned faces of one subject at canonical size (80x80x3), plus the
/// landmarks each face was aligned from.
struct FaceSet {
  std::string subject_id;
  std::vector<Image> faces;
  std::vector<facegeom::LandmarkSet> source_landmarks;

  /// Throws InvalidDataError when empty or when faces differ in shape.
  void validate() const;
};

}  // namespace deidforge
