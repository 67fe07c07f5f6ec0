#include "deidforge/faceset.hpp"

#include "deidforge/errors.hpp"

namespace deidforge {

void FaceSet::validate() const {
  if (faces.empty()) throw InvalidDataError("face set '" + subject_id + "' is empty");
  for (const Image& f : faces)
    if (!f.same_shape(faces.front()))
      throw InvalidDataError("face set '" + subject_id + "' mixes image shapes");
  if (!source_landmarks.empty() && source_landmarks.size() != faces.size())
    throw InvalidDataError("face set '" + subject_id + "' has a landmark count mismatch");
}

}  // namespace deidforge
