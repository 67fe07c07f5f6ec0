#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "deidforge/facegeom.hpp"
#include "deidforge/faceset.hpp"
#include "deidforge/image.hpp"
#include "deidforge/rng.hpp"

namespace deidforge::toyfaces {

struct Range {
  double lo;
  double hi;
  double span() const { return hi - lo; }
  bool contains(double v) const { return v >= lo && v <= hi; }
  double at(double t) const { return lo + t * (hi - lo); }
};

// Identity ranges. Geometric ranges are kept narrow so every identity aligns
// to the canonical template with sub-pixel residual; appearance (skin, brows)
// carries most of the identity signal.
inline constexpr Range kSkinRange{0.25, 0.95};
inline constexpr Range kAspectRange{0.72, 0.88};       // face width / height
inline constexpr Range kEyeSpacingRange{0.40, 0.46};   // eye center offset / half-width
inline constexpr Range kBrowThicknessRange{0.03, 0.10};  // / half-height
inline constexpr Range kNoseLengthRange{0.31, 0.35};     // / half-height

inline constexpr Range kMouthCurvatureRange{-1.0, 1.0};
inline constexpr Range kRotationRange{-15.0, 15.0};  // degrees
inline constexpr Range kIlluminationRange{0.7, 1.3};
inline constexpr Range kJitterRange{-1.0, 1.0};  // fraction of kMaxJitter

// Face half-height and maximum center offset, as fractions of the image side.
inline constexpr double kFaceScale = 0.3;
inline constexpr double kMaxJitter = 0.05;

struct IdentityParams {
  double skin_r = 0.8, skin_g = 0.6, skin_b = 0.5;
  double aspect = 0.8;
  double eye_spacing = 0.43;
  double brow_thickness = 0.06;
  double nose_length = 0.33;

  /// Throws InvalidParameterError for any value outside its range.
  void validate() const;
  /// Parameters scaled to [0, 1] within their ranges, in declaration order.
  std::array<double, 7> normalized() const;
  /// Midpoint of every range.
  static IdentityParams middle();
  /// Uniform draw from the ranges.
  static IdentityParams random(SplitMix64& rng);
};

/// Two identities count as separable when at least two parameters differ by
/// 20% or more of their range.
bool separable(const IdentityParams& a, const IdentityParams& b);

struct AttributeParams {
  double mouth_curvature = 0.0;
  double rotation_deg = 0.0;
  double illumination = 1.0;
  double jitter_x = 0.0;
  double jitter_y = 0.0;

  void validate() const;
  static AttributeParams random(SplitMix64& rng);
};

/// Landmarks in face-local units: origin at the face center, y down, unit =
/// face half-height.
facegeom::LandmarkSet local_landmarks(const IdentityParams& id, double mouth_curvature);

/// Maps face-local coordinates into a size x size image.
facegeom::AffineTransform placement(const AttributeParams& attr, int size);

struct Render {
  Image image;
  facegeom::LandmarkSet landmarks;
};

/// Anti-aliased (4x4 supersampled) RGB render with exact landmarks.
Render render_face(const IdentityParams& id, const AttributeParams& attr, int size);

inline constexpr int kDefaultRenderSize = 96;

/// Render number `index` of a face set: attributes drawn from the stream
/// derived from (seed, index).
Render render_sample(const IdentityParams& id, std::uint64_t seed, int index, int size = kDefaultRenderSize);

/// Smoothly varying attributes for frame k of a synthetic video.
AttributeParams sequence_attributes(int k);

/// n random-attribute renders aligned to the canonical frame. Render i uses
/// the stream derived from (seed, i), so sets are reproducible and prefixes
/// agree across different n.
FaceSet generate_face_set(const std::string& subject_id, const IdentityParams& id, int n,
                          std::uint64_t seed, int render_size = kDefaultRenderSize);

}  // namespace deidforge::toyfaces
