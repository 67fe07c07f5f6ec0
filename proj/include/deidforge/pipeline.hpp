#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "deidforge/facegeom.hpp"
#include "deidforge/fatm.hpp"
#include "deidforge/image.hpp"
#include "deidforge/maskblend.hpp"

namespace deidforge::pipeline {

using facegeom::LandmarkSet;

// ---- landmark files ---------------------------------------------------------

struct LandmarkRecord {
  std::string image;
  LandmarkSet points;
};

/// {"image": name, "points": [[x, y] x 68]}
std::string landmark_record_to_json(const LandmarkRecord& r);
LandmarkRecord landmark_record_from_json(const std::string& text);

void write_landmarks_jsonl(const std::vector<LandmarkRecord>& records, const std::filesystem::path& path);
std::vector<LandmarkRecord> read_landmarks_jsonl(const std::filesystem::path& path);

/// PNG files directly inside dir, sorted by file name.
std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir);

/// Landmarks for the images of a frame directory: "landmarks.jsonl" when
/// present, otherwise one "<stem>.json" per image. Keyed by image file name;
/// images without a record are simply absent.
std::map<std::string, LandmarkSet> load_directory_landmarks(const std::filesystem::path& dir);

// ---- per-face pipeline -----------------------------------------------------

struct FaceResult {
  Image output;
  facegeom::AffineTransform transform;  // original -> canonical
  double alignment_rms = 0.0;
  int mask_area = 0;                    // pixels inside the hull mask
  double sigma = 0.0;
  Image alpha;                          // feathered, zero outside the valid quad
};

/// align -> center crop -> encode -> decode(donor) -> unwarp -> mask ->
/// feather -> splice.
class Deidentifier {
 public:
  /// Throws MissingDonorError when the donor is not in the model.
  Deidentifier(const fatm::FatmModel& model, std::string donor,
               double feather_scale = maskblend::kFeatherScale);

  FaceResult process(const Image& image, const LandmarkSet& landmarks) const;

  const std::string& donor() const { return donor_; }

 private:
  const fatm::FatmModel& model_;
  std::string donor_;
  double feather_scale_;
};

/// The network half of the pipeline on an aligned 64x64 crop.
Image swap_face(const fatm::FatmModel& model, const Image& face64, const std::string& donor);

tensor::Tensor image_to_tensor(const Image& img);
Image tensor_to_image(const tensor::Tensor& t);

}  // namespace deidforge::pipeline
