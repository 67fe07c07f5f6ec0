#include "deidforge/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "deidforge/errors.hpp"
#include "json.hpp"

namespace deidforge::pipeline {

using nlohmann::json;

namespace {

LandmarkRecord record_from(const json& j) {
  LandmarkRecord r;
  r.image = j.at("image").get<std::string>();
  const auto& pts = j.at("points");
  if (!pts.is_array()) throw InvalidInputError("landmark points must be an array");
  std::vector<facegeom::Point> p;
  for (const auto& xy : pts) {
    if (!xy.is_array() || xy.size() != 2) throw InvalidInputError("each landmark must be [x, y]");
    p.push_back({xy[0].get<double>(), xy[1].get<double>()});
  }
  r.points = LandmarkSet(std::move(p));
  return r;
}

json record_to(const LandmarkRecord& r) {
  json pts = json::array();
  for (const auto& p : r.points.points()) pts.push_back({p.x, p.y});
  json j;
  j["image"] = r.image;
  j["points"] = std::move(pts);
  return j;
}

}  // namespace

std::string landmark_record_to_json(const LandmarkRecord& r) { return record_to(r).dump(); }

LandmarkRecord landmark_record_from_json(const std::string& text) {
  try {
    return record_from(json::parse(text));
  } catch (const json::exception& e) {
    throw InvalidInputError(std::string("malformed landmark record: ") + e.what());
  }
}

void write_landmarks_jsonl(const std::vector<LandmarkRecord>& records, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  for (const auto& r : records) os << landmark_record_to_json(r) << '\n';
  if (!os) throw IoError("failed writing " + path.string());
}

std::vector<LandmarkRecord> read_landmarks_jsonl(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  std::vector<LandmarkRecord> out;
  std::string line;
  int n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(landmark_record_from_json(line));
    } catch (const InvalidInputError& e) {
      throw InvalidInputError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<std::filesystem::path> out;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path());
  std::sort(out.begin(), out.end(),
            [](const auto& a, const auto& b) { return a.filename().string() < b.filename().string(); });
  return out;
}

std::map<std::string, LandmarkSet> load_directory_landmarks(const std::filesystem::path& dir) {
  std::map<std::string, LandmarkSet> out;
  const auto jsonl = dir / "landmarks.jsonl";
  if (std::filesystem::exists(jsonl)) {
    for (auto& r : read_landmarks_jsonl(jsonl)) out[r.image] = std::move(r.points);
    return out;
  }
  for (const auto& img : list_images(dir)) {
    auto side = img;
    side.replace_extension(".json");
    if (!std::filesystem::exists(side)) continue;
    std::ifstream is(side);
    std::stringstream ss;
    ss << is.rdbuf();
    LandmarkRecord r;
    try {
      r = landmark_record_from_json(ss.str());
    } catch (const InvalidInputError& e) {
      throw InvalidInputError(side.string() + ": " + e.what());
    }
    out[img.filename().string()] = std::move(r.points);
  }
  return out;
}

tensor::Tensor image_to_tensor(const Image& img) {
  return tensor::Tensor({img.height, img.width, img.channels}, img.pixels);
}

Image tensor_to_image(const tensor::Tensor& t) {
  if (t.rank() != 3) throw ShapeError("expected an HWC tensor");
  Image img(t.dim(1), t.dim(0), t.dim(2));
  std::copy(t.data().begin(), t.data().end(), img.pixels.begin());
  return img;
}

Image swap_face(const fatm::FatmModel& model, const Image& face64, const std::string& donor) {
  return tensor_to_image(fatm::decode(model, fatm::encode(model, image_to_tensor(face64)), donor));
}

Deidentifier::Deidentifier(const fatm::FatmModel& model, std::string donor, double feather_scale)
    : model_(model), donor_(std::move(donor)), feather_scale_(feather_scale) {
  if (!model_.has_donor(donor_)) throw MissingDonorError(donor_);
  if (!(feather_scale_ > 0.0)) throw InvalidConfigError("feather scale must be positive");
}

FaceResult Deidentifier::process(const Image& image, const LandmarkSet& landmarks) const {
  if (image.channels != 3) throw InvalidInputError("pipeline expects RGB images");
  FaceResult r;
  const facegeom::Alignment al = facegeom::align_face(image, landmarks);
  r.transform = al.transform;
  r.alignment_rms = al.rms;

  const Image synth64 = swap_face(model_, facegeom::center_crop(al.face), donor_);
  facegeom::Unwarped back = facegeom::unwarp_face(synth64, al.transform, image.width, image.height);

  const Image mask = maskblend::build_mask(landmarks, image.width, image.height);
  for (float v : mask.pixels) r.mask_area += v != 0.0f;
  r.sigma = maskblend::feather_sigma(maskblend::face_width(landmarks), feather_scale_);
  r.alpha = maskblend::feather_sigma_px(mask, r.sigma);

  // Outside the warped crop there is nothing synthesized: keep the original.
  const std::size_t npix = static_cast<std::size_t>(image.width) * image.height;
  for (std::size_t i = 0; i < npix; ++i) {
    if (back.valid[i]) continue;
    r.alpha.pixels[i] = 0.0f;
    for (int c = 0; c < 3; ++c) back.image.pixels[i * 3 + c] = image.pixels[i * 3 + c];
  }
  r.output = maskblend::splice(image, back.image, r.alpha);
  return r;
}

}  // namespace deidforge::pipeline
