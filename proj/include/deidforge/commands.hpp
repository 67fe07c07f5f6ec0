#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "deidforge/toyfaces.hpp"
#include "deidforge/trainer.hpp"

namespace deidforge::commands {

namespace fs = std::filesystem;

struct TrainSection {
  std::vector<fs::path> face_sets;  // one directory per subject; its name is the subject id
  int iterations = 5000;
  int batch_size = 64;
  double learning_rate = 5e-5;
  int width_divisor = 1;            // 1 = full published widths
  int checkpoint_interval = 0;
  bool resume = false;
  trainer::AugmentConfig augment;
};

struct DeidSection {
  fs::path checkpoint;
  fs::path input;                   // frame directory
  std::optional<fs::path> landmarks;  // defaults to the frame directory's own records
  double feather_scale = 0.02;
  bool write_masks = false;
};

struct GalleryEntry {
  std::string id;
  fs::path dir;
};

struct EvalSection {
  fs::path checkpoint;
  fs::path probes;                  // frames of one subject, with landmarks
  std::vector<GalleryEntry> gallery;  // verifier training data
  double feather_scale = 0.02;
};

struct ToyIdentity {
  std::string id;
  std::optional<toyfaces::IdentityParams> params;  // random from the seed when absent
};

struct FramesSection {
  std::string identity;
  int count = 0;
  int size = 256;
};

struct GenToySection {
  std::vector<ToyIdentity> identities;
  int images = 500;
  int render_size = toyfaces::kDefaultRenderSize;
  std::optional<FramesSection> frames;
};

/// One JSON file configures every command; each reads its own section.
/// Relative paths resolve against the config file's directory.
struct Config {
  std::uint64_t seed = 0;
  fs::path out = "out";
  std::optional<std::string> donor;
  TrainSection train;
  DeidSection deid;
  EvalSection eval;
  GenToySection gen_toy;

  /// Throws InvalidConfigError on unknown keys or wrong types.
  static Config parse(const std::string& json_text, const fs::path& base_dir);
  static Config load(const fs::path& path);
};

/// Loads a face-set directory and aligns every image. The error for a
/// missing landmark record names the image.
FaceSet load_face_set(const fs::path& dir);

/// Writes out/model.fatm (+ .optim) and out/loss.csv.
trainer::TrainState cmd_train(const Config& cfg);

struct DeidSummary {
  int processed = 0;
  int skipped = 0;
  int failed = 0;
  std::vector<double> seconds_per_face;
};

/// Writes the de-identified frames, out/manifest.json (deterministic) and
/// out/timing.json (wall-clock per face).
DeidSummary cmd_deid(const Config& cfg);

/// Writes out/report.json with the paired and self protocols, and one pair
/// CSV for each.
void cmd_eval(const Config& cfg);

/// Writes out/sets/<id>/ (renders + landmarks.jsonl) for every identity and,
/// if configured, out/frames/ as a frame sequence of one identity.
void cmd_gen_toy(const Config& cfg);

}  // namespace deidforge::commands
