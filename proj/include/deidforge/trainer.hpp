#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "deidforge/fatm.hpp"
#include "deidforge/faceset.hpp"
#include "deidforge/image.hpp"
#include "deidforge/rng.hpp"
#include "deidforge/tensor.hpp"

namespace deidforge::trainer {

struct Interval {
  double lo;
  double hi;
  double draw(SplitMix64& rng) const { return lo == hi ? lo : rng.uniform(lo, hi); }
  bool valid() const { return lo <= hi; }
};

struct AugmentConfig {
  double rotation_deg = 10.0;           // uniform in [-r, r]
  Interval scale{0.95, 1.05};
  double mirror_probability = 0.5;
  bool random_crop = true;              // otherwise the center 64x64
  Interval brightness{-0.2, 0.2};       // additive offset
  Interval contrast{0.8, 1.25};         // gain about the image mean
  Interval channel_gain{0.9, 1.1};      // independent per channel
  Interval sharpness{-0.3, 0.3};        // unsharp-mask amount

  /// Everything collapsed: augment() reduces to the center crop.
  static AugmentConfig none();
  /// Throws InvalidConfigError for an inverted interval or bad probability.
  void validate() const;
};

/// 80x80x3 aligned face -> augmented 64x64x3 crop, clamped to [0, 1].
/// Order: rotation, scale, mirror, crop, brightness, contrast, per-channel
/// gain, sharpness. The geometric steps are resampled once.
Image augment(const Image& face80, const AugmentConfig& config, SplitMix64& rng);

/// n indices drawn uniformly with replacement.
std::vector<int> sample_indices(const FaceSet& set, int n, SplitMix64& rng);
std::vector<Image> sample_batch(const FaceSet& set, int n, SplitMix64& rng);

struct TrainConfig {
  int iterations = 1'000'000;
  int batch_size = 64;
  float learning_rate = 5e-5f;
  std::uint64_t seed = 0;
  AugmentConfig augment;
  int checkpoint_interval = 0;  // 0 disables periodic callbacks
  fatm::Architecture architecture = fatm::Architecture::paper();

  void validate() const;
};

struct LossRecord {
  int iteration = 0;
  std::string set_id;
  double mean_l1 = 0.0;
  bool operator==(const LossRecord&) const = default;
};

/// Everything needed to continue a run: the model, one optimizer per
/// encoder-decoder pair (same order as the face sets) and the number of
/// completed iterations.
struct TrainState {
  fatm::FatmModel model;
  std::vector<tensor::AdamState> optimizers;
  int iterations_done = 0;
  std::vector<LossRecord> history;
};

using CheckpointFn = std::function<void(const TrainState&)>;
// Called after every optimizer step with the iteration and face-set index.
using PhaseFn = std::function<void(const TrainState&, int iteration, std::size_t set_index)>;

/// Round-robin training: every iteration takes one batch from each face set
/// in order and steps E and that set's decoder. Resumes from `resume` when
/// given (its model must have decoders for exactly these subjects).
TrainState train(const std::vector<FaceSet>& face_sets, const TrainConfig& config,
                 std::optional<TrainState> resume = std::nullopt,
                 const CheckpointFn& on_checkpoint = {}, const PhaseFn& on_phase = {});

/// Checkpoint plus a sidecar "<path>.optim" holding the iteration count and
/// the optimizer moments.
void save_train_state(const TrainState& state, const std::filesystem::path& checkpoint);
TrainState load_train_state(const std::filesystem::path& checkpoint);

void write_loss_csv(const std::vector<LossRecord>& history, const std::filesystem::path& path);
std::vector<LossRecord> read_loss_csv(const std::filesystem::path& path);

}  // namespace deidforge::trainer
