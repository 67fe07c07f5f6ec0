#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "deidforge/image.hpp"

namespace deidforge::evalkit {

inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimK1 = 0.01;
inline constexpr double kSsimK2 = 0.03;

/// Normalized 11x11 Gaussian window (sigma 1.5), row-major.
std::vector<double> ssim_window();

/// Mean SSIM over all fully contained 11x11 windows, on ITU-R 601 luma with
/// unit dynamic range. Throws InvalidInputError on a size mismatch or an
/// image smaller than the window.
double ssim(const Image& a, const Image& b);

struct Verdict {
  bool same = false;
  double score = 0.0;  // in [0, 1]
};

class VerifierInterface {
 public:
  virtual ~VerifierInterface() = default;
  virtual Verdict verify(const Image& a, const Image& b) const = 0;
};

/// Nearest-centroid verifier on 16x16 grayscale thumbnails of aligned faces
/// (the 64x64 center crops of the canonical frame); on unaligned frames pose
/// swamps identity. Each embedding is
/// zero-mean and unit-norm, which discounts global illumination. Two images
/// are "same" when they share a nearest centroid and both lie within tau of
/// it.
class ToyVerifier : public VerifierInterface {
 public:
  static constexpr int kThumb = 16;

  struct Identity {
    std::string id;
    std::vector<Image> images;
  };

  /// Builds centroids and sets tau to `margin` times the `quantile` of
  /// training distances to their own centroid.
  static ToyVerifier train(const std::vector<Identity>& identities, double quantile = 0.99,
                           double margin = 1.1);

  static std::vector<double> embed(const Image& img);

  /// Nearest centroid id and its distance.
  std::pair<std::string, double> classify(const Image& img) const;

  Verdict verify(const Image& a, const Image& b) const override;

  double threshold() const { return tau_; }
  const std::vector<std::string>& ids() const { return ids_; }

 private:
  std::vector<std::string> ids_;
  std::vector<std::vector<double>> centroids_;
  double tau_ = 0.0;
};

struct PairRecord {
  int index = 0;
  bool ok = true;
  std::string error;
  bool pre_same = false;
  bool post_same = false;
  double pre_score = 0.0;
  double post_score = 0.0;
  double ssim = 0.0;  // de-identified first image vs its original
  bool operator==(const PairRecord&) const = default;
};

struct EvalReport {
  int n_pairs = 0;
  int n_failed = 0;
  double pre_deid_same_rate = 0.0;
  double post_deid_same_rate = 0.0;
  double effective_rate = 0.0;
  double ssim_mean = 0.0;
  double ssim_std = 0.0;
  std::vector<PairRecord> pairs;

  /// Recomputes the aggregate fields from `pairs`.
  void recompute();
  bool operator==(const EvalReport&) const = default;
};

using DeidFn = std::function<Image(const Image&)>;
// Same, but also told which pair it is working on, for callers that keep
// per-image side data such as landmarks.
using IndexedDeidFn = std::function<Image(const Image&, std::size_t pair_index)>;

// What the verifier sees of an image: slot 0 is the pair's first image (or
// its de-identified version), slot 1 the second. Used to align full frames.
using VerifierView = std::function<Image(const Image&, std::size_t pair_index, int slot)>;

/// For each pair (a, b): verify(a, b) before, verify(deid(a), b) after, each
/// image passed through `view` when one is given. SSIM compares deid(a) with
/// a as whole images. A pair whose verifier or deid call throws is recorded
/// with its error and left out of the rates. With b an untouched copy of a
/// this is the self de-identification protocol.
EvalReport deid_effective_rate(const std::vector<std::pair<Image, Image>>& pairs, const DeidFn& deid,
                               const VerifierInterface& verifier, const VerifierView& view = {});
EvalReport deid_effective_rate(const std::vector<std::pair<Image, Image>>& pairs, const IndexedDeidFn& deid,
                               const VerifierInterface& verifier, const VerifierView& view = {});

std::string report_to_json(const EvalReport& report);
EvalReport report_from_json(const std::string& text);
void write_pairs_csv(const EvalReport& report, const std::filesystem::path& path);

}  // namespace deidforge::evalkit
