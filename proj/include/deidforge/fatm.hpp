#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "deidforge/tensor.hpp"

namespace deidforge::fatm {

using tensor::Shape;
using tensor::Tape;
using tensor::Tensor;

inline constexpr int kFaceSize = 64;
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Layer widths of the attribute transfer model. The default is the full
/// published network; reduced() divides every width by a constant and keeps
/// the topology and the 64 -> 4 -> 64 spatial chain.
struct Architecture {
  std::array<int, 4> encoder_channels{128, 256, 512, 1024};
  int fc_hidden = 1024;
  // The code is fc2's output viewed as [4, 4, code_channels].
  int code_channels = 1024;
  std::array<int, 4> decoder_channels{512, 256, 128, 64};

  static Architecture paper() { return {}; }
  static Architecture reduced(int divisor);

  static constexpr int kBottleneckSide = kFaceSize / 16;
  int code_size() const { return kBottleneckSide * kBottleneckSide * code_channels; }
  int flat_size() const { return kBottleneckSide * kBottleneckSide * encoder_channels[3]; }

  bool operator==(const Architecture&) const = default;
};

// Parameter counts of the full-width network.
inline constexpr std::size_t kPaperEncoderParameters = 50'786'560;
inline constexpr std::size_t kPaperDecoderParameters = 25'076'163;

struct Layer {
  Tensor weight;
  Tensor bias;
};

struct EncoderParams {
  // 5x5, stride 2, pad 2.
  std::array<Layer, 4> conv;
  Layer fc1;
  Layer fc2;

  std::vector<Tensor> tensors() const;
  std::vector<std::pair<std::string, Tensor>> named_tensors() const;
  std::size_t parameter_count() const;
};

struct DecoderParams {
  // 3x3, stride 1, pad 1, each producing 4x the channels consumed by the
  // following pixel shuffle.
  std::array<Layer, 4> upscale;
  // 5x5, stride 1, pad 2, 3 output channels.
  Layer output;

  std::vector<Tensor> tensors() const;
  std::vector<std::pair<std::string, Tensor>> named_tensors() const;
  std::size_t parameter_count() const;
};

/// One shared encoder plus one decoder per donor, kept in insertion order.
class FatmModel {
 public:
  /// Fresh model with He-uniform weights (bound sqrt(6 / fan_in)) and zero biases.
  FatmModel(Architecture arch, const std::vector<std::string>& donor_ids, std::uint64_t seed);
  FatmModel(Architecture arch, EncoderParams encoder,
            std::vector<std::pair<std::string, DecoderParams>> decoders);

  const Architecture& architecture() const { return arch_; }
  const EncoderParams& encoder() const { return encoder_; }
  EncoderParams& encoder() { return encoder_; }

  const DecoderParams& decoder(std::string_view donor_id) const;
  DecoderParams& decoder(std::string_view donor_id);
  bool has_donor(std::string_view donor_id) const;
  std::vector<std::string> donor_ids() const;
  std::size_t donor_count() const { return decoders_.size(); }

  /// Encoder tensors followed by the donor's decoder tensors: the set one
  /// optimizer step updates when training on that donor's faces.
  std::vector<Tensor> pair_parameters(std::string_view donor_id) const;

  /// Deep copy; the clone shares no storage with this model.
  FatmModel clone() const;

 private:
  Architecture arch_;
  EncoderParams encoder_;
  std::vector<std::pair<std::string, DecoderParams>> decoders_;
};

/// Records the output shape of every layer, in execution order.
using ShapeTrace = std::vector<std::pair<std::string, Shape>>;

/// [64,64,3] -> [code_size], or batched [N,64,64,3] -> [N, code_size].
Tensor encode(const FatmModel& model, const Tensor& faces, Tape* tape = nullptr,
              ShapeTrace* trace = nullptr);

/// [code_size] -> [64,64,3] (or batched), sigmoid output in [0,1].
/// Throws MissingDonorError for an unknown donor id.
Tensor decode(const FatmModel& model, const Tensor& code, std::string_view donor_id,
              Tape* tape = nullptr, ShapeTrace* trace = nullptr);

/// Little-endian binary: "FATM", u32 version, u32 donor count, the donor ids
/// (u32 length + UTF-8 each), then tensor records until end of file
/// (u32 name length, name, u32 rank, u32 dims, raw f32 data).
void save_checkpoint(const FatmModel& model, const std::filesystem::path& path);
FatmModel load_checkpoint(const std::filesystem::path& path);

}  // namespace deidforge::fatm
