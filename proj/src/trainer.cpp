#include "deidforge/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

#include "binary_io.hpp"
#include "deidforge/errors.hpp"
#include "deidforge/facegeom.hpp"

namespace deidforge::trainer {

using tensor::Tensor;

AugmentConfig AugmentConfig::none() {
  AugmentConfig c;
  c.rotation_deg = 0.0;
  c.scale = {1.0, 1.0};
  c.mirror_probability = 0.0;
  c.random_crop = false;
  c.brightness = {0.0, 0.0};
  c.contrast = {1.0, 1.0};
  c.channel_gain = {1.0, 1.0};
  c.sharpness = {0.0, 0.0};
  return c;
}

void AugmentConfig::validate() const {
  if (!(rotation_deg >= 0.0) || rotation_deg > 180.0)
    throw InvalidConfigError("rotation range must be in [0, 180] degrees");
  if (!scale.valid() || scale.lo <= 0.0) throw InvalidConfigError("scale interval invalid");
  if (!(mirror_probability >= 0.0 && mirror_probability <= 1.0))
    throw InvalidConfigError("mirror probability must be in [0, 1]");
  if (!brightness.valid() || !contrast.valid() || !channel_gain.valid() || !sharpness.valid())
    throw InvalidConfigError("augmentation interval has lo > hi");
  if (contrast.lo < 0.0 || channel_gain.lo < 0.0)
    throw InvalidConfigError("gains must be non-negative");
}

namespace {

// 3x3 binomial blur of one channel with edge replication.
void blur3(const Image& img, int c, std::vector<float>& out) {
  const int w = img.width, h = img.height;
  std::vector<float> tmp(static_cast<std::size_t>(w) * h);
  out.assign(tmp.size(), 0.0f);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const float l = img.at(std::max(x - 1, 0), y, c), m = img.at(x, y, c), r = img.at(std::min(x + 1, w - 1), y, c);
      tmp[static_cast<std::size_t>(y) * w + x] = 0.25f * l + 0.5f * m + 0.25f * r;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const float u = tmp[static_cast<std::size_t>(std::max(y - 1, 0)) * w + x];
      const float m = tmp[static_cast<std::size_t>(y) * w + x];
      const float d = tmp[static_cast<std::size_t>(std::min(y + 1, h - 1)) * w + x];
      out[static_cast<std::size_t>(y) * w + x] = 0.25f * u + 0.5f * m + 0.25f * d;
    }
}

}  // namespace

Image augment(const Image& face80, const AugmentConfig& cfg, SplitMix64& rng) {
  using facegeom::kCanonicalSize;
  using facegeom::kCropOffset;
  using facegeom::kCropSize;
  if (face80.width != kCanonicalSize || face80.height != kCanonicalSize || face80.channels != 3)
    throw InvalidInputError("augment expects an 80x80x3 face");

  // Draw order is fixed: it defines the stream.
  const double angle = cfg.rotation_deg > 0.0 ? rng.uniform(-cfg.rotation_deg, cfg.rotation_deg) : 0.0;
  const double scale = cfg.scale.draw(rng);
  const bool mirror = cfg.mirror_probability > 0.0 && rng.bernoulli(cfg.mirror_probability);
  const int max_offset = kCanonicalSize - kCropSize;
  int ox = kCropOffset, oy = kCropOffset;
  if (cfg.random_crop) {
    ox = static_cast<int>(rng.below(max_offset + 1));
    oy = static_cast<int>(rng.below(max_offset + 1));
  }
  const double brightness = cfg.brightness.draw(rng);
  const double contrast = cfg.contrast.draw(rng);
  double gain[3];
  for (double& g : gain) g = cfg.channel_gain.draw(rng);
  const double sharp = cfg.sharpness.draw(rng);

  // Output pixel -> crop position in the transformed frame -> undo mirror ->
  // undo rotation and scale about the frame center.
  const double c = (kCanonicalSize - 1) / 2.0;
  const double th = angle * std::numbers::pi / 180.0;
  const double ct = std::cos(th) / scale, st = std::sin(th) / scale;
  const bool identity = angle == 0.0 && scale == 1.0;
  Image out(kCropSize, kCropSize, 3);
  for (int y = 0; y < kCropSize; ++y)
    for (int x = 0; x < kCropSize; ++x) {
      double px = x + ox, py = y + oy;
      if (mirror) px = 2.0 * c - px;
      double sx = px, sy = py;
      if (!identity) {
        const double dx = px - c, dy = py - c;
        sx = c + ct * dx + st * dy;
        sy = c - st * dx + ct * dy;
      }
      for (int ch = 0; ch < 3; ++ch) out.at(x, y, ch) = facegeom::sample_bilinear(face80, sx, sy, ch);
    }

  if (brightness != 0.0)
    for (float& v : out.pixels) v = static_cast<float>(v + brightness);
  if (contrast != 1.0) {
    double mean = 0.0;
    for (float v : out.pixels) mean += v;
    mean /= static_cast<double>(out.pixels.size());
    for (float& v : out.pixels) v = static_cast<float>(mean + contrast * (v - mean));
  }
  if (gain[0] != 1.0 || gain[1] != 1.0 || gain[2] != 1.0)
    for (std::size_t i = 0; i < out.pixels.size(); ++i)
      out.pixels[i] = static_cast<float>(out.pixels[i] * gain[i % 3]);
  if (sharp != 0.0) {
    std::vector<float> blurred;
    for (int ch = 0; ch < 3; ++ch) {
      blur3(out, ch, blurred);
      for (int y = 0; y < kCropSize; ++y)
        for (int x = 0; x < kCropSize; ++x) {
          float& v = out.at(x, y, ch);
          v = static_cast<float>(v + sharp * (v - blurred[static_cast<std::size_t>(y) * kCropSize + x]));
        }
    }
  }
  clamp01(out);
  return out;
}

std::vector<int> sample_indices(const FaceSet& set, int n, SplitMix64& rng) {
  if (set.faces.empty()) throw InvalidDataError("cannot sample from empty face set '" + set.subject_id + "'");
  if (n < 1) throw InvalidParameterError("batch size must be at least 1");
  std::vector<int> idx(n);
  for (int& i : idx) i = static_cast<int>(rng.below(set.faces.size()));
  return idx;
}

std::vector<Image> sample_batch(const FaceSet& set, int n, SplitMix64& rng) {
  std::vector<Image> out;
  for (int i : sample_indices(set, n, rng)) out.push_back(set.faces[i]);
  return out;
}

void TrainConfig::validate() const {
  if (iterations < 1) throw InvalidConfigError("iterations must be at least 1");
  if (batch_size < 1) throw InvalidConfigError("batch size must be at least 1");
  if (!(learning_rate > 0.0f) || !std::isfinite(learning_rate))
    throw InvalidConfigError("learning rate must be positive");
  if (checkpoint_interval < 0) throw InvalidConfigError("checkpoint interval must be >= 0");
  augment.validate();
}

TrainState train(const std::vector<FaceSet>& sets, const TrainConfig& cfg, std::optional<TrainState> resume,
                 const CheckpointFn& on_checkpoint, const PhaseFn& on_phase) {
  cfg.validate();
  if (sets.size() < 2) throw InvalidConfigError("training needs at least 2 face sets");
  std::vector<std::string> ids;
  for (const FaceSet& s : sets) {
    s.validate();
    if (s.faces.front().width != facegeom::kCanonicalSize || s.faces.front().height != facegeom::kCanonicalSize ||
        s.faces.front().channels != 3)
      throw InvalidDataError("face set '" + s.subject_id + "' must hold 80x80x3 faces");
    ids.push_back(s.subject_id);
  }

  TrainState st = resume ? std::move(*resume)
                         : TrainState{fatm::FatmModel(cfg.architecture, ids, cfg.seed), {}, 0, {}};
  if (st.model.donor_ids() != ids)
    throw InvalidConfigError("resumed model's donors do not match the face sets");
  if (st.optimizers.empty())
    st.optimizers.assign(sets.size(), tensor::AdamState(tensor::AdamConfig{cfg.learning_rate}));
  if (st.optimizers.size() != sets.size())
    throw InvalidConfigError("resumed optimizer count does not match the face sets");
  for (auto& o : st.optimizers) o.config.learning_rate = cfg.learning_rate;

  const int n = cfg.batch_size;
  constexpr int side = facegeom::kCropSize;
  const std::size_t face_floats = static_cast<std::size_t>(side) * side * 3;
  for (int it = st.iterations_done; it < cfg.iterations; ++it) {
    for (std::size_t s = 0; s < sets.size(); ++s) {
      SplitMix64 pick = SplitMix64::derive(cfg.seed, {static_cast<std::uint64_t>(it), s, 0});
      const std::vector<int> idx = sample_indices(sets[s], n, pick);
      Tensor batch({n, side, side, 3});
      for (int b = 0; b < n; ++b) {
        SplitMix64 aug = SplitMix64::derive(cfg.seed, {static_cast<std::uint64_t>(it), s,
                                                       static_cast<std::uint64_t>(b) + 1});
        const Image face = augment(sets[s].faces[idx[b]], cfg.augment, aug);
        std::copy(face.pixels.begin(), face.pixels.end(), batch.data().begin() + b * face_floats);
      }
      tensor::Tape tape;
      Tensor code = fatm::encode(st.model, batch, &tape);
      Tensor recon = fatm::decode(st.model, code, ids[s], &tape);
      Tensor loss = tensor::l1_loss(recon, batch, &tape);
      tensor::backward(tape, loss);
      std::vector<Tensor> params = st.model.pair_parameters(ids[s]);
      tensor::adam_step(params, st.optimizers[s]);
      const double l = loss.item();
      if (!std::isfinite(l))
        throw InvalidDataError("non-finite loss at iteration " + std::to_string(it) + " on '" + ids[s] + "'");
      st.history.push_back({it, ids[s], l});
      if (on_phase) on_phase(st, it, s);
    }
    st.iterations_done = it + 1;
    if (on_checkpoint && cfg.checkpoint_interval > 0 && st.iterations_done % cfg.checkpoint_interval == 0)
      on_checkpoint(st);
  }
  return st;
}

namespace {

constexpr char kOptimMagic[4] = {'F', 'O', 'P', 'T'};
constexpr std::uint32_t kOptimVersion = 1;

std::filesystem::path sidecar(const std::filesystem::path& checkpoint) {
  auto p = checkpoint;
  p += ".optim";
  return p;
}

}  // namespace

void save_train_state(const TrainState& st, const std::filesystem::path& checkpoint) {
  fatm::save_checkpoint(st.model, checkpoint);
  std::ofstream os(sidecar(checkpoint), std::ios::binary);
  if (!os) throw IoError("cannot write optimizer state next to " + checkpoint.string());
  os.write(kOptimMagic, 4);
  io::write_le<std::uint32_t>(os, kOptimVersion);
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(st.iterations_done));
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(st.optimizers.size()));
  for (const auto& o : st.optimizers) {
    io::write_le<std::uint64_t>(os, o.step);
    io::write_le(os, o.config.learning_rate);
    io::write_le(os, o.config.beta1);
    io::write_le(os, o.config.beta2);
    io::write_le(os, o.config.epsilon);
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(o.m.size()));
    for (std::size_t i = 0; i < o.m.size(); ++i) {
      io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(o.m[i].size()));
      io::write_floats(os, o.m[i]);
      io::write_floats(os, o.v[i]);
    }
  }
  if (!os) throw IoError("failed writing optimizer state next to " + checkpoint.string());
}

TrainState load_train_state(const std::filesystem::path& checkpoint) {
  TrainState st{fatm::load_checkpoint(checkpoint), {}, 0, {}};
  const auto path = sidecar(checkpoint);
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("missing optimizer state " + path.string());
  char magic[4];
  std::uint32_t version = 0, iters = 0, count = 0;
  if (!is.read(magic, 4) || !std::equal(magic, magic + 4, kOptimMagic))
    throw CorruptHeaderError("not an optimizer state file: " + path.string());
  if (!io::read_le(is, version)) throw CorruptHeaderError("optimizer state header truncated");
  if (version != kOptimVersion) throw UnknownVersionError("unsupported optimizer state version");
  if (!io::read_le(is, iters) || !io::read_le(is, count) || count != st.model.donor_count())
    throw CorruptHeaderError("optimizer state does not match the checkpoint");
  st.iterations_done = static_cast<int>(iters);
  for (std::uint32_t k = 0; k < count; ++k) {
    tensor::AdamState o;
    std::uint32_t tensors = 0;
    if (!io::read_le(is, o.step) || !io::read_le(is, o.config.learning_rate) || !io::read_le(is, o.config.beta1) ||
        !io::read_le(is, o.config.beta2) || !io::read_le(is, o.config.epsilon) || !io::read_le(is, tensors))
      throw TruncatedDataError("optimizer state truncated");
    if (tensors > 4096) throw CorruptHeaderError("optimizer state tensor count invalid");
    o.m.resize(tensors);
    o.v.resize(tensors);
    for (std::uint32_t i = 0; i < tensors; ++i) {
      std::uint32_t len = 0;
      if (!io::read_le(is, len) || len > (1u << 30)) throw TruncatedDataError("optimizer state truncated");
      o.m[i].resize(len);
      o.v[i].resize(len);
      if (!io::read_floats(is, o.m[i]) || !io::read_floats(is, o.v[i]))
        throw TruncatedDataError("optimizer state truncated");
    }
    st.optimizers.push_back(std::move(o));
  }
  return st;
}

void write_loss_csv(const std::vector<LossRecord>& history, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << "iteration,set_id,mean_l1\n";
  char buf[64];
  for (const auto& r : history) {
    auto res = std::to_chars(buf, buf + sizeof buf, r.mean_l1);
    os << r.iteration << ',' << r.set_id << ',' << std::string_view(buf, res.ptr - buf) << '\n';
  }
  if (!os) throw IoError("failed writing " + path.string());
}

std::vector<LossRecord> read_loss_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  std::string line;
  std::getline(is, line);
  if (line != "iteration,set_id,mean_l1") throw InvalidDataError("unexpected loss CSV header in " + path.string());
  std::vector<LossRecord> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto a = line.find(','), b = line.rfind(',');
    if (a == std::string::npos || a == b) throw InvalidDataError("malformed loss CSV line: " + line);
    LossRecord r;
    r.iteration = std::stoi(line.substr(0, a));
    r.set_id = line.substr(a + 1, b - a - 1);
    const char* first = line.data() + b + 1;
    if (std::from_chars(first, line.data() + line.size(), r.mean_l1).ec != std::errc())
      throw InvalidDataError("malformed loss value: " + line);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace deidforge::trainer
