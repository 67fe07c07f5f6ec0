#include "deidforge/fatm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include "binary_io.hpp"
#include "deidforge/errors.hpp"
#include "deidforge/rng.hpp"

namespace deidforge::fatm {

namespace {

constexpr char kMagic[4] = {'F', 'A', 'T', 'M'};
constexpr int kEncoderKernel = 5;
constexpr int kDecoderKernel = 3;
constexpr int kOutputKernel = 5;

Layer make_conv(int k, int cin, int cout, SplitMix64 rng) {
  Layer layer{Tensor({k, k, cin, cout}), Tensor({cout})};
  const double bound = std::sqrt(6.0 / static_cast<double>(k * k * cin));
  for (float& w : layer.weight.data()) w = static_cast<float>(rng.uniform(-bound, bound));
  layer.weight.set_requires_grad(true);
  layer.bias.set_requires_grad(true);
  return layer;
}

Layer make_dense(int n_in, int n_out, SplitMix64 rng) {
  Layer layer{Tensor({n_in, n_out}), Tensor({n_out})};
  const double bound = std::sqrt(6.0 / static_cast<double>(n_in));
  for (float& w : layer.weight.data()) w = static_cast<float>(rng.uniform(-bound, bound));
  layer.weight.set_requires_grad(true);
  layer.bias.set_requires_grad(true);
  return layer;
}

EncoderParams make_encoder(const Architecture& arch, std::uint64_t seed) {
  EncoderParams enc;
  int cin = 3;
  for (int i = 0; i < 4; ++i) {
    enc.conv[i] = make_conv(kEncoderKernel, cin, arch.encoder_channels[i],
                            SplitMix64::derive(seed, {0, static_cast<std::uint64_t>(i)}));
    cin = arch.encoder_channels[i];
  }
  enc.fc1 = make_dense(arch.flat_size(), arch.fc_hidden, SplitMix64::derive(seed, {0, 4}));
  enc.fc2 = make_dense(arch.fc_hidden, arch.code_size(), SplitMix64::derive(seed, {0, 5}));
  return enc;
}

DecoderParams make_decoder(const Architecture& arch, std::uint64_t seed, std::uint64_t donor_index) {
  DecoderParams dec;
  int cin = arch.code_channels;
  for (int i = 0; i < 4; ++i) {
    dec.upscale[i] =
        make_conv(kDecoderKernel, cin, 4 * arch.decoder_channels[i],
                  SplitMix64::derive(seed, {1, donor_index, static_cast<std::uint64_t>(i)}));
    cin = arch.decoder_channels[i];
  }
  dec.output = make_conv(kOutputKernel, cin, 3, SplitMix64::derive(seed, {1, donor_index, 4}));
  return dec;
}

std::size_t count(const std::vector<Tensor>& tensors) {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.size();
  return n;
}

Layer deep_copy(const Layer& layer) {
  Layer out{layer.weight.clone(), layer.bias.clone()};
  out.weight.set_requires_grad(layer.weight.requires_grad());
  out.bias.set_requires_grad(layer.bias.requires_grad());
  return out;
}

void note(ShapeTrace* trace, const char* name, const Tensor& t) {
  if (trace) trace->emplace_back(name, t.shape());
}

}  // namespace

Architecture Architecture::reduced(int divisor) {
  if (divisor < 1) throw InvalidConfigError("width divisor must be >= 1");
  Architecture arch;
  auto shrink = [divisor](int width) {
    if (width % divisor != 0)
      throw InvalidConfigError("width divisor " + std::to_string(divisor) + " does not divide " +
                               std::to_string(width));
    return width / divisor;
  };
  for (auto& c : arch.encoder_channels) c = shrink(c);
  for (auto& c : arch.decoder_channels) c = shrink(c);
  arch.fc_hidden = shrink(arch.fc_hidden);
  arch.code_channels = shrink(arch.code_channels);
  return arch;
}

std::vector<Tensor> EncoderParams::tensors() const {
  std::vector<Tensor> out;
  for (const auto& [name, t] : named_tensors()) out.push_back(t);
  return out;
}

std::vector<std::pair<std::string, Tensor>> EncoderParams::named_tensors() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (int i = 0; i < 4; ++i) {
    const std::string base = "conv" + std::to_string(i + 1);
    out.emplace_back(base + ".weight", conv[i].weight);
    out.emplace_back(base + ".bias", conv[i].bias);
  }
  out.emplace_back("fc1.weight", fc1.weight);
  out.emplace_back("fc1.bias", fc1.bias);
  out.emplace_back("fc2.weight", fc2.weight);
  out.emplace_back("fc2.bias", fc2.bias);
  return out;
}

std::size_t EncoderParams::parameter_count() const { return count(tensors()); }

std::vector<Tensor> DecoderParams::tensors() const {
  std::vector<Tensor> out;
  for (const auto& [name, t] : named_tensors()) out.push_back(t);
  return out;
}

std::vector<std::pair<std::string, Tensor>> DecoderParams::named_tensors() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (int i = 0; i < 4; ++i) {
    const std::string base = "upscale" + std::to_string(i + 1);
    out.emplace_back(base + ".weight", upscale[i].weight);
    out.emplace_back(base + ".bias", upscale[i].bias);
  }
  out.emplace_back("output.weight", output.weight);
  out.emplace_back("output.bias", output.bias);
  return out;
}

std::size_t DecoderParams::parameter_count() const { return count(tensors()); }

// ---------------------------------------------------------------------------
// FatmModel

FatmModel::FatmModel(Architecture arch, const std::vector<std::string>& donor_ids,
                     std::uint64_t seed)
    : arch_(arch), encoder_(make_encoder(arch, seed)) {
  if (donor_ids.empty()) throw InvalidConfigError("model needs at least one donor");
  for (std::size_t i = 0; i < donor_ids.size(); ++i) {
    if (donor_ids[i].empty()) throw InvalidConfigError("donor ids must be nonempty");
    if (has_donor(donor_ids[i]))
      throw InvalidConfigError("duplicate donor id '" + donor_ids[i] + "'");
    decoders_.emplace_back(donor_ids[i], make_decoder(arch, seed, i));
  }
}

FatmModel::FatmModel(Architecture arch, EncoderParams encoder,
                     std::vector<std::pair<std::string, DecoderParams>> decoders)
    : arch_(arch), encoder_(std::move(encoder)) {
  if (decoders.empty()) throw InvalidConfigError("model needs at least one donor");
  for (auto& [id, dec] : decoders) {
    if (id.empty()) throw InvalidConfigError("donor ids must be nonempty");
    if (has_donor(id)) throw InvalidConfigError("duplicate donor id '" + id + "'");
    decoders_.emplace_back(id, std::move(dec));
  }
}

const DecoderParams& FatmModel::decoder(std::string_view donor_id) const {
  for (const auto& [id, dec] : decoders_)
    if (id == donor_id) return dec;
  throw MissingDonorError(std::string(donor_id));
}

DecoderParams& FatmModel::decoder(std::string_view donor_id) {
  for (auto& [id, dec] : decoders_)
    if (id == donor_id) return dec;
  throw MissingDonorError(std::string(donor_id));
}

bool FatmModel::has_donor(std::string_view donor_id) const {
  return std::any_of(decoders_.begin(), decoders_.end(),
                     [&](const auto& entry) { return entry.first == donor_id; });
}

std::vector<std::string> FatmModel::donor_ids() const {
  std::vector<std::string> ids;
  for (const auto& [id, dec] : decoders_) ids.push_back(id);
  return ids;
}

std::vector<Tensor> FatmModel::pair_parameters(std::string_view donor_id) const {
  std::vector<Tensor> params = encoder_.tensors();
  for (const auto& t : decoder(donor_id).tensors()) params.push_back(t);
  return params;
}

FatmModel FatmModel::clone() const {
  EncoderParams enc;
  for (int i = 0; i < 4; ++i) enc.conv[i] = deep_copy(encoder_.conv[i]);
  enc.fc1 = deep_copy(encoder_.fc1);
  enc.fc2 = deep_copy(encoder_.fc2);
  std::vector<std::pair<std::string, DecoderParams>> decs;
  for (const auto& [id, dec] : decoders_) {
    DecoderParams copy;
    for (int i = 0; i < 4; ++i) copy.upscale[i] = deep_copy(dec.upscale[i]);
    copy.output = deep_copy(dec.output);
    decs.emplace_back(id, std::move(copy));
  }
  return FatmModel(arch_, std::move(enc), std::move(decs));
}

// ---------------------------------------------------------------------------
// Forward passes

Tensor encode(const FatmModel& model, const Tensor& faces, Tape* tape, ShapeTrace* trace) {
  const bool batched = faces.rank() == 4;
  if (!(faces.rank() == 3 || batched) || faces.dim(-3) != kFaceSize ||
      faces.dim(-2) != kFaceSize || faces.dim(-1) != 3)
    throw ShapeError("encode expects a [64,64,3] face (optionally batched), got " +
                     tensor::to_string(faces.shape()));
  const auto& enc = model.encoder();
  const auto& arch = model.architecture();
  static constexpr const char* kConvNames[] = {"conv1", "conv2", "conv3", "conv4"};

  Tensor x = faces;
  for (int i = 0; i < 4; ++i) {
    x = tensor::leaky_relu(tensor::conv2d(x, enc.conv[i].weight, enc.conv[i].bias, 2, 2, tape),
                           tape);
    note(trace, kConvNames[i], x);
  }
  const int n = batched ? faces.dim(0) : 1;
  x = tensor::reshape(x, batched ? Shape{n, arch.flat_size()} : Shape{arch.flat_size()}, tape);
  note(trace, "flatten", x);
  x = tensor::leaky_relu(tensor::fully_connected(x, enc.fc1.weight, enc.fc1.bias, tape), tape);
  note(trace, "fc1", x);
  x = tensor::fully_connected(x, enc.fc2.weight, enc.fc2.bias, tape);
  note(trace, "fc2", x);
  return x;
}

Tensor decode(const FatmModel& model, const Tensor& code, std::string_view donor_id, Tape* tape,
              ShapeTrace* trace) {
  const auto& dec = model.decoder(donor_id);
  const auto& arch = model.architecture();
  const bool batched = code.rank() == 2;
  if (!(code.rank() == 1 || batched) || code.dim(-1) != arch.code_size())
    throw ShapeError("decode expects a code of length " + std::to_string(arch.code_size()) +
                     ", got " + tensor::to_string(code.shape()));
  constexpr int side = Architecture::kBottleneckSide;
  const int n = batched ? code.dim(0) : 1;
  Tensor x = tensor::reshape(
      code,
      batched ? Shape{n, side, side, arch.code_channels} : Shape{side, side, arch.code_channels},
      tape);
  note(trace, "code", x);
  static constexpr const char* kUpNames[] = {"upscale1", "upscale2", "upscale3", "upscale4"};
  for (int i = 0; i < 4; ++i) {
    x = tensor::conv2d(x, dec.upscale[i].weight, dec.upscale[i].bias, 1, 1, tape);
    x = tensor::pixel_shuffle(tensor::leaky_relu(x, tape), tape);
    note(trace, kUpNames[i], x);
  }
  x = tensor::sigmoid(tensor::conv2d(x, dec.output.weight, dec.output.bias, 1, 2, tape), tape);
  note(trace, "output", x);
  return x;
}

// ---------------------------------------------------------------------------
// Checkpoint

void save_checkpoint(const FatmModel& model, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open checkpoint for writing: " + path.string());
  os.write(kMagic, 4);
  io::write_le<std::uint32_t>(os, kCheckpointVersion);
  const auto ids = model.donor_ids();
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ids.size()));
  for (const auto& id : ids) io::write_string(os, id);

  auto write_tensor = [&os](const std::string& name, const Tensor& t) {
    io::write_string(os, name);
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    io::write_floats(os, t.data());
  };
  for (const auto& [name, t] : model.encoder().named_tensors()) write_tensor("encoder." + name, t);
  for (const auto& id : ids)
    for (const auto& [name, t] : model.decoder(id).named_tensors())
      write_tensor("decoder." + id + "." + name, t);
  if (!os) throw IoError("failed writing checkpoint: " + path.string());
}

namespace {

Tensor take(std::map<std::string, Tensor>& tensors, const std::string& name, const Shape& shape) {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw CheckpointError("checkpoint is missing tensor '" + name + "'");
  if (it->second.shape() != shape)
    throw CheckpointError("checkpoint tensor '" + name + "' has shape " +
                          tensor::to_string(it->second.shape()) + ", expected " +
                          tensor::to_string(shape));
  Tensor t = it->second;
  tensors.erase(it);
  t.set_requires_grad(true);
  return t;
}

Layer take_layer(std::map<std::string, Tensor>& tensors, const std::string& base,
                 const Shape& weight_shape) {
  Layer layer;
  layer.weight = take(tensors, base + ".weight", weight_shape);
  layer.bias = take(tensors, base + ".bias", Shape{weight_shape.back()});
  return layer;
}

int dim_of(const std::map<std::string, Tensor>& tensors, const std::string& name, int axis) {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw CheckpointError("checkpoint is missing tensor '" + name + "'");
  const auto& s = it->second.shape();
  if (axis >= static_cast<int>(s.size()))
    throw CheckpointError("checkpoint tensor '" + name + "' has unexpected rank");
  return s[static_cast<std::size_t>(axis)];
}

}  // namespace

FatmModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path.string());

  char magic[4] = {};
  if (!is.read(magic, 4) || !std::equal(magic, magic + 4, kMagic))
    throw CorruptHeaderError("not a FATM checkpoint (bad magic): " + path.string());
  std::uint32_t version = 0;
  if (!io::read_le(is, version)) throw CorruptHeaderError("checkpoint header truncated");
  if (version != kCheckpointVersion)
    throw UnknownVersionError("unsupported checkpoint version " + std::to_string(version));
  std::uint32_t donor_count = 0;
  if (!io::read_le(is, donor_count) || donor_count == 0 || donor_count > 4096)
    throw CorruptHeaderError("checkpoint donor count invalid");
  std::vector<std::string> ids(donor_count);
  for (auto& id : ids)
    if (!io::read_string(is, id, 4096) || id.empty())
      throw CorruptHeaderError("checkpoint donor list corrupt");

  std::map<std::string, Tensor> tensors;
  while (is.peek() != std::char_traits<char>::eof()) {
    std::string name;
    std::uint32_t rank = 0;
    if (!io::read_string(is, name, 4096) || !io::read_le(is, rank))
      throw TruncatedDataError("checkpoint tensor record truncated");
    if (rank > 8) throw CheckpointError("checkpoint tensor '" + name + "' has invalid rank");
    Shape shape(rank);
    for (auto& d : shape) {
      std::uint32_t v = 0;
      if (!io::read_le(is, v)) throw TruncatedDataError("checkpoint tensor record truncated");
      if (v == 0 || v > (1u << 28))
        throw CheckpointError("checkpoint tensor '" + name + "' has invalid dims");
      d = static_cast<int>(v);
    }
    Tensor t(shape);
    if (!io::read_floats(is, t.data()))
      throw TruncatedDataError("checkpoint tensor '" + name + "' data truncated");
    if (!tensors.emplace(name, std::move(t)).second)
      throw CheckpointError("duplicate tensor '" + name + "' in checkpoint");
  }

  // Widths are recovered from the stored shapes.
  Architecture arch;
  for (int i = 0; i < 4; ++i)
    arch.encoder_channels[i] =
        dim_of(tensors, "encoder.conv" + std::to_string(i + 1) + ".weight", 3);
  arch.fc_hidden = dim_of(tensors, "encoder.fc1.weight", 1);
  const int code_size = dim_of(tensors, "encoder.fc2.weight", 1);
  constexpr int cells = Architecture::kBottleneckSide * Architecture::kBottleneckSide;
  if (code_size % cells != 0) throw CheckpointError("checkpoint code size is not a 4x4 grid");
  arch.code_channels = code_size / cells;
  const std::string first = "decoder." + ids.front() + ".upscale";
  for (int i = 0; i < 4; ++i) {
    const int c4 = dim_of(tensors, first + std::to_string(i + 1) + ".weight", 3);
    if (c4 % 4 != 0) throw CheckpointError("checkpoint upscale width not divisible by 4");
    arch.decoder_channels[i] = c4 / 4;
  }

  EncoderParams enc;
  int cin = 3;
  for (int i = 0; i < 4; ++i) {
    enc.conv[i] = take_layer(tensors, "encoder.conv" + std::to_string(i + 1),
                             {kEncoderKernel, kEncoderKernel, cin, arch.encoder_channels[i]});
    cin = arch.encoder_channels[i];
  }
  enc.fc1 = take_layer(tensors, "encoder.fc1", {arch.flat_size(), arch.fc_hidden});
  enc.fc2 = take_layer(tensors, "encoder.fc2", {arch.fc_hidden, arch.code_size()});

  std::vector<std::pair<std::string, DecoderParams>> decoders;
  for (const auto& id : ids) {
    DecoderParams dec;
    int c = arch.code_channels;
    for (int i = 0; i < 4; ++i) {
      dec.upscale[i] =
          take_layer(tensors, "decoder." + id + ".upscale" + std::to_string(i + 1),
                     {kDecoderKernel, kDecoderKernel, c, 4 * arch.decoder_channels[i]});
      c = arch.decoder_channels[i];
    }
    dec.output = take_layer(tensors, "decoder." + id + ".output", {kOutputKernel, kOutputKernel, c, 3});
    decoders.emplace_back(id, std::move(dec));
  }
  if (!tensors.empty())
    throw CheckpointError("checkpoint has unexpected tensor '" + tensors.begin()->first + "'");
  return FatmModel(arch, std::move(enc), std::move(decoders));
}

}  // namespace deidforge::fatm
