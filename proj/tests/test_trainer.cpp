#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>

#include "doctest.h"
#include "deidforge/errors.hpp"
#include "deidforge/toyfaces.hpp"
#include "deidforge/trainer.hpp"
#include "support/tempdir.hpp"

using namespace deidforge;
using namespace deidforge::trainer;

namespace {

Image random_face(SplitMix64& rng) {
  Image img(80, 80, 3);
  for (auto& v : img.pixels) v = static_cast<float>(rng.uniform());
  return img;
}

FaceSet small_set(const std::string& id, std::uint64_t seed, int n) {
  SplitMix64 rng(seed);
  return toyfaces::generate_face_set(id, toyfaces::IdentityParams::random(rng), n, seed);
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.iterations = 3;
  c.batch_size = 2;
  c.seed = 17;
  c.architecture = fatm::Architecture::reduced(32);
  return c;
}

std::uint64_t fingerprint(const std::vector<tensor::Tensor>& ts) {
  // FNV-1a over the raw bytes.
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& t : ts) {
    const auto* p = reinterpret_cast<const unsigned char*>(t.data().data());
    for (std::size_t i = 0; i < t.size() * sizeof(float); ++i) h = (h ^ p[i]) * 1099511628211ULL;
  }
  return h;
}

bool same_model(const fatm::FatmModel& a, const fatm::FatmModel& b) {
  if (fingerprint(a.encoder().tensors()) != fingerprint(b.encoder().tensors())) return false;
  for (const auto& id : a.donor_ids())
    if (fingerprint(a.decoder(id).tensors()) != fingerprint(b.decoder(id).tensors())) return false;
  return true;
}

}  // namespace

TEST_CASE("augment with everything collapsed is the center crop") {
  SplitMix64 rng(1);
  for (int i = 0; i < 10; ++i) {
    const Image f = random_face(rng);
    SplitMix64 r(i);
    CHECK(augment(f, AugmentConfig::none(), r) == crop(f, 8, 8, 64, 64));
  }
}

TEST_CASE("augment: single steps evaluated directly") {
  SplitMix64 rng(2);
  const Image f = random_face(rng);
  SUBCASE("brightness +0.2 on mid-gray") {
    AugmentConfig c = AugmentConfig::none();
    c.brightness = {0.2, 0.2};
    SplitMix64 r(0);
    for (float v : augment(Image(80, 80, 3, 0.5f), c, r).pixels) CHECK(v == 0.7f);
  }
  SUBCASE("mirror") {
    AugmentConfig c = AugmentConfig::none();
    c.mirror_probability = 1.0;
    SplitMix64 r(0);
    const Image out = augment(f, c, r);
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x)
        for (int ch = 0; ch < 3; ++ch) CHECK(out.at(x, y, ch) == f.at(71 - x, y + 8, ch));
  }
  SUBCASE("contrast leaves a constant image alone") {
    AugmentConfig c = AugmentConfig::none();
    c.contrast = {1.25, 1.25};
    SplitMix64 r(0);
    for (float v : augment(Image(80, 80, 3, 0.4f), c, r).pixels) CHECK(v == doctest::Approx(0.4f).epsilon(1e-6));
  }
  SUBCASE("per-channel gain") {
    AugmentConfig c = AugmentConfig::none();
    c.channel_gain = {0.9, 0.9};
    SplitMix64 r(0);
    const Image out = augment(f, c, r);
    const Image ref = crop(f, 8, 8, 64, 64);
    for (std::size_t i = 0; i < out.pixels.size(); ++i)
      CHECK(out.pixels[i] == doctest::Approx(0.9 * ref.pixels[i]).epsilon(1e-6));
  }
  SUBCASE("sharpness leaves flat regions alone") {
    AugmentConfig c = AugmentConfig::none();
    c.sharpness = {0.3, 0.3};
    SplitMix64 r(0);
    for (float v : augment(Image(80, 80, 3, 0.6f), c, r).pixels) CHECK(v == doctest::Approx(0.6f).epsilon(1e-6));
  }
  SUBCASE("random crop picks an in-frame 64x64 window") {
    AugmentConfig c = AugmentConfig::none();
    c.random_crop = true;
    for (int s = 0; s < 20; ++s) {
      SplitMix64 r(s);
      const Image out = augment(f, c, r);
      bool found = false;
      for (int oy = 0; oy <= 16 && !found; ++oy)
        for (int ox = 0; ox <= 16 && !found; ++ox) found = out == crop(f, ox, oy, 64, 64);
      CHECK(found);
    }
  }
}

TEST_CASE("augment output stays in [0, 1] and is reproducible") {
  AugmentConfig wide;
  wide.brightness = {-0.5, 0.5};
  wide.contrast = {0.5, 2.0};
  wide.sharpness = {-1, 1};
  SplitMix64 faces(3);
  const Image extremes[3] = {Image(80, 80, 3, 0.0f), Image(80, 80, 3, 1.0f), random_face(faces)};
  for (int i = 0; i < 10000; ++i) {
    SplitMix64 r = SplitMix64::derive(4, {std::uint64_t(i)});
    const Image out = augment(extremes[i % 3], i % 2 ? wide : AugmentConfig{}, r);
    const auto [lo, hi] = std::minmax_element(out.pixels.begin(), out.pixels.end());
    REQUIRE(*lo >= 0.0f);
    REQUIRE(*hi <= 1.0f);
  }
  SplitMix64 r1(9), r2(9);
  CHECK(augment(extremes[2], AugmentConfig{}, r1) == augment(extremes[2], AugmentConfig{}, r2));
  CHECK_THROWS_AS(augment(Image(64, 64, 3), AugmentConfig{}, r1), InvalidInputError);
}

TEST_CASE("augment config validation") {
  AugmentConfig c;
  CHECK_NOTHROW(c.validate());
  c.scale = {1.1, 0.9};
  CHECK_THROWS_AS(c.validate(), InvalidConfigError);
  c = AugmentConfig{};
  c.mirror_probability = 1.5;
  CHECK_THROWS_AS(c.validate(), InvalidConfigError);
  c = AugmentConfig{};
  c.rotation_deg = -1;
  CHECK_THROWS_AS(c.validate(), InvalidConfigError);
}

TEST_CASE("sample_batch") {
  SplitMix64 rng(5);
  FaceSet one{"s", {random_face(rng)}, {facegeom::LandmarkSet()}};
  SplitMix64 r(0);
  const auto b = sample_batch(one, 1, r);
  REQUIRE(b.size() == 1);
  CHECK(b[0] == one.faces[0]);

  FaceSet ten{"t", {}, {}};
  for (int i = 0; i < 10; ++i) {
    ten.faces.push_back(random_face(rng));
    ten.source_landmarks.emplace_back();
  }
  SplitMix64 a1(42), a2(42);
  CHECK(sample_indices(ten, 50, a1) == sample_indices(ten, 50, a2));

  // Chi-square with 9 degrees of freedom; 27.88 is the 0.1% critical value.
  SplitMix64 u(43);
  std::vector<int> counts(10, 0);
  for (int i : sample_indices(ten, 100000, u)) ++counts[i];
  double chi2 = 0;
  for (int c : counts) chi2 += (c - 10000.0) * (c - 10000.0) / 10000.0;
  CHECK(chi2 < 27.88);

  FaceSet empty{"e", {}, {}};
  CHECK_THROWS_AS(sample_batch(empty, 1, r), InvalidDataError);
  CHECK_THROWS_AS(sample_indices(empty, 3, r), InvalidDataError);
}

TEST_CASE("train config and data errors") {
  const auto a = small_set("a", 1, 3), b = small_set("b", 2, 3);
  TrainConfig c = tiny_config();
  c.iterations = 0;
  CHECK_THROWS_AS(train({a, b}, c), InvalidConfigError);
  c = tiny_config();
  c.batch_size = 0;
  CHECK_THROWS_AS(train({a, b}, c), InvalidConfigError);
  c = tiny_config();
  c.learning_rate = -1;
  CHECK_THROWS_AS(train({a, b}, c), InvalidConfigError);
  CHECK_THROWS_AS(train({a}, tiny_config()), InvalidConfigError);
  FaceSet empty{"e", {}, {}};
  CHECK_THROWS_AS(train({a, empty}, tiny_config()), InvalidDataError);
}

TEST_CASE("decoders only move in their own phase, the encoder in every phase") {
  const std::vector<FaceSet> sets{small_set("a", 1, 4), small_set("b", 2, 4), small_set("c", 3, 4)};
  TrainConfig c = tiny_config();
  std::vector<std::uint64_t> enc_prev, dec_prev[3];
  int phases = 0;
  auto snapshot = [&](const TrainState& st) {
    enc_prev = {fingerprint(st.model.encoder().tensors())};
    for (int k = 0; k < 3; ++k) dec_prev[k] = {fingerprint(st.model.decoder(sets[k].subject_id).tensors())};
  };
  snapshot(TrainState{fatm::FatmModel(c.architecture, {"a", "b", "c"}, c.seed), {}, 0, {}});
  const auto st = train(sets, c, std::nullopt, {}, [&](const TrainState& s, int, std::size_t set) {
    ++phases;
    CHECK(fingerprint(s.model.encoder().tensors()) != enc_prev[0]);
    for (std::size_t k = 0; k < 3; ++k) {
      const bool moved = fingerprint(s.model.decoder(sets[k].subject_id).tensors()) != dec_prev[k][0];
      CHECK(moved == (k == set));
    }
    snapshot(s);
  });
  CHECK(phases == 9);
  CHECK(st.history.size() == 9);
  for (const auto& r : st.history) CHECK(std::isfinite(r.mean_l1));
  for (const auto& o : st.optimizers) CHECK(o.step == 3);
}

TEST_CASE("training is deterministic and resumable") {
  const std::vector<FaceSet> sets{small_set("a", 1, 6), small_set("b", 2, 6)};
  TrainConfig c = tiny_config();
  c.iterations = 4;
  const auto r1 = train(sets, c);
  const auto r2 = train(sets, c);
  CHECK(same_model(r1.model, r2.model));
  CHECK(r1.history == r2.history);

  testing::TempDir dir;
  save_train_state(r1, dir / "one.fatm");
  save_train_state(r2, dir / "two.fatm");
  CHECK(testing::read_bytes(dir / "one.fatm") == testing::read_bytes(dir / "two.fatm"));
  CHECK(testing::read_bytes(dir / "one.fatm.optim") == testing::read_bytes(dir / "two.fatm.optim"));

  // Two iterations, save, reload, two more: same as four straight.
  TrainConfig half = c;
  half.iterations = 2;
  save_train_state(train(sets, half), dir / "half.fatm");
  auto resumed = load_train_state(dir / "half.fatm");
  CHECK(resumed.iterations_done == 2);
  const auto finished = train(sets, c, std::move(resumed));
  CHECK(finished.iterations_done == 4);
  CHECK(same_model(finished.model, r1.model));
  for (const auto& o : finished.optimizers) CHECK(o.step == 4);
}

TEST_CASE("checkpoint callback fires on the interval") {
  const std::vector<FaceSet> sets{small_set("a", 1, 3), small_set("b", 2, 3)};
  TrainConfig c = tiny_config();
  c.iterations = 5;
  c.checkpoint_interval = 2;
  std::vector<int> seen;
  train(sets, c, std::nullopt, [&](const TrainState& st) { seen.push_back(st.iterations_done); });
  CHECK(seen == std::vector<int>{2, 4});
}

TEST_CASE("optimizer sidecar round trip and errors") {
  const std::vector<FaceSet> sets{small_set("a", 1, 3), small_set("b", 2, 3)};
  const auto st = train(sets, tiny_config());
  testing::TempDir dir;
  save_train_state(st, dir / "m.fatm");
  const auto back = load_train_state(dir / "m.fatm");
  CHECK(back.iterations_done == st.iterations_done);
  CHECK(same_model(back.model, st.model));
  REQUIRE(back.optimizers.size() == st.optimizers.size());
  for (std::size_t i = 0; i < st.optimizers.size(); ++i) {
    CHECK(back.optimizers[i].step == st.optimizers[i].step);
    CHECK(back.optimizers[i].m == st.optimizers[i].m);
    CHECK(back.optimizers[i].v == st.optimizers[i].v);
    CHECK(back.optimizers[i].config.learning_rate == st.optimizers[i].config.learning_rate);
  }
  auto bytes = testing::read_bytes(dir / "m.fatm.optim");
  bytes.resize(bytes.size() / 2);
  testing::write_bytes(dir / "m.fatm.optim", bytes);
  CHECK_THROWS_AS(load_train_state(dir / "m.fatm"), CheckpointError);
  bytes[0] = 'X';
  testing::write_bytes(dir / "m.fatm.optim", bytes);
  CHECK_THROWS_AS(load_train_state(dir / "m.fatm"), CheckpointError);
}

TEST_CASE("loss CSV round trip") {
  std::vector<LossRecord> h{{0, "alice", 0.25}, {0, "bob", 0.1 + 0.2}, {1, "alice", 1e-7}, {1, "bob", 0.123456789012345}};
  testing::TempDir dir;
  write_loss_csv(h, dir / "loss.csv");
  CHECK(testing::read_text(dir / "loss.csv").rfind("iteration,set_id,mean_l1\n0,alice,0.25\n", 0) == 0);
  CHECK(read_loss_csv(dir / "loss.csv") == h);
  testing::write_bytes(dir / "bad.csv", {'x', '\n'});
  CHECK_THROWS(read_loss_csv(dir / "bad.csv"));
}

TEST_CASE("memorizes one repeated image per set") {
  // Desk scale: width / 8, no augmentation, default learning rate. With a
  // single image every batch is identical, so batch size 1 gives the same
  // gradients as 64 at a fraction of the cost.
  SplitMix64 rng(5);
  const std::vector<FaceSet> sets{
      toyfaces::generate_face_set("a", toyfaces::IdentityParams::random(rng), 1, 1),
      toyfaces::generate_face_set("b", toyfaces::IdentityParams::random(rng), 1, 2)};
  TrainConfig c;
  c.iterations = 2000;
  c.batch_size = 1;
  c.seed = 3;
  c.augment = AugmentConfig::none();
  c.architecture = fatm::Architecture::reduced(8);
  const auto st = train(sets, c);
  REQUIRE(st.history.size() == 4000);
  for (std::size_t s = 0; s < 2; ++s) {
    const auto& last = st.history[st.history.size() - 2 + s];
    MESSAGE(last.set_id << " final L1 " << last.mean_l1);
    CHECK(last.mean_l1 < 0.02);
  }
}
