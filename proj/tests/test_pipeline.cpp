#include <cmath>
#include <fstream>
#include <set>

#include "doctest.h"
#include "json.hpp"
#include "deidforge/commands.hpp"
#include "deidforge/errors.hpp"
#include "deidforge/evalkit.hpp"
#include "deidforge/pipeline.hpp"
#include "deidforge/toyfaces.hpp"
#include "support/tempdir.hpp"

using namespace deidforge;
using namespace deidforge::commands;
using nlohmann::json;

namespace {

const fatm::FatmModel& untrained_model() {
  static const fatm::FatmModel m(fatm::Architecture::reduced(16), {"alice", "bob"}, 5);
  return m;
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream os(p);
  os << text;
}

// gen-toy with two identities and a frame sequence, then a tiny training run.
struct ToyWorkspace {
  testing::TempDir dir;
  Config base;

  explicit ToyWorkspace(int frames = 6) {
    const std::string cfg = R"({
      "seed": 11, "out": "data",
      "gen_toy": {"identities": [{"id": "alice"}, {"id": "bob"}], "images": 8, "render_size": 96,
                  "frames": {"identity": "alice", "count": )" + std::to_string(frames) + R"(, "size": 128}},
      "train": {"face_sets": ["data/sets/alice", "data/sets/bob"], "iterations": 2, "batch_size": 2,
                "width_divisor": 32},
      "deid": {"checkpoint": "data/model.fatm", "input": "data/frames"},
      "eval": {"checkpoint": "data/model.fatm", "probes": "data/frames",
               "gallery": [{"id": "alice", "dir": "data/sets/alice"}, {"id": "bob", "dir": "data/sets/bob"}]}
    })";
    base = Config::parse(cfg, dir.path());
    cmd_gen_toy(base);
    cmd_train(base);
  }

  Config with_out(const std::string& name) const {
    Config c = base;
    c.out = dir / name;
    return c;
  }
};

std::vector<fs::path> all_files(const fs::path& root) {
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out.push_back(fs::relative(e.path(), root));
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

TEST_CASE("landmark records round trip through JSON and JSONL") {
  const auto r = toyfaces::render_face(toyfaces::IdentityParams::middle(), {}, 96);
  const pipeline::LandmarkRecord rec{"frame_0001.png", r.landmarks};
  const auto back = pipeline::landmark_record_from_json(pipeline::landmark_record_to_json(rec));
  CHECK(back.image == rec.image);
  CHECK(back.points == rec.points);
  const json j = json::parse(pipeline::landmark_record_to_json(rec));
  CHECK(j["points"].size() == 68);
  CHECK(j["points"][0].size() == 2);

  testing::TempDir dir;
  pipeline::write_landmarks_jsonl({rec, rec}, dir / "l.jsonl");
  CHECK(pipeline::read_landmarks_jsonl(dir / "l.jsonl").size() == 2);
  CHECK_THROWS_AS(pipeline::landmark_record_from_json(R"({"image": "x", "points": [[1, 2]]})"), InvalidInputError);
  CHECK_THROWS_AS(pipeline::landmark_record_from_json("not json"), InvalidInputError);
}

TEST_CASE("pipeline output differs from the input only near the mask") {
  // Every pixel farther than 3 sigma outside the hull is bit-identical.
  const pipeline::Deidentifier deid(untrained_model(), "bob");
  SplitMix64 rng(51);
  for (int trial = 0; trial < 20; ++trial) {
    const auto r = toyfaces::render_face(toyfaces::IdentityParams::random(rng), toyfaces::AttributeParams::random(rng), 128);
    const auto res = deid.process(r.image, r.landmarks);
    const auto hull = maskblend::mask_hull(r.landmarks);
    int changed = 0;
    for (int y = 0; y < 128; ++y)
      for (int x = 0; x < 128; ++x) {
        const bool same = res.output.at(x, y, 0) == r.image.at(x, y, 0) &&
                          res.output.at(x, y, 1) == r.image.at(x, y, 1) &&
                          res.output.at(x, y, 2) == r.image.at(x, y, 2);
        changed += !same;
        if (maskblend::distance_to_polygon(hull, {double(x), double(y)}) > 3 * res.sigma) CHECK(same);
        if (res.alpha.at(x, y) == 0.0f) CHECK(same);
      }
    CHECK(changed > 0);
    CHECK(res.mask_area > 0);
    CHECK(res.alignment_rms < 0.5);
  }
}

TEST_CASE("deidentifier rejects unknown donors") {
  CHECK_THROWS_AS(pipeline::Deidentifier(untrained_model(), "carol"), MissingDonorError);
}

TEST_CASE("config parsing") {
  testing::TempDir dir;
  const Config c = Config::parse(R"({"seed": 4, "out": "o", "donor": "bob",
      "train": {"face_sets": ["a", "/abs/b"], "iterations": 9, "augment": {"rotation_deg": 5, "scale": [0.9, 1.1]}},
      "deid": {"checkpoint": "m.fatm", "input": "frames", "feather_scale": 0.03}})", dir.path());
  CHECK(c.seed == 4);
  CHECK(c.out == dir / "o");
  CHECK(c.donor == "bob");
  CHECK(c.train.face_sets == std::vector<fs::path>{dir / "a", "/abs/b"});
  CHECK(c.train.iterations == 9);
  CHECK(c.train.augment.rotation_deg == 5);
  CHECK(c.train.augment.scale.lo == 0.9);
  CHECK(c.deid.feather_scale == 0.03);
  CHECK(c.deid.input == dir / "frames");

  CHECK_THROWS_AS(Config::parse(R"({"sede": 1})", dir.path()), InvalidConfigError);
  CHECK_THROWS_AS(Config::parse(R"({"train": {"iters": 1}})", dir.path()), InvalidConfigError);
  CHECK_THROWS_AS(Config::parse(R"({"seed": "x"})", dir.path()), InvalidConfigError);
  CHECK_THROWS_AS(Config::parse(R"({"train": {"augment": {"scale": [1.2, 0.8]}}})", dir.path()), InvalidConfigError);
  CHECK_THROWS_AS(Config::parse("{", dir.path()), InvalidConfigError);
  CHECK_THROWS_AS(Config::parse(R"({"gen_toy": {"identities": [{"id": "a", "params": {"aspect": 3}}]}})", dir.path()),
                  InvalidConfigError);

  write_file(dir / "c.json", R"({"out": "rel"})");
  CHECK(Config::load(dir / "c.json").out == dir / "rel");
  CHECK_THROWS_AS(Config::load(dir / "missing.json"), IoError);
}

TEST_CASE("gen-toy writes sets and frames with landmarks") {
  ToyWorkspace ws;
  const fs::path data = ws.dir / "data";
  CHECK(pipeline::list_images(data / "sets" / "alice").size() == 8);
  CHECK(pipeline::list_images(data / "frames").size() == 6);
  CHECK(pipeline::load_directory_landmarks(data / "frames").size() == 6);
  const auto set = load_face_set(data / "sets" / "bob");
  CHECK(set.subject_id == "bob");
  CHECK(set.faces.size() == 8);
  CHECK(fs::exists(data / "model.fatm"));
  CHECK(fs::exists(data / "model.fatm.optim"));
  CHECK(trainer::read_loss_csv(data / "loss.csv").size() == 4);
}

TEST_CASE("train: missing landmarks are named, resume keeps counting") {
  ToyWorkspace ws;
  Config c = ws.base;
  c.train.resume = true;
  c.train.iterations = 3;
  const auto st = cmd_train(c);
  CHECK(st.iterations_done == 3);
  const auto loss = trainer::read_loss_csv(ws.dir / "data" / "loss.csv");
  REQUIRE(loss.size() == 6);
  for (std::size_t i = 0; i < loss.size(); ++i) CHECK(loss[i].iteration == static_cast<int>(i / 2));
  CHECK(trainer::load_train_state(ws.dir / "data" / "model.fatm").optimizers[0].step == 3);

  // Drop one record from a set.
  const fs::path set = ws.dir / "data" / "sets" / "bob";
  auto recs = pipeline::read_landmarks_jsonl(set / "landmarks.jsonl");
  recs.erase(recs.begin() + 3);
  pipeline::write_landmarks_jsonl(recs, set / "landmarks.jsonl");
  try {
    cmd_train(ws.base);
    FAIL("expected an error");
  } catch (const InvalidDataError& e) {
    CHECK(std::string(e.what()).find("0003.png") != std::string::npos);
    CHECK(std::string(e.what()).find("bob") != std::string::npos);
  }
  CHECK_THROWS_AS(
      [&] {
        Config one = ws.base;
        one.train.face_sets.pop_back();
        cmd_train(one);
      }(),
      InvalidConfigError);
}

TEST_CASE("deid: manifest is complete and reruns are byte-identical") {
  ToyWorkspace ws;
  // One frame loses its landmark record, another gets degenerate landmarks.
  const fs::path frames = ws.dir / "data" / "frames";
  auto recs = pipeline::read_landmarks_jsonl(frames / "landmarks.jsonl");
  recs.erase(recs.begin() + 1);
  std::vector<facegeom::Point> line;
  for (int i = 0; i < 68; ++i) line.push_back({double(i), 5.0});
  recs[3].points = facegeom::LandmarkSet(line);
  pipeline::write_landmarks_jsonl(recs, frames / "landmarks.jsonl");

  Config c1 = ws.with_out("run1"), c2 = ws.with_out("run2");
  c1.deid.write_masks = c2.deid.write_masks = true;
  const auto s1 = cmd_deid(c1);
  cmd_deid(c2);
  CHECK(s1.processed == 4);
  CHECK(s1.skipped == 1);
  CHECK(s1.failed == 1);

  const json m = json::parse(testing::read_text(c1.out / "manifest.json"));
  REQUIRE(m["entries"].size() == 6);
  std::set<std::string> names;
  for (const auto& e : m["entries"]) names.insert(e["image"].get<std::string>());
  CHECK(names.size() == 6);
  CHECK(m["entries"][1]["status"] == "skipped");
  CHECK(m["entries"][4]["status"] == "error");
  CHECK(m["entries"][0]["status"] == "ok");
  CHECK(m["entries"][0]["transform"].size() == 6);
  CHECK(m["donor"] == "alice");
  CHECK(json::parse(m.dump()) == m);

  // Everything except the wall-clock timing file is reproducible.
  const auto files = all_files(c1.out);
  CHECK(files == all_files(c2.out));
  for (const auto& f : files) {
    if (f == "timing.json") continue;
    CHECK_MESSAGE(testing::read_bytes(c1.out / f) == testing::read_bytes(c2.out / f), f.string());
  }
  CHECK(fs::exists(c1.out / "masks" / "0000.png"));

  Config bad = ws.with_out("run3");
  bad.donor = "mallory";
  CHECK_THROWS_AS(cmd_deid(bad), InvalidConfigError);
}

TEST_CASE("deid: a 100-frame sequence with one donor") {
  ToyWorkspace ws(100);
  Config c = ws.with_out("seq");
  c.donor = "bob";
  const auto s = cmd_deid(c);
  CHECK(s.processed == 100);
  const json m = json::parse(testing::read_text(c.out / "manifest.json"));
  REQUIRE(m["entries"].size() == 100);
  for (int k = 0; k < 100; ++k) {
    char name[16];
    std::snprintf(name, sizeof name, "%04d.png", k);
    CHECK(m["entries"][k]["image"] == name);
    CHECK(m["entries"][k]["status"] == "ok");
  }
  CHECK(m["donor"] == "bob");
  CHECK(pipeline::list_images(c.out).size() == 100);
}

TEST_CASE("eval: both protocols, and the report re-parses") {
  ToyWorkspace ws;
  Config c1 = ws.with_out("eval1"), c2 = ws.with_out("eval2");
  cmd_eval(c1);
  cmd_eval(c2);
  const std::string text = testing::read_text(c1.out / "report.json");
  CHECK(text == testing::read_text(c2.out / "report.json"));
  const auto j = nlohmann::ordered_json::parse(text);
  CHECK(j.dump(2) + "\n" == text);
  for (const char* proto : {"paired", "self"}) {
    REQUIRE(j.contains(proto));
    const auto r = evalkit::report_from_json(j[proto].dump());
    CHECK(r.n_pairs == 6);
    CHECK(evalkit::report_to_json(r) == j[proto].dump(2) + "\n");
    CHECK(r.ssim_mean > 0.5);
  }
  CHECK(fs::exists(c1.out / "pairs_paired.csv"));
  CHECK(fs::exists(c1.out / "pairs_self.csv"));
}
