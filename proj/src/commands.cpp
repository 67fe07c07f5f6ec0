#include "deidforge/commands.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "deidforge/errors.hpp"
#include "deidforge/evalkit.hpp"
#include "deidforge/pipeline.hpp"
#include "json.hpp"

namespace deidforge::commands {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

// ---- config parsing ----------------------------------------------------------

void only_keys(const json& j, const char* where, std::initializer_list<const char*> keys) {
  if (!j.is_object()) throw InvalidConfigError(std::string(where) + " must be a JSON object");
  const std::set<std::string> allowed(keys.begin(), keys.end());
  for (const auto& [k, v] : j.items())
    if (!allowed.count(k)) throw InvalidConfigError("unknown key '" + k + "' in " + where);
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

fs::path path_of(const json& j, const fs::path& base) {
  const fs::path p = j.get<std::string>();
  return p.is_absolute() ? p : base / p;
}

trainer::Interval interval(const json& j) {
  if (!j.is_array() || j.size() != 2) throw InvalidConfigError("intervals are [lo, hi] pairs");
  return {j[0].get<double>(), j[1].get<double>()};
}

trainer::AugmentConfig parse_augment(const json& j) {
  only_keys(j, "train.augment",
            {"rotation_deg", "scale", "mirror_probability", "random_crop", "brightness", "contrast",
             "channel_gain", "sharpness", "disabled"});
  trainer::AugmentConfig a;
  if (j.value("disabled", false)) a = trainer::AugmentConfig::none();
  read(j, "rotation_deg", a.rotation_deg);
  read(j, "mirror_probability", a.mirror_probability);
  read(j, "random_crop", a.random_crop);
  if (j.contains("scale")) a.scale = interval(j["scale"]);
  if (j.contains("brightness")) a.brightness = interval(j["brightness"]);
  if (j.contains("contrast")) a.contrast = interval(j["contrast"]);
  if (j.contains("channel_gain")) a.channel_gain = interval(j["channel_gain"]);
  if (j.contains("sharpness")) a.sharpness = interval(j["sharpness"]);
  a.validate();
  return a;
}

toyfaces::IdentityParams parse_identity(const json& j) {
  only_keys(j, "identity params", {"skin", "aspect", "eye_spacing", "brow_thickness", "nose_length"});
  toyfaces::IdentityParams p = toyfaces::IdentityParams::middle();
  if (j.contains("skin")) {
    const auto& s = j["skin"];
    if (!s.is_array() || s.size() != 3) throw InvalidConfigError("skin must be [r, g, b]");
    p.skin_r = s[0].get<double>();
    p.skin_g = s[1].get<double>();
    p.skin_b = s[2].get<double>();
  }
  read(j, "aspect", p.aspect);
  read(j, "eye_spacing", p.eye_spacing);
  read(j, "brow_thickness", p.brow_thickness);
  read(j, "nose_length", p.nose_length);
  try {
    p.validate();
  } catch (const InvalidParameterError& e) {
    throw InvalidConfigError(e.what());
  }
  return p;
}

std::string read_text(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw IoError("cannot open " + p.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw IoError("cannot write " + p.string());
  os << text;
  if (!os) throw IoError("failed writing " + p.string());
}

Image read_rgb(const fs::path& p) {
  Image img = read_png(p);
  if (img.channels == 3) return img;
  Image rgb(img.width, img.height, 3);
  for (std::size_t i = 0; i < img.pixels.size(); ++i)
    for (int c = 0; c < 3; ++c) rgb.pixels[i * 3 + c] = img.pixels[i];
  return rgb;
}

std::string pick_donor(const Config& cfg, const fatm::FatmModel& model) {
  const std::string donor = cfg.donor.value_or(model.donor_ids().front());
  if (!model.has_donor(donor))
    throw InvalidConfigError("donor '" + donor + "' is not in the checkpoint");
  return donor;
}

std::string frame_name(int k) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04d.png", k);
  return buf;
}

}  // namespace

Config Config::parse(const std::string& text, const fs::path& base) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw InvalidConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  Config c;
  try {
    only_keys(j, "config", {"seed", "out", "donor", "train", "deid", "eval", "gen_toy"});
    read(j, "seed", c.seed);
    if (j.contains("out")) c.out = path_of(j["out"], base);
    else c.out = base / c.out;
    if (j.contains("donor")) c.donor = j["donor"].get<std::string>();

    if (j.contains("train")) {
      const auto& t = j["train"];
      only_keys(t, "train",
                {"face_sets", "iterations", "batch_size", "learning_rate", "width_divisor",
                 "checkpoint_interval", "resume", "augment"});
      if (t.contains("face_sets"))
        for (const auto& p : t["face_sets"]) c.train.face_sets.push_back(path_of(p, base));
      read(t, "iterations", c.train.iterations);
      read(t, "batch_size", c.train.batch_size);
      read(t, "learning_rate", c.train.learning_rate);
      read(t, "width_divisor", c.train.width_divisor);
      read(t, "checkpoint_interval", c.train.checkpoint_interval);
      read(t, "resume", c.train.resume);
      if (t.contains("augment")) c.train.augment = parse_augment(t["augment"]);
    }
    if (j.contains("deid")) {
      const auto& d = j["deid"];
      only_keys(d, "deid", {"checkpoint", "input", "landmarks", "feather_scale", "write_masks"});
      if (d.contains("checkpoint")) c.deid.checkpoint = path_of(d["checkpoint"], base);
      if (d.contains("input")) c.deid.input = path_of(d["input"], base);
      if (d.contains("landmarks")) c.deid.landmarks = path_of(d["landmarks"], base);
      read(d, "feather_scale", c.deid.feather_scale);
      read(d, "write_masks", c.deid.write_masks);
    }
    if (j.contains("eval")) {
      const auto& e = j["eval"];
      only_keys(e, "eval", {"checkpoint", "probes", "gallery", "feather_scale"});
      if (e.contains("checkpoint")) c.eval.checkpoint = path_of(e["checkpoint"], base);
      if (e.contains("probes")) c.eval.probes = path_of(e["probes"], base);
      read(e, "feather_scale", c.eval.feather_scale);
      if (e.contains("gallery"))
        for (const auto& g : e["gallery"]) {
          only_keys(g, "eval.gallery entry", {"id", "dir"});
          c.eval.gallery.push_back({g.at("id").get<std::string>(), path_of(g.at("dir"), base)});
        }
    }
    if (j.contains("gen_toy")) {
      const auto& g = j["gen_toy"];
      only_keys(g, "gen_toy", {"identities", "images", "render_size", "frames"});
      if (g.contains("identities"))
        for (const auto& i : g["identities"]) {
          only_keys(i, "gen_toy identity", {"id", "params"});
          ToyIdentity ti{i.at("id").get<std::string>(), std::nullopt};
          if (i.contains("params")) ti.params = parse_identity(i["params"]);
          c.gen_toy.identities.push_back(std::move(ti));
        }
      read(g, "images", c.gen_toy.images);
      read(g, "render_size", c.gen_toy.render_size);
      if (g.contains("frames")) {
        const auto& f = g["frames"];
        only_keys(f, "gen_toy.frames", {"identity", "count", "size"});
        FramesSection fr;
        fr.identity = f.at("identity").get<std::string>();
        read(f, "count", fr.count);
        read(f, "size", fr.size);
        c.gen_toy.frames = fr;
      }
    }
  } catch (const json::exception& e) {
    throw InvalidConfigError(std::string("config has a wrong type: ") + e.what());
  }
  return c;
}

Config Config::load(const fs::path& path) {
  return parse(read_text(path), fs::absolute(path).parent_path());
}

// ---------------------------------------------------------------------------

FaceSet load_face_set(const fs::path& dir) {
  FaceSet set;
  set.subject_id = dir.filename().string();
  if (set.subject_id.empty()) set.subject_id = dir.parent_path().filename().string();
  const auto landmarks = pipeline::load_directory_landmarks(dir);
  for (const auto& img : pipeline::list_images(dir)) {
    const auto it = landmarks.find(img.filename().string());
    if (it == landmarks.end())
      throw InvalidDataError("face set " + dir.string() + ": no landmark record for " + img.filename().string());
    set.faces.push_back(facegeom::align_face(read_rgb(img), it->second).face);
    set.source_landmarks.push_back(it->second);
  }
  if (set.faces.empty()) throw InvalidDataError("face set " + dir.string() + " has no images");
  return set;
}

trainer::TrainState cmd_train(const Config& cfg) {
  const auto& t = cfg.train;
  if (t.face_sets.size() < 2) throw InvalidConfigError("train needs at least 2 face_sets");
  std::vector<FaceSet> sets;
  for (const auto& d : t.face_sets) sets.push_back(load_face_set(d));

  trainer::TrainConfig tc;
  tc.iterations = t.iterations;
  tc.batch_size = t.batch_size;
  tc.learning_rate = static_cast<float>(t.learning_rate);
  tc.seed = cfg.seed;
  tc.augment = t.augment;
  tc.checkpoint_interval = t.checkpoint_interval;
  tc.architecture = t.width_divisor == 1 ? fatm::Architecture::paper() : fatm::Architecture::reduced(t.width_divisor);

  fs::create_directories(cfg.out);
  const fs::path ckpt = cfg.out / "model.fatm", loss = cfg.out / "loss.csv";
  std::optional<trainer::TrainState> resume;
  if (t.resume && fs::exists(ckpt)) {
    resume = trainer::load_train_state(ckpt);
    if (fs::exists(loss))
      for (auto& r : trainer::read_loss_csv(loss))
        if (r.iteration < resume->iterations_done) resume->history.push_back(std::move(r));
  }
  auto save = [&](const trainer::TrainState& st) {
    trainer::save_train_state(st, ckpt);
    trainer::write_loss_csv(st.history, loss);
  };
  trainer::TrainState st = trainer::train(sets, tc, std::move(resume), save);
  save(st);
  return st;
}

DeidSummary cmd_deid(const Config& cfg) {
  const auto& d = cfg.deid;
  const fatm::FatmModel model = fatm::load_checkpoint(d.checkpoint);
  const std::string donor = pick_donor(cfg, model);
  const pipeline::Deidentifier deid(model, donor, d.feather_scale);

  std::map<std::string, facegeom::LandmarkSet> landmarks;
  if (!d.landmarks) {
    landmarks = pipeline::load_directory_landmarks(d.input);
  } else if (fs::is_directory(*d.landmarks)) {
    landmarks = pipeline::load_directory_landmarks(*d.landmarks);
  } else {
    for (auto& r : pipeline::read_landmarks_jsonl(*d.landmarks)) landmarks[r.image] = std::move(r.points);
  }

  fs::create_directories(cfg.out);
  if (d.write_masks) fs::create_directories(cfg.out / "masks");
  DeidSummary summary;
  ordered_json entries = ordered_json::array();
  ordered_json timing = ordered_json::array();
  for (const auto& path : pipeline::list_images(d.input)) {
    const std::string name = path.filename().string();
    ordered_json e;
    e["image"] = name;
    const auto it = landmarks.find(name);
    if (it == landmarks.end()) {
      e["status"] = "skipped";
      e["reason"] = "no landmark record";
      ++summary.skipped;
      entries.push_back(std::move(e));
      continue;
    }
    try {
      const Image img = read_rgb(path);
      const auto t0 = std::chrono::steady_clock::now();
      const pipeline::FaceResult r = deid.process(img, it->second);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      write_png(r.output, cfg.out / name);
      if (d.write_masks) write_png(r.alpha, cfg.out / "masks" / name);
      e["status"] = "ok";
      e["output"] = name;
      e["transform"] = r.transform.m;
      e["alignment_rms"] = r.alignment_rms;
      e["mask_area"] = r.mask_area;
      e["sigma"] = r.sigma;
      timing.push_back({{"image", name}, {"seconds", secs}});
      summary.seconds_per_face.push_back(secs);
      ++summary.processed;
    } catch (const Error& ex) {
      e["status"] = "error";
      e["error"] = ex.what();
      ++summary.failed;
    }
    entries.push_back(std::move(e));
  }
  ordered_json manifest;
  manifest["command"] = "deid";
  manifest["checkpoint"] = d.checkpoint.filename().string();
  manifest["donor"] = donor;
  manifest["feather_scale"] = d.feather_scale;
  manifest["processed"] = summary.processed;
  manifest["skipped"] = summary.skipped;
  manifest["failed"] = summary.failed;
  manifest["entries"] = std::move(entries);
  write_text(cfg.out / "manifest.json", manifest.dump(2) + "\n");
  write_text(cfg.out / "timing.json", ordered_json{{"faces", std::move(timing)}}.dump(2) + "\n");
  return summary;
}

void cmd_eval(const Config& cfg) {
  const auto& e = cfg.eval;
  const fatm::FatmModel model = fatm::load_checkpoint(e.checkpoint);
  const std::string donor = pick_donor(cfg, model);
  const pipeline::Deidentifier deid(model, donor, e.feather_scale);

  // The verifier works on aligned crops, so the gallery is loaded as face sets.
  std::vector<evalkit::ToyVerifier::Identity> gallery;
  for (const auto& g : e.gallery) {
    evalkit::ToyVerifier::Identity ident{g.id, {}};
    for (const auto& face : load_face_set(g.dir).faces) ident.images.push_back(facegeom::center_crop(face));
    gallery.push_back(std::move(ident));
  }
  const auto verifier = evalkit::ToyVerifier::train(gallery);

  const auto landmarks = pipeline::load_directory_landmarks(e.probes);
  std::vector<std::string> names;
  std::vector<Image> probes;
  for (const auto& p : pipeline::list_images(e.probes)) {
    names.push_back(p.filename().string());
    probes.push_back(read_rgb(p));
  }
  if (probes.empty()) throw InvalidConfigError("eval probes directory has no images");
  const std::size_t n = probes.size();
  auto landmarks_of = [&](std::size_t k) -> const facegeom::LandmarkSet& {
    const auto it = landmarks.find(names[k]);
    if (it == landmarks.end()) throw InvalidInputError("no landmark record for " + names[k]);
    return it->second;
  };

  // Pair i always starts with probe i, so the index tells the deid function
  // and the verifier view which landmarks to use.
  std::vector<std::pair<Image, Image>> paired, self;
  for (std::size_t i = 0; i < n; ++i) {
    paired.emplace_back(probes[i], probes[(i + 1) % n]);
    self.emplace_back(probes[i], probes[i]);
  }
  const evalkit::IndexedDeidFn fn = [&](const Image& img, std::size_t i) {
    return deid.process(img, landmarks_of(i)).output;
  };
  auto view_for = [&](std::size_t partner_offset) -> evalkit::VerifierView {
    return [&, partner_offset](const Image& img, std::size_t i, int slot) {
      const std::size_t k = slot == 0 ? i : (i + partner_offset) % n;
      return facegeom::center_crop(facegeom::align_face(img, landmarks_of(k)).face);
    };
  };
  const auto paired_report = evalkit::deid_effective_rate(paired, fn, verifier, view_for(1));
  const auto self_report = evalkit::deid_effective_rate(self, fn, verifier, view_for(0));

  fs::create_directories(cfg.out);
  ordered_json report;
  report["donor"] = donor;
  report["verifier_threshold"] = verifier.threshold();
  report["paired"] = ordered_json::parse(evalkit::report_to_json(paired_report));
  report["self"] = ordered_json::parse(evalkit::report_to_json(self_report));
  write_text(cfg.out / "report.json", report.dump(2) + "\n");
  evalkit::write_pairs_csv(paired_report, cfg.out / "pairs_paired.csv");
  evalkit::write_pairs_csv(self_report, cfg.out / "pairs_self.csv");
}

void cmd_gen_toy(const Config& cfg) {
  const auto& g = cfg.gen_toy;
  if (g.identities.empty()) throw InvalidConfigError("gen_toy needs at least one identity");
  if (g.images < 1) throw InvalidConfigError("gen_toy.images must be at least 1");
  std::map<std::string, toyfaces::IdentityParams> params;
  for (std::size_t i = 0; i < g.identities.size(); ++i) {
    const auto& ti = g.identities[i];
    if (ti.id.empty() || params.count(ti.id)) throw InvalidConfigError("gen_toy identity ids must be unique and nonempty");
    SplitMix64 rng = SplitMix64::derive(cfg.seed, {0x1d, i});
    const auto p = ti.params.value_or(toyfaces::IdentityParams::random(rng));
    params[ti.id] = p;

    const fs::path dir = cfg.out / "sets" / ti.id;
    fs::create_directories(dir);
    std::vector<pipeline::LandmarkRecord> records;
    const std::uint64_t set_seed = SplitMix64::derive(cfg.seed, {0x5e7, i}).next();
    for (int k = 0; k < g.images; ++k) {
      const auto r = toyfaces::render_sample(p, set_seed, k, g.render_size);
      write_png(r.image, dir / frame_name(k));
      records.push_back({frame_name(k), r.landmarks});
    }
    pipeline::write_landmarks_jsonl(records, dir / "landmarks.jsonl");
  }
  if (g.frames) {
    const auto it = params.find(g.frames->identity);
    if (it == params.end()) throw InvalidConfigError("gen_toy.frames.identity is not a listed identity");
    if (g.frames->count < 1) throw InvalidConfigError("gen_toy.frames.count must be at least 1");
    const fs::path dir = cfg.out / "frames";
    fs::create_directories(dir);
    std::vector<pipeline::LandmarkRecord> records;
    for (int k = 0; k < g.frames->count; ++k) {
      const auto r = toyfaces::render_face(it->second, toyfaces::sequence_attributes(k), g.frames->size);
      write_png(r.image, dir / frame_name(k));
      records.push_back({frame_name(k), r.landmarks});
    }
    pipeline::write_landmarks_jsonl(records, dir / "landmarks.jsonl");
  }
}

}  // namespace deidforge::commands
