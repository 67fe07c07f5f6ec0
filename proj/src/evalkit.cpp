#include "deidforge/evalkit.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>

#include "deidforge/errors.hpp"
#include "json.hpp"

namespace deidforge::evalkit {

namespace {

std::vector<double> gaussian_1d() {
  std::vector<double> g(kSsimWindow);
  const int r = kSsimWindow / 2;
  double total = 0.0;
  for (int i = 0; i < kSsimWindow; ++i) total += g[i] = std::exp(-0.5 * (i - r) * (i - r) / (kSsimSigma * kSsimSigma));
  for (double& v : g) v /= total;
  return g;
}

// Valid-mode separable filtering of a w x h plane.
std::vector<double> filter_valid(const std::vector<double>& src, int w, int h, const std::vector<double>& g) {
  const int k = static_cast<int>(g.size());
  const int ow = w - k + 1, oh = h - k + 1;
  std::vector<double> tmp(static_cast<std::size_t>(ow) * h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int i = 0; i < k; ++i) s += g[i] * src[static_cast<std::size_t>(y) * w + x + i];
      tmp[static_cast<std::size_t>(y) * ow + x] = s;
    }
  std::vector<double> out(static_cast<std::size_t>(ow) * oh);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int i = 0; i < k; ++i) s += g[i] * tmp[static_cast<std::size_t>(y + i) * ow + x];
      out[static_cast<std::size_t>(y) * ow + x] = s;
    }
  return out;
}

std::vector<double> luma_plane(const Image& img) {
  const Image l = to_luma(img);
  return {l.pixels.begin(), l.pixels.end()};
}

}  // namespace

std::vector<double> ssim_window() {
  const auto g = gaussian_1d();
  std::vector<double> w(kSsimWindow * kSsimWindow);
  for (int y = 0; y < kSsimWindow; ++y)
    for (int x = 0; x < kSsimWindow; ++x) w[y * kSsimWindow + x] = g[y] * g[x];
  return w;
}

double ssim(const Image& a, const Image& b) {
  if (a.width != b.width || a.height != b.height || a.channels != b.channels)
    throw InvalidInputError("ssim needs images of identical size");
  if (a.width < kSsimWindow || a.height < kSsimWindow)
    throw InvalidInputError("ssim needs images of at least 11x11 pixels");
  const int w = a.width, h = a.height;
  const std::vector<double> x = luma_plane(a), y = luma_plane(b);
  std::vector<double> xx(x.size()), yy(x.size()), xy(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  const auto g = gaussian_1d();
  const auto mx = filter_valid(x, w, h, g), my = filter_valid(y, w, h, g);
  const auto exx = filter_valid(xx, w, h, g), eyy = filter_valid(yy, w, h, g), exy = filter_valid(xy, w, h, g);
  constexpr double c1 = (kSsimK1 * 1.0) * (kSsimK1 * 1.0);
  constexpr double c2 = (kSsimK2 * 1.0) * (kSsimK2 * 1.0);
  double total = 0.0;
  for (std::size_t i = 0; i < mx.size(); ++i) {
    const double vx = exx[i] - mx[i] * mx[i], vy = eyy[i] - my[i] * my[i], cxy = exy[i] - mx[i] * my[i];
    total += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cxy + c2)) /
             ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
  }
  return total / static_cast<double>(mx.size());
}

// ---------------------------------------------------------------------------

std::vector<double> ToyVerifier::embed(const Image& img) {
  const Image small = resize_area(to_luma(img), kThumb, kThumb);
  std::vector<double> e(small.pixels.begin(), small.pixels.end());
  double mean = 0.0;
  for (double v : e) mean += v;
  mean /= static_cast<double>(e.size());
  double norm = 0.0;
  for (double& v : e) {
    v -= mean;
    norm += v * v;
  }
  norm = std::sqrt(norm);
  // A flat image has no pattern left; it embeds at the origin.
  for (double& v : e) v = norm > 1e-12 ? v / norm : 0.0;
  return e;
}

namespace {

double distance(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

}  // namespace

ToyVerifier ToyVerifier::train(const std::vector<Identity>& identities, double quantile, double margin) {
  if (identities.size() < 2) throw InvalidConfigError("verifier needs at least two identities");
  if (!(quantile > 0.0 && quantile <= 1.0) || !(margin > 0.0))
    throw InvalidConfigError("verifier calibration parameters out of range");
  ToyVerifier v;
  std::vector<std::vector<std::vector<double>>> embeddings;
  for (const auto& ident : identities) {
    if (ident.images.empty()) throw InvalidDataError("verifier identity '" + ident.id + "' has no images");
    std::vector<std::vector<double>> es;
    std::vector<double> c(kThumb * kThumb, 0.0);
    for (const Image& img : ident.images) {
      es.push_back(embed(img));
      for (std::size_t i = 0; i < c.size(); ++i) c[i] += es.back()[i];
    }
    for (double& x : c) x /= static_cast<double>(es.size());
    v.ids_.push_back(ident.id);
    v.centroids_.push_back(std::move(c));
    embeddings.push_back(std::move(es));
  }
  std::vector<double> own;
  for (std::size_t k = 0; k < embeddings.size(); ++k)
    for (const auto& e : embeddings[k]) own.push_back(distance(e, v.centroids_[k]));
  std::sort(own.begin(), own.end());
  const std::size_t at = std::min(own.size() - 1, static_cast<std::size_t>(std::ceil(quantile * own.size())) - 1);
  v.tau_ = margin * own[at];
  if (!(v.tau_ > 0.0)) throw InvalidDataError("verifier threshold degenerated to zero");
  return v;
}

std::pair<std::string, double> ToyVerifier::classify(const Image& img) const {
  const auto e = embed(img);
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < centroids_.size(); ++k) {
    const double d = distance(e, centroids_[k]);
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return {ids_[best], best_d};
}

Verdict ToyVerifier::verify(const Image& a, const Image& b) const {
  const auto [ia, da] = classify(a);
  const auto [ib, db] = classify(b);
  const double d = distance(embed(a), embed(b));
  return {ia == ib && da <= tau_ && db <= tau_, std::exp(-d * d / (2.0 * tau_ * tau_))};
}

// ---------------------------------------------------------------------------

void EvalReport::recompute() {
  n_pairs = static_cast<int>(pairs.size());
  n_failed = 0;
  int pre = 0, post = 0, ok = 0;
  double s = 0.0, s2 = 0.0;
  for (const auto& p : pairs) {
    if (!p.ok) {
      ++n_failed;
      continue;
    }
    ++ok;
    pre += p.pre_same;
    post += p.post_same;
    s += p.ssim;
  }
  pre_deid_same_rate = ok ? static_cast<double>(pre) / ok : 0.0;
  post_deid_same_rate = ok ? static_cast<double>(post) / ok : 0.0;
  effective_rate = ok ? static_cast<double>(ok - post) / ok : 0.0;
  ssim_mean = ok ? s / ok : 0.0;
  for (const auto& p : pairs)
    if (p.ok) s2 += (p.ssim - ssim_mean) * (p.ssim - ssim_mean);
  ssim_std = ok ? std::sqrt(s2 / ok) : 0.0;
}

EvalReport deid_effective_rate(const std::vector<std::pair<Image, Image>>& pairs, const DeidFn& deid,
                               const VerifierInterface& verifier, const VerifierView& view) {
  return deid_effective_rate(
      pairs, IndexedDeidFn([&deid](const Image& img, std::size_t) { return deid(img); }), verifier, view);
}

EvalReport deid_effective_rate(const std::vector<std::pair<Image, Image>>& pairs, const IndexedDeidFn& deid,
                               const VerifierInterface& verifier, const VerifierView& view) {
  auto seen = [&view](const Image& img, std::size_t i, int slot) { return view ? view(img, i, slot) : img; };
  if (pairs.empty()) throw InvalidInputError("evaluation needs at least one pair");
  EvalReport r;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    PairRecord rec;
    rec.index = static_cast<int>(i);
    try {
      const auto& [a, b] = pairs[i];
      const Image vb = seen(b, i, 1);
      const Verdict before = verifier.verify(seen(a, i, 0), vb);
      const Image changed = deid(a, i);
      const Verdict after = verifier.verify(seen(changed, i, 0), vb);
      rec.pre_same = before.same;
      rec.pre_score = before.score;
      rec.post_same = after.same;
      rec.post_score = after.score;
      rec.ssim = ssim(a, changed);
    } catch (const std::exception& e) {
      rec = PairRecord{};
      rec.index = static_cast<int>(i);
      rec.ok = false;
      rec.error = e.what();
    }
    r.pairs.push_back(std::move(rec));
  }
  r.recompute();
  return r;
}

std::string report_to_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["n_pairs"] = r.n_pairs;
  j["n_failed"] = r.n_failed;
  j["pre_deid_same_rate"] = r.pre_deid_same_rate;
  j["post_deid_same_rate"] = r.post_deid_same_rate;
  j["effective_rate"] = r.effective_rate;
  j["ssim_mean"] = r.ssim_mean;
  j["ssim_std"] = r.ssim_std;
  auto& arr = j["pairs"] = nlohmann::ordered_json::array();
  for (const auto& p : r.pairs) {
    nlohmann::ordered_json e;
    e["index"] = p.index;
    e["ok"] = p.ok;
    if (!p.ok) e["error"] = p.error;
    e["pre_same"] = p.pre_same;
    e["post_same"] = p.post_same;
    e["pre_score"] = p.pre_score;
    e["post_score"] = p.post_score;
    e["ssim"] = p.ssim;
    arr.push_back(std::move(e));
  }
  return j.dump(2) + "\n";
}

EvalReport report_from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    EvalReport r;
    r.n_pairs = j.at("n_pairs").get<int>();
    r.n_failed = j.at("n_failed").get<int>();
    r.pre_deid_same_rate = j.at("pre_deid_same_rate").get<double>();
    r.post_deid_same_rate = j.at("post_deid_same_rate").get<double>();
    r.effective_rate = j.at("effective_rate").get<double>();
    r.ssim_mean = j.at("ssim_mean").get<double>();
    r.ssim_std = j.at("ssim_std").get<double>();
    for (const auto& e : j.at("pairs")) {
      PairRecord p;
      p.index = e.at("index").get<int>();
      p.ok = e.at("ok").get<bool>();
      if (!p.ok) p.error = e.at("error").get<std::string>();
      p.pre_same = e.at("pre_same").get<bool>();
      p.post_same = e.at("post_same").get<bool>();
      p.pre_score = e.at("pre_score").get<double>();
      p.post_score = e.at("post_score").get<double>();
      p.ssim = e.at("ssim").get<double>();
      r.pairs.push_back(std::move(p));
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidDataError(std::string("malformed evaluation report: ") + e.what());
  }
}

void write_pairs_csv(const EvalReport& r, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << "index,ok,pre_same,post_same,pre_score,post_score,ssim,error\n";
  char buf[64];
  auto num = [&buf](double v) {
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
  };
  for (const auto& p : r.pairs) {
    std::string err = p.error;
    std::replace(err.begin(), err.end(), ',', ';');
    std::replace(err.begin(), err.end(), '\n', ' ');
    os << p.index << ',' << p.ok << ',' << p.pre_same << ',' << p.post_same << ',' << num(p.pre_score) << ','
       << num(p.post_score) << ',' << num(p.ssim) << ',' << err << '\n';
  }
}

}  // namespace deidforge::evalkit
