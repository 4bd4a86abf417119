#include "histnet/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "histnet/errors.hpp"
#include "histnet/image_io.hpp"
#include "histnet/random.hpp"
#include "histnet/tensor_store.hpp"

namespace histnet {

namespace {

void require_same_size(const RgbImage& a, const RgbImage& b, const char* what) {
  if (a.height != b.height || a.width != b.width) {
    throw ShapeError(std::string(what) + ": " + std::to_string(a.height) + "x" + std::to_string(a.width) + " vs " +
                     std::to_string(b.height) + "x" + std::to_string(b.width));
  }
  if (a.pixel_count() == 0) throw ValidationError(std::string(what) + ": empty image");
}

// [1, 3, H, W] in [-1, 1].
Tensor to_input(const RgbImage& img) {
  const std::size_t hw = img.pixel_count();
  Tensor t({1, 3, img.height, img.width});
  for (std::size_t i = 0; i < hw; ++i)
    for (int c = 0; c < 3; ++c) t[c * hw + i] = img.pixels[i * 3 + c] * 2.0 - 1.0;
  return t;
}

// Per-pixel unit normalization over channels of [1, C, H, W].
Tensor unit_channels(const Tensor& f) {
  const int c = f.dim(1);
  const std::size_t hw = static_cast<std::size_t>(f.dim(2)) * f.dim(3);
  Tensor out = f;
  for (std::size_t i = 0; i < hw; ++i) {
    double n = 0;
    for (int k = 0; k < c; ++k) n += f[k * hw + i] * f[k * hw + i];
    n = std::sqrt(n) + 1e-10;
    for (int k = 0; k < c; ++k) out[k * hw + i] = f[k * hw + i] / n;
  }
  return out;
}

}  // namespace

double psnr(const RgbImage& a, const RgbImage& b, double peak) {
  require_same_size(a, b, "psnr");
  if (!(peak > 0)) throw ValidationError("psnr: peak must be positive");
  double se = 0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    const double d = a.pixels[i] - b.pixels[i];
    se += d * d;
  }
  const double mse = se / static_cast<double>(a.pixels.size());
  if (mse == 0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(peak * peak / mse));
}

std::vector<double> luma(const RgbImage& img) {
  std::vector<double> y(img.pixel_count());
  for (std::size_t i = 0; i < y.size(); ++i)
    y[i] = 0.299 * img.pixels[3 * i] + 0.587 * img.pixels[3 * i + 1] + 0.114 * img.pixels[3 * i + 2];
  return y;
}

double ssim_plane(const std::vector<double>& a, const std::vector<double>& b, int h, int w) {
  constexpr int kWin = 11;
  constexpr double kSigma = 1.5, kC1 = 0.01 * 0.01, kC2 = 0.03 * 0.03;
  const std::size_t n = static_cast<std::size_t>(h) * w;
  if (a.size() != n || b.size() != n) throw ShapeError("ssim: plane sizes do not match " + std::to_string(h) + "x" + std::to_string(w));
  if (h < kWin || w < kWin) {
    throw ValidationError("ssim: images must be at least 11x11, got " + std::to_string(h) + "x" + std::to_string(w));
  }
  double g[kWin], total = 0;
  for (int i = 0; i < kWin; ++i) {
    const double d = i - kWin / 2;
    g[i] = std::exp(-d * d / (2 * kSigma * kSigma));
    total += g[i];
  }
  for (double& v : g) v /= total;

  const int oh = h - kWin + 1, ow = w - kWin + 1;
  // Valid-mode separable filter.
  auto filter = [&](const std::vector<double>& src) {
    std::vector<double> rows(static_cast<std::size_t>(h) * ow), out(static_cast<std::size_t>(oh) * ow);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < ow; ++x) {
        double s = 0;
        for (int k = 0; k < kWin; ++k) s += g[k] * src[static_cast<std::size_t>(y) * w + x + k];
        rows[static_cast<std::size_t>(y) * ow + x] = s;
      }
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x) {
        double s = 0;
        for (int k = 0; k < kWin; ++k) s += g[k] * rows[static_cast<std::size_t>(y + k) * ow + x];
        out[static_cast<std::size_t>(y) * ow + x] = s;
      }
    return out;
  };
  std::vector<double> aa(n), bb(n), ab(n);
  for (std::size_t i = 0; i < n; ++i) {
    aa[i] = a[i] * a[i];
    bb[i] = b[i] * b[i];
    ab[i] = a[i] * b[i];
  }
  const auto mu_a = filter(a), mu_b = filter(b), e_aa = filter(aa), e_bb = filter(bb), e_ab = filter(ab);
  double sum = 0;
  for (std::size_t i = 0; i < mu_a.size(); ++i) {
    const double va = e_aa[i] - mu_a[i] * mu_a[i];
    const double vb = e_bb[i] - mu_b[i] * mu_b[i];
    const double cov = e_ab[i] - mu_a[i] * mu_b[i];
    sum += ((2 * mu_a[i] * mu_b[i] + kC1) * (2 * cov + kC2)) /
           ((mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + kC1) * (va + vb + kC2));
  }
  return sum / static_cast<double>(mu_a.size());
}

double ssim(const RgbImage& a, const RgbImage& b) {
  require_same_size(a, b, "ssim");
  return ssim_plane(luma(a), luma(b), a.height, a.width);
}

// ------------------------------------------------------- perceptual distance

RandomProjectionDistance::RandomProjectionDistance() : RandomProjectionDistance(Options{}) {}

RandomProjectionDistance::RandomProjectionDistance(Options opts) : opts_(opts) {
  if (opts_.scales < 1 || opts_.features < 1) throw ValidationError("random projection: scales and features must be >= 1");
  Rng rng(opts_.seed);
  for (int s = 0; s < opts_.scales; ++s) filters_.push_back(rng.normal_tensor({opts_.features, 3, 3, 3}, 1.0 / std::sqrt(27.0)));
}

std::string RandomProjectionDistance::name() const {
  return "random-projection(scales " + std::to_string(opts_.scales) + ", features " + std::to_string(opts_.features) +
         ", seed " + std::to_string(opts_.seed) + ")";
}

double RandomProjectionDistance::distance(const RgbImage& a, const RgbImage& b) const {
  require_same_size(a, b, "perceptual distance");
  NoGradGuard no_grad;
  RgbImage x = a, y = b;
  double total = 0;
  int used = 0;
  for (int s = 0; s < opts_.scales; ++s) {
    if (s > 0) {
      if (x.height / 2 < 3 || x.width / 2 < 3) break;
      x = resize(x, x.height / 2, x.width / 2);
      y = resize(y, y.height / 2, y.width / 2);
    }
    Var w = Var::constant(filters_[s]);
    auto features = [&](const RgbImage& img) {
      Var f = ops::leaky_relu(ops::conv2d(Var::constant(to_input(img)), w, {1, 1}), 0.0);
      return unit_channels(f.value());
    };
    const Tensor fx = features(x), fy = features(y);
    const std::size_t hw = x.pixel_count();
    double d = 0;
    for (std::size_t i = 0; i < fx.size(); ++i) d += (fx[i] - fy[i]) * (fx[i] - fy[i]);
    total += d / static_cast<double>(hw);
    ++used;
  }
  return total / used;
}

namespace {

constexpr int kVggConvs[] = {0, 2, 5, 7, 10, 12, 14, 17, 19, 21, 24, 26, 28};
// Feature taps after these conv indices; a pool follows each tap except the last.
constexpr int kVggTaps[] = {2, 7, 14, 21, 28};

}  // namespace

LpipsBackend::LpipsBackend(const std::filesystem::path& dir) {
  const std::string hint = "; pass '--perceptual fallback' to use the built-in random-projection distance";
  if (!std::filesystem::exists(dir / "manifest.json")) {
    throw ValidationError("LPIPS weights not found at " + dir.string() + hint);
  }
  weights_ = read_tensor_bundle(dir);
  std::vector<std::string> need;
  for (int i : kVggConvs) {
    need.push_back("features." + std::to_string(i) + ".weight");
    need.push_back("features." + std::to_string(i) + ".bias");
  }
  for (int i = 0; i < 5; ++i) need.push_back("lin" + std::to_string(i) + ".weight");
  for (const auto& n : need)
    if (!weights_.has(n)) throw ValidationError("LPIPS weights at " + dir.string() + " lack tensor '" + n + "'" + hint);
}

double LpipsBackend::distance(const RgbImage& a, const RgbImage& b) const {
  require_same_size(a, b, "perceptual distance");
  NoGradGuard no_grad;
  static const double shift[3] = {-0.030, -0.088, -0.188};
  static const double scale[3] = {0.458, 0.448, 0.450};
  auto taps = [&](const RgbImage& img) {
    Tensor t = to_input(img);
    const std::size_t hw = img.pixel_count();
    for (int c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < hw; ++i) t[c * hw + i] = (t[c * hw + i] - shift[c]) / scale[c];
    Var x = Var::constant(t);
    std::vector<Tensor> out;
    for (int idx : kVggConvs) {
      const std::string p = "features." + std::to_string(idx);
      x = ops::conv2d(x, Var::constant(weights_.get(p + ".weight")), {1, 1});
      x = add_bias(x, Var::constant(weights_.get(p + ".bias")));
      x = ops::leaky_relu(x, 0.0);
      if (std::find(std::begin(kVggTaps), std::end(kVggTaps), idx) != std::end(kVggTaps)) {
        out.push_back(unit_channels(x.value()));
        if (idx != 28) {
          if (x.shape()[2] % 2 || x.shape()[3] % 2) {
            throw ValidationError("LPIPS backend needs image sides divisible by 16");
          }
          x = ops::max_pool2(x);
        }
      }
    }
    return out;
  };
  const auto fa = taps(a), fb = taps(b);
  double total = 0;
  for (int l = 0; l < 5; ++l) {
    const Tensor& lin = weights_.get("lin" + std::to_string(l) + ".weight");
    const int c = fa[l].dim(1);
    if (static_cast<int>(lin.size()) != c) throw ValidationError("LPIPS lin" + std::to_string(l) + " has the wrong width");
    const std::size_t hw = static_cast<std::size_t>(fa[l].dim(2)) * fa[l].dim(3);
    double s = 0;
    for (int k = 0; k < c; ++k)
      for (std::size_t i = 0; i < hw; ++i) {
        const double d = fa[l][k * hw + i] - fb[l][k * hw + i];
        s += lin[k] * d * d;
      }
    total += s / static_cast<double>(hw);
  }
  return total;
}

std::unique_ptr<PerceptualBackend> make_perceptual_backend(const std::string& spec) {
  if (spec == "fallback") return std::make_unique<RandomProjectionDistance>();
  if (spec.rfind("lpips:", 0) == 0) return std::make_unique<LpipsBackend>(spec.substr(6));
  throw ValidationError("unknown perceptual backend '" + spec + "' (fallback | lpips:<weights dir>)");
}

// ---------------------------------------------------------------- inference

RgbImage grayscale_of(const RgbImage& img) {
  LabImage lab = rgb_to_lab(img);
  std::fill(lab.a.begin(), lab.a.end(), 0.0);
  std::fill(lab.b.begin(), lab.b.end(), 0.0);
  return lab_to_rgb(lab);
}

std::vector<RgbImage> colorize(const Generator& gen, const std::vector<RgbImage>& inputs, int batch_size) {
  if (batch_size < 1) throw ValidationError("colorize: batch_size must be >= 1");
  const int s = gen.config().input_size;
  const std::size_t ss = static_cast<std::size_t>(s) * s;
  std::vector<RgbImage> out;
  out.reserve(inputs.size());
  NoGradGuard no_grad;
  for (std::size_t start = 0; start < inputs.size(); start += batch_size) {
    const std::size_t end = std::min(inputs.size(), start + batch_size);
    const int n = static_cast<int>(end - start);
    std::vector<LabImage> labs;
    Tensor gray({n, 1, s, s});
    for (int i = 0; i < n; ++i) {
      const RgbImage& img = inputs[start + i];
      labs.push_back(rgb_to_lab(img));
      RgbImage plane(img.height, img.width);
      for (std::size_t k = 0; k < img.pixel_count(); ++k)
        for (int c = 0; c < 3; ++c) plane.pixels[3 * k + c] = labs.back().L[k] / 100.0;
      RgbImage small = resize(plane, s, s);
      for (std::size_t k = 0; k < ss; ++k) gray[i * ss + k] = normalize_luminance(small.pixels[3 * k] * 100.0);
    }
    const Tensor ab = gen.forward(Var::constant(gray)).ab.value();
    for (int i = 0; i < n; ++i) {
      const LabImage& lab = labs[i];
      RgbImage chroma(s, s);
      for (std::size_t k = 0; k < ss; ++k) {
        chroma.pixels[3 * k] = (ab[(2 * i) * ss + k] + 1.0) / 2.0;
        chroma.pixels[3 * k + 1] = (ab[(2 * i + 1) * ss + k] + 1.0) / 2.0;
      }
      RgbImage full = resize(chroma, lab.height, lab.width);
      RgbImage result(lab.height, lab.width);
      for (std::size_t k = 0; k < lab.pixel_count(); ++k) {
        const Rgb c = lab_to_rgb_keep_lightness(Lab{lab.L[k], (full.pixels[3 * k] * 2.0 - 1.0) * kChromaScale,
                                                    (full.pixels[3 * k + 1] * 2.0 - 1.0) * kChromaScale});
        result.pixels[3 * k] = c.r;
        result.pixels[3 * k + 1] = c.g;
        result.pixels[3 * k + 2] = c.b;
      }
      out.push_back(std::move(result));
    }
  }
  return out;
}

RgbImage colorize(const Generator& gen, const RgbImage& input) { return colorize(gen, std::vector<RgbImage>{input})[0]; }

// ------------------------------------------------------------------ reports

std::string MetricReport::to_table() const {
  char line[160];
  std::string out;
  std::snprintf(line, sizeof line, "%-24s %10s %10s %10s\n", "Method", "LPIPS\xE2\x86\x93", "PSNR\xE2\x86\x91",
                "SSIM\xE2\x86\x91");
  out += line;
  std::snprintf(line, sizeof line, "%-24s %8.4f %8.3f %8.4f\n", method.c_str(), lpips, psnr, ssim);
  out += line;
  out += "(" + std::to_string(sample_count) + " images, perceptual backend: " + perceptual_backend + ")\n";
  return out;
}

nlohmann::json MetricReport::to_json() const {
  nlohmann::json imgs = nlohmann::json::array();
  for (const auto& m : images) imgs.push_back({{"id", m.id}, {"lpips", m.lpips}, {"psnr", m.psnr}, {"ssim", m.ssim}});
  return {{"method", method},
          {"perceptual_backend", perceptual_backend},
          {"sample_count", sample_count},
          {"psnr_cap", kPsnrCap},
          {"lpips", lpips},
          {"psnr", psnr},
          {"ssim", ssim},
          {"images", imgs}};
}

MetricReport evaluate_pairs(const std::vector<RgbImage>& predictions, const std::vector<RgbImage>& references,
                            const std::vector<std::string>& ids, const PerceptualBackend& backend,
                            const std::string& method) {
  if (predictions.empty()) throw ValidationError("evaluate: no images");
  if (predictions.size() != references.size() || ids.size() != references.size()) {
    throw ValidationError("evaluate: predictions, references and ids differ in count");
  }
  MetricReport r;
  r.method = method;
  r.perceptual_backend = backend.name();
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    ImageMetrics m{ids[i], backend.distance(predictions[i], references[i]), psnr(predictions[i], references[i]),
                   ssim(predictions[i], references[i])};
    r.images.push_back(m);
    r.lpips += m.lpips;
    r.psnr += m.psnr;
    r.ssim += m.ssim;
  }
  r.sample_count = r.images.size();
  const double n = static_cast<double>(r.sample_count);
  r.lpips /= n;
  r.psnr /= n;
  r.ssim /= n;
  return r;
}

MetricReport evaluate(const Generator& gen, const DatasetManifest& manifest, const PerceptualBackend& backend,
                      const EvaluateOptions& opts) {
  if (manifest.taxonomy.label_count() != gen.config().label_count) {
    throw ValidationError("checkpoint was trained for " + std::to_string(gen.config().label_count) +
                          " labels but the manifest taxonomy has " + std::to_string(manifest.taxonomy.label_count()));
  }
  const auto idx = manifest.indices(opts.split);
  if (idx.empty()) throw ValidationError("manifest has no " + to_string(opts.split) + " samples");
  std::vector<RgbImage> refs;
  std::vector<std::string> ids;
  for (std::size_t i : idx) {
    const SampleRecord& r = manifest.records[i];
    try {
      refs.push_back(resize_center_crop(read_rgb(manifest.resolve(r.image_path)), gen.config().input_size));
      ids.push_back(r.id);
    } catch (const std::exception& e) {
      if (opts.warn) opts.warn("skipping unreadable image '" + r.id + "': " + e.what());
    }
  }
  if (refs.empty()) throw ValidationError("no readable images in the " + to_string(opts.split) + " split");
  return evaluate_pairs(colorize(gen, refs), refs, ids, backend, opts.method);
}

}  // namespace histnet
