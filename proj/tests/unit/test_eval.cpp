#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "histnet/errors.hpp"
#include "histnet/eval.hpp"
#include "histnet/image_io.hpp"
#include "histnet/random.hpp"
#include "histnet/tensor_store.hpp"

using namespace histnet;
namespace fs = std::filesystem;

namespace {

RgbImage uniform_image(int h, int w, double v) { return RgbImage(h, w, v); }

RgbImage random_image(int h, int w, std::uint64_t seed) {
  Rng rng(seed);
  RgbImage img(h, w);
  for (double& v : img.pixels) v = rng.uniform();
  return img;
}

RgbImage figure(int size, std::uint64_t seed) {
  Palette pal = Palette::load(HISTNET_SOURCE_DIR "/assets/parsing_palette.txt");
  Rng rng(seed);
  return render_synthetic(static_cast<int>(seed % 4), size, pal, rng).image;
}

}  // namespace

TEST_CASE("psnr closed forms") {
  CHECK(psnr(uniform_image(4, 5, 0.25), uniform_image(4, 5, 0.75)) == doctest::Approx(6.020599913279624).epsilon(1e-12));
  CHECK(std::abs(psnr(uniform_image(3, 3, 0.3), uniform_image(3, 3, 0.4)) - 20.0) < 1e-6);
  RgbImage a = random_image(8, 8, 1);
  CHECK(psnr(a, a) == kPsnrCap);
  CHECK_THROWS_AS(psnr(a, random_image(8, 9, 1)), ShapeError);

  // Shifting both images by the same constant leaves PSNR unchanged.
  RgbImage x = random_image(6, 6, 2), y = random_image(6, 6, 3);
  for (double& v : x.pixels) v *= 0.5;
  for (double& v : y.pixels) v *= 0.5;
  RgbImage xs = x, ys = y;
  for (double& v : xs.pixels) v += 0.25;
  for (double& v : ys.pixels) v += 0.25;
  CHECK(psnr(xs, ys) == doctest::Approx(psnr(x, y)).epsilon(1e-12));
}

TEST_CASE("ssim agrees with scikit-image on the shipped pairs") {
  const fs::path dir = HISTNET_SOURCE_DIR "/tests/fixtures/ssim";
  std::ifstream in(dir / "expected.json");
  auto expected = nlohmann::json::parse(in);
  REQUIRE(expected.size() == 20);
  for (const auto& e : expected) {
    CAPTURE(e["a"].get<std::string>());
    RgbImage a = read_rgb(dir / e["a"].get<std::string>());
    RgbImage b = read_rgb(dir / e["b"].get<std::string>());
    CHECK(std::abs(ssim(a, b) - e["ssim"].get<double>()) < 1e-4);
  }
}

TEST_CASE("ssim identities") {
  RgbImage a = random_image(16, 20, 4), b = random_image(16, 20, 5);
  CHECK(ssim(a, a) == 1.0);
  RgbImage f = figure(24, 3);
  CHECK(ssim(f, f) == 1.0);
  CHECK(std::abs(ssim(a, b) - ssim(b, a)) < 1e-12);

  RgbImage checker(16, 16);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x)
      for (int c = 0; c < 3; ++c) checker.at(y, x, c) = ((x / 2 + y / 2) % 2) ? 0.95 : 0.05;
  RgbImage inverse = checker;
  for (double& v : inverse.pixels) v = 1.0 - v;
  CHECK(ssim(checker, inverse) < 0.5);
  CHECK_THROWS_AS(ssim(random_image(10, 20, 1), random_image(10, 20, 2)), ValidationError);
}

TEST_CASE("random-projection distance") {
  RandomProjectionDistance d;
  RgbImage f = figure(32, 1);
  CHECK(d.distance(f, f) == 0.0);
  RgbImage g = figure(32, 2);
  CHECK(d.distance(f, g) > 0.0);
  CHECK(std::abs(d.distance(f, g) - d.distance(g, f)) < 1e-9);

  Rng rng(9);
  std::vector<double> noise(f.pixels.size());
  for (double& n : noise) n = rng.normal();
  double last = 0;
  for (double sigma : {0.05, 0.1, 0.2}) {
    RgbImage noisy = f;
    for (std::size_t i = 0; i < noisy.pixels.size(); ++i)
      noisy.pixels[i] = std::clamp(noisy.pixels[i] + sigma * noise[i], 0.0, 1.0);
    const double v = d.distance(f, noisy);
    CHECK(v > last);
    last = v;
  }
  RandomProjectionDistance other({3, 32, 1});
  CHECK(other.distance(f, g) != d.distance(f, g));
  CHECK(RandomProjectionDistance().distance(f, g) == d.distance(f, g));
}

TEST_CASE("learned-weights backend") {
  const fs::path dir = fs::temp_directory_path() / "histnet_lpips_weights";
  fs::remove_all(dir);
  try {
    LpipsBackend missing(dir);
    FAIL("expected an error");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("fallback") != std::string::npos);
  }
  CHECK_THROWS_AS(make_perceptual_backend("lpips:" + dir.string()), ValidationError);
  CHECK_THROWS_AS(make_perceptual_backend("vgg"), ValidationError);
  CHECK(make_perceptual_backend("fallback")->name().find("random-projection") == 0);

  // A narrow trunk with the right tensor names exercises the code path.
  Rng rng(2);
  TensorBundle b;
  const int convs[] = {0, 2, 5, 7, 10, 12, 14, 17, 19, 21, 24, 26, 28};
  int in = 3;
  for (int idx : convs) {
    b.put("features." + std::to_string(idx) + ".weight", rng.normal_tensor({4, in, 3, 3}, 0.3));
    b.put("features." + std::to_string(idx) + ".bias", rng.uniform_tensor({4}, 0.0, 0.1));
    in = 4;
  }
  for (int l = 0; l < 5; ++l) b.put("lin" + std::to_string(l) + ".weight", rng.uniform_tensor({1, 4, 1, 1}, 0.0, 1.0));
  write_tensor_bundle(dir, b);
  auto backend = make_perceptual_backend("lpips:" + dir.string());
  RgbImage f = figure(32, 1), g = figure(32, 2);
  CHECK(backend->distance(f, f) == 0.0);
  CHECK(backend->distance(f, g) > 0.0);
  CHECK(std::abs(backend->distance(f, g) - backend->distance(g, f)) < 1e-9);
  CHECK_THROWS_AS(backend->distance(figure(24, 1), figure(24, 2)), ValidationError);

  TensorBundle partial = b;
  partial.tensors.erase("lin3.weight");
  partial.order.erase(std::find(partial.order.begin(), partial.order.end(), "lin3.weight"));
  fs::remove_all(dir);
  write_tensor_bundle(dir, partial);
  CHECK_THROWS_WITH_AS(LpipsBackend{dir}, doctest::Contains("lin3.weight"), ValidationError);
}

TEST_CASE("colorize keeps the input lightness") {
  Generator gen(ModelConfig::test_preset(16, 4, 8), 5);
  std::vector<RgbImage> inputs = {grayscale_of(figure(16, 1)), figure(16, 2), figure(28, 3), random_image(20, 13, 4)};
  std::vector<RgbImage> out = colorize(gen, inputs, 3);
  REQUIRE(out.size() == inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    CHECK(out[i].height == inputs[i].height);
    CHECK(out[i].width == inputs[i].width);
    const LabImage want = rgb_to_lab(inputs[i]);
    const LabImage exact = rgb_to_lab(out[i]);
    // Written as 8-bit PNG and read back.
    const LabImage stored = rgb_to_lab(to_rgb(to_image8(out[i])));
    double worst_exact = 0, worst_stored = 0;
    for (std::size_t k = 0; k < want.pixel_count(); ++k) {
      worst_exact = std::max(worst_exact, std::abs(exact.L[k] - want.L[k]));
      worst_stored = std::max(worst_stored, std::abs(stored.L[k] - want.L[k]));
    }
    CHECK(worst_exact < 1e-6);
    CHECK(worst_stored <= 100.0 / 255.0);
  }
  auto max_diff = [](const RgbImage& a, const RgbImage& b) {
    double m = 0;
    for (std::size_t k = 0; k < a.pixels.size(); ++k) m = std::max(m, std::abs(a.pixels[k] - b.pixels[k]));
    return m;
  };
  // Batching does not change results beyond summation order.
  CHECK(max_diff(colorize(gen, inputs[2]), out[2]) < 1e-9);
  // Colour and grayscale versions of one image give the same output.
  CHECK(max_diff(colorize(gen, figure(16, 2)), colorize(gen, grayscale_of(figure(16, 2)))) < 1e-6);
}

TEST_CASE("metric reports") {
  RandomProjectionDistance d;
  std::vector<RgbImage> imgs = {figure(16, 1), figure(16, 2), figure(16, 3)};
  MetricReport self = evaluate_pairs(imgs, imgs, {"a", "b", "c"}, d, "identity");
  CHECK(self.lpips == 0.0);
  CHECK(self.psnr == kPsnrCap);
  CHECK(self.ssim == 1.0);
  CHECK(self.sample_count == 3);

  std::vector<RgbImage> other = {figure(16, 5), figure(16, 6), figure(16, 7)};
  MetricReport r = evaluate_pairs(other, imgs, {"a", "b", "c"}, d, "pairs");
  double lp = 0, ps = 0, ss = 0;
  for (const auto& m : r.images) lp += m.lpips, ps += m.psnr, ss += m.ssim;
  CHECK(r.lpips == doctest::Approx(lp / 3).epsilon(1e-15));
  CHECK(r.psnr == doctest::Approx(ps / 3).epsilon(1e-15));
  CHECK(r.ssim == doctest::Approx(ss / 3).epsilon(1e-15));
  CHECK(r.images[1].psnr == psnr(other[1], imgs[1]));

  auto j = r.to_json();
  CHECK(j["psnr"].get<double>() == r.psnr);
  CHECK(j["images"].size() == 3);
  const std::string table = r.to_table();
  CHECK(table.find("LPIPS") < table.find("PSNR"));
  CHECK(table.find("PSNR") < table.find("SSIM"));
  char psnr_text[32];
  std::snprintf(psnr_text, sizeof psnr_text, "%.3f", r.psnr);
  CHECK(table.find(psnr_text) != std::string::npos);
  CHECK_THROWS_AS(evaluate_pairs({}, {}, {}, d, "empty"), ValidationError);
}

TEST_CASE("evaluate over a manifest") {
  const fs::path dir = fs::temp_directory_path() / "histnet_eval_manifest";
  fs::remove_all(dir);
  Palette pal = Palette::load(HISTNET_SOURCE_DIR "/assets/parsing_palette.txt");
  SyntheticOptions so;
  so.count = 6;
  so.size = 20;
  SyntheticSet set = write_synthetic_dataset(dir, pal, so);
  DatasetManifest m;
  m.taxonomy = LabelTaxonomy::parse(
      "era e\nnationality n\ngarment g h i j\nlabel 0 e n g\nlabel 1 e n h\nlabel 2 e n i\nlabel 3 e n j\n");
  m.root = dir;
  for (std::size_t i = 0; i < set.files.size(); ++i) {
    SampleRecord r;
    r.id = "s" + std::to_string(i);
    r.image_path = set.files[i];
    r.split = i < 4 ? Split::test : Split::train;
    m.records.push_back(r);
  }
  Generator gen(ModelConfig::test_preset(16, 4, 8), 1);
  RandomProjectionDistance d;
  MetricReport r = evaluate(gen, m, d);
  CHECK(r.sample_count == 4);
  CHECK(r.images[0].id == "s0");
  CHECK(r.psnr > 0);
  CHECK(r.psnr < kPsnrCap);

  SampleRecord bad;
  bad.id = "gone";
  bad.image_path = "images/gone.png";
  bad.split = Split::test;
  m.records.push_back(bad);
  std::vector<std::string> warnings;
  MetricReport r2 = evaluate(gen, m, d, {Split::test, "x", [&](const std::string& w) { warnings.push_back(w); }});
  CHECK(r2.sample_count == 4);
  CHECK(warnings.size() == 1);

  Generator wrong(ModelConfig::test_preset(16, 5, 8), 1);
  CHECK_THROWS_AS(evaluate(wrong, m, d), ValidationError);
  for (auto& rec : m.records) rec.split = Split::train;
  CHECK_THROWS_AS(evaluate(gen, m, d), ValidationError);
}

TEST_CASE("reference figures are kept in column order") {
  CHECK(std::size(kReferenceAblation) == 4);
  for (std::size_t i = 1; i < std::size(kReferenceAblation); ++i) {
    CHECK(kReferenceAblation[i].lpips < kReferenceAblation[i - 1].lpips);
    CHECK(kReferenceAblation[i].psnr > kReferenceAblation[i - 1].psnr);
  }
  CHECK(kReferenceComparison[5].psnr == 30.638);
}
