#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "histnet/errors.hpp"
#include "histnet/training.hpp"

using namespace histnet;
namespace fs = std::filesystem;

namespace {

const char* kFourLabels =
    "era before during after\n"
    "nationality a b\n"
    "garment military formal informal\n"
    "label 0 before a military\n"
    "label 1 during a formal\n"
    "label 2 after b informal\n"
    "label 3 after b military\n";

Palette palette() { return Palette::load(HISTNET_SOURCE_DIR "/assets/parsing_palette.txt"); }

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("histnet_train_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

DatasetManifest synthetic_manifest(const fs::path& dir, int count, int size = 16, std::uint64_t seed = 3) {
  SyntheticOptions so;
  so.count = count;
  so.size = size;
  so.seed = seed;
  SyntheticSet set = write_synthetic_dataset(dir, palette(), so);
  DatasetManifest m;
  m.taxonomy = LabelTaxonomy::parse(kFourLabels);
  m.root = dir;
  for (std::size_t i = 0; i < set.files.size(); ++i) {
    SampleRecord r;
    r.id = fs::path(set.files[i]).stem().string();
    r.image_path = set.files[i];
    r.label = set.labels[i];
    r.label_source = LabelSource::manual;
    r.parsing_path = "parsing/" + r.id + ".png";
    m.records.push_back(r);
  }
  return m;
}

TrainConfig small_config(Ablation a = Ablation::full) {
  TrainConfig c = TrainConfig::test_preset();
  c.image_size = 16;
  c.batch_size = 4;
  c.info_dim = 8;
  c.ablation = a;
  c.seed = 11;
  return c;
}

Batch fixed_batch(int n, int size, std::uint64_t seed = 1) {
  Palette pal = palette();
  Rng rng(seed);
  std::vector<BatchItem> items;
  for (int i = 0; i < n; ++i) {
    SyntheticSample s = render_synthetic(i % 4, size, pal, rng);
    items.push_back({s.image, i % 4, s.parsing, "s" + std::to_string(i)});
  }
  return make_batch(items, pal);
}

std::vector<Tensor> snapshot(const ParameterSet& p) {
  std::vector<Tensor> out;
  for (const auto& it : p.items()) out.push_back(it.var.value());
  return out;
}

bool all_zero(const std::vector<Tensor>& grads, const ParameterSet& params, const std::string& prefix) {
  bool any = false;
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (params.items()[i].name.rfind(prefix, 0) != 0) continue;
    any = true;
    for (double v : grads[i].values())
      if (v != 0.0) return false;
  }
  REQUIRE(any);
  return true;
}

std::vector<std::string> lines(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  std::string l;
  while (std::getline(in, l)) out.push_back(l);
  return out;
}

}  // namespace

TEST_CASE("presets") {
  TrainConfig p = TrainConfig::paper_preset();
  CHECK(p.batch_size == 16);
  CHECK(p.image_size == 224);
  CHECK(p.epochs == 8);
  CHECK(p.learning_rate == 2e-5);
  CHECK(p.beta1 == 0.5);
  CHECK(p.beta2 == 0.999);
  CHECK(p.critic_steps_per_gen_step == 1);
  CHECK(p.scale_preset == ScalePreset::paper);
  TrainState s = make_train_state(small_config(), 4);
  CHECK(s.generator_opt.learning_rate() == s.config.learning_rate);
  CHECK(s.critic_opt.beta1() == 0.5);
  CHECK(s.critic_opt.beta2() == 0.999);
}

TEST_CASE("config text round trip and errors") {
  TrainConfig c = TrainConfig::parse("preset = test\nseed = 42\nablation = baseline+parsing\nlambda_par = 0.25\n");
  CHECK(c.scale_preset == ScalePreset::test);
  CHECK(c.seed == 42);
  CHECK(c.ablation == Ablation::baseline_parsing);
  CHECK(c.loss_weights.lambda_par == 0.25);
  CHECK(c.batch_size == TrainConfig::test_preset().batch_size);
  TrainConfig back = TrainConfig::parse(c.to_text());
  CHECK(back.to_text() == c.to_text());
  CHECK(TrainConfig::from_json(c.to_json()).to_text() == c.to_text());
  c.learning_rate = 0.1 + 0.2;
  CHECK(TrainConfig::parse(c.to_text()).learning_rate == c.learning_rate);

  CHECK_THROWS_AS(TrainConfig::parse("colour = red\n"), ValidationError);
  CHECK_THROWS_AS(TrainConfig::parse("seed = 1\npreset = test\n"), ValidationError);
  CHECK_THROWS_AS(TrainConfig::parse("batch_size = 0\n"), ValidationError);
  CHECK_THROWS_AS(TrainConfig::parse("batch_size = 4x\n"), ValidationError);
  CHECK_THROWS_AS(TrainConfig::parse("seed = 1\nseed = 2\n"), ValidationError);
  CHECK_THROWS_AS(TrainConfig::parse("ablation = most\n"), ValidationError);
  CHECK_THROWS_AS(TrainConfig::parse("beta2 = 1\n"), ValidationError);
  CHECK_THROWS_AS(TrainConfig::parse("lambda_g = -1\n"), ValidationError);
  for (const auto& k : train_config_keys()) {
    const bool listed = c.to_text().find(k) != std::string::npos || k.rfind("backbone", 0) == 0;
    CHECK(listed);
  }
}

TEST_CASE("ablation presets switch branches and weights") {
  struct Row {
    Ablation a;
    bool parsing, info;
    double par, cls, inf;
  };
  const LossWeights d;
  const Row rows[] = {{Ablation::baseline, false, false, 0, 0, 0},
                      {Ablation::baseline_parsing, true, false, d.lambda_par, 0, 0},
                      {Ablation::baseline_classifier, false, true, 0, d.lambda_cls, d.lambda_info},
                      {Ablation::full, true, true, d.lambda_par, d.lambda_cls, d.lambda_info}};
  for (const auto& r : rows) {
    TrainConfig c = small_config(r.a);
    ModelConfig m = c.model_config(4);
    CHECK(m.parsing_branch == r.parsing);
    CHECK(m.info_branch == r.info);
    LossWeights w = c.effective_weights();
    CHECK(w.lambda_par == r.par);
    CHECK(w.lambda_cls == r.cls);
    CHECK(w.lambda_info == r.inf);
    CHECK(w.lambda_g == d.lambda_g);
    CHECK(ablation_from_string(to_string(r.a)) == r.a);
  }
}

TEST_CASE("adam matches a hand-rolled reference") {
  ParameterSet ps;
  ps.add("w", Tensor({2}, std::vector<double>{1.0, -2.0}));
  Adam opt(ps, 0.1, 0.5, 0.999, 1e-8);
  const double g[3][2] = {{0.5, 0.0}, {-0.75, 1e-3}, {0.1, -3.0}};
  const double expect[3][2] = {{0.900000002, -2.0},
                               {0.9522926068079678, -2.094255998337326},
                               {0.9686648926104756, -1.9953476430511639}};
  for (int t = 0; t < 3; ++t) {
    opt.step({Tensor({2}, std::vector<double>{g[t][0], g[t][1]})});
    CHECK(ps.items()[0].var.value()[0] == doctest::Approx(expect[t][0]).epsilon(1e-14));
    CHECK(ps.items()[0].var.value()[1] == doctest::Approx(expect[t][1]).epsilon(1e-14));
  }
  CHECK(opt.steps() == 3);
}

TEST_CASE("teacher distribution and batches") {
  Tensor t = teacher_distribution({2, -1}, 4, 0.2);
  CHECK(t[2] == doctest::Approx(0.85));
  CHECK(t[0] == doctest::Approx(0.05));
  for (int k = 0; k < 4; ++k) CHECK(t[4 + k] == 0.25);
  CHECK_THROWS_AS(teacher_distribution({4}, 4, 0.1), ValidationError);

  RgbImage white(2, 2, 1.0);
  Batch b = make_batch({{white, 1, std::nullopt, "w"}}, palette());
  for (double v : b.gray.values()) CHECK(v == doctest::Approx(1.0).epsilon(1e-9));
  for (double v : b.ab.values()) CHECK(std::abs(v) < 1e-6);
  CHECK(b.parsing_mask == std::vector<bool>{false});
  for (double v : b.parsing.values()) CHECK(v == 0.0);
}

TEST_CASE("critic and generator steps touch only their own side") {
  Batch batch = fixed_batch(4, 16);
  TrainState a = make_train_state(small_config(), 4);
  TrainState b = make_train_state(small_config(), 4);
  auto gen_before = snapshot(a.generator.parameters());
  auto critic_before = snapshot(a.critic.parameters());
  CriticStepReport ra = train_step_critic(a, batch);
  CriticStepReport rb = train_step_critic(b, batch);
  CHECK(ra.loss == rb.loss);
  CHECK(std::isfinite(ra.loss));
  CHECK(snapshot(a.generator.parameters()) == gen_before);
  CHECK(snapshot(a.critic.parameters()) != critic_before);

  critic_before = snapshot(a.critic.parameters());
  LossReport ga = train_step_generator(a, batch);
  LossReport gb = train_step_generator(b, batch);
  CHECK(ga.total == gb.total);
  CHECK(snapshot(a.critic.parameters()) == critic_before);
  CHECK(snapshot(a.generator.parameters()) != gen_before);
  CHECK(a.step == 1);
  CHECK(a.critic_step == 1);
}

TEST_CASE("baseline critic step ignores the extra branches") {
  Batch batch = fixed_batch(4, 16);
  TrainConfig c = small_config(Ablation::baseline);
  TrainState a = make_train_state(c, 4);
  c.loss_weights.lambda_par = 0.5;
  c.loss_weights.lambda_cls = 0.7;
  c.loss_weights.lambda_info = 0.9;
  TrainState b = make_train_state(c, 4);
  for (int i = 0; i < 3; ++i) {
    CHECK(train_step_critic(a, batch).loss == train_step_critic(b, batch).loss);
    CHECK(train_step_generator(a, batch).total == train_step_generator(b, batch).total);
  }
}

TEST_CASE("ablation presets partition gradients over 10 steps") {
  Batch batch = fixed_batch(4, 16);
  struct Row {
    Ablation a;
    std::vector<std::string> gen_off, critic_off;
  };
  const Row rows[] = {{Ablation::baseline, {"g3.", "g2_info.", "g2."}, {"d2."}},
                      {Ablation::baseline_parsing, {"g2_info.", "g2."}, {"d2."}},
                      {Ablation::baseline_classifier, {"g3."}, {}}};
  for (const auto& r : rows) {
    CAPTURE(to_string(r.a));
    TrainState s = make_train_state(small_config(r.a), 4);
    for (int step = 0; step < 10; ++step) {
      CriticStepReport cr;
      auto cg = critic_gradients(s, batch, &cr);
      for (const auto& p : r.critic_off) CHECK(all_zero(cg, s.critic.parameters(), p));
      s.critic_opt.step(cg);
      LossReport lr;
      auto gg = generator_gradients(s, batch, &lr);
      for (const auto& p : r.gen_off) CHECK(all_zero(gg, s.generator.parameters(), p));
      if (r.a != Ablation::baseline_classifier) CHECK(lr.w_info == 0.0);
      if (r.a != Ablation::baseline_parsing) CHECK(lr.w_par == 0.0);
      s.generator_opt.step(gg);
    }
  }
  // With every branch on, each one learns.
  TrainState s = make_train_state(small_config(Ablation::full), 4);
  auto gg = generator_gradients(s, batch);
  for (const char* p : {"g0.", "g1.", "g2.", "g2_info.", "g3."}) CHECK_FALSE(all_zero(gg, s.generator.parameters(), p));
}

TEST_CASE("doubling lambda_par doubles the weighted parsing term") {
  Batch batch = fixed_batch(4, 16);
  TrainConfig c = small_config();
  TrainState a = make_train_state(c, 4);
  c.loss_weights.lambda_par *= 2;
  TrainState b = make_train_state(c, 4);
  LossReport ra = train_step_generator(a, batch);
  LossReport rb = train_step_generator(b, batch);
  CHECK(ra.l_par > 0);
  CHECK(rb.l_par == ra.l_par);
  CHECK(rb.w_par == doctest::Approx(2 * ra.w_par).epsilon(1e-15));
}

TEST_CASE("frozen generator: critic separates real from fake") {
  Batch batch = fixed_batch(4, 16, 7);
  TrainConfig c = small_config(Ablation::baseline);
  c.learning_rate = 1e-4;
  TrainState s = make_train_state(c, 4);
  std::vector<double> gap;
  for (int i = 0; i < 200; ++i) {
    CriticStepReport r = train_step_critic(s, batch);
    gap.push_back(r.real_score - r.fake_score);
  }
  // Means over consecutive 40-step windows rise monotonically.
  std::vector<double> window;
  for (int w = 0; w < 5; ++w) {
    double sum = 0;
    for (int i = 0; i < 40; ++i) sum += gap[w * 40 + i];
    window.push_back(sum / 40);
  }
  for (int w = 1; w < 5; ++w) CHECK(window[w] > window[w - 1]);
}

TEST_CASE("non-finite loss aborts with batch statistics") {
  Batch batch = fixed_batch(2, 16);
  batch.gray[5] = std::nan("");
  TrainState s = make_train_state(small_config(), 4);
  auto before = snapshot(s.generator.parameters());
  try {
    train_step_generator(s, batch);
    FAIL("expected NonFiniteLossError");
  } catch (const NonFiniteLossError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("gray") != std::string::npos);
    CHECK(msg.find("non-finite 1") != std::string::npos);
    CHECK(msg.find("s0") != std::string::npos);
  }
  CHECK(snapshot(s.generator.parameters()) == before);
  CHECK_THROWS_AS(train_step_critic(s, batch), NonFiniteLossError);
}

TEST_CASE("checkpoint round trip is bitwise") {
  fs::path dir = scratch("ckpt");
  Batch batch = fixed_batch(4, 16);
  TrainState s = make_train_state(small_config(), 4);
  train_step_critic(s, batch);
  train_step_generator(s, batch);
  s.permutation = {3, 1, 2, 0};
  s.batch_pos = 2;
  save_checkpoint(dir / "c", s);
  TrainState r = load_checkpoint(dir / "c");
  CHECK(snapshot(r.generator.parameters()) == snapshot(s.generator.parameters()));
  CHECK(snapshot(r.critic.parameters()) == snapshot(s.critic.parameters()));
  CHECK(r.rng.state() == s.rng.state());
  CHECK(r.permutation == s.permutation);
  CHECK(r.batch_pos == 2);
  CHECK(r.step == 1);
  CHECK(r.config.to_text() == s.config.to_text());
  TensorBundle a = read_tensor_bundle(dir / "c");
  save_checkpoint(dir / "d", r);
  TensorBundle b = read_tensor_bundle(dir / "d");
  CHECK(a.order == b.order);
  for (const auto& name : a.order) CHECK(a.get(name) == b.get(name));
  // The next step from the restored state matches the original.
  CHECK(train_step_critic(r, batch).loss == train_step_critic(s, batch).loss);
  CHECK(train_step_generator(r, batch).total == train_step_generator(s, batch).total);
  Generator g = load_generator(dir / "c");
  CHECK(g.parameters().scalar_count() == s.generator.parameters().scalar_count());
  CHECK_THROWS_AS(load_checkpoint(dir / "missing"), std::exception);
}

TEST_CASE("epoch loop") {
  fs::path dir = scratch("loop");
  DatasetManifest m = synthetic_manifest(dir, 20);
  m.records[3].split = Split::test;
  const Palette pal = palette();
  TrainConfig c = small_config();
  c.epochs = 2;
  c.batch_size = 8;

  SUBCASE("entry counts") {
    TrainState s = make_train_state(c, 4);
    std::ostringstream log;
    TrainResult r = train(s, m, pal, {dir / "ckpt", &log, {}, 0});
    auto ls = lines(log.str());
    // 19 train samples -> ceil(19 / 8) = 3 generator steps per epoch.
    int gen = 0, critic = 0;
    for (const auto& l : ls) {
      auto j = nlohmann::json::parse(l);
      gen += j["kind"] == "generator";
      critic += j["kind"] == "critic";
      if (j["kind"] == "generator") {
        for (const char* k : {"l_r", "l_par", "l_cls", "l_info", "l_g_generator_term", "w_par", "w_cls", "w_info",
                              "w_g", "total"})
          CHECK(j.contains(k));
      }
    }
    CHECK(gen == 6);
    CHECK(critic == 6);
    CHECK(r.generator_steps == 6);
    CHECK(s.epoch == 2);
    CHECK(fs::exists(dir / "ckpt" / "final" / "manifest.json"));
  }
  SUBCASE("identical seeds give identical logs") {
    TrainState a = make_train_state(c, 4), b = make_train_state(c, 4);
    std::ostringstream la, lb;
    train(a, m, pal, {{}, &la, {}, 0});
    train(b, m, pal, {{}, &lb, {}, 0});
    CHECK(la.str() == lb.str());
    CHECK(!la.str().empty());
  }
  SUBCASE("resume reproduces the uninterrupted run") {
    TrainState a = make_train_state(c, 4);
    std::ostringstream la;
    train(a, m, pal, {{}, &la, {}, 0});

    TrainState b = make_train_state(c, 4);
    std::ostringstream lb;
    train(b, m, pal, {{}, &lb, {}, 4});  // stops mid-second-epoch
    save_checkpoint(dir / "mid", b);
    TrainState r = load_checkpoint(dir / "mid");
    train(r, m, pal, {{}, &lb, {}, 0});
    CHECK(lb.str() == la.str());
    CHECK(snapshot(r.generator.parameters()) == snapshot(a.generator.parameters()));
  }
  SUBCASE("empty train split") {
    DatasetManifest e = m;
    for (auto& rec : e.records) rec.split = Split::test;
    TrainState s = make_train_state(c, 4);
    CHECK_THROWS_AS(train(s, e, pal), ValidationError);
    CHECK(s.step == 0);
  }
  SUBCASE("unreadable samples") {
    std::ofstream(dir / "images" / "broken.png") << "not an image";
    DatasetManifest big = synthetic_manifest(scratch("big"), 150, 16, 4);
    SampleRecord bad;
    bad.id = "broken";
    bad.image_path = fs::absolute(dir / "images" / "broken.png").string();
    big.records.push_back(bad);
    std::vector<std::string> warnings;
    TrainConfig one = c;
    one.epochs = 1;
    TrainState s = make_train_state(one, 4);
    TrainResult r = train(s, big, pal, {{}, nullptr, [&](const std::string& w) { warnings.push_back(w); }, 0});
    CHECK(r.skipped == 1);
    REQUIRE(warnings.size() == 1);
    CHECK(warnings[0].find("broken") != std::string::npos);

    DatasetManifest small = m;
    small.records.push_back(bad);
    TrainState t = make_train_state(one, 4);
    CHECK_THROWS_WITH_AS(train(t, small, pal), doctest::Contains("more than 1%"), ValidationError);
  }
  SUBCASE("label count must match the taxonomy") {
    TrainState s = make_train_state(c, 5);
    CHECK_THROWS_AS(train(s, m, pal), ValidationError);
  }
}
