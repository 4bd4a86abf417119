#include "histnet/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "histnet/colorspace.hpp"
#include "histnet/errors.hpp"
#include "histnet/image_io.hpp"

namespace histnet {

using nlohmann::json;

std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::baseline: return "baseline";
    case Ablation::baseline_parsing: return "baseline+parsing";
    case Ablation::baseline_classifier: return "baseline+classifier";
    case Ablation::full: return "full";
  }
  return "full";
}

Ablation ablation_from_string(const std::string& s) {
  for (Ablation a : {Ablation::baseline, Ablation::baseline_parsing, Ablation::baseline_classifier, Ablation::full})
    if (to_string(a) == s) return a;
  throw ValidationError("unknown ablation '" + s + "' (baseline | baseline+parsing | baseline+classifier | full)");
}

// ------------------------------------------------------------------ config

TrainConfig TrainConfig::paper_preset() { return TrainConfig{}; }

TrainConfig TrainConfig::test_preset() {
  TrainConfig c;
  c.scale_preset = ScalePreset::test;
  c.batch_size = 8;
  c.image_size = 32;
  c.epochs = 2;
  c.learning_rate = 1e-3;
  c.info_dim = 16;
  return c;
}

void TrainConfig::validate() const {
  auto positive = [](const char* name, double v) {
    if (!(v > 0) || !std::isfinite(v)) throw ValidationError(std::string(name) + " must be positive");
  };
  positive("batch_size", batch_size);
  positive("image_size", image_size);
  positive("epochs", epochs);
  positive("learning_rate", learning_rate);
  positive("adam_epsilon", adam_epsilon);
  positive("critic_steps_per_gen_step", critic_steps_per_gen_step);
  positive("info_dim", info_dim);
  positive("gp_coefficient", loss_options.gp_coefficient);
  positive("kl_floor", loss_options.kl_floor);
  if (!(beta1 >= 0 && beta1 < 1)) throw ValidationError("beta1 must lie in [0, 1)");
  if (!(beta2 >= 0 && beta2 < 1)) throw ValidationError("beta2 must lie in [0, 1)");
  if (checkpoint_every < 0) throw ValidationError("checkpoint_every must be >= 0");
  if (!(loss_options.label_smoothing >= 0 && loss_options.label_smoothing <= 1))
    throw ValidationError("label_smoothing must lie in [0, 1]");
  if (backbone_weights.empty() != backbone_map.empty())
    throw ValidationError("backbone_weights and backbone_map must be given together");
  loss_weights.validate();
}

ModelConfig TrainConfig::model_config(int label_count) const {
  ModelConfig m;
  if (scale_preset == ScalePreset::paper) {
    m = ModelConfig::paper_preset();
    m.input_size = image_size;
    m.label_count = label_count;
    m.info_dim = info_dim;
  } else {
    m = ModelConfig::test_preset(image_size, label_count, info_dim);
  }
  m.parsing_branch = ablation == Ablation::baseline_parsing || ablation == Ablation::full;
  m.info_branch = ablation == Ablation::baseline_classifier || ablation == Ablation::full;
  m.validate();
  return m;
}

LossWeights TrainConfig::effective_weights() const {
  LossWeights w = loss_weights;
  if (ablation == Ablation::baseline || ablation == Ablation::baseline_classifier) w.lambda_par = 0;
  if (ablation == Ablation::baseline || ablation == Ablation::baseline_parsing) w.lambda_cls = w.lambda_info = 0;
  return w;
}

const std::vector<std::string>& train_config_keys() {
  static const std::vector<std::string> keys = {
      "preset",         "batch_size",     "image_size",  "epochs",         "learning_rate",
      "beta1",          "beta2",          "adam_epsilon", "critic_steps_per_gen_step",
      "seed",           "lambda_cls",     "lambda_par",  "lambda_g",       "lambda_info",
      "gp_coefficient", "penalty_sign",   "cls_direction", "info_direction", "kl_floor",
      "label_smoothing", "ablation",      "info_dim",    "checkpoint_every", "backbone_weights",
      "backbone_map"};
  return keys;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

double parse_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double d = 0;
  try {
    d = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw ValidationError(key + ": '" + v + "' is not a number");
  return d;
}

long long parse_int(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  long long i = 0;
  try {
    i = std::stoll(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw ValidationError(key + ": '" + v + "' is not an integer");
  return i;
}

int parse_small_int(const std::string& key, const std::string& v) {
  long long i = parse_int(key, v);
  if (i < -1000000000LL || i > 1000000000LL) throw ValidationError(key + ": " + v + " is out of range");
  return static_cast<int>(i);
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void TrainConfig::set(const std::string& key, const std::string& raw) {
  const std::string v = trim(raw);
  if (key == "preset") {
    ScalePreset p = scale_preset_from_string(v);
    *this = p == ScalePreset::paper ? paper_preset() : test_preset();
  } else if (key == "batch_size") {
    batch_size = parse_small_int(key, v);
  } else if (key == "image_size") {
    image_size = parse_small_int(key, v);
  } else if (key == "epochs") {
    epochs = parse_small_int(key, v);
  } else if (key == "learning_rate") {
    learning_rate = parse_double(key, v);
  } else if (key == "beta1") {
    beta1 = parse_double(key, v);
  } else if (key == "beta2") {
    beta2 = parse_double(key, v);
  } else if (key == "adam_epsilon") {
    adam_epsilon = parse_double(key, v);
  } else if (key == "critic_steps_per_gen_step") {
    critic_steps_per_gen_step = parse_small_int(key, v);
  } else if (key == "seed") {
    if (v.empty() || v[0] == '-') throw ValidationError("seed must be a non-negative integer");
    std::size_t used = 0;
    try {
      seed = std::stoull(v, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != v.size() || used == 0) throw ValidationError("seed: '" + v + "' is not an integer");
  } else if (key == "lambda_cls") {
    loss_weights.lambda_cls = parse_double(key, v);
  } else if (key == "lambda_par") {
    loss_weights.lambda_par = parse_double(key, v);
  } else if (key == "lambda_g") {
    loss_weights.lambda_g = parse_double(key, v);
  } else if (key == "lambda_info") {
    loss_weights.lambda_info = parse_double(key, v);
  } else if (key == "gp_coefficient") {
    loss_options.gp_coefficient = parse_double(key, v);
  } else if (key == "penalty_sign") {
    loss_options.penalty_sign = penalty_sign_from_string(v);
  } else if (key == "cls_direction") {
    loss_options.cls_direction = kl_direction_from_string(v);
  } else if (key == "info_direction") {
    loss_options.info_direction = kl_direction_from_string(v);
  } else if (key == "kl_floor") {
    loss_options.kl_floor = parse_double(key, v);
  } else if (key == "label_smoothing") {
    loss_options.label_smoothing = parse_double(key, v);
  } else if (key == "ablation") {
    ablation = ablation_from_string(v);
  } else if (key == "info_dim") {
    info_dim = parse_small_int(key, v);
  } else if (key == "checkpoint_every") {
    checkpoint_every = parse_small_int(key, v);
  } else if (key == "backbone_weights") {
    backbone_weights = v;
  } else if (key == "backbone_map") {
    backbone_map = v;
  } else {
    throw ValidationError("unknown config key '" + key + "'");
  }
}

TrainConfig TrainConfig::parse(const std::string& text) {
  TrainConfig c;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  bool any = false;
  std::set<std::string> seen;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ValidationError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    if (!seen.insert(key).second) throw ValidationError("config line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    if (key == "preset" && any) throw ValidationError("config line " + std::to_string(lineno) + ": 'preset' must come first");
    try {
      c.set(key, line.substr(eq + 1));
    } catch (const ValidationError& e) {
      throw ValidationError("config line " + std::to_string(lineno) + ": " + e.what());
    }
    any = true;
  }
  c.validate();
  return c;
}

TrainConfig TrainConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string TrainConfig::to_text() const {
  std::ostringstream os;
  os << "preset = " << to_string(scale_preset) << "\n"
     << "batch_size = " << batch_size << "\n"
     << "image_size = " << image_size << "\n"
     << "epochs = " << epochs << "\n"
     << "learning_rate = " << fmt(learning_rate) << "\n"
     << "beta1 = " << fmt(beta1) << "\n"
     << "beta2 = " << fmt(beta2) << "\n"
     << "adam_epsilon = " << fmt(adam_epsilon) << "\n"
     << "critic_steps_per_gen_step = " << critic_steps_per_gen_step << "\n"
     << "seed = " << seed << "\n"
     << "lambda_cls = " << fmt(loss_weights.lambda_cls) << "\n"
     << "lambda_par = " << fmt(loss_weights.lambda_par) << "\n"
     << "lambda_g = " << fmt(loss_weights.lambda_g) << "\n"
     << "lambda_info = " << fmt(loss_weights.lambda_info) << "\n"
     << "gp_coefficient = " << fmt(loss_options.gp_coefficient) << "\n"
     << "penalty_sign = " << to_string(loss_options.penalty_sign) << "\n"
     << "cls_direction = " << to_string(loss_options.cls_direction) << "\n"
     << "info_direction = " << to_string(loss_options.info_direction) << "\n"
     << "kl_floor = " << fmt(loss_options.kl_floor) << "\n"
     << "label_smoothing = " << fmt(loss_options.label_smoothing) << "\n"
     << "ablation = " << to_string(ablation) << "\n"
     << "info_dim = " << info_dim << "\n"
     << "checkpoint_every = " << checkpoint_every << "\n";
  if (!backbone_weights.empty()) os << "backbone_weights = " << backbone_weights << "\n";
  if (!backbone_map.empty()) os << "backbone_map = " << backbone_map << "\n";
  return os.str();
}

json TrainConfig::to_json() const {
  json j = json::object();
  std::istringstream in(to_text());
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    j[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return j;
}

TrainConfig TrainConfig::from_json(const json& j) {
  std::ostringstream os;
  if (j.contains("preset")) os << "preset = " << j.at("preset").get<std::string>() << "\n";
  for (const auto& [k, v] : j.items())
    if (k != "preset") os << k << " = " << v.get<std::string>() << "\n";
  return parse(os.str());
}

// -------------------------------------------------------------------- Adam

Adam::Adam(const ParameterSet& params, double lr, double beta1, double beta2, double epsilon)
    : params_(params.items()), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(epsilon) {
  for (const auto& p : params_) {
    m_.emplace_back(p.var.shape(), 0.0);
    v_.emplace_back(p.var.shape(), 0.0);
  }
}

void Adam::step(const std::vector<Tensor>& grads) {
  if (grads.size() != params_.size()) throw ShapeError("Adam::step: gradient count does not match parameter count");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i].var.mutable_value();
    require_same_shape(p, grads[i], params_[i].name.c_str());
    double* m = m_[i].data();
    double* v = v_[i].data();
    const double* g = grads[i].data();
    double* w = p.data();
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = beta1_ * m[k] + (1.0 - beta1_) * g[k];
      v[k] = beta2_ * v[k] + (1.0 - beta2_) * g[k] * g[k];
      w[k] -= lr_ * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_);
    }
  }
}

void Adam::save(TensorBundle& bundle, const std::string& prefix) const {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    bundle.put(prefix + "m/" + params_[i].name, m_[i]);
    bundle.put(prefix + "v/" + params_[i].name, v_[i]);
  }
}

void Adam::load(const TensorBundle& bundle, const std::string& prefix, std::int64_t t) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const Tensor& m = bundle.get(prefix + "m/" + params_[i].name);
    const Tensor& v = bundle.get(prefix + "v/" + params_[i].name);
    require_same_shape(m, m_[i], params_[i].name.c_str());
    require_same_shape(v, v_[i], params_[i].name.c_str());
    m_[i] = m;
    v_[i] = v;
  }
  t_ = t;
}

// ------------------------------------------------------------------ batches

Tensor teacher_distribution(const std::vector<int>& labels, int classes, double smoothing) {
  const int n = static_cast<int>(labels.size());
  Tensor t({n, classes}, 0.0);
  for (int i = 0; i < n; ++i) {
    if (labels[i] >= classes) {
      throw ValidationError("label " + std::to_string(labels[i]) + " outside [0, " + std::to_string(classes) + ")");
    }
    for (int k = 0; k < classes; ++k) {
      double& cell = t[static_cast<std::size_t>(i) * classes + k];
      if (labels[i] < 0) {
        cell = 1.0 / classes;
      } else {
        cell = smoothing / classes + (k == labels[i] ? 1.0 - smoothing : 0.0);
      }
    }
  }
  return t;
}

Batch make_batch(const std::vector<BatchItem>& items, const Palette& palette) {
  if (items.empty()) throw ValidationError("make_batch: no items");
  const int n = static_cast<int>(items.size());
  const int h = items[0].image.height, w = items[0].image.width;
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  Batch b;
  b.gray = Tensor({n, 1, h, w});
  b.ab = Tensor({n, 2, h, w});
  b.parsing = Tensor({n, 3, h, w});
  for (int i = 0; i < n; ++i) {
    const BatchItem& it = items[i];
    if (it.image.height != h || it.image.width != w) throw ShapeError("make_batch: images differ in size");
    LabImage lab = rgb_to_lab(it.image);
    double* g = b.gray.data() + i * hw;
    double* ab = b.ab.data() + i * 2 * hw;
    for (std::size_t k = 0; k < hw; ++k) {
      g[k] = normalize_luminance(lab.L[k]);
      ab[k] = lab.a[k] / kChromaScale;
      ab[hw + k] = lab.b[k] / kChromaScale;
    }
    if (it.parsing) {
      Tensor r = palette.render(*it.parsing, h, w);
      std::copy(r.data(), r.data() + r.size(), b.parsing.data() + i * 3 * hw);
    }
    b.parsing_mask.push_back(it.parsing.has_value());
    b.labels.push_back(it.label);
    b.ids.push_back(it.id);
  }
  return b;
}

namespace {

std::string tensor_stats(const char* name, const Tensor& t) {
  double lo = INFINITY, hi = -INFINITY, sum = 0;
  std::size_t bad = 0;
  for (double v : t.values()) {
    if (!std::isfinite(v)) {
      ++bad;
      continue;
    }
    lo = std::min(lo, v);
    hi = std::max(hi, v);
    sum += v;
  }
  const std::size_t ok = t.size() - bad;
  std::ostringstream os;
  os << "  " << name << " " << shape_str(t.shape()) << " min " << lo << " max " << hi << " mean "
     << (ok ? sum / ok : 0.0) << " non-finite " << bad << "\n";
  return os.str();
}

[[noreturn]] void non_finite(const char* what, const std::string& detail, const Batch& b, std::int64_t step) {
  std::ostringstream os;
  os << what << " became non-finite at step " << step << " (" << detail << ")\nbatch of " << b.size() << ":\n"
     << tensor_stats("gray", b.gray) << tensor_stats("ab", b.ab) << tensor_stats("parsing", b.parsing) << "  labels";
  for (int l : b.labels) os << ' ' << l;
  os << "\n  ids";
  for (std::size_t i = 0; i < b.ids.size() && i < 16; ++i) os << ' ' << b.ids[i];
  if (b.ids.size() > 16) os << " ...";
  throw NonFiniteLossError(os.str());
}

void check_grads(const char* what, const std::vector<Tensor>& grads, const ParameterSet& params, const Batch& b,
                 std::int64_t step) {
  for (std::size_t i = 0; i < grads.size(); ++i)
    if (!grads[i].all_finite()) non_finite(what, "gradient of " + params.items()[i].name, b, step);
}

void check_inputs(const char* what, const Batch& b, std::int64_t step) {
  if (!b.gray.all_finite() || !b.ab.all_finite() || !b.parsing.all_finite())
    non_finite(what, "batch holds NaN or infinity", b, step);
}

void check_outputs(const char* what, const GeneratorOutput& out, const Batch& b, std::int64_t step) {
  const std::pair<const char*, const Var*> parts[] = {
      {"ab", &out.ab}, {"label logits", &out.label_logits}, {"info code", &out.info_g}, {"parsing", &out.parsing}};
  for (const auto& [name, v] : parts)
    if (v->defined() && !v->value().all_finite()) non_finite(what, std::string("generator ") + name, b, step);
}

}  // namespace

// -------------------------------------------------------------------- state

TrainState make_train_state(const TrainConfig& cfg, int label_count, const std::optional<WeightSource>& backbone) {
  cfg.validate();
  ModelConfig model = cfg.model_config(label_count);
  Generator gen = build_generator(model, cfg.seed * 2 + 1, backbone);
  Critic critic = build_critic(model, cfg.seed * 2 + 2);
  Adam gopt(gen.parameters(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_epsilon);
  Adam copt(critic.parameters(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_epsilon);
  return TrainState{cfg, model, std::move(gen), std::move(critic), std::move(gopt), std::move(copt), Rng(cfg.seed), 0, 0, 0, 0, {}};
}

json CriticStepReport::to_json() const {
  return {{"critic_loss", loss},        {"wasserstein", wasserstein}, {"penalty", penalty},
          {"real_score", real_score},   {"fake_score", fake_score},   {"l_info_d", l_info_d}};
}

std::vector<Tensor> critic_gradients(TrainState& s, const Batch& batch, CriticStepReport* report) {
  const TrainConfig& cfg = s.config;
  check_inputs("critic loss", batch, s.critic_step);
  Var gray = Var::constant(batch.gray);
  GeneratorOutput out;
  {
    NoGradGuard no_grad;
    out = s.generator.forward(gray);
  }
  check_outputs("critic loss", out, batch, s.critic_step);
  Var fake_ab = out.ab.detach();
  Var real = lab_stack(gray, Var::constant(batch.ab)).detach();
  Var fake = lab_stack(gray, fake_ab).detach();
  std::vector<double> eps(batch.size());
  for (double& e : eps) e = s.rng.uniform();

  const Critic& critic = s.critic;
  CriticLoss cl = critic_loss([&](const Var& x) { return critic.score(x); }, real, fake, eps, cfg.loss_options);
  Var total = cl.total;
  CriticStepReport r;
  if (s.model.info_branch) {
    Var target = ops::softmax_rows(out.info_g.detach()).detach();
    Var info_d = ops::softmax_rows(critic.info(fake_ab));
    Var l = info_loss(target, info_d, cfg.loss_options.info_direction, cfg.loss_options.kl_floor);
    r.l_info_d = l.item();
    total = ops::add(total, l);
  }
  r.loss = total.item();
  r.wasserstein = cl.wasserstein;
  r.penalty = cl.penalty;
  r.real_score = cl.real_score;
  r.fake_score = cl.fake_score;
  if (!std::isfinite(r.loss)) non_finite("critic loss", "loss " + fmt(r.loss), batch, s.critic_step);
  std::vector<Tensor> grads = grad_values(total, s.critic.parameters().vars());
  check_grads("critic loss", grads, s.critic.parameters(), batch, s.critic_step);
  if (report) *report = r;
  return grads;
}

std::vector<Tensor> generator_gradients(TrainState& s, const Batch& batch, LossReport* report) {
  const TrainConfig& cfg = s.config;
  check_inputs("generator loss", batch, s.step);
  Var gray = Var::constant(batch.gray);
  GeneratorOutput out = s.generator.forward(gray);
  check_outputs("generator loss", out, batch, s.step);
  GeneratorTargets targets{gray, batch.ab, batch.parsing, batch.parsing_mask,
                           teacher_distribution(batch.labels, s.model.label_count, cfg.loss_options.label_smoothing)};
  GeneratorLoss loss = total_generator_loss(out, targets, s.critic, cfg.effective_weights(), cfg.loss_options);
  if (!std::isfinite(loss.report.total)) {
    non_finite("generator loss", loss.report.to_json().dump(), batch, s.step);
  }
  std::vector<Tensor> grads = grad_values(loss.total, s.generator.parameters().vars());
  check_grads("generator loss", grads, s.generator.parameters(), batch, s.step);
  if (report) *report = loss.report;
  return grads;
}

CriticStepReport train_step_critic(TrainState& s, const Batch& batch) {
  CriticStepReport r;
  std::vector<Tensor> g = critic_gradients(s, batch, &r);
  s.critic_opt.step(g);
  ++s.critic_step;
  return r;
}

LossReport train_step_generator(TrainState& s, const Batch& batch) {
  LossReport r;
  std::vector<Tensor> g = generator_gradients(s, batch, &r);
  s.generator_opt.step(g);
  ++s.step;
  return r;
}

// -------------------------------------------------------------- checkpoints

void save_checkpoint(const std::filesystem::path& dir, const TrainState& s) {
  TensorBundle b;
  for (const auto& p : s.generator.parameters().items()) b.put("generator/" + p.name, p.var.value());
  for (const auto& p : s.critic.parameters().items()) b.put("critic/" + p.name, p.var.value());
  s.generator_opt.save(b, "adam/generator/");
  s.critic_opt.save(b, "adam/critic/");
  b.meta = {{"kind", "histnet-checkpoint"},
            {"step", s.step},
            {"critic_step", s.critic_step},
            {"epoch", s.epoch},
            {"batch_pos", s.batch_pos},
            {"permutation", s.permutation},
            {"rng", s.rng.state()},
            {"adam_t", {{"generator", s.generator_opt.steps()}, {"critic", s.critic_opt.steps()}}},
            {"config", s.config.to_json()},
            {"model", s.model.to_json()}};
  // Write next to the target and swap in, so a crash never leaves a torn checkpoint.
  std::filesystem::path tmp = dir;
  tmp += ".tmp";
  std::filesystem::remove_all(tmp);
  write_tensor_bundle(tmp, b);
  std::filesystem::remove_all(dir);
  std::filesystem::rename(tmp, dir);
}

namespace {

void restore(ParameterSet& params, const TensorBundle& b, const std::string& prefix) {
  for (const auto& p : params.items()) {
    const std::string name = prefix + p.name;
    if (!b.has(name)) throw ValidationError("checkpoint lacks tensor '" + name + "'");
    const Tensor& t = b.get(name);
    if (t.shape() != p.var.shape()) {
      throw ValidationError("checkpoint tensor '" + name + "' has shape " + shape_str(t.shape()) + ", model expects " +
                            shape_str(p.var.shape()));
    }
    params.at(p.name).mutable_value() = t;
  }
}

TensorBundle read_checkpoint_bundle(const std::filesystem::path& dir) {
  TensorBundle b = read_tensor_bundle(dir);
  if (b.meta.value("kind", "") != "histnet-checkpoint") throw ValidationError(dir.string() + " is not a checkpoint");
  return b;
}

}  // namespace

TrainState load_checkpoint(const std::filesystem::path& dir) {
  TensorBundle b = read_checkpoint_bundle(dir);
  const json& m = b.meta;
  TrainConfig cfg = TrainConfig::from_json(m.at("config"));
  ModelConfig model = ModelConfig::from_json(m.at("model"));
  Generator gen(model, 0);
  Critic critic(model, 0);
  restore(gen.parameters(), b, "generator/");
  restore(critic.parameters(), b, "critic/");
  Adam gopt(gen.parameters(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_epsilon);
  Adam copt(critic.parameters(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_epsilon);
  gopt.load(b, "adam/generator/", m.at("adam_t").at("generator").get<std::int64_t>());
  copt.load(b, "adam/critic/", m.at("adam_t").at("critic").get<std::int64_t>());
  TrainState s{cfg, model, std::move(gen), std::move(critic), std::move(gopt), std::move(copt), Rng(), 0, 0, 0, 0, {}};
  s.rng.set_state(m.at("rng").get<std::string>());
  s.step = m.at("step").get<std::int64_t>();
  s.critic_step = m.at("critic_step").get<std::int64_t>();
  s.epoch = m.at("epoch").get<int>();
  s.batch_pos = m.at("batch_pos").get<std::size_t>();
  s.permutation = m.at("permutation").get<std::vector<std::size_t>>();
  return s;
}

Generator load_generator(const std::filesystem::path& dir) {
  TensorBundle b = read_checkpoint_bundle(dir);
  Generator gen(ModelConfig::from_json(b.meta.at("model")), 0);
  restore(gen.parameters(), b, "generator/");
  return gen;
}

// ------------------------------------------------------------------ loading

SampleSource::SampleSource(const DatasetManifest& manifest, Split split, int image_size, const Palette& palette,
                           bool cache)
    : manifest_(manifest),
      indices_(manifest.indices(split)),
      image_size_(image_size),
      palette_(palette),
      cache_(cache),
      loaded_(indices_.size()),
      tried_(indices_.size(), false) {}

const SampleRecord& SampleSource::record(std::size_t i) const { return manifest_.records.at(indices_.at(i)); }

std::optional<BatchItem> SampleSource::load(std::size_t i) {
  if (cache_ && tried_.at(i)) return loaded_[i];
  const SampleRecord& r = record(i);
  std::optional<BatchItem> item;
  try {
    BatchItem it;
    it.image = resize_center_crop(read_rgb(manifest_.resolve(r.image_path)), image_size_);
    it.label = r.label;
    it.id = r.id;
    if (r.parsing_path) {
      int h = 0, w = 0;
      auto classes = read_parsing_classes(manifest_.resolve(*r.parsing_path), palette_, &h, &w);
      it.parsing = resize_center_crop_nearest(classes, h, w, image_size_);
    }
    item = std::move(it);
  } catch (const std::exception&) {
    item.reset();
  }
  if (cache_) {
    tried_[i] = true;
    loaded_[i] = item;
  }
  return item;
}

// -------------------------------------------------------------------- train

TrainResult train(TrainState& s, const DatasetManifest& manifest, const Palette& palette, const TrainOptions& opts) {
  const TrainConfig& cfg = s.config;
  if (manifest.count(Split::train) == 0) throw ValidationError("manifest has no training samples");
  if (manifest.taxonomy.label_count() != s.model.label_count) {
    throw ValidationError("manifest taxonomy has " + std::to_string(manifest.taxonomy.label_count()) +
                          " labels, model was built for " + std::to_string(s.model.label_count));
  }
  const std::size_t pixels = static_cast<std::size_t>(cfg.image_size) * cfg.image_size;
  const bool cache = manifest.count(Split::train) * pixels * 4 * sizeof(double) < (std::size_t{1} << 31);
  SampleSource source(manifest, Split::train, cfg.image_size, palette, cache);
  const std::size_t n = source.size();
  std::set<std::size_t> unreadable;
  TrainResult result;

  auto write_log = [&](json line) {
    if (opts.log) *opts.log << line.dump() << '\n' << std::flush;
  };

  while (s.epoch < cfg.epochs) {
    if (s.permutation.empty()) s.permutation = s.rng.permutation(n);
    while (s.batch_pos < n) {
      if (opts.max_steps > 0 && result.generator_steps >= opts.max_steps) return result;
      const std::size_t end = std::min(n, s.batch_pos + static_cast<std::size_t>(cfg.batch_size));
      std::vector<BatchItem> items;
      for (std::size_t k = s.batch_pos; k < end; ++k) {
        std::optional<BatchItem> it = source.load(s.permutation[k]);
        if (it) {
          items.push_back(std::move(*it));
          continue;
        }
        if (unreadable.insert(s.permutation[k]).second) {
          result.skipped = unreadable.size();
          const SampleRecord& r = source.record(s.permutation[k]);
          if (opts.warn) opts.warn("skipping unreadable sample '" + r.id + "' (" + r.image_path + ")");
          if (unreadable.size() * 100 > n) {
            throw ValidationError(std::to_string(unreadable.size()) + " of " + std::to_string(n) +
                                  " training samples are unreadable (more than 1%)");
          }
        }
      }
      s.batch_pos = end;
      if (items.empty()) continue;
      Batch batch = make_batch(items, palette);

      for (int c = 0; c < cfg.critic_steps_per_gen_step; ++c) {
        CriticStepReport r = train_step_critic(s, batch);
        json line = {{"kind", "critic"}, {"step", s.critic_step}, {"epoch", s.epoch}, {"batch", batch.size()}};
        line.update(r.to_json());
        write_log(line);
        ++result.critic_steps;
      }
      result.last = train_step_generator(s, batch);
      json line = {{"kind", "generator"}, {"step", s.step}, {"epoch", s.epoch}, {"batch", batch.size()}};
      line.update(result.last.to_json());
      write_log(line);
      ++result.generator_steps;

      if (!opts.checkpoint_dir.empty() && cfg.checkpoint_every > 0 && s.step % cfg.checkpoint_every == 0) {
        std::ostringstream name;
        name << "step_" << std::setw(8) << std::setfill('0') << s.step;
        save_checkpoint(opts.checkpoint_dir / name.str(), s);
      }
    }
    ++s.epoch;
    s.batch_pos = 0;
    s.permutation.clear();
  }
  if (!opts.checkpoint_dir.empty()) save_checkpoint(opts.checkpoint_dir / "final", s);
  return result;
}

}  // namespace histnet
