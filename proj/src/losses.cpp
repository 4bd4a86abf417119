#include "histnet/losses.hpp"

#include <cmath>
#include <string>

#include "histnet/errors.hpp"

namespace histnet {

using nlohmann::json;

void LossWeights::validate() const {
  const std::pair<const char*, double> all[] = {
      {"lambda_cls", lambda_cls}, {"lambda_par", lambda_par}, {"lambda_g", lambda_g}, {"lambda_info", lambda_info}};
  for (const auto& [name, v] : all)
    if (!(v >= 0.0) || !std::isfinite(v)) throw ValidationError(std::string(name) + " must be a finite value >= 0");
}

json LossWeights::to_json() const {
  return {{"lambda_cls", lambda_cls}, {"lambda_par", lambda_par}, {"lambda_g", lambda_g}, {"lambda_info", lambda_info}};
}

std::string to_string(PenaltySign s) { return s == PenaltySign::standard ? "standard" : "as_printed"; }

PenaltySign penalty_sign_from_string(const std::string& s) {
  if (s == "standard") return PenaltySign::standard;
  if (s == "as_printed") return PenaltySign::as_printed;
  throw ValidationError("unknown penalty sign '" + s + "' (standard | as_printed)");
}

std::string to_string(KlDirection d) { return d == KlDirection::target_first ? "target_first" : "prediction_first"; }

KlDirection kl_direction_from_string(const std::string& s) {
  if (s == "target_first") return KlDirection::target_first;
  if (s == "prediction_first") return KlDirection::prediction_first;
  throw ValidationError("unknown KL direction '" + s + "' (target_first | prediction_first)");
}

json LossReport::to_json() const {
  return {{"l_r", l_r},       {"l_par", l_par},   {"l_cls", l_cls},   {"l_info", l_info},
          {"l_g_generator_term", l_g_generator_term},
          {"w_par", w_par},   {"w_cls", w_cls},   {"w_info", w_info}, {"w_g", w_g},
          {"total", total}};
}

namespace {

void require_batch(const Shape& s, const char* what) {
  if (s.size() < 2 || s[0] < 1) throw ShapeError(std::string(what) + ": expected a batch [N, ...], got " + shape_str(s));
}

void require_distribution_rows(const Tensor& t, const char* what) {
  if (t.rank() != 2) throw ShapeError(std::string(what) + ": expected [N, K], got " + shape_str(t.shape()));
  const int n = t.dim(0), k = t.dim(1);
  for (int r = 0; r < n; ++r) {
    double sum = 0.0;
    for (int c = 0; c < k; ++c) {
      const double v = t[static_cast<std::size_t>(r) * k + c];
      if (!(v >= 0.0)) throw ValidationError(std::string(what) + ": row " + std::to_string(r) + " has a negative entry");
      sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-6) {
      throw ValidationError(std::string(what) + ": row " + std::to_string(r) + " sums to " + std::to_string(sum) +
                            ", not 1");
    }
  }
}

Var squared_error_per_sample(const Var& pred, const Tensor& target, const char* what) {
  require_batch(pred.shape(), what);
  if (pred.shape() != target.shape()) {
    throw ShapeError(std::string(what) + ": prediction " + shape_str(pred.shape()) + " vs target " +
                     shape_str(target.shape()));
  }
  return ops::sum_per_sample(ops::square(ops::sub(pred, Var::constant(target))));
}

}  // namespace

Var reconstruction_loss(const Var& pred, const Tensor& target) {
  return ops::mean(squared_error_per_sample(pred, target, "reconstruction_loss"));
}

Var parsing_loss(const Var& pred, const Tensor& target, const std::vector<bool>& mask) {
  Var per_sample = squared_error_per_sample(pred, target, "parsing_loss");
  if (mask.empty()) return ops::mean(per_sample);
  const int n = pred.shape()[0];
  if (static_cast<int>(mask.size()) != n) {
    throw ShapeError("parsing_loss: mask has " + std::to_string(mask.size()) + " entries for a batch of " +
                     std::to_string(n));
  }
  Tensor m({n}, 0.0);
  int valid = 0;
  for (int i = 0; i < n; ++i)
    if (mask[i]) m[i] = 1.0, ++valid;
  if (valid == 0) return Var::constant(Tensor::scalar(0.0));
  return ops::scale(ops::sum(ops::mul_const(per_sample, m)), 1.0 / valid);
}

Var kl_divergence(const Var& p, const Var& q, double floor) {
  require_distribution_rows(p.value(), "kl_divergence(p)");
  require_distribution_rows(q.value(), "kl_divergence(q)");
  if (p.shape() != q.shape()) {
    throw ShapeError("kl_divergence: " + shape_str(p.shape()) + " vs " + shape_str(q.shape()));
  }
  Var log_ratio = ops::sub(ops::log_floor(p, floor), ops::log_floor(q, floor));
  return ops::mean(ops::sum_per_sample(ops::mul(p, log_ratio)));
}

Var classification_loss(const Var& pred, const Var& y_v, KlDirection dir, double floor) {
  return dir == KlDirection::target_first ? kl_divergence(y_v, pred, floor) : kl_divergence(pred, y_v, floor);
}

Var info_loss(const Var& info_g, const Var& info_d, KlDirection dir, double floor) {
  return dir == KlDirection::target_first ? kl_divergence(info_d, info_g, floor) : kl_divergence(info_g, info_d, floor);
}

Tensor smoothed_one_hot(const std::vector<int>& labels, int classes, double smoothing) {
  if (classes < 1) throw ValidationError("smoothed_one_hot: classes must be >= 1");
  if (smoothing < 0.0 || smoothing > 1.0) throw ValidationError("smoothed_one_hot: smoothing must lie in [0, 1]");
  const int n = static_cast<int>(labels.size());
  Tensor t({n, classes}, smoothing / classes);
  for (int i = 0; i < n; ++i) {
    if (labels[i] < 0 || labels[i] >= classes) {
      throw ValidationError("smoothed_one_hot: label " + std::to_string(labels[i]) + " outside [0, " +
                            std::to_string(classes) + ")");
    }
    t[static_cast<std::size_t>(i) * classes + labels[i]] += 1.0 - smoothing;
  }
  return t;
}

Var sample_interpolates(const Var& real, const Var& fake, const std::vector<double>& eps) {
  require_batch(real.shape(), "sample_interpolates");
  if (real.shape() != fake.shape()) {
    throw ShapeError("sample_interpolates: real " + shape_str(real.shape()) + " vs fake " + shape_str(fake.shape()));
  }
  const int n = real.shape()[0];
  if (static_cast<int>(eps.size()) != n) throw ShapeError("sample_interpolates: one eps per sample required");
  Tensor e({n}, 0.0), one_minus({n}, 0.0);
  for (int i = 0; i < n; ++i) e[i] = eps[i], one_minus[i] = 1.0 - eps[i];
  return ops::add(ops::scale_per_sample(real, Var::constant(e)), ops::scale_per_sample(fake, Var::constant(one_minus)));
}

Var sample_interpolates(const Var& real, const Var& fake, Rng& rng) {
  require_batch(real.shape(), "sample_interpolates");
  std::vector<double> eps(real.shape()[0]);
  for (double& e : eps) e = rng.uniform();
  return sample_interpolates(real, fake, eps);
}

Var gradient_penalty(const CriticFn& critic, const Var& real, const Var& fake, const std::vector<double>& eps) {
  const bool outer = grad_enabled();
  Tensor x = sample_interpolates(real.detach(), fake.detach(), eps).value();
  GradModeGuard record(true);
  Var xhat = Var::param(std::move(x));
  Var scores = critic(xhat);
  if (scores.shape().size() != 1 || scores.shape()[0] != xhat.shape()[0]) {
    throw ShapeError("gradient_penalty: critic must return one value per sample, got " + shape_str(scores.shape()));
  }
  // Samples are independent, so d(sum)/dx holds each sample's own gradient.
  std::vector<Var> wrt{xhat};
  Var g = grad(ops::sum(scores), wrt, outer)[0];
  GradModeGuard tail(outer);
  Var norm = ops::sqrt(ops::sum_per_sample(ops::square(g)));
  return ops::mean(ops::square(ops::add_scalar(norm, -1.0)));
}

CriticLoss critic_loss(const CriticFn& critic, const Var& real, const Var& fake, const std::vector<double>& eps,
                       const LossOptions& opts) {
  if (real.shape() != fake.shape()) {
    throw ShapeError("critic_loss: real " + shape_str(real.shape()) + " vs fake " + shape_str(fake.shape()));
  }
  CriticLoss out;
  Var real_mean = ops::mean(critic(real));
  Var fake_mean = ops::mean(critic(fake));
  Var w = ops::sub(fake_mean, real_mean);
  Var gp = gradient_penalty(critic, real, fake, eps);
  const double sign = opts.penalty_sign == PenaltySign::standard ? 1.0 : -1.0;
  out.total = ops::add(w, ops::scale(gp, sign * opts.gp_coefficient));
  out.wasserstein = w.item();
  out.penalty = gp.item();
  out.real_score = real_mean.item();
  out.fake_score = fake_mean.item();
  return out;
}

GeneratorLoss combine_losses(const LossTerms& t, const LossWeights& w) {
  auto val = [](const Var& v) { return v.defined() ? v.item() : 0.0; };
  GeneratorLoss out;
  LossReport& r = out.report;
  r.l_r = val(t.l_r);
  r.l_cls = val(t.l_cls);
  r.l_par = val(t.l_par);
  r.l_g_generator_term = val(t.adv);
  r.l_info = val(t.l_info);
  r.w_cls = r.l_cls * w.lambda_cls;
  r.w_par = r.l_par * w.lambda_par;
  r.w_g = r.l_g_generator_term * w.lambda_g;
  r.w_info = r.l_info * w.lambda_info;
  r.total = r.l_r;
  r.total += r.w_cls;
  r.total += r.w_par;
  r.total += r.w_g;
  r.total += r.w_info;

  Var total = t.l_r.defined() ? t.l_r : Var::constant(Tensor::scalar(0.0));
  const std::pair<const Var*, double> rest[] = {
      {&t.l_cls, w.lambda_cls}, {&t.l_par, w.lambda_par}, {&t.adv, w.lambda_g}, {&t.l_info, w.lambda_info}};
  for (const auto& [v, lambda] : rest) {
    if (v->defined()) total = ops::add(total, ops::scale(*v, lambda));
  }
  out.total = total;
  return out;
}

GeneratorLoss total_generator_loss(const GeneratorOutput& out, const GeneratorTargets& targets, const Critic& critic,
                                   const LossWeights& w, const LossOptions& opts) {
  w.validate();
  const ModelConfig& cfg = critic.config();
  LossTerms t;
  t.l_r = reconstruction_loss(out.ab, targets.ab);
  if (cfg.parsing_branch) t.l_par = parsing_loss(out.parsing, targets.parsing, targets.parsing_mask);
  t.l_cls = classification_loss(ops::softmax_rows(out.label_logits), Var::constant(targets.y_v), opts.cls_direction,
                                opts.kl_floor);
  t.adv = ops::scale(ops::mean(critic.score(lab_stack(targets.gray, out.ab))), -1.0);
  if (cfg.info_branch) {
    Var info_d = ops::softmax_rows(critic.info(out.ab));
    t.l_info = info_loss(ops::softmax_rows(out.info_g), info_d, opts.info_direction, opts.kl_floor);
  }
  return combine_losses(t, w);
}

}  // namespace histnet
