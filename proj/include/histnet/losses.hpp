#pragma once

// Loss terms of the generator objective and the critic objective.
//
// All image-space losses work in normalized units: chroma is ab / 110 and the
// parsing rendering is the palette RGB mapped to [-1, 1].

#include <functional>
#include <optional>
#include <vector>

#include "json.hpp"

#include "histnet/autograd.hpp"
#include "histnet/model.hpp"
#include "histnet/random.hpp"

namespace histnet {

struct LossWeights {
  double lambda_cls = 0.003;
  double lambda_par = 0.003;
  double lambda_g = 0.1;
  double lambda_info = 0.003;

  void validate() const;
  nlohmann::json to_json() const;
};

/// Orientation of the penalty in the critic's minimized objective.
///   standard:   E[D(fake)] - E[D(real)] + c * GP
///   as_printed: E[D(fake)] - E[D(real)] - c * GP
enum class PenaltySign { standard, as_printed };

/// Which distribution sits on the left of KL(p || q).
///   target_first: KL(target || prediction)
///   prediction_first: KL(prediction || target)
enum class KlDirection { target_first, prediction_first };

struct LossOptions {
  double gp_coefficient = 1.0;
  PenaltySign penalty_sign = PenaltySign::standard;
  KlDirection cls_direction = KlDirection::target_first;
  KlDirection info_direction = KlDirection::target_first;
  double kl_floor = 1e-8;
  double label_smoothing = 0.05;
};

std::string to_string(PenaltySign s);
PenaltySign penalty_sign_from_string(const std::string& s);
std::string to_string(KlDirection d);
KlDirection kl_direction_from_string(const std::string& s);

struct LossReport {
  double l_r = 0, l_par = 0, l_cls = 0, l_info = 0;
  /// Generator adversarial term, -mean D(L, ab_pred), before lambda_g.
  double l_g_generator_term = 0;
  double w_par = 0, w_cls = 0, w_info = 0, w_g = 0;
  double total = 0;

  nlohmann::json to_json() const;
};

/// Batch mean of the per-image sum of squared differences. [N, ...] inputs.
Var reconstruction_loss(const Var& pred, const Tensor& target);

/// Same form as reconstruction_loss on parsing renderings. With a mask, only
/// samples whose entry is true count, and the mean runs over those samples.
Var parsing_loss(const Var& pred, const Tensor& target, const std::vector<bool>& mask = {});

/// Row-wise KL(p || q) of [N, K] distributions, batch mean. Logs are floored
/// at `floor`. Throws ValidationError when a row of either input is not a
/// distribution (negative entry or |sum - 1| > 1e-6).
Var kl_divergence(const Var& p, const Var& q, double floor = 1e-8);

/// KL between teacher y_v and predicted class distribution.
Var classification_loss(const Var& pred, const Var& y_v, KlDirection dir = KlDirection::target_first,
                        double floor = 1e-8);
/// KL between the critic-side info distribution and the generator's info code.
Var info_loss(const Var& info_g, const Var& info_d, KlDirection dir = KlDirection::target_first,
              double floor = 1e-8);

/// (1 - s) * one_hot(label) + s / K, one row per label.
Tensor smoothed_one_hot(const std::vector<int>& labels, int classes, double smoothing);

/// x = eps[n] * real + (1 - eps[n]) * fake, per sample.
Var sample_interpolates(const Var& real, const Var& fake, const std::vector<double>& eps);
Var sample_interpolates(const Var& real, const Var& fake, Rng& rng);

/// Per-sample critic value: [N, ...] -> [N].
using CriticFn = std::function<Var(const Var&)>;

/// Mean over the batch of (||grad_x D(x)||_2 - 1)^2 at the interpolates.
/// Differentiable with respect to the critic parameters whenever the
/// calling context records gradients.
Var gradient_penalty(const CriticFn& critic, const Var& real, const Var& fake, const std::vector<double>& eps);

struct CriticLoss {
  Var total;
  double wasserstein = 0;  // E[D(fake)] - E[D(real)]
  double penalty = 0;      // unweighted
  double real_score = 0;
  double fake_score = 0;
};

/// Objective the critic descends. `fake` should already be detached.
CriticLoss critic_loss(const CriticFn& critic, const Var& real, const Var& fake, const std::vector<double>& eps,
                       const LossOptions& opts = {});

struct LossTerms {
  Var l_r, l_par, l_cls, l_info, adv;
};

struct GeneratorLoss {
  Var total;
  LossReport report;
};

/// l_r + lambda_cls l_cls + lambda_par l_par + lambda_g adv + lambda_info l_info.
/// Undefined terms count as 0.
GeneratorLoss combine_losses(const LossTerms& terms, const LossWeights& w);

struct GeneratorTargets {
  Var gray;                          // [N, 1, H, W] normalized L
  Tensor ab;                         // [N, 2, H, W] normalized chroma
  Tensor parsing;                    // [N, 3, H, W] palette rendering in [-1, 1]
  std::vector<bool> parsing_mask;    // empty: every sample has a target
  Tensor y_v;                        // [N, label_count] teacher distribution
};

/// Every generator-side term. Terms of disabled branches are reported as 0.
GeneratorLoss total_generator_loss(const GeneratorOutput& out, const GeneratorTargets& targets, const Critic& critic,
                                   const LossWeights& w, const LossOptions& opts = {});

}  // namespace histnet
