#pragma once

// Generator (G0 shared features, G1 chroma decoder, G2 classification with
// label and info heads, G3 parsing branch) and critic (D1 patch critic,
// D2 info classifier). Widths come from ModelConfig so the test-scale and
// full-scale networks share one code path.
//
// Layer plan (s = input size, c* = configured widths):
//   G0  stage k = conv3x3 x n_k, leaky ReLU; 2x2 max pool between stages
//       -> skips f1 [s], f2 [s/2], f3 [s/4]
//   G2  max pool, conv3x3 x2 (c_cls), conv3x3 x2 (c_cls) at s/8,
//       global average pool; label head FC-FC -> label_count,
//       info head FC-FC -> info_dim
//   G3  up(f3) ++ f2 -> conv -> p2 [s/2]; up(p2) ++ f1 -> conv -> p1 [s];
//       conv3x3 -> 3, tanh (color-coded parsing rendering)
//   G1  f3 ++ broadcast(info) -> conv -> d3 [s/4];
//       up(d3) ++ p2 -> conv -> d2; up(d2) ++ p1 -> conv -> d1;
//       conv3x3 -> 2, tanh (normalized a, b)
//   D1  conv(k4 s2 p1 | k3 s1 p1) per stride in critic_strides, leaky ReLU,
//       last layer has one output channel and no activation
//   D2  conv k4 s2 p1 (no bias) x2 on (a, b), global average pool, FC -> info_dim
//
// A disabled branch is not evaluated; its slots in G1 are filled with zeros.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "histnet/autograd.hpp"
#include "histnet/nn.hpp"
#include "histnet/tensor_store.hpp"

namespace histnet {

enum class ScalePreset { test, paper };

std::string to_string(ScalePreset p);
ScalePreset scale_preset_from_string(const std::string& s);

struct ModelConfig {
  int input_size = 32;
  std::vector<int> backbone_channels{8, 16, 32};
  std::vector<int> backbone_convs{2, 2, 2};
  int classifier_channels = 32;
  int classifier_hidden = 32;
  std::vector<int> decoder_channels{32, 16, 8};
  std::vector<int> parsing_channels{16, 8};
  std::vector<int> critic_channels{16, 32, 32};
  std::vector<int> critic_strides{2, 2, 1, 1};
  std::vector<int> info_critic_channels{8, 16};
  int label_count = 42;
  int info_dim = 256;
  int parsing_classes = 10;
  double leaky_slope = 0.2;
  bool parsing_branch = true;
  bool info_branch = true;
  ScalePreset preset = ScalePreset::test;

  static ModelConfig test_preset(int input_size = 32, int label_count = 42, int info_dim = 256);
  static ModelConfig paper_preset();

  /// Critic output grid (h, w) under the stride plan.
  std::pair<int, int> patch_grid() const;
  /// Throws ValidationError describing the first violated constraint.
  void validate() const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

struct GeneratorOutput {
  Var ab;            // [N, 2, H, W] normalized chroma in [-1, 1]
  Var label_logits;  // [N, label_count]
  Var info_g;        // [N, info_dim]
  Var parsing;       // [N, 3, H, W] in [-1, 1]
};

struct CriticOutput {
  Var patch_scores;  // [N, 1, h, w]
  Var info_d;        // [N, info_dim]
};

enum class Branch { g0, g1, g2, g2_info, g3, d1, d2 };
std::string branch_prefix(Branch b);

/// Pretrained weights plus the mapping from our parameter names to theirs.
struct WeightSource {
  TensorBundle tensors;
  /// (our parameter name, source tensor name)
  std::vector<std::pair<std::string, std::string>> mapping;

  /// Mapping file: one "our_name source_name" pair per line, '#' comments.
  static WeightSource load(const std::filesystem::path& tensor_dir, const std::filesystem::path& mapping_file);
};

class Generator {
 public:
  Generator(const ModelConfig& cfg, std::uint64_t seed);
  // Layers alias the parameter leaves, so copies would share weights.
  Generator(const Generator&) = delete;
  Generator& operator=(const Generator&) = delete;
  Generator(Generator&&) = default;
  Generator& operator=(Generator&&) = default;

  /// gray: [N, 1, H, W] normalized luminance (L / 50 - 1).
  GeneratorOutput forward(const Var& gray) const;

  const ModelConfig& config() const { return cfg_; }
  ParameterSet& parameters() { return params_; }
  const ParameterSet& parameters() const { return params_; }
  std::vector<Var> branch_parameters(Branch b) const;

  /// Copies mapped tensors into G0. A 3-channel first-layer kernel is summed
  /// over its input channels (gray input). Throws naming the offending layer
  /// on any shape mismatch.
  void load_backbone(const WeightSource& source);

 private:
  ModelConfig cfg_;
  ParameterSet params_;
  std::vector<std::vector<Conv2d>> g0_;
  std::vector<Conv2d> g2_convs_;
  Linear label_fc1_, label_fc2_, info_fc1_, info_fc2_;
  Conv2d g3_up2_, g3_up1_, g3_head_;
  Conv2d g1_fuse_, g1_up2_, g1_up1_, g1_head_;
};

class Critic {
 public:
  Critic(const ModelConfig& cfg, std::uint64_t seed);
  Critic(const Critic&) = delete;
  Critic& operator=(const Critic&) = delete;
  Critic(Critic&&) = default;
  Critic& operator=(Critic&&) = default;

  /// lab: [N, 3, H, W] normalized (L, a, b).
  Var patch_scores(const Var& lab) const;
  /// Per-sample critic value: mean of the patch grid, [N].
  Var score(const Var& lab) const;
  /// ab: [N, 2, H, W] -> raw info logits [N, info_dim].
  Var info(const Var& ab) const;
  CriticOutput forward(const Var& lab) const;

  const ModelConfig& config() const { return cfg_; }
  ParameterSet& parameters() { return params_; }
  const ParameterSet& parameters() const { return params_; }
  std::vector<Var> branch_parameters(Branch b) const;

 private:
  ModelConfig cfg_;
  ParameterSet params_;
  std::vector<Conv2d> d1_;
  std::vector<Conv2d> d2_;
  Linear d2_fc_;
};

Generator build_generator(const ModelConfig& cfg, std::uint64_t seed,
                          const std::optional<WeightSource>& backbone_init = std::nullopt);
Critic build_critic(const ModelConfig& cfg, std::uint64_t seed);

/// Normalized (L, a, b) stack for the critic: concat of [N,1,H,W] and [N,2,H,W].
Var lab_stack(const Var& gray, const Var& ab);

}  // namespace histnet
