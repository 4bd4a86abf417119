#include "histnet/model.hpp"

#include <fstream>
#include <sstream>

#include "histnet/errors.hpp"

namespace histnet {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(ScalePreset p) { return p == ScalePreset::paper ? "paper" : "test"; }

ScalePreset scale_preset_from_string(const std::string& s) {
  if (s == "test") return ScalePreset::test;
  if (s == "paper") return ScalePreset::paper;
  throw ValidationError("unknown scale preset '" + s + "' (expected test or paper)");
}

ModelConfig ModelConfig::test_preset(int input_size, int label_count, int info_dim) {
  ModelConfig cfg;
  cfg.input_size = input_size;
  cfg.label_count = label_count;
  cfg.info_dim = info_dim;
  return cfg;
}

ModelConfig ModelConfig::paper_preset() {
  ModelConfig cfg;
  cfg.input_size = 224;
  cfg.backbone_channels = {64, 128, 256};
  cfg.backbone_convs = {2, 2, 3};
  cfg.classifier_channels = 512;
  cfg.classifier_hidden = 512;
  cfg.decoder_channels = {256, 128, 64};
  cfg.parsing_channels = {128, 64};
  cfg.critic_channels = {64, 128, 256};
  cfg.critic_strides = {2, 2, 2, 1};
  cfg.info_critic_channels = {64, 128};
  cfg.label_count = 42;
  cfg.info_dim = 256;
  cfg.preset = ScalePreset::paper;
  return cfg;
}

std::pair<int, int> ModelConfig::patch_grid() const {
  int stride = 1;
  for (int s : critic_strides) stride *= s;
  return {input_size / stride, input_size / stride};
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ValidationError("model config: " + msg); };
  auto positive = [&](const std::vector<int>& v, std::size_t n, const char* what) {
    if (v.size() != n) fail(std::string(what) + " needs " + std::to_string(n) + " entries");
    for (int x : v)
      if (x < 1) fail(std::string(what) + " entries must be positive");
  };
  if (input_size < 8 || input_size % 8 != 0) fail("input_size must be a positive multiple of 8");
  positive(backbone_channels, 3, "backbone_channels");
  positive(backbone_convs, 3, "backbone_convs");
  positive(decoder_channels, 3, "decoder_channels");
  positive(parsing_channels, 2, "parsing_channels");
  positive(critic_channels, 3, "critic_channels");
  positive(info_critic_channels, 2, "info_critic_channels");
  if (critic_strides.size() != 4) fail("critic_strides needs 4 entries");
  int stride = 1;
  for (int s : critic_strides) {
    if (s != 1 && s != 2) fail("critic_strides entries must be 1 or 2");
    stride *= s;
  }
  if (input_size % stride != 0) {
    fail("patch grid: input_size " + std::to_string(input_size) + " not divisible by total critic stride " +
         std::to_string(stride));
  }
  if (input_size % 4 != 0) fail("info critic needs input_size divisible by 4");
  if (classifier_channels < 1 || classifier_hidden < 1) fail("classifier widths must be positive");
  if (label_count < 2) fail("label_count must be >= 2");
  if (info_dim < 2) fail("info_dim must be >= 2");
  if (parsing_classes < 1) fail("parsing_classes must be positive");
  if (!(leaky_slope >= 0.0 && leaky_slope < 1.0)) fail("leaky_slope must be in [0, 1)");
}

json ModelConfig::to_json() const {
  return json{{"input_size", input_size},
              {"backbone_channels", backbone_channels},
              {"backbone_convs", backbone_convs},
              {"classifier_channels", classifier_channels},
              {"classifier_hidden", classifier_hidden},
              {"decoder_channels", decoder_channels},
              {"parsing_channels", parsing_channels},
              {"critic_channels", critic_channels},
              {"critic_strides", critic_strides},
              {"info_critic_channels", info_critic_channels},
              {"label_count", label_count},
              {"info_dim", info_dim},
              {"parsing_classes", parsing_classes},
              {"leaky_slope", leaky_slope},
              {"parsing_branch", parsing_branch},
              {"info_branch", info_branch},
              {"preset", to_string(preset)}};
}

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  c.input_size = j.at("input_size");
  c.backbone_channels = j.at("backbone_channels").get<std::vector<int>>();
  c.backbone_convs = j.at("backbone_convs").get<std::vector<int>>();
  c.classifier_channels = j.at("classifier_channels");
  c.classifier_hidden = j.at("classifier_hidden");
  c.decoder_channels = j.at("decoder_channels").get<std::vector<int>>();
  c.parsing_channels = j.at("parsing_channels").get<std::vector<int>>();
  c.critic_channels = j.at("critic_channels").get<std::vector<int>>();
  c.critic_strides = j.at("critic_strides").get<std::vector<int>>();
  c.info_critic_channels = j.at("info_critic_channels").get<std::vector<int>>();
  c.label_count = j.at("label_count");
  c.info_dim = j.at("info_dim");
  c.parsing_classes = j.at("parsing_classes");
  c.leaky_slope = j.at("leaky_slope");
  c.parsing_branch = j.at("parsing_branch");
  c.info_branch = j.at("info_branch");
  c.preset = scale_preset_from_string(j.at("preset"));
  c.validate();
  return c;
}

std::string branch_prefix(Branch b) {
  switch (b) {
    case Branch::g0: return "g0.";
    case Branch::g1: return "g1.";
    case Branch::g2: return "g2.";
    case Branch::g2_info: return "g2_info.";
    case Branch::g3: return "g3.";
    case Branch::d1: return "d1.";
    case Branch::d2: return "d2.";
  }
  return "";
}

WeightSource WeightSource::load(const fs::path& tensor_dir, const fs::path& mapping_file) {
  WeightSource src;
  src.tensors = read_tensor_bundle(tensor_dir);
  std::ifstream in(mapping_file);
  if (!in) throw ValidationError("cannot read backbone mapping file " + mapping_file.string());
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::string ours, theirs, extra;
    if (!(ls >> ours)) continue;
    if (!(ls >> theirs) || (ls >> extra)) {
      throw ValidationError(mapping_file.string() + ":" + std::to_string(lineno) + ": expected '<ours> <source>'");
    }
    src.mapping.emplace_back(ours, theirs);
  }
  return src;
}

Generator::Generator(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  const double a = cfg_.leaky_slope;
  const auto& bc = cfg_.backbone_channels;
  int in = 1;
  for (int s = 0; s < 3; ++s) {
    std::vector<Conv2d> stage;
    for (int k = 0; k < cfg_.backbone_convs[s]; ++k) {
      stage.emplace_back(params_, "g0.s" + std::to_string(s + 1) + ".c" + std::to_string(k + 1), in, bc[s], 3, 1, 1,
                         true, a, rng);
      in = bc[s];
    }
    g0_.push_back(std::move(stage));
  }

  const int cc = cfg_.classifier_channels;
  int cin = bc[2];
  for (int k = 0; k < 4; ++k) {
    g2_convs_.emplace_back(params_, "g2.c" + std::to_string(k + 1), cin, cc, 3, 1, 1, true, a, rng);
    cin = cc;
  }
  const int hidden = cfg_.classifier_hidden;
  label_fc1_ = Linear(params_, "g2.label.fc1", cc, hidden, a, rng);
  label_fc2_ = Linear(params_, "g2.label.fc2", hidden, cfg_.label_count, 1.0, rng);
  info_fc1_ = Linear(params_, "g2_info.fc1", cc, hidden, a, rng);
  info_fc2_ = Linear(params_, "g2_info.fc2", hidden, cfg_.info_dim, 1.0, rng);

  const auto& pc = cfg_.parsing_channels;
  g3_up2_ = Conv2d(params_, "g3.up2", bc[2] + bc[1], pc[0], 3, 1, 1, true, a, rng);
  g3_up1_ = Conv2d(params_, "g3.up1", pc[0] + bc[0], pc[1], 3, 1, 1, true, a, rng);
  g3_head_ = Conv2d(params_, "g3.head", pc[1], 3, 3, 1, 1, true, 1.0, rng);

  const auto& dc = cfg_.decoder_channels;
  g1_fuse_ = Conv2d(params_, "g1.fuse", bc[2] + cfg_.info_dim, dc[0], 3, 1, 1, true, a, rng);
  g1_up2_ = Conv2d(params_, "g1.up2", dc[0] + pc[0], dc[1], 3, 1, 1, true, a, rng);
  g1_up1_ = Conv2d(params_, "g1.up1", dc[1] + pc[1], dc[2], 3, 1, 1, true, a, rng);
  g1_head_ = Conv2d(params_, "g1.head", dc[2], 2, 3, 1, 1, true, 1.0, rng);
}

GeneratorOutput Generator::forward(const Var& gray) const {
  const int s = cfg_.input_size;
  const Shape& in = gray.shape();
  if (in.size() != 4 || in[1] != 1 || in[2] != s || in[3] != s) {
    throw ValidationError("generator input must be [N,1," + std::to_string(s) + "," + std::to_string(s) + "], got " +
                          shape_str(in));
  }
  const int n = in[0];
  const double a = cfg_.leaky_slope;
  auto act = [a](const Var& x) { return ops::leaky_relu(x, a); };

  // G0
  std::vector<Var> skips;
  Var h = gray;
  for (std::size_t st = 0; st < g0_.size(); ++st) {
    if (st > 0) h = ops::max_pool2(h);
    for (const Conv2d& conv : g0_[st]) h = act(conv(h));
    skips.push_back(h);
  }
  const Var& f1 = skips[0];
  const Var& f2 = skips[1];
  const Var& f3 = skips[2];

  GeneratorOutput out;

  // G2
  Var c = ops::max_pool2(f3);
  for (const Conv2d& conv : g2_convs_) c = act(conv(c));
  const Var pooled = global_average_pool(c);
  out.label_logits = label_fc2_(act(label_fc1_(pooled)));
  if (cfg_.info_branch) {
    out.info_g = info_fc2_(act(info_fc1_(pooled)));
  } else {
    out.info_g = Var::constant(Tensor({n, cfg_.info_dim}, 0.0));
  }

  // G3
  const auto& pc = cfg_.parsing_channels;
  Var p2, p1;
  if (cfg_.parsing_branch) {
    std::vector<Var> cat2{ops::upsample2(f3), f2};
    p2 = act(g3_up2_(ops::concat_channels(cat2)));
    std::vector<Var> cat1{ops::upsample2(p2), f1};
    p1 = act(g3_up1_(ops::concat_channels(cat1)));
    out.parsing = ops::tanh(g3_head_(p1));
  } else {
    p2 = Var::constant(Tensor({n, pc[0], s / 2, s / 2}, 0.0));
    p1 = Var::constant(Tensor({n, pc[1], s, s}, 0.0));
    out.parsing = Var::constant(Tensor({n, 3, s, s}, 0.0));
  }

  // G1
  std::vector<Var> fuse{f3, spatial_broadcast(out.info_g, s / 4, s / 4)};
  Var d = act(g1_fuse_(ops::concat_channels(fuse)));
  std::vector<Var> up2{ops::upsample2(d), p2};
  d = act(g1_up2_(ops::concat_channels(up2)));
  std::vector<Var> up1{ops::upsample2(d), p1};
  d = act(g1_up1_(ops::concat_channels(up1)));
  out.ab = ops::tanh(g1_head_(d));
  return out;
}

std::vector<Var> Generator::branch_parameters(Branch b) const { return params_.vars_with_prefix(branch_prefix(b)); }

void Generator::load_backbone(const WeightSource& source) {
  for (const auto& [ours, theirs] : source.mapping) {
    if (ours.rfind("g0.", 0) != 0) {
      throw ValidationError("backbone mapping targets '" + ours + "', which is not a G0 layer");
    }
    const Var* target = params_.find(ours);
    if (!target) throw ValidationError("backbone mapping names unknown layer '" + ours + "'");
    if (!source.tensors.has(theirs)) {
      throw ValidationError("backbone weights lack tensor '" + theirs + "' for layer '" + ours + "'");
    }
    Tensor value = source.tensors.get(theirs);
    const Shape& want = target->shape();
    if (value.shape() != want && want.size() == 4 && want[1] == 1 && value.rank() == 4 && value.dim(1) == 3 &&
        value.dim(0) == want[0] && value.dim(2) == want[2] && value.dim(3) == want[3]) {
      Tensor gray(want, 0.0);
      for (int o = 0; o < want[0]; ++o)
        for (int ch = 0; ch < 3; ++ch)
          for (int i = 0; i < want[2]; ++i)
            for (int j = 0; j < want[3]; ++j) gray.at(o, 0, i, j) += value.at(o, ch, i, j);
      value = std::move(gray);
    }
    if (value.shape() != want) {
      throw ValidationError("backbone layer '" + ours + "': source tensor '" + theirs + "' has shape " +
                            shape_str(value.shape()) + ", expected " + shape_str(want));
    }
    Var slot = *target;
    slot.mutable_value() = std::move(value);
  }
}

Critic::Critic(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  const double a = cfg_.leaky_slope;
  int in = 3;
  for (std::size_t i = 0; i < cfg_.critic_strides.size(); ++i) {
    const bool last = i + 1 == cfg_.critic_strides.size();
    const int out = last ? 1 : cfg_.critic_channels[i];
    const int stride = cfg_.critic_strides[i];
    const int kernel = stride == 2 ? 4 : 3;
    d1_.emplace_back(params_, "d1.c" + std::to_string(i + 1), in, out, kernel, stride, 1, true, last ? 1.0 : a, rng);
    in = out;
  }
  in = 2;
  for (std::size_t i = 0; i < cfg_.info_critic_channels.size(); ++i) {
    d2_.emplace_back(params_, "d2.c" + std::to_string(i + 1), in, cfg_.info_critic_channels[i], 4, 2, 1, false, a, rng);
    in = cfg_.info_critic_channels[i];
  }
  d2_fc_ = Linear(params_, "d2.fc", in, cfg_.info_dim, 1.0, rng);
}

Var Critic::patch_scores(const Var& lab) const {
  const int s = cfg_.input_size;
  const Shape& in = lab.shape();
  if (in.size() != 4 || in[1] != 3 || in[2] != s || in[3] != s) {
    throw ValidationError("critic input must be [N,3," + std::to_string(s) + "," + std::to_string(s) + "], got " +
                          shape_str(in));
  }
  Var h = lab;
  for (std::size_t i = 0; i < d1_.size(); ++i) {
    h = d1_[i](h);
    if (i + 1 < d1_.size()) h = ops::leaky_relu(h, cfg_.leaky_slope);
  }
  return h;
}

Var Critic::score(const Var& lab) const { return ops::mean_per_sample(patch_scores(lab)); }

Var Critic::info(const Var& ab) const {
  const int s = cfg_.input_size;
  const Shape& in = ab.shape();
  if (in.size() != 4 || in[1] != 2 || in[2] != s || in[3] != s) {
    throw ValidationError("info critic input must be [N,2," + std::to_string(s) + "," + std::to_string(s) +
                          "], got " + shape_str(in));
  }
  Var h = ab;
  for (const Conv2d& conv : d2_) h = ops::leaky_relu(conv(h), cfg_.leaky_slope);
  return d2_fc_(global_average_pool(h));
}

CriticOutput Critic::forward(const Var& lab) const {
  return {patch_scores(lab), info(ops::slice_channels(lab, 1, 3))};
}

std::vector<Var> Critic::branch_parameters(Branch b) const { return params_.vars_with_prefix(branch_prefix(b)); }

Generator build_generator(const ModelConfig& cfg, std::uint64_t seed, const std::optional<WeightSource>& backbone_init) {
  Generator gen(cfg, seed);
  if (backbone_init) gen.load_backbone(*backbone_init);
  return gen;
}

Critic build_critic(const ModelConfig& cfg, std::uint64_t seed) { return Critic(cfg, seed); }

Var lab_stack(const Var& gray, const Var& ab) {
  std::vector<Var> parts{gray, ab};
  return ops::concat_channels(parts);
}

}  // namespace histnet
