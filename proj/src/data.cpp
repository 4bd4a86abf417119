#include "histnet/data.hpp"

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "histnet/errors.hpp"
#include "histnet/image_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace histnet {

namespace {

std::string read_text(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw ValidationError("cannot read " + p.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& s) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary);
  if (!f) throw ValidationError("cannot write " + p.string());
  f << s;
}

std::string strip_comment(std::string line) {
  if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
  return line;
}

int index_in(const std::vector<std::string>& v, const std::string& s) {
  auto it = std::find(v.begin(), v.end(), s);
  return it == v.end() ? -1 : static_cast<int>(it - v.begin());
}

}  // namespace

// ---------------------------------------------------------------- taxonomy

LabelTaxonomy LabelTaxonomy::parse(const std::string& text) {
  LabelTaxonomy t;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  auto fail = [&](const std::string& msg) {
    throw ValidationError("taxonomy line " + std::to_string(lineno) + ": " + msg);
  };
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ls(strip_comment(line));
    std::string kind;
    if (!(ls >> kind)) continue;
    std::vector<std::string> words;
    for (std::string w; ls >> w;) words.push_back(w);
    if (kind == "era" || kind == "nationality" || kind == "garment") {
      auto& dst = kind == "era" ? t.eras_ : kind == "nationality" ? t.nationalities_ : t.garments_;
      if (words.empty()) fail(kind + " needs at least one name");
      for (auto& w : words) {
        if (index_in(dst, w) >= 0) fail("duplicate " + kind + " '" + w + "'");
        dst.push_back(w);
      }
    } else if (kind == "label") {
      if (words.size() != 4) fail("expected 'label <id> <era> <nationality> <garment>'");
      CompositeLabel l;
      try {
        std::size_t used = 0;
        l.id = std::stoi(words[0], &used);
        if (used != words[0].size()) fail("bad label id '" + words[0] + "'");
      } catch (const std::logic_error&) {
        fail("bad label id '" + words[0] + "'");
      }
      l.era = words[1];
      l.nationality = words[2];
      l.garment = words[3];
      if (index_in(t.eras_, l.era) < 0) fail("unknown era '" + l.era + "'");
      if (index_in(t.nationalities_, l.nationality) < 0) fail("unknown nationality '" + l.nationality + "'");
      if (index_in(t.garments_, l.garment) < 0) fail("unknown garment '" + l.garment + "'");
      if (l.id != static_cast<int>(t.labels_.size())) fail("label ids must be dense and in order, expected " +
                                                           std::to_string(t.labels_.size()));
      if (t.find(l.era, l.nationality, l.garment)) fail("duplicate combination");
      t.labels_.push_back(l);
    } else {
      fail("unknown directive '" + kind + "'");
    }
  }
  if (t.labels_.size() < 2) throw ValidationError("taxonomy needs at least two labels");
  return t;
}

LabelTaxonomy LabelTaxonomy::load(const fs::path& path) { return parse(read_text(path)); }

const CompositeLabel& LabelTaxonomy::label(int id) const {
  if (id < 0 || id >= label_count()) throw ValidationError("label id " + std::to_string(id) + " not in taxonomy");
  return labels_[id];
}

std::optional<int> LabelTaxonomy::find(const std::string& era, const std::string& nationality,
                                       const std::string& garment) const {
  for (const auto& l : labels_)
    if (l.era == era && l.nationality == nationality && l.garment == garment) return l.id;
  return std::nullopt;
}

std::string LabelTaxonomy::serialize() const {
  std::ostringstream o;
  auto list = [&](const char* kind, const std::vector<std::string>& v) {
    o << kind;
    for (const auto& s : v) o << ' ' << s;
    o << '\n';
  };
  list("era", eras_);
  list("nationality", nationalities_);
  list("garment", garments_);
  for (const auto& l : labels_) o << "label " << l.id << ' ' << l.era << ' ' << l.nationality << ' ' << l.garment << '\n';
  return o.str();
}

std::string LabelTaxonomy::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : serialize()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------- manifest

std::string to_string(LabelSource s) {
  switch (s) {
    case LabelSource::manual: return "manual";
    case LabelSource::pseudo: return "pseudo";
    case LabelSource::unknown: return "unknown";
  }
  return "unknown";
}

std::string to_string(Split s) { return s == Split::train ? "train" : "test"; }
std::string to_string(PersonCheck p) { return p == PersonCheck::passed ? "passed" : "unknown"; }

namespace {

LabelSource label_source_from(const std::string& s) {
  if (s == "manual") return LabelSource::manual;
  if (s == "pseudo") return LabelSource::pseudo;
  if (s == "unknown") return LabelSource::unknown;
  throw ValidationError("unknown label_source '" + s + "'");
}

Split split_from(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "test") return Split::test;
  throw ValidationError("unknown split '" + s + "'");
}

PersonCheck person_from(const std::string& s) {
  if (s == "passed") return PersonCheck::passed;
  if (s == "unknown") return PersonCheck::unknown;
  throw ValidationError("unknown person check '" + s + "'");
}

json record_to_json(const SampleRecord& r) {
  json j = {{"id", r.id},
            {"image", r.image_path},
            {"label", r.label},
            {"label_source", to_string(r.label_source)},
            {"split", to_string(r.split)},
            {"person", to_string(r.person)}};
  if (r.confidence) j["confidence"] = *r.confidence;
  if (r.parsing_path) j["parsing"] = *r.parsing_path;
  return j;
}

SampleRecord record_from_json(const json& j) {
  SampleRecord r;
  r.id = j.at("id").get<std::string>();
  r.image_path = j.at("image").get<std::string>();
  r.label = j.at("label").get<int>();
  r.label_source = label_source_from(j.at("label_source").get<std::string>());
  r.split = split_from(j.at("split").get<std::string>());
  r.person = person_from(j.value("person", std::string("passed")));
  if (j.contains("confidence")) r.confidence = j["confidence"].get<double>();
  if (j.contains("parsing")) r.parsing_path = j["parsing"].get<std::string>();
  return r;
}

}  // namespace

fs::path DatasetManifest::resolve(const std::string& p) const {
  fs::path path(p);
  return path.is_absolute() || root.empty() ? path : root / path;
}

std::size_t DatasetManifest::count(Split s) const {
  return static_cast<std::size_t>(std::count_if(records.begin(), records.end(), [s](const auto& r) { return r.split == s; }));
}

std::vector<std::size_t> DatasetManifest::indices(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < records.size(); ++i)
    if (records[i].split == s) out.push_back(i);
  return out;
}

void DatasetManifest::validate(bool check_paths) const {
  std::set<std::string> ids;
  for (const auto& r : records) {
    if (r.id.empty()) throw ValidationError("record with empty id");
    if (!ids.insert(r.id).second) throw ValidationError("duplicate record id '" + r.id + "'");
    if (r.label < -1 || r.label >= taxonomy.label_count()) {
      throw ValidationError("record '" + r.id + "' has label " + std::to_string(r.label) + " outside the taxonomy");
    }
    if ((r.label_source == LabelSource::unknown) != (r.label == -1)) {
      throw ValidationError("record '" + r.id + "': label and label_source disagree");
    }
    if (r.label_source == LabelSource::pseudo && (!r.confidence || !(*r.confidence > 0.0 && *r.confidence <= 1.0))) {
      throw ValidationError("record '" + r.id + "': pseudo label needs a confidence in (0, 1]");
    }
    if (check_paths) {
      if (!fs::exists(resolve(r.image_path))) throw ValidationError("record '" + r.id + "': missing image " + r.image_path);
      if (r.parsing_path && !fs::exists(resolve(*r.parsing_path))) {
        throw ValidationError("record '" + r.id + "': missing parsing file " + *r.parsing_path);
      }
    }
  }
}

std::string DatasetManifest::serialize() const {
  json header = {{"format", "histnet-manifest"},
                 {"version", 1},
                 {"taxonomy_hash", taxonomy.hash()},
                 {"taxonomy", taxonomy.serialize()},
                 {"notes", notes},
                 {"counts", {{"records", records.size()}, {"train", count(Split::train)}, {"test", count(Split::test)}}}};
  std::string out = header.dump() + "\n";
  for (const auto& r : records) out += record_to_json(r).dump() + "\n";
  return out;
}

DatasetManifest DatasetManifest::parse(const std::string& text, const fs::path& root) {
  std::istringstream in(text);
  std::string line;
  DatasetManifest m;
  m.root = root;
  bool have_header = false;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ValidationError("manifest line " + std::to_string(lineno) + ": " + e.what());
    }
    try {
      if (!have_header) {
        if (j.value("format", "") != "histnet-manifest") throw ValidationError("manifest header missing");
        if (j.value("version", 0) != 1) throw ValidationError("unsupported manifest version");
        m.taxonomy = LabelTaxonomy::parse(j.at("taxonomy").get<std::string>());
        if (m.taxonomy.hash() != j.at("taxonomy_hash").get<std::string>()) {
          throw ValidationError("manifest taxonomy hash does not match its taxonomy");
        }
        m.notes = j.value("notes", std::vector<std::string>{});
        have_header = true;
      } else {
        m.records.push_back(record_from_json(j));
      }
    } catch (const json::exception& e) {
      throw ValidationError("manifest line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (!have_header) throw ValidationError("manifest is empty");
  m.validate();
  return m;
}

void DatasetManifest::save(const fs::path& path) const { write_text(path, serialize()); }

DatasetManifest DatasetManifest::load(const fs::path& path) {
  return parse(read_text(path), path.has_parent_path() ? path.parent_path() : fs::path("."));
}

// ---------------------------------------------------------------- filters

double mean_saturation(const RgbImage& img) {
  HsvImage hsv = rgb_to_hsv(img);
  double s = 0.0;
  for (double v : hsv.saturation) s += v;
  return hsv.saturation.empty() ? 0.0 : s / hsv.saturation.size();
}

bool filter_near_grayscale(const RgbImage& img, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw ValidationError("saturation threshold must lie in (0, 1)");
  return mean_saturation(img) > threshold;
}

double laplacian_variance(const RgbImage& img) {
  const int h = img.height, w = img.width;
  if (h < 3 || w < 3) return 0.0;
  std::vector<double> y(static_cast<std::size_t>(h) * w);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      y[r * w + c] = 0.299 * img.at(r, c, 0) + 0.587 * img.at(r, c, 1) + 0.114 * img.at(r, c, 2);
  double sum = 0, sum2 = 0;
  std::size_t n = 0;
  for (int r = 1; r + 1 < h; ++r)
    for (int c = 1; c + 1 < w; ++c) {
      const double l = y[(r - 1) * w + c] + y[(r + 1) * w + c] + y[r * w + c - 1] + y[r * w + c + 1] - 4 * y[r * w + c];
      sum += l;
      sum2 += l * l;
      ++n;
    }
  const double mean = sum / n;
  return sum2 / n - mean * mean;
}

Detection StubDetector::detect(const fs::path&, const RgbImage&) {
  if (fail_) return {false, {}, "stub failure"};
  return {true, boxes_, ""};
}

ProcessDetector::ProcessDetector(std::vector<std::string> argv) : argv_(std::move(argv)) {
  if (argv_.empty()) throw ValidationError("detector command is empty");
}

ProcessDetector::~ProcessDetector() { stop(); }

void ProcessDetector::start() {
  int in_pipe[2], out_pipe[2];
  if (pipe(in_pipe) != 0) return;
  if (pipe(out_pipe) != 0) {
    close(in_pipe[0]);
    close(in_pipe[1]);
    return;
  }
  pid_t pid = fork();
  if (pid < 0) {
    for (int fd : {in_pipe[0], in_pipe[1], out_pipe[0], out_pipe[1]}) close(fd);
    return;
  }
  if (pid == 0) {
    dup2(in_pipe[0], STDIN_FILENO);
    dup2(out_pipe[1], STDOUT_FILENO);
    for (int fd : {in_pipe[0], in_pipe[1], out_pipe[0], out_pipe[1]}) close(fd);
    std::vector<char*> args;
    for (auto& a : argv_) args.push_back(a.data());
    args.push_back(nullptr);
    execvp(args[0], args.data());
    _exit(127);
  }
  close(in_pipe[0]);
  close(out_pipe[1]);
  pid_ = pid;
  to_child_ = in_pipe[1];
  from_child_ = out_pipe[0];
  pending_.clear();
}

void ProcessDetector::stop() {
  if (to_child_ >= 0) close(to_child_);
  if (from_child_ >= 0) close(from_child_);
  to_child_ = from_child_ = -1;
  if (pid_ > 0) {
    int status = 0;
    if (waitpid(pid_, &status, WNOHANG) == 0) {
      kill(pid_, SIGTERM);
      waitpid(pid_, &status, 0);
    }
  }
  pid_ = -1;
}

Detection ProcessDetector::detect(const fs::path& path, const RgbImage&) {
  if (pid_ < 0) start();
  if (pid_ < 0) return {false, {}, "could not start detector"};
  const std::string request = json{{"path", path.string()}}.dump() + "\n";
  // A child that has exited turns writes into EPIPE; keep the signal away.
  struct sigaction ignore{}, previous{};
  ignore.sa_handler = SIG_IGN;
  sigaction(SIGPIPE, &ignore, &previous);
  bool write_ok = true;
  for (std::size_t off = 0; off < request.size();) {
    ssize_t n = write(to_child_, request.data() + off, request.size() - off);
    if (n <= 0) {
      write_ok = false;
      break;
    }
    off += static_cast<std::size_t>(n);
  }
  sigaction(SIGPIPE, &previous, nullptr);
  if (!write_ok) {
    stop();
    return {false, {}, "detector process is not accepting requests"};
  }
  std::string line;
  for (;;) {
    if (auto nl = pending_.find('\n'); nl != std::string::npos) {
      line = pending_.substr(0, nl);
      pending_.erase(0, nl + 1);
      break;
    }
    pollfd pfd{from_child_, POLLIN, 0};
    if (poll(&pfd, 1, 60000) <= 0) {
      stop();
      return {false, {}, "detector timed out"};
    }
    char buf[4096];
    ssize_t n = read(from_child_, buf, sizeof buf);
    if (n <= 0) {
      stop();
      return {false, {}, "detector process exited"};
    }
    pending_.append(buf, static_cast<std::size_t>(n));
  }
  try {
    json j = json::parse(line);
    if (j.contains("error")) return {false, {}, j["error"].get<std::string>()};
    Detection d{true, {}, ""};
    for (const auto& b : j.at("boxes")) {
      d.boxes.push_back({b.value("x", 0.0), b.value("y", 0.0), b.value("w", 0.0), b.value("h", 0.0),
                         b.at("confidence").get<double>()});
    }
    return d;
  } catch (const json::exception& e) {
    return {false, {}, std::string("malformed detector reply: ") + e.what()};
  }
}

std::string to_string(FilterDecision d) {
  switch (d) {
    case FilterDecision::keep: return "keep";
    case FilterDecision::reject: return "reject";
    case FilterDecision::unknown: return "unknown";
  }
  return "unknown";
}

FilterDecision filter_person_present(const fs::path& path, const RgbImage& img, PersonDetector& detector,
                                     const PersonFilterOptions& opts) {
  Detection d = detector.detect(path, img);
  if (!d.ok) return FilterDecision::unknown;
  const auto persons = std::count_if(d.boxes.begin(), d.boxes.end(),
                                     [&](const PersonBox& b) { return b.confidence >= opts.min_confidence; });
  return persons >= 1 && persons <= opts.max_persons ? FilterDecision::keep : FilterDecision::reject;
}

// ---------------------------------------------------------------- augmentation

std::vector<RgbImage> augment(const RgbImage& img, double blur_sigma) {
  return {mirror_horizontal(img), gaussian_blur(img, blur_sigma)};
}

// ---------------------------------------------------------------- bootstrap

std::vector<double> SoftmaxRegressionTrainer::features(const RgbImage& img, int thumbnail) {
  RgbImage small = resize(img, thumbnail, thumbnail);
  LabImage lab = rgb_to_lab(small);
  std::vector<double> f;
  f.reserve(small.pixel_count() * 3 + 6);
  for (std::size_t i = 0; i < small.pixel_count(); ++i) {
    f.push_back(lab.L[i] / 100.0);
    f.push_back(lab.a[i] / kChromaScale);
    f.push_back(lab.b[i] / kChromaScale);
  }
  // Mirror-invariant colour summary.
  double ma = 0, mb = 0, sa = 0, sb = 0;
  for (std::size_t i = 0; i < small.pixel_count(); ++i) {
    ma += lab.a[i];
    mb += lab.b[i];
  }
  ma /= small.pixel_count();
  mb /= small.pixel_count();
  for (std::size_t i = 0; i < small.pixel_count(); ++i) {
    sa += (lab.a[i] - ma) * (lab.a[i] - ma);
    sb += (lab.b[i] - mb) * (lab.b[i] - mb);
  }
  f.push_back(ma / kChromaScale);
  f.push_back(mb / kChromaScale);
  f.push_back(std::sqrt(sa / small.pixel_count()) / kChromaScale);
  f.push_back(std::sqrt(sb / small.pixel_count()) / kChromaScale);
  return f;
}

namespace {

class SoftmaxRegression : public ImageClassifier {
 public:
  SoftmaxRegression(int thumbnail, int classes, std::vector<double> mean, std::vector<double> scale,
                    std::vector<double> weights)
      : thumbnail_(thumbnail),
        classes_(classes),
        mean_(std::move(mean)),
        scale_(std::move(scale)),
        weights_(std::move(weights)) {}

  std::vector<double> probabilities(const std::vector<double>& raw) const {
    const std::size_t d = mean_.size();
    std::vector<double> z(classes_, 0.0);
    for (int k = 0; k < classes_; ++k) {
      const double* w = &weights_[k * (d + 1)];
      double s = w[d];
      for (std::size_t i = 0; i < d; ++i) s += w[i] * (raw[i] - mean_[i]) * scale_[i];
      z[k] = s;
    }
    const double mx = *std::max_element(z.begin(), z.end());
    double total = 0;
    for (double& v : z) total += (v = std::exp(v - mx));
    for (double& v : z) v /= total;
    return z;
  }

  Prediction predict(const RgbImage& img) const override {
    auto p = probabilities(SoftmaxRegressionTrainer::features(img, thumbnail_));
    auto it = std::max_element(p.begin(), p.end());
    return {static_cast<int>(it - p.begin()), *it};
  }

 private:
  int thumbnail_;
  int classes_;
  std::vector<double> mean_, scale_, weights_;
};

}  // namespace

std::unique_ptr<ImageClassifier> SoftmaxRegressionTrainer::train(const std::vector<LabeledImage>& examples,
                                                                 int classes) {
  if (examples.empty()) throw ValidationError("classifier needs at least one example");
  std::vector<std::vector<double>> x;
  for (const auto& e : examples) {
    if (e.label < 0 || e.label >= classes) throw ValidationError("training label outside [0, classes)");
    x.push_back(features(e.image, opts_.thumbnail));
  }
  const std::size_t n = x.size(), d = x[0].size();
  std::vector<double> mean(d, 0.0), scale(d, 1.0);
  for (const auto& row : x)
    for (std::size_t i = 0; i < d; ++i) mean[i] += row[i] / n;
  for (std::size_t i = 0; i < d; ++i) {
    double var = 0;
    for (const auto& row : x) var += (row[i] - mean[i]) * (row[i] - mean[i]);
    var /= n;
    scale[i] = var > 1e-12 ? 1.0 / std::sqrt(var) : 0.0;
  }
  for (auto& row : x)
    for (std::size_t i = 0; i < d; ++i) row[i] = (row[i] - mean[i]) * scale[i];

  // Full-batch gradient descent on mean cross-entropy + l2 |W|^2 / 2.
  std::vector<double> w(static_cast<std::size_t>(classes) * (d + 1), 0.0), g(w.size());
  std::vector<double> z(classes);
  for (int it = 0; it < opts_.iterations; ++it) {
    std::fill(g.begin(), g.end(), 0.0);
    for (std::size_t s = 0; s < n; ++s) {
      for (int k = 0; k < classes; ++k) {
        const double* wk = &w[k * (d + 1)];
        double v = wk[d];
        for (std::size_t i = 0; i < d; ++i) v += wk[i] * x[s][i];
        z[k] = v;
      }
      const double mx = *std::max_element(z.begin(), z.end());
      double total = 0;
      for (double& v : z) total += (v = std::exp(v - mx));
      for (int k = 0; k < classes; ++k) {
        const double r = z[k] / total - (k == examples[s].label ? 1.0 : 0.0);
        double* gk = &g[k * (d + 1)];
        for (std::size_t i = 0; i < d; ++i) gk[i] += r * x[s][i] / n;
        gk[d] += r / n;
      }
    }
    for (int k = 0; k < classes; ++k)
      for (std::size_t i = 0; i < d; ++i) g[k * (d + 1) + i] += opts_.l2 * w[k * (d + 1) + i];
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= opts_.learning_rate * g[i];
  }
  return std::make_unique<SoftmaxRegression>(opts_.thumbnail, classes, std::move(mean), std::move(scale), std::move(w));
}

DatasetManifest bootstrap_labels(const DatasetManifest& manifest, ClassifierTrainer& trainer,
                                 const BootstrapOptions& opts, BootstrapReport* report) {
  BootstrapReport rep;
  const int classes = manifest.taxonomy.label_count();
  std::vector<std::size_t> per_class(classes, 0);
  std::vector<std::size_t> to_label;
  for (std::size_t i = 0; i < manifest.records.size(); ++i) {
    const auto& r = manifest.records[i];
    if (r.label_source == LabelSource::manual) {
      ++per_class[r.label];
      ++rep.manual;
    } else {
      to_label.push_back(i);
    }
  }
  if (to_label.empty()) {
    if (report) *report = rep;
    return manifest;
  }
  std::string missing;
  for (int k = 0; k < classes; ++k)
    if (per_class[k] == 0) missing += (missing.empty() ? "" : ", ") + std::to_string(k);
  if (!missing.empty()) throw ValidationError("classes without a manual example: " + missing);

  auto load = [&](const SampleRecord& r) -> std::optional<RgbImage> {
    try {
      return resize_center_crop(read_rgb(manifest.resolve(r.image_path)), opts.image_size);
    } catch (const std::exception&) {
      return std::nullopt;
    }
  };

  std::vector<LabeledImage> examples;
  for (const auto& r : manifest.records) {
    if (r.label_source != LabelSource::manual) continue;
    auto img = load(r);
    if (!img) {
      ++rep.unreadable;
      continue;
    }
    for (auto& a : augment(*img, opts.blur_sigma)) examples.push_back({std::move(a), r.label});
    examples.push_back({std::move(*img), r.label});
  }
  auto classifier = trainer.train(examples, classes);

  DatasetManifest out = manifest;
  for (std::size_t i : to_label) {
    SampleRecord& r = out.records[i];
    auto img = load(r);
    if (!img) {
      ++rep.unreadable;
      continue;
    }
    Prediction p = classifier->predict(*img);
    if (p.label < 0 || p.label >= classes) throw ValidationError("classifier predicted a label outside the taxonomy");
    r.label = p.label;
    r.label_source = LabelSource::pseudo;
    r.confidence = std::clamp(p.confidence, 1e-12, 1.0);
    ++rep.pseudo;
  }
  if (report) *report = rep;
  return out;
}

void mark_manual_fraction(DatasetManifest& manifest, const std::vector<int>& truth, double f, Rng& rng) {
  if (!(f > 0.0 && f <= 1.0)) throw ValidationError("manual fraction must lie in (0, 1]");
  if (truth.size() != manifest.records.size()) throw ValidationError("one true label per record required");
  const std::size_t n = truth.size();
  std::vector<bool> manual(n, false);
  auto order = rng.permutation(n);
  const std::size_t want = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(f * n)));
  for (std::size_t i = 0; i < want && i < n; ++i) manual[order[i]] = true;
  // Every class that occurs keeps at least one manual example.
  std::set<int> covered;
  for (std::size_t i = 0; i < n; ++i)
    if (manual[i]) covered.insert(truth[i]);
  for (std::size_t i : order) {
    if (!covered.count(truth[i])) {
      manual[i] = true;
      covered.insert(truth[i]);
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    SampleRecord& r = manifest.records[i];
    r.confidence.reset();
    if (manual[i]) {
      r.label = truth[i];
      r.label_source = LabelSource::manual;
    } else {
      r.label = -1;
      r.label_source = LabelSource::unknown;
    }
  }
}

// ---------------------------------------------------------------- statistics

json DatasetStats::to_json() const {
  return {{"total", total},       {"train", train},       {"test", test},
          {"unlabeled", unlabeled}, {"by_era", by_era},   {"by_nationality", by_nationality},
          {"by_garment", by_garment}, {"by_source", by_source}, {"by_label", by_label}};
}

std::string DatasetStats::to_text() const {
  std::ostringstream o;
  o << "records " << total << " (train " << train << ", test " << test << ", unlabeled " << unlabeled << ")\n";
  auto group = [&](const char* title, const std::map<std::string, std::size_t>& m) {
    o << title << "\n";
    for (const auto& [k, v] : m) o << "  " << k << " " << v << "\n";
  };
  group("era", by_era);
  group("nationality", by_nationality);
  group("garment", by_garment);
  group("label source", by_source);
  o << "label";
  for (std::size_t i = 0; i < by_label.size(); ++i)
    if (by_label[i]) o << " " << i << ":" << by_label[i];
  o << "\n";
  return o.str();
}

DatasetStats dataset_stats(const DatasetManifest& manifest) {
  DatasetStats s;
  const auto& t = manifest.taxonomy;
  s.by_label.assign(t.label_count(), 0);
  for (const auto& e : t.eras()) s.by_era[e] = 0;
  for (const auto& n : t.nationalities()) s.by_nationality[n] = 0;
  for (const auto& g : t.garments()) s.by_garment[g] = 0;
  for (auto src : {LabelSource::manual, LabelSource::pseudo, LabelSource::unknown}) s.by_source[to_string(src)] = 0;
  for (const auto& r : manifest.records) {
    ++s.total;
    ++(r.split == Split::train ? s.train : s.test);
    ++s.by_source[to_string(r.label_source)];
    if (r.label < 0) {
      ++s.unlabeled;
      continue;
    }
    const auto& l = t.label(r.label);
    ++s.by_label[r.label];
    ++s.by_era[l.era];
    ++s.by_nationality[l.nationality];
    ++s.by_garment[l.garment];
  }
  return s;
}

HueHistogram manifest_hue_histogram(const DatasetManifest& manifest, int bins, std::optional<Split> split) {
  std::vector<RgbImage> images;
  for (const auto& r : manifest.records) {
    if (split && r.split != *split) continue;
    try {
      images.push_back(read_rgb(manifest.resolve(r.image_path)));
    } catch (const std::exception&) {
    }
  }
  return hue_histogram(images, bins);
}

// ---------------------------------------------------------------- parsing targets

std::vector<std::uint8_t> read_parsing_classes(const fs::path& path, const Palette& palette, int* height, int* width) {
  Image8 img = read_image8(path);
  auto classes = palette.decode(img);
  if (height) *height = img.height;
  if (width) *width = img.width;
  return classes;
}

DatasetManifest ingest_parsing_targets(const DatasetManifest& manifest, const fs::path& parsing_dir,
                                       const Palette& palette, ParsingIngestReport* report) {
  DatasetManifest out = manifest;
  ParsingIngestReport rep;
  std::vector<std::string> bad;
  for (auto& r : out.records) {
    const fs::path candidate = parsing_dir / (fs::path(r.image_path).stem().string() + ".png");
    if (!fs::exists(candidate)) {
      ++rep.missing;
      continue;
    }
    try {
      read_parsing_classes(candidate, palette, nullptr, nullptr);
    } catch (const std::exception& e) {
      bad.push_back(candidate.filename().string() + " (" + e.what() + ")");
      continue;
    }
    std::error_code ec;
    fs::path rel = manifest.root.empty() ? candidate : fs::relative(fs::absolute(candidate), fs::absolute(manifest.root), ec);
    r.parsing_path = (ec || rel.empty() ? fs::absolute(candidate) : rel).generic_string();
    ++rep.attached;
  }
  if (!bad.empty()) {
    std::string msg = "parsing files do not match the palette:";
    for (const auto& b : bad) msg += "\n  " + b;
    throw ValidationError(msg);
  }
  if (report) *report = rep;
  return out;
}

// ---------------------------------------------------------------- dataset build

json BuildLog::to_json() const {
  json d = json::array();
  for (const auto& [path, outcome] : decisions) d.push_back({{"image", path}, {"outcome", outcome}});
  return {{"scanned", scanned},
          {"kept", kept},
          {"rejected_grayscale", rejected_grayscale},
          {"rejected_blur", rejected_blur},
          {"rejected_person", rejected_person},
          {"person_unknown", person_unknown},
          {"unreadable", unreadable},
          {"decisions", d}};
}

std::map<std::string, int> load_label_file(const fs::path& path, const LabelTaxonomy& taxonomy) {
  std::map<std::string, int> out;
  std::istringstream in(read_text(path));
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ls(strip_comment(line));
    std::string file, extra;
    int label;
    if (!(ls >> file)) continue;
    if (!(ls >> label) || (ls >> extra)) {
      throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": expected '<image> <label id>'");
    }
    taxonomy.label(label);
    out[file] = label;
  }
  return out;
}

DatasetManifest build_manifest(const fs::path& image_dir, const fs::path& manifest_dir, const LabelTaxonomy& taxonomy,
                               PersonDetector& detector, const BuildOptions& opts,
                               const std::map<std::string, int>& manual_labels, BuildLog* log) {
  if (!fs::is_directory(image_dir)) throw ValidationError("not a readable directory: " + image_dir.string());
  if (!(opts.test_fraction >= 0.0 && opts.test_fraction < 1.0)) throw ValidationError("test_fraction must lie in [0, 1)");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(image_dir)) {
    if (!e.is_regular_file()) continue;
    std::string ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".png" || ext == ".jpg" || ext == ".jpeg") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw ValidationError("no images found in " + image_dir.string());

  BuildLog lg;
  DatasetManifest m;
  m.taxonomy = taxonomy;
  m.root = manifest_dir;
  for (const auto& f : files) {
    ++lg.scanned;
    const std::string name = f.filename().string();
    RgbImage img;
    try {
      img = read_rgb(f);
    } catch (const std::exception&) {
      ++lg.unreadable;
      lg.decisions.emplace_back(name, "unreadable");
      continue;
    }
    if (!filter_near_grayscale(img, opts.saturation_threshold)) {
      ++lg.rejected_grayscale;
      lg.decisions.emplace_back(name, "rejected_grayscale");
      continue;
    }
    if (opts.blur_threshold > 0.0 && laplacian_variance(img) < opts.blur_threshold) {
      ++lg.rejected_blur;
      lg.decisions.emplace_back(name, "rejected_blur");
      continue;
    }
    SampleRecord r;
    switch (filter_person_present(f, img, detector, opts.person)) {
      case FilterDecision::reject:
        ++lg.rejected_person;
        lg.decisions.emplace_back(name, "rejected_person");
        continue;
      case FilterDecision::unknown:
        ++lg.person_unknown;
        r.person = PersonCheck::unknown;
        break;
      case FilterDecision::keep:
        break;
    }
    r.id = f.stem().string();
    std::error_code ec;
    fs::path rel = fs::relative(fs::absolute(f), fs::absolute(manifest_dir), ec);
    r.image_path = (ec || rel.empty() ? fs::absolute(f) : rel).generic_string();
    if (auto it = manual_labels.find(name); it != manual_labels.end()) {
      r.label = it->second;
      r.label_source = LabelSource::manual;
    }
    ++lg.kept;
    lg.decisions.emplace_back(name, r.person == PersonCheck::unknown ? "kept_person_unknown" : "kept");
    m.records.push_back(std::move(r));
  }

  Rng rng(opts.seed);
  auto order = rng.permutation(m.records.size());
  const auto n_test = static_cast<std::size_t>(std::llround(opts.test_fraction * m.records.size()));
  for (std::size_t i = 0; i < n_test; ++i) m.records[order[i]].split = Split::test;

  m.notes.push_back("built from " + std::to_string(lg.scanned) + " scanned images");
  m.validate();
  if (log) *log = std::move(lg);
  return m;
}

// ---------------------------------------------------------------- synthetic data

namespace {

struct Style {
  std::array<double, 3> coat, pants, hat;
  int hat_kind;  // 0 flat wide, 1 tall narrow, 2 none, 3 rounded
  bool belt;
};

const Style kStyles[] = {
    {{0.16, 0.22, 0.45}, {0.14, 0.18, 0.38}, {0.16, 0.22, 0.45}, 0, true},   // dark blue uniform
    {{0.36, 0.40, 0.18}, {0.55, 0.50, 0.32}, {0.36, 0.40, 0.18}, 1, true},   // olive / khaki
    {{0.55, 0.22, 0.14}, {0.72, 0.62, 0.22}, {0.55, 0.22, 0.14}, 3, false},  // red / yellow
    {{0.30, 0.33, 0.36}, {0.20, 0.20, 0.22}, {0.10, 0.10, 0.10}, 2, false},  // grey suit
};

std::uint8_t class_of(const Palette& p, const char* name) {
  auto idx = p.index_of(std::string(name));
  if (!idx) throw ValidationError(std::string("palette lacks class '") + name + "'");
  return static_cast<std::uint8_t>(*idx);
}

}  // namespace

SyntheticSample render_synthetic(int slot, int size, const Palette& palette, Rng& rng) {
  const Style& st = kStyles[((slot % 4) + 4) % 4];
  const int s = size;
  SyntheticSample out{RgbImage(s, s), std::vector<std::uint8_t>(static_cast<std::size_t>(s) * s)};
  const std::uint8_t c_bg = class_of(palette, "background"), c_hat = class_of(palette, "hat"),
                     c_hair = class_of(palette, "hair"), c_face = class_of(palette, "face"),
                     c_upper = class_of(palette, "upper_clothes"), c_coat = class_of(palette, "coat"),
                     c_pants = class_of(palette, "pants"), c_arms = class_of(palette, "arms"),
                     c_shoes = class_of(palette, "shoes");
  std::array<std::array<double, 3>, 256> color{};
  const double bg_level = rng.uniform(0.65, 0.85);
  color[c_bg] = {bg_level, bg_level * 0.93, bg_level * 0.78};
  const double skin = rng.uniform(0.85, 1.0);
  color[c_face] = {0.86 * skin, 0.66 * skin, 0.52 * skin};
  color[c_arms] = color[c_face];
  color[c_hair] = {0.18, 0.12, 0.08};
  color[c_hat] = st.hat;
  color[c_coat] = st.coat;
  color[c_upper] = {st.coat[0] * 0.7, st.coat[1] * 0.7, st.coat[2] * 0.7};  // belt / collar
  color[c_pants] = st.pants;
  color[c_shoes] = {0.08, 0.07, 0.06};

  auto& lab = out.parsing;
  std::fill(lab.begin(), lab.end(), c_bg);
  auto rect = [&](double x0, double y0, double x1, double y1, std::uint8_t c) {
    for (int y = std::max(0, static_cast<int>(std::floor(y0 * s))); y < std::min(s, static_cast<int>(std::ceil(y1 * s))); ++y)
      for (int x = std::max(0, static_cast<int>(std::floor(x0 * s))); x < std::min(s, static_cast<int>(std::ceil(x1 * s))); ++x)
        lab[y * s + x] = c;
  };
  auto ellipse = [&](double cx, double cy, double rx, double ry, std::uint8_t c, bool upper_half = false) {
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x) {
        const double dx = ((x + 0.5) / s - cx) / rx, dy = ((y + 0.5) / s - cy) / ry;
        if (dx * dx + dy * dy <= 1.0 && (!upper_half || (y + 0.5) / s <= cy)) lab[y * s + x] = c;
      }
  };

  const double cx = 0.5 + rng.uniform(-0.08, 0.08);
  const double top = 0.06 + rng.uniform(-0.03, 0.03);
  // legs and shoes
  rect(cx - 0.14, top + 0.62, cx - 0.02, top + 0.86, c_pants);
  rect(cx + 0.02, top + 0.62, cx + 0.14, top + 0.86, c_pants);
  rect(cx - 0.15, top + 0.86, cx - 0.01, top + 0.92, c_shoes);
  rect(cx + 0.01, top + 0.86, cx + 0.15, top + 0.92, c_shoes);
  // torso and arms
  rect(cx - 0.18, top + 0.28, cx + 0.18, top + 0.64, c_coat);
  rect(cx - 0.27, top + 0.30, cx - 0.18, top + 0.56, c_coat);
  rect(cx + 0.18, top + 0.30, cx + 0.27, top + 0.56, c_coat);
  rect(cx - 0.27, top + 0.56, cx - 0.19, top + 0.62, c_arms);
  rect(cx + 0.19, top + 0.56, cx + 0.27, top + 0.62, c_arms);
  if (st.belt) rect(cx - 0.18, top + 0.50, cx + 0.18, top + 0.54, c_upper);
  else rect(cx - 0.04, top + 0.28, cx + 0.04, top + 0.40, c_upper);
  // head
  ellipse(cx, top + 0.17, 0.10, 0.11, c_face);
  ellipse(cx, top + 0.10, 0.10, 0.05, c_hair, true);
  switch (st.hat_kind) {
    case 0: rect(cx - 0.16, top + 0.04, cx + 0.16, top + 0.08, c_hat); rect(cx - 0.10, top + 0.0, cx + 0.10, top + 0.05, c_hat); break;
    case 1: rect(cx - 0.07, top - 0.06, cx + 0.07, top + 0.08, c_hat); break;
    case 3: ellipse(cx, top + 0.08, 0.12, 0.08, c_hat, true); break;
    default: break;
  }

  const double light = rng.uniform(0.9, 1.05);
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) {
      const auto& c = color[lab[y * s + x]];
      const double shade = light * (1.0 - 0.12 * (static_cast<double>(y) / s));
      for (int ch = 0; ch < 3; ++ch)
        out.image.at(y, x, ch) = std::clamp(c[ch] * shade + rng.normal() * 0.015, 0.0, 1.0);
    }
  return out;
}

SyntheticSet write_synthetic_dataset(const fs::path& dir, const Palette& palette, const SyntheticOptions& opts) {
  if (opts.count < 0 || opts.size < 8 || opts.labels.empty()) throw ValidationError("bad synthetic dataset options");
  Rng rng(opts.seed);
  fs::create_directories(dir / "images");
  if (opts.write_parsing) fs::create_directories(dir / "parsing");
  SyntheticSet set;
  std::ostringstream labels;
  labels << "# image label\n";
  const int total = opts.count + opts.grayscale_count;
  for (int i = 0; i < total; ++i) {
    const bool gray = i >= opts.count;
    const int slot = static_cast<int>(rng.below(opts.labels.size()));
    SyntheticSample smp = render_synthetic(slot, opts.size, palette, rng);
    char name[32];
    std::snprintf(name, sizeof name, "%s%04d.png", gray ? "gray_" : "img_", i);
    if (gray) {
      for (std::size_t p = 0; p < smp.image.pixel_count(); ++p) {
        const double y = 0.299 * smp.image.pixels[p * 3] + 0.587 * smp.image.pixels[p * 3 + 1] +
                         0.114 * smp.image.pixels[p * 3 + 2];
        for (int c = 0; c < 3; ++c) smp.image.pixels[p * 3 + c] = y;
      }
    }
    write_rgb_png(dir / "images" / name, smp.image);
    if (opts.write_parsing && !gray) {
      write_png(dir / "parsing" / name, Image8{opts.size, opts.size, 1, smp.parsing});
    }
    set.files.push_back((fs::path("images") / name).generic_string());
    set.labels.push_back(gray ? -1 : opts.labels[slot]);
    if (!gray) labels << name << ' ' << opts.labels[slot] << '\n';
  }
  write_text(dir / "labels.txt", labels.str());
  return set;
}

}  // namespace histnet
