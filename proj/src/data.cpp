// SPDX-License-Identifier: Apache-2.0
#include "renofeat/data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "renofeat/io.hpp"
#include "renofeat/rng.hpp"

namespace renofeat {

const char* to_string(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kTest: return "test";
    case Split::kVal: return "val";
  }
  return "?";
}

Shape Corpus::sample_shape() const {
  Shape s = images.shape();
  s.erase(s.begin());
  return s;
}

Tensor Corpus::gather(const std::vector<std::size_t>& indices) const {
  const std::size_t stride = element_count(sample_shape());
  Shape shape = images.shape();
  shape[0] = indices.size();
  std::vector<float> values(indices.size() * stride);
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const float* src = images.data() + indices[k] * stride;
    std::copy(src, src + stride, values.begin() + static_cast<std::ptrdiff_t>(k * stride));
  }
  return Tensor(std::move(shape), std::move(values));
}

std::vector<std::size_t> Corpus::class_sizes() const {
  std::vector<std::size_t> sizes(class_count, 0);
  for (int y : labels) ++sizes.at(static_cast<std::size_t>(y));
  return sizes;
}

void Corpus::validate() const {
  if (labels.empty()) throw DataError(DataErrorCode::kEmptyCorpus, "corpus is empty");
  if (images.rank() != 4 || images.dim(0) != labels.size()) {
    throw DataError(DataErrorCode::kShapeMismatch,
                    "corpus images " + renofeat::to_string(images.shape()) + " do not match " +
                        std::to_string(labels.size()) + " labels");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= class_count) {
      throw DataError(DataErrorCode::kInvalidSpec, "label " + std::to_string(y) + " out of range");
    }
  }
  for (float v : images.values()) {
    if (!(v >= 0.0f && v <= 1.0f)) throw DataError(DataErrorCode::kRange, "pixel outside [0,1]");
  }
}

void TaskSpec::validate() const {
  if (class_count == 0) throw DataError(DataErrorCode::kInvalidSpec, "task needs at least one class");
  if (train_per_class == 0 || test_per_class == 0) {
    throw DataError(DataErrorCode::kInvalidSpec, "task needs at least one sample per class");
  }
  if (channels == 0 || image_size < 4) {
    throw DataError(DataErrorCode::kInvalidSpec, "task image must be at least 4x4 with channels");
  }
  if (!(domain_shift >= 0.0 && domain_shift <= 1.0)) {
    throw DataError(DataErrorCode::kInvalidSpec, "domain_shift must lie in [0, 1]");
  }
}

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kNoiseSigma = 0.05;
// Render jitter. Pattern contrast is drawn from [kContrastLo, kContrastLo +
// kContrastSpan]; clutter is the peak amplitude of two soft background blobs.
constexpr double kAngleJitter = 0.8;
constexpr double kFreqJitter = 0.5;
constexpr double kShiftJitter = 0.5;
constexpr double kContrastLo = 0.12;
constexpr double kContrastSpan = 0.1;
constexpr double kClutter = 0.5;
constexpr double kColorJitter = 0.8;

// The catalog alternates between two banks of four pattern families every
// eight class indices, so tasks at offsets 0 and 8 share no family.
constexpr std::size_t kFamiliesPerBank = 4;
constexpr std::size_t kClassesPerBank = 8;

enum Family { kBars = 0, kRings = 1, kChecker = 2, kWaves = 3, kSpiral = 4, kSpokes = 5, kSpots = 6, kZigzag = 7 };

struct ClassPattern {
  int family;
  double freq;   // cycles per image
  double angle;  // radians
  double color[3];
};

ClassPattern catalog_class(std::uint64_t catalog_seed, std::size_t index) {
  Rng rng = make_rng(catalog_seed, {tag(Stream::kClassCatalog), index});
  std::uniform_real_distribution<double> u(0.0, 1.0);
  ClassPattern p{};
  p.family = static_cast<int>(index % kFamiliesPerBank +
                               kFamiliesPerBank * ((index / kClassesPerBank) % 2));
  p.freq = 1.5 + 2.5 * u(rng);
  p.angle = kPi * u(rng);
  double peak = 0.0;
  for (double& c : p.color) {
    c = 2.0 * u(rng) - 1.0;
    peak = std::max(peak, std::abs(c));
  }
  for (double& c : p.color) c /= std::max(peak, 1e-6);
  return p;
}

// Render-style transform of a task: rotates the colour basis and rescales
// spatial frequency in proportion to the shift.
struct Style {
  double color_mix;
  double freq_scale;
};

Style task_style(double shift) { return {0.6 * shift, 1.0 + 0.35 * shift}; }

double pattern_value(int family, double u, double v, double r, double phase, double freq) {
  const double w = 2.0 * kPi * freq;
  switch (family) {
    case kBars:
      return std::tanh(3.0 * std::sin(w * u + phase));
    case kRings:
      return std::sin(w * r + phase);
    case kChecker:
      return std::tanh(2.0 * std::sin(w * u + phase) * std::sin(w * v + 0.5 * phase));
    case kSpiral:
      return std::sin(w * r + 3.0 * std::atan2(v, u) + phase);
    case kSpokes:
      return std::sin(std::round(2.0 * freq + 2.0) * std::atan2(v, u) + phase);
    case kSpots:
      return std::tanh(3.0 * (std::sin(w * u + phase) + std::sin(w * v + 0.5 * phase) - 0.8));
    case kZigzag:
      return std::tanh(3.0 * std::sin(w * u + 2.0 * std::abs(std::fmod(freq * v + 10.0, 1.0) - 0.5) * kPi + phase));
    case kWaves:
    default:
      return std::sin(w * u + 0.8 * std::sin(kPi * freq * v) + phase);
  }
}

void render_sample(const ClassPattern& cls, const Style& style, std::size_t channels,
                   std::size_t size, Rng& rng, float* out) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, kNoiseSigma);
  const double angle = cls.angle + kAngleJitter * (u(rng) - 0.5);
  const double freq = cls.freq * style.freq_scale * (1.0 + kFreqJitter * (u(rng) - 0.5));
  const double phase = 2.0 * kPi * u(rng);
  const double cx = 0.5 + kShiftJitter * (u(rng) - 0.5);
  const double cy = 0.5 + kShiftJitter * (u(rng) - 0.5);
  const double contrast = kContrastLo + kContrastSpan * u(rng);
  double background[3];
  for (double& b : background) b = 0.35 + 0.3 * u(rng);
  // Two soft blobs of clutter shared across channels with random sign.
  double blob[2][4];
  for (auto& b : blob) {
    b[0] = u(rng);
    b[1] = u(rng);
    b[2] = kClutter * (u(rng) - 0.5);
    b[3] = 0.08 + 0.15 * u(rng);
  }
  double color[3];
  std::normal_distribution<double> cj(0.0, 1.0);
  for (std::size_t c = 0; c < 3; ++c) {
    color[c] = (1.0 - style.color_mix) * cls.color[c] + style.color_mix * cls.color[(c + 1) % 3];
    color[c] += kColorJitter * cj(rng);
  }
  const double ca = std::cos(angle), sa = std::sin(angle);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double px = (static_cast<double>(x) + 0.5) / static_cast<double>(size) - cx;
      const double py = (static_cast<double>(y) + 0.5) / static_cast<double>(size) - cy;
      const double pu = ca * px + sa * py;
      const double pv = -sa * px + ca * py;
      const double pr = std::sqrt(px * px + py * py);
      const double p = pattern_value(cls.family, pu, pv, pr, phase, freq);
      double clutter = 0.0;
      for (const auto& b : blob) {
        const double dx = (static_cast<double>(x) + 0.5) / static_cast<double>(size) - b[0];
        const double dy = (static_cast<double>(y) + 0.5) / static_cast<double>(size) - b[1];
        clutter += b[2] * std::exp(-(dx * dx + dy * dy) / (2.0 * b[3] * b[3]));
      }
      for (std::size_t c = 0; c < channels; ++c) {
        const double value =
            background[c % 3] + contrast * color[c % 3] * p + clutter + noise(rng);
        out[(c * size + y) * size + x] = static_cast<float>(std::clamp(value, 0.0, 1.0));
      }
    }
  }
}

}  // namespace

Corpus generate_split(const TaskSpec& spec, Split split, std::size_t per_class) {
  spec.validate();
  if (per_class == 0) throw DataError(DataErrorCode::kInvalidSpec, "split needs samples per class");
  const std::size_t plane = spec.channels * spec.image_size * spec.image_size;
  const Style style = task_style(spec.domain_shift);
  Corpus corpus;
  corpus.class_count = spec.class_count;
  corpus.split = split;
  corpus.images = Tensor({spec.class_count * per_class, spec.channels, spec.image_size,
                          spec.image_size});
  corpus.labels.reserve(spec.class_count * per_class);
  for (std::size_t k = 0; k < spec.class_count; ++k) {
    const ClassPattern cls = catalog_class(spec.catalog_seed, spec.class_offset + k);
    for (std::size_t i = 0; i < per_class; ++i) {
      Rng rng = make_rng(spec.seed, {tag(Stream::kRender), static_cast<std::uint64_t>(split), k, i});
      const std::size_t row = corpus.labels.size();
      render_sample(cls, style, spec.channels, spec.image_size, rng,
                    corpus.images.data() + row * plane);
      corpus.labels.push_back(static_cast<int>(k));
    }
  }
  return corpus;
}

std::pair<Corpus, Corpus> generate_synthetic(const TaskSpec& spec) {
  return {generate_split(spec, Split::kTrain, spec.train_per_class),
          generate_split(spec, Split::kTest, spec.test_per_class)};
}

Corpus subsample_per_class(const Corpus& corpus, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw DataError(DataErrorCode::kInvalidSpec, "subsample fraction must lie in (0, 1]");
  }
  std::vector<std::vector<std::size_t>> members(corpus.class_count);
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    members[static_cast<std::size_t>(corpus.labels[i])].push_back(i);
  }
  std::vector<std::size_t> keep;
  for (std::size_t k = 0; k < members.size(); ++k) {
    // Small epsilon so that e.g. 0.33 * 100 keeps 33 despite binary rounding.
    const auto count = static_cast<std::size_t>(
        std::floor(fraction * static_cast<double>(members[k].size()) + 1e-9));
    if (count == 0) {
      throw DataError(DataErrorCode::kEmptyClass,
                      "subsampling class " + std::to_string(k) + " leaves no samples");
    }
    Rng rng = make_rng(seed, {tag(Stream::kSubsample), k});
    std::vector<std::size_t> chosen = members[k];
    std::shuffle(chosen.begin(), chosen.end(), rng);
    chosen.resize(count);
    std::sort(chosen.begin(), chosen.end());
    keep.insert(keep.end(), chosen.begin(), chosen.end());
  }
  std::stable_sort(keep.begin(), keep.end(), [&](std::size_t a, std::size_t b) {
    return corpus.labels[a] < corpus.labels[b];
  });
  Corpus out;
  out.images = corpus.gather(keep);
  for (std::size_t i : keep) out.labels.push_back(corpus.labels[i]);
  out.class_count = corpus.class_count;
  out.split = corpus.split;
  out.class_names = corpus.class_names;
  return out;
}

BatchStream::BatchStream(const Corpus& corpus, std::size_t batch_size, std::uint64_t seed)
    : corpus_(&corpus), batch_size_(batch_size), seed_(seed) {
  if (corpus.size() == 0) throw DataError(DataErrorCode::kEmptyCorpus, "batch stream over empty corpus");
  if (batch_size == 0) throw DataError(DataErrorCode::kInvalidSpec, "batch size must be positive");
  per_epoch_ = (corpus.size() + batch_size - 1) / batch_size;
}

const std::vector<std::size_t>& BatchStream::permutation(std::size_t epoch) {
  if (epoch != cached_epoch_) {
    perm_.resize(corpus_->size());
    for (std::size_t i = 0; i < perm_.size(); ++i) perm_[i] = i;
    Rng rng = make_rng(seed_, {tag(Stream::kShuffle), epoch});
    std::shuffle(perm_.begin(), perm_.end(), rng);
    cached_epoch_ = epoch;
  }
  return perm_;
}

Batch BatchStream::at(std::size_t iteration) {
  const std::size_t epoch = iteration / per_epoch_;
  const std::size_t slot = iteration % per_epoch_;
  const auto& perm = permutation(epoch);
  const std::size_t first = slot * batch_size_;
  const std::size_t last = std::min(first + batch_size_, perm.size());
  Batch batch;
  batch.indices.assign(perm.begin() + static_cast<std::ptrdiff_t>(first),
                       perm.begin() + static_cast<std::ptrdiff_t>(last));
  batch.images = corpus_->gather(batch.indices);
  for (std::size_t i : batch.indices) batch.labels.push_back(corpus_->labels[i]);
  return batch;
}

Batch BatchStream::next() { return at(iteration_++); }

Corpus ingest_raw(const std::filesystem::path& dir, Split split) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) {
    throw DataError(DataErrorCode::kEmptyCorpus, "corpus directory not found: " + dir.string());
  }
  std::vector<fs::path> class_dirs;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_directory()) class_dirs.push_back(entry.path());
  }
  std::sort(class_dirs.begin(), class_dirs.end(),
            [](const fs::path& a, const fs::path& b) { return a.filename() < b.filename(); });
  if (class_dirs.empty()) {
    throw DataError(DataErrorCode::kEmptyCorpus, "no class directories under " + dir.string());
  }
  Corpus corpus;
  corpus.split = split;
  corpus.class_count = class_dirs.size();
  std::vector<float> values;
  Shape sample_shape;
  for (std::size_t k = 0; k < class_dirs.size(); ++k) {
    corpus.class_names.push_back(class_dirs[k].filename().string());
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(class_dirs[k])) {
      if (entry.is_regular_file() && entry.path().extension() == ".rten") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end(),
              [](const fs::path& a, const fs::path& b) { return a.filename() < b.filename(); });
    if (files.empty()) {
      throw DataError(DataErrorCode::kEmptyClass,
                      "class directory has no samples: " + class_dirs[k].string());
    }
    for (const auto& file : files) {
      const Tensor sample = load_raw_tensor(file);
      if (sample_shape.empty()) {
        sample_shape = sample.shape();
      } else if (sample.shape() != sample_shape) {
        throw DataError(DataErrorCode::kShapeMismatch,
                        "sample " + file.string() + " has shape " +
                            renofeat::to_string(sample.shape()) + ", expected " +
                            renofeat::to_string(sample_shape));
      }
      for (float v : sample.values()) {
        if (!(v >= 0.0f && v <= 1.0f)) {
          throw DataError(DataErrorCode::kRange, "pixel outside [0,1] in " + file.string());
        }
      }
      values.insert(values.end(), sample.values().begin(), sample.values().end());
      corpus.labels.push_back(static_cast<int>(k));
    }
  }
  Shape shape = sample_shape;
  shape.insert(shape.begin(), corpus.labels.size());
  corpus.images = Tensor(std::move(shape), std::move(values));
  return corpus;
}

void export_raw(const Corpus& corpus, const std::filesystem::path& dir) {
  corpus.validate();
  const std::size_t stride = element_count(corpus.sample_shape());
  std::vector<std::size_t> next_index(corpus.class_count, 0);
  auto class_name = [&](std::size_t k) {
    if (k < corpus.class_names.size()) return corpus.class_names[k];
    char buf[32];
    std::snprintf(buf, sizeof buf, "class_%03zu", k);
    return std::string(buf);
  };
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto k = static_cast<std::size_t>(corpus.labels[i]);
    char name[32];
    std::snprintf(name, sizeof name, "%06zu.rten", next_index[k]++);
    std::vector<float> sample(corpus.images.data() + i * stride,
                              corpus.images.data() + (i + 1) * stride);
    save_raw_tensor(Tensor(corpus.sample_shape(), std::move(sample)), dir / class_name(k) / name);
  }
  // Empty classes would not survive a round trip, so create their directories anyway.
  for (std::size_t k = 0; k < corpus.class_count; ++k) {
    std::filesystem::create_directories(dir / class_name(k));
  }
}

}  // namespace renofeat
