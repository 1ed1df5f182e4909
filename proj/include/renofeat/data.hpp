// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "renofeat/tensor.hpp"

namespace renofeat {

enum class Split { kTrain, kTest, kVal };
const char* to_string(Split split);

enum class DataErrorCode { kInvalidSpec, kShapeMismatch, kRange, kEmptyClass, kEmptyCorpus };

class DataError : public std::runtime_error {
 public:
  DataError(DataErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}
  DataErrorCode code() const noexcept { return code_; }

 private:
  DataErrorCode code_;
};

/// Labelled images [M,C,H,W] with pixels in [0,1].
struct Corpus {
  Tensor images;
  std::vector<int> labels;
  std::size_t class_count = 0;
  Split split = Split::kTrain;
  std::vector<std::string> class_names;  // optional; index-aligned with labels

  std::size_t size() const noexcept { return labels.size(); }
  Shape sample_shape() const;
  /// Images at `indices` stacked into [k,C,H,W].
  Tensor gather(const std::vector<std::size_t>& indices) const;
  std::vector<std::size_t> class_sizes() const;
  /// Throws DataError if labels, pixel range or shapes are inconsistent.
  void validate() const;

  friend bool operator==(const Corpus&, const Corpus&) = default;
};

/// Synthetic task description. Classes come from a shared pattern catalog:
/// a task owns catalog entries [class_offset, class_offset + class_count), so
/// two tasks with disjoint ranges have disjoint classes but identical
/// low-level statistics unless `domain_shift` moves the render style.
struct TaskSpec {
  std::size_t class_count = 6;
  std::size_t train_per_class = 100;
  std::size_t test_per_class = 50;
  std::size_t channels = 3;
  std::size_t image_size = 32;
  std::size_t class_offset = 0;
  std::uint64_t seed = 0;
  std::uint64_t catalog_seed = 0;
  double domain_shift = 0.0;  // in [0, 1]

  void validate() const;
};

/// Renders the train and test splits of a task deterministically.
std::pair<Corpus, Corpus> generate_synthetic(const TaskSpec& spec);
/// Renders one split with `per_class` samples; splits use independent streams.
Corpus generate_split(const TaskSpec& spec, Split split, std::size_t per_class);

/// Keeps floor(fraction * class size) samples per class, chosen uniformly
/// without replacement, ordered by (class, original index).
Corpus subsample_per_class(const Corpus& corpus, double fraction, std::uint64_t seed);

struct Batch {
  Tensor images;
  std::vector<int> labels;
  std::vector<std::size_t> indices;  // positions in the source corpus
};

/// Seeded minibatch stream. The batch at iteration i is a pure function of
/// (corpus, batch_size, seed, i): each epoch is a fresh permutation and the
/// final short batch of an epoch is kept.
class BatchStream {
 public:
  BatchStream(const Corpus& corpus, std::size_t batch_size, std::uint64_t seed);

  Batch next();
  Batch at(std::size_t iteration);
  std::size_t batches_per_epoch() const noexcept { return per_epoch_; }

 private:
  const std::vector<std::size_t>& permutation(std::size_t epoch);

  const Corpus* corpus_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  std::size_t per_epoch_;
  std::size_t iteration_ = 0;
  std::size_t cached_epoch_ = static_cast<std::size_t>(-1);
  std::vector<std::size_t> perm_;
};

/// Reads `<dir>/<class>/<file>.rten`: classes sorted by directory name,
/// samples sorted by file name.
Corpus ingest_raw(const std::filesystem::path& dir, Split split = Split::kTrain);
/// Writes `<dir>/<class_name>/<index>.rten` (zero-padded index).
void export_raw(const Corpus& corpus, const std::filesystem::path& dir);

}  // namespace renofeat
