#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fewshot/error.hpp"
#include "fewshot/tensor.hpp"

namespace fewshot {

// One labelled image. Pixels are [0,1], channel-planar [3,H,W]; stored in
// f32 regardless of the training precision (conversion to f64 is exact).
struct Sample {
  Tensor<float> image;
  std::int32_t class_id = -1;
  std::string source_id;
};

struct DatasetClass {
  std::string name;
  std::vector<std::int32_t> sample_ids;
};

// Class-partitioned catalog. Global class ids are positions in `classes`,
// which is sorted lexicographically by name, so ids are stable across runs
// and machines.
struct DatasetIndex {
  std::vector<DatasetClass> classes;
  Shape image_shape;  // common [3,H,W]
};

struct Dataset {
  DatasetIndex index;
  std::vector<Sample> samples;

  std::int64_t num_classes() const { return std::int64_t(index.classes.size()); }
  const Sample& sample(std::int32_t id) const { return samples[std::size_t(id)]; }
};

// Seen/unseen/validation class split. The three sets are pairwise disjoint;
// unseen feeds evaluation, seen feeds episodic training.
struct SplitSpec {
  std::vector<std::int32_t> seen;
  std::vector<std::int32_t> unseen;
  std::vector<std::int32_t> val;
  std::uint64_t seed = 0;
};

// Episode sampling pool: which classes may be drawn, and which samples of
// each are visible (subsampling reduces the latter).
struct ClassPool {
  struct Entry {
    std::int32_t class_id;
    std::vector<std::int32_t> samples;
  };
  std::vector<Entry> entries;  // sorted by class_id

  std::int64_t size() const { return std::int64_t(entries.size()); }
};

enum class SubsampleMode { kCategories, kScenes };

// --- ingestion ---------------------------------------------------------

// Loads root/<class_name>/<file> where files are binary PPM (P6) or MMTN
// raw tensors. Classes are sorted by name, files by filename. When
// `resize_to` is given ([3,H,W]) every image is center-crop-resized to it
// by nearest neighbour; otherwise mixed shapes are an error.
Dataset load_directory(const std::string& root, std::optional<Shape> resize_to = std::nullopt);

// Procedural texture families: per class a base hue, stripe orientation and
// frequency, and a low-frequency blob pattern; per sample additive noise
// (sigma 0.05), translation up to 2 px, brightness jitter +-10%.
// Deterministic in `seed`.
Dataset generate_synthetic(std::int64_t num_classes, std::int64_t per_class, const Shape& shape,
                           std::uint64_t seed);

// --- splits ------------------------------------------------------------

// Shuffles classes by seed, partitions into 3 near-equal folds; fold `fold`
// becomes unseen, `val_fraction` of the remaining classes becomes val.
SplitSpec split_classes(const DatasetIndex& index, int fold, double val_fraction,
                        std::uint64_t seed);

// Count-based alternative: first `unseen_count` shuffled classes become
// unseen, then the val fraction, rest seen.
SplitSpec split_by_counts(const DatasetIndex& index, std::int64_t unseen_count,
                          double val_fraction, std::uint64_t seed);

std::string split_to_json(const SplitSpec& spec);
SplitSpec split_from_json(const std::string& text);

// --- pools and subsampling ---------------------------------------------

ClassPool pool_from(const Dataset& data, const std::vector<std::int32_t>& class_ids);

// Meta-training ratio reduction. categories: keep floor(ratio*|classes|)
// classes; scenes: keep floor(ratio*n_k) samples per class. `min_classes` /
// `min_per_class` give the episode-layout floor to validate against
// (0 = skip).
ClassPool subsample_train(const ClassPool& pool, SubsampleMode mode, double ratio,
                          std::uint64_t seed, std::int64_t min_classes = 0,
                          std::int64_t min_per_class = 0);

// --- batch assembly ----------------------------------------------------

// Stacks samples into an [N,3,H,W] batch of the requested scalar type.
template <typename S>
Tensor<S> assemble_batch(const Dataset& data, const std::vector<std::int32_t>& sample_ids) {
  if (sample_ids.empty()) throw DataError("assemble_batch: empty id list");
  const Shape& img = data.index.image_shape;
  Tensor<S> batch({std::int64_t(sample_ids.size()), img[0], img[1], img[2]});
  const std::int64_t stride = shape_numel(img);
  for (std::size_t i = 0; i < sample_ids.size(); ++i) {
    const Sample& s = data.sample(sample_ids[i]);
    S* dst = batch.data() + std::int64_t(i) * stride;
    const float* src = s.image.data();
    for (std::int64_t j = 0; j < stride; ++j) dst[j] = S(src[j]);
  }
  return batch;
}

}  // namespace fewshot
