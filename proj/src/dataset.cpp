#include "fewshot/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <json.hpp>
#include <set>

#include "fewshot/ppm.hpp"
#include "fewshot/rng.hpp"
#include "fewshot/tensor_io.hpp"

namespace fs = std::filesystem;

namespace fewshot {

namespace {

// Largest centered crop with the target aspect ratio, then nearest-neighbour
// resample. Identity when shapes already match.
Tensor<float> crop_resize(const Tensor<float>& src, std::int64_t th, std::int64_t tw) {
  const std::int64_t sh = src.dim(1), sw = src.dim(2);
  if (sh == th && sw == tw) return src;
  const double scale = std::min(double(sh) / double(th), double(sw) / double(tw));
  const std::int64_t ch = std::max<std::int64_t>(1, std::int64_t(std::llround(double(th) * scale)));
  const std::int64_t cw = std::max<std::int64_t>(1, std::int64_t(std::llround(double(tw) * scale)));
  const std::int64_t oy = (sh - ch) / 2, ox = (sw - cw) / 2;
  Tensor<float> out({3, th, tw});
  for (std::int64_t c = 0; c < 3; ++c) {
    const float* plane = src.data() + c * sh * sw;
    float* dplane = out.data() + c * th * tw;
    for (std::int64_t y = 0; y < th; ++y) {
      std::int64_t sy = oy + std::int64_t((double(y) + 0.5) * double(ch) / double(th));
      sy = std::clamp<std::int64_t>(sy, 0, sh - 1);
      for (std::int64_t x = 0; x < tw; ++x) {
        std::int64_t sx = ox + std::int64_t((double(x) + 0.5) * double(cw) / double(tw));
        sx = std::clamp<std::int64_t>(sx, 0, sw - 1);
        dplane[y * tw + x] = plane[sy * sw + sx];
      }
    }
  }
  return out;
}

Tensor<float> load_image_file(const fs::path& p) {
  const std::string ext = p.extension().string();
  if (ext == ".ppm") return read_ppm(p.string());
  if (ext == ".mmtn") {
    Tensor<float> t = load_mmtn<float>(p.string());
    if (t.rank() != 3 || t.dim(0) != 3)
      throw DataError("tensor image must be [3,H,W]: " + p.string() + " has " +
                      shape_str(t.shape()));
    for (std::int64_t i = 0; i < t.numel(); ++i)
      if (!(t[i] >= 0.0f && t[i] <= 1.0f))
        throw DataError("pixel outside [0,1] in " + p.string());
    return t;
  }
  throw DataError("unsupported file type '" + ext + "': " + p.string());
}

double hue_channel(double h, double s, int shift) {
  const double k = std::fmod(double(shift) + h * 6.0, 6.0);
  return 1.0 - s * std::max(0.0, std::min({k, 4.0 - k, 1.0}));
}

void hsv_base(double h, double s, double rgb[3]) {
  rgb[0] = hue_channel(h, s, 5);
  rgb[1] = hue_channel(h, s, 3);
  rgb[2] = hue_channel(h, s, 1);
}

}  // namespace

Dataset load_directory(const std::string& root, std::optional<Shape> resize_to) {
  if (!fs::is_directory(root)) throw DataError("dataset root is not a directory: " + root);
  if (resize_to && (resize_to->size() != 3 || (*resize_to)[0] != 3))
    throw DataError("resize shape must be [3,H,W]");

  std::vector<fs::path> class_dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) class_dirs.push_back(e.path());
  std::sort(class_dirs.begin(), class_dirs.end(),
            [](const fs::path& a, const fs::path& b) { return a.filename() < b.filename(); });
  if (class_dirs.size() < 2)
    throw DataError("need at least 2 class directories under " + root + ", found " +
                    std::to_string(class_dirs.size()));

  Dataset data;
  for (const auto& dir : class_dirs) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end(),
              [](const fs::path& a, const fs::path& b) { return a.filename() < b.filename(); });
    if (files.empty()) throw DataError("empty class directory: " + dir.string());

    DatasetClass cls;
    cls.name = dir.filename().string();
    const auto class_id = std::int32_t(data.index.classes.size());
    for (const auto& f : files) {
      Tensor<float> img = load_image_file(f);
      if (resize_to) img = crop_resize(img, (*resize_to)[1], (*resize_to)[2]);
      if (data.index.image_shape.empty()) {
        data.index.image_shape = img.shape();
      } else if (img.shape() != data.index.image_shape) {
        throw DataError("image shape " + shape_str(img.shape()) + " in " + f.string() +
                        " differs from " + shape_str(data.index.image_shape) +
                        " (enable resize to mix sizes)");
      }
      const auto sid = std::int32_t(data.samples.size());
      data.samples.push_back(Sample{std::move(img), class_id, cls.name + "/" + f.filename().string()});
      cls.sample_ids.push_back(sid);
    }
    data.index.classes.push_back(std::move(cls));
  }
  return data;
}

Dataset generate_synthetic(std::int64_t num_classes, std::int64_t per_class, const Shape& shape,
                           std::uint64_t seed) {
  if (num_classes < 2)
    throw DataError("generate_synthetic: need >= 2 classes, got " + std::to_string(num_classes));
  if (per_class < 2)
    throw DataError("generate_synthetic: need >= 2 samples per class, got " +
                    std::to_string(per_class));
  if (shape.size() != 3 || shape[0] != 3 || shape[1] < 4 || shape[2] < 4)
    throw DataError("generate_synthetic: shape must be [3,H,W] with H,W >= 4");
  const std::int64_t h = shape[1], w = shape[2];
  constexpr double kTwoPi = 6.283185307179586476925286766559;

  Dataset data;
  data.index.image_shape = shape;
  const std::uint64_t class_base = derive_seed(seed, "synthetic.class");
  const std::uint64_t sample_base = derive_seed(seed, "synthetic.sample");

  for (std::int64_t c = 0; c < num_classes; ++c) {
    Rng crng(class_base ^ (std::uint64_t(c) * 0x9e3779b97f4a7c15ULL));
    // Hues are stratified over the circle so families stay distinct at any
    // class count; everything else is free per family.
    const double hue = std::fmod((double(c) + 0.25 + 0.5 * crng.uniform()) / double(num_classes), 1.0);
    const double sat = crng.uniform(0.45, 0.85);
    const double theta = crng.uniform(0.0, 3.14159265358979323846);
    const double stripe_freq = crng.uniform(1.5, 5.0);
    const double stripe_phase = crng.uniform(0.0, kTwoPi);
    const double blob_fx = 1.0 + double(crng.uniform_int(3));
    const double blob_fy = 1.0 + double(crng.uniform_int(3));
    const double blob_px = crng.uniform(0.0, kTwoPi);
    const double blob_py = crng.uniform(0.0, kTwoPi);
    const double stripe_amp = crng.uniform(0.16, 0.26);
    const double blob_amp = crng.uniform(0.10, 0.18);
    const double base_value = crng.uniform(0.52, 0.68);
    double rgb[3];
    hsv_base(hue, sat, rgb);
    const double ct = std::cos(theta), st = std::sin(theta);

    DatasetClass cls;
    char buf[32];
    std::snprintf(buf, sizeof buf, "class%03d", int(c));
    cls.name = buf;

    for (std::int64_t s = 0; s < per_class; ++s) {
      Rng srng(sample_base ^ (std::uint64_t(c) * 1000003ULL + std::uint64_t(s)));
      const double dx = double(std::int64_t(srng.uniform_int(5))) - 2.0;
      const double dy = double(std::int64_t(srng.uniform_int(5))) - 2.0;
      const double brightness = srng.uniform(0.9, 1.1);

      Tensor<float> img(shape);
      for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t x = 0; x < w; ++x) {
          const double xf = double(x) + dx, yf = double(y) + dy;
          const double u = (xf * ct + yf * st) / double(w);
          const double stripe = std::sin(kTwoPi * stripe_freq * u + stripe_phase);
          const double blob = std::sin(kTwoPi * blob_fx * xf / double(w) + blob_px) *
                              std::sin(kTwoPi * blob_fy * yf / double(h) + blob_py);
          const double intensity = (base_value + stripe_amp * stripe + blob_amp * blob) * brightness;
          for (std::int64_t ch = 0; ch < 3; ++ch) {
            const double v = rgb[ch] * intensity + 0.05 * srng.normal();
            img[ch * h * w + y * w + x] = float(std::clamp(v, 0.0, 1.0));
          }
        }
      }
      const auto sid = std::int32_t(data.samples.size());
      data.samples.push_back(
          Sample{std::move(img), std::int32_t(c), cls.name + "/" + std::to_string(s)});
      cls.sample_ids.push_back(sid);
    }
    data.index.classes.push_back(std::move(cls));
  }
  return data;
}

namespace {

SplitSpec finish_split(std::vector<std::int32_t> shuffled, std::size_t unseen_count,
                       double val_fraction, std::uint64_t seed) {
  SplitSpec spec;
  spec.seed = seed;
  spec.unseen.assign(shuffled.begin(), shuffled.begin() + std::ptrdiff_t(unseen_count));
  const std::size_t remaining = shuffled.size() - unseen_count;
  const auto val_count = std::size_t(std::floor(val_fraction * double(remaining)));
  spec.val.assign(shuffled.begin() + std::ptrdiff_t(unseen_count),
                  shuffled.begin() + std::ptrdiff_t(unseen_count + val_count));
  spec.seen.assign(shuffled.begin() + std::ptrdiff_t(unseen_count + val_count), shuffled.end());
  std::sort(spec.seen.begin(), spec.seen.end());
  std::sort(spec.unseen.begin(), spec.unseen.end());
  std::sort(spec.val.begin(), spec.val.end());
  return spec;
}

std::vector<std::int32_t> shuffled_class_ids(const DatasetIndex& index, std::uint64_t seed) {
  std::vector<std::int32_t> ids(index.classes.size());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = std::int32_t(i);
  Rng rng(derive_seed(seed, "split"));
  rng.shuffle(ids);
  return ids;
}

}  // namespace

SplitSpec split_classes(const DatasetIndex& index, int fold, double val_fraction,
                        std::uint64_t seed) {
  const std::size_t k = index.classes.size();
  if (k < 3) throw DataError("split_classes: need >= 3 classes, got " + std::to_string(k));
  if (fold < 0 || fold > 2) throw ConfigError("split_classes: fold must be 0, 1 or 2");
  if (val_fraction < 0.0 || val_fraction >= 1.0)
    throw ConfigError("split_classes: val_fraction must be in [0,1)");

  auto ids = shuffled_class_ids(index, seed);
  // Near-equal thirds; the first (k % 3) folds get one extra class.
  std::size_t sizes[3];
  for (int f = 0; f < 3; ++f) sizes[f] = k / 3 + (std::size_t(f) < k % 3 ? 1 : 0);
  std::size_t begin = 0;
  for (int f = 0; f < fold; ++f) begin += sizes[f];
  // Rotate the chosen fold to the front, keeping the others in shuffled order.
  std::vector<std::int32_t> arranged;
  arranged.reserve(k);
  arranged.insert(arranged.end(), ids.begin() + std::ptrdiff_t(begin),
                  ids.begin() + std::ptrdiff_t(begin + sizes[fold]));
  arranged.insert(arranged.end(), ids.begin(), ids.begin() + std::ptrdiff_t(begin));
  arranged.insert(arranged.end(), ids.begin() + std::ptrdiff_t(begin + sizes[fold]), ids.end());
  return finish_split(std::move(arranged), sizes[fold], val_fraction, seed);
}

SplitSpec split_by_counts(const DatasetIndex& index, std::int64_t unseen_count,
                          double val_fraction, std::uint64_t seed) {
  const auto k = std::int64_t(index.classes.size());
  if (unseen_count < 1 || unseen_count >= k)
    throw ConfigError("split_by_counts: unseen_count must be in [1, num_classes)");
  if (val_fraction < 0.0 || val_fraction >= 1.0)
    throw ConfigError("split_by_counts: val_fraction must be in [0,1)");
  return finish_split(shuffled_class_ids(index, seed), std::size_t(unseen_count), val_fraction,
                      seed);
}

std::string split_to_json(const SplitSpec& spec) {
  nlohmann::json j;
  j["seen"] = spec.seen;
  j["unseen"] = spec.unseen;
  j["val"] = spec.val;
  j["seed"] = spec.seed;
  return j.dump(2) + "\n";
}

SplitSpec split_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed split JSON: ") + e.what());
  }
  SplitSpec spec;
  try {
    spec.seen = j.at("seen").get<std::vector<std::int32_t>>();
    spec.unseen = j.at("unseen").get<std::vector<std::int32_t>>();
    spec.val = j.at("val").get<std::vector<std::int32_t>>();
    spec.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("split JSON missing field: ") + e.what());
  }
  std::set<std::int32_t> all;
  for (const auto* v : {&spec.seen, &spec.unseen, &spec.val})
    for (auto id : *v)
      if (!all.insert(id).second)
        throw DataError("split JSON: class " + std::to_string(id) + " appears in two sets");
  return spec;
}

ClassPool pool_from(const Dataset& data, const std::vector<std::int32_t>& class_ids) {
  ClassPool pool;
  for (auto id : class_ids) {
    if (id < 0 || id >= data.num_classes())
      throw DataError("pool_from: class id " + std::to_string(id) + " out of range");
    pool.entries.push_back({id, data.index.classes[std::size_t(id)].sample_ids});
  }
  std::sort(pool.entries.begin(), pool.entries.end(),
            [](const auto& a, const auto& b) { return a.class_id < b.class_id; });
  return pool;
}

ClassPool subsample_train(const ClassPool& pool, SubsampleMode mode, double ratio,
                          std::uint64_t seed, std::int64_t min_classes,
                          std::int64_t min_per_class) {
  if (!(ratio > 0.0 && ratio <= 1.0))
    throw ConfigError("subsample ratio must be in (0,1], got " + std::to_string(ratio));
  Rng rng(derive_seed(seed, "subsample"));
  ClassPool out;

  if (mode == SubsampleMode::kCategories) {
    std::vector<std::size_t> order(pool.entries.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    const auto keep = std::int64_t(std::floor(ratio * double(pool.entries.size())));
    if (keep < std::max<std::int64_t>(1, min_classes))
      throw DataError("categories subsample at ratio " + std::to_string(ratio) + " keeps " +
                      std::to_string(keep) + " classes, below the required " +
                      std::to_string(std::max<std::int64_t>(1, min_classes)));
    for (std::int64_t i = 0; i < keep; ++i) out.entries.push_back(pool.entries[order[std::size_t(i)]]);
    std::sort(out.entries.begin(), out.entries.end(),
              [](const auto& a, const auto& b) { return a.class_id < b.class_id; });
  } else {
    for (const auto& e : pool.entries) {
      auto ids = e.samples;
      rng.shuffle(ids);
      const auto keep = std::int64_t(std::floor(ratio * double(ids.size())));
      if (keep < std::max<std::int64_t>(1, min_per_class))
        throw DataError("scenes subsample at ratio " + std::to_string(ratio) + " keeps " +
                        std::to_string(keep) + " samples of class " + std::to_string(e.class_id) +
                        ", below the required " +
                        std::to_string(std::max<std::int64_t>(1, min_per_class)));
      ids.resize(std::size_t(keep));
      std::sort(ids.begin(), ids.end());
      out.entries.push_back({e.class_id, std::move(ids)});
    }
  }
  return out;
}

}  // namespace fewshot
