#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "fewshot/dataset.hpp"
#include "fewshot/episode.hpp"
#include "fewshot/ppm.hpp"
#include "fewshot/tensor_io.hpp"

using namespace fewshot;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("fewshot_test_" + std::to_string(::getpid()) + "_" +
                                        std::to_string(counter()++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  static int& counter() {
    static int c = 0;
    return c;
  }
};

bool same_bytes(const Tensor<float>& a, const Tensor<float>& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data(), b.data(), sizeof(float) * std::size_t(a.numel())) == 0;
}

bool same_store(const Dataset& a, const Dataset& b) {
  if (a.samples.size() != b.samples.size()) return false;
  for (std::size_t i = 0; i < a.samples.size(); ++i)
    if (!same_bytes(a.samples[i].image, b.samples[i].image) ||
        a.samples[i].class_id != b.samples[i].class_id)
      return false;
  return true;
}

}  // namespace

TEST_CASE("ppm round trip and scaling") {
  TempDir tmp;
  Tensor<float> img({3, 2, 2});
  img[0] = 1.0f;  // red channel of pixel (0,0): byte 255
  const auto file = (tmp.path / "a.ppm").string();
  write_ppm(file, img);
  Tensor<float> back = read_ppm(file);
  CHECK(back.shape() == Shape{3, 2, 2});
  CHECK(back[0] == 1.0f);           // (255,0,0) -> (1,0,0)
  CHECK(back[4] == 0.0f);
  CHECK(back[8] == 0.0f);

  SUBCASE("quantized values survive a second round trip exactly") {
    write_ppm(file, back);
    CHECK(same_bytes(read_ppm(file), back));
  }
  SUBCASE("malformed header errors") {
    std::ofstream f(file, std::ios::binary);
    f << "P5\n2 2\n255\n";
    f.close();
    CHECK_THROWS_AS(read_ppm(file), DataError);
  }
}

TEST_CASE("load_directory catalogs classes lexicographically") {
  TempDir tmp;
  Tensor<float> img({3, 4, 4});
  for (const char* cls : {"beta", "alpha"}) {
    fs::create_directories(tmp.path / cls);
    for (int i = 0; i < 3; ++i) {
      img[0] = float(i) / 3.0f;
      write_ppm((tmp.path / cls / ("s" + std::to_string(i) + ".ppm")).string(), img);
    }
  }
  Dataset data = load_directory(tmp.path.string());
  REQUIRE(data.num_classes() == 2);
  CHECK(data.index.classes[0].name == "alpha");
  CHECK(data.index.classes[1].name == "beta");
  CHECK(data.samples.size() == 6);
  CHECK(data.index.image_shape == Shape{3, 4, 4});
  for (auto sid : data.index.classes[0].sample_ids) CHECK(data.sample(sid).class_id == 0);

  SUBCASE("empty class directory is named in the error") {
    fs::create_directories(tmp.path / "empty_one");
    try {
      load_directory(tmp.path.string());
      FAIL("expected DataError");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("empty_one") != std::string::npos);
    }
  }
  SUBCASE("mixed shapes error without resize, load with resize") {
    fs::create_directories(tmp.path / "gamma");
    Tensor<float> big({3, 8, 6});
    write_ppm((tmp.path / "gamma" / "s.ppm").string(), big);
    CHECK_THROWS_AS(load_directory(tmp.path.string()), DataError);
    Dataset resized = load_directory(tmp.path.string(), Shape{3, 4, 4});
    CHECK(resized.index.image_shape == Shape{3, 4, 4});
    CHECK(resized.samples.size() == 7);
  }
  SUBCASE("unsupported extension is rejected") {
    std::ofstream((tmp.path / "alpha" / "junk.png").string()).put('x');
    CHECK_THROWS_AS(load_directory(tmp.path.string()), DataError);
  }
  SUBCASE("fewer than two classes is rejected") {
    TempDir solo;
    fs::create_directories(solo.path / "only");
    write_ppm((solo.path / "only" / "s.ppm").string(), img);
    CHECK_THROWS_AS(load_directory(solo.path.string()), DataError);
  }
}

TEST_CASE("mmtn ingestion round trips bit-identically") {
  TempDir tmp;
  Dataset synth = generate_synthetic(2, 3, {3, 8, 8}, 99);
  for (std::int64_t c = 0; c < 2; ++c) {
    fs::create_directories(tmp.path / synth.index.classes[std::size_t(c)].name);
    for (auto sid : synth.index.classes[std::size_t(c)].sample_ids)
      save_mmtn((tmp.path / synth.index.classes[std::size_t(c)].name /
                 (std::to_string(sid) + ".mmtn"))
                    .string(),
                synth.sample(sid).image);
  }
  Dataset back = load_directory(tmp.path.string());
  CHECK(same_store(synth, back));
}

TEST_CASE("synthetic generator determinism and contracts") {
  const Shape shape{3, 16, 16};
  Dataset a = generate_synthetic(4, 5, shape, 7);
  Dataset b = generate_synthetic(4, 5, shape, 7);
  CHECK(same_store(a, b));
  CHECK(a.samples.size() == 20);

  Dataset c = generate_synthetic(4, 5, shape, 8);
  CHECK(!same_store(a, c));

  for (const auto& s : a.samples)
    for (std::int64_t i = 0; i < s.image.numel(); ++i) {
      CHECK(s.image[i] >= 0.0f);
      CHECK(s.image[i] <= 1.0f);
    }

  CHECK_THROWS_AS(generate_synthetic(4, 1, shape, 7), DataError);
  CHECK_THROWS_AS(generate_synthetic(1, 5, shape, 7), DataError);
}

TEST_CASE("synthetic classes are tighter within than across") {
  Dataset data = generate_synthetic(8, 12, {3, 16, 16}, 21);
  Rng rng(55);
  auto dist = [&](const Sample& x, const Sample& y) {
    double acc = 0;
    for (std::int64_t i = 0; i < x.image.numel(); ++i) {
      const double d = double(x.image[i]) - double(y.image[i]);
      acc += d * d;
    }
    return std::sqrt(acc / double(x.image.numel()));
  };
  double intra = 0, cross = 0;
  int n_intra = 0, n_cross = 0;
  for (int t = 0; t < 1000; ++t) {
    const auto i = rng.uniform_int(data.samples.size());
    const auto j = rng.uniform_int(data.samples.size());
    if (i == j) continue;
    const double d = dist(data.samples[i], data.samples[j]);
    if (data.samples[i].class_id == data.samples[j].class_id) {
      intra += d;
      ++n_intra;
    } else {
      cross += d;
      ++n_cross;
    }
  }
  REQUIRE(n_intra > 20);
  REQUIRE(n_cross > 20);
  CHECK(intra / n_intra < cross / n_cross);
}

TEST_CASE("split_classes partitions into disjoint folds") {
  Dataset data = generate_synthetic(45, 2, {3, 16, 16}, 4);
  SplitSpec s0 = split_classes(data.index, 0, 0.0, 11);
  CHECK(s0.unseen.size() == 15);
  CHECK(s0.seen.size() == 30);
  CHECK(s0.val.empty());

  SplitSpec s1 = split_classes(data.index, 1, 0.0, 11);
  SplitSpec s2 = split_classes(data.index, 2, 0.0, 11);
  std::set<std::int32_t> all;
  for (const auto* spec : {&s0, &s1, &s2})
    for (auto id : spec->unseen) CHECK(all.insert(id).second);  // pairwise disjoint
  CHECK(all.size() == 45);                                      // union covers everything

  SUBCASE("same seed is reproducible") {
    SplitSpec again = split_classes(data.index, 0, 0.0, 11);
    CHECK(again.seen == s0.seen);
    CHECK(again.unseen == s0.unseen);
  }
  SUBCASE("val fraction carves from the seen side only") {
    SplitSpec v = split_classes(data.index, 0, 0.25, 11);
    CHECK(v.unseen == s0.unseen);
    CHECK(v.val.size() == 7);  // floor(0.25 * 30)
    CHECK(v.seen.size() == 23);
  }
  SUBCASE("too few classes") {
    Dataset tiny = generate_synthetic(2, 2, {3, 16, 16}, 4);
    CHECK_THROWS_AS(split_classes(tiny.index, 0, 0.0, 1), DataError);
  }
}

TEST_CASE("split JSON round trip rejects overlaps") {
  Dataset data = generate_synthetic(6, 2, {3, 16, 16}, 4);
  SplitSpec s = split_by_counts(data.index, 2, 0.0, 3);
  SplitSpec back = split_from_json(split_to_json(s));
  CHECK(back.seen == s.seen);
  CHECK(back.unseen == s.unseen);
  CHECK(back.val == s.val);
  CHECK(back.seed == s.seed);

  CHECK_THROWS_AS(split_from_json(R"({"seen":[1,2],"unseen":[2],"val":[],"seed":1})"), DataError);
  CHECK_THROWS_AS(split_from_json("not json"), DataError);
}

TEST_CASE("subsample keeps floor(ratio * n)") {
  Dataset data = generate_synthetic(21, 6, {3, 16, 16}, 42);
  SplitSpec split = split_classes(data.index, 0, 0.0, 9);
  REQUIRE(split.seen.size() == 14);
  ClassPool pool = pool_from(data, split.seen);

  SUBCASE("categories 0.2 of 14 seen classes keeps 2") {
    ClassPool cut = subsample_train(pool, SubsampleMode::kCategories, 0.2, 5, 2);
    CHECK(cut.size() == 2);
  }
  SUBCASE("categories below the episode floor errors") {
    CHECK_THROWS_AS(subsample_train(pool, SubsampleMode::kCategories, 0.2, 5, 5), DataError);
  }
  SUBCASE("ratio 1.0 is the identity") {
    ClassPool same = subsample_train(pool, SubsampleMode::kCategories, 1.0, 5);
    REQUIRE(same.size() == pool.size());
    for (std::size_t i = 0; i < same.entries.size(); ++i) {
      CHECK(same.entries[i].class_id == pool.entries[i].class_id);
      CHECK(same.entries[i].samples == pool.entries[i].samples);
    }
    ClassPool scenes = subsample_train(pool, SubsampleMode::kScenes, 1.0, 5);
    for (std::size_t i = 0; i < scenes.entries.size(); ++i)
      CHECK(scenes.entries[i].samples == pool.entries[i].samples);
  }
  SUBCASE("scenes 0.5 of 6 keeps 3 per class") {
    ClassPool cut = subsample_train(pool, SubsampleMode::kScenes, 0.5, 5, 0, 2);
    for (const auto& e : cut.entries) CHECK(e.samples.size() == 3);
  }
  SUBCASE("scenes below S_tr+1 errors") {
    CHECK_THROWS_AS(subsample_train(pool, SubsampleMode::kScenes, 0.5, 5, 0, 4), DataError);
  }
  SUBCASE("out-of-range ratio errors") {
    CHECK_THROWS_AS(subsample_train(pool, SubsampleMode::kCategories, 0.0, 5), ConfigError);
    CHECK_THROWS_AS(subsample_train(pool, SubsampleMode::kCategories, 1.5, 5), ConfigError);
  }
}

TEST_CASE("episode layout matches the spec") {
  Dataset data = generate_synthetic(7, 20, {3, 16, 16}, 1);
  ClassPool pool = pool_from(data, {0, 1, 2, 3, 4, 5, 6});
  Rng rng(2);
  Episode ep = build_episode(pool, {5, 1, 5, 15}, rng);
  CHECK(ep.support.size() == 5);
  CHECK(ep.query.size() == 75);

  const auto sup = ep.support_ids();
  std::set<std::int32_t> sup_ids(sup.begin(), sup.end());
  for (auto qid : ep.query_ids()) CHECK(sup_ids.count(qid) == 0);

  SUBCASE("class_map is injective and labels are local") {
    std::set<std::int32_t> globals(ep.class_map.begin(), ep.class_map.end());
    CHECK(globals.size() == 5);
    for (auto [sid, lab] : ep.support) CHECK(data.sample(sid).class_id == ep.class_map[std::size_t(lab)]);
    for (auto [sid, lab] : ep.query) CHECK(data.sample(sid).class_id == ep.class_map[std::size_t(lab)]);
  }
}

TEST_CASE("two classes, two samples each: the forced partition") {
  Dataset data = generate_synthetic(2, 2, {3, 16, 16}, 3);
  ClassPool pool = pool_from(data, {0, 1});
  Rng rng(5);
  Episode ep = build_episode(pool, {2, 1, 2, 1}, rng);
  std::set<std::int32_t> seen;
  for (auto [sid, lab] : ep.support) seen.insert(sid);
  for (auto [sid, lab] : ep.query) seen.insert(sid);
  CHECK(seen.size() == 4);  // support + query exhaust the dataset, disjointly
}

TEST_CASE("episode invariants hold over 1000 draws") {
  Dataset data = generate_synthetic(9, 8, {3, 16, 16}, 13);
  std::vector<std::int32_t> ids;
  for (std::int32_t i = 0; i < 9; ++i) ids.push_back(i);
  ClassPool pool = pool_from(data, ids);
  const EpisodeSpec spec{4, 2, 3, 2};
  EpisodeStream stream(pool, spec, 77);
  for (int t = 0; t < 1000; ++t) {
    Episode ep = stream.at(t);
    REQUIRE(ep.support.size() == 8);
    REQUIRE(ep.query.size() == 6);
    const auto sup_v = ep.support_ids();
    std::set<std::int32_t> sup(sup_v.begin(), sup_v.end());
    REQUIRE(sup.size() == 8);
    for (auto qid : ep.query_ids()) REQUIRE(sup.count(qid) == 0);
    std::vector<int> sup_counts(4, 0), qry_counts(4, 0);
    for (auto l : ep.support_labels()) sup_counts[std::size_t(l)]++;
    for (auto l : ep.query_labels()) qry_counts[std::size_t(l)]++;
    for (int k = 0; k < 4; ++k) REQUIRE(sup_counts[k] == 2);
    int query_classes = 0;
    for (int k = 0; k < 4; ++k) {
      REQUIRE((qry_counts[k] == 0 || qry_counts[k] == 2));
      if (qry_counts[k] > 0) ++query_classes;
    }
    REQUIRE(query_classes == 3);
  }
}

TEST_CASE("episode streams are deterministic") {
  Dataset data = generate_synthetic(6, 10, {3, 16, 16}, 17);
  ClassPool pool = pool_from(data, {0, 1, 2, 3, 4, 5});
  auto a = episode_stream(pool, {3, 1, 3, 2}, 20, 42);
  auto b = episode_stream(pool, {3, 1, 3, 2}, 20, 42);
  REQUIRE(a.size() == 20);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].support == b[i].support);
    CHECK(a[i].query == b[i].query);
    CHECK(a[i].class_map == b[i].class_map);
  }
  CHECK(episode_stream(pool, {3, 1, 3, 2}, 0, 42).empty());
}

TEST_CASE("class selection is near-uniform over many episodes") {
  Dataset data = generate_synthetic(7, 20, {3, 16, 16}, 19);
  ClassPool pool = pool_from(data, {0, 1, 2, 3, 4, 5, 6});
  const EpisodeSpec spec{5, 1, 5, 3};
  EpisodeStream stream(pool, spec, 4242);
  std::vector<std::int64_t> counts(7, 0);
  const std::int64_t trials = 10000;
  for (std::int64_t t = 0; t < trials; ++t)
    for (auto g : stream.at(t).class_map) counts[std::size_t(g)]++;

  const double p = 5.0 / 7.0;
  const double mu = double(trials) * p;
  const double sigma = std::sqrt(double(trials) * p * (1.0 - p));
  for (int c = 0; c < 7; ++c) {
    CAPTURE(c);
    CHECK(std::abs(double(counts[std::size_t(c)]) - mu) < 5.0 * sigma);
    CHECK(counts[std::size_t(c)] > 0);  // coupon collector at these sizes
  }
}

TEST_CASE("episode construction errors name the shortfall") {
  Dataset data = generate_synthetic(3, 3, {3, 16, 16}, 23);
  ClassPool pool = pool_from(data, {0, 1, 2});
  Rng rng(1);
  CHECK_THROWS_AS(build_episode(pool, {5, 1, 5, 1}, rng), DataError);
  CHECK_THROWS_AS(build_episode(pool, {2, 4, 2, 1}, rng), DataError);
  CHECK_THROWS_AS(build_episode(pool, {2, 1, 2, 5}, rng), DataError);
  CHECK_THROWS_AS(build_episode(pool, {2, 1, 3, 1}, rng), ConfigError);  // Q > C
}
