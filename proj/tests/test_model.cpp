#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "fewshot/checkpoint.hpp"
#include "fewshot/losses.hpp"
#include "fewshot/model.hpp"
#include "fewshot/optimizer.hpp"
#include "support/gradcheck.hpp"

using namespace fewshot;
using fewshot::testing::check_gradients;
using fewshot::testing::GradCheckOpts;
using fewshot::testing::random_tensor;

namespace {

template <typename S>
bool bitwise_equal(const Tensor<S>& a, const Tensor<S>& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data(), b.data(), sizeof(S) * std::size_t(a.numel())) == 0;
}

std::string temp_file(const char* stem) {
  return (std::filesystem::temp_directory_path() /
          (std::string(stem) + std::to_string(::getpid()) + ".mmck"))
      .string();
}

}  // namespace

TEST_CASE("embedding dimension and eval-mode purity") {
  CHECK(embedding_dim(32, 32) == 256);
  CHECK(embedding_dim(16, 16) == 64);

  auto params = init_model<float>(16, 16, 3, 9);
  Graph<float> g;
  BoundModel<float> bm = bind(g, params, false);
  Rng rng(31);
  Tensor<float> one = random_tensor({1, 3, 16, 16}, rng, 0.0, 1.0).cast<float>();
  Tensor<float> two({2, 3, 16, 16});
  std::memcpy(two.data(), one.data(), sizeof(float) * std::size_t(one.numel()));
  std::memcpy(two.data() + one.numel(), one.data(), sizeof(float) * std::size_t(one.numel()));
  Var<float> emb = embed(g, bm, g.leaf(two), BnMode::kEval);
  CHECK(emb.value().shape() == Shape{2, 64});
  for (std::int64_t j = 0; j < 64; ++j) CHECK(emb.value()[j] == emb.value()[64 + j]);

  SUBCASE("shape contract") {
    Var<float> bad = g.leaf(Tensor<float>({1, 3, 20, 16}));
    CHECK_THROWS_AS(embed(g, bm, bad, BnMode::kEval), ShapeError);
  }
}

TEST_CASE("embedding gradients match finite differences through all four blocks") {
  // Full phi check on a tiny instance; a seeded subsample of coordinates per
  // tensor keeps the runtime sane while touching every parameter tensor.
  auto params = init_model<double>(16, 16, 2, 5);
  std::vector<Tensor<double>> inputs;
  Rng rng(71);
  inputs.push_back(random_tensor({2, 3, 16, 16}, rng, 0.05, 1.0));
  params.visit([&](const std::string&, Tensor<double>& t, ParamKind kind) {
    if (kind != ParamKind::kBuffer) inputs.push_back(t);
  });

  auto res = check_gradients(
      inputs,
      [&](Graph<double>& g, const std::vector<Var<double>>& v) {
        BoundModel<double> bm;
        ModelParams<double> scratch = params;  // running stats live here per eval
        std::size_t next = 1;
        scratch.visit([&](const std::string& name, Tensor<double>& t, ParamKind kind) {
          if (kind == ParamKind::kBuffer) return;
          bm.entries.push_back({name, v[next], nullptr, kind});
          ++next;
        });
        for (std::int64_t b = 0; b < kNumBlocks; ++b) {
          const std::size_t e = std::size_t(b) * 4;
          bm.blocks.push_back({bm.entries[e].var, bm.entries[e + 1].var, bm.entries[e + 2].var,
                               bm.entries[e + 3].var, &scratch.blocks[std::size_t(b)].bn});
        }
        Var<double> emb = embed(g, bm, v[0], BnMode::kBatch);
        Tensor<double> w({2 * 64});
        Rng wr(73);
        for (std::int64_t i = 0; i < w.numel(); ++i) w[i] = wr.uniform(-1, 1);
        return sum(mul_elem(reshape(emb, {128}), g.leaf(w)));
      },
      GradCheckOpts{5e-6, 12, 0x77});
  CAPTURE(res.worst);
  CAPTURE(res.checked);
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("centroids are per-class means") {
  Graph<double> g;
  Var<double> f = g.leaf(Tensor<double>({2, 2}, {1.0, 0.0, 0.0, 1.0}));
  Var<double> c = compute_centroids(g, f, {0, 0}, 1);
  CHECK(c.value()[0] == 0.5);
  CHECK(c.value()[1] == 0.5);

  SUBCASE("one-shot centroid equals the single embedding") {
    Rng rng(3);
    Tensor<double> x = random_tensor({3, 4}, rng);
    Graph<double> g2;
    Var<double> cc = compute_centroids(g2, g2.leaf(x), {0, 1, 2}, 3);
    CHECK(bitwise_equal(cc.value(), x));
  }
  SUBCASE("random balanced episodes match the brute-force mean within 1e-12") {
    Rng rng(41);
    for (int trial = 0; trial < 20; ++trial) {
      const std::int64_t c_ways = 2 + std::int64_t(rng.uniform_int(4));
      const std::int64_t shots = 1 + std::int64_t(rng.uniform_int(5));
      const std::int64_t d = 3 + std::int64_t(rng.uniform_int(5));
      Tensor<double> feats = random_tensor({c_ways * shots, d}, rng, -5.0, 5.0);
      std::vector<std::int32_t> labels;
      for (std::int64_t k = 0; k < c_ways; ++k)
        for (std::int64_t s = 0; s < shots; ++s) labels.push_back(std::int32_t(k));
      Rng shuffle_rng(trial);
      shuffle_rng.shuffle(labels);
      Graph<double> g3;
      Var<double> cents = compute_centroids(g3, g3.leaf(feats), labels, c_ways);
      for (std::int64_t k = 0; k < c_ways; ++k)
        for (std::int64_t j = 0; j < d; ++j) {
          double mean = 0;
          std::int64_t n = 0;
          for (std::int64_t i = 0; i < c_ways * shots; ++i)
            if (labels[std::size_t(i)] == k) {
              mean += feats[i * d + j];
              ++n;
            }
          mean /= double(n);
          CHECK(std::abs(cents.value()[k * d + j] - mean) < 1e-12);
        }
    }
  }
  SUBCASE("the paper coefficient equals 1/S_tr exactly on balanced sets") {
    for (std::int64_t c_ways : {2, 3, 5, 7}) {
      for (std::int64_t shots : {1, 2, 3, 5, 7}) {
        const double coeff = double(c_ways) / double(c_ways * shots);
        CHECK(coeff == 1.0 / double(shots));
      }
    }
  }
  SUBCASE("unbalanced support is rejected") {
    Graph<double> g4;
    Var<double> f4 = g4.leaf(Tensor<double>({4, 2}));
    CHECK_THROWS_AS(compute_centroids(g4, f4, {0, 0, 0, 1}, 2), ShapeError);
  }
}

TEST_CASE("metric head with zero weights is constant, posterior uniform") {
  auto params = init_model<double>(16, 16, 2, 13);
  params.metric_hidden_w.set_zero();
  params.metric_hidden_b.set_zero();
  params.metric_out_w.set_zero();
  params.metric_out_b.fill(0.75);
  Graph<double> g;
  BoundModel<double> bm = bind(g, params, false);
  Rng rng(5);
  Var<double> q = g.leaf(random_tensor({4, 64}, rng));
  Var<double> c = g.leaf(random_tensor({3, 64}, rng));
  Var<double> s = metric_scores(g, bm, q, c);
  for (std::int64_t i = 0; i < s.value().numel(); ++i) CHECK(s.value()[i] == 0.75);

  Tensor<double> post = posterior_from_scores(s.value());
  for (std::int64_t i = 0; i < post.numel(); ++i)
    CHECK(post[i] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("metric score gradients match finite differences") {
  Rng rng(21);
  const std::int64_t d = 6, dh = 5;
  std::vector<Tensor<double>> in = {
      random_tensor({2, d}, rng),        // queries
      random_tensor({3, d}, rng),        // centroids
      random_tensor({dh, 3 * d}, rng),   // hidden w
      random_tensor({dh}, rng),          // hidden b
      random_tensor({1, dh}, rng),       // out w
      random_tensor({1}, rng),           // out b
  };
  auto res = check_gradients(in, [](Graph<double>& g, const std::vector<Var<double>>& v) {
    Var<double> pf = pair_features(v[0], v[1]);
    Var<double> hidden = relu(linear(pf, v[2], v[3]));
    Var<double> score = linear(hidden, v[4], v[5]);
    Tensor<double> w({6});
    Rng wr(23);
    for (std::int64_t i = 0; i < 6; ++i) w[i] = wr.uniform(-1, 1);
    return sum(mul_elem(reshape(score, {6}), g.leaf(w)));
  });
  CAPTURE(res.worst);
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("class posterior closed forms") {
  SUBCASE("uniform scores give 1/C") {
    Tensor<double> s = Tensor<double>::full({1, 4}, 2.5);
    Tensor<double> p = posterior_from_scores(s);
    for (int k = 0; k < 4; ++k) CHECK(p[k] == doctest::Approx(0.25).epsilon(1e-12));
  }
  SUBCASE("C=1 gives probability one") {
    Tensor<double> p = posterior_from_scores(Tensor<double>({1, 1}, {3.0}));
    CHECK(p[0] == doctest::Approx(1.0).epsilon(1e-15));
  }
  SUBCASE("scores (0, ln 3) give (0.75, 0.25)") {
    Tensor<double> p = posterior_from_scores(Tensor<double>({1, 2}, {0.0, std::log(3.0)}));
    CHECK(p[0] == doctest::Approx(0.75).epsilon(1e-12));
    CHECK(p[1] == doctest::Approx(0.25).epsilon(1e-12));
  }
  SUBCASE("rows sum to one within 1e-9") {
    Rng rng(9);
    Tensor<double> s = random_tensor({6, 5}, rng, -40.0, 40.0);
    Tensor<double> p = posterior_from_scores(s);
    for (std::int64_t i = 0; i < 6; ++i) {
      double acc = 0;
      for (std::int64_t k = 0; k < 5; ++k) acc += p[i * 5 + k];
      CHECK(std::abs(acc - 1.0) < 1e-9);
    }
  }
  SUBCASE("permuting centroid columns permutes the posterior") {
    // Equal up to summation rounding; the argmax relabels exactly.
    Rng rng(15);
    Tensor<double> s = random_tensor({3, 4}, rng);
    Tensor<double> perm({3, 4});
    const int p4[4] = {2, 0, 3, 1};
    for (std::int64_t i = 0; i < 3; ++i)
      for (std::int64_t k = 0; k < 4; ++k) perm[i * 4 + k] = s[i * 4 + p4[k]];
    Tensor<double> post = posterior_from_scores(s);
    Tensor<double> post_p = posterior_from_scores(perm);
    for (std::int64_t i = 0; i < 3; ++i)
      for (std::int64_t k = 0; k < 4; ++k)
        CHECK(post_p[i * 4 + k] == doctest::Approx(post[i * 4 + p4[k]]).epsilon(1e-14));
    const auto pred = predict_from_scores(s);
    const auto pred_p = predict_from_scores(perm);
    for (std::int64_t i = 0; i < 3; ++i) {
      // inverse permutation of the argmax
      CHECK(p4[pred_p[std::size_t(i)]] == pred[std::size_t(i)]);
    }
  }
}

TEST_CASE("fixed distances") {
  Tensor<double> q({2}, {1.0, 0.0});
  Tensor<double> o({2}, {0.0, 1.0});
  CHECK(fixed_distance(DistanceKind::kEuclidean, q, q) == 0.0);
  CHECK(fixed_distance(DistanceKind::kCosine, q, q) == 0.0);
  CHECK(fixed_distance(DistanceKind::kEuclidean, q, o) == 2.0);
  CHECK(fixed_distance(DistanceKind::kCosine, q, o) == 1.0);

  SUBCASE("float path matches an f64 recomputation within 1e-6") {
    Rng rng(77);
    for (int t = 0; t < 50; ++t) {
      Tensor<double> a = random_tensor({16}, rng, -2.0, 2.0);
      Tensor<double> b = random_tensor({16}, rng, -2.0, 2.0);
      Tensor<float> af = a.cast<float>(), bf = b.cast<float>();
      for (auto kind : {DistanceKind::kEuclidean, DistanceKind::kCosine}) {
        const double ref = fixed_distance(kind, af.cast<double>(), bf.cast<double>());
        const double got = double(fixed_distance(kind, af, bf));
        CHECK(std::abs(ref - got) / std::max(1.0, std::abs(ref)) < 1e-6);
      }
    }
  }
  SUBCASE("cosine on a zero vector is an error") {
    Tensor<double> z({2});
    CHECK_THROWS_AS(fixed_distance(DistanceKind::kCosine, z, o), NumericError);
  }
  SUBCASE("dimension mismatch") {
    Tensor<double> bad({3});
    CHECK_THROWS_AS(fixed_distance(DistanceKind::kEuclidean, q, bad), ShapeError);
  }
}

TEST_CASE("checkpoint round trip is bit identical") {
  auto params = init_model<float>(16, 16, 4, 3);
  // Move running stats off their init values so the buffer path is covered.
  params.blocks[0].bn.running_mean.fill(0.25f);
  params.blocks[2].bn.running_var.fill(2.0f);
  const std::string path = temp_file("ckpt");
  save_checkpoint(path, params);
  ModelParams<float> back = load_checkpoint<float>(path);

  bool all_equal = true;
  std::vector<std::pair<std::string, Tensor<float>*>> lhs, rhs;
  params.visit([&](const std::string& n, Tensor<float>& t, ParamKind) { lhs.emplace_back(n, &t); });
  back.visit([&](const std::string& n, Tensor<float>& t, ParamKind) { rhs.emplace_back(n, &t); });
  REQUIRE(lhs.size() == rhs.size());
  for (std::size_t i = 0; i < lhs.size(); ++i) {
    CHECK(lhs[i].first == rhs[i].first);
    all_equal = all_equal && bitwise_equal(*lhs[i].second, *rhs[i].second);
  }
  CHECK(all_equal);
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint defects are structured errors") {
  auto params = init_model<float>(16, 16, 21, 3);
  const std::string path = temp_file("ckpt_bad");
  save_checkpoint(path, params);

  SUBCASE("truncated file never yields a partial model") {
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), std::streamsize(bytes.size() / 2));
    out.close();
    CHECK_THROWS_AS(load_checkpoint<float>(path), DataError);
  }
  SUBCASE("aux head class-count mismatch names aux.weight") {
    ModelParams<float> loaded = load_checkpoint<float>(path);
    try {
      check_model_compat(loaded, 16, 16, 30);
      FAIL("expected DataError");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("aux.weight") != std::string::npos);
    }
    // 21 seen classes pass.
    check_model_compat(loaded, 16, 16, 21);
    // Wrong image geometry is caught too.
    CHECK_THROWS_AS(check_model_compat(loaded, 32, 32, 21), DataError);
  }
  std::filesystem::remove(path);
}

TEST_CASE("fit loss closed forms and oracle recomputation") {
  Graph<double> g;
  SUBCASE("uniform logits cost ln K") {
    Var<double> logits = g.leaf(Tensor<double>({3, 4}));
    Var<double> l = fit_loss(logits, {0, 1, 2});
    CHECK(l.value()[0] == doctest::Approx(std::log(4.0)).epsilon(1e-15));
  }
  SUBCASE("perfect prediction costs ~0") {
    Tensor<double> t({2, 3});
    t[0] = 400.0;
    t[3 + 2] = 400.0;
    Var<double> l = fit_loss(g.leaf(t), {0, 2});
    CHECK(std::abs(l.value()[0]) < 1e-12);
  }
  SUBCASE("random logits match a per-sample f64 recomputation") {
    Rng rng(61);
    Tensor<double> logits = random_tensor({7, 5}, rng, -3.0, 3.0);
    std::vector<std::int32_t> labels;
    for (int i = 0; i < 7; ++i) labels.push_back(std::int32_t(rng.uniform_int(5)));
    Var<double> l = fit_loss(g.leaf(logits), labels);
    double expect = 0;
    for (std::int64_t i = 0; i < 7; ++i) {
      double lse = 0, mx = -1e300;
      for (std::int64_t k = 0; k < 5; ++k) mx = std::max(mx, logits[i * 5 + k]);
      for (std::int64_t k = 0; k < 5; ++k) lse += std::exp(logits[i * 5 + k] - mx);
      expect -= logits[i * 5 + labels[std::size_t(i)]] - mx - std::log(lse);
    }
    expect /= 7.0;
    CHECK(l.value()[0] == doctest::Approx(expect).epsilon(1e-9));
  }
  SUBCASE("label out of range") {
    Var<double> logits = g.leaf(Tensor<double>({1, 3}));
    CHECK_THROWS_AS(fit_loss(logits, {5}), ShapeError);
  }
}

TEST_CASE("generalization loss from log posteriors") {
  Graph<double> g;
  SUBCASE("uniform posteriors over 5 classes cost ln 5") {
    Var<double> scores = g.leaf(Tensor<double>::full({4, 5}, 1.7));
    Var<double> lp = log_posteriors(g, scores);
    Var<double> l = generalization_loss(lp, {0, 1, 2, 3});
    CHECK(l.value()[0] == doctest::Approx(std::log(5.0)).epsilon(1e-12));
  }
  SUBCASE("certain posteriors cost 0") {
    Tensor<double> scores({2, 3});
    scores[0] = -500.0;
    scores[3 + 1] = -500.0;
    Var<double> l = generalization_loss(log_posteriors(g, g.leaf(scores)), {0, 1});
    CHECK(std::abs(l.value()[0]) < 1e-12);
  }
  SUBCASE("shift invariance of the scores") {
    Rng rng(67);
    Tensor<double> s = random_tensor({3, 4}, rng);
    Tensor<double> shifted = s;
    for (std::int64_t i = 0; i < 12; ++i) shifted[i] += 7.5;
    Graph<double> g2;
    Var<double> a = generalization_loss(log_posteriors(g2, g2.leaf(s)), {1, 0, 3});
    Var<double> b = generalization_loss(log_posteriors(g2, g2.leaf(shifted)), {1, 0, 3});
    CHECK(std::abs(a.value()[0] - b.value()[0]) < 1e-12);
  }
}

TEST_CASE("balance loss composition") {
  Graph<double> g;
  Var<double> lg = g.leaf(Tensor<double>::scalar(1.0), true);
  Var<double> lce = g.leaf(Tensor<double>::scalar(2.0), true);

  SUBCASE("lambda 0.1 gives 1.2") {
    Var<double> l = balance_loss(lg, lce, LossConfig{0.1});
    CHECK(l.value()[0] == doctest::Approx(1.2).epsilon(1e-15));
  }
  SUBCASE("lambda 0 is bit-exactly L_g and stops the fit gradient") {
    Var<double> l = balance_loss(lg, lce, LossConfig{0.0});
    CHECK(std::memcmp(l.value().data(), lg.value().data(), sizeof(double)) == 0);
    g.backward(l);
    CHECK(lg.grad()[0] == 1.0);
    CHECK(lce.grad()[0] == 0.0);
  }
  SUBCASE("lambda 1 sums the losses") {
    Var<double> l = balance_loss(lg, lce, LossConfig{1.0});
    CHECK(l.value()[0] == 3.0);
  }
  SUBCASE("lambda outside [0,1] is rejected") {
    CHECK_THROWS_AS(balance_loss(lg, lce, LossConfig{1.5}), ConfigError);
    CHECK_THROWS_AS(balance_loss(lg, lce, LossConfig{-0.1}), ConfigError);
  }
}

TEST_CASE("balance gradient is grad(L_g) + lambda * grad(L_CE)") {
  Rng rng(83);
  const double lambda = 0.3;
  Tensor<double> scores = random_tensor({4, 3}, rng);
  Tensor<double> logits = random_tensor({4, 6}, rng);
  const std::vector<std::int32_t> qlab = {0, 2, 1, 0};
  const std::vector<std::int32_t> slab = {5, 1, 3, 0};

  auto run = [&](int which) {  // 0: L_bal, 1: L_g, 2: L_CE
    Graph<double> g;
    Var<double> sv = g.leaf(scores, true);
    Var<double> lv = g.leaf(logits, true);
    Var<double> lg = generalization_loss(log_posteriors(g, sv), qlab);
    Var<double> lce = fit_loss(lv, slab);
    Var<double> loss = which == 0 ? balance_loss(lg, lce, LossConfig{lambda})
                                  : (which == 1 ? lg : lce);
    g.backward(loss);
    return std::make_pair(sv.grad(), lv.grad());
  };
  auto [ds_bal, dl_bal] = run(0);
  auto [ds_g, dl_g] = run(1);
  auto [ds_ce, dl_ce] = run(2);
  for (std::int64_t i = 0; i < ds_bal.numel(); ++i)
    CHECK(std::abs(ds_bal[i] - (ds_g[i] + lambda * ds_ce[i])) < 1e-10);
  for (std::int64_t i = 0; i < dl_bal.numel(); ++i)
    CHECK(std::abs(dl_bal[i] - (dl_g[i] + lambda * dl_ce[i])) < 1e-10);
}

TEST_CASE("sgd optimizer") {
  SUBCASE("vanilla step") {
    Tensor<double> p({2}, {1.0, -2.0});
    Tensor<double> g({2}, {0.5, 0.25});
    SgdOptimizer<double> opt(0.0, 0.0);
    opt.step({{&p, &g, true}}, 0.1);
    CHECK(p[0] == doctest::Approx(1.0 - 0.1 * 0.5).epsilon(1e-15));
    CHECK(p[1] == doctest::Approx(-2.0 - 0.1 * 0.25).epsilon(1e-15));
  }
  SUBCASE("zero gradient with weight decay shrinks by (1 - lr*wd)") {
    Tensor<double> p({1}, {4.0});
    Tensor<double> g({1}, {0.0});
    SgdOptimizer<double> opt(0.0, 0.0005);
    double expect = 4.0;
    for (int i = 0; i < 3; ++i) {
      opt.step({{&p, &g, true}}, 0.01);
      expect *= (1.0 - 0.01 * 0.0005);
    }
    CHECK(p[0] == doctest::Approx(expect).epsilon(1e-12));
  }
  SUBCASE("no-decay tensors skip the decay term") {
    Tensor<double> p({1}, {4.0});
    Tensor<double> g({1}, {0.0});
    SgdOptimizer<double> opt(0.0, 0.1);
    opt.step({{&p, &g, false}}, 0.5);
    CHECK(p[0] == 4.0);
  }
  SUBCASE("momentum matches the hand-unrolled recurrence") {
    Tensor<double> p({1}, {1.0});
    Tensor<double> g1({1}, {0.2});
    Tensor<double> g2({1}, {-0.1});
    SgdOptimizer<double> opt(0.9, 0.0);
    opt.step({{&p, &g1, true}}, 0.1);
    opt.step({{&p, &g2, true}}, 0.1);
    // v1 = 0.2; p1 = 1 - 0.1*0.2 = 0.98
    // v2 = 0.9*0.2 - 0.1 = 0.08; p2 = 0.98 - 0.1*0.08 = 0.972
    CHECK(std::abs(p[0] - 0.972) < 1e-12);
  }
}
