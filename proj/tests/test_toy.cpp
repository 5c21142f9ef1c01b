#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>

#include "metric_oracle.hpp"
#include "sil/toy.hpp"

using namespace sil::toy;
using sil::Box;
using sil::Tensor2f;

namespace {

BenchSpec small_spec() {
  BenchSpec s;
  s.scene.height = s.scene.width = 10;
  s.scene.min_entities = s.scene.max_entities = 3;
  s.scene.min_box = 4;
  s.scene.max_box = 5;
  s.train.epochs = 3;
  s.train.train_scenes = 4;
  s.train.eval_scenes = 4;
  s.train.ks = {5, 20};
  auto& st = s.sil.stages[0];
  st.centers_x = st.centers_y = 3;
  st.layers = 1;
  st.mlp_hidden = 8;
  return s;
}

}  // namespace

TEST(Scene, FixedBoxesGiveLeftOf) {
  SceneSpec spec;
  spec.height = 6;
  spec.width = 10;
  spec.fixed = {{{0, 1, 3, 4}, 0, false}, {{5, 2, 8, 5}, 1, false}};
  sil::Rng rng(1);
  const auto s = synth_scene(rng, spec);
  EXPECT_EQ(s.gt, (std::vector<Triplet>{{0, left_of, 1}}));
  EXPECT_EQ(s.grid.depth, spec.depth());
  EXPECT_EQ(s.entities[1].class_id, 1);
}

TEST(Scene, PredicatePrecedence) {
  const std::vector<Box> boxes{{0, 0, 2, 2}, {1, 1, 3, 3}, {0, 4, 2, 6}, {4, 4, 6, 6}};
  EXPECT_EQ(derive_predicate(boxes, {false, false, false, false}, 0, 1), overlaps);
  EXPECT_EQ(derive_predicate(boxes, {true, false, false, false}, 0, 1), contains_marker);
  EXPECT_EQ(derive_predicate(boxes, {false, false, false, false}, 0, 2), above);
  EXPECT_EQ(derive_predicate(boxes, {false, false, false, false}, 2, 0), std::nullopt);
  EXPECT_EQ(derive_predicate(boxes, {false, false, false, false}, 1, 2), above);
  EXPECT_EQ(derive_predicate(boxes, {false, false, false, false}, 0, 3), std::nullopt);
  EXPECT_EQ(derive_predicate(boxes, {true, true, true, true}, 1, 1), std::nullopt);
}

TEST(Scene, ZeroEntities) {
  SceneSpec spec;
  spec.min_entities = spec.max_entities = 0;
  sil::Rng rng(2);
  const auto s = synth_scene(rng, spec);
  EXPECT_TRUE(s.entities.empty());
  EXPECT_TRUE(s.gt.empty());
}

TEST(Scene, SeedDeterminism) {
  SceneSpec spec;
  sil::Rng a(3), b(3);
  const auto x = synth_scene(a, spec), y = synth_scene(b, spec);
  EXPECT_EQ(x.grid.features, y.grid.features);
  EXPECT_EQ(x.gt, y.gt);
  EXPECT_EQ(x.has_marker, y.has_marker);
}

TEST(Scene, LabelsAgreeWithGeometry) {
  SceneSpec spec;
  const int ch_marker = spec.classes + 2;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    sil::Rng rng(seed);
    const auto s = synth_scene(rng, spec);
    const auto n = static_cast<int>(s.entities.size());
    std::vector<Triplet> want;
    for (int a = 0; a < n; ++a)
      for (int b = 0; b < n; ++b) {
        if (a == b) continue;
        const Box &p = s.entities[a].box, &q = s.entities[b].box;
        const bool ox = p.x1 < q.x2 && q.x1 < p.x2, oy = p.y1 < q.y2 && q.y1 < p.y2;
        if (s.has_marker[a]) want.push_back({a, contains_marker, b});
        else if (ox && oy) want.push_back({a, overlaps, b});
        else if (oy && p.x2 <= q.x1) want.push_back({a, left_of, b});
        else if (ox && p.y2 <= q.y1) want.push_back({a, above, b});
      }
    ASSERT_EQ(s.gt, want);

    for (int k = 0; k < n; ++k) {
      const Box& b = s.entities[k].box;
      double sum = 0, peak = 0;
      for (int y = 0; y < spec.height; ++y)
        for (int x = 0; x < spec.width; ++x) {
          const float v = s.grid.features(y * spec.width + x, ch_marker);
          if (b.contains({x + 0.5, y + 0.5})) {
            sum += v;
            peak = std::max(peak, double(v));
          }
        }
      // the marker is only visible below box resolution
      if (s.has_marker[k]) {
        ASSERT_GT(peak, 0.5);
        ASSERT_NEAR(s.entities[k].g(0, ch_marker), 0.0, 1e-5);
      }
      ASSERT_NEAR(sum, 0.0, 1e-3);
    }
  }
}

TEST(Predict, OneEntityGivesNothing) {
  EXPECT_TRUE(predict_relations(Tensor2f::Ones(1, 3), RelationHead::zeros(3)).items.empty());
}

TEST(Predict, ZeroHeadTiesBreakByIndex) {
  const auto p = predict_relations(Tensor2f::Ones(3, 2), RelationHead::zeros(2));
  ASSERT_EQ(p.items.size(), 24u);
  for (const auto& s : p.items) EXPECT_DOUBLE_EQ(s.score, 0.25);
  EXPECT_EQ(p.items[0].t, (Triplet{0, 0, 1}));
  EXPECT_EQ(p.items[3].t, (Triplet{0, 3, 1}));
  EXPECT_EQ(p.items[4].t, (Triplet{0, 0, 2}));
  EXPECT_EQ(p.items[23].t, (Triplet{2, 3, 1}));
}

TEST(Predict, MatchesDirectEnumeration) {
  sil::Rng rng(4);
  const Tensor2f f = rng.uniform_tensor<float>(3, 4, -1, 1);
  const auto head = RelationHead::random(4, rng);
  const auto p = predict_relations(f, head);
  std::map<Triplet, double> want;
  for (int s = 0; s < 3; ++s)
    for (int o = 0; o < 3; ++o) {
      if (s == o) continue;
      std::vector<double> z(4);
      for (int c = 0; c < 4; ++c) {
        double acc = head.bias(0, c);
        for (int j = 0; j < 4; ++j) acc += double(f(s, j)) * head.weight(j, c) + double(f(o, j)) * head.weight(4 + j, c);
        z[c] = acc;
      }
      const double m = *std::max_element(z.begin(), z.end());
      double den = 0;
      for (double v : z) den += std::exp(v - m);
      for (int c = 0; c < 4; ++c) want[{s, c, o}] = std::exp(z[c] - m) / den;
    }
  ASSERT_EQ(p.items.size(), want.size());
  for (std::size_t i = 0; i < p.items.size(); ++i) {
    EXPECT_NEAR(p.items[i].score, want[p.items[i].t], 1e-6);
    if (i) EXPECT_GE(p.items[i - 1].score, p.items[i].score);
  }
}

TEST(Recall, TwoOfThree) {
  PredictionSet p;
  p.items = {{{0, 0, 1}, 0.9}, {{1, 2, 0}, 0.8}, {{0, 1, 1}, 0.7}, {{1, 3, 0}, 0.1}};
  const std::vector<Triplet> gt{{0, 0, 1}, {0, 1, 1}, {1, 3, 0}};
  EXPECT_DOUBLE_EQ(recall_at_k(p, gt, 3), 2.0 / 3);
  EXPECT_DOUBLE_EQ(recall_at_k(p, gt, 1), 1.0 / 3);
  EXPECT_DOUBLE_EQ(recall_at_k(p, gt, 100), 1.0);
  EXPECT_DOUBLE_EQ(recall_at_k(p, {}, 1), 1.0);
  EXPECT_THROW(recall_at_k(p, gt, 0), sil::ArgumentError);
}

TEST(Recall, MatchesBruteForce) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    sil::Rng rng(seed);
    const int classes = rng.between(1, 3);
    const auto img = oracle::random_fixture(rng, classes);
    for (int k : {1, 2, 5, 10, 50}) ASSERT_EQ(recall_at_k(img.preds, img.gt, k), oracle::recall(img.preds, img.gt, k));
  }
}

TEST(MeanRecall, HandExample) {
  ImageEval a;
  a.preds.items = {{{0, 0, 1}, 0.9}, {{0, 1, 1}, 0.5}, {{1, 0, 0}, 0.4}};
  a.gt = {{0, 0, 1}, {1, 0, 0}, {0, 1, 1}};
  // K=1: class 0 hits 1/2, class 1 hits 0/1
  const auto m = mean_recall_at_k({a}, 1, 2);
  EXPECT_DOUBLE_EQ(*m.per_class[0], 0.5);
  EXPECT_DOUBLE_EQ(*m.per_class[1], 0.0);
  EXPECT_DOUBLE_EQ(m.mean, 0.25);
  EXPECT_DOUBLE_EQ(m.recall, 1.0 / 3);
}

TEST(MeanRecall, AbsentClassIsSkipped) {
  ImageEval a;
  a.preds.items = {{{0, 0, 1}, 0.9}};
  a.gt = {{0, 0, 1}};
  const auto m = mean_recall_at_k({a}, 1, 4);
  EXPECT_FALSE(m.per_class[2].has_value());
  EXPECT_DOUBLE_EQ(m.mean, 1.0);
}

TEST(MeanRecall, PooledAndPerImageDiffer) {
  ImageEval a, b;
  a.preds.items = {{{0, 0, 1}, 0.9}};
  a.gt = {{0, 0, 1}};
  b.preds.items = {{{0, 0, 1}, 0.9}, {{1, 0, 0}, 0.8}, {{1, 0, 2}, 0.7}};
  b.gt = {{1, 0, 2}, {2, 0, 1}};
  // pooled: 1 of 3 class-0 triplets; per image: mean(1, 0)
  EXPECT_DOUBLE_EQ(*mean_recall_at_k({a, b}, 2, 1, RecallAggregation::pooled).per_class[0], 1.0 / 3);
  EXPECT_DOUBLE_EQ(*mean_recall_at_k({a, b}, 2, 1, RecallAggregation::per_image).per_class[0], 0.5);
}

TEST(MeanRecall, MatchesBruteForceAndIsMonotone) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    sil::Rng rng(seed + 100);
    const int classes = rng.between(1, 3);
    std::vector<ImageEval> images;
    for (int i = rng.between(1, 4); i > 0; --i) images.push_back(oracle::random_fixture(rng, classes));
    double prev = 0;
    for (int k = 1; k <= 40; ++k) {
      const auto m = mean_recall_at_k(images, k, classes);
      ASSERT_EQ(m.mean, oracle::mean_recall(images, k, classes));
      ASSERT_GE(m.mean, prev);
      prev = m.mean;
    }
  }
}

TEST(MeanRecall, SingleClassSingleImageEqualsRecall) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    sil::Rng rng(seed + 200);
    auto img = oracle::random_fixture(rng, 1);
    if (img.gt.empty()) continue;
    for (int k : {1, 3, 7}) EXPECT_DOUBLE_EQ(mean_recall_at_k({img}, k, 1).mean, recall_at_k(img.preds, img.gt, k));
  }
}

TEST(Train, ZeroLearningRateKeepsLossConstant) {
  auto spec = small_spec();
  spec.sil.stages[0].dropout = 0;
  spec.train.lr = 0;
  spec.train.epochs = 4;
  const auto run = run_bench(spec, PipelineKind::sil, 1);
  for (double l : run.loss_history) EXPECT_EQ(l, run.loss_history[0]);
}

TEST(Train, LossFallsEarly) {
  auto spec = small_spec();
  spec.train.epochs = 10;
  for (auto kind : {PipelineKind::sil, PipelineKind::boxmean}) {
    const auto run = run_bench(spec, kind, 2);
    EXPECT_LT(run.loss_history.back(), run.loss_history.front());
  }
}

TEST(Train, Deterministic) {
  const auto spec = small_spec();
  const auto a = run_bench(spec, PipelineKind::sil, 3);
  const auto b = run_bench(spec, PipelineKind::sil, 3);
  EXPECT_EQ(a.loss_history, b.loss_history);
  ASSERT_EQ(a.metrics.size(), b.metrics.size());
  for (std::size_t i = 0; i < a.metrics.size(); ++i) EXPECT_EQ(a.metrics[i].mean_recall, b.metrics[i].mean_recall);
  EXPECT_EQ(a.metrics.size(), spec.train.ks.size());
}

TEST(Train, NonFiniteLossThrows) {
  auto spec = small_spec();
  sil::Rng rng(4);
  std::vector<ToyScene> scenes;
  while (scenes.empty()) {
    auto s = synth_scene(rng, spec.scene);
    if (!s.gt.empty()) scenes.push_back(std::move(s));
  }
  auto model = make_model(PipelineKind::boxmean, spec.sil, spec.scene.depth(), rng);
  model.head.bias(0, 0) = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(train_toy(scenes, model, spec.train, rng), sil::NumericError);
}

TEST(Train, InfeasibleSpecThrows) {
  auto spec = small_spec();
  spec.scene.max_box = 20;
  EXPECT_THROW(run_bench(spec, PipelineKind::sil, 1), sil::ArgumentError);
  spec = small_spec();
  spec.train.ks = {};
  EXPECT_THROW(run_bench(spec, PipelineKind::sil, 1), sil::ArgumentError);
  spec = small_spec();
  spec.train.epochs = 0;
  EXPECT_THROW(run_bench(spec, PipelineKind::sil, 1), sil::ArgumentError);
}

TEST(Ablation, SingleRowMatchesBench) {
  const auto spec = small_spec();
  const auto rows = ablation_sweep(AblationAxis::depth, spec, {5}, {1});
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].layers, 1);
  EXPECT_EQ(rows[0].centers, 9);
  const auto run = run_bench(spec, PipelineKind::sil, 5);
  EXPECT_EQ(rows[0].median[0], run.mean_recall(5));
}

TEST(Ablation, RerunIsIdentical) {
  const auto spec = small_spec();
  const auto a = ablation_sweep(AblationAxis::centers, spec, {1, 2}, {4, 9});
  const auto b = ablation_sweep(AblationAxis::centers, spec, {1, 2}, {4, 9});
  ASSERT_EQ(a.size(), 2u);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].per_seed, b[i].per_seed);
  EXPECT_THROW(ablation_sweep(AblationAxis::centers, spec, {1}, {5}), sil::ArgumentError);
}

TEST(Ablation, ZeroDepthEqualsNoEncoder) {
  auto spec = small_spec();
  const auto rows = ablation_sweep(AblationAxis::depth, spec, {1, 2}, {0});
  spec.sil.cross_entity = false;
  for (std::size_t i = 0; i < 2; ++i) {
    const auto run = run_bench(spec, PipelineKind::sil, i + 1);
    for (std::size_t j = 0; j < spec.train.ks.size(); ++j)
      EXPECT_NEAR(rows[0].per_seed[j][i], run.mean_recall(spec.train.ks[j]), 1e-6);
  }
}

TEST(Median, OddEven) {
  EXPECT_EQ(median({3, 1, 2}), 2);
  EXPECT_EQ(median({4, 1, 2, 3}), 2.5);
  EXPECT_THROW(median({}), sil::ArgumentError);
}
