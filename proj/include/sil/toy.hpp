#pragma once

#include <compare>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sil/pipeline.hpp"
#include "sil/rng.hpp"

namespace sil::toy {

enum Predicate : int { left_of = 0, above = 1, overlaps = 2, contains_marker = 3 };
inline constexpr int kPredicateCount = 4;

const char* predicate_name(int p);

struct Triplet {
  int subject = 0;
  int predicate = 0;
  int object = 0;
  friend auto operator<=>(const Triplet&, const Triplet&) = default;
};

struct FixedEntity {
  Box box;
  int class_id = 0;
  bool marker = false;
};

/// Scene generator settings.
///
/// Feature channels, in order: one-hot class (`classes` channels, topmost box
/// wins), x / W, y / H, marker, objectness, noise. The marker is a bright
/// square patch inside the subject box; the remaining pixels that belong to
/// that box only are lowered by the same total amount, so the box mean of the
/// marker channel is unchanged and only sub-box structure reveals it.
struct SceneSpec {
  int height = 14;
  int width = 14;
  int min_entities = 5;
  int max_entities = 5;
  int classes = 3;
  int min_box = 4;
  int max_box = 7;
  double marker_prob = 0.3;
  int marker_size = 3;
  double marker_strength = 1.0;
  double noise = 0.02;
  std::vector<FixedEntity> fixed;  // overrides random placement when non-empty

  int depth() const { return classes + 5; }
  void validate() const;
};

struct ToyScene {
  FeatureGrid<float> grid;
  std::vector<EntityBox<float>> entities;
  std::vector<bool> has_marker;
  std::vector<Triplet> gt;
};

/// Ground-truth predicate of the ordered pair (s, o), if any. contains-marker
/// wins over overlaps, which wins over left-of, which wins over above.
std::optional<int> derive_predicate(const std::vector<Box>& boxes, const std::vector<bool>& marker, int s, int o);

ToyScene synth_scene(Rng& rng, const SceneSpec& spec);

struct ScoredTriplet {
  Triplet t;
  double score = 0;
};

/// Sorted by descending score; ties by ascending (subject, object, predicate).
struct PredictionSet {
  std::vector<ScoredTriplet> items;
};

/// concat(f_subject, f_object) * weight + bias -> predicate logits.
struct RelationHead {
  Tensor2f weight;  // 2D x P
  Tensor2f bias;    // 1 x P

  static RelationHead zeros(int depth, int predicates = kPredicateCount);
  static RelationHead random(int depth, Rng& rng, int predicates = kPredicateCount);
};

PredictionSet predict_relations(const Tensor2f& features, const RelationHead& head);

/// |top-K ∩ gt| / |gt|; 1.0 for an empty gt list.
double recall_at_k(const PredictionSet& preds, const std::vector<Triplet>& gt, int k);

enum class RecallAggregation {
  pooled,     // per class: matched / total over all images
  per_image,  // per class: mean over images of that image's class recall
};

struct ImageEval {
  PredictionSet preds;
  std::vector<Triplet> gt;
};

struct MeanRecall {
  std::vector<std::optional<double>> per_class;  // nullopt: class has no gt
  double mean = 0;
  double recall = 0;  // plain R@K averaged over images with gt
};

MeanRecall mean_recall_at_k(const std::vector<ImageEval>& images, int k, int classes = kPredicateCount,
                            RecallAggregation mode = RecallAggregation::pooled);

enum class PipelineKind { sil, boxmean };

struct TrainSpec {
  int epochs = 60;
  double lr = 0.05;
  int train_scenes = 40;
  int eval_scenes = 40;
  int eval_every = 0;  // 0: evaluate only after the last epoch
  std::vector<int> ks{20, 50};
  RecallAggregation aggregation = RecallAggregation::pooled;
};

/// One block sized for the toy grids: 7x7 centres, two 2-head layers of
/// width 4, 32-wide MLPs and a damped initial dispatch.
inline SilConfig toy_sil_config() {
  StageConfig st;
  st.centers_x = st.centers_y = 7;
  st.layers = 2;
  st.heads = 2;
  st.head_dim = 4;
  st.dropout = 0.1;
  st.mlp_hidden = 32;
  st.dispatch_init_scale = 0.1;
  SilConfig c;
  c.stages = {st};
  return c;
}

/// Everything toy-bench needs: generator, training schedule, SIL config and
/// the default seed list.
struct BenchSpec {
  SceneSpec scene;
  TrainSpec train;
  SilConfig sil = toy_sil_config();
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};

  void validate() const;
};

struct ToyModel {
  PipelineKind kind = PipelineKind::sil;
  SilConfig config;
  SilParams<float> sil;
  RelationHead head;
};

ToyModel make_model(PipelineKind kind, const SilConfig& config, int depth, Rng& rng);

/// Per-entity features: box means over F^SIL (or over F for the baseline).
Tensor2f entity_features(const ToyModel& model, const ToyScene& scene, bool training, Rng* rng,
                         NetworkTrace<float>* trace = nullptr);

struct MetricRecord {
  int epoch = 0;
  int k = 0;
  double mean_recall = 0;
  double recall = 0;
  std::vector<std::optional<double>> per_class;
};

struct TrainResult {
  ToyModel model;
  std::vector<double> loss_history;  // mean training loss per epoch
  std::vector<MetricRecord> metrics;
};

std::vector<MetricRecord> evaluate(const ToyModel& model, const std::vector<ToyScene>& scenes, const std::vector<int>& ks,
                                   int epoch, RecallAggregation mode = RecallAggregation::pooled);

/// Per-scene gradient descent on cross-entropy over gt pairs, scenes in fixed
/// order. Throws NumericError naming the scene if a loss is not finite.
TrainResult train_toy(const std::vector<ToyScene>& scenes, ToyModel model, const TrainSpec& spec, Rng& rng,
                      const std::vector<ToyScene>* eval_scenes = nullptr);

struct BenchRun {
  std::uint64_t seed = 0;
  std::vector<double> loss_history;
  std::vector<MetricRecord> metrics;  // last-epoch records on the eval scenes

  double mean_recall(int k) const;
};

/// Generates train/eval scenes and initial parameters from `seed`, trains, and
/// evaluates on the held-out scenes.
BenchRun run_bench(const BenchSpec& spec, PipelineKind kind, std::uint64_t seed);

enum class AblationAxis { centers, depth };

/// One setting of an ablation axis. per_seed and median are indexed like ks.
struct AblationRow {
  std::string axis;
  int value = 0;
  int centers = 0;
  int layers = 0;
  std::vector<int> ks;
  std::vector<std::vector<double>> per_seed;
  std::vector<double> median;
};

/// centers: C in {4, 9, 25, 49}; depth: L in {0, 1, 2, 3}. Every other
/// setting comes from the first stage of spec.sil. `values` overrides the axis.
std::vector<AblationRow> ablation_sweep(AblationAxis axis, const BenchSpec& spec, const std::vector<std::uint64_t>& seeds,
                                        const std::vector<int>& values = {});

double median(std::vector<double> v);

}  // namespace sil::toy
