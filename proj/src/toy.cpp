#include "sil/toy.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace sil::toy {

const char* predicate_name(int p) {
  switch (p) {
    case left_of: return "left-of";
    case above: return "above";
    case overlaps: return "overlaps";
    case contains_marker: return "contains-marker";
    default: return "unknown";
  }
}

void SceneSpec::validate() const {
  if (height < 1 || width < 1) throw ArgumentError("scene spec: grid must be at least 1x1");
  if (classes < 1) throw ArgumentError("scene spec: need at least one class");
  if (marker_size < 1) throw ArgumentError("scene spec: marker_size must be >= 1");
  if (!fixed.empty()) {
    for (std::size_t k = 0; k < fixed.size(); ++k) {
      const Box& b = fixed[k].box;
      if (!b.valid() || b.x1 < 0 || b.y1 < 0 || b.x2 > width || b.y2 > height)
        throw ArgumentError("scene spec: fixed entity " + std::to_string(k) + " does not fit the grid");
      if (fixed[k].class_id < 0 || fixed[k].class_id >= classes)
        throw ArgumentError("scene spec: fixed entity " + std::to_string(k) + " has an unknown class");
    }
    return;
  }
  if (min_entities < 0 || max_entities < min_entities) throw ArgumentError("scene spec: bad entity count range");
  if (max_entities == 0) return;
  if (min_box < 1 || max_box < min_box) throw ArgumentError("scene spec: bad box size range");
  if (max_box > width || max_box > height)
    throw ArgumentError("scene spec: boxes of size " + std::to_string(max_box) + " cannot fit a " +
                        std::to_string(width) + "x" + std::to_string(height) + " grid");
  if (marker_prob > 0 && marker_size >= min_box)
    throw ArgumentError("scene spec: a " + std::to_string(marker_size) + "px marker cannot fit inside a " +
                        std::to_string(min_box) + "px box with room to spare");
}

std::optional<int> derive_predicate(const std::vector<Box>& boxes, const std::vector<bool>& marker, int s, int o) {
  if (s == o) return std::nullopt;
  if (marker[static_cast<std::size_t>(s)]) return contains_marker;
  const Box& a = boxes[static_cast<std::size_t>(s)];
  const Box& b = boxes[static_cast<std::size_t>(o)];
  const bool x_overlap = std::min(a.x2, b.x2) > std::max(a.x1, b.x1);
  const bool y_overlap = std::min(a.y2, b.y2) > std::max(a.y1, b.y1);
  if (x_overlap && y_overlap) return overlaps;
  if (y_overlap && a.x2 <= b.x1) return left_of;
  if (x_overlap && a.y2 <= b.y1) return above;
  return std::nullopt;
}

namespace {

bool pixel_in(const Box& b, int x, int y) { return b.contains({x + 0.5, y + 0.5}); }

}  // namespace

ToyScene synth_scene(Rng& rng, const SceneSpec& spec) {
  spec.validate();
  const int h = spec.height, w = spec.width, d = spec.depth();
  const int ch_x = spec.classes, ch_y = ch_x + 1, ch_marker = ch_x + 2, ch_obj = ch_x + 3, ch_noise = ch_x + 4;

  std::vector<Box> boxes;
  std::vector<int> class_of;
  std::vector<bool> wants_marker;
  if (!spec.fixed.empty()) {
    for (const auto& f : spec.fixed) {
      boxes.push_back(f.box);
      class_of.push_back(f.class_id);
      wants_marker.push_back(f.marker);
    }
  } else {
    const int n = rng.between(spec.min_entities, spec.max_entities);
    for (int k = 0; k < n; ++k) {
      const int bw = rng.between(spec.min_box, spec.max_box);
      const int bh = rng.between(spec.min_box, spec.max_box);
      const int x = rng.between(0, w - bw);
      const int y = rng.between(0, h - bh);
      boxes.push_back({double(x), double(y), double(x + bw), double(y + bh)});
      class_of.push_back(rng.between(0, spec.classes - 1));
      wants_marker.push_back(rng.uniform() < spec.marker_prob);
    }
  }
  const auto n = boxes.size();

  ToyScene scene;
  scene.grid = FeatureGrid<float>(h, w, d);
  Tensor2f& f = scene.grid.features;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const Eigen::Index i = Eigen::Index(y) * w + x;
      f(i, ch_x) = static_cast<float>((x + 0.5) / w);
      f(i, ch_y) = static_cast<float>((y + 0.5) / h);
      f(i, ch_noise) = static_cast<float>(rng.uniform(-spec.noise, spec.noise));
      for (std::size_t k = 0; k < n; ++k)
        if (pixel_in(boxes[k], x, y)) {
          for (int c = 0; c < spec.classes; ++c) f(i, c) = 0;
          f(i, class_of[k]) = 1;
          f(i, ch_obj) = 1;
        }
    }

  // Markers go where no other box reaches, so they never leak into another
  // entity's pooled feature.
  scene.has_marker.assign(n, false);
  const int ms = spec.marker_size;
  for (std::size_t k = 0; k < n; ++k) {
    if (!wants_marker[k]) continue;
    auto exclusive = [&](int x, int y) {
      if (!pixel_in(boxes[k], x, y)) return false;
      for (std::size_t o = 0; o < n; ++o)
        if (o != k && pixel_in(boxes[o], x, y)) return false;
      return true;
    };
    std::vector<std::pair<int, int>> spots;
    for (int y = 0; y + ms <= h; ++y)
      for (int x = 0; x + ms <= w; ++x) {
        bool ok = true;
        for (int dy = 0; dy < ms && ok; ++dy)
          for (int dx = 0; dx < ms && ok; ++dx) ok = exclusive(x + dx, y + dy);
        if (ok) spots.emplace_back(x, y);
      }
    if (spots.empty()) continue;
    const auto [mx, my] = spots[rng.below(spots.size())];
    std::vector<Eigen::Index> rest;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const bool in_patch = x >= mx && x < mx + ms && y >= my && y < my + ms;
        if (!in_patch && exclusive(x, y)) rest.push_back(Eigen::Index(y) * w + x);
      }
    if (rest.empty()) continue;
    for (int dy = 0; dy < ms; ++dy)
      for (int dx = 0; dx < ms; ++dx) f(Eigen::Index(my + dy) * w + mx + dx, ch_marker) += float(spec.marker_strength);
    const double debit = spec.marker_strength * ms * ms / static_cast<double>(rest.size());
    for (Eigen::Index i : rest) f(i, ch_marker) -= static_cast<float>(debit);
    scene.has_marker[k] = true;
  }

  for (std::size_t k = 0; k < n; ++k) {
    EntityBox<float> e;
    e.box = boxes[k];
    e.class_id = class_of[k];
    e.label = "class" + std::to_string(class_of[k]);
    e.g = box_pool(scene.grid, e.box);
    scene.entities.push_back(std::move(e));
  }
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t o = 0; o < n; ++o)
      if (auto p = derive_predicate(boxes, scene.has_marker, int(s), int(o)))
        scene.gt.push_back({int(s), *p, int(o)});
  return scene;
}

RelationHead RelationHead::zeros(int depth, int predicates) {
  return {Tensor2f::Zero(2 * depth, predicates), Tensor2f::Zero(1, predicates)};
}

RelationHead RelationHead::random(int depth, Rng& rng, int predicates) {
  const double lim = std::sqrt(6.0 / double(2 * depth + predicates));
  return {rng.uniform_tensor<float>(2 * depth, predicates, -lim, lim), Tensor2f::Zero(1, predicates)};
}

namespace {

Tensor2f pair_input(const Tensor2f& features, int s, int o) {
  const Eigen::Index d = features.cols();
  Tensor2f x(1, 2 * d);
  x.leftCols(d) = features.row(s);
  x.rightCols(d) = features.row(o);
  return x;
}

std::vector<double> softmax_scores(const Tensor2f& logits) {
  const Tensor2d p = row_softmax<double>(logits.cast<double>());
  return {p.data(), p.data() + p.size()};
}

}  // namespace

PredictionSet predict_relations(const Tensor2f& features, const RelationHead& head) {
  PredictionSet out;
  const int n = static_cast<int>(features.rows());
  if (head.weight.rows() != 2 * features.cols()) throw DimensionError("predict_relations: head expects 2D inputs");
  for (int s = 0; s < n; ++s)
    for (int o = 0; o < n; ++o) {
      if (s == o) continue;
      Tensor2f logits = matmul(pair_input(features, s, o), head.weight);
      logits += head.bias;
      const auto p = softmax_scores(logits);
      for (int c = 0; c < static_cast<int>(p.size()); ++c) out.items.push_back({{s, c, o}, p[static_cast<std::size_t>(c)]});
    }
  std::sort(out.items.begin(), out.items.end(), [](const ScoredTriplet& a, const ScoredTriplet& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.t.subject != b.t.subject) return a.t.subject < b.t.subject;
    if (a.t.object != b.t.object) return a.t.object < b.t.object;
    return a.t.predicate < b.t.predicate;
  });
  return out;
}

namespace {

std::set<Triplet> top_k(const PredictionSet& preds, int k) {
  std::set<Triplet> top;
  const auto limit = std::min<std::size_t>(static_cast<std::size_t>(std::max(k, 0)), preds.items.size());
  for (std::size_t r = 0; r < limit; ++r) top.insert(preds.items[r].t);
  return top;
}

}  // namespace

double recall_at_k(const PredictionSet& preds, const std::vector<Triplet>& gt, int k) {
  if (k < 1) throw ArgumentError("recall_at_k: K must be >= 1");
  if (gt.empty()) return 1.0;
  const auto top = top_k(preds, k);
  std::size_t hit = 0;
  for (const auto& t : gt) hit += top.count(t);
  return static_cast<double>(hit) / static_cast<double>(gt.size());
}

MeanRecall mean_recall_at_k(const std::vector<ImageEval>& images, int k, int classes, RecallAggregation mode) {
  if (k < 1) throw ArgumentError("mean_recall_at_k: K must be >= 1");
  std::vector<double> hits(static_cast<std::size_t>(classes), 0), totals(static_cast<std::size_t>(classes), 0);
  std::vector<double> ratio_sum(static_cast<std::size_t>(classes), 0), ratio_n(static_cast<std::size_t>(classes), 0);
  double recall_sum = 0;
  int recall_n = 0;
  for (const auto& img : images) {
    if (img.gt.empty()) continue;
    const auto top = top_k(img.preds, k);
    std::vector<double> h(static_cast<std::size_t>(classes), 0), t(static_cast<std::size_t>(classes), 0);
    std::size_t matched = 0;
    for (const auto& g : img.gt) {
      if (g.predicate < 0 || g.predicate >= classes) throw ArgumentError("mean_recall_at_k: predicate out of range");
      const auto c = static_cast<std::size_t>(g.predicate);
      t[c] += 1;
      if (top.count(g)) {
        h[c] += 1;
        ++matched;
      }
    }
    for (std::size_t c = 0; c < h.size(); ++c) {
      hits[c] += h[c];
      totals[c] += t[c];
      if (t[c] > 0) {
        ratio_sum[c] += h[c] / t[c];
        ratio_n[c] += 1;
      }
    }
    recall_sum += static_cast<double>(matched) / static_cast<double>(img.gt.size());
    ++recall_n;
  }
  MeanRecall out;
  out.per_class.resize(static_cast<std::size_t>(classes));
  double sum = 0;
  int present = 0;
  for (std::size_t c = 0; c < out.per_class.size(); ++c) {
    if (totals[c] == 0) continue;
    const double r = mode == RecallAggregation::pooled ? hits[c] / totals[c] : ratio_sum[c] / ratio_n[c];
    out.per_class[c] = r;
    sum += r;
    ++present;
  }
  out.mean = present ? sum / present : 0.0;
  out.recall = recall_n ? recall_sum / recall_n : 0.0;
  return out;
}

ToyModel make_model(PipelineKind kind, const SilConfig& config, int depth, Rng& rng) {
  ToyModel m;
  m.kind = kind;
  m.config = config;
  m.head = RelationHead::random(depth, rng);
  if (kind == PipelineKind::sil) m.sil = SilParams<float>::init(config, depth, rng);
  return m;
}

Tensor2f entity_features(const ToyModel& model, const ToyScene& scene, bool training, Rng* rng,
                         NetworkTrace<float>* trace) {
  const auto n = static_cast<Eigen::Index>(scene.entities.size());
  const FeatureGrid<float>* source = &scene.grid;
  NetworkTrace<float> local;
  if (model.kind == PipelineKind::sil) {
    local = sil_network(scene.grid, scene.entities, model.config, model.sil, training, rng, trace != nullptr);
    source = &local.output();
  }
  Tensor2f f(n, scene.grid.depth);
  for (Eigen::Index k = 0; k < n; ++k) f.row(k) = box_pool(*source, scene.entities[static_cast<std::size_t>(k)].box);
  if (trace) *trace = std::move(local);
  return f;
}

std::vector<MetricRecord> evaluate(const ToyModel& model, const std::vector<ToyScene>& scenes, const std::vector<int>& ks,
                                   int epoch, RecallAggregation mode) {
  std::vector<ImageEval> images(scenes.size());
  parallel_rows(static_cast<Eigen::Index>(scenes.size()), std::size_t{1} << 16, [&](Eigen::Index i) {
    const ToyScene& s = scenes[static_cast<std::size_t>(i)];
    images[static_cast<std::size_t>(i)] = {predict_relations(entity_features(model, s, false, nullptr), model.head), s.gt};
  });
  std::vector<MetricRecord> out;
  for (int k : ks) {
    const auto mr = mean_recall_at_k(images, k, kPredicateCount, mode);
    out.push_back({epoch, k, mr.mean, mr.recall, mr.per_class});
  }
  return out;
}

namespace {

template <typename Fn>
void each_param(ToyModel& model, Fn&& fn) {
  fn(model.head.weight);
  fn(model.head.bias);
  if (model.kind == PipelineKind::sil) model.sil.visit([&](const std::string&, Tensor2f& t) { fn(t); });
}

}  // namespace

TrainResult train_toy(const std::vector<ToyScene>& scenes, ToyModel model, const TrainSpec& spec, Rng& rng,
                      const std::vector<ToyScene>* eval_scenes) {
  if (!(spec.lr >= 0)) throw ArgumentError("train_toy: lr must be >= 0");
  if (spec.epochs < 1) throw ArgumentError("train_toy: epochs must be >= 1");
  TrainResult result;
  const float lr = static_cast<float>(spec.lr);
  for (int epoch = 0; epoch < spec.epochs; ++epoch) {
    double total = 0;
    int counted = 0;
    for (std::size_t si = 0; si < scenes.size(); ++si) {
      const ToyScene& scene = scenes[si];
      if (scene.gt.empty()) continue;
      NetworkTrace<float> trace;
      const bool sil = model.kind == PipelineKind::sil;
      const Tensor2f f = entity_features(model, scene, true, &rng, sil ? &trace : nullptr);
      const Eigen::Index d = f.cols();
      RelationHead g_head = RelationHead::zeros(static_cast<int>(d), static_cast<int>(model.head.bias.cols()));
      Tensor2f d_f = Tensor2f::Zero(f.rows(), d);
      double loss = 0;
      const float inv_n = 1.0f / static_cast<float>(scene.gt.size());
      for (const auto& t : scene.gt) {
        const Tensor2f x = pair_input(f, t.subject, t.object);
        Tensor2f logits = matmul(x, model.head.weight);
        logits += model.head.bias;
        const auto p = softmax_scores(logits);
        loss -= std::log(std::max(p[static_cast<std::size_t>(t.predicate)], 1e-300));
        Tensor2f dz(1, logits.cols());
        for (Eigen::Index c = 0; c < dz.cols(); ++c)
          dz(0, c) = (static_cast<float>(p[static_cast<std::size_t>(c)]) - (c == t.predicate ? 1.0f : 0.0f)) * inv_n;
        g_head.weight += matmul_tn(x, dz);
        g_head.bias += dz;
        const Tensor2f dx = matmul_nt(dz, model.head.weight);
        d_f.row(t.subject) += dx.leftCols(d);
        d_f.row(t.object) += dx.rightCols(d);
      }
      loss /= static_cast<double>(scene.gt.size());
      if (!std::isfinite(loss)) throw NumericError("train_toy: non-finite loss on scene " + std::to_string(si));
      total += loss;
      ++counted;

      if (sil) {
        std::vector<Box> boxes;
        for (const auto& e : scene.entities) boxes.push_back(e.box);
        const auto grads = backward(trace, model.config, model.sil, Tensor2f(), boxes, d_f);
        std::vector<const Tensor2f*> flat;
        grads.visit([&](const std::string&, const Tensor2f& t) { flat.push_back(&t); });
        std::size_t at = 0;
        model.sil.visit([&](const std::string&, Tensor2f& t) { t -= lr * *flat[at++]; });
      }
      model.head.weight -= lr * g_head.weight;
      model.head.bias -= lr * g_head.bias;
    }
    result.loss_history.push_back(counted ? total / counted : 0.0);
    const bool last = epoch + 1 == spec.epochs;
    if (last || (spec.eval_every > 0 && (epoch + 1) % spec.eval_every == 0)) {
      auto recs = evaluate(model, eval_scenes ? *eval_scenes : scenes, spec.ks, epoch + 1, spec.aggregation);
      result.metrics.insert(result.metrics.end(), recs.begin(), recs.end());
    }
  }
  result.model = std::move(model);
  return result;
}

double BenchRun::mean_recall(int k) const {
  for (auto it = metrics.rbegin(); it != metrics.rend(); ++it)
    if (it->k == k) return it->mean_recall;
  throw ArgumentError("BenchRun: no metrics recorded for K=" + std::to_string(k));
}

void BenchSpec::validate() const {
  scene.validate();
  sil.validate(scene.depth());
  if (train.epochs < 1) throw ArgumentError("train: epochs must be >= 1");
  if (!(train.lr >= 0)) throw ArgumentError("train: lr must be >= 0");
  if (train.train_scenes < 1 || train.eval_scenes < 1) throw ArgumentError("train: scene counts must be >= 1");
  if (train.eval_every < 0) throw ArgumentError("train: eval_every must be >= 0");
  if (train.ks.empty()) throw ArgumentError("train: ks must not be empty");
  for (int k : train.ks)
    if (k < 1) throw ArgumentError("train: every K must be >= 1");
  const Eigen::Index points = Eigen::Index(scene.height) * scene.width;
  for (const auto& st : sil.stages)
    if (st.knn > points) throw ArgumentError("sil: knn exceeds the number of grid points");
}

BenchRun run_bench(const BenchSpec& spec, PipelineKind kind, std::uint64_t seed) {
  spec.validate();
  Rng root(seed);
  Rng scene_rng = root.fork();
  Rng param_rng = root.fork();
  Rng train_rng = root.fork();
  std::vector<ToyScene> train, eval;
  for (int i = 0; i < spec.train.train_scenes; ++i) train.push_back(synth_scene(scene_rng, spec.scene));
  for (int i = 0; i < spec.train.eval_scenes; ++i) eval.push_back(synth_scene(scene_rng, spec.scene));
  ToyModel model = make_model(kind, spec.sil, spec.scene.depth(), param_rng);
  TrainResult r = train_toy(train, std::move(model), spec.train, train_rng, &eval);
  BenchRun run;
  run.seed = seed;
  run.loss_history = std::move(r.loss_history);
  const int last = spec.train.epochs;
  for (auto& m : r.metrics)
    if (m.epoch == last) run.metrics.push_back(std::move(m));
  return run;
}

double median(std::vector<double> v) {
  if (v.empty()) throw ArgumentError("median of an empty list");
  std::sort(v.begin(), v.end());
  const std::size_t mid = v.size() / 2;
  return v.size() % 2 ? v[mid] : 0.5 * (v[mid - 1] + v[mid]);
}

std::vector<AblationRow> ablation_sweep(AblationAxis axis, const BenchSpec& spec, const std::vector<std::uint64_t>& seeds,
                                        const std::vector<int>& values) {
  if (seeds.empty()) throw ArgumentError("ablation_sweep: no seeds");
  if (spec.sil.stages.empty()) throw ArgumentError("ablation_sweep: config has no stages");
  std::vector<int> settings = values;
  if (settings.empty()) settings = axis == AblationAxis::centers ? std::vector<int>{4, 9, 25, 49} : std::vector<int>{0, 1, 2, 3};
  std::vector<AblationRow> rows;
  for (int v : settings) {
    BenchSpec s = spec;
    StageConfig& st = s.sil.stages.front();
    if (axis == AblationAxis::centers) {
      const int side = static_cast<int>(std::lround(std::sqrt(double(v))));
      if (v < 1 || side * side != v) throw ArgumentError("ablation_sweep: centre count " + std::to_string(v) + " is not a square");
      st.centers_x = st.centers_y = side;
    } else {
      if (v < 0) throw ArgumentError("ablation_sweep: negative depth");
      st.layers = v;
    }
    AblationRow row;
    row.axis = axis == AblationAxis::centers ? "centers" : "depth";
    row.value = v;
    row.centers = st.centers();
    row.layers = st.layers;
    row.ks = spec.train.ks;
    row.per_seed.resize(row.ks.size());
    for (std::uint64_t seed : seeds) {
      const BenchRun run = run_bench(s, PipelineKind::sil, seed);
      for (std::size_t i = 0; i < row.ks.size(); ++i) row.per_seed[i].push_back(run.mean_recall(row.ks[i]));
    }
    for (const auto& ps : row.per_seed) row.median.push_back(median(ps));
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace sil::toy
