#include "sil/config.hpp"

#include <cmath>
#include <set>

#include "json.hpp"

namespace sil {

using json = nlohmann::json;

const char* to_string(DistanceMode m) { return m == DistanceMode::raw ? "raw" : "normalized"; }
const char* to_string(WeightVariant v) { return v == WeightVariant::distance ? "distance" : "inverse"; }
const char* to_string(toy::RecallAggregation a) { return a == toy::RecallAggregation::pooled ? "pooled" : "per_image"; }

namespace {

json parse_document(std::string_view text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(what + ": " + e.what(), e.byte > 0 ? e.byte - 1 : 0);
  }
}

/// Typed field access with path-qualified errors.
class Fields {
 public:
  Fields(const json& obj, std::string path, std::set<std::string> known) : obj_(obj), path_(std::move(path)) {
    if (!obj.is_object()) throw FormatError(path_ + " must be an object");
    for (const auto& [key, _] : obj.items())
      if (!known.count(key)) throw FormatError(path_ + ": unknown field \"" + key + "\"");
  }

  const json* get(const char* key) const {
    auto it = obj_.find(key);
    return it == obj_.end() ? nullptr : &*it;
  }

  std::string at(const char* key) const { return path_ + "." + key; }

  void integer(const char* key, int& out) const {
    if (const json* v = get(key)) {
      if (!v->is_number_integer()) throw FormatError(at(key) + " must be an integer");
      const auto n = v->get<long long>();
      if (n < -2147483647LL || n > 2147483647LL) throw FormatError(at(key) + " is out of range");
      out = static_cast<int>(n);
    }
  }

  void number(const char* key, double& out) const {
    if (const json* v = get(key)) {
      if (!v->is_number()) throw FormatError(at(key) + " must be a number");
      out = v->get<double>();
      if (!std::isfinite(out)) throw FormatError(at(key) + " must be finite");
    }
  }

  void boolean(const char* key, bool& out) const {
    if (const json* v = get(key)) {
      if (!v->is_boolean()) throw FormatError(at(key) + " must be a boolean");
      out = v->get<bool>();
    }
  }

  std::string string(const char* key, const std::string& fallback) const {
    if (const json* v = get(key)) {
      if (!v->is_string()) throw FormatError(at(key) + " must be a string");
      return v->get<std::string>();
    }
    return fallback;
  }

 private:
  const json& obj_;
  std::string path_;
};

SilConfig config_from(const json& j, const std::string& path) {
  Fields f(j, path, {"stages", "distance_mode", "weight_variant", "cross_entity", "embed_dim"});
  SilConfig c;
  if (const json* st = f.get("stages")) {
    if (!st->is_array() || st->empty()) throw FormatError(f.at("stages") + " must be a non-empty array");
    c.stages.clear();
    for (std::size_t i = 0; i < st->size(); ++i) {
      Fields s((*st)[i], f.at("stages") + "[" + std::to_string(i) + "]",
               {"centers_x", "centers_y", "knn", "layers", "heads", "head_dim", "dropout", "mlp_hidden",
                "dispatch_init_scale"});
      StageConfig sc;
      s.integer("centers_x", sc.centers_x);
      s.integer("centers_y", sc.centers_y);
      s.integer("knn", sc.knn);
      s.integer("layers", sc.layers);
      s.integer("heads", sc.heads);
      s.integer("head_dim", sc.head_dim);
      s.number("dropout", sc.dropout);
      s.integer("mlp_hidden", sc.mlp_hidden);
      s.number("dispatch_init_scale", sc.dispatch_init_scale);
      c.stages.push_back(sc);
    }
  }
  const std::string dm = f.string("distance_mode", "raw");
  if (dm == "raw") c.distance_mode = DistanceMode::raw;
  else if (dm == "normalized") c.distance_mode = DistanceMode::normalized;
  else throw FormatError(f.at("distance_mode") + " must be \"raw\" or \"normalized\"");
  const std::string wv = f.string("weight_variant", "distance");
  if (wv == "distance") c.weight_variant = WeightVariant::distance;
  else if (wv == "inverse") c.weight_variant = WeightVariant::inverse;
  else throw FormatError(f.at("weight_variant") + " must be \"distance\" or \"inverse\"");
  f.boolean("cross_entity", c.cross_entity);
  f.integer("embed_dim", c.embed_dim);
  return c;
}

json config_to(const SilConfig& c) {
  json stages = json::array();
  for (const auto& s : c.stages)
    stages.push_back({{"centers_x", s.centers_x},
                      {"centers_y", s.centers_y},
                      {"knn", s.knn},
                      {"layers", s.layers},
                      {"heads", s.heads},
                      {"head_dim", s.head_dim},
                      {"dropout", s.dropout},
                      {"mlp_hidden", s.mlp_hidden},
                      {"dispatch_init_scale", s.dispatch_init_scale}});
  return {{"stages", stages},
          {"distance_mode", to_string(c.distance_mode)},
          {"weight_variant", to_string(c.weight_variant)},
          {"cross_entity", c.cross_entity},
          {"embed_dim", c.embed_dim}};
}

}  // namespace

SilConfig parse_sil_config(std::string_view json_text) {
  return config_from(parse_document(json_text, "config"), "config");
}

std::string dump_sil_config(const SilConfig& config) { return config_to(config).dump(2) + "\n"; }

toy::BenchSpec parse_bench_spec(std::string_view json_text) {
  const json doc = parse_document(json_text, "spec");
  Fields top(doc, "spec", {"scene", "train", "sil", "seeds"});
  toy::BenchSpec b;
  if (const json* sj = top.get("scene")) {
    Fields s(*sj, "spec.scene",
             {"height", "width", "min_entities", "max_entities", "classes", "min_box", "max_box", "marker_prob",
              "marker_size", "marker_strength", "noise", "fixed"});
    auto& sc = b.scene;
    s.integer("height", sc.height);
    s.integer("width", sc.width);
    s.integer("min_entities", sc.min_entities);
    s.integer("max_entities", sc.max_entities);
    s.integer("classes", sc.classes);
    s.integer("min_box", sc.min_box);
    s.integer("max_box", sc.max_box);
    s.number("marker_prob", sc.marker_prob);
    s.integer("marker_size", sc.marker_size);
    s.number("marker_strength", sc.marker_strength);
    s.number("noise", sc.noise);
    if (const json* fx = s.get("fixed")) {
      if (!fx->is_array()) throw FormatError("spec.scene.fixed must be an array");
      for (std::size_t i = 0; i < fx->size(); ++i) {
        Fields e((*fx)[i], "spec.scene.fixed[" + std::to_string(i) + "]", {"x1", "y1", "x2", "y2", "class", "marker"});
        toy::FixedEntity fe;
        e.number("x1", fe.box.x1);
        e.number("y1", fe.box.y1);
        e.number("x2", fe.box.x2);
        e.number("y2", fe.box.y2);
        e.integer("class", fe.class_id);
        e.boolean("marker", fe.marker);
        sc.fixed.push_back(fe);
      }
    }
  }
  if (const json* tj = top.get("train")) {
    Fields t(*tj, "spec.train", {"epochs", "lr", "train_scenes", "eval_scenes", "eval_every", "ks", "aggregation"});
    auto& tr = b.train;
    t.integer("epochs", tr.epochs);
    t.number("lr", tr.lr);
    t.integer("train_scenes", tr.train_scenes);
    t.integer("eval_scenes", tr.eval_scenes);
    t.integer("eval_every", tr.eval_every);
    if (const json* ks = t.get("ks")) {
      if (!ks->is_array() || ks->empty()) throw FormatError("spec.train.ks must be a non-empty array");
      tr.ks.clear();
      for (const auto& k : *ks) {
        if (!k.is_number_integer() || k.get<long long>() < 1 || k.get<long long>() > 1000000)
          throw FormatError("spec.train.ks entries must be positive integers");
        tr.ks.push_back(k.get<int>());
      }
    }
    const std::string agg = t.string("aggregation", "pooled");
    if (agg == "pooled") tr.aggregation = toy::RecallAggregation::pooled;
    else if (agg == "per_image") tr.aggregation = toy::RecallAggregation::per_image;
    else throw FormatError("spec.train.aggregation must be \"pooled\" or \"per_image\"");
  }
  if (const json* cj = top.get("sil")) b.sil = config_from(*cj, "spec.sil");
  if (const json* sd = top.get("seeds")) {
    if (!sd->is_array() || sd->empty()) throw FormatError("spec.seeds must be a non-empty array");
    b.seeds.clear();
    for (const auto& s : *sd) {
      if (!s.is_number_unsigned()) throw FormatError("spec.seeds entries must be non-negative integers");
      b.seeds.push_back(s.get<std::uint64_t>());
    }
  }
  return b;
}

std::string dump_bench_spec(const toy::BenchSpec& b) {
  json fixed = json::array();
  for (const auto& f : b.scene.fixed)
    fixed.push_back({{"x1", f.box.x1}, {"y1", f.box.y1}, {"x2", f.box.x2}, {"y2", f.box.y2}, {"class", f.class_id},
                     {"marker", f.marker}});
  const auto& s = b.scene;
  const auto& t = b.train;
  json doc = {{"scene",
               {{"height", s.height},
                {"width", s.width},
                {"min_entities", s.min_entities},
                {"max_entities", s.max_entities},
                {"classes", s.classes},
                {"min_box", s.min_box},
                {"max_box", s.max_box},
                {"marker_prob", s.marker_prob},
                {"marker_size", s.marker_size},
                {"marker_strength", s.marker_strength},
                {"noise", s.noise},
                {"fixed", fixed}}},
              {"train",
               {{"epochs", t.epochs},
                {"lr", t.lr},
                {"train_scenes", t.train_scenes},
                {"eval_scenes", t.eval_scenes},
                {"eval_every", t.eval_every},
                {"ks", t.ks},
                {"aggregation", to_string(t.aggregation)}}},
              {"sil", config_to(b.sil)},
              {"seeds", b.seeds}};
  return doc.dump(2) + "\n";
}

}  // namespace sil
