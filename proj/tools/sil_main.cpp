// sil: command-line front end for clustering, forward passes, toy benchmarks,
// ablation sweeps and gradient checks.

#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "sil/config.hpp"
#include "sil/gradcheck.hpp"
#include "sil/io.hpp"
#include "sil/pipeline.hpp"
#include "sil/toy.hpp"

namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;

enum ExitCode { kOk = 0, kInternal = 1, kUsage = 2, kFormat = 3, kNumeric = 4 };

std::vector<int> parse_dims(const std::string& text, std::size_t count, const char* flag) {
  std::vector<int> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t x = text.find('x', start);
    const std::string part = text.substr(start, x == std::string::npos ? std::string::npos : x - start);
    int v = 0;
    const auto [end, ec] = std::from_chars(part.data(), part.data() + part.size(), v);
    if (part.empty() || ec != std::errc() || end != part.data() + part.size() || v < 1)
      throw sil::ArgumentError(std::string(flag) + ": expected " + std::to_string(count) +
                               " positive integers separated by 'x', got \"" + text + "\"");
    out.push_back(v);
    if (x == std::string::npos) break;
    start = x + 1;
  }
  if (out.size() != count)
    throw sil::ArgumentError(std::string(flag) + ": expected " + std::to_string(count) + " dimensions, got \"" + text +
                             "\"");
  return out;
}

std::string fmt(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

void write_json(const fs::path& path, const json& doc) { sil::io::write_file_atomic(path, doc.dump(2) + "\n"); }

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// cluster

struct ClusterArgs {
  std::string input, centers = "7x7", out_labels, out_overlay, out_stats;
  int nk = 0;
  std::uint64_t seed = 0;
};

int run_cluster(const ClusterArgs& a) {
  const auto c = parse_dims(a.centers, 2, "--centers");
  if (a.nk < 0) throw sil::ArgumentError("--nk must be >= 0");
  if (a.out_labels.empty() && a.out_overlay.empty() && a.out_stats.empty())
    throw sil::ArgumentError("cluster: give at least one of --out-labels, --out-overlay, --out-stats");
  const auto grid = sil::io::read_grid_or_image(a.input);
  if (!sil::all_finite(grid.features)) throw sil::NumericError("cluster: input holds non-finite values");
  const int nk = a.nk > 0 ? a.nk : sil::default_knn(grid.points(), Eigen::Index(c[0]) * c[1]);
  if (nk > grid.points()) throw sil::ArgumentError("--nk exceeds the number of grid points");

  const auto centers = sil::propose_centers(grid.height, grid.width, c[0], c[1]);
  const auto fc = sil::init_center_features(grid, centers, nk);
  const auto assign = sil::assign_points(grid, fc);
  const int count = static_cast<int>(centers.size());

  if (!a.out_labels.empty() || !a.out_overlay.empty()) {
    const auto map = sil::io::LabelMap::from_assignment(assign, grid.height, grid.width, count);
    if (!a.out_labels.empty()) sil::io::write_file_atomic(a.out_labels, sil::io::encode_label_pgm(map));
    if (!a.out_overlay.empty()) sil::io::write_file_atomic(a.out_overlay, sil::io::encode_overlay_ppm(map, &grid));
  }
  if (!a.out_stats.empty()) {
    const auto sizes = sil::cluster_sizes(assign, count);
    const sil::Tensor2f sim = sil::cosine_sim(grid.features, fc);
    std::vector<double> sum(static_cast<std::size_t>(count), 0.0);
    double total = 0;
    for (Eigen::Index i = 0; i < grid.points(); ++i) {
      const int l = assign.labels[static_cast<std::size_t>(i)];
      sum[static_cast<std::size_t>(l)] += sim(i, l);
      total += sim(i, l);
    }
    json per_cluster = json::array();
    int empty = 0;
    for (int j = 0; j < count; ++j) {
      const int n = sizes[static_cast<std::size_t>(j)];
      if (n == 0) ++empty;
      per_cluster.push_back(n ? json(sum[static_cast<std::size_t>(j)] / n) : json(nullptr));
    }
    json centre_coords = json::array();
    for (const auto& p : centers) centre_coords.push_back({p.x, p.y});
    write_json(a.out_stats, {{"height", grid.height},
                             {"width", grid.width},
                             {"depth", grid.depth},
                             {"centers_y", c[0]},
                             {"centers_x", c[1]},
                             {"knn", nk},
                             {"seed", a.seed},
                             {"centers", centre_coords},
                             {"cluster_sizes", sizes},
                             {"empty_clusters", empty},
                             {"mean_similarity", per_cluster},
                             {"mean_intra_cluster_similarity", total / static_cast<double>(grid.points())}});
  }
  return kOk;
}

// forward

struct ForwardArgs {
  std::string grid, boxes, config, params, out, diag, save_params;
  std::uint64_t init_seed = 0;
  bool has_init_seed = false;
};

int run_forward(const ForwardArgs& a) {
  if (a.params.empty() == !a.has_init_seed) throw sil::ArgumentError("forward: give exactly one of --params or --init-seed");
  if (a.out.empty() && a.diag.empty() && a.save_params.empty())
    throw sil::ArgumentError("forward: give at least one of --out, --diag, --save-params");
  const auto grid = sil::io::read_grid(a.grid);
  if (!sil::all_finite(grid.features)) throw sil::NumericError("forward: input grid holds non-finite values");
  const auto entities = sil::io::parse_boxes(sil::io::read_file(a.boxes), grid);
  const sil::SilConfig config = a.config.empty() ? sil::SilConfig{} : sil::parse_sil_config(sil::io::read_file(a.config));
  config.validate(grid.depth);
  for (const auto& st : config.stages)
    if (st.knn > grid.points()) throw sil::ArgumentError("config: knn exceeds the number of grid points");

  sil::SilParams<float> params;
  if (!a.params.empty()) {
    params = sil::io::read_params(a.params, config, grid.depth);
  } else {
    sil::Rng rng(a.init_seed);
    params = sil::SilParams<float>::init(config, grid.depth, rng);
  }

  const auto net = sil::sil_network(grid, entities, config, params, false, nullptr);

  if (!a.out.empty()) sil::io::write_grid(net.output(), a.out);
  if (!a.save_params.empty()) sil::io::write_params(params, a.save_params);
  if (!a.diag.empty()) {
    json stages = json::array();
    for (const auto& st : net.stages) {
      json coords = json::array();
      for (const auto& p : st.centers.coords) coords.push_back({p.x, p.y});
      stages.push_back({{"centers", coords},
                        {"assignment", st.assign.labels},
                        {"membership", st.map.members},
                        {"weights", st.weights}});
    }
    json boxes = json::array();
    for (const auto& e : entities) boxes.push_back({e.box.x1, e.box.y1, e.box.x2, e.box.y2});
    write_json(a.diag, {{"height", grid.height},
                        {"width", grid.width},
                        {"depth", grid.depth},
                        {"entities", boxes},
                        {"config", json::parse(sil::dump_sil_config(config))},
                        {"stages", stages}});
  }
  return kOk;
}

// toy-bench and ablate

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::uint64_t v = 0;
    const auto [end, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
    if (item.empty() || ec != std::errc() || end != item.data() + item.size())
      throw sil::ArgumentError("--seeds: \"" + item + "\" is not a non-negative integer");
    out.push_back(v);
  }
  if (out.empty()) throw sil::ArgumentError("--seeds: empty list");
  return out;
}

sil::toy::BenchSpec load_spec(const std::string& path, const std::string& seeds) {
  sil::toy::BenchSpec spec = path.empty() ? sil::toy::BenchSpec{} : sil::parse_bench_spec(sil::io::read_file(path));
  if (!seeds.empty()) spec.seeds = parse_seeds(seeds);
  spec.validate();
  return spec;
}

struct BenchArgs {
  std::string spec, pipeline = "sil", seeds, out, format;
};

int run_toy_bench(const BenchArgs& a) {
  using namespace sil::toy;
  if (a.pipeline != "sil" && a.pipeline != "boxmean") throw sil::ArgumentError("--pipeline must be sil or boxmean");
  const bool csv = a.format.empty() ? ends_with(a.out, ".csv") : a.format == "csv";
  if (!a.format.empty() && a.format != "csv" && a.format != "json") throw sil::ArgumentError("--format must be json or csv");
  const BenchSpec spec = load_spec(a.spec, a.seeds);
  const PipelineKind kind = a.pipeline == "sil" ? PipelineKind::sil : PipelineKind::boxmean;

  std::vector<BenchRun> runs;
  for (auto seed : spec.seeds) runs.push_back(run_bench(spec, kind, seed));
  std::vector<double> medians;
  for (int k : spec.train.ks) {
    std::vector<double> v;
    for (const auto& r : runs) v.push_back(r.mean_recall(k));
    medians.push_back(median(v));
  }

  if (csv) {
    std::string out = "pipeline,seed,k,mean_recall,recall";
    for (int p = 0; p < kPredicateCount; ++p) out += std::string(",") + predicate_name(p);
    out += "\n";
    for (const auto& r : runs) {
      for (const auto& m : r.metrics) {
        out += a.pipeline + "," + std::to_string(r.seed) + "," + std::to_string(m.k) + "," + fmt(m.mean_recall) + "," +
               fmt(m.recall);
        for (const auto& c : m.per_class) out += "," + (c ? fmt(*c) : std::string());
        out += "\n";
      }
    }
    for (std::size_t i = 0; i < spec.train.ks.size(); ++i) {
      out += a.pipeline + ",median," + std::to_string(spec.train.ks[i]) + "," + fmt(medians[i]) + ",";
      for (int p = 0; p < kPredicateCount; ++p) out += ",";
      out += "\n";
    }
    sil::io::write_file_atomic(a.out, out);
    return kOk;
  }

  json jruns = json::array();
  for (const auto& r : runs) {
    json metrics = json::array();
    for (const auto& m : r.metrics) {
      json pc = json::array();
      for (const auto& c : m.per_class) pc.push_back(c ? json(*c) : json(nullptr));
      metrics.push_back({{"k", m.k}, {"mean_recall", m.mean_recall}, {"recall", m.recall}, {"per_class", pc}});
    }
    jruns.push_back({{"seed", r.seed}, {"loss_history", r.loss_history}, {"metrics", metrics}});
  }
  json jmed = json::array();
  for (std::size_t i = 0; i < spec.train.ks.size(); ++i)
    jmed.push_back({{"k", spec.train.ks[i]}, {"mean_recall", medians[i]}});
  std::vector<std::string> names;
  for (int p = 0; p < kPredicateCount; ++p) names.emplace_back(predicate_name(p));
  write_json(a.out, {{"pipeline", a.pipeline},
                     {"aggregation", sil::to_string(spec.train.aggregation)},
                     {"predicates", names},
                     {"ks", spec.train.ks},
                     {"spec", json::parse(sil::dump_bench_spec(spec))},
                     {"runs", jruns},
                     {"median", jmed}});
  return kOk;
}

struct AblateArgs {
  std::string axis, spec, seeds, out;
  std::vector<int> values;
};

int run_ablate(const AblateArgs& a) {
  using namespace sil::toy;
  if (a.axis != "centers" && a.axis != "depth") throw sil::ArgumentError("--axis must be centers or depth");
  const BenchSpec spec = load_spec(a.spec, a.seeds);
  const AblationAxis axis = a.axis == "centers" ? AblationAxis::centers : AblationAxis::depth;
  const auto rows = ablation_sweep(axis, spec, spec.seeds, a.values);
  std::string out = "axis,value,centers,layers,k,median_mean_recall";
  for (auto s : spec.seeds) out += ",seed_" + std::to_string(s);
  out += "\n";
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < r.ks.size(); ++i) {
      out += r.axis + "," + std::to_string(r.value) + "," + std::to_string(r.centers) + "," + std::to_string(r.layers) +
             "," + std::to_string(r.ks[i]) + "," + fmt(r.median[i]);
      for (double v : r.per_seed[i]) out += "," + fmt(v);
      out += "\n";
    }
  }
  sil::io::write_file_atomic(a.out, out);
  return kOk;
}

// gradcheck

struct GradcheckArgs {
  std::string size = "6x6x4", centers = "2x2", distance_mode = "raw", weight_variant = "distance";
  int entities = 2, layers = 1, stages = 1, heads = 2, mlp_hidden = 8;
  std::uint64_t seed = 0;
  double eps = 1e-5;
  bool training = false;
};

int run_gradcheck(const GradcheckArgs& a) {
  const auto size = parse_dims(a.size, 3, "--size");
  const auto c = parse_dims(a.centers, 2, "--centers");
  if (!(a.eps > 0)) throw sil::ArgumentError("--eps must be positive");
  if (a.entities < 0 || a.layers < 0 || a.stages < 1 || a.heads < 1 || a.mlp_hidden < 1)
    throw sil::ArgumentError("gradcheck: counts out of range");
  sil::GradcheckSetup s;
  s.height = size[0];
  s.width = size[1];
  s.depth = size[2];
  s.centers_y = c[0];
  s.centers_x = c[1];
  s.entities = a.entities;
  s.layers = a.layers;
  s.stages = a.stages;
  s.heads = a.heads;
  s.mlp_hidden = a.mlp_hidden;
  s.training = a.training;
  s.seed = a.seed;
  s.eps = a.eps;
  if (a.distance_mode == "normalized") s.distance_mode = sil::DistanceMode::normalized;
  else if (a.distance_mode != "raw") throw sil::ArgumentError("--distance-mode must be raw or normalized");
  if (a.weight_variant == "inverse") s.weight_variant = sil::WeightVariant::inverse;
  else if (a.weight_variant != "distance") throw sil::ArgumentError("--weight-variant must be distance or inverse");

  const auto r = sil::run_gradcheck(s);
  std::printf("max relative error %.3e over %zu parameters (worst: %s)\n", r.max_rel_error, r.params,
              r.worst_param.empty() ? "-" : r.worst_param.c_str());
  if (r.flipped_probes) std::printf("warning: %zu probes would change a cluster label\n", r.flipped_probes);
  return r.max_rel_error < 1e-4 ? kOk : kNumeric;
}

int fail(int code, const std::string& msg) {
  std::cerr << "sil: " << msg << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  if (const char* env = std::getenv("SIL_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1) return fail(kUsage, "SIL_THREADS must be a positive integer");
  }

  CLI::App app{"Superpixel interaction learning toolkit"};
  app.require_subcommand(1);

  ClusterArgs ca;
  auto* cluster = app.add_subcommand("cluster", "Cluster an image or grid into superpixels");
  cluster->add_option("--input", ca.input, "Grid file or P2/P3/P5/P6 image")->required();
  cluster->add_option("--centers", ca.centers, "Centre grid as ROWSxCOLS")->capture_default_str();
  cluster->add_option("--nk", ca.nk, "Nearest points per centre (0: M / C)")->capture_default_str();
  cluster->add_option("--seed", ca.seed, "Recorded in the stats; clustering itself is deterministic");
  cluster->add_option("--out-labels", ca.out_labels, "Label map (PGM)");
  cluster->add_option("--out-overlay", ca.out_overlay, "Colour overlay (PPM)");
  cluster->add_option("--out-stats", ca.out_stats, "Cluster statistics (JSON)");

  ForwardArgs fa;
  auto* forward = app.add_subcommand("forward", "Run the SIL network on a grid");
  forward->add_option("--grid", fa.grid, "Input grid file")->required();
  forward->add_option("--boxes", fa.boxes, "Entity boxes (JSON)")->required();
  forward->add_option("--config", fa.config, "Network config (JSON); defaults when omitted");
  auto* params_opt = forward->add_option("--params", fa.params, "Parameter file");
  auto* seed_opt = forward->add_option("--init-seed", fa.init_seed, "Initialise parameters from this seed");
  params_opt->excludes(seed_opt);
  forward->add_option("--out", fa.out, "Output grid file");
  forward->add_option("--diag", fa.diag, "Assignments, memberships and weights (JSON)");
  forward->add_option("--save-params", fa.save_params, "Write the parameters used");

  BenchArgs ba;
  auto* bench = app.add_subcommand("toy-bench", "Train and evaluate on the synthetic relation task");
  bench->add_option("--spec", ba.spec, "Benchmark spec (JSON); defaults when omitted");
  bench->add_option("--pipeline", ba.pipeline, "sil or boxmean")->capture_default_str();
  bench->add_option("--seeds", ba.seeds, "Comma-separated seeds; overrides the spec");
  bench->add_option("--out", ba.out, "Output file (.json or .csv)")->required();
  bench->add_option("--format", ba.format, "json or csv; inferred from --out when omitted");

  AblateArgs aa;
  auto* ablate = app.add_subcommand("ablate", "Sweep centre count or encoder depth");
  ablate->add_option("--axis", aa.axis, "centers or depth")->required();
  ablate->add_option("--spec", aa.spec, "Benchmark spec (JSON); defaults when omitted");
  ablate->add_option("--seeds", aa.seeds, "Comma-separated seeds; overrides the spec");
  ablate->add_option("--values", aa.values, "Axis values; defaults to 4,9,25,49 or 0,1,2,3")->delimiter(',');
  ablate->add_option("--out", aa.out, "Output CSV")->required();

  GradcheckArgs ga;
  auto* gradcheck = app.add_subcommand("gradcheck", "Compare analytic and finite-difference gradients");
  gradcheck->add_option("--size", ga.size, "HxWxD")->capture_default_str();
  gradcheck->add_option("--centers", ga.centers, "ROWSxCOLS")->capture_default_str();
  gradcheck->add_option("--entities", ga.entities)->capture_default_str();
  gradcheck->add_option("--seed", ga.seed)->capture_default_str();
  gradcheck->add_option("--eps", ga.eps)->capture_default_str();
  gradcheck->add_option("--layers", ga.layers)->capture_default_str();
  gradcheck->add_option("--stages", ga.stages)->capture_default_str();
  gradcheck->add_option("--heads", ga.heads)->capture_default_str();
  gradcheck->add_option("--mlp-hidden", ga.mlp_hidden)->capture_default_str();
  gradcheck->add_option("--distance-mode", ga.distance_mode)->capture_default_str();
  gradcheck->add_option("--weight-variant", ga.weight_variant)->capture_default_str();
  gradcheck->add_flag("--training", ga.training, "Record and replay dropout masks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }
  fa.has_init_seed = seed_opt->count() > 0;

  try {
    if (cluster->parsed()) return run_cluster(ca);
    if (forward->parsed()) return run_forward(fa);
    if (bench->parsed()) return run_toy_bench(ba);
    if (ablate->parsed()) return run_ablate(aa);
    if (gradcheck->parsed()) return run_gradcheck(ga);
  } catch (const sil::FormatError& e) {
    return fail(kFormat, std::string("format error: ") + e.what());
  } catch (const sil::NumericError& e) {
    return fail(kNumeric, std::string("numeric error: ") + e.what());
  } catch (const sil::ArgumentError& e) {
    return fail(kUsage, e.what());
  } catch (const sil::DimensionError& e) {
    return fail(kUsage, e.what());
  } catch (const sil::io::IoError& e) {
    return fail(kUsage, e.what());
  } catch (const std::exception& e) {
    return fail(kInternal, e.what());
  }
  return kUsage;
}
