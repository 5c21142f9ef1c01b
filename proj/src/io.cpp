#include "sil/io.hpp"

#include <bit>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include <sys/stat.h>
#include <unistd.h>

#include "json.hpp"

namespace sil::io {

using json = nlohmann::json;

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("read failed: " + path.string());
  return ss.str();
}

void write_file_atomic(const fs::path& path, std::string_view bytes) {
  const fs::path dir = path.has_parent_path() ? path.parent_path() : fs::path(".");
  std::string tmpl = (dir / ("." + path.filename().string() + ".XXXXXX")).string();
  const int fd = ::mkstemp(tmpl.data());
  if (fd < 0) throw IoError("cannot create a temporary file next to " + path.string());
  ::fchmod(fd, 0644);
  std::size_t done = 0;
  while (done < bytes.size()) {
    const ssize_t n = ::write(fd, bytes.data() + done, bytes.size() - done);
    if (n <= 0) {
      ::close(fd);
      ::unlink(tmpl.c_str());
      throw IoError("write failed: " + path.string());
    }
    done += static_cast<std::size_t>(n);
  }
  if (::fsync(fd) != 0 || ::close(fd) != 0) {
    ::unlink(tmpl.c_str());
    throw IoError("write failed: " + path.string());
  }
  std::error_code ec;
  fs::rename(tmpl, path, ec);
  if (ec) {
    ::unlink(tmpl.c_str());
    throw IoError("cannot rename onto " + path.string() + ": " + ec.message());
  }
}

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xffu));
}

void put_f32(std::string& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

class Reader {
 public:
  Reader(std::string_view bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  void need(std::size_t n, const std::string& field) const {
    if (remaining() < n)
      throw FormatError(what_ + ": truncated " + field + " (need " + std::to_string(n) + " bytes, have " +
                            std::to_string(remaining()) + ")",
                        pos_);
  }

  std::string_view bytes(std::size_t n, const std::string& field) {
    need(n, field);
    auto v = bytes_.substr(pos_, n);
    pos_ += n;
    return v;
  }

  std::uint32_t u32(const std::string& field) {
    need(4, field);
    std::uint32_t v = 0;
    for (int b = 0; b < 4; ++b) v |= std::uint32_t(static_cast<unsigned char>(bytes_[pos_ + b])) << (8 * b);
    pos_ += 4;
    return v;
  }

  float f32(const std::string& field) { return std::bit_cast<float>(u32(field)); }

  [[noreturn]] void fail(const std::string& msg, std::size_t at) const { throw FormatError(what_ + ": " + msg, at); }

 private:
  std::string_view bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_grid(const FeatureGrid<float>& grid) {
  std::string out = "SILT";
  put_u32(out, kGridVersion);
  put_u32(out, static_cast<std::uint32_t>(grid.height));
  put_u32(out, static_cast<std::uint32_t>(grid.width));
  put_u32(out, static_cast<std::uint32_t>(grid.depth));
  out.reserve(out.size() + static_cast<std::size_t>(grid.features.size()) * 4);
  for (Eigen::Index i = 0; i < grid.features.size(); ++i) put_f32(out, grid.features.data()[i]);
  return out;
}

FeatureGrid<float> decode_grid(std::string_view bytes) {
  Reader r(bytes, "grid file");
  if (r.bytes(4, "magic") != "SILT") r.fail("bad magic, expected \"SILT\"", 0);
  const std::uint32_t version = r.u32("version");
  if (version != kGridVersion) r.fail("unsupported version " + std::to_string(version), 4);
  const std::uint32_t h = r.u32("height"), w = r.u32("width"), d = r.u32("depth");
  if (h == 0 || w == 0 || d == 0) r.fail("zero dimension in header", h == 0 ? 8 : w == 0 ? 12 : 16);
  constexpr std::uint64_t kMaxDim = 1u << 30;
  if (h > kMaxDim || w > kMaxDim || d > kMaxDim) r.fail("dimension too large", 8);
  const std::uint64_t count = std::uint64_t(h) * w * d;
  const std::uint64_t payload = count * 4;
  if (payload > r.remaining())
    r.fail("truncated payload: header declares " + std::to_string(payload) + " bytes, file has " +
               std::to_string(r.remaining()),
           kGridHeaderBytes + r.remaining());
  if (payload < r.remaining())
    r.fail(std::to_string(r.remaining() - payload) + " trailing bytes after payload", kGridHeaderBytes + payload);
  FeatureGrid<float> grid(static_cast<int>(h), static_cast<int>(w), static_cast<int>(d));
  for (std::uint64_t i = 0; i < count; ++i) grid.features.data()[i] = r.f32("payload");
  return grid;
}

FeatureGrid<float> read_grid(const fs::path& path) { return decode_grid(read_file(path)); }

void write_grid(const FeatureGrid<float>& grid, const fs::path& path) { write_file_atomic(path, encode_grid(grid)); }

namespace {

/// Header and ASCII-sample tokenizer for Netpbm files.
class PnmScanner {
 public:
  PnmScanner(std::string_view bytes, std::size_t start) : b_(bytes), pos_(start) {}

  std::size_t pos() const { return pos_; }

  void skip_space_and_comments() {
    while (pos_ < b_.size()) {
      const char c = b_[pos_];
      if (c == '#') {
        while (pos_ < b_.size() && b_[pos_] != '\n' && b_[pos_] != '\r') ++pos_;
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  /// Reads one decimal integer, returning the offset it started at.
  std::uint64_t number(const std::string& field, std::size_t* at = nullptr) {
    skip_space_and_comments();
    if (at) *at = pos_;
    if (pos_ >= b_.size()) throw FormatError("image: unexpected end of file reading " + field, pos_);
    if (!std::isdigit(static_cast<unsigned char>(b_[pos_])))
      throw FormatError("image: expected a number for " + field, pos_);
    std::uint64_t v = 0;
    const std::size_t start = pos_;
    while (pos_ < b_.size() && std::isdigit(static_cast<unsigned char>(b_[pos_]))) {
      v = v * 10 + static_cast<std::uint64_t>(b_[pos_] - '0');
      if (v > 0xffffffffu) throw FormatError("image: number too large for " + field, start);
      ++pos_;
    }
    return v;
  }

  /// The single whitespace byte that separates the header from binary data.
  void raster_separator() {
    if (pos_ >= b_.size() || !std::isspace(static_cast<unsigned char>(b_[pos_])))
      throw FormatError("image: missing whitespace before raster", pos_);
    ++pos_;
  }

  std::string_view rest() const { return b_.substr(pos_); }

 private:
  std::string_view b_;
  std::size_t pos_;
};

}  // namespace

FeatureGrid<float> decode_image(std::string_view bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P') throw FormatError("image: not a Netpbm file", 0);
  const char kind = bytes[1];
  if (kind != '2' && kind != '3' && kind != '5' && kind != '6')
    throw FormatError(std::string("image: unsupported Netpbm type P") + kind, 1);
  const bool ascii = kind == '2' || kind == '3';
  const int channels = (kind == '3' || kind == '6') ? 3 : 1;
  PnmScanner s(bytes, 2);
  std::size_t at = 0;
  const auto w = s.number("width", &at);
  if (w == 0) throw FormatError("image: zero width", at);
  const auto h = s.number("height", &at);
  if (h == 0) throw FormatError("image: zero height", at);
  const auto maxval = s.number("maxval", &at);
  if (maxval == 0 || maxval > 65535) throw FormatError("image: maxval must lie in [1, 65535]", at);
  if (w * h > (1u << 30)) throw FormatError("image: too large", 2);

  FeatureGrid<float> grid(static_cast<int>(h), static_cast<int>(w), channels);
  const std::uint64_t count = w * h * static_cast<std::uint64_t>(channels);
  const float scale = 1.0f / static_cast<float>(maxval);
  if (ascii) {
    for (std::uint64_t i = 0; i < count; ++i) {
      const auto v = s.number("sample " + std::to_string(i), &at);
      if (v > maxval) throw FormatError("image: sample exceeds maxval", at);
      grid.features.data()[i] = static_cast<float>(v) * scale;
    }
  } else {
    s.raster_separator();
    const std::size_t bps = maxval < 256 ? 1 : 2;
    const std::string_view raster = s.rest();
    const std::size_t base = s.pos();
    if (raster.size() < count * bps)
      throw FormatError("image: truncated raster, need " + std::to_string(count * bps) + " bytes", base + raster.size());
    for (std::uint64_t i = 0; i < count; ++i) {
      std::uint32_t v = static_cast<unsigned char>(raster[i * bps]);
      if (bps == 2) v = (v << 8) | static_cast<unsigned char>(raster[i * bps + 1]);
      if (v > maxval) throw FormatError("image: sample exceeds maxval", base + i * bps);
      grid.features.data()[i] = static_cast<float>(v) * scale;
    }
  }
  return grid;
}

FeatureGrid<float> image_to_grid(const fs::path& path) { return decode_image(read_file(path)); }

FeatureGrid<float> read_grid_or_image(const fs::path& path) {
  const std::string bytes = read_file(path);
  if (bytes.rfind("SILT", 0) == 0) return decode_grid(bytes);
  if (!bytes.empty() && bytes[0] == 'P') return decode_image(bytes);
  throw FormatError("input is neither a grid file nor a Netpbm image", 0);
}

LabelMap LabelMap::from_assignment(const ClusterAssignment& a, int height, int width, int classes) {
  if (static_cast<std::size_t>(height) * static_cast<std::size_t>(width) != a.labels.size())
    throw DimensionError("LabelMap: " + std::to_string(a.labels.size()) + " labels for a " + std::to_string(height) +
                         "x" + std::to_string(width) + " grid");
  for (int l : a.labels)
    if (l < 0 || l >= classes) throw ArgumentError("LabelMap: label " + std::to_string(l) + " outside [0, C)");
  return {height, width, classes, a.labels};
}

const std::array<Rgb, 16> kPalette = {{
    {230, 25, 75},   {60, 180, 75},   {255, 225, 25},  {0, 130, 200},
    {245, 130, 48},  {145, 30, 180},  {70, 240, 240},  {240, 50, 230},
    {210, 245, 60},  {250, 190, 212}, {0, 128, 128},   {220, 190, 255},
    {170, 110, 40},  {255, 250, 200}, {128, 0, 0},     {0, 0, 128},
}};

namespace {

void check_label_map(const LabelMap& m) {
  if (m.height < 1 || m.width < 1) throw ArgumentError("LabelMap: empty map");
  if (m.classes < 1 || m.classes > 65536) throw ArgumentError("LabelMap: classes must lie in [1, 65536]");
  if (m.labels.size() != static_cast<std::size_t>(m.height) * static_cast<std::size_t>(m.width))
    throw DimensionError("LabelMap: label count does not match its size");
  for (int l : m.labels)
    if (l < 0 || l >= m.classes) throw ArgumentError("LabelMap: label " + std::to_string(l) + " outside [0, C)");
}

}  // namespace

std::string encode_label_pgm(const LabelMap& map) {
  check_label_map(map);
  std::string out = "P2\n# classes " + std::to_string(map.classes) + "\n";
  out += std::to_string(map.width) + " " + std::to_string(map.height) + "\n";
  out += std::to_string(std::max(map.classes - 1, 1)) + "\n";
  for (int y = 0; y < map.height; ++y) {
    for (int x = 0; x < map.width; ++x) {
      if (x) out += ' ';
      out += std::to_string(map.labels[static_cast<std::size_t>(y) * map.width + x]);
    }
    out += '\n';
  }
  return out;
}

LabelMap decode_label_pgm(std::string_view bytes) {
  if (bytes.rfind("P2", 0) != 0) throw FormatError("label map: expected a plain PGM (P2)", 0);
  // The writer records C in a comment so that C = 1 survives a round trip.
  std::optional<int> classes;
  constexpr std::string_view kTag = "# classes ";
  if (auto p = bytes.find(kTag); p != std::string_view::npos && p < 8) {
    std::size_t i = p + kTag.size();
    long v = 0;
    while (i < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[i])) && v <= 65536) v = v * 10 + (bytes[i++] - '0');
    if (v < 1 || v > 65536) throw FormatError("label map: bad classes comment", p);
    classes = static_cast<int>(v);
  }
  const FeatureGrid<float> g = decode_image(bytes);
  PnmScanner s(bytes, 2);
  s.number("width");
  s.number("height");
  std::size_t at = 0;
  const auto maxval = static_cast<int>(s.number("maxval", &at));
  const int c = classes.value_or(maxval + 1);
  if (std::max(c - 1, 1) != maxval) throw FormatError("label map: maxval disagrees with the classes comment", at);
  LabelMap m{g.height, g.width, c, {}};
  m.labels.reserve(static_cast<std::size_t>(g.points()));
  for (Eigen::Index i = 0; i < g.points(); ++i) {
    std::size_t sample_at = 0;
    const auto v = static_cast<int>(s.number("label", &sample_at));
    if (v >= c) throw FormatError("label map: label " + std::to_string(v) + " outside [0, C)", sample_at);
    m.labels.push_back(v);
  }
  return m;
}

std::string encode_overlay_ppm(const LabelMap& map, const FeatureGrid<float>* image) {
  check_label_map(map);
  const bool blend = image && (image->depth == 1 || image->depth == 3);
  if (image && (image->height != map.height || image->width != map.width))
    throw DimensionError("overlay: image and label map sizes differ");
  std::string out = "P3\n" + std::to_string(map.width) + " " + std::to_string(map.height) + "\n255\n";
  for (int y = 0; y < map.height; ++y) {
    for (int x = 0; x < map.width; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * map.width + x;
      const Rgb& p = kPalette[static_cast<std::size_t>(map.labels[i]) % kPalette.size()];
      for (int c = 0; c < 3; ++c) {
        int v = p[static_cast<std::size_t>(c)];
        if (blend) {
          const float raw = image->features(static_cast<Eigen::Index>(i), image->depth == 3 ? c : 0);
          const int px = static_cast<int>(std::lround(std::clamp(raw, 0.0f, 1.0f) * 255.0f));
          v = (v + px + 1) / 2;
        }
        if (x || c) out += ' ';
        out += std::to_string(v);
      }
    }
    out += '\n';
  }
  return out;
}

namespace {

double box_coord(const json& obj, const char* key, std::size_t k) {
  const std::string at = "boxes[" + std::to_string(k) + "]." + key;
  if (!obj.contains(key)) throw FormatError(at + " is missing");
  const json& v = obj.at(key);
  if (!v.is_number()) throw FormatError(at + " must be a number");
  const double d = v.get<double>();
  if (!std::isfinite(d)) throw FormatError(at + " must be finite");
  return d;
}

}  // namespace

std::vector<EntityBox<float>> parse_boxes(std::string_view json_text, const FeatureGrid<float>& grid) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("boxes: ") + e.what(), e.byte > 0 ? e.byte - 1 : 0);
  }
  if (!doc.is_array()) throw FormatError("boxes: top level must be an array");
  static const std::set<std::string> known{"x1", "y1", "x2", "y2", "label", "g"};
  std::vector<EntityBox<float>> out;
  for (std::size_t k = 0; k < doc.size(); ++k) {
    const json& o = doc[k];
    const std::string at = "boxes[" + std::to_string(k) + "]";
    if (!o.is_object()) throw FormatError(at + " must be an object");
    for (const auto& [key, _] : o.items())
      if (!known.count(key)) throw FormatError(at + ": unknown field \"" + key + "\"");
    EntityBox<float> e;
    e.box = {box_coord(o, "x1", k), box_coord(o, "y1", k), box_coord(o, "x2", k), box_coord(o, "y2", k)};
    if (!(e.box.x1 < e.box.x2) || !(e.box.y1 < e.box.y2)) throw FormatError(at + ": needs x1 < x2 and y1 < y2");
    if (o.contains("label")) {
      if (!o["label"].is_string()) throw FormatError(at + ".label must be a string");
      e.label = o["label"].get<std::string>();
    }
    if (o.contains("g")) {
      const json& g = o["g"];
      if (!g.is_array() || g.size() != static_cast<std::size_t>(grid.depth))
        throw FormatError(at + ".g must be an array of " + std::to_string(grid.depth) + " numbers");
      e.g.resize(1, grid.depth);
      for (std::size_t c = 0; c < g.size(); ++c) {
        if (!g[c].is_number()) throw FormatError(at + ".g[" + std::to_string(c) + "] must be a number");
        const double v = g[c].get<double>();
        if (!std::isfinite(v) || std::fabs(v) > 3.4e38) throw FormatError(at + ".g[" + std::to_string(c) + "] is not a finite float");
        e.g(0, static_cast<Eigen::Index>(c)) = static_cast<float>(v);
      }
    } else {
      try {
        e.g = box_pool(grid, e.box);
      } catch (const ArgumentError& err) {
        throw FormatError(at + ": no g given and " + err.what());
      }
    }
    out.push_back(std::move(e));
  }
  return out;
}

std::string encode_params(const SilParams<float>& params) {
  std::string out = "SILP";
  put_u32(out, kParamsVersion);
  std::vector<const Tensor2f*> tensors;
  std::string manifest;
  params.visit([&](const std::string& name, const Tensor2f& t) {
    put_u32(manifest, static_cast<std::uint32_t>(name.size()));
    manifest += name;
    put_u32(manifest, static_cast<std::uint32_t>(t.rows()));
    put_u32(manifest, static_cast<std::uint32_t>(t.cols()));
    tensors.push_back(&t);
  });
  put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  out += manifest;
  for (const Tensor2f* t : tensors)
    for (Eigen::Index i = 0; i < t->size(); ++i) put_f32(out, t->data()[i]);
  return out;
}

void decode_params(std::string_view bytes, SilParams<float>& params) {
  Reader r(bytes, "params file");
  if (r.bytes(4, "magic") != "SILP") r.fail("bad magic, expected \"SILP\"", 0);
  const std::uint32_t version = r.u32("version");
  if (version != kParamsVersion) r.fail("unsupported version " + std::to_string(version), 4);
  struct Expected {
    std::string name;
    Tensor2f* t;
  };
  std::vector<Expected> expected;
  params.visit([&](const std::string& name, Tensor2f& t) { expected.push_back({name, &t}); });
  const std::size_t count_at = r.pos();
  const std::uint32_t count = r.u32("tensor count");
  if (count != expected.size())
    r.fail("file holds " + std::to_string(count) + " tensors, the config needs " + std::to_string(expected.size()),
           count_at);
  for (const auto& e : expected) {
    const std::size_t at = r.pos();
    const std::uint32_t len = r.u32("name length");
    if (len > 4096) r.fail("implausible name length", at);
    const std::string_view name = r.bytes(len, "tensor name");
    if (name != e.name) r.fail("expected tensor \"" + e.name + "\", found \"" + std::string(name) + "\"", at + 4);
    const std::size_t shape_at = r.pos();
    const std::uint32_t rows = r.u32("rows"), cols = r.u32("cols");
    if (rows != e.t->rows() || cols != e.t->cols())
      r.fail(e.name + " is " + std::to_string(rows) + "x" + std::to_string(cols) + ", expected " + shape_str(e.t->rows(), e.t->cols()),
             shape_at);
  }
  std::uint64_t payload = 0;
  for (const auto& e : expected) payload += static_cast<std::uint64_t>(e.t->size()) * 4;
  if (payload > r.remaining()) r.fail("truncated payload", r.pos() + r.remaining());
  if (payload < r.remaining()) r.fail("trailing bytes after payload", r.pos() + payload);
  for (const auto& e : expected) {
    for (Eigen::Index i = 0; i < e.t->size(); ++i) {
      const std::size_t at = r.pos();
      const float v = r.f32("payload");
      if (!std::isfinite(v)) r.fail(e.name + " holds a non-finite value", at);
      e.t->data()[i] = v;
    }
  }
}

SilParams<float> read_params(const fs::path& path, const SilConfig& config, int depth) {
  Rng rng(0);
  SilParams<float> p = SilParams<float>::init(config, depth, rng);
  decode_params(read_file(path), p);
  return p;
}

void write_params(const SilParams<float>& params, const fs::path& path) { write_file_atomic(path, encode_params(params)); }

}  // namespace sil::io
