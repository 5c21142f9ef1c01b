#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "sil/clustering.hpp"
#include "sil/interaction.hpp"
#include "sil/pipeline.hpp"

namespace sil::io {

namespace fs = std::filesystem;

/// Input file cannot be opened or read.
class IoError : public Error {
 public:
  using Error::Error;
};

std::string read_file(const fs::path& path);

/// Writes to a sibling temporary and renames it over `path`.
void write_file_atomic(const fs::path& path, std::string_view bytes);

// Grid files: "SILT", u32 version, u32 H, W, D, then H*W*D float32, all
// little-endian, row-major over (y, x, channel).
inline constexpr std::uint32_t kGridVersion = 1;
inline constexpr std::size_t kGridHeaderBytes = 20;

std::string encode_grid(const FeatureGrid<float>& grid);
FeatureGrid<float> decode_grid(std::string_view bytes);
FeatureGrid<float> read_grid(const fs::path& path);
void write_grid(const FeatureGrid<float>& grid, const fs::path& path);

/// Netpbm P2/P3/P5/P6 to a grid with values in [0, 1]. Gray gives D = 1,
/// colour gives D = 3 in R, G, B order.
FeatureGrid<float> decode_image(std::string_view bytes);
FeatureGrid<float> image_to_grid(const fs::path& path);

/// A grid file or a Netpbm image, chosen by the leading magic.
FeatureGrid<float> read_grid_or_image(const fs::path& path);

struct LabelMap {
  int height = 0;
  int width = 0;
  int classes = 1;
  std::vector<int> labels;  // row-major, each in [0, classes)

  static LabelMap from_assignment(const ClusterAssignment& a, int height, int width, int classes);
};

using Rgb = std::array<std::uint8_t, 3>;
extern const std::array<Rgb, 16> kPalette;

/// Plain PGM with maxval max(classes - 1, 1).
std::string encode_label_pgm(const LabelMap& map);
LabelMap decode_label_pgm(std::string_view bytes);

/// Plain PPM colouring label l with kPalette[l % 16]. When `image` has depth
/// 1 or 3 the colour is mixed half and half with the image.
std::string encode_overlay_ppm(const LabelMap& map, const FeatureGrid<float>* image = nullptr);

/// JSON array of {x1, y1, x2, y2, label?, g?}. Missing g rows default to the
/// box mean over `grid`.
std::vector<EntityBox<float>> parse_boxes(std::string_view json_text, const FeatureGrid<float>& grid);

// Params files: "SILP", u32 version, u32 tensor count, then per tensor
// (u32 name length, name bytes, u32 rows, u32 cols), then every payload as
// float32 in manifest order.
inline constexpr std::uint32_t kParamsVersion = 1;

std::string encode_params(const SilParams<float>& params);

/// Fills `params`, whose layout must already match the file exactly.
void decode_params(std::string_view bytes, SilParams<float>& params);

SilParams<float> read_params(const fs::path& path, const SilConfig& config, int depth);
void write_params(const SilParams<float>& params, const fs::path& path);

}  // namespace sil::io
