#pragma once

#include <string>
#include <string_view>

#include "sil/pipeline.hpp"
#include "sil/toy.hpp"

namespace sil {

/// JSON forms of the configuration types. Every field is optional and falls
/// back to the struct default; unknown fields are rejected with FormatError.
SilConfig parse_sil_config(std::string_view json_text);
std::string dump_sil_config(const SilConfig& config);

toy::BenchSpec parse_bench_spec(std::string_view json_text);
std::string dump_bench_spec(const toy::BenchSpec& spec);

const char* to_string(DistanceMode m);
const char* to_string(WeightVariant v);
const char* to_string(toy::RecallAggregation a);

}  // namespace sil
