#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "hfl/parameter.hpp"

namespace hfl {

// FFCK layout, all integers little-endian:
//   "FFCK" | version u32 | tensor count u32 |
//   per tensor: name length u16, UTF-8 name, dtype u8 (0=f32, 1=f64),
//               rank u8, dims u32 x rank, raw element data
inline constexpr std::uint32_t kCheckpointVersion = 1;

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

void write_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors);
NamedTensors read_checkpoint(const std::filesystem::path& path);

/// Saves every parameter whose name matches `pattern` (glob).
void save_parameters(const std::filesystem::path& path, const ParameterStore& store,
                     std::string_view pattern = "**");

/// Copies checkpoint tensors into same-named parameters. Every store
/// parameter matching `pattern` must be present with matching shape and
/// dtype; checkpoint entries outside the pattern are ignored.
void load_parameters(const std::filesystem::path& path, ParameterStore& store,
                     std::string_view pattern = "**");

/// In-memory form of load_parameters with the same rules.
void assign_parameters(ParameterStore& store, const NamedTensors& tensors,
                       std::string_view pattern = "**", std::string_view source = "checkpoint");

}  // namespace hfl
