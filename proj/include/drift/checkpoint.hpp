#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "drift/model.hpp"
#include "drift/tensor.hpp"

namespace drift {

// Binary container shared by model checkpoints and importance maps.
// Byte layout is documented in docs/formats.md; round-trips are bit-exact.
inline constexpr std::uint32_t kContainerKindModel = 1;
inline constexpr std::uint32_t kContainerKindImportance = 2;

struct NamedArrayRecord {
  std::string name;
  Shape shape;
  std::vector<double> data;
};

struct Container {
  std::uint32_t kind = 0;
  std::string meta_json;  // config / metadata blob, hashed in the header
  std::vector<NamedArrayRecord> records;
};

std::uint64_t fnv1a64(std::string_view bytes);

void save_container(const Container& c, const std::filesystem::path& path);
Container load_container(const std::filesystem::path& path);

void save_model(const TransformerLM& model, const std::filesystem::path& path);
TransformerLM load_model(const std::filesystem::path& path);
// Verifies the stored config matches `expected` (IntegrityError otherwise).
TransformerLM load_model(const std::filesystem::path& path,
                         const ModelConfig& expected);

}  // namespace drift
