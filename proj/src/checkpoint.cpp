#include "drift/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "drift/config.hpp"
#include "drift/errors.hpp"

namespace drift {

namespace {

constexpr char kMagic[8] = {'D', 'R', 'I', 'F', 'T', 'B', 'O', 'X'};
constexpr std::uint16_t kFormatVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "container I/O assumes a little-endian host");

template <typename T>
void write_le(std::ofstream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T read_le(std::ifstream& is, const char* what) {
  T v;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!is) throw IntegrityError(std::string("container: truncated ") + what);
  return v;
}

}  // namespace

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const char c : bytes) {
    h = (h ^ static_cast<std::uint8_t>(c)) * 0x100000001b3ULL;
  }
  return h;
}

void save_container(const Container& c, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IntegrityError("container: cannot open " + path.string());
  os.write(kMagic, sizeof kMagic);
  write_le(os, kFormatVersion);
  write_le(os, c.kind);
  write_le(os, fnv1a64(c.meta_json));
  write_le(os, static_cast<std::uint32_t>(c.meta_json.size()));
  os.write(c.meta_json.data(),
           static_cast<std::streamsize>(c.meta_json.size()));
  write_le(os, static_cast<std::uint32_t>(c.records.size()));
  for (const NamedArrayRecord& rec : c.records) {
    write_le(os, static_cast<std::uint32_t>(rec.name.size()));
    os.write(rec.name.data(), static_cast<std::streamsize>(rec.name.size()));
    write_le(os, static_cast<std::uint32_t>(rec.shape.size()));
    for (const std::int64_t d : rec.shape) write_le(os, d);
    os.write(reinterpret_cast<const char*>(rec.data.data()),
             static_cast<std::streamsize>(rec.data.size() * sizeof(double)));
  }
  if (!os) throw IntegrityError("container: write failed for " + path.string());
}

Container load_container(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IntegrityError("container: cannot open " + path.string());

  char magic[8];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw IntegrityError("container: bad magic in " + path.string());
  }
  const auto version = read_le<std::uint16_t>(is, "version");
  if (version != kFormatVersion) {
    throw IntegrityError("container: unsupported format version " +
                         std::to_string(version));
  }
  Container c;
  c.kind = read_le<std::uint32_t>(is, "kind");
  if (c.kind != kContainerKindModel && c.kind != kContainerKindImportance) {
    throw IntegrityError("container: unknown kind " + std::to_string(c.kind));
  }
  const auto meta_hash = read_le<std::uint64_t>(is, "meta hash");
  const auto meta_len = read_le<std::uint32_t>(is, "meta length");
  c.meta_json.resize(meta_len);
  is.read(c.meta_json.data(), meta_len);
  if (!is) throw IntegrityError("container: truncated meta block");
  if (fnv1a64(c.meta_json) != meta_hash) {
    throw IntegrityError("container: meta hash mismatch in " + path.string());
  }

  const auto n_records = read_le<std::uint32_t>(is, "record count");
  c.records.reserve(n_records);
  for (std::uint32_t i = 0; i < n_records; ++i) {
    NamedArrayRecord rec;
    const auto name_len = read_le<std::uint32_t>(is, "record name length");
    rec.name.resize(name_len);
    is.read(rec.name.data(), name_len);
    if (!is) throw IntegrityError("container: truncated record name");
    const auto ndim = read_le<std::uint32_t>(is, "record rank");
    if (ndim > 8) throw IntegrityError("container: implausible rank");
    rec.shape.resize(ndim);
    std::int64_t count = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      rec.shape[d] = read_le<std::int64_t>(is, "record extent");
      if (rec.shape[d] <= 0 || rec.shape[d] > (1 << 28)) {
        throw IntegrityError("container: implausible extent");
      }
      count *= rec.shape[d];
    }
    rec.data.resize(static_cast<std::size_t>(count));
    is.read(reinterpret_cast<char*>(rec.data.data()),
            static_cast<std::streamsize>(rec.data.size() * sizeof(double)));
    if (!is) {
      throw IntegrityError("container: truncated payload for record '" +
                           rec.name + "'");
    }
    c.records.push_back(std::move(rec));
  }
  return c;
}

void save_model(const TransformerLM& model, const std::filesystem::path& path) {
  Container c;
  c.kind = kContainerKindModel;
  c.meta_json = model_config_to_json(model.config());
  for (const auto& [name, t] : model.parameters()) {
    c.records.push_back({name, t.shape(),
                         std::vector<double>(t.values().begin(), t.values().end())});
  }
  save_container(c, path);
}

TransformerLM load_model(const std::filesystem::path& path) {
  const Container c = load_container(path);
  if (c.kind != kContainerKindModel) {
    throw IntegrityError("checkpoint: " + path.string() +
                         " is not a model container");
  }
  const ModelConfig cfg = model_config_from_json(c.meta_json);
  TransformerLM model(cfg);
  auto params = model.parameters();
  if (params.size() != c.records.size()) {
    throw IntegrityError(
        "checkpoint: parameter registry differs (" +
        std::to_string(c.records.size()) + " records vs " +
        std::to_string(params.size()) + " parameters)");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& [name, t] = params[i];
    const NamedArrayRecord& rec = c.records[i];
    if (rec.name != name || rec.shape != t.shape()) {
      throw IntegrityError("checkpoint: record '" + rec.name +
                           "' does not match parameter '" + name + "'");
    }
    std::copy(rec.data.begin(), rec.data.end(), t.values().begin());
  }
  return model;
}

TransformerLM load_model(const std::filesystem::path& path,
                         const ModelConfig& expected) {
  TransformerLM model = load_model(path);
  if (model_config_hash(model.config()) != model_config_hash(expected)) {
    throw IntegrityError("checkpoint: stored model config does not match " +
                         std::string("the requested config"));
  }
  return model;
}

}  // namespace drift
