#include "layoutseq/checkpoint.hpp"

#include <bit>
#include <cstring>

#include <nlohmann/json.hpp>

#include "layoutseq/error.hpp"
#include "layoutseq/io.hpp"

namespace layoutseq {

namespace {

constexpr char kMagic[8] = {'L', 'S', 'E', 'Q', 'C', 'K', 'P', 'T'};

template <typename T>
void put_le(std::string& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xff));
  }
}

template <typename T>
T get_le(const std::string& in, std::size_t offset) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[offset + i])) << (8 * i);
  }
  return static_cast<T>(v);
}

}  // namespace

const NamedArray* Checkpoint::find(const std::string& name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return &a;
  }
  return nullptr;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  nlohmann::ordered_json header;
  header["format"] = "layoutseq-checkpoint";
  header["version"] = kCheckpointVersion;
  header["step"] = checkpoint.step;
  header["meta"] = nlohmann::ordered_json::parse(checkpoint.meta_json);
  header["tensors"] = nlohmann::ordered_json::array();
  std::size_t offset = 0;
  for (const auto& a : checkpoint.arrays) {
    if (shape_numel(a.shape) != a.values.size()) {
      throw DimensionError("checkpoint array '" + a.name + "' has shape " + shape_str(a.shape) +
                           " but " + std::to_string(a.values.size()) + " values");
    }
    header["tensors"].push_back({{"name", a.name},
                                 {"shape", a.shape},
                                 {"offset", offset},
                                 {"count", a.values.size()}});
    offset += a.values.size() * sizeof(float);
  }
  const std::string header_text = header.dump();

  std::string out(kMagic, sizeof(kMagic));
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint64_t>(out, header_text.size());
  out += header_text;
  out.reserve(out.size() + offset);
  for (const auto& a : checkpoint.arrays) {
    for (Real v : a.values) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  write_file_atomic(path, out);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  const std::string where = "checkpoint " + path.string();
  if (bytes.size() < 20 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw DataError(where + ": bad magic");
  }
  const auto version = get_le<std::uint32_t>(bytes, 8);
  if (version != kCheckpointVersion) {
    throw DataError(where + ": unsupported version " + std::to_string(version));
  }
  const auto header_len = get_le<std::uint64_t>(bytes, 12);
  if (20 + header_len > bytes.size()) throw DataError(where + ": truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(20, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(where + ": header is not JSON: " + e.what());
  }
  const std::size_t payload = 20 + header_len;
  Checkpoint ckpt;
  try {
    ckpt.step = header.at("step").get<std::int64_t>();
    ckpt.meta_json = header.value("meta", nlohmann::json::object()).dump();
    for (const auto& t : header.at("tensors")) {
      NamedArray a;
      a.name = t.at("name").get<std::string>();
      a.shape = t.at("shape").get<Shape>();
      const auto offset = t.at("offset").get<std::size_t>();
      const auto count = t.at("count").get<std::size_t>();
      if (shape_numel(a.shape) != count) throw DataError(where + ": shape/count mismatch for " + a.name);
      if (payload + offset + count * sizeof(float) > bytes.size()) {
        throw DataError(where + ": truncated payload for " + a.name);
      }
      a.values.resize(count);
      for (std::size_t i = 0; i < count; ++i) {
        const auto raw = get_le<std::uint32_t>(bytes, payload + offset + i * sizeof(float));
        a.values[i] = static_cast<Real>(std::bit_cast<float>(raw));
      }
      ckpt.arrays.push_back(std::move(a));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(where + ": malformed header: " + e.what());
  }
  return ckpt;
}

}  // namespace layoutseq
