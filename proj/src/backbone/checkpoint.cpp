#include "promptmed/backbone/checkpoint.hpp"

#include <bit>
#include <chrono>
#include <cstring>
#include <ctime>
#include <fstream>
#include <iterator>
#include <stdexcept>

#include "promptmed/core/errors.hpp"

namespace promptmed {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'P', 'M', 'E', 'D', 'C', 'K', 'P', 'T'};

const char* scope_name(TrainableScope) { return "prompt_encoder_only"; }

nlohmann::json descriptor_json(const BackboneDescriptor& d) {
  return {{"name", d.name},
          {"embed_dim", d.embed_dim},
          {"input_size", {d.input_height, d.input_width}},
          {"trainable_scope", scope_name(d.trainable_scope)}};
}

BackboneDescriptor descriptor_from(const nlohmann::json& j) {
  BackboneDescriptor d;
  d.name = j.at("name").get<std::string>();
  d.embed_dim = j.at("embed_dim").get<int>();
  d.input_height = j.at("input_size").at(0).get<int>();
  d.input_width = j.at("input_size").at(1).get<int>();
  if (j.at("trainable_scope").get<std::string>() != "prompt_encoder_only")
    throw std::invalid_argument("unsupported trainable scope");
  return d;
}

}  // namespace

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::vector<std::uint8_t> Checkpoint::to_bytes() const {
  nlohmann::json header;
  header["format"] = kCheckpointFormat;
  header["backbone"] = descriptor_json(descriptor);
  header["created"] = created;
  header["metadata"] = metadata;
  header["arrays"] = nlohmann::json::array();
  header["scalars"] = nlohmann::json::object();
  for (const auto& [sec, js] : scalars) header["scalars"][sec] = js;
  std::size_t offset = 0;
  for (const auto& [sec, arrays] : sections)
    for (const auto& a : arrays) {
      header["arrays"].push_back(
          {{"section", sec}, {"name", a.name}, {"shape", a.shape}, {"offset", offset}, {"count", a.values.size()}});
      offset += a.values.size();
    }
  const std::string hs = header.dump();
  std::vector<std::uint8_t> out(sizeof kMagic + 8 + hs.size() + offset * 8);
  std::uint8_t* p = out.data();
  std::memcpy(p, kMagic, sizeof kMagic);
  p += sizeof kMagic;
  const std::uint64_t n = hs.size();
  std::memcpy(p, &n, 8);
  p += 8;
  std::memcpy(p, hs.data(), hs.size());
  p += hs.size();
  for (const auto& [sec, arrays] : sections)
    for (const auto& a : arrays) {
      std::memcpy(p, a.values.data(), a.values.size() * 8);
      p += a.values.size() * 8;
    }
  return out;
}

Checkpoint Checkpoint::from_bytes(const std::vector<std::uint8_t>& bytes, const std::string& origin) {
  auto fail = [&](const std::string& why) -> IoError { return IoError(origin, "bad checkpoint: " + why); };
  if (bytes.size() < sizeof kMagic + 8 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0)
    throw fail("missing magic");
  std::uint64_t n = 0;
  std::memcpy(&n, bytes.data() + sizeof kMagic, 8);
  const std::size_t blob_at = sizeof kMagic + 8 + n;
  if (n > bytes.size() || blob_at > bytes.size()) throw fail("truncated header");
  Checkpoint ck;
  try {
    const auto header = nlohmann::json::parse(bytes.begin() + sizeof kMagic + 8, bytes.begin() + blob_at);
    if (header.at("format").get<std::string>() != kCheckpointFormat) throw fail("unsupported format");
    ck.descriptor = descriptor_from(header.at("backbone"));
    ck.created = header.at("created").get<std::string>();
    ck.metadata = header.at("metadata");
    for (auto& [sec, js] : header.at("scalars").items()) ck.scalars[sec] = js;
    const std::size_t blob_values = (bytes.size() - blob_at) / 8;
    for (const auto& a : header.at("arrays")) {
      NamedArray arr;
      arr.name = a.at("name").get<std::string>();
      arr.shape = a.at("shape").get<std::vector<std::size_t>>();
      const auto off = a.at("offset").get<std::size_t>(), cnt = a.at("count").get<std::size_t>();
      if (off + cnt > blob_values) throw fail("array '" + arr.name + "' runs past end of file");
      arr.values.resize(cnt);
      std::memcpy(arr.values.data(), bytes.data() + blob_at + off * 8, cnt * 8);
      ck.sections[a.at("section").get<std::string>()].push_back(std::move(arr));
    }
  } catch (const nlohmann::json::exception& e) {
    throw fail(e.what());
  } catch (const std::invalid_argument& e) {
    throw fail(e.what());
  }
  return ck;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  const auto bytes = to_bytes();
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw IoError(path.string(), "cannot open for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError(path.string(), "write failed");
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError(path.string(), "cannot open checkpoint");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return from_bytes(bytes, path.string());
}

Checkpoint make_checkpoint(const Backbone& backbone, const PromptEncoderState& state) {
  state.validate();
  Checkpoint ck;
  ck.descriptor = backbone.descriptor();
  ck.created = utc_timestamp();
  ck.sections[kPromptEncoderSection] = state.parameters;
  nlohmann::json kinds = nlohmann::json::array();
  for (auto k : state.supported) kinds.push_back(k == PromptKind::Point ? "point" : k == PromptKind::Box ? "box" : "mask");
  ck.scalars[kPromptEncoderSection] = {{"prompt_types_supported", kinds}};
  return ck;
}

PromptEncoderState prompt_state_from(const Checkpoint& ckpt, const Backbone& backbone) {
  if (ckpt.descriptor.name != backbone.descriptor().name || ckpt.descriptor.embed_dim != backbone.descriptor().embed_dim)
    throw std::invalid_argument("checkpoint is for backbone '" + ckpt.descriptor.name + "'");
  const auto it = ckpt.sections.find(kPromptEncoderSection);
  if (it == ckpt.sections.end()) throw std::invalid_argument("checkpoint has no prompt_encoder section");
  PromptEncoderState s = backbone.initial_state();
  if (s.parameters.size() != it->second.size()) throw std::invalid_argument("checkpoint parameter count mismatch");
  for (const auto& a : it->second) {
    auto& dst = s.at(a.name);
    if (dst.shape != a.shape) throw std::invalid_argument("checkpoint shape mismatch for " + a.name);
    dst.values = a.values;
  }
  s.validate();
  return s;
}

}  // namespace promptmed
