#include "promptmed/service/service.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "promptmed/assist/model.hpp"
#include "promptmed/assist/trainer.hpp"
#include "promptmed/backbone/checkpoint.hpp"
#include "promptmed/backbone/prompt_json.hpp"
#include "promptmed/backbone/toy_backbone.hpp"
#include "promptmed/core/errors.hpp"
#include "promptmed/core/hashing.hpp"
#include "promptmed/core/rle.hpp"
#include "promptmed/data/io.hpp"
#include "promptmed/promptgen/classifier.hpp"
#include "promptmed/promptgen/propagation.hpp"
#include "promptmed/sapnet/auto.hpp"
#include "promptmed/service/configs.hpp"
#include "promptmed/service/tar.hpp"

namespace fs = std::filesystem;

namespace promptmed {

struct Session {
  std::string id;
  std::string content_hash;
  std::string source;
  std::string created;
  bool is_2d = false;
  Volume volume;

  std::mutex mu;  // everything below
  std::map<int, CommittedMask> committed;
  std::map<int, PromptSet> pending;
  std::map<int, Proposal> proposals;
  std::shared_ptr<const PromptEncoderState> theta;  // null: backbone default
  std::shared_ptr<const SapNet> sapnet;
  std::vector<AuditEvent> audit;
  SessionStatus status = SessionStatus::Idle;
  std::optional<std::string> active_job;
  std::int64_t last_mono = 0;

  std::mutex persist_mu;  // serializes disk writes
};

namespace {

std::string random_hex(int bytes) {
  static std::mutex m;
  static std::mt19937_64 eng(std::random_device{}());
  std::lock_guard lock(m);
  std::ostringstream os;
  for (int i = 0; i < bytes; i += 8) os << hex64(eng());
  return os.str().substr(0, 2 * static_cast<std::size_t>(bytes));
}

std::string iso_now_ms() {
  const auto now = std::chrono::system_clock::now();
  const auto t = std::chrono::system_clock::to_time_t(now);
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d:%02d.%03dZ", tm.tm_year + 1900, tm.tm_mon + 1, tm.tm_mday,
                tm.tm_hour, tm.tm_min, tm.tm_sec, static_cast<int>(ms));
  return buf;
}

std::vector<std::uint8_t> read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError(p.string(), "cannot open");
  return {std::istreambuf_iterator<char>(in), {}};
}

void write_atomic(const fs::path& p, const std::string& data) {
  const fs::path tmp = p.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(tmp.string(), "cannot open for writing");
    out << data;
    if (!out) throw IoError(tmp.string(), "write failed");
  }
  fs::rename(tmp, p);
}

// Scratch file that removes itself.
struct TempFile {
  fs::path path;
  TempFile(const fs::path& dir, const std::string& ext) : path(dir / ("tmp-" + random_hex(8) + ext)) {
    fs::create_directories(dir);
  }
  ~TempFile() {
    std::error_code ec;
    fs::remove(path, ec);
  }
};

enum class UploadKind { Nifti, NiftiGz, Png, Tiff };

UploadKind sniff(const std::vector<std::uint8_t>& b, const std::string& name) {
  auto ends = [&](const char* s) {
    const std::string e(s);
    return name.size() >= e.size() && name.compare(name.size() - e.size(), e.size(), e) == 0;
  };
  if (b.size() >= 8 && b[0] == 0x89 && b[1] == 'P' && b[2] == 'N' && b[3] == 'G') return UploadKind::Png;
  if (b.size() >= 4 && ((b[0] == 'I' && b[1] == 'I' && b[2] == 42 && b[3] == 0) ||
                        (b[0] == 'M' && b[1] == 'M' && b[2] == 0 && b[3] == 42)))
    return UploadKind::Tiff;
  if (b.size() >= 2 && b[0] == 0x1f && b[1] == 0x8b) return UploadKind::NiftiGz;
  if (b.size() >= 352) return UploadKind::Nifti;
  if (ends(".png")) return UploadKind::Png;
  if (ends(".tif") || ends(".tiff")) return UploadKind::Tiff;
  throw ServiceError(400, "unrecognized upload format");
}

Volume volume_from_grid(const VoxelGrid& g) {
  return Volume::from_dense(g.depth, g.height, g.width, g.values, g.spacing);
}

int slice_arg(const Session& s, int slice) {
  if (slice < 0 || slice >= s.volume.depth())
    throw ServiceError(422, "slice " + std::to_string(slice) + " outside 0.." + std::to_string(s.volume.depth() - 1));
  return slice;
}

PromptSet parse_prompts(const nlohmann::json& j) {
  try {
    return prompt_set_from_json(j);
  } catch (const std::exception& e) {
    throw ServiceError(400, e.what());
  }
}

LabelMask parse_mask(const nlohmann::json& j) {
  try {
    return rle_decode(j);
  } catch (const std::exception& e) {
    throw ServiceError(400, e.what());
  }
}

template <class F>
auto config_or_400(F f) {
  try {
    return f();
  } catch (const ConfigError& e) {
    throw ServiceError(400, e.what());
  } catch (const nlohmann::json::exception& e) {
    throw ServiceError(400, e.what());
  }
}

Mask3D committed_volume(const Session& s) {
  Mask3D m(s.volume.depth(), s.volume.height(), s.volume.width());
  for (const auto& [z, c] : s.committed) m.set_slice(z, c.mask);
  return m;
}

}  // namespace

// ---------------------------------------------------------------- enums, json

const char* to_string(JobKind k) {
  switch (k) {
    case JobKind::AssistTrain: return "assist_train";
    case JobKind::SapnetTrain: return "sapnet_train";
    case JobKind::Auto: return "auto";
    case JobKind::Propagate: return "propagate";
  }
  return "?";
}

const char* to_string(JobState s) {
  switch (s) {
    case JobState::Queued: return "queued";
    case JobState::Running: return "running";
    case JobState::Done: return "done";
    case JobState::Failed: return "failed";
    case JobState::Cancelled: return "cancelled";
  }
  return "?";
}

const char* to_string(SessionStatus s) {
  switch (s) {
    case SessionStatus::Idle: return "idle";
    case SessionStatus::Training: return "training";
    case SessionStatus::AutoRunning: return "auto_running";
  }
  return "?";
}

nlohmann::json JobTicket::to_json() const {
  nlohmann::json j{{"job_id", id},     {"session_id", session_id}, {"kind", promptmed::to_string(kind)},
                   {"state", promptmed::to_string(state)}, {"progress", progress}, {"seconds", seconds},
                   {"result", result}};
  j["error"] = error.empty() ? nlohmann::json(nullptr) : nlohmann::json(error);
  return j;
}

nlohmann::json AuditEvent::to_json() const {
  return {{"seq", seq}, {"time", time}, {"mono_us", mono_us}, {"kind", kind}, {"detail", detail}};
}

// ---------------------------------------------------------------- config

ServiceConfig ServiceConfig::load(const std::optional<fs::path>& file) {
  ServiceConfig c;
  if (file) {
    std::ifstream in(*file);
    if (!in) throw ConfigError(file->string() + ": cannot open config file");
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const std::exception& e) {
      throw ConfigError(file->string() + ": " + e.what());
    }
    if (!j.is_object()) throw ConfigError(file->string() + ": expected an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
      const auto& k = it.key();
      try {
        if (k == "host") c.host = it->get<std::string>();
        else if (k == "port") c.port = it->get<int>();
        else if (k == "data_dir") c.data_dir = it->get<std::string>();
        else if (k == "backbone") c.backbone = it->get<std::string>();
        else if (k == "backbone_seed") c.backbone_seed = it->get<std::uint64_t>();
        else if (k == "http_threads") c.http_threads = it->get<int>();
        else throw ConfigError(file->string() + ": unknown key '" + k + "'");
      } catch (const nlohmann::json::exception&) {
        throw ConfigError(file->string() + ": key '" + k + "' has the wrong type");
      }
    }
  }
  c.apply_env();
  if (c.port < 0 || c.port > 65535) throw ConfigError("port out of range");
  if (c.http_threads < 1) throw ConfigError("http_threads must be >= 1");
  return c;
}

void ServiceConfig::apply_env() {
  if (const char* p = std::getenv("PROMPTMED_PORT")) {
    char* end = nullptr;
    const long v = std::strtol(p, &end, 10);
    if (!*p || *end || v < 0 || v > 65535) throw ConfigError(std::string("PROMPTMED_PORT: bad value '") + p + "'");
    port = static_cast<int>(v);
  }
  if (const char* d = std::getenv("PROMPTMED_DATA_DIR")) data_dir = d;
  if (const char* b = std::getenv("PROMPTMED_BACKBONE")) backbone = b;
}

std::unique_ptr<Backbone> make_backbone(const std::string& name, std::uint64_t seed) {
  if (name == "toy") {
    ToyBackboneConfig c;
    if (seed) c.seed = seed;
    return std::make_unique<ToyBackbone>(c);
  }
  throw ConfigError("unknown backbone '" + name + "' (available: toy)");
}

// ---------------------------------------------------------------- lifecycle

AnnotationService::AnnotationService(ServiceConfig cfg, std::shared_ptr<const Backbone> backbone)
    : cfg_(std::move(cfg)), backbone_(std::move(backbone)), cache_(std::make_unique<EmbeddingCache>(*backbone_)) {
  fs::create_directories(cfg_.data_dir / "sessions");
  fs::create_directories(cfg_.data_dir / "volumes");
}

AnnotationService::~AnnotationService() {
  {
    std::lock_guard lock(mu_);
    for (auto& [_, f] : cancel_flags_) f->store(true);
  }
  for (auto& t : workers_)
    if (t.joinable()) t.join();
}

fs::path AnnotationService::session_dir(const std::string& id) const { return cfg_.data_dir / "sessions" / id; }

void AnnotationService::audit_event(Session& s, const std::string& kind, nlohmann::json detail) {
  // caller holds s.mu
  AuditEvent e;
  e.seq = s.audit.empty() ? 1 : s.audit.back().seq + 1;
  e.time = iso_now_ms();
  const std::int64_t now =
      std::chrono::duration_cast<std::chrono::microseconds>(std::chrono::system_clock::now().time_since_epoch()).count();
  e.mono_us = std::max(now, s.last_mono + 1);
  s.last_mono = e.mono_us;
  e.kind = kind;
  e.detail = std::move(detail);
  s.audit.push_back(e);
  std::lock_guard plock(s.persist_mu);
  std::ofstream out(session_dir(s.id) / "audit.jsonl", std::ios::app);
  out << e.to_json().dump() << "\n";
}

void AnnotationService::persist(Session& s) {
  // caller holds s.mu
  nlohmann::json j{{"id", s.id},         {"content_hash", s.content_hash}, {"source", s.source},
                   {"created", s.created}, {"is_2d", s.is_2d},             {"volume", s.content_hash + ".nii.gz"}};
  nlohmann::json committed = nlohmann::json::object();
  for (const auto& [z, c] : s.committed)
    committed[std::to_string(z)] = {{"version", c.version}, {"mask", rle_encode(c.mask)}};
  j["committed"] = committed;
  nlohmann::json pending = nlohmann::json::object();
  for (const auto& [z, p] : s.pending) pending[std::to_string(z)] = to_json(p);
  j["pending"] = pending;
  nlohmann::json props = nlohmann::json::object();
  for (const auto& [z, p] : s.proposals)
    props[std::to_string(z)] = {{"mask", rle_encode(p.mask)}, {"provenance", p.provenance}, {"job_id", p.job_id}};
  j["proposals"] = props;
  j["theta"] = s.theta ? nlohmann::json{{"file", "assist.ckpt"}, {"hash", hex64(s.theta->hash())}} : nlohmann::json();
  j["sapnet"] = s.sapnet ? nlohmann::json{{"file", "sapnet.ckpt"}} : nlohmann::json();
  std::lock_guard plock(s.persist_mu);
  write_atomic(session_dir(s.id) / "session.json", j.dump(1));
}

std::shared_ptr<Session> AnnotationService::load_from_disk(const std::string& id) {
  if (id.empty() || id.find_first_not_of("0123456789abcdef") != std::string::npos) return nullptr;
  const auto dir = session_dir(id);
  if (!fs::exists(dir / "session.json")) return nullptr;
  nlohmann::json j;
  {
    std::ifstream in(dir / "session.json");
    j = nlohmann::json::parse(in);
  }
  auto s = std::make_shared<Session>();
  s->id = id;
  s->content_hash = j.at("content_hash");
  s->source = j.at("source");
  s->created = j.at("created");
  s->is_2d = j.at("is_2d");
  s->volume = volume_from_grid(read_nifti(cfg_.data_dir / "volumes" / j.at("volume").get<std::string>()));
  for (auto it = j["committed"].begin(); it != j["committed"].end(); ++it)
    s->committed[std::stoi(it.key())] = {rle_decode((*it)["mask"]), (*it)["version"]};
  for (auto it = j["pending"].begin(); it != j["pending"].end(); ++it)
    s->pending[std::stoi(it.key())] = prompt_set_from_json(*it);
  for (auto it = j["proposals"].begin(); it != j["proposals"].end(); ++it)
    s->proposals[std::stoi(it.key())] = {rle_decode((*it)["mask"]), (*it)["provenance"], (*it)["job_id"]};
  if (!j["theta"].is_null())
    s->theta = std::make_shared<const PromptEncoderState>(prompt_state_from(Checkpoint::load(dir / "assist.ckpt"), *backbone_));
  if (!j["sapnet"].is_null())
    s->sapnet = std::make_shared<const SapNet>(load_sapnet(Checkpoint::load(dir / "sapnet.ckpt"), *backbone_));
  if (std::ifstream in(dir / "audit.jsonl"); in) {
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto e = nlohmann::json::parse(line);
      s->audit.push_back({e["seq"], e["time"], e["mono_us"], e["kind"], e["detail"]});
      s->last_mono = std::max(s->last_mono, s->audit.back().mono_us);
    }
  }
  return s;
}

std::shared_ptr<Session> AnnotationService::get(const std::string& id) {
  {
    std::lock_guard lock(mu_);
    if (auto it = sessions_.find(id); it != sessions_.end()) return it->second;
  }
  std::shared_ptr<Session> s;
  try {
    s = load_from_disk(id);
  } catch (const std::exception& e) {
    throw ServiceError(500, "session " + id + " is unreadable: " + e.what());
  }
  if (!s) throw ServiceError(404, "unknown session " + id);
  std::lock_guard lock(mu_);
  return sessions_.emplace(id, s).first->second;  // first loader wins
}

std::vector<std::string> AnnotationService::session_ids() {
  std::vector<std::string> ids;
  for (const auto& e : fs::directory_iterator(cfg_.data_dir / "sessions"))
    if (fs::exists(e.path() / "session.json")) ids.push_back(e.path().filename().string());
  std::sort(ids.begin(), ids.end());
  return ids;
}

// ---------------------------------------------------------------- sessions

nlohmann::json AnnotationService::create_from_volume(Volume v, bool is_2d, const std::string& hash,
                                                     const std::string& source, std::optional<fs::path>) {
  const fs::path vol_path = cfg_.data_dir / "volumes" / (hash + ".nii.gz");
  if (!fs::exists(vol_path)) {
    const fs::path tmp = vol_path.string() + "." + random_hex(4) + ".tmp.nii.gz";
    write_volume_nifti(tmp, v);
    fs::rename(tmp, vol_path);
  }
  auto s = std::make_shared<Session>();
  s->id = random_hex(16);
  s->content_hash = hash;
  s->source = source;
  s->created = iso_now_ms();
  s->is_2d = is_2d;
  s->volume = std::move(v);
  fs::create_directories(session_dir(s->id));
  {
    std::lock_guard lock(s->mu);
    audit_event(*s, "session_created",
                {{"content_hash", hash}, {"source", source}, {"shape", {s->volume.depth(), s->volume.height(), s->volume.width()}}});
    persist(*s);
  }
  {
    std::lock_guard lock(mu_);
    sessions_[s->id] = s;
  }
  return session_info(s->id);
}

nlohmann::json AnnotationService::create_session(const std::vector<std::uint8_t>& bytes, const std::string& name) {
  if (bytes.empty()) throw ServiceError(400, "empty upload");
  const std::string hash = sha256_hex(bytes);
  const auto kind = sniff(bytes, name);
  static const char* ext[] = {".nii", ".nii.gz", ".png", ".tif"};
  TempFile tmp(cfg_.data_dir / "tmp", ext[static_cast<int>(kind)]);
  {
    std::ofstream out(tmp.path, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }
  Volume v;
  bool is_2d = false;
  try {
    if (kind == UploadKind::Png || kind == UploadKind::Tiff) {
      const auto img = read_image2d(tmp.path);
      v = Volume::from_dense(1, img.height(), img.width(), img.values());
      is_2d = true;
    } else {
      v = volume_from_grid(read_nifti(tmp.path));
    }
    v.validate();
  } catch (const std::exception& e) {
    std::string msg = e.what();
    // do not leak the scratch path
    if (auto p = msg.find(tmp.path.string()); p != std::string::npos) msg.replace(p, tmp.path.string().size(), name.empty() ? "upload" : name);
    throw ServiceError(400, "cannot parse upload: " + msg);
  }
  return create_from_volume(std::move(v), is_2d, hash, name.empty() ? "upload" : name, std::nullopt);
}

nlohmann::json AnnotationService::create_session_from_manifest(const fs::path& manifest, const std::string& case_id) {
  LoadedCase lc;
  std::string hash;
  try {
    const auto m = read_manifest(manifest);
    const auto& e = m.at(case_id);
    lc = load_case(e, m.base_dir);
    std::vector<std::uint8_t> all;
    for (const auto& p : e.images) {
      const auto b = read_bytes(p.is_absolute() ? p : m.base_dir / p);
      all.insert(all.end(), b.begin(), b.end());
    }
    hash = sha256_hex(all);
  } catch (const ServiceError&) {
    throw;
  } catch (const std::exception& e) {
    throw ServiceError(400, e.what());
  }
  return create_from_volume(std::move(lc.volume), lc.is_2d, hash, "manifest:" + manifest.string() + "#" + case_id,
                            std::nullopt);
}

nlohmann::json AnnotationService::session_info(const std::string& id) {
  auto s = get(id);
  std::lock_guard lock(s->mu);
  nlohmann::json committed = nlohmann::json::array();
  for (const auto& [z, c] : s->committed) committed.push_back({{"slice", z}, {"version", c.version}, {"pixels", c.mask.count()}});
  nlohmann::json props = nlohmann::json::array();
  for (const auto& [z, _] : s->proposals) props.push_back(z);
  return {{"session_id", s->id},
          {"content_hash", s->content_hash},
          {"source", s->source},
          {"created", s->created},
          {"is_2d", s->is_2d},
          {"shape", {s->volume.depth(), s->volume.height(), s->volume.width()}},
          {"spacing", s->volume.spacing},
          {"status", to_string(s->status)},
          {"active_job", s->active_job ? nlohmann::json(*s->active_job) : nlohmann::json()},
          {"committed", committed},
          {"proposals", props},
          {"theta", s->theta ? nlohmann::json{{"trained", true}, {"hash", hex64(s->theta->hash())}}
                             : nlohmann::json{{"trained", false}}},
          {"sapnet_trained", s->sapnet != nullptr},
          {"audit_events", s->audit.size()}};
}

SliceImage AnnotationService::slice_image(const std::string& id, int slice) {
  auto s = get(id);
  return s->volume.slices[slice_arg(*s, slice)];
}

nlohmann::json AnnotationService::predict(const std::string& id, int slice, const nlohmann::json& body) {
  auto s = get(id);
  slice_arg(*s, slice);
  const PromptSet prompts = parse_prompts(body);
  try {
    validate_prompts(prompts, s->volume.height(), s->volume.width());
  } catch (const std::invalid_argument& e) {
    throw ServiceError(422, e.what());
  }
  std::shared_ptr<const PromptEncoderState> theta;
  {
    std::lock_guard lock(s->mu);
    theta = s->theta;  // snapshot: a concurrent swap cannot tear this
  }
  const PromptEncoderState state = theta ? *theta : backbone_->initial_state();
  const auto emb = cache_->get(s->volume.slices[slice]);
  const auto pred = backbone_->predict(*emb, prompts, state);
  const auto mask = threshold_mask(pred.logits, 0.0);
  return {{"slice", slice},
          {"mask", rle_encode(mask)},
          {"quality", pred.quality},
          {"theta", {{"trained", theta != nullptr}, {"hash", hex64(state.hash())}}}};
}

nlohmann::json AnnotationService::set_pending(const std::string& id, int slice, const nlohmann::json& body) {
  auto s = get(id);
  slice_arg(*s, slice);
  const PromptSet prompts = parse_prompts(body);
  try {
    validate_prompts(prompts, s->volume.height(), s->volume.width());
  } catch (const std::invalid_argument& e) {
    throw ServiceError(422, e.what());
  }
  std::lock_guard lock(s->mu);
  s->pending[slice] = prompts;
  audit_event(*s, "pending_prompts", {{"slice", slice}, {"count", prompts.size()}});
  persist(*s);
  return {{"slice", slice}, {"prompts", to_json(prompts)}};
}

nlohmann::json AnnotationService::commit(const std::string& id, int slice, const nlohmann::json& rle,
                                         const std::string& source) {
  auto s = get(id);
  slice_arg(*s, slice);
  const LabelMask m = parse_mask(rle);
  if (m.height() != s->volume.height() || m.width() != s->volume.width())
    throw ServiceError(422, "mask shape " + std::to_string(m.height()) + "x" + std::to_string(m.width()) +
                                " does not match slice " + std::to_string(s->volume.height()) + "x" +
                                std::to_string(s->volume.width()));
  std::lock_guard lock(s->mu);
  auto& c = s->committed[slice];
  c.mask = m;
  ++c.version;
  s->proposals.erase(slice);
  audit_event(*s, "commit", {{"slice", slice}, {"version", c.version}, {"pixels", m.count()}, {"source", source}});
  persist(*s);
  return {{"slice", slice}, {"version", c.version}};
}

nlohmann::json AnnotationService::committed(const std::string& id, int slice) {
  auto s = get(id);
  slice_arg(*s, slice);
  std::lock_guard lock(s->mu);
  auto it = s->committed.find(slice);
  if (it == s->committed.end()) throw ServiceError(404, "slice " + std::to_string(slice) + " has no committed mask");
  return {{"slice", slice}, {"version", it->second.version}, {"mask", rle_encode(it->second.mask)}};
}

nlohmann::json AnnotationService::proposals(const std::string& id) {
  auto s = get(id);
  std::lock_guard lock(s->mu);
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& [z, p] : s->proposals)
    arr.push_back({{"slice", z}, {"pixels", p.mask.count()}, {"job_id", p.job_id}, {"provenance", p.provenance}});
  return arr;
}

nlohmann::json AnnotationService::proposal(const std::string& id, int slice) {
  auto s = get(id);
  slice_arg(*s, slice);
  std::lock_guard lock(s->mu);
  auto it = s->proposals.find(slice);
  if (it == s->proposals.end()) throw ServiceError(404, "no proposal for slice " + std::to_string(slice));
  return {{"slice", slice}, {"mask", rle_encode(it->second.mask)}, {"provenance", it->second.provenance},
          {"job_id", it->second.job_id}};
}

nlohmann::json AnnotationService::accept_proposal(const std::string& id, int slice) {
  const auto p = proposal(id, slice);
  return commit(id, slice, p["mask"], "proposal:" + p["job_id"].get<std::string>());
}

nlohmann::json AnnotationService::reject_proposal(const std::string& id, int slice) {
  auto s = get(id);
  slice_arg(*s, slice);
  std::lock_guard lock(s->mu);
  if (!s->proposals.erase(slice)) throw ServiceError(404, "no proposal for slice " + std::to_string(slice));
  audit_event(*s, "proposal_rejected", {{"slice", slice}});
  persist(*s);
  return {{"slice", slice}, {"rejected", true}};
}

nlohmann::json AnnotationService::audit(const std::string& id) {
  auto s = get(id);
  std::lock_guard lock(s->mu);
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& e : s->audit) arr.push_back(e.to_json());
  return arr;
}

// ---------------------------------------------------------------- jobs

void AnnotationService::update_job(const std::string& job_id, const std::function<void(JobTicket&)>& f) {
  {
    std::lock_guard lock(mu_);
    f(jobs_.at(job_id));
  }
  job_cv_.notify_all();
}

JobTicket AnnotationService::job(const std::string& job_id) {
  std::lock_guard lock(mu_);
  auto it = jobs_.find(job_id);
  if (it == jobs_.end()) throw ServiceError(404, "unknown job " + job_id);
  return it->second;
}

JobTicket AnnotationService::cancel_job(const std::string& job_id) {
  std::lock_guard lock(mu_);
  auto it = jobs_.find(job_id);
  if (it == jobs_.end()) throw ServiceError(404, "unknown job " + job_id);
  if (!is_terminal(it->second.state)) cancel_flags_.at(job_id)->store(true);
  return it->second;
}

JobTicket AnnotationService::wait_job(const std::string& job_id, std::chrono::milliseconds timeout) {
  std::unique_lock lock(mu_);
  auto it = jobs_.find(job_id);
  if (it == jobs_.end()) throw ServiceError(404, "unknown job " + job_id);
  job_cv_.wait_for(lock, timeout, [&] { return is_terminal(jobs_.at(job_id).state); });
  return jobs_.at(job_id);
}

JobTicket AnnotationService::launch(const std::shared_ptr<Session>& s, JobKind kind, nlohmann::json request,
                                    std::function<nlohmann::json(Session&, JobTicket&, const std::atomic<bool>&)> body) {
  JobTicket t;
  t.id = "job-" + std::to_string(next_job_++) + "-" + random_hex(4);
  t.session_id = s->id;
  t.kind = kind;
  auto flag = std::make_shared<std::atomic<bool>>(false);
  {
    std::lock_guard lock(s->mu);
    if (s->active_job) throw ServiceError(409, "session already runs job " + *s->active_job);
    s->active_job = t.id;
    s->status = kind == JobKind::AssistTrain || kind == JobKind::SapnetTrain ? SessionStatus::Training
                                                                             : SessionStatus::AutoRunning;
    audit_event(*s, "job_started", {{"job_id", t.id}, {"kind", to_string(kind)}, {"request", request}});
    std::lock_guard jl(mu_);
    jobs_[t.id] = t;
    cancel_flags_[t.id] = flag;
  }
  std::lock_guard jl(mu_);
  workers_.emplace_back([this, s, id = t.id, flag, body = std::move(body)] {
    update_job(id, [](JobTicket& j) { j.state = JobState::Running; });
    JobTicket local = job(id);
    JobState end = JobState::Done;
    nlohmann::json result;
    std::string error;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      result = body(*s, local, *flag);
    } catch (const Cancelled&) {
      end = JobState::Cancelled;
    } catch (const std::exception& e) {
      end = JobState::Failed;
      error = e.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    {
      std::lock_guard lock(s->mu);
      s->active_job.reset();
      s->status = SessionStatus::Idle;
      audit_event(*s, "job_finished", {{"job_id", id}, {"state", to_string(end)}, {"error", error}});
      persist(*s);
    }
    update_job(id, [&](JobTicket& j) {
      j.state = end;
      j.result = result;
      j.error = error;
      if (end == JobState::Done) j.progress = 1.0;
      j.seconds = result.contains("seconds") ? result["seconds"].get<double>() : secs;
    });
  });
  return t;
}

namespace {

std::vector<TrainPair> committed_pairs(Session& s, std::vector<int>* slices = nullptr) {
  std::lock_guard lock(s.mu);
  std::vector<TrainPair> pairs;
  for (const auto& [z, c] : s.committed) {
    pairs.push_back({s.volume.slices[z], c.mask});
    if (slices) slices->push_back(z);
  }
  return pairs;
}

// Monotone progress reporter bound to one job.
std::function<void(double)> progress_fn(AnnotationService* svc, const std::string& id,
                                        const std::function<void(const std::string&, const std::function<void(JobTicket&)>&)>& upd) {
  (void)svc;
  return [id, upd](double f) {
    upd(id, [f](JobTicket& j) { j.progress = std::max(j.progress, std::min(f, 1.0)); });
  };
}

}  // namespace

JobTicket AnnotationService::start_assist_training(const std::string& id, const nlohmann::json& config) {
  auto s = get(id);
  const auto cfg = config_or_400([&] { return assist_config_from_json(config); });
  {
    std::lock_guard lock(s->mu);
    const bool any = std::any_of(s->committed.begin(), s->committed.end(), [](auto& kv) { return kv.second.mask.any(); });
    if (!any) throw ServiceError(422, "assist training needs at least one committed slice with foreground");
  }
  auto upd = [this](const std::string& j, const std::function<void(JobTicket&)>& f) { update_job(j, f); };
  return launch(s, JobKind::AssistTrain, to_json(cfg), [this, cfg, upd](Session& s, JobTicket& t, const std::atomic<bool>& stop) {
    std::vector<int> slices;
    const auto pairs = committed_pairs(s, &slices);
    TrainControl ctl{progress_fn(this, t.id, upd), &stop};
    auto res = train_prompt_encoder(pairs, *backbone_, cfg, nullptr, ctl);
    auto ck = make_checkpoint(*backbone_, res.state);
    ck.metadata = {{"session", s.id}, {"slices", slices}, {"config", to_json(cfg)}};
    ck.save(session_dir(s.id) / "assist.ckpt.new");
    if (before_theta_swap) before_theta_swap();
    auto next = std::make_shared<const PromptEncoderState>(std::move(res.state));
    {
      std::lock_guard lock(s.mu);
      fs::rename(session_dir(s.id) / "assist.ckpt.new", session_dir(s.id) / "assist.ckpt");
      s.theta = next;  // single pointer store under the session lock
      audit_event(s, "theta_swapped", {{"job_id", t.id}, {"hash", hex64(next->hash())}});
    }
    return nlohmann::json{{"seconds", res.seconds},
                          {"epochs", res.log.size()},
                          {"iterations", res.iterations},
                          {"final_loss", res.log.empty() ? 0.0 : res.log.back().loss},
                          {"theta_hash", hex64(next->hash())},
                          {"slices", slices}};
  });
}

JobTicket AnnotationService::start_sapnet_training(const std::string& id, const nlohmann::json& config) {
  auto s = get(id);
  auto cfg = config_or_400([&] { return sapnet_config_from_json(config); });
  {
    std::lock_guard lock(s->mu);
    if (s->committed.size() < 2) throw ServiceError(422, "SAP-Net training needs at least 2 committed slices");
    if (s->is_2d) {
      if (config.is_object() && config.value("use_pe", false))
        throw ServiceError(422, "position encoding cannot be used on 2-D datasets");
      cfg.use_pe = false;
    }
  }
  auto upd = [this](const std::string& j, const std::function<void(JobTicket&)>& f) { update_job(j, f); };
  return launch(s, JobKind::SapnetTrain, to_json(cfg), [this, cfg, upd](Session& s, JobTicket& t, const std::atomic<bool>& stop) {
    std::vector<int> slices;
    const auto pairs = committed_pairs(s, &slices);
    TrainControl ctl{progress_fn(this, t.id, upd), &stop};
    auto net = std::make_shared<const SapNet>(train_sapnet(pairs, *backbone_, cfg, ctl));
    net->fx.validate_for_dataset(s.is_2d);
    auto ck = make_checkpoint(*backbone_, backbone_->initial_state());
    store_sapnet(ck, *net);
    ck.metadata = {{"session", s.id}, {"slices", slices}, {"config", to_json(cfg)}};
    ck.save(session_dir(s.id) / "sapnet.ckpt");
    {
      std::lock_guard lock(s.mu);
      s.sapnet = net;
      audit_event(s, "sapnet_trained", {{"job_id", t.id}});
    }
    return nlohmann::json{{"seconds", net->seconds},
                          {"final_loss", net->log.empty() ? 0.0 : net->log.back().loss},
                          {"slices", slices}};
  });
}

JobTicket AnnotationService::start_auto(const std::string& id, const std::string& strategy, const nlohmann::json& config) {
  auto s = get(id);
  const nlohmann::json cfgj = config.is_null() ? nlohmann::json::object() : config;
  if (!cfgj.is_object()) throw ServiceError(400, "auto config must be an object");
  std::uint64_t seed = 0;
  if (cfgj.contains("seed")) {
    if (!cfgj["seed"].is_number_unsigned()) throw ServiceError(400, "seed must be a non-negative integer");
    seed = cfgj["seed"];
  }
  auto upd = [this](const std::string& j, const std::function<void(JobTicket&)>& f) { update_job(j, f); };

  // Shared tail: store proposals for the slices that came back nonempty and uncommitted.
  auto store = [this](Session& s, const std::string& job_id, std::map<int, Proposal> props) {
    std::lock_guard lock(s.mu);
    for (auto it = props.begin(); it != props.end();)
      it = s.committed.count(it->first) ? props.erase(it) : std::next(it);
    s.proposals = std::move(props);
    audit_event(s, "proposals_stored", {{"job_id", job_id}, {"count", s.proposals.size()}});
    return s.proposals.size();
  };
  auto theta_of = [this](Session& s) {
    std::lock_guard lock(s.mu);
    return s.theta ? *s.theta : backbone_->initial_state();
  };

  if (strategy == "sapnet") {
    const auto post = config_or_400([&] { return post_config_from_json(cfgj.value("post", nlohmann::json::object())); });
    for (auto it = cfgj.begin(); it != cfgj.end(); ++it)
      if (it.key() != "post" && it.key() != "seed") throw ServiceError(400, "auto config: unknown key '" + it.key() + "'");
    {
      std::lock_guard lock(s->mu);
      if (!s->sapnet) throw ServiceError(422, "strategy sapnet needs a trained SAP-Net (run sapnet_train first)");
    }
    return launch(s, JobKind::Auto, {{"strategy", strategy}, {"post", to_json(post)}, {"seed", seed}},
                  [this, post, seed, upd, store, theta_of](Session& s, JobTicket& t, const std::atomic<bool>& stop) {
                    std::shared_ptr<const SapNet> net;
                    std::set<int> skip;
                    {
                      std::lock_guard lock(s.mu);
                      net = s.sapnet;
                      for (auto& [z, _] : s.committed) skip.insert(z);
                    }
                    AssistModel model{*backbone_, theta_of(s)};
                    std::map<int, Proposal> props;
                    const int D = s.volume.depth();
                    for (int z = 0; z < D; ++z) {
                      if (stop.load()) throw Cancelled();
                      if (skip.count(z)) continue;
                      auto img = s.volume.slices[z];
                      img.slice_index = z;
                      auto r = auto_segment({img}, *net, model, AutoConfig{post, seed ^ static_cast<std::uint64_t>(z)});
                      if (r[0].mask.any()) props[z] = {r[0].mask, r[0].provenance, t.id};
                      upd(t.id, [&](JobTicket& j) { j.progress = std::max(j.progress, (z + 1.0) / D); });
                    }
                    return nlohmann::json{{"strategy", "sapnet"}, {"proposals", store(s, t.id, std::move(props))}};
                  });
  }

  if (strategy == "classify") {
    int stride = 8, per_class = 5;
    nlohmann::json cj = cfgj.value("classifier", nlohmann::json::object());
    for (auto it = cfgj.begin(); it != cfgj.end(); ++it) {
      const auto& k = it.key();
      if (k == "grid_stride" && it->is_number_integer()) stride = *it;
      else if (k == "n_per_class" && it->is_number_integer()) per_class = *it;
      else if (k != "classifier" && k != "seed") throw ServiceError(400, "auto config: bad key '" + k + "'");
    }
    if (stride < 1 || per_class < 1) throw ServiceError(400, "grid_stride and n_per_class must be >= 1");
    auto ccfg = config_or_400([&] { return classifier_config_from_json(cj); });
    ccfg.seed = seed;
    {
      std::lock_guard lock(s->mu);
      const bool ok = std::any_of(s->committed.begin(), s->committed.end(), [](auto& kv) {
        return kv.second.mask.any() && kv.second.mask.count() < kv.second.mask.pixels.size();
      });
      if (!ok) throw ServiceError(422, "strategy classify needs a committed slice with both classes");
    }
    return launch(s, JobKind::Auto, {{"strategy", strategy}, {"grid_stride", stride}, {"n_per_class", per_class}, {"seed", seed}},
                  [this, ccfg, stride, per_class, upd, store, theta_of](Session& s, JobTicket& t, const std::atomic<bool>& stop) {
                    std::vector<int> slices;
                    const auto pairs = committed_pairs(s, &slices);
                    const auto clf = train_point_classifier(pairs, *backbone_, ccfg, s.id);
                    AssistModel model{*backbone_, theta_of(s)};
                    std::map<int, Proposal> props;
                    const int D = s.volume.depth();
                    for (int z = 0; z < D; ++z) {
                      if (stop.load()) throw Cancelled();
                      if (std::count(slices.begin(), slices.end(), z)) continue;
                      const auto ps = classify_candidate_points(s.volume.slices[z], clf, *backbone_, stride, per_class);
                      const auto m = segment_classified(model, s.volume.slices[z], ps);
                      if (m.any())
                        props[z] = {m, {{"generator", "classify"}, {"slice", z}, {"instances", {to_json(ps)}}}, t.id};
                      upd(t.id, [&](JobTicket& j) { j.progress = std::max(j.progress, (z + 1.0) / D); });
                    }
                    return nlohmann::json{{"strategy", "classify"},
                                          {"training_accuracy", clf.training_accuracy},
                                          {"proposals", store(s, t.id, std::move(props))}};
                  });
  }

  if (strategy == "propagate") {
    nlohmann::json pj = cfgj;
    pj.erase("seed");
    auto pcfg = config_or_400([&] { return propagation_config_from_json(pj); });
    pcfg.seed = seed;
    {
      std::lock_guard lock(s->mu);
      const bool any = std::any_of(s->committed.begin(), s->committed.end(), [](auto& kv) { return kv.second.mask.any(); });
      if (!any) throw ServiceError(422, "strategy propagate needs a committed slice with foreground as seed");
    }
    return launch(s, JobKind::Propagate, {{"strategy", strategy}, {"config", to_json(pcfg)}},
                  [this, pcfg, upd, store, theta_of](Session& s, JobTicket& t, const std::atomic<bool>& stop) {
                    std::vector<PropagationSeed> seeds;
                    {
                      std::lock_guard lock(s.mu);
                      for (auto& [z, c] : s.committed)
                        if (c.mask.any()) seeds.push_back({z, c.mask});
                    }
                    AssistModel model{*backbone_, theta_of(s)};
                    std::vector<PropagationResult> runs;
                    // ensemble over seeds, one run at a time so cancellation is honoured between runs
                    for (std::size_t i = 0; i < seeds.size(); ++i) {
                      if (stop.load()) throw Cancelled();
                      runs.push_back(propagate_prompts(s.volume, seeds[i].slice, seeds[i].label, pcfg, model));
                      upd(t.id, [&](JobTicket& j) { j.progress = std::max(j.progress, (i + 1.0) / seeds.size()); });
                    }
                    const int D = s.volume.depth(), H = s.volume.height(), W = s.volume.width();
                    std::vector<int> votes(static_cast<std::size_t>(D) * H * W, 0);
                    for (const auto& r : runs) {
                      const auto m = r.to_mask(D, H, W);
                      for (std::size_t k = 0; k < votes.size(); ++k) votes[k] += m.values()[k];
                    }
                    const int M = static_cast<int>(runs.size());
                    std::map<int, Proposal> props;
                    nlohmann::json trace = nlohmann::json::array();
                    for (std::size_t i = 0; i < runs.size(); ++i)
                      for (const auto& st : runs[i].trace)
                        trace.push_back({{"seed", seeds[i].slice}, {"slice", st.slice}, {"survivors", st.survivors},
                                         {"resampled", st.resampled}, {"x_tilde", st.x_tilde}});
                    for (int z = 0; z < D; ++z) {
                      LabelMask m(H, W);
                      for (std::size_t k = 0; k < m.pixels.size(); ++k) {
                        const int v = votes[static_cast<std::size_t>(z) * H * W + k];
                        m.pixels[k] = v > 0 && 2 * v >= M;
                      }
                      if (!m.any()) continue;
                      nlohmann::json inst = nlohmann::json::array();
                      for (std::size_t i = 0; i < runs.size(); ++i)
                        if (auto it = runs[i].slices.find(z); it != runs[i].slices.end())
                          inst.push_back({{"seed", seeds[i].slice}, {"prompts", to_json(it->second.prompts)}});
                      props[z] = {m, {{"generator", "propagate"}, {"slice", z}, {"instances", inst}}, t.id};
                    }
                    return nlohmann::json{{"strategy", "propagate"},
                                          {"seeds", seeds.size()},
                                          {"trace", trace},
                                          {"proposals", store(s, t.id, std::move(props))}};
                  });
  }
  throw ServiceError(400, "unknown strategy '" + strategy + "' (propagate, classify, sapnet)");
}

// ---------------------------------------------------------------- export / import

AnnotationService::ExportFile AnnotationService::export_session(const std::string& id, const std::string& format) {
  auto s = get(id);
  if (format != "nifti" && format != "rle" && format != "bundle")
    throw ServiceError(415, "unsupported export format '" + format + "' (nifti, rle, bundle)");
  Mask3D mask;
  nlohmann::json audit_arr = nlohmann::json::array(), slices = nlohmann::json::array(), info;
  {
    std::lock_guard lock(s->mu);
    mask = committed_volume(*s);
    for (const auto& [z, c] : s->committed)
      slices.push_back({{"slice", z}, {"version", c.version}, {"mask", rle_encode(c.mask)}});
    for (const auto& e : s->audit) audit_arr.push_back(e.to_json());
  }
  info = {{"session_id", s->id}, {"content_hash", s->content_hash}, {"shape", {mask.depth(), mask.height(), mask.width()}}};
  auto nifti_bytes = [&] {
    TempFile tmp(cfg_.data_dir / "tmp", ".nii.gz");
    write_mask_nifti(tmp.path, mask, s->volume.spacing);
    return read_bytes(tmp.path);
  };
  ExportFile f;
  if (format == "nifti") {
    f = {nifti_bytes(), "application/gzip", "mask.nii.gz"};
  } else if (format == "rle") {
    nlohmann::json j = info;
    j["format"] = "promptmed-annotations/1";
    j["slices"] = slices;
    j["audit"] = audit_arr;
    const auto d = j.dump();
    f = {{d.begin(), d.end()}, "application/json", "annotations.json"};
  } else {
    std::string audit_lines;
    for (const auto& e : audit_arr) audit_lines += e.dump() + "\n";
    const auto sj = info.dump(1);
    TarWriter tar;
    tar.add("mask.nii.gz", nifti_bytes());
    tar.add("audit.jsonl", {audit_lines.begin(), audit_lines.end()});
    tar.add("session.json", {sj.begin(), sj.end()});
    f = {tar.finish(), "application/x-tar", "session-" + s->id + ".tar"};
  }
  return f;
}

nlohmann::json AnnotationService::import_annotations(const std::string& id, const std::vector<std::uint8_t>& bytes,
                                                     const std::string& format) {
  auto s = get(id);
  std::vector<std::pair<int, LabelMask>> items;
  if (format == "nifti") {
    Mask3D m;
    try {
      TempFile tmp(cfg_.data_dir / "tmp", bytes.size() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b ? ".nii.gz" : ".nii");
      {
        std::ofstream out(tmp.path, std::ios::binary);
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
      }
      m = binarize(read_nifti(tmp.path), {});
    } catch (const std::exception& e) {
      throw ServiceError(400, std::string("cannot parse mask: ") + e.what());
    }
    if (m.depth() != s->volume.depth() || m.height() != s->volume.height() || m.width() != s->volume.width())
      throw ServiceError(422, "imported mask shape does not match the session volume");
    for (int z = 0; z < m.depth(); ++z)
      if (m.slice_any(z)) items.emplace_back(z, m.slice(z));
  } else if (format == "rle") {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(bytes.begin(), bytes.end());
      for (const auto& e : j.at("slices")) items.emplace_back(e.at("slice").get<int>(), rle_decode(e.at("mask")));
    } catch (const std::exception& e) {
      throw ServiceError(400, std::string("cannot parse annotations: ") + e.what());
    }
  } else {
    throw ServiceError(415, "unsupported import format '" + format + "' (nifti, rle)");
  }
  nlohmann::json out = nlohmann::json::array();
  for (auto& [z, m] : items) out.push_back(commit(id, z, rle_encode(m), "import"));
  return {{"imported", out}};
}

}  // namespace promptmed
