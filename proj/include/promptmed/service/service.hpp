#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "promptmed/backbone/backbone.hpp"
#include "promptmed/core/raster.hpp"
#include "promptmed/sapnet/sapnet.hpp"

namespace promptmed {

/// Failure carrying the HTTP status the API layer should answer with.
class ServiceError : public std::runtime_error {
 public:
  ServiceError(int status, const std::string& msg) : std::runtime_error(msg), status_(status) {}
  int status() const noexcept { return status_; }

 private:
  int status_;
};

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::filesystem::path data_dir = "promptmed-data";
  std::string backbone = "toy";
  std::uint64_t backbone_seed = 0;
  int http_threads = 8;

  /// JSON file (optional) then PROMPTMED_PORT / PROMPTMED_DATA_DIR / PROMPTMED_BACKBONE.
  static ServiceConfig load(const std::optional<std::filesystem::path>& file);
  void apply_env();
};

std::unique_ptr<Backbone> make_backbone(const std::string& name, std::uint64_t seed = 0);

enum class JobKind { AssistTrain, SapnetTrain, Auto, Propagate };
enum class JobState { Queued, Running, Done, Failed, Cancelled };
const char* to_string(JobKind k);
const char* to_string(JobState s);
inline bool is_terminal(JobState s) {
  return s == JobState::Done || s == JobState::Failed || s == JobState::Cancelled;
}

struct JobTicket {
  std::string id;
  std::string session_id;
  JobKind kind = JobKind::AssistTrain;
  JobState state = JobState::Queued;
  double progress = 0.0;
  double seconds = 0.0;
  nlohmann::json result;  // kind-specific summary
  std::string error;
  nlohmann::json to_json() const;
};

struct AuditEvent {
  std::uint64_t seq = 0;
  std::string time;        // ISO-8601 UTC, ms
  std::int64_t mono_us = 0;  // strictly increasing within a session
  std::string kind;
  nlohmann::json detail;
  nlohmann::json to_json() const;
};

struct CommittedMask {
  LabelMask mask;
  int version = 0;
};

struct Proposal {
  LabelMask mask;
  nlohmann::json provenance;
  std::string job_id;
};

enum class SessionStatus { Idle, Training, AutoRunning };
const char* to_string(SessionStatus s);

struct Session;  // defined in the implementation

/// Thread-safe session/job manager behind the HTTP API. Every public method
/// throws ServiceError with an HTTP-ish status on bad input.
class AnnotationService {
 public:
  AnnotationService(ServiceConfig cfg, std::shared_ptr<const Backbone> backbone);
  ~AnnotationService();
  AnnotationService(const AnnotationService&) = delete;
  AnnotationService& operator=(const AnnotationService&) = delete;

  const ServiceConfig& config() const noexcept { return cfg_; }
  const Backbone& backbone() const noexcept { return *backbone_; }

  /// `name` is only used to pick the parser (.nii, .nii.gz, .png, .tif).
  nlohmann::json create_session(const std::vector<std::uint8_t>& bytes, const std::string& name);
  nlohmann::json create_session_from_manifest(const std::filesystem::path& manifest, const std::string& case_id);
  nlohmann::json session_info(const std::string& id);
  std::vector<std::string> session_ids();

  SliceImage slice_image(const std::string& id, int slice);
  nlohmann::json predict(const std::string& id, int slice, const nlohmann::json& prompts);
  nlohmann::json set_pending(const std::string& id, int slice, const nlohmann::json& prompts);
  nlohmann::json commit(const std::string& id, int slice, const nlohmann::json& rle_mask, const std::string& source = "user");
  nlohmann::json committed(const std::string& id, int slice);
  nlohmann::json proposals(const std::string& id);
  nlohmann::json proposal(const std::string& id, int slice);
  nlohmann::json accept_proposal(const std::string& id, int slice);
  nlohmann::json reject_proposal(const std::string& id, int slice);
  nlohmann::json audit(const std::string& id);

  JobTicket start_assist_training(const std::string& id, const nlohmann::json& config);
  JobTicket start_sapnet_training(const std::string& id, const nlohmann::json& config);
  /// strategy: propagate | classify | sapnet
  JobTicket start_auto(const std::string& id, const std::string& strategy, const nlohmann::json& config);
  JobTicket job(const std::string& job_id);
  JobTicket cancel_job(const std::string& job_id);
  /// Blocks until the job is terminal or the timeout passes; returns the latest ticket.
  JobTicket wait_job(const std::string& job_id, std::chrono::milliseconds timeout = std::chrono::minutes(10));

  struct ExportFile {
    std::vector<std::uint8_t> bytes;
    std::string content_type;
    std::string filename;
  };
  /// nifti (.nii.gz mask), rle (JSON with audit inline), bundle (tar: mask + audit + session)
  ExportFile export_session(const std::string& id, const std::string& format);
  /// Commits every slice carried by a nifti or rle export.
  nlohmann::json import_annotations(const std::string& id, const std::vector<std::uint8_t>& bytes,
                                    const std::string& format);

  /// Test hook: called inside the assist job right before theta is swapped.
  std::function<void()> before_theta_swap;

 private:
  std::shared_ptr<Session> get(const std::string& id);
  std::shared_ptr<Session> load_from_disk(const std::string& id);
  void persist(Session& s);
  void audit_event(Session& s, const std::string& kind, nlohmann::json detail);
  JobTicket launch(const std::shared_ptr<Session>& s, JobKind kind, nlohmann::json request,
                   std::function<nlohmann::json(Session&, JobTicket&, const std::atomic<bool>&)> body);
  void update_job(const std::string& job_id, const std::function<void(JobTicket&)>& f);
  std::filesystem::path session_dir(const std::string& id) const;
  nlohmann::json create_from_volume(Volume v, bool is_2d, const std::string& content_hash, const std::string& source,
                                    std::optional<std::filesystem::path> stored);

  ServiceConfig cfg_;
  std::shared_ptr<const Backbone> backbone_;
  std::unique_ptr<EmbeddingCache> cache_;

  std::mutex mu_;  // sessions_ and jobs_ maps
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  std::map<std::string, JobTicket> jobs_;
  std::map<std::string, std::shared_ptr<std::atomic<bool>>> cancel_flags_;
  std::condition_variable job_cv_;
  std::vector<std::thread> workers_;
  std::atomic<std::uint64_t> next_job_{1};
};

}  // namespace promptmed
