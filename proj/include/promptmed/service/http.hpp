#pragma once

#include <memory>
#include <string>

#include "promptmed/service/service.hpp"

namespace httplib {
class Server;
}

namespace promptmed {

inline constexpr const char* kApiPrefix = "/api/v1";

/// HTTP front end over an AnnotationService. Routes live under /api/v1.
class HttpServer {
 public:
  explicit HttpServer(AnnotationService& svc);
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  /// Binds; port 0 picks a free port. Returns the bound port.
  int bind(const std::string& host, int port);
  /// Blocks until stop().
  void listen();
  void stop();
  void wait_until_ready() const;

 private:
  void routes();
  AnnotationService& svc_;
  std::unique_ptr<httplib::Server> server_;
};

/// 8-bit grayscale PNG of a slice, min-max scaled to 0..255 (constant slices map to 0).
std::vector<std::uint8_t> slice_png(const SliceImage& img, const std::filesystem::path& scratch_dir);
std::vector<std::uint8_t> mask_png(const LabelMask& m, const std::filesystem::path& scratch_dir);
/// Any nonzero pixel is foreground.
LabelMask mask_from_png(const std::vector<std::uint8_t>& bytes, const std::filesystem::path& scratch_dir);

}  // namespace promptmed
