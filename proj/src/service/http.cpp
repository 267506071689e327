#include "promptmed/service/http.hpp"

#include <fstream>
#include <random>

#include "httplib.h"
#include "promptmed/core/rle.hpp"
#include "promptmed/data/io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace promptmed {

namespace {

fs::path scratch_file(const fs::path& dir, const char* ext) {
  static std::atomic<std::uint64_t> counter{0};
  static const std::uint64_t salt = std::random_device{}();
  fs::create_directories(dir);
  return dir / ("http-" + std::to_string(salt) + "-" + std::to_string(counter++) + ext);
}

std::vector<std::uint8_t> slurp_and_remove(const fs::path& p) {
  std::vector<std::uint8_t> out;
  {
    std::ifstream in(p, std::ios::binary);
    out.assign(std::istreambuf_iterator<char>(in), {});
  }
  std::error_code ec;
  fs::remove(p, ec);
  return out;
}

std::vector<std::uint8_t> body_bytes(const httplib::Request& req) { return {req.body.begin(), req.body.end()}; }

json body_json(const httplib::Request& req) {
  if (req.body.empty()) return json::object();
  try {
    return json::parse(req.body);
  } catch (const json::parse_error& e) {
    throw ServiceError(400, std::string("malformed JSON body: ") + e.what());
  }
}

int slice_param(const httplib::Request& req) {
  const std::string& s = req.path_params.at("z");
  std::size_t used = 0;
  int v = 0;
  try {
    v = std::stoi(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || s.empty()) throw ServiceError(400, "slice index '" + s + "' is not an integer");
  return v;
}

bool wants_png(const httplib::Request& req) {
  return req.get_param_value("format") == "png" ||
         (req.has_header("Accept") && req.get_header_value("Accept") == "image/png");
}

bool is_png_body(const httplib::Request& req) {
  return req.get_header_value("Content-Type") == "image/png" ||
         (req.body.size() >= 4 && static_cast<unsigned char>(req.body[0]) == 0x89 && req.body.compare(1, 3, "PNG") == 0);
}

void send_json(httplib::Response& res, const json& j, int status = 200) {
  res.status = status;
  res.set_content(j.dump(), "application/json");
}

void send_bytes(httplib::Response& res, const std::vector<std::uint8_t>& b, const std::string& type) {
  res.set_content(reinterpret_cast<const char*>(b.data()), b.size(), type);
}

}  // namespace

std::vector<std::uint8_t> slice_png(const SliceImage& img, const fs::path& dir) {
  const auto& v = img.pixels.values();
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  Grid2<double> g(img.height(), img.width());
  const double span = v.empty() ? 0.0 : *hi - *lo;
  for (std::size_t i = 0; i < v.size(); ++i) g[i] = span > 0 ? (v[i] - *lo) / span * 255.0 : 0.0;
  const auto p = scratch_file(dir, ".png");
  write_png_gray(p, g, 8);
  return slurp_and_remove(p);
}

std::vector<std::uint8_t> mask_png(const LabelMask& m, const fs::path& dir) {
  Grid2<double> g(m.height(), m.width());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = m.pixels[i] ? 255.0 : 0.0;
  const auto p = scratch_file(dir, ".png");
  write_png_gray(p, g, 8);
  return slurp_and_remove(p);
}

LabelMask mask_from_png(const std::vector<std::uint8_t>& bytes, const fs::path& dir) {
  const auto p = scratch_file(dir, ".png");
  {
    std::ofstream out(p, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }
  Grid2<double> g;
  try {
    g = read_image2d(p);
  } catch (const std::exception& e) {
    slurp_and_remove(p);
    throw ServiceError(400, "cannot decode PNG mask");
  }
  slurp_and_remove(p);
  LabelMask m(g.height(), g.width());
  for (std::size_t i = 0; i < g.size(); ++i) m.pixels[i] = g[i] != 0.0;
  return m;
}

HttpServer::HttpServer(AnnotationService& svc) : svc_(svc), server_(std::make_unique<httplib::Server>()) {
  const int n = std::max(1, svc_.config().http_threads);
  server_->new_task_queue = [n] { return new httplib::ThreadPool(static_cast<std::size_t>(n)); };
  server_->set_payload_max_length(std::size_t{1} << 31);
  server_->set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    try {
      std::rethrow_exception(ep);
    } catch (const ServiceError& e) {
      send_json(res, {{"error", e.what()}}, e.status());
    } catch (const std::exception& e) {
      send_json(res, {{"error", e.what()}}, 500);
    } catch (...) {
      send_json(res, {{"error", "unknown error"}}, 500);
    }
  });
  routes();
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
  if (port == 0) {
    const int p = server_->bind_to_any_port(host);
    if (p < 0) throw std::runtime_error("cannot bind " + host);
    return p;
  }
  if (!server_->bind_to_port(host, port)) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
  return port;
}

void HttpServer::listen() { server_->listen_after_bind(); }
void HttpServer::stop() {
  if (server_->is_running()) server_->stop();
}
void HttpServer::wait_until_ready() const { server_->wait_until_ready(); }

void HttpServer::routes() {
  auto& s = *server_;
  const std::string p = kApiPrefix;
  const fs::path scratch = svc_.config().data_dir / "tmp";
  AnnotationService& svc = svc_;

  s.Get(p + "/health", [](const httplib::Request&, httplib::Response& res) {
    send_json(res, {{"status", "ok"}});
  });

  s.Post(p + "/sessions", [&svc](const httplib::Request& req, httplib::Response& res) {
    if (req.get_header_value("Content-Type") == "application/json") {
      const json j = body_json(req);
      if (!j.contains("manifest") || !j.contains("case"))
        throw ServiceError(400, "JSON session requests need 'manifest' and 'case'");
      send_json(res, svc.create_session_from_manifest(j["manifest"].get<std::string>(), j["case"].get<std::string>()), 201);
      return;
    }
    std::string name = req.get_param_value("filename");
    if (name.empty() && req.has_header("X-Filename")) name = req.get_header_value("X-Filename");
    send_json(res, svc.create_session(body_bytes(req), name), 201);
  });

  s.Get(p + "/sessions", [&svc](const httplib::Request&, httplib::Response& res) {
    send_json(res, svc.session_ids());
  });

  s.Get(p + "/sessions/:id", [&svc](const httplib::Request& req, httplib::Response& res) {
    send_json(res, svc.session_info(req.path_params.at("id")));
  });

  s.Get(p + "/sessions/:id/slices/:z/image", [&svc, scratch](const httplib::Request& req, httplib::Response& res) {
    send_bytes(res, slice_png(svc.slice_image(req.path_params.at("id"), slice_param(req)), scratch), "image/png");
  });

  s.Post(p + "/sessions/:id/slices/:z/predict", [&svc, scratch](const httplib::Request& req, httplib::Response& res) {
    const auto out = svc.predict(req.path_params.at("id"), slice_param(req), body_json(req));
    if (wants_png(req)) {
      res.set_header("X-Quality", std::to_string(out["quality"].get<double>()));
      send_bytes(res, mask_png(rle_decode(out["mask"]), scratch), "image/png");
    } else {
      send_json(res, out);
    }
  });

  s.Put(p + "/sessions/:id/slices/:z/annotation", [&svc, scratch](const httplib::Request& req, httplib::Response& res) {
    json rle;
    if (is_png_body(req)) {
      rle = rle_encode(mask_from_png(body_bytes(req), scratch));
    } else {
      const json j = body_json(req);
      rle = j.contains("mask") ? j["mask"] : j;
    }
    send_json(res, svc.commit(req.path_params.at("id"), slice_param(req), rle));
  });

  s.Get(p + "/sessions/:id/slices/:z/annotation", [&svc, scratch](const httplib::Request& req, httplib::Response& res) {
    const auto out = svc.committed(req.path_params.at("id"), slice_param(req));
    if (wants_png(req)) send_bytes(res, mask_png(rle_decode(out["mask"]), scratch), "image/png");
    else send_json(res, out);
  });

  s.Put(p + "/sessions/:id/slices/:z/pending", [&svc](const httplib::Request& req, httplib::Response& res) {
    send_json(res, svc.set_pending(req.path_params.at("id"), slice_param(req), body_json(req)));
  });

  s.Get(p + "/sessions/:id/proposals", [&svc](const httplib::Request& req, httplib::Response& res) {
    send_json(res, svc.proposals(req.path_params.at("id")));
  });
  s.Get(p + "/sessions/:id/proposals/:z", [&svc](const httplib::Request& req, httplib::Response& res) {
    send_json(res, svc.proposal(req.path_params.at("id"), slice_param(req)));
  });
  s.Post(p + "/sessions/:id/proposals/:z/accept", [&svc](const httplib::Request& req, httplib::Response& res) {
    send_json(res, svc.accept_proposal(req.path_params.at("id"), slice_param(req)));
  });
  s.Post(p + "/sessions/:id/proposals/:z/reject", [&svc](const httplib::Request& req, httplib::Response& res) {
    send_json(res, svc.reject_proposal(req.path_params.at("id"), slice_param(req)));
  });

  s.Post(p + "/sessions/:id/jobs/:kind", [&svc](const httplib::Request& req, httplib::Response& res) {
    const auto& id = req.path_params.at("id");
    const auto& kind = req.path_params.at("kind");
    const json body = body_json(req);
    JobTicket t;
    if (kind == "assist_train") {
      t = svc.start_assist_training(id, body);
    } else if (kind == "sapnet_train") {
      t = svc.start_sapnet_training(id, body);
    } else if (kind == "auto") {
      if (!body.contains("strategy") || !body["strategy"].is_string())
        throw ServiceError(400, "auto jobs need a 'strategy' string");
      t = svc.start_auto(id, body["strategy"], body.value("config", json::object()));
    } else if (kind == "propagate") {
      t = svc.start_auto(id, "propagate", body);
    } else {
      throw ServiceError(404, "unknown job kind '" + kind + "'");
    }
    send_json(res, t.to_json(), 202);
  });

  s.Get(p + "/jobs/:jid", [&svc](const httplib::Request& req, httplib::Response& res) {
    send_json(res, svc.job(req.path_params.at("jid")).to_json());
  });
  s.Post(p + "/jobs/:jid/cancel", [&svc](const httplib::Request& req, httplib::Response& res) {
    send_json(res, svc.cancel_job(req.path_params.at("jid")).to_json());
  });

  s.Get(p + "/sessions/:id/audit", [&svc](const httplib::Request& req, httplib::Response& res) {
    send_json(res, svc.audit(req.path_params.at("id")));
  });

  s.Get(p + "/sessions/:id/export", [&svc](const httplib::Request& req, httplib::Response& res) {
    const std::string fmt = req.has_param("format") ? req.get_param_value("format") : "nifti";
    const auto f = svc.export_session(req.path_params.at("id"), fmt);
    res.set_header("Content-Disposition", "attachment; filename=\"" + f.filename + "\"");
    send_bytes(res, f.bytes, f.content_type);
  });

  s.Post(p + "/sessions/:id/import", [&svc](const httplib::Request& req, httplib::Response& res) {
    const std::string fmt = req.has_param("format") ? req.get_param_value("format") : "nifti";
    send_json(res, svc.import_annotations(req.path_params.at("id"), body_bytes(req), fmt));
  });

  s.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (res.body.empty()) send_json(res, {{"error", httplib::status_message(res.status)}}, res.status);
  });
}

}  // namespace promptmed
