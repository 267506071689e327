#include "doctest.h"

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <random>
#include <set>
#include <thread>

#include "httplib.h"
#include "promptmed/backbone/checkpoint.hpp"
#include "promptmed/backbone/prompt_json.hpp"
#include "promptmed/backbone/toy_backbone.hpp"
#include "promptmed/core/hashing.hpp"
#include "promptmed/core/rle.hpp"
#include "promptmed/data/io.hpp"
#include "promptmed/data/phantom.hpp"
#include "promptmed/service/configs.hpp"
#include "promptmed/service/http.hpp"
#include "promptmed/service/service.hpp"
#include "promptmed/service/tar.hpp"

using namespace promptmed;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("pm-svc-" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

std::vector<std::uint8_t> file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

Phantom small_phantom() { return make_phantom(phantoms::cylinder(8, 64, 18.0)); }

std::vector<std::uint8_t> nifti_bytes(const Volume& v, const fs::path& dir) {
  const auto p = dir / "upload.nii.gz";
  write_volume_nifti(p, v);
  auto b = file_bytes(p);
  fs::remove(p);
  return b;
}

std::shared_ptr<const Backbone> toy() {
  static auto bb = std::shared_ptr<const Backbone>(make_backbone("toy"));
  return bb;
}

ServiceConfig config_for(const fs::path& dir) {
  ServiceConfig c;
  c.data_dir = dir;
  c.port = 0;
  c.http_threads = 4;
  return c;
}

int status_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const ServiceError& e) {
    return e.status();
  }
  return 200;
}

json point_prompts(double x, double y) {
  return {{"prompts", {{{"type", "point"}, {"x", x}, {"y", y}, {"label", "fg"}}}}};
}

json committed_snapshot(AnnotationService& svc, const std::string& id, int depth) {
  json out = json::object();
  for (int z = 0; z < depth; ++z) {
    try {
      out[std::to_string(z)] = svc.committed(id, z);
    } catch (const ServiceError&) {
    }
  }
  return out;
}

}  // namespace

TEST_CASE("sessions: content hash, fresh ids, corrupt uploads, restart") {
  TempDir tmp;
  const auto ph = small_phantom();
  const auto bytes = nifti_bytes(ph.volume, tmp.path);
  std::string id;
  {
    AnnotationService svc(config_for(tmp.path / "data"), toy());
    const auto a = svc.create_session(bytes, "vol.nii.gz");
    const auto b = svc.create_session(bytes, "vol.nii.gz");
    CHECK(a["content_hash"] == b["content_hash"]);
    CHECK(a["session_id"] != b["session_id"]);
    CHECK(a["shape"] == json::array({8, 64, 64}));
    CHECK(a["is_2d"] == false);
    id = a["session_id"];

    CHECK(status_of([&] { svc.create_session({}, "x.nii"); }) == 400);
    std::vector<std::uint8_t> junk(bytes.begin(), bytes.begin() + 100);  // truncated gzip
    CHECK(status_of([&] { svc.create_session(junk, "x.nii.gz"); }) == 400);
    std::vector<std::uint8_t> text = {'h', 'e', 'l', 'l', 'o'};
    CHECK(status_of([&] { svc.create_session(text, "notes.txt"); }) == 400);
    CHECK(status_of([&] { svc.session_info("ffff"); }) == 404);
    CHECK(status_of([&] { svc.session_info("../etc"); }) == 404);

    svc.commit(id, 3, rle_encode(ph.mask.slice(3)));
  }
  AnnotationService again(config_for(tmp.path / "data"), toy());
  const auto info = again.session_info(id);
  CHECK(info["committed"].size() == 1);
  CHECK(again.committed(id, 3)["mask"] == rle_encode(ph.mask.slice(3)));
  CHECK(again.slice_image(id, 5).pixels == ph.volume.slices[5].pixels);
  CHECK(again.audit(id).size() == 2);
  CHECK(again.session_ids().size() == 2);
}

TEST_CASE("sessions: 2-D PNG upload") {
  TempDir tmp;
  Grid2<double> g(32, 40);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 40; ++x) g(y, x) = (x * 7 + y) % 256;
  write_png_gray(tmp.path / "a.png", g, 8);
  AnnotationService svc(config_for(tmp.path / "data"), toy());
  const auto info = svc.create_session(file_bytes(tmp.path / "a.png"), "a.png");
  CHECK(info["is_2d"] == true);
  CHECK(info["shape"] == json::array({1, 32, 40}));
  CHECK(svc.slice_image(info["session_id"], 0).pixels == g);
}

TEST_CASE("predict: deterministic, bounds checked, leaves commits alone, latency") {
  TempDir tmp;
  const auto ph = small_phantom();
  AnnotationService svc(config_for(tmp.path / "data"), toy());
  const std::string id = svc.create_session(nifti_bytes(ph.volume, tmp.path), "v.nii.gz")["session_id"];
  svc.commit(id, 2, rle_encode(ph.mask.slice(2)));
  const auto before = committed_snapshot(svc, id, 8);

  const auto t0 = std::chrono::steady_clock::now();
  const auto a = svc.predict(id, 2, point_prompts(32, 32));
  const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  MESSAGE("first predict on 64x64: " << ms << " ms");
  CHECK(ms < 200.0);
  const auto b = svc.predict(id, 2, point_prompts(32, 32));
  CHECK(a == b);
  CHECK(a["theta"]["trained"] == false);
  CHECK(a["mask"]["size"] == json::array({64, 64}));
  CHECK(a["quality"].get<double>() >= 0.0);
  CHECK(a["quality"].get<double>() <= 1.0);

  const auto empty = svc.predict(id, 2, json::array());
  CHECK(rle_decode(empty["mask"]).height() == 64);

  CHECK(status_of([&] { svc.predict(id, 2, point_prompts(64, 10)); }) == 422);
  CHECK(status_of([&] { svc.predict(id, 2, point_prompts(-1, 10)); }) == 422);
  CHECK(status_of([&] { svc.predict(id, 8, point_prompts(3, 3)); }) == 422);
  CHECK(status_of([&] { svc.predict("deadbeef", 0, point_prompts(3, 3)); }) == 404);
  CHECK(status_of([&] { svc.predict(id, 0, json{{"prompts", {{{"type", "blob"}}}}}); }) == 400);
  CHECK(committed_snapshot(svc, id, 8) == before);
}

TEST_CASE("commit: version bump, shape check, audit with monotone times") {
  TempDir tmp;
  const auto ph = small_phantom();
  AnnotationService svc(config_for(tmp.path / "data"), toy());
  const std::string id = svc.create_session(nifti_bytes(ph.volume, tmp.path), "v.nii.gz")["session_id"];
  CHECK(svc.commit(id, 1, rle_encode(ph.mask.slice(1)))["version"] == 1);
  CHECK(svc.commit(id, 1, rle_encode(LabelMask(64, 64)))["version"] == 2);
  CHECK(svc.committed(id, 1)["mask"] == rle_encode(LabelMask(64, 64)));
  CHECK(status_of([&] { svc.commit(id, 1, rle_encode(LabelMask(63, 64))); }) == 422);
  CHECK(status_of([&] { svc.commit(id, 9, rle_encode(LabelMask(64, 64))); }) == 422);
  CHECK(status_of([&] { svc.commit(id, 1, json{{"size", {64, 64}}, {"counts", {5}}}); }) == 400);
  CHECK(status_of([&] { svc.committed(id, 0); }) == 404);
  svc.set_pending(id, 4, point_prompts(10, 10));

  const auto log = svc.audit(id);
  REQUIRE(log.size() == 4);
  CHECK(log[1]["kind"] == "commit");
  CHECK(log[2]["detail"]["version"] == 2);
  CHECK(log[3]["kind"] == "pending_prompts");
  for (std::size_t i = 1; i < log.size(); ++i) {
    CHECK(log[i]["mono_us"].get<std::int64_t>() > log[i - 1]["mono_us"].get<std::int64_t>());
    CHECK(log[i]["time"].get<std::string>() >= log[i - 1]["time"].get<std::string>());
    CHECK(log[i]["seq"].get<int>() == log[i - 1]["seq"].get<int>() + 1);
  }
}

TEST_CASE("assist training job: prerequisites, 409, progress, seconds, theta swap") {
  TempDir tmp;
  const auto ph = small_phantom();
  AnnotationService svc(config_for(tmp.path / "data"), toy());
  const std::string id = svc.create_session(nifti_bytes(ph.volume, tmp.path), "v.nii.gz")["session_id"];
  CHECK(status_of([&] { svc.start_assist_training(id, json::object()); }) == 422);
  svc.commit(id, 0, rle_encode(LabelMask(64, 64)));
  CHECK(status_of([&] { svc.start_assist_training(id, json::object()); }) == 422);  // no foreground anywhere
  svc.commit(id, 4, rle_encode(ph.mask.slice(4)));
  CHECK(status_of([&] { svc.start_assist_training(id, json{{"epochs", "many"}}); }) == 400);
  CHECK(status_of([&] { svc.start_assist_training(id, json{{"epoch", 3}}); }) == 400);

  const auto t = svc.start_assist_training(id, json{{"epochs", 60}, {"seed", 3}});
  CHECK(status_of([&] { svc.start_assist_training(id, json::object()); }) == 409);
  CHECK(status_of([&] { svc.start_auto(id, "propagate", json::object()); }) == 409);
  std::vector<double> seen;
  for (;;) {
    const auto now = svc.job(t.id);
    seen.push_back(now.progress);
    if (is_terminal(now.state)) break;
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
  }
  const auto done = svc.job(t.id);
  REQUIRE(done.state == JobState::Done);
  CHECK(done.progress == 1.0);
  CHECK(done.seconds > 0.0);
  CHECK(std::is_sorted(seen.begin(), seen.end()));
  const auto info = svc.session_info(id);
  CHECK(info["theta"]["trained"] == true);
  CHECK(info["theta"]["hash"] == done.result["theta_hash"]);
  CHECK(info["status"] == "idle");
  CHECK(svc.predict(id, 4, point_prompts(32, 32))["theta"]["hash"] == done.result["theta_hash"]);
  CHECK(fs::exists(tmp.path / "data" / "sessions" / id / "assist.ckpt"));
  CHECK(status_of([&] { svc.job("job-nope"); }) == 404);
}

TEST_CASE("theta swap is atomic under concurrent predict") {
  TempDir tmp;
  const auto ph = small_phantom();
  AnnotationService svc(config_for(tmp.path / "data"), toy());
  const std::string id = svc.create_session(nifti_bytes(ph.volume, tmp.path), "v.nii.gz")["session_id"];
  svc.commit(id, 4, rle_encode(ph.mask.slice(4)));
  const json prompts = point_prompts(30, 34);

  std::atomic<bool> stop{false};
  std::atomic<int> during_swap{0};
  std::mutex m;
  std::vector<json> results;
  auto worker = [&] {
    while (!stop.load()) {
      auto r = svc.predict(id, 4, prompts);
      std::lock_guard lock(m);
      results.push_back(std::move(r));
    }
  };
  svc.before_theta_swap = [&] {
    // keep predicting right up to the swap
    const auto n0 = [&] { std::lock_guard lock(m); return results.size(); }();
    while ([&] { std::lock_guard lock(m); return results.size(); }() < n0 + 20) std::this_thread::yield();
    during_swap = 1;
  };
  std::vector<std::thread> pool;
  for (int i = 0; i < 3; ++i) pool.emplace_back(worker);
  const auto t = svc.start_assist_training(id, json{{"epochs", 40}, {"seed", 5}});
  const auto done = svc.wait_job(t.id);
  // and keep going a little after it
  const auto n1 = [&] { std::lock_guard lock(m); return results.size(); }();
  while ([&] { std::lock_guard lock(m); return results.size(); }() < n1 + 20) std::this_thread::yield();
  stop = true;
  for (auto& th : pool) th.join();
  REQUIRE(done.state == JobState::Done);
  CHECK(during_swap == 1);

  const auto bb = toy();
  const auto old_state = bb->initial_state();
  const auto new_state = prompt_state_from(Checkpoint::load(tmp.path / "data" / "sessions" / id / "assist.ckpt"), *bb);
  CHECK(hex64(new_state.hash()) == done.result["theta_hash"]);
  const auto ps = prompt_set_from_json(prompts);
  const auto old_mask = rle_encode(bb->segment(ph.volume.slices[4], ps, old_state));
  const auto new_mask = rle_encode(bb->segment(ph.volume.slices[4], ps, new_state));
  REQUIRE(old_mask != new_mask);  // otherwise a torn read could go unnoticed

  int n_old = 0, n_new = 0, torn = 0;
  for (const auto& r : results) {
    const auto h = r["theta"]["hash"].get<std::string>();
    if (h == hex64(old_state.hash()) && r["mask"] == old_mask) ++n_old;
    else if (h == hex64(new_state.hash()) && r["mask"] == new_mask) ++n_new;
    else ++torn;
  }
  MESSAGE("predicts: old " << n_old << " new " << n_new);
  CHECK(torn == 0);
  CHECK(n_old >= 20);
  CHECK(n_new >= 20);
}

TEST_CASE("auto jobs: proposals only, provenance, committed masks untouched, accept/reject") {
  TempDir tmp;
  const auto ph = small_phantom();
  AnnotationService svc(config_for(tmp.path / "data"), toy());
  const std::string id = svc.create_session(nifti_bytes(ph.volume, tmp.path), "v.nii.gz")["session_id"];
  CHECK(status_of([&] { svc.start_auto(id, "propagate", json::object()); }) == 422);
  CHECK(status_of([&] { svc.start_auto(id, "sapnet", json::object()); }) == 422);
  CHECK(status_of([&] { svc.start_auto(id, "guess", json::object()); }) == 400);
  CHECK(status_of([&] { svc.start_sapnet_training(id, json::object()); }) == 422);
  svc.commit(id, 3, rle_encode(ph.mask.slice(3)));
  svc.commit(id, 5, rle_encode(ph.mask.slice(5)));
  const auto before = committed_snapshot(svc, id, 8);
  const auto tt = svc.wait_job(svc.start_assist_training(id, json{{"epochs", 150}, {"bg_points", "independent"}}).id);
  REQUIRE(tt.state == JobState::Done);

  const auto t = svc.wait_job(svc.start_auto(id, "propagate", json{{"n_points", 6}}).id);
  REQUIRE(t.state == JobState::Done);
  CHECK(t.kind == JobKind::Propagate);
  CHECK(committed_snapshot(svc, id, 8) == before);
  const auto props = svc.proposals(id);
  CHECK(props.size() >= 1);
  for (const auto& p : props) {
    CHECK(p["slice"] != 3);
    CHECK(p["slice"] != 5);
    CHECK(p["provenance"]["generator"] == "propagate");
    CHECK(p["provenance"]["slice"] == p["slice"]);
    CHECK(p["job_id"] == t.id);
  }

  const auto ts = svc.wait_job(svc.start_sapnet_training(id, json{{"epochs", 5}}).id);
  REQUIRE(ts.state == JobState::Done);
  CHECK(svc.session_info(id)["sapnet_trained"] == true);
  const auto ta = svc.wait_job(svc.start_auto(id, "sapnet", json{{"post", {{"k_components", 1}}}}).id);
  REQUIRE(ta.state == JobState::Done);
  CHECK(committed_snapshot(svc, id, 8) == before);
  for (const auto& p : svc.proposals(id)) {
    CHECK(p["provenance"]["generator"] == "sapnet");
    CHECK(p["provenance"].contains("stage_hash"));
    CHECK(p["job_id"] == ta.id);
  }

  const auto tc = svc.wait_job(svc.start_auto(id, "classify", json{{"grid_stride", 8}}).id);
  REQUIRE(tc.state == JobState::Done);
  CHECK(committed_snapshot(svc, id, 8) == before);
  const auto cp = svc.proposals(id);
  for (const auto& p : cp) CHECK(p["provenance"]["generator"] == "classify");
  REQUIRE(cp.size() >= 2);

  {
    const int z = cp[0]["slice"];
    const auto prop = svc.proposal(id, z);
    CHECK(svc.accept_proposal(id, z)["version"] == 1);
    CHECK(svc.committed(id, z)["mask"] == prop["mask"]);
    CHECK(status_of([&] { svc.proposal(id, z); }) == 404);
  }
  {
    const int z = cp[1]["slice"];
    svc.reject_proposal(id, z);
    CHECK(status_of([&] { svc.committed(id, z); }) == 404);
  }
  CHECK(status_of([&] { svc.reject_proposal(id, 3); }) == 404);
}

TEST_CASE("cancellation leaves committed state and theta untouched") {
  TempDir tmp;
  const auto ph = small_phantom();
  AnnotationService svc(config_for(tmp.path / "data"), toy());
  const std::string id = svc.create_session(nifti_bytes(ph.volume, tmp.path), "v.nii.gz")["session_id"];
  svc.commit(id, 4, rle_encode(ph.mask.slice(4)));
  const auto before = committed_snapshot(svc, id, 8);
  const auto t = svc.start_assist_training(id, json{{"epochs", 1000000}});
  std::this_thread::sleep_for(std::chrono::milliseconds(50));
  svc.cancel_job(t.id);
  const auto done = svc.wait_job(t.id);
  CHECK(done.state == JobState::Cancelled);
  CHECK(committed_snapshot(svc, id, 8) == before);
  CHECK(svc.session_info(id)["theta"]["trained"] == false);
  CHECK(svc.session_info(id)["active_job"].is_null());
  // slot is free again
  const auto t2 = svc.start_assist_training(id, json{{"epochs", 2}});
  CHECK(svc.wait_job(t2.id).state == JobState::Done);
}

TEST_CASE("export/import round trip is byte-identical; audit sidecar; 415") {
  TempDir tmp;
  const auto ph = small_phantom();
  AnnotationService svc(config_for(tmp.path / "data"), toy());
  const auto bytes = nifti_bytes(ph.volume, tmp.path);
  const std::string a = svc.create_session(bytes, "v.nii.gz")["session_id"];
  for (int z : {1, 4, 6}) svc.commit(a, z, rle_encode(ph.mask.slice(z)));

  CHECK(status_of([&] { svc.export_session(a, "dicom"); }) == 415);
  CHECK(status_of([&] { svc.import_annotations(a, {}, "dicom"); }) == 415);

  const auto nifti = svc.export_session(a, "nifti");
  CHECK(nifti.content_type == "application/gzip");
  CHECK(svc.export_session(a, "nifti").bytes == nifti.bytes);  // deterministic
  const std::string b = svc.create_session(bytes, "v.nii.gz")["session_id"];
  svc.import_annotations(b, nifti.bytes, "nifti");
  CHECK(svc.export_session(b, "nifti").bytes == nifti.bytes);
  for (int z : {1, 4, 6}) CHECK(svc.committed(b, z)["mask"] == rle_encode(ph.mask.slice(z)));
  // the exported mask matches the committed slices voxel for voxel
  {
    std::ofstream(tmp.path / "m.nii.gz", std::ios::binary)
        .write(reinterpret_cast<const char*>(nifti.bytes.data()), static_cast<std::streamsize>(nifti.bytes.size()));
    const auto m = binarize(read_nifti(tmp.path / "m.nii.gz"), {});
    for (int z = 0; z < 8; ++z) {
      const bool committed = z == 1 || z == 4 || z == 6;
      CHECK(m.slice(z) == (committed ? ph.mask.slice(z) : LabelMask(64, 64)));
    }
  }

  const auto rle = svc.export_session(a, "rle");
  const auto rj = json::parse(rle.bytes.begin(), rle.bytes.end());
  CHECK(rj["slices"].size() == 3);
  CHECK(rj["audit"].size() == svc.audit(a).size());
  const std::string c = svc.create_session(bytes, "v.nii.gz")["session_id"];
  svc.import_annotations(c, rle.bytes, "rle");
  CHECK(svc.export_session(c, "nifti").bytes == nifti.bytes);

  const auto bundle = svc.export_session(a, "bundle");
  const auto entries = read_tar(bundle.bytes);
  REQUIRE(entries.size() == 3);
  CHECK(entries[0].name == "mask.nii.gz");
  CHECK(entries[0].data == nifti.bytes);
  CHECK(entries[1].name == "audit.jsonl");
  const std::string audit(entries[1].data.begin(), entries[1].data.end());
  CHECK(std::count(audit.begin(), audit.end(), '\n') == static_cast<long>(svc.audit(a).size()));
  CHECK(entries[2].name == "session.json");

  std::vector<std::uint8_t> bad = {1, 2, 3};
  CHECK(status_of([&] { svc.import_annotations(c, bad, "nifti"); }) == 400);
  CHECK(status_of([&] { svc.import_annotations(c, bad, "rle"); }) == 400);
  const auto tiny = make_phantom(phantoms::cylinder(4, 32, 8.0));
  const std::string d = svc.create_session(nifti_bytes(tiny.volume, tmp.path), "t.nii.gz")["session_id"];
  CHECK(status_of([&] { svc.import_annotations(d, nifti.bytes, "nifti"); }) == 422);
}

TEST_CASE("tar writer round trip and fixed bytes") {
  TarWriter w;
  w.add("a.txt", {'h', 'i'});
  std::vector<std::uint8_t> big(1000, 7);
  w.add("b.bin", big);
  const auto bytes = w.finish();
  CHECK(bytes.size() == 512 + 512 + 512 + 1024 + 1024);
  const auto e = read_tar(bytes);
  REQUIRE(e.size() == 2);
  CHECK(e[0].name == "a.txt");
  CHECK(e[1].data == big);
  TarWriter w2;
  w2.add("a.txt", {'h', 'i'});
  w2.add("b.bin", big);
  CHECK(w2.finish() == bytes);
}

TEST_CASE("service config: file, env overrides, errors") {
  TempDir tmp;
  const auto f = tmp.path / "svc.json";
  std::ofstream(f) << R"({"port": 9001, "data_dir": "/tmp/x", "http_threads": 2})";
  unsetenv("PROMPTMED_PORT");
  unsetenv("PROMPTMED_DATA_DIR");
  unsetenv("PROMPTMED_BACKBONE");
  auto c = ServiceConfig::load(f);
  CHECK(c.port == 9001);
  CHECK(c.data_dir == "/tmp/x");
  setenv("PROMPTMED_PORT", "9100", 1);
  setenv("PROMPTMED_DATA_DIR", "/tmp/y", 1);
  c = ServiceConfig::load(f);
  CHECK(c.port == 9100);
  CHECK(c.data_dir == "/tmp/y");
  setenv("PROMPTMED_PORT", "abc", 1);
  CHECK_THROWS_AS(ServiceConfig::load(f), ConfigError);
  unsetenv("PROMPTMED_PORT");
  unsetenv("PROMPTMED_DATA_DIR");
  std::ofstream(f) << R"({"prot": 1})";
  CHECK_THROWS_AS(ServiceConfig::load(f), ConfigError);
  CHECK_THROWS_AS(ServiceConfig::load(tmp.path / "missing.json"), ConfigError);
  CHECK_THROWS_AS(make_backbone("sam-huge"), ConfigError);
}

TEST_CASE("http: routes, payload formats, status codes") {
  TempDir tmp;
  const auto ph = small_phantom();
  AnnotationService svc(config_for(tmp.path / "data"), toy());
  HttpServer server(svc);
  const int port = server.bind("127.0.0.1", 0);
  std::thread th([&] { server.listen(); });
  server.wait_until_ready();
  httplib::Client cli("127.0.0.1", port);
  const std::string p = kApiPrefix;

  auto r = cli.Get(p + "/health");
  REQUIRE(r);
  CHECK(r->status == 200);

  const auto bytes = nifti_bytes(ph.volume, tmp.path);
  r = cli.Post(p + "/sessions?filename=v.nii.gz", std::string(bytes.begin(), bytes.end()), "application/octet-stream");
  REQUIRE(r);
  CHECK(r->status == 201);
  const std::string id = json::parse(r->body)["session_id"];

  r = cli.Post(p + "/sessions", "garbage", "application/octet-stream");
  CHECK(r->status == 400);
  CHECK(json::parse(r->body).contains("error"));
  r = cli.Get(p + "/sessions/abc123");
  CHECK(r->status == 404);
  r = cli.Get(p + "/sessions");
  CHECK(json::parse(r->body) == json::array({id}));

  r = cli.Get(p + "/sessions/" + id + "/slices/3/image");
  CHECK(r->status == 200);
  CHECK(r->get_header_value("Content-Type") == "image/png");
  r = cli.Get(p + "/sessions/" + id + "/slices/x/image");
  CHECK(r->status == 400);

  r = cli.Post(p + "/sessions/" + id + "/slices/3/predict", point_prompts(32, 32).dump(), "application/json");
  CHECK(r->status == 200);
  CHECK(json::parse(r->body) == svc.predict(id, 3, point_prompts(32, 32)));
  r = cli.Post(p + "/sessions/" + id + "/slices/3/predict", point_prompts(99, 32).dump(), "application/json");
  CHECK(r->status == 422);
  r = cli.Post(p + "/sessions/" + id + "/slices/3/predict", "{not json", "application/json");
  CHECK(r->status == 400);
  r = cli.Post(p + "/sessions/" + id + "/slices/3/predict?format=png", point_prompts(32, 32).dump(), "application/json");
  CHECK(r->get_header_value("Content-Type") == "image/png");

  // commit as PNG, read back as RLE and PNG
  const auto png = mask_png(ph.mask.slice(3), tmp.path);
  r = cli.Put(p + "/sessions/" + id + "/slices/3/annotation", std::string(png.begin(), png.end()), "image/png");
  CHECK(r->status == 200);
  r = cli.Get(p + "/sessions/" + id + "/slices/3/annotation");
  CHECK(json::parse(r->body)["mask"] == rle_encode(ph.mask.slice(3)));
  r = cli.Get(p + "/sessions/" + id + "/slices/3/annotation?format=png");
  CHECK(mask_from_png({r->body.begin(), r->body.end()}, tmp.path) == ph.mask.slice(3));
  r = cli.Put(p + "/sessions/" + id + "/slices/4/annotation", json{{"mask", rle_encode(ph.mask.slice(4))}}.dump(),
              "application/json");
  CHECK(r->status == 200);
  r = cli.Put(p + "/sessions/" + id + "/slices/4/annotation", rle_encode(LabelMask(4, 4)).dump(), "application/json");
  CHECK(r->status == 422);

  r = cli.Post(p + "/sessions/" + id + "/jobs/assist_train", json{{"epochs", 3000}}.dump(), "application/json");
  CHECK(r->status == 202);
  const std::string jid = json::parse(r->body)["job_id"];
  r = cli.Post(p + "/sessions/" + id + "/jobs/propagate", "{}", "application/json");
  CHECK(r->status == 409);
  r = cli.Post(p + "/jobs/" + jid + "/cancel", "", "application/json");
  CHECK(r->status == 200);
  svc.wait_job(jid);
  r = cli.Get(p + "/jobs/" + jid);
  CHECK(json::parse(r->body)["state"] == "cancelled");
  r = cli.Post(p + "/sessions/" + id + "/jobs/auto", json{{"strategy", "sapnet"}}.dump(), "application/json");
  CHECK(r->status == 422);
  r = cli.Post(p + "/sessions/" + id + "/jobs/dance", "{}", "application/json");
  CHECK(r->status == 404);

  r = cli.Post(p + "/sessions/" + id + "/jobs/propagate", "{}", "application/json");
  CHECK(r->status == 202);
  svc.wait_job(json::parse(r->body)["job_id"]);
  r = cli.Get(p + "/sessions/" + id + "/proposals");
  CHECK(r->status == 200);
  const auto props = json::parse(r->body);
  if (!props.empty()) {
    const int z = props[0]["slice"];
    r = cli.Post(p + "/sessions/" + id + "/proposals/" + std::to_string(z) + "/accept", "", "application/json");
    CHECK(r->status == 200);
  }

  r = cli.Get(p + "/sessions/" + id + "/audit");
  CHECK(json::parse(r->body).size() >= 5);
  r = cli.Get(p + "/sessions/" + id + "/export?format=zip");
  CHECK(r->status == 415);
  r = cli.Get(p + "/sessions/" + id + "/export?format=nifti");
  CHECK(r->status == 200);
  const std::string exported = r->body;
  CHECK(std::vector<std::uint8_t>(exported.begin(), exported.end()) == svc.export_session(id, "nifti").bytes);

  r = cli.Post(p + "/sessions", json{{"manifest", "/nope.json"}, {"case", "x"}}.dump(), "application/json");
  CHECK(r->status == 400);
  r = cli.Get(p + "/nothing-here");
  CHECK(r->status == 404);

  server.stop();
  th.join();
}
