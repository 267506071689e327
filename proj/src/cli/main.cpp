#include <csignal>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <thread>

#include "CLI11.hpp"
#include "promptmed/backbone/checkpoint.hpp"
#include "promptmed/cli/experiments.hpp"
#include "promptmed/core/errors.hpp"
#include "promptmed/data/io.hpp"
#include "promptmed/data/phantom.hpp"
#include "promptmed/service/configs.hpp"
#include "promptmed/service/http.hpp"
#include "promptmed/service/service.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace promptmed;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

/// Input problem the user can fix: exit code 2.
struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct DataOpts {
  std::string phantoms = "two_body";
  std::string manifest;
  std::uint64_t phantom_seed = 0;
};

void add_data_opts(CLI::App* c, DataOpts& d) {
  c->add_option("--phantom", d.phantoms, "comma-separated presets: two_body, kidneys, cylinder");
  c->add_option("--manifest", d.manifest, "dataset manifest (overrides --phantom)");
  c->add_option("--phantom-seed", d.phantom_seed, "noise seed for the presets (0: preset default)");
}

std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

std::vector<SuiteCase> load_cases(const DataOpts& d) {
  if (!d.manifest.empty()) return manifest_cases(d.manifest);
  std::vector<SuiteCase> out;
  for (const auto& p : split(d.phantoms)) out.push_back(phantom_case(p, d.phantom_seed));
  if (out.empty()) throw UsageError("no cases selected");
  return out;
}

/// Runs f(i) for i in [0, n) on up to `jobs` threads; results stay in index order.
template <class F>
void for_cases(std::size_t n, int jobs, F f) {
  std::atomic<std::size_t> next{0};
  std::exception_ptr err;
  std::mutex m;
  auto worker = [&] {
    for (std::size_t i; (i = next++) < n;) {
      try {
        f(i);
      } catch (...) {
        std::lock_guard lock(m);
        if (!err) err = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int t = 1; t < std::min<int>(jobs, static_cast<int>(n)); ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);
}

void prepare_out(const fs::path& out, bool force) {
  if (fs::exists(out) && !fs::is_empty(out) && !force)
    throw UsageError(out.string() + " exists and is not empty (use --force to overwrite)");
  fs::create_directories(out);
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw IoError(p.string(), "cannot open for writing");
  f << s;
}

std::string fixed(double v, int prec = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

// ---------------------------------------------------------------- phantom gen

struct PhantomOpts {
  std::string config, preset = "two_body", out;
  std::uint64_t seed = 0;
  bool force = false;
};

int cmd_phantom_gen(const PhantomOpts& o) {
  PhantomConfig cfg;
  if (!o.config.empty()) {
    std::ifstream in(o.config);
    if (!in) throw UsageError(o.config + ": cannot open");
    json j;
    try {
      j = json::parse(in);
    } catch (const std::exception& e) {
      throw UsageError(o.config + ": " + e.what());
    }
    cfg = j.contains("preset") ? preset_config(j["preset"].get<std::string>(), j.value("seed", std::uint64_t{0}))
                               : phantom_config_from_json(j);
  } else {
    cfg = preset_config(o.preset, o.seed);
  }
  if (o.seed && !o.config.empty()) cfg.seed = o.seed;
  cfg.validate();
  const fs::path out = o.out;
  prepare_out(out, o.force);
  const auto ph = make_phantom(cfg);
  write_volume_nifti(out / "volume.nii.gz", ph.volume);
  write_mask_nifti(out / "mask.nii.gz", ph.mask, ph.volume.spacing);
  write_text(out / "phantom.json", to_json(cfg).dump(2) + "\n");
  ManifestEntry e;
  e.id = "phantom";
  e.modality = "synthetic";
  e.images = {"volume.nii.gz"};
  e.masks = {"mask.nii.gz"};
  DatasetManifest m;
  m.cases = {e};
  write_text(out / "manifest.json", to_json(m).dump(2) + "\n");
  std::cout << "wrote " << out.string() << " (" << ph.volume.depth() << "x" << ph.volume.height() << "x"
            << ph.volume.width() << ", " << ph.mask.count() << " foreground voxels)\n";
  return 0;
}

// ---------------------------------------------------------------- assist

struct AssistOpts {
  DataOpts data;
  std::string mode = "points", loss = "dice_plus_ce", bg_points = "matched", out, checkpoint;
  int slices = 5, points = 10, epochs = 200, jobs = 1;
  double lr = 1e-2;
  std::uint64_t seed = 0;
  bool force = false;
};

AssistExperiment experiment_from(const AssistOpts& o) {
  AssistExperiment e;
  e.mode = prompt_mode_from(o.mode);
  e.slices = o.slices;
  e.max_points = o.points;
  e.seed = o.seed;
  e.train.epochs = o.epochs;
  e.train.lr = o.lr;
  e.train.loss = assist_loss_from(o.loss);
  e.train.bg_points = background_points_from(o.bg_points);
  e.train.prompt_mode = e.mode;
  e.train.validate();
  return e;
}

int cmd_assist_train(const AssistOpts& o) {
  const auto e = experiment_from(o);
  const auto cases = load_cases(o.data);
  auto bb = make_backbone("toy");
  prepare_out(o.out, o.force);
  std::vector<AssistTrainResult> results(cases.size());
  std::vector<std::vector<int>> slices(cases.size());
  for_cases(cases.size(), o.jobs, [&](std::size_t i) {
    slices[i] = annotated_slices(cases[i], e.slices, e.seed);
    AssistTrainConfig cfg = e.train;
    cfg.seed = e.seed;
    results[i] = train_prompt_encoder(pairs_for(cases[i], slices[i]), *bb, cfg);
  });
  std::ostringstream timing;
  timing << "case,slices,epochs,iterations,seconds\n";
  for (std::size_t i = 0; i < cases.size(); ++i) {
    auto ck = make_checkpoint(*bb, results[i].state);
    ck.metadata = {{"case", cases[i].id}, {"slices", slices[i]}, {"config", to_json(e.train)}};
    ck.save(fs::path(o.out) / (cases[i].id + ".ckpt"));
    write_text(fs::path(o.out) / (cases[i].id + ".log.json"), training_log_json(results[i]).dump(1) + "\n");
    timing << cases[i].id << ',' << e.slices << ',' << e.train.epochs << ',' << results[i].iterations << ','
           << fixed(results[i].seconds, 3) << '\n';
    std::cout << cases[i].id << ": trained on slices " << json(slices[i]).dump() << " in " << fixed(results[i].seconds, 2)
              << " s, final loss " << fixed(results[i].log.back().loss) << "\n";
  }
  write_text(fs::path(o.out) / "timing.csv", timing.str());
  return 0;
}

int cmd_assist_eval(const AssistOpts& o) {
  const auto e = experiment_from(o);
  const auto cases = load_cases(o.data);
  auto bb = make_backbone("toy");
  std::optional<PromptEncoderState> preset;
  if (!o.checkpoint.empty()) {
    if (cases.size() != 1) throw UsageError("--checkpoint needs exactly one case");
    preset = prompt_state_from(Checkpoint::load(o.checkpoint), *bb);
  }
  prepare_out(o.out, o.force);
  std::vector<AssistCaseResult> res(cases.size());
  for_cases(cases.size(), o.jobs, [&](std::size_t i) {
    res[i] = run_assist_case(cases[i], *bb, e, preset ? &*preset : nullptr);
  });

  std::vector<CaseDice> un, tr;
  std::ostringstream timing, curve;
  timing << "case,slices,epochs,iterations,seconds\n";
  curve << "case,mode,slices,theta,n_points,mean,std,instances\n";
  json summary = json::array();
  for (const auto& r : res) {
    un.insert(un.end(), r.untrained.begin(), r.untrained.end());
    tr.insert(tr.end(), r.trained.begin(), r.trained.end());
    timing << r.case_id << ',' << e.slices << ',' << e.train.epochs << ',' << r.iterations << ','
           << fixed(r.train_seconds, 3) << '\n';
    for (const auto& c : dice_curve(r.untrained, r.trained))
      curve << r.case_id << ',' << o.mode << ',' << e.slices << ',' << c.theta << ',' << c.n_points << ','
            << fixed(c.mean) << ',' << fixed(c.stddev) << ',' << c.count << '\n';
    summary.push_back({{"case", r.case_id}, {"train_slices", r.train_slices}, {"final_loss", r.final_loss}});
  }
  const fs::path out = o.out;
  write_dice_csv(out / "dice_untrained.csv", un);
  write_dice_csv(out / "dice_trained.csv", tr);
  write_text(out / "curve.csv", curve.str());
  write_text(out / "timing.csv", timing.str());
  write_text(out / "summary.json", summary.dump(1) + "\n");
  const json run{{"kind", "assist"},
                 {"mode", o.mode},
                 {"slices", e.slices},
                 {"points", e.max_points},
                 {"seed", e.seed},
                 {"config", to_json(e.train)},
                 {"files", {"dice_untrained.csv", "dice_trained.csv", "curve.csv", "timing.csv", "summary.json"}}};
  write_text(out / "run.json", run.dump(1) + "\n");

  std::cout << "theta,n_points,mean,std\n";
  for (const auto& c : dice_curve(un, tr))
    std::cout << c.theta << ',' << c.n_points << ',' << fixed(c.mean) << ',' << fixed(c.stddev) << '\n';
  return 0;
}

// ---------------------------------------------------------------- auto

struct AutoOpts {
  DataOpts data;
  std::string strategy = "sapnet", ablation = "pe,biasdice,post", out;
  int slices = 5, sapnet_epochs = 100, assist_epochs = 200, jobs = 1;
  std::uint64_t seed = 0;
  bool force = false;
};

int cmd_auto_run(const AutoOpts& o) {
  AblationSettings s;
  s.strategy = auto_strategy_from(o.strategy);
  s.toggles = split(o.ablation);
  s.slices = o.slices;
  s.seed = o.seed;
  s.sapnet_epochs = o.sapnet_epochs;
  s.assist_epochs = o.assist_epochs;
  s.validate();
  const auto cases = load_cases(o.data);
  auto bb = make_backbone("toy");
  prepare_out(o.out, o.force);
  std::vector<std::vector<AblationRow>> rows(cases.size());
  for_cases(cases.size(), o.jobs, [&](std::size_t i) { rows[i] = run_ablation(cases[i], *bb, s); });

  std::ostringstream csv, md;
  csv << kAblationCsvHeader << '\n';
  for (std::size_t i = 0; i < cases.size(); ++i) append_ablation_csv(csv, cases[i].id, s.strategy, rows[i]);
  md << "| case | row | PE | biasDice | Post | Dice | FP |\n|---|---|---|---|---|---|---|\n";
  auto mark = [](bool b) { return b ? "x" : ""; };
  for (std::size_t i = 0; i < cases.size(); ++i)
    for (const auto& r : rows[i])
      md << "| " << cases[i].id << " | " << r.name << " | " << mark(r.pe) << " | " << mark(r.biasdice) << " | "
         << mark(r.post) << " | " << fixed(r.dice_mean, 3) << " ± " << fixed(r.dice_std, 3) << " | " << r.fp << " |\n";
  const fs::path out = o.out;
  write_text(out / "ablation.csv", csv.str());
  write_text(out / "ablation.md", md.str());
  const json run{{"kind", "auto"},
                 {"strategy", o.strategy},
                 {"toggles", s.toggles},
                 {"slices", s.slices},
                 {"seed", s.seed},
                 {"sapnet_epochs", s.sapnet_epochs},
                 {"assist_epochs", s.assist_epochs},
                 {"files", {"ablation.csv", "ablation.md"}}};
  write_text(out / "run.json", run.dump(1) + "\n");
  std::cout << md.str();
  return 0;
}

// ---------------------------------------------------------------- report

int cmd_report(const std::string& in, const std::string& out, const std::string& expect) {
  const auto r = build_report(in, split(expect));
  if (out.empty()) std::cout << r.markdown;
  else write_text(out, r.markdown);
  if (!r.absent.empty()) {
    std::cerr << "absent: ";
    for (const auto& a : r.absent) std::cerr << a << ' ';
    std::cerr << "\n";
    return kExitRuntime;
  }
  return 0;
}

// ---------------------------------------------------------------- serve

struct ServeOpts {
  std::string config, host, data_dir, backbone;
  int port = -1;
};

int cmd_serve(const ServeOpts& o) {
  ServiceConfig cfg;
  try {
    cfg = ServiceConfig::load(o.config.empty() ? std::nullopt : std::optional<fs::path>(o.config));
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  if (!o.host.empty()) cfg.host = o.host;
  if (o.port >= 0) cfg.port = o.port;
  if (!o.data_dir.empty()) cfg.data_dir = o.data_dir;
  if (!o.backbone.empty()) cfg.backbone = o.backbone;
  std::shared_ptr<const Backbone> bb;
  try {
    bb = make_backbone(cfg.backbone, cfg.backbone_seed);
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }

  // signals go to a dedicated thread so stop() is never called from a handler
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);

  AnnotationService svc(cfg, bb);
  HttpServer server(svc);
  const int port = server.bind(cfg.host, cfg.port);
  std::cout << "listening on http://" << cfg.host << ":" << port << kApiPrefix << " (data " << cfg.data_dir.string()
            << ")" << std::endl;
  std::thread sig([&] {
    int s = 0;
    sigwait(&set, &s);
    server.stop();
  });
  server.listen();
  pthread_kill(sig.native_handle(), SIGTERM);  // harmless if it already fired
  sig.join();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"promptmed: prompt learning and auto-annotation for medical slices"};
  app.set_config("--config-file", "", "TOML/INI file providing any flag; sections name subcommands ([assist.eval])");
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.require_subcommand(1);

  PhantomOpts ph;
  auto* phantom = app.add_subcommand("phantom", "synthetic phantoms")->require_subcommand(1);
  auto* gen = phantom->add_subcommand("gen", "write a phantom volume, mask and manifest");
  gen->add_option("--config", ph.config, "phantom JSON: a full config or {\"preset\": ..., \"seed\": ...}");
  gen->add_option("--preset", ph.preset, "two_body, kidneys or cylinder (when no --config)");
  gen->add_option("--seed", ph.seed, "noise seed override");
  gen->add_option("--out", ph.out, "output directory")->required();
  gen->add_flag("--force", ph.force, "overwrite a non-empty output directory");

  AssistOpts as;
  auto* assist = app.add_subcommand("assist", "per-case prompt-encoder training")->require_subcommand(1);
  auto add_assist = [&](CLI::App* c, bool eval) {
    add_data_opts(c, as.data);
    c->add_option("--mode", as.mode, "points | boxes | composite");
    c->add_option("--slices", as.slices, "annotated slices per case");
    c->add_option("--seed", as.seed, "slice selection, prompt sampling and evaluation seed");
    c->add_option("--epochs", as.epochs);
    c->add_option("--lr", as.lr);
    c->add_option("--loss", as.loss, "dice | cross_entropy | dice_plus_ce");
    c->add_option("--bg-points", as.bg_points, "matched | independent | none");
    c->add_option("--jobs", as.jobs, "cases processed in parallel")->check(CLI::PositiveNumber);
    c->add_option("--out", as.out, "output directory")->required();
    c->add_flag("--force", as.force, "overwrite a non-empty output directory");
    if (eval) {
      c->add_option("--points", as.points, "largest point count on the curve (composite: click budget)");
      c->add_option("--checkpoint", as.checkpoint, "evaluate this theta instead of training");
    }
  };
  auto* atrain = assist->add_subcommand("train", "train theta on N annotated slices and save checkpoints");
  add_assist(atrain, false);
  auto* aeval = assist->add_subcommand("eval", "train then score Dice vs prompt count on held-out slices");
  add_assist(aeval, true);

  AutoOpts au;
  auto* autoc = app.add_subcommand("auto", "automatic prompt generation")->require_subcommand(1);
  auto* arun = autoc->add_subcommand("run", "ablation table for one strategy");
  add_data_opts(arun, au.data);
  arun->add_option("--strategy", au.strategy, "propagate | classify | sapnet");
  arun->add_option("--ablation", au.ablation, "toggles added row by row (sapnet: pe,biasdice,post)");
  arun->add_option("--slices", au.slices);
  arun->add_option("--seed", au.seed);
  arun->add_option("--sapnet-epochs", au.sapnet_epochs);
  arun->add_option("--assist-epochs", au.assist_epochs);
  arun->add_option("--jobs", au.jobs)->check(CLI::PositiveNumber);
  arun->add_option("--out", au.out)->required();
  arun->add_flag("--force", au.force);

  std::string rin, rout, rexpect;
  auto* report = app.add_subcommand("report", "aggregate run directories into Markdown");
  report->add_option("--in", rin, "directory of runs")->required();
  report->add_option("--out", rout, "Markdown file (stdout when omitted)");
  report->add_option("--expect", rexpect, "comma-separated run names that must be present");

  ServeOpts sv;
  auto* serve = app.add_subcommand("serve", "run the HTTP annotation service");
  serve->add_option("--service-config", sv.config, "service JSON config");
  serve->add_option("--host", sv.host);
  serve->add_option("--port", sv.port);
  serve->add_option("--data-dir", sv.data_dir);
  serve->add_option("--backbone", sv.backbone);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    if (*gen) return cmd_phantom_gen(ph);
    if (*atrain) return cmd_assist_train(as);
    if (*aeval) return cmd_assist_eval(as);
    if (*arun) return cmd_auto_run(au);
    if (*report) return cmd_report(rin, rout, rexpect);
    if (*serve) return cmd_serve(sv);
  } catch (const std::invalid_argument& e) {  // includes ConfigError and UsageError
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitConfig;
}
