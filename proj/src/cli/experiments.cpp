#include "promptmed/cli/experiments.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

#include "promptmed/core/components.hpp"
#include "promptmed/core/hashing.hpp"
#include "promptmed/core/metrics.hpp"
#include "promptmed/data/io.hpp"
#include "promptmed/data/phantom.hpp"
#include "promptmed/data/slices.hpp"
#include "promptmed/promptgen/classifier.hpp"
#include "promptmed/promptgen/propagation.hpp"

namespace fs = std::filesystem;

namespace promptmed {

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

}  // namespace

std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  double m = 0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, std::sqrt(s / static_cast<double>(v.size()))};
}

// ---------------------------------------------------------------- cases

PhantomConfig preset_config(const std::string& preset, std::uint64_t seed) {
  PhantomConfig cfg;
  if (preset == "two_body") cfg = seed ? phantoms::two_body(seed) : phantoms::two_body();
  else if (preset == "kidneys") cfg = seed ? phantoms::kidneys_with_distractors(seed) : phantoms::kidneys_with_distractors();
  else if (preset == "cylinder") cfg = phantoms::cylinder();
  else throw std::invalid_argument("unknown phantom preset '" + preset + "' (two_body, kidneys, cylinder)");
  if (seed) cfg.seed = seed;
  return cfg;
}

SuiteCase phantom_case(const std::string& preset, std::uint64_t seed) {
  auto ph = make_phantom(preset_config(preset, seed));
  return {preset, std::move(ph.volume), std::move(ph.mask), false};
}

std::vector<SuiteCase> manifest_cases(const fs::path& manifest) {
  const auto m = read_manifest(manifest);
  std::vector<SuiteCase> out;
  for (const auto& e : m.cases) {
    if (!e.has_ground_truth()) continue;
    auto lc = load_case(e, m.base_dir);
    out.push_back({lc.id, std::move(lc.volume), std::move(*lc.mask), lc.is_2d});
  }
  if (out.empty()) throw std::invalid_argument(manifest.string() + ": no case has ground truth");
  return out;
}

std::vector<int> annotated_slices(const SuiteCase& c, int n, std::uint64_t seed) {
  Rng rng(seed);
  if (c.is_2d) {
    auto fg = foreground_slices(c.mask);
    rng.shuffle(fg.begin(), fg.end());
    fg.resize(std::min<std::size_t>(fg.size(), static_cast<std::size_t>(n)));
    std::sort(fg.begin(), fg.end());
    return fg;
  }
  SliceSelectionPolicy pol;
  pol.n_slices = n;
  auto sel = select_training_slices(c.mask, pol, rng);
  std::sort(sel.foreground.begin(), sel.foreground.end());
  return sel.foreground;
}

std::vector<TrainPair> pairs_for(const SuiteCase& c, const std::vector<int>& slices) {
  std::vector<TrainPair> out;
  for (int z : slices) out.push_back({c.volume.slices[z], c.mask.slice(z)});
  return out;
}

std::vector<EvalCase> held_out_cases(const SuiteCase& c, const std::vector<int>& exclude) {
  std::vector<EvalCase> out;
  for (int z : foreground_slices(c.mask))
    if (std::find(exclude.begin(), exclude.end(), z) == exclude.end())
      out.push_back({c.id + "/slice-" + std::to_string(z), c.volume.slices[z], c.mask.slice(z)});
  return out;
}

// ---------------------------------------------------------------- assist

namespace {

std::vector<CaseDice> evaluate_theta(const Backbone& bb, const PromptEncoderState& theta,
                                     const std::vector<EvalCase>& cases, const AssistExperiment& e) {
  std::vector<CaseDice> rows;
  switch (e.mode) {
    case PromptMode::Points:
      for (int n = 1; n <= e.max_points; ++n) {
        auto s = eval_points(bb, theta, cases, n, e.seed + 1000);
        rows.insert(rows.end(), s.records.begin(), s.records.end());
      }
      break;
    case PromptMode::Boxes: {
      auto s = eval_boxes(bb, theta, cases, e.train.box_cfg, e.seed + 1000);
      rows = s.records;
      break;
    }
    case PromptMode::Composite: {
      auto s = eval_composite_active(bb, theta, cases, e.train.box_cfg, e.seed + 1000, e.max_points);
      for (const auto& r : s.records) rows.push_back({r.case_id, r.points_used(), r.best_dice});
      break;
    }
  }
  return rows;
}

}  // namespace

AssistCaseResult run_assist_case(const SuiteCase& c, const Backbone& bb, const AssistExperiment& e,
                                 const PromptEncoderState* preset_theta) {
  if (e.slices < 1) throw std::invalid_argument("--slices must be >= 1");
  if (e.max_points < 1) throw std::invalid_argument("--points must be >= 1");
  AssistCaseResult r;
  r.case_id = c.id;
  r.train_slices = annotated_slices(c, e.slices, e.seed);
  if (r.train_slices.empty()) throw std::invalid_argument(c.id + ": no foreground slice to annotate");
  if (preset_theta) {
    r.theta = *preset_theta;
  } else {
    AssistTrainConfig cfg = e.train;
    cfg.prompt_mode = e.mode;
    cfg.seed = e.seed;
    const auto t0 = std::chrono::steady_clock::now();
    auto res = train_prompt_encoder(pairs_for(c, r.train_slices), bb, cfg);
    r.train_seconds = seconds_since(t0);
    r.iterations = res.iterations;
    r.final_loss = res.log.empty() ? 0.0 : res.log.back().loss;
    r.theta = std::move(res.state);
  }
  const auto cases = held_out_cases(c, r.train_slices);
  r.untrained = evaluate_theta(bb, bb.initial_state(), cases, e);
  r.trained = evaluate_theta(bb, r.theta, cases, e);
  return r;
}

std::vector<CurvePoint> dice_curve(const std::vector<CaseDice>& untrained, const std::vector<CaseDice>& trained) {
  std::vector<CurvePoint> out;
  for (const auto& [name, rows] : {std::pair{"untrained", &untrained}, std::pair{"trained", &trained}}) {
    std::map<int, std::vector<double>> by_n;
    for (const auto& r : *rows) by_n[r.n_points].push_back(r.dice);
    for (const auto& [n, v] : by_n) {
      const auto [m, s] = mean_std(v);
      out.push_back({name, n, m, s, static_cast<int>(v.size())});
    }
  }
  return out;
}

// ---------------------------------------------------------------- auto

AutoStrategy auto_strategy_from(const std::string& s) {
  if (s == "propagate") return AutoStrategy::Propagate;
  if (s == "classify") return AutoStrategy::Classify;
  if (s == "sapnet") return AutoStrategy::Sapnet;
  throw std::invalid_argument("unknown strategy '" + s + "' (propagate, classify, sapnet)");
}

const char* to_string(AutoStrategy s) {
  switch (s) {
    case AutoStrategy::Propagate: return "propagate";
    case AutoStrategy::Classify: return "classify";
    case AutoStrategy::Sapnet: return "sapnet";
  }
  return "?";
}

void AblationSettings::validate() const {
  std::set<std::string> seen;
  for (const auto& t : toggles) {
    if (t != "pe" && t != "biasdice" && t != "post")
      throw std::invalid_argument("unknown ablation toggle '" + t + "' (pe, biasdice, post)");
    if (strategy != AutoStrategy::Sapnet && t != "post")
      throw std::invalid_argument("toggle '" + t + "' only applies to --strategy sapnet");
    if (!seen.insert(t).second) throw std::invalid_argument("ablation toggle '" + t + "' given twice");
  }
  if (slices < 1) throw std::invalid_argument("slices must be >= 1");
  if (strategy == AutoStrategy::Sapnet && slices < 2) throw std::invalid_argument("sapnet needs at least 2 slices");
  if (sapnet_epochs < 1 || assist_epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (k_components < 1) throw std::invalid_argument("k_components must be >= 1");
}

namespace {

struct Scored {
  double mean = 0, std = 0;
  std::int64_t fp = 0;
  int evaluated = 0;
};

// Dice on held-out foreground slices, FP over every held-out slice.
Scored score_slices(const SuiteCase& c, const std::vector<int>& annotated, const std::map<int, LabelMask>& pred) {
  Scored s;
  std::vector<double> d;
  for (int z = 0; z < c.volume.depth(); ++z) {
    if (std::count(annotated.begin(), annotated.end(), z)) continue;
    const auto gt = c.mask.slice(z);
    auto it = pred.find(z);
    const LabelMask p = it == pred.end() ? LabelMask(gt.height(), gt.width()) : it->second;
    s.fp += confusion(p, gt).fp;
    if (gt.any()) d.push_back(dice(p, gt));
  }
  std::tie(s.mean, s.std) = mean_std(d);
  s.evaluated = static_cast<int>(d.size());
  return s;
}

std::vector<int> held_out_indices(const SuiteCase& c, const std::vector<int>& annotated) {
  std::vector<int> out;
  for (int z = 0; z < c.volume.depth(); ++z)
    if (!std::count(annotated.begin(), annotated.end(), z)) out.push_back(z);
  return out;
}

}  // namespace

std::vector<AblationRow> run_ablation(const SuiteCase& c, const Backbone& bb, const AblationSettings& s) {
  s.validate();
  const auto annotated = annotated_slices(c, s.slices, s.seed);
  if (annotated.empty()) throw std::invalid_argument(c.id + ": no foreground slice to annotate");
  const auto pairs = pairs_for(c, annotated);
  const auto held = held_out_indices(c, annotated);

  // one assist theta per case, shared by every row
  AssistTrainConfig acfg;
  acfg.epochs = s.assist_epochs;
  acfg.seed = s.seed;
  if (s.strategy == AutoStrategy::Sapnet) acfg.prompt_mode = PromptMode::Boxes;
  if (s.strategy == AutoStrategy::Propagate) acfg.bg_points = BackgroundPoints::Independent;
  const auto theta = train_prompt_encoder(pairs, bb, acfg).state;
  const AssistModel model{bb, theta};

  std::vector<AblationRow> rows;
  for (std::size_t i = 0; i <= s.toggles.size(); ++i) {
    AblationRow r;
    for (std::size_t k = 0; k < i; ++k) {
      r.name += "+" + s.toggles[k];
      if (s.toggles[k] == "pe") r.pe = true;
      if (s.toggles[k] == "biasdice") r.biasdice = true;
      if (s.toggles[k] == "post") r.post = true;
    }
    if (r.name.empty()) r.name = "baseline";
    rows.push_back(r);
  }

  const auto t_all = std::chrono::steady_clock::now();
  if (s.strategy == AutoStrategy::Sapnet) {
    std::map<std::pair<bool, bool>, std::shared_ptr<SapNet>> nets;  // rows that differ only in post share a net
    for (auto& r : rows) {
      const auto t0 = std::chrono::steady_clock::now();
      auto& net = nets[{r.pe, r.biasdice}];
      if (!net) {
        SapTrainConfig cfg;
        cfg.epochs = s.sapnet_epochs;
        cfg.seed = s.seed;
        cfg.use_pe = r.pe && !c.is_2d;
        cfg.beta = r.biasdice ? s.beta_on : 1.0;
        net = std::make_shared<SapNet>(train_sapnet(pairs, bb, cfg));
      }
      AutoConfig ac;
      ac.seed = s.seed;
      ac.post.k_components = r.post ? s.k_components : 0;
      std::vector<SliceImage> imgs;
      for (int z : held) {
        imgs.push_back(c.volume.slices[z]);
        imgs.back().slice_index = z;
      }
      const auto res = auto_segment(imgs, *net, model, ac);
      std::map<int, LabelMask> pred;
      for (const auto& x : res) pred[x.slice] = x.mask;
      const auto sc = score_slices(c, annotated, pred);
      r.dice_mean = sc.mean;
      r.dice_std = sc.std;
      r.fp = sc.fp;
      r.evaluated = sc.evaluated;
      r.hashes = stage_hashes(*net, ac.post, model);
      r.seconds = seconds_since(t0);
    }
    return rows;
  }

  std::map<int, LabelMask> raw;
  Mask3D ensemble;
  if (s.strategy == AutoStrategy::Propagate) {
    std::vector<PropagationSeed> seeds;
    for (const auto& z : annotated) seeds.push_back({z, c.mask.slice(z)});
    PropagationConfig pcfg;
    pcfg.seed = s.seed;
    ensemble = propagate_ensemble(c.volume, seeds, pcfg, model);
    for (int z : held) raw[z] = ensemble.slice(z);
  } else {
    ClassifierTrainConfig ccfg;
    ccfg.seed = s.seed;
    const auto clf = train_point_classifier(pairs, bb, ccfg, c.id);
    for (int z : held)
      raw[z] = segment_classified(model, c.volume.slices[z], classify_candidate_points(c.volume.slices[z], clf, bb, 8));
  }
  const double shared = seconds_since(t_all);
  for (auto& r : rows) {
    const auto t0 = std::chrono::steady_clock::now();
    std::map<int, LabelMask> pred = raw;
    if (r.post) {
      if (s.strategy == AutoStrategy::Propagate && !c.is_2d) {
        // components are taken over the whole ensemble, annotated slices included, so they stay connected
        const Mask3D m = top_k_components(ensemble, s.k_components);
        for (auto& [z, p] : pred) p = m.slice(z);
      } else {
        for (auto& [z, p] : pred) p = top_k_components(p, s.k_components);
      }
    }
    const auto sc = score_slices(c, annotated, pred);
    r.dice_mean = sc.mean;
    r.dice_std = sc.std;
    r.fp = sc.fp;
    r.evaluated = sc.evaluated;
    r.seconds = shared + seconds_since(t0);
  }
  return rows;
}

void append_ablation_csv(std::ostream& os, const std::string& case_id, AutoStrategy s, const std::vector<AblationRow>& rows) {
  for (const auto& r : rows) {
    const bool sap = s == AutoStrategy::Sapnet;
    os << case_id << ',' << to_string(s) << ',' << r.name << ',' << r.pe << ',' << r.biasdice << ',' << r.post << ','
       << fmt(r.dice_mean) << ',' << fmt(r.dice_std) << ',' << r.fp << ',' << r.evaluated << ','
       << (sap ? hex64(r.hashes.coarse) : "") << ',' << (sap ? hex64(r.hashes.post) : "") << ','
       << (sap ? hex64(r.hashes.assist) : "") << '\n';
  }
}

// ---------------------------------------------------------------- report

namespace {

std::vector<std::vector<std::string>> read_csv(const fs::path& p, std::string* header) {
  std::ifstream in(p);
  std::string line;
  std::getline(in, line);
  if (header) *header = line;
  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    rows.push_back(std::move(cells));
  }
  return rows;
}

std::string pm(double m, double s) { return fmt(m, 3) + " ± " + fmt(s, 3); }

}  // namespace

ReportResult build_report(const fs::path& runs, const std::vector<std::string>& expected) {
  ReportResult out;
  if (!fs::is_directory(runs)) throw std::invalid_argument(runs.string() + ": not a directory");
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(runs))
    if (e.is_directory()) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());

  std::ostringstream md;
  md << "# Run report\n\n";
  std::set<std::string> present;
  std::ostringstream assist_md, timing_md, auto_md;
  // n_points -> column label -> dice values
  std::map<std::string, std::map<int, std::vector<double>>> curves;
  std::map<std::string, std::vector<double>> timings;

  for (const auto& d : dirs) {
    const auto name = d.filename().string();
    if (!fs::exists(d / "run.json")) {
      out.absent.push_back(name + "/run.json");
      continue;
    }
    nlohmann::json run;
    try {
      std::ifstream in(d / "run.json");
      run = nlohmann::json::parse(in);
    } catch (const std::exception&) {
      out.absent.push_back(name + "/run.json (unreadable)");
      continue;
    }
    bool complete = true;
    for (const auto& f : run.value("files", nlohmann::json::array()))
      if (!fs::exists(d / f.get<std::string>())) {
        out.absent.push_back(name + "/" + f.get<std::string>());
        complete = false;
      }
    if (!complete) continue;
    present.insert(name);
    const std::string kind = run.value("kind", "");
    if (kind == "assist") {
      const std::string label = run.value("mode", "?") + ", " + std::to_string(run.value("slices", 0)) + " slices";
      for (const char* theta : {"untrained", "trained"}) {
        const auto rows = read_csv(d / (std::string("dice_") + theta + ".csv"), nullptr);
        for (const auto& r : rows)
          if (r.size() >= 3) curves[label + " (" + theta + ")"][std::stoi(r[1])].push_back(std::stod(r[2]));
      }
      for (const auto& r : read_csv(d / "timing.csv", nullptr))
        if (r.size() >= 5) timings[label].push_back(std::stod(r[4]));
    } else if (kind == "auto") {
      std::string header;
      const auto rows = read_csv(d / "ablation.csv", &header);
      auto_md << "### " << name << "\n\n| case | strategy | row | Dice (mean ± std) | FP | slices |\n|---|---|---|---|---|---|\n";
      for (const auto& r : rows)
        if (r.size() >= 10)
          auto_md << "| " << r[0] << " | " << r[1] << " | " << r[2] << " | " << pm(std::stod(r[6]), std::stod(r[7]))
                  << " | " << r[8] << " | " << r[9] << " |\n";
      auto_md << "\n";
    }
  }
  for (const auto& e : expected)
    if (!present.count(e) && std::none_of(out.absent.begin(), out.absent.end(), [&](const std::string& a) {
          return a.rfind(e + "/", 0) == 0;
        }))
      out.absent.push_back(e);

  if (!curves.empty()) {
    std::set<int> ns;
    for (const auto& [_, byn] : curves)
      for (const auto& [n, __] : byn) ns.insert(n);
    assist_md << "## Assist Dice vs prompt count (mean ± std over instances)\n\n| n_points |";
    for (const auto& [label, _] : curves) assist_md << ' ' << label << " |";
    assist_md << "\n|---|";
    for (std::size_t i = 0; i < curves.size(); ++i) assist_md << "---|";
    assist_md << "\n";
    for (int n : ns) {
      assist_md << "| " << n << " |";
      for (const auto& [_, byn] : curves) {
        auto it = byn.find(n);
        if (it == byn.end()) assist_md << " - |";
        else {
          const auto [m, s] = mean_std(it->second);
          assist_md << ' ' << pm(m, s) << " |";
        }
      }
      assist_md << "\n";
    }
    md << assist_md.str() << "\n";
  }
  if (!timings.empty()) {
    md << "## Assist training time (seconds, mean ± std over cases)\n\n| configuration | seconds | cases |\n|---|---|---|\n";
    for (const auto& [label, v] : timings) {
      const auto [m, s] = mean_std(v);
      md << "| " << label << " | " << pm(m, s) << " | " << v.size() << " |\n";
    }
    md << "\n";
  }
  if (!auto_md.str().empty()) md << "## Auto-annotation ablations\n\n" << auto_md.str();
  std::sort(out.absent.begin(), out.absent.end());
  if (!out.absent.empty()) {
    md << "## Absent runs\n\n";
    for (const auto& a : out.absent) md << "- " << a << "\n";
    md << "\n";
  }
  out.markdown = md.str();
  return out;
}

}  // namespace promptmed
