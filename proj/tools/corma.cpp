// corma: command-line driver for the generate -> label -> window -> train ->
// evaluate -> rollout pipeline.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "corma/corma.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace corma;

namespace {

constexpr const char* kVersion = "0.1.0";

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

json read_json_file(const std::string& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
}

/// Tracks inputs and outputs of one command and writes its manifest.
/// Outputs registered here are deleted if the command fails.
class Run {
 public:
  Run(std::string command, std::vector<std::string> argv)
      : command_(std::move(command)), argv_(std::move(argv)), t0_(std::chrono::steady_clock::now()) {}

  void input(const std::string& path) {
    if (!fs::exists(path)) throw InvalidArgument("input not found: " + path);
    inputs_.push_back(path);
  }
  void config(const std::string& path) {
    if (path.empty()) return;
    input(path);
    config_ = path;
  }
  void seed(std::uint64_t s) { seed_ = s; }
  void note(const std::string& key, json v) { extra_[key] = std::move(v); }

  /// Registers an output path; parent directories are created.
  const std::string& output(const std::string& path) {
    const auto parent = fs::path(path).parent_path();
    if (!parent.empty()) fs::create_directories(parent);
    outputs_.push_back(path);
    return outputs_.back();
  }
  void write(const std::string& path, std::string_view bytes) { write_file(output(path), bytes); }

  void finish(const std::string& manifest_path) {
    json ins = json::array(), outs = json::array();
    for (const auto& p : inputs_)
      ins.push_back({{"path", p}, {"sha256", fs::is_directory(p) ? dir_digest(p) : file_digest(p)}});
    for (const auto& p : outputs_) {
      if (!fs::exists(p)) throw std::runtime_error("declared output was not written: " + p);
      outs.push_back({{"path", p}, {"sha256", file_digest(p)}});
    }
    json m{{"command", command_},
           {"argv", argv_},
           {"config", config_.empty() ? json(nullptr) : json{{"path", config_}, {"sha256", file_digest(config_)}}},
           {"seed", seed_ ? json(*seed_) : json(nullptr)},
           {"inputs", ins},
           {"outputs", outs},
           {"tool_version", kVersion},
           {"wall_clock_s", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count()}};
    if (!extra_.empty()) m["details"] = extra_;
    write(manifest_path, m.dump(2) + "\n");
  }

  void cleanup() noexcept {
    for (const auto& p : outputs_) {
      std::error_code ec;
      fs::remove(p, ec);
    }
  }

  static std::string dir_digest(const std::string& dir) {
    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_regular_file() && e.path().filename().string().rfind("manifest", 0) != 0) files.push_back(e.path().string());
    std::sort(files.begin(), files.end());
    std::string cat;
    for (const auto& f : files) cat += fs::path(f).filename().string() + ":" + file_digest(f) + "\n";
    return sha256_hex(cat);
  }

 private:
  std::string command_;
  std::vector<std::string> argv_;
  std::chrono::steady_clock::time_point t0_;
  std::vector<std::string> inputs_, outputs_;
  std::string config_;
  std::optional<std::uint64_t> seed_;
  json extra_ = json::object();
};

std::vector<sim::Episode> load_episodes(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw InvalidArgument("cannot open " + path);
  return sim::read_episodes_jsonl(is);
}

regime::RegimeThresholds load_thresholds(const std::string& path) {
  return path.empty() ? regime::RegimeThresholds{} : regime::RegimeThresholds::from_json(read_json_file(path));
}

sim::SimConfig load_sim_config(const std::string& path) {
  sim::SimConfig c = path.empty() ? sim::SimConfig{} : sim::SimConfig::from_json(read_json_file(path));
  c.validate();
  return c;
}

struct DataDir {
  data::WindowSet train, val;
};

DataDir load_data(Run& run, const std::string& dir) {
  const std::string tr = (fs::path(dir) / "train.bin").string(), va = (fs::path(dir) / "val.bin").string();
  run.input(tr);
  run.input(va);
  DataDir d{data::load_windowset(tr), data::load_windowset(va)};
  if (d.train.stats.digest() != d.val.stats.digest())
    throw FormatError(dir + ": train and val normalization stats differ");
  return d;
}

adapt::Checkpoint load_ckpt(Run& run, const std::string& path, const data::NormStats* stats) {
  run.input(path);
  return adapt::load_checkpoint(path, stats != nullptr ? stats->digest() : std::string{});
}

std::string with_suffix(const std::string& base, const std::string& suffix) { return base + suffix; }

// ------------------------------------------------------------ subcommands

struct GenOpts {
  std::string tasks = "peg", config, out;
  int episodes = 100;
  std::uint64_t seed = 0;
  bool no_rotation = false;
};

void cmd_gen(Run& run, const GenOpts& o) {
  run.config(o.config);
  run.seed(o.seed);
  require(o.episodes >= 1, "--episodes must be >= 1");
  const auto cfg = load_sim_config(o.config);
  std::vector<sim::TaskKind> tasks;
  for (const auto& t : split_list(o.tasks)) tasks.push_back(sim::parse_task(t));
  require(!tasks.empty(), "--task is empty");
  std::vector<sim::Episode> eps;
  std::vector<std::uint64_t> seeds;
  for (int i = 0; i < o.episodes; ++i) seeds.push_back(o.seed + static_cast<std::uint64_t>(i));
  std::array<long, 3> ok{};
  for (auto task : tasks)
    for (auto s : seeds) {
      eps.push_back(sim::teacher_rollout(cfg, task, s, sim::TeacherOptions{o.no_rotation}));
      ok[static_cast<std::size_t>(task)] += eps.back().success;
    }
  std::ostringstream os;
  sim::write_episodes_jsonl(os, eps);
  const auto dir = fs::path(o.out);
  run.write((dir / "episodes.jsonl").string(), os.str());
  json meta{{"format", "corma-episodes-jsonl"}, {"version", 1}, {"config", cfg.to_json()},
            {"config_digest", cfg.digest()}, {"seeds", seeds}, {"tasks", json::array()}};
  for (auto t : tasks) meta["tasks"].push_back(sim::task_name(t));
  run.write((dir / "episodes.meta.json").string(), meta.dump(2) + "\n");
  json succ = json::object();
  for (auto t : tasks) succ[sim::task_name(t)] = ok[static_cast<std::size_t>(t)];
  run.note("teacher_successes", succ);
  std::cout << "generated " << eps.size() << " episodes (" << o.episodes << " per task) -> " << (dir / "episodes.jsonl").string()
            << "\n";
  run.finish((dir / "manifest.json").string());
}

struct LabelOpts {
  std::string in, thresholds, out, aligned;
  int pre = 10, post = 30;
};

void cmd_label(Run& run, const LabelOpts& o) {
  run.input(o.in);
  run.config(o.thresholds);
  const auto th = load_thresholds(o.thresholds);
  const auto eps = load_episodes(o.in);
  std::vector<std::vector<regime::RegimeLabel>> labels;
  std::array<std::size_t, regime::kNumRegimes> total{};
  for (const auto& ep : eps) {
    labels.push_back(regime::label_episode(ep, th));
    const auto c = regime::count_labels(labels.back());
    for (std::size_t k = 0; k < total.size(); ++k) total[k] += c[k];
  }
  std::ostringstream os;
  regime::write_labels_csv(os, eps, labels);
  run.write(o.out, os.str());
  json counts = json::object();
  for (int k = 0; k < regime::kNumRegimes; ++k) {
    const auto name = regime::regime_name(static_cast<regime::RegimeLabel>(k));
    counts[name] = total[static_cast<std::size_t>(k)];
    std::cout << name << ' ' << total[static_cast<std::size_t>(k)] << '\n';
  }
  run.note("label_counts", counts);
  if (!o.aligned.empty()) {
    const auto tab = regime::onset_align(eps, th, o.pre, o.post);
    std::ostringstream as;
    regime::write_aligned_csv(as, tab);
    run.write(o.aligned, as.str());
    run.note("aligned_skipped", tab.skipped);
  }
  run.finish(with_suffix(o.out, ".manifest.json"));
}

struct WindowOpts {
  std::vector<std::string> in;
  std::string thresholds, out;
  int H = 32, stride = 4, min_context = 1;
  double val_frac = 0.2;
  std::uint64_t seed = 0;
};

void cmd_window(Run& run, const WindowOpts& o) {
  run.config(o.thresholds);
  run.seed(o.seed);
  std::vector<sim::Episode> eps;
  for (const auto& p : o.in) {
    run.input(p);
    auto part = load_episodes(p);
    eps.insert(eps.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
  }
  data::WindowSpec spec{o.H, o.stride, o.min_context};
  spec.validate();
  auto [tr, va] = data::make_splits(eps, o.val_frac, o.seed, spec, load_thresholds(o.thresholds));
  const auto dir = fs::path(o.out);
  data::save_windowset(run.output((dir / "train.bin").string()), tr);
  data::save_windowset(run.output((dir / "val.bin").string()), va);
  json st = tr.stats.to_json();
  st["digest"] = tr.stats.digest();
  run.write((dir / "norm_stats.json").string(), st.dump(2) + "\n");
  auto counts = [](const data::WindowSet& ws) {
    json j = json::object();
    const auto c = ws.regime_counts();
    for (int k = 0; k < regime::kNumRegimes; ++k) j[regime::regime_name(static_cast<regime::RegimeLabel>(k))] = c[static_cast<std::size_t>(k)];
    return j;
  };
  run.note("windows", {{"train", tr.size()}, {"val", va.size()}, {"train_regimes", counts(tr)}, {"val_regimes", counts(va)}});
  std::cout << "train " << tr.size() << " windows, val " << va.size() << " windows -> " << dir.string() << "\n";
  run.finish((dir / "manifest.json").string());
}

struct TrainOpts {
  std::string data, variant = "transformer", out, config, log;
  double lambda_nce = 0.01, tau = 0.1, lambda_smooth = 0.0, lr = 3e-4, dropout = 0.0;
  int epochs = 30, batch = 256, d_model = 32, layers = 2, heads = 4;
  std::uint64_t seed = 0;
};

void cmd_train(Run& run, const TrainOpts& o, const CLI::App& sub) {
  run.config(o.config);
  // file config first, explicit flags override
  adapt::AdapterConfig ac;
  train::TrainConfig tc;
  if (!o.config.empty()) {
    const auto j = read_json_file(o.config);
    if (j.contains("adapter")) {
      json a = ac.to_json();
      a.update(j.at("adapter"));
      ac = adapt::AdapterConfig::from_json(a);
    }
    if (j.contains("train")) {
      json t = tc.to_json();
      t.update(j.at("train"));
      tc = train::TrainConfig::from_json(t);
    }
  }
  auto given = [&](const char* flag) { return sub.count(flag) > 0; };
  if (given("--adapter") || o.config.empty()) ac.variant = adapt::parse_variant(o.variant);
  if (given("--d-model")) ac.d_model = o.d_model;
  if (given("--layers")) ac.n_layers = o.layers;
  if (given("--heads")) ac.n_heads = o.heads;
  if (given("--dropout")) ac.dropout_p = o.dropout;
  if (given("--lambda-nce")) tc.lambda_nce = o.lambda_nce;
  if (given("--tau")) tc.tau = o.tau;
  if (given("--lambda-smooth")) tc.lambda_smooth = o.lambda_smooth;
  if (given("--lr")) tc.lr = o.lr;
  if (given("--epochs")) tc.epochs = o.epochs;
  if (given("--batch")) tc.batch_size = o.batch;
  if (given("--seed")) tc.seed = o.seed;
  run.seed(tc.seed);
  auto d = load_data(run, o.data);
  ac.history_len = d.train.H();
  ac.validate();
  tc.validate();
  const auto res = train::train(d.train, d.val, ac, tc, [](const train::EpochLog& e) {
    std::cout << "epoch " << e.epoch << " loss " << e.train_loss << " val_r2 " << e.val_r2_mean << " (" << e.seconds
              << " s)\n"
              << std::flush;
  });
  run.write(o.out, train::checkpoint_bytes(res, d.train.stats));
  std::ostringstream log;
  train::write_train_log_csv(log, res.log);
  run.write(o.log.empty() ? with_suffix(o.out, ".log.csv") : o.log, log.str());
  run.note("adapter_config", res.adapter_config.to_json());
  run.note("train_config", tc.to_json());
  run.note("best_epoch", res.best_epoch);
  run.note("best_val", res.best_val.to_json());
  run.note("skipped_anchors", res.counters.skipped_anchors);
  run.note("nce_skipped_batches", res.counters.nce_skipped_batches);
  run.note("smooth_empty_batches", res.counters.smooth_empty_batches);
  std::cout << "best epoch " << res.best_epoch << " val_r2_mean " << res.best_val.r2_mean << " -> " << o.out << "\n";
  run.finish(with_suffix(o.out, ".manifest.json"));
}

struct EvalOpts {
  std::string ckpt, data, split = "val", out;
  std::uint64_t seed = 7;
};

const data::WindowSet& pick_split(const DataDir& d, const std::string& split) {
  if (split == "val") return d.val;
  if (split == "train") return d.train;
  throw InvalidArgument("--split must be train or val");
}

void cmd_eval(Run& run, const EvalOpts& o) {
  const auto d = load_data(run, o.data);
  const auto c = load_ckpt(run, o.ckpt, &d.train.stats);
  const auto& ws = pick_split(d, o.split);
  const auto a = adapt::adapter_from(c);
  const auto m = train::evaluate(a, ws, c.stats);
  std::ostringstream os;
  eval::write_metrics_csv(os, m);
  const std::string out = o.out.empty() ? with_suffix(o.ckpt, ".metrics.csv") : o.out;
  run.write(out, os.str());
  run.note("metrics", m.to_json());
  std::cout << os.str();
  run.finish(with_suffix(out, ".manifest.json"));
}

void cmd_probe(Run& run, const EvalOpts& o) {
  run.seed(o.seed);
  const auto d = load_data(run, o.data);
  const auto c = load_ckpt(run, o.ckpt, &d.train.stats);
  const auto& ws = pick_split(d, o.split);
  const auto a = adapt::adapter_from(c);
  const auto rep = eval::probe_report(ws, eval::predict(a, ws, c.stats), c.stats, o.seed);
  std::ostringstream os;
  eval::write_probe_csv(os, rep);
  const std::string out = o.out.empty() ? with_suffix(o.ckpt, ".probe.csv") : o.out;
  run.write(out, os.str());
  std::cout << os.str();
  run.finish(with_suffix(out, ".manifest.json"));
}

struct EmbedOpts {
  std::string ckpt, data, split = "val", out;
  std::uint64_t seed = 7;
  int per_class = 400;
};

void cmd_embed(Run& run, const EmbedOpts& o) {
  run.seed(o.seed);
  const auto d = load_data(run, o.data);
  const auto c = load_ckpt(run, o.ckpt, &d.train.stats);
  const auto& ws = pick_split(d, o.split);
  const auto a = adapt::adapter_from(c);
  const auto e = eval::embed(ws, eval::predict(a, ws, c.stats), o.seed, static_cast<std::size_t>(o.per_class));
  const auto dir = fs::path(o.out);
  std::ostringstream os;
  eval::write_embedding_csv(os, e);
  run.write((dir / "pca.csv").string(), os.str());
  run.write((dir / "pca.svg").string(), eval::embedding_svg(e));
  const json sil{{"silhouette_zhat", e.silhouette_zhat},
                 {"silhouette_u", e.silhouette_u},
                 {"explained_zhat", e.zhat.explained},
                 {"explained_u", e.u.explained},
                 {"points", e.rows.size()}};
  run.write((dir / "separation.json").string(), sil.dump(2) + "\n");
  std::cout << "silhouette zhat " << e.silhouette_zhat << ", u " << e.silhouette_u << " -> " << dir.string() << "\n";
  run.finish((dir / "manifest.json").string());
}

struct RolloutOpts {
  std::string ckpt, modes = "oracle,student,zeroz", tasks = "peg", config, out = "rollout.csv", traces;
  int episodes = 200;
  std::uint64_t seed_base = 100000;
};

void cmd_rollout(Run& run, const RolloutOpts& o) {
  run.config(o.config);
  run.seed(o.seed_base);
  eval::ClosedLoopConfig cl;
  cl.sim = load_sim_config(o.config);
  cl.n_episodes = o.episodes;
  cl.seed_base = o.seed_base;
  cl.modes.clear();
  for (const auto& m : split_list(o.modes)) cl.modes.push_back(eval::parse_mode(m));
  require(!cl.modes.empty(), "--modes is empty");
  cl.tasks.clear();
  if (o.tasks == "all")
    cl.tasks = {sim::TaskKind::PegLike, sim::TaskKind::GearLike, sim::TaskKind::ThreadLike};
  else
    for (const auto& t : split_list(o.tasks)) cl.tasks.push_back(sim::parse_task(t));
  std::optional<adapt::Checkpoint> c;
  std::optional<adapt::Adapter> a;
  if (std::find(cl.modes.begin(), cl.modes.end(), eval::Mode::Student) != cl.modes.end()) {
    if (o.ckpt.empty()) throw InvalidArgument("student mode needs --ckpt");
    c = load_ckpt(run, o.ckpt, nullptr);
    a.emplace(adapt::adapter_from(*c));
  }
  const auto rep = eval::closed_loop_eval(cl, a ? &*a : nullptr, c ? &c->stats : nullptr, !o.traces.empty());
  std::ostringstream os;
  eval::write_closed_loop_csv(os, rep);
  run.write(o.out, os.str());
  if (!o.traces.empty()) {
    std::ostringstream ts;
    sim::write_episodes_jsonl(ts, rep.episodes);
    run.write(o.traces, ts.str());
  }
  std::cout << os.str();
  run.finish(with_suffix(o.out, ".manifest.json"));
}

struct AblateOpts {
  std::string grid, preset, out = "ablation.csv";
  std::vector<std::string> data;
  int epochs = 0;
};

void cmd_ablate(Run& run, const AblateOpts& o) {
  train::AblationSpec spec;
  if (!o.grid.empty()) {
    run.config(o.grid);
    spec = train::AblationSpec::from_json(read_json_file(o.grid));
  } else if (o.preset == "grid") {
    spec = train::default_grid();
  } else if (o.preset == "structure") {
    spec.cells = train::structure_triple();
  } else {
    throw InvalidArgument("give --grid path or --preset grid|structure");
  }
  if (o.epochs > 0) spec.base_train.epochs = o.epochs;
  spec.validate();
  std::vector<DataDir> dirs;
  std::vector<std::string> names;
  dirs.reserve(o.data.size());
  for (const auto& item : o.data) {
    const auto eq = item.find('=');
    names.push_back(eq == std::string::npos ? fs::path(item).filename().string() : item.substr(0, eq));
    dirs.push_back(load_data(run, eq == std::string::npos ? item : item.substr(eq + 1)));
  }
  require(!dirs.empty(), "--data is required");
  std::vector<train::NamedData> ds;
  for (std::size_t i = 0; i < dirs.size(); ++i) ds.push_back({names[i], &dirs[i].train, &dirs[i].val});
  train::AblationOptions opt;
  opt.on_epoch = [](const std::string& id, std::uint64_t seed, const train::EpochLog& e) {
    std::cout << id << " seed " << seed << " epoch " << e.epoch << " val_r2 " << e.val_r2_mean << "\n" << std::flush;
  };
  auto rows = train::run_ablation(spec, ds, opt);
  const auto means = train::mean_rows(rows);
  rows.insert(rows.end(), means.begin(), means.end());
  std::ostringstream os;
  train::write_ablation_csv(os, rows);
  run.write(o.out, os.str());
  run.note("spec", spec.to_json());
  std::cout << os.str();
  run.finish(with_suffix(o.out, ".manifest.json"));
}

struct CiOpts {
  long successes = 0, trials = 0;
  std::string json_out;
};

void cmd_ci(Run& run, const CiOpts& o) {
  const auto ci = eval::wilson_ci(o.successes, o.trials);
  std::cout << ci.str() << "\n";
  const std::string j = ci.to_json().dump();
  if (o.json_out.empty()) {
    std::cout << j << "\n";
  } else {
    run.write(o.json_out, j + "\n");
    run.finish(with_suffix(o.json_out, ".manifest.json"));
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Contact-context adaptation pipeline"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);
  std::vector<std::string> args(argv + 1, argv + argc);

  GenOpts gen;
  auto* g = app.add_subcommand("gen", "Generate teacher episodes");
  g->add_option("--task", gen.tasks, "peg|gear|thread, comma-separated")->capture_default_str();
  g->add_option("--episodes", gen.episodes, "Episodes per task")->capture_default_str();
  g->add_option("--config", gen.config, "Simulator config JSON");
  g->add_option("--seed", gen.seed, "First episode seed")->capture_default_str();
  g->add_flag("--no-rotation", gen.no_rotation, "Disable teacher rotation");
  g->add_option("--out", gen.out, "Output directory")->required();

  LabelOpts lab;
  auto* l = app.add_subcommand("label", "Label force regimes");
  l->add_option("--in", lab.in, "Episodes JSONL")->required();
  l->add_option("--thresholds", lab.thresholds, "Regime thresholds JSON");
  l->add_option("--out", lab.out, "Labels CSV")->required();
  l->add_option("--aligned", lab.aligned, "Onset-aligned feature CSV");
  l->add_option("--pre", lab.pre, "Steps before onset")->capture_default_str();
  l->add_option("--post", lab.post, "Steps after onset")->capture_default_str();

  WindowOpts win;
  auto* w = app.add_subcommand("window", "Build history windows and splits");
  w->add_option("--in", win.in, "Episodes JSONL (repeatable)")->required();
  w->add_option("--H", win.H, "History length")->capture_default_str();
  w->add_option("--stride", win.stride, "Window stride")->capture_default_str();
  w->add_option("--min-context", win.min_context, "Real steps required per window")->capture_default_str();
  w->add_option("--val-frac", win.val_frac, "Validation fraction")->capture_default_str();
  w->add_option("--seed", win.seed, "Split seed")->capture_default_str();
  w->add_option("--thresholds", win.thresholds, "Regime thresholds JSON");
  w->add_option("--out", win.out, "Output directory")->required();

  TrainOpts tr;
  auto* t = app.add_subcommand("train", "Train an adapter");
  t->add_option("--data", tr.data, "Window directory")->required();
  t->add_option("--adapter", tr.variant, "transformer|conv")->capture_default_str();
  t->add_option("--lambda-nce", tr.lambda_nce)->capture_default_str();
  t->add_option("--tau", tr.tau)->capture_default_str();
  t->add_option("--lambda-smooth", tr.lambda_smooth)->capture_default_str();
  t->add_option("--lr", tr.lr)->capture_default_str();
  t->add_option("--epochs", tr.epochs)->capture_default_str();
  t->add_option("--batch", tr.batch)->capture_default_str();
  t->add_option("--seed", tr.seed)->capture_default_str();
  t->add_option("--d-model", tr.d_model)->capture_default_str();
  t->add_option("--layers", tr.layers)->capture_default_str();
  t->add_option("--heads", tr.heads)->capture_default_str();
  t->add_option("--dropout", tr.dropout)->capture_default_str();
  t->add_option("--config", tr.config, "JSON with \"adapter\" and \"train\" objects; flags override");
  t->add_option("--log", tr.log, "Training log CSV (default <out>.log.csv)");
  t->add_option("--out", tr.out, "Checkpoint path")->required();

  EvalOpts ev;
  auto* e = app.add_subcommand("eval", "Validation metrics of a checkpoint");
  e->add_option("--ckpt", ev.ckpt)->required();
  e->add_option("--data", ev.data)->required();
  e->add_option("--split", ev.split)->capture_default_str();
  e->add_option("--out", ev.out, "Metrics CSV (default <ckpt>.metrics.csv)");

  EvalOpts pb;
  auto* p = app.add_subcommand("probe", "Linear regime probes on z, z-hat and u");
  p->add_option("--ckpt", pb.ckpt)->required();
  p->add_option("--data", pb.data)->required();
  p->add_option("--split", pb.split)->capture_default_str();
  p->add_option("--seed", pb.seed)->capture_default_str();
  p->add_option("--out", pb.out, "Probe CSV (default <ckpt>.probe.csv)");

  EmbedOpts em;
  auto* m = app.add_subcommand("embed", "PCA exports of z-hat and u");
  m->add_option("--ckpt", em.ckpt)->required();
  m->add_option("--data", em.data)->required();
  m->add_option("--split", em.split)->capture_default_str();
  m->add_option("--seed", em.seed)->capture_default_str();
  m->add_option("--per-class", em.per_class)->capture_default_str();
  m->add_option("--out", em.out, "Output directory")->required();

  RolloutOpts ro;
  auto* r = app.add_subcommand("rollout", "Closed-loop evaluation with oracle, predicted or zero context");
  r->add_option("--ckpt", ro.ckpt, "Checkpoint (needed for student mode)");
  r->add_option("--modes", ro.modes)->capture_default_str();
  r->add_option("--episodes", ro.episodes, "Episodes per task and mode")->capture_default_str();
  r->add_option("--tasks", ro.tasks, "all or a comma list")->capture_default_str();
  r->add_option("--config", ro.config, "Simulator config JSON");
  r->add_option("--seed-base", ro.seed_base)->capture_default_str();
  r->add_option("--traces", ro.traces, "Write per-step traces JSONL");
  r->add_option("--out", ro.out)->capture_default_str();

  AblateOpts ab;
  auto* a = app.add_subcommand("ablate", "Run an ablation grid");
  a->add_option("--grid", ab.grid, "Grid JSON");
  a->add_option("--preset", ab.preset, "grid|structure when no grid file is given");
  a->add_option("--data", ab.data, "Window directory, optionally name=dir (repeatable)")->required();
  a->add_option("--epochs", ab.epochs, "Override epochs for every cell");
  a->add_option("--out", ab.out)->capture_default_str();

  CiOpts ci;
  auto* c = app.add_subcommand("ci", "Wilson 95% interval");
  c->add_option("--successes", ci.successes)->required();
  c->add_option("--trials", ci.trials)->required();
  c->add_option("--json", ci.json_out, "Write the interval as JSON to this path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::CallForAllHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::CallForVersion& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    std::string msg = ex.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    std::cerr << "corma: " << msg << "\n";
    return ex.get_exit_code() != 0 ? ex.get_exit_code() : 2;
  }

  const std::string name = app.get_subcommands().front()->get_name();
  Run run(name, args);
  try {
    if (*g) cmd_gen(run, gen);
    else if (*l) cmd_label(run, lab);
    else if (*w) cmd_window(run, win);
    else if (*t) cmd_train(run, tr, *t);
    else if (*e) cmd_eval(run, ev);
    else if (*p) cmd_probe(run, pb);
    else if (*m) cmd_embed(run, em);
    else if (*r) cmd_rollout(run, ro);
    else if (*a) cmd_ablate(run, ab);
    else if (*c) cmd_ci(run, ci);
  } catch (const std::exception& ex) {
    run.cleanup();
    std::string msg = ex.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    std::cerr << "corma " << name << ": " << msg << "\n";
    return 1;
  }
  return 0;
}
