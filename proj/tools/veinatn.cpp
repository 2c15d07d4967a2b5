// SPDX-License-Identifier: Apache-2.0

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "veinatn/checkpoint.hpp"
#include "veinatn/dataset.hpp"
#include "veinatn/error.hpp"
#include "veinatn/eval.hpp"
#include "veinatn/explain.hpp"
#include "veinatn/image.hpp"
#include "veinatn/imageproc.hpp"
#include "veinatn/model.hpp"
#include "veinatn/trainer.hpp"

#ifndef VEINATN_VERSION
#define VEINATN_VERSION "0.0.0"
#endif

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace veinatn;

namespace {

constexpr const char* kDataRootEnv = "VEINATN_DATA_ROOT";

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// FNV-1a over (relative path, file hash) of every regular file, sorted.
std::uint64_t hash_tree(const fs::path& root) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& f : files) {
    const std::string rel = fs::relative(f, root).generic_string();
    h = fnv1a64(reinterpret_cast<const std::uint8_t*>(rel.data()), rel.size(), h);
    const std::uint64_t fh = hash_file(f);
    h = fnv1a64(reinterpret_cast<const std::uint8_t*>(&fh), sizeof fh, h);
  }
  return h;
}

// Provenance record written next to a command's outputs.
class Manifest {
 public:
  Manifest(std::string command, fs::path output) : output_(std::move(output)) {
    j_["tool"] = "veinatn";
    j_["version"] = VEINATN_VERSION;
    j_["command"] = std::move(command);
    j_["config"] = json::object();
    j_["inputs"] = json::array();
    j_["outputs"] = json::array();
  }

  json& config() { return j_["config"]; }

  void input(const fs::path& p) {
    json e;
    e["path"] = p.string();
    if (fs::is_directory(p)) {
      e["tree_fnv1a64"] = hex64(hash_tree(p));
    } else if (fs::is_regular_file(p)) {
      e["fnv1a64"] = hex64(hash_file(p));
    }
    j_["inputs"].push_back(std::move(e));
  }

  void output(const fs::path& p) { j_["outputs"].push_back(p.string()); }

  fs::path path() const { return fs::path(output_.string() + ".manifest.json"); }

  void write(bool ok, const std::string& error, double seconds) {
    j_["status"] = ok ? "ok" : "failed";
    if (!ok) j_["error"] = error;
    j_["wall_clock_seconds"] = seconds;
    const fs::path p = path();
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << j_.dump(2) << '\n';
  }

 private:
  fs::path output_;
  json j_;
};

// Runs a command body, writing the manifest on success and failure.
int run_command(Manifest& manifest, const std::function<void()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  std::string error;
  bool ok = true;
  try {
    body();
  } catch (const std::exception& e) {
    ok = false;
    error = e.what();
  }
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  try {
    manifest.write(ok, error, seconds);
  } catch (const std::exception& e) {
    std::cerr << "veinatn: cannot write manifest " << manifest.path() << ": " << e.what() << '\n';
    ok = false;
  }
  if (!ok) {
    if (!error.empty()) std::cerr << "veinatn: error: " << error << '\n';
    return 1;
  }
  return 0;
}

fs::path resolve_data(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv(kDataRootEnv); env && *env) return env;
  throw ConfigError(std::string("no data root: pass --data or set ") + kDataRootEnv);
}

// model.vann + "normal" -> model.normal.vann
fs::path stream_path(const fs::path& base, std::string_view stream) {
  fs::path p = base;
  const std::string ext = base.extension().string();
  p.replace_extension();
  return fs::path(p.string() + "." + std::string(stream) + ext);
}

fs::path curves_path(const fs::path& ckpt) {
  fs::path p = ckpt;
  p.replace_extension();
  return fs::path(p.string() + ".curves.csv");
}

ClaheParams parse_clahe(const std::string& tiles, double clip) {
  const auto t = parse_int_list(tiles, "clahe tiles");
  if (t.size() != 2) throw ConfigError("clahe tiles need two values, e.g. 8x8");
  return {static_cast<int>(t[0]), static_cast<int>(t[1]), clip};
}

std::vector<Stream> parse_streams(const std::string& s) {
  if (s == "both") return {Stream::kNormal, Stream::kEnhanced};
  return {parse_stream(s)};
}

void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

TrainConfig load_config(const std::string& path, Manifest& m) {
  if (path.empty()) return default_train_config();
  m.input(path);
  return parse_train_config(KeyValueText::load(path));
}

void log_epoch(std::string_view tag, int epochs, const EpochStats& s) {
  std::cerr << tag << " epoch " << s.epoch << "/" << epochs << " train_loss " << format_sig(s.train_loss, 6)
            << " val_accuracy " << format_sig(s.val_accuracy, 4) << '\n';
}

void record_config(Manifest& m, const TrainConfig& c) {
  const KeyValueText text = train_config_to_text(c);
  for (const auto& [k, v] : text.entries()) m.config()[k] = v;
}

std::vector<int> parse_depths(const std::string& s) {
  std::vector<int> out;
  const auto dots = s.find("..");
  if (dots != std::string::npos) {
    const long lo = parse_int(s.substr(0, dots), "depths"), hi = parse_int(s.substr(dots + 2), "depths");
    for (long d = lo; d <= hi; ++d) out.push_back(static_cast<int>(d));
  } else {
    for (long d : parse_int_list(s, "depths")) out.push_back(static_cast<int>(d));
  }
  if (out.empty()) throw ConfigError("empty depth range '" + s + "'");
  for (int d : out) {
    if (d < 1 || d > kMaxConvBlocks) {
      throw ConfigError("depth " + std::to_string(d) + " outside 1.." + std::to_string(kMaxConvBlocks));
    }
  }
  return out;
}

// Trains one stream and writes checkpoint plus curves.
Checkpoint train_stream(const TrainConfig& cfg, const ProtocolSpec& proto, Stream stream, int threads,
                        const fs::path& out, Manifest& m, const std::string& tag) {
  TrainOptions o = cfg.options;
  o.stream = stream;
  o.threads = threads;
  ModelConfig mc = cfg.model;
  mc.num_classes = proto.num_identities();
  std::cerr << tag << " " << count_params(mc) << " parameters, " << proto.train.size() << " train images\n";
  const TrainResult r = train(mc, proto, o, [&](const EpochStats& s) { log_epoch(tag, o.epochs, s); });
  ensure_parent(out);
  save_checkpoint(r.checkpoint, out);
  write_curves_csv(r.curves, curves_path(out));
  m.output(out);
  m.output(curves_path(out));
  return r.checkpoint;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"VeinAtnNet finger-vein verification toolkit"};
  app.set_version_flag("--version", VEINATN_VERSION);
  app.require_subcommand(1);
  int threads = 1;
  auto add_threads = [&](CLI::App* sub) {
    sub->add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);
  };
  const std::string data_help = std::string("Dataset root (default: $") + kDataRootEnv + ")";
  int rc = 0;

  // make-toy
  auto* toy = app.add_subcommand("make-toy", "Write the synthetic vein-line dataset");
  std::string toy_out;
  int toy_ids = 8, toy_samples = 10, toy_size = 64, toy_sessions = 1;
  std::uint64_t toy_seed = 0;
  toy->add_option("--out", toy_out, "Output dataset root")->required();
  toy->add_option("--identities", toy_ids)->capture_default_str();
  toy->add_option("--samples", toy_samples, "Samples per identity")->capture_default_str();
  toy->add_option("--size", toy_size, "Image side in pixels")->capture_default_str();
  toy->add_option("--sessions", toy_sessions)->capture_default_str();
  toy->add_option("--seed", toy_seed)->capture_default_str();
  toy->callback([&] {
    Manifest m("make-toy", toy_out);
    m.config() = {{"identities", toy_ids}, {"samples", toy_samples}, {"size", toy_size},
                  {"sessions", toy_sessions}, {"seed", toy_seed}};
    rc = run_command(m, [&] {
      make_toy_dataset(toy_out, toy_ids, toy_samples, toy_size, toy_seed, toy_sessions);
      m.output(toy_out);
    });
  });

  // preprocess
  auto* pre = app.add_subcommand("preprocess", "Write a CLAHE-enhanced copy of a dataset tree");
  std::string pre_in, pre_out, pre_tiles = "8x8";
  double pre_clip = 2.0;
  pre->add_option("--in", pre_in, "Input dataset root")->required();
  pre->add_option("--out", pre_out, "Output root")->required();
  pre->add_option("--clahe-tiles", pre_tiles, "Tile grid, e.g. 8x8")->capture_default_str();
  pre->add_option("--clahe-clip", pre_clip, "Clip limit (inf disables clipping)")->capture_default_str();
  add_threads(pre);
  pre->callback([&] {
    Manifest m("preprocess", pre_out);
    rc = run_command(m, [&] {
      const ClaheParams p = parse_clahe(pre_tiles, pre_clip);
      m.config() = {{"clahe_tiles", pre_tiles}, {"clahe_clip", format_double(p.clip_limit)}, {"threads", threads}};
      m.input(pre_in);
      const DatasetTree tree = scan_dataset(pre_in);
      std::vector<fs::path> files;
      for (const auto& id : tree.samples)
        for (const auto& s : id) files.insert(files.end(), s.begin(), s.end());
      parallel_for(files.size(), threads, [&](std::size_t i) {
        const fs::path dst = fs::path(pre_out) / fs::relative(files[i], pre_in);
        fs::create_directories(dst.parent_path());
        save_image(clahe(load_image(files[i]), p), dst);
      });
      std::cerr << "preprocess: " << files.size() << " images written to " << pre_out << '\n';
      m.output(pre_out);
    });
  });

  // train
  auto* tr = app.add_subcommand("train", "Train VeinAtnNet on a protocol's train split");
  std::string tr_config, tr_data, tr_protocol = "fv300", tr_out, tr_stream;
  std::optional<int> tr_epochs;
  std::optional<std::uint64_t> tr_seed;
  tr->add_option("--config", tr_config, "Training config file (defaults when absent)");
  tr->add_option("--data", tr_data, data_help);
  tr->add_option("--protocol", tr_protocol, "fv300, split:A,B,C, session, fvusm, polyu or heldin")
      ->capture_default_str();
  tr->add_option("--out", tr_out, "Output checkpoint (.normal/.enhanced inserted for --stream both)")->required();
  tr->add_option("--stream", tr_stream, "normal, enhanced or both (default: config stream)");
  tr->add_option("--epochs", tr_epochs, "Override the configured epoch count");
  tr->add_option("--seed", tr_seed, "Override the configured seed");
  add_threads(tr);
  tr->callback([&] {
    Manifest m("train", tr_out);
    rc = run_command(m, [&] {
      TrainConfig cfg = load_config(tr_config, m);
      if (tr_epochs) cfg.options.epochs = *tr_epochs;
      if (tr_seed) cfg.options.seed = *tr_seed;
      const std::string stream = tr_stream.empty() ? std::string(stream_name(cfg.options.stream)) : tr_stream;
      const auto streams = parse_streams(stream);
      record_config(m, cfg);
      m.config()["stream"] = stream;
      m.config()["protocol"] = tr_protocol;
      m.config()["threads"] = threads;
      const fs::path data = resolve_data(tr_data);
      m.input(data);
      const ProtocolSpec proto = build_protocol(data, tr_protocol);
      for (Stream s : streams) {
        const fs::path out = streams.size() > 1 ? stream_path(tr_out, stream_name(s)) : fs::path(tr_out);
        train_stream(cfg, proto, s, threads, out, m, "train[" + std::string(stream_name(s)) + "]");
      }
    });
  });

  // finetune
  auto* ft = app.add_subcommand("finetune", "Fine-tune a checkpoint on a protocol's enrolment split");
  std::string ft_ckpt, ft_config, ft_data, ft_protocol = "session", ft_out, ft_stream;
  bool ft_freeze = false;
  std::optional<int> ft_epochs;
  std::optional<std::uint64_t> ft_seed;
  ft->add_option("--ckpt", ft_ckpt, "Source checkpoint (.normal/.enhanced inserted for --stream both)")->required();
  ft->add_option("--config", ft_config, "Training config file (model keys are taken from the checkpoint)");
  ft->add_option("--data", ft_data, data_help);
  ft->add_option("--protocol", ft_protocol)->capture_default_str();
  ft->add_option("--out", ft_out, "Output checkpoint")->required();
  ft->add_option("--stream", ft_stream, "normal, enhanced or both (default: source checkpoint stream)");
  ft->add_flag("--freeze-backbone", ft_freeze, "Update only the classifier");
  ft->add_option("--epochs", ft_epochs, "Override the configured epoch count");
  ft->add_option("--seed", ft_seed, "Override the configured seed");
  add_threads(ft);
  ft->callback([&] {
    Manifest m("finetune", ft_out);
    rc = run_command(m, [&] {
      TrainConfig cfg = load_config(ft_config, m);
      if (ft_epochs) cfg.options.epochs = *ft_epochs;
      if (ft_seed) cfg.options.seed = *ft_seed;
      if (ft_freeze) cfg.options.freeze_backbone = true;
      cfg.options.threads = threads;
      const fs::path data = resolve_data(ft_data);
      m.input(data);
      const ProtocolSpec proto = build_protocol(data, ft_protocol);
      record_config(m, cfg);
      m.config()["protocol"] = ft_protocol;
      m.config()["threads"] = threads;
      std::vector<std::pair<Stream, fs::path>> jobs;
      if (ft_stream == "both") {
        for (Stream s : {Stream::kNormal, Stream::kEnhanced}) jobs.emplace_back(s, stream_path(ft_ckpt, stream_name(s)));
      } else {
        jobs.emplace_back(Stream::kNormal, ft_ckpt);
      }
      for (auto& [stream, src_path] : jobs) {
        m.input(src_path);
        const Checkpoint src = load_checkpoint(src_path);
        TrainOptions o = cfg.options;
        if (ft_stream.empty()) {
          o.stream = src.meta.stream.empty() ? cfg.options.stream : parse_stream(src.meta.stream);
        } else {
          o.stream = ft_stream == "both" ? stream : parse_stream(ft_stream);
        }
        const std::string tag = "finetune[" + std::string(stream_name(o.stream)) + "]";
        const TrainResult r = finetune(src, proto, o, [&](const EpochStats& s) { log_epoch(tag, o.epochs, s); });
        const fs::path out = jobs.size() > 1 ? stream_path(ft_out, stream_name(o.stream)) : fs::path(ft_out);
        ensure_parent(out);
        save_checkpoint(r.checkpoint, out);
        write_curves_csv(r.curves, curves_path(out));
        m.output(out);
        m.output(curves_path(out));
      }
    });
  });

  // score
  auto* sc = app.add_subcommand("score", "Score every test probe against every identity");
  std::string sc_normal, sc_enhanced, sc_data, sc_protocol = "fv300", sc_out, sc_tiles;
  std::optional<double> sc_clip;
  bool sc_count_only = false;
  sc->add_option("--normal", sc_normal, "Normal-stream checkpoint");
  sc->add_option("--enhanced", sc_enhanced, "Enhanced-stream checkpoint");
  sc->add_option("--data", sc_data, data_help);
  sc->add_option("--protocol", sc_protocol)->capture_default_str();
  sc->add_option("--out", sc_out, "Scores CSV (or counts file with --count-only)")->required();
  sc->add_option("--clahe-tiles", sc_tiles, "Override the enhanced checkpoint's CLAHE tiles");
  sc->add_option("--clahe-clip", sc_clip, "Override the enhanced checkpoint's CLAHE clip limit");
  sc->add_flag("--count-only", sc_count_only, "Only count genuine/impostor scores; reads no pixels");
  add_threads(sc);
  sc->callback([&] {
    Manifest m("score", sc_out);
    rc = run_command(m, [&] {
      const fs::path data = resolve_data(sc_data);
      m.config() = {{"protocol", sc_protocol}, {"count_only", sc_count_only}, {"threads", threads}};
      ensure_parent(sc_out);
      if (sc_count_only) {
        const ProtocolSpec proto = build_protocol(data, sc_protocol);
        const ScoreCounts c = count_scores(proto);
        KeyValueText t;
        t.set("identities", std::to_string(proto.num_identities()));
        t.set("probes", std::to_string(proto.test.size()));
        t.set("genuine", std::to_string(c.genuine));
        t.set("impostor", std::to_string(c.impostor));
        t.save(sc_out);
        std::cout << t.serialize();
        m.output(sc_out);
        return;
      }
      if (sc_normal.empty() || sc_enhanced.empty()) {
        throw ConfigError("score needs --normal and --enhanced checkpoints (or --count-only)");
      }
      m.input(data);
      m.input(sc_normal);
      m.input(sc_enhanced);
      const Checkpoint cn = load_checkpoint(sc_normal), ce = load_checkpoint(sc_enhanced);
      ScoringOptions so;
      so.clahe = ce.meta.clahe;
      if (!sc_tiles.empty()) so.clahe = parse_clahe(sc_tiles, so.clahe.clip_limit);
      if (sc_clip) so.clahe.clip_limit = *sc_clip;
      so.threads = threads;
      m.config()["clahe_tiles"] = std::to_string(so.clahe.tiles_x) + "x" + std::to_string(so.clahe.tiles_y);
      m.config()["clahe_clip"] = format_double(so.clahe.clip_limit);
      const ProtocolSpec proto = build_protocol(data, sc_protocol);
      const auto pairs = generate_scores(proto, cn.model, ce.model, so);
      write_scores_csv(pairs, sc_out);
      const ScoreCounts c = count_scores(proto);
      std::cerr << "score: " << c.genuine << " genuine, " << c.impostor << " impostor\n";
      m.output(sc_out);
    });
  });

  // eval
  auto* ev = app.add_subcommand("eval", "EER, TAR@FMR and DET data from a scores or DET CSV");
  std::string ev_scores, ev_det_in, ev_report, ev_det_out, ev_view = "all";
  ev->add_option("--scores", ev_scores, "Scores CSV");
  ev->add_option("--det", ev_det_in, "DET CSV to read the EER from instead of scores");
  ev->add_option("--report", ev_report, "Metrics report (key = value)")->required();
  ev->add_option("--det-out", ev_det_out, "DET CSV output (.<view> inserted for --view all)");
  ev->add_option("--view", ev_view, "normal, enhanced, fused or all")->capture_default_str();
  ev->callback([&] {
    Manifest m("eval", ev_report);
    rc = run_command(m, [&] {
      m.config() = {{"view", ev_view}};
      ensure_parent(ev_report);
      if (ev_scores.empty() == ev_det_in.empty()) throw ConfigError("eval needs exactly one of --scores or --det");
      if (!ev_det_in.empty()) {
        m.input(ev_det_in);
        const EerResult e = eer_from_det(read_det_csv(ev_det_in));
        KeyValueText t;
        t.set("det.eer", format_double(e.eer));
        t.set("det.eer_threshold", format_double(e.threshold));
        t.save(ev_report);
        std::cout << t.serialize();
        m.output(ev_report);
        return;
      }
      m.input(ev_scores);
      const auto pairs = read_scores_csv(ev_scores);
      std::vector<ScoreView> views;
      if (ev_view == "all") {
        views = {ScoreView::kNormal, ScoreView::kEnhanced, ScoreView::kFused};
      } else {
        views = {parse_view(ev_view)};
      }
      std::vector<ViewMetrics> metrics;
      for (ScoreView v : views) {
        metrics.push_back(view_metrics(pairs, v));
        if (!ev_det_out.empty()) {
          const fs::path p = views.size() > 1 ? stream_path(ev_det_out, view_name(v)) : fs::path(ev_det_out);
          ensure_parent(p);
          write_det_csv(det_curve(select_view(pairs, v)), p);
          m.output(p);
        }
      }
      const KeyValueText t = metrics_report(metrics);
      t.save(ev_report);
      std::cout << t.serialize();
      m.output(ev_report);
    });
  });

  // ablate
  auto* ab = app.add_subcommand("ablate", "Train, score and evaluate over conv depths");
  std::string ab_config, ab_data, ab_protocol = "fv300", ab_out, ab_depths = "1..5";
  std::optional<int> ab_epochs;
  std::optional<std::uint64_t> ab_seed;
  ab->add_option("--config", ab_config, "Training config file");
  ab->add_option("--data", ab_data, data_help);
  ab->add_option("--protocol", ab_protocol)->capture_default_str();
  ab->add_option("--out", ab_out, "Output directory")->required();
  ab->add_option("--depths", ab_depths, "Range lo..hi or list a,b,c within 1..5")->capture_default_str();
  ab->add_option("--epochs", ab_epochs, "Override the configured epoch count");
  ab->add_option("--seed", ab_seed, "Override the configured seed");
  add_threads(ab);
  ab->callback([&] {
    Manifest m("ablate", ab_out);
    rc = run_command(m, [&] {
      TrainConfig cfg = load_config(ab_config, m);
      if (ab_epochs) cfg.options.epochs = *ab_epochs;
      if (ab_seed) cfg.options.seed = *ab_seed;
      const auto depths = parse_depths(ab_depths);
      record_config(m, cfg);
      m.config()["depths"] = ab_depths;
      m.config()["protocol"] = ab_protocol;
      m.config()["threads"] = threads;
      const fs::path data = resolve_data(ab_data);
      m.input(data);
      const ProtocolSpec proto = build_protocol(data, ab_protocol);
      fs::create_directories(ab_out);
      std::string summary = "depth,param_count,eer\n";
      for (int d : depths) {
        TrainConfig dc = cfg;
        dc.model.num_conv_blocks = d;
        dc.model.kernel_sizes = ModelConfig::default_kernels(d);
        const fs::path dir = fs::path(ab_out) / ("depth" + std::to_string(d));
        const std::string tag = "ablate[depth " + std::to_string(d) + "]";
        const Checkpoint cn = train_stream(dc, proto, Stream::kNormal, threads, dir / "normal.vann", m, tag + "[normal]");
        const Checkpoint ce =
            train_stream(dc, proto, Stream::kEnhanced, threads, dir / "enhanced.vann", m, tag + "[enhanced]");
        ScoringOptions so;
        so.clahe = dc.options.clahe;
        so.threads = threads;
        const auto pairs = generate_scores(proto, cn.model, ce.model, so);
        write_scores_csv(pairs, dir / "scores.csv");
        const auto metrics = per_stream_report(pairs);
        metrics_report(metrics).save(dir / "report.txt");
        m.output(dir / "scores.csv");
        m.output(dir / "report.txt");
        const double fused_eer = metrics[2].eer.eer;
        summary += std::to_string(d) + "," + std::to_string(count_params(cn.model.config)) + "," +
                   format_double(fused_eer) + "\n";
        std::cerr << tag << " params " << count_params(cn.model.config) << " fused EER " << format_double(fused_eer)
                  << '\n';
      }
      const fs::path sp = fs::path(ab_out) / "summary.csv";
      std::ofstream out(sp, std::ios::binary | std::ios::trunc);
      if (!out) throw IoError("cannot write " + sp.string());
      out << summary;
      out.close();
      std::cout << summary;
      m.output(sp);
    });
  });

  // explain
  auto* ex = app.add_subcommand("explain", "Perturbation-based saliency for a probe and claimed identity");
  std::string ex_normal, ex_enhanced, ex_image, ex_out, ex_grid = "8x8";
  std::optional<int> ex_claim;
  int ex_samples = kDefaultSamples;
  std::uint64_t ex_seed = 0;
  double ex_kw = kDefaultKernelWidth, ex_lambda = kDefaultRidgeLambda, ex_top = 0.25;
  ex->add_option("--normal", ex_normal, "Normal-stream checkpoint");
  ex->add_option("--enhanced", ex_enhanced, "Enhanced-stream checkpoint");
  ex->add_option("--image", ex_image, "Probe image")->required();
  ex->add_option("--claimed-id", ex_claim, "Claimed identity index");
  ex->add_option("--out", ex_out, "Output prefix")->required();
  ex->add_option("--grid", ex_grid, "Cell grid, e.g. 8x8")->capture_default_str();
  ex->add_option("--samples", ex_samples)->capture_default_str();
  ex->add_option("--seed", ex_seed)->capture_default_str();
  ex->add_option("--kernel-width", ex_kw)->capture_default_str();
  ex->add_option("--lambda", ex_lambda, "Ridge regularization")->capture_default_str();
  ex->add_option("--top", ex_top, "Fraction of cells brightened in the overlay")->capture_default_str();
  add_threads(ex);
  ex->callback([&] {
    Manifest m("explain", ex_out);
    rc = run_command(m, [&] {
      if (ex_normal.empty() && ex_enhanced.empty()) throw ConfigError("explain needs --normal and/or --enhanced");
      const auto grid = parse_int_list(ex_grid, "grid");
      if (grid.size() != 2) throw ConfigError("grid needs two values, e.g. 8x8");
      m.config() = {{"grid", ex_grid}, {"samples", ex_samples},  {"seed", ex_seed},  {"kernel_width", ex_kw},
                    {"lambda", ex_lambda}, {"top", ex_top}, {"threads", threads}};
      m.input(ex_image);
      const GrayImage raw = load_image(ex_image);
      for (const auto& [path, stream] : {std::pair{ex_normal, Stream::kNormal}, {ex_enhanced, Stream::kEnhanced}}) {
        if (path.empty()) continue;
        m.input(path);
        const Checkpoint ck = load_checkpoint(path);
        const int k = ck.model.config.num_classes;
        if (!ex_claim) {
          throw ConfigError("missing --claimed-id; valid range is 0.." + std::to_string(k - 1));
        }
        m.config()["claimed_id"] = *ex_claim;
        const GrayImage img = stream == Stream::kEnhanced ? clahe(raw, ck.meta.clahe) : raw;
        const ImageScorer scorer = model_scorer(ck.model, *ex_claim);
        const Segmentation seg = grid_segments(img, static_cast<int>(grid[0]), static_cast<int>(grid[1]));
        const Perturbations data = perturb_and_score(scorer, img, seg, ex_samples, ex_seed, threads);
        const SaliencyMap map = fit_local_linear(data, seg.gx, seg.gy, ex_kw, ex_lambda);
        const std::string prefix = ex_out + "." + std::string(stream_name(stream));
        ensure_parent(prefix);
        export_saliency(map, img, prefix + ".overlay.pgm", prefix + ".weights.csv", ex_top);
        m.output(prefix + ".overlay.pgm");
        m.output(prefix + ".weights.csv");
        const auto top = top_cells(map, 1.0 / map.weights.size());
        std::cerr << "explain[" << stream_name(stream) << "] score " << format_sig(data.scores[0], 6);
        if (!top.empty()) std::cerr << ", top cell (" << top[0] % seg.gx << "," << top[0] / seg.gx << ")";
        std::cerr << '\n';
      }
    });
  });

  // info
  auto* in = app.add_subcommand("info", "Print a checkpoint's configuration and layer breakdown");
  std::string in_ckpt;
  in->add_option("ckpt", in_ckpt, "Checkpoint file")->required();
  in->callback([&] {
    try {
      const Checkpoint ck = load_checkpoint(in_ckpt);
      const ModelConfig& c = ck.model.config;
      std::cout << "# config\n" << model_config_to_text(c).serialize();
      std::cout << "# training\nepoch = " << ck.meta.epoch << "\nstream = " << ck.meta.stream
                << "\nseed = " << ck.meta.seed << "\n";
      std::cout << "# parameters\n";
      std::printf("%-22s %-16s %10s\n", "tensor", "shape", "count");
      std::size_t total = 0;
      for (std::size_t i = 0; i < ck.model.params.size(); ++i) {
        const auto& t = ck.model.params.tensors[i];
        std::printf("%-22s %-16s %10zu\n", ck.model.params.names[i].c_str(), shape_to_string(t.shape()).c_str(),
                    t.size());
        total += t.size();
      }
      std::printf("%-22s %-16s %10zu\n", "total", "", total);
      std::cout << "# layers\n";
      std::vector<std::pair<std::string, std::size_t>> layers;
      for (std::size_t i = 0; i < ck.model.params.size(); ++i) {
        const std::string& n = ck.model.params.names[i];
        const std::string layer = n.substr(0, n.rfind('.'));
        if (layers.empty() || layers.back().first != layer) layers.emplace_back(layer, 0);
        layers.back().second += ck.model.params.tensors[i].size();
      }
      for (const auto& [layer, count] : layers) std::printf("%-22s %10zu\n", layer.c_str(), count);
      std::cout << "# activations\n";
      std::vector<LayerShape> log;
      ForwardOptions fo;
      fo.shape_log = &log;
      const auto s = static_cast<std::size_t>(c.input_size);
      predict(c, ck.model.params, Tensor<float>(Shape{1, static_cast<std::size_t>(c.in_channels), s, s}), fo);
      for (const auto& l : log) std::printf("%-22s %s\n", l.layer.c_str(), shape_to_string(l.shape).c_str());
    } catch (const std::exception& e) {
      std::cerr << "veinatn: error: " << e.what() << '\n';
      rc = 1;
    }
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  return rc;
}
