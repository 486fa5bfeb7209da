// dcfm: generate synthetic clips, train, run the two-stage inference engine,
// evaluate predictions, benchmark, and finite-difference-check the gradients.
//
// Every command takes --config FILE (flat JSON, same keys as the flags; flags
// win) and echoes its resolved configuration into --out/resolved_config.json.
// Exit codes: 0 ok, 2 bad config, 3 I/O failure, 4 numeric failure.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "dcfm/config_json.hpp"
#include "dcfm/dataio.hpp"
#include "dcfm/engine.hpp"
#include "dcfm/metrics.hpp"
#include "dcfm/model.hpp"
#include "dcfm/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dcfm;

namespace {

struct SizeArg {
  int h = 0, w = 0;
};

SizeArg parse_size(const std::string& s) {
  const size_t x = s.find('x');
  if (x == std::string::npos || x == 0 || x + 1 >= s.size())
    throw ConfigError("bad --size '" + s + "' (want HxW, e.g. 48x64)");
  SizeArg sz;
  try {
    sz.h = std::stoi(s.substr(0, x));
    sz.w = std::stoi(s.substr(x + 1));
  } catch (const std::exception&) {
    throw ConfigError("bad --size '" + s + "' (want HxW, e.g. 48x64)");
  }
  return sz;
}

json load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file " + path + ": " + e.what());
  }
}

// First pass over argv, before CLI11 sees it: the file supplies defaults that
// explicitly-passed flags then override.
std::optional<json> preparse_config(int argc, char** argv) {
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--config" && i + 1 < argc) return load_config_file(argv[i + 1]);
    if (a.rfind("--config=", 0) == 0) return load_config_file(a.substr(9));
  }
  return std::nullopt;
}

void write_json_file(const std::string& path, const json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << j.dump(2) << "\n";
  if (!out) throw IoError("failed writing " + path);
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
}

std::vector<std::string> sorted_files(const std::string& dir, const std::string& ext) {
  if (!fs::is_directory(dir)) throw IoError(dir + " is not a directory");
  std::vector<std::string> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ext) out.push_back(e.path().string());
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<Tensor<float>> load_clip_frames(const std::string& dir) {
  const auto paths = sorted_files(dir, ".ppm");
  if (paths.empty()) throw IoError("no .ppm frames under " + dir);
  std::vector<Tensor<float>> frames;
  frames.reserve(paths.size());
  for (const auto& p : paths) {
    const Image img = read_netpbm(p);
    if (img.c != 3) throw IoError(p + ": expected a 3-channel frame");
    frames.push_back(image_to_tensor(img));
  }
  return frames;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string resolve_manifest(const std::string& data) {
  if (data.size() > 5 && data.substr(data.size() - 5) == ".json") return data;
  return (fs::path(data) / "manifest.json").string();
}

json schedule_json(const ScheduleConfig& sc) {
  return {{"policy", to_string(sc.policy)}, {"K", sc.K},       {"min_k", sc.min_k},
          {"S", sc.threshold},              {"first_key", sc.first_key},
          {"mode", to_string(sc.mode)}};
}

json report_json(const EngineReport& r) {
  return {{"keyframe_indices", r.keyframe_indices},
          {"t_k_mean", r.t_k_mean},
          {"t_n_mean", r.t_n_mean},
          {"avg_ms_per_frame", r.avg_ms_per_frame},
          {"empirical_avg_ms", r.empirical_avg_ms},
          {"latency_ms", r.latency_ms}};
}

// --- commands -----------------------------------------------------------------

int cmd_gen(const GenConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  ensure_dir(out_dir);
  const std::string manifest = generate_synthetic(cfg, out_dir);
  json resolved = {{"command", "gen"}, {"out", out_dir}};
  to_json(resolved["gen"], cfg);
  write_json_file((fs::path(out_dir) / "resolved_config.json").string(), resolved);
  std::cout << "wrote " << manifest << "\n";
  return 0;
}

int cmd_train(const std::string& data, ModelConfig mc, const TrainConfig& tc,
              const std::string& out) {
  tc.validate();
  const Dataset ds = load_manifest(resolve_manifest(data));

  fs::path model_path(out);
  if (model_path.extension() != ".bin") model_path /= "model.bin";
  const fs::path out_dir = model_path.parent_path().empty() ? "." : model_path.parent_path();
  ensure_dir(out_dir.string());

  mc.num_classes = ds.num_classes;  // the data decides; widths come from config
  mc.validate();
  DcfmModel<float> model(mc);

  std::ofstream log(out_dir / "train_log.jsonl", std::ios::binary);
  if (!log) throw IoError("cannot open train_log.jsonl under " + out_dir.string());
  const LossBreakdown last = train(model, ds, tc, &log);
  save_model(model_path.string(), model);

  json resolved = {{"command", "train"}, {"data", data}, {"out", model_path.string()}};
  to_json(resolved["model"], mc);
  to_json(resolved["train"], tc);
  write_json_file((out_dir / "resolved_config.json").string(), resolved);
  std::cout << "final: l_i " << last.l_i << "  l_b " << last.l_b << "  l_c " << last.l_c
            << "  total " << last.total << "\n"
            << "wrote " << model_path.string() << "\n";
  return 0;
}

int cmd_infer(const std::string& model_path, const std::string& video,
              const ScheduleConfig& sc, const std::string& out_dir, bool pipelined) {
  const DcfmModel<float> model = load_model(model_path);
  const auto clip = load_clip_frames(video);
  sc.validate(static_cast<int>(clip.size()));
  ensure_dir(out_dir);

  EngineOptions opts;
  opts.pipelined = pipelined;
  const RunResult res = run_video(model, clip, sc, opts);

  char name[32];
  for (size_t t = 0; t < res.predictions.size(); ++t) {
    std::snprintf(name, sizeof name, "pred_%04zu.pgm", t);
    write_label((fs::path(out_dir) / name).string(), res.predictions[t]);
  }

  json report = report_json(res.report);
  const json sj = schedule_json(sc);
  report.update(sj);
  write_json_file((fs::path(out_dir) / "run_report.json").string(), report);

  json resolved = {{"command", "infer"},
                   {"model", model_path},
                   {"video", video},
                   {"out", out_dir},
                   {"pipelined", pipelined},
                   {"schedule", sj}};
  write_json_file((fs::path(out_dir) / "resolved_config.json").string(), resolved);
  std::cout << res.predictions.size() << " frames, " << res.report.keyframe_indices.size()
            << " keyframes, avg " << res.report.avg_ms_per_frame << " ms/frame\n";
  return 0;
}

int cmd_eval(const std::string& pred_dir, const std::string& gt_dir, const std::string& vc_arg,
             int classes, const std::string& out_dir) {
  const auto pred_paths = sorted_files(pred_dir, ".pgm");
  const auto gt_paths = sorted_files(gt_dir, ".pgm");
  if (pred_paths.empty()) throw IoError("no .pgm files under " + pred_dir);
  if (pred_paths.size() != gt_paths.size())
    throw ConfigError("prediction/ground-truth counts differ (" +
                      std::to_string(pred_paths.size()) + " vs " +
                      std::to_string(gt_paths.size()) + ")");

  std::vector<LabelMap> preds, gts;
  for (size_t i = 0; i < pred_paths.size(); ++i) {
    preds.push_back(read_label(pred_paths[i]));
    gts.push_back(read_label(gt_paths[i]));
  }

  if (classes <= 0) {
    int max_label = -1;
    for (const auto& g : gts)
      for (const uint8_t v : g.data)
        if (v != kIgnoreLabel) max_label = std::max(max_label, static_cast<int>(v));
    if (max_label < 0) throw ConfigError("ground truth is all-ignore; pass --classes");
    classes = max_label + 1;
  }

  ConfusionMatrix cm(classes);
  for (size_t i = 0; i < preds.size(); ++i) accumulate(cm, preds[i], gts[i]);

  std::vector<int> ls;
  std::stringstream vc_stream(vc_arg);
  for (std::string tok; std::getline(vc_stream, tok, ',');) {
    try {
      ls.push_back(std::stoi(tok));
    } catch (const std::exception&) {
      throw ConfigError("bad --vc list '" + vc_arg + "'");
    }
  }

  json report;
  report["miou"] = miou(cm);
  report["wiou"] = wiou(cm);
  json pci = json::array();
  for (const auto& iou : per_class_iou(cm))
    pci.push_back(iou ? json(*iou) : json(nullptr));
  report["per_class_iou"] = pci;
  report["frames_scored"] = preds.size();
  json mvcj;
  for (const int l : ls) {
    const std::string key = std::to_string(l);
    if (l > static_cast<int>(preds.size())) {
      std::cerr << "warning: clip shorter than VC window " << l << "; skipping\n";
      mvcj[key] = nullptr;
      continue;
    }
    const auto vc = video_consistency(preds, gts, l);
    mvcj[key] = vc ? json(*vc) : json(nullptr);
  }
  report["mvc"] = mvcj;

  ensure_dir(out_dir);
  write_json_file((fs::path(out_dir) / "eval_report.json").string(), report);
  json resolved = {{"command", "eval"}, {"pred", pred_dir},   {"gt", gt_dir},
                   {"vc", vc_arg},      {"classes", classes}, {"out", out_dir}};
  write_json_file((fs::path(out_dir) / "resolved_config.json").string(), resolved);
  std::cout << report.dump(2) << "\n";
  return 0;
}

int cmd_bench(const std::string& model_path, const std::string& video,
              const ScheduleConfig& sc, int reps, const std::string& out_dir) {
  if (reps < 1) throw ConfigError("--reps must be >= 1");
  const DcfmModel<float> model = load_model(model_path);
  const auto clip = load_clip_frames(video);
  sc.validate(static_cast<int>(clip.size()));

  // Per-frame stage timings across reps; the schedule is deterministic, so
  // frame roles agree between runs.
  std::vector<std::vector<FrameTiming>> runs;
  std::vector<int> keys;
  for (int r = 0; r < reps; ++r) {
    const RunResult res = run_video(model, clip, sc);
    if (r == 0)
      keys = res.report.keyframe_indices;
    else if (keys != res.report.keyframe_indices)
      throw NumericError("keyframe schedule changed between bench reps");
    runs.push_back(res.report.frames);
  }

  const size_t n = runs[0].size();
  std::vector<FrameTiming> med(n);
  for (size_t t = 0; t < n; ++t) {
    std::vector<double> lo, hi, fd;
    for (const auto& run : runs) {
      lo.push_back(run[t].enc_lo_ms);
      hi.push_back(run[t].enc_hi_ms);
      fd.push_back(run[t].fuse_decode_ms);
    }
    med[t] = runs[0][t];
    med[t].enc_lo_ms = median(lo);
    med[t].enc_hi_ms = median(hi);
    med[t].fuse_decode_ms = median(fd);
  }
  const EngineReport rep = latency_report(med, keys, sc);

  json report = report_json(rep);
  report.update(schedule_json(sc));
  report["reps"] = reps;
  ensure_dir(out_dir);
  write_json_file((fs::path(out_dir) / "bench_report.json").string(), report);
  json resolved = {{"command", "bench"}, {"model", model_path}, {"video", video},
                   {"reps", reps},       {"out", out_dir},      {"schedule", schedule_json(sc)}};
  write_json_file((fs::path(out_dir) / "resolved_config.json").string(), resolved);
  std::cout << "t_k_mean " << rep.t_k_mean << " ms, t_n_mean " << rep.t_n_mean
            << " ms, avg " << rep.avg_ms_per_frame << " ms/frame, latency " << rep.latency_ms
            << " ms (median of " << reps << " reps)\n";
  return 0;
}

int cmd_gradcheck(int seed, const std::string& size, int classes, int samples, double tol,
                  const std::string& out_dir) {
  const SizeArg sz = parse_size(size);
  const GradCheckReport rep = gradcheck_joint_loss(seed, sz.h, sz.w, classes, samples, tol);
  std::cout << "gradcheck: " << rep.checked << " entries, max rel err " << rep.max_rel_err
            << " at " << rep.worst_param << " -> " << (rep.pass ? "ok" : "FAIL") << "\n";

  ensure_dir(out_dir);
  json report = {{"checked", rep.checked},
                 {"max_rel_err", rep.max_rel_err},
                 {"worst_param", rep.worst_param},
                 {"pass", rep.pass}};
  write_json_file((fs::path(out_dir) / "gradcheck_report.json").string(), report);
  json resolved = {{"command", "gradcheck"}, {"seed", seed},       {"size", size},
                   {"classes", classes},     {"samples", samples}, {"tol", tol},
                   {"out", out_dir}};
  write_json_file((fs::path(out_dir) / "resolved_config.json").string(), resolved);
  if (!rep.pass) throw NumericError("gradient check failed (max rel err " +
                                    std::to_string(rep.max_rel_err) + " at " + rep.worst_param +
                                    ")");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"two-stage video semantic segmentation with cached deep features"};
  app.require_subcommand(1);

  GenConfig gen_cfg;
  ModelConfig model_cfg;
  TrainConfig train_cfg;
  ScheduleConfig sched_cfg;

  std::string config_path, out_dir = ".", data, model_path, video;
  std::string size = "48x64", vc_arg = "8,16", policy = "fixed", mode = "B";
  int seed = 0, classes = 0, reps = 5, samples = 7;
  double tol = 1e-4;
  bool no_lb = false, no_lc = false, pipelined = false;

  try {
    // The config file supplies defaults for every struct with matching keys;
    // flags parsed below override field by field.
    if (const auto file_cfg = preparse_config(argc, argv)) {
      from_json(*file_cfg, gen_cfg);
      from_json(*file_cfg, model_cfg);
      from_json(*file_cfg, train_cfg);
      from_json(*file_cfg, sched_cfg);
    }
    seed = train_cfg.seed;
    policy = to_string(sched_cfg.policy);
    mode = to_string(sched_cfg.mode);

    auto add_schedule_flags = [&](CLI::App* c) {
      c->add_option("--policy", policy, "keyframe policy: fixed|aks");
      c->add_option("--K", sched_cfg.K, "fixed keyframe interval");
      c->add_option("--min-k", sched_cfg.min_k, "adaptive minimum interval");
      c->add_option("--S", sched_cfg.threshold, "adaptive score threshold");
      c->add_option("--first-key", sched_cfg.first_key, "index of the first keyframe");
      c->add_option("--mode", mode, "prediction mode: P|B");
    };

    auto* cgen = app.add_subcommand("gen", "generate a synthetic labeled video set");
    cgen->add_option("--config", config_path, "JSON config file");
    cgen->add_option("--out", out_dir, "output directory")->required();
    cgen->add_option("--videos", gen_cfg.videos, "number of clips");
    cgen->add_option("--frames", gen_cfg.frames_per_video, "frames per clip");
    cgen->add_option("--size", size, "frame size HxW");
    cgen->add_option("--classes", gen_cfg.classes, "number of classes incl. background");
    cgen->add_option("--shapes", gen_cfg.shapes_per_video, "moving shapes per clip");
    cgen->add_option("--max-speed", gen_cfg.max_speed, "max shape speed, px/frame");
    cgen->add_option("--noise-sigma", gen_cfg.noise_sigma, "Gaussian pixel noise stddev");
    std::string label_mode;
    cgen->add_option("--label-mode", label_mode, "dense|sparse");
    cgen->add_option("--seed", gen_cfg.seed, "generator seed");

    auto* ctrain = app.add_subcommand("train", "train on a generated set");
    ctrain->add_option("--config", config_path, "JSON config file");
    ctrain->add_option("--data", data, "dataset directory or manifest.json")->required();
    ctrain->add_option("--out", out_dir, "model.bin path or output directory")->required();
    ctrain->add_option("--iters", train_cfg.iters, "training iterations");
    ctrain->add_option("--batch", train_cfg.batch, "pairs per iteration");
    ctrain->add_option("--lr", train_cfg.base_lr, "base learning rate");
    ctrain->add_option("--lambda-b", train_cfg.lambda_b, "cross-frame loss weight");
    ctrain->add_option("--lambda-c", train_cfg.lambda_c, "consistency loss weight");
    ctrain->add_flag("--no-lb", no_lb, "disable the cross-frame loss");
    ctrain->add_flag("--no-lc", no_lc, "disable the consistency loss");
    ctrain->add_option("--log-every", train_cfg.log_every, "log period in iterations");
    ctrain->add_option("--seed", seed, "model init + sampling seed");
    ctrain->add_option("--c-hi", model_cfg.c_hi, "deep encoder width");
    ctrain->add_option("--c-common", model_cfg.c_common, "common feature channels");

    auto* cinfer = app.add_subcommand("infer", "segment a clip with cached deep features");
    cinfer->add_option("--config", config_path, "JSON config file");
    cinfer->add_option("--model", model_path, "model.bin")->required();
    cinfer->add_option("--video", video, "clip directory of .ppm frames")->required();
    cinfer->add_option("--out", out_dir, "output directory")->required();
    add_schedule_flags(cinfer);
    cinfer->add_flag("--pipelined", pipelined, "process non-key frames concurrently");

    auto* ceval = app.add_subcommand("eval", "score predictions against ground truth");
    ceval->add_option("--config", config_path, "JSON config file");
    std::string pred_dir, gt_dir;
    ceval->add_option("--pred", pred_dir, "directory of predicted .pgm maps")->required();
    ceval->add_option("--gt", gt_dir, "directory of ground-truth .pgm maps")->required();
    ceval->add_option("--vc", vc_arg, "comma-separated consistency window lengths");
    ceval->add_option("--classes", classes, "class count (default: derived from GT)");
    ceval->add_option("--out", out_dir, "report directory");

    auto* cbench = app.add_subcommand("bench", "median per-frame timings over repeated runs");
    cbench->add_option("--config", config_path, "JSON config file");
    cbench->add_option("--model", model_path, "model.bin")->required();
    cbench->add_option("--video", video, "clip directory of .ppm frames")->required();
    cbench->add_option("--reps", reps, "repetitions");
    cbench->add_option("--out", out_dir, "report directory");
    add_schedule_flags(cbench);

    auto* cgrad = app.add_subcommand("gradcheck", "finite-difference gradient audit");
    std::string grad_size = "16x16";
    cgrad->add_option("--config", config_path, "JSON config file");
    cgrad->add_option("--seed", seed, "model + data seed");
    cgrad->add_option("--size", grad_size, "frame size HxW");
    cgrad->add_option("--classes", classes, "class count");
    cgrad->add_option("--samples", samples, "entries checked per parameter tensor");
    cgrad->add_option("--tol", tol, "relative-error threshold");
    cgrad->add_option("--out", out_dir, "report directory");

    try {
      app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
      const int rc = app.exit(e);
      return rc == 0 ? 0 : 2;
    }

    if (*cgen) {
      if (cgen->count("--size")) {
        const SizeArg sz = parse_size(size);
        gen_cfg.height = sz.h;
        gen_cfg.width = sz.w;
      }
      if (!label_mode.empty()) {
        if (label_mode == "dense")
          gen_cfg.label_mode = GenConfig::LabelMode::dense;
        else if (label_mode == "sparse")
          gen_cfg.label_mode = GenConfig::LabelMode::sparse;
        else
          throw ConfigError("unknown label_mode '" + label_mode + "' (want dense|sparse)");
      }
      return cmd_gen(gen_cfg, out_dir);
    }
    if (*ctrain) {
      train_cfg.seed = seed;
      model_cfg.seed = seed;
      if (no_lb) train_cfg.use_lb = false;
      if (no_lc) train_cfg.use_lc = false;
      return cmd_train(data, model_cfg, train_cfg, out_dir);
    }
    if (*cinfer || *cbench) {
      sched_cfg.policy = policy_from_string(policy);
      sched_cfg.mode = mode_from_string(mode);
      if (*cinfer) return cmd_infer(model_path, video, sched_cfg, out_dir, pipelined);
      return cmd_bench(model_path, video, sched_cfg, reps, out_dir);
    }
    if (*ceval) return cmd_eval(pred_dir, gt_dir, vc_arg, classes, out_dir);
    if (*cgrad) {
      if (classes <= 0) classes = 3;
      return cmd_gradcheck(seed, grad_size, classes, samples, tol, out_dir);
    }
    throw ConfigError("no command given");
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  }
}
