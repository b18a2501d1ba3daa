// Copyright 2026 The SBR-CNN Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "sbr/analysis.hpp"
#include "sbr/cli.hpp"
#include "sbr/metrics.hpp"

namespace sbr {

namespace fs = std::filesystem;

namespace {

// Raised for missing inputs and similar operator mistakes (exit code 1).
class UserError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config_path;
  std::string output_dir;
  std::vector<std::string> overrides;

  ExperimentConfig load() const {
    auto o = overrides;
    if (!output_dir.empty()) o.push_back("output_dir=\"" + output_dir + "\"");
    return load_config(config_path, o);
  }
};

GeneratorParams eval_params(const ExperimentConfig& cfg) {
  GeneratorParams p = cfg.dataset.train;
  p.num_images = cfg.dataset.eval_num_images;
  p.seed = cfg.dataset.eval_seed;
  return p;
}

GeneratedDataset load_split(const ExperimentConfig& cfg, bool eval) {
  const std::string& manifest = eval ? cfg.dataset.eval_manifest : cfg.dataset.manifest;
  if (!manifest.empty()) {
    if (!fs::exists(manifest)) throw UserError("dataset: manifest " + manifest + " does not exist");
    return read_dataset(manifest);
  }
  return generate_dataset(eval ? eval_params(cfg) : cfg.dataset.train);
}

std::string fmt_num(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

fs::path latest_trace(const fs::path& dir) {
  std::vector<fs::path> files;
  if (fs::is_directory(dir))
    for (const auto& e : fs::directory_iterator(dir))
      if (e.path().extension() == ".json") files.push_back(e.path());
  if (files.empty()) throw UserError("analyze-iou-dist: no trace files under " + dir.string());
  std::sort(files.begin(), files.end());
  return files.back();
}

// ---------------------------------------------------------------- commands

int cmd_gen_data(const ExperimentConfig& cfg, std::ostream& out) {
  const fs::path root = fs::path(cfg.output_dir) / "data";
  const auto train = generate_dataset(cfg.dataset.train);
  write_dataset(train, root / "train");
  const auto eval = generate_dataset(eval_params(cfg));
  write_dataset(eval, root / "eval");
  out << "train: " << train.manifest.images.size() << " images, " << train.manifest.annotations.size()
      << " instances -> " << (root / "train").string() << "\n";
  out << "eval:  " << eval.manifest.images.size() << " images, " << eval.manifest.annotations.size()
      << " instances -> " << (root / "eval").string() << "\n";
  return 0;
}

int cmd_train(const ExperimentConfig& cfg, bool quiet, std::ostream& out) {
  const fs::path dir(cfg.output_dir);
  fs::create_directories(dir / "traces");
  const auto samples = make_samples(load_split(cfg, false));
  R3Model<float> model(cfg.model, cfg.model_seed);
  const std::string config_text = config_to_string(cfg);
  write_text_file(dir / "config.json", config_text);
  if (!quiet) out << "training " << model.num_parameters() << " parameters on " << samples.size() << " images\n";
  std::string log = "epoch,mean_loss,last_loss,lr\n";
  const auto t0 = std::chrono::steady_clock::now();
  const auto result = train(model, samples, cfg.optim, [&](const EpochLog& e) {
    char name[32];
    std::snprintf(name, sizeof name, "epoch_%03d.json", e.epoch);
    write_text_file(dir / "traces" / name, e.trace.to_json());
    char row[160];
    std::snprintf(row, sizeof row, "%d,%.9g,%.9g,%.9g\n", e.epoch, e.mean_loss, e.last_loss, e.lr);
    log += row;
    if (!quiet) {
      const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      out << "epoch " << e.epoch << "  loss " << fmt_num(e.mean_loss) << "  lr " << fmt_num(e.lr, 5) << "  medians";
      for (const auto& l : e.trace.loops) out << " " << fmt_num(l.median(), 3);
      out << "  (" << fmt_num(s, 1) << " s)\n";
    }
  });
  write_text_file(dir / "train_log.csv", log);
  save_checkpoint(dir / "model.ckpt", model, config_text);
  char final_line[64];
  std::snprintf(final_line, sizeof final_line, "%.9g", result.final_loss);
  out << "final_loss " << final_line << "\n";
  out << "checkpoint " << (dir / "model.ckpt").string() << "\n";
  return 0;
}

struct EvalOutcome {
  EvalResult bbox, segm;
};

EvalOutcome evaluate_model(const R3Model<float>& model, const GeneratedDataset& data) {
  const auto samples = make_samples(data);
  std::vector<Detection> boxes, masks;
  for (const auto& s : samples)
    for (auto& p : infer(model, s)) {
      boxes.push_back({p.image_id, p.category_id, p.box, p.score, std::nullopt});
      masks.push_back({p.image_id, p.category_id, p.box, p.mask_score, std::move(p.mask)});
    }
  return {evaluate(boxes, data.manifest, EvalTask::kBbox), evaluate(masks, data.manifest, EvalTask::kSegm)};
}

int cmd_eval(const Common& common, const std::string& checkpoint, const std::string& split, std::ostream& out) {
  // The checkpoint's own config is the base; a config file and flags overlay it.
  ExperimentConfig base = common.load();
  const fs::path ckpt = checkpoint.empty() ? fs::path(base.output_dir) / "model.ckpt" : fs::path(checkpoint);
  if (!fs::exists(ckpt)) throw UserError("eval: checkpoint " + ckpt.string() + " does not exist");
  std::string stored = read_checkpoint_config(ckpt);
  auto doc = nlohmann::ordered_json::parse(stored, nullptr, false);
  if (doc.is_discarded()) throw UserError("eval: checkpoint config is not valid JSON");
  if (!common.config_path.empty()) {
    const auto overlay = nlohmann::ordered_json::parse(read_text_file(common.config_path), nullptr, false, true);
    if (overlay.is_discarded()) throw ConfigError("config: not valid JSON");
    doc.merge_patch(overlay);
  }
  auto overrides = common.overrides;
  if (!common.output_dir.empty()) overrides.push_back("output_dir=\"" + common.output_dir + "\"");
  const ExperimentConfig cfg = config_from_string(doc.dump(), overrides);
  R3Model<float> model(cfg.model, cfg.model_seed);
  load_checkpoint(ckpt, model);
  if (split != "eval" && split != "train") throw UserError("eval: --split must be 'eval' or 'train'");
  const auto data = load_split(cfg, split == "eval");
  const auto res = evaluate_model(model, data);
  const fs::path dir = fs::path(cfg.output_dir) / "eval";
  write_text_file(dir / ("bbox_" + split + ".json"), res.bbox.to_json());
  write_text_file(dir / ("segm_" + split + ".json"), res.segm.to_json());
  const std::string report = res.bbox.to_text() + res.segm.to_text();
  write_text_file(dir / ("report_" + split + ".txt"), report);
  out << report;
  return 0;
}

int cmd_count_params(const ExperimentConfig& cfg, const std::string& format, std::ostream& out) {
  const nn::ShapeOnlyScope shapes_only;
  nn::Rng rng(cfg.model_seed);
  const DetectionHead<float> det(cfg.model.head, rng);
  const ParamTable configured = count_params(det);
  R3Model<float> model(cfg.model, cfg.model_seed);
  const ParamTable full = count_params(model);
  if (format == "json") {
    nlohmann::ordered_json j;
    j["layer_comparison"] = nlohmann::ordered_json::parse(layer_comparison_table().to_json());
    j["variant_totals"] = nlohmann::ordered_json::parse(variant_totals_table().to_json());
    j["detection_head"] = nlohmann::ordered_json::parse(configured.to_json());
    j["model"] = nlohmann::ordered_json::parse(full.to_json());
    out << j.dump(2) << "\n";
  } else if (format == "text") {
    out << "Layer comparison (C = 256)\n" << layer_comparison_table().to_text() << "\n";
    out << "Variant totals (C = 256, K = 80)\n" << variant_totals_table().to_text() << "\n";
    out << "Configured detection head (" << det_variant_name(cfg.model.head.det_variant)
        << ", C = " << cfg.model.head.in_channels << ")\n"
        << configured.to_text() << "\n";
    out << "Configured model\n" << full.to_text();
  } else {
    throw UserError("count-params: --format must be 'text' or 'json'");
  }
  return 0;
}

int cmd_analyze_anchors(const ExperimentConfig& cfg, int num_boxes, std::uint64_t seed, bool from_dataset,
                        std::ostream& out) {
  const ImageSize size{cfg.dataset.train.image_size, cfg.dataset.train.image_size};
  const auto strides = backbone_strides(cfg.model.backbone);
  const auto grid = pyramid_anchors(size, strides, cfg.model.anchors);
  std::vector<Box> gts;
  if (from_dataset) {
    for (const auto& a : load_split(cfg, false).manifest.annotations) gts.push_back(a.box);
  } else {
    if (num_boxes < 1) throw UserError("analyze-anchors: --num-boxes must be >= 1");
    gts = random_gt_boxes(num_boxes, size, cfg.dataset.train.min_size, cfg.dataset.train.max_size, 2.0, seed);
  }
  const auto curve = evgt_curve(grid, gts);
  const fs::path stem = fs::path(cfg.output_dir) / "analysis" / "evgt";
  emit_plot(to_rows(curve), stem, "Ground truth without an anchor at IoU", "missed gt (%)");
  out << "anchors " << grid.total() << ", gt boxes " << gts.size() << "\n";
  out << "bin          miss%\n";
  for (std::size_t i = 0; i < curve.bin_lo.size(); ++i)
    out << "[" << fmt_num(curve.bin_lo[i], 2) << "," << fmt_num(curve.bin_hi[i], 2) << ")  "
        << fmt_num(curve.miss_percent[i], 2) << "\n";
  out << "csv " << stem.string() << ".csv\n";
  return 0;
}

int cmd_analyze_iou_dist(const ExperimentConfig& cfg, std::vector<std::string> files, std::ostream& out) {
  if (files.empty()) files.push_back(latest_trace(fs::path(cfg.output_dir) / "traces").string());
  std::vector<LoopTrace> traces;
  for (const auto& f : files) {
    if (!fs::exists(f)) throw UserError("analyze-iou-dist: trace " + f + " does not exist");
    traces.push_back(LoopTrace::from_json(read_text_file(f)));
  }
  const auto report = iou_rebalancing_report(traces);
  const fs::path stem = fs::path(cfg.output_dir) / "analysis" / "iou_dist";
  emit_plot(to_rows(report), stem, "IoU of positive samples per loop", "samples");
  write_text_file(fs::path(cfg.output_dir) / "analysis" / "iou_dist.txt", report.to_text());
  out << report.to_text();
  out << "csv " << stem.string() << ".csv\n";
  return 0;
}

int cmd_plot(const std::string& csv, std::string stem, const std::string& title, std::ostream& out) {
  if (!fs::exists(csv)) throw UserError("plot: " + csv + " does not exist");
  const auto rows = parse_csv(read_text_file(csv));
  if (stem.empty()) stem = (fs::path(csv).parent_path() / fs::path(csv).stem()).string();
  emit_plot(rows, stem, title, rows.empty() || !rows.front().loop ? "value" : "samples");
  out << "svg " << stem << ".svg\n";
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Looped two-stage instance segmentation on synthetic shapes"};
  app.require_subcommand(1);
  app.formatter(std::make_shared<CLI::Formatter>());
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", common.config_path, "Experiment config (JSON)");
    sub->add_option("-o,--output-dir", common.output_dir, "Overrides output_dir");
    sub->allow_extras();
    sub->footer("Any key can be overridden with --section.key=value, e.g. --model.loops.train_loops=1");
  };
  auto* gen = app.add_subcommand("gen-data", "Generate the training and evaluation splits");
  auto* tr = app.add_subcommand("train", "Train a model, write checkpoint, traces and loss log");
  bool quiet = false;
  tr->add_flag("-q,--quiet", quiet, "Only print the final summary");
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint (box and mask AP)");
  std::string checkpoint, split = "eval";
  ev->add_option("--checkpoint", checkpoint, "Checkpoint path (default <output_dir>/model.ckpt)");
  ev->add_option("--split", split, "eval or train")->check(CLI::IsMember({"eval", "train"}));
  auto* cp = app.add_subcommand("count-params", "Parameter tables for the head variants and the configured model");
  std::string format = "text";
  cp->add_option("--format", format, "text or json")->check(CLI::IsMember({"text", "json"}));
  auto* aa = app.add_subcommand("analyze-anchors", "Anchor coverage curve of ground-truth boxes");
  int num_boxes = 10000;
  std::uint64_t box_seed = 0;
  bool from_dataset = false;
  aa->add_option("--num-boxes", num_boxes, "Random boxes to test");
  aa->add_option("--seed", box_seed, "Seed of the random boxes");
  aa->add_flag("--from-dataset", from_dataset, "Use the training split's boxes instead");
  auto* ai = app.add_subcommand("analyze-iou-dist", "Per-loop IoU histograms of positive samples");
  std::vector<std::string> trace_files;
  ai->add_option("traces", trace_files, "Trace files (default: last epoch under <output_dir>/traces)");
  auto* pl = app.add_subcommand("plot", "Render a CSV produced by the analyses as SVG");
  std::string csv, stem, title = "plot";
  pl->add_option("csv", csv, "CSV file")->required();
  pl->add_option("--out", stem, "Output stem (default: next to the CSV)");
  pl->add_option("--title", title, "Plot title");
  for (auto* s : {gen, tr, ev, cp, aa, ai}) add_common(s);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    std::ostringstream o, er;
    const int code = app.exit(e, o, er);
    out << o.str();
    err << er.str();
    return code == 0 ? 0 : 1;
  }

  try {
    for (auto* s : {gen, tr, ev, cp, aa, ai}) {
      if (!s->parsed()) continue;
      for (const auto& extra : s->remaining()) {
        if (extra.rfind("--", 0) != 0 || extra.find('=') == std::string::npos)
          throw UserError("unexpected argument '" + extra + "' (overrides use --section.key=value)");
        common.overrides.push_back(extra.substr(2));
      }
    }
    if (gen->parsed()) return cmd_gen_data(common.load(), out);
    if (tr->parsed()) return cmd_train(common.load(), quiet, out);
    if (ev->parsed()) return cmd_eval(common, checkpoint, split, out);
    if (cp->parsed()) return cmd_count_params(common.load(), format, out);
    if (aa->parsed()) return cmd_analyze_anchors(common.load(), num_boxes, box_seed, from_dataset, out);
    if (ai->parsed()) return cmd_analyze_iou_dist(common.load(), trace_files, out);
    if (pl->parsed()) return cmd_plot(csv, stem, title, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return 1;
  } catch (const UserError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const CheckpointError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const ManifestError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}

}  // namespace sbr
