#include "hfl/experiments.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <fmt/format.h>
#include <fstream>
#include <map>
#include <set>

namespace hfl {

namespace fs = std::filesystem;

namespace {

void say(const Logger& log, const std::string& msg) {
  if (log) log(msg);
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(fmt::format("cannot write '{}'", path.string()));
  out << text;
  if (!out) throw std::runtime_error(fmt::format("write to '{}' failed", path.string()));
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string tap_list(const TapSet& taps) {
  std::string s;
  for (int l : taps.indices()) s += (s.empty() ? "" : ",") + std::to_string(l);
  return s;
}

void write_run_files(const fs::path& dir, const RawConfig& raw, std::uint64_t seed) {
  fs::create_directories(dir);
  write_text(dir / "config.ini", to_ini(raw));
  write_text(dir / "seed", fmt::format("{}\n", seed));
}

int trace_seq_len(const ExperimentConfig& cfg) { return cfg.comparison.seq_len; }

}  // namespace

void require_training_preset(const ExperimentConfig& cfg, std::string_view command) {
  if (cfg.preset == Preset::paper_counting) {
    throw ConfigError(fmt::format("'{}' trains models; preset paper-counting only supports count-params", command));
  }
}

NamedTensors load_pretrained(const ExperimentConfig& cfg) {
  const fs::path path = cfg.checkpoint_path();
  if (!fs::exists(path)) {
    throw std::runtime_error(fmt::format(
        "pretrained checkpoint '{}' not found; run `hfflab pretrain` with the same config first", path.string()));
  }
  return read_checkpoint(path);
}

Lab open_lab(const ExperimentConfig& cfg) {
  Lab lab{cfg, {}, load_pretrained(cfg)};
  lab.corpus.train = generate_split(cfg.synth, cfg.seed, Split::train);
  lab.corpus.test = generate_split(cfg.synth, cfg.seed, Split::test);
  return lab;
}

RawConfig raw_for_model(const RawConfig& base, const ModelSpec& spec) {
  RawConfig raw = base;
  auto& f = raw.at("fusion");
  auto& p = raw.at("peft");
  const std::optional<FusionSpec> head = spec.peft.combined_fusion ? spec.peft.combined_fusion : spec.fusion;
  f["kind"] = "none";
  if (head) {
    std::visit([&](const auto& s) {
      using S = std::decay_t<decltype(s)>;
      if constexpr (std::is_same_v<S, SingleLayerSpec>) {
        f["kind"] = "single";
        f["layer"] = std::to_string(s.layer);
      } else if constexpr (std::is_same_v<S, LinearFusionSpec>) {
        f["kind"] = "linear";
        f["taps"] = tap_list(s.taps);
        f["projector_depth"] = std::to_string(s.projector_depth);
        f["projector_dim"] = std::to_string(s.projector_dim);
      } else {
        f["kind"] = "hff";
        f["taps"] = tap_list(s.taps);
        f["variant"] = std::string(hff_variant_name(s.variant));
        f["fp_out_dim"] = std::to_string(s.fp_out_dim);
        f["final_depth"] = std::to_string(s.final_depth);
        f["final_dim"] = std::to_string(s.final_dim);
      }
    }, *head);
  }
  p["kind"] = std::string(peft_kind_name(spec.peft.kind));
  if (spec.peft.adapter_layers) p["adapter_layers"] = tap_list(*spec.peft.adapter_layers);
  if (spec.peft.kind == PeftKind::adapter) p["bottleneck_dim"] = std::to_string(spec.peft.bottleneck_dim);
  p["combine_with_fusion"] = spec.peft.combined_fusion ? "true" : "false";
  return raw;
}

RunRecord train_row(const Lab& lab, std::string id, const ModelSpec& spec, const std::optional<fs::path>& dir,
                    const Logger& log, const std::function<void(const DownstreamModel&)>& inspect) {
  const ExperimentConfig& cfg = lab.config;
  RunRecord rec;
  rec.id = std::move(id);
  rec.label = model_label(spec);
  rec.spec = spec;
  say(log, fmt::format("[{}] {}", rec.id, rec.label));
  DownstreamModel model = DownstreamModel::build(spec, cfg.seed, DType::f32, &lab.pretrained);
  const auto start = std::chrono::steady_clock::now();
  rec.train = train_downstream(model, lab.corpus.train, lab.corpus.test, cfg.train, [&](const MetricsRow& m) {
    say(log, fmt::format("[{}] step {} loss {:.4f} fer {:.4f} ({:.1f} ex/s)", rec.id, m.step, m.loss, m.fer,
                         m.examples_per_sec));
  });
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  say(log, fmt::format("[{}] final fer {:.4f} in {:.0f}s", rec.id, rec.train.final_fer, secs));
  if (inspect) inspect(model);
  rec.resources = resource_report(spec, cfg.train.batch_size, trace_seq_len(cfg));
  if (dir) {
    write_run_files(*dir, raw_for_model(cfg.raw, spec), cfg.seed);
    write_text(*dir / "metrics.csv", metrics_csv(rec.train.history));
    write_text(*dir / "resources.txt", format_report(rec.resources) +
                                            fmt::format("final_fer: {:.6f}\n", rec.train.final_fer));
  }
  return rec;
}

PretrainOutcome cmd_pretrain(const ExperimentConfig& cfg, const Logger& log) {
  require_training_preset(cfg, "pretrain");
  const Dataset data = generate_split(cfg.synth, cfg.seed, Split::pretrain);
  Encoder encoder = Encoder::build(cfg.encoder, cfg.seed);
  PretrainOutcome out;
  out.checkpoint = cfg.checkpoint_path();
  say(log, fmt::format("pretraining {} steps on {} utterances", cfg.pretrain.steps, data.size()));
  out.result = pretrain_masked_prediction(encoder, data, cfg.pretrain, [&](int step, double loss) {
    say(log, fmt::format("step {} loss {:.4f}", step, loss));
  });
  save_encoder(out.checkpoint, encoder);
  write_run_files(cfg.output_dir, cfg.raw, cfg.seed);
  std::string csv = "step,loss\n";
  for (const auto& [step, loss] : out.result.loss_history) csv += fmt::format("{},{:.6f}\n", step, loss);
  write_text(cfg.output_dir / "pretrain_loss.csv", csv);
  const auto& r = out.result;
  say(log, fmt::format("loss {:.4f} -> {:.4f} ({:.1f}% drop); checkpoint {}", r.initial_loss, r.final_loss,
                       100.0 * (1.0 - r.final_loss / r.initial_loss), out.checkpoint.string()));
  if (!r.gate_passed) {
    throw GateFailure(fmt::format("pretrain loss fell from {:.4f} to {:.4f}, less than the required 30%",
                                  r.initial_loss, r.final_loss));
  }
  return out;
}

std::vector<ProbeRow> cmd_probe_layers(const ExperimentConfig& cfg, const std::optional<std::vector<int>>& taps,
                                       const Logger& log) {
  require_training_preset(cfg, "probe-layers");
  std::vector<int> layers;
  if (taps) {
    layers = *taps;
    std::set<int> seen;
    for (int l : layers) {
      if (!seen.insert(l).second) throw ConfigError(fmt::format("duplicate probe layer {}", l));
      if (l < 0 || l >= cfg.encoder.num_layers) {
        throw ConfigError(fmt::format("probe layer {} outside [0, {})", l, cfg.encoder.num_layers));
      }
    }
  } else {
    layers = cfg.probe_taps ? cfg.probe_taps->indices() : TapSet::all(cfg.encoder.num_layers).indices();
  }
  const Lab lab = open_lab(cfg);
  std::vector<ProbeRow> rows;
  for (int l : layers) {
    ModelSpec spec = cfg.model_spec();
    spec.fusion = SingleLayerSpec{l};
    spec.peft = PeftSpec{};
    const auto rec = train_row(lab, fmt::format("layer_{}", l), spec, cfg.output_dir / "probe" / fmt::format("layer_{}", l), log);
    rows.push_back({l, rec.train.final_fer});
  }
  std::string csv = "layer,fer\n", dat = "# layer fer\n";
  for (const auto& r : rows) {
    csv += fmt::format("{},{:.6f}\n", r.layer, r.fer);
    dat += fmt::format("{} {:.6f}\n", r.layer, r.fer);
  }
  write_run_files(cfg.output_dir, cfg.raw, cfg.seed);
  write_text(cfg.output_dir / "probe_layers.csv", csv);
  write_text(cfg.output_dir / "probe_layers.dat", dat);
  return rows;
}

int best_probe_layer(const std::vector<ProbeRow>& rows, const std::vector<int>& layers) {
  int best = -1;
  double best_fer = 2.0;
  for (const auto& r : rows) {
    if (std::find(layers.begin(), layers.end(), r.layer) == layers.end()) continue;
    if (r.fer < best_fer) {
      best_fer = r.fer;
      best = r.layer;
    }
  }
  if (best < 0) throw std::invalid_argument("best_probe_layer: no probe row for the requested layers");
  return best;
}

std::vector<std::pair<std::string, ModelSpec>> fusion_table_specs(const ExperimentConfig& cfg) {
  const int layers = cfg.encoder.num_layers, d = cfg.encoder.model_dim;
  std::vector<std::pair<std::string, ModelSpec>> out;
  auto add = [&](std::string id, FusionSpec f) {
    ModelSpec m = cfg.model_spec();
    m.fusion = std::move(f);
    m.peft = PeftSpec{};
    out.emplace_back(std::move(id), std::move(m));
  };
  for (int n : cfg.fusion_table.tap_counts)
    add(fmt::format("taps_{}", n), default_linear_fusion(TapSet::evenly_spaced(n, layers), d, 1));
  for (int depth : cfg.fusion_table.depths)
    add(fmt::format("depth_{}", depth), default_linear_fusion(TapSet::all(layers), d, depth));
  if (cfg.fusion_table.hff) {
    add("hff_b", default_hff(TapSet::all(layers), d, HffVariant::balanced));
    if (layers >= 3) add("hff_ub", default_hff(TapSet::all(layers), d, HffVariant::unbalanced));
  }
  return out;
}

double middle_minus_extremes(const std::vector<std::pair<int, double>>& norms) {
  if (norms.size() < 3) return 0.0;
  double middle = 0;
  for (std::size_t i = 1; i + 1 < norms.size(); ++i) middle += norms[i].second;
  middle /= static_cast<double>(norms.size() - 2);
  return middle - 0.5 * (norms.front().second + norms.back().second);
}

std::vector<FusionRow> cmd_fusion_table(const ExperimentConfig& cfg, const Logger& log) {
  require_training_preset(cfg, "fusion-table");
  const auto specs = fusion_table_specs(cfg);
  const Lab lab = open_lab(cfg);
  std::map<std::string, FusionRow> done;  // canonical spec -> trained row
  std::vector<FusionRow> rows;
  for (const auto& [id, spec] : specs) {
    const FusionSpec& f = *spec.fusion;
    FusionRow row;
    row.id = id;
    row.family = id.substr(0, id.find('_'));
    row.tap_count = static_cast<int>(fusion_taps(f).size());
    if (const auto* lin = std::get_if<LinearFusionSpec>(&f)) row.depth = lin->projector_depth;
    if (const auto* hff = std::get_if<HffSpec>(&f)) row.depth = hff->final_depth;
    row.head_params = fusion_param_count(f, cfg.encoder.model_dim);
    const std::string key = canonical_spec(spec);
    if (auto it = done.find(key); it != done.end()) {
      row.label = it->second.label;
      row.fer = it->second.fer;
      row.weight_norms = it->second.weight_norms;
      say(log, fmt::format("[{}] same model as row {}, fer {:.4f}", id, it->second.id, row.fer));
    } else {
      const auto rec = train_row(lab, id, spec, cfg.output_dir / "fusion" / id, log, [&](const DownstreamModel& m) {
        if (std::holds_alternative<LinearFusionSpec>(f)) row.weight_norms = layer_weight_norms(m.head());
      });
      row.label = rec.label;
      row.fer = rec.train.final_fer;
      done.emplace(key, row);
    }
    rows.push_back(row);
  }
  write_run_files(cfg.output_dir, cfg.raw, cfg.seed);
  std::string csv = "id,family,label,taps,depth,head_params,fer\n";
  std::string norms = "id,layer,norm\n";
  for (const auto& r : rows) {
    csv += fmt::format("{},{},{},{},{},{},{:.6f}\n", r.id, r.family, csv_field(r.label), r.tap_count, r.depth,
                       r.head_params, r.fer);
    for (const auto& [layer, norm] : r.weight_norms) norms += fmt::format("{},{},{:.6f}\n", r.id, layer, norm);
    if (r.weight_norms.size() >= 3) {
      say(log, fmt::format("[{}] tap weight norms: middle minus extremes {:+.4f}", r.id,
                           middle_minus_extremes(r.weight_norms)));
    }
  }
  write_text(cfg.output_dir / "fusion_table.csv", csv);
  write_text(cfg.output_dir / "weight_norms.csv", norms);
  return rows;
}

std::vector<std::pair<std::string, ModelSpec>> comparison_specs(const ExperimentConfig& cfg) {
  const int layers = cfg.encoder.num_layers, d = cfg.encoder.model_dim, b = cfg.comparison.bottleneck;
  const TapSet all = TapSet::all(layers);
  const TapSet subset = cfg.comparison.subset ? *cfg.comparison.subset : top_half(layers);
  const FusionSpec hff = default_hff(all, d, HffVariant::balanced);
  std::vector<std::pair<std::string, ModelSpec>> out;
  auto add = [&](std::string id, PeftSpec peft, std::optional<FusionSpec> fusion) {
    ModelSpec m = cfg.model_spec();
    m.peft = std::move(peft);
    m.fusion = std::move(fusion);
    out.emplace_back(std::move(id), std::move(m));
  };
  auto combined = [&](const TapSet& layers_with_adapter) {
    PeftSpec p = adapters(layers_with_adapter, b);
    p.combined_fusion = hff;
    return p;
  };
  add("full", full_finetune(), std::nullopt);
  add("fths", fths(), std::nullopt);
  add("bitfit", bitfit(), std::nullopt);
  add("adapter_all", adapters(all, b), std::nullopt);
  add("adapter_subset", adapters(subset, b), std::nullopt);
  add("hff_b", PeftSpec{}, hff);
  add("hff_b_adapter_subset", combined(subset), hff);
  add("hff_b_adapter_all", combined(all), hff);
  return out;
}

std::string comparison_paper_id(const std::string& row_id) {
  static const std::map<std::string, std::string> ids = {
      {"full", "t3_full"},
      {"fths", "t3_fths"},
      {"bitfit", "t3_bitfit"},
      {"adapter_all", "t3_adapter128"},
      {"adapter_subset", "t3_adapter128_subset"},
      {"hff_b", "t3_hffb"},
      {"hff_b_adapter_subset", "t3_hffb_adapter_subset"},
      {"hff_b_adapter_all", "t3_hffb_adapter_all"}};
  auto it = ids.find(row_id);
  if (it == ids.end()) throw std::out_of_range(fmt::format("no paper row for comparison row '{}'", row_id));
  return it->second;
}

std::vector<ComparisonRow> cmd_comparison(const ExperimentConfig& cfg, const Logger& log) {
  require_training_preset(cfg, "comparison");
  const auto specs = comparison_specs(cfg);
  const Lab lab = open_lab(cfg);
  const auto paper_rows = paper_count_rows();
  std::vector<ComparisonRow> rows;
  for (const auto& [id, spec] : specs) {
    ComparisonRow row;
    row.id = id;
    {
      // Throughput on a fresh model so every row starts from the same weights.
      DownstreamModel fresh = DownstreamModel::build(spec, cfg.seed, DType::f32, &lab.pretrained);
      row.examples_per_sec = measure_throughput(fresh, lab.corpus.train, cfg.train, cfg.comparison.throughput_warmup,
                                                cfg.comparison.throughput_steps);
    }
    say(log, fmt::format("[{}] {:.1f} examples/sec", id, row.examples_per_sec));
    auto rec = train_row(lab, id, spec, cfg.output_dir / "comparison" / id, log);
    const TrainableCount count = count_trainable_params(spec.encoder, spec.fusion, spec.peft);
    row.label = rec.label;
    row.trainable_encoder_params = count.encoder;
    row.head_params = fusion_param_count(resolved_head(spec), spec.encoder.model_dim);
    row.activation_bytes = rec.resources.activation_bytes;
    row.backward_flops = rec.resources.backward_flops;
    row.fer = rec.train.final_fer;
    const std::string pid = comparison_paper_id(id);
    for (const auto& p : paper_rows)
      if (p.id == pid) row.paper = p;
    rec.resources.throughput = row.examples_per_sec;
    write_text(cfg.output_dir / "comparison" / id / "resources.txt",
               format_report(rec.resources) + fmt::format("final_fer: {:.6f}\n", row.fer));
    rows.push_back(std::move(row));
  }

  write_run_files(cfg.output_dir, cfg.raw, cfg.seed);
  std::string csv =
      "id,label,trainable_encoder_params,head_params,activation_bytes,backward_flops_per_example,"
      "examples_per_sec,fer,paper_id,paper_scale_count,paper_value,deviation_pct\n";
  std::string txt = fmt::format("{:<22} {:>10} {:>8} {:>12} {:>9} {:>7}   {:>13} {:>9} {:>8}\n", "row",
                                "enc.train", "head", "act.bytes", "ex/s", "FER", "paper-scale", "paper", "dev%");
  for (const auto& r : rows) {
    const std::string pid = r.paper ? r.paper->id : "";
    csv += fmt::format("{},{},{},{},{},{},{:.2f},{:.6f},{},{},{},{}\n", r.id, csv_field(r.label),
                       r.trainable_encoder_params, r.head_params, r.activation_bytes, r.backward_flops,
                       r.examples_per_sec, r.fer, pid, r.paper ? std::to_string(r.paper->count) : "",
                       r.paper ? fmt::format("{}", r.paper->paper) : "",
                       r.paper ? fmt::format("{:.2f}", r.paper->deviation_pct()) : "");
    txt += fmt::format("{:<22} {:>10} {:>8} {:>12} {:>9.1f} {:>7.4f}   {:>13} {:>8.1f}M {:>+8.2f}\n", r.id,
                       r.trainable_encoder_params, r.head_params, r.activation_bytes, r.examples_per_sec, r.fer,
                       r.paper ? r.paper->count : 0, r.paper ? r.paper->paper / 1e6 : 0.0,
                       r.paper ? r.paper->deviation_pct() : 0.0);
  }
  write_text(cfg.output_dir / "comparison.csv", csv);
  write_text(cfg.output_dir / "comparison.txt", txt);
  say(log, txt);
  return rows;
}

std::string count_rows_csv(const std::vector<CountRow>& rows) {
  std::string csv = "id,label,count,paper,deviation_pct,tolerance_pct,gated,within,citation,note\n";
  for (const auto& r : rows) {
    csv += fmt::format("{},{},{},{},{:.3f},{},{},{},{},{}\n", r.id, csv_field(r.label), r.count, r.paper,
                       r.deviation_pct(), r.tolerance_pct, r.gated ? "yes" : "no", r.within() ? "yes" : "no",
                       csv_field(r.citation), csv_field(r.note));
  }
  return csv;
}

std::vector<CountRow> cmd_count_params(const std::optional<fs::path>& out) {
  auto rows = paper_count_rows();
  if (out) write_text(*out / "count_params.csv", count_rows_csv(rows));
  std::string failed;
  for (const auto& r : rows)
    if (r.gated && !r.within()) failed += (failed.empty() ? "" : ", ") + r.id;
  if (!failed.empty()) throw GateFailure("parameter counts outside tolerance: " + failed);
  return rows;
}

std::pair<std::string, std::vector<std::string>> parse_grid_axis(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError(fmt::format("sweep axis '{}' must look like section.key=v1,v2", text));
  }
  std::string key = text.substr(0, eq);
  std::vector<std::string> values;
  std::string rest = text.substr(eq + 1);
  std::size_t pos = 0;
  while (pos <= rest.size()) {
    const auto comma = rest.find(',', pos);
    const std::string v = rest.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    if (v.empty()) throw ConfigError(fmt::format("sweep axis '{}' has an empty value", text));
    values.push_back(v);
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return {std::move(key), std::move(values)};
}

namespace {

std::string dotted(const std::string& key) { return key == "seed" ? "experiment.seed" : key; }

std::string dir_component(const std::string& key, const std::string& value) {
  std::string out = key.substr(key.find('.') + 1) + "-";
  for (char c : value) out += (std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '-') ? c : '_';
  return out;
}

}  // namespace

std::vector<SweepRun> cmd_sweep(const ExperimentConfig& cfg, const SweepGrid& grid, const Logger& log) {
  require_training_preset(cfg, "sweep");
  for (const auto& [key, values] : grid) {
    if (values.empty()) throw ConfigError(fmt::format("sweep axis '{}' has no values", key));
    RawConfig probe = cfg.raw;
    set_raw(probe, dotted(key), values.front());
    if (dotted(key) == "experiment.output_dir") throw ConfigError("experiment.output_dir cannot be swept");
  }

  struct Point {
    std::vector<std::pair<std::string, std::string>> overrides;
    ExperimentConfig config;
  };
  std::vector<Point> points;
  std::vector<std::size_t> idx(grid.size(), 0);
  for (;;) {
    Point pt;
    RawConfig raw = cfg.raw;
    std::string name = fmt::format("run_{:03d}", points.size());
    for (std::size_t a = 0; a < grid.size(); ++a) {
      const auto& value = grid[a].second[idx[a]];
      set_raw(raw, dotted(grid[a].first), value);
      pt.overrides.emplace_back(dotted(grid[a].first), value);
      name += "_" + dir_component(dotted(grid[a].first), value);
    }
    const fs::path dir = cfg.output_dir / name;
    raw["experiment"]["output_dir"] = dir.string();
    pt.config = resolve_config(raw);
    points.push_back(std::move(pt));
    std::size_t a = 0;
    while (a < grid.size() && ++idx[a] == grid[a].second.size()) idx[a++] = 0;
    if (a == grid.size()) break;
  }
  for (const auto& pt : points) {
    if (fs::exists(pt.config.output_dir)) {
      throw ConfigError(fmt::format("sweep output '{}' already exists; refusing to overwrite",
                                    pt.config.output_dir.string()));
    }
  }

  std::vector<SweepRun> runs;
  for (const auto& pt : points) {
    const ExperimentConfig& c = pt.config;
    say(log, fmt::format("sweep run {}/{}: {}", runs.size() + 1, points.size(), c.output_dir.string()));
    fs::create_directories(c.output_dir);
    if (!fs::exists(c.checkpoint_path())) {
      try {
        cmd_pretrain(c, log);
      } catch (const GateFailure& e) {
        say(log, fmt::format("warning: {}", e.what()));
      }
    }
    const Lab lab = open_lab(c);
    const ModelSpec spec = c.model_spec();
    const auto rec = train_row(lab, "run", spec, c.output_dir, log);
    SweepRun run;
    run.dir = c.output_dir;
    run.overrides = pt.overrides;
    run.final_fer = rec.train.final_fer;
    run.trainable_params = rec.resources.trainable_params;
    runs.push_back(std::move(run));
  }

  std::string csv = "run";
  for (const auto& [key, values] : grid) csv += "," + dotted(key);
  csv += ",final_fer,trainable_params\n";
  for (const auto& r : runs) {
    csv += r.dir.filename().string();
    for (const auto& [k, v] : r.overrides) csv += "," + csv_field(v);
    csv += fmt::format(",{:.6f},{}\n", r.final_fer, r.trainable_params);
  }
  fs::create_directories(cfg.output_dir);
  write_text(cfg.output_dir / "sweep_summary.csv", csv);
  return runs;
}

}  // namespace hfl
