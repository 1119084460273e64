// Acceptance gate: one PASS/FAIL line per criterion, detail lines indented.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "hfl/accounting.hpp"
#include "hfl/adapter.hpp"
#include "hfl/autodiff.hpp"
#include "hfl/config.hpp"
#include "hfl/encoder.hpp"
#include "hfl/experiments.hpp"
#include "hfl/fusion.hpp"
#include "hfl/gradcheck.hpp"
#include "hfl/model.hpp"
#include "hfl/op_counter.hpp"
#include "hfl/ops.hpp"
#include "hfl/paper_reference.hpp"
#include "hfl/trainer.hpp"

using namespace hfl;
namespace fs = std::filesystem;

namespace {

constexpr double kGradTol = 1e-5;
constexpr double kFlopTol = 0.01;
constexpr double kSpeedupMin = 1.5;
constexpr double kDepthSlack = 0.005;
constexpr double kHffSlack = 0.005;
constexpr double kCombinedSlack = 0.01;
constexpr int kPuritySteps = 100;
constexpr int kCostBatch = 16;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void detail(const std::string& text) {
  fmt::print("    {}\n", text);
  std::fflush(stdout);
}

struct Verdict {
  int id;
  std::string name;
  bool pass;
  std::string summary;
};

std::vector<Verdict> verdicts;

void report(int id, const std::string& name, bool pass, const std::string& summary) {
  verdicts.push_back({id, name, pass, summary});
  fmt::print("{} criterion {}: {} ({})\n", pass ? "PASS" : "FAIL", id, name, summary);
  std::fflush(stdout);
}

// ---------------------------------------------------------------- 1

void criterion_counts() {
  const auto t0 = Clock::now();
  bool ok = true;
  std::vector<CountRow> rows;
  try {
    rows = cmd_count_params(std::nullopt);
  } catch (const GateFailure& e) {
    detail(e.what());
    rows = paper_count_rows();
    ok = false;
  }
  const double secs = seconds_since(t0);
  int gated = 0;
  for (const auto& r : rows) {
    detail(fmt::format("{:<22} {:>12} vs {:>6.1f}M  {:+6.2f}%  {}", r.id, r.count, r.paper / 1e6, r.deviation_pct(),
                       r.gated ? (r.within() ? "ok" : "OUT") : "reported"));
    if (r.gated) {
      ++gated;
      ok = ok && r.within();
    }
  }
  ok = ok && secs < 1.0 && gated > 0;
  report(1, "parameter counts at paper scale", ok, fmt::format("{} gated rows, {:.3f} s", gated, secs));
}

// ---------------------------------------------------------------- 2

void perturb(Parameter* p, double stddev, Rng& rng) {
  const Tensor noise = random_normal(p->value().shape(), stddev, rng, DType::f64);
  for (std::int64_t i = 0; i < p->numel(); ++i) p->value().set(i, p->value().at(i) + noise.at(i));
}

GradCheckReport check_block() {
  EncoderConfig cfg = EncoderConfig::desk();
  cfg.model_dim = 16;
  cfg.num_heads = 2;
  cfg.num_layers = 1;
  cfg.conv_kernel = 3;
  cfg.ffn_expansion = 2;
  Encoder e = Encoder::build(cfg, 9, DType::f64);
  Rng rng(10);
  for (Parameter* p : e.params().all())
    if (p->name().ends_with("bias") || p->name().find("norm") != std::string::npos) perturb(p, 0.3, rng);
  const Tensor x = random_normal({6, 16}, 1.0, rng, DType::f64);
  const Tensor r = random_normal({6, 16}, 1.0, rng, DType::f64);
  auto params = e.params().match("encoder/layer_0/**");
  // The key bias has an identically zero gradient.
  std::erase_if(params, [](const Parameter* p) { return p->name().ends_with("attn/key/bias"); });
  return finite_difference_check([&] { return mean(mul(e.run_block(0, x), r)); }, params, 1e-6, 64, 3);
}

GradCheckReport check_adapter() {
  Rng rng(4);
  ParameterStore s;
  make_adapter(s, "adapter", 16, 4, rng, DType::f64);
  const AdapterModule a{Norm{&s.at("adapter/norm/scale"), &s.at("adapter/norm/bias")},
                        Linear{&s.at("adapter/down/weight"), &s.at("adapter/down/bias")},
                        Linear{&s.at("adapter/up/weight"), &s.at("adapter/up/bias")}};
  for (Parameter* p : s.all()) perturb(p, 0.3, rng);
  const Tensor x = random_normal({6, 16}, 1.0, rng, DType::f64);
  const Tensor r = random_normal({6, 16}, 1.0, rng, DType::f64);
  const auto params = s.all();
  return finite_difference_check([&] { return mean(mul(adapter_forward(a, x), r)); }, params, 1e-6, 64, 5);
}

GradCheckReport check_head(const FusionSpec& spec) {
  const int d = 16;
  Rng rng(3);
  FeatureTaps taps;
  const TapSet layers = fusion_taps(spec);
  for (int l : layers.indices()) taps.insert(l, random_normal({5, d}, 1.0, rng, DType::f64));
  FusionHead h = FusionHead::build(spec, d, 5, DType::f64);
  for (Parameter* p : h.params().all())
    if (p->name().ends_with("bias")) perturb(p, 0.2, rng);
  const Tensor r = random_normal({5, h.output_dim()}, 1.0, rng, DType::f64);
  const auto params = h.params().all();
  return finite_difference_check([&] { return mean(mul(h.forward(taps), r)); }, params, 1e-6, 64, 9);
}

void criterion_gradients() {
  const auto t0 = Clock::now();
  const TapSet four({0, 1, 2, 3});
  const std::vector<std::pair<std::string, std::function<GradCheckReport()>>> cases = {
      {"conformer block, dim 16", check_block},
      {"adapter, dim 16, bottleneck 4", check_adapter},
      {"linear fusion, depth 3, 4 taps", [&] { return check_head(LinearFusionSpec{four, 3, 16}); }},
      {"HFF-b, 4 taps", [&] { return check_head(HffSpec{four, HffVariant::balanced, 8, 3, 16}); }},
      {"HFF-ub, 4 taps", [&] { return check_head(HffSpec{four, HffVariant::unbalanced, 8, 3, 16}); }},
  };
  bool ok = true;
  double worst = 0;
  for (const auto& [name, fn] : cases) {
    const auto r = fn();
    detail(fmt::format("{:<32} max rel {:.2e} over {} coords (worst {})", name, r.max_rel_error,
                       r.coordinates_checked, r.worst_parameter));
    ok = ok && r.max_rel_error < kGradTol;
    worst = std::max(worst, r.max_rel_error);
  }
  const double secs = seconds_since(t0);
  ok = ok && secs < 120.0;
  report(2, "float64 gradient suite", ok, fmt::format("worst {:.2e} < {:.0e}, {:.1f} s", worst, kGradTol, secs));
}

// ---------------------------------------------------------------- 3

SynthConfig small_synth() {
  SynthConfig c;
  c.pretrain_size = 16;
  c.train_size = 64;
  c.test_size = 16;
  return c;
}

void criterion_frozen_paths() {
  const auto t0 = Clock::now();
  const SynthConfig sc = small_synth();
  const Dataset train = generate_split(sc, 1, Split::train);
  const Dataset test = generate_split(sc, 1, Split::test);
  const TapSet all = TapSet::all(6);
  const std::vector<FusionSpec> heads = {
      SingleLayerSpec{5},
      SingleLayerSpec{2},
      LinearFusionSpec{TapSet::evenly_spaced(2, 6), 1, 64},
      LinearFusionSpec{all, 1, 64},
      LinearFusionSpec{all, 3, 64},
      default_hff(all, 64, HffVariant::balanced),
      default_hff(all, 64, HffVariant::unbalanced),
  };
  bool ok = true;
  for (const auto& f : heads) {
    ModelSpec spec;
    spec.fusion = f;
    DownstreamModel m = DownstreamModel::build(spec, 2);
    OpCounter c;
    std::size_t encoder_keys = 0;
    {
      CounterGuard g(c);
      for (const auto& [name, _] : backward(m.example_loss(train.front())))
        encoder_keys += name.starts_with("encoder/");
    }
    const auto enc = c.under("encoder");
    std::vector<Tensor> before;
    for (Parameter* p : m.encoder().params().all()) before.push_back(p->value().clone());
    TrainConfig tc;
    tc.steps = kPuritySteps;
    tc.batch_size = 4;
    tc.warmup_steps = 10;
    tc.log_every = 50;
    tc.eval_subset = 4;
    train_downstream(m, train, test, tc);
    std::size_t changed = 0;
    const auto after = m.encoder().params().all();
    for (std::size_t i = 0; i < before.size(); ++i) changed += !after[i]->value().bitwise_equal(before[i]);
    const bool row_ok = encoder_keys == 0 && enc.backward_ops == 0 && changed == 0;
    detail(fmt::format("{:<36} encoder grad keys {}, encoder backward ops {}, changed after {} steps {}",
                       fusion_label(f), encoder_keys, enc.backward_ops, kPuritySteps, changed));
    ok = ok && row_ok;
  }
  {
    ModelSpec spec;
    spec.peft = adapters(top_half(6), 8);
    DownstreamModel m = DownstreamModel::build(spec, 2);
    const int lowest = *m.encoder().lowest_trainable_depth();
    OpCounter c;
    {
      CounterGuard g(c);
      backward(m.example_loss(train.front()));
    }
    std::uint64_t below = c.under("encoder/frontend").backward_ops;
    for (int l = 0; l < lowest; ++l) below += c.under(layer_prefix(l)).backward_ops;
    detail(fmt::format("adapters at top half: lowest trainable depth {}, backward ops below it {}", lowest, below));
    ok = ok && lowest == 3 && below == 0;
  }
  report(3, "frozen-path suite", ok, fmt::format("{} fusion-only heads plus top-half adapters, {:.1f} s", heads.size(),
                                                 seconds_since(t0)));
}

// ---------------------------------------------------------------- 4 and 7

std::map<std::string, ModelSpec> desk_rows(const ExperimentConfig& cfg) {
  std::map<std::string, ModelSpec> out;
  for (const auto& [id, spec] : comparison_specs(cfg)) out.emplace(id, spec);
  return out;
}

void criterion_costs(const ExperimentConfig& cfg) {
  const auto t0 = Clock::now();
  const auto rows = desk_rows(cfg);
  const int seq = cfg.comparison.seq_len;
  const std::vector<std::string> order = {"hff_b", "adapter_subset", "adapter_all", "full"};
  bool ok = true;
  std::uint64_t prev_flops = 0, prev_bytes = 0;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const ModelSpec& spec = rows.at(order[i]);
    const StepCost cost = trace_step_cost(spec, kCostBatch, seq);
    const std::uint64_t flops = cost.ops.backward_flops();
    const std::uint64_t bytes = cost.activation_bytes;
    detail(fmt::format("{:<16} backward flops {:>14}  activation bytes {:>12}  with optimizer state {:>12}", order[i],
                       flops, bytes, estimate_activation_memory(spec, kCostBatch, seq)));
    if (i > 0) ok = ok && flops > prev_flops && bytes > prev_bytes;
    prev_flops = flops;
    prev_bytes = bytes;
  }

  SynthConfig sc = cfg.synth;
  sc.train_size = 4 * cfg.train.batch_size;
  const Dataset data = generate_split(sc, cfg.seed, Split::train);
  std::map<std::string, double> speed;
  for (const std::string id : {"hff_b", "adapter_all", "full"}) {
    DownstreamModel m = DownstreamModel::build(rows.at(id), cfg.seed);
    speed[id] = measure_throughput(m, data, cfg.train, cfg.comparison.throughput_warmup,
                                   cfg.comparison.throughput_steps);
    detail(fmt::format("{:<16} {:.1f} examples/s (batch {})", id, speed[id], cfg.train.batch_size));
  }
  const double ratio = speed["hff_b"] / speed["full"];
  ok = ok && speed["hff_b"] > speed["adapter_all"] && speed["adapter_all"] > speed["full"] && ratio >= kSpeedupMin;
  const double secs = seconds_since(t0);
  ok = ok && secs < 600.0;
  report(4, "cost ordering", ok, fmt::format("HFF-b/full throughput {:.2f}x (>= {:.1f}), {:.1f} s", ratio,
                                             kSpeedupMin, secs));
}

void criterion_flop_crosscheck(const ExperimentConfig& cfg) {
  const int batch = 2, seq = cfg.comparison.seq_len;
  Dataset data;
  Rng rng(3);
  for (int i = 0; i < batch; ++i) {
    Example ex;
    ex.frames = random_normal({seq, cfg.encoder.input_dim}, 1.0, rng);
    ex.labels.assign(static_cast<std::size_t>(seq / cfg.encoder.frontend_subsampling), 1);
    data.push_back(std::move(ex));
  }
  std::vector<const Example*> ptrs;
  for (const auto& ex : data) ptrs.push_back(&ex);
  bool ok = true;
  double worst = 0;
  for (const auto& [id, spec] : comparison_specs(cfg)) {
    const std::uint64_t analytic = count_backward_flops(spec, batch, seq);
    DownstreamModel m = DownstreamModel::build(spec, 1);
    OpCounter live;
    {
      CounterGuard g(live);
      backward(m.batch_loss(ptrs));
    }
    const double rel = std::abs(static_cast<double>(analytic) - static_cast<double>(live.backward_flops())) /
                       std::max(1.0, static_cast<double>(live.backward_flops()));
    detail(fmt::format("{:<22} analytic {:>12} live {:>12} rel {:.2e}", id, analytic, live.backward_flops(), rel));
    ok = ok && rel <= kFlopTol;
    worst = std::max(worst, rel);
  }
  report(7, "analytic vs live backward FLOPs", ok, fmt::format("worst rel diff {:.2e} <= {:.2f}", worst, kFlopTol));
}

// ---------------------------------------------------------------- 5 and 6

struct SeedResult {
  std::map<std::string, double> fer;
  std::vector<std::pair<int, double>> norms;
};

std::map<std::string, double> read_cache(const fs::path& p) {
  std::map<std::string, double> out;
  std::ifstream in(p);
  std::string id;
  double v = 0;
  while (in >> id >> v) out[id] = v;
  return out;
}

SeedResult run_seed(const ExperimentConfig& base, std::uint64_t seed, const fs::path& work, bool reuse) {
  RawConfig raw = base.raw;
  set_raw(raw, "experiment.seed", std::to_string(seed));
  set_raw(raw, "experiment.output_dir", (work / fmt::format("seed_{}", seed)).string());
  const ExperimentConfig cfg = resolve_config(raw);
  fs::create_directories(cfg.output_dir);
  const fs::path cache_path = cfg.output_dir / "fer.txt";
  const fs::path norms_path = cfg.output_dir / "norms.txt";
  SeedResult res;
  if (reuse) res.fer = read_cache(cache_path);

  const auto t0 = Clock::now();
  if (!fs::exists(cfg.checkpoint_path())) {
    try {
      const auto out = cmd_pretrain(cfg);
      detail(fmt::format("seed {} pretrain loss {:.3f} -> {:.3f}", seed, out.result.initial_loss,
                         out.result.final_loss));
    } catch (const GateFailure& e) {
      detail(fmt::format("seed {} pretrain gate: {}", seed, e.what()));
    }
  }
  const Lab lab = open_lab(cfg);

  std::vector<std::pair<std::string, ModelSpec>> specs;
  for (int l = 0; l < cfg.encoder.num_layers; ++l) {
    ModelSpec s = cfg.model_spec();
    s.fusion = SingleLayerSpec{l};
    s.peft = PeftSpec{};
    specs.emplace_back(fmt::format("layer_{}", l), s);
  }
  for (const auto& [id, s] : fusion_table_specs(cfg))
    if (id == "depth_1" || id == "depth_3" || id == "hff_b") specs.emplace_back(id, s);
  for (const auto& [id, s] : comparison_specs(cfg))
    if (id == "full" || id == "fths" || id == "hff_b_adapter_all") specs.emplace_back(id, s);

  for (const auto& [id, spec] : specs) {
    if (res.fer.contains(id) && (id != "depth_1" || fs::exists(norms_path))) continue;
    const auto rt = Clock::now();
    const auto rec = train_row(lab, id, spec, cfg.output_dir / id, {}, [&](const DownstreamModel& m) {
      if (id == "depth_1") res.norms = layer_weight_norms(m.head());
    });
    res.fer[id] = rec.train.final_fer;
    detail(fmt::format("seed {} {:<20} FER {:.4f} ({:.0f} s)", seed, id, rec.train.final_fer, seconds_since(rt)));
    std::ofstream out(cache_path);
    for (const auto& [k, v] : res.fer) out << k << ' ' << fmt::format("{:.17g}", v) << '\n';
    if (id == "depth_1") {
      std::ofstream n(norms_path);
      for (const auto& [l, v] : res.norms) n << l << ' ' << fmt::format("{:.17g}", v) << '\n';
    }
  }
  if (res.norms.empty()) {
    std::ifstream n(norms_path);
    int l = 0;
    double v = 0;
    while (n >> l >> v) res.norms.emplace_back(l, v);
  }
  detail(fmt::format("seed {} done in {:.0f} s", seed, seconds_since(t0)));
  return res;
}

void criterion_trends(const ExperimentConfig& base, const std::vector<std::uint64_t>& seeds, const fs::path& work,
                      bool reuse) {
  const auto t0 = Clock::now();
  std::vector<SeedResult> results;
  for (auto s : seeds) results.push_back(run_seed(base, s, work, reuse));

  struct Trend {
    std::string name;
    std::function<bool(const SeedResult&, std::string&)> check;
  };
  const std::vector<Trend> trends = {
      {"(i) a middle layer beats layers 0 and 5",
       [](const SeedResult& r, std::string& why) {
         const double l0 = r.fer.at("layer_0"), l5 = r.fer.at("layer_5");
         double best = 1e9;
         int at = -1;
         for (int l = 2; l <= 4; ++l) {
           const double v = r.fer.at(fmt::format("layer_{}", l));
           if (v < best) best = v, at = l;
         }
         why = fmt::format("layer {} {:.4f} vs layer 0 {:.4f}, layer 5 {:.4f}", at, best, l0, l5);
         return best < l0 && best < l5;
       }},
      {"(ii) 6-tap linear fusion <= best single tap",
       [](const SeedResult& r, std::string& why) {
         double best = 1e9;
         for (int l = 0; l < 6; ++l) best = std::min(best, r.fer.at(fmt::format("layer_{}", l)));
         why = fmt::format("{:.4f} vs {:.4f}", r.fer.at("depth_1"), best);
         return r.fer.at("depth_1") <= best;
       }},
      {"(iii) depth 3 <= depth 1 + 0.5 pt",
       [](const SeedResult& r, std::string& why) {
         why = fmt::format("{:.4f} vs {:.4f}", r.fer.at("depth_3"), r.fer.at("depth_1"));
         return r.fer.at("depth_3") <= r.fer.at("depth_1") + kDepthSlack;
       }},
      {"(iv) HFF-b <= linear fusion + 0.5 pt",
       [](const SeedResult& r, std::string& why) {
         why = fmt::format("{:.4f} vs {:.4f}", r.fer.at("hff_b"), r.fer.at("depth_1"));
         return r.fer.at("hff_b") <= r.fer.at("depth_1") + kHffSlack;
       }},
      {"(v) HFF-b+adapters <= full + 1 pt, FTHS > HFF-b",
       [](const SeedResult& r, std::string& why) {
         const double comb = r.fer.at("hff_b_adapter_all"), full = r.fer.at("full");
         const double ft = r.fer.at("fths"), hff = r.fer.at("hff_b");
         why = fmt::format("combined {:.4f} vs full {:.4f}; fths {:.4f} vs hff_b {:.4f}", comb, full, ft, hff);
         return comb <= full + kCombinedSlack && ft > hff;
       }},
  };
  bool ok = true;
  int passed_trends = 0;
  for (const auto& t : trends) {
    int votes = 0;
    for (std::size_t i = 0; i < results.size(); ++i) {
      std::string why;
      const bool v = t.check(results[i], why);
      votes += v;
      detail(fmt::format("{} seed {}: {} {}", t.name, seeds[i], v ? "yes" : "no", why));
    }
    const bool majority = 3 * votes >= 2 * static_cast<int>(results.size());
    detail(fmt::format("{}: {}/{} seeds -> {}", t.name, votes, results.size(), majority ? "holds" : "does not hold"));
    ok = ok && majority;
    passed_trends += majority;
  }
  report(5, "trend reproduction, majority of seeds", ok,
         fmt::format("{}/{} trends hold, {:.0f} s", passed_trends, trends.size(), seconds_since(t0)));

  bool norms_ok = true;
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& n = results[i].norms;
    std::string line;
    for (const auto& [l, v] : n) {
      line += fmt::format(" {}:{:.3f}", l, v);
      norms_ok = norms_ok && v >= 0 && std::isfinite(v);
    }
    norms_ok = norms_ok && n.size() == 6;
    detail(fmt::format("seed {} tap weight norms{}; middle minus extremes {:+.4f}", seeds[i], line,
                       middle_minus_extremes(n)));
  }
  report(6, "tap weight norms", norms_ok, "6 non-negative norms per seed; middle-vs-extremes pattern logged only");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hfflab acceptance gate"};
  std::string work = "acceptance_runs";
  bool reuse = false, skip_trends = false;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  app.add_option("--work", work, "Directory for trend runs");
  app.add_flag("--reuse", reuse, "Keep checkpoints and cached FERs from an earlier run in --work");
  app.add_flag("--skip-trends", skip_trends, "Skip criteria 5 and 6");
  app.add_option("--seeds", seeds, "Seeds for the trend runs")->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  const auto t0 = Clock::now();
  if (!reuse) fs::remove_all(work);
  const ExperimentConfig cfg = load_config(std::nullopt, Preset::desk);

  const std::vector<std::pair<int, std::function<void()>>> steps = {
      {1, criterion_counts},
      {2, criterion_gradients},
      {3, criterion_frozen_paths},
      {4, [&] { criterion_costs(cfg); }},
      {7, [&] { criterion_flop_crosscheck(cfg); }},
      {5, [&] {
         if (!skip_trends) criterion_trends(cfg, seeds, work, reuse);
       }},
  };
  for (const auto& [id, fn] : steps) {
    try {
      fn();
    } catch (const std::exception& e) {
      report(id, "criterion raised", false, e.what());
    }
  }

  int failed = 0;
  fmt::print("\nsummary ({:.0f} s)\n", seconds_since(t0));
  std::sort(verdicts.begin(), verdicts.end(), [](const Verdict& a, const Verdict& b) { return a.id < b.id; });
  for (const auto& v : verdicts) {
    fmt::print("{} criterion {}: {}\n", v.pass ? "PASS" : "FAIL", v.id, v.name);
    failed += !v.pass;
  }
  if (skip_trends) fmt::print("SKIP criterion 5 and 6 (--skip-trends)\n");
  return failed == 0 ? 0 : 1;
}
