// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <malloc.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "nsbert/gradients.hpp"
#include "nsbert/pipeline.hpp"
#include "nsbert/rng.hpp"

namespace fs = std::filesystem;
using namespace nsbert;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* pattern, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, pattern, args...);
  return buf;
}

template <class T = double>
Array<T> random_array(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  Array<T> a(std::move(shape));
  for (auto& v : a.data()) v = static_cast<T>(dist(rng));
  return a;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::size_t default_threads() { return std::max(1u, std::thread::hardware_concurrency()); }

// ---------------------------------------------------------------------------
// Criteria 1-5: numerical properties on small inputs.

ModelConfig tiny_model(Variant variant) {
  ModelConfig m;
  m.encoder.seq_len = 8;
  m.encoder.input_features = 6;
  m.encoder.hidden = 8;
  m.encoder.layers = 1;
  m.encoder.heads = 2;
  m.encoder.feedforward = 12;
  m.encoder.projector_hidden = 5;
  m.encoder.dropout = 0.1;
  m.encoder.variant = variant;
  m.classifier.gru_hidden = 4;
  m.classifier.num_classes = 3;
  return m;
}

std::string block_of(const std::string& name) {
  if (name.starts_with("embed.")) return "embedding";
  if (name.find(".attn.") != std::string::npos) return "attention";
  if (name.starts_with("tau.") || name.starts_with("delta.")) return "tau/delta projectors";
  if (name.find(".ffn.") != std::string::npos) return "feedforward";
  if (name.find(".norm") != std::string::npos) return "layer norms";
  if (name.starts_with("decoder.")) return "decoder head";
  if (name.starts_with("gru.")) return "GRU cell";
  if (name.starts_with("cls.")) return "classifier head";
  return "unassigned:" + name;
}

Outcome criterion_gradients() {
  std::map<std::string, double> worst;
  std::size_t checks = 0;
  for (Variant variant : {Variant::non_stationary, Variant::vanilla}) {
    const ModelConfig m = tiny_model(variant);
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      // Every entry redrawn as +-U(0.1, 0.5): magnitudes bounded away from zero keep each
      // gradient above the central-difference noise floor.
      ParamSet<double> params = init_encoder_params<double>(m.encoder, seed);
      for (auto& [name, arr] : init_classifier_params<double>(m, seed + 100)) params[name] = arr;
      for (auto& [name, arr] : params) {
        Rng rng(derive_seed(seed, "draw:" + name));
        std::uniform_real_distribution<double> mag(0.1, 0.5);
        std::bernoulli_distribution sign(0.5);
        for (auto& v : arr.data()) v = sign(rng) ? mag(rng) : -mag(rng);
      }
      const auto x = random_array({2, 8, 6}, derive_seed(seed, "x"), -2.0, 2.0);
      // Random linear readouts of the reconstruction and the class log-probabilities keep the
      // loss O(1), so central-difference roundoff stays well below the tolerance.
      const auto r_recon = random_array({2, 8, 6}, derive_seed(seed, "r_recon"));
      const auto r_class = random_array({2, 3}, derive_seed(seed, "r_class"));
      const bool train = seed % 2 == 1;  // odd seeds run with (fixed) dropout masks
      LossFn<double> fn = [&](Tape<double>& tape, const ParamSet<double>& ps) {
        ParamBinder<double> b(tape, ps);
        const auto enc = encode(b, x, m.encoder, {.train = train, .dropout_seed = seed});
        Var<double> recon = sum(mul(decode(b, enc, m.encoder), tape.constant(r_recon)));
        Var<double> cls = sum(mul(log_softmax(classifier_logits(b, enc.hidden, m)), tape.constant(r_class)));
        return add(recon, cls);
      };
      const auto report = grad_check(fn, params, {.step = 1e-5, .seed = seed});
      for (const auto& [name, err] : report.max_relative_error) {
        double& w = worst[block_of(name)];
        w = std::max(w, err);
      }
      ++checks;
    }
  }
  bool pass = worst.size() == 8;
  std::string detail;
  for (const auto& [block, err] : worst) {
    pass = pass && err < 1e-4 && !block.starts_with("unassigned");
    detail += fmt("%s %.1e; ", block.c_str(), err);
  }
  return {pass, fmt("%zu checks over 8 blocks, worst relative error per block: ", checks) + detail};
}

Outcome criterion_degenerate_identity() {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Tape<double> tape;
    const std::size_t b = 3, s = 12, d = 5;
    Var<double> q = tape.constant(random_array({b, s, d}, derive_seed(seed, "q"), -4.0, 4.0));
    Var<double> k = tape.constant(random_array({b, s, d}, derive_seed(seed, "k"), -4.0, 4.0));
    Var<double> v = tape.constant(random_array({b, s, d}, derive_seed(seed, "v"), -4.0, 4.0));
    const auto ns = destationary_attention(q, k, v, tape.constant(Array<double>({b, 1, 1}, 1.0)),
                                           tape.constant(Array<double>({b, 1, s})))
                        .value();
    worst = std::max(worst, max_abs_diff(ns, scaled_dot_attention(q, k, v).value()));
  }
  return {worst < 1e-12, fmt("100 trials, max abs diff %.2e (limit 1e-12)", worst)};
}

Outcome criterion_oracle() {
  // Raw Q, K = mean + sigma * z with one shared scalar sigma. Normalized attention
  // with tau = sigma^2 and delta[j] = mu_Q . K_j must give the raw attention weights.
  const std::size_t s = 10, d = 4;
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(derive_seed(seed, "oracle"));
    std::uniform_real_distribution<double> mean_dist(-2.0, 2.0), sd_dist(0.3, 1.5);
    const double sigma = sd_dist(rng);
    std::vector<double> mu_q(d), mu_k(d);
    for (auto& m : mu_q) m = mean_dist(rng);
    for (auto& m : mu_k) m = mean_dist(rng);
    const auto zq = random_array({1, s, d}, derive_seed(seed, "zq"), -1.5, 1.5);
    const auto zk = random_array({1, s, d}, derive_seed(seed, "zk"), -1.5, 1.5);
    Array<double> q_raw({1, s, d}), k_raw({1, s, d});
    for (std::size_t i = 0; i < s; ++i) {
      for (std::size_t f = 0; f < d; ++f) {
        q_raw.at(0, i, f) = mu_q[f] + sigma * zq.at(0, i, f);
        k_raw.at(0, i, f) = mu_k[f] + sigma * zk.at(0, i, f);
      }
    }
    Array<double> q_n({1, s, d}), k_n({1, s, d}), delta({1, 1, s});
    for (std::size_t i = 0; i < s; ++i) {
      for (std::size_t f = 0; f < d; ++f) {
        q_n.at(0, i, f) = (q_raw.at(0, i, f) - mu_q[f]) / sigma;
        k_n.at(0, i, f) = (k_raw.at(0, i, f) - mu_k[f]) / sigma;
        delta[i] += mu_q[f] * k_raw.at(0, i, f);
      }
    }
    // Attention weights are read out by attending over V = identity.
    Array<double> eye({1, s, s});
    for (std::size_t i = 0; i < s; ++i) eye.at(0, i, i) = 1.0;
    Tape<double> tape;
    const auto ns = destationary_attention(tape.constant(q_n), tape.constant(k_n), tape.constant(eye),
                                           tape.constant(Array<double>({1, 1, 1}, sigma * sigma)), tape.constant(delta))
                        .value();
    const auto raw = scaled_dot_attention(tape.constant(q_raw), tape.constant(k_raw), tape.constant(eye)).value();
    worst = std::max(worst, max_abs_diff(ns, raw));
  }
  return {worst < 1e-5, fmt("100 seeds, max abs diff %.2e (limit 1e-5)", worst)};
}

Outcome criterion_round_trip() {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    Rng rng(derive_seed(seed, "scale"));
    std::uniform_real_distribution<double> offset(-100.0, 100.0), spread(0.01, 50.0);
    const double o = offset(rng), sp = spread(rng);
    const auto x = random_array({kWindowLength, kFmFeatures}, derive_seed(seed, "window"), o - sp, o + sp);
    const auto st = stationarize(x);
    worst = std::max(worst, max_abs_diff(destationarize(st.values, st.stats), x));
  }
  return {worst < 1e-9, fmt("1000 windows, max abs diff %.2e (limit 1e-9)", worst)};
}

Outcome criterion_fm_exact() {
  std::size_t mismatches = 0;
  bool shape_ok = true;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    Window w;
    w.values = random_array({kWindowLength, kImuChannels}, derive_seed(seed, "imu"), -20.0, 20.0);
    const FeatureWindow f = fm_augment(w);
    shape_ok = shape_ok && f.features() == 15 && f.length() == kWindowLength;
    for (std::size_t i = 0; i < kWindowLength; ++i) {
      for (std::size_t c = 0; c < 6; ++c) mismatches += f.values.at(i, c) != w.values.at(i, c);
      for (std::size_t j = 0; j < 3; ++j) {
        for (std::size_t k = 0; k < 3; ++k) {
          mismatches += f.values.at(i, 6 + 3 * j + k) != w.values.at(i, j) * w.values.at(i, 3 + k);
        }
      }
    }
  }
  return {mismatches == 0 && shape_ok,
          fmt("1000 windows, %zu mismatching entries, feature count %s", mismatches, shape_ok ? "15" : "wrong")};
}

// ---------------------------------------------------------------------------
// Criteria 6-9: training runs at desk scale.

// Small encoder sized for one CPU: the synthetic classes separate without a
// wide or deep model, and 12 arm runs must fit the time budget.
ExperimentConfig desk_config(std::uint64_t seed, const fs::path& out) {
  ExperimentConfig c;
  c.data.synth_classes = 4;
  c.data.synth_per_class = 500;
  c.data.synth_seed = 1;
  c.model.encoder.hidden = 16;
  c.model.encoder.layers = 1;
  c.model.encoder.heads = 2;
  c.model.encoder.feedforward = 32;
  c.model.encoder.projector_hidden = 16;
  c.pretrain.epochs = 100;
  c.pretrain.learning_rate = 3e-3;
  c.pretrain.batch_size = 128;
  c.finetune.epochs = 150;
  c.finetune.learning_rate = 1e-3;
  c.finetune.batch_size = 128;
  c.finetune.gru_hidden = 16;
  c.arms = {"ns+fm", "ns", "vanilla+fm", "vanilla"};
  c.seed = seed;
  c.threads = default_threads();
  c.out = out;
  c.validate();
  return c;
}

Outcome criterion_pretraining(const fs::path& work) {
  ExperimentConfig c = desk_config(1, work / "c6").for_arm(parse_arm("ns+fm"));
  c.pretrain.epochs = 50;
  const auto windows = load_windows(c.data);
  const PreparedData data = prepare_data(windows, c);
  const PhaseResult r = pretrain(data.train, data.val, pretrain_config(c), model_config(c, data));
  const double ratio = r.report.final_train_loss / r.report.initial_train_loss;
  return {ratio <= 0.5, fmt("masked MSE on train %.4f -> %.4f after 50 epochs, ratio %.3f (limit 0.5)",
                            r.report.initial_train_loss, r.report.final_train_loss, ratio)};
}

struct SeedRun {
  std::uint64_t seed = 0;
  std::map<std::string, double> accuracy;
  std::vector<double> ns_fm_val_accuracy;  // pretrained encoder, per epoch
};

std::vector<SeedRun> run_trend_experiments(const fs::path& work) {
  std::vector<SeedRun> runs;
  for (std::uint64_t seed : {1, 2, 3}) {
    const ExperimentConfig c = desk_config(seed, work / ("c7-seed" + std::to_string(seed)));
    const ExperimentResult r = run_experiment(c);
    SeedRun s;
    s.seed = seed;
    for (const auto& arm : r.arms) {
      s.accuracy[arm.arm.name] = *arm.finetune.test_accuracy;
      if (arm.arm.name == "ns+fm") s.ns_fm_val_accuracy = arm.finetune.val_accuracy;
    }
    std::printf("  seed %llu: ns+fm %.4f  ns %.4f  vanilla+fm %.4f  vanilla %.4f\n",
                static_cast<unsigned long long>(seed), s.accuracy["ns+fm"], s.accuracy["ns"], s.accuracy["vanilla+fm"],
                s.accuracy["vanilla"]);
    std::fflush(stdout);
    runs.push_back(std::move(s));
  }
  return runs;
}

Outcome criterion_trend(const std::vector<SeedRun>& runs) {
  std::map<std::string, double> med;
  for (const char* arm : {"ns+fm", "ns", "vanilla+fm", "vanilla"}) {
    std::vector<double> v;
    for (const auto& r : runs) v.push_back(r.accuracy.at(arm));
    med[arm] = median(v);
  }
  const bool a = med["ns+fm"] >= 0.90;
  const bool b = med["ns+fm"] >= med["ns"] - 0.02 && med["vanilla+fm"] >= med["vanilla"] - 0.02;
  const bool c = med["ns"] >= med["vanilla"] - 0.02;
  return {a && b && c, fmt("median test accuracy ns+fm %.4f, ns %.4f, vanilla+fm %.4f, vanilla %.4f; "
                           "(a) %s (b) %s (c) %s",
                           med["ns+fm"], med["ns"], med["vanilla+fm"], med["vanilla"], a ? "ok" : "fail",
                           b ? "ok" : "fail", c ? "ok" : "fail")};
}

// First epoch whose validation accuracy reaches `target`; budget + 1 if none does.
std::size_t epochs_to_reach(const std::vector<double>& val_accuracy, double target) {
  for (std::size_t i = 0; i < val_accuracy.size(); ++i) {
    if (val_accuracy[i] >= target) return i + 1;
  }
  return val_accuracy.size() + 1;
}

Outcome criterion_handoff(const std::vector<SeedRun>& runs) {
  constexpr double kTarget = 0.85;
  std::vector<double> ratios;
  std::string detail;
  for (const auto& run : runs) {
    // Same split, same initial encoder weights, same head seed; only the pretraining is skipped.
    const ExperimentConfig c = desk_config(run.seed, {}).for_arm(parse_arm("ns+fm"));
    const auto windows = load_windows(c.data);
    const PreparedData data = prepare_data(windows, c);
    PretrainConfig none = pretrain_config(c);
    none.epochs = 0;
    PhaseResult random = pretrain(data.train, data.val, none, model_config(c, data));
    random.checkpoint.norm = data.norm;
    const PhaseResult fine = finetune(data.train, data.val, data.test, random.checkpoint, finetune_config(c), data.num_classes);
    const std::size_t pre = epochs_to_reach(run.ns_fm_val_accuracy, kTarget);
    const std::size_t rnd = epochs_to_reach(fine.report.val_accuracy, kTarget);
    ratios.push_back(static_cast<double>(pre) / static_cast<double>(rnd));
    detail += fmt("seed %llu: pretrained %zu vs random %zu epochs; ", static_cast<unsigned long long>(run.seed), pre, rnd);
  }
  const double m = median(ratios);
  return {m <= 0.5, detail + fmt("median ratio %.3f (limit 0.5)", m)};
}

Outcome criterion_determinism(const fs::path& work) {
  auto small = [&](const fs::path& out, std::size_t threads) {
    ExperimentConfig c = desk_config(7, out);
    c.data.synth_per_class = 60;
    c.arms = {"ns+fm", "vanilla"};
    c.pretrain.epochs = 3;
    c.finetune.epochs = 3;
    c.threads = threads;
    return run_experiment(c);
  };
  const fs::path a = work / "c9-a", b = work / "c9-second-run", t = work / "c9-threads";
  small(a, 1);
  small(b, 1);
  small(t, 3);
  std::vector<std::string> problems;
  for (const char* arm : {"ns+fm", "vanilla"}) {
    for (const char* file : {"summary.txt", "curves.csv", "encoder.ckpt", "classifier.ckpt"}) {
      if (read_file(a / arm / file) != read_file(b / arm / file)) problems.push_back(std::string("rerun ") + arm + "/" + file);
      if (read_file(a / arm / file) != read_file(t / arm / file)) problems.push_back(std::string("threads ") + arm + "/" + file);
    }
    for (const char* file : {"encoder.ckpt", "classifier.ckpt"}) {
      const Checkpoint loaded = load_checkpoint(a / arm / file);
      save_checkpoint(loaded, work / "c9-resaved.ckpt");
      if (read_file(work / "c9-resaved.ckpt") != read_file(a / arm / file)) problems.push_back(std::string("resave ") + arm + "/" + file);
    }
    const Checkpoint enc = load_checkpoint(a / arm / "encoder.ckpt");
    const Checkpoint cls = load_checkpoint(a / arm / "classifier.ckpt");
    for (const auto& [name, arr] : enc.params) {
      if (is_encoder_param(name) && !(cls.params.at(name) == arr)) problems.push_back(std::string("frozen ") + arm + ":" + name);
    }
  }
  if (read_file(a / "comparison.csv") != read_file(b / "comparison.csv")) problems.push_back("comparison.csv");
  std::string detail = "rerun, 3-thread run, checkpoint re-save and frozen encoder compared bytewise";
  if (!problems.empty()) {
    detail += "; differences:";
    for (const auto& p : problems) detail += " " + p;
  }
  return {problems.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);

  CLI::App app{"Acceptance criteria 1-9"};
  fs::path work = fs::temp_directory_path() / "nsbert-acceptance";
  std::vector<int> only;
  app.add_option("--work-dir", work, "directory for experiment outputs");
  app.add_option("--only", only, "run just these criteria")->check(CLI::Range(1, 9));
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(work);
  const std::set<int> selected = only.empty() ? std::set<int>{1, 2, 3, 4, 5, 6, 7, 8, 9} : std::set<int>(only.begin(), only.end());

  std::vector<SeedRun> trend_runs;
  const std::map<int, std::function<Outcome()>> criteria = {
      {1, criterion_gradients},
      {2, criterion_degenerate_identity},
      {3, criterion_oracle},
      {4, criterion_round_trip},
      {5, criterion_fm_exact},
      {6, [&] { return criterion_pretraining(work); }},
      {7,
       [&] {
         trend_runs = run_trend_experiments(work);
         return criterion_trend(trend_runs);
       }},
      {8,
       [&] {
         if (trend_runs.empty()) trend_runs = run_trend_experiments(work);
         return criterion_handoff(trend_runs);
       }},
      {9, [&] { return criterion_determinism(work); }},
  };

  int failures = 0;
  for (int id : selected) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria.at(id)();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("criterion %d: %s  %s [%.1f s]\n", id, o.pass ? "PASS" : "FAIL", o.detail.c_str(), secs);
    std::fflush(stdout);
    failures += o.pass ? 0 : 1;
  }
  return failures == 0 ? 0 : 1;
}
