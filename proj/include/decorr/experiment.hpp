#pragma once

// Config-driven experiment pipelines writing checkpoints, CSV reports, image
// grids and a manifest into one run directory.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <json.hpp>

#include "decorr/corr.hpp"
#include "decorr/harness.hpp"
#include "decorr/training.hpp"

namespace decorr {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

enum class ExperimentKind { pair_distance, pair_decorrelated, dna, dverge, corr_analysis };

inline std::string to_string(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::pair_distance: return "pair-distance";
    case ExperimentKind::pair_decorrelated: return "pair-decorrelated";
    case ExperimentKind::dna: return "dna";
    case ExperimentKind::dverge: return "dverge";
    case ExperimentKind::corr_analysis: return "corr-analysis";
  }
  return "?";
}

inline ExperimentKind parse_kind(const std::string& s) {
  for (auto k : {ExperimentKind::pair_distance, ExperimentKind::pair_decorrelated, ExperimentKind::dna,
                 ExperimentKind::dverge, ExperimentKind::corr_analysis})
    if (to_string(k) == s) return k;
  throw ConfigError("unknown experiment kind '" + s + "'");
}

struct AttackGrid {
  std::vector<AttackMethod> methods{AttackMethod::fgsm};
  std::vector<NormKind> norms{NormKind::linf};
  std::vector<double> epsilons{0.05, 0.1, 0.15, 0.2};
  int steps = 40;
  double alpha = -1;
  std::size_t test_subset = 1000;  // 0 = whole test split

  std::vector<AttackConfig> cells(std::uint64_t seed) const {
    std::vector<AttackConfig> out;
    for (auto m : methods)
      for (auto n : norms)
        for (double e : epsilons) {
          AttackConfig c;
          c.method = m;
          c.norm = n;
          c.epsilon = e;
          c.steps = steps;
          c.alpha = alpha;
          c.seed = seed;
          c.validate();
          out.push_back(c);
        }
    return out;
  }
};

struct ExperimentConfig {
  std::string name = "run";
  ExperimentKind kind = ExperimentKind::pair_decorrelated;
  std::string dataset = "mnist";  // mnist | cifar10 | synthetic-mnist | synthetic-cifar10
  std::string architecture = "fc";  // fc | cnn (pair kinds)
  std::vector<std::uint64_t> seeds{1};
  TrainConfig train;
  std::size_t train_subset = 0;
  AttackGrid attacks;
  std::string output_dir = "runs/run";
  std::string data_dir;  // falls back to DECORR_DATA_DIR

  std::vector<double> distance_targets{1000, 1500, 2000, 2500, 3000};
  int unshared = 2;
  TrainConfig classifier;  // dna kind
  DvergeConfig dverge;
  std::size_t analysis_samples = 2000;
  double image_epsilon = 0.15;  // dna image grid, PGD l-inf
  std::size_t synthetic_per_class = 100;
  std::size_t threads = 1;  // attack cells evaluated concurrently

  DatasetKind dataset_kind() const {
    return dataset == "cifar10" || dataset == "synthetic-cifar10" ? DatasetKind::cifar10 : DatasetKind::mnist;
  }
  bool synthetic() const { return dataset.rfind("synthetic-", 0) == 0; }

  ModelSpec pair_arch() const {
    if (dataset_kind() != DatasetKind::mnist) throw ConfigError("pair experiments are defined for MNIST only");
    if (architecture == "fc") return build_fc_classifier();
    if (architecture == "cnn") return build_cnn_classifier();
    throw ConfigError("unknown architecture '" + architecture + "'");
  }

  void validate() const {
    if (seeds.empty()) throw ConfigError("at least one seed is required");
    if (train.epochs <= 0 || train.batch_size == 0) throw ConfigError("train epochs and batch_size must be positive");
    if (classifier.epochs <= 0 || classifier.batch_size == 0)
      throw ConfigError("classifier epochs and batch_size must be positive");
    if (dataset != "mnist" && dataset != "cifar10" && !synthetic())
      throw ConfigError("unknown dataset '" + dataset + "'");
    if (synthetic() && dataset != "synthetic-mnist" && dataset != "synthetic-cifar10")
      throw ConfigError("unknown dataset '" + dataset + "'");
    if (kind == ExperimentKind::pair_distance && distance_targets.empty())
      throw ConfigError("pair-distance needs distance_targets");
    for (double d : distance_targets)
      if (!(d > 0)) throw ConfigError("distance targets must be positive");
    if (kind == ExperimentKind::dna && dataset_kind() == DatasetKind::mnist && unshared != 2 && unshared != 4 &&
        unshared != 6)
      throw ConfigError("unshared must be 2, 4 or 6");
    if (analysis_samples == 0) throw ConfigError("analysis_samples must be positive");
    if (threads == 0) throw ConfigError("threads must be positive");
    attacks.cells(0);
  }
};

// ---------------------------------------------------------------- JSON

namespace detail {

template <class Fn>
void read_object(const json& j, const std::string& where, Fn&& field) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!field(it.key(), it.value())) throw ConfigError("unknown key '" + it.key() + "' in " + where);
}

template <class T>
T get_as(const json& v, const std::string& key) {
  try {
    return v.get<T>();
  } catch (const json::exception&) {
    throw ConfigError("bad value for '" + key + "'");
  }
}

}  // namespace detail

inline json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs}, {"batch_size", c.batch_size}, {"learning_rate", c.learning_rate}, {"lambda", c.lambda}};
}

inline void from_json_into(const json& j, TrainConfig& c, const std::string& where) {
  detail::read_object(j, where, [&](const std::string& k, const json& v) {
    if (k == "epochs") c.epochs = detail::get_as<int>(v, k);
    else if (k == "batch_size") c.batch_size = detail::get_as<std::size_t>(v, k);
    else if (k == "learning_rate") c.learning_rate = detail::get_as<double>(v, k);
    else if (k == "lambda") c.lambda = detail::get_as<double>(v, k);
    else return false;
    return true;
  });
}

inline json to_json(const ExperimentConfig& c) {
  json methods = json::array(), norms = json::array();
  for (auto m : c.attacks.methods) methods.push_back(to_string(m));
  for (auto n : c.attacks.norms) norms.push_back(to_string(n));
  return {{"name", c.name},
          {"kind", to_string(c.kind)},
          {"dataset", c.dataset},
          {"architecture", c.architecture},
          {"seeds", c.seeds},
          {"train", to_json(c.train)},
          {"train_subset", c.train_subset},
          {"attacks",
           {{"methods", methods},
            {"norms", norms},
            {"epsilons", c.attacks.epsilons},
            {"steps", c.attacks.steps},
            {"alpha", c.attacks.alpha},
            {"test_subset", c.attacks.test_subset}}},
          {"output_dir", c.output_dir},
          {"data_dir", c.data_dir},
          {"distance_targets", c.distance_targets},
          {"unshared", c.unshared},
          {"classifier", to_json(c.classifier)},
          {"dverge",
           {{"epochs", c.dverge.epochs},
            {"eps_d", c.dverge.eps_d},
            {"inner_steps", c.dverge.inner_steps},
            {"step", c.dverge.step},
            {"batch_size", c.dverge.batch_size},
            {"learning_rate", c.dverge.learning_rate}}},
          {"analysis_samples", c.analysis_samples},
          {"image_epsilon", c.image_epsilon},
          {"synthetic_per_class", c.synthetic_per_class},
          {"threads", c.threads}};
}

// Defaults follow the kind: pair-distance trains 10 epochs with lambda 1e-5,
// the decorrelating kinds use lambda 0.05, dna trains 40 epochs.
inline ExperimentConfig defaults_for(ExperimentKind k) {
  ExperimentConfig c;
  c.kind = k;
  c.classifier.epochs = 40;
  switch (k) {
    case ExperimentKind::pair_distance:
      c.train.epochs = 10;
      c.train.lambda = 1e-5;
      break;
    case ExperimentKind::dna:
      c.train.epochs = 40;
      c.train.lambda = 0.05;
      c.attacks.methods = {AttackMethod::pgd};
      c.attacks.epsilons = {0.05, 0.1, 0.15};
      break;
    default:
      c.train.lambda = 0.05;
  }
  return c;
}

inline ExperimentConfig config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
  if (!j.contains("kind")) throw ConfigError("experiment config needs a 'kind'");
  ExperimentConfig c = defaults_for(parse_kind(detail::get_as<std::string>(j.at("kind"), "kind")));
  detail::read_object(j, "config", [&](const std::string& k, const json& v) {
    if (k == "kind") return true;
    if (k == "name") c.name = detail::get_as<std::string>(v, k);
    else if (k == "dataset") c.dataset = detail::get_as<std::string>(v, k);
    else if (k == "architecture") c.architecture = detail::get_as<std::string>(v, k);
    else if (k == "seeds") c.seeds = detail::get_as<std::vector<std::uint64_t>>(v, k);
    else if (k == "train") from_json_into(v, c.train, "train");
    else if (k == "classifier") from_json_into(v, c.classifier, "classifier");
    else if (k == "train_subset") c.train_subset = detail::get_as<std::size_t>(v, k);
    else if (k == "output_dir") c.output_dir = detail::get_as<std::string>(v, k);
    else if (k == "data_dir") c.data_dir = detail::get_as<std::string>(v, k);
    else if (k == "distance_targets") c.distance_targets = detail::get_as<std::vector<double>>(v, k);
    else if (k == "unshared") c.unshared = detail::get_as<int>(v, k);
    else if (k == "analysis_samples") c.analysis_samples = detail::get_as<std::size_t>(v, k);
    else if (k == "image_epsilon") c.image_epsilon = detail::get_as<double>(v, k);
    else if (k == "synthetic_per_class") c.synthetic_per_class = detail::get_as<std::size_t>(v, k);
    else if (k == "threads") c.threads = detail::get_as<std::size_t>(v, k);
    else if (k == "attacks") {
      detail::read_object(v, "attacks", [&](const std::string& ak, const json& av) {
        if (ak == "methods") {
          c.attacks.methods.clear();
          for (const auto& m : detail::get_as<std::vector<std::string>>(av, ak)) c.attacks.methods.push_back(parse_method(m));
        } else if (ak == "norms") {
          c.attacks.norms.clear();
          for (const auto& n : detail::get_as<std::vector<std::string>>(av, ak)) c.attacks.norms.push_back(parse_norm(n));
        } else if (ak == "epsilons") c.attacks.epsilons = detail::get_as<std::vector<double>>(av, ak);
        else if (ak == "steps") c.attacks.steps = detail::get_as<int>(av, ak);
        else if (ak == "alpha") c.attacks.alpha = detail::get_as<double>(av, ak);
        else if (ak == "test_subset") c.attacks.test_subset = detail::get_as<std::size_t>(av, ak);
        else return false;
        return true;
      });
    } else if (k == "dverge") {
      detail::read_object(v, "dverge", [&](const std::string& dk, const json& dv) {
        if (dk == "epochs") c.dverge.epochs = detail::get_as<int>(dv, dk);
        else if (dk == "eps_d") c.dverge.eps_d = detail::get_as<double>(dv, dk);
        else if (dk == "inner_steps") c.dverge.inner_steps = detail::get_as<int>(dv, dk);
        else if (dk == "step") c.dverge.step = detail::get_as<double>(dv, dk);
        else if (dk == "batch_size") c.dverge.batch_size = detail::get_as<std::size_t>(dv, dk);
        else if (dk == "learning_rate") c.dverge.learning_rate = detail::get_as<double>(dv, dk);
        else return false;
        return true;
      });
    } else
      return false;
    return true;
  });
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config '" + path + "'");
  try {
    return config_from_json(json::parse(is));
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("invalid JSON in ") + path + ": " + e.what(), e.byte);
  }
}

// ---------------------------------------------------------------- data

inline std::string resolve_data_dir(const ExperimentConfig& c) {
  if (!c.data_dir.empty()) return c.data_dir;
  if (const char* env = std::getenv("DECORR_DATA_DIR")) return env;
  return "data";
}

inline Dataset load_experiment_data(const ExperimentConfig& c, Split split) {
  const std::size_t dim = c.dataset_kind() == DatasetKind::mnist ? 784 : 3072;
  Dataset ds;
  if (c.synthetic()) {
    // one pool with shared class centres, split 5:1 by a seeded permutation
    const std::size_t per_test = std::max<std::size_t>(c.synthetic_per_class / 5, 10);
    Dataset pool = synth_blobs(c.synthetic_per_class + per_test, 10, dim, 1.0, c.seeds.front() * 7919 + 1, 0.25);
    std::vector<std::size_t> perm(pool.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), std::mt19937_64(c.seeds.front() * 7919 + 2));
    const std::size_t n_train = 10 * c.synthetic_per_class;
    std::vector<std::size_t> pick(split == Split::train ? perm.begin() : perm.begin() + static_cast<std::ptrdiff_t>(n_train),
                                  split == Split::train ? perm.begin() + static_cast<std::ptrdiff_t>(n_train) : perm.end());
    ds = pool.take(pick);
    ds.split = split;
  } else {
    const fs::path root = resolve_data_dir(c);
    const fs::path dir = root / (c.dataset == "mnist" ? "mnist" : "cifar-10-batches-bin");
    if (!fs::is_directory(dir)) throw IoError("dataset directory not found: " + dir.string());
    ds = c.dataset == "mnist" ? load_mnist_dir(dir, split) : load_cifar_dir(dir, split);
  }
  if (split == Split::train && c.train_subset && c.train_subset < ds.size()) ds = ds.subset(c.train_subset);
  if (split == Split::test && c.attacks.test_subset && c.attacks.test_subset < ds.size())
    ds = ds.subset(c.attacks.test_subset);
  return ds;
}

// ------------------------------------------------------------ run context

inline std::uint64_t fnv1a_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw IoError("cannot read " + p.string());
  std::uint64_t h = 1469598103934665603ull;
  char buf[1 << 14];
  while (is) {
    is.read(buf, sizeof buf);
    for (std::streamsize i = 0; i < is.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ull;
    }
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

struct StageRecord {
  std::string name;
  double seconds = 0;
  std::vector<std::string> files;
};

class RunContext {
 public:
  explicit RunContext(ExperimentConfig cfg) : cfg_(std::move(cfg)), dir_(cfg_.output_dir) {
    fs::create_directories(dir_);
  }

  const ExperimentConfig& config() const { return cfg_; }
  const fs::path& dir() const { return dir_; }
  std::vector<ReportRow>& rows() { return rows_; }

  std::string path(const std::string& file) const { return (dir_ / file).string(); }

  // Runs one named stage, recording its wall time and output files. Failures
  // persist the manifest and rethrow with the stage name attached.
  template <class Fn>
  void stage(const std::string& name, Fn&& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    current_ = {name, 0, {}};
    try {
      fn();
    } catch (const std::exception& e) {
      current_.seconds = detail::seconds_since(t0);
      stages_.push_back(current_);
      failed_ = name + ": " + e.what();
      write_manifest();
      throw Error("stage '" + name + "' failed: " + e.what());
    }
    current_.seconds = detail::seconds_since(t0);
    stages_.push_back(current_);
  }

  void produced(const std::string& file) { current_.files.push_back(file); }

  void add(ReportRow r) { rows_.push_back(std::move(r)); }

  void write_report() {
    export_report(path("report.csv"), rows_);
  }

  void write_manifest() const {
    json stages = json::array();
    json checksums = json::object();
    for (const auto& s : stages_) {
      json files = json::array();
      for (const auto& f : s.files) {
        files.push_back(f);
        if (fs::exists(dir_ / f)) checksums[f] = hex64(fnv1a_file(dir_ / f));
      }
      stages.push_back({{"name", s.name}, {"seconds", s.seconds}, {"files", files}});
    }
    if (fs::exists(dir_ / "report.csv")) checksums["report.csv"] = hex64(fnv1a_file(dir_ / "report.csv"));
    json m = {{"config", to_json(cfg_)},
              {"seeds", cfg_.seeds},
              {"stages", stages},
              {"checksums", checksums},
              {"status", failed_.empty() ? "ok" : "failed"}};
    if (!failed_.empty()) m["error"] = failed_;
    std::ofstream os(dir_ / "manifest.json", std::ios::trunc);
    if (!os) throw IoError("cannot write manifest in " + dir_.string());
    os << m.dump(2) << '\n';
  }

 private:
  ExperimentConfig cfg_;
  fs::path dir_;
  std::vector<ReportRow> rows_;
  std::vector<StageRecord> stages_;
  StageRecord current_;
  std::string failed_;
};

// ------------------------------------------------------------ pipelines

namespace detail {

struct TestSet {
  Tensor<float> x;
  std::vector<int> y;
};

inline TestSet test_tensors(const Dataset& ds) {
  std::vector<std::size_t> idx(ds.size());
  std::iota(idx.begin(), idx.end(), 0);
  return {ds.images<float>(idx), ds.labels};
}

inline void save_logs(RunContext& run, const std::string& file, const std::vector<EpochLog>& logs) {
  write_epoch_log(run.path(file), logs);
  run.produced(file);
}

inline void save_params(RunContext& run, const std::string& file, const ParamSet<float>& p, const std::string& desc) {
  save_checkpoint(run.path(file), p, desc);
  run.produced(file);
}

inline void accuracy_rows(RunContext& run, const std::string& exp, std::uint64_t seed, double acc_a, double acc_b) {
  run.add({exp, seed, 0, "none", "none", "natural_accuracy_a", acc_a});
  run.add({exp, seed, 0, "none", "none", "natural_accuracy_b", acc_b});
  run.add({exp, seed, 0, "none", "none", "natural_accuracy", (acc_a + acc_b) / 2});
}

inline void transfer_rows(RunContext& run, const std::string& exp, std::uint64_t seed, PairState<float>& st,
                          const TestSet& test) {
  const auto cells = run.config().attacks.cells(seed);
  std::vector<std::optional<double>> rates(cells.size());
  parallel_for(cells.size(), run.config().threads, [&](std::size_t i) {
    auto a = st.a.clone(), b = st.b.clone();
    rates[i] = pair_transfer(a, b, test.x, test.y, cells[i], exp).mean();
  });
  for (std::size_t i = 0; i < cells.size(); ++i)
    run.add({exp, seed, cells[i].epsilon, to_string(cells[i].norm), to_string(cells[i].method), "transfer_rate",
             rates[i]});
}

// Tagged features of both models on the first n test samples.
inline std::pair<FeatureBatch, FeatureBatch> pair_features(PairState<float>& st, const Dataset& test, std::size_t n) {
  n = std::min(n, test.size());
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  auto x = test.images<float>(idx);
  NoGradScope ng;
  return {FeatureBatch::from(st.a.with_features(x, BnMode::eval).features),
          FeatureBatch::from(st.b.with_features(x, BnMode::eval).features)};
}

inline PairState<float> train_pair_kind(RunContext& run, const Dataset& train, std::uint64_t seed, bool decorrelate,
                                        const std::string& tag) {
  TrainConfig tc = run.config().train;
  tc.seed = seed;
  auto st = train_pair_decorrelated<float>(run.config().pair_arch(), train, tc, decorrelate);
  save_logs(run, tag + "_log.csv", st.logs);
  save_params(run, tag + "_a.ckpt", st.a.params, st.a.spec.describe());
  save_params(run, tag + "_b.ckpt", st.b.params, st.b.spec.describe());
  return st;
}

inline void run_pair_distance(RunContext& run) {
  const auto& cfg = run.config();
  Dataset train, test;
  run.stage("load", [&] {
    train = load_experiment_data(cfg, Split::train);
    test = load_experiment_data(cfg, Split::test);
  });
  const auto t = test_tensors(test);
  for (auto seed : cfg.seeds)
    for (double dt : cfg.distance_targets) {
      const std::string tag = "dt" + format_number(dt) + "_seed" + std::to_string(seed);
      const std::string exp = cfg.name + "/dt=" + format_number(dt);
      run.stage("train " + tag, [&] {
        TrainConfig tc = cfg.train;
        tc.seed = seed;
        auto st = train_pair_distance<float>(cfg.pair_arch(), dt, train, tc);
        save_logs(run, tag + "_log.csv", st.logs);
        run.add({exp, seed, 0, "none", "none", "param_distance", param_distance(st.a.params, st.b.params)});
        accuracy_rows(run, exp, seed, natural_accuracy(st.a, test), natural_accuracy(st.b, test));
        transfer_rows(run, exp, seed, st, t);
      });
    }
}

inline void run_pair_decorrelated(RunContext& run) {
  const auto& cfg = run.config();
  Dataset train, test;
  run.stage("load", [&] {
    train = load_experiment_data(cfg, Split::train);
    test = load_experiment_data(cfg, Split::test);
  });
  const auto t = test_tensors(test);
  for (auto seed : cfg.seeds)
    for (bool dec : {false, true}) {
      const std::string type = dec ? "decorrelated" : "baseline";
      const std::string tag = type + "_seed" + std::to_string(seed);
      const std::string exp = cfg.name + "/" + type;
      run.stage("train " + tag, [&] {
        auto st = train_pair_kind(run, train, seed, dec, tag);
        accuracy_rows(run, exp, seed, natural_accuracy(st.a, test), natural_accuracy(st.b, test));
        auto [fa, fb] = pair_features(st, test, cfg.analysis_samples);
        run.add({exp, seed, 0, "none", "none", "r_squared", r_squared(fa, fb).r_squared});
        transfer_rows(run, exp, seed, st, t);
      });
    }
}

inline void run_dverge(RunContext& run) {
  const auto& cfg = run.config();
  Dataset train, test;
  run.stage("load", [&] {
    train = load_experiment_data(cfg, Split::train);
    test = load_experiment_data(cfg, Split::test);
  });
  const auto t = test_tensors(test);
  for (auto seed : cfg.seeds)
    for (bool dec : {false, true}) {
      const std::string type = dec ? "dec" : "regular";
      const std::string tag = "dverge_" + type + "_seed" + std::to_string(seed);
      const std::string exp = cfg.name + "/" + type;
      run.stage("train " + tag, [&] {
        auto st = train_pair_kind(run, train, seed, dec, tag + "_init");
        DvergeConfig dc = cfg.dverge;
        dc.seed = seed;
        dverge_finetune(st, train, dc);
        save_logs(run, tag + "_log.csv", st.logs);
        accuracy_rows(run, exp, seed, natural_accuracy(st.a, test), natural_accuracy(st.b, test));
        transfer_rows(run, exp, seed, st, t);
      });
    }
}

inline void run_corr_analysis(RunContext& run) {
  const auto& cfg = run.config();
  Dataset train, test;
  run.stage("load", [&] {
    train = load_experiment_data(cfg, Split::train);
    test = load_experiment_data(cfg, Split::test);
  });
  for (auto seed : cfg.seeds)
    for (bool dec : {false, true}) {
      const std::string type = dec ? "decorrelated" : "baseline";
      const std::string tag = type + "_seed" + std::to_string(seed);
      const std::string exp = cfg.name + "/" + type;
      run.stage("analyze " + tag, [&] {
        auto st = train_pair_kind(run, train, seed, dec, tag);
        auto [fa, fb] = pair_features(st, test, cfg.analysis_samples);
        const auto pa = pca_project_1d(fa), pb = pca_project_1d(fb);
        const std::size_t n = pa.size();
        std::vector<double> both(2 * n);
        std::ofstream os(run.path(tag + "_pca.csv"));
        os << "sample,label,pc1_a,pc1_b\n";
        for (std::size_t i = 0; i < n; ++i) {
          both[2 * i] = pa[i];
          both[2 * i + 1] = pb[i];
          os << i << ',' << test.labels[i] << ',' << format_number(pa[i]) << ',' << format_number(pb[i]) << '\n';
        }
        os.close();
        run.produced(tag + "_pca.csv");
        save_fmat(run.path(tag + "_pca.fmat"), Tensor<double>({n, 2}, both));
        run.produced(tag + "_pca.fmat");
        const auto pc = r_squared(FeatureBatch(Tensor<double>({n, 1}, pa)), FeatureBatch(Tensor<double>({n, 1}, pb)));
        run.add({exp, seed, 0, "none", "none", "r_squared", r_squared(fa, fb).r_squared});
        run.add({exp, seed, 0, "none", "none", "pc1_r_squared", pc.r_squared});
        run.add({exp, seed, 0, "none", "none", "pearson", pearson_features(fa, fb)});
        accuracy_rows(run, exp, seed, natural_accuracy(st.a, test), natural_accuracy(st.b, test));
      });
    }
}

// Natural / perturbed / incorrect reconstruction / correct reconstruction for
// up to five samples where exactly one pathway is classified correctly.
inline void dna_image_grid(RunContext& run, DnaModel<float>& dna, Network<float>& clf, const AdvBatch<float>& adv,
                           const std::string& file) {
  auto [pa, pb] = dna_predictions(dna, clf, adv.perturbed);
  const Shape img = dna.spec.image_shape;
  std::vector<std::vector<Tensor<float>>> rows(4);
  for (std::size_t i = 0; i < pa.size() && rows[0].size() < 5; ++i) {
    const bool ca = pa[i] == adv.labels[i], cb = pb[i] == adv.labels[i];
    if (ca == cb) continue;
    auto xi = sample_of(adv.perturbed, i, img);
    Shape batched{1};
    batched.insert(batched.end(), img.begin(), img.end());
    Tensor<float> xb = reshape(xi, batched);
    NoGradScope ng;
    auto ra = dna.pathway(xb, 0), rb = dna.pathway(xb, 1);
    rows[0].push_back(sample_of(adv.originals, i, img));
    rows[1].push_back(xi);
    rows[2].push_back(sample_of(ca ? rb : ra, 0, img));
    rows[3].push_back(sample_of(ca ? ra : rb, 0, img));
  }
  if (rows[0].empty()) rows.clear();
  if (export_image_grid(rows, run.path(file))) run.produced(file);
}

inline void run_dna(RunContext& run) {
  const auto& cfg = run.config();
  Dataset train, test;
  run.stage("load", [&] {
    train = load_experiment_data(cfg, Split::train);
    test = load_experiment_data(cfg, Split::test);
  });
  const auto t = test_tensors(test);
  const auto kind = cfg.dataset_kind();
  for (auto seed : cfg.seeds) {
    const std::string s = "_seed" + std::to_string(seed);
    auto dna = DnaModel<float>::create(build_dna(kind, cfg.unshared), mix_seed(seed, 11));
    auto ae = Network<float>::create(build_autoencoder_baseline(kind), mix_seed(seed, 12));
    auto clf_dna = Network<float>::create(build_eval_classifiers(kind), mix_seed(seed, 13));
    auto clf_ae = Network<float>::create(build_eval_classifiers(kind), mix_seed(seed, 14));
    TrainConfig tc = cfg.train, cc = cfg.classifier;
    tc.seed = cc.seed = seed;
    run.stage("train dna" + s, [&] {
      save_logs(run, "dna" + s + "_log.csv", train_dna(dna, train, tc));
      save_params(run, "dna" + s + ".ckpt", dna.params, dna.spec.describe());
    });
    run.stage("train autoencoder" + s, [&] {
      TrainConfig ac = tc;
      ac.lambda = 0;
      save_logs(run, "ae" + s + "_log.csv", train_autoencoder(ae, train, ac));
      save_params(run, "ae" + s + ".ckpt", ae.params, ae.spec.describe());
    });
    run.stage("train classifiers" + s, [&] {
      save_logs(run, "clf_dna" + s + "_log.csv", train_classifier(clf_dna, train, cc, dna_outputs(dna)));
      save_logs(run, "clf_ae" + s + "_log.csv",
                train_classifier(clf_ae, train, cc, ae_outputs(ae, clf_ae.spec.input)));
      save_params(run, "clf_dna" + s + ".ckpt", clf_dna.params, clf_dna.spec.describe());
      save_params(run, "clf_ae" + s + ".ckpt", clf_ae.params, clf_ae.spec.describe());
    });
    run.stage("attack" + s, [&] {
      const std::string dexp = cfg.name + "/dna", aexp = cfg.name + "/ae";
      const auto nat = either_path_accuracy(dna, clf_dna, t.x, t.y);
      run.add({dexp, seed, 0, "none", "none", "either_accuracy", nat.either});
      run.add({dexp, seed, 0, "none", "none", "avg_accuracy", nat.avg});
      run.add({aexp, seed, 0, "none", "none", "accuracy", autoencoder_accuracy(ae, clf_ae, t.x, t.y, dna.spec.image_shape)});
      bool grid_done = false;
      for (const auto& cell : cfg.attacks.cells(seed)) {
        auto adv = attack_chunked(dna_joint_objective(dna, clf_dna), t.x, t.y, cell);
        const auto ep = either_path_accuracy(dna, clf_dna, adv.perturbed, t.y);
        const std::string n = to_string(cell.norm), m = to_string(cell.method);
        run.add({dexp, seed, cell.epsilon, n, m, "either_accuracy", ep.either});
        run.add({dexp, seed, cell.epsilon, n, m, "avg_accuracy", ep.avg});
        auto adv_ae = attack_chunked(ae_objective(ae, clf_ae, dna.spec.image_shape), t.x, t.y, cell);
        run.add({aexp, seed, cell.epsilon, n, m, "accuracy",
                 autoencoder_accuracy(ae, clf_ae, adv_ae.perturbed, t.y, dna.spec.image_shape)});
        if (!grid_done && cell.method == AttackMethod::pgd && cell.norm == NormKind::linf &&
            std::abs(cell.epsilon - cfg.image_epsilon) < 1e-12) {
          dna_image_grid(run, dna, clf_dna, adv, "dna_grid" + s + (kind == DatasetKind::mnist ? ".pgm" : ".ppm"));
          grid_done = true;
        }
      }
    });
  }
}

}  // namespace detail

// Executes the whole pipeline for the configured kind; returns the run directory.
inline fs::path run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  if (!cfg.synthetic()) {
    const fs::path root = resolve_data_dir(cfg);
    if (!fs::is_directory(root)) throw IoError("data directory not found: " + root.string());
  }
  RunContext run(cfg);
  {
    std::ofstream os(run.path("config.json"), std::ios::trunc);
    os << to_json(cfg).dump(2) << '\n';
  }
  switch (cfg.kind) {
    case ExperimentKind::pair_distance: detail::run_pair_distance(run); break;
    case ExperimentKind::pair_decorrelated: detail::run_pair_decorrelated(run); break;
    case ExperimentKind::dna: detail::run_dna(run); break;
    case ExperimentKind::dverge: detail::run_dverge(run); break;
    case ExperimentKind::corr_analysis: detail::run_corr_analysis(run); break;
  }
  run.stage("report", [&] { run.write_report(); });
  run.write_manifest();
  return run.dir();
}

}  // namespace decorr
