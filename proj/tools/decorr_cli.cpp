// Command-line front end for training, attacking and evaluating model pairs
// and dual-neck autoencoders.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <map>

#include "decorr/experiment.hpp"

using namespace decorr;
namespace fs = std::filesystem;

namespace {

struct Globals {
  std::string config_path;
  std::uint64_t seed = 1;
  std::string out;
  std::size_t threads = 1;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* out_opt = nullptr;
  CLI::Option* threads_opt = nullptr;
};

// Config from --config (or the defaults of `kind`), with global overrides.
ExperimentConfig base_config(const Globals& g, ExperimentKind kind) {
  ExperimentConfig c = g.config_path.empty() ? defaults_for(kind) : load_config(g.config_path);
  if (*g.seed_opt) c.seeds = {g.seed};
  if (*g.out_opt) c.output_dir = g.out;
  if (*g.threads_opt) c.threads = g.threads;
  c.validate();
  fs::create_directories(c.output_dir);
  return c;
}

std::string out_path(const ExperimentConfig& c, const std::string& file) { return (fs::path(c.output_dir) / file).string(); }

ModelSpec arch_spec(const std::string& arch, DatasetKind d) {
  if (arch == "fc") return build_fc_classifier();
  if (arch == "cnn") return build_cnn_classifier();
  if (arch == "eval") return build_eval_classifiers(d);
  if (arch == "ae") return build_autoencoder_baseline(d);
  throw ConfigError("unknown architecture '" + arch + "' (fc, cnn, eval, ae)");
}

Network<float> load_network(const std::string& path, const ModelSpec& spec) {
  std::string desc;
  auto p = load_checkpoint<float>(path, &desc);
  if (desc != spec.describe())
    throw ConfigError("checkpoint " + path + " holds '" + desc + "', expected '" + spec.describe() + "'");
  return {spec, std::move(p)};
}

DnaModel<float> load_dna(const std::string& path, const DnaSpec& spec) {
  std::string desc;
  auto p = load_checkpoint<float>(path, &desc);
  if (desc != spec.describe())
    throw ConfigError("checkpoint " + path + " holds '" + desc + "', expected '" + spec.describe() + "'");
  return {spec, std::move(p)};
}

detail::TestSet test_set(const ExperimentConfig& c) { return detail::test_tensors(load_experiment_data(c, Split::test)); }

void print_rows(const std::vector<ReportRow>& rows) {
  std::cout << kReportHeader << '\n';
  for (const auto& r : rows) std::cout << report_line(r) << '\n';
}

void save_report(const ExperimentConfig& c, const std::vector<ReportRow>& rows) {
  export_report(out_path(c, "report.csv"), rows);
  print_rows(rows);
}

void print_log(const std::vector<EpochLog>& logs) {
  std::cerr << epoch_log_header() << '\n';
  for (const auto& e : logs) std::cerr << epoch_log_row(e) << '\n';
}

// Mean over seeds of every (experiment, epsilon, norm, method, metric) cell.
void summarize(const std::vector<ReportRow>& rows) {
  struct Acc {
    double sum = 0;
    std::size_t n = 0, undefined = 0;
  };
  std::map<std::tuple<std::string, std::string, std::string, double, std::string>, Acc> cells;
  for (const auto& r : rows) {
    auto& a = cells[{r.experiment, r.method, r.norm, r.epsilon, r.metric}];
    if (r.value) {
      a.sum += *r.value;
      ++a.n;
    } else {
      ++a.undefined;
    }
  }
  std::cout << "experiment,method,norm,epsilon,metric,mean,seeds,undefined\n";
  for (const auto& [k, a] : cells) {
    const auto& [exp, method, norm, eps, metric] = k;
    std::cout << exp << ',' << method << ',' << norm << ',' << format_number(eps) << ',' << metric << ','
              << (a.n ? format_number(a.sum / static_cast<double>(a.n)) : std::string(kUndefinedToken)) << ','
              << a.n << ',' << a.undefined << '\n';
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Decorrelated-feature model pairs, dual-neck autoencoders and transferability experiments"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config_path, "Experiment config (JSON)")->check(CLI::ExistingFile);
  g.seed_opt = app.add_option("--seed", g.seed, "Seed (replaces the config's seed list)");
  g.out_opt = app.add_option("--out", g.out, "Output directory");
  g.threads_opt = app.add_option("--threads", g.threads, "Worker threads for attack cells")->check(CLI::PositiveNumber);

  // train-pair
  auto* tp = app.add_subcommand("train-pair", "Train a classifier pair (baseline, decorrelated or distance-controlled)");
  std::string tp_mode = "decorrelated", tp_arch;
  double tp_distance = 2000;
  tp->add_option("--mode", tp_mode, "baseline | decorrelated | distance")
      ->check(CLI::IsMember({"baseline", "decorrelated", "distance"}));
  auto* tp_arch_opt = tp->add_option("--arch", tp_arch, "fc | cnn");
  tp->add_option("--distance", tp_distance, "Target squared parameter distance (distance mode)");

  // train-dna
  auto* td = app.add_subcommand("train-dna", "Train a dual-neck autoencoder or the single-pathway baseline");
  int td_unshared = 0;
  bool td_baseline = false;
  auto* td_unshared_opt = td->add_option("--unshared", td_unshared, "Unshared layers per pathway (2, 4, 6)");
  td->add_flag("--baseline-ae", td_baseline, "Train the single-bottleneck autoencoder instead");

  // train-classifier
  auto* tc = app.add_subcommand("train-classifier", "Train an evaluation classifier on raw or reconstructed images");
  std::string tc_source = "raw", tc_model;
  tc->add_option("--source", tc_source, "raw | dna | ae")->check(CLI::IsMember({"raw", "dna", "ae"}));
  tc->add_option("--model", tc_model, "DNA or autoencoder checkpoint for non-raw sources");

  // attack
  auto* at = app.add_subcommand("attack", "Craft adversarial examples against a classifier or a DNA");
  std::string at_model, at_arch = "fc", at_dna, at_method = "fgsm", at_norm = "linf";
  double at_eps = 0.1;
  int at_steps = 40;
  at->add_option("--model", at_model, "Classifier checkpoint")->required();
  at->add_option("--arch", at_arch, "Classifier architecture: fc | cnn | eval");
  at->add_option("--dna", at_dna, "DNA checkpoint; attacks the joint objective through it");
  at->add_option("--method", at_method)->check(CLI::IsMember({"fgsm", "pgd"}));
  at->add_option("--norm", at_norm)->check(CLI::IsMember({"linf", "l2"}));
  at->add_option("--eps", at_eps, "Per-pixel budget")->check(CLI::NonNegativeNumber);
  at->add_option("--steps", at_steps, "PGD iterations")->check(CLI::PositiveNumber);

  // eval-transfer
  auto* et = app.add_subcommand("eval-transfer", "Transfer rates between two trained classifiers over the attack grid");
  std::string et_a, et_b, et_arch = "fc";
  et->add_option("--model-a", et_a)->required();
  et->add_option("--model-b", et_b)->required();
  et->add_option("--arch", et_arch, "fc | cnn | eval");

  // dverge
  auto* dv = app.add_subcommand("dverge", "Fine-tune a trained pair with distilled-feature cross training");
  std::string dv_a, dv_b, dv_arch = "fc";
  dv->add_option("--model-a", dv_a)->required();
  dv->add_option("--model-b", dv_b)->required();
  dv->add_option("--arch", dv_arch, "fc | cnn");

  // analyze-corr
  auto* ac = app.add_subcommand("analyze-corr", "Feature correlation and PCA projections of a trained pair");
  std::string ac_a, ac_b, ac_arch = "fc";
  ac->add_option("--model-a", ac_a)->required();
  ac->add_option("--model-b", ac_b)->required();
  ac->add_option("--arch", ac_arch, "fc | cnn");

  // report
  auto* rp = app.add_subcommand("report", "Run the configured experiment end to end, or summarize a report CSV");
  std::string rp_input;
  rp->add_option("--input", rp_input, "Existing report.csv to summarize")->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*tp) {
      auto kind = tp_mode == "distance" ? ExperimentKind::pair_distance : ExperimentKind::pair_decorrelated;
      auto c = base_config(g, kind);
      if (*tp_arch_opt) c.architecture = tp_arch;
      auto train = load_experiment_data(c, Split::train);
      auto test = load_experiment_data(c, Split::test);
      TrainConfig cfg = c.train;
      cfg.seed = c.seeds.front();
      PairState<float> st = tp_mode == "distance"
                                ? train_pair_distance<float>(c.pair_arch(), tp_distance, train, cfg, &test)
                                : train_pair_decorrelated<float>(c.pair_arch(), train, cfg, tp_mode == "decorrelated", &test);
      print_log(st.logs);
      write_epoch_log(out_path(c, "pair_log.csv"), st.logs);
      save_checkpoint(out_path(c, "pair_a.ckpt"), st.a.params, st.a.spec.describe());
      save_checkpoint(out_path(c, "pair_b.ckpt"), st.b.params, st.b.spec.describe());
      const std::uint64_t s = c.seeds.front();
      std::vector<ReportRow> rows{
          {tp_mode, s, 0, "none", "none", "natural_accuracy_a", natural_accuracy(st.a, test)},
          {tp_mode, s, 0, "none", "none", "natural_accuracy_b", natural_accuracy(st.b, test)},
          {tp_mode, s, 0, "none", "none", "param_distance", param_distance(st.a.params, st.b.params)}};
      auto [fa, fb] = detail::pair_features(st, test, c.analysis_samples);
      rows.push_back({tp_mode, s, 0, "none", "none", "r_squared", r_squared(fa, fb).r_squared});
      save_report(c, rows);
    } else if (*td) {
      auto c = base_config(g, ExperimentKind::dna);
      if (*td_unshared_opt) c.unshared = td_unshared;
      c.validate();
      auto train = load_experiment_data(c, Split::train);
      TrainConfig cfg = c.train;
      cfg.seed = c.seeds.front();
      const auto kind = c.dataset_kind();
      if (td_baseline) {
        auto ae = Network<float>::create(build_autoencoder_baseline(kind), detail::mix_seed(cfg.seed, 12));
        cfg.lambda = 0;
        auto logs = train_autoencoder(ae, train, cfg);
        print_log(logs);
        write_epoch_log(out_path(c, "ae_log.csv"), logs);
        save_checkpoint(out_path(c, "ae.ckpt"), ae.params, ae.spec.describe());
      } else {
        auto dna = DnaModel<float>::create(build_dna(kind, c.unshared), detail::mix_seed(cfg.seed, 11));
        auto logs = train_dna(dna, train, cfg);
        print_log(logs);
        write_epoch_log(out_path(c, "dna_log.csv"), logs);
        save_checkpoint(out_path(c, "dna.ckpt"), dna.params, dna.spec.describe());
      }
    } else if (*tc) {
      auto c = base_config(g, ExperimentKind::dna);
      const auto kind = c.dataset_kind();
      auto train = load_experiment_data(c, Split::train);
      auto test = load_experiment_data(c, Split::test);
      TrainConfig cfg = c.classifier;
      cfg.seed = c.seeds.front();
      auto clf = Network<float>::create(build_eval_classifiers(kind), detail::mix_seed(cfg.seed, 13));
      if (tc_source != "raw" && tc_model.empty()) throw ConfigError("--source " + tc_source + " needs --model");
      std::vector<EpochLog> logs;
      double acc = 0;
      const auto t = detail::test_tensors(test);
      if (tc_source == "dna") {
        auto dna = load_dna(tc_model, build_dna(kind, c.unshared));
        logs = train_classifier(clf, train, cfg, dna_outputs(dna));
        acc = either_path_accuracy(dna, clf, t.x, t.y).avg;
      } else if (tc_source == "ae") {
        auto ae = load_network(tc_model, build_autoencoder_baseline(kind));
        logs = train_classifier(clf, train, cfg, ae_outputs(ae, clf.spec.input));
        acc = autoencoder_accuracy(ae, clf, t.x, t.y, clf.spec.input);
      } else {
        logs = train_classifier(clf, train, cfg, {}, &test);
        acc = natural_accuracy(clf, test);
      }
      print_log(logs);
      write_epoch_log(out_path(c, "classifier_log.csv"), logs);
      save_checkpoint(out_path(c, "classifier.ckpt"), clf.params, clf.spec.describe());
      save_report(c, {{"classifier-" + tc_source, cfg.seed, 0, "none", "none", "natural_accuracy", acc}});
    } else if (*at) {
      auto c = base_config(g, ExperimentKind::pair_decorrelated);
      const auto kind = c.dataset_kind();
      auto net = load_network(at_model, arch_spec(at_arch, kind));
      const auto t = test_set(c);
      AttackConfig ac;
      ac.method = parse_method(at_method);
      ac.norm = parse_norm(at_norm);
      ac.epsilon = at_eps;
      ac.steps = at_steps;
      ac.seed = c.seeds.front();
      ac.validate();
      std::vector<ReportRow> rows;
      const std::string m = to_string(ac.method), n = to_string(ac.norm);
      AdvBatch<float> adv;
      if (!at_dna.empty()) {
        auto dna = load_dna(at_dna, build_dna(kind, c.unshared));
        adv = attack_chunked(dna_joint_objective(dna, net), t.x, t.y, ac);
        const auto clean = either_path_accuracy(dna, net, t.x, t.y);
        const auto hit = either_path_accuracy(dna, net, adv.perturbed, t.y);
        rows = {{"attack-dna", ac.seed, 0, "none", "none", "either_accuracy", clean.either},
                {"attack-dna", ac.seed, ac.epsilon, n, m, "either_accuracy", hit.either},
                {"attack-dna", ac.seed, ac.epsilon, n, m, "avg_accuracy", hit.avg}};
      } else {
        adv = attack_chunked(classifier_objective(net), t.x, t.y, ac);
        rows = {{"attack", ac.seed, 0, "none", "none", "accuracy", accuracy(predict(net, t.x), t.y)},
                {"attack", ac.seed, ac.epsilon, n, m, "accuracy", accuracy(predict(net, adv.perturbed), t.y)}};
      }
      save_fmat(out_path(c, "perturbed.fmat"), cast<double>(flatten(adv.perturbed)));
      save_report(c, rows);
    } else if (*et) {
      auto c = base_config(g, ExperimentKind::pair_decorrelated);
      const auto spec = arch_spec(et_arch, c.dataset_kind());
      PairState<float> st{load_network(et_a, spec), load_network(et_b, spec), {}, {}, {}, true};
      RunContext run(c);
      detail::transfer_rows(run, c.name, c.seeds.front(), st, test_set(c));
      save_report(c, run.rows());
    } else if (*dv) {
      auto c = base_config(g, ExperimentKind::dverge);
      const auto spec = arch_spec(dv_arch, c.dataset_kind());
      PairState<float> st{load_network(dv_a, spec), load_network(dv_b, spec), {}, {}, {}, true};
      auto train = load_experiment_data(c, Split::train);
      auto test = load_experiment_data(c, Split::test);
      DvergeConfig d = c.dverge;
      d.seed = c.seeds.front();
      dverge_finetune(st, train, d, &test);
      print_log(st.logs);
      write_epoch_log(out_path(c, "dverge_log.csv"), st.logs);
      save_checkpoint(out_path(c, "dverge_a.ckpt"), st.a.params, spec.describe());
      save_checkpoint(out_path(c, "dverge_b.ckpt"), st.b.params, spec.describe());
      RunContext run(c);
      detail::accuracy_rows(run, c.name, d.seed, natural_accuracy(st.a, test), natural_accuracy(st.b, test));
      detail::transfer_rows(run, c.name, d.seed, st, detail::test_tensors(test));
      save_report(c, run.rows());
    } else if (*ac) {
      auto c = base_config(g, ExperimentKind::corr_analysis);
      const auto spec = arch_spec(ac_arch, c.dataset_kind());
      PairState<float> st{load_network(ac_a, spec), load_network(ac_b, spec), {}, {}, {}, true};
      auto test = load_experiment_data(c, Split::test);
      auto [fa, fb] = detail::pair_features(st, test, c.analysis_samples);
      const auto pa = pca_project_1d(fa), pb = pca_project_1d(fb);
      const std::size_t n = pa.size();
      std::vector<double> both;
      std::ofstream os(out_path(c, "pca.csv"));
      os << "sample,label,pc1_a,pc1_b\n";
      for (std::size_t i = 0; i < n; ++i) {
        both.push_back(pa[i]);
        both.push_back(pb[i]);
        os << i << ',' << test.labels[i] << ',' << format_number(pa[i]) << ',' << format_number(pb[i]) << '\n';
      }
      save_fmat(out_path(c, "pca.fmat"), Tensor<double>({n, 2}, both));
      const std::uint64_t s = c.seeds.front();
      const auto pc = r_squared(FeatureBatch(Tensor<double>({n, 1}, pa)), FeatureBatch(Tensor<double>({n, 1}, pb)));
      save_report(c, {{"analyze-corr", s, 0, "none", "none", "r_squared", r_squared(fa, fb).r_squared},
                      {"analyze-corr", s, 0, "none", "none", "pc1_r_squared", pc.r_squared},
                      {"analyze-corr", s, 0, "none", "none", "pearson", pearson_features(fa, fb)}});
    } else if (*rp) {
      if (!rp_input.empty()) {
        summarize(read_report(rp_input));
      } else {
        if (g.config_path.empty()) throw ConfigError("report needs --config or --input");
        auto c = base_config(g, ExperimentKind::pair_decorrelated);
        auto dir = run_experiment(c);
        std::cerr << "run written to " << dir.string() << '\n';
        summarize(read_report((dir / "report.csv").string()));
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
