#include "ipwsae/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>

#include "ipwsae/bootstrap.hpp"
#include "ipwsae/diagnostics.hpp"
#include "ipwsae/mse.hpp"
#include "ipwsae/simgen.hpp"
#include "ipwsae/svg.hpp"
#include "text.hpp"

namespace ipwsae {

namespace fs = std::filesystem;

std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace {

using detail::csv_field;
using detail::fmt_exact;

constexpr const char* kCommands[] = {"estimate", "simulate", "diagnose", "bootstrap"};

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kSchema, "cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Files are staged in memory and written only once the command has
// succeeded, each through a temporary name and a rename.
class Outputs {
 public:
  enum class Style { kCsv, kSvg, kJson };

  std::ostream& add(const std::string& name, Style style = Style::kCsv) {
    files_.push_back({name, style, std::make_unique<std::ostringstream>()});
    return *files_.back().body;
  }

  void commit(const std::string& dir, const std::string& header) const {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw Error(ErrorKind::kValidation, "cannot create output directory '" + dir + "': " + ec.message());
    std::vector<fs::path> done;
    try {
      for (const auto& f : files_) {
        const fs::path final_path = fs::path(dir) / f.name;
        const fs::path tmp = fs::path(dir) / ("." + f.name + ".tmp");
        {
          std::ofstream o(tmp, std::ios::binary);
          if (f.style == Style::kCsv) o << header;
          if (f.style == Style::kSvg) o << "<!--\n" << header << "-->\n";
          o << f.body->str();
          if (!o) throw Error(ErrorKind::kValidation, "cannot write '" + tmp.string() + "'");
        }
        fs::rename(tmp, final_path);
        done.push_back(final_path);
      }
    } catch (...) {
      for (const auto& p : done) fs::remove(p, ec);
      for (const auto& f : files_) fs::remove(fs::path(dir) / ("." + f.name + ".tmp"), ec);
      throw;
    }
  }

 private:
  struct File {
    std::string name;
    Style style;
    std::unique_ptr<std::ostringstream> body;
  };
  std::vector<File> files_;
};

struct RunConfig {
  std::string command;
  std::string input;
  std::string schema;
  std::string out_dir;
  std::uint64_t seed = 1;
  double clip = 0.005;
  std::string methods;
  std::string mse = "analytic";
  int boot_reps = 200;
  int workers = 1;
  bool no_unit_error = false;
  bool diagnostics = false;
  // simulate
  std::string scenario;
  int areas = 50;
  int pop = 100;
  int samp = 5;
  int reps = 100;
  std::string convention = "variance";
  std::string truth = "tau";
  std::string mse_target = "conditional";
  bool no_mse = false;
  bool svg = false;
  std::string design_input;
  double fraction = 0.1;
  // diagnose
  std::string propensity;
  std::string propensity_model;
  std::string statistic = "standardized";
  std::string support = "range";
  double support_lower = 0.01;
  double support_upper = 0.99;
  bool support_iterate = false;
  bool sample_only = false;
};

std::vector<Method> parse_methods(const std::string& list) {
  std::vector<Method> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    const Method m = parse_method(item);
    if (std::find(out.begin(), out.end(), m) != out.end()) {
      throw Error(ErrorKind::kValidation, "method '" + item + "' listed twice");
    }
    out.push_back(m);
  }
  if (out.empty()) throw Error(ErrorKind::kValidation, "no methods selected");
  return out;
}

// Splices "key = value" lines of --config into the arguments right after
// the command name, skipping keys given on the command line.
std::vector<std::string> expand_config(const std::vector<std::string>& args) {
  std::vector<std::string> rest;
  std::string path;
  for (std::size_t k = 0; k < args.size(); ++k) {
    if (args[k] == "--config") {
      if (k + 1 >= args.size()) throw Error(ErrorKind::kValidation, "--config needs a file");
      path = args[++k];
    } else if (args[k].rfind("--config=", 0) == 0) {
      path = args[k].substr(9);
    } else {
      rest.push_back(args[k]);
    }
  }
  if (path.empty()) return rest;
  std::map<std::string, bool> given;
  for (const auto& a : rest) {
    if (a.rfind("--", 0) == 0) given[a.substr(2, a.find('=') == std::string::npos ? std::string::npos : a.find('=') - 2)] = true;
  }
  std::istringstream in(read_file(path));
  std::vector<std::string> extra;
  std::string line;
  int lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw Error(ErrorKind::kValidation, path + ":" + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    if (given.count(key)) continue;
    extra.push_back("--" + key + "=" + trim(line.substr(eq + 1)));
  }
  auto it = std::find_first_of(rest.begin(), rest.end(), std::begin(kCommands), std::end(kCommands));
  if (it == rest.end()) return rest;
  rest.insert(it + 1, extra.begin(), extra.end());
  return rest;
}

// Canonical text of every option that can change the outputs.
std::string canonical_config(const CLI::App& sub) {
  std::map<std::string, std::string> kv;
  for (const CLI::Option* o : sub.get_options()) {
    const std::string name = o->get_single_name();
    if (name.empty() || name == "help" || name == "out-dir" || name == "workers") continue;
    std::string v;
    if (o->count() > 0) {
      for (const auto& r : o->results()) v += r + ";";
    } else {
      v = o->get_default_str();
    }
    kv[name] = v;
  }
  std::string s = sub.get_name();
  for (const auto& [k, v] : kv) s += "\n" + k + "=" + v;
  return s;
}

std::string header_lines(const RunConfig& cfg, const std::string& canon, const std::string& input_hash) {
  std::string h = "# ipwsae " + std::string(kVersion) + "\n# command=" + cfg.command +
                  " seed=" + std::to_string(cfg.seed) + " config=" + hex64(fnv1a64(canon));
  if (!input_hash.empty()) h += " input=" + input_hash;
  return h + "\n";
}

PopulationFrame load_input(const RunConfig& cfg, bool need_sample) {
  Schema schema = cfg.schema.empty() ? Schema{} : Schema::parse(cfg.schema);
  if (need_sample) {
    schema.y_required = true;
  }
  auto pop = load_population(cfg.input, schema);
  if (need_sample && pop.total_sample() == 0) {
    throw Error(ErrorKind::kValidation, "input has no sampled units");
  }
  return pop;
}

void report_validation(const PopulationFrame& pop, std::ostream& err) {
  for (const auto& issue : validate_frame(pop).issues) err << "warning: " << issue.message << "\n";
}

struct MethodRun {
  AreaEffectTable table;
  std::optional<MseBreakdown> mse;
  std::optional<BootstrapVariance> boot;
  std::optional<IpwWeights> weights;
  Vector yhat;
};

void write_estimates(std::ostream& out, const std::vector<MethodRun>& runs) {
  out << "area,method,estimate,rmse,ci_lo,ci_hi,g1,g2,g3,g_eps,var,bias2,qvar,analytic_mse,boot_var,flags\n";
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (const auto& r : runs) {
    for (std::size_t j = 0; j < r.table.rows.size(); ++j) {
      const auto& a = r.table.rows[j];
      out << csv_field(a.area) << ',' << to_string(r.table.method) << ',' << fmt_exact(a.estimate) << ','
          << fmt_exact(a.rmse().value_or(nan)) << ',' << fmt_exact(a.interval ? a.interval->first : nan) << ','
          << fmt_exact(a.interval ? a.interval->second : nan);
      const bool eblup = r.table.method == Method::kEblup;
      const AreaMse* m = r.mse ? &r.mse->areas[j] : nullptr;
      auto term = [&](bool applies, double v) { out << ',' << fmt_exact(m && applies ? v : nan); };
      term(eblup, m ? m->g1 : nan);
      term(eblup, m ? m->g2 : nan);
      term(eblup, m ? m->g3 : nan);
      term(eblup, m ? m->g_eps : nan);
      term(!eblup, m ? m->var : nan);
      term(!eblup, m ? m->bias2 : nan);
      term(!eblup, m ? m->qvar : nan);
      term(true, m ? m->total : nan);
      out << ',' << fmt_exact(r.boot ? r.boot->var[static_cast<Index>(j)] : nan);
      out << ',' << a.flag_string() << '\n';
    }
  }
}

std::vector<MethodRun> run_estimation(const RunConfig& cfg, const PopulationFrame& pop,
                                      const std::vector<Method>& methods, bool analytic, bool bootstrap,
                                      std::ostream& err) {
  EstimationOptions eo;
  eo.clip = cfg.clip;
  const MseOptions mo{!cfg.no_unit_error};
  BootstrapConfig bc;
  bc.B = cfg.boot_reps;
  bc.seed = cfg.seed;
  bc.workers = cfg.workers;
  bc.estimation = eo;
  std::vector<MethodRun> runs;
  std::optional<EblupEstimate> eblup;
  for (Method m : methods) {
    if (m == Method::kEblup) eblup = estimate_ipw_eblup(pop, eo);
  }
  auto warn = [&](const std::string& who, const std::vector<std::string>& ws) {
    for (const auto& w : ws) err << "warning: " << who << ": " << w << "\n";
  };
  for (Method m : methods) {
    MethodRun run;
    if (m == Method::kDirect) {
      Vector e;
      if (eblup) {
        e = eblup->weights.ehat;
      } else {
        try {
          const auto g = fit_logit_laplace(SampleView(pop), eo.glmm);
          e = clip_propensity(predict_propensity(g, pop), eo.clip);
        } catch (const Error& ex) {
          throw Error(ex.kind(), std::string("propensity GLMM: ") + ex.what());
        }
      }
      run.table = ipw_direct(pop, e);
    } else if (m == Method::kEblup) {
      run.table = eblup->table;
      run.weights = eblup->weights;
      run.yhat = eblup->yhat;
      if (analytic) {
        run.mse = mse_eblup_analytic(eblup->lmm, eblup->weights, pop, mo);
        attach_mse(run.table, *run.mse);
        warn("eblup mse", run.mse->warnings);
      }
      if (bootstrap) {
        bc.method = BootstrapMethod::kParametric;
        run.boot = parametric_bootstrap_eblup(eblup->lmm, eblup->glmm, pop, bc);
        add_bootstrap_variance(run.table, *run.boot);
        warn("eblup bootstrap", run.boot->warnings);
      }
    } else {
      auto est = estimate_ipw_mq(pop, eo);
      warn("mq propensity", est.propensity.warnings());
      run.table = est.table;
      run.weights = est.weights;
      run.yhat = est.yhat;
      if (analytic) {
        run.mse = mse_mq_analytic(est.outcome, est.weights, pop);
        attach_mse(run.table, *run.mse);
        warn("mq mse", run.mse->warnings);
      }
      if (bootstrap) {
        bc.method = BootstrapMethod::kBlock;
        run.boot = block_bootstrap_mq(pop, est.outcome, est.propensity, bc);
        add_bootstrap_variance(run.table, *run.boot);
        warn("mq bootstrap", run.boot->warnings);
      }
    }
    for (const auto& a : run.table.rows) warn(std::string(to_string(m)) + " area " + a.area, a.warnings);
    runs.push_back(std::move(run));
  }
  return runs;
}

void write_national(std::ostream& out, const PopulationFrame& pop, const std::vector<MethodRun>& runs) {
  out << "method,benchmarked,direct_evaluation,difference,identity_ok\n";
  for (const auto& r : runs) {
    if (!r.weights) continue;
    const auto bench = benchmark_weights(*r.weights);
    const double b = national_effect(r.table, bench);
    const double d = national_effect_direct(pop, r.yhat, r.weights->ehat);
    const double diff = b - d;
    const bool ok = std::abs(diff) <= 1e-9 * std::max(1.0, std::abs(d));
    out << to_string(r.table.method) << ',' << fmt_exact(b) << ',' << fmt_exact(d) << ',' << fmt_exact(diff) << ','
        << (ok ? "true" : "false") << '\n';
  }
}

void write_bootstrap_summary(std::ostream& out, const std::vector<MethodRun>& runs) {
  out << "area,method,analytic_mse,boot_var,total_mse,boot_reps_used\n";
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (const auto& r : runs) {
    for (std::size_t j = 0; j < r.table.rows.size(); ++j) {
      const auto& a = r.table.rows[j];
      const double analytic = r.mse ? r.mse->areas[j].total : nan;
      out << csv_field(a.area) << ',' << to_string(r.table.method) << ',' << fmt_exact(analytic) << ','
          << fmt_exact(r.boot->var[static_cast<Index>(j)]) << ',' << fmt_exact(a.mse.value_or(nan)) << ','
          << r.boot->used[j] << '\n';
    }
  }
}

void add_boot_logs(Outputs& files, const std::vector<MethodRun>& runs) {
  for (const auto& r : runs) {
    if (r.boot) write_bootstrap_log_csv(files.add("bootstrap_log_" + std::string(to_string(r.table.method)) + ".csv"), *r.boot);
  }
}

void cmd_estimate(const RunConfig& cfg, Outputs& files, std::ostream& err) {
  const auto pop = load_input(cfg, true);
  report_validation(pop, err);
  const auto methods = parse_methods(cfg.methods.empty() ? "direct,eblup,mq" : cfg.methods);
  const bool analytic = cfg.mse != "none";
  const auto runs = run_estimation(cfg, pop, methods, analytic, cfg.mse == "bootstrap", err);
  write_estimates(files.add("estimates.csv"), runs);
  write_national(files.add("national.csv"), pop, runs);
  if (cfg.diagnostics) {
    const auto g = fit_logit_laplace(SampleView(pop));
    write_balance_csv(files.add("diagnostics.csv"), balance_test(pop, clip_propensity(predict_propensity(g, pop), cfg.clip)));
  }
  add_boot_logs(files, runs);
}

void cmd_bootstrap(const RunConfig& cfg, Outputs& files, std::ostream& err) {
  const auto pop = load_input(cfg, true);
  report_validation(pop, err);
  const auto methods = parse_methods(cfg.methods.empty() ? "eblup,mq" : cfg.methods);
  if (std::find(methods.begin(), methods.end(), Method::kDirect) != methods.end()) {
    throw Error(ErrorKind::kValidation, "the bootstrap applies to eblup and mq only");
  }
  const auto runs = run_estimation(cfg, pop, methods, true, true, err);
  write_bootstrap_summary(files.add("bootstrap.csv"), runs);
  add_boot_logs(files, runs);
}

Vector diagnose_propensity(const RunConfig& cfg, const PopulationFrame& pop) {
  if (!cfg.propensity.empty()) {
    Vector e = load_numeric_column(cfg.input, cfg.propensity);
    if (e.size() != pop.size()) throw Error(ErrorKind::kParse, "propensity column length mismatch");
    return e;
  }
  if (cfg.propensity_model.empty()) {
    throw Error(ErrorKind::kValidation, "no propensity source: give --propensity <column> or --propensity-model");
  }
  // Fit on the sample when there is one; treatment and covariates are known
  // for the population, so otherwise fit on every unit. The propensity fit
  // never reads y, so missing outcomes get a placeholder.
  const auto n = static_cast<std::size_t>(pop.size());
  const auto fit_pop = pop.total_sample() > 0
                           ? pop
                           : pop.with_outcomes(std::vector<std::optional<double>>(n, 0.0))
                                 .with_sample(std::vector<bool>(n, true));
  const SampleView sample(fit_pop);
  if (cfg.propensity_model == "glmm") {
    return clip_propensity(predict_propensity(fit_logit_laplace(sample), pop), cfg.clip);
  }
  MqOptions mo;
  return clip_propensity(mq_predict_propensity(MqBinEnsemble::fit(sample, mo), fit_pop), cfg.clip);
}

void cmd_diagnose(const RunConfig& cfg, Outputs& files, std::ostream& err) {
  const auto pop = load_input(cfg, false);
  const Vector e = diagnose_propensity(cfg, pop);
  BalanceOptions bo;
  bo.statistic = cfg.statistic == "welch" ? BalanceStatistic::kWelch : BalanceStatistic::kStandardized;
  bo.sample_only = cfg.sample_only;
  write_balance_csv(files.add("balance.csv"), balance_test(pop, e, bo));
  SupportOptions so;
  so.mode = cfg.support == "quantile" ? SupportMode::kQuantile : SupportMode::kRange;
  so.lower = cfg.support_lower;
  so.upper = cfg.support_upper;
  so.iterate = cfg.support_iterate;
  const auto sup = common_support_filter(pop, e, so);
  for (const auto& w : sup.report.warnings) err << "warning: " << w << "\n";
  write_support_csv(files.add("support.csv"), sup.report);
}

std::vector<BoxGroup> metric_groups(const StudyResult& r, bool rrmse) {
  std::vector<BoxGroup> g;
  for (const auto& s : r.summary) {
    BoxGroup b{std::string(to_string(s.method)), {}};
    for (const auto& a : s.accuracy) b.values.push_back(rrmse ? a.rrmse : a.rb);
    g.push_back(std::move(b));
  }
  return g;
}

void cmd_simulate(const RunConfig& cfg, Outputs& files, const std::string& canon) {
  StudyConfig sc;
  sc.methods = parse_methods(cfg.methods.empty() ? "direct,eblup,mq" : cfg.methods);
  sc.reps = cfg.reps;
  sc.workers = cfg.workers;
  sc.mse = !cfg.no_mse;
  sc.truth = cfg.truth == "ipw" ? TruthMode::kPopulationIpw : TruthMode::kAreaEffect;
  sc.mse_target = cfg.mse_target == "truth" ? MseTarget::kTruth : MseTarget::kConditional;
  sc.estimation.clip = cfg.clip;
  sc.mse_options.include_unit_error = !cfg.no_unit_error;
  if (sc.reps < 1) throw Error(ErrorKind::kValidation, "--reps must be at least 1");

  nlohmann::ordered_json meta;
  meta["tool"] = "ipwsae";
  meta["version"] = std::string(kVersion);
  meta["seed"] = cfg.seed;
  meta["config_hash"] = hex64(fnv1a64(canon));
  StudyResult result;
  if (!cfg.design_input.empty()) {
    Schema schema = cfg.schema.empty() ? Schema{} : Schema::parse(cfg.schema);
    schema.y_required = true;
    const auto pseudo = load_population(cfg.design_input, schema);
    DesignConfig dc;
    dc.study = sc;
    dc.fraction = cfg.fraction;
    dc.seed = cfg.seed;
    const auto d = run_design_study(pseudo, dc);
    result = d.study;
    auto& eff = files.add("efficiency.csv");
    eff << "area,method,efficiency\n";
    for (const auto& [m, v] : d.efficiency) {
      for (Index j = 0; j < v.size(); ++j) {
        eff << csv_field(result.area_labels[static_cast<std::size_t>(j)]) << ',' << to_string(m) << ','
            << detail::fmt(v[j]) << '\n';
      }
    }
    meta["protocol"] = "design";
    meta["pseudo_population"] = {{"input_hash", hex64(fnv1a64(read_file(cfg.design_input)))},
                                 {"units", pseudo.size()},
                                 {"areas", pseudo.num_areas()}};
    meta["fraction"] = cfg.fraction;
  } else {
    ScenarioSpec spec = ScenarioSpec::parse(cfg.scenario);
    spec.m = cfg.areas;
    spec.N = cfg.pop;
    spec.n = cfg.samp;
    spec.outlier_areas = std::min(spec.outlier_areas, spec.m);
    spec.convention = cfg.convention == "sd" ? SpreadConvention::kSd : SpreadConvention::kVariance;
    spec.seed = cfg.seed;
    if (spec.m < 1 || spec.N < 1 || spec.n < 1 || spec.n > spec.N) {
      throw Error(ErrorKind::kValidation, "need areas >= 1 and 1 <= samp <= pop");
    }
    result = run_study(spec, sc);
    meta["protocol"] = "model";
    meta["scenario"] = {{"id", spec.id()},
                        {"areas", spec.m},
                        {"population_per_area", spec.N},
                        {"sample_per_area", spec.n},
                        {"tau", {{"mean", spec.tau_mean}, {"spread", spec.tau_spread}}},
                        {"u_spread", spec.u_spread},
                        {"eps_spread", spec.eps_spread},
                        {"nu_spread", spec.nu_spread},
                        {"x1_lognormal", {{"meanlog", spec.x1_meanlog}, {"spread", spec.x1_spread}}},
                        {"outliers", spec.outliers},
                        {"outlier_areas", spec.outliers ? spec.outlier_areas : 0},
                        {"contamination", spec.contamination},
                        {"misclassification", spec.misclassification},
                        {"spread_convention", spec.convention == SpreadConvention::kSd ? "sd" : "variance"}};
    meta["contamination_rate"] = result.contamination_rate;
    meta["flip_rate"] = result.flip_rate;
  }
  meta["reps"] = sc.reps;
  meta["truth"] = cfg.truth;
  meta["mse"] = sc.mse;
  meta["mse_target"] = cfg.mse_target;
  meta["include_unit_error"] = sc.mse_options.include_unit_error;
  meta["clip"] = cfg.clip;
  nlohmann::ordered_json failed = nlohmann::ordered_json::object();
  for (const auto& s : result.summary) failed[std::string(to_string(s.method))] = s.failed_reps;
  meta["failed_reps"] = failed;

  write_study_csv(files.add("study.csv"), result);
  write_summary_csv(files.add("summary.csv"), result);
  files.add("metadata.json", Outputs::Style::kJson) << meta.dump(2) << "\n";
  if (cfg.svg) {
    const std::string tag = cfg.design_input.empty() ? " (scenario " + result.spec.id() + ")" : " (design-based)";
    write_boxplot_svg(files.add("rb.svg", Outputs::Style::kSvg), "Relative bias" + tag, "RB (%)",
                      metric_groups(result, false));
    write_boxplot_svg(files.add("rrmse.svg", Outputs::Style::kSvg), "Relative RMSE" + tag, "RRMSE (%)",
                      metric_groups(result, true));
  }
}

void add_common(CLI::App* sub, RunConfig& cfg) {
  sub->add_option("--out-dir", cfg.out_dir, "Directory for output files")->required();
  sub->add_option("--seed", cfg.seed, "Random seed");
  sub->add_option("--clip", cfg.clip, "Propensity clipping bound")->check(CLI::Range(0.0, 0.4999));
  sub->add_option("--workers", cfg.workers, "Worker threads")->check(CLI::Range(1, 1024));
}

void add_input(CLI::App* sub, RunConfig& cfg) {
  sub->add_option("--input", cfg.input, "Population CSV")->required();
  sub->add_option("--schema", cfg.schema, "Column roles, e.g. area=region,x=a;b,w=treat,y=out,in_sample=s");
}

}  // namespace

int run_cli(const std::vector<std::string>& raw_args, std::ostream& out, std::ostream& err) {
  RunConfig cfg;
  std::string command = "none";
  auto fail = [&](const Error& e) {
    const int code = e.numerical() ? 2 : 1;
    nlohmann::ordered_json rec;
    rec["error"] = {{"command", command},
                    {"kind", std::string(to_string(e.kind()))},
                    {"message", e.what()},
                    {"exit_code", code}};
    err << rec.dump() << "\n";
    return code;
  };

  CLI::App app{"Small-area treatment effects by inverse propensity weighting", "ipwsae"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();

  auto* est = app.add_subcommand("estimate", "Area treatment effects with MSE estimates");
  add_input(est, cfg);
  add_common(est, cfg);
  est->add_option("--methods", cfg.methods, "Comma-separated: direct,eblup,mq")->default_str("direct,eblup,mq");
  est->add_option("--mse", cfg.mse, "none, analytic, or bootstrap (analytic plus bootstrap add-on)")
      ->check(CLI::IsMember({"none", "analytic", "bootstrap"}));
  est->add_option("--boot-reps", cfg.boot_reps, "Bootstrap replications")->check(CLI::PositiveNumber);
  est->add_flag("--no-unit-error", cfg.no_unit_error, "Leave g_eps out of the EBLUP MSE");
  est->add_flag("--diagnostics", cfg.diagnostics, "Also write diagnostics.csv (balance test)");

  auto* sim = app.add_subcommand("simulate", "Monte Carlo study under a scenario or a pseudo-population");
  add_common(sim, cfg);
  auto* scen = sim->add_option("--scenario", cfg.scenario, "Scenario id 1a..4b");
  auto* design = sim->add_option("--design-input", cfg.design_input, "Pseudo-population CSV for the design-based protocol");
  scen->excludes(design);
  sim->add_option("--schema", cfg.schema, "Column roles of the pseudo-population")->needs(design);
  sim->add_option("--fraction", cfg.fraction, "Sampling fraction per area (design-based)")
      ->check(CLI::Range(0.0, 1.0))
      ->needs(design);
  sim->add_option("--areas", cfg.areas, "Number of areas")->check(CLI::PositiveNumber)->excludes(design);
  sim->add_option("--pop", cfg.pop, "Population size per area")->check(CLI::PositiveNumber)->excludes(design);
  sim->add_option("--samp", cfg.samp, "Sample size per area")->check(CLI::PositiveNumber)->excludes(design);
  sim->add_option("--reps", cfg.reps, "Replications")->check(CLI::PositiveNumber);
  sim->add_option("--methods", cfg.methods, "Comma-separated: direct,eblup,mq")->default_str("direct,eblup,mq");
  sim->add_option("--convention", cfg.convention, "Read N(a,b) spreads as variance or sd")
      ->check(CLI::IsMember({"variance", "sd"}))
      ->excludes(design);
  sim->add_option("--truth", cfg.truth, "tau (drawn area effects) or ipw (census IPW contrast)")
      ->check(CLI::IsMember({"tau", "ipw"}))
      ->excludes(design);
  auto* no_mse = sim->add_flag("--no-mse", cfg.no_mse, "Skip MSE estimation");
  sim->add_option("--mse-target", cfg.mse_target, "conditional or truth")
      ->check(CLI::IsMember({"conditional", "truth"}))
      ->excludes(no_mse);
  sim->add_flag("--no-unit-error", cfg.no_unit_error, "Leave g_eps out of the EBLUP MSE")->excludes(no_mse);
  sim->add_flag("--svg", cfg.svg, "Write RB and RRMSE box plots");

  auto* dia = app.add_subcommand("diagnose", "Balance test and common support");
  add_input(dia, cfg);
  add_common(dia, cfg);
  auto* pcol = dia->add_option("--propensity", cfg.propensity, "Column holding propensity scores");
  dia->add_option("--propensity-model", cfg.propensity_model, "Fit propensities: glmm or mq")
      ->check(CLI::IsMember({"glmm", "mq"}))
      ->excludes(pcol);
  dia->add_option("--statistic", cfg.statistic, "standardized or welch")
      ->check(CLI::IsMember({"standardized", "welch"}));
  dia->add_option("--support", cfg.support, "range or quantile")->check(CLI::IsMember({"range", "quantile"}));
  dia->add_option("--support-lower", cfg.support_lower, "Lower quantile for --support quantile")->check(CLI::Range(0.0, 1.0));
  dia->add_option("--support-upper", cfg.support_upper, "Upper quantile for --support quantile")->check(CLI::Range(0.0, 1.0));
  dia->add_flag("--support-iterate", cfg.support_iterate, "Repeat the range rule to a fixed point");
  dia->add_flag("--sample-only", cfg.sample_only, "Test sampled units only");

  auto* boot = app.add_subcommand("bootstrap", "Bootstrap add-on variance for eblup and mq");
  add_input(boot, cfg);
  add_common(boot, cfg);
  boot->add_option("--methods", cfg.methods, "Comma-separated: eblup,mq")->default_str("eblup,mq");
  boot->add_option("--boot-reps", cfg.boot_reps, "Bootstrap replications")->check(CLI::PositiveNumber);
  boot->add_flag("--no-unit-error", cfg.no_unit_error, "Leave g_eps out of the EBLUP MSE");

  for (const auto& a : raw_args) {
    if (std::find(std::begin(kCommands), std::end(kCommands), a) != std::end(kCommands)) {
      command = a;
      break;
    }
  }
  std::vector<std::string> args;
  try {
    args = expand_config(raw_args);
  } catch (const Error& e) {
    return fail(e);
  }
  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::CallForVersion&) {
    out << kVersion << "\n";
    return 0;
  } catch (const CLI::Success&) {
    out << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
    return 0;
  } catch (const CLI::ParseError& e) {
    return fail(Error(ErrorKind::kValidation, e.what()));
  }

  CLI::App* sub = app.get_subcommands().front();
  command = cfg.command = sub->get_name();
  try {
    if (command == "simulate" && cfg.scenario.empty() && cfg.design_input.empty()) {
      throw Error(ErrorKind::kValidation, "simulate needs --scenario or --design-input");
    }
    if (command == "estimate" && cfg.mse == "none" && (cfg.no_unit_error || sub->count("--boot-reps") > 0)) {
      throw Error(ErrorKind::kValidation, "--no-unit-error and --boot-reps conflict with --mse none");
    }
    if (command == "diagnose" && cfg.support != "quantile" &&
        (sub->count("--support-lower") > 0 || sub->count("--support-upper") > 0)) {
      throw Error(ErrorKind::kValidation, "--support-lower/--support-upper need --support quantile");
    }
    const std::string canon = canonical_config(*sub);
    std::string input_hash;
    if (!cfg.input.empty()) input_hash = hex64(fnv1a64(read_file(cfg.input)));
    Outputs files;
    if (command == "estimate") {
      cmd_estimate(cfg, files, err);
    } else if (command == "bootstrap") {
      cmd_bootstrap(cfg, files, err);
    } else if (command == "diagnose") {
      cmd_diagnose(cfg, files, err);
    } else {
      cmd_simulate(cfg, files, canon);
    }
    files.commit(cfg.out_dir, header_lines(cfg, canon, input_hash));
    out << "wrote " << cfg.out_dir << "\n";
    return 0;
  } catch (const Error& e) {
    return fail(e);
  } catch (const std::exception& e) {
    return fail(Error(ErrorKind::kValidation, e.what()));
  }
}

}  // namespace ipwsae
