// cutpost: batch front-end for cut, full and semi-modular posterior runs.
//
//   cutpost <cut|full|smi|calibrate|diagnose|run> CONFIG.json [--threads N]
//
// Exit codes: 0 ok, 2 configuration error, 3 numerical failure, 4 I/O error,
// 1 anything else.

#include <dlfcn.h>

#include <Eigen/Core>
#include <boost/version.hpp>
#include <openssl/evp.h>

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <sstream>

#include <CLI11.hpp>

#include "run_config.hpp"

#ifndef CUTPOST_VERSION
#define CUTPOST_VERSION "unknown"
#endif

namespace cutpost::cli {
namespace {

std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw Error("sha256 failed");
  std::ostringstream out;
  for (unsigned int i = 0; i < len; ++i) out << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return out.str();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Plugin systems stay valid only while their library is loaded, so the
// handle is never closed.
struct LoadedModel {
  std::shared_ptr<TwoModuleSystem> sys;
  std::optional<models::ReData> re;
};

std::shared_ptr<TwoModuleSystem> load_plugin(const RunConfig& c) {
  void* h = dlopen(c.plugin_library.c_str(), RTLD_NOW | RTLD_LOCAL);
  if (!h) throw IoError("cannot load plugin '" + c.plugin_library + "': " + dlerror());
  auto create = reinterpret_cast<PluginCreateFn>(dlsym(h, kPluginCreateSymbol));
  auto destroy = reinterpret_cast<PluginDestroyFn>(dlsym(h, kPluginDestroySymbol));
  if (!create || !destroy)
    throw ConfigError("plugin '" + c.plugin_library + "' does not export " + kPluginCreateSymbol + " and " +
                      kPluginDestroySymbol);
  TwoModuleSystem* s = create(c.plugin_config.dump().c_str());
  if (!s) throw ConfigError("plugin '" + c.plugin_library + "' returned no system");
  return std::shared_ptr<TwoModuleSystem>(s, destroy);
}

LoadedModel build_model(const RunConfig& c, const std::string& out_dir, std::vector<std::string>& written) {
  LoadedModel m;
  if (c.model == "plugin") {
    m.sys = load_plugin(c);
  } else if (c.model == "hpv") {
    models::HpvData d;
    if (c.data_path) {
      d = models::read_hpv_csv(*c.data_path);
    } else {
      models::HpvSimOptions o;
      o.eta1 = c.hpv_sim->eta1;
      o.eta2 = c.hpv_sim->eta2;
      o.overdispersion_sd = c.hpv_sim->overdispersion_sd;
      d = models::hpv_simulate(c.hpv_sim->seed, o);
      models::write_hpv_csv(out_dir + "/data.csv", d);
      written.push_back("data.csv");
    }
    const auto loss = c.hpv_loss == "quasi" ? models::HpvLoss::quasi(c.hpv_lambda) : models::HpvLoss::poisson();
    m.sys = std::make_shared<TwoModuleSystem>(models::hpv_system(d, loss));
  } else {
    if (c.data_path) {
      m.re = models::read_re_csv(*c.data_path);
    } else {
      std::map<std::size_t, double> beta;
      for (const auto& [g, b] : c.re_sim->beta) beta[g - 1] = b;
      m.re = models::re_simulate(c.re_sim->N, c.re_sim->J, c.re_sim->psi, c.re_sim->phi, beta, c.re_sim->seed);
      models::write_re_csv(out_dir + "/data.csv", *m.re);
      written.push_back("data.csv");
    }
    const auto loss = c.re_loss == "tukey" ? models::ReLoss::tukey(c.re_kappa) : models::ReLoss::gaussian();
    m.sys = std::make_shared<TwoModuleSystem>(models::re_system(*m.re, loss));
  }
  m.sys->validate();
  return m;
}

std::vector<std::size_t> calibration_mask(const RunConfig& c, const LoadedModel& m) {
  if (auto* s = std::get_if<std::string>(&c.calibration.mask)) {
    if (*s == "beta") return models::re_beta_mask(*m.re);
    return {};
  }
  return std::get<std::vector<std::size_t>>(c.calibration.mask);
}

CalibrationReport run_calibration(const RunConfig& c, const LoadedModel& m, bool module1, bool module2) {
  const auto mask = calibration_mask(c, m);
  const TwoModuleSystem& sys = *m.sys;
  if (c.calibration.method == "plugin" || !module2) {
    CalibrationOptions o;
    o.which = module1 && module2 ? CalibrateWhich::both : module1 ? CalibrateWhich::module1 : CalibrateWhich::module2;
    o.eta_mask = mask;
    return calibrate(sys, o);
  }
  BootstrapOptions b;
  b.B = c.calibration.B;
  b.seed = c.seed;
  b.eta_mask = mask;
  b.threads = c.threads;
  const auto loss = c.re_loss == "tukey" ? models::ReLoss::tukey(c.re_kappa) : models::ReLoss::gaussian();
  CalibrationReport r = calibrate_nu2_bootstrap(sys, models::re_grouped_data(*m.re, loss), b);
  if (module1) {
    CalibrationOptions o;
    o.which = CalibrateWhich::module1;
    const CalibrationReport r1 = calibrate(sys, o);
    r.nu = r1.nu;
    r.nu_calibrated = true;
    r.Sigma11 = r1.Sigma11;
    r.Psi11 = r1.Psi11;
    r.warnings.insert(r.warnings.end(), r1.warnings.begin(), r1.warnings.end());
  }
  return r;
}

McmcConfig chain_config(const RunConfig& c, Eigen::Index dim) {
  McmcConfig m = c.mcmc;
  if (c.proposal_scale_set) {
    const Vector s = m.proposal_scale.size() == 1 ? Vector::Constant(dim, m.proposal_scale[0]) : m.proposal_scale;
    if (s.size() != dim)
      throw ConfigError("config field 'mcmc.proposal_scale': needs 1 or " + std::to_string(dim) + " entries");
    m.proposal_cov = s.array().square().matrix().asDiagonal();
  }
  return m;
}

void write_diagnostics(const RunConfig& c, const TwoModuleSystem& sys, const std::string& dir,
                       std::vector<std::string>& written) {
  const SampleSet in = io::read_sample_set(c.diagnose.samples);
  const auto dp = static_cast<Eigen::Index>(sys.d_phi());
  Matrix phi(in.rows(), dp);
  for (Eigen::Index j = 0; j < dp; ++j) {
    const auto& name = sys.phi_names[static_cast<std::size_t>(j)];
    auto it = std::find(in.names.begin(), in.names.end(), name);
    if (it == in.names.end())
      throw ConfigError("diagnose: samples file '" + c.diagnose.samples + "' has no column '" + name + "'");
    phi.col(j) = in.draws.col(it - in.names.begin());
  }
  PropagationOptions po;
  po.seed = c.seed;
  po.threads = c.threads;
  po.max_failure_fraction = c.strategy.max_failure_fraction;
  const PropagationTable t = propagation_table(sys, phi, po);

  std::vector<std::string> header{"row"};
  header.insert(header.end(), sys.phi_names.begin(), sys.phi_names.end());
  for (const auto& e : sys.eta_names) header.push_back("mu_" + e);
  for (const auto& e : sys.eta_names) header.push_back("var_" + e);
  header.push_back("logdet");
  Matrix tab(t.rows(), static_cast<Eigen::Index>(header.size()));
  for (Eigen::Index i = 0; i < t.rows(); ++i) {
    tab(i, 0) = static_cast<double>(t.source_row[static_cast<std::size_t>(i)]);
    tab.row(i).segment(1, dp) = t.phi.row(i);
    tab.row(i).segment(1 + dp, t.mu.cols()) = t.mu.row(i);
    tab.row(i).segment(1 + dp + t.mu.cols(), t.mu.cols()) = t.sigma_diag.row(i);
    tab(i, tab.cols() - 1) = t.logdet[i];
  }
  io::write_numeric_csv(dir + "/propagation.csv", header, tab);
  written.push_back("propagation.csv");

  json dec;
  dec["rows"] = t.rows();
  dec["failures"] = t.failures;
  const auto tv = total_variance_decomposition(t);
  const auto tc = third_cumulant_decomposition(t);
  for (std::size_t k = 0; k < sys.eta_names.size(); ++k) {
    const auto i = static_cast<Eigen::Index>(k);
    json e{{"E_var", tv.E_var[i]},
           {"Var_mean", tv.Var_mean[i]},
           {"total_variance", tv.total()[i]},
           {"third_cumulant", {{"term2", tc.term2[i]}, {"term3", tc.term3[i]}, {"total", tc.total()[i]}}}};
    auto it = std::find(in.names.begin(), in.names.end(), sys.eta_names[k]);
    if (it != in.names.end()) {
      const Vector x = in.draws.col(it - in.names.begin());
      e["sample_variance"] = (x.array() - x.mean()).square().sum() / static_cast<double>(x.size() - 1);
    }
    dec["eta"][sys.eta_names[k]] = e;
  }
  json sets = json::array();
  const std::size_t n = std::min<std::size_t>(c.diagnose.credible_draws, static_cast<std::size_t>(t.rows()));
  for (std::size_t k = 0; k < n; ++k) {
    const auto r = static_cast<Eigen::Index>(k * static_cast<std::size_t>(t.rows()) / n);
    const auto res = credible_set_mc(sys, t.phi.row(r).transpose(), c.diagnose.alpha, c.diagnose.K, c.seed + k);
    sets.push_back({{"row", t.source_row[static_cast<std::size_t>(r)]},
                    {"alpha", c.diagnose.alpha},
                    {"K", res.K},
                    {"retained_fraction", res.fraction()}});
  }
  dec["credible_sets"] = sets;
  io::write_json(dir + "/decomposition.json", dec);
  written.push_back("decomposition.json");

  if (sys.d_eta() == 2 && !c.diagnose.ellipse_quantiles.empty()) {
    const auto rows = select_by_logdet_quantiles(t, c.diagnose.ellipse_quantiles);
    io::write_numeric_csv(dir + "/ellipses.csv", {"s", "x", "y"}, ellipse_table(sys, t, rows, c.diagnose.alpha));
    written.push_back("ellipses.csv");
  }
}

json versions() {
  return {{"cutpost", CUTPOST_VERSION},
          {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                        std::to_string(EIGEN_MINOR_VERSION)},
          {"boost", BOOST_LIB_VERSION},
          {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
          {"compiler", __VERSION__}};
}

int run(const std::string& subcommand, const std::string& config_path, std::optional<std::size_t> threads) {
  json doc;
  {
    const std::string text = slurp(config_path);
    try {
      doc = json::parse(text);
    } catch (const json::parse_error& e) {
      throw ConfigError("config '" + config_path + "' is not valid JSON: " + e.what());
    }
  }
  if (!doc.is_object()) throw ConfigError("config '" + config_path + "': expected a JSON object");
  if (subcommand != "run") {
    if (!doc.contains("task")) doc["task"] = subcommand;
    if (doc["task"] != subcommand)
      throw ConfigError("config field 'task': '" + doc["task"].dump() + "' does not match subcommand '" +
                        subcommand + "'");
  }
  const fs::path base = fs::absolute(config_path).parent_path();
  RunConfig c = parse_config(doc, base, fs::current_path());
  if (threads) c.threads = *threads;
  if (const char* env = std::getenv("CUTPOST_OUTPUT_DIR"); env && *env)
    c.output_dir = absolute_from(fs::current_path(), env);

  std::error_code ec;
  fs::create_directories(c.output_dir, ec);
  if (ec) throw IoError("cannot create output directory '" + c.output_dir + "': " + ec.message());
  const std::string dir = c.output_dir;
  std::vector<std::string> written;

  LoadedModel m = build_model(c, dir, written);
  TwoModuleSystem& sys = *m.sys;
  sys.nu = c.nu.value;
  sys.nu_prime = c.nu_prime.value;

  const bool cal1 = c.task == Task::calibrate ? c.calibration.which != "module2" : c.nu.calibrate;
  const bool cal2 = c.task == Task::calibrate ? c.calibration.which != "module1" : c.nu_prime.calibrate;
  if (cal1 || cal2) {
    const CalibrationReport r = run_calibration(c, m, cal1, cal2);
    io::write_json(dir + "/calibration.json", to_json(r));
    written.push_back("calibration.json");
    if (c.nu.calibrate) sys.nu = r.nu;
    if (c.nu_prime.calibrate) sys.nu_prime = r.nu_prime;
  }

  const auto dim_phi = static_cast<Eigen::Index>(sys.d_phi());
  std::optional<SampleSet> samples;
  switch (c.task) {
    case Task::cut:
      samples = sample_cut(sys, c.S, c.strategy, chain_config(c, dim_phi), c.threads);
      break;
    case Task::full:
      samples = sample_full(sys, c.S, chain_config(c, dim_phi + static_cast<Eigen::Index>(sys.d_eta())));
      break;
    case Task::smi: {
      SmiConfig s;
      s.gamma = *c.gamma;
      s.cfg = chain_config(c, dim_phi);
      if (c.smi_augment) s.augment = c.strategy;
      s.threads = c.threads;
      samples = sample_smi(sys, c.S, s);
      break;
    }
    case Task::diagnose:
      write_diagnostics(c, sys, dir, written);
      break;
    case Task::calibrate:
      break;
  }
  if (samples) {
    samples->meta["model"] = sys.label;
    io::write_sample_set(dir + "/samples.csv", *samples);
    written.push_back("samples.csv");
    written.push_back("samples.meta.json");
  }

  const json normalized = to_json(c);
  json manifest;
  manifest["config"] = normalized;
  manifest["config_sha256"] = sha256_hex(normalized.dump());
  manifest["seed"] = c.seed;
  manifest["task"] = to_string(c.task);
  manifest["versions"] = versions();
  manifest["files"] = json::array();
  for (const auto& f : written) {
    const std::string bytes = slurp(dir + "/" + f);
    manifest["files"].push_back({{"name", f}, {"bytes", bytes.size()}, {"sha256", sha256_hex(bytes)}});
  }
  io::write_json(dir + "/manifest.json", manifest);
  std::cout << "cutpost " << to_string(c.task) << ": wrote " << written.size() + 1 << " files to " << dir << "\n";
  return 0;
}

}  // namespace
}  // namespace cutpost::cli

int main(int argc, char** argv) {
  CLI::App app{"cut, full and semi-modular posterior inference for two-module models"};
  app.set_version_flag("--version", std::string(CUTPOST_VERSION));
  app.require_subcommand(1, 1);
  std::string config;
  std::optional<std::size_t> threads;
  app.add_option("--threads", threads, "worker threads (overrides the config)")->check(CLI::PositiveNumber);
  const std::vector<std::pair<std::string, std::string>> subs{
      {"cut", "sequential cut posterior sampling"},
      {"full", "joint Metropolis sampling of the full generalized posterior"},
      {"smi", "semi-modular posterior with influence gamma"},
      {"calibrate", "learning-rate calibration"},
      {"diagnose", "uncertainty propagation diagnostics for a previous cut run"},
      {"run", "run the task named in the config"}};
  for (const auto& [name, help] : subs) {
    auto* s = app.add_subcommand(name, help);
    s->add_option("config", config, "JSON configuration file")->required();
    s->add_option("--threads", threads, "worker threads (overrides the config)")->check(CLI::PositiveNumber);
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  const std::string sub = app.get_subcommands().front()->get_name();
  try {
    return cutpost::cli::run(sub, config, threads);
  } catch (const cutpost::ConfigError& e) {
    std::cerr << "cutpost: configuration error: " << e.what() << "\n";
    return 2;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "cutpost: configuration error: " << e.what() << "\n";
    return 2;
  } catch (const cutpost::NumericError& e) {
    std::cerr << "cutpost: numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const cutpost::IoError& e) {
    std::cerr << "cutpost: i/o error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "cutpost: error: " << e.what() << "\n";
    return 1;
  }
}
