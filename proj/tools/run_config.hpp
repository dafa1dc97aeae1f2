#pragma once

// Run configuration for the cutpost CLI: JSON in, validated struct out, and
// back to a normalized JSON document with every default spelled out and
// every path absolute, so the normalized form reproduces the run.

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "cutpost/cutpost.hpp"

namespace cutpost::cli {

using nlohmann::json;
namespace fs = std::filesystem;

enum class Task { cut, full, smi, calibrate, diagnose };

inline const std::vector<std::string>& task_names() {
  static const std::vector<std::string> v{"cut", "full", "smi", "calibrate", "diagnose"};
  return v;
}

inline std::string to_string(Task t) { return task_names()[static_cast<std::size_t>(t)]; }

struct HpvSimulate {
  std::uint64_t seed = 0;
  double eta1 = -2.0, eta2 = 13.0, overdispersion_sd = 0.5;
};

struct ReSimulate {
  std::size_t N = 100, J = 10;
  double psi = 1.0;
  std::vector<double> phi{0.5};
  /// one-based group -> fixed beta
  std::map<std::size_t, double> beta{{1, 10.0}};
  std::uint64_t seed = 0;
};

struct CalibrationSettings {
  std::string which = "both";     // both | module1 | module2
  std::string method = "plugin";  // plugin | bootstrap
  std::size_t B = 1000;
  /// "all", "beta" (re only) or explicit zero-based eta indices
  std::variant<std::string, std::vector<std::size_t>> mask = std::string("all");
};

struct DiagnoseSettings {
  std::string samples;
  double alpha = 0.05;
  std::size_t K = 10000;
  std::vector<double> ellipse_quantiles{0.05, 0.5, 0.95};
  std::size_t credible_draws = 5;
};

/// A learning rate is a positive number or "calibrate".
struct Rate {
  bool calibrate = false;
  double value = 1.0;
};

struct RunConfig {
  std::string model;  // hpv | re | plugin
  Task task = Task::cut;
  std::uint64_t seed = 0;
  std::size_t S = 1000;
  std::size_t threads = 1;
  std::string output_dir;

  std::optional<std::string> data_path;
  std::optional<HpvSimulate> hpv_sim;
  std::optional<ReSimulate> re_sim;

  std::string hpv_loss = "poisson";
  double hpv_lambda = 1.0;
  std::string re_loss = "gaussian";
  double re_kappa = 5.0;
  std::string plugin_library;
  json plugin_config = json::object();

  Rate nu, nu_prime;
  CutStrategy strategy;
  McmcConfig mcmc;
  bool proposal_scale_set = false;
  std::optional<double> gamma;
  bool smi_augment = false;
  CalibrationSettings calibration;
  DiagnoseSettings diagnose;
};

/// Reads one JSON object, remembering which keys were consumed so that
/// unknown (usually misspelt) keys can be reported.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail("", "expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  const json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  [[noreturn]] void fail(const std::string& key, const std::string& what) const {
    const std::string f = key.empty() ? path_ : field(key);
    throw ConfigError("config field '" + (f.empty() ? std::string("<root>") : f) + "': " + what);
  }

  Section child(const std::string& key) {
    seen_.insert(key);
    return Section(j_.at(key), field(key));
  }

  double number(const std::string& key, double def) {
    if (!has(key)) return def;
    const json& v = raw(key);
    if (!v.is_number()) fail(key, "expected a number");
    return v.get<double>();
  }

  double positive(const std::string& key, double def) {
    const double v = number(key, def);
    if (!(v > 0.0) || !std::isfinite(v)) fail(key, "must be a finite number > 0");
    return v;
  }

  std::uint64_t count(const std::string& key, std::uint64_t def, std::uint64_t min = 0) {
    if (!has(key)) return def;
    const json& v = raw(key);
    if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0))
      fail(key, "expected a non-negative integer");
    const auto u = v.get<std::uint64_t>();
    if (u < min) fail(key, "must be >= " + std::to_string(min));
    return u;
  }

  bool boolean(const std::string& key, bool def) {
    if (!has(key)) return def;
    const json& v = raw(key);
    if (!v.is_boolean()) fail(key, "expected true or false");
    return v.get<bool>();
  }

  std::string text(const std::string& key, const std::string& def) {
    if (!has(key)) return def;
    const json& v = raw(key);
    if (!v.is_string()) fail(key, "expected a string");
    return v.get<std::string>();
  }

  std::string choice(const std::string& key, const std::string& def, const std::vector<std::string>& allowed) {
    const std::string v = text(key, def);
    for (const auto& a : allowed)
      if (a == v) return v;
    std::string list;
    for (const auto& a : allowed) list += (list.empty() ? "" : ", ") + a;
    fail(key, "'" + v + "' is not one of " + list);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) fail(it.key(), "unknown key");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline std::string absolute_from(const fs::path& base, const std::string& p) {
  fs::path q(p);
  if (q.is_relative()) q = base / q;
  return q.lexically_normal().string();
}

inline Rate read_rate(Section& s, const std::string& key) {
  Rate r;
  if (!s.has(key)) return r;
  const json& v = s.raw(key);
  if (v.is_string() && v.get<std::string>() == "calibrate") {
    r.calibrate = true;
  } else if (v.is_number() && v.get<double>() > 0.0 && std::isfinite(v.get<double>())) {
    r.value = v.get<double>();
  } else {
    s.fail(key, "expected a number > 0 or \"calibrate\"");
  }
  return r;
}

inline std::vector<double> number_list(Section& s, const std::string& key, std::vector<double> def) {
  if (!s.has(key)) return def;
  const json& v = s.raw(key);
  std::vector<double> out;
  if (v.is_number()) return {v.get<double>()};
  if (!v.is_array() || v.empty()) s.fail(key, "expected a number or a nonempty array of numbers");
  for (const auto& x : v) {
    if (!x.is_number()) s.fail(key, "expected a number or a nonempty array of numbers");
    out.push_back(x.get<double>());
  }
  return out;
}

/// `base` resolves relative input paths; `cwd` resolves output_dir.
inline RunConfig parse_config(const json& doc, const fs::path& base, const fs::path& cwd) {
  Section root(doc, "");
  RunConfig c;
  if (!root.has("model")) root.fail("model", "required");
  c.model = root.choice("model", "", {"hpv", "re", "plugin"});
  if (!root.has("task")) root.fail("task", "required");
  const std::string task = root.choice("task", "", task_names());
  for (std::size_t i = 0; i < task_names().size(); ++i)
    if (task_names()[i] == task) c.task = static_cast<Task>(i);
  c.seed = root.count("seed", 0);
  c.S = root.count("S", 1000, 1);
  c.threads = root.count("threads", 1, 1);
  c.output_dir = absolute_from(cwd, root.text("output_dir", "cutpost-out"));

  if (root.has("data")) {
    Section d = root.child("data");
    if (d.has("path") == d.has("simulate")) d.fail("", "give exactly one of 'path' and 'simulate'");
    if (d.has("path")) {
      c.data_path = absolute_from(base, d.text("path", ""));
    } else if (c.model == "hpv") {
      Section s = d.child("simulate");
      HpvSimulate h;
      h.seed = s.count("seed", 0);
      h.eta1 = s.number("eta1", h.eta1);
      h.eta2 = s.number("eta2", h.eta2);
      h.overdispersion_sd = s.number("overdispersion_sd", h.overdispersion_sd);
      if (!(h.overdispersion_sd >= 0.0)) s.fail("overdispersion_sd", "must be >= 0");
      s.finish();
      c.hpv_sim = h;
    } else if (c.model == "re") {
      Section s = d.child("simulate");
      ReSimulate r;
      r.N = s.count("N", r.N, 1);
      r.J = s.count("J", r.J, 2);
      r.psi = s.number("psi", r.psi);
      if (!(r.psi >= 0.0)) s.fail("psi", "must be >= 0");
      r.phi = number_list(s, "phi", r.phi);
      if (r.phi.size() != 1 && r.phi.size() != r.N) s.fail("phi", "needs 1 or N entries");
      for (double p : r.phi)
        if (!(p > 0.0)) s.fail("phi", "every entry must be > 0");
      if (s.has("beta")) {
        Section b = s.child("beta");
        r.beta.clear();
        const json& bj = s.raw("beta");
        for (auto it = bj.begin(); it != bj.end(); ++it) {
          std::size_t g = 0;
          try {
            std::size_t used = 0;
            g = std::stoul(it.key(), &used);
            if (used != it.key().size()) throw std::invalid_argument("");
          } catch (const std::exception&) {
            b.fail(it.key(), "group keys are one-based integers");
          }
          if (g < 1 || g > r.N) b.fail(it.key(), "group index must lie in 1..N");
          r.beta[g] = b.number(it.key(), 0.0);
        }
        b.finish();
      }
      r.seed = s.count("seed", 0);
      s.finish();
      c.re_sim = r;
    } else {
      d.fail("simulate", "the plugin model generates its own data");
    }
    d.finish();
  } else if (c.model != "plugin") {
    root.fail("data", "required for model " + c.model);
  }

  if (root.has("hpv")) {
    if (c.model != "hpv") root.fail("hpv", "only valid with model hpv");
    Section h = root.child("hpv");
    c.hpv_loss = h.choice("loss", "poisson", {"poisson", "quasi"});
    c.hpv_lambda = h.positive("lambda", 1.0);
    if (c.hpv_loss == "poisson" && h.has("lambda") && c.hpv_lambda != 1.0)
      h.fail("lambda", "only used with loss quasi");
    h.finish();
  }
  if (root.has("re")) {
    if (c.model != "re") root.fail("re", "only valid with model re");
    Section r = root.child("re");
    c.re_loss = r.choice("loss", "gaussian", {"gaussian", "tukey"});
    c.re_kappa = r.positive("kappa", 5.0);
    r.finish();
  }
  if (c.model == "plugin") {
    if (!root.has("plugin")) root.fail("plugin", "required for model plugin");
    Section p = root.child("plugin");
    if (!p.has("library")) p.fail("library", "required");
    c.plugin_library = absolute_from(base, p.text("library", ""));
    if (p.has("config")) {
      c.plugin_config = p.raw("config");
      if (!c.plugin_config.is_object()) p.fail("config", "expected an object");
    }
    p.finish();
  } else if (root.has("plugin")) {
    root.fail("plugin", "only valid with model plugin");
  }

  c.nu = read_rate(root, "nu");
  c.nu_prime = read_rate(root, "nu_prime");

  if (root.has("strategy")) {
    Section s = root.child("strategy");
    c.strategy.variant = cut_variant_from_string(
        s.choice("variant", "conditional_normal", {"nested_mcmc", "conditional_normal", "sir_t_proposal"}));
    c.strategy.sir_proposals = s.count("sir_proposals", c.strategy.sir_proposals, 1);
    c.strategy.t_dof = s.positive("t_dof", c.strategy.t_dof);
    c.strategy.nested_steps = s.count("nested_steps", c.strategy.nested_steps, 2);
    c.strategy.nested_burn_in = s.count("nested_burn_in", c.strategy.nested_burn_in);
    c.strategy.max_failure_fraction = s.number("max_failure_fraction", c.strategy.max_failure_fraction);
    if (c.strategy.nested_steps <= c.strategy.nested_burn_in)
      s.fail("nested_steps", "must exceed nested_burn_in");
    if (!(c.strategy.max_failure_fraction >= 0.0 && c.strategy.max_failure_fraction < 1.0))
      s.fail("max_failure_fraction", "must lie in [0, 1)");
    s.finish();
  }

  if (root.has("mcmc")) {
    Section m = root.child("mcmc");
    c.mcmc.burn_in = m.count("burn_in", 5000);
    c.mcmc.thin = m.count("thin", 1, 1);
    c.mcmc.adapt = m.boolean("adapt", true);
    c.mcmc.adapt_covariance = m.boolean("adapt_covariance", false);
    if (m.has("proposal_scale")) {
      const auto v = number_list(m, "proposal_scale", {});
      for (double x : v)
        if (!(x > 0.0)) m.fail("proposal_scale", "entries must be > 0");
      c.mcmc.proposal_scale = Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
      c.proposal_scale_set = true;
    }
    m.finish();
  }
  c.mcmc.seed = c.seed;

  if (root.has("gamma")) {
    c.gamma = root.number("gamma", 0.0);
    if (!(*c.gamma >= 0.0 && *c.gamma <= 1.0)) root.fail("gamma", "must lie in [0, 1]");
  }
  if ((c.task == Task::smi) != c.gamma.has_value())
    root.fail("gamma", c.task == Task::smi ? "required when task is smi" : "only valid when task is smi");
  if (root.has("smi")) {
    if (c.task != Task::smi) root.fail("smi", "only valid when task is smi");
    Section s = root.child("smi");
    c.smi_augment = s.boolean("augment", false);
    s.finish();
  }

  if (root.has("calibration")) {
    Section k = root.child("calibration");
    c.calibration.which = k.choice("which", "both", {"both", "module1", "module2"});
    c.calibration.method = k.choice("method", "plugin", {"plugin", "bootstrap"});
    c.calibration.B = k.count("B", 1000, 1);
    if (k.has("mask")) {
      const json& v = k.raw("mask");
      if (v.is_string()) {
        const auto s = v.get<std::string>();
        if (s != "all" && s != "beta") k.fail("mask", "expected \"all\", \"beta\" or an array of indices");
        if (s == "beta" && c.model != "re") k.fail("mask", "\"beta\" only applies to model re");
        c.calibration.mask = s;
      } else if (v.is_array() && !v.empty()) {
        std::vector<std::size_t> idx;
        for (const auto& x : v) {
          if (!x.is_number_unsigned()) k.fail("mask", "indices must be non-negative integers");
          idx.push_back(x.get<std::size_t>());
        }
        c.calibration.mask = idx;
      } else {
        k.fail("mask", "expected \"all\", \"beta\" or a nonempty array of indices");
      }
    }
    if (c.calibration.method == "bootstrap" && c.model != "re")
      k.fail("method", "bootstrap needs grouped data, available for model re only");
    k.finish();
  }
  const bool calibrates = c.task == Task::calibrate || c.nu.calibrate || c.nu_prime.calibrate;
  if (root.has("calibration") && !calibrates)
    root.fail("calibration", "only valid when task is calibrate or a learning rate is \"calibrate\"");

  if (c.task == Task::diagnose) {
    if (!root.has("diagnose")) root.fail("diagnose", "required when task is diagnose");
    Section d = root.child("diagnose");
    if (!d.has("samples")) d.fail("samples", "required (samples.csv of a previous cut run)");
    c.diagnose.samples = absolute_from(base, d.text("samples", ""));
    c.diagnose.alpha = d.number("alpha", c.diagnose.alpha);
    if (!(c.diagnose.alpha > 0.0 && c.diagnose.alpha < 1.0)) d.fail("alpha", "must lie in (0, 1)");
    c.diagnose.K = d.count("K", c.diagnose.K, 1);
    c.diagnose.ellipse_quantiles = number_list(d, "ellipse_quantiles", c.diagnose.ellipse_quantiles);
    for (double q : c.diagnose.ellipse_quantiles)
      if (!(q >= 0.0 && q <= 1.0)) d.fail("ellipse_quantiles", "entries must lie in [0, 1]");
    c.diagnose.credible_draws = d.count("credible_draws", c.diagnose.credible_draws);
    d.finish();
  } else if (root.has("diagnose")) {
    root.fail("diagnose", "only valid when task is diagnose");
  }
  root.finish();
  return c;
}

inline json rate_json(const Rate& r) { return r.calibrate ? json("calibrate") : json(r.value); }

inline json to_json(const RunConfig& c) {
  json j;
  j["model"] = c.model;
  j["task"] = to_string(c.task);
  j["seed"] = c.seed;
  j["S"] = c.S;
  j["threads"] = c.threads;
  j["output_dir"] = c.output_dir;
  if (c.data_path) {
    j["data"] = {{"path", *c.data_path}};
  } else if (c.hpv_sim) {
    j["data"]["simulate"] = {{"seed", c.hpv_sim->seed},
                             {"eta1", c.hpv_sim->eta1},
                             {"eta2", c.hpv_sim->eta2},
                             {"overdispersion_sd", c.hpv_sim->overdispersion_sd}};
  } else if (c.re_sim) {
    json beta = json::object();
    for (const auto& [g, b] : c.re_sim->beta) beta[std::to_string(g)] = b;
    j["data"]["simulate"] = {{"N", c.re_sim->N},     {"J", c.re_sim->J},     {"psi", c.re_sim->psi},
                             {"phi", c.re_sim->phi}, {"beta", beta}, {"seed", c.re_sim->seed}};
  }
  if (c.model == "hpv") j["hpv"] = {{"loss", c.hpv_loss}, {"lambda", c.hpv_lambda}};
  if (c.model == "re") j["re"] = {{"loss", c.re_loss}, {"kappa", c.re_kappa}};
  if (c.model == "plugin") j["plugin"] = {{"library", c.plugin_library}, {"config", c.plugin_config}};
  j["nu"] = rate_json(c.nu);
  j["nu_prime"] = rate_json(c.nu_prime);
  j["strategy"] = {{"variant", std::string(cutpost::to_string(c.strategy.variant))},
                   {"sir_proposals", c.strategy.sir_proposals},
                   {"t_dof", c.strategy.t_dof},
                   {"nested_steps", c.strategy.nested_steps},
                   {"nested_burn_in", c.strategy.nested_burn_in},
                   {"max_failure_fraction", c.strategy.max_failure_fraction}};
  j["mcmc"] = {{"burn_in", c.mcmc.burn_in},
               {"thin", c.mcmc.thin},
               {"adapt", c.mcmc.adapt},
               {"adapt_covariance", c.mcmc.adapt_covariance}};
  if (c.proposal_scale_set)
    j["mcmc"]["proposal_scale"] =
        std::vector<double>(c.mcmc.proposal_scale.data(), c.mcmc.proposal_scale.data() + c.mcmc.proposal_scale.size());
  if (c.gamma) j["gamma"] = *c.gamma;
  if (c.task == Task::smi) j["smi"] = {{"augment", c.smi_augment}};
  if (c.task == Task::calibrate || c.nu.calibrate || c.nu_prime.calibrate) {
    json mask = std::holds_alternative<std::string>(c.calibration.mask)
                    ? json(std::get<std::string>(c.calibration.mask))
                    : json(std::get<std::vector<std::size_t>>(c.calibration.mask));
    j["calibration"] = {{"which", c.calibration.which},
                        {"method", c.calibration.method},
                        {"B", c.calibration.B},
                        {"mask", mask}};
  }
  if (c.task == Task::diagnose)
    j["diagnose"] = {{"samples", c.diagnose.samples},
                     {"alpha", c.diagnose.alpha},
                     {"K", c.diagnose.K},
                     {"ellipse_quantiles", c.diagnose.ellipse_quantiles},
                     {"credible_draws", c.diagnose.credible_draws}};
  return j;
}

}  // namespace cutpost::cli
