#include "tim/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "tim/errors.hpp"

namespace tim {

namespace pt = boost::property_tree;

namespace {

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string fmt(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

class Reader {
 public:
  explicit Reader(const pt::ptree& tree) : tree_(tree) {}

  template <typename Fn>
  void field(const std::string& section, const std::string& key, Fn&& assign) {
    known_[section].insert(key);
    const auto sec = tree_.get_child_optional(pt::ptree::path_type(section, '\0'));
    if (!sec) return;
    const auto node = sec->get_child_optional(pt::ptree::path_type(key, '\0'));
    if (!node) return;
    const std::string value = trim(node->data());
    try {
      assign(value);
    } catch (const ConfigError& e) {
      throw ConfigError(section + "." + key + ": " + e.what());
    } catch (const std::exception&) {
      throw ConfigError(section + "." + key + ": cannot parse '" + value + "'");
    }
  }

  void real(const std::string& s, const std::string& k, double& out) {
    field(s, k, [&](const std::string& v) { out = parse_real(v); });
  }
  void integer(const std::string& s, const std::string& k, int& out) {
    field(s, k, [&](const std::string& v) { out = parse_int<int>(v); });
  }
  void u64(const std::string& s, const std::string& k, std::uint64_t& out) {
    field(s, k, [&](const std::string& v) { out = parse_int<std::uint64_t>(v); });
  }
  void boolean(const std::string& s, const std::string& k, bool& out) {
    field(s, k, [&](const std::string& v) {
      if (v == "true" || v == "1") {
        out = true;
      } else if (v == "false" || v == "0") {
        out = false;
      } else {
        throw ConfigError("expected true or false, got '" + v + "'");
      }
    });
  }
  void text(const std::string& s, const std::string& k, std::string& out) {
    field(s, k, [&](const std::string& v) { out = v; });
  }
  void list(const std::string& s, const std::string& k, std::vector<double>& out) {
    field(s, k, [&](const std::string& v) {
      out.clear();
      std::stringstream ss(v);
      std::string item;
      while (std::getline(ss, item, ',')) out.push_back(parse_real(trim(item)));
      if (out.empty()) throw ConfigError("empty list");
    });
  }

  /// Throws on the first key that no field() call claimed.
  void reject_unknown() const {
    for (const auto& [section, keys] : tree_) {
      if (!keys.data().empty()) throw ConfigError("unknown key '" + section + "' outside any section");
      const auto it = known_.find(section);
      if (it == known_.end()) throw ConfigError("unknown section '" + section + "'");
      for (const auto& [key, node] : keys) {
        if (!it->second.count(key)) throw ConfigError("unknown key '" + section + "." + key + "'");
      }
    }
  }

  static double parse_real(const std::string& v) {
    double out = 0;
    const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc() || res.ptr != v.data() + v.size())
      throw ConfigError("expected a number, got '" + v + "'");
    return out;
  }

  template <typename Int>
  static Int parse_int(const std::string& v) {
    Int out = 0;
    const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc() || res.ptr != v.data() + v.size())
      throw ConfigError("expected an integer, got '" + v + "'");
    return out;
  }

 private:
  const pt::ptree& tree_;
  std::map<std::string, std::set<std::string>> known_;
};

pt::ptree read_tree(const std::string& text) {
  pt::ptree tree;
  std::istringstream raw(text);
  std::ostringstream kept;
  for (std::string line; std::getline(raw, line);) {
    const std::string t = trim(line);
    kept << (!t.empty() && t[0] == '#' ? "" : line) << '\n';
  }
  std::istringstream in(kept.str());
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("config syntax: " + e.message() + " (line " + std::to_string(e.line()) + ")");
  }
  return tree;
}

}  // namespace

RunConfig parse_run_config(const std::string& text) {
  const pt::ptree tree = read_tree(text);
  Reader rd(tree);
  RunConfig cfg;

  rd.u64("run", "seed", cfg.seed);
  rd.integer("run", "checkpoint_every", cfg.checkpoint_every);
  rd.integer("run", "workers", cfg.workers);

  auto& d = cfg.dataset;
  rd.field("dataset", "kind", [&](const std::string& v) { d.kind = dataset_kind_from_string(v); });
  rd.integer("dataset", "n_train", d.n_train);
  rd.real("dataset", "sigma_data", d.sigma_data);
  rd.integer("dataset", "fit_samples", d.fit_samples);
  rd.list("dataset", "point", d.point);
  rd.list("dataset", "mean", d.mean);
  rd.list("dataset", "std", d.std);
  rd.real("dataset", "radius", d.radius);
  rd.real("dataset", "mode_std", d.mode_std);
  rd.integer("dataset", "cells", d.cells);
  rd.real("dataset", "cell_size", d.cell_size);
  rd.real("dataset", "moons_noise", d.moons_noise);
  rd.text("dataset", "csv_path", d.csv_path);

  rd.field("transport", "kind",
           [&](const std::string& v) { cfg.transport = make_transport(transport_kind_from_string(v)); });
  auto& t = cfg.transport;
  rd.real("transport", "sigma_data", t.sigma_data);
  rd.real("transport", "t_min", t.t_min);
  rd.real("transport", "t_max", t.t_max);
  rd.real("transport", "vp_beta_d", t.vp_beta_d);
  rd.real("transport", "vp_beta_min", t.vp_beta_min);
  rd.real("transport", "vp_T", t.vp_T);
  rd.real("transport", "ve_sigma_min", t.ve_sigma_min);
  rd.real("transport", "ve_sigma_max", t.ve_sigma_max);
  rd.real("transport", "p_mean", t.p_mean);
  rd.real("transport", "p_std", t.p_std);

  auto& n = cfg.network;
  rd.field("network", "backbone", [&](const std::string& v) { n.backbone = backbone_from_string(v); });
  rd.integer("network", "dim", n.dim);
  rd.integer("network", "width", n.width);
  rd.integer("network", "depth", n.depth);
  rd.integer("network", "embed_dim", n.embed_dim);
  rd.integer("network", "n_heads", n.n_heads);
  rd.integer("network", "n_tokens", n.n_tokens);
  rd.integer("network", "n_classes", n.n_classes);
  rd.integer("network", "fourier_bands", n.fourier_bands);
  rd.field("network", "interval_input",
           [&](const std::string& v) { n.interval_input = interval_input_from_string(v); });

  auto& tr = cfg.trainer;
  rd.integer("trainer", "batch_size", tr.batch_size);
  rd.integer("trainer", "iterations", tr.iterations);
  rd.real("trainer", "lr", tr.lr);
  rd.field("trainer", "optimizer", [&](const std::string& v) { tr.optimizer = optimizer_kind_from_string(v); });
  rd.real("trainer", "beta1", tr.beta1);
  rd.real("trainer", "beta2", tr.beta2);
  rd.real("trainer", "eps_opt", tr.eps_opt);
  rd.real("trainer", "grad_clip", tr.grad_clip);
  rd.real("trainer", "ema_decay", tr.ema_decay);
  rd.real("trainer", "dde_eps", tr.dde_eps);
  rd.field("trainer", "weight_kernel",
           [&](const std::string& v) { tr.weight.kernel = weight_kernel_from_string(v); });
  rd.field("trainer", "weight_warp", [&](const std::string& v) { tr.weight.warp = time_warp_from_string(v); });
  rd.real("trainer", "weight_sigma_data", tr.weight.sigma_data);
  rd.real("trainer", "frac_t_eq_r", tr.frac_t_eq_r);
  rd.real("trainer", "frac_r_eq_0", tr.frac_r_eq_0);
  rd.real("trainer", "loss_norm_c", tr.loss_norm_c);
  rd.real("trainer", "cosine_loss_scale", tr.cosine_loss_scale);
  rd.real("trainer", "guidance_omega", tr.guidance_omega);
  rd.boolean("trainer", "guidance_enabled", tr.guidance_enabled);
  rd.integer("trainer", "guidance_warmup_iters", tr.guidance_warmup_iters);
  rd.real("trainer", "cond_dropout", tr.cond_dropout);
  rd.integer("trainer", "probe_every", tr.probe_every);
  rd.integer("trainer", "probe_samples", tr.probe_samples);

  auto& s = cfg.sampler;
  rd.integer("sampler", "steps", s.steps);
  rd.field("sampler", "schedule", [&](const std::string& v) {
    if (v == "uniform") {
      s.schedule = ScheduleKind::Uniform;
    } else if (v == "shifted") {
      s.schedule = ScheduleKind::Shifted;
    } else {
      throw ConfigError("unknown schedule '" + v + "'");
    }
  });
  rd.real("sampler", "shift_ratio", s.shift_ratio);
  rd.real("sampler", "rho", s.rho);
  rd.real("sampler", "cfg_omega", s.cfg_omega);
  rd.integer("sampler", "n", s.n);
  rd.boolean("sampler", "eps_at_same_time", s.eps_at_same_time);
  rd.boolean("sampler", "use_ema", s.use_ema);

  rd.reject_unknown();

  cfg.dataset.seed = cfg.seed;
  cfg.network.seed = cfg.seed;
  cfg.trainer.seed = cfg.seed;
  cfg.trainer.workers = cfg.workers;
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

std::string serialize_run_config(const RunConfig& cfg) {
  std::ostringstream os;
  auto kv = [&](const std::string& k, const std::string& v) { os << k << " = " << v << '\n'; };
  auto real = [&](const std::string& k, double v) { kv(k, fmt(v)); };
  auto list = [&](const std::string& k, const std::vector<double>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + fmt(v[i]);
    kv(k, out);
  };
  auto boolean = [&](const std::string& k, bool v) { kv(k, v ? "true" : "false"); };

  os << "[run]\n";
  kv("seed", std::to_string(cfg.seed));
  kv("checkpoint_every", std::to_string(cfg.checkpoint_every));
  kv("workers", std::to_string(cfg.workers));

  const auto& d = cfg.dataset;
  os << "\n[dataset]\n";
  kv("kind", std::string(to_string(d.kind)));
  kv("n_train", std::to_string(d.n_train));
  real("sigma_data", d.sigma_data);
  kv("fit_samples", std::to_string(d.fit_samples));
  list("point", d.point);
  list("mean", d.mean);
  list("std", d.std);
  real("radius", d.radius);
  real("mode_std", d.mode_std);
  kv("cells", std::to_string(d.cells));
  real("cell_size", d.cell_size);
  real("moons_noise", d.moons_noise);
  kv("csv_path", d.csv_path);

  const auto& t = cfg.transport;
  os << "\n[transport]\n";
  kv("kind", std::string(to_string(t.kind)));
  real("sigma_data", t.sigma_data);
  real("t_min", t.t_min);
  real("t_max", t.t_max);
  real("vp_beta_d", t.vp_beta_d);
  real("vp_beta_min", t.vp_beta_min);
  real("vp_T", t.vp_T);
  real("ve_sigma_min", t.ve_sigma_min);
  real("ve_sigma_max", t.ve_sigma_max);
  real("p_mean", t.p_mean);
  real("p_std", t.p_std);

  const auto& n = cfg.network;
  os << "\n[network]\n";
  kv("backbone", std::string(to_string(n.backbone)));
  kv("dim", std::to_string(n.dim));
  kv("width", std::to_string(n.width));
  kv("depth", std::to_string(n.depth));
  kv("embed_dim", std::to_string(n.embed_dim));
  kv("n_heads", std::to_string(n.n_heads));
  kv("n_tokens", std::to_string(n.n_tokens));
  kv("n_classes", std::to_string(n.n_classes));
  kv("fourier_bands", std::to_string(n.fourier_bands));
  kv("interval_input", std::string(to_string(n.interval_input)));

  const auto& tr = cfg.trainer;
  os << "\n[trainer]\n";
  kv("batch_size", std::to_string(tr.batch_size));
  kv("iterations", std::to_string(tr.iterations));
  real("lr", tr.lr);
  kv("optimizer", std::string(to_string(tr.optimizer)));
  real("beta1", tr.beta1);
  real("beta2", tr.beta2);
  real("eps_opt", tr.eps_opt);
  real("grad_clip", tr.grad_clip);
  real("ema_decay", tr.ema_decay);
  real("dde_eps", tr.dde_eps);
  kv("weight_kernel", std::string(to_string(tr.weight.kernel)));
  kv("weight_warp", std::string(to_string(tr.weight.warp)));
  real("weight_sigma_data", tr.weight.sigma_data);
  real("frac_t_eq_r", tr.frac_t_eq_r);
  real("frac_r_eq_0", tr.frac_r_eq_0);
  real("loss_norm_c", tr.loss_norm_c);
  real("cosine_loss_scale", tr.cosine_loss_scale);
  real("guidance_omega", tr.guidance_omega);
  boolean("guidance_enabled", tr.guidance_enabled);
  kv("guidance_warmup_iters", std::to_string(tr.guidance_warmup_iters));
  real("cond_dropout", tr.cond_dropout);
  kv("probe_every", std::to_string(tr.probe_every));
  kv("probe_samples", std::to_string(tr.probe_samples));

  const auto& s = cfg.sampler;
  os << "\n[sampler]\n";
  kv("steps", std::to_string(s.steps));
  kv("schedule", s.schedule == ScheduleKind::Uniform ? "uniform" : "shifted");
  real("shift_ratio", s.shift_ratio);
  real("rho", s.rho);
  real("cfg_omega", s.cfg_omega);
  kv("n", std::to_string(s.n));
  boolean("eps_at_same_time", s.eps_at_same_time);
  boolean("use_ema", s.use_ema);
  return os.str();
}

std::string apply_overrides(const std::string& text, const std::vector<std::string>& overrides) {
  pt::ptree tree = read_tree(text);
  for (const std::string& o : overrides) {
    const auto eq = o.find('=');
    const auto dot = o.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq)
      throw ConfigError("override '" + o + "' is not section.key=value");
    const std::string section = trim(o.substr(0, dot));
    const std::string key = trim(o.substr(dot + 1, eq - dot - 1));
    auto sec = tree.get_child_optional(pt::ptree::path_type(section, '\0'));
    if (!sec) sec = tree.put_child(pt::ptree::path_type(section, '\0'), pt::ptree());
    sec->put(pt::ptree::path_type(key, '\0'), trim(o.substr(eq + 1)));
  }
  std::ostringstream os;
  pt::write_ini(os, tree);
  return os.str();
}

RunConfig resolve(const RunConfig& cfg, Eigen::Index data_dim) {
  RunConfig out = cfg;
  if (out.network.dim == 0) out.network.dim = static_cast<int>(data_dim);
  if (out.network.dim != data_dim)
    throw ConfigError("network.dim = " + std::to_string(out.network.dim) + " but the dataset has dimension " +
                      std::to_string(data_dim));
  if (out.workers < 1) throw ConfigError("run.workers must be positive");
  if (out.checkpoint_every < 0) throw ConfigError("run.checkpoint_every must be non-negative");
  try {
    validate(out.transport);
    validate(out.network);
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  validate(out.trainer, out.transport);
  const auto& s = out.sampler;
  if (s.steps < 1) throw ConfigError("sampler.steps must be positive");
  if (s.n < 1) throw ConfigError("sampler.n must be positive");
  if (!(s.rho >= 0)) throw ConfigError("sampler.rho must be non-negative");
  if (!(s.cfg_omega >= 1)) throw ConfigError("sampler.cfg_omega must be at least 1");
  if (s.schedule == ScheduleKind::Shifted && !(s.shift_ratio > 0))
    throw ConfigError("sampler.shift_ratio must be positive for the shifted schedule");
  return out;
}

ToyDataset make_dataset(const RunConfig& cfg) {
  try {
    return ToyDataset(cfg.dataset);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(std::string("dataset: ") + e.what());
  }
}

SampleSchedule make_schedule(const RunConfig& cfg) {
  const auto& s = cfg.sampler;
  std::optional<double> ratio;
  if (s.schedule == ScheduleKind::Shifted) ratio = s.shift_ratio;
  SampleSchedule sched = build_schedule(cfg.transport, s.steps, s.schedule, ratio);
  sched.rho = s.rho;
  sched.cfg_omega = s.cfg_omega;
  sched.seed = cfg.seed;
  sched.eps_at_same_time = s.eps_at_same_time;
  return sched;
}

}  // namespace tim
