#include "fedrco/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "fedrco/error.hpp"

namespace fedrco::config {
namespace {

using nlohmann::json;

[[noreturn]] void invalid(const std::string& path, const std::string& what) {
  throw Error(ErrorCode::ConfigInvalid, path + ": " + what);
}

// Reads the keys of one JSON object and rejects any it was not asked about.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) invalid(path_.empty() ? "<root>" : path_, "expected an object");
  }

  std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const json* find(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void number(const std::string& key, double& out) {
    if (const json* v = find(key)) {
      if (!v->is_number()) invalid(at(key), "expected a number");
      out = v->get<double>();
    }
  }

  template <class Int>
  void count(const std::string& key, Int& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_integer() || v->get<long long>() < 0) {
        invalid(at(key), "expected a non-negative integer");
      }
      out = static_cast<Int>(v->get<unsigned long long>());
    }
  }

  void signed_count(const std::string& key, long& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_integer()) invalid(at(key), "expected an integer");
      out = v->get<long>();
    }
  }

  void flag(const std::string& key, bool& out) {
    if (const json* v = find(key)) {
      if (!v->is_boolean()) invalid(at(key), "expected true or false");
      out = v->get<bool>();
    }
  }

  void text(const std::string& key, std::string& out) {
    if (const json* v = find(key)) {
      if (!v->is_string()) invalid(at(key), "expected a string");
      out = v->get<std::string>();
    }
  }

  void counts(const std::string& key, std::vector<std::size_t>& out) {
    if (const json* v = find(key)) {
      if (!v->is_array()) invalid(at(key), "expected an array of integers");
      out.clear();
      for (const auto& e : *v) {
        if (!e.is_number_integer() || e.get<long long>() <= 0) {
          invalid(at(key), "expected positive integers");
        }
        out.push_back(e.get<std::size_t>());
      }
    }
  }

  template <class Enum>
  void choice(const std::string& key, Enum& out,
              std::initializer_list<std::pair<const char*, Enum>> options) {
    std::string name;
    text(key, name);
    if (name.empty() && !j_.contains(key)) return;
    for (const auto& [n, e] : options) {
      if (name == n) {
        out = e;
        return;
      }
    }
    invalid(at(key), "unknown value '" + name + "'");
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) invalid(at(k), "unknown key");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void require(bool ok, const std::string& path, const std::string& what) {
  if (!ok) invalid(path, what);
}

const std::vector<std::pair<std::string, std::string>>& aliases() {
  static const std::vector<std::pair<std::string, std::string>> a = {
      {"t_inv", "kfac.t_inv"},
      {"alpha", "partition.alpha"},
      {"eps", "kfac.eps"},
      {"mu", "fedprox.mu"},
  };
  return a;
}

}  // namespace

ExperimentConfig from_json(const json& doc) {
  ExperimentConfig cfg;
  auto& fed = cfg.federation;
  auto& local = fed.local;
  Section root(doc, "");

  std::string method = federation::to_string(local.method);
  root.text("method", method);
  try {
    local.method = federation::parse_method(method);
  } catch (const Error&) {
    invalid("method", "unknown value '" + method + "'");
  }
  root.count("seed", fed.seed);
  root.count("clients", fed.clients);
  root.number("ratio", fed.ratio);
  root.count("rounds", cfg.rounds);
  root.count("local_epochs", local.local_steps);
  root.count("batch_size", local.batch_size);
  root.number("lr", local.lr);
  root.count("workers", fed.workers);
  require(fed.clients > 0, "clients", "must be positive");
  require(fed.ratio > 0.0 && fed.ratio <= 1.0, "ratio", "must lie in (0, 1]");
  require(local.local_steps > 0, "local_epochs", "must be positive");
  require(local.batch_size > 0, "batch_size", "must be positive");
  require(local.lr > 0.0, "lr", "must be positive");
  require(fed.workers > 0, "workers", "must be positive");

  if (const json* j = root.find("dataset")) {
    Section s(*j, "dataset");
    auto& d = cfg.dataset;
    s.choice("kind", d.kind, {{"synthetic", DatasetKind::Synthetic}, {"file", DatasetKind::File}});
    s.count("dim", d.synthetic.dim);
    s.count("classes", d.synthetic.classes);
    s.count("train_samples", d.synthetic.samples);
    s.count("test_samples", d.test_samples);
    s.number("separation", d.synthetic.separation);
    s.text("train_path", d.train_path);
    s.text("test_path", d.test_path);
    s.finish();
    require(d.synthetic.dim > 0, "dataset.dim", "must be positive");
    require(d.synthetic.classes >= 2, "dataset.classes", "must be at least 2");
    require(d.synthetic.samples >= d.synthetic.classes, "dataset.train_samples",
            "must be at least the class count");
    require(d.synthetic.separation >= 0.0, "dataset.separation", "must be >= 0");
    if (d.kind == DatasetKind::File) {
      require(!d.train_path.empty(), "dataset.train_path", "required for kind 'file'");
      require(!d.test_path.empty(), "dataset.test_path", "required for kind 'file'");
    }
  }

  if (const json* j = root.find("partition")) {
    Section s(*j, "partition");
    auto& p = cfg.partition;
    s.choice("kind", p.kind,
             {{"dirichlet", PartitionKind::Dirichlet},
              {"pathological", PartitionKind::Pathological},
              {"iid", PartitionKind::Iid}});
    s.number("alpha", p.alpha);
    s.count("labels_per_client", p.labels_per_client);
    s.finish();
    require(p.alpha > 0.0, "partition.alpha", "must be positive");
    require(p.labels_per_client > 0, "partition.labels_per_client", "must be positive");
  }

  if (const json* j = root.find("model")) {
    Section s(*j, "model");
    auto& m = cfg.model;
    s.choice("kind", m.kind, {{"dense", ModelKind::Dense}, {"cnn", ModelKind::Cnn}});
    s.counts("hidden", m.hidden);
    s.counts("conv_channels", m.conv_channels);
    s.count("kernel", m.kernel);
    s.finish();
    require(m.kernel > 0, "model.kernel", "must be positive");
    require(m.kind == ModelKind::Dense || !m.conv_channels.empty(), "model.conv_channels",
            "must not be empty for a cnn");
  }

  if (const json* j = root.find("kfac")) {
    Section s(*j, "kfac");
    auto& k = local.kfac;
    s.number("ema_alpha", k.ema_alpha);
    s.number("eps", k.damping_eps);
    s.count("t_inv", k.t_inv);
    s.choice("pi_mode", k.pi_mode,
             {{"normalized", kfac::PiMode::Normalized}, {"literal", kfac::PiMode::Literal}});
    s.choice("conv_gamma_norm", k.conv_gamma_norm,
             {{"positions", model::GammaNormalization::Positions},
              {"batch", model::GammaNormalization::BatchOnly}});
    s.flag("identity_preconditioner", k.identity_preconditioner);
    s.finish();
    require(k.ema_alpha > 0.0 && k.ema_alpha <= 1.0, "kfac.ema_alpha", "must lie in (0, 1]");
    require(k.damping_eps > 0.0, "kfac.eps", "must be positive");
    require(k.t_inv > 0, "kfac.t_inv", "must be positive");
  }

  if (const json* j = root.find("stability")) {
    Section s(*j, "stability");
    auto& st = local.stability;
    s.flag("enabled", st.enabled);
    s.number("tau_low", st.tau_low);
    s.number("tau_high", st.tau_high);
    s.number("xi", st.xi);
    s.number("grad_stable", st.grad_stable);
    s.count("window", st.window);
    s.count("max_consecutive", st.max_consecutive);
    s.count("warmup", st.warmup);
    s.finish();
    require(st.tau_low > 1.0, "stability.tau_low", "must exceed 1");
    require(st.tau_high > st.tau_low, "stability.tau_high", "must exceed tau_low");
    require(st.xi > 0.0, "stability.xi", "must be positive");
    require(st.grad_stable > 0.0, "stability.grad_stable", "must be positive");
    require(st.window > 0, "stability.window", "must be positive");
    require(st.warmup <= st.window, "stability.warmup", "cannot exceed window");
  }

  if (const json* j = root.find("aggregation")) {
    Section s(*j, "aggregation");
    s.choice("strategy", fed.aggregation.strategy,
             {{"adaptive", federation::AggregationStrategy::Adaptive},
              {"plain", federation::AggregationStrategy::Plain}});
    s.flag("swap_gamma", fed.aggregation.swap_gamma);
    s.finish();
  }

  if (const json* j = root.find("fedprox")) {
    Section s(*j, "fedprox");
    s.number("mu", local.prox_mu);
    s.finish();
    require(local.prox_mu >= 0.0, "fedprox.mu", "must be >= 0");
  }

  // FedAdam takes a smaller server step unless one is given explicitly.
  if (local.method == federation::Method::FedAdam) fed.server.lr = 0.01;
  if (const json* j = root.find("server")) {
    Section s(*j, "server");
    s.number("momentum", fed.server.momentum);
    s.number("beta1", fed.server.beta1);
    s.number("beta2", fed.server.beta2);
    s.number("adam_eps", fed.server.adam_eps);
    s.number("lr", fed.server.lr);
    s.finish();
    require(fed.server.momentum >= 0.0 && fed.server.momentum < 1.0, "server.momentum",
            "must lie in [0, 1)");
    require(fed.server.beta1 >= 0.0 && fed.server.beta1 < 1.0, "server.beta1", "must lie in [0, 1)");
    require(fed.server.beta2 >= 0.0 && fed.server.beta2 < 1.0, "server.beta2", "must lie in [0, 1)");
    require(fed.server.adam_eps > 0.0, "server.adam_eps", "must be positive");
    require(fed.server.lr > 0.0, "server.lr", "must be positive");
  }

  if (const json* j = root.find("fault")) {
    Section s(*j, "fault");
    auto& f = local.fault;
    s.choice("kind", f.kind,
             {{"none", federation::FaultKind::None},
              {"gradient_scale", federation::FaultKind::GradientScale},
              {"geometric_growth", federation::FaultKind::GeometricGrowth},
              {"singular_factor", federation::FaultKind::SingularFactor},
              {"nonfinite", federation::FaultKind::NonFinite}});
    s.signed_count("round", f.round);
    s.signed_count("client", f.client);
    s.count("epoch", f.epoch);
    s.number("factor", f.factor);
    s.number("ratio", f.ratio);
    s.finish();
  }
  root.finish();

  if (cfg.partition.kind == PartitionKind::Pathological) {
    require(cfg.partition.labels_per_client <= cfg.dataset.synthetic.classes ||
                cfg.dataset.kind == DatasetKind::File,
            "partition.labels_per_client", "exceeds the class count");
  }
  return cfg;
}

json to_json(const ExperimentConfig& cfg) {
  const auto& fed = cfg.federation;
  const auto& local = fed.local;
  const auto& d = cfg.dataset;
  const auto& p = cfg.partition;
  const auto& m = cfg.model;
  auto fault_kind = [](federation::FaultKind k) {
    switch (k) {
      case federation::FaultKind::None: return "none";
      case federation::FaultKind::GradientScale: return "gradient_scale";
      case federation::FaultKind::GeometricGrowth: return "geometric_growth";
      case federation::FaultKind::SingularFactor: return "singular_factor";
      case federation::FaultKind::NonFinite: return "nonfinite";
    }
    return "none";
  };
  json j;
  j["method"] = federation::to_string(local.method);
  j["seed"] = fed.seed;
  j["clients"] = fed.clients;
  j["ratio"] = fed.ratio;
  j["rounds"] = cfg.rounds;
  j["local_epochs"] = local.local_steps;
  j["batch_size"] = local.batch_size;
  j["lr"] = local.lr;
  j["workers"] = fed.workers;
  j["dataset"] = {{"kind", d.kind == DatasetKind::File ? "file" : "synthetic"},
                  {"dim", d.synthetic.dim},
                  {"classes", d.synthetic.classes},
                  {"train_samples", d.synthetic.samples},
                  {"test_samples", d.test_samples},
                  {"separation", d.synthetic.separation},
                  {"train_path", d.train_path},
                  {"test_path", d.test_path}};
  j["partition"] = {{"kind", p.kind == PartitionKind::Dirichlet      ? "dirichlet"
                             : p.kind == PartitionKind::Pathological ? "pathological"
                                                                     : "iid"},
                    {"alpha", p.alpha},
                    {"labels_per_client", p.labels_per_client}};
  j["model"] = {{"kind", m.kind == ModelKind::Dense ? "dense" : "cnn"},
                {"hidden", m.hidden},
                {"conv_channels", m.conv_channels},
                {"kernel", m.kernel}};
  j["kfac"] = {{"ema_alpha", local.kfac.ema_alpha},
               {"eps", local.kfac.damping_eps},
               {"t_inv", local.kfac.t_inv},
               {"pi_mode", local.kfac.pi_mode == kfac::PiMode::Normalized ? "normalized" : "literal"},
               {"conv_gamma_norm", local.kfac.conv_gamma_norm == model::GammaNormalization::Positions
                                       ? "positions"
                                       : "batch"},
               {"identity_preconditioner", local.kfac.identity_preconditioner}};
  j["stability"] = {{"enabled", local.stability.enabled},
                    {"tau_low", local.stability.tau_low},
                    {"tau_high", local.stability.tau_high},
                    {"xi", local.stability.xi},
                    {"grad_stable", local.stability.grad_stable},
                    {"window", local.stability.window},
                    {"max_consecutive", local.stability.max_consecutive},
                    {"warmup", local.stability.warmup}};
  j["aggregation"] = {
      {"strategy",
       fed.aggregation.strategy == federation::AggregationStrategy::Adaptive ? "adaptive" : "plain"},
      {"swap_gamma", fed.aggregation.swap_gamma}};
  j["fedprox"] = {{"mu", local.prox_mu}};
  j["server"] = {{"momentum", fed.server.momentum},
                 {"beta1", fed.server.beta1},
                 {"beta2", fed.server.beta2},
                 {"adam_eps", fed.server.adam_eps},
                 {"lr", fed.server.lr}};
  j["fault"] = {{"kind", fault_kind(local.fault.kind)},
                {"round", local.fault.round},
                {"client", local.fault.client},
                {"epoch", local.fault.epoch},
                {"factor", local.fault.factor},
                {"ratio", local.fault.ratio}};
  return j;
}

ExperimentConfig load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open config " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::ConfigInvalid, path.string() + ": " + e.what());
  }
  return from_json(doc);
}

void set_value(json& doc, const std::string& key, const std::string& value) {
  std::string full = key;
  for (const auto& [alias, target] : aliases()) {
    if (key == alias) full = target;
  }
  json parsed;
  try {
    parsed = json::parse(value);
  } catch (const json::parse_error&) {
    parsed = value;
  }
  json* node = &doc;
  std::stringstream ss(full);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  if (parts.empty()) invalid(key, "empty key");
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->is_object()) invalid(full, "parent is not an object");
    node = &(*node)[parts[i]];
    if (node->is_null()) *node = json::object();
  }
  if (!node->is_object()) invalid(full, "parent is not an object");
  (*node)[parts.back()] = parsed;
  from_json(doc);
}

}  // namespace fedrco::config
