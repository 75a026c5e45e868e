#include "vlfuzz/config.hpp"

#include <fstream>
#include <set>

namespace vlfuzz::config {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// Reads fields of one JSON object and rejects any key it was not asked about.
class Obj {
 public:
  Obj(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) && !j_.at(key).is_null();
  }

  const json& raw(const std::string& key) {
    seen_.insert(key);
    if (!j_.contains(key)) throw ConfigError(field(key), "is required");
    return j_.at(key);
  }

  template <typename T>
  T get(const std::string& key) {
    const json& v = raw(key);
    return convert<T>(v, field(key));
  }

  template <typename T>
  T get(const std::string& key, T fallback) {
    if (!has(key)) return fallback;
    return convert<T>(j_.at(key), field(key));
  }

  Obj child(const std::string& key) { return Obj(raw(key), field(key)); }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (seen_.count(k) == 0) throw ConfigError(field(k), "unknown field");
    }
  }

  template <typename T>
  static T convert(const json& v, const std::string& f) {
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ConfigError(f, "expected a boolean");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw ConfigError(f, "expected an integer");
        if constexpr (std::is_unsigned_v<T>) {
          if (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0) {
            throw ConfigError(f, "expected a nonnegative integer");
          }
        }
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw ConfigError(f, "expected a number");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw ConfigError(f, "expected a string");
      }
      return v.get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(f, e.what());
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <typename F>
void checked(const std::string& field, F&& fn) {
  try {
    fn();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(field, e.what());
  }
}

gateway::DecodingParams parse_decoding(Obj o, gateway::DecodingParams d) {
  d.temperature = o.get<double>("temperature", d.temperature);
  d.top_p = o.get<double>("top_p", d.top_p);
  d.max_tokens = o.get<int>("max_tokens", d.max_tokens);
  d.n_samples = o.get<int>("n_samples", d.n_samples);
  o.finish();
  return d;
}

gateway::ModelEndpoint parse_endpoint(Obj o) {
  gateway::ModelEndpoint e;
  e.name = o.get<std::string>("name");
  checked(o.field("kind"), [&] { e.kind = gateway::endpoint_kind_from_string(o.get<std::string>("kind")); });
  checked(o.field("transport"),
          [&] { e.transport = gateway::transport_from_string(o.get<std::string>("transport")); });
  e.base_url = o.get<std::string>("base_url", "");
  e.model_id = o.get<std::string>("model_id", "");
  e.profile = o.get<std::string>("profile", "");
  e.auth_env_var = o.get<std::string>("auth_env_var", "");
  e.timeout_ms = o.get<int>("timeout_ms", e.timeout_ms);
  const auto defaults = e.kind == gateway::EndpointKind::Generator
                            ? gateway::DecodingParams::generation_defaults()
                            : gateway::DecodingParams::answering_defaults();
  e.decoding = o.has("decoding") ? parse_decoding(o.child("decoding"), defaults) : defaults;
  for (const char* secret : {"api_key", "token", "authorization", "password"}) {
    if (o.has(secret)) {
      throw ConfigError(o.field(secret),
                        "credentials are read from the variable named by auth_env_var, never from config");
    }
  }
  o.finish();
  checked(o.field("name"), [&] { e.validate(); });
  return e;
}

std::vector<double> parse_prior(Obj& o, const std::string& key, std::size_t n) {
  if (!o.has(key)) return std::vector<double>(n, 1.0 / static_cast<double>(n));
  const json& v = o.raw(key);
  if (v.is_string() && v.get<std::string>() == "uniform") {
    return std::vector<double>(n, 1.0 / static_cast<double>(n));
  }
  if (!v.is_array()) throw ConfigError(o.field(key), "expected \"uniform\" or an array of weights");
  std::vector<double> out;
  for (const auto& x : v) {
    if (!x.is_number()) throw ConfigError(o.field(key), "weights must be numbers");
    out.push_back(x.get<double>());
  }
  if (out.size() != n) {
    throw ConfigError(o.field(key), "expected " + std::to_string(n) + " weights, got " + std::to_string(out.size()));
  }
  return out;
}

void require_kind(const Config& c, const std::string& name, gateway::EndpointKind kind,
                  const std::string& field) {
  const gateway::ModelEndpoint* found = nullptr;
  for (const auto& e : c.endpoints) {
    if (e.name == name) found = &e;
  }
  if (found == nullptr) throw ConfigError(field, "no endpoint named " + name);
  if (found->kind != kind) {
    throw ConfigError(field, "endpoint " + name + " is a " + gateway::to_string(found->kind) +
                                 " endpoint, expected " + gateway::to_string(kind));
  }
}

}  // namespace

fs::path Config::resolve(const std::string& p) const {
  fs::path path(p);
  if (path.is_absolute()) return path;
  return (base_dir / path).lexically_normal();
}

const gateway::ModelEndpoint& Config::endpoint(const std::string& name) const {
  for (const auto& e : endpoints) {
    if (e.name == name) return e;
  }
  throw std::out_of_range("no endpoint named " + name);
}

Config parse_config(const json& doc, const fs::path& base_dir) {
  Config c;
  c.base_dir = base_dir;
  Obj root(doc, "");
  c.seed = root.get<std::uint64_t>("seed", c.seed);
  c.runs_dir = root.get<std::string>("runs_dir", c.runs_dir);
  c.deterministic_clock = root.get<bool>("deterministic_clock", c.deterministic_clock);

  {
    Obj pool = root.child("pool");
    c.pool_dir = pool.get<std::string>("dir");
    if (pool.has("split_fractions")) {
      const auto v = pool.get<std::vector<double>>("split_fractions");
      if (v.size() != 3) throw ConfigError(pool.field("split_fractions"), "expected three fractions");
      double sum = 0.0;
      for (std::size_t i = 0; i < 3; ++i) {
        if (!(v[i] >= 0.0)) throw ConfigError(pool.field("split_fractions"), "fractions must be nonnegative");
        c.split_fractions[i] = v[i];
        sum += v[i];
      }
      if (std::abs(sum - 1.0) > 1e-9) throw ConfigError(pool.field("split_fractions"), "fractions must sum to 1");
    }
    c.pool_seed = pool.get<std::uint64_t>("seed", c.pool_seed);
    pool.finish();
  }
  if (root.has("fixtures")) c.fixtures = root.get<std::string>("fixtures");

  {
    const json& eps = root.raw("endpoints");
    if (!eps.is_array() || eps.empty()) throw ConfigError("endpoints", "expected a nonempty array");
    std::set<std::string> names;
    for (std::size_t i = 0; i < eps.size(); ++i) {
      auto e = parse_endpoint(Obj(eps[i], "endpoints[" + std::to_string(i) + "]"));
      if (!names.insert(e.name).second) {
        throw ConfigError("endpoints[" + std::to_string(i) + "].name", "duplicate endpoint " + e.name);
      }
      c.endpoints.push_back(std::move(e));
    }
  }
  if (root.has("sim_profiles")) {
    const json& ps = root.raw("sim_profiles");
    if (!ps.is_array()) throw ConfigError("sim_profiles", "expected an array");
    for (std::size_t i = 0; i < ps.size(); ++i) {
      checked("sim_profiles[" + std::to_string(i) + "]",
              [&] { c.sim_profiles.push_back(sim::profile_from_json(ps[i])); });
    }
  }

  {
    Obj m = root.child("models");
    c.generator = m.get<std::string>("generator");
    c.target = m.get<std::string>("target");
    c.judge = m.get<std::string>("judge");
    c.heldout_targets = m.get<std::vector<std::string>>("heldout_targets", {});
    m.finish();
    require_kind(c, c.generator, gateway::EndpointKind::Generator, "models.generator");
    require_kind(c, c.target, gateway::EndpointKind::Target, "models.target");
    require_kind(c, c.judge, gateway::EndpointKind::Judge, "models.judge");
    for (std::size_t i = 0; i < c.heldout_targets.size(); ++i) {
      require_kind(c, c.heldout_targets[i], gateway::EndpointKind::Target,
                   "models.heldout_targets[" + std::to_string(i) + "]");
    }
  }

  if (root.has("priors")) {
    Obj p = root.child("priors");
    c.priors.p_d = parse_prior(p, "subdimensions", taxonomy::kSubdimensionCount);
    c.priors.p_r = parse_prior(p, "roles", taxonomy::kRoleCount);
    p.finish();
    checked("priors", [&] { c.priors.validate(); });
  }

  if (root.has("campaign")) {
    Obj o = root.child("campaign");
    c.n_per_context = o.get<int>("n_per_context", c.n_per_context);
    if (c.n_per_context < 2) throw ConfigError(o.field("n_per_context"), "must be at least 2");
    c.images_per_iteration = o.get<int>("images_per_iteration", c.images_per_iteration);
    if (c.images_per_iteration < 0) throw ConfigError(o.field("images_per_iteration"), "must be nonnegative");
    c.with_role_exemplars = o.get<bool>("with_role_exemplars", c.with_role_exemplars);
    c.max_in_flight = o.get<int>("max_in_flight", c.max_in_flight);
    if (c.max_in_flight <= 0) throw ConfigError(o.field("max_in_flight"), "must be positive");
    if (o.has("perturbation")) {
      Obj p = o.child("perturbation");
      checked(p.field("kind"), [&] {
        c.perturbation.kind = images::perturbation_from_string(p.get<std::string>("kind"));
      });
      c.perturbation.noise_sigma = p.get<double>("noise_sigma", c.perturbation.noise_sigma);
      c.perturbation.rng_seed = p.get<std::uint64_t>("rng_seed", c.perturbation.rng_seed);
      p.finish();
      checked(p.field("noise_sigma"), [&] { c.perturbation.validate(); });
    }
    o.finish();
  }

  if (root.has("gate")) {
    Obj g = root.child("gate");
    c.gate.n_votes = g.get<int>("n_votes", c.gate.n_votes);
    c.gate.agreement_min = g.get<double>("agreement_min", c.gate.agreement_min);
    c.gate.confidence_min = g.get<double>("confidence_min", c.gate.confidence_min);
    g.finish();
    checked("gate", [&] { c.gate.validate(); });
  }
  if (root.has("human")) {
    Obj h = root.child("human");
    c.lease_seconds = h.get<int>("lease_seconds", c.lease_seconds);
    if (c.lease_seconds <= 0) throw ConfigError(h.field("lease_seconds"), "must be positive");
    h.finish();
  }

  if (root.has("policy")) {
    Obj p = root.child("policy");
    checked(p.field("granularity"), [&] {
      c.granularity = dpo::granularity_from_string(
          p.get<std::string>("granularity", dpo::to_string(c.granularity)));
    });
    c.drive_generator = p.get<bool>("drive_generator", c.drive_generator);
    p.finish();
  }
  if (root.has("sft")) {
    Obj s = root.child("sft");
    c.sft_seed_images = s.get<int>("seed_images", c.sft_seed_images);
    if (c.sft_seed_images <= 0) throw ConfigError(s.field("seed_images"), "must be positive");
    c.sft.learning_rate = s.get<double>("learning_rate", c.sft.learning_rate);
    c.sft.steps = s.get<int>("steps", c.sft.steps);
    s.finish();
    checked("sft", [&] { c.sft.validate(); });
  }
  if (root.has("dpo")) {
    Obj d = root.child("dpo");
    c.dpo.beta = d.get<double>("beta", c.dpo.beta);
    c.dpo.lambda_kl = d.get<double>("lambda_kl", c.dpo.lambda_kl);
    c.dpo.learning_rate = d.get<double>("learning_rate", c.dpo.learning_rate);
    c.dpo.steps = d.get<int>("steps", c.dpo.steps);
    c.dpo.rng_seed = d.get<std::uint64_t>("rng_seed", c.dpo.rng_seed);
    c.refresh_reference = d.get<bool>("refresh_reference", c.refresh_reference);
    d.finish();
    checked("dpo", [&] { c.dpo.validate(); });
  }
  c.iterations = root.get<int>("iterations", c.iterations);
  if (c.iterations < 0) throw ConfigError("iterations", "must be nonnegative");
  if (root.has("eval")) {
    Obj e = root.child("eval");
    c.eval_split = e.get<std::string>("split", c.eval_split);
    checked(e.field("split"), [&] { images::split_from_string(c.eval_split); });
    e.finish();
  }
  root.finish();

  std::set<std::string> profiles{"sim-generator", "default", "heldout-a", "heldout-b"};
  for (const auto& p : c.sim_profiles) profiles.insert(p.name);
  bool any_sim = false;
  for (std::size_t i = 0; i < c.endpoints.size(); ++i) {
    const auto& e = c.endpoints[i];
    if (e.transport != gateway::TransportKind::Simulated) continue;
    any_sim = true;
    const std::string f = "endpoints[" + std::to_string(i) + "].profile";
    if (e.kind == gateway::EndpointKind::Judge) {
      checked(f, [&] { sim::judge_behavior_from_string(e.profile); });
    } else if (e.kind == gateway::EndpointKind::Generator) {
      if (e.profile != "sim-generator") throw ConfigError(f, "simulated generators use profile sim-generator");
    } else if (profiles.count(e.profile) == 0) {
      throw ConfigError(f, "unknown simulator profile " + e.profile);
    }
  }
  if (any_sim && !c.fixtures) throw ConfigError("fixtures", "simulated endpoints need a fixtures file");
  return c;
}

Config load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("<file>", "cannot open " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("<file>", std::string("invalid JSON: ") + e.what());
  }
  return parse_config(doc, fs::absolute(path).parent_path());
}

json Config::to_json() const {
  json eps = json::array();
  for (const auto& e : endpoints) eps.push_back(gateway::to_json(e));
  json profs = json::array();
  for (const auto& p : sim_profiles) profs.push_back(sim::to_json(p));
  json j;
  j["seed"] = seed;
  j["runs_dir"] = runs_dir;
  j["deterministic_clock"] = deterministic_clock;
  j["pool"] = {{"dir", pool_dir}, {"split_fractions", split_fractions}, {"seed", pool_seed}};
  j["fixtures"] = fixtures ? json(*fixtures) : json(nullptr);
  j["endpoints"] = eps;
  j["sim_profiles"] = profs;
  j["models"] = {{"generator", generator},
                 {"target", target},
                 {"judge", judge},
                 {"heldout_targets", heldout_targets}};
  j["priors"] = {{"subdimensions", priors.p_d}, {"roles", priors.p_r}};
  j["campaign"] = {{"n_per_context", n_per_context},
                   {"images_per_iteration", images_per_iteration},
                   {"with_role_exemplars", with_role_exemplars},
                   {"max_in_flight", max_in_flight},
                   {"perturbation", images::to_json(perturbation)}};
  j["gate"] = judge::to_json(gate);
  j["human"] = {{"lease_seconds", lease_seconds}};
  j["policy"] = {{"granularity", dpo::to_string(granularity)}, {"drive_generator", drive_generator}};
  j["sft"] = {{"seed_images", sft_seed_images},
              {"learning_rate", sft.learning_rate},
              {"steps", sft.steps}};
  j["dpo"] = {{"beta", dpo.beta},
              {"lambda_kl", dpo.lambda_kl},
              {"learning_rate", dpo.learning_rate},
              {"steps", dpo.steps},
              {"rng_seed", dpo.rng_seed},
              {"refresh_reference", refresh_reference}};
  j["iterations"] = iterations;
  j["eval"] = {{"split", eval_split}};
  return j;
}

}  // namespace vlfuzz::config
