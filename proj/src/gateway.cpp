#include "vlfuzz/gateway.hpp"

#include <atomic>
#include <cstdlib>
#include <thread>

#include "httplib.h"
#include "vlfuzz/util.hpp"

namespace vlfuzz::gateway {
namespace {

using nlohmann::json;

json wire_body(const ModelEndpoint& ep, const ChatRequest& req, bool redact_image) {
  const DecodingParams dec = req.decoding.value_or(ep.decoding);
  json messages = json::array();
  if (!req.system.empty()) {
    messages.push_back({{"role", "system"}, {"content", req.system}});
  }
  json content = json::array();
  for (const auto& t : req.text_parts) content.push_back({{"type", "text"}, {"text", t}});
  if (req.image) {
    const std::string url = redact_image
                                ? "sha256:" + req.image->image_id
                                : "data:" + req.image->media_type + ";base64," + req.image->base64;
    content.push_back({{"type", "image_url"}, {"image_url", {{"url", url}}}});
  }
  messages.push_back({{"role", "user"}, {"content", content}});
  json body{{"model", ep.transport == TransportKind::Http ? ep.model_id : "sim:" + ep.profile},
            {"messages", messages},
            {"temperature", dec.temperature},
            {"top_p", dec.top_p},
            {"max_tokens", dec.max_tokens},
            {"n", dec.n_samples},
            {"seed", req.seed}};
  return body;
}

struct SplitUrl {
  std::string origin;  // scheme://host[:port]
  std::string path;    // prefix without trailing slash
};

SplitUrl split_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) {
    throw GatewayError(ErrorKind::EndpointUnreachable, "base_url lacks a scheme: " + url);
  }
  const auto path_start = url.find('/', scheme_end + 3);
  SplitUrl s;
  if (path_start == std::string::npos) {
    s.origin = url;
  } else {
    s.origin = url.substr(0, path_start);
    s.path = url.substr(path_start);
  }
  while (!s.path.empty() && s.path.back() == '/') s.path.pop_back();
  return s;
}

std::optional<std::string> process_env(const std::string& name) {
  if (const char* v = std::getenv(name.c_str()); v != nullptr && *v != '\0') {
    return std::string(v);
  }
  return std::nullopt;
}

json error_json(const GatewayError& e) {
  return json{{"kind", to_string(e.kind())}, {"message", e.what()}, {"http_status", e.http_status()}};
}

}  // namespace

std::string to_string(EndpointKind k) {
  switch (k) {
    case EndpointKind::Generator: return "generator";
    case EndpointKind::Target: return "target";
    case EndpointKind::Judge: return "judge";
  }
  return "unknown";
}

std::string to_string(TransportKind t) {
  return t == TransportKind::Http ? "http" : "simulated";
}

EndpointKind endpoint_kind_from_string(const std::string& s) {
  if (s == "generator") return EndpointKind::Generator;
  if (s == "target") return EndpointKind::Target;
  if (s == "judge") return EndpointKind::Judge;
  throw std::invalid_argument("unknown endpoint kind: " + s);
}

TransportKind transport_from_string(const std::string& s) {
  if (s == "http") return TransportKind::Http;
  if (s == "simulated") return TransportKind::Simulated;
  throw std::invalid_argument("unknown transport: " + s);
}

std::string to_string(ErrorKind k) {
  switch (k) {
    case ErrorKind::EndpointUnreachable: return "endpoint-unreachable";
    case ErrorKind::AuthFailure: return "auth-failure";
    case ErrorKind::ProviderRejection: return "provider-rejection";
    case ErrorKind::Timeout: return "timeout";
    case ErrorKind::UnknownEndpoint: return "unknown-endpoint";
  }
  return "unknown";
}

void DecodingParams::validate() const {
  if (!(temperature >= 0.0 && temperature <= 2.0)) {
    throw std::invalid_argument("decoding.temperature must be in [0, 2]");
  }
  if (!(top_p > 0.0 && top_p <= 1.0)) {
    throw std::invalid_argument("decoding.top_p must be in (0, 1]");
  }
  if (max_tokens <= 0) throw std::invalid_argument("decoding.max_tokens must be positive");
  if (n_samples <= 0) throw std::invalid_argument("decoding.n_samples must be positive");
}

json to_json(const DecodingParams& d) {
  return json{{"temperature", d.temperature},
              {"top_p", d.top_p},
              {"max_tokens", d.max_tokens},
              {"n_samples", d.n_samples}};
}

void ModelEndpoint::validate() const {
  if (name.empty()) throw std::invalid_argument("endpoint name must not be empty");
  decoding.validate();
  if (timeout_ms <= 0) throw std::invalid_argument("endpoint " + name + ": timeout_ms must be positive");
  if (transport == TransportKind::Http) {
    if (base_url.rfind("http://", 0) != 0 && base_url.rfind("https://", 0) != 0) {
      throw std::invalid_argument("endpoint " + name + ": base_url must start with http:// or https://");
    }
    if (model_id.empty()) throw std::invalid_argument("endpoint " + name + ": model_id is required");
    if (auth_env_var.empty()) {
      throw std::invalid_argument("endpoint " + name + ": auth_env_var is required");
    }
  } else if (profile.empty()) {
    throw std::invalid_argument("endpoint " + name + ": simulated endpoints need a profile");
  }
}

json to_json(const ModelEndpoint& e) {
  json j{{"name", e.name},
         {"kind", to_string(e.kind)},
         {"transport", to_string(e.transport)},
         {"decoding", to_json(e.decoding)},
         {"timeout_ms", e.timeout_ms}};
  if (e.transport == TransportKind::Http) {
    j["base_url"] = e.base_url;
    j["model_id"] = e.model_id;
    j["auth_env_var"] = e.auth_env_var;  // the variable name only
  } else {
    j["profile"] = e.profile;
  }
  return j;
}

std::string ChatRequest::text() const {
  std::string out;
  for (const auto& t : text_parts) {
    if (!out.empty()) out += "\n";
    out += t;
  }
  return out;
}

std::chrono::milliseconds RetryPolicy::delay_for(int retry) const {
  if (backoff.empty()) return std::chrono::milliseconds(0);
  const auto i = static_cast<std::size_t>(retry);
  return i < backoff.size() ? backoff[i] : backoff.back();
}

json wire_request(const ModelEndpoint& endpoint, const ChatRequest& request) {
  return wire_body(endpoint, request, false);
}

std::string parse_wire_response(const std::string& body) {
  json j;
  try {
    j = json::parse(body);
  } catch (const json::parse_error& e) {
    throw GatewayError(ErrorKind::ProviderRejection, std::string("malformed response body: ") + e.what());
  }
  if (!j.is_object() || !j.contains("choices") || !j["choices"].is_array() || j["choices"].empty()) {
    throw GatewayError(ErrorKind::ProviderRejection, "response has no choices");
  }
  const auto& msg = j["choices"][0];
  if (!msg.contains("message") || !msg["message"].contains("content") ||
      !msg["message"]["content"].is_string()) {
    throw GatewayError(ErrorKind::ProviderRejection, "response choice has no text content");
  }
  return msg["message"]["content"].get<std::string>();
}

std::string request_hash(const ModelEndpoint& endpoint, const ChatRequest& request) {
  json j = wire_body(endpoint, request, true);
  j["endpoint"] = endpoint.name;
  j["sample_index"] = request.sample_index;
  return sha256_hex(j.dump());
}

Gateway::Gateway()
    : sleep_([](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); }),
      env_(process_env) {}

void Gateway::register_endpoint(ModelEndpoint endpoint) {
  endpoint.validate();
  const std::string name = endpoint.name;
  endpoints_[name] = std::move(endpoint);
}

void Gateway::register_simulator(const std::string& profile, std::shared_ptr<SimulatedModel> model) {
  simulators_[profile] = std::move(model);
}

bool Gateway::has_endpoint(const std::string& name) const { return endpoints_.count(name) > 0; }

const ModelEndpoint& Gateway::endpoint(const std::string& name) const {
  auto it = endpoints_.find(name);
  if (it == endpoints_.end()) {
    throw GatewayError(ErrorKind::UnknownEndpoint, "unknown endpoint: " + name);
  }
  return it->second;
}

ChatResponse Gateway::send_http(const ModelEndpoint& ep, const ChatRequest& req) {
  const auto token = env_(ep.auth_env_var);
  if (!token) {
    throw GatewayError(ErrorKind::AuthFailure,
                       "credential variable " + ep.auth_env_var + " is not set");
  }
  const SplitUrl url = split_url(ep.base_url);
  httplib::Client cli(url.origin);
  const auto secs = ep.timeout_ms / 1000;
  const auto usecs = (ep.timeout_ms % 1000) * 1000;
  cli.set_connection_timeout(secs, usecs);
  cli.set_read_timeout(secs, usecs);
  cli.set_write_timeout(secs, usecs);
  httplib::Headers headers{{"Authorization", "Bearer " + *token}};
  const std::string body = wire_body(ep, req, false).dump();

  const auto start = std::chrono::steady_clock::now();
  auto res = cli.Post(url.path + "/chat/completions", headers, body, "application/json");
  const auto elapsed = std::chrono::duration<double, std::milli>(
                           std::chrono::steady_clock::now() - start)
                           .count();
  if (!res) {
    const auto err = res.error();
    if (err == httplib::Error::ConnectionTimeout || err == httplib::Error::Read) {
      throw GatewayError(ErrorKind::Timeout, ep.name + ": " + httplib::to_string(err));
    }
    throw GatewayError(ErrorKind::EndpointUnreachable, ep.name + ": " + httplib::to_string(err));
  }
  const int status = res->status;
  if (status == 401 || status == 403) {
    throw GatewayError(ErrorKind::AuthFailure, ep.name + ": HTTP " + std::to_string(status), status);
  }
  if (status == 429 || status >= 500) {
    throw GatewayError(ErrorKind::EndpointUnreachable, ep.name + ": HTTP " + std::to_string(status),
                       status);
  }
  if (status < 200 || status >= 300) {
    throw GatewayError(ErrorKind::ProviderRejection,
                       ep.name + ": HTTP " + std::to_string(status) + ": " + res->body, status);
  }
  ChatResponse out;
  out.text = parse_wire_response(res->body);
  out.raw_payload = res->body;
  out.latency_ms = elapsed;
  return out;
}

ChatResponse Gateway::attempt(const ModelEndpoint& ep, const ChatRequest& req) {
  if (ep.transport == TransportKind::Http) return send_http(ep, req);
  auto it = simulators_.find(ep.profile);
  if (it == simulators_.end()) {
    throw GatewayError(ErrorKind::EndpointUnreachable, "no simulator registered for " + ep.profile);
  }
  ChatResponse out;
  out.text = it->second->respond(ep, req);
  out.raw_payload = json{{"model", "sim:" + ep.profile},
                         {"choices", json::array({{{"index", 0},
                                                   {"message", {{"role", "assistant"},
                                                                {"content", out.text}}}}})}}
                        .dump();
  return out;
}

Outcome Gateway::run_with_retries(const ChatRequest& req, json& exchange) {
  exchange = json{{"endpoint", req.endpoint}, {"sample_index", req.sample_index}};
  const ModelEndpoint* ep = nullptr;
  try {
    ep = &endpoint(req.endpoint);
  } catch (const GatewayError& e) {
    exchange["attempts"] = 0;
    exchange["error"] = error_json(e);
    return e;
  }
  const std::string rh = request_hash(*ep, req);
  exchange["request_hash"] = rh;
  exchange["request"] = wire_body(*ep, req, true);
  if (req.image) exchange["image_id"] = req.image->image_id;

  int attempts = 0;
  for (;;) {
    ++attempts;
    try {
      ChatResponse res = attempt(*ep, req);
      res.request_hash = rh;
      res.response_hash = sha256_hex(res.raw_payload);
      exchange["attempts"] = attempts;
      exchange["response"] = res.raw_payload;
      exchange["response_hash"] = res.response_hash;
      exchange["latency_ms"] = res.latency_ms;
      exchange["error"] = nullptr;
      return res;
    } catch (const GatewayError& e) {
      const int retry = attempts - 1;
      if (!e.transient() || retry >= retry_.max_retries) {
        exchange["attempts"] = attempts;
        exchange["error"] = error_json(e);
        return e;
      }
      sleep_(retry_.delay_for(retry));
    }
  }
}

void Gateway::write_audit(const json& exchange) {
  if (audit_ == nullptr) return;
  std::lock_guard<std::mutex> lock(audit_mu_);
  audit_->record_exchange(exchange);
}

ChatResponse Gateway::complete(const ChatRequest& req) {
  json exchange;
  Outcome out = run_with_retries(req, exchange);
  write_audit(exchange);
  if (auto* err = std::get_if<GatewayError>(&out)) throw *err;
  return std::get<ChatResponse>(std::move(out));
}

std::vector<Outcome> Gateway::complete_many(std::span<const ChatRequest> reqs, int max_in_flight) {
  if (max_in_flight <= 0) throw std::invalid_argument("max_in_flight must be positive");
  std::vector<std::optional<Outcome>> slots(reqs.size());
  std::vector<json> exchanges(reqs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= reqs.size()) return;
      slots[i].emplace(run_with_retries(reqs[i], exchanges[i]));
    }
  };
  const std::size_t n_threads =
      std::min<std::size_t>(static_cast<std::size_t>(max_in_flight), reqs.size());
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(n_threads);
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  std::vector<Outcome> out;
  out.reserve(reqs.size());
  for (std::size_t i = 0; i < reqs.size(); ++i) {
    write_audit(exchanges[i]);
    out.push_back(std::move(*slots[i]));
  }
  return out;
}

}  // namespace vlfuzz::gateway
