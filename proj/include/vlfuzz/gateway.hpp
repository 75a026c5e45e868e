#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"

namespace vlfuzz::gateway {

enum class EndpointKind { Generator, Target, Judge };
enum class TransportKind { Http, Simulated };

std::string to_string(EndpointKind k);
std::string to_string(TransportKind t);
EndpointKind endpoint_kind_from_string(const std::string& s);
TransportKind transport_from_string(const std::string& s);

struct DecodingParams {
  double temperature = 0.0;
  double top_p = 1.0;
  int max_tokens = 256;
  int n_samples = 1;

  static DecodingParams generation_defaults() { return {0.9, 0.95, 256, 1}; }
  static DecodingParams answering_defaults() { return {0.0, 1.0, 256, 1}; }
  void validate() const;
};

nlohmann::json to_json(const DecodingParams& d);

struct ModelEndpoint {
  std::string name;
  EndpointKind kind = EndpointKind::Target;
  TransportKind transport = TransportKind::Simulated;
  std::string base_url;      // http only
  std::string model_id;      // http only
  std::string profile;       // simulated only: registered simulator profile
  std::string auth_env_var;  // http only: variable holding the bearer token
  DecodingParams decoding;
  int timeout_ms = 60000;

  void validate() const;
};

nlohmann::json to_json(const ModelEndpoint& e);

struct ImagePayload {
  std::string media_type;  // e.g. "image/x-portable-pixmap"
  std::string base64;
  std::string image_id;    // content hash of the decoded pixels, for audit records
};

struct ChatRequest {
  std::string endpoint;
  std::string system;
  std::vector<std::string> text_parts;
  std::optional<ImagePayload> image;
  std::optional<DecodingParams> decoding;
  std::uint64_t seed = 0;
  int sample_index = 0;  // distinguishes repeated draws of the same prompt

  std::string text() const;
};

struct ChatResponse {
  std::string text;
  double latency_ms = 0.0;
  std::string raw_payload;  // verbatim provider body
  std::string request_hash;
  std::string response_hash;
};

enum class ErrorKind { EndpointUnreachable, AuthFailure, ProviderRejection, Timeout, UnknownEndpoint };
std::string to_string(ErrorKind k);

class GatewayError : public std::runtime_error {
 public:
  GatewayError(ErrorKind kind, const std::string& message, int http_status = 0)
      : std::runtime_error(message), kind_(kind), http_status_(http_status) {}

  ErrorKind kind() const { return kind_; }
  int http_status() const { return http_status_; }
  bool transient() const {
    return kind_ == ErrorKind::EndpointUnreachable || kind_ == ErrorKind::Timeout;
  }

 private:
  ErrorKind kind_;
  int http_status_;
};

using Outcome = std::variant<ChatResponse, GatewayError>;

// Deterministic in-process model bound to a simulated endpoint.
class SimulatedModel {
 public:
  virtual ~SimulatedModel() = default;
  // May throw GatewayError to emulate transport failures.
  virtual std::string respond(const ModelEndpoint& endpoint, const ChatRequest& request) = 0;
};

// Receives every exchange before the response is handed to the caller.
class AuditSink {
 public:
  virtual ~AuditSink() = default;
  virtual void record_exchange(const nlohmann::json& exchange) = 0;
};

struct RetryPolicy {
  int max_retries = 3;
  std::vector<std::chrono::milliseconds> backoff{std::chrono::milliseconds(500),
                                                 std::chrono::milliseconds(2000),
                                                 std::chrono::milliseconds(8000)};
  std::chrono::milliseconds delay_for(int retry) const;
};

// Canonical request body on the chat-completions wire.
nlohmann::json wire_request(const ModelEndpoint& endpoint, const ChatRequest& request);
// Extracts choices[0].message.content; throws ProviderRejection when absent.
std::string parse_wire_response(const std::string& body);
// Request hash covers the wire body with the image replaced by its content id.
std::string request_hash(const ModelEndpoint& endpoint, const ChatRequest& request);

class Gateway {
 public:
  Gateway();

  void register_endpoint(ModelEndpoint endpoint);
  void register_simulator(const std::string& profile, std::shared_ptr<SimulatedModel> model);
  bool has_endpoint(const std::string& name) const;
  const ModelEndpoint& endpoint(const std::string& name) const;

  void set_audit(AuditSink* sink) { audit_ = sink; }
  void set_retry_policy(RetryPolicy p) { retry_ = std::move(p); }
  void set_sleeper(std::function<void(std::chrono::milliseconds)> s) { sleep_ = std::move(s); }
  // Environment lookup for credentials (replaceable for tests).
  void set_env_lookup(std::function<std::optional<std::string>(const std::string&)> f) {
    env_ = std::move(f);
  }

  // Throws GatewayError after exhausting retries on transient failures.
  ChatResponse complete(const ChatRequest& req);

  // Positional results; at most max_in_flight requests outstanding. Audit
  // records are written in request order once the batch has finished.
  std::vector<Outcome> complete_many(std::span<const ChatRequest> reqs, int max_in_flight);

 private:
  ChatResponse attempt(const ModelEndpoint& ep, const ChatRequest& req);
  ChatResponse send_http(const ModelEndpoint& ep, const ChatRequest& req);
  Outcome run_with_retries(const ChatRequest& req, nlohmann::json& exchange);
  void write_audit(const nlohmann::json& exchange);

  std::map<std::string, ModelEndpoint> endpoints_;
  std::map<std::string, std::shared_ptr<SimulatedModel>> simulators_;
  AuditSink* audit_ = nullptr;
  std::mutex audit_mu_;
  RetryPolicy retry_;
  std::function<void(std::chrono::milliseconds)> sleep_;
  std::function<std::optional<std::string>(const std::string&)> env_;
};

}  // namespace vlfuzz::gateway
