#include <condition_variable>
#include <cstdlib>
#include <mutex>
#include <regex>
#include <thread>

#include <httplib.h>

#include "mamc/archive.hpp"
#include "mamc/errors.hpp"
#include "mamc/oracle.hpp"

namespace mamc {
namespace {

struct Endpoint {
  std::string base;  // scheme://host:port
  std::string path;
};

Endpoint split_endpoint(const std::string& url) {
  static const std::regex re(R"(^(https?://[^/]+)(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(url, m, re)) throw ConfigError("invalid oracle endpoint '" + url + "'");
  return {m[1].str(), m[2].matched ? m[2].str() : "/"};
}

}  // namespace

RemoteOptions RemoteOptions::from_environment() {
  RemoteOptions o;
  if (const char* url = std::getenv("MAMC_ORACLE_URL")) o.endpoint = url;
  if (const char* key = std::getenv("MAMC_ORACLE_KEY")) o.api_key = key;
  if (o.endpoint.empty()) throw ConfigError("MAMC_ORACLE_URL is not set");
  return o;
}

nlohmann::json remote_request_body(const Image& img, const OracleConfig& config) {
  return {{"image", base64_encode(encode_png(img))},
          {"strength", config.strength},
          {"steps", config.steps},
          {"mode", to_string(config.mode)},
          {"seed", config.seed},
          {"noise_schedule", config.noise_schedule}};
}

struct RemoteOracleClient::Limiter {
  explicit Limiter(int cap) : available(cap) {}
  std::mutex mu;
  std::condition_variable cv;
  int available;
};

RemoteOracleClient::RemoteOracleClient(RemoteOptions options, int max_in_flight)
    : options_(std::move(options)), limiter_(std::make_shared<Limiter>(std::max(1, max_in_flight))) {}

Image RemoteOracleClient::diffuse(const Image& img, const OracleConfig& config) const {
  config.validate();
  const auto ep = split_endpoint(options_.endpoint);
  const std::string body = remote_request_body(img, config).dump();

  {
    std::unique_lock lock(limiter_->mu);
    limiter_->cv.wait(lock, [&] { return limiter_->available > 0; });
    --limiter_->available;
  }
  struct Release {
    Limiter& l;
    ~Release() {
      {
        std::lock_guard lock(l.mu);
        ++l.available;
      }
      l.cv.notify_one();
    }
  } release{*limiter_};

  httplib::Client client(ep.base);
  client.set_connection_timeout(options_.timeout);
  client.set_read_timeout(options_.timeout);
  httplib::Headers headers;
  if (!options_.api_key.empty()) headers.emplace("Authorization", "Bearer " + options_.api_key);

  std::string last_error;
  auto delay = options_.initial_backoff;
  for (int attempt = 0; attempt <= options_.max_retries; ++attempt) {
    if (attempt > 0) {
      if (options_.on_retry) options_.on_retry(attempt, delay);
      std::this_thread::sleep_for(delay);
      delay *= 2;
    }
    auto res = client.Post(ep.path, headers, body, "application/json");
    if (!res) {
      last_error = httplib::to_string(res.error());
      continue;
    }
    if (res->status >= 500 || res->status == 429) {
      last_error = "HTTP " + std::to_string(res->status);
      continue;
    }
    if (res->status != 200) throw ProtocolError("remote oracle returned HTTP " + std::to_string(res->status));
    const auto& payload = res->body;
    std::span<const std::uint8_t> bytes(reinterpret_cast<const std::uint8_t*>(payload.data()), payload.size());
    try {
      return decode_image(bytes, options_.resolution, "remote oracle response");
    } catch (const Error& e) {
      throw ProtocolError(std::string("remote oracle response is not an image: ") + e.what());
    }
  }
  throw TransportError("remote oracle unreachable after " + std::to_string(options_.max_retries) +
                       " retries: " + last_error);
}

Image remote_diffuse(const Image& img, const RemoteOptions& options, const OracleConfig& config) {
  return RemoteOracleClient(options).diffuse(img, config);
}

}  // namespace mamc
