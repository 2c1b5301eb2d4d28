#include "mamc/service.hpp"

#include <condition_variable>
#include <future>
#include <mutex>

#include <httplib.h>

#include "mamc/archive.hpp"
#include "mamc/errors.hpp"

namespace mamc {

std::vector<std::uint8_t> protect_png(std::span<const std::uint8_t> encoded, const Protector& model) {
  const Image img = decode_image(encoded, model.resolution());
  return encode_png(model.protect(img));
}

nlohmann::json ProtectResponse::to_json() const {
  nlohmann::json j{{"level", level},
                   {"protected", base64_encode(protected_png)},
                   {"resolution", resolution},
                   {"original_size", {original_height, original_width}},
                   {"metrics", {{"p1", p1}}}};
  if (p2) j["metrics"]["p2"] = *p2;
  if (preview_input_diffused) j["preview_input_diffused"] = base64_encode(*preview_input_diffused);
  if (preview_protected_diffused) j["preview_protected_diffused"] = base64_encode(*preview_protected_diffused);
  return j;
}

struct ProtectionService::Slots {
  std::mutex m;
  std::condition_variable cv;
  int free;

  explicit Slots(int n) : free(n) {}
  void acquire() {
    std::unique_lock lock(m);
    cv.wait(lock, [&] { return free > 0; });
    --free;
  }
  void release() {
    {
      std::lock_guard lock(m);
      ++free;
    }
    cv.notify_one();
  }
};

ProtectionService::ProtectionService(Oracle oracle, ServiceOptions options)
    : oracle_(std::move(oracle)), options_(std::move(options)) {
  if (options_.oracle_concurrency < 1) throw ConfigError("oracle concurrency must be at least 1");
  slots_ = std::make_shared<Slots>(options_.oracle_concurrency);
  if (!options_.bank) return;
  manifest_ = BankManifest::load(*options_.bank);
  for (auto& entry : manifest_->entries) {
    if (!entry.available) continue;
    try {
      models_.emplace(entry.level, load_checkpoint(entry.checkpoint, oracle_.weight_hash()));
    } catch (const Error& e) {
      entry.available = false;
      entry.error = e.what();
    }
  }
}

nlohmann::json ProtectionService::levels() const {
  if (!manifest_) {
    throw ServiceError(503, "no balance bank loaded; run `mamc bank` to train one and start the server with --bank");
  }
  nlohmann::json available = nlohmann::json::array(), unavailable = nlohmann::json::array();
  for (const auto& e : manifest_->entries) {
    if (e.available) {
      available.push_back({{"level", e.level}, {"weight_hash", e.weight_hash}, {"metrics", e.metrics}});
    } else {
      unavailable.push_back({{"level", e.level}, {"status", "unavailable"}, {"error", e.error}});
    }
  }
  return {{"oracle_hash", manifest_->oracle_hash}, {"levels", available}, {"unavailable", unavailable}};
}

nlohmann::json ProtectionService::health() const {
  return {{"status", "ok"},
          {"bank", has_bank()},
          {"levels", models_.size()},
          {"oracle_hash", oracle_.weight_hash()},
          {"resolution", oracle_.resolution()}};
}

Image ProtectionService::run_preview(const Image& img, const OracleConfig& config) const {
  slots_->acquire();
  struct Release {
    Slots* s;
    ~Release() { s->release(); }
  } release{slots_.get()};
  try {
    if (options_.remote) return remote_diffuse(img, *options_.remote, config);
    return oracle_.diffuse(img, config);
  } catch (const Error& e) {
    throw ServiceError(502, std::string("oracle failure: ") + e.what());
  }
}

ProtectResponse ProtectionService::protect(const ProtectRequest& request) const {
  if (!manifest_) throw ServiceError(503, "no balance bank loaded; run `mamc bank` first");
  const auto it = models_.find(request.level);
  if (it == models_.end()) {
    std::string valid;
    for (const auto& [level, _] : models_) valid += (valid.empty() ? "" : ", ") + std::to_string(level);
    throw ServiceError(404, "level " + std::to_string(request.level) + " is not available (available: " + valid + ")");
  }
  const Protector& model = it->second.model;

  ProtectResponse r;
  r.level = request.level;
  r.resolution = model.resolution();
  Image input;
  try {
    std::tie(r.original_height, r.original_width) = probe_size(request.image);
    input = decode_image(request.image, model.resolution());
  } catch (const Error& e) {
    throw ServiceError(400, std::string("invalid image: ") + e.what());
  }
  r.protected_png = encode_png(model.protect(input));
  // Metrics describe exactly what the client receives.
  const Image protected_image = decode_image(r.protected_png, 0);
  r.p1 = single_image_metrics(Protocol::kInputVsProtected, input, protected_image);
  if (request.preview) {
    OracleConfig config = checkpoint_oracle_config(it->second.metadata);
    config.mode = OracleMode::kReconstruct;
    config.strength = kPreviewStrength;
    config.seed = request.seed;
    const Image di = run_preview(input, config);
    const Image dp = run_preview(protected_image, config);
    r.preview_input_diffused = encode_png(di);
    r.preview_protected_diffused = encode_png(dp);
    r.p2 = single_image_metrics(Protocol::kDiffusedVsDiffused, di, dp);
  }
  return r;
}

// --- HTTP ------------------------------------------------------------------

namespace {

void send_error(httplib::Response& res, int status, const std::string& message) {
  res.status = status;
  res.set_content(nlohmann::json{{"error", message}, {"status", status}}.dump(), "application/json");
}

bool parse_bool(const std::string& s) { return s == "1" || s == "true" || s == "yes" || s == "on"; }

ProtectRequest parse_protect(const httplib::Request& req) {
  ProtectRequest out;
  if (req.is_multipart_form_data()) {
    if (!req.has_file("image")) throw ServiceError(400, "multipart request needs an 'image' part");
    const auto& content = req.get_file_value("image").content;
    out.image.assign(content.begin(), content.end());
    try {
      if (req.has_file("level")) out.level = std::stoi(req.get_file_value("level").content);
      if (req.has_file("seed")) out.seed = std::stoull(req.get_file_value("seed").content);
    } catch (const std::exception&) {
      throw ServiceError(400, "level and seed must be integers");
    }
    if (req.has_file("preview")) out.preview = parse_bool(req.get_file_value("preview").content);
    return out;
  }
  nlohmann::json body;
  try {
    body = nlohmann::json::parse(req.body);
    out.image = base64_decode(body.at("image").get<std::string>());
    out.level = body.value("level", out.level);
    out.preview = body.value("preview", false);
    out.seed = body.value("seed", out.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ServiceError(400, std::string("malformed request: ") + e.what());
  } catch (const Error& e) {
    throw ServiceError(400, std::string("malformed image payload: ") + e.what());
  }
  return out;
}

}  // namespace

struct HttpServer::Impl {
  std::shared_ptr<const ProtectionService> service;
  httplib::Server server;
  std::thread thread;

  bool authorised(const httplib::Request& req, httplib::Response& res) const {
    const auto& token = service->options().token;
    if (token.empty()) return true;
    if (req.get_header_value("Authorization") == "Bearer " + token) return true;
    send_error(res, 401, "missing or wrong bearer token");
    return false;
  }

  // Runs `work` on its own thread so a stuck request answers 504 instead of hanging.
  void with_timeout(httplib::Response& res, std::function<nlohmann::json()> work) const {
    auto task = std::make_shared<std::packaged_task<nlohmann::json()>>(std::move(work));
    auto result = task->get_future();
    std::thread([task] { (*task)(); }).detach();
    if (result.wait_for(service->options().timeout) == std::future_status::timeout) {
      send_error(res, 504, "request timed out");
      return;
    }
    try {
      res.set_content(result.get().dump(), "application/json");
      res.status = 200;
    } catch (const ServiceError& e) {
      send_error(res, e.status(), e.what());
    } catch (const std::exception& e) {
      send_error(res, 500, e.what());
    }
  }

  void install() {
    server.set_payload_max_length(service->options().max_payload);
    server.Get("/health", [this](const httplib::Request&, httplib::Response& res) {
      res.set_content(service->health().dump(), "application/json");
    });
    server.Get("/levels", [this](const httplib::Request& req, httplib::Response& res) {
      if (!authorised(req, res)) return;
      auto svc = service;
      with_timeout(res, [svc] { return svc->levels(); });
    });
    server.Post("/protect", [this](const httplib::Request& req, httplib::Response& res) {
      if (!authorised(req, res)) return;
      std::shared_ptr<ProtectRequest> request;
      try {
        request = std::make_shared<ProtectRequest>(parse_protect(req));
      } catch (const ServiceError& e) {
        send_error(res, e.status(), e.what());
        return;
      }
      auto svc = service;
      with_timeout(res, [svc, request] { return svc->protect(*request).to_json(); });
    });
  }
};

HttpServer::HttpServer(std::shared_ptr<const ProtectionService> service) : impl_(std::make_unique<Impl>()) {
  impl_->service = std::move(service);
  impl_->install();
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::start(const std::string& host, int port) {
  int bound = port;
  if (port == 0) {
    bound = impl_->server.bind_to_any_port(host);
  } else if (!impl_->server.bind_to_port(host, port)) {
    bound = -1;
  }
  if (bound < 0) throw IoError("cannot bind " + host + ":" + std::to_string(port));
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return bound;
}

void HttpServer::run(const std::string& host, int port) {
  if (!impl_->server.listen(host, port)) throw IoError("cannot listen on " + host + ":" + std::to_string(port));
}

void HttpServer::stop() {
  if (!impl_) return;
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace mamc
