#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "mamc/errors.hpp"
#include "mamc/evalsuite.hpp"
#include "mamc/oracle.hpp"
#include "mamc/protector.hpp"
#include "mamc/training.hpp"

namespace mamc {

/// Shared by CLI and HTTP so both produce the same bytes: decode, resize to
/// the protector's resolution, protect, encode PNG.
std::vector<std::uint8_t> protect_png(std::span<const std::uint8_t> encoded, const Protector& model);

inline constexpr std::size_t kMaxPayloadBytes = 8u << 20;
inline constexpr int kPreviewStrength = 5;
inline constexpr std::uint64_t kPreviewSeed = 20240501;

struct ProtectRequest {
  std::vector<std::uint8_t> image;
  int level = 50;
  bool preview = false;
  std::uint64_t seed = kPreviewSeed;
};

struct ProtectResponse {
  int level = 0;
  std::vector<std::uint8_t> protected_png;
  std::optional<std::vector<std::uint8_t>> preview_input_diffused;
  std::optional<std::vector<std::uint8_t>> preview_protected_diffused;
  MetricReport p1;
  std::optional<MetricReport> p2;
  int original_height = 0, original_width = 0;
  int resolution = 0;

  nlohmann::json to_json() const;
};

struct ServiceOptions {
  std::optional<std::filesystem::path> bank;  // manifest path; none → /levels answers 503
  std::string token;                          // MAMC_TOKEN; empty disables auth
  std::size_t max_payload = kMaxPayloadBytes;
  int oracle_concurrency = 2;
  std::chrono::milliseconds timeout{60000};
  std::optional<RemoteOptions> remote;  // previews through a remote oracle when set
};

class ServiceError : public Error {
 public:
  ServiceError(int status, const std::string& what) : Error(what), status_(status) {}
  int status() const { return status_; }

 private:
  int status_;
};

/// Request handling independent of the HTTP transport. Models are loaded
/// once and shared read-only; nothing from a request outlives it.
class ProtectionService {
 public:
  ProtectionService(Oracle oracle, ServiceOptions options);

  bool has_bank() const { return manifest_.has_value(); }
  nlohmann::json levels() const;
  ProtectResponse protect(const ProtectRequest& request) const;
  nlohmann::json health() const;
  const ServiceOptions& options() const { return options_; }

 private:
  struct Slots;
  Image run_preview(const Image& img, const OracleConfig& config) const;

  Oracle oracle_;
  ServiceOptions options_;
  std::optional<BankManifest> manifest_;
  std::map<int, LoadedCheckpoint> models_;
  std::shared_ptr<Slots> slots_;
};

/// HTTP front end: GET /levels, POST /protect, GET /health.
class HttpServer {
 public:
  explicit HttpServer(std::shared_ptr<const ProtectionService> service);
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  /// Binds (port 0 picks a free port) and serves on a background thread.
  int start(const std::string& host = "127.0.0.1", int port = 0);
  /// Blocks serving on the calling thread.
  void run(const std::string& host, int port);
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace mamc
