#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "mamc/image.hpp"
#include "mamc/unet.hpp"

namespace mamc {

enum class OracleMode { kReconstruct, kInpaint };

std::string to_string(OracleMode mode);
OracleMode oracle_mode_from_string(const std::string& s);

struct OracleConfig {
  int strength = 5;  // 0..10, fraction strength/10 of the noising schedule
  int steps = 5;     // 1..50 sampler steps
  OracleMode mode = OracleMode::kReconstruct;
  std::uint64_t seed = 0;
  std::string noise_schedule = "cosine";  // cosine | linear

  void validate() const;
  friend bool operator==(const OracleConfig&, const OracleConfig&) = default;
};

void to_json(nlohmann::json& j, const OracleConfig& c);
void from_json(const nlohmann::json& j, OracleConfig& c);

/// Variance-preserving schedule discretised into `points` steps.
/// alpha_bar(0) = 1; alpha_bar(points) is (close to) zero.
class NoiseSchedule {
 public:
  static constexpr int kPoints = 100;

  static NoiseSchedule named(const std::string& name, int points = kPoints);

  int points() const { return static_cast<int>(alpha_bar_.size()) - 1; }
  double alpha_bar(int t) const { return alpha_bar_.at(static_cast<std::size_t>(t)); }
  const std::string& name() const { return name_; }

  /// Timestep reached by forward-noising at the given 0..10 strength.
  int start_step(int strength) const;
  /// Descending sampler timesteps, ending with 0.
  std::vector<int> sampling_steps(int strength, int steps) const;

 private:
  std::string name_;
  std::vector<double> alpha_bar_;
};

/// Epsilon-predicting UNet with sinusoidal time conditioning.
class DenoiserImpl : public torch::nn::Module {
 public:
  static constexpr int64_t kTimeDim = 32;

  explicit DenoiserImpl(UNetSpec spec);
  torch::Tensor forward(const torch::Tensor& noisy, const torch::Tensor& timesteps);

  const UNetSpec& spec() const { return spec_; }

 private:
  UNetSpec spec_;
  torch::nn::Linear time1_{nullptr}, time2_{nullptr};
  UNet body_{nullptr};
};
TORCH_MODULE(Denoiser);

UNetSpec default_denoiser_spec();

/// Frozen diffusion model M. Copies share the same immutable weights.
class Oracle {
 public:
  struct Provenance {
    std::string corpus_fingerprint;
    int resolution = 64;
    std::string schedule = "cosine";
    int epochs = 0;
    std::uint64_t seed = 0;
    std::vector<double> loss_history;
  };

  /// Randomly initialised oracle; only for tests and benchmarks.
  static Oracle untrained(int resolution, std::uint64_t seed, UNetSpec spec = default_denoiser_spec());
  /// Freezes a trained denoiser (gradients disabled) and records its hash.
  static Oracle freeze(Denoiser net, Provenance provenance);
  static Oracle load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  /// img2img on a [N,3,H,W] batch in [0,1]: forward-noise to the strength's
  /// timestep with per-sample seeds, then deterministic DDIM back to t=0.
  /// Differentiable with respect to `images`.
  torch::Tensor diffuse(const torch::Tensor& images, const OracleConfig& config,
                        std::span<const std::uint64_t> sample_seeds) const;
  /// Inpainting: the masked region is synthesised, everything else is
  /// copied from `images` at the end of sampling.
  torch::Tensor inpaint(const torch::Tensor& images, const MaskSpec& mask, const OracleConfig& config,
                        std::span<const std::uint64_t> sample_seeds) const;

  /// Dispatches on config.mode; `mask` is required for inpainting.
  torch::Tensor run(const torch::Tensor& images, const OracleConfig& config, std::span<const std::uint64_t> sample_seeds,
                    const std::optional<MaskSpec>& mask = std::nullopt) const;

  Image diffuse(const Image& img, const OracleConfig& config) const;
  Image inpaint(const Image& img, const MaskSpec& mask, const OracleConfig& config) const;

  /// Hash recorded at construction / load.
  const std::string& weight_hash() const;
  /// Recomputes the hash from the live weights.
  std::string current_weight_hash() const;
  /// Throws IntegrityError if the live weights differ from weight_hash().
  void verify_frozen() const;

  int resolution() const;
  const Provenance& provenance() const;
  Denoiser denoiser() const;

 private:
  struct State;
  explicit Oracle(std::shared_ptr<State> state);

  void check_input(const torch::Tensor& images, std::span<const std::uint64_t> seeds) const;
  torch::Tensor sample_noise(const torch::Tensor& like, std::span<const std::uint64_t> seeds) const;

  std::shared_ptr<State> state_;
};

inline constexpr int kOracleEpochs = 30;

struct PretrainOptions {
  int batch_size = 16;
  double learning_rate = 2e-3;
  UNetSpec spec = default_denoiser_spec();
  std::string schedule = "cosine";
  std::size_t min_corpus = 500;
  std::function<void(int epoch, double mean_loss)> on_epoch;
};

/// Trains the denoiser on the corpus (standard epsilon-matching objective)
/// and returns it frozen. Deterministic given (corpus, epochs, seed).
Oracle pretrain_oracle(const Corpus& corpus, int epochs, std::uint64_t seed, const PretrainOptions& options = {});

/// Order-independent fingerprint of corpus contents.
std::string corpus_fingerprint(const Corpus& corpus);

/// Seed for sample `index` of a batch drawn at `step` under `global_seed`.
std::uint64_t derive_seed(std::uint64_t global_seed, std::uint64_t step, std::uint64_t index);

// --- Remote oracle client -------------------------------------------------

struct RemoteOptions {
  std::string endpoint;  // http(s)://host:port/path
  std::string api_key;
  int max_retries = 3;
  std::chrono::milliseconds initial_backoff{200};
  std::chrono::seconds timeout{30};
  int resolution = 64;
  /// Called before each retry with (attempt number, delay).
  std::function<void(int, std::chrono::milliseconds)> on_retry;

  /// Reads MAMC_ORACLE_URL and MAMC_ORACLE_KEY.
  static RemoteOptions from_environment();
};

/// JSON request body sent to a remote img2img service.
nlohmann::json remote_request_body(const Image& img, const OracleConfig& config);

/// Evaluation-only img2img through an HTTP service. Transport failures are
/// retried with exponential backoff; non-image responses are protocol errors.
/// At most `max_in_flight` requests run concurrently per client.
class RemoteOracleClient {
 public:
  explicit RemoteOracleClient(RemoteOptions options, int max_in_flight = 4);

  Image diffuse(const Image& img, const OracleConfig& config) const;
  const RemoteOptions& options() const { return options_; }

 private:
  RemoteOptions options_;
  struct Limiter;
  std::shared_ptr<Limiter> limiter_;
};

Image remote_diffuse(const Image& img, const RemoteOptions& options, const OracleConfig& config);

}  // namespace mamc
