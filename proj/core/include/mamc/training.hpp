#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mamc/image.hpp"
#include "mamc/objective.hpp"
#include "mamc/oracle.hpp"
#include "mamc/protector.hpp"

namespace mamc {

enum class LossVariant { kFull, kNoNoise, kNoNoiseNoR2, kNoStyle };

std::string to_string(LossVariant v);
LossVariant loss_variant_from_string(const std::string& s);
inline constexpr std::array<LossVariant, 4> kLossVariants{LossVariant::kFull, LossVariant::kNoNoise,
                                                          LossVariant::kNoNoiseNoR2, LossVariant::kNoStyle};

/// Zeroes the weights a variant removes.
LossWeights apply_variant(LossWeights w, LossVariant v);

struct TrainConfig {
  double learning_rate = 1e-3;
  int epochs = 5;
  int batch_size = 8;
  std::uint64_t seed = 0;
  int level = 50;
  OracleConfig oracle{};  // strength 5, 5 steps
  LossVariant variant = LossVariant::kFull;
  UNetSpec unet{};
  /// Replaces the level preset's weights (the budget still comes from the preset).
  std::optional<LossWeights> weights;

  void validate() const;
  /// Weights after preset lookup, override and variant masking.
  LossWeights effective_weights(const PresetTable& presets) const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Reads a config file: {"train": {...}, "oracle": {...}}; both sections optional.
TrainConfig load_train_config(const std::filesystem::path& path);

/// Per-epoch means of the signed loss contributions.
struct LossCurves {
  std::vector<double> reconstruction, content, style, noise, total, budget;

  std::size_t size() const { return total.size(); }
  std::map<std::string, std::vector<double>> as_map() const;
  static LossCurves from_map(const std::map<std::string, std::vector<double>>& m);
};

struct TrainReport {
  std::vector<LossBreakdown> epoch_means;  // raw term means per epoch
  LossCurves curves;
  double wall_seconds = 0;
  std::filesystem::path checkpoint;
  std::string oracle_hash;
  std::string weight_hash;
  int steps = 0;
};

nlohmann::json to_json(const TrainReport& r);

struct TrainedModel {
  Protector model;
  CheckpointMetadata metadata;
  TrainReport report;
};

struct TrainOptions {
  std::filesystem::path checkpoint;  // empty: do not write
  const PresetTable* presets = nullptr;  // null: bundled table
  std::function<void(int epoch, const LossBreakdown& means)> on_epoch;
};

/// Gradient descent on the combined objective through protector → oracle.
/// The oracle stays frozen; the run is a pure function of its inputs.
TrainedModel train(const Corpus& corpus, const DatasetSplit& split, const TrainConfig& config, const Oracle& oracle,
                   const TrainOptions& options = {});

/// Binds corpus, split and oracle so sweeps can request models by config.
using Trainer = std::function<TrainedModel(const TrainConfig&)>;

/// Checkpoints land in `checkpoint_dir/<tag>_<inputs>.mamc`, keyed by config,
/// training split and oracle. With `reuse_checkpoints` an existing file with a
/// matching config is loaded instead of retrained.
Trainer make_trainer(const Corpus& corpus, const DatasetSplit& split, const Oracle& oracle,
                     std::filesystem::path checkpoint_dir, const PresetTable* presets = nullptr,
                     bool reuse_checkpoints = false);
/// Reuses results for configs already trained by this wrapper. A weight
/// override equal to the level preset counts as no override.
Trainer memoize(Trainer trainer, const PresetTable* presets = nullptr);
std::string config_tag(const TrainConfig& config);

struct BankEntry {
  int level = 0;
  bool available = false;
  std::filesystem::path checkpoint;
  std::string weight_hash;
  nlohmann::json metrics = nlohmann::json::object();
  std::string error;
};

struct BankManifest {
  std::string oracle_hash;
  std::vector<BankEntry> entries;

  nlohmann::json to_json() const;
  static BankManifest from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
  void save(const std::filesystem::path& path) const;
  static BankManifest load(const std::filesystem::path& path);
  std::size_t available_count() const;
};

/// Produces metrics for a freshly trained level (P1/P2 snapshot).
using SnapshotFn = std::function<nlohmann::json(const TrainedModel&)>;

/// One protector per level; a failed level is recorded as unavailable.
/// All levels are checked against the preset table before training.
BankManifest train_balance_bank(const TrainConfig& base_config, const Trainer& trainer, const Oracle& oracle,
                                const SnapshotFn& snapshot = {},
                                std::span<const int> levels = kBalanceLevels, const PresetTable* presets = nullptr);

/// Writes <prefix>.json (per-term series) and <prefix>.png (800×400 plot).
void emit_loss_curves(const TrainReport& report, const std::filesystem::path& prefix);

}  // namespace mamc
