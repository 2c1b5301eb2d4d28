#include "mamc/training.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <mutex>
#include <random>

#include "mamc/archive.hpp"
#include "mamc/errors.hpp"
#include "mamc/plot.hpp"

namespace mamc {
namespace {

constexpr std::uint64_t kNoiseStream = 0x6E6F697365ULL;

const PresetTable& presets_or_bundled(const PresetTable* p) { return p ? *p : PresetTable::bundled(); }

}  // namespace

std::string to_string(LossVariant v) {
  switch (v) {
    case LossVariant::kNoNoise: return "no_noise";
    case LossVariant::kNoNoiseNoR2: return "no_noise_no_r2";
    case LossVariant::kNoStyle: return "no_style";
    case LossVariant::kFull: break;
  }
  return "full";
}

LossVariant loss_variant_from_string(const std::string& s) {
  for (auto v : kLossVariants) {
    if (to_string(v) == s) return v;
  }
  throw ConfigError("unknown loss variant '" + s + "' (expected full, no_noise, no_noise_no_r2, no_style)");
}

LossWeights apply_variant(LossWeights w, LossVariant v) {
  switch (v) {
    case LossVariant::kNoNoise: w.alpha_n = 0; break;
    case LossVariant::kNoNoiseNoR2:
      w.alpha_n = 0;
      w.alpha_r2 = 0;
      break;
    case LossVariant::kNoStyle: w.alpha_s = 0; break;
    case LossVariant::kFull: break;
  }
  return w;
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (!(learning_rate > 0) || !std::isfinite(learning_rate)) throw ConfigError("learning rate must be > 0");
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  oracle.validate();
  unet.validate();
  if (weights) weights->validate();
}

LossWeights TrainConfig::effective_weights(const PresetTable& presets) const {
  return apply_variant(weights ? *weights : presets.at(level).weights, variant);
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"learning_rate", c.learning_rate},
       {"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"seed", c.seed},
       {"level", c.level},
       {"oracle", c.oracle},
       {"variant", to_string(c.variant)},
       {"unet", c.unet}};
  if (c.weights) j["weights"] = *c.weights;
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
  c.level = j.value("level", c.level);
  if (j.contains("oracle")) c.oracle = j.at("oracle").get<OracleConfig>();
  if (j.contains("variant")) c.variant = loss_variant_from_string(j.at("variant").get<std::string>());
  if (j.contains("unet")) c.unet = j.at("unet").get<UNetSpec>();
  if (j.contains("weights")) c.weights = j.at("weights").get<LossWeights>();
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file: " + path.string());
  try {
    const auto j = nlohmann::json::parse(in);
    TrainConfig c;
    if (j.contains("train")) c = j.at("train").get<TrainConfig>();
    if (j.contains("oracle")) c.oracle = j.at("oracle").get<OracleConfig>();
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed config file " + path.string() + ": " + e.what());
  }
}

std::map<std::string, std::vector<double>> LossCurves::as_map() const {
  return {{"reconstruction", reconstruction}, {"content", content}, {"style", style},
          {"noise", noise},                   {"total", total},     {"budget", budget}};
}

LossCurves LossCurves::from_map(const std::map<std::string, std::vector<double>>& m) {
  LossCurves c;
  auto get = [&](const char* k) {
    auto it = m.find(k);
    return it == m.end() ? std::vector<double>{} : it->second;
  };
  c.reconstruction = get("reconstruction");
  c.content = get("content");
  c.style = get("style");
  c.noise = get("noise");
  c.total = get("total");
  c.budget = get("budget");
  return c;
}

nlohmann::json to_json(const TrainReport& r) {
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& b : r.epoch_means) {
    epochs.push_back({{"reconstruction", b.reconstruction},
                      {"content", b.content},
                      {"style", b.style},
                      {"noise", b.noise},
                      {"total", b.total}});
  }
  return {{"epochs", epochs},
          {"curves", r.curves.as_map()},
          {"wall_seconds", r.wall_seconds},
          {"checkpoint", r.checkpoint.string()},
          {"oracle_hash", r.oracle_hash},
          {"weight_hash", r.weight_hash},
          {"steps", r.steps}};
}

TrainedModel train(const Corpus& corpus, const DatasetSplit& split, const TrainConfig& config, const Oracle& oracle,
                   const TrainOptions& options) {
  config.validate();
  if (split.train.empty()) throw ConfigError("training split is empty");
  const auto& presets = presets_or_bundled(options.presets);
  const auto profile = presets.at(config.level);
  const auto weights = config.effective_weights(presets);
  const int res = oracle.resolution();
  std::optional<MaskSpec> mask;
  if (config.oracle.mode == OracleMode::kInpaint) mask = scale_mask(kReferenceMask, res, res);

  const auto start = std::chrono::steady_clock::now();
  const std::string oracle_hash = oracle.current_weight_hash();
  if (oracle_hash != oracle.weight_hash()) throw IntegrityError("oracle weights differ from their recorded hash");

  torch::manual_seed(config.seed);
  Protector protector(config.unet, res, config.seed);
  protector.net()->train();
  torch::optim::Adam opt(protector.net()->parameters(), torch::optim::AdamOptions(config.learning_rate));
  const auto& ex = default_extractor();

  std::vector<std::string> ids = split.train;
  std::mt19937_64 order_rng(config.seed);
  TrainReport report;
  report.oracle_hash = oracle_hash;
  std::uint64_t step = 0;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    for (std::size_t i = ids.size() - 1; i > 0; --i) std::swap(ids[i], ids[order_rng() % (i + 1)]);
    LossBreakdown sum;
    double budget_sum = 0;
    int batches = 0;
    for (std::size_t b = 0; b < ids.size(); b += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t e = std::min(ids.size(), b + static_cast<std::size_t>(config.batch_size));
      const auto input = to_tensor(corpus, std::span(ids).subspan(b, e - b));
      const auto n = static_cast<std::size_t>(input.size(0));
      std::vector<std::uint64_t> oracle_seeds(n), noise_seeds(n);
      for (std::size_t k = 0; k < n; ++k) {
        oracle_seeds[k] = derive_seed(config.seed, step, k);
        noise_seeds[k] = derive_seed(config.seed ^ kNoiseStream, step, k);
      }
      const auto prot = protector.forward(input);
      const auto diffused = oracle.run(prot, config.oracle, oracle_seeds, mask);
      const auto noise = noise_image(diffused, noise_seeds);
      const auto terms = loss_total(ex, input, prot, diffused, weights, noise);
      const auto violation = delta_violation(input, prot, profile.delta_budget).mean();
      const auto objective = terms.total + kBudgetPenaltyWeight * violation;

      const auto values = terms.values();
      const double budget = kBudgetPenaltyWeight * violation.item<double>();
      const std::pair<const char*, double> checks[] = {{"reconstruction", values.reconstruction},
                                                       {"content", values.content},
                                                       {"style", values.style},
                                                       {"noise", values.noise},
                                                       {"budget", budget}};
      for (const auto& [name, v] : checks) {
        if (!std::isfinite(v)) {
          throw NumericError("non-finite " + std::string(name) + " loss at epoch " + std::to_string(epoch) + ", step " +
                             std::to_string(step));
        }
      }
      opt.zero_grad();
      objective.backward();
      opt.step();

      sum.reconstruction += values.reconstruction;
      sum.content += values.content;
      sum.style += values.style;
      sum.noise += values.noise;
      sum.total += values.total;
      budget_sum += budget;
      ++batches;
      ++step;
    }
    LossBreakdown mean{sum.reconstruction / batches, sum.content / batches, sum.style / batches, sum.noise / batches,
                       sum.total / batches};
    report.epoch_means.push_back(mean);
    const auto c = mean.contributions(weights);
    report.curves.reconstruction.push_back(c[0]);
    report.curves.content.push_back(c[1]);
    report.curves.style.push_back(c[2]);
    report.curves.noise.push_back(c[3]);
    report.curves.total.push_back(c[0] + c[1] + c[2] + c[3]);
    report.curves.budget.push_back(budget_sum / batches);
    if (options.on_epoch) options.on_epoch(epoch, mean);
  }

  if (oracle.current_weight_hash() != oracle_hash) throw IntegrityError("oracle weights were mutated during training");
  protector.net()->eval();

  TrainedModel out{std::move(protector), {}, std::move(report)};
  out.metadata.train_config = config;
  out.metadata.level = config.level;
  out.metadata.oracle_hash = oracle_hash;
  out.metadata.epoch = config.epochs;
  out.metadata.loss_history = out.report.curves.as_map();
  out.report.steps = static_cast<int>(step);
  out.report.weight_hash = out.model.weight_hash();
  out.report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (!options.checkpoint.empty()) {
    save_checkpoint(out.model, out.metadata, options.checkpoint);
    out.report.checkpoint = options.checkpoint;
  }
  return out;
}

std::string config_tag(const TrainConfig& config) {
  const nlohmann::json j = config;
  const std::string text = j.dump();
  const auto hash = sha256_hex(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  return "L" + std::to_string(config.level) + "_" + to_string(config.variant) + "_" + hash.substr(0, 10);
}

Trainer make_trainer(const Corpus& corpus, const DatasetSplit& split, const Oracle& oracle,
                     std::filesystem::path checkpoint_dir, const PresetTable* presets, bool reuse_checkpoints) {
  std::string inputs = oracle.weight_hash();
  for (const auto& id : split.train) inputs += "\n" + id;
  const auto digest = sha256_hex(std::span(reinterpret_cast<const std::uint8_t*>(inputs.data()), inputs.size()));
  return [&corpus, split, oracle, dir = std::move(checkpoint_dir), presets, reuse_checkpoints,
          suffix = digest.substr(0, 8)](const TrainConfig& config) {
    TrainOptions opts;
    opts.presets = presets;
    if (!dir.empty()) opts.checkpoint = dir / (config_tag(config) + "_" + suffix + ".mamc");
    if (reuse_checkpoints && !opts.checkpoint.empty() && std::filesystem::exists(opts.checkpoint)) {
      try {
        auto loaded = load_checkpoint(opts.checkpoint, oracle.weight_hash());
        if (loaded.warnings.empty() && loaded.metadata.train_config == nlohmann::json(config)) {
          TrainReport report;
          report.curves = LossCurves::from_map(loaded.metadata.loss_history);
          report.checkpoint = opts.checkpoint;
          report.oracle_hash = loaded.metadata.oracle_hash;
          report.weight_hash = loaded.weight_hash;
          return TrainedModel{std::move(loaded.model), std::move(loaded.metadata), std::move(report)};
        }
      } catch (const Error&) {
        // Unreadable or stale: retrain and overwrite.
      }
    }
    return train(corpus, split, config, oracle, opts);
  };
}

Trainer memoize(Trainer trainer, const PresetTable* presets) {
  struct Cache {
    std::mutex mu;
    std::map<std::string, TrainedModel> models;
  };
  auto cache = std::make_shared<Cache>();
  return [trainer = std::move(trainer), cache, presets](const TrainConfig& config) {
    // An override equal to the level preset trains the same model as no override.
    TrainConfig canonical = config;
    if (canonical.weights && *canonical.weights == presets_or_bundled(presets).at(canonical.level).weights) {
      canonical.weights.reset();
    }
    const std::string key = nlohmann::json(canonical).dump();
    {
      std::lock_guard lock(cache->mu);
      if (auto it = cache->models.find(key); it != cache->models.end()) return it->second;
    }
    auto model = trainer(canonical);
    std::lock_guard lock(cache->mu);
    return cache->models.emplace(key, std::move(model)).first->second;
  };
}

nlohmann::json BankManifest::to_json() const {
  nlohmann::json levels = nlohmann::json::array();
  for (const auto& e : entries) {
    nlohmann::json j = {{"level", e.level}, {"status", e.available ? "ok" : "unavailable"}};
    if (e.available) {
      j["checkpoint"] = e.checkpoint.string();
      j["weight_hash"] = e.weight_hash;
      j["metrics"] = e.metrics;
    } else {
      j["error"] = e.error;
    }
    levels.push_back(j);
  }
  return {{"version", 1}, {"oracle_hash", oracle_hash}, {"levels", levels}};
}

BankManifest BankManifest::from_json(const nlohmann::json& j, const std::filesystem::path& base_dir) {
  BankManifest m;
  try {
    m.oracle_hash = j.at("oracle_hash").get<std::string>();
    for (const auto& e : j.at("levels")) {
      BankEntry b;
      b.level = e.at("level").get<int>();
      b.available = e.at("status").get<std::string>() == "ok";
      if (b.available) {
        b.checkpoint = e.at("checkpoint").get<std::string>();
        if (!b.checkpoint.empty() && b.checkpoint.is_relative() && !base_dir.empty()) b.checkpoint = base_dir / b.checkpoint;
        b.weight_hash = e.value("weight_hash", "");
        b.metrics = e.value("metrics", nlohmann::json::object());
      } else {
        b.error = e.value("error", "");
      }
      m.entries.push_back(std::move(b));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed bank manifest: ") + e.what());
  }
  return m;
}

void BankManifest::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest: " + path.string());
  out << to_json().dump(2) << '\n';
}

BankManifest BankManifest::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read bank manifest: " + path.string());
  try {
    return from_json(nlohmann::json::parse(in), path.parent_path());
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("malformed bank manifest " + path.string() + ": " + e.what());
  }
}

std::size_t BankManifest::available_count() const {
  return static_cast<std::size_t>(std::count_if(entries.begin(), entries.end(), [](const auto& e) { return e.available; }));
}

BankManifest train_balance_bank(const TrainConfig& base_config, const Trainer& trainer, const Oracle& oracle,
                                const SnapshotFn& snapshot, std::span<const int> levels, const PresetTable* presets) {
  const auto& table = presets_or_bundled(presets);
  for (int level : levels) (void)table.at(level);  // fail before any training
  base_config.validate();

  BankManifest manifest;
  manifest.oracle_hash = oracle.weight_hash();
  for (int level : levels) {
    BankEntry entry;
    entry.level = level;
    try {
      auto config = base_config;
      config.level = level;
      auto model = trainer(config);
      entry.checkpoint = model.report.checkpoint;
      entry.weight_hash = model.report.weight_hash;
      if (snapshot) entry.metrics = snapshot(model);
      entry.available = true;
    } catch (const std::exception& e) {
      entry.available = false;
      entry.error = e.what();
    }
    manifest.entries.push_back(std::move(entry));
  }
  return manifest;
}

void emit_loss_curves(const TrainReport& report, const std::filesystem::path& prefix) {
  const auto& c = report.curves;
  nlohmann::json j = {{"epochs", c.size()},
                      {"series", c.as_map()},
                      {"labels", {"reconstruction", "content", "style", "noise", "total"}}};
  const auto json_path = std::filesystem::path(prefix.string() + ".json");
  if (json_path.has_parent_path()) std::filesystem::create_directories(json_path.parent_path());
  std::ofstream out(json_path);
  if (!out) throw IoError("cannot write loss curves: " + json_path.string());
  out << j.dump(2) << '\n';
  if (!out) throw IoError("short write: " + json_path.string());
  render_line_chart({{"reconstruction", c.reconstruction},
                     {"content", c.content},
                     {"style", c.style},
                     {"noise", c.noise},
                     {"total", c.total}},
                    "Loss contributions per epoch", 800, 400, prefix.string() + ".png");
}

}  // namespace mamc
