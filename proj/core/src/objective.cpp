#include "mamc/objective.hpp"

#include <cmath>
#include <fstream>

#include "mamc/errors.hpp"

namespace mamc {
namespace {

void check_same(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.sizes() != b.sizes()) throw ShapeError(std::string(what) + ": inputs differ in shape");
}

torch::Tensor batch(const Image& img) { return to_tensor(img).unsqueeze(0); }

}  // namespace

void LossWeights::validate() const {
  for (double v : {alpha_r1, alpha_r2, alpha_c, alpha_s, alpha_n}) {
    if (!std::isfinite(v) || v < 0) throw ConfigError("loss weights must be finite and non-negative");
  }
}

double LossWeights::attack_ratio() const {
  const double rec = alpha_r1 + alpha_r2;
  return rec > 0 ? (alpha_c + alpha_s + alpha_n) / rec : std::numeric_limits<double>::infinity();
}

void to_json(nlohmann::json& j, const LossWeights& w) {
  j = {{"alpha_r1", w.alpha_r1}, {"alpha_r2", w.alpha_r2}, {"alpha_c", w.alpha_c}, {"alpha_s", w.alpha_s}, {"alpha_n", w.alpha_n}};
}

void from_json(const nlohmann::json& j, LossWeights& w) {
  w.alpha_r1 = j.value("alpha_r1", w.alpha_r1);
  w.alpha_r2 = j.value("alpha_r2", w.alpha_r2);
  w.alpha_c = j.value("alpha_c", w.alpha_c);
  w.alpha_s = j.value("alpha_s", w.alpha_s);
  w.alpha_n = j.value("alpha_n", w.alpha_n);
}

void to_json(nlohmann::json& j, const BalanceProfile& p) {
  j = p.weights;
  j["level"] = p.level;
  j["phi"] = p.delta_budget;
}

void from_json(const nlohmann::json& j, BalanceProfile& p) {
  p.level = j.at("level").get<int>();
  p.weights = j.get<LossWeights>();
  p.delta_budget = j.at("phi").get<double>();
}

PresetTable PresetTable::from_json(const nlohmann::json& j) {
  PresetTable t;
  for (const auto& entry : j.at("levels")) {
    auto p = entry.get<BalanceProfile>();
    p.weights.validate();
    if (!(p.delta_budget >= 0)) throw ConfigError("preset budget must be non-negative");
    t.profiles_[p.level] = p;
  }
  for (int level : kBalanceLevels) {
    if (!t.profiles_.contains(level)) throw ConfigError("preset table lacks level " + std::to_string(level));
  }
  const BalanceProfile* prev = nullptr;
  for (const auto& [level, p] : t.profiles_) {
    if (prev && !(p.delta_budget > prev->delta_budget && p.weights.attack_ratio() > prev->weights.attack_ratio())) {
      throw ConfigError("preset table is not monotone at level " + std::to_string(level));
    }
    prev = &p;
  }
  return t;
}

PresetTable PresetTable::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read preset table: " + path.string());
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed preset table " + path.string() + ": " + e.what());
  }
}

const PresetTable& PresetTable::bundled() {
  static const PresetTable t = load(asset_dir() / "presets.json");
  return t;
}

const BalanceProfile& PresetTable::at(int level) const {
  auto it = profiles_.find(level);
  if (it == profiles_.end()) {
    std::string valid;
    for (const auto& [l, _] : profiles_) valid += (valid.empty() ? "" : ", ") + std::to_string(l);
    throw ConfigError("unknown protection level " + std::to_string(level) + " (valid: " + valid + ")");
  }
  return it->second;
}

std::vector<int> PresetTable::levels() const {
  std::vector<int> out;
  for (const auto& [l, _] : profiles_) out.push_back(l);
  return out;
}

nlohmann::json PresetTable::to_json() const {
  nlohmann::json levels = nlohmann::json::array();
  for (const auto& [_, p] : profiles_) levels.push_back(p);
  return {{"version", 1}, {"budget_epsilon", kBudgetEpsilon}, {"budget_penalty", kBudgetPenaltyWeight}, {"levels", levels}};
}

BalanceProfile profile_for_level(int level) { return PresetTable::bundled().at(level); }

std::array<double, 4> LossBreakdown::contributions(const LossWeights& w) const {
  return {reconstruction, -w.alpha_c * content, -w.alpha_s * style, w.alpha_n * noise};
}

LossBreakdown LossTensors::values() const {
  return {reconstruction.item<double>(), content.item<double>(), style.item<double>(), noise.item<double>(),
          total.item<double>()};
}

torch::Tensor loss_reconstruction(const Extractor& ex, const torch::Tensor& input, const torch::Tensor& protected_images,
                                  const LossWeights& w) {
  check_same(input, protected_images, "loss_reconstruction");
  auto pixel = (input - protected_images).pow(2).mean({1, 2, 3});
  return w.alpha_r1 * perceptual_distance(ex, input, protected_images) + w.alpha_r2 * pixel;
}

torch::Tensor loss_content(const Extractor& ex, const torch::Tensor& protected_images, const torch::Tensor& diffused) {
  check_same(protected_images, diffused, "loss_content");
  return perceptual_distance(ex, protected_images, diffused);
}

torch::Tensor loss_style(const Extractor& ex, const torch::Tensor& protected_images, const torch::Tensor& diffused) {
  check_same(protected_images, diffused, "loss_style");
  return gram_distance(ex, protected_images, diffused);
}

torch::Tensor loss_noise(const Extractor& ex, const torch::Tensor& diffused, const torch::Tensor& noise_target) {
  check_same(diffused, noise_target, "loss_noise");
  return perceptual_distance(ex, diffused, noise_target);
}

torch::Tensor noise_image(const torch::Tensor& like, std::span<const std::uint64_t> seeds) {
  if (static_cast<int64_t>(seeds.size()) != like.size(0)) throw ShapeError("one noise seed per batch element required");
  std::vector<torch::Tensor> out;
  out.reserve(seeds.size());
  for (auto s : seeds) {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(s);
    out.push_back((0.5 + 0.25 * torch::randn({like.size(1), like.size(2), like.size(3)}, gen, torch::kFloat32)).clamp(0.0, 1.0));
  }
  return torch::stack(out).to(like.scalar_type());
}

LossTensors loss_total(const Extractor& ex, const torch::Tensor& input, const torch::Tensor& protected_images,
                       const torch::Tensor& diffused, const LossWeights& w, const torch::Tensor& noise_target) {
  check_same(input, protected_images, "loss_total");
  check_same(protected_images, diffused, "loss_total");
  check_same(diffused, noise_target, "loss_total");
  w.validate();
  const auto f_in = extract_features(ex, input);
  const auto f_prot = extract_features(ex, protected_images);
  const auto f_diff = extract_features(ex, diffused);
  const auto f_noise = extract_features(ex, noise_target);

  LossTensors t;
  t.reconstruction = (w.alpha_r1 * perceptual_distance(f_in, f_prot) +
                      w.alpha_r2 * (input - protected_images).pow(2).mean({1, 2, 3}))
                         .mean();
  t.content = perceptual_distance(f_prot, f_diff).mean();
  t.style = gram_distance(f_prot, f_diff).mean();
  t.noise = perceptual_distance(f_diff, f_noise).mean();
  t.total = t.reconstruction - w.alpha_c * t.content - w.alpha_s * t.style + w.alpha_n * t.noise;
  return t;
}

torch::Tensor delta_violation(const torch::Tensor& input, const torch::Tensor& protected_images, double delta_budget) {
  check_same(input, protected_images, "delta_violation");
  auto mean_abs = (protected_images - input).abs().mean({1, 2, 3});
  return torch::relu(mean_abs - (delta_budget + kBudgetEpsilon));
}

double loss_reconstruction(const Image& input, const Image& protected_image, const LossWeights& w) {
  torch::NoGradGuard guard;
  return loss_reconstruction(default_extractor(), batch(input), batch(protected_image), w).item<double>();
}

double loss_content(const Image& protected_image, const Image& diffused) {
  torch::NoGradGuard guard;
  return loss_content(default_extractor(), batch(protected_image), batch(diffused)).item<double>();
}

double loss_style(const Image& protected_image, const Image& diffused) {
  torch::NoGradGuard guard;
  return loss_style(default_extractor(), batch(protected_image), batch(diffused)).item<double>();
}

Image noise_image(int height, int width, std::uint64_t seed) {
  const std::uint64_t s[] = {seed};
  return from_tensor(noise_image(torch::empty({1, 3, height, width}), s)[0]);
}

double loss_noise(const Image& diffused, std::uint64_t seed) {
  torch::NoGradGuard guard;
  const auto d = batch(diffused);
  const std::uint64_t s[] = {seed};
  return loss_noise(default_extractor(), d, noise_image(d, s)).item<double>();
}

LossBreakdown loss_total(const Image& input, const Image& protected_image, const Image& diffused, const LossWeights& w,
                         std::uint64_t seed) {
  torch::NoGradGuard guard;
  const auto d = batch(diffused);
  const std::uint64_t s[] = {seed};
  return loss_total(default_extractor(), batch(input), batch(protected_image), d, w, noise_image(d, s)).values();
}

double delta_violation(const Image& input, const Image& protected_image, const BalanceProfile& profile) {
  return delta_violation(batch(input), batch(protected_image), profile.delta_budget).item<double>();
}

}  // namespace mamc
