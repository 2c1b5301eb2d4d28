#include "mamc/oracle.hpp"

#include <cmath>
#include <numbers>
#include <random>

#include "mamc/archive.hpp"
#include "mamc/errors.hpp"

namespace mamc {
namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

torch::Tensor sinusoidal_embedding(const torch::Tensor& timesteps, int64_t dim, torch::ScalarType dtype) {
  const int64_t half = dim / 2;
  auto freqs = torch::exp(torch::arange(half, torch::TensorOptions().dtype(torch::kFloat64)) *
                          (-std::log(10000.0) / static_cast<double>(half)));
  auto args = timesteps.to(torch::kFloat64).unsqueeze(1) * freqs.unsqueeze(0);
  return torch::cat({torch::sin(args), torch::cos(args)}, 1).to(dtype);
}

}  // namespace

std::string to_string(OracleMode mode) { return mode == OracleMode::kInpaint ? "inpaint" : "reconstruct"; }

OracleMode oracle_mode_from_string(const std::string& s) {
  if (s == "reconstruct") return OracleMode::kReconstruct;
  if (s == "inpaint") return OracleMode::kInpaint;
  throw ConfigError("unknown oracle mode '" + s + "' (expected reconstruct or inpaint)");
}

void OracleConfig::validate() const {
  if (strength < 0 || strength > 10) throw ConfigError("oracle strength must be in [0,10], got " + std::to_string(strength));
  if (steps < 1 || steps > 50) throw ConfigError("oracle steps must be in [1,50], got " + std::to_string(steps));
  if (noise_schedule != "cosine" && noise_schedule != "linear") {
    throw ConfigError("unknown noise schedule '" + noise_schedule + "'");
  }
}

void to_json(nlohmann::json& j, const OracleConfig& c) {
  j = {{"strength", c.strength},
       {"steps", c.steps},
       {"mode", to_string(c.mode)},
       {"seed", c.seed},
       {"noise_schedule", c.noise_schedule}};
}

void from_json(const nlohmann::json& j, OracleConfig& c) {
  c.strength = j.value("strength", c.strength);
  c.steps = j.value("steps", c.steps);
  c.mode = oracle_mode_from_string(j.value("mode", to_string(c.mode)));
  c.seed = j.value("seed", c.seed);
  c.noise_schedule = j.value("noise_schedule", c.noise_schedule);
}

NoiseSchedule NoiseSchedule::named(const std::string& name, int points) {
  if (points < 1) throw ConfigError("schedule needs at least one point");
  std::vector<double> betas(static_cast<std::size_t>(points));
  if (name == "cosine") {
    constexpr double s = 0.008;
    auto f = [&](double t) {
      const double c = std::cos((t / points + s) / (1 + s) * std::numbers::pi / 2);
      return c * c;
    };
    for (int t = 1; t <= points; ++t) betas[t - 1] = std::min(0.999, 1.0 - f(t) / f(t - 1));
  } else if (name == "linear") {
    const double scale = 1000.0 / points;
    const double lo = 1e-4 * scale, hi = 0.02 * scale;
    for (int t = 0; t < points; ++t) betas[t] = points == 1 ? lo : lo + (hi - lo) * t / (points - 1);
  } else {
    throw ConfigError("unknown noise schedule '" + name + "'");
  }
  NoiseSchedule sched;
  sched.name_ = name;
  sched.alpha_bar_.resize(static_cast<std::size_t>(points) + 1);
  sched.alpha_bar_[0] = 1.0;
  for (int t = 1; t <= points; ++t) sched.alpha_bar_[t] = sched.alpha_bar_[t - 1] * (1.0 - betas[t - 1]);
  return sched;
}

int NoiseSchedule::start_step(int strength) const {
  return static_cast<int>(std::lround(strength * points() / 10.0));
}

std::vector<int> NoiseSchedule::sampling_steps(int strength, int steps) const {
  const int start = start_step(strength);
  std::vector<int> ts;
  const int n = std::min(steps, start);
  for (int k = n; k >= 1; --k) ts.push_back(static_cast<int>(std::lround(static_cast<double>(start) * k / n)));
  ts.push_back(0);
  return ts;
}

UNetSpec default_denoiser_spec() { return UNetSpec{2, 16, "silu", "none"}; }

DenoiserImpl::DenoiserImpl(UNetSpec spec) : spec_(std::move(spec)) {
  spec_.output = "none";
  time1_ = register_module("time1", torch::nn::Linear(kTimeDim, 2 * kTimeDim));
  time2_ = register_module("time2", torch::nn::Linear(2 * kTimeDim, 2 * kTimeDim));
  body_ = register_module("body", UNet(spec_, 3, 3, 2 * kTimeDim));
}

torch::Tensor DenoiserImpl::forward(const torch::Tensor& noisy, const torch::Tensor& timesteps) {
  auto emb = sinusoidal_embedding(timesteps, kTimeDim, noisy.scalar_type());
  emb = time2_->forward(torch::silu(time1_->forward(emb)));
  return body_->forward(noisy, emb);
}

struct Oracle::State {
  Denoiser net{nullptr};
  NoiseSchedule schedule;
  Provenance provenance;
  std::string hash;
};

Oracle::Oracle(std::shared_ptr<State> state) : state_(std::move(state)) {}

Oracle Oracle::freeze(Denoiser net, Provenance provenance) {
  auto st = std::make_shared<State>();
  net->eval();
  for (auto& p : net->parameters()) p.set_requires_grad(false);
  st->net = std::move(net);
  st->schedule = NoiseSchedule::named(provenance.schedule);
  st->provenance = std::move(provenance);
  Archive a;
  a.arrays = export_parameters(*st->net);
  st->hash = a.weight_hash();
  return Oracle(std::move(st));
}

Oracle Oracle::untrained(int resolution, std::uint64_t seed, UNetSpec spec) {
  Denoiser net(std::move(spec));
  seeded_init(*net, seed);
  Provenance p;
  p.resolution = resolution;
  p.seed = seed;
  p.corpus_fingerprint = "untrained";
  return freeze(std::move(net), std::move(p));
}

void Oracle::save(const std::filesystem::path& path) const {
  Archive a;
  a.kind = "oracle";
  const auto& p = state_->provenance;
  a.metadata = {{"denoiser_spec", state_->net->spec()},
                {"resolution", p.resolution},
                {"schedule", p.schedule},
                {"schedule_points", state_->schedule.points()},
                {"corpus_fingerprint", p.corpus_fingerprint},
                {"epochs", p.epochs},
                {"seed", p.seed},
                {"loss_history", p.loss_history}};
  a.arrays = export_parameters(*state_->net);
  write_archive(a, path);
}

Oracle Oracle::load(const std::filesystem::path& path) {
  auto a = read_archive(path);
  if (a.kind != "oracle") throw IntegrityError(path.string() + ": field 'kind' is '" + a.kind + "', expected 'oracle'");
  try {
    Denoiser net(a.metadata.at("denoiser_spec").get<UNetSpec>());
    import_parameters(*net, a.arrays, path.string());
    Provenance p;
    p.resolution = a.metadata.at("resolution").get<int>();
    p.schedule = a.metadata.at("schedule").get<std::string>();
    p.corpus_fingerprint = a.metadata.at("corpus_fingerprint").get<std::string>();
    p.epochs = a.metadata.value("epochs", 0);
    p.seed = a.metadata.value("seed", std::uint64_t{0});
    p.loss_history = a.metadata.value("loss_history", std::vector<double>{});
    return freeze(std::move(net), std::move(p));
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(path.string() + ": malformed oracle metadata: " + e.what());
  }
}

const std::string& Oracle::weight_hash() const { return state_->hash; }

std::string Oracle::current_weight_hash() const {
  Archive a;
  a.arrays = export_parameters(*state_->net);
  return a.weight_hash();
}

void Oracle::verify_frozen() const {
  if (current_weight_hash() != state_->hash) throw IntegrityError("oracle weights were mutated");
}

int Oracle::resolution() const { return state_->provenance.resolution; }
const Oracle::Provenance& Oracle::provenance() const { return state_->provenance; }
Denoiser Oracle::denoiser() const { return state_->net; }

void Oracle::check_input(const torch::Tensor& images, std::span<const std::uint64_t> seeds) const {
  if (images.dim() != 4 || images.size(1) != 3) throw ShapeError("oracle input must be [N,3,H,W]");
  if (images.size(2) != resolution() || images.size(3) != resolution()) {
    throw ShapeError("oracle resolution is " + std::to_string(resolution()) + ", got " + std::to_string(images.size(2)) +
                     "x" + std::to_string(images.size(3)));
  }
  if (static_cast<int64_t>(seeds.size()) != images.size(0)) throw ShapeError("one seed per batch element required");
}

torch::Tensor Oracle::sample_noise(const torch::Tensor& like, std::span<const std::uint64_t> seeds) const {
  std::vector<torch::Tensor> noise;
  noise.reserve(seeds.size());
  for (auto s : seeds) {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(s);
    noise.push_back(torch::randn({like.size(1), like.size(2), like.size(3)}, gen, torch::kFloat32));
  }
  return torch::stack(noise).to(like.scalar_type());
}

torch::Tensor Oracle::diffuse(const torch::Tensor& images, const OracleConfig& config,
                              std::span<const std::uint64_t> sample_seeds) const {
  config.validate();
  check_input(images, sample_seeds);
  if (config.strength == 0) return images.clone();

  const auto& sched = state_->schedule;
  const auto ts = sched.sampling_steps(config.strength, config.steps);
  const auto eps = sample_noise(images, sample_seeds);
  torch::Tensor x;
  if (config.strength == 10) {
    x = eps;
  } else {
    const double ab = sched.alpha_bar(ts.front());
    x = std::sqrt(ab) * (images * 2.0 - 1.0) + std::sqrt(1.0 - ab) * eps;
  }
  auto& net = state_->net;
  for (std::size_t i = 0; i + 1 < ts.size(); ++i) {
    const double ab = sched.alpha_bar(ts[i]), ab_prev = sched.alpha_bar(ts[i + 1]);
    auto t = torch::full({images.size(0)}, static_cast<double>(ts[i]), torch::kFloat64);
    auto eps_hat = net->forward(x, t);
    auto x0 = ((x - std::sqrt(1.0 - ab) * eps_hat) / std::sqrt(ab)).clamp(-1.0, 1.0);
    x = std::sqrt(ab_prev) * x0 + std::sqrt(1.0 - ab_prev) * eps_hat;
  }
  return ((x + 1.0) * 0.5).clamp(0.0, 1.0);
}

torch::Tensor Oracle::inpaint(const torch::Tensor& images, const MaskSpec& mask, const OracleConfig& config,
                              std::span<const std::uint64_t> sample_seeds) const {
  config.validate();
  check_input(images, sample_seeds);
  auto m = mask_tensor(mask, static_cast<int>(images.size(2)), static_cast<int>(images.size(3))).to(images.scalar_type());
  if (mask.area() == 0 || config.strength == 0) return images.clone();

  const auto& sched = state_->schedule;
  const auto ts = sched.sampling_steps(config.strength, config.steps);
  const auto eps = sample_noise(images, sample_seeds);
  // The masked region is unknown to the sampler: it starts from mid-grey.
  const auto known = images * 2.0 - 1.0;
  const auto guide = known * (1.0 - m);
  auto noised = [&](int t) {
    const double ab = sched.alpha_bar(t);
    return std::sqrt(ab) * guide + std::sqrt(1.0 - ab) * eps;
  };
  torch::Tensor x = config.strength == 10 ? eps : noised(ts.front());
  auto& net = state_->net;
  for (std::size_t i = 0; i + 1 < ts.size(); ++i) {
    const double ab = sched.alpha_bar(ts[i]), ab_prev = sched.alpha_bar(ts[i + 1]);
    auto t = torch::full({images.size(0)}, static_cast<double>(ts[i]), torch::kFloat64);
    auto eps_hat = net->forward(x, t);
    auto x0 = ((x - std::sqrt(1.0 - ab) * eps_hat) / std::sqrt(ab)).clamp(-1.0, 1.0);
    x = std::sqrt(ab_prev) * x0 + std::sqrt(1.0 - ab_prev) * eps_hat;
    if (ts[i + 1] > 0) x = m * x + (1.0 - m) * noised(ts[i + 1]);
  }
  auto generated = ((x + 1.0) * 0.5).clamp(0.0, 1.0);
  return m * generated + (1.0 - m) * images;
}

torch::Tensor Oracle::run(const torch::Tensor& images, const OracleConfig& config,
                          std::span<const std::uint64_t> sample_seeds, const std::optional<MaskSpec>& mask) const {
  if (config.mode == OracleMode::kInpaint) {
    if (!mask) throw ConfigError("inpaint mode requires a mask");
    return inpaint(images, *mask, config, sample_seeds);
  }
  return diffuse(images, config, sample_seeds);
}

Image Oracle::diffuse(const Image& img, const OracleConfig& config) const {
  torch::NoGradGuard guard;
  const std::uint64_t seed[] = {config.seed};
  return from_tensor(diffuse(to_tensor(img).unsqueeze(0), config, seed)[0]);
}

Image Oracle::inpaint(const Image& img, const MaskSpec& mask, const OracleConfig& config) const {
  if (!mask.within(img.height(), img.width())) throw MaskError("mask lies outside the image bounds");
  torch::NoGradGuard guard;
  const std::uint64_t seed[] = {config.seed};
  return from_tensor(inpaint(to_tensor(img).unsqueeze(0), mask, config, seed)[0]);
}

std::string corpus_fingerprint(const Corpus& corpus) {
  std::vector<std::uint8_t> buf;
  for (const auto& [id, img] : corpus) {
    buf.insert(buf.end(), id.begin(), id.end());
    buf.push_back(0);
    const auto* p = reinterpret_cast<const std::uint8_t*>(img.data().data());
    buf.insert(buf.end(), p, p + img.size() * sizeof(float));
  }
  return sha256_hex(buf);
}

std::uint64_t derive_seed(std::uint64_t global_seed, std::uint64_t step, std::uint64_t index) {
  return splitmix64(splitmix64(splitmix64(global_seed) ^ step) ^ (index * 0xD1B54A32D192ED03ULL));
}

Oracle pretrain_oracle(const Corpus& corpus, int epochs, std::uint64_t seed, const PretrainOptions& options) {
  if (epochs < 1) throw ConfigError("oracle pretraining needs at least one epoch");
  if (corpus.size() < options.min_corpus) {
    throw ConfigError("oracle pretraining needs >= " + std::to_string(options.min_corpus) + " images, got " +
                      std::to_string(corpus.size()));
  }
  const int resolution = corpus.begin()->second.height();
  for (const auto& [id, img] : corpus) {
    if (img.height() != resolution || img.width() != resolution) throw ShapeError("corpus image " + id + " has the wrong size");
  }
  const auto schedule = NoiseSchedule::named(options.schedule);
  const int points = schedule.points();
  std::vector<double> ab(static_cast<std::size_t>(points) + 1);
  for (int t = 0; t <= points; ++t) ab[t] = schedule.alpha_bar(t);
  const auto ab_table = torch::tensor(ab, torch::kFloat64).to(torch::kFloat32);

  Denoiser net(options.spec);
  seeded_init(*net, seed);
  net->train();
  torch::optim::Adam opt(net->parameters(), torch::optim::AdamOptions(options.learning_rate));
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed ^ 0xA5A5A5A5ULL);
  std::mt19937_64 order_rng(seed);

  const auto ids = corpus_ids(corpus);
  const auto data = to_tensor(corpus, ids);
  const int64_t n = data.size(0);
  Oracle::Provenance prov;
  prov.corpus_fingerprint = corpus_fingerprint(corpus);
  prov.resolution = resolution;
  prov.schedule = options.schedule;
  prov.epochs = epochs;
  prov.seed = seed;

  std::vector<int64_t> order(static_cast<std::size_t>(n));
  for (int64_t i = 0; i < n; ++i) order[i] = i;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[order_rng() % (i + 1)]);
    double sum = 0;
    int batches = 0;
    for (int64_t start = 0; start < n; start += options.batch_size) {
      const int64_t end = std::min(n, start + options.batch_size);
      auto idx = torch::tensor(std::vector<int64_t>(order.begin() + start, order.begin() + end), torch::kInt64);
      auto x0 = data.index_select(0, idx) * 2.0 - 1.0;
      auto t = torch::randint(1, points + 1, {x0.size(0)}, gen, torch::kInt64);
      auto eps = torch::randn(x0.sizes(), gen, torch::kFloat32);
      auto a = ab_table.index_select(0, t).view({-1, 1, 1, 1});
      auto xt = a.sqrt() * x0 + (1.0 - a).sqrt() * eps;
      auto loss = torch::mse_loss(net->forward(xt, t.to(torch::kFloat64)), eps);
      opt.zero_grad();
      loss.backward();
      opt.step();
      sum += loss.item<double>();
      ++batches;
    }
    prov.loss_history.push_back(sum / batches);
    if (options.on_epoch) options.on_epoch(epoch, sum / batches);
  }
  return Oracle::freeze(std::move(net), std::move(prov));
}

}  // namespace mamc
