#include "mamc/evalsuite.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include "mamc/errors.hpp"
#include "mamc/metrics.hpp"
#include "mamc/perceptual.hpp"
#include "mamc/plot.hpp"

namespace mamc {
namespace {

double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

std::string fmt(double v, const char* spec = "%.3f") {
  char buf[48];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

std::vector<std::string> report_cells(const MetricReport& r) {
  return {fmt(r.psnr, "%.2f"), fmt(r.rmse, "%.2f"), fmt(r.ssim), r.fid ? fmt(*r.fid, "%.4g") : "-"};
}

void write_json(const nlohmann::json& j, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write report: " + path.string());
  out << j.dump(2) << '\n';
}

std::filesystem::path with_suffix(std::filesystem::path prefix, const std::string& ext) {
  prefix += ext;
  return prefix;
}

MaskSpec mask_for(const EvalOptions& options, int resolution) {
  return options.mask ? *options.mask : scale_mask(kReferenceMask, resolution, resolution);
}

}  // namespace

std::string to_string(Protocol p) { return p == Protocol::kInputVsProtected ? "P1" : "P2"; }

void MetricReport::validate() const {
  const bool finite = std::isfinite(psnr) && std::isfinite(rmse) && std::isfinite(ssim) && std::isfinite(perceptual) &&
                      (!fid || std::isfinite(*fid));
  if (!finite) throw NumericError("metric report contains a non-finite value");
  if (ssim < -1.0 - 1e-9 || ssim > 1.0 + 1e-9) throw NumericError("SSIM outside [-1, 1]");
  if (fid && *fid < 0) throw NumericError("negative FID");
  if (rmse < 0 || psnr > kPsnrCap) throw NumericError("RMSE/PSNR out of range");
}

void to_json(nlohmann::json& j, const MetricReport& r) {
  j = {{"protocol", to_string(r.protocol)}, {"psnr", r.psnr},       {"rmse", r.rmse},
       {"ssim", r.ssim},                    {"perceptual", r.perceptual}, {"fid", nullptr},
       {"fid_jitter", r.fid_jitter},       {"embedder", r.embedder}, {"samples", r.samples}};
  if (r.fid) j["fid"] = *r.fid;
}

void from_json(const nlohmann::json& j, MetricReport& r) {
  const auto p = j.at("protocol").get<std::string>();
  if (p != "P1" && p != "P2") throw FormatError("unknown protocol '" + p + "'");
  r.protocol = p == "P1" ? Protocol::kInputVsProtected : Protocol::kDiffusedVsDiffused;
  r.psnr = j.at("psnr").get<double>();
  r.rmse = j.at("rmse").get<double>();
  r.ssim = j.at("ssim").get<double>();
  r.perceptual = j.value("perceptual", 0.0);
  r.fid = j.contains("fid") && !j.at("fid").is_null() ? std::optional<double>(j.at("fid").get<double>()) : std::nullopt;
  r.fid_jitter = j.value("fid_jitter", false);
  r.embedder = j.value("embedder", r.embedder);
  r.samples = j.at("samples").get<std::size_t>();
}

void to_json(nlohmann::json& j, const ProtocolPair& r) { j = {{"p1", r.p1}, {"p2", r.p2}}; }

void from_json(const nlohmann::json& j, ProtocolPair& r) {
  r.p1 = j.at("p1").get<MetricReport>();
  r.p2 = j.at("p2").get<MetricReport>();
}

MetricReport compare_sets(Protocol protocol, std::span<const Image> a, std::span<const Image> b, bool with_fid) {
  if (a.size() != b.size()) throw ShapeError("compared sets differ in size");
  if (a.empty()) throw ConfigError("cannot score an empty set");
  std::vector<double> p, r, s;
  for (std::size_t i = 0; i < a.size(); ++i) {
    p.push_back(psnr(a[i], b[i]));
    r.push_back(rmse(a[i], b[i]));
    s.push_back(ssim(a[i], b[i]));
  }
  MetricReport out;
  out.protocol = protocol;
  out.psnr = mean(p);
  out.rmse = mean(r);
  out.ssim = mean(s);
  out.samples = a.size();
  {
    torch::NoGradGuard guard;
    const auto& ex = default_extractor();
    double total = 0;
    constexpr std::size_t kBatch = 32;
    for (std::size_t i = 0; i < a.size(); i += kBatch) {
      const auto n = std::min(kBatch, a.size() - i);
      total += perceptual_distance(ex, to_tensor(a.subspan(i, n)), to_tensor(b.subspan(i, n))).sum().item<double>();
    }
    out.perceptual = total / static_cast<double>(a.size());
  }
  if (with_fid && a.size() >= 2) {
    const auto f = fid(a, b);
    out.fid = f.value;
    out.fid_jitter = f.jitter_applied;
  }
  out.validate();
  return out;
}

MetricReport single_image_metrics(Protocol protocol, const Image& a, const Image& b) {
  return compare_sets(protocol, std::span(&a, 1), std::span(&b, 1), false);
}

OracleConfig checkpoint_oracle_config(const CheckpointMetadata& metadata) {
  if (metadata.train_config.contains("oracle")) return metadata.train_config.at("oracle").get<OracleConfig>();
  return OracleConfig{};
}

EvalSamples run_protocols(const Corpus& corpus, std::span<const std::string> ids, const Protector& model,
                          const CheckpointMetadata& metadata, const Oracle& oracle, const EvalOptions& options) {
  if (metadata.oracle_hash != oracle.weight_hash() && !options.force) {
    throw IntegrityError("checkpoint was trained against oracle " + metadata.oracle_hash.substr(0, 12) +
                         " but the loaded oracle is " + oracle.weight_hash().substr(0, 12) + " (use --force to override)");
  }
  if (ids.empty()) throw ConfigError("evaluation split is empty");
  const OracleConfig config = options.oracle_config.value_or(checkpoint_oracle_config(metadata));
  config.validate();
  std::optional<MaskSpec> mask;
  if (config.mode == OracleMode::kInpaint) mask = mask_for(options, oracle.resolution());

  torch::NoGradGuard guard;
  EvalSamples out;
  const std::size_t batch = std::max<std::size_t>(1, options.batch_size);
  for (std::size_t start = 0; start < ids.size(); start += batch) {
    const auto n = std::min(batch, ids.size() - start);
    const auto chunk = ids.subspan(start, n);
    const auto images = to_tensor(corpus, chunk);
    // One image at a time, so I' is exactly what protect() returns for it.
    std::vector<torch::Tensor> protected_parts;
    for (int64_t i = 0; i < images.size(0); ++i) protected_parts.push_back(model.forward(images.narrow(0, i, 1)));
    const auto protected_t = torch::cat(protected_parts);
    std::vector<std::uint64_t> seeds(n);
    for (std::size_t i = 0; i < n; ++i) seeds[i] = derive_seed(config.seed, 0, start + i);

    auto inputs = batch_from_tensor(images);
    auto prot = batch_from_tensor(protected_t);
    torch::Tensor diff_in, diff_prot;
    if (options.postprocess) {
      std::vector<Image> pi, pp;
      for (std::size_t i = 0; i < n; ++i) {
        pi.push_back(options.postprocess(inputs[i]));
        pp.push_back(options.postprocess(prot[i]));
      }
      diff_in = oracle.run(to_tensor(pi), config, seeds, mask);
      diff_prot = oracle.run(to_tensor(pp), config, seeds, mask);
    } else {
      diff_in = oracle.run(images, config, seeds, mask);
      diff_prot = oracle.run(protected_t.clamp(0, 1), config, seeds, mask);
    }
    auto di = batch_from_tensor(diff_in), dp = batch_from_tensor(diff_prot);
    for (std::size_t i = 0; i < n; ++i) {
      out.input.push_back(std::move(inputs[i]));
      out.protected_images.push_back(std::move(prot[i]));
      out.diffused_input.push_back(std::move(di[i]));
      out.diffused_protected.push_back(std::move(dp[i]));
    }
  }
  return out;
}

ProtocolPair score(const EvalSamples& s, bool with_fid) {
  return {compare_sets(Protocol::kInputVsProtected, s.input, s.protected_images, with_fid),
          compare_sets(Protocol::kDiffusedVsDiffused, s.diffused_input, s.diffused_protected, with_fid)};
}

ProtocolPair eval_protocols(const Corpus& corpus, std::span<const std::string> ids, const Protector& model,
                            const CheckpointMetadata& metadata, const Oracle& oracle, const EvalOptions& options) {
  return score(run_protocols(corpus, ids, model, metadata, oracle, options), options.with_fid);
}

// --- SweepReport ----------------------------------------------------------

void SweepReport::validate() const {
  if (axis.empty()) throw FormatError("sweep report has no axis");
  if (points.size() < 2) throw FormatError("sweep report needs at least 2 points");
  std::set<std::string> seen;
  for (const auto& p : points) {
    if (!seen.insert(p.setting).second) throw FormatError("duplicate sweep setting '" + p.setting + "'");
    if (p.available) {
      p.p1.validate();
      if (p.p2) p.p2->validate();
    }
  }
}

const SweepPoint& SweepReport::at(const std::string& setting) const {
  for (const auto& p : points) {
    if (p.setting == setting) return p;
  }
  throw ConfigError("sweep has no setting '" + setting + "'");
}

nlohmann::json SweepReport::to_json() const {
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& p : points) {
    nlohmann::json j{{"setting", p.setting}, {"available", p.available}, {"extra", p.extra}};
    if (p.available) {
      j["p1"] = p.p1;
      j["p2"] = p.p2 ? nlohmann::json(*p.p2) : nlohmann::json(nullptr);
    }
    pts.push_back(std::move(j));
  }
  return {{"axis", axis}, {"points", pts}, {"notes", notes}};
}

SweepReport SweepReport::from_json(const nlohmann::json& j) {
  SweepReport r;
  try {
    r.axis = j.at("axis").get<std::string>();
    r.notes = j.value("notes", nlohmann::json::object());
    for (const auto& pj : j.at("points")) {
      SweepPoint p;
      p.setting = pj.at("setting").get<std::string>();
      p.available = pj.value("available", true);
      p.extra = pj.value("extra", nlohmann::json::object());
      if (p.available) {
        p.p1 = pj.at("p1").get<MetricReport>();
        if (pj.contains("p2") && !pj.at("p2").is_null()) p.p2 = pj.at("p2").get<MetricReport>();
      }
      r.points.push_back(std::move(p));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed sweep report: ") + e.what());
  }
  r.validate();
  return r;
}

void SweepReport::emit(const std::filesystem::path& prefix) const {
  write_json(to_json(), with_suffix(prefix, ".json"));
  std::vector<std::vector<std::string>> rows{
      {axis, "P1 PSNR", "P1 RMSE", "P1 SSIM", "P1 FID", "P2 PSNR", "P2 RMSE", "P2 SSIM", "P2 FID"}};
  for (const auto& p : points) {
    std::vector<std::string> row{p.setting};
    if (!p.available) {
      row.push_back("unavailable");
    } else {
      for (auto& c : report_cells(p.p1)) row.push_back(c);
      if (p.p2) {
        for (auto& c : report_cells(*p.p2)) row.push_back(c);
      }
    }
    rows.push_back(std::move(row));
  }
  render_table(rows, axis + " sweep (FID embedder: " + std::string(MetricReport{}.embedder) + ")",
               with_suffix(prefix, ".png"));
}

// --- cross-dataset ----------------------------------------------------------

const CrossDatasetCell& CrossDatasetReport::at(const std::string& model, const std::string& dataset) const {
  for (const auto& c : cells) {
    if (c.model == model && c.dataset == dataset) return c;
  }
  throw ConfigError("no cell for " + model + " × " + dataset);
}

nlohmann::json CrossDatasetReport::to_json() const {
  nlohmann::json cs = nlohmann::json::array();
  for (const auto& c : cells) {
    nlohmann::json j{{"model", c.model}, {"dataset", c.dataset}};
    if (c.result) {
      j["result"] = *c.result;
    } else {
      j["error"] = c.error;
    }
    cs.push_back(std::move(j));
  }
  return {{"models", models}, {"datasets", datasets}, {"cells", cs}};
}

CrossDatasetReport CrossDatasetReport::from_json(const nlohmann::json& j) {
  CrossDatasetReport r;
  try {
    r.models = j.at("models").get<std::vector<std::string>>();
    r.datasets = j.at("datasets").get<std::vector<std::string>>();
    for (const auto& cj : j.at("cells")) {
      CrossDatasetCell c;
      c.model = cj.at("model").get<std::string>();
      c.dataset = cj.at("dataset").get<std::string>();
      if (cj.contains("result")) {
        c.result = cj.at("result").get<ProtocolPair>();
      } else {
        c.error = cj.value("error", "");
      }
      r.cells.push_back(std::move(c));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed cross-dataset report: ") + e.what());
  }
  if (r.cells.size() != r.models.size() * r.datasets.size()) throw FormatError("cross-dataset grid is incomplete");
  return r;
}

void CrossDatasetReport::emit(const std::filesystem::path& prefix) const {
  write_json(to_json(), with_suffix(prefix, ".json"));
  std::vector<std::vector<std::string>> rows{{"model", "dataset", "P1 PSNR", "P1 RMSE", "P1 SSIM", "P1 FID", "P2 PSNR",
                                              "P2 RMSE", "P2 SSIM", "P2 FID"}};
  for (const auto& c : cells) {
    std::vector<std::string> row{c.model, c.dataset};
    if (c.result) {
      for (auto& v : report_cells(c.result->p1)) row.push_back(v);
      for (auto& v : report_cells(c.result->p2)) row.push_back(v);
    } else {
      row.push_back("failed: " + c.error);
    }
    rows.push_back(std::move(row));
  }
  render_table(rows, "cross-dataset evaluation", with_suffix(prefix, ".png"));
}

CrossDatasetReport cross_dataset(std::span<const std::pair<std::string, EvalTarget>> bank,
                                 std::span<const EvalSet> datasets, const Oracle& oracle, const EvalOptions& options) {
  CrossDatasetReport r;
  for (const auto& [name, target] : bank) r.models.push_back(name);
  for (const auto& d : datasets) r.datasets.push_back(d.name);
  for (const auto& [name, target] : bank) {
    for (const auto& d : datasets) {
      CrossDatasetCell cell{name, d.name, std::nullopt, {}};
      try {
        cell.result = eval_protocols(*d.corpus, d.ids, *target.model, *target.metadata, oracle, options);
      } catch (const std::exception& e) {
        cell.error = e.what();
      }
      r.cells.push_back(std::move(cell));
    }
  }
  return r;
}

// --- sweeps ------------------------------------------------------------------

SweepReport robustness_sweep(const Corpus& corpus, std::span<const std::string> ids, EvalTarget target,
                             const Oracle& oracle, std::span<const int> blur_kernels,
                             std::span<const int> jpeg_qualities, const EvalOptions& options) {
  for (int k : blur_kernels) {
    if (k < 1 || k % 2 == 0) throw ConfigError("blur kernel must be odd and positive, got " + std::to_string(k));
  }
  for (int q : jpeg_qualities) {
    if (q < 1 || q > 100) throw ConfigError("JPEG quality must be in 1..100, got " + std::to_string(q));
  }
  SweepReport r;
  r.axis = "postprocess";
  auto add = [&](const std::string& setting, PostProcess post, nlohmann::json extra) {
    EvalOptions o = options;
    o.postprocess = std::move(post);
    const auto pair = eval_protocols(corpus, ids, *target.model, *target.metadata, oracle, o);
    r.points.push_back({setting, pair.p1, pair.p2, std::move(extra), true});
  };
  add("none", {}, {{"kind", "none"}});
  for (int k : blur_kernels) {
    add("blur_" + std::to_string(k), [k](const Image& img) { return gaussian_blur(img, k); },
        {{"kind", "blur"}, {"kernel", k}, {"sigma", k / 6.0}});
  }
  for (int q : jpeg_qualities) {
    add("jpeg_" + std::to_string(q), [q](const Image& img) { return jpeg_roundtrip(img, q); },
        {{"kind", "jpeg"}, {"quality", q}});
  }
  r.notes["blur_direction"] = "reported only; larger kernels are expected to weaken protection";
  r.validate();
  return r;
}

SweepReport strength_sweep(const Corpus& corpus, std::span<const std::string> ids, EvalTarget target,
                           const Oracle& oracle, std::span<const int> strengths, const EvalOptions& options) {
  SweepReport r;
  r.axis = "strength";
  const OracleConfig base = options.oracle_config.value_or(checkpoint_oracle_config(*target.metadata));
  std::optional<MetricReport> reference;
  for (int s : strengths) {
    EvalOptions o = options;
    OracleConfig c = base;
    c.strength = s;
    c.validate();
    o.oracle_config = c;
    const auto pair = eval_protocols(corpus, ids, *target.model, *target.metadata, oracle, o);
    if (!reference) {
      reference = pair.p1;
      r.points.push_back({"reference", pair.p1, std::nullopt, {{"role", "P1 reference"}}, true});
    }
    r.points.push_back({"str_" + std::to_string(s), pair.p1, pair.p2, {{"strength", s}}, true});
  }
  r.validate();
  return r;
}

namespace {

nlohmann::json ablation_extra(const ProtocolPair& pair) {
  nlohmann::json j;
  for (const auto& [key, m] : {std::pair{"p1", &pair.p1}, std::pair{"p2", &pair.p2}}) {
    j[key] = {{"psnr_norm", m->psnr / kAblationPsnrScale},
              {"rmse_norm", m->rmse / kAblationRmseScale},
              {"log10_fid", m->fid ? nlohmann::json(std::log10(std::max(*m->fid, 1e-12))) : nlohmann::json(nullptr)}};
  }
  return j;
}

SweepPoint train_and_eval(const std::string& setting, const TrainConfig& config, nlohmann::json extra,
                          const Corpus& corpus, std::span<const std::string> ids, const Trainer& trainer,
                          const Oracle& oracle, const EvalOptions& options) {
  SweepPoint p;
  p.setting = setting;
  p.extra = std::move(extra);
  try {
    const auto trained = trainer(config);
    const auto pair = eval_protocols(corpus, ids, trained.model, trained.metadata, oracle, options);
    p.p1 = pair.p1;
    p.p2 = pair.p2;
    p.extra["checkpoint"] = trained.report.checkpoint.string();
    p.extra["weight_hash"] = trained.report.weight_hash;
  } catch (const std::exception& e) {
    p.available = false;
    p.extra["error"] = e.what();
  }
  return p;
}

}  // namespace

SweepReport ablation_suite(const Corpus& corpus, std::span<const std::string> ids, const TrainConfig& base,
                           const Trainer& trainer, const Oracle& oracle, const EvalOptions& options) {
  SweepReport r;
  r.axis = "loss_variant";
  r.notes["normalisation"] = {{"psnr", kAblationPsnrScale}, {"rmse", kAblationRmseScale}, {"fid", "log10"}};
  for (auto v : kLossVariants) {
    TrainConfig c = base;
    c.variant = v;
    auto p = train_and_eval(to_string(v), c, {{"variant", to_string(v)}}, corpus, ids, trainer, oracle, options);
    if (p.available) {
      auto ex = ablation_extra({p.p1, *p.p2});
      for (auto it = ex.begin(); it != ex.end(); ++it) p.extra[it.key()] = it.value();
    }
    r.points.push_back(std::move(p));
  }
  r.validate();
  return r;
}

SweepReport weight_sweep(const Corpus& corpus, std::span<const std::string> ids, const TrainConfig& base,
                         const Trainer& trainer, const Oracle& oracle, std::span<const double> alpha_r2,
                         const EvalOptions& options) {
  SweepReport r;
  r.axis = "alpha_r2";
  const auto presets = PresetTable::bundled();
  for (double a : alpha_r2) {
    if (!(a > 0)) throw ConfigError("alpha_r2 values must be positive");
  }
  for (double a : alpha_r2) {
    TrainConfig c = base;
    LossWeights w = c.weights.value_or(presets.at(c.level).weights);
    w.alpha_r2 = a;
    c.weights = w;
    char label[32];
    std::snprintf(label, sizeof label, "%.2f", a);
    r.points.push_back(train_and_eval(label, c, {{"alpha_r2", a}}, corpus, ids, trainer, oracle, options));
  }
  r.validate();
  return r;
}

void export_gallery(const EvalSamples& s, const std::filesystem::path& path, std::size_t rows) {
  std::vector<std::vector<Image>> grid;
  for (std::size_t i = 0; i < std::min(rows, s.input.size()); ++i) {
    grid.push_back({s.input[i], s.protected_images[i], s.diffused_input[i], s.diffused_protected[i]});
  }
  render_gallery(grid, path);
}

SweepReport inpaint_scenarios(const Corpus& corpus, std::span<const std::string> ids,
                              std::optional<EvalTarget> reconstruction_model, std::optional<EvalTarget> inpaint_model,
                              const Oracle& oracle, const std::filesystem::path& gallery_dir, std::size_t gallery_rows,
                              const EvalOptions& options) {
  struct Scenario {
    std::string name;
    std::optional<EvalTarget> target;
    OracleMode mode;
  };
  const std::vector<Scenario> scenarios{
      {"reconstruct_model_on_inpaint", reconstruction_model, OracleMode::kInpaint},
      {"inpaint_model_on_inpaint", inpaint_model, OracleMode::kInpaint},
      {"inpaint_model_on_reconstruct", inpaint_model, OracleMode::kReconstruct},
  };
  const MaskSpec mask = mask_for(options, oracle.resolution());
  SweepReport r;
  r.axis = "inpaint_scenario";
  r.notes["mask"] = {{"top", mask.top}, {"left", mask.left}, {"height", mask.height}, {"width", mask.width}};
  for (const auto& sc : scenarios) {
    SweepPoint p;
    p.setting = sc.name;
    p.extra["mode"] = to_string(sc.mode);
    if (!sc.target) {
      p.available = false;
      p.extra["error"] = "checkpoint unavailable";
      r.points.push_back(std::move(p));
      continue;
    }
    try {
      EvalOptions o = options;
      OracleConfig c = o.oracle_config.value_or(checkpoint_oracle_config(*sc.target->metadata));
      c.mode = sc.mode;
      o.oracle_config = c;
      o.mask = mask;
      const auto samples = run_protocols(corpus, ids, *sc.target->model, *sc.target->metadata, oracle, o);
      const auto pair = score(samples, o.with_fid);
      p.p1 = pair.p1;
      p.p2 = pair.p2;
      if (sc.mode == OracleMode::kInpaint) {
        // Outside the mask the oracle must return its input unchanged.
        double worst = 0;
        for (std::size_t i = 0; i < samples.input.size(); ++i) {
          const auto& in = samples.input[i];
          const auto& out = samples.diffused_input[i];
          for (int y = 0; y < in.height(); ++y) {
            for (int x = 0; x < in.width(); ++x) {
              const bool inside =
                  y >= mask.top && y < mask.top + mask.height && x >= mask.left && x < mask.left + mask.width;
              if (inside) continue;
              for (int ch = 0; ch < 3; ++ch) worst = std::max(worst, std::abs(double(in.at(y, x, ch)) - out.at(y, x, ch)));
            }
          }
        }
        p.extra["unmasked_max_error"] = worst;
      }
      if (!gallery_dir.empty()) {
        const auto path = gallery_dir / (sc.name + ".png");
        export_gallery(samples, path, gallery_rows);
        p.extra["gallery"] = path.string();
      }
    } catch (const std::exception& e) {
      p.available = false;
      p.extra["error"] = e.what();
    }
    r.points.push_back(std::move(p));
  }
  r.validate();
  return r;
}

SnapshotFn make_snapshot_fn(const Corpus& corpus, std::vector<std::string> ids, const Oracle& oracle) {
  return [&corpus, ids = std::move(ids), &oracle](const TrainedModel& m) {
    EvalOptions o;
    o.with_fid = ids.size() >= 2;
    const auto pair = eval_protocols(corpus, ids, m.model, m.metadata, oracle, o);
    return nlohmann::json(pair);
  };
}

}  // namespace mamc
