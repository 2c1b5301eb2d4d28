#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mamc/image.hpp"
#include "mamc/oracle.hpp"
#include "mamc/protector.hpp"
#include "mamc/training.hpp"

namespace mamc {

enum class Protocol { kInputVsProtected, kDiffusedVsDiffused };

std::string to_string(Protocol p);

/// Averages over a set of image pairs. PSNR/RMSE/SSIM/perceptual are
/// per-pair means; FID compares the two sets as distributions.
struct MetricReport {
  Protocol protocol = Protocol::kInputVsProtected;
  double psnr = 0;
  double rmse = 0;
  double ssim = 0;
  double perceptual = 0;
  std::optional<double> fid;
  bool fid_jitter = false;
  std::string embedder = "mamc-extractor-gap3";
  std::size_t samples = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const MetricReport& r);
void from_json(const nlohmann::json& j, MetricReport& r);

MetricReport compare_sets(Protocol protocol, std::span<const Image> a, std::span<const Image> b, bool with_fid = true);

struct ProtocolPair {
  MetricReport p1;
  MetricReport p2;
};

void to_json(nlohmann::json& j, const ProtocolPair& r);
void from_json(const nlohmann::json& j, ProtocolPair& r);

/// The four images per sample a protocol run produces.
struct EvalSamples {
  std::vector<Image> input, protected_images, diffused_input, diffused_protected;
};

using PostProcess = std::function<Image(const Image&)>;

struct EvalOptions {
  bool force = false;                         // evaluate despite an oracle hash mismatch
  std::optional<OracleConfig> oracle_config;  // default: the checkpoint's training config
  std::optional<MaskSpec> mask;               // default: scaled reference mask in inpaint mode
  PostProcess postprocess;                    // applied to I and I' before diffusion
  bool with_fid = true;
  std::size_t batch_size = 16;
};

/// Oracle config recorded in a checkpoint's training config.
OracleConfig checkpoint_oracle_config(const CheckpointMetadata& metadata);

/// Runs protector and oracle over `ids`. M(I) and M(I') share the noise seed
/// of their sample. Refuses (IntegrityError) on oracle hash mismatch unless forced.
EvalSamples run_protocols(const Corpus& corpus, std::span<const std::string> ids, const Protector& model,
                          const CheckpointMetadata& metadata, const Oracle& oracle, const EvalOptions& options = {});

/// P1: I vs I'.  P2: M(I) vs M(I').
ProtocolPair eval_protocols(const Corpus& corpus, std::span<const std::string> ids, const Protector& model,
                            const CheckpointMetadata& metadata, const Oracle& oracle, const EvalOptions& options = {});
ProtocolPair score(const EvalSamples& samples, bool with_fid = true);

/// Single-image P1/P2 without FID (used by the service).
MetricReport single_image_metrics(Protocol protocol, const Image& a, const Image& b);

struct SweepPoint {
  std::string setting;
  MetricReport p1;
  std::optional<MetricReport> p2;
  nlohmann::json extra = nlohmann::json::object();
  bool available = true;
};

struct SweepReport {
  std::string axis;  // blur_kernel | jpeg_quality | strength | alpha_r2 | loss_variant | inpaint_scenario
  std::vector<SweepPoint> points;
  nlohmann::json notes = nlohmann::json::object();

  void validate() const;
  const SweepPoint& at(const std::string& setting) const;
  nlohmann::json to_json() const;
  static SweepReport from_json(const nlohmann::json& j);
  /// Writes <prefix>.json and a rendered table <prefix>.png.
  void emit(const std::filesystem::path& prefix) const;
};

struct EvalTarget {
  const Protector* model;
  const CheckpointMetadata* metadata;
};

struct EvalSet {
  std::string name;
  const Corpus* corpus;
  std::vector<std::string> ids;
};

struct CrossDatasetCell {
  std::string model;
  std::string dataset;
  std::optional<ProtocolPair> result;
  std::string error;
};

struct CrossDatasetReport {
  std::vector<std::string> models, datasets;
  std::vector<CrossDatasetCell> cells;  // row-major: model × dataset

  const CrossDatasetCell& at(const std::string& model, const std::string& dataset) const;
  nlohmann::json to_json() const;
  static CrossDatasetReport from_json(const nlohmann::json& j);
  void emit(const std::filesystem::path& prefix) const;
};

CrossDatasetReport cross_dataset(std::span<const std::pair<std::string, EvalTarget>> bank, std::span<const EvalSet> datasets,
                                 const Oracle& oracle, const EvalOptions& options = {});

inline constexpr std::array<int, 3> kBlurKernels{3, 7, 11};
inline constexpr std::array<int, 3> kJpegQualities{75, 30, 5};
inline constexpr std::array<int, 3> kStrengthGrid{4, 5, 7};
inline constexpr std::array<double, 3> kAlphaR2Grid{0.75, 1.0, 1.5};

/// Points: "none" baseline, blur_<k> for each kernel, jpeg_<q> for each quality.
SweepReport robustness_sweep(const Corpus& corpus, std::span<const std::string> ids, EvalTarget target,
                             const Oracle& oracle, std::span<const int> blur_kernels = kBlurKernels,
                             std::span<const int> jpeg_qualities = kJpegQualities, const EvalOptions& options = {});

/// Points: "reference" (P1 only), then one per strength.
SweepReport strength_sweep(const Corpus& corpus, std::span<const std::string> ids, EvalTarget target,
                           const Oracle& oracle, std::span<const int> strengths = kStrengthGrid,
                           const EvalOptions& options = {});

/// Trains the four loss variants of `base` and evaluates each. extra holds the
/// plotting normalisation: psnr/30, rmse/10, log10(fid).
SweepReport ablation_suite(const Corpus& corpus, std::span<const std::string> ids, const TrainConfig& base,
                           const Trainer& trainer, const Oracle& oracle, const EvalOptions& options = {});

SweepReport weight_sweep(const Corpus& corpus, std::span<const std::string> ids, const TrainConfig& base,
                         const Trainer& trainer, const Oracle& oracle, std::span<const double> alpha_r2 = kAlphaR2Grid,
                         const EvalOptions& options = {});

inline constexpr double kAblationPsnrScale = 30.0;
inline constexpr double kAblationRmseScale = 10.0;

/// Three scenarios: reconstruction-trained model on inpainting, inpaint-trained
/// model on inpainting, inpaint-trained model on reconstruction. A missing
/// model marks its scenarios unavailable. Galleries of (I, I', M(I), M(I'))
/// go to `gallery_dir` when set.
SweepReport inpaint_scenarios(const Corpus& corpus, std::span<const std::string> ids,
                              std::optional<EvalTarget> reconstruction_model, std::optional<EvalTarget> inpaint_model,
                              const Oracle& oracle, const std::filesystem::path& gallery_dir = {},
                              std::size_t gallery_rows = 4, const EvalOptions& options = {});

/// Writes a (I, I', M(I), M(I')) grid for the first `rows` samples.
void export_gallery(const EvalSamples& samples, const std::filesystem::path& path, std::size_t rows = 4);

/// Snapshot used by bank manifests: P1/P2 on the given split.
SnapshotFn make_snapshot_fn(const Corpus& corpus, std::vector<std::string> ids, const Oracle& oracle);

}  // namespace mamc
