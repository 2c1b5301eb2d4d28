// Runs every acceptance criterion end to end and prints one PASS/FAIL line
// per criterion. Exit status is non-zero when any criterion fails.
//
// Environment:
//   MAMC_ACCEPTANCE_DIR    working directory for the oracle, checkpoints and
//                          emitted reports (default: ./acceptance-run)
//   MAMC_ACCEPTANCE_REUSE  when set to 1, reuse an oracle and checkpoints
//                          already present in the working directory

#include <chrono>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bruteforce.hpp"
#include "gradcheck.hpp"
#include "mamc/archive.hpp"
#include "mamc/evalsuite.hpp"
#include "mamc/metrics.hpp"
#include "mamc/perceptual.hpp"
#include "mamc/service.hpp"
#include "mamc/training.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using namespace mamc;
using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

std::string strf(const char* format, ...) {
  va_list args;
  va_start(args, format);
  char buf[1024];
  std::vsnprintf(buf, sizeof buf, format, args);
  va_end(args);
  return buf;
}

const char* yes(bool b) { return b ? "yes" : "no"; }

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  std::string name;
  std::function<Outcome()> run;
};

std::string env_or(const char* name, const std::string& fallback) {
  const char* v = std::getenv(name);
  return v && *v ? v : fallback;
}

std::vector<std::uint8_t> read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void log(const std::string& msg) { std::cerr << "[acceptance] " << msg << std::endl; }

// Shared state for the training-based criteria.
struct Run {
  fs::path dir;
  bool reuse = false;
  Corpus corpus;
  DatasetSplit split;
  std::optional<Oracle> oracle;
  Trainer trainer;
  EvalOptions eval;

  Run(fs::path d, bool r) : dir(std::move(d)), reuse(r) {
    fs::create_directories(dir);
    corpus = synthetic_corpus(kToyCorpusCount, 64, kToyCorpusSeed);
    split = split_dataset(corpus_ids(corpus), 0);
  }

  const Oracle& the_oracle() {
    if (oracle) return *oracle;
    const auto path = dir / "oracle.mamc";
    if (reuse && fs::exists(path)) {
      log("loading oracle " + path.string());
      oracle = Oracle::load(path);
    } else {
      log(strf("pretraining oracle for %d epochs", kOracleEpochs));
      PretrainOptions opts;
      opts.on_epoch = [](int e, double loss) { log(strf("oracle epoch %d loss %.4f", e + 1, loss)); };
      oracle = pretrain_oracle(corpus, kOracleEpochs, 0, opts);
      oracle->save(path);
    }
    auto base = make_trainer(corpus, split, *oracle, dir / "checkpoints", nullptr, reuse);
    trainer = memoize([base](const TrainConfig& c) {
      log("training " + config_tag(c));
      const auto start = Clock::now();
      auto m = base(c);
      log(strf("trained %s in %.0f s", config_tag(c).c_str(), seconds_since(start)));
      return m;
    });
    return *oracle;
  }

  TrainedModel model(const TrainConfig& c) {
    the_oracle();
    return trainer(c);
  }

  ProtocolPair evaluate(const TrainedModel& m) {
    return eval_protocols(corpus, split.test, m.model, m.metadata, the_oracle(), eval);
  }
};

std::string pair_summary(const ProtocolPair& p) {
  return strf("P1 psnr %.2f ssim %.3f fid %.4f | P2 psnr %.2f ssim %.3f fid %.4f perceptual %.4f",
              p.p1.psnr, p.p1.ssim, p.p1.fid.value_or(-1), p.p2.psnr, p.p2.ssim, p.p2.fid.value_or(-1),
              p.p2.perceptual);
}

Outcome metric_oracles() {
  const auto start = Clock::now();
  std::vector<std::string> failures;
  double worst_plain = 0, worst_ssim = 0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto a = testing::random_image(32, 32, 2 * s), b = testing::random_image(32, 32, 2 * s + 1);
    worst_plain = std::max({worst_plain, std::abs(rmse(a, b) - testing::brute_rmse(a, b)),
                            std::abs(psnr(a, b) - testing::brute_psnr(a, b))});
    worst_ssim = std::max(worst_ssim, std::abs(ssim(a, b) - testing::brute_ssim(a, b)));
  }
  if (worst_plain > 1e-6) failures.push_back(strf("psnr/rmse off by %.2e", worst_plain));
  if (worst_ssim > 1e-4) failures.push_back(strf("ssim off by %.2e", worst_ssim));

  const auto img = synthetic_artwork(64, 3);
  if (ssim(img, img) != 1.0) failures.push_back("ssim(I,I) != 1");

  std::vector<Image> set;
  for (int i = 0; i < 16; ++i) set.push_back(synthetic_artwork(64, 100 + i));
  const double self_fid = fid(set, set).value;
  if (self_fid > 1e-6) failures.push_back(strf("fid(S,S) = %.2e", self_fid));

  std::vector<float> base(32 * 32 * 3), shifted(base.size());
  for (std::size_t i = 0; i < base.size(); ++i) {
    base[i] = static_cast<float>((i % 240) / 255.0);
    shifted[i] = static_cast<float>((i % 240 + 10) / 255.0);
  }
  const double offset_psnr = psnr(Image(32, 32, base), Image(32, 32, shifted));
  if (std::abs(offset_psnr - 28.13) > 0.01) failures.push_back(strf("offset psnr %.4f", offset_psnr));

  const double t = seconds_since(start);
  if (t >= 60) failures.push_back(strf("took %.0f s", t));
  std::ostringstream d;
  d << strf("max |err| psnr/rmse %.1e ssim %.1e, fid(S,S) %.1e, offset psnr %.3f, %.1f s", worst_plain,
            worst_ssim, self_fid, offset_psnr, t);
  for (const auto& f : failures) d << "; " << f;
  return {failures.empty(), d.str()};
}

Outcome gradient_suite() {
  const auto start = Clock::now();
  bool ok = true;
  std::ostringstream d;
  for (const auto& c : testing::objective_gradchecks(0)) {
    ok = ok && c.checked > 0 && c.worst_relative_error <= 1e-3;
    d << strf("%s %.1e (%zu coords); ", c.name.c_str(), c.worst_relative_error, static_cast<std::size_t>(c.checked));
  }
  const double t = seconds_since(start);
  ok = ok && t < 300;
  d << strf("%.1f s", t);
  return {ok, d.str()};
}

Outcome gram_equivalence() {
  std::mt19937_64 rng(2024);
  double worst = 0;
  const int dims[4][3] = {{2, 2, 2}, {3, 4, 5}, {5, 3, 3}, {8, 2, 4}};
  for (int trial = 0; trial < 25; ++trial) {
    FeatureStack sa, sb;
    double expected_p = 0, expected_g = 0;
    for (const auto& dim : dims) {
      const auto ma = testing::random_map(dim[0], dim[1], dim[2], rng);
      const auto mb = testing::random_map(dim[0], dim[1], dim[2], rng);
      sa.levels.push_back(testing::to_t(ma).unsqueeze(0));
      sb.levels.push_back(testing::to_t(mb).unsqueeze(0));
      const auto ga = testing::brute_gram(ma);
      const auto got = gram(sa.levels.back()[0]);
      for (std::size_t r = 0; r < ga.size(); ++r)
        for (std::size_t c = 0; c < ga.size(); ++c) worst = std::max(worst, std::abs(got[r][c].item<double>() - ga[r][c]));
      expected_p += testing::brute_perceptual_level(ma, mb);
      expected_g += testing::frobenius(ga, testing::brute_gram(mb));
    }
    expected_g /= static_cast<double>(std::size(dims));
    worst = std::max(worst, std::abs(perceptual_distance(sa, sb).item<double>() - expected_p));
    worst = std::max(worst, std::abs(gram_distance(sa, sb).item<double>() - expected_g));
  }
  return {worst <= 1e-9, strf("max |err| %.2e over 25 trials", worst)};
}

Outcome end_to_end(Run& run) {
  const auto start = Clock::now();
  const auto m = run.model(TrainConfig{});
  emit_loss_curves(m.report, run.dir / "reports" / "level50_curves");
  const auto r = run.evaluate(m);
  const double t = m.report.wall_seconds + seconds_since(start);
  const double dpsnr = r.p1.psnr - r.p2.psnr, dssim = r.p1.ssim - r.p2.ssim;
  const bool fid_ok = r.p1.fid && r.p2.fid && *r.p2.fid > *r.p1.fid;
  const bool ok = dpsnr >= 5.0 && dssim >= 0.2 && fid_ok && t <= 8 * 3600;
  return {ok, strf("dPSNR %.2f (>= 5), dSSIM %.3f (>= 0.2), FID P2 > P1: %s; %s; %.0f s", dpsnr, dssim, yes(fid_ok),
                          pair_summary(r).c_str(), t)};
}

Outcome balance_monotonicity(Run& run) {
  std::vector<ProtocolPair> r;
  std::ostringstream d;
  for (int level : {10, 50, 90}) {
    TrainConfig c;
    c.level = level;
    r.push_back(run.evaluate(run.model(c)));
    d << strf("L%d: P1 psnr %.2f, P2 perceptual %.4f; ", level, r.back().p1.psnr, r.back().p2.perceptual);
  }
  const bool psnr_down = r[0].p1.psnr > r[1].p1.psnr && r[1].p1.psnr > r[2].p1.psnr;
  const bool div_up = r[0].p2.perceptual < r[1].p2.perceptual && r[1].p2.perceptual < r[2].p2.perceptual;
  d << strf("psnr decreasing: %s, divergence increasing: %s", yes(psnr_down), yes(div_up));
  return {psnr_down && div_up, d.str()};
}

Outcome ablation_direction(Run& run) {
  run.the_oracle();
  auto o = run.eval;
  const auto report = ablation_suite(run.corpus, run.split.test, TrainConfig{}, run.trainer, *run.oracle, o);
  report.emit(run.dir / "reports" / "ablation");
  const double full = report.at("full").p1.ssim, bare = report.at("no_noise_no_r2").p1.ssim;
  std::ostringstream d;
  for (const auto& p : report.points) d << strf("%s ssim %.4f; ", p.setting.c_str(), p.p1.ssim);
  d << strf("no_noise_no_r2 < full: %s", yes(bare < full));
  return {bare < full, d.str()};
}

Outcome weight_ordering(Run& run) {
  run.the_oracle();
  const auto report = weight_sweep(run.corpus, run.split.test, TrainConfig{}, run.trainer, *run.oracle, kAlphaR2Grid,
                                   run.eval);
  report.emit(run.dir / "reports" / "alpha_r2");
  const double lo = report.at("0.75").p1.psnr, mid = report.at("1.00").p1.psnr, hi = report.at("1.50").p1.psnr;
  return {hi > lo, strf("P1 psnr at 0.75 %.2f, 1.00 %.2f, 1.50 %.2f", lo, mid, hi)};
}

Outcome robustness(Run& run) {
  const auto m = run.model(TrainConfig{});
  const auto report = robustness_sweep(run.corpus, run.split.test, {&m.model, &m.metadata}, run.the_oracle(),
                                       kBlurKernels, kJpegQualities, run.eval);
  report.emit(run.dir / "reports" / "robustness");
  const double base = report.at("none").p2->perceptual, jpeg = report.at("jpeg_5").p2->perceptual;
  bool blur_rows = true;
  std::ostringstream d;
  d << strf("P2 perceptual none %.4f, jpeg_5 %.4f (floor %.4f); blur", base, jpeg, 0.95 * base);
  for (int k : kBlurKernels) {
    const auto& p = report.at("blur_" + std::to_string(k));
    blur_rows = blur_rows && p.available && p.p2.has_value();
    d << strf(" %d: %.4f", k, p.p2 ? p.p2->perceptual : -1.0);
  }
  return {jpeg >= 0.95 * base && blur_rows, d.str()};
}

Outcome strength_and_inpaint(Run& run) {
  const auto recon = run.model(TrainConfig{});
  TrainConfig ic;
  ic.oracle.mode = OracleMode::kInpaint;
  const auto inpaint = run.model(ic);
  const auto& oracle = run.the_oracle();

  const auto strengths = strength_sweep(run.corpus, run.split.test, {&recon.model, &recon.metadata}, oracle,
                                        kStrengthGrid, run.eval);
  strengths.emit(run.dir / "reports" / "strength");
  bool ok = strengths.points.size() == 4 && strengths.points[0].setting == "reference" && !strengths.points[0].p2;
  std::ostringstream d;
  d << "strength rows:";
  for (const auto& p : strengths.points) {
    d << ' ' << p.setting;
    if (p.p2) d << strf(" (P2 psnr %.2f)", p.p2->psnr);
  }
  for (int s : kStrengthGrid) ok = ok && strengths.at("str_" + std::to_string(s)).p2.has_value();

  const auto scenarios = inpaint_scenarios(run.corpus, run.split.test, EvalTarget{&recon.model, &recon.metadata},
                                           EvalTarget{&inpaint.model, &inpaint.metadata}, oracle,
                                           run.dir / "reports" / "inpaint", 4, run.eval);
  scenarios.emit(run.dir / "reports" / "inpaint_scenarios");
  d << "; scenarios:";
  ok = ok && scenarios.points.size() == 3;
  for (const auto& p : scenarios.points) {
    ok = ok && p.available;
    d << ' ' << p.setting;
    if (p.extra.at("mode") == "inpaint") {
      const double err = p.extra.at("unmasked_max_error").get<double>();
      ok = ok && err <= 1.0 / 255.0;
      d << strf(" (unmasked max err %.2e)", err);
    }
  }
  return {ok, d.str()};
}

Outcome determinism(Run& run) {
  const auto first = run.model(TrainConfig{});
  TrainOptions opts;
  opts.checkpoint = run.dir / "determinism.mamc";
  const auto again = train(run.corpus, run.split, TrainConfig{}, run.the_oracle(), opts);
  const bool weights_equal = again.report.weight_hash == first.report.weight_hash;
  const bool files_equal = sha256_hex(read_bytes(first.report.checkpoint)) == sha256_hex(read_bytes(opts.checkpoint));

  const auto png = encode_png(run.corpus.at(run.split.test.front()));
  const auto a = protect_png(png, first.model), b = protect_png(png, again.model), c = protect_png(png, first.model);
  const bool png_equal = a == b && a == c;
  return {weights_equal && files_equal && png_equal,
          strf("retrained weight hash equal: %s, checkpoint file equal: %s, protected PNG bytes equal: %s",
               yes(weights_equal), yes(files_equal), yes(png_equal))};
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path dir = env_or("MAMC_ACCEPTANCE_DIR", "acceptance-run");
  const bool reuse = env_or("MAMC_ACCEPTANCE_REUSE", "0") == "1";
  Run run(dir, reuse);

  const std::vector<Criterion> criteria{
      {"metric-oracles", metric_oracles},
      {"gradient-suite", gradient_suite},
      {"gram-perceptual-equivalence", gram_equivalence},
      {"end-to-end-protection", [&] { return end_to_end(run); }},
      {"balance-monotonicity", [&] { return balance_monotonicity(run); }},
      {"ablation-direction", [&] { return ablation_direction(run); }},
      {"weight-sweep-ordering", [&] { return weight_ordering(run); }},
      {"robustness-direction", [&] { return robustness(run); }},
      {"strength-and-inpainting", [&] { return strength_and_inpaint(run); }},
      {"determinism", [&] { return determinism(run); }},
  };

  std::vector<std::string> only(argv + 1, argv + argc);
  json summary = json::array();
  int failed = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.name) == only.end()) continue;
    log("running " + c.name);
    const auto start = Clock::now();
    Outcome out;
    try {
      out = c.run();
    } catch (const std::exception& e) {
      out = {false, std::string("error: ") + e.what()};
    }
    const double t = seconds_since(start);
    if (!out.pass) ++failed;
    std::cout << (out.pass ? "PASS " : "FAIL ") << c.name << ": " << out.detail << std::endl;
    summary.push_back({{"criterion", c.name}, {"pass", out.pass}, {"detail", out.detail}, {"seconds", t}});
  }
  std::ofstream(dir / "acceptance.json") << summary.dump(2) << '\n';
  std::cout << strf("%zu of %zu criteria passed", summary.size() - failed, summary.size()) << std::endl;
  return failed == 0 ? 0 : 1;
}
