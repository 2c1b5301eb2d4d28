#include "unit_test.hpp"

#include "mamc/errors.hpp"
#include "mamc/evalsuite.hpp"
#include "support.hpp"

using namespace mamc;

namespace {

struct Fixture {
  Corpus corpus = synthetic_corpus(10, 16, 6);
  std::vector<std::string> ids = corpus_ids(corpus);
  Oracle oracle = Oracle::untrained(16, 2);
  Protector model = build_unet(UNetSpec{2, 4, "silu", "sigmoid"}, 16, 9);
  CheckpointMetadata metadata;

  Fixture() {
    metadata.oracle_hash = oracle.weight_hash();
    OracleConfig c;
    c.steps = 2;
    metadata.train_config = {{"oracle", c}};
  }
  EvalTarget target() const { return {&model, &metadata}; }
  std::span<const std::string> few(std::size_t n = 4) const { return std::span(ids).first(n); }
};

TrainConfig tiny_config() {
  TrainConfig c;
  c.epochs = 1;
  c.batch_size = 4;
  c.unet = UNetSpec{2, 4, "silu", "sigmoid"};
  c.oracle.steps = 2;
  return c;
}

void check_same(const MetricReport& a, const MetricReport& b) {
  CHECK(a.psnr == b.psnr);
  CHECK(a.rmse == b.rmse);
  CHECK(a.ssim == b.ssim);
  CHECK(a.perceptual == b.perceptual);
}

}  // namespace

TEST_CASE("at strength zero both protocols agree") {
  Fixture f;
  EvalOptions o;
  OracleConfig c;
  c.strength = 0;
  o.oracle_config = c;
  const auto pair = eval_protocols(f.corpus, f.few(), f.model, f.metadata, f.oracle, o);
  CHECK(pair.p1.protocol == Protocol::kInputVsProtected);
  CHECK(pair.p2.protocol == Protocol::kDiffusedVsDiffused);
  check_same(pair.p1, pair.p2);
  REQUIRE(pair.p1.fid);
  CHECK(*pair.p1.fid == doctest::Approx(*pair.p2.fid).epsilon(1e-9));
}

TEST_CASE("evaluation refuses a foreign oracle unless forced") {
  Fixture f;
  f.metadata.oracle_hash = std::string(64, '0');
  try {
    eval_protocols(f.corpus, f.few(), f.model, f.metadata, f.oracle);
    FAIL("expected an integrity error");
  } catch (const IntegrityError& e) {
    CHECK(std::string(e.what()).find("--force") != std::string::npos);
  }
  EvalOptions o;
  o.force = true;
  CHECK_NOTHROW(eval_protocols(f.corpus, f.few(), f.model, f.metadata, f.oracle, o));
  CHECK_THROWS_AS(eval_protocols(f.corpus, {}, f.model, f.metadata, f.oracle, o), ConfigError);
}

TEST_CASE("evaluation is deterministic and independent of batching") {
  Fixture f;
  EvalOptions a, b;
  a.batch_size = 4;
  b.batch_size = 1;
  const auto x = run_protocols(f.corpus, f.few(), f.model, f.metadata, f.oracle, a);
  const auto y = run_protocols(f.corpus, f.few(), f.model, f.metadata, f.oracle, b);
  REQUIRE(x.input.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(x.protected_images[i] == y.protected_images[i]);
    double worst = 0;
    for (std::size_t k = 0; k < x.diffused_protected[i].size(); ++k) {
      worst = std::max(worst, std::abs(double(x.diffused_protected[i].data()[k]) - y.diffused_protected[i].data()[k]));
    }
    CHECK(worst <= 1e-5);
  }
  const auto s1 = score(x), s2 = score(x);
  check_same(s1.p2, s2.p2);
  CHECK(s1.p1.samples == 4);
  CHECK_NOTHROW(s1.p1.validate());
}

TEST_CASE("metric reports round trip through json") {
  Fixture f;
  const auto pair = eval_protocols(f.corpus, f.few(), f.model, f.metadata, f.oracle);
  const nlohmann::json j = pair;
  const auto back = j.get<ProtocolPair>();
  check_same(back.p1, pair.p1);
  CHECK(back.p2.fid == pair.p2.fid);
  CHECK(j.at("p1").at("protocol") == "P1");
  const auto single = single_image_metrics(Protocol::kInputVsProtected, f.corpus.begin()->second, f.corpus.begin()->second);
  CHECK_FALSE(single.fid.has_value());
  CHECK(single.ssim == 1.0);
  MetricReport bad = single;
  bad.ssim = 1.5;
  CHECK_THROWS_AS(bad.validate(), NumericError);
}

TEST_CASE("sweep reports validate and round trip") {
  SweepReport r;
  r.axis = "strength";
  r.points.push_back({"a", {}, std::nullopt, {}, true});
  CHECK_THROWS_AS(r.validate(), FormatError);
  r.points.push_back({"a", {}, std::nullopt, {}, true});
  CHECK_THROWS_AS(r.validate(), FormatError);
  r.points[1].setting = "b";
  r.points[1].p2 = MetricReport{};
  r.points[1].extra = {{"k", 3}};
  CHECK_NOTHROW(r.validate());
  const auto back = SweepReport::from_json(r.to_json());
  CHECK(back.to_json() == r.to_json());
  CHECK(back.at("b").extra.at("k") == 3);
  CHECK_THROWS_AS(back.at("c"), ConfigError);
  CHECK_THROWS_AS(SweepReport::from_json(nlohmann::json{{"axis", "x"}}), FormatError);

  testing::TempDir dir("sweep");
  r.emit(dir / "r");
  CHECK(std::filesystem::exists(dir / "r.json"));
  CHECK(std::filesystem::exists(dir / "r.png"));
}

TEST_CASE("robustness and strength sweeps emit one row per setting") {
  Fixture f;
  EvalOptions o;
  o.with_fid = false;
  const int blur[] = {3, 7};
  const int jpeg[] = {5};
  const auto r = robustness_sweep(f.corpus, f.few(3), f.target(), f.oracle, blur, jpeg, o);
  REQUIRE(r.points.size() == 4);
  CHECK(r.points[0].setting == "none");
  CHECK(r.at("blur_7").extra.at("kernel") == 7);
  CHECK(r.at("jpeg_5").p2.has_value());
  // Post-processing precedes diffusion, so P1 is unaffected.
  check_same(r.at("blur_3").p1, r.at("none").p1);
  const int even[] = {4};
  CHECK_THROWS_AS(robustness_sweep(f.corpus, f.few(3), f.target(), f.oracle, even, jpeg, o), ConfigError);

  const auto s = strength_sweep(f.corpus, f.few(3), f.target(), f.oracle, kStrengthGrid, o);
  REQUIRE(s.points.size() == 4);
  CHECK(s.points[0].setting == "reference");
  CHECK_FALSE(s.points[0].p2.has_value());
  CHECK(s.points[1].setting == "str_4");
  CHECK(s.points[3].setting == "str_7");
  for (const auto& p : s.points) check_same(p.p1, s.points[0].p1);
}

TEST_CASE("cross-dataset grid is complete and matches direct evaluation") {
  Fixture f;
  const Corpus other = synthetic_corpus(6, 16, 100);
  const Corpus third = synthetic_corpus(6, 16, 200);
  const auto m2 = build_unet(UNetSpec{2, 4, "silu", "sigmoid"}, 16, 10);
  const auto m3 = build_unet(UNetSpec{2, 4, "silu", "sigmoid"}, 16, 11);
  const std::vector<std::pair<std::string, EvalTarget>> bank{
      {"a", f.target()}, {"b", {&m2, &f.metadata}}, {"c", {&m3, &f.metadata}}};
  const std::vector<EvalSet> sets{{"a", &f.corpus, {f.ids.begin(), f.ids.begin() + 3}},
                                  {"b", &other, corpus_ids(other)},
                                  {"c", &third, corpus_ids(third)}};
  const auto r = cross_dataset(bank, sets, f.oracle);
  CHECK(r.cells.size() == 9);
  for (const auto& cell : r.cells) CHECK(cell.result.has_value());
  const auto direct = eval_protocols(other, sets[1].ids, m2, f.metadata, f.oracle);
  check_same(r.at("b", "b").result->p2, direct.p2);
  check_same(r.at("b", "b").result->p1, direct.p1);
  const auto back = CrossDatasetReport::from_json(r.to_json());
  CHECK(back.to_json() == r.to_json());
  auto broken = r.to_json();
  broken["cells"].erase(broken["cells"].begin());
  CHECK_THROWS_AS(CrossDatasetReport::from_json(broken), FormatError);
}

TEST_CASE("ablation and weight sweeps train each setting once") {
  Fixture f;
  const auto split = split_dataset(f.ids, 0);
  int calls = 0;
  auto inner = make_trainer(f.corpus, split, f.oracle, {});
  const Trainer trainer = memoize([&](const TrainConfig& c) {
    ++calls;
    return inner(c);
  });
  EvalOptions o;
  o.with_fid = false;
  const auto ab = ablation_suite(f.corpus, split.test, tiny_config(), trainer, f.oracle, o);
  REQUIRE(ab.points.size() == 4);
  CHECK(ab.points[2].setting == "no_noise_no_r2");
  for (const auto& p : ab.points) {
    CHECK(p.available);
    CHECK(p.extra.at("p1").at("psnr_norm") == doctest::Approx(p.p1.psnr / 30.0));
    CHECK(p.extra.at("p2").at("rmse_norm") == doctest::Approx(p.p2->rmse / 10.0));
  }
  CHECK(calls == 4);

  const auto w = weight_sweep(f.corpus, split.test, tiny_config(), trainer, f.oracle, kAlphaR2Grid, o);
  REQUIRE(w.points.size() == 3);
  CHECK(w.points[0].setting == "0.75");
  CHECK(w.points[1].setting == "1.00");
  CHECK(w.points[2].setting == "1.50");
  // alpha_r2 = 1.0 is the level-50 preset, already trained as "full".
  CHECK(calls == 6);
  check_same(w.at("1.00").p1, ab.at("full").p1);
  const double negative[] = {-1.0, 1.0};
  CHECK_THROWS_AS(weight_sweep(f.corpus, split.test, tiny_config(), trainer, f.oracle, negative, o), ConfigError);
}

TEST_CASE("inpainting scenarios keep unmasked pixels and mark missing models") {
  Fixture f;
  EvalOptions o;
  o.with_fid = false;
  testing::TempDir dir("inpaint");
  const auto partial = inpaint_scenarios(f.corpus, f.few(3), f.target(), std::nullopt, f.oracle, {}, 4, o);
  REQUIRE(partial.points.size() == 3);
  CHECK(partial.points[0].available);
  CHECK_FALSE(partial.points[1].available);
  CHECK_FALSE(partial.points[2].available);

  auto inpaint_meta = f.metadata;
  OracleConfig c;
  c.steps = 2;
  c.mode = OracleMode::kInpaint;
  inpaint_meta.train_config = {{"oracle", c}};
  const EvalTarget inpaint_target{&f.model, &inpaint_meta};
  const auto full = inpaint_scenarios(f.corpus, f.few(3), f.target(), inpaint_target, f.oracle, dir.path(), 2, o);
  for (const auto& p : full.points) {
    CHECK(p.available);
    CHECK(std::filesystem::exists(p.extra.at("gallery").get<std::string>()));
    if (p.extra.at("mode") == "inpaint") CHECK(p.extra.at("unmasked_max_error").get<double>() <= 1.0 / 255.0);
  }
  CHECK(full.at("inpaint_model_on_reconstruct").extra.at("mode") == "reconstruct");
  CHECK(full.notes.at("mask").at("width").get<int>() >= 1);
}
