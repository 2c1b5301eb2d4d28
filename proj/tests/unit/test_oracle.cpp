#include "unit_test.hpp"

#include <atomic>
#include <thread>

#include <httplib.h>

#include "mamc/archive.hpp"
#include "mamc/errors.hpp"
#include "mamc/oracle.hpp"
#include "support.hpp"

using namespace mamc;

namespace {

torch::Tensor batch(int n, int size, std::uint64_t seed) {
  std::vector<torch::Tensor> items;
  for (int i = 0; i < n; ++i) items.push_back(to_tensor(synthetic_artwork(size, seed + i)));
  return torch::stack(items);
}

std::vector<std::uint64_t> seeds(int n, std::uint64_t base = 0) {
  std::vector<std::uint64_t> s;
  for (int i = 0; i < n; ++i) s.push_back(base + i);
  return s;
}

// Minimal img2img stand-in served from this process.
class FakeRemote {
 public:
  FakeRemote() { port_ = server_.bind_to_any_port("127.0.0.1"); }
  ~FakeRemote() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }
  // Handlers must be registered before this is called.
  void start() {
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  httplib::Server& server() { return server_; }
  std::string url(const std::string& path = "/img2img") const {
    return "http://127.0.0.1:" + std::to_string(port_) + path;
  }

 private:
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

RemoteOptions fast_options(const std::string& url) {
  RemoteOptions o;
  o.endpoint = url;
  o.initial_backoff = std::chrono::milliseconds(1);
  o.timeout = std::chrono::seconds(5);
  o.resolution = 16;
  return o;
}

}  // namespace

TEST_CASE("oracle config validation and json") {
  OracleConfig c;
  CHECK_NOTHROW(c.validate());
  c.strength = 11;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.strength = 5;
  c.steps = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.steps = 51;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.steps = 7;
  c.noise_schedule = "sigmoid";
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.noise_schedule = "linear";
  c.mode = OracleMode::kInpaint;
  c.seed = 99;
  const nlohmann::json j = c;
  CHECK(j.at("mode") == "inpaint");
  CHECK(j.get<OracleConfig>() == c);
  CHECK_THROWS_AS(oracle_mode_from_string("outpaint"), ConfigError);
}

TEST_CASE("noise schedules") {
  for (const std::string name : {"cosine", "linear"}) {
    const auto s = NoiseSchedule::named(name);
    CHECK(s.points() == 100);
    CHECK(s.alpha_bar(0) == 1.0);
    for (int t = 1; t <= s.points(); ++t) CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
    CHECK(s.alpha_bar(100) < 0.01);
    CHECK(s.alpha_bar(100) >= 0.0);
  }
  const auto s = NoiseSchedule::named("cosine");
  CHECK(s.start_step(0) == 0);
  CHECK(s.start_step(5) == 50);
  CHECK(s.start_step(10) == 100);
  CHECK(s.sampling_steps(5, 5) == std::vector<int>{50, 40, 30, 20, 10, 0});
  CHECK(s.sampling_steps(10, 2) == std::vector<int>{100, 50, 0});
  CHECK(s.sampling_steps(0, 5) == std::vector<int>{0});
  CHECK_THROWS_AS(NoiseSchedule::named("quadratic"), ConfigError);
}

TEST_CASE("strength zero is the identity and outputs stay in range") {
  const auto oracle = Oracle::untrained(16, 3);
  const auto x = batch(2, 16, 10);
  const auto s = seeds(2);
  OracleConfig c;
  c.strength = 0;
  CHECK(torch::equal(oracle.diffuse(x, c, s), x));
  for (int strength : {1, 5, 10}) {
    c.strength = strength;
    const auto y = oracle.diffuse(x, c, s);
    CHECK(y.sizes() == x.sizes());
    CHECK(y.min().item<float>() >= 0.0f);
    CHECK(y.max().item<float>() <= 1.0f);
  }
}

TEST_CASE("diffusion is deterministic per sample seed") {
  const auto oracle = Oracle::untrained(16, 3);
  const auto x = batch(2, 16, 20);
  OracleConfig c;
  c.strength = 6;
  const auto a = oracle.diffuse(x, c, seeds(2, 5));
  const auto b = oracle.diffuse(x, c, seeds(2, 5));
  CHECK(torch::equal(a, b));
  CHECK_FALSE(torch::equal(a, oracle.diffuse(x, c, seeds(2, 6))));

  // A sample's result does not depend on its batch neighbours.
  const std::vector<std::uint64_t> one{5};
  const auto alone = oracle.diffuse(x.slice(0, 0, 1), c, one);
  CHECK((alone - a.slice(0, 0, 1)).abs().max().item<float>() <= 1e-5f);

  const auto img = synthetic_artwork(16, 4);
  c.seed = 12;
  CHECK(oracle.diffuse(img, c) == oracle.diffuse(img, c));
}

TEST_CASE("oracle input checks") {
  const auto oracle = Oracle::untrained(16, 3);
  OracleConfig c;
  CHECK_THROWS_AS(oracle.diffuse(batch(1, 32, 0), c, seeds(1)), ShapeError);
  CHECK_THROWS_AS(oracle.diffuse(batch(2, 16, 0), c, seeds(3)), ShapeError);
  CHECK_THROWS_AS(oracle.diffuse(synthetic_artwork(32, 0), c), ShapeError);
  c.mode = OracleMode::kInpaint;
  CHECK_THROWS_AS(oracle.run(batch(1, 16, 0), c, seeds(1)), ConfigError);
}

TEST_CASE("inpainting leaves unmasked pixels untouched") {
  const auto oracle = Oracle::untrained(16, 8);
  const auto x = batch(3, 16, 30);
  const MaskSpec mask{4, 3, 6, 5};
  OracleConfig c;
  c.mode = OracleMode::kInpaint;
  for (int strength : {3, 5, 10}) {
    c.strength = strength;
    const auto y = oracle.inpaint(x, mask, c, seeds(3));
    const auto m = mask_tensor(mask, 16, 16);
    CHECK((((y - x) * (1 - m)).abs().max().item<float>()) == 0.0f);
    CHECK((((y - x) * m).abs().max().item<float>()) > 0.0f);
  }
  CHECK(torch::equal(oracle.inpaint(x, MaskSpec{0, 0, 0, 0}, c, seeds(3)), x));
  c.strength = 0;
  CHECK(torch::equal(oracle.inpaint(x, mask, c, seeds(3)), x));
  c.strength = 5;
  CHECK_THROWS_AS(oracle.inpaint(synthetic_artwork(16, 1), MaskSpec{10, 10, 10, 10}, c), MaskError);
}

TEST_CASE("oracle is differentiable with respect to its input") {
  const auto oracle = Oracle::untrained(8, 1);
  auto x = batch(1, 8, 2).clone().requires_grad_(true);
  OracleConfig c;
  c.strength = 5;
  c.steps = 2;
  oracle.diffuse(x, c, seeds(1)).sum().backward();
  REQUIRE(x.grad().defined());
  CHECK(x.grad().abs().sum().item<float>() > 0.0f);
  for (const auto& p : oracle.denoiser()->parameters()) CHECK_FALSE(p.requires_grad());
  CHECK(oracle.current_weight_hash() == oracle.weight_hash());
  CHECK_NOTHROW(oracle.verify_frozen());
}

TEST_CASE("tampering with oracle weights is detected") {
  const auto oracle = Oracle::untrained(8, 1);
  {
    torch::NoGradGuard g;
    oracle.denoiser()->parameters().front().add_(1.0);
  }
  CHECK_THROWS_AS(oracle.verify_frozen(), IntegrityError);
}

TEST_CASE("oracle pretraining guards and determinism") {
  const auto small = synthetic_corpus(20, 16, 3);
  CHECK_THROWS_AS(pretrain_oracle(small, 1, 0), ConfigError);
  PretrainOptions opts;
  opts.min_corpus = 10;
  opts.batch_size = 8;
  CHECK_THROWS_AS(pretrain_oracle(small, 0, 0, opts), ConfigError);
  std::vector<double> losses;
  opts.on_epoch = [&](int, double loss) { losses.push_back(loss); };
  const auto a = pretrain_oracle(small, 2, 7, opts);
  const auto b = pretrain_oracle(small, 2, 7, opts);
  CHECK(losses.size() == 4);
  CHECK(a.weight_hash() == b.weight_hash());
  CHECK(a.weight_hash() != pretrain_oracle(small, 2, 8, opts).weight_hash());
  CHECK(a.provenance().corpus_fingerprint == corpus_fingerprint(small));
  CHECK(a.provenance().loss_history.size() == 2);
  CHECK(a.resolution() == 16);

  testing::TempDir dir("oracle");
  a.save(dir / "o.mamc");
  const auto loaded = Oracle::load(dir / "o.mamc");
  CHECK(loaded.weight_hash() == a.weight_hash());
  CHECK(loaded.provenance().epochs == 2);
  const auto x = batch(1, 16, 1);
  OracleConfig c;
  CHECK(torch::equal(loaded.diffuse(x, c, seeds(1)), a.diffuse(x, c, seeds(1))));
}

TEST_CASE("derived seeds differ across steps and indices") {
  CHECK(derive_seed(1, 0, 0) == derive_seed(1, 0, 0));
  CHECK(derive_seed(1, 0, 0) != derive_seed(1, 0, 1));
  CHECK(derive_seed(1, 0, 0) != derive_seed(1, 1, 0));
  CHECK(derive_seed(1, 0, 0) != derive_seed(2, 0, 0));
}

TEST_CASE("remote client sends the configuration and decodes the reply") {
  FakeRemote fake;
  nlohmann::json seen;
  std::string auth;
  const auto reply = encode_png(synthetic_artwork(16, 77));
  fake.server().Post("/img2img", [&](const httplib::Request& req, httplib::Response& res) {
    seen = nlohmann::json::parse(req.body);
    auth = req.get_header_value("Authorization");
    res.set_content(std::string(reply.begin(), reply.end()), "image/png");
  });
  fake.start();
  auto opts = fast_options(fake.url());
  opts.api_key = "k123";
  OracleConfig c;
  c.strength = 7;
  c.seed = 31;
  const auto out = remote_diffuse(synthetic_artwork(16, 1), opts, c);
  CHECK(out == decode_image(reply, 16));
  CHECK(seen.at("strength") == 7);
  CHECK(seen.at("seed") == 31);
  CHECK(seen.at("steps") == 5);
  CHECK(seen.at("mode") == "reconstruct");
  CHECK(seen.at("image").get<std::string>().size() > 0);
  CHECK(auth == "Bearer k123");
}

TEST_CASE("remote client retries transient failures then gives up") {
  FakeRemote fake;
  std::atomic<int> calls{0};
  const auto reply = encode_png(synthetic_artwork(16, 2));
  fake.server().Post("/img2img", [&](const httplib::Request&, httplib::Response& res) {
    ++calls;
    res.status = 503;
  });
  fake.server().Post("/flaky", [&](const httplib::Request&, httplib::Response& res) {
    if (++calls < 3) {
      res.status = 500;
      return;
    }
    res.set_content(std::string(reply.begin(), reply.end()), "image/png");
  });
  fake.start();
  auto opts = fast_options(fake.url());
  std::vector<int> attempts;
  opts.on_retry = [&](int attempt, std::chrono::milliseconds) { attempts.push_back(attempt); };
  try {
    remote_diffuse(synthetic_artwork(16, 1), opts, OracleConfig{});
    FAIL("expected a transport error");
  } catch (const TransportError& e) {
    CHECK(std::string(e.what()).find("after 3 retries") != std::string::npos);
  }
  CHECK(calls == 4);
  CHECK(attempts == std::vector<int>{1, 2, 3});

  // Recovers when a later attempt succeeds.
  calls = 0;
  CHECK_NOTHROW(remote_diffuse(synthetic_artwork(16, 1), fast_options(fake.url("/flaky")), OracleConfig{}));
  CHECK(calls == 3);
}

TEST_CASE("remote client reports unreachable hosts and non-image replies") {
  int free_port = 0;
  {
    httplib::Server probe;
    free_port = probe.bind_to_any_port("127.0.0.1");
  }
  auto opts = fast_options("http://127.0.0.1:" + std::to_string(free_port) + "/x");
  opts.max_retries = 1;
  CHECK_THROWS_AS(remote_diffuse(synthetic_artwork(16, 1), opts, OracleConfig{}), TransportError);

  FakeRemote fake;
  fake.server().Post("/img2img", [](const httplib::Request&, httplib::Response& res) {
    res.set_content("{\"error\":\"nope\"}", "application/json");
  });
  fake.server().Post("/denied", [](const httplib::Request&, httplib::Response& res) { res.status = 403; });
  fake.start();
  CHECK_THROWS_AS(remote_diffuse(synthetic_artwork(16, 1), fast_options(fake.url()), OracleConfig{}), ProtocolError);
  CHECK_THROWS_AS(remote_diffuse(synthetic_artwork(16, 1), fast_options(fake.url("/denied")), OracleConfig{}),
                  ProtocolError);
  CHECK_THROWS_AS(remote_diffuse(synthetic_artwork(16, 1), fast_options("ftp://host/x"), OracleConfig{}), ConfigError);
}

TEST_CASE("remote client caps requests in flight") {
  FakeRemote fake;
  std::atomic<int> active{0}, peak{0};
  const auto reply = encode_png(synthetic_artwork(16, 3));
  fake.server().Post("/img2img", [&](const httplib::Request&, httplib::Response& res) {
    const int now = ++active;
    int prev = peak.load();
    while (now > prev && !peak.compare_exchange_weak(prev, now)) {
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(30));
    --active;
    res.set_content(std::string(reply.begin(), reply.end()), "image/png");
  });
  fake.start();
  const RemoteOracleClient client(fast_options(fake.url()), 2);
  std::vector<std::thread> workers;
  for (int i = 0; i < 6; ++i) {
    workers.emplace_back([&] { client.diffuse(synthetic_artwork(16, 1), OracleConfig{}); });
  }
  for (auto& t : workers) t.join();
  CHECK(peak.load() <= 2);
  CHECK(peak.load() >= 1);
}
