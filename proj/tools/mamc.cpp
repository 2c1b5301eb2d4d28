#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mamc/errors.hpp"
#include "mamc/evalsuite.hpp"
#include "mamc/image.hpp"
#include "mamc/objective.hpp"
#include "mamc/oracle.hpp"
#include "mamc/perceptual.hpp"
#include "mamc/protector.hpp"
#include "mamc/service.hpp"
#include "mamc/training.hpp"

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

void log_event(const std::string& event, json fields = json::object()) {
  fields["event"] = event;
  std::cerr << fields.dump() << std::endl;
}

struct DataArgs {
  std::string dir;
  std::string manifest;
  int synthetic = mamc::kToyCorpusCount;
  int size = mamc::kToyResolution;
  std::uint64_t corpus_seed = mamc::kToyCorpusSeed;
  std::uint64_t split_seed = 0;

  void add(CLI::App* app) {
    app->add_option("--data", dir, "Image directory (default: the synthetic toy corpus)");
    app->add_option("--manifest", manifest, "File listing image ids, one per line");
    app->add_option("--synthetic", synthetic, "Toy corpus size when --data is absent")->check(CLI::PositiveNumber);
    app->add_option("--size", size, "Working resolution")->check(CLI::Range(8, 1024));
    app->add_option("--corpus-seed", corpus_seed, "Toy corpus seed");
    app->add_option("--split-seed", split_seed, "Train/test split seed");
  }

  mamc::Corpus load() const {
    auto corpus = dir.empty() ? mamc::synthetic_corpus(synthetic, size, corpus_seed)
                              : mamc::ingest_directory(dir, size, manifest);
    log_event("corpus", {{"images", corpus.size()}, {"source", dir.empty() ? "synthetic" : dir}, {"size", size}});
    return corpus;
  }
};

void write_json_file(const json& j, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw mamc::IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw mamc::IngestionError("cannot read " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::vector<std::uint8_t>& bytes, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw mamc::IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

// Training flags layered over an optional config file.
struct TrainArgs {
  std::string config;
  std::optional<int> level, epochs, batch, strength, steps;
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> variant, mode;

  void add(CLI::App* app) {
    app->add_option("--config", config, "Config file with 'train' and 'oracle' sections");
    app->add_option("--level", level, "Balance level (10, 30, 50, 70, 90)");
    app->add_option("--epochs", epochs);
    app->add_option("--batch", batch);
    app->add_option("--lr", lr);
    app->add_option("--seed", seed);
    app->add_option("--variant", variant)->check(CLI::IsMember({"full", "no_noise", "no_noise_no_r2", "no_style"}));
    app->add_option("--strength", strength)->check(CLI::Range(0, 10));
    app->add_option("--steps", steps)->check(CLI::Range(1, 50));
    app->add_option("--mode", mode)->check(CLI::IsMember({"reconstruct", "inpaint"}));
  }

  mamc::TrainConfig build() const {
    mamc::TrainConfig c = config.empty() ? mamc::TrainConfig{} : mamc::load_train_config(config);
    if (level) c.level = *level;
    if (epochs) c.epochs = *epochs;
    if (batch) c.batch_size = *batch;
    if (lr) c.learning_rate = *lr;
    if (seed) c.seed = *seed;
    if (variant) c.variant = mamc::loss_variant_from_string(*variant);
    if (strength) c.oracle.strength = *strength;
    if (steps) c.oracle.steps = *steps;
    if (mode) c.oracle.mode = mamc::oracle_mode_from_string(*mode);
    c.validate();
    return c;
  }
};

mamc::TrainOptions progress_options() {
  mamc::TrainOptions o;
  o.on_epoch = [](int epoch, const mamc::LossBreakdown& m) {
    log_event("epoch", {{"epoch", epoch + 1},
                        {"reconstruction", m.reconstruction},
                        {"content", m.content},
                        {"style", m.style},
                        {"noise", m.noise},
                        {"total", m.total}});
  };
  return o;
}

int run(int argc, char** argv) {
  CLI::App app{"mamc: learned adversarial protection against image-guided diffusion"};
  app.require_subcommand(1);

  // assets
  auto* assets = app.add_subcommand("assets", "Regenerate the fixed feature-extractor asset");
  std::string assets_out = mamc::asset_dir().string();
  assets->add_option("--out", assets_out, "Asset directory");

  // corpus
  auto* corpus_cmd = app.add_subcommand("corpus", "Write the synthetic toy corpus as PNG files");
  DataArgs corpus_args;
  std::string corpus_out;
  corpus_cmd->add_option("--out", corpus_out)->required();
  corpus_cmd->add_option("--count", corpus_args.synthetic)->check(CLI::PositiveNumber);
  corpus_cmd->add_option("--size", corpus_args.size)->check(CLI::Range(8, 1024));
  corpus_cmd->add_option("--seed", corpus_args.corpus_seed);

  // pretrain
  auto* pretrain = app.add_subcommand("pretrain", "Train and freeze the toy diffusion oracle");
  DataArgs pretrain_data;
  pretrain_data.add(pretrain);
  int pretrain_epochs = mamc::kOracleEpochs;
  std::uint64_t pretrain_seed = 0;
  std::string pretrain_out, pretrain_schedule = "cosine";
  pretrain->add_option("--epochs", pretrain_epochs);
  pretrain->add_option("--seed", pretrain_seed);
  pretrain->add_option("--schedule", pretrain_schedule)->check(CLI::IsMember({"cosine", "linear"}));
  pretrain->add_option("--out", pretrain_out)->required();

  // train
  auto* train_cmd = app.add_subcommand("train", "Train one protector");
  DataArgs train_data;
  TrainArgs train_args;
  std::string train_oracle, train_out, train_curves;
  train_data.add(train_cmd);
  train_args.add(train_cmd);
  train_cmd->add_option("--oracle", train_oracle)->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--out", train_out, "Checkpoint path")->required();
  train_cmd->add_option("--curves", train_curves, "Loss-curve output prefix (.json/.png)");

  // evaluate
  auto* eval_cmd = app.add_subcommand("evaluate", "P1/P2 metrics of a checkpoint on the held-out split");
  DataArgs eval_data;
  std::string eval_ckpt, eval_oracle, eval_out, eval_gallery;
  bool eval_force = false;
  std::optional<int> eval_strength;
  eval_data.add(eval_cmd);
  eval_cmd->add_option("--checkpoint", eval_ckpt)->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--oracle", eval_oracle)->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--out", eval_out, "Report path (JSON)");
  eval_cmd->add_option("--gallery", eval_gallery, "Write an (I, I', M(I), M(I')) grid here");
  eval_cmd->add_option("--strength", eval_strength)->check(CLI::Range(0, 10));
  eval_cmd->add_flag("--force", eval_force, "Evaluate even if the oracle hash differs");

  // sweep
  auto* sweep = app.add_subcommand("sweep", "Parameter sweeps and ablations");
  DataArgs sweep_data;
  TrainArgs sweep_train;
  std::string sweep_axis, sweep_ckpt, sweep_inpaint_ckpt, sweep_oracle, sweep_out = "sweep", sweep_ckpt_dir;
  std::vector<double> sweep_grid;
  std::vector<int> sweep_blur, sweep_jpeg;
  bool sweep_force = false;
  sweep_data.add(sweep);
  sweep_train.add(sweep);
  sweep->add_option("--axis", sweep_axis)
      ->required()
      ->check(CLI::IsMember({"strength", "robustness", "ablation", "alpha_r2", "inpaint"}));
  sweep->add_option("--checkpoint", sweep_ckpt, "Model for strength/robustness, reconstruction model for inpaint");
  sweep->add_option("--inpaint-checkpoint", sweep_inpaint_ckpt, "Inpaint-trained model for the inpaint axis");
  sweep->add_option("--oracle", sweep_oracle)->required()->check(CLI::ExistingFile);
  sweep->add_option("--grid", sweep_grid, "Strengths or alpha_r2 values");
  sweep->add_option("--blur", sweep_blur, "Blur kernels");
  sweep->add_option("--jpeg", sweep_jpeg, "JPEG qualities");
  sweep->add_option("--out", sweep_out, "Report prefix (.json/.png)");
  sweep->add_option("--checkpoint-dir", sweep_ckpt_dir, "Where trained variants are written");
  sweep->add_flag("--force", sweep_force);

  // protect
  auto* protect_cmd = app.add_subcommand("protect", "Protect one image");
  std::string protect_in, protect_out, protect_bank, protect_ckpt;
  int protect_level = 50;
  protect_cmd->add_option("--in", protect_in)->required()->check(CLI::ExistingFile);
  protect_cmd->add_option("--out", protect_out)->required();
  protect_cmd->add_option("--level", protect_level);
  protect_cmd->add_option("--bank", protect_bank, "Bank manifest (bank.json)");
  protect_cmd->add_option("--checkpoint", protect_ckpt, "Use this checkpoint instead of the bank");

  // bank
  auto* bank_cmd = app.add_subcommand("bank", "Train one protector per balance level");
  DataArgs bank_data;
  TrainArgs bank_train;
  std::string bank_oracle, bank_out = "bank";
  std::vector<int> bank_levels(mamc::kBalanceLevels.begin(), mamc::kBalanceLevels.end());
  bank_data.add(bank_cmd);
  bank_train.add(bank_cmd);
  bank_cmd->add_option("--oracle", bank_oracle)->required()->check(CLI::ExistingFile);
  bank_cmd->add_option("--out", bank_out, "Output directory");
  bank_cmd->add_option("--levels", bank_levels);

  // serve
  auto* serve = app.add_subcommand("serve", "HTTP service for the studio UI");
  std::string serve_bank, serve_oracle, serve_host = "127.0.0.1";
  int serve_port = 8080, serve_concurrency = 2, serve_timeout = 60;
  serve->add_option("--bank", serve_bank, "Bank manifest (bank.json)");
  serve->add_option("--oracle", serve_oracle)->required()->check(CLI::ExistingFile);
  serve->add_option("--host", serve_host);
  serve->add_option("--port", serve_port);
  serve->add_option("--oracle-concurrency", serve_concurrency)->check(CLI::PositiveNumber);
  serve->add_option("--timeout", serve_timeout, "Request timeout in seconds")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  if (*assets) {
    const fs::path dir = assets_out;
    fs::create_directories(dir);
    const auto ex = mamc::make_extractor(mamc::kExtractorSeed);
    mamc::save_extractor(ex, dir / "extractor.mamc");
    std::cout << json{{"extractor", (dir / "extractor.mamc").string()}}.dump() << '\n';
    return 0;
  }

  if (*corpus_cmd) {
    const auto corpus = mamc::synthetic_corpus(corpus_args.synthetic, corpus_args.size, corpus_args.corpus_seed);
    for (const auto& [id, img] : corpus) mamc::save_image(img, fs::path(corpus_out) / id);
    std::cout << json{{"written", corpus.size()}, {"dir", corpus_out}}.dump() << '\n';
    return 0;
  }

  if (*pretrain) {
    const auto corpus = pretrain_data.load();
    mamc::PretrainOptions opts;
    opts.schedule = pretrain_schedule;
    opts.on_epoch = [](int epoch, double loss) { log_event("oracle_epoch", {{"epoch", epoch + 1}, {"loss", loss}}); };
    const auto oracle = mamc::pretrain_oracle(corpus, pretrain_epochs, pretrain_seed, opts);
    oracle.save(pretrain_out);
    std::cout << json{{"oracle", pretrain_out}, {"weight_hash", oracle.weight_hash()}}.dump() << '\n';
    return 0;
  }

  if (*train_cmd) {
    const auto config = train_args.build();
    const auto corpus = train_data.load();
    const auto split = mamc::split_dataset(mamc::corpus_ids(corpus), train_data.split_seed);
    const auto oracle = mamc::Oracle::load(train_oracle);
    auto opts = progress_options();
    opts.checkpoint = train_out;
    const auto result = mamc::train(corpus, split, config, oracle, opts);
    if (!train_curves.empty()) mamc::emit_loss_curves(result.report, train_curves);
    std::cout << mamc::to_json(result.report).dump() << '\n';
    return 0;
  }

  if (*eval_cmd) {
    const auto corpus = eval_data.load();
    const auto split = mamc::split_dataset(mamc::corpus_ids(corpus), eval_data.split_seed);
    const auto oracle = mamc::Oracle::load(eval_oracle);
    const auto ckpt = mamc::load_checkpoint(eval_ckpt, oracle.weight_hash());
    for (const auto& w : ckpt.warnings) log_event("warning", {{"message", w}});
    mamc::EvalOptions opts;
    opts.force = eval_force;
    if (eval_strength) {
      auto c = mamc::checkpoint_oracle_config(ckpt.metadata);
      c.strength = *eval_strength;
      opts.oracle_config = c;
    }
    const auto samples = mamc::run_protocols(corpus, split.test, ckpt.model, ckpt.metadata, oracle, opts);
    const auto pair = mamc::score(samples);
    if (!eval_gallery.empty()) mamc::export_gallery(samples, eval_gallery);
    const json report{{"checkpoint", eval_ckpt}, {"level", ckpt.metadata.level}, {"result", pair}};
    if (!eval_out.empty()) write_json_file(report, eval_out);
    std::cout << report.dump() << '\n';
    return 0;
  }

  if (*sweep) {
    const auto corpus = sweep_data.load();
    const auto split = mamc::split_dataset(mamc::corpus_ids(corpus), sweep_data.split_seed);
    const auto oracle = mamc::Oracle::load(sweep_oracle);
    mamc::EvalOptions opts;
    opts.force = sweep_force;
    auto need_checkpoint = [&](const std::string& path) {
      if (path.empty()) throw CLI::RequiredError("--checkpoint");
      return mamc::load_checkpoint(path, oracle.weight_hash());
    };
    mamc::SweepReport report;
    if (sweep_axis == "strength" || sweep_axis == "robustness") {
      const auto ckpt = need_checkpoint(sweep_ckpt);
      const mamc::EvalTarget target{&ckpt.model, &ckpt.metadata};
      if (sweep_axis == "strength") {
        std::vector<int> grid(mamc::kStrengthGrid.begin(), mamc::kStrengthGrid.end());
        if (!sweep_grid.empty()) grid.assign(sweep_grid.begin(), sweep_grid.end());
        report = mamc::strength_sweep(corpus, split.test, target, oracle, grid, opts);
      } else {
        std::vector<int> blur(mamc::kBlurKernels.begin(), mamc::kBlurKernels.end());
        std::vector<int> jpeg(mamc::kJpegQualities.begin(), mamc::kJpegQualities.end());
        if (!sweep_blur.empty()) blur = sweep_blur;
        if (!sweep_jpeg.empty()) jpeg = sweep_jpeg;
        report = mamc::robustness_sweep(corpus, split.test, target, oracle, blur, jpeg, opts);
      }
    } else if (sweep_axis == "inpaint") {
      std::optional<mamc::LoadedCheckpoint> rec, inp;
      if (!sweep_ckpt.empty()) rec = mamc::load_checkpoint(sweep_ckpt, oracle.weight_hash());
      if (!sweep_inpaint_ckpt.empty()) inp = mamc::load_checkpoint(sweep_inpaint_ckpt, oracle.weight_hash());
      std::optional<mamc::EvalTarget> rt, it;
      if (rec) rt = mamc::EvalTarget{&rec->model, &rec->metadata};
      if (inp) it = mamc::EvalTarget{&inp->model, &inp->metadata};
      report = mamc::inpaint_scenarios(corpus, split.test, rt, it, oracle, fs::path(sweep_out).parent_path() / "gallery",
                                       4, opts);
    } else {
      const auto base = sweep_train.build();
      auto trainer = mamc::memoize(mamc::make_trainer(corpus, split, oracle, sweep_ckpt_dir));
      if (sweep_axis == "ablation") {
        report = mamc::ablation_suite(corpus, split.test, base, trainer, oracle, opts);
      } else {
        std::vector<double> grid(mamc::kAlphaR2Grid.begin(), mamc::kAlphaR2Grid.end());
        if (!sweep_grid.empty()) grid = sweep_grid;
        report = mamc::weight_sweep(corpus, split.test, base, trainer, oracle, grid, opts);
      }
    }
    report.emit(sweep_out);
    std::cout << report.to_json().dump() << '\n';
    return 0;
  }

  if (*protect_cmd) {
    fs::path ckpt_path = protect_ckpt;
    if (ckpt_path.empty()) {
      if (protect_bank.empty()) throw CLI::RequiredError("--bank or --checkpoint");
      const auto bank = mamc::BankManifest::load(protect_bank);
      for (const auto& e : bank.entries) {
        if (e.level == protect_level && e.available) ckpt_path = e.checkpoint;
      }
      if (ckpt_path.empty()) throw mamc::ConfigError("level " + std::to_string(protect_level) + " is not in the bank");
    }
    const auto ckpt = mamc::load_checkpoint(ckpt_path);
    const auto bytes = mamc::protect_png(read_bytes(protect_in), ckpt.model);
    write_bytes(bytes, protect_out);
    std::cout << json{{"out", protect_out}, {"level", ckpt.metadata.level}, {"bytes", bytes.size()}}.dump() << '\n';
    return 0;
  }

  if (*bank_cmd) {
    const auto base = bank_train.build();
    const auto corpus = bank_data.load();
    const auto split = mamc::split_dataset(mamc::corpus_ids(corpus), bank_data.split_seed);
    const auto oracle = mamc::Oracle::load(bank_oracle);
    const fs::path dir = fs::absolute(bank_out);
    auto inner = mamc::make_trainer(corpus, split, oracle, dir);
    mamc::Trainer trainer = [&](const mamc::TrainConfig& c) {
      log_event("level_start", {{"level", c.level}});
      return inner(c);
    };
    const auto manifest = mamc::train_balance_bank(base, trainer, oracle,
                                                   mamc::make_snapshot_fn(corpus, split.test, oracle), bank_levels);
    manifest.save(dir / "bank.json");
    std::cout << manifest.to_json().dump() << '\n';
    return 0;
  }

  if (*serve) {
    mamc::ServiceOptions opts;
    if (!serve_bank.empty()) opts.bank = serve_bank;
    if (const char* token = std::getenv("MAMC_TOKEN")) opts.token = token;
    opts.oracle_concurrency = serve_concurrency;
    opts.timeout = std::chrono::seconds(serve_timeout);
    if (std::getenv("MAMC_ORACLE_URL")) opts.remote = mamc::RemoteOptions::from_environment();
    auto service = std::make_shared<const mamc::ProtectionService>(mamc::Oracle::load(serve_oracle), opts);
    mamc::HttpServer server(service);
    log_event("listening", {{"host", serve_host}, {"port", serve_port}, {"bank", service->has_bank()}});
    server.run(serve_host, serve_port);
    return 0;
  }
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const CLI::Error& e) {
    log_event("usage_error", {{"message", e.what()}});
    return 2;
  } catch (const std::exception& e) {
    log_event("error", {{"message", e.what()}});
    return 1;
  }
}
