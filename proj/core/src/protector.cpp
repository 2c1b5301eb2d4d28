#include "mamc/protector.hpp"

#include "mamc/archive.hpp"
#include "mamc/errors.hpp"

namespace mamc {

Protector::Protector(UNetSpec spec, int resolution, std::uint64_t seed) : spec_(std::move(spec)), resolution_(resolution) {
  spec_.validate();
  spec_.check_input(resolution, resolution);
  net_ = UNet(spec_);
  seeded_init(*net_, seed);
  if (spec_.output == "logit_residual") {
    // Start close to the identity map.
    torch::NoGradGuard guard;
    net_->named_parameters()["head.weight"].mul_(kResidualHeadScale);
  }
}

torch::Tensor Protector::forward(const torch::Tensor& images) const {
  if (images.dim() != 4 || images.size(1) != 3) throw ShapeError("protector input must be [N,3,H,W]");
  if (images.size(2) != resolution_ || images.size(3) != resolution_) {
    throw ShapeError("protector resolution is " + std::to_string(resolution_) + ", got " +
                     std::to_string(images.size(2)) + "x" + std::to_string(images.size(3)));
  }
  return net_.ptr()->forward(images);
}

Image Protector::protect(const Image& img) const {
  torch::NoGradGuard guard;
  return from_tensor(forward(to_tensor(img).unsqueeze(0))[0]);
}

std::string Protector::weight_hash() const {
  Archive a;
  a.arrays = export_parameters(*net_);
  return a.weight_hash();
}

Protector build_unet(const UNetSpec& spec, int resolution, std::uint64_t seed) { return Protector(spec, resolution, seed); }

Image protect(const Image& img, const Protector& model) { return model.protect(img); }

void save_checkpoint(const Protector& model, const CheckpointMetadata& metadata, const std::filesystem::path& path) {
  Archive a;
  a.kind = "protector";
  a.metadata = {{"unet_spec", model.spec()},
                {"resolution", model.resolution()},
                {"train_config", metadata.train_config},
                {"level", metadata.level},
                {"oracle_hash", metadata.oracle_hash},
                {"epoch", metadata.epoch},
                {"loss_history", metadata.loss_history}};
  a.arrays = export_parameters(*model.net());
  write_archive(a, path);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, const std::optional<std::string>& expected_oracle_hash) {
  auto a = read_archive(path);
  const auto origin = path.string();
  if (a.kind != "protector") throw IntegrityError(origin + ": field 'kind' is '" + a.kind + "', expected 'protector'");
  LoadedCheckpoint out;
  auto field = [&](const char* name) -> const nlohmann::json& {
    if (!a.metadata.contains(name)) throw IntegrityError(origin + ": field '" + name + "' missing");
    return a.metadata.at(name);
  };
  try {
    const auto spec = field("unet_spec").get<UNetSpec>();
    const int resolution = field("resolution").get<int>();
    out.metadata.train_config = field("train_config");
    out.metadata.level = field("level").get<int>();
    out.metadata.oracle_hash = field("oracle_hash").get<std::string>();
    out.metadata.epoch = field("epoch").get<int>();
    out.metadata.loss_history = field("loss_history").get<std::map<std::string, std::vector<double>>>();
    Protector model(spec, resolution, 0);
    import_parameters(*model.net(), a.arrays, origin);
    out.model = std::move(model);
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(origin + ": malformed checkpoint metadata: " + e.what());
  }
  out.model.net()->eval();
  out.weight_hash = a.weight_hash();
  if (out.metadata.oracle_hash.empty()) throw IntegrityError(origin + ": field 'oracle_hash' is empty");
  if (expected_oracle_hash && *expected_oracle_hash != out.metadata.oracle_hash) {
    out.warnings.push_back("checkpoint was trained against oracle " + out.metadata.oracle_hash.substr(0, 12) +
                           ", expected " + expected_oracle_hash->substr(0, 12));
  }
  return out;
}

}  // namespace mamc
