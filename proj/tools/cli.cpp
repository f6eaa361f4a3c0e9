#include "cli.hpp"

#include <fstream>
#include <iostream>
#include <memory>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>
#include <torch/torch.h>

#include "csdiff/captioner.hpp"
#include "csdiff/checkpoint.hpp"
#include "csdiff/config.hpp"
#include "csdiff/dataset.hpp"
#include "csdiff/evaluate.hpp"
#include "csdiff/image_io.hpp"
#include "csdiff/stylize.hpp"
#include "csdiff/toy_data.hpp"
#include "csdiff/training.hpp"

namespace csdiff::cli {
namespace {

const char* kDescription = "Content/style disentangled latent diffusion toolkit";

struct CommonOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
};

struct BuildDatasetOptions {
  CommonOptions common;
  std::string metadata, image_root, out;
  std::string captioner = "echo";
  std::string echo_reply;
  int workers = 1;
};

struct ToyDatasetOptions {
  CommonOptions common;
  std::string out;
  std::int64_t samples_per_cell = 64;
};

struct TrainOptions {
  CommonOptions common;
  std::string manifest, out, checkpoint, preset = "default";
  std::optional<std::int64_t> steps, batch_size;
  std::optional<double> lr;
};

struct StylizeOptions {
  CommonOptions common;
  std::string checkpoint, out, style_image, style_text, content_image, content_text;
  std::int64_t steps = 50;
  double guidance_scale = 7.5;
  std::int64_t samples = 1;
};

struct EvaluateOptions {
  CommonOptions common;
  std::string images, prompts, out, checkpoint_id;
  bool csv = false;
  int embed_dim = 64;
};

struct InspectOptions {
  CommonOptions common;
  std::string checkpoint;
};

struct Context {
  std::unique_ptr<CLI::App> app;
  BuildDatasetOptions build;
  ToyDatasetOptions toy;
  TrainOptions disentangle, generate;
  StylizeOptions stylize;
  EvaluateOptions evaluate;
  InspectOptions inspect;
};

void add_common(CLI::App* sub, CommonOptions& opts) {
  sub->add_option("--config", opts.config_path, "Key/value config file (defaults < file < CSDIFF_* env < flags)")
      ->check(CLI::ExistingFile);
  sub->add_option("--seed", opts.seed, "Root random seed");
  sub->add_option("--set", opts.overrides, "Override one config key, as key=value (repeatable)");
}

std::unique_ptr<Context> make_context() {
  auto ctx = std::make_unique<Context>();
  ctx->app = std::make_unique<CLI::App>(kDescription, "csdiff");
  auto& app = *ctx->app;
  app.require_subcommand(1, 1);
  app.fallthrough(false);

  {
    auto* sub = app.add_subcommand("build-dataset", "Filter artwork metadata, caption images and write a manifest");
    auto& o = ctx->build;
    sub->add_option("--metadata", o.metadata, "JSON Lines metadata file")->required()->check(CLI::ExistingFile);
    sub->add_option("--image-root", o.image_root, "Directory that image paths resolve against")
        ->required()
        ->check(CLI::ExistingDirectory);
    sub->add_option("--out", o.out, "Output directory for manifest.jsonl, manifest.stats.json, skipped.jsonl")
        ->required();
    sub->add_option("--captioner", o.captioner, "Captioner backend")->check(CLI::IsMember({"echo", "http"}));
    sub->add_option("--echo-reply", o.echo_reply, "Fixed caption for the echo backend");
    sub->add_option("--workers", o.workers, "Concurrent captioning requests")->check(CLI::PositiveNumber);
    add_common(sub, o.common);
  }
  {
    auto* sub = app.add_subcommand("make-toy-dataset", "Write the synthetic stripes/halves dataset as PNGs + manifest");
    auto& o = ctx->toy;
    sub->add_option("--out", o.out, "Output directory")->required();
    sub->add_option("--samples-per-cell", o.samples_per_cell, "Samples per (content, style) cell")
        ->check(CLI::PositiveNumber);
    add_common(sub, o.common);
  }
  auto add_train = [&](const char* name, const char* description, TrainOptions& o, bool needs_checkpoint) {
    auto* sub = app.add_subcommand(name, description);
    sub->add_option("--manifest", o.manifest, "Manifest directory or manifest.jsonl")->required();
    sub->add_option("--out", o.out, "Run directory (logs, checkpoints/, latest)")->required();
    auto* ckpt = sub->add_option("--checkpoint", o.checkpoint,
                                 needs_checkpoint ? "Stage-1 checkpoint file or run directory"
                                                  : "Optional checkpoint to initialize from");
    if (needs_checkpoint) ckpt->required();
    if (!needs_checkpoint) {
      sub->add_option("--model-preset", o.preset, "Model geometry before config overrides")
          ->check(CLI::IsMember({"default", "toy"}));
    }
    sub->add_option("--steps", o.steps, "Optimizer steps (train.max_steps)")->check(CLI::NonNegativeNumber);
    sub->add_option("--batch-size", o.batch_size, "Batch size (train.batch_size)")->check(CLI::PositiveNumber);
    sub->add_option("--lr", o.lr, "Learning rate (train.learning_rate)")->check(CLI::PositiveNumber);
    add_common(sub, o.common);
  };
  add_train("train-disentangle", "Stage 1: train encoders and CSDN on the disentangle loss", ctx->disentangle, false);
  add_train("train-generate", "Stage 2: train MCL and the denoiser with CSDN frozen", ctx->generate, true);
  {
    auto* sub = app.add_subcommand("stylize", "Sample an image from style and content conditions");
    auto& o = ctx->stylize;
    sub->add_option("--checkpoint", o.checkpoint, "Checkpoint file or run directory")->required();
    auto* si = sub->add_option("--style-image", o.style_image, "Style reference image (PNG)")->check(CLI::ExistingFile);
    auto* st = sub->add_option("--style-text", o.style_text, "Style description");
    si->excludes(st);
    sub->add_option("--content-image", o.content_image, "Content reference image (PNG)")->check(CLI::ExistingFile);
    sub->add_option("--content-text", o.content_text, "Content prompt");
    sub->add_option("--steps", o.steps, "DDIM steps")->check(CLI::PositiveNumber);
    sub->add_option("--guidance-scale", o.guidance_scale, "Classifier-free guidance scale");
    sub->add_option("--samples", o.samples, "Images to draw")->check(CLI::PositiveNumber);
    sub->add_option("--out", o.out, "Output path stem: writes <out>.png and <out>.json")->required();
    add_common(sub, o.common);
  }
  {
    auto* sub = app.add_subcommand("evaluate", "Score generated images (SS, TA, IQ) against their prompts");
    auto& o = ctx->evaluate;
    sub->add_option("--images", o.images, "Directory of PNG images")->required()->check(CLI::ExistingDirectory);
    sub->add_option("--prompts", o.prompts, "Prompt manifest (JSON Lines keyed by image stem)")
        ->required()
        ->check(CLI::ExistingFile);
    sub->add_option("--out", o.out, "Report directory")->required();
    sub->add_flag("--csv", o.csv, "Also write eval_report.csv");
    sub->add_option("--checkpoint-id", o.checkpoint_id, "Identifier recorded in the report metadata");
    sub->add_option("--embed-dim", o.embed_dim, "Dimension of the hashing embedder")->check(CLI::PositiveNumber);
    add_common(sub, o.common);
  }
  {
    auto* sub = app.add_subcommand("inspect-checkpoint", "Print a checkpoint's metadata and parameter groups as JSON");
    auto& o = ctx->inspect;
    sub->add_option("--checkpoint", o.checkpoint, "Checkpoint file or run directory")->required();
    add_common(sub, o.common);
  }
  return ctx;
}

std::map<std::string, std::string> config_defaults(const ModelConfig& model) {
  std::map<std::string, std::string> out = model.to_config_map();
  for (const auto& part : {TrainConfig::defaults(), CaptionerSettings::defaults(), FilterRules::defaults()}) {
    out.insert(part.begin(), part.end());
  }
  return out;
}

Config load_config(const CommonOptions& common, const ModelConfig& model_defaults = {}) {
  Config config(config_defaults(model_defaults));
  if (!common.config_path.empty()) config.merge_file(common.config_path, true);
  config.merge_env();
  for (const auto& item : common.overrides) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw InvalidArgument("--set expects key=value, got '" + item + "'");
    const auto key = trim(item.substr(0, eq));
    if (!config.contains(key)) throw InvalidArgument("unknown config key '" + key + "'");
    config.set(key, trim(item.substr(eq + 1)));
  }
  if (common.seed) config.set("train.seed", std::to_string(*common.seed));
  return config;
}

std::filesystem::path resolve_checkpoint(const std::string& path) {
  if (std::filesystem::is_directory(path)) return latest_checkpoint(path);
  return path;
}

int run_build_dataset(const BuildDatasetOptions& o, std::ostream& out) {
  const auto config = load_config(o.common);
  std::unique_ptr<CaptionerClient> captioner;
  const auto settings = CaptionerSettings::from_config(config);
  if (o.captioner == "http") {
    captioner = std::make_unique<HttpCaptioner>(settings);
  } else if (o.echo_reply.empty()) {
    captioner = std::make_unique<EchoCaptioner>();
  } else {
    captioner = std::make_unique<EchoCaptioner>(o.echo_reply);
  }
  BuildOptions options;
  options.rules = FilterRules::from_config(config);
  options.retries = settings.retries;
  options.workers = o.workers;
  options.output_dir = o.out;
  const auto result = build_manifest(o.metadata, o.image_root, *captioner, options);
  const auto& stats = result.manifest.stats;
  out << nlohmann::json{{"manifest", (std::filesystem::path(o.out) / "manifest.jsonl").string()},
                        {"total", stats.total},
                        {"kept", stats.kept},
                        {"excluded", stats.excluded},
                        {"skipped", stats.skipped}}
             .dump()
      << '\n';
  return kExitOk;
}

int run_make_toy(const ToyDatasetOptions& o, std::ostream& out) {
  load_config(o.common);
  ToyOptions options;
  options.samples_per_cell = o.samples_per_cell;
  const auto seed = o.common.seed.value_or(0);
  write_toy_dataset(make_toy_dataset(options, seed), o.out);
  out << nlohmann::json{{"manifest", (std::filesystem::path(o.out) / "manifest.jsonl").string()},
                        {"entries", 4 * o.samples_per_cell},
                        {"seed", seed}}
             .dump()
      << '\n';
  return kExitOk;
}

TrainConfig train_config(const TrainOptions& o, Config& config) {
  if (o.steps) config.set("train.max_steps", std::to_string(*o.steps));
  if (o.batch_size) config.set("train.batch_size", std::to_string(*o.batch_size));
  if (o.lr) config.set("train.learning_rate", c10::str(*o.lr));
  config.set("train.output_dir", o.out);
  return TrainConfig::from_config(config);
}

void report_training(const TrainResult& result, std::ostream& out) {
  out << nlohmann::json{{"checkpoint", result.checkpoint.string()},
                        {"steps", result.history.size()},
                        {"initial_eval_loss", result.initial_eval_loss},
                        {"final_eval_loss", result.final_eval_loss}}
             .dump()
      << '\n';
}

int run_train_disentangle(const TrainOptions& o, std::ostream& out) {
  const auto preset = o.preset == "toy" ? ModelConfig::toy() : ModelConfig{};
  auto config = load_config(o.common, preset);
  const auto train = train_config(o, config);
  torch::manual_seed(train.seed);
  Model model(ModelConfig::from_config(config));
  if (!o.checkpoint.empty()) load_checkpoint(resolve_checkpoint(o.checkpoint), model);
  const auto data = load_training_data(read_manifest(o.manifest), model->config());
  report_training(train_disentangle(model, data, train), out);
  return kExitOk;
}

int run_train_generate(const TrainOptions& o, std::ostream& out) {
  const auto checkpoint = resolve_checkpoint(o.checkpoint);
  const auto model_config = checkpoint_model_config(checkpoint);
  auto config = load_config(o.common, model_config);
  const auto train = train_config(o, config);
  if (ModelConfig::from_config(config).to_json() != model_config.to_json()) {
    throw InvalidArgument("model.* settings must match the checkpoint's geometry in stage 2");
  }
  torch::manual_seed(train.seed);
  Model model(model_config);
  load_checkpoint(checkpoint, model);
  const auto data = load_training_data(read_manifest(o.manifest), model->config());
  report_training(train_generative(model, data, train), out);
  return kExitOk;
}

torch::Tensor load_condition_image(const std::string& path, const ModelConfig& config) {
  const auto channels = static_cast<int>(config.image_channels);
  if (channels != 1 && channels != 3 && channels != 4) {
    throw InvalidArgument("image conditions need a model with 1, 3 or 4 image channels");
  }
  return resize_square(image_to_tensor(read_png(path, channels)), static_cast<int>(config.image_size));
}

int run_stylize(const StylizeOptions& o, std::ostream& out) {
  load_config(o.common);
  const auto checkpoint = resolve_checkpoint(o.checkpoint);
  CheckpointMeta meta;
  auto model = load_model(checkpoint, &meta);
  const auto& cfg = model->config();

  StylizeRequest request;
  if (!o.style_image.empty()) request.style_image = load_condition_image(o.style_image, cfg);
  if (!o.style_text.empty()) request.style_text = o.style_text;
  if (!o.content_image.empty()) request.content_image = load_condition_image(o.content_image, cfg);
  if (!o.content_text.empty()) request.content_text = o.content_text;
  request.samples = o.samples;
  request.ddim.steps = o.steps;
  request.ddim.guidance_scale = o.guidance_scale;
  request.ddim.seed = o.common.seed.value_or(0);

  const auto result = stylize(model, request);
  auto stem = std::filesystem::path(o.out);
  if (stem.extension() == ".png") stem.replace_extension();
  if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path());

  std::vector<std::string> files;
  for (std::int64_t i = 0; i < request.samples; ++i) {
    auto path = stem.string();
    if (request.samples > 1) {
      char suffix[16];
      std::snprintf(suffix, sizeof(suffix), "_%03lld", static_cast<long long>(i));
      path += suffix;
    }
    path += ".png";
    write_png(path, tensor_to_image(result.latents[i]));
    files.push_back(path);
  }
  auto sidecar = stylize_sidecar(request, result.provenance);
  sidecar["checkpoint"] = checkpoint.string();
  sidecar["checkpoint_step"] = meta.step;
  sidecar["checkpoint_stage"] = meta.stage;
  sidecar["images"] = files;
  if (!o.style_image.empty()) sidecar["style"]["image"] = o.style_image;
  if (!o.content_image.empty()) sidecar["content"]["image"] = o.content_image;
  std::ofstream side(stem.string() + ".json");
  side << sidecar.dump(2) << '\n';
  if (!side) throw IoError("cannot write " + stem.string() + ".json");
  out << nlohmann::json{{"images", files}, {"sidecar", stem.string() + ".json"}}.dump() << '\n';
  return kExitOk;
}

int run_evaluate(const EvaluateOptions& o, std::ostream& out) {
  load_config(o.common);
  HashingEmbedder embedder(o.embed_dim);
  ContrastQualityStub predictor;
  const auto prompts = read_prompt_manifest(o.prompts);
  const auto report = evaluate_run(o.images, prompts, embedder, predictor, o.checkpoint_id,
                                   std::filesystem::path(o.prompts).filename().string());
  report.write(o.out, o.csv);
  out << report.to_json().at("aggregates").dump() << '\n';
  return kExitOk;
}

int run_inspect(const InspectOptions& o, std::ostream& out) {
  load_config(o.common);
  out << describe_checkpoint(resolve_checkpoint(o.checkpoint)).dump(2) << '\n';
  return kExitOk;
}

std::string error_type(const std::exception& e) {
  if (dynamic_cast<const InvalidArgument*>(&e)) return "invalid_argument";
  if (dynamic_cast<const IoError*>(&e)) return "io_error";
  if (dynamic_cast<const TrainingError*>(&e)) return "training_error";
  if (dynamic_cast<const CaptionerTransportError*>(&e)) return "captioner_error";
  if (dynamic_cast<const Error*>(&e)) return "error";
  if (dynamic_cast<const c10::Error*>(&e)) return "tensor_error";
  return "internal_error";
}

std::vector<char*> as_argv(std::vector<std::string>& args) {
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  return argv;
}

}  // namespace

std::vector<std::string> subcommands() {
  auto ctx = make_context();
  std::vector<std::string> out;
  for (const auto* sub : ctx->app->get_subcommands({})) out.push_back(sub->get_name());
  return out;
}

std::string help_text(const std::string& subcommand) {
  auto ctx = make_context();
  if (subcommand.empty()) return ctx->app->help();
  return ctx->app->get_subcommand(subcommand)->help();
}

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  auto ctx = make_context();
  auto& app = *ctx->app;
  auto argv_storage = args.empty() ? std::vector<std::string>{"csdiff"} : args;
  auto argv = as_argv(argv_storage);
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    const auto* selected = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    out << selected->help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const auto& selected = app.get_subcommands();
    err << (selected.empty() ? app.help() : selected.front()->help());
    return kExitUsage;
  }

  try {
    const auto* sub = app.get_subcommands().front();
    const auto& name = sub->get_name();
    if (name == "build-dataset") return run_build_dataset(ctx->build, out);
    if (name == "make-toy-dataset") return run_make_toy(ctx->toy, out);
    if (name == "train-disentangle") return run_train_disentangle(ctx->disentangle, out);
    if (name == "train-generate") return run_train_generate(ctx->generate, out);
    if (name == "stylize") return run_stylize(ctx->stylize, out);
    if (name == "evaluate") return run_evaluate(ctx->evaluate, out);
    if (name == "inspect-checkpoint") return run_inspect(ctx->inspect, out);
    err << nlohmann::json{{"error", {{"type", "usage"}, {"message", "unhandled subcommand " + name}}}}.dump() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << nlohmann::json{{"error", {{"type", error_type(e)}, {"message", e.what()}}}}.dump() << '\n';
    return kExitFailure;
  }
}

}  // namespace csdiff::cli
