#include "csdiff/training.hpp"

#include <cmath>
#include <fstream>
#include <numeric>

#include <torch/nn/utils/clip_grad.h>
#include <torch/optim/adamw.h>

#include "csdiff/checkpoint.hpp"

namespace csdiff {
namespace {

void require_probability(double p, const char* name) {
  if (!(p >= 0.0 && p <= 1.0)) throw InvalidArgument(std::string("train config: ") + name + " must lie in [0, 1]");
}

void set_trainable(Model& model, const std::vector<std::string>& groups, bool trainable) {
  for (const auto& g : groups) {
    for (auto& p : model->group_parameters(g)) p.set_requires_grad(trainable);
  }
}

std::vector<torch::Tensor> collect(const Model& model, const std::vector<std::string>& groups) {
  std::vector<torch::Tensor> out;
  for (const auto& g : groups) {
    auto params = model->group_parameters(g);
    out.insert(out.end(), params.begin(), params.end());
  }
  return out;
}

std::vector<std::string> rendered_styles(const TrainingData& data, const std::vector<std::size_t>& indices) {
  std::vector<std::string> out;
  for (auto i : indices) out.push_back(data.styles[i].rendered);
  return out;
}

std::vector<std::string> content_texts(const TrainingData& data, const std::vector<std::size_t>& indices) {
  std::vector<std::string> out;
  for (auto i : indices) out.push_back(data.content_texts[i]);
  return out;
}

torch::Tensor gather_images(const TrainingData& data, const std::vector<std::size_t>& indices) {
  std::vector<std::int64_t> idx(indices.begin(), indices.end());
  return data.images.index_select(0, torch::tensor(idx, torch::kInt64));
}

torch::Tensor bool_column(const std::vector<bool>& flags) {
  auto out = torch::zeros({static_cast<std::int64_t>(flags.size())}, torch::kBool);
  for (std::size_t i = 0; i < flags.size(); ++i) out[static_cast<std::int64_t>(i)] = static_cast<bool>(flags[i]);
  return out;
}

/// Per-sample CFG and text dropout applied in place on a built pack whose
/// content rows are [text features (L rows); projected e_c (n_qc rows)].
void apply_condition_dropout(Model& model, ConditionPack& cond, const std::vector<bool>& joint,
                             const std::vector<bool>& style_only, const std::vector<bool>& text_drop) {
  const auto batch = cond.batch_size();
  const auto n_qc = model->null->content.size(0);
  const auto text_len = cond.content.size(1) - n_qc;
  auto jm = bool_column(joint);
  auto sm = bool_column(style_only);
  auto tm = bool_column(text_drop);

  auto text_rows = cond.content.slice(1, 0, text_len);
  auto ec_rows = cond.content.slice(1, text_len);
  auto null_content = model->null->content.unsqueeze(0).expand({batch, -1, -1});
  ec_rows = torch::where(jm.view({batch, 1, 1}), null_content, ec_rows);
  cond.content = torch::cat({text_rows, ec_rows}, 1);

  auto hide_text = (jm | tm).view({batch, 1});
  auto text_mask = cond.content_mask.slice(1, 0, text_len) & hide_text.logical_not();
  cond.content_mask = torch::cat({text_mask, cond.content_mask.slice(1, text_len)}, 1);

  auto null_style = model->null->style.unsqueeze(0).expand({batch, -1, -1});
  cond.style = torch::where((jm | sm).view({batch, 1, 1}), null_style, cond.style);
}

bool is_finite(const torch::Tensor& t) { return std::isfinite(t.item<double>()); }

class RunOutput {
 public:
  RunOutput(const TrainConfig& config, const std::string& stage) : dir_(config.output_dir), stage_(stage) {
    if (dir_.empty()) return;
    std::filesystem::create_directories(dir_ / "checkpoints");
    log_.open(dir_ / (stage + "_log.jsonl"), std::ios::trunc);
    if (!log_) throw IoError("cannot open training log in " + dir_.string());
  }

  bool enabled() const { return !dir_.empty(); }

  void log(const nlohmann::json& line) {
    if (!enabled()) return;
    log_ << line.dump() << '\n';
    log_.flush();
  }

  std::filesystem::path checkpoint(Model& model, std::int64_t step, const nlohmann::json& config,
                                   const torch::optim::AdamW& optimizer) {
    if (!enabled()) return {};
    char name[64];
    std::snprintf(name, sizeof(name), "%s-%06lld.ckpt", stage_.c_str(), static_cast<long long>(step));
    const auto relative = std::filesystem::path("checkpoints") / name;
    save_checkpoint(dir_ / relative, model, {step, stage_, config}, &optimizer);
    std::ofstream latest(dir_ / "latest", std::ios::trunc);
    latest << relative.generic_string() << '\n';
    if (!latest) throw IoError("cannot update the latest pointer in " + dir_.string());
    return dir_ / relative;
  }

  [[noreturn]] void abort_non_finite(std::int64_t step, const std::vector<std::size_t>& indices,
                                     const TrainingData& data, const nlohmann::json& values) {
    nlohmann::json dump = {{"stage", stage_}, {"step", step}, {"indices", indices}, {"losses", values}};
    for (auto i : indices) {
      dump["content_texts"].push_back(data.content_texts[i]);
      dump["style_texts"].push_back(data.styles[i].rendered);
    }
    std::string where = "";
    if (enabled()) {
      const auto path = dir_ / ("nonfinite_" + stage_ + "_step" + std::to_string(step) + ".json");
      std::ofstream(path) << dump.dump(2) << '\n';
      where = "; batch dumped to " + path.string();
    }
    throw TrainingError("non-finite " + stage_ + " loss at step " + std::to_string(step) + " (batch indices " +
                        nlohmann::json(indices).dump() + ")" + where);
  }

 private:
  std::filesystem::path dir_;
  std::string stage_;
  std::ofstream log_;
};

void require_batch(const TrainingData& data, const TrainConfig& config) {
  config.validate();
  if (data.size() < config.batch_size) {
    throw InvalidArgument("training data has " + std::to_string(data.size()) + " entries, fewer than batch_size " +
                          std::to_string(config.batch_size));
  }
  if (static_cast<std::int64_t>(data.content_texts.size()) != data.size() ||
      static_cast<std::int64_t>(data.styles.size()) != data.size()) {
    throw InvalidArgument("training data texts are not aligned with its images");
  }
}

nlohmann::json snapshot(const Model& model, const TrainConfig& config) {
  return {{"model", model->config().to_json()}, {"train", config.to_json()}};
}

std::vector<std::size_t> eval_indices(const TrainingData& data, const TrainConfig& config) {
  Rng rng = Rng(config.seed).split("eval.indices");
  const auto n = static_cast<std::size_t>(data.size());
  const auto k = std::min<std::size_t>(n, static_cast<std::size_t>(std::max<std::int64_t>(config.eval_batch_size, 2)));
  return sample_indices(n, k, rng);
}

}  // namespace

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw InvalidArgument("train config: learning_rate must be positive");
  if (weight_decay < 0.0) throw InvalidArgument("train config: weight_decay must be non-negative");
  if (!(grad_clip > 0.0)) throw InvalidArgument("train config: grad_clip must be positive");
  if (batch_size < 2) throw InvalidArgument("train config: batch_size must be at least 2");
  if (max_steps < 0) throw InvalidArgument("train config: max_steps must be non-negative");
  if (checkpoint_every < 0) throw InvalidArgument("train config: checkpoint_every must be non-negative");
  require_probability(p_swap_style, "p_swap_style");
  require_probability(p_swap_content, "p_swap_content");
  require_probability(p_keyword_drop, "p_keyword_drop");
  require_probability(p_cond_drop, "p_cond_drop");
  require_probability(p_content_text_drop, "p_content_text_drop");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"learning_rate", learning_rate},
          {"weight_decay", weight_decay},
          {"grad_clip", grad_clip},
          {"batch_size", batch_size},
          {"max_steps", max_steps},
          {"p_swap_style", p_swap_style},
          {"p_swap_content", p_swap_content},
          {"p_keyword_drop", p_keyword_drop},
          {"p_cond_drop", p_cond_drop},
          {"p_content_text_drop", p_content_text_drop},
          {"seed", seed},
          {"eval_batch_size", eval_batch_size},
          {"checkpoint_every", checkpoint_every}};
}

std::map<std::string, std::string> TrainConfig::defaults() {
  std::map<std::string, std::string> out;
  const auto fields = TrainConfig{}.to_json();
  for (const auto& [key, value] : fields.items()) {
    out["train." + key] = value.is_number_float() ? c10::str(value.get<double>()) : value.dump();
  }
  out["train.output_dir"] = "";
  return out;
}

TrainConfig TrainConfig::from_config(const Config& config) {
  TrainConfig c;
  auto real = [&](const char* key, double& field) {
    if (auto v = config.get(std::string("train.") + key)) field = config.get_double(std::string("train.") + key);
  };
  auto integer = [&](const char* key, std::int64_t& field) {
    if (auto v = config.get(std::string("train.") + key)) field = config.get_int(std::string("train.") + key);
  };
  real("learning_rate", c.learning_rate);
  real("weight_decay", c.weight_decay);
  real("grad_clip", c.grad_clip);
  integer("batch_size", c.batch_size);
  integer("max_steps", c.max_steps);
  real("p_swap_style", c.p_swap_style);
  real("p_swap_content", c.p_swap_content);
  real("p_keyword_drop", c.p_keyword_drop);
  real("p_cond_drop", c.p_cond_drop);
  real("p_content_text_drop", c.p_content_text_drop);
  integer("eval_batch_size", c.eval_batch_size);
  integer("checkpoint_every", c.checkpoint_every);
  if (auto v = config.get("train.seed")) c.seed = static_cast<std::uint64_t>(config.get_int("train.seed"));
  if (auto v = config.get("train.output_dir")) c.output_dir = *v;
  c.validate();
  return c;
}

const char* to_string(Modality m) { return m == Modality::image ? "image" : "text"; }

ModalityChoice sample_condition_sources(Rng& rng, const TrainConfig& config) {
  require_probability(config.p_swap_style, "p_swap_style");
  require_probability(config.p_swap_content, "p_swap_content");
  ModalityChoice choice;
  choice.style_source = rng.bernoulli(config.p_swap_style) ? Modality::text : Modality::image;
  choice.content_source = rng.bernoulli(config.p_swap_content) ? Modality::text : Modality::image;
  return choice;
}

StyleText drop_style_keywords(const StyleText& style, Rng& rng, double p) {
  require_probability(p, "p_keyword_drop");
  if (style.keywords.empty()) throw InvalidArgument("style text has no keywords to drop");
  std::vector<bool> keep(style.keywords.size());
  bool any = false;
  for (std::size_t i = 0; i < keep.size(); ++i) {
    keep[i] = !rng.bernoulli(p);
    any = any || keep[i];
  }
  if (!any) keep[rng.below(keep.size())] = true;
  std::vector<std::pair<std::string, std::string>> kept;
  for (std::size_t i = 0; i < keep.size(); ++i) {
    if (keep[i]) kept.push_back(style.keywords[i]);
  }
  return make_style_text(std::move(kept));
}

std::vector<std::size_t> sample_indices(std::size_t n, std::size_t k, Rng& rng) {
  if (k > n) throw InvalidArgument("cannot draw " + std::to_string(k) + " distinct indices from " + std::to_string(n));
  std::vector<std::size_t> pool(n);
  std::iota(pool.begin(), pool.end(), 0);
  for (std::size_t i = 0; i < k; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.below(n - i));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(k);
  return pool;
}

double evaluate_disentangle(Model& model, const TrainingData& data, const std::vector<std::size_t>& indices,
                            std::uint64_t seed) {
  torch::NoGradGuard guard;
  const auto tokenizer = model->tokenizer();
  DisentangleInputs inputs{gather_images(data, indices), tokenizer.batch(rendered_styles(data, indices)),
                           tokenizer.batch(content_texts(data, indices))};
  Rng rng = Rng(seed).split("eval.itm");
  return disentangle_loss(model->disentangle_modules(), inputs, model->config().temperature, rng).total.item<double>();
}

double evaluate_reconstruction(Model& model, const TrainingData& data, const std::vector<std::size_t>& indices,
                               std::uint64_t seed) {
  torch::NoGradGuard guard;
  const auto tokenizer = model->tokenizer();
  const NoiseSchedule schedule(model->config());
  auto images = gather_images(data, indices);
  auto visual = model->embed_images(images);
  auto content_tokens = tokenizer.batch(content_texts(data, indices));
  auto cond = model->attach_style(model->build_content_condition(&content_tokens, visual.content_seq), visual.style_seq);

  Rng rng = Rng(seed).split("eval.reconstruction");
  Rng t_rng = rng.split("t");
  std::vector<std::int64_t> ts;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    ts.push_back(1 + static_cast<std::int64_t>(t_rng.below(static_cast<std::uint64_t>(schedule.train_steps()))));
  }
  Rng noise_rng = rng.split("noise");
  return reconstruction_loss(model->epsilon_predictor(), schedule, model->latents_from_images(images),
                             torch::tensor(ts, torch::kInt64), cond, noise_rng)
      .loss.item<double>();
}

TrainResult train_disentangle(Model& model, const TrainingData& data, const TrainConfig& config,
                              const StepObserver& observer) {
  require_batch(data, config);
  const std::vector<std::string> groups{"encoders", "csdn", "itm", "itg"};
  set_trainable(model, groups, true);
  auto params = collect(model, groups);
  torch::optim::AdamW optimizer(params,
                                torch::optim::AdamWOptions(config.learning_rate).weight_decay(config.weight_decay));
  model->train();

  const auto tokenizer = model->tokenizer();
  const auto cfg_json = snapshot(model, config);
  const auto evals = eval_indices(data, config);
  RunOutput output(config, "disentangle");
  Rng root(config.seed);

  TrainResult result;
  result.initial_eval_loss = evaluate_disentangle(model, data, evals, config.seed);
  for (std::int64_t step = 1; step <= config.max_steps; ++step) {
    Rng step_rng = root.split("disentangle.step." + std::to_string(step));
    Rng batch_rng = step_rng.split("batch");
    const auto indices =
        sample_indices(static_cast<std::size_t>(data.size()), static_cast<std::size_t>(config.batch_size), batch_rng);
    DisentangleInputs inputs{gather_images(data, indices), tokenizer.batch(rendered_styles(data, indices)),
                             tokenizer.batch(content_texts(data, indices))};
    Rng itm_rng = step_rng.split("itm");
    auto losses = disentangle_loss(model->disentangle_modules(), inputs, model->config().temperature, itm_rng);

    auto values = losses.to_json();
    if (!is_finite(losses.total)) output.abort_non_finite(step, indices, data, values);
    optimizer.zero_grad();
    losses.total.backward();
    const auto grad_norm = torch::nn::utils::clip_grad_norm_(params, config.grad_clip);
    optimizer.step();

    values["stage"] = "disentangle";
    values["step"] = step;
    values["itg_s_per_token"] = losses.itg_style_per_token;
    values["itg_c_per_token"] = losses.itg_content_per_token;
    values["grad_norm"] = grad_norm;
    StepRecord record{step, std::move(values)};
    output.log(record.values);
    if (observer) observer(record);
    result.history.push_back(std::move(record));
    if (config.checkpoint_every > 0 && step % config.checkpoint_every == 0 && step != config.max_steps) {
      output.checkpoint(model, step, cfg_json, optimizer);
    }
  }
  result.final_eval_loss = evaluate_disentangle(model, data, evals, config.seed);
  output.log({{"stage", "disentangle"},
              {"eval_initial", result.initial_eval_loss},
              {"eval_final", result.final_eval_loss}});
  result.checkpoint = output.checkpoint(model, config.max_steps, cfg_json, optimizer);
  return result;
}

TrainResult train_generative(Model& model, const TrainingData& data, const TrainConfig& config,
                             const StepObserver& observer) {
  require_batch(data, config);
  set_trainable(model, {"encoders", "csdn", "itm", "itg"}, false);
  const std::vector<std::string> groups{"mcl", "unet", "proj", "null"};
  set_trainable(model, groups, true);
  auto params = collect(model, groups);
  torch::optim::AdamW optimizer(params,
                                torch::optim::AdamWOptions(config.learning_rate).weight_decay(config.weight_decay));
  model->train();

  const auto tokenizer = model->tokenizer();
  const NoiseSchedule schedule(model->config());
  const auto cfg_json = snapshot(model, config);
  const auto evals = eval_indices(data, config);
  RunOutput output(config, "generative");
  Rng root(config.seed);
  auto predictor = model->epsilon_predictor();

  TrainResult result;
  result.initial_eval_loss = evaluate_reconstruction(model, data, evals, config.seed);
  for (std::int64_t step = 1; step <= config.max_steps; ++step) {
    Rng step_rng = root.split("generative.step." + std::to_string(step));
    Rng batch_rng = step_rng.split("batch");
    const auto indices =
        sample_indices(static_cast<std::size_t>(data.size()), static_cast<std::size_t>(config.batch_size), batch_rng);
    const auto batch = static_cast<std::int64_t>(indices.size());
    auto images = gather_images(data, indices);

    Rng swap_rng = step_rng.split("swap");
    const auto choice = sample_condition_sources(swap_rng, config);
    Rng keyword_rng = step_rng.split("keywords");
    std::vector<std::string> style_texts;
    for (auto i : indices) style_texts.push_back(drop_style_keywords(data.styles[i], keyword_rng, config.p_keyword_drop).rendered);
    auto content_tokens = tokenizer.batch(content_texts(data, indices));

    torch::Tensor e_s, e_c;
    {
      torch::NoGradGuard frozen;
      auto visual = model->embed_images(images);
      e_s = choice.style_source == Modality::text ? model->style_from_text(tokenizer.batch(style_texts))
                                                  : visual.style_seq;
      e_c = choice.content_source == Modality::text ? model->content_from_text(content_tokens) : visual.content_seq;
    }
    auto cond = model->attach_style(model->build_content_condition(&content_tokens, e_c), e_s);

    Rng drop_rng = step_rng.split("cond_drop");
    std::vector<bool> joint(indices.size()), style_only(indices.size()), text_drop(indices.size());
    for (std::size_t b = 0; b < indices.size(); ++b) {
      joint[b] = drop_rng.bernoulli(config.p_cond_drop);
      style_only[b] = drop_rng.bernoulli(config.p_cond_drop);
      text_drop[b] = drop_rng.bernoulli(config.p_content_text_drop);
    }
    apply_condition_dropout(model, cond, joint, style_only, text_drop);

    Rng t_rng = step_rng.split("timesteps");
    std::vector<std::int64_t> ts;
    for (std::int64_t b = 0; b < batch; ++b) {
      ts.push_back(1 + static_cast<std::int64_t>(t_rng.below(static_cast<std::uint64_t>(schedule.train_steps()))));
    }
    Rng noise_rng = step_rng.split("noise");
    auto sample = reconstruction_loss(predictor, schedule, model->latents_from_images(images),
                                      torch::tensor(ts, torch::kInt64), cond, noise_rng);

    nlohmann::json values = {{"stage", "generative"},
                             {"step", step},
                             {"loss", sample.loss.item<double>()},
                             {"style_source", to_string(choice.style_source)},
                             {"content_source", to_string(choice.content_source)},
                             {"cond_dropped", std::count(joint.begin(), joint.end(), true)},
                             {"style_dropped", std::count(style_only.begin(), style_only.end(), true)}};
    if (!is_finite(sample.loss)) output.abort_non_finite(step, indices, data, values);
    optimizer.zero_grad();
    sample.loss.backward();
    values["grad_norm"] = torch::nn::utils::clip_grad_norm_(params, config.grad_clip);
    optimizer.step();

    StepRecord record{step, std::move(values)};
    output.log(record.values);
    if (observer) observer(record);
    result.history.push_back(std::move(record));
    if (config.checkpoint_every > 0 && step % config.checkpoint_every == 0 && step != config.max_steps) {
      output.checkpoint(model, step, cfg_json, optimizer);
    }
  }
  result.final_eval_loss = evaluate_reconstruction(model, data, evals, config.seed);
  output.log({{"stage", "generative"},
              {"eval_initial", result.initial_eval_loss},
              {"eval_final", result.final_eval_loss}});
  result.checkpoint = output.checkpoint(model, config.max_steps, cfg_json, optimizer);
  set_trainable(model, {"encoders", "csdn", "itm", "itg"}, true);
  return result;
}

TrainingData load_training_data(const Manifest& manifest, const ModelConfig& config) {
  if (manifest.entries.empty()) throw InvalidArgument("manifest has no entries");
  std::vector<std::size_t> all(manifest.entries.size());
  std::iota(all.begin(), all.end(), 0);
  auto batch = load_triplet_batch(manifest, all, static_cast<int>(config.image_size),
                                  static_cast<int>(config.image_channels));
  TrainingData data;
  data.images = batch.images;
  data.content_texts = std::move(batch.content_texts);
  data.styles = std::move(batch.styles);
  return data;
}

std::filesystem::path latest_checkpoint(const std::filesystem::path& dir) {
  std::ifstream in(dir / "latest");
  if (!in) throw IoError("no 'latest' pointer in " + dir.string());
  std::string relative;
  std::getline(in, relative);
  relative = trim(relative);
  if (relative.empty()) throw IoError("empty 'latest' pointer in " + dir.string());
  return dir / relative;
}

}  // namespace csdiff
