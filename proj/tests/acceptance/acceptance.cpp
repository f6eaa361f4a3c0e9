// Acceptance suite: one PASS/FAIL line per criterion. Run with criterion
// numbers as arguments to select a subset (e.g. `acceptance 1 4`).
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "csdiff/captioner.hpp"
#include "csdiff/dataset.hpp"
#include "csdiff/diffusion.hpp"
#include "csdiff/evaluate.hpp"
#include "csdiff/image_io.hpp"
#include "csdiff/losses.hpp"
#include "csdiff/model.hpp"
#include "csdiff/stylize.hpp"
#include "csdiff/toy_data.hpp"
#include "csdiff/training.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace csdiff;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* format, double value) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), format, value);
  return buf;
}

oracle::Mat to_mat(const torch::Tensor& t) {
  auto x = t.detach().to(torch::kFloat64).contiguous();
  if (x.dim() == 1) x = x.unsqueeze(0);
  oracle::Mat m(static_cast<std::size_t>(x.size(0)), oracle::Vec(static_cast<std::size_t>(x.size(1))));
  auto a = x.accessor<double, 2>();
  for (std::int64_t i = 0; i < x.size(0); ++i)
    for (std::int64_t j = 0; j < x.size(1); ++j) m[i][j] = a[i][j];
  return m;
}

oracle::NamedWeights named_weights(const torch::nn::Module& module) {
  oracle::NamedWeights out;
  for (const auto& item : module.named_parameters()) out[item.key()] = to_mat(item.value());
  return out;
}

// ---------------------------------------------------------------------------
// 1. Loss-oracle equivalence

Outcome loss_oracles() {
  torch::manual_seed(11);
  Rng rng(11);
  Tokenizer tokenizer(8);
  const std::vector<std::string> words{"a", "ox", "sky", "blue", "tree", "dusk", "ink", "mist"};
  double itc_err = 0.0, itm_err = 0.0, itg_err = 0.0;
  bool pairs_ok = true;

  for (int batch = 0; batch < 50; ++batch) {
    const auto n = static_cast<std::int64_t>(2 + rng.below(3));
    const auto d = static_cast<std::int64_t>(2 * (1 + rng.below(4)));
    const double tau = 0.05 + 0.95 * rng.uniform();
    auto opts = torch::TensorOptions().dtype(torch::kFloat64);
    auto image = torch::randn({n, d}, opts);
    auto text = torch::randn({n, d}, opts);

    const double got_itc = itc_loss(image, text, tau).item<double>();
    itc_err = std::max(itc_err, std::abs(got_itc - oracle::itc(to_mat(image), to_mat(text), tau)));

    ItmHead head;
    head->to(torch::kFloat64);
    {
      torch::NoGradGuard guard;
      head->weight.fill_(4.0 * rng.uniform() - 2.0);
      head->bias.fill_(rng.uniform() - 0.5);
    }
    auto pairs = sample_itm_pairs(image, text, rng);
    std::vector<int> labels;
    for (std::int64_t p = 0; p < pairs.size(); ++p) labels.push_back(pairs.labels[p].item<int>());
    // first half aligned, second half a derangement of the texts
    for (std::int64_t i = 0; i < n; ++i) {
      pairs_ok = pairs_ok && labels[i] == 1 && labels[n + i] == 0 && torch::equal(pairs.image[i], image[i]) &&
                 torch::equal(pairs.text[i], text[i]) && torch::equal(pairs.image[n + i], image[i]) &&
                 !torch::equal(pairs.text[n + i], text[i]);
    }
    const double got_itm = itm_loss(pairs, head).item<double>();
    const double want_itm = oracle::itm(to_mat(pairs.image), to_mat(pairs.text), labels,
                                        head->weight.item<double>(), head->bias.item<double>());
    itm_err = std::max(itm_err, std::abs(got_itm - want_itm));

    const auto heads = (d % 4 == 0 && rng.bernoulli(0.5)) ? 2 : 1;
    const auto blocks = static_cast<std::int64_t>(1 + rng.below(2));
    const auto n_q = static_cast<std::int64_t>(1 + rng.below(4));
    ItgDecoder decoder(d, heads, blocks, kVocabSize);
    TokenEmbedding embedding(kVocabSize, 8, d);
    decoder->to(torch::kFloat64);
    embedding->to(torch::kFloat64);
    std::vector<std::string> texts;
    for (std::int64_t i = 0; i < n; ++i) texts.push_back(words[rng.below(words.size())]);
    const auto tokens = tokenizer.batch(texts);
    auto prefix = torch::randn({n, n_q, d}, opts);
    const double got_itg = itg_loss(decoder, embedding, prefix, tokens).sum.item<double>();

    oracle::DecoderWeights w;
    w.heads = heads;
    for (const auto& block : *decoder->blocks) w.blocks.push_back(named_weights(*block));
    for (const char* name : {"transform", "transform_norm", "vocab"}) {
      for (const auto& [k, v] : named_weights(*decoder->named_children()[name])) w.head[std::string(name) + "." + k] = v;
    }
    w.token_table = to_mat(embedding->table->weight);
    w.token_position = to_mat(embedding->position);
    std::vector<oracle::Mat> prefix_rows;
    std::vector<std::vector<std::int64_t>> ids;
    std::vector<std::vector<bool>> mask;
    for (std::int64_t b = 0; b < n; ++b) {
      prefix_rows.push_back(to_mat(prefix[b]));
      std::vector<std::int64_t> row_ids;
      std::vector<bool> row_mask;
      for (std::int64_t m = 0; m < tokens.max_length(); ++m) {
        row_ids.push_back(tokens.ids[b][m].item<std::int64_t>());
        row_mask.push_back(tokens.mask[b][m].item<bool>());
      }
      ids.push_back(row_ids);
      mask.push_back(row_mask);
    }
    itg_err = std::max(itg_err, std::abs(got_itg - oracle::itg(w, prefix_rows, ids, mask)));
  }

  auto eye = torch::eye(2, torch::kFloat64);
  const double hand = 2.0 * std::log(1.0 + std::exp(-1.0));
  const double hand_err = std::max(std::abs(itc_loss(eye, eye, 1.0).item<double>() - hand),
                                   std::abs(oracle::itc(to_mat(eye), to_mat(eye), 1.0) - hand));
  const double worst = std::max({itc_err, itm_err, itg_err, hand_err});
  Outcome out;
  out.pass = worst <= 1e-6 && pairs_ok && std::abs(hand - 0.62652) < 5e-6;
  out.detail = "max |err| itc " + fmt("%.2e", itc_err) + ", itm " + fmt("%.2e", itm_err) + ", itg " +
               fmt("%.2e", itg_err) + ", N=2 hand value " + fmt("%.5f", hand) + (pairs_ok ? "" : ", bad ITM pairs");
  return out;
}

// ---------------------------------------------------------------------------
// 2. Gradient fidelity

struct GroupCheck {
  std::string group;
  double rel_error = 0.0;
};

using LossFn = std::function<torch::Tensor()>;

GroupCheck check_group(Model& model, const std::string& group, const LossFn& loss_fn, Rng& rng) {
  constexpr double h = 1e-4;
  auto params = model->group_parameters(group);
  for (auto& p : model->parameters()) p.mutable_grad() = torch::Tensor();
  loss_fn().backward();

  auto eval = [&] {
    torch::NoGradGuard guard;
    return loss_fn().item<double>();
  };
  std::vector<double> analytic, numeric;

  // random directions over the whole group
  for (int probe = 0; probe < 2; ++probe) {
    std::vector<torch::Tensor> dirs;
    double sq = 0.0;
    for (auto& p : params) {
      dirs.push_back(torch::randn(p.sizes(), rng.torch_generator(), p.options()));
      sq += dirs.back().pow(2).sum().item<double>();
    }
    double a = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
      dirs[i] /= std::sqrt(sq);
      if (params[i].grad().defined()) a += (params[i].grad() * dirs[i]).sum().item<double>();
    }
    auto shift = [&](double s) {
      torch::NoGradGuard guard;
      for (std::size_t i = 0; i < params.size(); ++i) params[i].add_(dirs[i], s);
    };
    shift(h);
    const double up = eval();
    shift(-2.0 * h);
    const double down = eval();
    shift(h);
    analytic.push_back(a);
    numeric.push_back((up - down) / (2.0 * h));
  }

  // individual entries
  for (int probe = 0; probe < 6; ++probe) {
    auto& p = params[rng.below(params.size())];
    const auto flat_index = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(p.numel())));
    auto set_entry = [&](double value) {
      torch::NoGradGuard guard;
      p.view({-1})[flat_index].fill_(value);
    };
    const double a = p.grad().defined() ? p.grad().view({-1})[flat_index].item<double>() : 0.0;
    const double orig = p.detach().view({-1})[flat_index].item<double>();
    set_entry(orig + h);
    const double up = eval();
    set_entry(orig - h);
    const double down = eval();
    set_entry(orig);
    analytic.push_back(a);
    numeric.push_back((up - down) / (2.0 * h));
  }

  double diff = 0.0, na = 0.0, nn = 0.0, worst_entry = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += std::pow(analytic[i] - numeric[i], 2);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
    const double scale = std::max({std::abs(analytic[i]), std::abs(numeric[i]), 1e-6});
    worst_entry = std::max(worst_entry, std::abs(analytic[i] - numeric[i]) / scale);
  }
  const double rel = std::sqrt(diff) / std::max(std::sqrt(std::max(na, nn)), 1e-12);
  return {group, std::max(rel, worst_entry)};
}

Outcome gradient_fidelity() {
  auto model = testing::make_tiny_model(5);
  model->to(torch::kFloat64);
  const auto& cfg = model->config();
  auto data = testing::make_small_dataset(cfg, 1, 5);
  auto images = data.images.index({torch::tensor({0, 2})}).to(torch::kFloat64);
  auto tokenizer = model->tokenizer();
  const auto style_tokens = tokenizer.batch({"stripes", "dots"});
  const auto content_tokens = tokenizer.batch({"left", "top"});
  const auto modules = model->disentangle_modules();
  const DisentangleInputs inputs{images, style_tokens, content_tokens};

  LossFn disentangle = [&] {
    Rng rng(17);
    return disentangle_loss(modules, inputs, cfg.temperature, rng).total;
  };

  NoiseSchedule schedule(cfg);
  auto z0 = model->latents_from_images(images);
  auto noise = torch::randn(z0.sizes(), Rng(23).torch_generator(), z0.options());
  auto t = torch::tensor({cfg.train_timesteps / 3, (2 * cfg.train_timesteps) / 3}, torch::kInt64);
  auto predictor = model->epsilon_predictor();
  // sample 0 fully conditioned, sample 1 on the learned null pack
  LossFn reconstruction = [&] {
    auto visual = model->embed_images(images.slice(0, 0, 1));
    const auto first = tokenizer.batch({"left"});
    auto cond = model->attach_style(model->build_content_condition(&first, visual.content_seq), visual.style_seq);
    auto a = reconstruction_loss(predictor, schedule, z0.slice(0, 0, 1), t.slice(0, 0, 1), cond, noise.slice(0, 0, 1));
    auto b = reconstruction_loss(predictor, schedule, z0.slice(0, 1, 2), t.slice(0, 1, 2), model->null_condition(1),
                                 noise.slice(0, 1, 2));
    return a + b;
  };

  Rng rng(29);
  std::vector<GroupCheck> checks;
  for (const char* g : {"encoders", "csdn", "itm", "itg"}) checks.push_back(check_group(model, g, disentangle, rng));
  for (const char* g : {"mcl", "unet", "proj", "null"}) checks.push_back(check_group(model, g, reconstruction, rng));

  Outcome out;
  out.pass = true;
  std::ostringstream detail;
  detail << "rel err";
  for (const auto& c : checks) {
    out.pass = out.pass && c.rel_error < 1e-4;
    detail << " " << c.group << "=" << fmt("%.1e", c.rel_error);
  }
  out.detail = detail.str();
  return out;
}

// ---------------------------------------------------------------------------
// 3. Style-routing invariant

Outcome style_routing() {
  auto cfg = ModelConfig::tiny();
  cfg.unet_widths = {4, 8, 8};
  int layer_violations = 0, trace_violations = 0, ablation_violations = 0, insensitive = 0;
  for (int draw = 0; draw < 100; ++draw) {
    auto model = testing::make_model(cfg, 1000 + static_cast<std::uint64_t>(draw));
    torch::NoGradGuard guard;
    Rng rng(static_cast<std::uint64_t>(draw));
    auto gen = rng.torch_generator();
    const std::int64_t b = 2, k_c = 4, k_s = cfg.style_queries;
    ConditionPack a;
    a.content = torch::randn({b, k_c, cfg.cond_dim}, gen);
    a.content_mask = torch::rand({b, k_c}, gen) < 0.7;
    a.content_mask.select(1, 0).fill_(true);
    a.style = torch::randn({b, k_s, cfg.cond_dim}, gen);
    const auto other = a.with_style(torch::randn({b, k_s, cfg.cond_dim}, gen));

    for (auto& layer : model->mcl->layers()) {
      const auto d_z = layer->to_q->weight.size(1);
      auto z = torch::randn({b, 5, d_z}, gen);
      const bool same = torch::equal(layer->forward(z, a), layer->forward(z, other));
      if (layer->role() == BlockRole::middle ? same : !same) ++layer_violations;
    }

    auto z_t = torch::randn({b, cfg.latent_channels, cfg.latent_size, cfg.latent_size}, gen);
    auto t = torch::tensor({1 + static_cast<std::int64_t>(rng.below(cfg.train_timesteps)),
                            1 + static_cast<std::int64_t>(rng.below(cfg.train_timesteps))});
    UNetTrace ta, tb;
    auto eps_a = model->predict_epsilon(z_t, t, a, &ta);
    auto eps_b = model->predict_epsilon(z_t, t, other, &tb);
    for (std::size_t i = 0; i < ta.down.size(); ++i) trace_violations += torch::equal(ta.down[i], tb.down[i]) ? 0 : 1;
    if (torch::equal(ta.middle, tb.middle) || torch::equal(eps_a, eps_b)) ++insensitive;
    auto abl_a = model->predict_epsilon(z_t, t, a, nullptr, true);
    auto abl_b = model->predict_epsilon(z_t, t, other, nullptr, true);
    if (!torch::equal(abl_a, abl_b)) ++ablation_violations;
  }
  Outcome out;
  out.pass = layer_violations == 0 && trace_violations == 0 && ablation_violations == 0 && insensitive == 0;
  out.detail = "100 draws: layer violations " + std::to_string(layer_violations) + ", down-path trace changes " +
               std::to_string(trace_violations) + ", ablated eps changes " + std::to_string(ablation_violations) +
               ", middle insensitive " + std::to_string(insensitive);
  return out;
}

// ---------------------------------------------------------------------------
// 4. Sampler contracts

Outcome sampler_contracts() {
  auto model = testing::make_tiny_model(3);
  const auto& cfg = model->config();
  NoiseSchedule schedule(cfg);
  torch::NoGradGuard guard;
  auto cond = model->attach_style(model->null_condition(2), torch::randn({2, cfg.style_queries, cfg.query_dim}));
  auto null_cond = model->null_condition(2);
  const std::vector<std::int64_t> shape{2, cfg.latent_channels, cfg.latent_size, cfg.latent_size};
  DdimOptions opts;
  opts.steps = 10;
  opts.seed = 42;
  auto first = ddim_sample(model->epsilon_predictor(), schedule, cond, null_cond, shape, opts);
  auto second = ddim_sample(model->epsilon_predictor(), schedule, cond, null_cond, shape, opts);
  const bool reproducible = torch::equal(first, second);

  EpsilonPredictor zero = [](const torch::Tensor& z, const torch::Tensor&, const ConditionPack&) {
    return torch::zeros_like(z);
  };
  DdimOptions one;
  one.steps = 1;
  one.seed = 7;
  auto single = ddim_sample(zero, schedule, cond, null_cond, shape, one, torch::kFloat64);
  auto expected = ddim_initial_noise(shape, 7, torch::kFloat64) /
                  std::sqrt(schedule.alpha_bar(schedule.train_steps()));
  const double zero_err = (single - expected).abs().max().item<double>();

  auto u = torch::randn({3, 4}), c = torch::randn({3, 4});
  const bool identity = torch::equal(cfg_combine(u, c, 1.0), c);

  Outcome out;
  out.pass = reproducible && zero_err <= 1e-6 && identity;
  out.detail = std::string("rerun bitwise ") + (reproducible ? "equal" : "DIFFERENT") + ", eps=0 single step err " +
               fmt("%.2e", zero_err) + ", cfg scale 1 " + (identity ? "== conditional" : "!= conditional");
  return out;
}

// ---------------------------------------------------------------------------
// 5. End-to-end toy disentanglement

constexpr std::int64_t kToyStage1Steps = 1000;
constexpr std::int64_t kToyStage2Steps = 2000;
constexpr double kToyGuidance = 3.0;
constexpr std::int64_t kToySamples = 32;

Outcome toy_disentanglement() {
  const auto data = make_toy_dataset(ToyOptions{}, 1);
  auto model = testing::make_model(ModelConfig::toy(), 0);
  TrainConfig train;
  train.learning_rate = 1e-3;
  train.batch_size = 16;
  train.seed = 3;

  train.max_steps = kToyStage1Steps;
  const auto stage1 = train_disentangle(model, data, train);
  const double ratio = stage1.final_eval_loss / stage1.initial_eval_loss;
  train.max_steps = kToyStage2Steps;
  train_generative(model, data, train);

  NearestCentroidClassifier content_clf, style_clf;
  content_clf.fit(toy_content_features(data.images), data.content_labels, 2);
  style_clf.fit(toy_style_features(data.images), data.style_labels, 2);

  // per cell: style from text, and style from an image of the other content
  // class (a style-image/content-text pairing never seen in training)
  double worst_content = 1.0, worst_style = 1.0;
  std::ostringstream cells;
  const auto per_cell = data.size() / 4;
  for (int c = 0; c < 2; ++c) {
    for (int s = 0; s < 2; ++s) {
      for (int cross = 0; cross < 2; ++cross) {
        StylizeRequest request;
        request.samples = kToySamples;
        request.ddim.steps = 50;
        request.ddim.guidance_scale = kToyGuidance;
        request.ddim.seed = static_cast<std::uint64_t>(100 + 4 * c + 2 * s + cross);
        request.content_text = kToyContentTexts[static_cast<std::size_t>(c)];
        if (cross) {
          request.style_image = data.images[(1 - c) * 2 * per_cell + s * per_cell + 5];
        } else {
          request.style_text = kToyStyleTexts[static_cast<std::size_t>(s)];
        }
        const auto latents = stylize(model, request).latents;
        const double content_acc = content_clf.accuracy(toy_content_features(latents), c);
        const double style_acc = style_clf.accuracy(toy_style_features(latents), s);
        worst_content = std::min(worst_content, content_acc);
        worst_style = std::min(worst_style, style_acc);
        cells << (cells.tellp() > 0 ? " " : "") << kToyContentTexts[static_cast<std::size_t>(c)][0]
              << (s ? 'V' : 'H') << (cross ? "i" : "t") << "=" << fmt("%.2f", content_acc) << "/"
              << fmt("%.2f", style_acc);
      }
    }
  }

  Outcome out;
  out.pass = ratio <= 0.5 && worst_content >= 0.8 && worst_style >= 0.8;
  out.detail = "stage 1 loss ratio " + fmt("%.3f", ratio) + " after " + std::to_string(kToyStage1Steps) +
               " steps; stage 2 " + std::to_string(kToyStage2Steps) + " steps; min content acc " +
               fmt("%.2f", worst_content) + ", min style acc " + fmt("%.2f", worst_style) + " [" + cells.str() + "]";
  return out;
}

// ---------------------------------------------------------------------------
// 6. Dataset pipeline

Outcome dataset_pipeline() {
  const auto root = testing::fixture_path("wikistyle_mini");
  const auto records = read_metadata(root / "metadata.jsonl");
  const auto filtered = filter_records(records, FilterRules{});
  std::set<std::string> excluded;
  for (const auto& [record, reason] : filtered.excluded) excluded.insert(fs::path(record.image_path).stem().string());
  const std::set<std::string> want_excluded{"adams_moonrise", "kandinsky_composition", "morris_wallpaper"};

  testing::TempDir tmp("acceptance-dataset");
  std::vector<std::string> manifests, stats;
  for (int workers : {1, 1, 3}) {
    EchoCaptioner captioner;
    BuildOptions options;
    options.workers = workers;
    options.output_dir = tmp / ("run" + std::to_string(manifests.size()));
    build_manifest(root / "metadata.jsonl", root, captioner, options);
    manifests.push_back(testing::read_text(options.output_dir / "manifest.jsonl"));
    stats.push_back(testing::read_text(options.output_dir / "manifest.stats.json"));
  }
  const bool identical = manifests[0] == manifests[1] && manifests[0] == manifests[2] && stats[0] == stats[1] &&
                         stats[0] == stats[2];
  const auto lines = std::count(manifests[0].begin(), manifests[0].end(), '\n');
  Outcome out;
  out.pass = records.size() == 10 && filtered.kept.size() == 7 && excluded == want_excluded && identical && lines == 7;
  out.detail = "kept " + std::to_string(filtered.kept.size()) + "/" + std::to_string(records.size()) +
               ", manifest lines " + std::to_string(lines) + ", rebuilds " + (identical ? "byte-identical" : "DIFFER");
  return out;
}

// ---------------------------------------------------------------------------
// 7. Statistical contracts

bool within_3_sigma(std::int64_t count, std::int64_t n, double p) {
  const double sigma = std::sqrt(static_cast<double>(n) * p * (1.0 - p));
  return std::abs(static_cast<double>(count) - static_cast<double>(n) * p) <= 3.0 * sigma;
}

Outcome statistical_contracts() {
  constexpr std::int64_t kDraws = 10000;
  TrainConfig cfg;
  cfg.p_swap_style = cfg.p_swap_content = 0.5;
  Rng rng(2024);
  std::int64_t style_text = 0, content_text = 0;
  std::int64_t joint[2][2] = {{0, 0}, {0, 0}};
  for (std::int64_t i = 0; i < kDraws; ++i) {
    const auto choice = sample_condition_sources(rng, cfg);
    const int s = choice.style_source == Modality::text, c = choice.content_source == Modality::text;
    style_text += s;
    content_text += c;
    ++joint[s][c];
  }
  bool swaps_ok = within_3_sigma(style_text, kDraws, 0.5) && within_3_sigma(content_text, kDraws, 0.5);
  for (auto& row : joint)
    for (auto count : row) swaps_ok = swaps_ok && within_3_sigma(count, kDraws, 0.25);

  const auto style = make_style_text({{"artist", "A"}, {"artistic style", "B"}, {"genre", "C"}, {"medium", "D"}});
  // survivors ~ Binomial(4, 1/2), with 0 folded into 1
  const std::map<int, double> expected{{1, 5.0 / 16}, {2, 6.0 / 16}, {3, 4.0 / 16}, {4, 1.0 / 16}};
  std::map<int, std::int64_t> hist;
  bool order_ok = true;
  Rng drop_rng(77);
  for (std::int64_t i = 0; i < kDraws; ++i) {
    const auto kept = drop_style_keywords(style, drop_rng, 0.5);
    ++hist[static_cast<int>(kept.keywords.size())];
    std::size_t cursor = 0;
    for (const auto& kw : kept.keywords) {
      while (cursor < style.keywords.size() && style.keywords[cursor] != kw) ++cursor;
      order_ok = order_ok && cursor < style.keywords.size();
    }
  }
  bool hist_ok = hist.count(0) == 0;
  for (const auto& [k, p] : expected) hist_ok = hist_ok && within_3_sigma(hist[k], kDraws, p);

  Outcome out;
  out.pass = swaps_ok && hist_ok && order_ok;
  out.detail = "text fractions style " + fmt("%.4f", style_text / double(kDraws)) + ", content " +
               fmt("%.4f", content_text / double(kDraws)) + "; survivors 1..4 = " + std::to_string(hist[1]) + "/" +
               std::to_string(hist[2]) + "/" + std::to_string(hist[3]) + "/" + std::to_string(hist[4]);
  return out;
}

// ---------------------------------------------------------------------------
// 8. Metric plumbing

class ScriptedEmbedder final : public EmbedderInterface {
 public:
  std::vector<double> embed_image(const Image& image) override {
    switch (image.pixels[0]) {
      case 128: return {1.0, 0.0, 0.0};
      case 0: return {0.0, 1.0, 0.0};
      case 255: return {0.6, 0.8, 0.0};
      default: throw std::runtime_error("unexpected image");
    }
  }
  std::vector<double> embed_text(const std::string& text) override {
    static const std::map<std::string, std::vector<double>> table{
        {"a cat", {1.0, 0.0, 0.0}},
        {"a dog", {0.6, 0.8, 0.0}},
        {"a bird", {0.0, 0.0, 1.0}},
        {"the painter is Claude Monet, the theme is landscape", {0.0, 1.0, 0.0}},
        {"the painter is Johannes Vermeer, the theme is unknown", {0.8, 0.6, 0.0}},
    };
    auto it = table.find(text);
    if (it == table.end()) throw std::runtime_error("unexpected text: " + text);
    return it->second;
  }
};

Image pattern_image(int kind) {
  Image img{4, 4, 3, std::vector<std::uint8_t>(48)};
  for (int y = 0; y < 4; ++y) {
    for (int x = 0; x < 4; ++x) {
      std::uint8_t v = 128;
      if (kind == 1) v = (x + y) % 2 == 0 ? 0 : 255;
      if (kind == 2) v = x % 2 == 0 ? 255 : 0;
      for (int c = 0; c < 3; ++c) img.pixels[static_cast<std::size_t>((y * 4 + x) * 3 + c)] = v;
    }
  }
  return img;
}

Outcome metric_plumbing() {
  testing::TempDir tmp("acceptance-metrics");
  write_png(tmp / "a.png", pattern_image(0));
  write_png(tmp / "b.png", pattern_image(1));
  write_png(tmp / "c.png", pattern_image(2));
  write_png(tmp / "extra.png", pattern_image(0));
  const auto monet = make_style_text({{"artist", "Claude Monet"}, {"genre", "landscape"}});
  const auto vermeer = make_style_text({{"artist", "Johannes Vermeer"}, {"medium", "oil"}});
  const std::vector<PromptEntry> prompts{
      {"a", "a cat", monet}, {"b", "a dog", monet}, {"c", "a bird", vermeer}, {"ghost", "a cat", monet}};
  ScriptedEmbedder embedder;
  ContrastQualityStub quality;
  const auto report = evaluate_run(tmp.path(), prompts, embedder, quality, "ckpt-1", "prompts-1");

  // hand-computed: SS = (0, 1, 0.96), TA = (1, 0.8, 0), IQ = (0, 1, 0.5)
  const std::vector<MetricRow> want{{"a", 0.0, 1.0, 0.0}, {"b", 1.0, 0.8, 1.0}, {"c", 0.96, 0.0, 0.5}};
  double err = 0.0;
  bool shape_ok = report.rows.size() == want.size();
  for (std::size_t i = 0; shape_ok && i < want.size(); ++i) {
    shape_ok = report.rows[i].stem == want[i].stem;
    err = std::max({err, std::abs(report.rows[i].ss - want[i].ss), std::abs(report.rows[i].ta - want[i].ta),
                    std::abs(report.rows[i].iq - want[i].iq)});
  }
  err = std::max({err, std::abs(report.ss.mean - 0.6533333333333333), std::abs(report.ss.stddev - 0.4622649552895924),
                  std::abs(report.ta.mean - 0.6), std::abs(report.ta.stddev - 0.4320493798938573),
                  std::abs(report.iq.mean - 0.5), std::abs(report.iq.stddev - 0.4082482904638630)});
  const auto json = report.to_json();
  err = std::max(err, std::abs(json["aggregates"]["ss"]["mean"].get<double>() - 0.6533333333333333));
  const std::vector<std::string> want_unmatched{"extra.png", "prompt:ghost"};
  const bool unmatched_ok = report.unmatched == want_unmatched;

  const auto rendered = render_style_prompt(make_style_text({{"artist", "Vincent van Gogh"}, {"genre", "portrait"}}));
  const bool template_ok = rendered == "the painter is Vincent van Gogh, the theme is portrait";

  Outcome out;
  out.pass = shape_ok && err <= 1e-6 && unmatched_ok && template_ok;
  out.detail = "max |err| " + fmt("%.2e", err) + " over 3 rows + aggregates, unmatched " +
               std::to_string(report.unmatched.size()) + ", template \"" + rendered + "\"";
  return out;
}

struct Criterion {
  int id;
  const char* name;
  double budget_seconds;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  at::set_num_threads(1);
  const std::vector<Criterion> criteria{
      {1, "loss-oracle equivalence", 10, loss_oracles},
      {2, "gradient fidelity", 120, gradient_fidelity},
      {3, "style-routing invariant", 30, style_routing},
      {4, "sampler contracts", 10, sampler_contracts},
      {5, "end-to-end toy disentanglement", 1800, toy_disentanglement},
      {6, "dataset pipeline", 5, dataset_pipeline},
      {7, "statistical contracts", 10, statistical_contracts},
      {8, "metric plumbing", 5, metric_plumbing},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  int failures = 0;
  for (const auto& c : criteria) {
    if (!selected.empty() && !selected.contains(c.id)) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome outcome;
    try {
      outcome = c.run();
    } catch (const std::exception& e) {
      outcome = {false, std::string("exception: ") + e.what()};
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_budget = seconds <= c.budget_seconds;
    const bool pass = outcome.pass && in_budget;
    failures += pass ? 0 : 1;
    std::cout << (pass ? "PASS" : "FAIL") << " [" << c.id << "] " << c.name << ": " << outcome.detail << " ("
              << fmt("%.1f", seconds) << " s, budget " << fmt("%.0f", c.budget_seconds) << " s"
              << (in_budget ? "" : ", OVER BUDGET") << ")" << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
