#include <cmath>
#include <map>

#include <doctest.h>
#include <torch/torch.h>

#include "csdiff/losses.hpp"
#include "csdiff/model.hpp"
#include "test_support.hpp"

using namespace csdiff;

TEST_CASE("itc matches the two-sample hand value") {
  auto eye = torch::eye(2, torch::kFloat64);
  CHECK(itc_loss(eye, eye, 1.0).item<double>() == doctest::Approx(2.0 * std::log(1.0 + std::exp(-1.0))).epsilon(1e-12));
  CHECK(itc_loss(eye, eye, 1.0).item<double>() == doctest::Approx(0.62652).epsilon(1e-5));
}

TEST_CASE("itc properties: symmetric, scale-invariant, temperature-sharpened") {
  torch::manual_seed(0);
  auto a = torch::randn({4, 6}, torch::kFloat64), b = torch::randn({4, 6}, torch::kFloat64);
  const double base = itc_loss(a, b, 0.3).item<double>();
  CHECK(itc_loss(b, a, 0.3).item<double>() == doctest::Approx(base).epsilon(1e-12));
  CHECK(itc_loss(a * 5.0, b * 0.1, 0.3).item<double>() == doctest::Approx(base).epsilon(1e-12));

  // permuting the batch jointly leaves the loss unchanged
  auto perm = torch::tensor({2, 0, 3, 1});
  CHECK(itc_loss(a.index({perm}), b.index({perm}), 0.3).item<double>() == doctest::Approx(base).epsilon(1e-12));

  // perfectly aligned orthogonal rows: lower temperature means lower loss
  auto eye = torch::eye(3, torch::kFloat64);
  CHECK(itc_loss(eye, eye, 0.1).item<double>() < itc_loss(eye, eye, 1.0).item<double>());

  CHECK_THROWS_AS(itc_loss(a.slice(0, 0, 1), b.slice(0, 0, 1), 1.0), InvalidArgument);
  CHECK_THROWS_AS(itc_loss(a, b, 0.0), InvalidArgument);
  CHECK_THROWS_AS(itc_loss(a, b.slice(0, 0, 3), 1.0), InvalidArgument);
  auto zero_row = a.clone();
  zero_row[0].zero_();
  CHECK_THROWS_AS(itc_loss(zero_row, b, 1.0), InvalidArgument);
}

TEST_CASE("derangements have no fixed points and are uniform for n = 3") {
  Rng rng(5);
  std::map<std::vector<std::int64_t>, int> counts;
  for (int i = 0; i < 4000; ++i) {
    auto p = random_derangement(3, rng);
    for (std::int64_t k = 0; k < 3; ++k) CHECK(p[static_cast<std::size_t>(k)] != k);
    ++counts[p];
  }
  REQUIRE(counts.size() == 2);
  for (const auto& [perm, n] : counts) CHECK(std::abs(n - 2000) < 3 * std::sqrt(1000.0));
  CHECK_THROWS_AS(random_derangement(1, rng), InvalidArgument);
}

TEST_CASE("itm pairs and loss") {
  torch::manual_seed(1);
  auto img = torch::randn({3, 4}, torch::kFloat64), txt = torch::randn({3, 4}, torch::kFloat64);
  Rng rng(2);
  auto pairs = sample_itm_pairs(img, txt, rng);
  CHECK(pairs.size() == 6);
  CHECK(pairs.labels.sum().item<std::int64_t>() == 3);

  ItmHead head;
  head->to(torch::kFloat64);
  {
    torch::NoGradGuard guard;
    head->weight.fill_(2.0);
    head->bias.fill_(-0.5);
  }
  // one matched pair, hand-computed: p = sigmoid(2·1 − 0.5)
  MatchPairs one{img.slice(0, 0, 1), img.slice(0, 0, 1), torch::ones({1}, torch::kInt64)};
  CHECK(itm_loss(one, head).item<double>() == doctest::Approx(-std::log(1.0 / (1.0 + std::exp(-1.5)))).epsilon(1e-12));
  auto prob = head->probability(img, txt);
  CHECK((prob > 0).all().item<bool>());
  CHECK((prob < 1).all().item<bool>());
}

TEST_CASE("prefix decoder is causal over tokens and sees the whole prefix") {
  torch::manual_seed(3);
  ItgDecoder decoder(8, 2, 2, kVocabSize);
  auto prefix = torch::randn({1, 3, 8});
  auto tokens = torch::randn({1, 5, 8});
  auto base = decoder(prefix, tokens);
  CHECK(base.sizes() == torch::IntArrayRef({1, 5, kVocabSize}));

  auto later = tokens.clone();
  later[0][3] += torch::randn({8});
  auto changed = decoder(prefix, later);
  CHECK(torch::equal(changed.slice(1, 0, 3), base.slice(1, 0, 3)));
  CHECK_FALSE(torch::allclose(changed.slice(1, 3), base.slice(1, 3)));

  auto other_prefix = prefix.clone();
  other_prefix[0][2] += torch::randn({8});
  CHECK_FALSE(torch::allclose(decoder(other_prefix, tokens).slice(1, 0, 1), base.slice(1, 0, 1)));

  auto mask = ItgDecoderImpl::causal_prefix_mask(2, 3);
  auto expected = torch::tensor({{1, 1, 0, 0, 0},
                                 {1, 1, 0, 0, 0},
                                 {1, 1, 1, 0, 0},
                                 {1, 1, 1, 1, 0},
                                 {1, 1, 1, 1, 1}}).to(torch::kBool);
  CHECK(torch::equal(mask, expected));
}

TEST_CASE("itg cross-entropy skips PAD targets") {
  Tokenizer tok(8);
  auto batch = tok.batch({"ab", "abcd"});
  const auto m = batch.max_length();
  auto logits = torch::zeros({2, m, kVocabSize}, torch::kFloat64);
  auto loss = itg_cross_entropy(logits, batch);
  // uniform logits: each real target costs log V; "ab" has 3 targets, "abcd" has 5
  const double log_v = std::log(static_cast<double>(kVocabSize));
  CHECK(loss.sum.item<double>() == doctest::Approx((3 + 5) * log_v / 2.0).epsilon(1e-12));
  CHECK(loss.per_token_mean.item<double>() == doctest::Approx(log_v).epsilon(1e-12));

  // logits at positions whose target is PAD do not matter
  auto noisy = logits.clone();
  noisy[0].slice(0, 3).normal_();
  CHECK(itg_cross_entropy(noisy, batch).sum.item<double>() == doctest::Approx(loss.sum.item<double>()).epsilon(1e-12));
  CHECK_THROWS_AS(itg_cross_entropy(logits.slice(1, 0, 2), batch), InvalidArgument);
}

TEST_CASE("disentangle loss is the sum of its six terms") {
  auto model = testing::make_tiny_model(7);
  const auto& cfg = model->config();
  auto data = testing::make_small_dataset(cfg, 1, 1);
  auto tok = model->tokenizer();
  DisentangleInputs inputs{data.images, tok.batch({"a", "b", "c", "d"}), tok.batch({"left", "left", "top", "top"})};
  Rng rng(1);
  auto out = disentangle_loss(model->disentangle_modules(), inputs, cfg.temperature, rng);
  const double s = out.itc_style.item<double>() + out.itm_style.item<double>() + out.itg_style.item<double>();
  const double c =
      out.itc_content.item<double>() + out.itm_content.item<double>() + out.itg_content.item<double>();
  CHECK(out.style.item<double>() == doctest::Approx(s));
  CHECK(out.content.item<double>() == doctest::Approx(c));
  CHECK(out.total.item<double>() == doctest::Approx(s + c));
  auto j = out.to_json();
  for (const char* key : {"L", "L_s", "L_c", "itc_s", "itm_s", "itg_s", "itc_c", "itm_c", "itg_c"}) {
    CHECK(j.contains(key));
  }

  Rng same(1);
  CHECK(disentangle_loss(model->disentangle_modules(), inputs, cfg.temperature, same).total.item<double>() ==
        out.total.item<double>());

  DisentangleInputs single{data.images.slice(0, 0, 1), tok.batch({"a"}), tok.batch({"b"})};
  CHECK_THROWS_AS(disentangle_loss(model->disentangle_modules(), single, cfg.temperature, rng), InvalidArgument);
}

TEST_CASE("greedy decode stays within the length budget") {
  auto model = testing::make_tiny_model(8);
  torch::NoGradGuard guard;
  auto prefix = torch::randn({1, model->config().content_queries, model->config().query_dim});
  auto text = greedy_decode(model->itg, model->encoders->tokens, model->tokenizer(), prefix);
  CHECK(static_cast<std::int64_t>(text.size()) <= model->config().max_text_len - 1);
}
