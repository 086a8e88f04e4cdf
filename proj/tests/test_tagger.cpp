// Copyright 2026 The seqal Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.


#include <catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "seqal/tagger.hpp"

using namespace seqal;
using Catch::Approx;

namespace {

TaggerConfig small_config() {
  TaggerConfig c;
  c.embed_dim = 3;
  c.hidden_dim = 4;
  c.num_labels = 3;
  c.vocab_size = 6;
  c.dropout_rate = 0.3;
  return c;
}

// Larger init than the default so gradients are not vanishingly small.
TaggerParams random_params(const TaggerConfig& c, std::uint64_t seed) {
  auto p = TaggerParams::zeros(c);
  Rng rng(seed);
  std::uniform_real_distribution<double> u(-0.8, 0.8);
  for (auto view : p.flat_views())
    for (auto& x : view) x = u(rng);
  return p;
}

}  // namespace

TEST_CASE("analytic gradient matches central differences", "[tagger][gradient]") {
  const auto cfg = small_config();
  const std::vector<int> tokens{1, 4, 0, 5, 2};
  const std::vector<int> labels{0, 2, 1, 1, 0};
  for (auto dropout : {DropoutMode::off(), DropoutMode::on(17)}) {
    const auto params = random_params(cfg, 99);
    const auto [loss, grad] = loss_and_gradient(params, tokens, labels, dropout);
    CHECK(loss == Approx(loss_nll(forward(params, tokens, dropout), labels)).epsilon(1e-12));

    constexpr double h = 1e-5;
    auto probe = params;
    const auto views = probe.flat_views();
    const auto g = grad.flat_views();
    int checked = 0;
    for (std::size_t k = 0; k < views.size(); ++k) {
      for (std::size_t i = 0; i < views[k].size(); ++i) {
        const double saved = views[k][i];
        views[k][i] = saved + h;
        const double up = loss_nll(forward(probe, tokens, dropout), labels);
        views[k][i] = saved - h;
        const double down = loss_nll(forward(probe, tokens, dropout), labels);
        views[k][i] = saved;
        const double numeric = (up - down) / (2 * h);
        const double analytic = g[k][i];
        const double scale = std::max(std::abs(numeric), std::abs(analytic));
        INFO("tensor " << k << " index " << i << " analytic " << analytic << " numeric " << numeric);
        if (scale < 1e-7) {
          CHECK(std::abs(numeric - analytic) < 1e-7);
        } else {
          CHECK(std::abs(numeric - analytic) / scale < 1e-4);
        }
        ++checked;
      }
    }
    CHECK(checked == static_cast<int>(params.flatten().size()));
  }
}

TEST_CASE("output rows are distributions", "[tagger][property]") {
  TaggerConfig cfg = small_config();
  cfg.num_labels = 5;
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 30; ++trial) {
    const auto params = random_params(cfg, trial);
    std::vector<int> tokens(1 + rng() % 15);
    for (auto& t : tokens) t = static_cast<int>(rng() % cfg.vocab_size);
    for (auto mode : {DropoutMode::off(), DropoutMode::on(trial)}) {
      const auto out = forward(params, tokens, mode);
      REQUIRE(out.probs.rows() == static_cast<Eigen::Index>(tokens.size()));
      REQUIRE(out.probs.cols() == cfg.num_labels);
      CHECK(out.hiddens.cols() == cfg.penultimate_dim());
      for (Eigen::Index t = 0; t < out.probs.rows(); ++t) {
        CHECK(std::abs(out.probs.row(t).sum() - 1.0) < 1e-9);
        CHECK(out.probs.row(t).minCoeff() > 0.0);
      }
    }
  }
}

TEST_CASE("zero parameters give uniform output and known loss", "[tagger]") {
  TaggerConfig cfg = small_config();
  cfg.num_labels = 4;
  const auto params = TaggerParams::zeros(cfg);
  const std::vector<int> tokens{1, 2, 3};
  const auto out = forward(params, tokens);
  for (Eigen::Index t = 0; t < 3; ++t)
    for (Eigen::Index k = 0; k < 4; ++k) CHECK(out.probs(t, k) == Approx(0.25).margin(1e-15));
  CHECK(loss_nll(out, std::vector<int>{0, 1, 3}) == Approx(3 * std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("dropout rate zero is the identity", "[tagger]") {
  TaggerConfig cfg = small_config();
  cfg.dropout_rate = 0.0;
  const auto params = random_params(cfg, 1);
  const std::vector<int> tokens{0, 1, 2, 3};
  CHECK(forward(params, tokens, DropoutMode::on(5)).probs == forward(params, tokens).probs);
  const auto passes = mc_forward(params, tokens, 10, 3);
  for (const auto& p : passes) CHECK(p == predict(params, tokens));
}

TEST_CASE("dropout is seeded", "[tagger]") {
  const auto cfg = small_config();
  const auto params = random_params(cfg, 2);
  const std::vector<int> tokens{0, 1, 2, 3, 4, 5};
  CHECK(forward(params, tokens, DropoutMode::on(8)).probs ==
        forward(params, tokens, DropoutMode::on(8)).probs);
  CHECK(forward(params, tokens, DropoutMode::on(8)).probs !=
        forward(params, tokens, DropoutMode::on(9)).probs);
}

TEST_CASE("mc_forward", "[tagger][mc]") {
  const auto cfg = small_config();
  const auto params = random_params(cfg, 3);
  const std::vector<int> tokens{5, 4, 3, 2, 1};
  const auto a = mc_forward(params, tokens, 20, 7);
  CHECK(a.size() == 20);
  CHECK(a == mc_forward(params, tokens, 20, 7));
  CHECK(a[0] == argmax_rows(forward(params, tokens, DropoutMode::on(7)).probs));
  // A shorter run is a prefix of a longer one.
  const auto b = mc_forward(params, tokens, 5, 7);
  CHECK(std::equal(b.begin(), b.end(), a.begin()));
  CHECK_THROWS_AS(mc_forward(params, tokens, 0, 7), InvalidArgument);
}

TEST_CASE("argmax ties go to the lowest index", "[tagger]") {
  Eigen::MatrixXd p(2, 3);
  p << 0.4, 0.4, 0.2, 0.1, 0.45, 0.45;
  CHECK(argmax_rows(p) == LabelIds{0, 1});
}

TEST_CASE("input validation", "[tagger]") {
  const auto cfg = small_config();
  const auto params = TaggerParams::zeros(cfg);
  CHECK_THROWS_AS(forward(params, std::vector<int>{}), InvalidArgument);
  CHECK_THROWS_AS(forward(params, std::vector<int>{cfg.vocab_size}), InvalidArgument);
  CHECK_THROWS_AS(loss_and_gradient(params, std::vector<int>{1, 2}, std::vector<int>{0}), InvalidArgument);
  TaggerConfig bad = cfg;
  bad.dropout_rate = 1.0;
  CHECK_THROWS_AS(bad.validate(), InvalidArgument);
  bad = cfg;
  bad.hidden_dim = 0;
  CHECK_THROWS_AS(bad.validate(), InvalidArgument);
  CHECK_THROWS_AS(train(cfg, std::span<const EncodedSequence>{}, 0), InvalidArgument);
}

TEST_CASE("init_params", "[tagger]") {
  const auto cfg = small_config();
  const auto p = init_params(cfg, 11);
  CHECK(p == init_params(cfg, 11));
  CHECK_FALSE(p == init_params(cfg, 12));
  CHECK(p.output_bias.isZero());
  CHECK(p.forward_cell.bias.isZero());
  CHECK(p.embeddings.cwiseAbs().maxCoeff() <= 0.1);
}

TEST_CASE("training memorises a tiny set and is deterministic", "[tagger][train]") {
  TaggerConfig cfg = small_config();
  cfg.embed_dim = 8;
  cfg.hidden_dim = 8;
  cfg.learning_rate = 0.05;
  cfg.epochs = 60;
  cfg.batch_size = 2;
  cfg.dropout_rate = 0.1;
  const std::vector<EncodedSequence> data{
      {0, {1, 2, 3}, {0, 1, 2}}, {1, {3, 2, 1}, {2, 1, 0}}, {2, {4, 5}, {1, 1}}, {3, {0, 4}, {0, 2}}};
  int epochs_seen = 0;
  const auto p = train(cfg, data, 21, [&](int epoch, const TaggerParams&) { epochs_seen = epoch; });
  CHECK(epochs_seen == cfg.epochs);
  for (const auto& s : data) CHECK(predict(p, s.tokens) == s.labels);
  CHECK(p == train(cfg, data, 21));
  CHECK_FALSE(p == train(cfg, data, 22));
}

TEST_CASE("checkpoint round trip", "[tagger][json]") {
  const auto cfg = small_config();
  const auto p = random_params(cfg, 5);
  const auto text = params_to_json(p).dump();
  const auto back = params_from_json(nlohmann::json::parse(text));
  CHECK(back == p);
  const std::vector<int> tokens{1, 2, 3};
  CHECK(forward(back, tokens).probs == forward(p, tokens).probs);

  auto j = params_to_json(p);
  j["version"] = 99;
  CHECK_THROWS_AS(params_from_json(j), ParseError);
  j = params_to_json(p);
  j["tensors"]["output.bias"]["data"].erase(0);
  CHECK_THROWS(params_from_json(j));
}

TEST_CASE("training loss on a single sentence never rises above the first epoch", "[tagger][train]") {
  TaggerConfig cfg = small_config();
  cfg.epochs = 40;
  cfg.learning_rate = 0.01;
  const std::vector<EncodedSequence> one{{0, {1, 2, 3, 4}, {0, 1, 2, 1}}};
  std::vector<double> losses;
  train(cfg, one, 3, [&](int, const TaggerParams& p) {
    losses.push_back(loss_nll(forward(p, one[0].tokens), one[0].labels));
  });
  REQUIRE(losses.size() == 40);
  for (double l : losses) CHECK(l <= losses.front());
  CHECK(losses.back() < 0.5 * losses.front());
}
