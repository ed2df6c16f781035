#include "support/doctest.hpp"

#include "querypose/errors.hpp"
#include "querypose/keypoint_decoder.hpp"
#include "support/oracles.hpp"

using namespace querypose;

namespace {

ModelConfig tiny_config() {
  ModelConfig c = ModelConfig::desk();
  c.hidden_dim = 16;
  c.spegm_channels = 8;
  c.part_dim = 8;
  c.part_heads = 2;
  return c;
}

torch::Tensor random_boxes(int batch, int n, double size) {
  auto a = torch::rand({batch, n, 2}) * size * 0.5;
  auto wh = torch::rand({batch, n, 2}) * size * 0.4 + 4.0;
  return torch::cat({a, a + wh}, -1);
}

}  // namespace

TEST_SUITE("keypoint_decoder") {
  TEST_CASE("uniform attention pools the spatial mean") {
    torch::nn::Linear proj(6, 4);
    auto features = torch::randn({2, 6, 28, 28});
    auto out = pool_part_embeddings(torch::zeros({2, 3, 28, 28}), features, proj);
    CHECK(torch::allclose(out.attention, torch::full_like(out.attention, 1.0 / (28 * 28))));
    auto expected = proj->forward(features.mean({2, 3})).unsqueeze(1).expand({2, 3, 4});
    CHECK(torch::allclose(out.embeddings, expected, 1e-5, 1e-6));
  }

  TEST_CASE("a saturated logit selects one feature vector") {
    torch::nn::Linear proj(6, 4);
    auto features = torch::randn({1, 6, 28, 28}, torch::kFloat64);
    proj->to(torch::kFloat64);
    auto logits = torch::zeros({1, 2, 28, 28}, torch::kFloat64);
    logits[0][0][5][17] = 100.0;
    logits[0][1][27][0] = 100.0;
    auto out = pool_part_embeddings(logits, features, proj);
    auto f0 = features.index({0, torch::indexing::Slice(), 5, 17});
    auto f1 = features.index({0, torch::indexing::Slice(), 27, 0});
    CHECK(torch::allclose(out.embeddings[0][0], proj->forward(f0), 1e-9, 1e-9));
    CHECK(torch::allclose(out.embeddings[0][1], proj->forward(f1), 1e-9, 1e-9));
  }

  TEST_CASE("spegm maps are probability distributions at twice the roi resolution") {
    Spegm spegm(16, 8, 7, 8);
    {
      torch::NoGradGuard guard;
      spegm->attention_conv()->weight.normal_(0.0, 1.0);
    }
    for (int t = 0; t < 5; ++t) {
      auto out = spegm->forward(torch::randn({3, 16, 14, 14}) * 2);
      CHECK(out.attention.sizes() == torch::IntArrayRef({3, 7, 28, 28}));
      CHECK(out.embeddings.sizes() == torch::IntArrayRef({3, 7, 8}));
      CHECK((out.attention.sum({2, 3}) - 1).abs().max().item<double>() < 1e-6);
      CHECK(out.attention.min().item<double>() >= 0.0);
    }
  }

  TEST_CASE("spegm rejects bad shapes") {
    CHECK_THROWS_AS(Spegm(8, 8, 0, 8), ConfigError);
    Spegm spegm(8, 8, 3, 8);
    CHECK_THROWS_AS(spegm->forward(torch::randn({1, 4, 14, 14})), ShapeError);
    torch::nn::Linear proj(4, 2);
    CHECK_THROWS_AS(pool_part_embeddings(torch::zeros({1, 2, 7, 7}), torch::zeros({1, 4, 8, 8}), proj), ShapeError);
  }

  TEST_CASE("spegm gradients match finite differences") {
    torch::manual_seed(61);
    Spegm spegm(2, 2, 2, 3);
    spegm->to(torch::kFloat64);
    {
      torch::NoGradGuard guard;
      spegm->attention_conv()->weight.normal_(0.0, 0.5);
      // Nonzero biases keep ReLU inputs away from the kink at exactly zero.
      for (auto& p : spegm->named_parameters()) {
        if (p.key().find("bias") != std::string::npos) p.value().uniform_(0.05, 0.3);
      }
    }
    auto r = testing::gradcheck([&](const std::vector<torch::Tensor>& in) { return spegm->forward(in[0]).embeddings; },
                                {torch::randn({2, 2, 4, 4}, torch::kFloat64)});
    CHECK(r.relative_error < 1e-4);
    auto rois = torch::randn({2, 2, 4, 4}, torch::kFloat64);
    auto p = testing::gradcheck_parameters(*spegm, [&] { return spegm->forward(rois).embeddings; });
    CHECK(p.relative_error < 1e-4);
  }

  TEST_CASE("zero-initialized gates average the inputs") {
    SelectiveIteration sim(8);
    auto q = torch::randn({3, 7, 8});
    auto e = torch::randn({3, 7, 8});
    auto out = sim->forward(q, e);
    CHECK(torch::allclose(out.embedding_gate, torch::full_like(out.embedding_gate, 0.5)));
    CHECK(torch::allclose(out.query_gate, torch::full_like(out.query_gate, 0.5)));
    CHECK(torch::allclose(out.queries, 0.5 * (q + e), 1e-6, 1e-6));
  }

  TEST_CASE("saturated gates replace the previous queries") {
    SelectiveIteration sim(4);
    sim->to(torch::kFloat64);
    {
      torch::NoGradGuard guard;
      sim->gate_output()->bias.narrow(0, 0, 4).fill_(60.0);
      sim->gate_output()->bias.narrow(0, 4, 4).fill_(-60.0);
    }
    auto q = torch::randn({2, 3, 4}, torch::kFloat64);
    auto e = torch::randn({2, 3, 4}, torch::kFloat64);
    CHECK(torch::allclose(sim->forward(q, e).queries, e, 0, 1e-20));
  }

  TEST_CASE("gates stay strictly inside the unit interval") {
    SelectiveIteration sim(8);
    {
      torch::NoGradGuard guard;
      sim->gate_output()->weight.normal_(0.0, 1.0);
    }
    for (int t = 0; t < 10; ++t) {
      auto out = sim->forward(torch::randn({4, 7, 8}), torch::randn({4, 7, 8}));
      CHECK(out.embedding_gate.min().item<double>() > 0.0);
      CHECK(out.embedding_gate.max().item<double>() < 1.0);
      CHECK(out.query_gate.min().item<double>() > 0.0);
      CHECK(out.query_gate.max().item<double>() < 1.0);
    }
    CHECK_THROWS_AS(sim->forward(torch::randn({1, 7, 8}), torch::randn({1, 6, 8})), ShapeError);
  }

  TEST_CASE("selective iteration gradients match finite differences") {
    torch::manual_seed(62);
    SelectiveIteration sim(4);
    sim->to(torch::kFloat64);
    {
      torch::NoGradGuard guard;
      sim->gate_output()->weight.normal_(0.0, 0.7);
    }
    auto r = testing::gradcheck([&](const std::vector<torch::Tensor>& in) { return sim->forward(in[0], in[1]).queries; },
                                {torch::randn({2, 3, 4}, torch::kFloat64), torch::randn({2, 3, 4}, torch::kFloat64)});
    CHECK(r.relative_error < 1e-4);
    auto q = torch::randn({2, 3, 4}, torch::kFloat64);
    auto e = torch::randn({2, 3, 4}, torch::kFloat64);
    auto p = testing::gradcheck_parameters(*sim, [&] { return sim->forward(q, e).queries; });
    CHECK(p.relative_error < 1e-4);
  }

  TEST_CASE("head sizes follow the part division") {
    KeypointHeads heads(part_division('c'), 8);
    CHECK(heads->head(0)->weight.size(0) == 5 * 2 * 2);
    CHECK(heads->head(1)->weight.size(0) == 2 * 2 * 2);
    auto out = heads->forward(torch::zeros({3, 7, 8}));
    CHECK(out.mean.sizes() == torch::IntArrayRef({3, 17, 2}));
    CHECK(torch::allclose(out.mean, torch::zeros_like(out.mean)));
    CHECK(torch::allclose(out.scale, torch::full_like(out.scale, 0.5)));
    CHECK_THROWS_AS(heads->forward(torch::zeros({3, 5, 8})), ConfigError);
  }

  TEST_CASE("relabeling parts leaves the assembled pose unchanged") {
    auto base = part_division('d');
    KeypointHeads a(base, 6);
    const std::vector<int> order = {3, 0, 4, 2, 1};
    std::vector<std::vector<int>> permuted;
    for (int m : order) permuted.push_back(base.parts[m]);
    KeypointHeads b(custom_part_division(permuted, 17), 6);
    {
      torch::NoGradGuard guard;
      for (int i = 0; i < 5; ++i) {
        b->head(i)->weight.copy_(a->head(order[i])->weight);
        b->head(i)->bias.copy_(a->head(order[i])->bias);
      }
    }
    auto q = torch::randn({2, 5, 6});
    auto idx = torch::tensor(std::vector<int64_t>(order.begin(), order.end()), torch::kLong);
    auto pa = a->forward(q);
    auto pb = b->forward(q.index_select(1, idx));
    CHECK(torch::allclose(pa.mean, pb.mean));
    CHECK(torch::allclose(pa.scale, pb.scale));
  }

  TEST_CASE("a single-instance stage produces a finite pose") {
    auto config = tiny_config();
    KeypointStage stage(config);
    auto out = stage->forward(torch::randn({1, 16, 16, 16}), random_boxes(1, 1, 64), torch::randn({1, 1, 7, 8}),
                              torch::randn({1, 1, 16}));
    CHECK(out.pose.mean.sizes() == torch::IntArrayRef({1, 1, 17, 2}));
    CHECK(out.pose.scale.sizes() == torch::IntArrayRef({1, 1, 17, 2}));
    CHECK(torch::isfinite(out.pose.mean).all().item<bool>());
    CHECK(out.pose.scale.min().item<double>() > 0.0);
    CHECK(out.attention.sizes() == torch::IntArrayRef({1, 1, 7, 28, 28}));
    CHECK(out.instance_queries.sizes() == torch::IntArrayRef({1, 1, 16}));
    CHECK(out.gates.has_value());
  }

  TEST_CASE("instances never influence each other") {
    auto config = tiny_config();
    KeypointStage stage(config);
    auto p2 = torch::randn({1, 16, 16, 16});
    auto boxes = random_boxes(1, 3, 64);
    auto parts = torch::randn({1, 3, 7, 8});
    auto inst = torch::randn({1, 3, 16});
    auto a = stage->forward(p2, boxes, parts, inst);
    auto parts2 = parts.clone();
    parts2[0][1] = torch::randn({7, 8}) * 5;
    auto inst2 = inst.clone();
    inst2[0][1] = 0.0;
    auto boxes2 = boxes.clone();
    boxes2[0][1] = torch::tensor({1.0, 1.0, 60.0, 60.0});
    auto b = stage->forward(p2, boxes2, parts2, inst2);
    for (int i : {0, 2}) {
      CHECK(torch::allclose(a.pose.mean[0][i], b.pose.mean[0][i], 1e-5, 1e-6));
      CHECK(torch::allclose(a.instance_queries[0][i], b.instance_queries[0][i], 1e-5, 1e-6));
    }
    CHECK_FALSE(torch::allclose(a.pose.mean[0][1], b.pose.mean[0][1]));
  }

  TEST_CASE("without selective iteration the fresh embeddings are used") {
    auto config = tiny_config();
    config.part_iteration = PartIteration::kNone;
    config.iteration = IterationMode::kBoxOnly;
    KeypointStage stage(config);
    CHECK_FALSE(stage->has_selective_iteration());
    auto p2 = torch::randn({1, 16, 16, 16});
    auto boxes = random_boxes(1, 2, 64);
    auto a = stage->forward(p2, boxes, torch::randn({1, 2, 7, 8}), torch::randn({1, 2, 16}));
    auto b = stage->forward(p2, boxes, torch::randn({1, 2, 7, 8}), torch::randn({1, 2, 16}));
    CHECK(torch::allclose(a.pose.mean, b.pose.mean));
    CHECK_FALSE(a.gates.has_value());
    CHECK_FALSE(a.instance_queries.defined());
  }

  TEST_CASE("part self-attention normalizes rows and keeps instances apart") {
    auto config = tiny_config();
    KeypointStage stage(config);
    auto out = stage->forward(torch::randn({2, 16, 16, 16}), random_boxes(2, 3, 64), torch::randn({2, 3, 7, 8}),
                              torch::randn({2, 3, 16}));
    CHECK(out.part_attention.sizes() == torch::IntArrayRef({6, 2, 7, 7}));
    CHECK((out.part_attention.sum(-1) - 1).abs().max().item<double>() < 1e-6);
    SelfAttentionBlock single(8, 2);
    auto w = single->forward(torch::randn({4, 1, 8})).weights;
    CHECK(torch::allclose(w, torch::ones_like(w)));
  }
}
