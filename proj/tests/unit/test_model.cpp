// Copyright 2026 The lifelong-moe Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "lmoe/common/error.hpp"
#include "lmoe/model/checkpoint.hpp"
#include "lmoe/model/transformer.hpp"
#include "lmoe/numerics/ops.hpp"

namespace lmoe {
namespace {

namespace fs = std::filesystem;

ModelConfig tiny_config() {
  ModelConfig c;
  c.layers = 2;
  c.d_model = 16;
  c.d_hidden = 32;
  c.n_heads = 2;
  c.d_head = 8;
  c.vocab_size = 32;
  c.max_seq_len = 8;
  c.experts = 4;
  return c;
}

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("lmoe_model_" + name);
  fs::remove_all(p);
  return p;
}

TEST(ModelConfig, ValidationReportsEveryProblem) {
  ModelConfig c = tiny_config();
  c.n_heads = 3;
  c.experts = 1;
  const auto errs = c.validate();
  ASSERT_EQ(errs.size(), 2u);
  EXPECT_NE(errs[0].find("n_heads"), std::string::npos);
  EXPECT_NE(errs[1].find("experts"), std::string::npos);
  EXPECT_TRUE(tiny_config().validate().empty());
}

TEST(ModelConfig, MoeOnOddBlocksByDefault) {
  ModelConfig c = tiny_config();
  c.layers = 4;
  EXPECT_FALSE(c.is_moe_block(0));
  EXPECT_TRUE(c.is_moe_block(1));
  EXPECT_FALSE(c.is_moe_block(2));
  EXPECT_TRUE(c.is_moe_block(3));
}

TEST(GateRoute, HandExample) {
  Tensor<double> gate(Shape{4, 1}, {2.0, 1.0, 0.5, -1.0});
  const std::vector<double> x = {1.0};
  const auto d = gate_route<double>(x, gate);
  EXPECT_EQ(d.first, 0u);
  EXPECT_EQ(d.second, 1u);
  EXPECT_NEAR(d.w1, 0.7311, 1e-4);
  EXPECT_NEAR(d.w2, 0.2689, 1e-4);
  EXPECT_NEAR(d.w1, 1.0 / (1.0 + std::exp(-1.0)), 1e-12);
  double s = 0.0;
  for (double p : d.probs) s += p;
  EXPECT_NEAR(s, 1.0, 1e-12);
}

TEST(GateRoute, TiesGoToLowerIndex) {
  Tensor<float> gate(Shape{4, 2}, std::vector<float>(8, 0.3f));
  const std::vector<float> x = {1.0f, -2.0f};
  const auto d = gate_route<float>(x, gate);
  EXPECT_EQ(d.first, 0u);
  EXPECT_EQ(d.second, 1u);
  EXPECT_DOUBLE_EQ(d.w1, 0.5);
  EXPECT_DOUBLE_EQ(d.w2, 0.5);
}

TEST(GateRoute, TwoExpertsAlwaysBothSelected) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n;
  for (int i = 0; i < 50; ++i) {
    Tensor<double> gate(Shape{2, 3}, {n(rng), n(rng), n(rng), n(rng), n(rng), n(rng)});
    const std::vector<double> x = {n(rng), n(rng), n(rng)};
    const auto d = gate_route<double>(x, gate);
    EXPECT_NE(d.first, d.second);
    EXPECT_GE(d.probs[d.first], d.probs[d.second]);
  }
}

TEST(GateRoute, Errors) {
  const std::vector<double> x = {1.0};
  EXPECT_THROW(gate_route<double>(x, Tensor<double>(Shape{1, 1}, {1.0})), ShapeError);
  try {
    gate_route<double>(x, Tensor<double>(Shape{2, 1}, {NAN, 1.0}), "blocks.1.moe");
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("blocks.1.moe"), std::string::npos);
  }
}

TEST(GateRoute, Top2DominatesRest) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n;
  for (int i = 0; i < 100; ++i) {
    std::vector<double> w(7 * 4);
    for (auto& v : w) v = n(rng);
    const std::vector<double> x = {n(rng), n(rng), n(rng), n(rng)};
    const auto d = gate_route<double>(x, Tensor<double>(Shape{7, 4}, w));
    for (std::size_t j = 0; j < 7; ++j) {
      if (j == d.first || j == d.second) continue;
      EXPECT_GE(d.probs[d.second], d.probs[j]);
    }
    EXPECT_NEAR(d.w1 + d.w2, 1.0, 1e-12);
    EXPECT_NEAR(d.w1, d.probs[d.first] / (d.probs[d.first] + d.probs[d.second]), 1e-12);
  }
}

MoELayer<double> make_layer(std::size_t m, std::size_t h, std::size_t e, std::uint64_t seed = 3) {
  std::mt19937_64 rng(seed);
  return MoELayer<double>("blocks.1.moe", m, h, e, 0.5, rng);
}

Tensor<double> random_rows(std::size_t n, std::size_t m, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d;
  std::vector<double> v(n * m);
  for (auto& x : v) x = d(rng);
  return Tensor<double>(Shape{n, m}, v);
}

TEST(MoeForward, IdenticalExpertsGiveExpertOutput) {
  auto layer = make_layer(4, 6, 3);
  for (std::size_t e = 1; e < 3; ++e) {
    auto& dst = layer.expert(e);
    const auto& src = layer.expert(0);
    dst.w1.tensor().values = src.w1.tensor().values;
    dst.b1.tensor().values = src.b1.tensor().values;
    dst.w2.tensor().values = src.w2.tensor().values;
    dst.b2.tensor().values = src.b2.tensor().values;
  }
  auto x = Var<double>::constant(random_rows(5, 4, 7));
  auto out = layer.forward(x).output;
  auto ref = layer.expert(0).forward(x);
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out.values()[i], ref.values()[i], 1e-12);
}

TEST(MoeForward, ZeroExpertsGiveZero) {
  auto layer = make_layer(4, 6, 3);
  for (std::size_t e = 0; e < 3; ++e)
    for (auto* p : layer.expert(e).parameters()) std::fill(p->tensor().values.begin(), p->tensor().values.end(), 0.0);
  auto out = layer.forward(Var<double>::constant(random_rows(5, 4, 7))).output;
  for (double v : out.values()) EXPECT_EQ(v, 0.0);
}

double gelu_ref(double x) { return 0.5 * x * (1.0 + std::tanh(0.7978845608 * (x + 0.044715 * x * x * x))); }

TEST(MoeForward, ScalarHandComputation) {
  auto layer = make_layer(1, 1, 2);
  const double w1[] = {0.5, -1.5}, b1[] = {0.1, 0.2}, w2[] = {2.0, 0.7}, b2[] = {-0.3, 0.4}, g[] = {0.8, -0.4};
  for (std::size_t e = 0; e < 2; ++e) {
    auto& ex = layer.expert(e);
    ex.w1.tensor().values = {w1[e]};
    ex.b1.tensor().values = {b1[e]};
    ex.w2.tensor().values = {w2[e]};
    ex.b2.tensor().values = {b2[e]};
    layer.gate_row(e).tensor().values = {g[e]};
  }
  const double x = 1.25;
  auto out = layer.forward(Var<double>::constant(Tensor<double>(Shape{1, 1}, {x}))).output;
  // logits 1.0 and -0.5 → expert 0 first
  const double p0 = 1.0 / (1.0 + std::exp(-1.5));
  const double f0 = gelu_ref(x * w1[0] + b1[0]) * w2[0] + b2[0];
  const double f1 = gelu_ref(x * w1[1] + b1[1]) * w2[1] + b2[1];
  EXPECT_NEAR(out.values()[0], p0 * f0 + (1.0 - p0) * f1, 1e-9);
}

TEST(MoeForward, NonSelectedExpertsDoNotMatter) {
  auto layer = make_layer(4, 6, 5);
  auto x = Var<double>::constant(random_rows(1, 4, 9));
  auto first = layer.forward(x);
  const auto a = first.route.first[0], b = first.route.second[0];
  for (std::size_t e = 0; e < 5; ++e) {
    if (e == a || e == b) continue;
    for (auto* p : layer.expert(e).parameters())
      for (auto& v : p->tensor().values) v += 1.0;
  }
  EXPECT_EQ(layer.forward(x).output.values(), first.output.values());
}

TEST(MoeForward, AppendingUnreachableExpertKeepsOutput) {
  auto layer = make_layer(4, 6, 3);
  auto rows = random_rows(6, 4, 10);
  for (auto& v : rows.values) v = std::abs(v) + 0.1;
  auto x = Var<double>::constant(rows);
  const auto before = layer.forward(x).output.values();
  auto expert = FeedForward<double>::copy_of(layer.expert(0), layer.expert_prefix(3), 1);
  for (auto* p : expert.parameters())
    for (auto& v : p->tensor().values) v = 100.0;
  Parameter<double> gate(layer.gate_row_name(3), Tensor<double>(Shape{4}, std::vector<double>(4, -100.0)), 1);
  layer.append(std::move(expert), std::move(gate));
  const auto after = layer.forward(x);
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_NEAR(after.output.values()[i], before[i], 1e-12);
  EXPECT_EQ(after.load[3], 0u);
  EXPECT_EQ(layer.forward(x, 3).output.values(), after.output.values());
}

TEST(MoeForward, GateProbabilitiesSumToOne) {
  auto layer = make_layer(8, 6, 6);
  auto res = layer.forward(Var<double>::constant(random_rows(20, 8, 11)));
  for (std::size_t t = 0; t < 20; ++t) {
    double s = 0.0;
    for (std::size_t e = 0; e < 6; ++e) s += res.probs.values()[t * 6 + e];
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(LoadBalanceAux, UniformIsOne) {
  const std::size_t e = 4, n = 8;
  auto probs = Var<double>::constant(Tensor<double>(Shape{n, e}, std::vector<double>(n * e, 0.25)));
  const std::vector<std::size_t> first = {0, 1, 2, 3, 0, 1, 2, 3};
  EXPECT_NEAR(load_balance_aux(probs, first).item(), 1.0, 1e-12);
}

TEST(LoadBalanceAux, CollapsedIsE) {
  const std::size_t e = 4, n = 5;
  std::vector<double> p(n * e, 0.0);
  for (std::size_t t = 0; t < n; ++t) p[t * e] = 1.0;
  auto probs = Var<double>::constant(Tensor<double>(Shape{n, e}, p));
  const std::vector<std::size_t> first(n, 0);
  EXPECT_NEAR(load_balance_aux(probs, first).item(), 4.0, 1e-12);
}

TEST(TransformerLM, SingleTokenGivesOneRow) {
  TransformerLM<float> m(tiny_config(), 1);
  const std::vector<int> t = {5};
  auto logits = m.lm_forward(t);
  EXPECT_EQ(logits.shape(), (Shape{1, 32}));
}

TEST(TransformerLM, DeterministicConstruction) {
  TransformerLM<float> a(tiny_config(), 7), b(tiny_config(), 7);
  const std::vector<int> t = {1, 2, 3, 4, 5, 6, 7, 8};
  EXPECT_EQ(a.lm_forward(t).values(), b.lm_forward(t).values());
}

TEST(TransformerLM, Causality) {
  TransformerLM<double> m(tiny_config(), 3);
  std::vector<int> t = {1, 2, 3, 4, 5, 6, 7, 8};
  const auto base = m.lm_forward(t).values();
  for (std::size_t j = 0; j < t.size(); ++j) {
    auto u = t;
    u[j] = (u[j] + 11) % 32;
    const auto out = m.lm_forward(u).values();
    for (std::size_t i = 0; i < t.size(); ++i) {
      const bool same = std::equal(base.begin() + i * 32, base.begin() + (i + 1) * 32, out.begin() + i * 32);
      if (i < j) EXPECT_TRUE(same) << "row " << i << " changed by token " << j;
      if (i == j) EXPECT_FALSE(same);
    }
  }
}

TEST(TransformerLM, OutOfRangeTokenNamesPosition) {
  TransformerLM<float> m(tiny_config(), 1);
  const std::vector<int> t = {1, 2, 40, 3};
  try {
    m.lm_forward(t);
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("position 2"), std::string::npos) << e.what();
  }
  const std::vector<int> long_seq(9, 1);
  EXPECT_THROW(m.lm_forward(long_seq), ShapeError);
}

TEST(TransformerLM, ParameterNamesUnique) {
  TransformerLM<float> m(tiny_config(), 1);
  std::set<std::string> names;
  for (const auto* p : m.parameters()) EXPECT_TRUE(names.insert(p->name).second) << p->name;
  EXPECT_NE(m.find("blocks.1.moe.gate.3"), nullptr);
  EXPECT_TRUE(is_expert_param("blocks.1.moe.experts.2.w1"));
  EXPECT_TRUE(is_gate_param("blocks.1.moe.gate.0"));
  EXPECT_FALSE(is_expert_param("blocks.0.ffn.w1"));
}

TEST(ActivatedParams, LargeModelFormula) {
  ModelConfig c;
  c.layers = 2;
  c.d_model = 768;
  c.d_hidden = 3072;
  c.n_heads = 12;
  c.d_head = 64;
  c.vocab_size = 16;
  c.max_seq_len = 4;
  c.experts = 2;
  TransformerLM<float> m(c, 1);
  // 2·(2·768·3072 + 3072 + 768)
  EXPECT_EQ(count_activated_params(m).per_token_expert_activated, 9444864u);
}

TEST(ActivatedParams, IndependentOfExpertCount) {
  ModelConfig c = tiny_config();
  const std::size_t m = 16, h = 32;
  c.experts = 4;
  const auto base = count_activated_params(TransformerLM<float>(c, 1));
  for (int e : {4, 7, 10, 16}) {
    c.experts = e;
    const auto a = count_activated_params(TransformerLM<float>(c, 1));
    EXPECT_EQ(a.per_token_expert_activated, 2 * (2 * m * h + h + m));
    EXPECT_EQ(a.total - base.total, static_cast<std::size_t>(e - 4) * (2 * m * h + h + 2 * m) * a.moe_layers);
  }
}

TEST(Checkpoint, RoundTripIsBitwise) {
  TransformerLM<float> m(tiny_config(), 5);
  auto* layer = m.moe_layers()[0];
  auto ex = FeedForward<float>::copy_of(layer->expert(1), layer->expert_prefix(4), 2);
  Parameter<float> g(layer->gate_row_name(4), Tensor<float>(Shape{16}, layer->gate_row(1).tensor().values), 2);
  layer->append(std::move(ex), std::move(g));
  layer->expert(0).set_trainable(false);
  const auto dir = temp_dir("roundtrip");
  save_model(m, dir);
  const auto back = load_model<float>(dir);
  ASSERT_EQ(back.parameters().size(), m.parameters().size());
  for (const auto* p : m.parameters()) {
    const auto* q = back.find(p->name);
    ASSERT_NE(q, nullptr) << p->name;
    EXPECT_EQ(q->var.values(), p->var.values()) << p->name;
    EXPECT_EQ(q->trainable, p->trainable) << p->name;
    EXPECT_EQ(q->origin_phase, p->origin_phase) << p->name;
  }
  const auto manifest = read_manifest(dir);
  EXPECT_EQ(manifest.at("format_version").get<int>(), kCheckpointFormatVersion);
  const auto& first = manifest.at("params").at(0);
  for (const char* key : {"name", "shape", "trainable", "origin_phase", "file", "bytes"})
    EXPECT_TRUE(first.contains(key)) << key;
  EXPECT_EQ(first.at("bytes").get<std::size_t>(), fs::file_size(dir / first.at("file").get<std::string>()));
}

TEST(Checkpoint, UnsupportedVersion) {
  TransformerLM<float> m(tiny_config(), 5);
  const auto dir = temp_dir("version");
  save_model(m, dir);
  auto manifest = read_manifest(dir);
  manifest["format_version"] = 99;
  std::ofstream(dir / "manifest.json") << manifest.dump();
  try {
    load_model<float>(dir);
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("unsupported checkpoint format version 99"), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, MissingAndTruncated) {
  EXPECT_THROW(load_model<float>(temp_dir("missing")), CheckpointError);
  TransformerLM<float> m(tiny_config(), 5);
  const auto dir = temp_dir("truncated");
  save_model(m, dir);
  const auto file = dir / read_manifest(dir).at("params").at(0).at("file").get<std::string>();
  fs::resize_file(file, fs::file_size(file) - 4);
  EXPECT_THROW(load_model<float>(dir), CheckpointError);
}

TEST(Checkpoint, BlobIsLittleEndianFloat32) {
  const auto dir = temp_dir("blob");
  fs::create_directories(dir);
  const std::vector<double> v = {1.0, -2.5};
  EXPECT_EQ(write_f32_blob<double>(dir / "b.bin", v), 8u);
  std::ifstream in(dir / "b.bin", std::ios::binary);
  unsigned char bytes[8];
  in.read(reinterpret_cast<char*>(bytes), 8);
  // 1.0f = 0x3f800000, -2.5f = 0xc0200000
  const unsigned char want[8] = {0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x20, 0xc0};
  for (int i = 0; i < 8; ++i) EXPECT_EQ(bytes[i], want[i]) << i;
  EXPECT_EQ(read_f32_blob<double>(dir / "b.bin", 2), v);
}

}  // namespace
}  // namespace lmoe
