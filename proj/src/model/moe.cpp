// Copyright 2026 The lifelong-moe Authors
// SPDX-License-Identifier: Apache-2.0

#include "lmoe/model/moe.hpp"

#include <cmath>

#include "lmoe/numerics/ops.hpp"

namespace lmoe {

namespace {

template <typename T>
Tensor<T> normal_tensor(Shape shape, double std, std::mt19937_64& rng) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, std);
  for (auto& v : t.values) v = static_cast<T>(dist(rng));
  return t;
}

}  // namespace

template <typename T>
Parameter<T> clone_parameter(const Parameter<T>& p) {
  Tensor<T> t(p.shape(), p.var.values());
  Parameter<T> c(p.name, std::move(t), p.origin_phase);
  c.trainable = p.trainable;
  return c;
}

template <typename T>
FeedForward<T> FeedForward<T>::init(const std::string& prefix, std::size_t d_model, std::size_t d_hidden,
                                    double init_std, std::mt19937_64& rng, int origin_phase) {
  FeedForward f;
  f.w1 = Parameter<T>(prefix + ".w1", normal_tensor<T>({d_model, d_hidden}, init_std, rng), origin_phase);
  f.b1 = Parameter<T>(prefix + ".b1", Tensor<T>(Shape{d_hidden}), origin_phase);
  f.w2 = Parameter<T>(prefix + ".w2", normal_tensor<T>({d_hidden, d_model}, init_std, rng), origin_phase);
  f.b2 = Parameter<T>(prefix + ".b2", Tensor<T>(Shape{d_model}), origin_phase);
  return f;
}

template <typename T>
FeedForward<T> FeedForward<T>::copy_of(const FeedForward& source, const std::string& prefix, int origin_phase) {
  auto dup = [&](const Parameter<T>& p, const char* suffix) {
    return Parameter<T>(prefix + suffix, Tensor<T>(p.shape(), p.var.values()), origin_phase);
  };
  FeedForward f;
  f.w1 = dup(source.w1, ".w1");
  f.b1 = dup(source.b1, ".b1");
  f.w2 = dup(source.w2, ".w2");
  f.b2 = dup(source.b2, ".b2");
  return f;
}

template <typename T>
Var<T> FeedForward<T>::forward(const Var<T>& x) const {
  auto h = ops::gelu(ops::add(ops::matmul(x, w1.var), b1.var));
  return ops::add(ops::matmul(h, w2.var), b2.var);
}

template <typename T>
void FeedForward<T>::set_trainable(bool on) {
  for (auto* p : parameters()) p->trainable = on;
}

template <typename T>
std::vector<Parameter<T>*> FeedForward<T>::parameters() {
  return {&w1, &b1, &w2, &b2};
}

template <typename T>
std::vector<const Parameter<T>*> FeedForward<T>::parameters() const {
  return {&w1, &b1, &w2, &b2};
}

std::pair<std::size_t, std::size_t> select_top2(std::span<const double> probs) {
  return select_top2<double>(probs);
}

template <typename T>
std::pair<std::size_t, std::size_t> select_top2(std::span<const T> probs) {
  if (probs.size() < 2) throw ShapeError("select_top2: need at least 2 experts, got " + std::to_string(probs.size()));
  std::size_t first = 0;
  for (std::size_t e = 1; e < probs.size(); ++e)
    if (probs[e] > probs[first]) first = e;
  std::size_t second = first == 0 ? 1 : 0;
  for (std::size_t e = 0; e < probs.size(); ++e)
    if (e != first && probs[e] > probs[second]) second = e;
  return {first, second};
}

template <typename T>
GateDecision gate_route(std::span<const T> x, const Tensor<T>& gate_weight, const std::string& layer) {
  if (gate_weight.shape.size() != 2 || gate_weight.shape[1] != x.size()) {
    throw ShapeError("gate_route(" + layer + "): gate weight " + shape_str(gate_weight.shape) +
                     " does not match token width " + std::to_string(x.size()));
  }
  const std::size_t e_count = gate_weight.shape[0];
  if (e_count < 2) throw ShapeError("gate_route(" + layer + "): top-2 routing needs at least 2 experts");
  auto xv = Var<T>::constant(Tensor<T>(Shape{1, x.size()}, std::vector<T>(x.begin(), x.end())));
  auto gw = Var<T>::constant(gate_weight);
  auto logits = ops::matmul_nt(xv, gw);
  for (T v : logits.values()) {
    if (!std::isfinite(static_cast<double>(v))) throw NumericError("gate_route(" + layer + "): non-finite gate logit");
  }
  auto probs = ops::softmax(logits);
  GateDecision d;
  d.probs.assign(probs.values().begin(), probs.values().end());
  std::tie(d.first, d.second) = select_top2<T>(probs.values());
  std::vector<std::size_t> f{d.first}, s{d.second};
  auto w = ops::top2_weights(probs, std::span<const std::size_t>(f), std::span<const std::size_t>(s));
  d.w1 = static_cast<double>(w.values()[0]);
  d.w2 = static_cast<double>(w.values()[1]);
  return d;
}

template <typename T>
MoELayer<T>::MoELayer(std::string prefix, std::size_t d_model, std::size_t d_hidden, std::size_t experts,
                      double init_std, std::mt19937_64& rng)
    : prefix_(std::move(prefix)), d_model_(d_model), d_hidden_(d_hidden) {
  for (std::size_t e = 0; e < experts; ++e) {
    experts_.push_back(FeedForward<T>::init(expert_prefix(e), d_model, d_hidden, init_std, rng, 0));
  }
  for (std::size_t e = 0; e < experts; ++e) {
    gate_rows_.emplace_back(gate_row_name(e), normal_tensor<T>({d_model}, init_std, rng), 0);
  }
}

template <typename T>
std::string MoELayer<T>::expert_prefix(std::size_t e) const {
  return prefix_ + ".experts." + std::to_string(e);
}

template <typename T>
std::string MoELayer<T>::gate_row_name(std::size_t e) const {
  return prefix_ + ".gate." + std::to_string(e);
}

template <typename T>
Tensor<T> MoELayer<T>::gate_weight() const {
  Tensor<T> w(Shape{gate_rows_.size(), d_model_});
  for (std::size_t e = 0; e < gate_rows_.size(); ++e)
    std::copy(gate_rows_[e].var.values().begin(), gate_rows_[e].var.values().end(), w.values.begin() + e * d_model_);
  return w;
}

template <typename T>
void MoELayer<T>::append(FeedForward<T> expert, Parameter<T> gate_row) {
  const std::size_t e = experts_.size();
  if (expert.w1.name != expert_prefix(e) + ".w1" || gate_row.name != gate_row_name(e)) {
    throw ShapeError("moe " + prefix_ + ": appended expert/gate names do not match index " + std::to_string(e));
  }
  if (gate_row.shape() != Shape{d_model_} || expert.w1.shape() != Shape{d_model_, d_hidden_}) {
    throw ShapeError("moe " + prefix_ + ": appended expert has wrong shape");
  }
  experts_.push_back(std::move(expert));
  gate_rows_.push_back(std::move(gate_row));
}

template <typename T>
MoEOutput<T> MoELayer<T>::forward(const Var<T>& x, std::size_t expert_limit, const LayerRoute* replay) const {
  const std::size_t n = x.shape()[0];
  const std::size_t e_count = expert_limit == 0 ? experts_.size() : std::min(expert_limit, experts_.size());
  if (e_count < 2) throw ShapeError("moe " + prefix_ + ": top-2 routing needs at least 2 experts");

  std::vector<Var<T>> rows;
  rows.reserve(e_count);
  for (std::size_t e = 0; e < e_count; ++e) rows.push_back(gate_rows_[e].var);
  auto logits = ops::matmul_nt(x, ops::concat_rows(rows));
  for (T v : logits.values()) {
    if (!std::isfinite(static_cast<double>(v))) throw NumericError("moe " + prefix_ + ": non-finite gate logits");
  }
  MoEOutput<T> out;
  out.probs = ops::softmax(logits);
  if (replay) {
    if (replay->first.size() != n || replay->second.size() != n)
      throw ShapeError("moe " + prefix_ + ": replayed route does not match " + std::to_string(n) + " tokens");
    out.route = *replay;
  } else {
    out.route.first.resize(n);
    out.route.second.resize(n);
    const auto& p = out.probs.values();
    for (std::size_t t = 0; t < n; ++t) {
      std::tie(out.route.first[t], out.route.second[t]) = select_top2<T>(std::span<const T>(p.data() + t * e_count, e_count));
    }
  }
  auto weights = ops::top2_weights(out.probs, std::span<const std::size_t>(out.route.first),
                                   std::span<const std::size_t>(out.route.second));

  std::vector<ops::ExpertOutput<T>> parts;
  out.load.assign(experts_.size(), 0);
  std::vector<std::vector<std::size_t>> rows_of(e_count);
  std::vector<std::vector<unsigned char>> slots_of(e_count);
  for (std::size_t t = 0; t < n; ++t) {
    rows_of[out.route.first[t]].push_back(t);
    slots_of[out.route.first[t]].push_back(0);
    rows_of[out.route.second[t]].push_back(t);
    slots_of[out.route.second[t]].push_back(1);
  }
  for (std::size_t e = 0; e < e_count; ++e) {
    out.load[e] = rows_of[e].size();
    if (rows_of[e].empty()) continue;
    auto xe = ops::gather_rows(x, std::span<const std::size_t>(rows_of[e]));
    parts.push_back({experts_[e].forward(xe), std::move(rows_of[e]), std::move(slots_of[e])});
  }
  out.output = ops::moe_combine(n, d_model_, weights, parts);
  return out;
}

template <typename T>
std::vector<Parameter<T>*> MoELayer<T>::parameters() {
  std::vector<Parameter<T>*> ps;
  for (auto& e : experts_)
    for (auto* p : e.parameters()) ps.push_back(p);
  for (auto& g : gate_rows_) ps.push_back(&g);
  return ps;
}

template <typename T>
std::vector<const Parameter<T>*> MoELayer<T>::parameters() const {
  std::vector<const Parameter<T>*> ps;
  for (const auto& e : experts_)
    for (auto* p : e.parameters()) ps.push_back(p);
  for (const auto& g : gate_rows_) ps.push_back(&g);
  return ps;
}

template <typename T>
MoELayer<T> MoELayer<T>::clone() const {
  MoELayer c;
  c.prefix_ = prefix_;
  c.d_model_ = d_model_;
  c.d_hidden_ = d_hidden_;
  for (const auto& e : experts_) {
    FeedForward<T> f{clone_parameter(e.w1), clone_parameter(e.b1), clone_parameter(e.w2), clone_parameter(e.b2)};
    c.experts_.push_back(std::move(f));
  }
  for (const auto& g : gate_rows_) c.gate_rows_.push_back(clone_parameter(g));
  return c;
}

template <typename T>
Var<T> load_balance_aux(const Var<T>& probs, std::span<const std::size_t> first_choice) {
  const std::size_t n = probs.shape()[0], e_count = probs.shape()[1];
  if (first_choice.size() != n || n == 0) throw ShapeError("load_balance_aux: need one first choice per routed token");
  Tensor<T> frac(Shape{e_count});
  for (auto e : first_choice) frac.values[e] += T(1);
  for (auto& f : frac.values) f /= T(n);
  auto mean_p = ops::mean_rows(probs);
  return ops::scale(ops::sum(ops::mul(mean_p, Var<T>::constant(std::move(frac)))), T(e_count));
}

#define LMOE_INSTANTIATE(T)                                                                           \
  template struct FeedForward<T>;                                                                    \
  template class MoELayer<T>;                                                                        \
  template std::pair<std::size_t, std::size_t> select_top2<T>(std::span<const T>);                   \
  template GateDecision gate_route<T>(std::span<const T>, const Tensor<T>&, const std::string&);     \
  template Var<T> load_balance_aux<T>(const Var<T>&, std::span<const std::size_t>);                  \
  template Parameter<T> clone_parameter<T>(const Parameter<T>&);

LMOE_INSTANTIATE(float)
LMOE_INSTANTIATE(double)
#undef LMOE_INSTANTIATE

}  // namespace lmoe
