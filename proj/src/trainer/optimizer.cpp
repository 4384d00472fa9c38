// Copyright 2026 The lifelong-moe Authors
// SPDX-License-Identifier: Apache-2.0

#include "lmoe/trainer/optimizer.hpp"

#include <cmath>

#include "lmoe/common/error.hpp"
#include "lmoe/model/checkpoint.hpp"

namespace lmoe {

namespace fs = std::filesystem;

double lr_at(long t, const LrSchedule& s) {
  if (t < 1) throw ConfigError("lr_at: step must be >= 1 (got " + std::to_string(t) + ")");
  if (t <= s.warmup_steps) return s.lr0;
  return s.lr0 * std::sqrt(static_cast<double>(s.warmup_steps) / static_cast<double>(t));
}

double adafactor_beta2(long t, const AdafactorOptions& o) {
  return std::min(o.beta2_cap, 1.0 - std::pow(static_cast<double>(t), -o.decay_exponent));
}

template <typename T>
void Adafactor<T>::step(const std::vector<Parameter<T>*>& params, double lr) {
  for (const auto* p : params) {
    if (!p->trainable || !p->tensor().has_grad()) continue;
    for (const T g : p->tensor().grad) {
      if (!std::isfinite(static_cast<double>(g))) throw NumericError("non-finite gradient in " + p->name);
    }
  }
  for (auto* p : params) update(*p, lr);
}

template <typename T>
void Adafactor<T>::update(Parameter<T>& p, double lr) {
  if (!p.trainable) return;
  auto& tensor = p.tensor();
  const auto& g = tensor.grad_slot();
  auto& s = slots_[p.name];
  const std::size_t n = tensor.size();
  if (s.t == 0) {
    s.shape = tensor.shape;
    if (s.factored()) {
      s.row.assign(s.shape[0], T(0));
      s.col.assign(s.shape[1], T(0));
    } else {
      s.full.assign(n, T(0));
    }
  } else if (s.shape != tensor.shape) {
    throw ShapeError("adafactor: state of " + p.name + " has shape " + shape_str(s.shape) + " but parameter has " +
                     shape_str(tensor.shape));
  }
  ++s.t;
  const double b2 = adafactor_beta2(s.t, options_);
  const double eps = options_.eps1;
  std::vector<double> u(n);
  if (s.factored()) {
    const std::size_t r = s.shape[0], c = s.shape[1];
    std::vector<double> col_sum(c, 0.0);
    double row_mean_total = 0.0;
    for (std::size_t i = 0; i < r; ++i) {
      double row_sum = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        const double g2 = static_cast<double>(g[i * c + j]) * g[i * c + j] + eps;
        row_sum += g2;
        col_sum[j] += g2;
      }
      s.row[i] = static_cast<T>(b2 * s.row[i] + (1.0 - b2) * (row_sum / static_cast<double>(c)));
      row_mean_total += s.row[i];
    }
    for (std::size_t j = 0; j < c; ++j)
      s.col[j] = static_cast<T>(b2 * s.col[j] + (1.0 - b2) * (col_sum[j] / static_cast<double>(r)));
    const double row_mean = row_mean_total / static_cast<double>(r);
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) {
        const double v = static_cast<double>(s.row[i]) * s.col[j] / row_mean;
        u[i * c + j] = g[i * c + j] / std::sqrt(v);
      }
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      const double g2 = static_cast<double>(g[i]) * g[i] + eps;
      s.full[i] = static_cast<T>(b2 * s.full[i] + (1.0 - b2) * g2);
      u[i] = g[i] / std::sqrt(static_cast<double>(s.full[i]));
    }
  }
  double ss = 0.0;
  for (const double x : u) ss += x * x;
  const double rms = std::sqrt(ss / static_cast<double>(n));
  const double scale = lr / std::max(1.0, rms / options_.clip);
  for (std::size_t i = 0; i < n; ++i) tensor.values[i] = static_cast<T>(tensor.values[i] - scale * u[i]);
}

template <typename T>
const AdafactorSlot<T>* Adafactor<T>::slot(const std::string& name) const {
  auto it = slots_.find(name);
  return it == slots_.end() ? nullptr : &it->second;
}

template <typename T>
void Adafactor<T>::release_frozen(const std::vector<Parameter<T>*>& params) {
  for (const auto* p : params)
    if (!p->trainable) slots_.erase(p->name);
}

template <typename T>
nlohmann::json Adafactor<T>::save(const fs::path& dir) const {
  fs::create_directories(dir);
  nlohmann::json index = nlohmann::json::array();
  std::size_t i = 0;
  for (const auto& [name, s] : slots_) {
    nlohmann::json e{{"name", name}, {"t", s.t}, {"shape", s.shape}};
    auto put = [&](const char* key, const std::vector<T>& v) {
      const std::string file = std::to_string(i) + "_" + key + ".bin";
      e[key] = {{"file", file}, {"bytes", write_f32_blob<T>(dir / file, v)}};
    };
    if (s.factored()) {
      put("row", s.row);
      put("col", s.col);
    } else {
      put("full", s.full);
    }
    index.push_back(std::move(e));
    ++i;
  }
  return index;
}

template <typename T>
void Adafactor<T>::load(const fs::path& dir, const nlohmann::json& index) {
  slots_.clear();
  for (const auto& e : index) {
    AdafactorSlot<T> s;
    s.t = e.at("t").get<long>();
    s.shape = e.at("shape").get<Shape>();
    auto get = [&](const char* key, std::size_t count) {
      return read_f32_blob<T>(dir / e.at(key).at("file").get<std::string>(), count);
    };
    if (s.factored()) {
      s.row = get("row", s.shape[0]);
      s.col = get("col", s.shape[1]);
    } else {
      s.full = get("full", numel(s.shape));
    }
    slots_[e.at("name").get<std::string>()] = std::move(s);
  }
}

template class Adafactor<float>;
template class Adafactor<double>;

}  // namespace lmoe
