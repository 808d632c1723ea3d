#include "mmt/params.hpp"

#include <cmath>

namespace mmt {

Parameter& ParameterStore::create(const std::string& name, std::vector<int> shape,
                                  bool trainable) {
  if (by_name_.count(name)) throw ParamError("parameter name already used: " + name);
  auto p = std::make_unique<Parameter>();
  p->name = name;
  p->value = Tensor::make(std::move(shape));
  p->value->requires_grad = trainable;
  p->trainable = trainable;
  Parameter& ref = *p;
  by_name_[name] = p.get();
  params_.push_back(std::move(p));
  return ref;
}

Parameter* ParameterStore::find(const std::string& name) {
  auto it = by_name_.find(name);
  return it == by_name_.end() ? nullptr : it->second;
}

const Parameter* ParameterStore::find(const std::string& name) const {
  auto it = by_name_.find(name);
  return it == by_name_.end() ? nullptr : it->second;
}

Parameter& ParameterStore::at(const std::string& name) {
  Parameter* p = find(name);
  if (!p) throw ParamError("unknown parameter: " + name);
  return *p;
}

void ParameterStore::register_buffer(const std::string& name, std::vector<double>* buf) {
  for (const auto& [n, b] : buffers_) {
    if (n == name) throw ParamError("buffer name already used: " + name);
  }
  buffers_.emplace_back(name, buf);
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p->value->zero_grad();
}

std::size_t ParameterStore::count_scalars(bool trainable_only) const {
  std::size_t n = 0;
  for (const auto& p : params_) {
    if (!trainable_only || p->trainable) n += p->value->size();
  }
  return n;
}

void init_constant(Parameter& p, double v) {
  for (double& x : p.value->value) x = store_round(v);
}

void init_uniform(Parameter& p, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  for (double& x : p.value->value) x = store_round(u(rng));
}

void init_glorot(Parameter& p, std::mt19937_64& rng, int fan_in, int fan_out) {
  double r = std::sqrt(6.0 / (fan_in + fan_out));
  init_uniform(p, rng, -r, r);
}

void init_he(Parameter& p, std::mt19937_64& rng, int fan_in) {
  std::normal_distribution<double> n(0.0, std::sqrt(2.0 / fan_in));
  for (double& x : p.value->value) x = store_round(n(rng));
}

}  // namespace mmt
