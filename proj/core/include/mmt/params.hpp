#pragma once
// Named parameter registry. Creation order is the canonical iteration order
// (deterministic init, checkpoints, optimizer sweeps). Buffers are named
// non-learnable state (batch-norm running statistics) that checkpoints must
// also capture.

#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "mmt/tensor.hpp"

namespace mmt {

struct Parameter {
  std::string name;
  TensorPtr value;
  bool trainable = true;
  std::vector<double> adam_m, adam_v;  // sized lazily by the optimizer
};

class ParameterStore {
 public:
  Parameter& create(const std::string& name, std::vector<int> shape, bool trainable = true);
  Parameter* find(const std::string& name);
  const Parameter* find(const std::string& name) const;
  Parameter& at(const std::string& name);
  const std::vector<std::unique_ptr<Parameter>>& items() const { return params_; }

  void register_buffer(const std::string& name, std::vector<double>* buf);
  const std::vector<std::pair<std::string, std::vector<double>*>>& buffers() const {
    return buffers_;
  }

  void zero_grad();
  std::size_t count_scalars(bool trainable_only) const;

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::unordered_map<std::string, Parameter*> by_name_;
  std::vector<std::pair<std::string, std::vector<double>*>> buffers_;
};

// In-place initializers; all draw from the caller's stream so construction
// order fully determines every weight.
void init_constant(Parameter& p, double v);
void init_uniform(Parameter& p, std::mt19937_64& rng, double lo, double hi);
void init_glorot(Parameter& p, std::mt19937_64& rng, int fan_in, int fan_out);
void init_he(Parameter& p, std::mt19937_64& rng, int fan_in);

}  // namespace mmt
