#pragma once

#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "uvz/tensor.hpp"

namespace uvz {

// Named parameter registry with per-parameter gradient slots and Adam
// moments. Iteration order is insertion order everywhere (updates,
// serialization), which keeps runs and checkpoints byte-stable.
class ParamStore {
 public:
  int add(const std::string& name, Tensor value);
  int find(const std::string& name) const;  // -1 when absent
  int handle(const std::string& name) const;  // throws when absent

  int size() const { return int(entries_.size()); }
  const std::string& name(int h) const { return entries_[check(h)].name; }
  Tensor& value(int h) { return entries_[check(h)].value; }
  const Tensor& value(int h) const { return entries_[check(h)].value; }

  // Gradient slot; allocated (zeroed) by Tape::param when the parameter is
  // attached to a tape. Null means no tape ever touched the parameter.
  std::shared_ptr<std::vector<Real>>& grad_slot(int h) {
    return entries_[check(h)].grad;
  }
  const std::shared_ptr<std::vector<Real>>& grad_slot(int h) const {
    return entries_[check(h)].grad;
  }
  // Set when the parameter was attached to a tape; cleared by the optimizer
  // step so a missed gradient is detectable.
  bool& grad_live(int h) { return entries_[check(h)].grad_live; }

  std::vector<Real>& adam_m(int h);
  std::vector<Real>& adam_v(int h);
  const std::vector<Real>& adam_m(int h) const;  // requires has_adam_state
  const std::vector<Real>& adam_v(int h) const;
  bool has_adam_state(int h) const {
    return !entries_[check(h)].m.empty();
  }

  std::int64_t& step_counter() { return step_; }
  std::int64_t step_counter() const { return step_; }

  std::vector<int> handles_with_prefix(const std::string& prefix) const;
  std::int64_t scalar_count(const std::string& prefix = "") const;

 private:
  struct Entry {
    std::string name;
    Tensor value;
    std::shared_ptr<std::vector<Real>> grad;
    bool grad_live = false;
    std::vector<Real> m, v;
  };

  int check(int h) const {
    if (h < 0 || h >= int(entries_.size()))
      throw ContractError("invalid parameter handle " + std::to_string(h));
    return h;
  }

  std::vector<Entry> entries_;
  std::unordered_map<std::string, int> index_;
  std::int64_t step_ = 0;
};

}  // namespace uvz
