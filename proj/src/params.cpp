#include "uvz/params.hpp"

namespace uvz {

int ParamStore::add(const std::string& name, Tensor value) {
  if (name.empty()) throw ContractError("parameter name must be non-empty");
  if (index_.count(name))
    throw ContractError("duplicate parameter name: " + name);
  if (value.empty())
    throw ContractError("parameter " + name + " has no storage");
  Entry e;
  e.name = name;
  e.value = std::move(value);
  const int h = int(entries_.size());
  entries_.push_back(std::move(e));
  index_[name] = h;
  return h;
}

int ParamStore::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? -1 : it->second;
}

int ParamStore::handle(const std::string& name) const {
  const int h = find(name);
  if (h < 0) throw ContractError("unknown parameter: " + name);
  return h;
}

std::vector<Real>& ParamStore::adam_m(int h) {
  Entry& e = entries_[std::size_t(check(h))];
  if (e.m.empty()) e.m.assign(std::size_t(e.value.numel()), Real(0));
  return e.m;
}

std::vector<Real>& ParamStore::adam_v(int h) {
  Entry& e = entries_[std::size_t(check(h))];
  if (e.v.empty()) e.v.assign(std::size_t(e.value.numel()), Real(0));
  return e.v;
}

const std::vector<Real>& ParamStore::adam_m(int h) const {
  const Entry& e = entries_[std::size_t(check(h))];
  if (e.m.empty())
    throw ContractError("no optimizer state for " + e.name);
  return e.m;
}

const std::vector<Real>& ParamStore::adam_v(int h) const {
  const Entry& e = entries_[std::size_t(check(h))];
  if (e.v.empty())
    throw ContractError("no optimizer state for " + e.name);
  return e.v;
}

std::vector<int> ParamStore::handles_with_prefix(
    const std::string& prefix) const {
  std::vector<int> out;
  for (int h = 0; h < int(entries_.size()); ++h)
    if (entries_[std::size_t(h)].name.rfind(prefix, 0) == 0) out.push_back(h);
  return out;
}

std::int64_t ParamStore::scalar_count(const std::string& prefix) const {
  std::int64_t total = 0;
  for (const Entry& e : entries_)
    if (e.name.rfind(prefix, 0) == 0) total += e.value.numel();
  return total;
}

}  // namespace uvz
