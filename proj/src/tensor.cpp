#include "lglab/tensor.hpp"

#include <cmath>
#include <functional>
#include <numeric>

#include "lglab/errors.hpp"

namespace lglab::ad {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t acc, int d) {
                           return acc * static_cast<std::size_t>(d);
                         });
}

std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

namespace {
void check_shape(const Shape& shape) {
  for (const int d : shape) {
    if (d <= 0) throw ValidationError("tensor dims must be positive: " + shape_string(shape));
  }
}
}  // namespace

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill)
    : shape_(std::move(shape)), data_() {
  check_shape(shape_);
  data_.assign(shape_size(shape_), fill);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
  check_shape(shape_);
  if (data_.size() != shape_size(shape_)) {
    throw ValidationError("tensor data size " + std::to_string(data_.size()) +
                          " does not match shape " + shape_string(shape_));
  }
}

template <typename T>
void Tensor<T>::fill(T value) {
  std::fill(data_.begin(), data_.end(), value);
}

template <typename T>
bool Tensor<T>::all_finite() const {
  for (const T v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

template <typename T>
void ParamStore<T>::add(const std::string& name, Tensor<T> value) {
  if (name.empty()) throw ValidationError("parameter name must be non-empty");
  if (!entries_.emplace(name, std::move(value)).second) {
    throw ValidationError("duplicate parameter name '" + name + "'");
  }
}

template <typename T>
const Tensor<T>& ParamStore<T>::at(const std::string& name) const {
  const auto it = entries_.find(name);
  if (it == entries_.end()) throw ValidationError("unknown parameter '" + name + "'");
  return it->second;
}

template <typename T>
std::span<T> ParamStore<T>::mutable_values(const std::string& name) {
  const auto it = entries_.find(name);
  if (it == entries_.end()) throw ValidationError("unknown parameter '" + name + "'");
  return it->second.values();
}

template <typename T>
std::vector<std::string> ParamStore<T>::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& entry : entries_) out.push_back(entry.first);
  return out;
}

template <typename T>
std::size_t ParamStore<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& entry : entries_) n += entry.second.size();
  return n;
}

template class Tensor<float>;
template class Tensor<double>;
template class ParamStore<float>;
template class ParamStore<double>;

}  // namespace lglab::ad
