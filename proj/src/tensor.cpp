#include "boss/tensor.hpp"

#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

namespace boss {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape s, double fill) : shape(std::move(s)), data(shape_size(shape), fill) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
  }
}

Tensor::Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
  if (shape_size(shape) != data.size()) {
    throw ShapeError("shape " + shape_str(shape) + " holds " + std::to_string(shape_size(shape)) +
                     " values, got " + std::to_string(data.size()));
  }
}

bool Tensor::all_finite() const {
  for (double v : data) {
    if (!std::isfinite(v)) return false;
  }
  if (grad) {
    for (double v : *grad) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

double Tensor::norm() const {
  double s = 0.0;
  for (double v : data) s += v * v;
  return std::sqrt(s);
}

Tensor& ParameterStore::add(const std::string& id, Tensor init) {
  auto [it, inserted] = params_.emplace(id, std::move(init));
  if (!inserted) throw std::invalid_argument("duplicate parameter id: " + id);
  return it->second;
}

Tensor& ParameterStore::add_buffer(const std::string& id, Tensor init) {
  auto [it, inserted] = buffers_.emplace(id, std::move(init));
  if (!inserted) throw std::invalid_argument("duplicate buffer id: " + id);
  return it->second;
}

Tensor& ParameterStore::at(const std::string& id) {
  auto it = params_.find(id);
  if (it == params_.end()) throw std::out_of_range("unknown parameter id: " + id);
  return it->second;
}

const Tensor& ParameterStore::at(const std::string& id) const {
  auto it = params_.find(id);
  if (it == params_.end()) throw std::out_of_range("unknown parameter id: " + id);
  return it->second;
}

Tensor& ParameterStore::buffer(const std::string& id) {
  auto it = buffers_.find(id);
  if (it == buffers_.end()) throw std::out_of_range("unknown buffer id: " + id);
  return it->second;
}

const Tensor& ParameterStore::buffer(const std::string& id) const {
  auto it = buffers_.find(id);
  if (it == buffers_.end()) throw std::out_of_range("unknown buffer id: " + id);
  return it->second;
}

std::vector<double>& ParameterStore::momentum(const std::string& id) {
  auto& m = momentum_[id];
  if (m.empty()) m.assign(at(id).size(), 0.0);
  return m;
}

void ParameterStore::zero_grad() {
  for (auto& [id, t] : params_) t.grad = std::vector<double>(t.size(), 0.0);
}

void ParameterStore::clear_grad() {
  for (auto& [id, t] : params_) t.grad.reset();
}

std::size_t ParameterStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [id, t] : params_) n += t.size();
  return n;
}

}  // namespace boss
