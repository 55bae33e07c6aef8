#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace boss {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Thrown when operand shapes are incompatible. The message names the
/// offending dimensions.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Dense row-major array of doubles (NCHW for 4-D feature maps) with an
/// optional gradient slot of the same length.
struct Tensor {
  Shape shape;
  std::vector<double> data;
  std::optional<std::vector<double>> grad;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0);
  Tensor(Shape s, std::vector<double> values);

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  bool all_finite() const;
  double norm() const;
};

/// Named parameter tensors for one module, plus optimizer momentum and
/// non-trainable buffers (batchnorm running statistics).
class ParameterStore {
 public:
  Tensor& add(const std::string& id, Tensor init);
  Tensor& add_buffer(const std::string& id, Tensor init);

  bool contains(const std::string& id) const { return params_.count(id) != 0; }
  Tensor& at(const std::string& id);
  const Tensor& at(const std::string& id) const;
  Tensor& buffer(const std::string& id);
  const Tensor& buffer(const std::string& id) const;
  bool has_buffer(const std::string& id) const { return buffers_.count(id) != 0; }

  std::map<std::string, Tensor>& params() { return params_; }
  const std::map<std::string, Tensor>& params() const { return params_; }
  std::map<std::string, Tensor>& buffers() { return buffers_; }
  const std::map<std::string, Tensor>& buffers() const { return buffers_; }

  /// Momentum buffer for a parameter, created zero-filled on first use.
  std::vector<double>& momentum(const std::string& id);

  std::uint64_t step() const { return step_; }
  void advance_step() { ++step_; }
  void set_step(std::uint64_t s) { step_ = s; }

  /// Sets every parameter's gradient slot to zeros.
  void zero_grad();
  /// Drops every gradient slot.
  void clear_grad();
  std::size_t parameter_count() const;

 private:
  std::map<std::string, Tensor> params_;
  std::map<std::string, Tensor> buffers_;
  std::map<std::string, std::vector<double>> momentum_;
  std::uint64_t step_ = 0;
};

}  // namespace boss
