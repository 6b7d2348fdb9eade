#include "whisq/tensor.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>

#include "whisq/errors.hpp"

namespace whisq {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

Tensor::Tensor(std::vector<std::size_t> shape, double fill)
    : shape_(std::move(shape)), data_(shape_product(shape_), fill) {
  if (shape_.size() > 3) throw std::invalid_argument("Tensor: rank > 3");
  for (auto e : shape_) {
    if (e == 0) throw std::invalid_argument("Tensor: zero extent");
  }
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_.size() > 3) throw std::invalid_argument("Tensor: rank > 3");
  if (data_.size() != shape_product(shape_)) {
    throw std::invalid_argument("Tensor: data length " + std::to_string(data_.size()) +
                                " does not match shape " + shape_string());
  }
}

Tensor Tensor::vector(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor({n}, std::move(v));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw std::invalid_argument("Tensor::matrix: ragged rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

std::size_t Tensor::rows() const {
  switch (rank()) {
    case 0:
    case 1: return 1;
    case 2: return shape_[0];
    default: throw std::logic_error("Tensor::rows on rank-3 tensor");
  }
}

std::size_t Tensor::cols() const {
  switch (rank()) {
    case 0: return 1;
    case 1: return shape_[0];
    case 2: return shape_[1];
    default: throw std::logic_error("Tensor::cols on rank-3 tensor");
  }
}

double Tensor::item() const {
  if (data_.size() != 1) throw std::logic_error("Tensor::item on non-scalar " + shape_string());
  return data_[0];
}

bool Tensor::all_finite() const {
  // An all-ones exponent carries into the sign bit.
  constexpr std::uint64_t exponent = 0x7ff0000000000000ULL;
  constexpr std::uint64_t unit = 0x0010000000000000ULL;
  std::uint64_t flags = 0;
  for (double v : data_) flags |= (std::bit_cast<std::uint64_t>(v) & exponent) + unit;
  return (flags >> 63) == 0;
}

std::string Tensor::shape_string() const {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "x" : "") << shape_[i];
  os << ']';
  return os.str();
}

}  // namespace whisq
