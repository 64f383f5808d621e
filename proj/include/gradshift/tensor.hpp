#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace gradshift {

// Dense row-major tensor of doubles with explicit shape. The universal value
// type of the library: images, parameters, gradients, maps. Values are
// treated as immutable once handed to a tape; mutation happens only on
// tensors the caller owns (parameter updates, image buffers).
//
// No broadcasting except the scalar-tensor cases handled explicitly by the
// tape ops, so every gradient rule stays auditable.
class Tensor {
public:
    Tensor() = default;

    // Zero-filled tensor of the given shape.
    explicit Tensor(std::vector<int> shape);

    // Tensor from explicit values; product(shape) must equal values.size()
    // and every value must be finite.
    Tensor(std::vector<int> shape, std::vector<double> values);

    static Tensor scalar(double v);
    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<int> shape, double v);

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    long numel() const { return static_cast<long>(data_.size()); }
    bool defined() const { return !shape_.empty(); }
    bool is_scalar() const { return numel() == 1; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    double& operator[](long i) { return data_[static_cast<size_t>(i)]; }
    double operator[](long i) const { return data_[static_cast<size_t>(i)]; }

    double item() const; // value of a 1-element tensor

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
    bool bit_equal(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

    double min() const;
    double max() const;
    double max_abs() const;
    double sum() const;
    bool all_finite() const;

    // "[64,64,1]" - for error messages.
    std::string shape_str() const;
    static std::string shape_str(const std::vector<int>& shape);

private:
    std::vector<int> shape_;
    std::vector<double> data_;
};

// Elementwise sign with sign(0) = 0, so a perturbation vanishes wherever the
// gradient does.
Tensor sign(const Tensor& t);

inline long numel_of(const std::vector<int>& shape) {
    long n = 1;
    for (int d : shape) n *= d;
    return shape.empty() ? 0 : n;
}

} // namespace gradshift
