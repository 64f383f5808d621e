#include "gradshift/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "gradshift/error.hpp"

namespace gradshift {

namespace {
void check_shape(const std::vector<int>& shape) {
    if (shape.empty()) throw InvalidArgument("tensor: empty shape");
    for (int d : shape)
        if (d <= 0)
            throw InvalidArgument("tensor: non-positive dimension in " + Tensor::shape_str(shape));
}
} // namespace

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_.assign(static_cast<size_t>(numel_of(shape_)), 0.0);
}

Tensor::Tensor(std::vector<int> shape, std::vector<double> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
    check_shape(shape_);
    if (numel_of(shape_) != static_cast<long>(data_.size()))
        throw InvalidArgument("tensor: shape " + shape_str() + " expects " +
                              std::to_string(numel_of(shape_)) + " values, got " +
                              std::to_string(data_.size()));
    for (double v : data_)
        if (!std::isfinite(v)) throw NumericError("tensor: non-finite value in construction");
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

Tensor Tensor::full(std::vector<int> shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
}

double Tensor::item() const {
    if (numel() != 1) throw InvalidArgument("tensor: item() on shape " + shape_str());
    return data_[0];
}

double Tensor::min() const { return *std::min_element(data_.begin(), data_.end()); }
double Tensor::max() const { return *std::max_element(data_.begin(), data_.end()); }

double Tensor::max_abs() const {
    double m = 0.0;
    for (double v : data_) m = std::max(m, std::fabs(v));
    return m;
}

double Tensor::sum() const {
    double s = 0.0;
    for (double v : data_) s += v;
    return s;
}

bool Tensor::all_finite() const {
    for (double v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

std::string Tensor::shape_str() const { return shape_str(shape_); }

std::string Tensor::shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor sign(const Tensor& t) {
    Tensor out = Tensor::zeros(t.shape());
    for (long i = 0; i < t.numel(); ++i)
        out[i] = t[i] > 0.0 ? 1.0 : (t[i] < 0.0 ? -1.0 : 0.0);
    return out;
}

} // namespace gradshift
