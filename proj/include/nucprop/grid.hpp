#pragma once

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace nucprop {

// Raised when two grids that must share a shape do not.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Row-major 2D grid with integer pixel centres.
template <typename T>
class Grid {
public:
    using value_type = T;

    Grid() = default;
    Grid(int width, int height, T fill = T{})
        : width_(width), height_(height) {
        if (width < 0 || height < 0) {
            throw DimensionError("grid dimensions must be non-negative");
        }
        data_.assign(static_cast<std::size_t>(width) * static_cast<std::size_t>(height), fill);
    }
    Grid(int width, int height, std::vector<T> data)
        : width_(width), height_(height), data_(std::move(data)) {
        if (width < 0 || height < 0 ||
            data_.size() != static_cast<std::size_t>(width) * static_cast<std::size_t>(height)) {
            throw DimensionError("grid data length does not match " + std::to_string(width) + "x" +
                                 std::to_string(height));
        }
    }

    int width() const noexcept { return width_; }
    int height() const noexcept { return height_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    bool contains(int x, int y) const noexcept {
        return x >= 0 && y >= 0 && x < width_ && y < height_;
    }
    std::size_t index(int x, int y) const noexcept {
        return static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) + static_cast<std::size_t>(x);
    }

    T& operator()(int x, int y) noexcept { return data_[index(x, y)]; }
    const T& operator()(int x, int y) const noexcept { return data_[index(x, y)]; }
    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    std::span<T> data() noexcept { return data_; }
    std::span<const T> data() const noexcept { return data_; }
    std::vector<T>& storage() noexcept { return data_; }
    const std::vector<T>& storage() const noexcept { return data_; }

    template <typename U>
    bool same_shape(const Grid<U>& other) const noexcept {
        return width_ == other.width() && height_ == other.height();
    }

    friend bool operator==(const Grid&, const Grid&) = default;

private:
    int width_ = 0;
    int height_ = 0;
    std::vector<T> data_;
};

template <typename A, typename B>
void require_same_shape(const Grid<A>& a, const Grid<B>& b, const char* what) {
    if (!a.same_shape(b)) {
        throw DimensionError(std::string(what) + ": grid dimensions differ (" + std::to_string(a.width()) +
                             "x" + std::to_string(a.height()) + " vs " + std::to_string(b.width()) + "x" +
                             std::to_string(b.height()) + ")");
    }
}

using InstanceId = std::uint32_t;

// Instance ids per pixel, 0 is background.
using LabelMap = Grid<InstanceId>;
// Binary pixel set, 1 = member.
using Mask = Grid<std::uint8_t>;
using ScalarField = Grid<double>;

inline bool all_finite(const ScalarField& field) {
    for (double v : field.data()) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

inline std::size_t count(const Mask& mask) {
    std::size_t n = 0;
    for (auto v : mask.data()) n += v != 0;
    return n;
}

inline bool is_empty(const Mask& mask) {
    for (auto v : mask.data()) {
        if (v) return false;
    }
    return true;
}

inline Mask mask_of(const LabelMap& labels, InstanceId id) {
    Mask out(labels.width(), labels.height());
    for (std::size_t i = 0; i < labels.size(); ++i) out[i] = labels[i] == id;
    return out;
}

// Per-pixel class probability vectors, classes innermost.
class ProbMap {
public:
    ProbMap(int width, int height, int classes, std::vector<double> data)
        : width_(width), height_(height), classes_(classes), data_(std::move(data)) {
        if (classes < 2) throw std::invalid_argument("ProbMap needs at least two classes");
        if (width < 0 || height < 0 ||
            data_.size() != static_cast<std::size_t>(width) * static_cast<std::size_t>(height) *
                                static_cast<std::size_t>(classes)) {
            throw DimensionError("ProbMap data length does not match dimensions");
        }
        for (std::size_t p = 0; p < pixel_count(); ++p) {
            double sum = 0.0;
            for (double v : pixel(p)) {
                if (!(v >= 0.0)) throw std::invalid_argument("ProbMap entries must be non-negative");
                sum += v;
            }
            if (std::abs(sum - 1.0) > 1e-6) throw std::invalid_argument("ProbMap pixel does not sum to 1");
        }
    }

    int width() const noexcept { return width_; }
    int height() const noexcept { return height_; }
    int classes() const noexcept { return classes_; }
    std::size_t pixel_count() const noexcept {
        return static_cast<std::size_t>(width_) * static_cast<std::size_t>(height_);
    }
    std::span<const double> pixel(std::size_t i) const noexcept {
        return std::span<const double>(data_).subspan(i * static_cast<std::size_t>(classes_),
                                                      static_cast<std::size_t>(classes_));
    }

private:
    int width_;
    int height_;
    int classes_;
    std::vector<double> data_;
};

// Dense displacement field. For direction (source, target), the content at
// pixel p of the source frame sits at p + (u(p), v(p)) in the target frame.
struct FlowField {
    ScalarField u;
    ScalarField v;
    int source = 0;
    int target = 1;
    double max_magnitude = 0.0;

    FlowField() = default;
    FlowField(int width, int height, int source_frame = 0, int target_frame = 1)
        : u(width, height), v(width, height), source(source_frame), target(target_frame) {}

    int width() const noexcept { return u.width(); }
    int height() const noexcept { return u.height(); }

    double observed_max_magnitude() const {
        double m = 0.0;
        for (std::size_t i = 0; i < u.size(); ++i) m = std::max({m, std::abs(u[i]), std::abs(v[i])});
        return m;
    }

    friend bool operator==(const FlowField&, const FlowField&) = default;
};

// Mean uncertainty of a nucleus; a missing nucleus is the +infinity tag,
// never a stored float.
class MeanUncertainty {
public:
    constexpr MeanUncertainty() = default;
    static constexpr MeanUncertainty of(double value) { return MeanUncertainty(value, true); }
    static constexpr MeanUncertainty infinite() { return MeanUncertainty(0.0, false); }

    constexpr bool is_finite() const noexcept { return finite_; }
    constexpr bool is_infinite() const noexcept { return !finite_; }
    // Throws for the infinite tag.
    double value() const {
        if (!finite_) throw std::logic_error("value() on infinite uncertainty");
        return value_;
    }
    double as_double() const noexcept { return finite_ ? value_ : std::numeric_limits<double>::infinity(); }

    constexpr MeanUncertainty scaled(double factor) const noexcept {
        return finite_ ? MeanUncertainty(value_ * factor, true) : *this;
    }

    friend constexpr bool operator==(const MeanUncertainty& a, const MeanUncertainty& b) noexcept {
        if (a.finite_ != b.finite_) return false;
        return !a.finite_ || a.value_ == b.value_;
    }
    friend constexpr std::partial_ordering operator<=>(const MeanUncertainty& a,
                                                       const MeanUncertainty& b) noexcept {
        if (!a.finite_ && !b.finite_) return std::partial_ordering::equivalent;
        if (!a.finite_) return std::partial_ordering::greater;
        if (!b.finite_) return std::partial_ordering::less;
        return a.value_ <=> b.value_;
    }

private:
    constexpr MeanUncertainty(double v, bool finite) : value_(v), finite_(finite) {}
    double value_ = 0.0;
    bool finite_ = false;
};

}  // namespace nucprop
