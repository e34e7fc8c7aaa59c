#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

#include "nucprop/core.hpp"
#include "nucprop/grid.hpp"
#include "nucprop/random.hpp"

namespace nucprop {

// Axis-aligned scaling about `center` followed by a shift:
//   p' = center + (sx, sy) * (p - center) + (tx, ty)
struct SimilarityTransform {
    double tx = 0.0;
    double ty = 0.0;
    double sx = 1.0;
    double sy = 1.0;
    double cx = 0.0;
    double cy = 0.0;

    void validate() const {
        if (!(sx > 0.0) || !(sy > 0.0) || !std::isfinite(sx) || !std::isfinite(sy) || !std::isfinite(tx) ||
            !std::isfinite(ty) || !std::isfinite(cx) || !std::isfinite(cy)) {
            throw std::invalid_argument("SimilarityTransform needs finite fields and positive scales");
        }
    }
};

struct DeformationSpec {
    int control_points = 3;
    double magnitude = 10.0;
    std::uint64_t seed = 0;

    void validate() const {
        if (control_points < 2) throw std::invalid_argument("DeformationSpec: control_points must be >= 2");
        if (!(magnitude >= 0.0) || !std::isfinite(magnitude)) {
            throw std::invalid_argument("DeformationSpec: magnitude must be finite and >= 0");
        }
    }
};

// Worst-case gain of the bicubic upsampler relative to the control
// displacement magnitude; recorded as FlowField::max_magnitude.
inline constexpr double kBicubicOvershootBound = 1.5;

namespace detail {
struct Moments {
    double mx = 0.0;
    double my = 0.0;
    double sdx = 0.0;
    double sdy = 0.0;
    std::size_t n = 0;
};

inline Moments moments(const Mask& mask) {
    Moments m;
    double sx = 0.0;
    double sy = 0.0;
    for (int y = 0; y < mask.height(); ++y) {
        for (int x = 0; x < mask.width(); ++x) {
            if (!mask(x, y)) continue;
            sx += x;
            sy += y;
            ++m.n;
        }
    }
    if (m.n == 0) return m;
    const double n = static_cast<double>(m.n);
    m.mx = sx / n;
    m.my = sy / n;
    double vx = 0.0;
    double vy = 0.0;
    for (int y = 0; y < mask.height(); ++y) {
        for (int x = 0; x < mask.width(); ++x) {
            if (!mask(x, y)) continue;
            vx += (x - m.mx) * (x - m.mx);
            vy += (y - m.my) * (y - m.my);
        }
    }
    m.sdx = std::sqrt(vx / n);
    m.sdy = std::sqrt(vy / n);
    return m;
}

// Keys cubic convolution kernel, a = -0.5.
inline double cubic_weight(double t) noexcept {
    constexpr double a = -0.5;
    t = std::abs(t);
    if (t <= 1.0) return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
    if (t < 2.0) return ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a;
    return 0.0;
}

// Resamples `ctrl` (length k) at `n` evenly spaced output positions so that
// control point i lands on output index i * (n - 1) / (k - 1).
inline std::vector<double> cubic_upsample_1d(const std::vector<double>& ctrl, int n) {
    const int k = static_cast<int>(ctrl.size());
    std::vector<double> out(static_cast<std::size_t>(n));
    for (int x = 0; x < n; ++x) {
        const double pos = n == 1 ? 0.0 : static_cast<double>(x) * (k - 1) / (n - 1);
        const int i0 = static_cast<int>(std::floor(pos));
        const double f = pos - i0;
        double acc = 0.0;
        for (int j = -1; j <= 2; ++j) {
            const int idx = std::clamp(i0 + j, 0, k - 1);
            acc += ctrl[static_cast<std::size_t>(idx)] * cubic_weight(f - j);
        }
        out[static_cast<std::size_t>(x)] = acc;
    }
    return out;
}

inline ScalarField bicubic_upsample(const std::vector<double>& ctrl, int k, int width, int height) {
    std::vector<std::vector<double>> rows(static_cast<std::size_t>(k));
    for (int j = 0; j < k; ++j) {
        std::vector<double> row(ctrl.begin() + j * k, ctrl.begin() + (j + 1) * k);
        rows[static_cast<std::size_t>(j)] = cubic_upsample_1d(row, width);
    }
    ScalarField out(width, height);
    std::vector<double> column(static_cast<std::size_t>(k));
    for (int x = 0; x < width; ++x) {
        for (int j = 0; j < k; ++j) column[static_cast<std::size_t>(j)] = rows[static_cast<std::size_t>(j)][static_cast<std::size_t>(x)];
        const auto up = cubic_upsample_1d(column, height);
        for (int y = 0; y < height; ++y) out(x, y) = up[static_cast<std::size_t>(y)];
    }
    return out;
}
}  // namespace detail

// Shift from centroid difference, per-axis scale from the ratio of standard
// deviations (second central moments). Degenerate axes (zero spread) keep
// scale 1.
inline SimilarityTransform estimate_shift_scale(const Mask& src, const Mask& dst) {
    require_same_shape(src, dst, "estimate_shift_scale");
    const auto a = detail::moments(src);
    const auto b = detail::moments(dst);
    if (a.n == 0 || b.n == 0) throw std::invalid_argument("estimate_shift_scale: empty pixel set");
    SimilarityTransform t;
    t.tx = b.mx - a.mx;
    t.ty = b.my - a.my;
    t.sx = (a.sdx > 0.0 && b.sdx > 0.0) ? b.sdx / a.sdx : 1.0;
    t.sy = (a.sdy > 0.0 && b.sdy > 0.0) ? b.sdy / a.sdy : 1.0;
    t.cx = a.mx;
    t.cy = a.my;
    return t;
}

// Output pixel p is set iff the nearest pixel to the inverse-transformed p
// is in `mask`.
inline Mask apply_shift_scale(const Mask& mask, const SimilarityTransform& t) {
    t.validate();
    Mask out(mask.width(), mask.height());
    for (int y = 0; y < mask.height(); ++y) {
        for (int x = 0; x < mask.width(); ++x) {
            const double sx = t.cx + (x - t.tx - t.cx) / t.sx;
            const double sy = t.cy + (y - t.ty - t.cy) / t.sy;
            const int ix = nearest_index(sx);
            const int iy = nearest_index(sy);
            if (mask.contains(ix, iy) && mask(ix, iy)) out(x, y) = 1;
        }
    }
    return out;
}

struct Translation {
    double dx = 0.0;
    double dy = 0.0;
};

inline Translation mean_flow_translation(const FlowField& flow, const Mask& region) {
    require_same_shape(flow.u, region, "mean_flow_translation");
    double su = 0.0;
    double sv = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < region.size(); ++i) {
        if (!region[i]) continue;
        su += flow.u[i];
        sv += flow.v[i];
        ++n;
    }
    if (n == 0) throw std::invalid_argument("mean_flow_translation: empty region");
    return {su / static_cast<double>(n), sv / static_cast<double>(n)};
}

// Smooth random deformation: a k x k grid of control displacements drawn
// uniformly from [-m, m] per axis, upsampled bicubically to full resolution.
inline FlowField generate_elastic_flow(const DeformationSpec& spec, int width, int height) {
    spec.validate();
    if (width < spec.control_points || height < spec.control_points) {
        throw DimensionError("generate_elastic_flow: grid smaller than the control lattice");
    }
    const int k = spec.control_points;
    Rng rng(spec.seed);
    std::vector<double> cu(static_cast<std::size_t>(k * k));
    std::vector<double> cv(static_cast<std::size_t>(k * k));
    for (double& c : cu) c = spec.magnitude * (2.0 * rng.uniform() - 1.0);
    for (double& c : cv) c = spec.magnitude * (2.0 * rng.uniform() - 1.0);
    FlowField flow;
    flow.u = detail::bicubic_upsample(cu, k, width, height);
    flow.v = detail::bicubic_upsample(cv, k, width, height);
    flow.source = 0;
    flow.target = 1;
    flow.max_magnitude = spec.magnitude * kBicubicOvershootBound;
    return flow;
}

namespace detail {

inline double preimage_error(const FlowField& f, double px, double py, double qx, double qy) noexcept {
    const double rx = qx + sample_bilinear(f.u, qx, qy) - px;
    const double ry = qy + sample_bilinear(f.v, qx, qy) - py;
    return rx * rx + ry * ry;
}

// Inside each lattice cell q -> q + f(q) is bilinear, so every pixel with
// squared error above `tol2` is re-solved by Newton steps in each cell whose
// image box covers it. The smallest error wins.
inline void solve_preimages(const FlowField& f, FlowField& g, std::vector<double>& err, double tol2) {
    const int w = f.width();
    const int h = f.height();
    for (int y0 = 0; y0 + 1 < h; ++y0) {
        for (int x0 = 0; x0 + 1 < w; ++x0) {
            const auto corner = [&](int dx, int dy) {
                const std::size_t i = f.u.index(x0 + dx, y0 + dy);
                return std::array<double, 2>{x0 + dx + f.u[i], y0 + dy + f.v[i]};
            };
            const auto c00 = corner(0, 0), c10 = corner(1, 0), c01 = corner(0, 1), c11 = corner(1, 1);
            std::array<double, 2> B{}, C{}, D{};
            for (int k = 0; k < 2; ++k) {
                B[k] = c10[k] - c00[k];
                C[k] = c01[k] - c00[k];
                D[k] = c11[k] - c10[k] - c01[k] + c00[k];
            }
            const int px0 = std::max(0, static_cast<int>(std::ceil(std::min({c00[0], c10[0], c01[0], c11[0]}))));
            const int px1 = std::min(w - 1, static_cast<int>(std::floor(std::max({c00[0], c10[0], c01[0], c11[0]}))));
            const int py0 = std::max(0, static_cast<int>(std::ceil(std::min({c00[1], c10[1], c01[1], c11[1]}))));
            const int py1 = std::min(h - 1, static_cast<int>(std::floor(std::max({c00[1], c10[1], c01[1], c11[1]}))));
            for (int py = py0; py <= py1; ++py) {
                for (int px = px0; px <= px1; ++px) {
                    const std::size_t i = f.u.index(px, py);
                    if (err[i] <= tol2) continue;
                    double s = 0.5, t = 0.5;
                    for (int it = 0; it < 12; ++it) {
                        const double rx = c00[0] + B[0] * s + C[0] * t + D[0] * s * t - px;
                        const double ry = c00[1] + B[1] * s + C[1] * t + D[1] * s * t - py;
                        const double a = B[0] + D[0] * t, b = C[0] + D[0] * s;
                        const double c = B[1] + D[1] * t, d = C[1] + D[1] * s;
                        const double det = a * d - b * c;
                        if (std::abs(det) < 1e-12) break;
                        s = std::clamp(s - (d * rx - b * ry) / det, 0.0, 1.0);
                        t = std::clamp(t - (a * ry - c * rx) / det, 0.0, 1.0);
                    }
                    const double e = preimage_error(f, px, py, x0 + s, y0 + t);
                    if (e < err[i]) {
                        err[i] = e;
                        g.u[i] = x0 + s - px;
                        g.v[i] = y0 + t - py;
                    }
                }
            }
        }
    }
}

}  // namespace detail

// Residual above which invert_flow re-solves a pixel directly.
inline constexpr double kInverseTolerance = 0.05;

// Fixed-point inverse: g_{n+1}(p) = -f(p + g_n(p)), g_0 = 0, with bilinear
// edge-clamped sampling of f. Where f folds (gradient above 1) the iteration
// does not contract, so pixels still off by more than kInverseTolerance are
// solved for q + f(q) = p cell by cell instead.
inline FlowField invert_flow(const FlowField& flow, int iterations = 5) {
    if (iterations < 0) throw std::invalid_argument("invert_flow: iterations must be >= 0");
    const int w = flow.width();
    const int h = flow.height();
    FlowField g(w, h, flow.target, flow.source);
    g.max_magnitude = flow.max_magnitude;
    FlowField next = g;
    for (int it = 0; it < iterations; ++it) {
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                const std::size_t i = flow.u.index(x, y);
                const double px = x + g.u[i];
                const double py = y + g.v[i];
                next.u[i] = -sample_bilinear(flow.u, px, py);
                next.v[i] = -sample_bilinear(flow.v, px, py);
            }
        }
        std::swap(g, next);
    }
    std::vector<double> err(g.u.size());
    bool any = false;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const std::size_t i = flow.u.index(x, y);
            err[i] = detail::preimage_error(flow, x, y, x + g.u[i], y + g.v[i]);
            any = any || err[i] > kInverseTolerance * kInverseTolerance;
        }
    }
    if (any) detail::solve_preimages(flow, g, err, kInverseTolerance * kInverseTolerance);
    return g;
}

struct FlowPair {
    ScalarField previous;
    FlowField flow;
};

// Produces the earlier frame of a training pair by backward-warping `img`
// (frame t+1) with a random deformation f_{t->t+1}.
inline FlowPair synthesize_flow_pair(const ScalarField& img, const DeformationSpec& spec) {
    FlowPair pair;
    pair.flow = generate_elastic_flow(spec, img.width(), img.height());
    pair.previous = warp_image_backward(img, pair.flow);
    return pair;
}

}  // namespace nucprop
