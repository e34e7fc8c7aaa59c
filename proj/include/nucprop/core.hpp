#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <vector>

#include "nucprop/grid.hpp"

namespace nucprop {

// Intersection over union of two pixel sets; 0 when both are empty.
inline double iou(const Mask& a, const Mask& b) {
    require_same_shape(a, b, "iou");
    std::size_t inter = 0;
    std::size_t uni = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const bool in_a = a[i] != 0;
        const bool in_b = b[i] != 0;
        inter += in_a && in_b;
        uni += in_a || in_b;
    }
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

inline double iou(const LabelMap& a, InstanceId id_a, const LabelMap& b, InstanceId id_b) {
    require_same_shape(a, b, "iou");
    std::size_t inter = 0;
    std::size_t uni = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const bool in_a = a[i] == id_a;
        const bool in_b = b[i] == id_b;
        inter += in_a && in_b;
        uni += in_a || in_b;
    }
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// Natural-log entropy per pixel, with 0 log 0 = 0.
inline ScalarField entropy_map(const ProbMap& probs) {
    ScalarField out(probs.width(), probs.height());
    for (std::size_t i = 0; i < probs.pixel_count(); ++i) {
        double h = 0.0;
        for (double p : probs.pixel(i)) {
            if (p > 0.0) h -= p * std::log(p);
        }
        out[i] = h;
    }
    return out;
}

// Mean of `field` over the pixels carrying `id`; the infinite tag when the
// id is absent.
inline MeanUncertainty mean_over_instance(const ScalarField& field, const LabelMap& labels, InstanceId id) {
    require_same_shape(field, labels, "mean_over_instance");
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] == id) {
            sum += field[i];
            ++n;
        }
    }
    if (n == 0) return MeanUncertainty::infinite();
    return MeanUncertainty::of(sum / static_cast<double>(n));
}

inline MeanUncertainty mean_over_mask(const ScalarField& field, const Mask& mask) {
    require_same_shape(field, mask, "mean_over_mask");
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (mask[i]) {
            sum += field[i];
            ++n;
        }
    }
    if (n == 0) return MeanUncertainty::infinite();
    return MeanUncertainty::of(sum / static_cast<double>(n));
}

struct BoundingBox {
    int x0 = 0;
    int y0 = 0;
    int x1 = 0;
    int y1 = 0;
    friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

struct InstanceStats {
    InstanceId id = 0;
    std::size_t area = 0;
    double cx = 0.0;
    double cy = 0.0;
    BoundingBox bbox;
};

// One entry per nonzero id, ascending by id.
inline std::vector<InstanceStats> instance_stats(const LabelMap& labels) {
    struct Acc {
        std::size_t n = 0;
        double sx = 0.0;
        double sy = 0.0;
        BoundingBox box{};
    };
    std::map<InstanceId, Acc> acc;
    for (int y = 0; y < labels.height(); ++y) {
        for (int x = 0; x < labels.width(); ++x) {
            const InstanceId id = labels(x, y);
            if (id == 0) continue;
            auto [it, inserted] = acc.try_emplace(id);
            Acc& a = it->second;
            if (inserted) a.box = {x, y, x, y};
            ++a.n;
            a.sx += x;
            a.sy += y;
            a.box.x0 = std::min(a.box.x0, x);
            a.box.y0 = std::min(a.box.y0, y);
            a.box.x1 = std::max(a.box.x1, x);
            a.box.y1 = std::max(a.box.y1, y);
        }
    }
    std::vector<InstanceStats> out;
    out.reserve(acc.size());
    for (const auto& [id, a] : acc) {
        const double n = static_cast<double>(a.n);
        out.push_back({id, a.n, a.sx / n, a.sy / n, a.box});
    }
    return out;
}

inline std::vector<InstanceId> instance_ids(const LabelMap& labels) {
    std::vector<InstanceId> ids;
    for (InstanceId v : labels.data()) {
        if (v != 0) ids.push_back(v);
    }
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    return ids;
}

// Nearest pixel to a real coordinate; halves round up.
inline int nearest_index(double coord) noexcept { return static_cast<int>(std::floor(coord + 0.5)); }

// Backward warp with nearest-neighbour sampling. Samples falling outside the
// grid produce `T{}` (unset / background).
template <typename T>
Grid<T> warp_nearest_backward(const Grid<T>& src, const FlowField& flow) {
    require_same_shape(src, flow.u, "warp_nearest_backward");
    Grid<T> out(src.width(), src.height());
    for (int y = 0; y < src.height(); ++y) {
        for (int x = 0; x < src.width(); ++x) {
            const std::size_t i = src.index(x, y);
            const int sx = nearest_index(x + flow.u[i]);
            const int sy = nearest_index(y + flow.v[i]);
            if (src.contains(sx, sy)) out[i] = src(sx, sy);
        }
    }
    return out;
}

// Output pixel p is set iff the mask is set at the nearest pixel to p + flow(p).
inline Mask warp_mask_backward(const Mask& mask, const FlowField& flow) {
    return warp_nearest_backward(mask, flow);
}

// Bilinear sample with edge clamping.
inline double sample_bilinear(const ScalarField& img, double x, double y) noexcept {
    const double cx = std::clamp(x, 0.0, static_cast<double>(img.width() - 1));
    const double cy = std::clamp(y, 0.0, static_cast<double>(img.height() - 1));
    const int x0 = static_cast<int>(std::floor(cx));
    const int y0 = static_cast<int>(std::floor(cy));
    const int x1 = std::min(x0 + 1, img.width() - 1);
    const int y1 = std::min(y0 + 1, img.height() - 1);
    const double fx = cx - x0;
    const double fy = cy - y0;
    const double top = img(x0, y0) + fx * (img(x1, y0) - img(x0, y0));
    const double bottom = img(x0, y1) + fx * (img(x1, y1) - img(x0, y1));
    return top + fy * (bottom - top);
}

inline ScalarField warp_image_backward(const ScalarField& img, const FlowField& flow) {
    require_same_shape(img, flow.u, "warp_image_backward");
    ScalarField out(img.width(), img.height());
    for (int y = 0; y < img.height(); ++y) {
        for (int x = 0; x < img.width(); ++x) {
            const std::size_t i = img.index(x, y);
            out[i] = sample_bilinear(img, x + flow.u[i], y + flow.v[i]);
        }
    }
    return out;
}

// 4-connected component labelling; components numbered from 1 in
// row-major order of their first pixel.
inline LabelMap connected_components(const Mask& mask, std::size_t* component_count = nullptr) {
    LabelMap out(mask.width(), mask.height());
    InstanceId next = 0;
    std::vector<std::pair<int, int>> stack;
    for (int y = 0; y < mask.height(); ++y) {
        for (int x = 0; x < mask.width(); ++x) {
            if (!mask(x, y) || out(x, y) != 0) continue;
            ++next;
            out(x, y) = next;
            stack.assign(1, {x, y});
            while (!stack.empty()) {
                const auto [px, py] = stack.back();
                stack.pop_back();
                constexpr int dx[] = {1, -1, 0, 0};
                constexpr int dy[] = {0, 0, 1, -1};
                for (int k = 0; k < 4; ++k) {
                    const int nx = px + dx[k];
                    const int ny = py + dy[k];
                    if (mask.contains(nx, ny) && mask(nx, ny) && out(nx, ny) == 0) {
                        out(nx, ny) = next;
                        stack.emplace_back(nx, ny);
                    }
                }
            }
        }
    }
    if (component_count) *component_count = next;
    return out;
}

inline std::size_t component_count(const Mask& mask) {
    std::size_t n = 0;
    connected_components(mask, &n);
    return n;
}

// Keeps the largest 4-connected component. Ties go to the component whose
// first pixel comes first in row-major order.
inline Mask largest_component(const Mask& mask) {
    std::size_t n = 0;
    const LabelMap comps = connected_components(mask, &n);
    if (n <= 1) return mask;
    std::vector<std::size_t> area(n + 1, 0);
    for (InstanceId c : comps.data()) ++area[c];
    InstanceId best = 1;
    for (InstanceId c = 2; c <= n; ++c) {
        if (area[c] > area[best]) best = c;
    }
    return mask_of(comps, best);
}

inline Mask mask_union(const Mask& a, const Mask& b) {
    require_same_shape(a, b, "mask_union");
    Mask out(a.width(), a.height());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] || b[i];
    return out;
}

inline Mask mask_intersection(const Mask& a, const Mask& b) {
    require_same_shape(a, b, "mask_intersection");
    Mask out(a.width(), a.height());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] && b[i];
    return out;
}

namespace detail {
inline std::vector<std::pair<int, int>> disk_offsets(int radius) {
    std::vector<std::pair<int, int>> offs;
    for (int dy = -radius; dy <= radius; ++dy) {
        for (int dx = -radius; dx <= radius; ++dx) {
            if (dx * dx + dy * dy <= radius * radius) offs.emplace_back(dx, dy);
        }
    }
    return offs;
}
}  // namespace detail

// Binary dilation by a Euclidean disk.
inline Mask dilate(const Mask& mask, int radius) {
    if (radius <= 0) return mask;
    const auto offs = detail::disk_offsets(radius);
    Mask out(mask.width(), mask.height());
    for (int y = 0; y < mask.height(); ++y) {
        for (int x = 0; x < mask.width(); ++x) {
            if (!mask(x, y)) continue;
            for (const auto& [dx, dy] : offs) {
                if (out.contains(x + dx, y + dy)) out(x + dx, y + dy) = 1;
            }
        }
    }
    return out;
}

// Binary erosion by a Euclidean disk; pixels outside the grid count as unset.
inline Mask erode(const Mask& mask, int radius) {
    if (radius <= 0) return mask;
    const auto offs = detail::disk_offsets(radius);
    Mask out(mask.width(), mask.height());
    for (int y = 0; y < mask.height(); ++y) {
        for (int x = 0; x < mask.width(); ++x) {
            if (!mask(x, y)) continue;
            bool keep = true;
            for (const auto& [dx, dy] : offs) {
                if (!mask.contains(x + dx, y + dy) || !mask(x + dx, y + dy)) {
                    keep = false;
                    break;
                }
            }
            out(x, y) = keep;
        }
    }
    return out;
}

// Closing (dilate then erode). Pixels beyond the border are treated as set
// during the erosion step so closing never shrinks the input.
inline Mask close(const Mask& mask, int radius) {
    if (radius <= 0) return mask;
    const Mask grown = dilate(mask, radius);
    const auto offs = detail::disk_offsets(radius);
    Mask out(mask.width(), mask.height());
    for (int y = 0; y < mask.height(); ++y) {
        for (int x = 0; x < mask.width(); ++x) {
            if (!grown(x, y)) continue;
            bool keep = true;
            for (const auto& [dx, dy] : offs) {
                if (grown.contains(x + dx, y + dy) && !grown(x + dx, y + dy)) {
                    keep = false;
                    break;
                }
            }
            out(x, y) = keep || mask(x, y);
        }
    }
    return out;
}

struct Centroid {
    double x = 0.0;
    double y = 0.0;
};

inline Centroid centroid(const Mask& mask) {
    double sx = 0.0;
    double sy = 0.0;
    std::size_t n = 0;
    for (int y = 0; y < mask.height(); ++y) {
        for (int x = 0; x < mask.width(); ++x) {
            if (mask(x, y)) {
                sx += x;
                sy += y;
                ++n;
            }
        }
    }
    if (n == 0) return {};
    return {sx / static_cast<double>(n), sy / static_cast<double>(n)};
}

}  // namespace nucprop
