#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>

#include "nucprop/grid.hpp"

namespace fixtures {

using namespace nucprop;

inline Mask rect(int w, int h, int x0, int y0, int x1, int y1) {
    Mask m(w, h);
    for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
            if (m.contains(x, y)) m(x, y) = 1;
        }
    }
    return m;
}

inline Mask disk(int w, int h, double cx, double cy, double r) {
    Mask m(w, h);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) m(x, y) = (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r;
    }
    return m;
}

inline void paint(LabelMap& labels, const Mask& m, InstanceId id) {
    for (std::size_t i = 0; i < m.size(); ++i) {
        if (m[i]) labels[i] = id;
    }
}

inline FlowField constant_flow(int w, int h, double u, double v, int source = 0, int target = 1) {
    FlowField f;
    f.u = ScalarField(w, h, u);
    f.v = ScalarField(w, h, v);
    f.source = source;
    f.target = target;
    f.max_magnitude = std::max(std::abs(u), std::abs(v));
    return f;
}

// Smooth test flow: a sum of low-frequency sinusoids.
inline FlowField wavy_flow(int w, int h, double amp, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> ph(0.0, 6.283185307179586);
    const double a = ph(rng), b = ph(rng), c = ph(rng), d = ph(rng);
    FlowField f;
    f.u = ScalarField(w, h);
    f.v = ScalarField(w, h);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            f.u(x, y) = amp * std::sin(0.11 * x + a) * std::cos(0.07 * y + b);
            f.v(x, y) = amp * std::cos(0.09 * x + c) * std::sin(0.13 * y + d);
        }
    }
    f.max_magnitude = amp;
    return f;
}

inline Mask random_blob_mask(int w, int h, std::mt19937_64& rng, double density = 0.4) {
    std::bernoulli_distribution on(density);
    Mask m(w, h);
    for (auto& v : m.storage()) v = on(rng);
    return m;
}

// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("nucprop_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

}  // namespace fixtures
