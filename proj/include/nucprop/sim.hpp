#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "nucprop/core.hpp"
#include "nucprop/grid.hpp"
#include "nucprop/motion.hpp"
#include "nucprop/parallel.hpp"
#include "nucprop/random.hpp"

namespace nucprop {

enum class Waveform { Square, Sine };

struct SimConfig {
    int width = 128;
    int height = 128;
    int frames = 30;
    int cells = 8;
    std::uint64_t seed = 1;
    double background_intensity = 20.0;
    double cytosol_intensity = 200.0;
    double nucleus_contrast_amplitude = 600.0;
    int oscillation_period = 10;
    Waveform waveform = Waveform::Square;
    double noise_sigma = 0.0;
    // Per frame-pair deformation; the seed is derived per pair from `seed`.
    DeformationSpec motion{3, 8.0, 0};
    double cell_radius_min = 9.0;
    double cell_radius_max = 13.0;
    double nucleus_scale = 0.5;
    // Nuclei keep their shape and ride the flow at their centre; when false
    // they are advected pixel-wise like the cell.
    bool rigid_nuclei = true;

    void validate() const {
        if (width < 8 || height < 8) throw std::invalid_argument("SimConfig: image must be at least 8x8");
        if (cells < 1) throw std::invalid_argument("SimConfig: cells must be >= 1");
        if (frames < 2) throw std::invalid_argument("SimConfig: frames must be >= 2");
        if (oscillation_period < 2) throw std::invalid_argument("SimConfig: oscillation_period must be >= 2");
        if (background_intensity < 0 || cytosol_intensity < 0 || nucleus_contrast_amplitude < 0 ||
            noise_sigma < 0) {
            throw std::invalid_argument("SimConfig: intensities and noise must be >= 0");
        }
        if (!(cell_radius_min >= 3.0 && cell_radius_max >= cell_radius_min)) {
            throw std::invalid_argument("SimConfig: bad cell radius range");
        }
        if (!(nucleus_scale > 0.0 && nucleus_scale <= 0.7)) {
            throw std::invalid_argument("SimConfig: nucleus_scale must lie in (0, 0.7]");
        }
        motion.validate();
    }
};

// Nucleus contrast in [0, 1] at `frame`; both waveforms start at 1.
inline double contrast_at(const SimConfig& cfg, int frame) {
    const int phase = frame % cfg.oscillation_period;
    if (cfg.waveform == Waveform::Square) return 2 * phase < cfg.oscillation_period ? 1.0 : 0.0;
    return 0.5 * (1.0 + std::cos(2.0 * std::numbers::pi * phase / cfg.oscillation_period));
}

struct SimDataset {
    SimConfig config;
    std::vector<ScalarField> images;
    std::vector<LabelMap> cells;
    std::vector<LabelMap> nuclei;
    std::vector<FlowField> forward;   // F_{t->t+1}
    std::vector<FlowField> backward;  // F_{t+1->t}
    std::vector<double> contrast;
};

// Rounds every value to the nearest float so grids survive the f32 on-disk
// format unchanged.
inline void quantize_to_float(ScalarField& field) {
    for (double& v : field.storage()) v = static_cast<double>(static_cast<float>(v));
}

inline void quantize_to_float(FlowField& flow) {
    quantize_to_float(flow.u);
    quantize_to_float(flow.v);
}

namespace detail {

struct Ellipse {
    double cx, cy, a, b, angle;

    bool contains(double x, double y) const noexcept {
        const double c = std::cos(angle);
        const double s = std::sin(angle);
        const double dx = x - cx;
        const double dy = y - cy;
        const double u = (dx * c + dy * s) / a;
        const double v = (-dx * s + dy * c) / b;
        return u * u + v * v <= 1.0;
    }
};

inline Mask rasterize(const Ellipse& e, int width, int height) {
    Mask m(width, height);
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) m(x, y) = e.contains(x, y);
    }
    return m;
}

// Closes each instance with a radius-1 disk, only claiming background
// pixels; nuclei are then clipped to their own cell.
inline void tidy_labels(LabelMap& cells, LabelMap& nuclei) {
    for (LabelMap* labels : {&cells, &nuclei}) {
        const LabelMap before = *labels;
        for (InstanceId id : instance_ids(before)) {
            const Mask closed = close(mask_of(before, id), 1);
            for (std::size_t i = 0; i < closed.size(); ++i) {
                if (closed[i] && (*labels)[i] == 0) (*labels)[i] = id;
            }
        }
    }
    for (std::size_t i = 0; i < nuclei.size(); ++i) {
        if (nuclei[i] != 0 && cells[i] != nuclei[i]) nuclei[i] = 0;
    }
}

inline ScalarField render(const SimConfig& cfg, const LabelMap& cells, const LabelMap& nuclei, double contrast,
                          int frame) {
    ScalarField img(cells.width(), cells.height());
    Rng rng(derive_seed(cfg.seed, streams::noise, static_cast<std::uint64_t>(frame)));
    for (std::size_t i = 0; i < img.size(); ++i) {
        double v = cfg.background_intensity;
        if (cells[i] != 0) v = cfg.cytosol_intensity;
        if (nuclei[i] != 0) v = cfg.cytosol_intensity + contrast * cfg.nucleus_contrast_amplitude;
        const double noise = rng.normal();
        if (cfg.noise_sigma > 0.0) v += cfg.noise_sigma * noise;
        img[i] = std::clamp(std::round(v), 0.0, 65535.0);
    }
    return img;
}

}  // namespace detail

// Synthetic oscillating-nucleus video with ground truth. Cells are
// non-overlapping ellipses with an interior nucleus. Cell labels are advected
// frame to frame by an elastic flow; with rigid_nuclei the nucleus ellipse is
// carried by the flow at its centre and clipped to the cell. Intensities are
// re-rendered and rounded to integers for 16-bit storage.
inline SimDataset generate_video(const SimConfig& cfg) {
    cfg.validate();
    const int W = cfg.width;
    const int H = cfg.height;
    SimDataset ds;
    ds.config = cfg;

    Rng rng(derive_seed(cfg.seed, streams::placement));
    LabelMap cells(W, H);
    LabelMap nuclei(W, H);
    Mask occupied(W, H);
    std::vector<detail::Ellipse> nucleus_shapes;
    for (int c = 1; c <= cfg.cells; ++c) {
        bool placed = false;
        for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
            const double a = rng.uniform(cfg.cell_radius_min, cfg.cell_radius_max);
            const double b = a * rng.uniform(0.7, 1.0);
            const double angle = rng.uniform(0.0, std::numbers::pi);
            const double margin = a + 3.0;
            if (W - 1 - 2 * margin <= 0 || H - 1 - 2 * margin <= 0) break;
            const double cx = rng.uniform(margin, W - 1 - margin);
            const double cy = rng.uniform(margin, H - 1 - margin);
            const detail::Ellipse cell{cx, cy, a, b, angle};
            const Mask cm = detail::rasterize(cell, W, H);
            bool clash = false;
            for (std::size_t i = 0; i < cm.size() && !clash; ++i) clash = cm[i] && occupied[i];
            if (clash) continue;

            const double s = cfg.nucleus_scale;
            const double off_u = rng.uniform(-0.15, 0.15) * a;
            const double off_v = rng.uniform(-0.15, 0.15) * b;
            const double nx = cx + off_u * std::cos(angle) - off_v * std::sin(angle);
            const double ny = cy + off_u * std::sin(angle) + off_v * std::cos(angle);
            const detail::Ellipse nuc{nx, ny, a * s * rng.uniform(0.9, 1.1), b * s * rng.uniform(0.9, 1.1), angle};
            const Mask nm = mask_intersection(detail::rasterize(nuc, W, H), erode(cm, 2));
            if (is_empty(nm)) continue;

            for (std::size_t i = 0; i < cm.size(); ++i) {
                if (cm[i]) cells[i] = static_cast<InstanceId>(c);
                if (nm[i]) nuclei[i] = static_cast<InstanceId>(c);
            }
            occupied = mask_union(occupied, dilate(cm, 3));
            nucleus_shapes.push_back(nuc);
            placed = true;
        }
        if (!placed) throw std::runtime_error("generate_video: could not place cell " + std::to_string(c) +
                                              " after 1000 attempts (overcrowded)");
    }
    detail::tidy_labels(cells, nuclei);

    ds.cells.push_back(cells);
    ds.nuclei.push_back(nuclei);
    for (int t = 0; t + 1 < cfg.frames; ++t) {
        DeformationSpec spec = cfg.motion;
        spec.seed = derive_seed(cfg.seed, streams::motion, static_cast<std::uint64_t>(t));
        FlowField back = generate_elastic_flow(spec, W, H);
        quantize_to_float(back);
        back.source = t + 1;
        back.target = t;
        FlowField fwd = invert_flow(back);
        quantize_to_float(fwd);
        fwd.source = t;
        fwd.target = t + 1;

        LabelMap next_cells = warp_nearest_backward(ds.cells.back(), back);
        LabelMap next_nuclei;
        if (cfg.rigid_nuclei) {
            next_nuclei = LabelMap(W, H);
            for (std::size_t c = 0; c < nucleus_shapes.size(); ++c) {
                auto& e = nucleus_shapes[c];
                const double dx = sample_bilinear(fwd.u, e.cx, e.cy);
                const double dy = sample_bilinear(fwd.v, e.cx, e.cy);
                e.cx += dx;
                e.cy += dy;
                const Mask m = detail::rasterize(e, W, H);
                for (std::size_t i = 0; i < m.size(); ++i) {
                    if (m[i] && next_cells[i] == c + 1) next_nuclei[i] = static_cast<InstanceId>(c + 1);
                }
            }
        } else {
            next_nuclei = warp_nearest_backward(ds.nuclei.back(), back);
        }
        detail::tidy_labels(next_cells, next_nuclei);
        ds.cells.push_back(std::move(next_cells));
        ds.nuclei.push_back(std::move(next_nuclei));
        ds.forward.push_back(std::move(fwd));
        ds.backward.push_back(std::move(back));
    }

    ds.contrast.resize(static_cast<std::size_t>(cfg.frames));
    ds.images.resize(static_cast<std::size_t>(cfg.frames));
    for (int t = 0; t < cfg.frames; ++t) ds.contrast[static_cast<std::size_t>(t)] = contrast_at(cfg, t);
    parallel_for(static_cast<std::size_t>(cfg.frames), [&](std::size_t t) {
        ds.images[t] = detail::render(cfg, ds.cells[t], ds.nuclei[t], ds.contrast[t], static_cast<int>(t));
    });
    return ds;
}

struct DegradeConfig {
    std::uint64_t seed = 7;
    double visibility_threshold = 0.5;
    double miss_probability = 0.4;
    int erode_dilate_px = 2;
    // Lower end of the random erode/dilate radius.
    int min_erode_dilate_px = 1;
    double split_probability = 0.3;
    double base_uncertainty = 0.1;
    double error_uncertainty = 0.9;
    // Optional per-pixel Gaussian jitter on the uncertainty maps.
    double jitter_sigma = 0.0;

    void validate() const {
        const auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
        if (!prob(miss_probability) || !prob(split_probability)) {
            throw std::invalid_argument("DegradeConfig: probabilities must lie in [0, 1]");
        }
        if (erode_dilate_px < 0 || min_erode_dilate_px < 0 || min_erode_dilate_px > std::max(1, erode_dilate_px)) {
            throw std::invalid_argument("DegradeConfig: bad erode/dilate radius range");
        }
        if (!(base_uncertainty >= 0.0) || !(error_uncertainty > base_uncertainty)) {
            throw std::invalid_argument("DegradeConfig: need error_uncertainty > base_uncertainty >= 0");
        }
        if (!(jitter_sigma >= 0.0)) throw std::invalid_argument("DegradeConfig: jitter_sigma must be >= 0");
    }
};

using ScoreTable = std::map<InstanceId, double>;

struct Predictions {
    std::vector<LabelMap> cells;
    std::vector<LabelMap> nuclei;
    std::vector<ScalarField> uncertainty;
    std::vector<ScoreTable> scores;
    // Nucleus ids that were dropped or perturbed, per frame.
    std::vector<std::vector<InstanceId>> degraded;
};

namespace detail {
// Removes a 2-pixel band across the major axis through the centroid.
inline Mask split_mask(const Mask& m) {
    const Centroid c = centroid(m);
    double sxx = 0.0, syy = 0.0, sxy = 0.0;
    for (int y = 0; y < m.height(); ++y) {
        for (int x = 0; x < m.width(); ++x) {
            if (!m(x, y)) continue;
            sxx += (x - c.x) * (x - c.x);
            syy += (y - c.y) * (y - c.y);
            sxy += (x - c.x) * (y - c.y);
        }
    }
    const double theta = 0.5 * std::atan2(2.0 * sxy, sxx - syy);
    const double ex = std::cos(theta);
    const double ey = std::sin(theta);
    Mask out = m;
    for (int y = 0; y < m.height(); ++y) {
        for (int x = 0; x < m.width(); ++x) {
            if (out(x, y) && std::abs((x - c.x) * ex + (y - c.y) * ey) < 1.0) out(x, y) = 0;
        }
    }
    return out;
}
}  // namespace detail

// Emulates a frame-by-frame segmenter that fails when the nucleus contrast
// drops below `visibility_threshold`: the nucleus is missed, or eroded /
// dilated and optionally split. Cells are always exact. Uncertainty is
// base_uncertainty everywhere except over degraded nuclei (ground truth and
// prediction footprint), which get error_uncertainty.
inline Predictions degrade_predictions(const std::vector<LabelMap>& gt_cells, const std::vector<LabelMap>& gt_nuclei,
                                       const std::vector<double>& contrast, const DegradeConfig& cfg) {
    cfg.validate();
    if (gt_cells.size() != gt_nuclei.size() || gt_cells.size() != contrast.size()) {
        throw DimensionError("degrade_predictions: frame counts differ");
    }
    const std::size_t frames = gt_cells.size();
    Predictions p;
    p.cells = gt_cells;
    p.nuclei.resize(frames);
    p.uncertainty.resize(frames);
    p.scores.resize(frames);
    p.degraded.resize(frames);

    parallel_for(frames, [&](std::size_t f) {
        const LabelMap& cells = gt_cells[f];
        const LabelMap& gt = gt_nuclei[f];
        require_same_shape(cells, gt, "degrade_predictions");
        LabelMap pred(gt.width(), gt.height());
        ScalarField unc(gt.width(), gt.height(), cfg.base_uncertainty);
        Rng rng(derive_seed(cfg.seed, streams::degrade, f));
        const bool visible = contrast[f] >= cfg.visibility_threshold;
        for (InstanceId id : instance_ids(gt)) {
            const Mask truth = mask_of(gt, id);
            if (visible) {
                for (std::size_t i = 0; i < truth.size(); ++i) {
                    if (truth[i]) pred[i] = id;
                }
                continue;
            }
            p.degraded[f].push_back(id);
            Mask out(gt.width(), gt.height());
            if (!rng.bernoulli(cfg.miss_probability)) {
                const bool grow = rng.bernoulli(0.5);
                const int r_max = cfg.erode_dilate_px;
                const int radius =
                    r_max == 0 ? 0 : static_cast<int>(rng.uniform_int(std::max(1, cfg.min_erode_dilate_px), r_max));
                out = grow ? dilate(truth, radius) : erode(truth, radius);
                out = mask_intersection(out, mask_of(cells, id));
                if (rng.bernoulli(cfg.split_probability)) out = detail::split_mask(out);
            }
            for (std::size_t i = 0; i < out.size(); ++i) {
                if (out[i] && pred[i] == 0) pred[i] = id;
                if (out[i] || truth[i]) unc[i] = cfg.error_uncertainty;
            }
        }
        if (cfg.jitter_sigma > 0.0) {
            Rng jr(derive_seed(cfg.seed, streams::jitter, f));
            for (double& v : unc.storage()) v = std::max(0.0, v + cfg.jitter_sigma * jr.normal());
        }
        quantize_to_float(unc);
        for (InstanceId id : instance_ids(pred)) {
            const double u = mean_over_instance(unc, pred, id).value();
            p.scores[f][id] = std::clamp(1.0 - u / cfg.error_uncertainty, 0.0, 1.0);
        }
        p.nuclei[f] = std::move(pred);
        p.uncertainty[f] = std::move(unc);
    });
    return p;
}

inline Predictions degrade_predictions(const SimDataset& gt, const DegradeConfig& cfg) {
    return degrade_predictions(gt.cells, gt.nuclei, gt.contrast, cfg);
}

}  // namespace nucprop
