#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "nucprop/core.hpp"
#include "nucprop/grid.hpp"
#include "nucprop/motion.hpp"
#include "nucprop/parallel.hpp"
#include "nucprop/tracker.hpp"

namespace nucprop {

enum class WarpMode { ShiftScale, MeanFlow, PixelFlow };
enum class UpdateScope { UncertainOnly, All };
enum class UpdateAction { None, OneSidedPrev, OneSidedNext, TwoSided, Interpolated };

struct PropagationConfig {
    double theta = 0.5;
    double alpha = 0.7;
    double beta = 0.85;
    WarpMode warp_mode = WarpMode::MeanFlow;
    bool fuse = false;
    UpdateScope scope = UpdateScope::UncertainOnly;

    void validate() const {
        if (!(theta >= 0.0) || !std::isfinite(theta)) throw std::invalid_argument("theta must be finite and >= 0");
        if (!(alpha > 0.0 && alpha <= 1.0)) throw std::invalid_argument("alpha must lie in (0, 1]");
        if (!(beta > 0.0 && beta <= 1.0)) throw std::invalid_argument("beta must lie in (0, 1]");
    }
};

// Mean nucleus uncertainty for every frame a track spans.
struct TrackUncertainty {
    int track_id = 0;
    int first_frame = 0;
    std::vector<MeanUncertainty> values;
};

struct UncertaintySummary {
    std::vector<TrackUncertainty> tracks;

    const TrackUncertainty& for_track(int track_id) const {
        for (const auto& t : tracks) {
            if (t.track_id == track_id) return t;
        }
        throw std::out_of_range("no uncertainty summary for track " + std::to_string(track_id));
    }
};

struct UpdateLogEntry {
    int track_id = 0;
    int frame = 0;
    InstanceId cell_id = 0;  // 0 when the track's cell is ABSENT in this frame
    UpdateAction action = UpdateAction::None;
    // Branch that fired (TwoSided / OneSidedPrev / OneSidedNext); None when
    // nothing changed. Kept separately because Interpolated hides it.
    UpdateAction branch = UpdateAction::None;
    std::vector<int> sources;
    std::vector<MeanUncertainty> source_uncertainty;
    MeanUncertainty before = MeanUncertainty::infinite();
    MeanUncertainty after = MeanUncertainty::infinite();
    std::size_t area_before = 0;
    std::size_t area_after = 0;

    bool updated() const noexcept { return action != UpdateAction::None; }
};

using UpdateLog = std::vector<UpdateLogEntry>;

// ū(t, f) over each track's nucleus pixels; ABSENT cells and empty nuclei
// give the infinite tag. Nucleus ids equal cell ids.
inline UncertaintySummary summarize_uncertainty(const std::vector<Track>& tracks,
                                                const std::vector<LabelMap>& nucleus_labels,
                                                const std::vector<ScalarField>& uncertainty) {
    if (nucleus_labels.size() != uncertainty.size()) {
        throw DimensionError("summarize_uncertainty: label and uncertainty frame counts differ");
    }
    for (std::size_t f = 0; f < nucleus_labels.size(); ++f) {
        require_same_shape(nucleus_labels[f], uncertainty[f], "summarize_uncertainty");
    }
    UncertaintySummary summary;
    for (const auto& track : tracks) {
        TrackUncertainty tu{track.track_id, track.first_frame, {}};
        for (int f = track.first_frame; f <= track.last_frame(); ++f) {
            const auto cell = track.cell_at(f);
            if (!cell || static_cast<std::size_t>(f) >= nucleus_labels.size()) {
                tu.values.push_back(MeanUncertainty::infinite());
                continue;
            }
            tu.values.push_back(mean_over_instance(uncertainty[static_cast<std::size_t>(f)],
                                                   nucleus_labels[static_cast<std::size_t>(f)], *cell));
        }
        summary.tracks.push_back(std::move(tu));
    }
    return summary;
}

// Flows between consecutive frames: forward[f] is F_{f->f+1},
// backward[f] is F_{f+1->f}.
class FlowSet {
public:
    FlowSet() = default;
    FlowSet(std::span<const FlowField> forward, std::span<const FlowField> backward)
        : forward_(forward), backward_(backward) {}

    bool empty() const noexcept { return forward_.empty() && backward_.empty(); }

    const FlowField& between(int from, int to) const {
        if (to == from + 1 && from >= 0 && static_cast<std::size_t>(from) < forward_.size()) {
            return forward_[static_cast<std::size_t>(from)];
        }
        if (to == from - 1 && to >= 0 && static_cast<std::size_t>(to) < backward_.size()) {
            return backward_[static_cast<std::size_t>(to)];
        }
        throw std::runtime_error("missing flow for frame pair " + std::to_string(from) + "->" + std::to_string(to));
    }

    // Checks every consecutive pair in [0, frames) exists with the expected
    // direction and shape.
    void require_complete(int frames, int width, int height) const {
        for (int f = 0; f + 1 < frames; ++f) {
            for (const auto& [a, b] : {std::pair{f, f + 1}, std::pair{f + 1, f}}) {
                const FlowField& flow = between(a, b);
                if (flow.source != a || flow.target != b) {
                    throw std::runtime_error("flow for frame pair " + std::to_string(a) + "->" + std::to_string(b) +
                                             " carries direction " + std::to_string(flow.source) + "->" +
                                             std::to_string(flow.target));
                }
                if (flow.width() != width || flow.height() != height) {
                    throw DimensionError("flow for frame pair " + std::to_string(a) + "->" + std::to_string(b) +
                                         " has the wrong dimensions");
                }
            }
        }
    }

private:
    std::span<const FlowField> forward_;
    std::span<const FlowField> backward_;
};

// Moves the neighbour frame's nucleus into the current frame.
//   ShiftScale: transform fitted from neighbour cell to current cell.
//   MeanFlow:   translation by minus the mean of F_{current->neighbour}
//               over the current cell.
//   PixelFlow:  dense backward warp with F_{current->neighbour}.
// The result is reduced to its largest connected component.
inline Mask warp_neighbor_mask(const Mask& current_cell, const Mask& neighbor_cell, const Mask& neighbor_nucleus,
                               const FlowField* flow_to_neighbor, WarpMode mode) {
    require_same_shape(current_cell, neighbor_nucleus, "warp_neighbor_mask");
    require_same_shape(neighbor_cell, neighbor_nucleus, "warp_neighbor_mask");
    if (is_empty(neighbor_nucleus)) throw std::invalid_argument("warp_neighbor_mask: empty neighbour nucleus");

    Mask warped;
    switch (mode) {
        case WarpMode::ShiftScale:
            if (is_empty(current_cell) || is_empty(neighbor_cell)) {
                warped = neighbor_nucleus;
            } else {
                warped = apply_shift_scale(neighbor_nucleus, estimate_shift_scale(neighbor_cell, current_cell));
            }
            break;
        case WarpMode::MeanFlow: {
            if (!flow_to_neighbor) throw std::invalid_argument("warp_neighbor_mask: mean-flow mode needs a flow");
            // Without a current cell the neighbour nucleus footprint stands in.
            const Mask& region = is_empty(current_cell) ? neighbor_nucleus : current_cell;
            const Translation d = mean_flow_translation(*flow_to_neighbor, region);
            SimilarityTransform t;
            t.tx = -d.dx;
            t.ty = -d.dy;
            warped = apply_shift_scale(neighbor_nucleus, t);
            break;
        }
        case WarpMode::PixelFlow:
            if (!flow_to_neighbor) throw std::invalid_argument("warp_neighbor_mask: pixel-flow mode needs a flow");
            warped = warp_mask_backward(neighbor_nucleus, *flow_to_neighbor);
            break;
    }
    return largest_component(warped);
}

// Per-pixel weighted vote with weights exp(-ū_i) normalised to sum 1; a pixel
// is kept when the weighted average reaches 0.5.
inline Mask fuse_masks(const std::vector<std::pair<Mask, MeanUncertainty>>& candidates) {
    if (candidates.empty()) throw std::invalid_argument("fuse_masks: no candidates");
    double u_min = std::numeric_limits<double>::infinity();
    for (const auto& [mask, u] : candidates) {
        if (!u.is_finite()) throw std::invalid_argument("fuse_masks: candidate uncertainty must be finite");
        require_same_shape(candidates.front().first, mask, "fuse_masks");
        u_min = std::min(u_min, u.value());
    }
    std::vector<double> w;
    double total = 0.0;
    for (const auto& [mask, u] : candidates) {
        w.push_back(std::exp(-(u.value() - u_min)));
        total += w.back();
    }
    for (double& x : w) x /= total;
    const Mask& first = candidates.front().first;
    Mask out(first.width(), first.height());
    for (std::size_t i = 0; i < first.size(); ++i) {
        double acc = 0.0;
        for (std::size_t c = 0; c < candidates.size(); ++c) {
            if (candidates[c].first[i]) acc += w[c];
        }
        out[i] = acc >= 0.5;
    }
    return out;
}

// Visiting order: ascending ū, ties by frame index. Frames without a nucleus
// come last, nearest-to-a-finite-frame first, so runs of missing nuclei fill
// outward from their certain flank in one pass.
inline std::vector<int> visit_order(const std::vector<MeanUncertainty>& u) {
    const int n = static_cast<int>(u.size());
    std::vector<int> dist(static_cast<std::size_t>(n), std::numeric_limits<int>::max());
    for (int f = 0; f < n; ++f) {
        if (!u[static_cast<std::size_t>(f)].is_infinite()) continue;
        for (int g = 0; g < n; ++g) {
            if (u[static_cast<std::size_t>(g)].is_finite()) dist[static_cast<std::size_t>(f)] = std::min(dist[static_cast<std::size_t>(f)], std::abs(f - g));
        }
    }
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        const auto& ua = u[static_cast<std::size_t>(a)];
        const auto& ub = u[static_cast<std::size_t>(b)];
        if (ua < ub) return true;
        if (ub < ua) return false;
        if (ua.is_infinite()) return dist[static_cast<std::size_t>(a)] < dist[static_cast<std::size_t>(b)];
        return false;
    });
    return order;
}

struct SourceDecision {
    UpdateAction branch = UpdateAction::None;
    std::vector<int> sources;  // track-local frame indices
};

// The threshold tests for track-local frame f. `usable[i]` is false for
// frames whose cell is ABSENT. Neighbours outside the track count as +inf.
inline SourceDecision select_sources(const std::vector<MeanUncertainty>& u, const std::vector<char>& usable, int f,
                                     const PropagationConfig& cfg) {
    const int n = static_cast<int>(u.size());
    const auto at = [&](int i) { return u[static_cast<std::size_t>(i)]; };
    if (!usable[static_cast<std::size_t>(f)]) return {};
    const auto source_ok = [&](int i) {
        return i >= 0 && i < n && usable[static_cast<std::size_t>(i)] && at(i).is_finite();
    };
    const MeanUncertainty uf = at(f);
    const bool all = cfg.scope == UpdateScope::All;
    if (!all && uf < MeanUncertainty::of(cfg.theta)) return {};

    // A missing nucleus passes every relative test against a finite source.
    const auto passes = [&](double factor, int i) { return all || uf.is_infinite() || uf.scaled(factor) >= at(i); };

    const bool prev_ok = source_ok(f - 1);
    const bool next_ok = source_ok(f + 1);
    if (prev_ok && next_ok && passes(cfg.beta, f - 1) && passes(cfg.beta, f + 1)) {
        return {UpdateAction::TwoSided, {f - 1, f + 1}};
    }
    if (prev_ok && passes(cfg.alpha, f - 1)) return {UpdateAction::OneSidedPrev, {f - 1}};
    if (next_ok && passes(cfg.alpha, f + 1)) return {UpdateAction::OneSidedNext, {f + 1}};
    return {};
}

// Masks of one track, indexed by track-local frame.
struct TrackFrame {
    bool present = false;  // false when the cell is ABSENT
    Mask cell;
    Mask nucleus;
};

// One track of the propagation pass. Frames are visited once in
// visit_order; an accepted update replaces the nucleus (clipped to the cell,
// largest component kept) and sets ū_f to the smallest source ū so later
// frames can chain from it. An update whose warped mask comes out empty is
// discarded.
inline std::vector<UpdateLogEntry> propagate_track(const Track& track, std::vector<MeanUncertainty> u,
                                                   std::vector<TrackFrame>& frames, const FlowSet& flows,
                                                   const PropagationConfig& cfg) {
    cfg.validate();
    const int n = track.length();
    if (static_cast<int>(u.size()) != n || static_cast<int>(frames.size()) != n) {
        throw std::invalid_argument("propagate_track: summary/frames do not cover the track");
    }
    std::vector<char> usable(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) usable[static_cast<std::size_t>(i)] = frames[static_cast<std::size_t>(i)].present;

    std::vector<UpdateLogEntry> log(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        auto& e = log[static_cast<std::size_t>(i)];
        e.track_id = track.track_id;
        e.frame = track.first_frame + i;
        e.cell_id = track.entries[static_cast<std::size_t>(i)].value_or(0);
        e.before = e.after = u[static_cast<std::size_t>(i)];
        e.area_before = e.area_after = count(frames[static_cast<std::size_t>(i)].nucleus);
    }

    const bool needs_flow = cfg.warp_mode != WarpMode::ShiftScale;
    for (int f : visit_order(u)) {
        const SourceDecision decision = select_sources(u, usable, f, cfg);
        if (decision.branch == UpdateAction::None) continue;

        TrackFrame& target = frames[static_cast<std::size_t>(f)];
        std::vector<std::pair<Mask, MeanUncertainty>> warped;
        for (int s : decision.sources) {
            const TrackFrame& src = frames[static_cast<std::size_t>(s)];
            const FlowField* flow =
                needs_flow ? &flows.between(track.first_frame + f, track.first_frame + s) : nullptr;
            warped.emplace_back(warp_neighbor_mask(target.cell, src.cell, src.nucleus, flow, cfg.warp_mode),
                                u[static_cast<std::size_t>(s)]);
        }

        Mask result;
        if (warped.size() == 1) {
            result = warped.front().first;
        } else if (cfg.fuse) {
            result = fuse_masks(warped);
        } else {
            result = mask_union(warped[0].first, warped[1].first);
        }
        if (!is_empty(target.cell)) result = mask_intersection(result, target.cell);
        result = largest_component(result);
        if (is_empty(result)) continue;

        auto& e = log[static_cast<std::size_t>(f)];
        const bool was_empty = is_empty(target.nucleus);
        e.branch = decision.branch;
        e.action = was_empty ? UpdateAction::Interpolated : decision.branch;
        MeanUncertainty best = MeanUncertainty::infinite();
        for (int s : decision.sources) {
            e.sources.push_back(track.first_frame + s);
            e.source_uncertainty.push_back(u[static_cast<std::size_t>(s)]);
            best = std::min(best, u[static_cast<std::size_t>(s)],
                            [](const MeanUncertainty& a, const MeanUncertainty& b) { return a < b; });
        }
        target.nucleus = std::move(result);
        u[static_cast<std::size_t>(f)] = best;
        e.after = best;
        e.area_after = count(target.nucleus);
    }
    return log;
}

struct PropagationInput {
    const std::vector<LabelMap>* cells = nullptr;
    const std::vector<LabelMap>* nuclei = nullptr;
    const std::vector<ScalarField>* uncertainty = nullptr;
    FlowSet flows;
    // Built from the cell labels with default LinkConfig when absent.
    std::optional<std::vector<Track>> tracks;
};

struct PropagationResult {
    std::vector<LabelMap> nuclei;
    UpdateLog log;
    std::vector<Track> tracks;
    UncertaintySummary summary;
};

// Full pass over a video: tracks, uncertainty summary, per-track propagation.
// Only nucleus labels change; each updated nucleus is written under its cell
// id and never over another instance's pixels.
inline PropagationResult run_propagation(const PropagationInput& in, const PropagationConfig& cfg) {
    cfg.validate();
    if (!in.cells || !in.nuclei || !in.uncertainty) throw std::invalid_argument("run_propagation: missing inputs");
    const auto& cells = *in.cells;
    const auto& nuclei = *in.nuclei;
    if (cells.empty()) throw std::invalid_argument("run_propagation: no frames");
    if (cells.size() != nuclei.size() || cells.size() != in.uncertainty->size()) {
        throw DimensionError("run_propagation: frame counts of cells, nuclei and uncertainty differ");
    }
    for (std::size_t f = 0; f < cells.size(); ++f) {
        require_same_shape(cells.front(), cells[f], "run_propagation");
        require_same_shape(cells[f], nuclei[f], "run_propagation");
    }
    const int frames = static_cast<int>(cells.size());
    if (cfg.warp_mode != WarpMode::ShiftScale) {
        in.flows.require_complete(frames, cells.front().width(), cells.front().height());
    }

    PropagationResult result;
    result.tracks = in.tracks ? *in.tracks : build_tracks(cells);
    result.summary = summarize_uncertainty(result.tracks, nuclei, *in.uncertainty);
    result.nuclei = nuclei;

    std::vector<std::vector<TrackFrame>> track_frames(result.tracks.size());
    std::vector<std::vector<UpdateLogEntry>> track_logs(result.tracks.size());
    parallel_for(result.tracks.size(), [&](std::size_t t) {
        const Track& track = result.tracks[t];
        auto& tf = track_frames[t];
        tf.resize(static_cast<std::size_t>(track.length()));
        for (int i = 0; i < track.length(); ++i) {
            const int f = track.first_frame + i;
            const auto id = track.entries[static_cast<std::size_t>(i)];
            auto& fr = tf[static_cast<std::size_t>(i)];
            if (id) {
                fr.present = true;
                fr.cell = mask_of(cells[static_cast<std::size_t>(f)], *id);
                fr.nucleus = mask_of(nuclei[static_cast<std::size_t>(f)], *id);
            } else {
                fr.cell = Mask(cells.front().width(), cells.front().height());
                fr.nucleus = fr.cell;
            }
        }
        track_logs[t] = propagate_track(track, result.summary.tracks[t].values, tf, in.flows, cfg);
    });

    // Sequential commit keeps the output independent of worker scheduling.
    for (std::size_t t = 0; t < result.tracks.size(); ++t) {
        for (auto& e : track_logs[t]) {
            if (e.updated()) {
                LabelMap& labels = result.nuclei[static_cast<std::size_t>(e.frame)];
                const Mask& m = track_frames[t][static_cast<std::size_t>(e.frame - result.tracks[t].first_frame)].nucleus;
                for (std::size_t i = 0; i < labels.size(); ++i) {
                    if (labels[i] == e.cell_id) labels[i] = 0;
                }
                for (std::size_t i = 0; i < labels.size(); ++i) {
                    if (m[i] && labels[i] == 0) labels[i] = e.cell_id;
                }
            }
            result.log.push_back(std::move(e));
        }
    }
    return result;
}

inline const char* to_string(UpdateAction a) noexcept {
    switch (a) {
        case UpdateAction::None: return "none";
        case UpdateAction::OneSidedPrev: return "one_sided_prev";
        case UpdateAction::OneSidedNext: return "one_sided_next";
        case UpdateAction::TwoSided: return "two_sided";
        case UpdateAction::Interpolated: return "interpolated";
    }
    return "none";
}

inline const char* to_string(WarpMode m) noexcept {
    switch (m) {
        case WarpMode::ShiftScale: return "shift-scale";
        case WarpMode::MeanFlow: return "mean-flow";
        case WarpMode::PixelFlow: return "pixel-flow";
    }
    return "mean-flow";
}

inline const char* to_string(UpdateScope s) noexcept {
    return s == UpdateScope::All ? "all" : "uncertain";
}

}  // namespace nucprop
