#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "nucprop/core.hpp"
#include "nucprop/grid.hpp"
#include "nucprop/propagate.hpp"
#include "nucprop/random.hpp"
#include "nucprop/sim.hpp"
#include "nucprop/tracker.hpp"

namespace nucprop {

struct CategoryStat {
    double mean_iou = 0.0;  // 0 for an empty category
    std::size_t count = 0;
};

struct CategoryReport {
    CategoryStat all;
    CategoryStat updated;
    CategoryStat interpolated;
    CategoryStat non_updated;
};

enum class Category { NonUpdated, Updated, Interpolated };

inline Category category_of(UpdateAction a) noexcept {
    switch (a) {
        case UpdateAction::None: return Category::NonUpdated;
        case UpdateAction::Interpolated: return Category::Interpolated;
        default: return Category::Updated;
    }
}

// Per-GT-nucleus IoU grouped by what the update log says happened to the
// matching predicted cell. Predicted cells are matched to GT cells per frame
// by maximum-IoU assignment; a GT nucleus whose cell has no partner, or
// whose partner has no nucleus, scores 0. Frames/cells absent from the log
// count as non-updated, so an empty log gives the plain baseline.
inline CategoryReport mean_iou_by_category(const std::vector<LabelMap>& pred_cells,
                                           const std::vector<LabelMap>& pred_nuclei,
                                           const std::vector<LabelMap>& gt_cells,
                                           const std::vector<LabelMap>& gt_nuclei, const UpdateLog& log) {
    if (pred_cells.size() != gt_cells.size() || pred_nuclei.size() != gt_nuclei.size() ||
        pred_cells.size() != pred_nuclei.size()) {
        throw DimensionError("mean_iou_by_category: frame counts differ");
    }
    std::map<std::pair<int, InstanceId>, UpdateAction> actions;
    for (const auto& e : log) {
        if (e.cell_id != 0) actions[{e.frame, e.cell_id}] = e.action;
    }

    double sum[3] = {0.0, 0.0, 0.0};
    std::size_t n[3] = {0, 0, 0};
    for (std::size_t f = 0; f < gt_nuclei.size(); ++f) {
        const auto links = link_frames(gt_cells[f], pred_cells[f], LinkConfig{0.0, 0});
        std::map<InstanceId, InstanceId> gt_to_pred;
        for (const auto& l : links) gt_to_pred[l.a] = l.b;
        for (InstanceId g : instance_ids(gt_nuclei[f])) {
            double score = 0.0;
            Category cat = Category::NonUpdated;
            if (const auto it = gt_to_pred.find(g); it != gt_to_pred.end()) {
                score = iou(gt_nuclei[f], g, pred_nuclei[f], it->second);
                if (const auto a = actions.find({static_cast<int>(f), it->second}); a != actions.end()) {
                    cat = category_of(a->second);
                }
            }
            const auto k = static_cast<std::size_t>(cat);
            sum[k] += score;
            ++n[k];
        }
    }
    const std::size_t total = n[0] + n[1] + n[2];
    if (total == 0) throw std::invalid_argument("mean_iou_by_category: no ground-truth nuclei");
    const auto stat = [](double s, std::size_t c) { return CategoryStat{c ? s / static_cast<double>(c) : 0.0, c}; };
    CategoryReport r;
    r.non_updated = stat(sum[0], n[0]);
    r.updated = stat(sum[1], n[1]);
    r.interpolated = stat(sum[2], n[2]);
    r.all = stat(sum[0] + sum[1] + sum[2], total);
    return r;
}

enum class ScoreMode { Softmax, Entropy };

struct Detection {
    int frame = 0;
    InstanceId id = 0;
    double score = 0.0;  // higher = more confident
};

struct DetectionRecord {
    int frame = 0;
    InstanceId id = 0;
    double score = 0.0;
    std::optional<InstanceId> matched_gt;
    double iou = 0.0;
};

// Nucleus detections of every frame. Softmax mode reads `scores`; entropy
// mode scores each instance by minus its mean uncertainty, so both modes
// share the descending-score ranking.
inline std::vector<Detection> collect_detections(const std::vector<LabelMap>& pred_nuclei,
                                                 const std::vector<ScoreTable>* scores,
                                                 const std::vector<ScalarField>* uncertainty, ScoreMode mode) {
    std::vector<Detection> dets;
    for (std::size_t f = 0; f < pred_nuclei.size(); ++f) {
        for (InstanceId id : instance_ids(pred_nuclei[f])) {
            double s = 0.0;
            if (mode == ScoreMode::Softmax) {
                if (!scores || f >= scores->size()) throw std::invalid_argument("collect_detections: missing scores");
                const auto it = (*scores)[f].find(id);
                if (it == (*scores)[f].end()) {
                    throw std::invalid_argument("collect_detections: no score for instance " + std::to_string(id) +
                                                " in frame " + std::to_string(f));
                }
                s = it->second;
            } else {
                if (!uncertainty || f >= uncertainty->size()) {
                    throw std::invalid_argument("collect_detections: missing uncertainty maps");
                }
                s = -mean_over_instance((*uncertainty)[f], pred_nuclei[f], id).value();
            }
            if (!std::isfinite(s)) throw std::invalid_argument("collect_detections: non-finite score");
            dets.push_back({static_cast<int>(f), id, s});
        }
    }
    return dets;
}

// Adds U(-amount, amount) to every score. Each detection draws from a
// stream keyed by its (frame, id), so the result does not depend on order.
inline void perturb_scores(std::vector<Detection>& dets, double amount, std::uint64_t seed) {
    if (!(amount >= 0.0)) throw std::invalid_argument("perturb_scores: amount must be >= 0");
    for (auto& d : dets) {
        const auto key = (static_cast<std::uint64_t>(d.frame) << 32) | d.id;
        Rng rng(derive_seed(seed, streams::score, key));
        d.score += rng.uniform(-amount, amount);
    }
}

// Ranks by descending score (ties by frame, then id) and greedily matches
// each detection to the unmatched GT instance of its frame with the highest
// IoU >= iou_threshold.
inline std::vector<DetectionRecord> match_detections(std::vector<Detection> dets,
                                                     const std::vector<LabelMap>& pred_nuclei,
                                                     const std::vector<LabelMap>& gt_nuclei, double iou_threshold) {
    if (pred_nuclei.size() != gt_nuclei.size()) throw DimensionError("match_detections: frame counts differ");
    std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.frame != b.frame) return a.frame < b.frame;
        return a.id < b.id;
    });
    std::map<int, detail::OverlapTable> tables;
    std::map<std::pair<int, InstanceId>, bool> taken;
    std::vector<DetectionRecord> out;
    out.reserve(dets.size());
    for (const auto& d : dets) {
        if (d.frame < 0 || static_cast<std::size_t>(d.frame) >= gt_nuclei.size()) {
            throw std::out_of_range("match_detections: detection frame out of range");
        }
        auto it = tables.find(d.frame);
        if (it == tables.end()) {
            it = tables.emplace(d.frame, detail::overlaps(pred_nuclei[static_cast<std::size_t>(d.frame)],
                                                          gt_nuclei[static_cast<std::size_t>(d.frame)]))
                     .first;
        }
        DetectionRecord rec{d.frame, d.id, d.score, std::nullopt, 0.0};
        double best = -1.0;
        for (const auto& [g, area] : it->second.area_b) {
            if (taken[{d.frame, g}]) continue;
            const double v = it->second.area_a.contains(d.id) ? it->second.iou(d.id, g) : 0.0;
            if (v >= iou_threshold && v > best) {
                best = v;
                rec.matched_gt = g;
                rec.iou = v;
            }
        }
        if (rec.matched_gt) taken[{d.frame, *rec.matched_gt}] = true;
        out.push_back(rec);
    }
    return out;
}

// All-point interpolated AP over records already in rank order.
inline double average_precision(std::span<const DetectionRecord> ranked, std::size_t gt_count) {
    if (gt_count == 0) return ranked.empty() ? 1.0 : 0.0;
    const std::size_t n = ranked.size();
    std::vector<double> precision(n);
    std::size_t tp = 0;
    for (std::size_t k = 0; k < n; ++k) {
        tp += ranked[k].matched_gt.has_value();
        precision[k] = static_cast<double>(tp) / static_cast<double>(k + 1);
    }
    for (std::size_t k = n; k-- > 1;) precision[k - 1] = std::max(precision[k - 1], precision[k]);
    double ap = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        if (ranked[k].matched_gt) ap += precision[k];
    }
    return ap / static_cast<double>(gt_count);
}

inline double average_precision(const std::vector<Detection>& dets, const std::vector<LabelMap>& pred_nuclei,
                                const std::vector<LabelMap>& gt_nuclei, double iou_threshold) {
    std::size_t gt_count = 0;
    for (const auto& g : gt_nuclei) gt_count += instance_ids(g).size();
    const auto records = match_detections(dets, pred_nuclei, gt_nuclei, iou_threshold);
    return average_precision(records, gt_count);
}

// Mean end-point error over `region`.
inline double flow_epe(const FlowField& est, const FlowField& gt, const Mask& region) {
    require_same_shape(est.u, gt.u, "flow_epe");
    require_same_shape(est.u, region, "flow_epe");
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < region.size(); ++i) {
        if (!region[i]) continue;
        sum += std::hypot(est.u[i] - gt.u[i], est.v[i] - gt.v[i]);
        ++n;
    }
    if (n == 0) throw std::invalid_argument("flow_epe: empty region");
    return sum / static_cast<double>(n);
}

}  // namespace nucprop
