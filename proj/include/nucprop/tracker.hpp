#pragma once

#include <map>
#include <optional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "nucprop/core.hpp"
#include "nucprop/grid.hpp"
#include "nucprop/hungarian.hpp"

namespace nucprop {

struct LinkConfig {
    double min_link_iou = 0.2;
    // Consecutive ABSENT frames a track may carry before it is closed.
    int gap_tolerance = 2;

    void validate() const {
        if (!(min_link_iou >= 0.0 && min_link_iou <= 1.0)) {
            throw std::invalid_argument("LinkConfig: min_link_iou must lie in [0, 1]");
        }
        if (gap_tolerance < 0) throw std::invalid_argument("LinkConfig: gap_tolerance must be >= 0");
    }
};

struct Link {
    InstanceId a = 0;
    InstanceId b = 0;
    double iou = 0.0;
    friend bool operator==(const Link&, const Link&) = default;
};

// One cell followed through consecutive frames. entries[i] is the cell id in
// frame first_frame + i, or nullopt when the cell was not detected there.
struct Track {
    int track_id = 0;
    int first_frame = 0;
    std::vector<std::optional<InstanceId>> entries;

    int last_frame() const noexcept { return first_frame + static_cast<int>(entries.size()) - 1; }
    int length() const noexcept { return static_cast<int>(entries.size()); }
    bool covers(int frame) const noexcept { return frame >= first_frame && frame <= last_frame(); }
    std::optional<InstanceId> cell_at(int frame) const {
        if (!covers(frame)) return std::nullopt;
        return entries[static_cast<std::size_t>(frame - first_frame)];
    }
    friend bool operator==(const Track&, const Track&) = default;
};

namespace detail {

struct OverlapTable {
    std::map<InstanceId, std::size_t> area_a;
    std::map<InstanceId, std::size_t> area_b;
    std::map<std::pair<InstanceId, InstanceId>, std::size_t> inter;

    double iou(InstanceId a, InstanceId b) const {
        const auto it = inter.find({a, b});
        if (it == inter.end()) return 0.0;
        const double i = static_cast<double>(it->second);
        return i / (static_cast<double>(area_a.at(a) + area_b.at(b)) - i);
    }
};

inline OverlapTable overlaps(const LabelMap& a, const LabelMap& b) {
    require_same_shape(a, b, "overlaps");
    OverlapTable t;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i] != 0) ++t.area_a[a[i]];
        if (b[i] != 0) ++t.area_b[b[i]];
        if (a[i] != 0 && b[i] != 0) ++t.inter[{a[i], b[i]}];
    }
    return t;
}

// Maximum-weight matching on an IoU matrix; edges below `min_iou` (and all
// zero-overlap edges) are dropped before solving.
inline std::vector<std::pair<std::size_t, std::size_t>> match_iou_matrix(
    const std::vector<std::vector<double>>& weights, double min_iou) {
    std::vector<std::vector<double>> pruned = weights;
    for (auto& row : pruned) {
        for (double& w : row) {
            if (w < min_iou || w <= 0.0) w = 0.0;
        }
    }
    const auto assignment = max_weight_assignment(pruned);
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (std::size_t r = 0; r < assignment.size(); ++r) {
        const int c = assignment[r];
        if (c >= 0 && pruned[r][static_cast<std::size_t>(c)] > 0.0) out.emplace_back(r, static_cast<std::size_t>(c));
    }
    return out;
}

}  // namespace detail

// Maximum-weight bipartite matching between the instances of two frames,
// weighted by IoU, keeping only edges with IoU >= min_link_iou. Sorted by id_a.
inline std::vector<Link> link_frames(const LabelMap& labels_a, const LabelMap& labels_b, const LinkConfig& cfg = {}) {
    cfg.validate();
    const auto table = detail::overlaps(labels_a, labels_b);
    std::vector<InstanceId> ids_a;
    std::vector<InstanceId> ids_b;
    for (const auto& [id, n] : table.area_a) ids_a.push_back(id);
    for (const auto& [id, n] : table.area_b) ids_b.push_back(id);
    std::vector<std::vector<double>> w(ids_a.size(), std::vector<double>(ids_b.size(), 0.0));
    for (std::size_t i = 0; i < ids_a.size(); ++i) {
        for (std::size_t j = 0; j < ids_b.size(); ++j) w[i][j] = table.iou(ids_a[i], ids_b[j]);
    }
    std::vector<Link> links;
    for (const auto& [i, j] : detail::match_iou_matrix(w, cfg.min_link_iou)) {
        links.push_back({ids_a[i], ids_b[j], w[i][j]});
    }
    return links;
}

// Chains frame-to-frame matches into tracks. A track that finds no partner
// records ABSENT and keeps searching with its last detected mask; after more
// than gap_tolerance consecutive misses it is closed and its trailing ABSENT
// entries are dropped. Unmatched instances open new tracks. Track ids follow
// creation order (frame, then instance id).
inline std::vector<Track> build_tracks(const std::vector<LabelMap>& cell_labels, const LinkConfig& cfg = {}) {
    cfg.validate();
    if (cell_labels.empty()) throw std::invalid_argument("build_tracks: empty frame sequence");
    for (const auto& f : cell_labels) require_same_shape(cell_labels.front(), f, "build_tracks");

    struct Active {
        Track track;
        int last_seen_frame = 0;
        InstanceId last_id = 0;
        int misses = 0;
    };
    std::vector<Track> done;
    std::vector<Active> active;
    int next_id = 0;

    auto close = [&](Active& a) {
        while (!a.track.entries.empty() && !a.track.entries.back()) a.track.entries.pop_back();
        done.push_back(std::move(a.track));
    };

    for (InstanceId id : instance_ids(cell_labels.front())) {
        active.push_back({Track{next_id++, 0, {id}}, 0, id, 0});
    }

    for (int f = 1; f < static_cast<int>(cell_labels.size()); ++f) {
        const LabelMap& cur = cell_labels[static_cast<std::size_t>(f)];
        const auto cur_ids = instance_ids(cur);

        // IoU of each active track's last detection against this frame.
        std::map<int, detail::OverlapTable> tables;
        for (const auto& a : active) {
            if (!tables.contains(a.last_seen_frame)) {
                tables.emplace(a.last_seen_frame,
                               detail::overlaps(cell_labels[static_cast<std::size_t>(a.last_seen_frame)], cur));
            }
        }
        std::vector<std::vector<double>> w(active.size(), std::vector<double>(cur_ids.size(), 0.0));
        for (std::size_t i = 0; i < active.size(); ++i) {
            const auto& table = tables.at(active[i].last_seen_frame);
            for (std::size_t j = 0; j < cur_ids.size(); ++j) w[i][j] = table.iou(active[i].last_id, cur_ids[j]);
        }
        std::vector<int> track_to_instance(active.size(), -1);
        std::vector<char> instance_taken(cur_ids.size(), 0);
        for (const auto& [i, j] : detail::match_iou_matrix(w, cfg.min_link_iou)) {
            track_to_instance[i] = static_cast<int>(j);
            instance_taken[j] = 1;
        }

        std::vector<Active> still_active;
        for (std::size_t i = 0; i < active.size(); ++i) {
            Active& a = active[i];
            if (track_to_instance[i] >= 0) {
                const InstanceId id = cur_ids[static_cast<std::size_t>(track_to_instance[i])];
                a.track.entries.emplace_back(id);
                a.last_seen_frame = f;
                a.last_id = id;
                a.misses = 0;
                still_active.push_back(std::move(a));
            } else if (a.misses + 1 > cfg.gap_tolerance) {
                close(a);
            } else {
                a.track.entries.emplace_back(std::nullopt);
                ++a.misses;
                still_active.push_back(std::move(a));
            }
        }
        for (std::size_t j = 0; j < cur_ids.size(); ++j) {
            if (!instance_taken[j]) still_active.push_back({Track{next_id++, f, {cur_ids[j]}}, f, cur_ids[j], 0});
        }
        active = std::move(still_active);
    }
    for (auto& a : active) close(a);
    std::sort(done.begin(), done.end(), [](const Track& x, const Track& y) { return x.track_id < y.track_id; });
    return done;
}

}  // namespace nucprop
