#pragma once

#include <iostream>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "nucprop/io.hpp"
#include "nucprop/metrics.hpp"
#include "nucprop/motion.hpp"
#include "nucprop/propagate.hpp"
#include "nucprop/sim.hpp"
#include "nucprop/tracker.hpp"

namespace nucprop {

namespace detail {

// Bad option values found after parsing; reported like a usage error.
class UsageError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

inline void require(bool ok, const std::string& what) {
    if (!ok) throw std::runtime_error(what);
}

inline json merge_report(const fs::path& path, const json& fresh) {
    json out = json::object();
    if (!path.empty() && fs::exists(path)) {
        try {
            out = read_json(path);
        } catch (const FormatError&) {
            out = json::object();
        }
        if (!out.is_object()) out = json::object();
    }
    const json base = report_json({});
    for (const auto& [k, v] : base.items()) {
        if (!out.contains(k)) out[k] = v;
    }
    for (const auto& [k, v] : fresh.items()) {
        if (!v.is_null()) out[k] = v;
    }
    return out;
}

// A rewritten nucleus takes the score of its least uncertain source. Sources
// may themselves have been rewritten, so entries are resolved repeatedly
// until every chain has settled.
inline void inherit_scores(std::vector<ScoreTable>& scores, const UpdateLog& log, const std::vector<Track>& tracks) {
    std::map<int, const Track*> by_id;
    for (const auto& t : tracks) by_id[t.track_id] = &t;
    std::vector<const UpdateLogEntry*> pending;
    for (const auto& e : log) {
        if (e.updated() && e.cell_id != 0) pending.push_back(&e);
    }
    std::set<std::pair<int, InstanceId>> unresolved;
    for (const auto* e : pending) unresolved.insert({e->frame, e->cell_id});
    while (!pending.empty()) {
        std::vector<const UpdateLogEntry*> left;
        for (const auto* e : pending) {
            const Track& track = *by_id.at(e->track_id);
            std::size_t best = 0;
            for (std::size_t k = 1; k < e->sources.size(); ++k) {
                if (e->source_uncertainty[k] < e->source_uncertainty[best]) best = k;
            }
            const int frame = e->sources.at(best);
            const InstanceId src = track.cell_at(frame).value();
            if (unresolved.count({frame, src})) {
                left.push_back(e);
                continue;
            }
            auto& table = scores.at(static_cast<std::size_t>(frame));
            const auto it = table.find(src);
            if (it == table.end()) throw std::runtime_error("no score for source nucleus " + std::to_string(src));
            scores.at(static_cast<std::size_t>(e->frame))[e->cell_id] = it->second;
            unresolved.erase({e->frame, e->cell_id});
        }
        if (left.size() == pending.size()) throw std::runtime_error("update log has a cyclic source chain");
        pending = std::move(left);
    }
}

}  // namespace detail

// Command-line driver. Returns 0 on success, 2 on usage errors and 1 on
// runtime errors.
inline int cli_main(const std::vector<std::string>& args, std::ostream& out = std::cout,
                    std::ostream& err = std::cerr) {
    CLI::App app{"Uncertainty-driven nucleus propagation for oscillating-signal cell videos", "nucprop"};
    app.require_subcommand(1);
    app.fallthrough(false);

    // simulate
    SimConfig sim;
    std::string sim_out;
    std::string waveform = "square";
    bool deformable_nuclei = false;
    auto* simulate = app.add_subcommand("simulate", "Generate a synthetic video with ground truth");
    simulate->add_option("--out", sim_out, "Output dataset directory")->required();
    simulate->add_option("--seed", sim.seed, "Random seed")->capture_default_str();
    simulate->add_option("--width", sim.width, "Image width")->capture_default_str();
    simulate->add_option("--height", sim.height, "Image height")->capture_default_str();
    simulate->add_option("--frames", sim.frames, "Frame count")->capture_default_str();
    simulate->add_option("--cells", sim.cells, "Cell count")->capture_default_str();
    simulate->add_option("--period", sim.oscillation_period, "Oscillation period in frames")->capture_default_str();
    simulate->add_option("--waveform", waveform, "square or sine")
        ->check(CLI::IsMember({"square", "sine"}))
        ->capture_default_str();
    simulate->add_option("--background", sim.background_intensity, "Background intensity")->capture_default_str();
    simulate->add_option("--cytosol", sim.cytosol_intensity, "Cytosol intensity")->capture_default_str();
    simulate->add_option("--amplitude", sim.nucleus_contrast_amplitude, "Nucleus contrast amplitude")
        ->capture_default_str();
    simulate->add_option("--noise", sim.noise_sigma, "Gaussian noise sigma")->capture_default_str();
    simulate->add_option("--control-points", sim.motion.control_points, "Deformation grid size per axis")
        ->capture_default_str();
    simulate->add_option("--magnitude", sim.motion.magnitude, "Deformation magnitude in pixels")
        ->capture_default_str();
    simulate->add_flag("--deformable-nuclei", deformable_nuclei, "Advect nuclei pixel-wise instead of rigidly");

    // degrade
    DegradeConfig deg;
    std::string deg_in, deg_out;
    auto* degrade = app.add_subcommand("degrade", "Emulate segmentation failures on low-contrast frames");
    degrade->add_option("--in", deg_in, "Dataset directory with ground truth")->required();
    degrade->add_option("--out", deg_out, "Output directory (default: in place)");
    degrade->add_option("--seed", deg.seed, "Random seed")->capture_default_str();
    degrade->add_option("--visibility", deg.visibility_threshold, "Contrast below which nuclei are unreliable")
        ->capture_default_str();
    degrade->add_option("--miss-prob", deg.miss_probability, "Probability of dropping an invisible nucleus")
        ->capture_default_str();
    degrade->add_option("--erode-dilate", deg.erode_dilate_px, "Largest erode/dilate radius")->capture_default_str();
    degrade->add_option("--min-erode-dilate", deg.min_erode_dilate_px, "Smallest erode/dilate radius")
        ->capture_default_str();
    degrade->add_option("--split-prob", deg.split_probability, "Probability of splitting a perturbed nucleus")
        ->capture_default_str();
    degrade->add_option("--base-uncertainty", deg.base_uncertainty, "Uncertainty of correct nuclei")
        ->capture_default_str();
    degrade->add_option("--error-uncertainty", deg.error_uncertainty, "Uncertainty of degraded nuclei")
        ->capture_default_str();
    degrade->add_option("--jitter", deg.jitter_sigma, "Per-pixel Gaussian jitter on uncertainty")
        ->capture_default_str();

    // track
    LinkConfig link;
    std::string track_in, track_out;
    auto* track = app.add_subcommand("track", "Link predicted cells into tracks");
    track->add_option("--in", track_in, "Dataset directory with predictions")->required();
    track->add_option("--out", track_out, "Output directory (default: in place)");
    track->add_option("--min-iou", link.min_link_iou, "Minimum IoU for a link")->capture_default_str();
    track->add_option("--gap", link.gap_tolerance, "Frames a track may skip")->capture_default_str();

    // propagate
    PropagationConfig prop;
    std::string prop_in, prop_out, warp = "mean-flow", scope = "uncertain";
    auto* propagate = app.add_subcommand("propagate", "Replace uncertain nuclei with warped neighbours");
    propagate->add_option("--in", prop_in, "Dataset directory with predictions")->required();
    propagate->add_option("--out", prop_out, "Output directory (default: in place)");
    propagate->add_option("--theta", prop.theta, "Hard threshold on mean uncertainty")->capture_default_str();
    propagate->add_option("--alpha", prop.alpha, "One-sided relative threshold")->capture_default_str();
    propagate->add_option("--beta", prop.beta, "Two-sided relative threshold")->capture_default_str();
    propagate->add_option("--warp", warp, "shift-scale, mean-flow or pixel-flow")
        ->check(CLI::IsMember({"shift-scale", "mean-flow", "pixel-flow"}))
        ->capture_default_str();
    propagate->add_flag("--fuse", prop.fuse, "Fuse both neighbours in the two-sided case");
    propagate->add_option("--scope", scope, "uncertain or all")
        ->check(CLI::IsMember({"uncertain", "all"}))
        ->capture_default_str();

    // eval-iou
    std::string iou_in, iou_report, iou_categories;
    auto* eval_iou = app.add_subcommand("eval-iou", "Mean nucleus IoU by update category");
    eval_iou->add_option("--in", iou_in, "Dataset directory")->required();
    eval_iou->add_option("--categories", iou_categories,
                         "Update log to take categories from (default: the dataset's own log)");
    eval_iou->add_option("--report", iou_report, "Report JSON to create or update");

    // eval-map
    std::string map_in, map_report;
    double map_iou = 0.5;
    double map_jitter = 0.0;
    std::uint64_t map_seed = 0;
    auto* eval_map = app.add_subcommand("eval-map", "AP of nucleus detections ranked by score and by entropy");
    eval_map->add_option("--in", map_in, "Dataset directory")->required();
    eval_map->add_option("--iou", map_iou, "IoU threshold for a true positive")->capture_default_str();
    eval_map->add_option("--jitter", map_jitter, "Add U(-j, j) to softmax scores before ranking")
        ->capture_default_str();
    eval_map->add_option("--seed", map_seed, "Seed for the score jitter")->capture_default_str();
    eval_map->add_option("--report", map_report, "Report JSON to create or update");

    // defgen
    DeformationSpec def{10, 10.0, 0};
    int def_w = 128, def_h = 128;
    std::string def_out;
    auto* defgen = app.add_subcommand("defgen", "Write a random elastic flow field");
    defgen->add_option("--out", def_out, "Output .f32 file")->required();
    defgen->add_option("--width", def_w, "Width")->capture_default_str();
    defgen->add_option("--height", def_h, "Height")->capture_default_str();
    defgen->add_option("--control-points", def.control_points, "Control points per axis")->capture_default_str();
    defgen->add_option("--magnitude", def.magnitude, "Control displacement bound in pixels")->capture_default_str();
    defgen->add_option("--seed", def.seed, "Random seed")->capture_default_str();

    // invert-flow
    std::string inv_in, inv_out;
    int inv_iter = 5;
    auto* invert = app.add_subcommand("invert-flow", "Approximate the inverse of a flow field");
    invert->add_option("--in", inv_in, "Input .f32 flow")->required();
    invert->add_option("--out", inv_out, "Output .f32 flow")->required();
    invert->add_option("--iterations", inv_iter, "Fixed-point iterations")->capture_default_str();

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        if (code == 0) return 0;
        const auto chosen = app.get_subcommands();
        err << (chosen.empty() ? app.help() : chosen.front()->help());
        return 2;
    }

    const auto in_place = [](const std::string& in, const std::string& o) { return o.empty() ? in : o; };
    try {
        if (*simulate) {
            sim.waveform = waveform_from_string(waveform);
            sim.rigid_nuclei = !deformable_nuclei;
            try {
                sim.validate();
            } catch (const std::invalid_argument& e) {
                throw detail::UsageError(e.what());
            }
            write_dataset(dataset_from_sim(generate_video(sim)), sim_out);
        } else if (*degrade) {
            try {
                deg.validate();
            } catch (const std::invalid_argument& e) {
                throw detail::UsageError(e.what());
            }
            Dataset d = read_dataset(deg_in);
            detail::require(!d.gt_cells.empty(), deg_in + ": dataset has no ground truth to degrade");
            detail::require(!d.contrast.empty(), deg_in + ": manifest has no per-frame contrast");
            Predictions p = degrade_predictions(d.gt_cells, d.gt_nuclei, d.contrast, deg);
            d.degrade = deg;
            d.pred_cells = std::move(p.cells);
            d.pred_nuclei = std::move(p.nuclei);
            d.uncertainty = std::move(p.uncertainty);
            d.scores = std::move(p.scores);
            d.tracks.reset();
            d.link.reset();
            d.log.reset();
            d.propagation.reset();
            write_dataset(d, in_place(deg_in, deg_out));
        } else if (*track) {
            if (!(link.min_link_iou >= 0.0 && link.min_link_iou <= 1.0) || link.gap_tolerance < 0) {
                throw detail::UsageError("--min-iou must lie in [0, 1] and --gap must be >= 0");
            }
            Dataset d = read_dataset(track_in);
            detail::require(d.has_predictions(), track_in + ": dataset has no predictions (run degrade first)");
            d.tracks = build_tracks(d.pred_cells, link);
            d.link = link;
            write_dataset(d, in_place(track_in, track_out));
        } else if (*propagate) {
            prop.warp_mode = warp_mode_from_string(warp);
            prop.scope = scope_from_string(scope);
            try {
                prop.validate();
            } catch (const std::invalid_argument& e) {
                throw detail::UsageError(e.what());
            }
            Dataset d = read_dataset(prop_in);
            detail::require(d.has_predictions() && !d.uncertainty.empty(),
                            prop_in + ": dataset needs predictions and uncertainty maps");
            detail::require(!d.log, prop_in + ": predictions were already propagated");
            PropagationInput input{&d.pred_cells, &d.pred_nuclei, &d.uncertainty, FlowSet(d.forward, d.backward),
                                   d.tracks};
            PropagationResult r = run_propagation(input, prop);
            d.pred_nuclei = std::move(r.nuclei);
            if (!d.scores.empty()) detail::inherit_scores(d.scores, r.log, r.tracks);
            d.tracks = std::move(r.tracks);
            d.log = std::move(r.log);
            d.propagation = prop;
            write_dataset(d, in_place(prop_in, prop_out));
        } else if (*eval_iou) {
            const Dataset d = read_dataset(iou_in);
            detail::require(!d.gt_nuclei.empty() && d.has_predictions(),
                            iou_in + ": dataset needs ground truth and predictions");
            UpdateLog log = d.log.value_or(UpdateLog{});
            if (!iou_categories.empty()) {
                try {
                    log = read_json(iou_categories).get<UpdateLog>();
                } catch (const json::exception& e) {
                    throw FormatError(iou_categories + ": malformed update log (" + e.what() + ")");
                }
            }
            EvalReport rep;
            rep.iou = mean_iou_by_category(d.pred_cells, d.pred_nuclei, d.gt_cells, d.gt_nuclei, log);
            const json j = detail::merge_report(iou_report, report_json(rep));
            if (!iou_report.empty()) write_json(iou_report, j);
            out << j.dump(2) << "\n";
        } else if (*eval_map) {
            if (!(map_iou > 0.0 && map_iou <= 1.0) || !(map_jitter >= 0.0)) {
                throw detail::UsageError("--iou must lie in (0, 1] and --jitter must be >= 0");
            }
            const Dataset d = read_dataset(map_in);
            detail::require(!d.gt_nuclei.empty() && d.has_predictions() && !d.scores.empty() && !d.uncertainty.empty(),
                            map_in + ": dataset needs ground truth, predictions, scores and uncertainty maps");
            auto sm = collect_detections(d.pred_nuclei, &d.scores, nullptr, ScoreMode::Softmax);
            perturb_scores(sm, map_jitter, map_seed);
            const auto ent = collect_detections(d.pred_nuclei, nullptr, &d.uncertainty, ScoreMode::Entropy);
            EvalReport rep;
            rep.map_sm = average_precision(sm, d.pred_nuclei, d.gt_nuclei, map_iou);
            rep.map_ent = average_precision(ent, d.pred_nuclei, d.gt_nuclei, map_iou);
            const json j = detail::merge_report(map_report, report_json(rep));
            if (!map_report.empty()) write_json(map_report, j);
            out << j.dump(2) << "\n";
        } else if (*defgen) {
            try {
                def.validate();
            } catch (const std::invalid_argument& e) {
                throw detail::UsageError(e.what());
            }
            FlowField f = generate_elastic_flow(def, def_w, def_h);
            quantize_to_float(f);
            write_flow_f32(def_out, f);
        } else if (*invert) {
            if (inv_iter < 0) throw detail::UsageError("--iterations must be >= 0");
            FlowField f = invert_flow(read_flow_f32(inv_in), inv_iter);
            quantize_to_float(f);
            write_flow_f32(inv_out, f);
        }
    } catch (const detail::UsageError& e) {
        err << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

inline int cli_main(int argc, char** argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return cli_main(args);
}

}  // namespace nucprop
