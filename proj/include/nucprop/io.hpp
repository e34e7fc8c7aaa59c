#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nucprop/grid.hpp"
#include "nucprop/metrics.hpp"
#include "nucprop/parallel.hpp"
#include "nucprop/propagate.hpp"
#include "nucprop/sim.hpp"
#include "nucprop/tracker.hpp"

namespace nucprop {

namespace fs = std::filesystem;
using json = nlohmann::json;

// Missing, truncated or malformed file on disk.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr int kManifestVersion = 1;

inline std::string frame_name(const char* prefix, int frame, const char* ext) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s_%04d.%s", prefix, frame, ext);
    return buf;
}

inline std::string shape_string(int width, int height) {
    return std::to_string(width) + "x" + std::to_string(height);
}

inline std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const fs::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

inline json read_json(const fs::path& path) {
    const std::string text = read_file(path);
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        throw FormatError(path.string() + ": invalid JSON (" + e.what() + ")");
    }
}

inline void write_json(const fs::path& path, const json& j) { write_file(path, j.dump(2) + "\n"); }

// ---- PGM ----------------------------------------------------------------

// 16-bit binary PGM, samples big-endian.
inline void write_pgm(const fs::path& path, int width, int height, const std::vector<std::uint16_t>& samples) {
    if (samples.size() != static_cast<std::size_t>(width) * static_cast<std::size_t>(height)) {
        throw DimensionError("write_pgm: sample count does not match " + shape_string(width, height));
    }
    std::string bytes = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n65535\n";
    const std::size_t header = bytes.size();
    bytes.resize(header + 2 * samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        bytes[header + 2 * i] = static_cast<char>(samples[i] >> 8);
        bytes[header + 2 * i + 1] = static_cast<char>(samples[i] & 0xff);
    }
    write_file(path, bytes);
}

// Reads 8- or 16-bit P5. When expected dimensions are given, a mismatch is
// a DimensionError naming the file.
inline Grid<std::uint16_t> read_pgm(const fs::path& path, std::optional<std::pair<int, int>> expected = {}) {
    const std::string bytes = read_file(path);
    std::size_t pos = 0;
    const auto fail = [&](const std::string& why) -> FormatError {
        std::string msg = path.string() + ": " + why;
        if (expected) msg += " (expected " + shape_string(expected->first, expected->second) + " 16-bit PGM)";
        return FormatError(msg);
    };
    const auto skip_space = [&] {
        while (pos < bytes.size()) {
            if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
                ++pos;
            } else {
                break;
            }
        }
    };
    const auto read_int = [&]() -> long {
        skip_space();
        const std::size_t start = pos;
        while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) ++pos;
        if (start == pos || pos - start > 9) throw fail("malformed PGM header");
        return std::stol(bytes.substr(start, pos - start));
    };
    if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') throw fail("not a binary PGM (P5)");
    pos = 2;
    const long w = read_int();
    const long h = read_int();
    const long maxval = read_int();
    if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        throw fail("malformed PGM header");
    }
    ++pos;
    if (maxval < 1 || maxval > 65535) throw fail("PGM maxval out of range");
    if (expected && (w != expected->first || h != expected->second)) {
        throw DimensionError(path.string() + ": image is " + shape_string(static_cast<int>(w), static_cast<int>(h)) +
                             ", expected " + shape_string(expected->first, expected->second));
    }
    const std::size_t n = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
    const std::size_t bps = maxval > 255 ? 2 : 1;
    if (bytes.size() - pos < n * bps) {
        throw fail("truncated pixel data: " + std::to_string(bytes.size() - pos) + " bytes, need " +
                   std::to_string(n * bps));
    }
    Grid<std::uint16_t> out(static_cast<int>(w), static_cast<int>(h));
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + pos);
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = bps == 2 ? static_cast<std::uint16_t>((p[2 * i] << 8) | p[2 * i + 1]) : p[i];
    }
    return out;
}

inline void write_labels(const fs::path& path, const LabelMap& labels) {
    std::vector<std::uint16_t> s(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] > 65535) throw std::invalid_argument(path.string() + ": instance id exceeds 65535");
        s[i] = static_cast<std::uint16_t>(labels[i]);
    }
    write_pgm(path, labels.width(), labels.height(), s);
}

inline LabelMap read_labels(const fs::path& path, std::optional<std::pair<int, int>> expected = {}) {
    const auto g = read_pgm(path, expected);
    LabelMap out(g.width(), g.height());
    for (std::size_t i = 0; i < g.size(); ++i) out[i] = g[i];
    return out;
}

// Image values must already be integers in [0, 65535].
inline void write_image(const fs::path& path, const ScalarField& image) {
    std::vector<std::uint16_t> s(image.size());
    for (std::size_t i = 0; i < image.size(); ++i) {
        const double v = image[i];
        if (!(v >= 0.0 && v <= 65535.0) || v != std::floor(v)) {
            throw std::invalid_argument(path.string() + ": image value is not an integer in [0, 65535]");
        }
        s[i] = static_cast<std::uint16_t>(v);
    }
    write_pgm(path, image.width(), image.height(), s);
}

inline ScalarField read_image(const fs::path& path, std::optional<std::pair<int, int>> expected = {}) {
    const auto g = read_pgm(path, expected);
    ScalarField out(g.width(), g.height());
    for (std::size_t i = 0; i < g.size(); ++i) out[i] = g[i];
    return out;
}

// ---- raw float32 --------------------------------------------------------

inline fs::path sidecar_path(const fs::path& raw) {
    fs::path p = raw;
    p.replace_extension(".json");
    return p;
}

inline std::string encode_f32(const std::vector<double>& values) {
    std::string bytes(values.size() * 4, '\0');
    for (std::size_t i = 0; i < values.size(); ++i) {
        std::uint32_t bits = std::bit_cast<std::uint32_t>(static_cast<float>(values[i]));
        for (int b = 0; b < 4; ++b) bytes[4 * i + static_cast<std::size_t>(b)] = static_cast<char>((bits >> (8 * b)) & 0xff);
    }
    return bytes;
}

inline std::vector<double> decode_f32(const fs::path& path, std::size_t count, const std::string& shape) {
    const std::string bytes = read_file(path);
    if (bytes.size() != count * 4) {
        throw FormatError(path.string() + ": size error, " + std::to_string(bytes.size()) + " bytes, expected " +
                          std::to_string(count * 4) + " for " + shape + " float32");
    }
    std::vector<double> out(count);
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    for (std::size_t i = 0; i < count; ++i) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(p[4 * i + static_cast<std::size_t>(b)]) << (8 * b);
        out[i] = std::bit_cast<float>(bits);
    }
    return out;
}

inline std::pair<int, int> read_sidecar_shape(const json& side, const fs::path& path) {
    if (!side.is_object() || !side.contains("width") || !side.contains("height") ||
        !side["width"].is_number_integer() || !side["height"].is_number_integer()) {
        throw FormatError(path.string() + ": sidecar needs integer width and height");
    }
    return {side["width"].get<int>(), side["height"].get<int>()};
}

inline void check_shape(const fs::path& path, std::pair<int, int> got, std::optional<std::pair<int, int>> expected) {
    if (expected && got != *expected) {
        throw DimensionError(path.string() + ": declared " + shape_string(got.first, got.second) + ", expected " +
                             shape_string(expected->first, expected->second));
    }
}

// Little-endian float32, row-major, with a {width, height} sidecar.
inline void write_scalar_f32(const fs::path& path, const ScalarField& field) {
    write_file(path, encode_f32(field.storage()));
    write_json(sidecar_path(path), json{{"width", field.width()}, {"height", field.height()}});
}

inline ScalarField read_scalar_f32(const fs::path& path, std::optional<std::pair<int, int>> expected = {}) {
    const auto side_path = sidecar_path(path);
    const auto shape = read_sidecar_shape(read_json(side_path), side_path);
    check_shape(side_path, shape, expected);
    const auto [w, h] = shape;
    auto values = decode_f32(path, static_cast<std::size_t>(w) * static_cast<std::size_t>(h), shape_string(w, h));
    return ScalarField(w, h, std::move(values));
}

// Interleaved (u, v) float32 pairs; the sidecar also records the direction.
inline void write_flow_f32(const fs::path& path, const FlowField& flow) {
    std::vector<double> uv(2 * flow.u.size());
    for (std::size_t i = 0; i < flow.u.size(); ++i) {
        uv[2 * i] = flow.u[i];
        uv[2 * i + 1] = flow.v[i];
    }
    write_file(path, encode_f32(uv));
    write_json(sidecar_path(path), json{{"width", flow.width()},
                                        {"height", flow.height()},
                                        {"source", flow.source},
                                        {"target", flow.target},
                                        {"max_magnitude", flow.max_magnitude}});
}

inline FlowField read_flow_f32(const fs::path& path, std::optional<std::pair<int, int>> expected = {}) {
    const auto side_path = sidecar_path(path);
    const json side = read_json(side_path);
    const auto shape = read_sidecar_shape(side, side_path);
    check_shape(side_path, shape, expected);
    const auto [w, h] = shape;
    const auto uv = decode_f32(path, 2 * static_cast<std::size_t>(w) * static_cast<std::size_t>(h),
                               shape_string(w, h) + " interleaved (u,v)");
    FlowField flow;
    flow.u = ScalarField(w, h);
    flow.v = ScalarField(w, h);
    for (std::size_t i = 0; i < flow.u.size(); ++i) {
        flow.u[i] = uv[2 * i];
        flow.v[i] = uv[2 * i + 1];
    }
    flow.source = side.value("source", 0);
    flow.target = side.value("target", 1);
    flow.max_magnitude = side.value("max_magnitude", flow.observed_max_magnitude());
    return flow;
}

// ---- JSON conversions ---------------------------------------------------

inline const char* to_string(Waveform w) noexcept { return w == Waveform::Sine ? "sine" : "square"; }

template <typename E>
E enum_from_string(const std::string& s, std::initializer_list<E> values, const char* what) {
    for (E v : values) {
        if (s == to_string(v)) return v;
    }
    throw std::invalid_argument(std::string("unknown ") + what + " '" + s + "'");
}

inline Waveform waveform_from_string(const std::string& s) {
    return enum_from_string(s, {Waveform::Square, Waveform::Sine}, "waveform");
}
inline WarpMode warp_mode_from_string(const std::string& s) {
    return enum_from_string(s, {WarpMode::ShiftScale, WarpMode::MeanFlow, WarpMode::PixelFlow}, "warp mode");
}
inline UpdateScope scope_from_string(const std::string& s) {
    return enum_from_string(s, {UpdateScope::UncertainOnly, UpdateScope::All}, "scope");
}
inline UpdateAction action_from_string(const std::string& s) {
    return enum_from_string(s,
                            {UpdateAction::None, UpdateAction::OneSidedPrev, UpdateAction::OneSidedNext,
                             UpdateAction::TwoSided, UpdateAction::Interpolated},
                            "update action");
}

inline void to_json(json& j, const DeformationSpec& d) {
    j = json{{"control_points", d.control_points}, {"magnitude", d.magnitude}, {"seed", d.seed}};
}
inline void from_json(const json& j, DeformationSpec& d) {
    j.at("control_points").get_to(d.control_points);
    j.at("magnitude").get_to(d.magnitude);
    j.at("seed").get_to(d.seed);
}

inline void to_json(json& j, const SimConfig& c) {
    j = json{{"width", c.width},
             {"height", c.height},
             {"frames", c.frames},
             {"cells", c.cells},
             {"seed", c.seed},
             {"background_intensity", c.background_intensity},
             {"cytosol_intensity", c.cytosol_intensity},
             {"nucleus_contrast_amplitude", c.nucleus_contrast_amplitude},
             {"oscillation_period", c.oscillation_period},
             {"waveform", to_string(c.waveform)},
             {"noise_sigma", c.noise_sigma},
             {"motion", c.motion},
             {"cell_radius_min", c.cell_radius_min},
             {"cell_radius_max", c.cell_radius_max},
             {"nucleus_scale", c.nucleus_scale},
             {"rigid_nuclei", c.rigid_nuclei}};
}
inline void from_json(const json& j, SimConfig& c) {
    j.at("width").get_to(c.width);
    j.at("height").get_to(c.height);
    j.at("frames").get_to(c.frames);
    j.at("cells").get_to(c.cells);
    j.at("seed").get_to(c.seed);
    j.at("background_intensity").get_to(c.background_intensity);
    j.at("cytosol_intensity").get_to(c.cytosol_intensity);
    j.at("nucleus_contrast_amplitude").get_to(c.nucleus_contrast_amplitude);
    j.at("oscillation_period").get_to(c.oscillation_period);
    c.waveform = waveform_from_string(j.at("waveform").get<std::string>());
    j.at("noise_sigma").get_to(c.noise_sigma);
    j.at("motion").get_to(c.motion);
    j.at("cell_radius_min").get_to(c.cell_radius_min);
    j.at("cell_radius_max").get_to(c.cell_radius_max);
    j.at("nucleus_scale").get_to(c.nucleus_scale);
    j.at("rigid_nuclei").get_to(c.rigid_nuclei);
}

inline void to_json(json& j, const DegradeConfig& c) {
    j = json{{"seed", c.seed},
             {"visibility_threshold", c.visibility_threshold},
             {"miss_probability", c.miss_probability},
             {"erode_dilate_px", c.erode_dilate_px},
             {"min_erode_dilate_px", c.min_erode_dilate_px},
             {"split_probability", c.split_probability},
             {"base_uncertainty", c.base_uncertainty},
             {"error_uncertainty", c.error_uncertainty},
             {"jitter_sigma", c.jitter_sigma}};
}
inline void from_json(const json& j, DegradeConfig& c) {
    j.at("seed").get_to(c.seed);
    j.at("visibility_threshold").get_to(c.visibility_threshold);
    j.at("miss_probability").get_to(c.miss_probability);
    j.at("erode_dilate_px").get_to(c.erode_dilate_px);
    j.at("min_erode_dilate_px").get_to(c.min_erode_dilate_px);
    j.at("split_probability").get_to(c.split_probability);
    j.at("base_uncertainty").get_to(c.base_uncertainty);
    j.at("error_uncertainty").get_to(c.error_uncertainty);
    j.at("jitter_sigma").get_to(c.jitter_sigma);
}

inline void to_json(json& j, const PropagationConfig& c) {
    j = json{{"theta", c.theta},
             {"alpha", c.alpha},
             {"beta", c.beta},
             {"warp", to_string(c.warp_mode)},
             {"fuse", c.fuse},
             {"scope", to_string(c.scope)}};
}
inline void from_json(const json& j, PropagationConfig& c) {
    j.at("theta").get_to(c.theta);
    j.at("alpha").get_to(c.alpha);
    j.at("beta").get_to(c.beta);
    c.warp_mode = warp_mode_from_string(j.at("warp").get<std::string>());
    j.at("fuse").get_to(c.fuse);
    c.scope = scope_from_string(j.at("scope").get<std::string>());
}

inline void to_json(json& j, const LinkConfig& c) {
    j = json{{"min_link_iou", c.min_link_iou}, {"gap_tolerance", c.gap_tolerance}};
}
inline void from_json(const json& j, LinkConfig& c) {
    j.at("min_link_iou").get_to(c.min_link_iou);
    j.at("gap_tolerance").get_to(c.gap_tolerance);
}

inline void to_json(json& j, const Track& t) {
    json entries = json::array();
    for (const auto& e : t.entries) entries.push_back(e ? json(*e) : json(nullptr));
    j = json{{"track_id", t.track_id}, {"first_frame", t.first_frame}, {"entries", entries}};
}
inline void from_json(const json& j, Track& t) {
    j.at("track_id").get_to(t.track_id);
    j.at("first_frame").get_to(t.first_frame);
    t.entries.clear();
    for (const auto& e : j.at("entries")) {
        t.entries.push_back(e.is_null() ? std::optional<InstanceId>{} : std::optional<InstanceId>{e.get<InstanceId>()});
    }
}

inline json uncertainty_json(const MeanUncertainty& u) { return u.is_finite() ? json(u.value()) : json(nullptr); }
inline MeanUncertainty uncertainty_from_json(const json& j) {
    return j.is_null() ? MeanUncertainty::infinite() : MeanUncertainty::of(j.get<double>());
}

inline void to_json(json& j, const UpdateLogEntry& e) {
    json su = json::array();
    for (const auto& u : e.source_uncertainty) su.push_back(uncertainty_json(u));
    j = json{{"track_id", e.track_id},
             {"frame", e.frame},
             {"cell_id", e.cell_id},
             {"action", to_string(e.action)},
             {"branch", to_string(e.branch)},
             {"sources", e.sources},
             {"source_uncertainty", su},
             {"before", uncertainty_json(e.before)},
             {"after", uncertainty_json(e.after)},
             {"area_before", e.area_before},
             {"area_after", e.area_after}};
}
inline void from_json(const json& j, UpdateLogEntry& e) {
    j.at("track_id").get_to(e.track_id);
    j.at("frame").get_to(e.frame);
    j.at("cell_id").get_to(e.cell_id);
    e.action = action_from_string(j.at("action").get<std::string>());
    e.branch = action_from_string(j.at("branch").get<std::string>());
    j.at("sources").get_to(e.sources);
    e.source_uncertainty.clear();
    for (const auto& u : j.at("source_uncertainty")) e.source_uncertainty.push_back(uncertainty_from_json(u));
    e.before = uncertainty_from_json(j.at("before"));
    e.after = uncertainty_from_json(j.at("after"));
    j.at("area_before").get_to(e.area_before);
    j.at("area_after").get_to(e.area_after);
}

inline json scores_json(const ScoreTable& t) {
    json j = json::object();
    for (const auto& [id, s] : t) j[std::to_string(id)] = s;
    return j;
}

inline ScoreTable scores_from_json(const json& j, const fs::path& path) {
    if (!j.is_object()) throw FormatError(path.string() + ": expected an object of id -> score");
    ScoreTable t;
    for (const auto& [key, value] : j.items()) {
        std::size_t used = 0;
        unsigned long id = 0;
        try {
            id = std::stoul(key, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != key.size() || !value.is_number()) throw FormatError(path.string() + ": bad score entry '" + key + "'");
        t[static_cast<InstanceId>(id)] = value.get<double>();
    }
    return t;
}

// Evaluation report; fields a command did not compute are written as null.
struct EvalReport {
    std::optional<double> map_sm;
    std::optional<double> map_ent;
    std::optional<CategoryReport> iou;
};

inline json report_json(const EvalReport& r) {
    const auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
    json j{{"map_sm", opt(r.map_sm)}, {"map_ent", opt(r.map_ent)}};
    if (r.iou) {
        j["iou_all"] = r.iou->all.mean_iou;
        j["iou_updated"] = r.iou->updated.mean_iou;
        j["iou_interpolated"] = r.iou->interpolated.mean_iou;
        j["iou_non_updated"] = r.iou->non_updated.mean_iou;
        j["counts"] = json{{"all", r.iou->all.count},
                           {"updated", r.iou->updated.count},
                           {"interpolated", r.iou->interpolated.count},
                           {"non_updated", r.iou->non_updated.count}};
    } else {
        for (const char* k : {"iou_all", "iou_updated", "iou_interpolated", "iou_non_updated", "counts"}) j[k] = nullptr;
    }
    return j;
}

// ---- dataset ------------------------------------------------------------

// In-memory form of a dataset directory. Empty vectors mean "not present".
struct Dataset {
    int width = 0;
    int height = 0;
    int frames = 0;
    std::optional<SimConfig> sim;
    std::optional<DegradeConfig> degrade;
    std::optional<PropagationConfig> propagation;
    std::vector<double> contrast;
    std::vector<ScalarField> images;
    std::vector<LabelMap> gt_cells;
    std::vector<LabelMap> gt_nuclei;
    std::vector<LabelMap> pred_cells;
    std::vector<LabelMap> pred_nuclei;
    std::vector<ScalarField> uncertainty;
    std::vector<FlowField> forward;
    std::vector<FlowField> backward;
    std::vector<ScoreTable> scores;
    std::optional<std::vector<Track>> tracks;
    std::optional<LinkConfig> link;
    std::optional<UpdateLog> log;

    bool has_predictions() const noexcept { return !pred_nuclei.empty(); }
    bool has_flows() const noexcept { return !forward.empty(); }
};

inline Dataset dataset_from_sim(SimDataset sim) {
    Dataset d;
    d.width = sim.config.width;
    d.height = sim.config.height;
    d.frames = sim.config.frames;
    d.sim = sim.config;
    d.contrast = std::move(sim.contrast);
    d.images = std::move(sim.images);
    d.gt_cells = std::move(sim.cells);
    d.gt_nuclei = std::move(sim.nuclei);
    d.forward = std::move(sim.forward);
    d.backward = std::move(sim.backward);
    return d;
}

namespace detail {

inline void check_frames(const Dataset& d, std::size_t n, const char* what, std::size_t expected) {
    if (n != 0 && n != expected) {
        throw DimensionError(std::string("dataset: ") + what + " has " + std::to_string(n) + " frames, expected " +
                             std::to_string(expected));
    }
    (void)d;
}

inline void validate_dataset(const Dataset& d) {
    if (d.width <= 0 || d.height <= 0 || d.frames <= 0) throw DimensionError("dataset: empty dimensions");
    const auto f = static_cast<std::size_t>(d.frames);
    check_frames(d, d.images.size(), "images", f);
    check_frames(d, d.gt_cells.size(), "gt/cells", f);
    check_frames(d, d.gt_nuclei.size(), "gt/nuclei", f);
    check_frames(d, d.pred_cells.size(), "pred/cells", f);
    check_frames(d, d.pred_nuclei.size(), "pred/nuclei", f);
    check_frames(d, d.uncertainty.size(), "unc", f);
    check_frames(d, d.scores.size(), "scores", f);
    check_frames(d, d.forward.size(), "flow/fwd", f - 1);
    check_frames(d, d.backward.size(), "flow/bwd", f - 1);
    if (!d.contrast.empty() && d.contrast.size() != f) throw DimensionError("dataset: contrast length differs");
    const auto same = [&](const auto& grids, const char* what) {
        for (const auto& g : grids) {
            if (g.width() != d.width || g.height() != d.height) {
                throw DimensionError(std::string("dataset: ") + what + " grid is " + shape_string(g.width(), g.height()) +
                                     ", expected " + shape_string(d.width, d.height));
            }
        }
    };
    same(d.images, "images");
    same(d.gt_cells, "gt/cells");
    same(d.gt_nuclei, "gt/nuclei");
    same(d.pred_cells, "pred/cells");
    same(d.pred_nuclei, "pred/nuclei");
    same(d.uncertainty, "unc");
    for (const auto* flows : {&d.forward, &d.backward}) {
        for (const auto& fl : *flows) {
            if (fl.width() != d.width || fl.height() != d.height) throw DimensionError("dataset: flow grid has wrong shape");
        }
    }
}

inline void write_dataset_contents(const Dataset& d, const fs::path& dir) {
    json paths = json::object();
    const auto frames = static_cast<std::size_t>(d.frames);
    const auto label_dir = [&](const std::vector<LabelMap>& maps, const fs::path& sub) {
        fs::create_directories(dir / sub);
        parallel_for(maps.size(), [&](std::size_t f) {
            write_labels(dir / sub / frame_name("frame", static_cast<int>(f), "pgm"), maps[f]);
        });
    };
    if (!d.images.empty()) {
        fs::create_directories(dir / "images");
        parallel_for(frames, [&](std::size_t f) {
            write_image(dir / "images" / frame_name("frame", static_cast<int>(f), "pgm"), d.images[f]);
        });
        paths["images"] = "images";
    }
    if (!d.gt_cells.empty() || !d.gt_nuclei.empty()) {
        if (d.gt_cells.empty() || d.gt_nuclei.empty()) throw std::invalid_argument("dataset: gt needs cells and nuclei");
        label_dir(d.gt_cells, "gt/cells");
        label_dir(d.gt_nuclei, "gt/nuclei");
        paths["gt"] = "gt";
    }
    if (!d.pred_cells.empty() || !d.pred_nuclei.empty()) {
        if (d.pred_cells.empty() || d.pred_nuclei.empty()) {
            throw std::invalid_argument("dataset: pred needs cells and nuclei");
        }
        label_dir(d.pred_cells, "pred/cells");
        label_dir(d.pred_nuclei, "pred/nuclei");
        paths["pred"] = "pred";
    }
    if (!d.uncertainty.empty()) {
        fs::create_directories(dir / "unc");
        parallel_for(frames, [&](std::size_t f) {
            write_scalar_f32(dir / "unc" / frame_name("frame", static_cast<int>(f), "f32"), d.uncertainty[f]);
        });
        paths["unc"] = "unc";
    }
    if (!d.forward.empty() || !d.backward.empty()) {
        if (d.forward.size() != d.backward.size()) throw std::invalid_argument("dataset: flow needs both directions");
        fs::create_directories(dir / "flow");
        parallel_for(d.forward.size(), [&](std::size_t f) {
            write_flow_f32(dir / "flow" / frame_name("fwd", static_cast<int>(f), "f32"), d.forward[f]);
            write_flow_f32(dir / "flow" / frame_name("bwd", static_cast<int>(f), "f32"), d.backward[f]);
        });
        paths["flow"] = "flow";
    }
    if (!d.scores.empty()) {
        fs::create_directories(dir / "scores");
        for (std::size_t f = 0; f < frames; ++f) {
            write_json(dir / "scores" / frame_name("frame", static_cast<int>(f), "json"), scores_json(d.scores[f]));
        }
        paths["scores"] = "scores";
    }
    if (d.tracks) {
        json j{{"tracks", *d.tracks}};
        if (d.link) j["link_config"] = *d.link;
        write_json(dir / "tracks.json", j);
        paths["tracks"] = "tracks.json";
    }
    if (d.log) {
        write_json(dir / "update_log.json", json(*d.log));
        paths["update_log"] = "update_log.json";
    }

    json seeds = json::object();
    json m{{"version", kManifestVersion}, {"width", d.width}, {"height", d.height}, {"frames", d.frames}};
    if (d.sim) {
        m["sim_config"] = *d.sim;
        seeds["sim"] = d.sim->seed;
    }
    if (d.degrade) {
        m["degrade_config"] = *d.degrade;
        seeds["degrade"] = d.degrade->seed;
    }
    if (d.propagation) m["propagation_config"] = *d.propagation;
    if (!d.contrast.empty()) m["contrast"] = d.contrast;
    m["seeds"] = seeds;
    m["paths"] = paths;
    write_json(dir / "manifest.json", m);
}

}  // namespace detail

// Writes into a sibling temporary directory and renames it over `dir`, so a
// reader never sees a half-written dataset.
inline void write_dataset(const Dataset& d, const fs::path& dir) {
    detail::validate_dataset(d);
    const fs::path target = fs::absolute(dir).lexically_normal();
    const fs::path parent = target.parent_path();
    if (!parent.empty()) fs::create_directories(parent);
    const fs::path tmp = target.string() + ".tmp";
    const fs::path old = target.string() + ".old";
    fs::remove_all(tmp);
    try {
        fs::create_directories(tmp);
        detail::write_dataset_contents(d, tmp);
    } catch (...) {
        std::error_code ec;
        fs::remove_all(tmp, ec);
        throw;
    }
    fs::remove_all(old);
    if (fs::exists(target)) fs::rename(target, old);
    fs::rename(tmp, target);
    fs::remove_all(old);
}

inline Dataset read_dataset(const fs::path& dir) {
    const fs::path manifest_path = dir / "manifest.json";
    if (!fs::exists(manifest_path)) throw FormatError(manifest_path.string() + ": missing dataset manifest");
    const json m = read_json(manifest_path);
    Dataset d;
    try {
        const int version = m.at("version").get<int>();
        if (version != kManifestVersion) {
            throw FormatError(manifest_path.string() + ": unsupported manifest version " + std::to_string(version));
        }
        d.width = m.at("width").get<int>();
        d.height = m.at("height").get<int>();
        d.frames = m.at("frames").get<int>();
        if (m.contains("sim_config")) d.sim = m["sim_config"].get<SimConfig>();
        if (m.contains("degrade_config")) d.degrade = m["degrade_config"].get<DegradeConfig>();
        if (m.contains("propagation_config")) d.propagation = m["propagation_config"].get<PropagationConfig>();
        if (m.contains("contrast")) d.contrast = m["contrast"].get<std::vector<double>>();
    } catch (const json::exception& e) {
        throw FormatError(manifest_path.string() + ": " + e.what());
    }
    if (d.width <= 0 || d.height <= 0 || d.frames <= 0) {
        throw FormatError(manifest_path.string() + ": width, height and frames must be positive");
    }
    const json paths = m.value("paths", json::object());
    const auto frames = static_cast<std::size_t>(d.frames);
    const std::pair<int, int> shape{d.width, d.height};
    const auto sub = [&](const char* key) { return dir / paths.at(key).get<std::string>(); };

    if (paths.contains("images")) {
        d.images.resize(frames);
        const fs::path p = sub("images");
        parallel_for(frames, [&](std::size_t f) {
            d.images[f] = read_image(p / frame_name("frame", static_cast<int>(f), "pgm"), shape);
        });
    }
    const auto read_labels_dir = [&](const fs::path& p, std::vector<LabelMap>& out) {
        out.resize(frames);
        parallel_for(frames, [&](std::size_t f) {
            out[f] = read_labels(p / frame_name("frame", static_cast<int>(f), "pgm"), shape);
        });
    };
    if (paths.contains("gt")) {
        read_labels_dir(sub("gt") / "cells", d.gt_cells);
        read_labels_dir(sub("gt") / "nuclei", d.gt_nuclei);
    }
    if (paths.contains("pred")) {
        read_labels_dir(sub("pred") / "cells", d.pred_cells);
        read_labels_dir(sub("pred") / "nuclei", d.pred_nuclei);
    }
    if (paths.contains("unc")) {
        d.uncertainty.resize(frames);
        const fs::path p = sub("unc");
        parallel_for(frames, [&](std::size_t f) {
            d.uncertainty[f] = read_scalar_f32(p / frame_name("frame", static_cast<int>(f), "f32"), shape);
        });
    }
    if (paths.contains("flow")) {
        d.forward.resize(frames - 1);
        d.backward.resize(frames - 1);
        const fs::path p = sub("flow");
        parallel_for(frames - 1, [&](std::size_t f) {
            d.forward[f] = read_flow_f32(p / frame_name("fwd", static_cast<int>(f), "f32"), shape);
            d.backward[f] = read_flow_f32(p / frame_name("bwd", static_cast<int>(f), "f32"), shape);
        });
    }
    if (paths.contains("scores")) {
        d.scores.resize(frames);
        const fs::path p = sub("scores");
        for (std::size_t f = 0; f < frames; ++f) {
            const fs::path file = p / frame_name("frame", static_cast<int>(f), "json");
            d.scores[f] = scores_from_json(read_json(file), file);
        }
    }
    try {
        if (paths.contains("tracks")) {
            const json t = read_json(sub("tracks"));
            d.tracks = t.at("tracks").get<std::vector<Track>>();
            if (t.contains("link_config")) d.link = t["link_config"].get<LinkConfig>();
        }
        if (paths.contains("update_log")) d.log = read_json(sub("update_log")).get<UpdateLog>();
    } catch (const json::exception& e) {
        throw FormatError(dir.string() + ": malformed tracks or update log (" + e.what() + ")");
    }
    detail::validate_dataset(d);
    return d;
}

}  // namespace nucprop
