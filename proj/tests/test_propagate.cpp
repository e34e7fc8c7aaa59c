#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <random>

#include "nucprop/propagate.hpp"
#include "nucprop/sim.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

using namespace nucprop;
using Catch::Approx;
using fixtures::rect;

namespace {

constexpr int W = 24;
constexpr int H = 24;

MeanUncertainty mu(double v) { return std::isinf(v) ? MeanUncertainty::infinite() : MeanUncertainty::of(v); }

std::vector<MeanUncertainty> mus(std::initializer_list<double> vs) {
    std::vector<MeanUncertainty> out;
    for (double v : vs) out.push_back(mu(v));
    return out;
}

// A track of n frames with a fixed cell; frames with infinite ū get no
// nucleus. Returns frames suitable for propagate_track with any warp mode.
std::vector<TrackFrame> still_frames(const std::vector<MeanUncertainty>& u) {
    std::vector<TrackFrame> frames;
    for (const auto& v : u) {
        TrackFrame f;
        f.present = true;
        f.cell = rect(W, H, 4, 4, 19, 19);
        f.nucleus = v.is_finite() ? rect(W, H, 9, 9, 14, 14) : Mask(W, H);
        frames.push_back(f);
    }
    return frames;
}

Track track_of(int n, int first = 0) {
    Track t;
    t.track_id = 0;
    t.first_frame = first;
    t.entries.assign(static_cast<std::size_t>(n), std::optional<InstanceId>(1));
    return t;
}

std::vector<UpdateLogEntry> run_still(const std::vector<MeanUncertainty>& u, PropagationConfig cfg = {}) {
    cfg.warp_mode = WarpMode::ShiftScale;
    auto frames = still_frames(u);
    return propagate_track(track_of(static_cast<int>(u.size())), u, frames, FlowSet{}, cfg);
}

struct Video {
    std::vector<LabelMap> cells, nuclei;
    std::vector<ScalarField> unc;
    std::vector<FlowField> fwd, bwd;
};

// One static cell over n frames; nucleus uncertainty per frame from `u`
// (infinite means the nucleus is missing).
Video static_video(const std::vector<double>& u) {
    Video v;
    for (std::size_t f = 0; f < u.size(); ++f) {
        LabelMap c(W, H), n(W, H);
        fixtures::paint(c, rect(W, H, 4, 4, 19, 19), 1);
        if (!std::isinf(u[f])) fixtures::paint(n, rect(W, H, 9, 9, 14, 14), 1);
        v.cells.push_back(c);
        v.nuclei.push_back(n);
        v.unc.emplace_back(W, H, std::isinf(u[f]) ? 0.9 : u[f]);
    }
    for (std::size_t f = 0; f + 1 < u.size(); ++f) {
        v.fwd.push_back(fixtures::constant_flow(W, H, 0, 0, int(f), int(f) + 1));
        v.bwd.push_back(fixtures::constant_flow(W, H, 0, 0, int(f) + 1, int(f)));
    }
    return v;
}

PropagationResult run(const Video& v, PropagationConfig cfg = {}) {
    return run_propagation({&v.cells, &v.nuclei, &v.unc, FlowSet(v.fwd, v.bwd), std::nullopt}, cfg);
}

}  // namespace

TEST_CASE("configuration defaults and validation") {
    const PropagationConfig cfg;
    CHECK(cfg.theta == 0.5);
    CHECK(cfg.alpha == 0.7);
    CHECK(cfg.beta == 0.85);
    CHECK(cfg.warp_mode == WarpMode::MeanFlow);
    CHECK_FALSE(cfg.fuse);
    CHECK(cfg.scope == UpdateScope::UncertainOnly);
    PropagationConfig bad;
    bad.alpha = 0.0;
    CHECK_THROWS(bad.validate());
    bad = {};
    bad.beta = 1.5;
    CHECK_THROWS(bad.validate());
    bad = {};
    bad.theta = -1.0;
    CHECK_THROWS(bad.validate());
}

TEST_CASE("uncertainty summary per track and frame") {
    LabelMap nuc(10, 10);
    fixtures::paint(nuc, rect(10, 10, 0, 0, 3, 3), 1);
    fixtures::paint(nuc, rect(10, 10, 6, 6, 9, 9), 2);
    ScalarField plateau(10, 10, 0.1);
    for (int y = 5; y < 10; ++y) {
        for (int x = 5; x < 10; ++x) plateau(x, y) = 0.9;
    }
    Track a = track_of(2), b = track_of(2);
    b.track_id = 1;
    b.entries = {InstanceId(2), std::nullopt};
    LabelMap empty(10, 10);
    const auto s = summarize_uncertainty({a, b}, {nuc, empty}, {plateau, ScalarField(10, 10, 0.3)});
    REQUIRE(s.tracks.size() == 2);
    CHECK(s.tracks[0].values[0].value() == Approx(0.1));
    CHECK(s.tracks[0].values[1].is_infinite());  // nucleus missing
    CHECK(s.tracks[1].values[0].value() == Approx(0.9));
    CHECK(s.tracks[1].values[1].is_infinite());  // cell ABSENT

    const auto uni = summarize_uncertainty({a}, {nuc, nuc}, {ScalarField(10, 10, 0.3), ScalarField(10, 10, 0.3)});
    CHECK(uni.tracks[0].values[0].value() == Approx(0.3));
    CHECK(uni.tracks[0].values[1].value() == Approx(0.3));
    CHECK_THROWS(summarize_uncertainty({a}, {nuc, nuc}, {ScalarField(9, 10), ScalarField(10, 10)}));
}

TEST_CASE("warping with identity geometry leaves the nucleus unchanged") {
    const Mask cell = rect(W, H, 2, 2, 20, 20);
    const Mask nuc = rect(W, H, 8, 8, 12, 13);
    const FlowField zero = fixtures::constant_flow(W, H, 0, 0);
    for (WarpMode m : {WarpMode::ShiftScale, WarpMode::MeanFlow, WarpMode::PixelFlow}) {
        CHECK(warp_neighbor_mask(cell, cell, nuc, &zero, m) == nuc);
    }
}

TEST_CASE("shift-scale follows a translated cell") {
    const Mask current = rect(W, H, 2, 2, 12, 12);
    const Mask neighbour = rect(W, H, 6, 2, 16, 12);
    const Mask nuc = rect(W, H, 9, 6, 12, 8);
    CHECK(warp_neighbor_mask(current, neighbour, nuc, nullptr, WarpMode::ShiftScale) == rect(W, H, 5, 6, 8, 8));
    // No current cell: identity placement.
    CHECK(warp_neighbor_mask(Mask(W, H), neighbour, nuc, nullptr, WarpMode::ShiftScale) == nuc);
}

TEST_CASE("constant dense flow gives the same result for pixel and mean flow") {
    const Mask cell = rect(W, H, 3, 3, 18, 18);
    const Mask nuc = rect(W, H, 8, 9, 13, 12);
    const FlowField f = fixtures::constant_flow(W, H, 2, 1);
    const Mask a = warp_neighbor_mask(cell, cell, nuc, &f, WarpMode::PixelFlow);
    const Mask b = warp_neighbor_mask(cell, cell, nuc, &f, WarpMode::MeanFlow);
    CHECK(a == b);
    CHECK(a == rect(W, H, 6, 8, 11, 11));
}

TEST_CASE("warped masks keep only their largest component") {
    const Mask nuc = mask_union(rect(W, H, 2, 2, 6, 6), rect(W, H, 15, 15, 16, 16));
    const Mask cell = rect(W, H, 0, 0, W - 1, H - 1);
    CHECK(warp_neighbor_mask(cell, cell, nuc, nullptr, WarpMode::ShiftScale) == rect(W, H, 2, 2, 6, 6));
}

TEST_CASE("warp preconditions") {
    const Mask cell = rect(W, H, 3, 3, 18, 18);
    CHECK_THROWS(warp_neighbor_mask(cell, cell, Mask(W, H), nullptr, WarpMode::ShiftScale));
    CHECK_THROWS(warp_neighbor_mask(cell, cell, cell, nullptr, WarpMode::MeanFlow));
    CHECK_THROWS(warp_neighbor_mask(cell, cell, cell, nullptr, WarpMode::PixelFlow));
    CHECK_THROWS_AS(warp_neighbor_mask(cell, Mask(W, H + 1), cell, nullptr, WarpMode::ShiftScale), DimensionError);
}

TEST_CASE("fusing candidate masks") {
    const Mask a = rect(W, H, 2, 2, 8, 8);
    const Mask b = rect(W, H, 12, 12, 18, 18);
    CHECK(fuse_masks({{a, mu(0.7)}}) == a);
    CHECK(fuse_masks({{a, mu(0.1)}, {a, mu(3.0)}}) == a);
    CHECK(fuse_masks({{a, mu(0.1)}, {b, mu(2.0)}}) == a);
    CHECK(fuse_masks({{a, mu(2.0)}, {b, mu(0.1)}}) == b);
    // Equal weights: each mask gets exactly 0.5 and survives.
    CHECK(fuse_masks({{a, mu(0.4)}, {b, mu(0.4)}}) == mask_union(a, b));
    CHECK_THROWS(fuse_masks({}));
    CHECK_THROWS(fuse_masks({{a, MeanUncertainty::infinite()}}));
}

TEST_CASE("hand trace: uncertain middle frame between two certain ones") {
    const auto log = run_still(mus({0.1, 0.9, 0.1}));
    CHECK(log[0].action == UpdateAction::None);
    CHECK(log[1].action == UpdateAction::TwoSided);
    CHECK(log[1].sources == std::vector<int>{0, 2});
    CHECK(log[1].after.value() == 0.1);
    CHECK(log[2].action == UpdateAction::None);
}

TEST_CASE("hand trace: uncertain last frame takes its previous neighbour") {
    const auto log = run_still(mus({0.1, 0.9}));
    CHECK(log[0].action == UpdateAction::None);
    CHECK(log[1].action == UpdateAction::OneSidedPrev);
    CHECK(log[1].sources == std::vector<int>{0});
}

TEST_CASE("hand trace: relative thresholds block every update") {
    const auto log = run_still(mus({0.6, 0.55}));
    CHECK(log[0].action == UpdateAction::None);
    CHECK(log[1].action == UpdateAction::None);
}

TEST_CASE("branch order and the one-sided next case") {
    // Visit order 2, 1, 0. Frame 1: 0.8*0.85 = 0.68 < 0.9 blocks the
    // two-sided test, 0.8*0.7 = 0.56 < 0.9 blocks prev, next passes.
    const auto log = run_still(mus({0.9, 0.8, 0.2}));
    CHECK(log[2].action == UpdateAction::None);
    CHECK(log[1].action == UpdateAction::OneSidedNext);
    CHECK(log[1].sources == std::vector<int>{2});
    // Frame 1 now carries 0.2, so frame 0 chains from it.
    CHECK(log[0].action == UpdateAction::OneSidedNext);
    CHECK(log[0].sources == std::vector<int>{1});
    CHECK(log[0].after.value() == 0.2);
}

TEST_CASE("missing nuclei are interpolated and chained from a certain flank") {
    const auto left = run_still(mus({0.1, INFINITY, INFINITY}));
    CHECK(left[1].action == UpdateAction::Interpolated);
    CHECK(left[1].branch == UpdateAction::OneSidedPrev);
    CHECK(left[2].action == UpdateAction::Interpolated);
    CHECK(left[2].after.value() == 0.1);

    const auto right = run_still(mus({INFINITY, INFINITY, INFINITY, 0.3}));
    for (int f = 0; f < 3; ++f) {
        CHECK(right[f].action == UpdateAction::Interpolated);
        CHECK(right[f].after.value() == 0.3);
    }

    const auto none = run_still(mus({INFINITY, INFINITY}));
    CHECK(none[0].action == UpdateAction::None);
    CHECK(none[1].action == UpdateAction::None);
}

TEST_CASE("scope all rewrites certain frames too") {
    PropagationConfig cfg;
    cfg.scope = UpdateScope::All;
    const auto log = run_still(mus({0.1, 0.2, 0.3}), cfg);
    for (const auto& e : log) CHECK(e.updated());
}

TEST_CASE("propagation matches the straight-line reference on random vectors") {
    std::mt19937_64 rng(31);
    std::uniform_real_distribution<double> U(0.0, 1.0);
    for (int trial = 0; trial < 300; ++trial) {
        const int n = 1 + trial % 7;
        std::vector<double> raw(static_cast<std::size_t>(n));
        for (auto& v : raw) v = U(rng) < 0.2 ? oracle::kInf : U(rng);
        PropagationConfig cfg;
        cfg.scope = trial % 5 == 0 ? UpdateScope::All : UpdateScope::UncertainOnly;
        std::vector<MeanUncertainty> u;
        for (double v : raw) u.push_back(mu(v));
        const auto log = run_still(u, cfg);
        const auto ref = oracle::algorithm1(raw, cfg.theta, cfg.alpha, cfg.beta, cfg.scope == UpdateScope::All);
        for (int f = 0; f < n; ++f) {
            CHECK(static_cast<int>(log[f].action) == ref[f].action);
            CHECK(log[f].sources == ref[f].sources);
            CHECK(log[f].after.as_double() == ref[f].after);
        }
    }
}

TEST_CASE("run_propagation leaves certain videos untouched") {
    const Video v = static_video({0.1, 0.2, 0.3, 0.1});
    const auto r = run(v);
    CHECK(r.nuclei == v.nuclei);
    for (const auto& e : r.log) CHECK(e.action == UpdateAction::None);
}

TEST_CASE("run_propagation interpolates a missed middle nucleus") {
    const Video v = static_video({0.1, INFINITY, 0.1});
    for (WarpMode m : {WarpMode::ShiftScale, WarpMode::MeanFlow, WarpMode::PixelFlow}) {
        PropagationConfig cfg;
        cfg.warp_mode = m;
        const auto r = run(v, cfg);
        REQUIRE(r.log.size() == 3);
        CHECK(r.log[1].action == UpdateAction::Interpolated);
        CHECK(r.nuclei[1] == v.nuclei[0]);
    }
}

TEST_CASE("scope all on a fully certain video rewrites every nucleus") {
    const Video v = static_video({0.1, 0.2, 0.1});
    PropagationConfig cfg;
    cfg.scope = UpdateScope::All;
    const auto r = run(v, cfg);
    for (const auto& e : r.log) CHECK(e.updated());
}

TEST_CASE("missing flow is reported with the frame pair") {
    Video v = static_video({0.1, 0.9, 0.1});
    v.fwd.pop_back();
    v.bwd.pop_back();
    try {
        run(v);
        FAIL("expected an error");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("1->2") != std::string::npos);
    }
}

TEST_CASE("run_propagation properties on a degraded simulation") {
    SimConfig sc;
    sc.frames = 16;
    sc.seed = 3;
    const SimDataset ds = generate_video(sc);
    const Predictions p = degrade_predictions(ds, DegradeConfig{});
    for (WarpMode mode : {WarpMode::ShiftScale, WarpMode::MeanFlow, WarpMode::PixelFlow}) {
        for (bool fuse : {false, true}) {
            PropagationConfig cfg;
            cfg.warp_mode = mode;
            cfg.fuse = fuse;
            const PropagationInput in{&p.cells, &p.nuclei, &p.uncertainty, FlowSet(ds.forward, ds.backward),
                                      std::nullopt};
            const auto r = run_propagation(in, cfg);
            CHECK(r.nuclei.size() == p.nuclei.size());
            const auto again = run_propagation(in, cfg);
            CHECK(again.nuclei == r.nuclei);
            for (const auto& e : r.log) {
                const MeanUncertainty u = e.before;
                if (e.cell_id != 0 && u < MeanUncertainty::of(cfg.theta)) CHECK_FALSE(e.updated());
                if (e.branch == UpdateAction::TwoSided && u.is_finite()) {
                    for (const auto& s : e.source_uncertainty) CHECK(u.scaled(cfg.beta) >= s);
                }
                if ((e.branch == UpdateAction::OneSidedPrev || e.branch == UpdateAction::OneSidedNext) &&
                    u.is_finite()) {
                    CHECK(u.scaled(cfg.alpha) >= e.source_uncertainty.at(0));
                }
                if (e.action == UpdateAction::Interpolated) CHECK(e.area_before == 0);
                if (e.updated()) {
                    const Mask m = mask_of(r.nuclei[static_cast<std::size_t>(e.frame)], e.cell_id);
                    CHECK(component_count(m) == 1);
                    CHECK(mask_intersection(m, mask_of(p.cells[static_cast<std::size_t>(e.frame)], e.cell_id)) == m);
                }
            }
        }
    }
}

TEST_CASE("worker count does not change the result") {
    SimConfig sc;
    sc.frames = 12;
    const SimDataset ds = generate_video(sc);
    const Predictions p = degrade_predictions(ds, DegradeConfig{});
    const PropagationInput in{&p.cells, &p.nuclei, &p.uncertainty, FlowSet(ds.forward, ds.backward), std::nullopt};
    ::setenv("NUCPROP_THREADS", "1", 1);
    const auto serial = run_propagation(in, {});
    ::setenv("NUCPROP_THREADS", "4", 1);
    const auto parallel = run_propagation(in, {});
    ::unsetenv("NUCPROP_THREADS");
    CHECK(serial.nuclei == parallel.nuclei);
    CHECK(serial.log.size() == parallel.log.size());
}
