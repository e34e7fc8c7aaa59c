#include <catch2/catch_amalgamated.hpp>

#include <map>
#include <random>
#include <set>

#include "nucprop/hungarian.hpp"
#include "nucprop/sim.hpp"
#include "nucprop/tracker.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

using namespace nucprop;
using fixtures::rect;

namespace {

LabelMap random_frame(std::mt19937_64& rng, int n, int w = 24, int h = 24) {
    std::uniform_int_distribution<int> pos(0, w - 8);
    std::uniform_int_distribution<int> size(3, 8);
    LabelMap labels(w, h);
    for (int id = 1; id <= n; ++id) {
        const int x0 = pos(rng), y0 = pos(rng);
        fixtures::paint(labels, rect(w, h, x0, y0, x0 + size(rng), y0 + size(rng)), static_cast<InstanceId>(id));
    }
    return labels;
}

std::vector<std::vector<double>> iou_matrix(const LabelMap& a, const LabelMap& b) {
    const auto ia = instance_ids(a), ib = instance_ids(b);
    std::vector<std::vector<double>> w(ia.size(), std::vector<double>(ib.size()));
    for (std::size_t i = 0; i < ia.size(); ++i) {
        for (std::size_t j = 0; j < ib.size(); ++j) w[i][j] = oracle::iou(mask_of(a, ia[i]), mask_of(b, ib[j]));
    }
    return w;
}

}  // namespace

TEST_CASE("identical frames link every instance to itself") {
    std::mt19937_64 rng(1);
    const LabelMap a = random_frame(rng, 4);
    const auto links = link_frames(a, a);
    REQUIRE(links.size() == instance_ids(a).size());
    for (const auto& l : links) {
        CHECK(l.a == l.b);
        CHECK(l.iou == 1.0);
    }
}

TEST_CASE("disjoint frames have no links") {
    LabelMap a(20, 10), b(20, 10);
    fixtures::paint(a, rect(20, 10, 0, 0, 4, 4), 1);
    fixtures::paint(a, rect(20, 10, 0, 5, 4, 9), 2);
    fixtures::paint(b, rect(20, 10, 10, 0, 14, 4), 1);
    fixtures::paint(b, rect(20, 10, 15, 5, 19, 9), 2);
    CHECK(link_frames(a, b).empty());
    CHECK_THROWS_AS(link_frames(a, LabelMap(20, 11)), DimensionError);
}

TEST_CASE("link_frames reaches the exhaustive optimum") {
    std::mt19937_64 rng(42);
    std::uniform_int_distribution<int> count(0, 5);
    for (int trial = 0; trial < 200; ++trial) {
        const LabelMap a = random_frame(rng, count(rng));
        const LabelMap b = random_frame(rng, count(rng));
        const LinkConfig cfg{trial % 2 ? 0.2 : 0.05, 2};
        const auto links = link_frames(a, b, cfg);
        double total = 0.0;
        std::set<InstanceId> seen_a, seen_b;
        for (const auto& l : links) {
            CHECK(l.iou >= cfg.min_link_iou);
            CHECK(seen_a.insert(l.a).second);
            CHECK(seen_b.insert(l.b).second);
            CHECK(l.iou == Catch::Approx(iou(a, l.a, b, l.b)));
            total += l.iou;
        }
        CHECK(total == Catch::Approx(oracle::best_assignment_weight(iou_matrix(a, b), cfg.min_link_iou)).margin(1e-12));
    }
}

TEST_CASE("assignment solver matches brute force on rectangular matrices") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> U(0.0, 1.0);
    std::uniform_int_distribution<int> dim(1, 5);
    for (int trial = 0; trial < 200; ++trial) {
        const int r = dim(rng), c = dim(rng);
        std::vector<std::vector<double>> w(r, std::vector<double>(c));
        for (auto& row : w) {
            for (auto& v : row) v = U(rng);
        }
        const auto assign = max_weight_assignment(w);
        REQUIRE(assign.size() == std::size_t(r));
        double total = 0.0;
        std::set<int> cols;
        for (int i = 0; i < r; ++i) {
            if (assign[i] < 0) continue;
            CHECK(cols.insert(assign[i]).second);
            total += w[i][assign[i]];
        }
        CHECK(total == Catch::Approx(oracle::best_assignment_weight(w, 0.0)).margin(1e-12));
    }
}

TEST_CASE("a static cell forms one full-length track") {
    LabelMap f(16, 16);
    fixtures::paint(f, rect(16, 16, 3, 3, 9, 9), 5);
    const auto tracks = build_tracks(std::vector<LabelMap>(5, f));
    REQUIRE(tracks.size() == 1);
    CHECK(tracks[0].first_frame == 0);
    CHECK(tracks[0].length() == 5);
    for (const auto& e : tracks[0].entries) CHECK(e == std::optional<InstanceId>(5));
}

TEST_CASE("cells that never overlap themselves give one-frame tracks") {
    std::vector<LabelMap> frames;
    for (int t = 0; t < 3; ++t) {
        LabelMap f(30, 10);
        fixtures::paint(f, rect(30, 10, 10 * t, 0, 10 * t + 3, 3), 1);
        fixtures::paint(f, rect(30, 10, 10 * t + 5, 6, 10 * t + 8, 9), 2);
        frames.push_back(f);
    }
    const auto tracks = build_tracks(frames);
    CHECK(tracks.size() == 6);
    for (const auto& t : tracks) CHECK(t.length() == 1);
}

TEST_CASE("a single-frame dropout stays inside one track") {
    LabelMap present(16, 16);
    fixtures::paint(present, rect(16, 16, 4, 4, 10, 10), 1);
    const auto tracks = build_tracks({present, LabelMap(16, 16), present});
    REQUIRE(tracks.size() == 1);
    REQUIRE(tracks[0].length() == 3);
    CHECK(tracks[0].entries[0] == std::optional<InstanceId>(1));
    CHECK_FALSE(tracks[0].entries[1].has_value());
    CHECK(tracks[0].entries[2] == std::optional<InstanceId>(1));
}

TEST_CASE("gap tolerance bounds the number of consecutive absences") {
    LabelMap present(16, 16);
    fixtures::paint(present, rect(16, 16, 4, 4, 10, 10), 1);
    const LabelMap gone(16, 16);
    const auto two = build_tracks({present, gone, gone, present});
    REQUIRE(two.size() == 1);
    CHECK(two[0].length() == 4);

    const auto three = build_tracks({present, gone, gone, gone, present});
    REQUIRE(three.size() == 2);
    CHECK(three[0].length() == 1);
    CHECK(three[1].first_frame == 4);

    const auto tail = build_tracks({present, present, gone});
    REQUIRE(tail.size() == 1);
    CHECK(tail[0].length() == 2);

    const auto strict = build_tracks({present, gone, present}, LinkConfig{0.2, 0});
    CHECK(strict.size() == 2);
}

TEST_CASE("tracks partition the detections of a simulated video") {
    SimConfig cfg;
    cfg.frames = 12;
    cfg.seed = 5;
    const SimDataset ds = generate_video(cfg);
    const auto tracks = build_tracks(ds.cells);
    std::map<std::pair<int, InstanceId>, int> owner;
    for (const auto& t : tracks) {
        REQUIRE(t.length() >= 1);
        CHECK(t.entries.front().has_value());
        CHECK(t.entries.back().has_value());
        int run = 0;
        for (int i = 0; i < t.length(); ++i) {
            const auto id = t.entries[static_cast<std::size_t>(i)];
            run = id ? 0 : run + 1;
            CHECK(run <= 2);
            if (id) CHECK(owner.emplace(std::pair{t.first_frame + i, *id}, t.track_id).second);
        }
    }
    std::size_t detections = 0;
    for (const auto& f : ds.cells) detections += instance_ids(f).size();
    CHECK(owner.size() == detections);
}

TEST_CASE("tracking is deterministic and validates its config") {
    SimConfig cfg;
    cfg.frames = 6;
    const SimDataset ds = generate_video(cfg);
    CHECK(build_tracks(ds.cells) == build_tracks(ds.cells));
    CHECK_THROWS(build_tracks(ds.cells, LinkConfig{1.5, 2}));
    CHECK_THROWS(build_tracks({LabelMap(4, 4), LabelMap(5, 4)}));
}
