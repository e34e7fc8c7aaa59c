#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <cstring>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "nucprop/cli.hpp"
#include "nucprop/io.hpp"
#include "support/fixtures.hpp"

using namespace nucprop;
namespace fs = std::filesystem;

namespace {

struct Run {
    int code;
    std::string out, err;
};

Run cli(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = cli_main(args, out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

// Relative path -> bytes for every regular file under `root`.
std::map<std::string, std::string> tree(const fs::path& root) {
    std::map<std::string, std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
        if (e.is_regular_file()) files[fs::relative(e.path(), root).string()] = slurp(e.path());
    }
    return files;
}

int shell(const std::string& cmd) {
    const int status = std::system((cmd + " >/dev/null 2>&1").c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("label PGM round trip and byte layout") {
    const fs::path dir = fixtures::temp_dir("pgm");
    LabelMap labels(5, 3);
    labels(0, 0) = 1;
    labels(4, 2) = 0x1234;
    write_labels(dir / "l.pgm", labels);
    CHECK(read_labels(dir / "l.pgm") == labels);

    const std::string bytes = slurp(dir / "l.pgm");
    const std::string header = "P5\n5 3\n65535\n";
    REQUIRE(bytes.size() == header.size() + 30);
    CHECK(bytes.substr(0, header.size()) == header);
    CHECK(static_cast<unsigned char>(bytes[header.size()]) == 0x00);
    CHECK(static_cast<unsigned char>(bytes[header.size() + 1]) == 0x01);
    CHECK(static_cast<unsigned char>(bytes[bytes.size() - 2]) == 0x12);
    CHECK(static_cast<unsigned char>(bytes[bytes.size() - 1]) == 0x34);

    CHECK_THROWS_AS(read_labels(dir / "l.pgm", std::pair{5, 4}), DimensionError);
    std::ofstream(dir / "short.pgm", std::ios::binary) << bytes.substr(0, bytes.size() - 3);
    CHECK_THROWS_AS(read_labels(dir / "short.pgm"), FormatError);
    std::ofstream(dir / "bad.pgm", std::ios::binary) << "P2\n1 1\n255\n0\n";
    CHECK_THROWS_AS(read_labels(dir / "bad.pgm"), FormatError);
    CHECK_THROWS(read_labels(dir / "missing.pgm"));
}

TEST_CASE("image PGM round trip") {
    const fs::path dir = fixtures::temp_dir("img");
    ScalarField img(4, 4, 123.0);
    img(2, 1) = 65535.0;
    write_image(dir / "i.pgm", img);
    CHECK(read_image(dir / "i.pgm") == img);
    img(0, 0) = 1.5;
    CHECK_THROWS(write_image(dir / "j.pgm", img));
}

TEST_CASE("f32 scalar and flow round trips") {
    const fs::path dir = fixtures::temp_dir("f32");
    ScalarField s(6, 4);
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = static_cast<float>(0.1 * double(i) - 0.7);
    write_scalar_f32(dir / "s.f32", s);
    CHECK(read_scalar_f32(dir / "s.f32") == s);
    CHECK(fs::file_size(dir / "s.f32") == 6 * 4 * 4);

    FlowField f = fixtures::wavy_flow(6, 4, 3.0, 1);
    quantize_to_float(f);
    f.source = 2;
    f.target = 3;
    write_flow_f32(dir / "f.f32", f);
    const FlowField g = read_flow_f32(dir / "f.f32");
    CHECK(g == f);
    CHECK(g.source == 2);
    CHECK(g.target == 3);

    // Interleaved u, v little-endian floats.
    const std::string raw = slurp(dir / "f.f32");
    REQUIRE(raw.size() == 6 * 4 * 8);
    float u0 = 0, v0 = 0;
    std::memcpy(&u0, raw.data(), 4);
    std::memcpy(&v0, raw.data() + 4, 4);
    CHECK(u0 == static_cast<float>(f.u[0]));
    CHECK(v0 == static_cast<float>(f.v[0]));

    CHECK_THROWS_AS(read_flow_f32(dir / "f.f32", std::pair{6, 5}), DimensionError);
    std::ofstream(dir / "f.f32", std::ios::binary | std::ios::trunc) << raw.substr(0, 17);
    CHECK_THROWS(read_flow_f32(dir / "f.f32"));
}

TEST_CASE("dataset round trip") {
    SimConfig cfg;
    cfg.width = 80;
    cfg.height = 72;
    cfg.cells = 3;
    cfg.frames = 4;
    const SimDataset sim = generate_video(cfg);
    Dataset d = dataset_from_sim(sim);
    const Predictions p = degrade_predictions(sim, DegradeConfig{});
    d.degrade = DegradeConfig{};
    d.pred_cells = p.cells;
    d.pred_nuclei = p.nuclei;
    d.uncertainty = p.uncertainty;
    d.scores = p.scores;
    d.tracks = build_tracks(d.pred_cells);
    d.link = LinkConfig{};

    const fs::path dir = fixtures::temp_dir("dataset") / "ds";
    write_dataset(d, dir);
    CHECK_FALSE(fs::exists(dir.string() + ".tmp"));
    const Dataset r = read_dataset(dir);
    CHECK(r.width == 80);
    CHECK(r.height == 72);
    CHECK(r.frames == 4);
    CHECK(r.images == d.images);
    CHECK(r.gt_cells == d.gt_cells);
    CHECK(r.gt_nuclei == d.gt_nuclei);
    CHECK(r.pred_nuclei == d.pred_nuclei);
    CHECK(r.uncertainty == d.uncertainty);
    CHECK(r.forward == d.forward);
    CHECK(r.backward == d.backward);
    CHECK(r.scores == d.scores);
    CHECK(r.contrast == d.contrast);
    REQUIRE(r.tracks.has_value());
    CHECK(*r.tracks == *d.tracks);
    REQUIRE(r.sim.has_value());
    CHECK(r.sim->seed == cfg.seed);

    // Rewriting over an existing dataset replaces it.
    write_dataset(d, dir);
    CHECK(tree(dir).size() > 0);
    CHECK_FALSE(fs::exists(dir.string() + ".old"));
}

TEST_CASE("manifest dimensions are enforced") {
    SimConfig cfg;
    cfg.width = 64;
    cfg.height = 64;
    cfg.cells = 2;
    cfg.frames = 2;
    const fs::path dir = fixtures::temp_dir("manifest") / "ds";
    write_dataset(dataset_from_sim(generate_video(cfg)), dir);
    json m = read_json(dir / "manifest.json");
    m["height"] = 65;
    write_json(dir / "manifest.json", m);
    CHECK_THROWS_AS(read_dataset(dir), DimensionError);
    m["height"] = 64;
    m["version"] = 99;
    write_json(dir / "manifest.json", m);
    CHECK_THROWS_AS(read_dataset(dir), FormatError);
    CHECK_THROWS_AS(read_dataset(dir / "nope"), FormatError);
}

TEST_CASE("CLI exit codes") {
    CHECK(cli({"--help"}).code == 0);
    const Run help = cli({"propagate", "--help"});
    CHECK(help.code == 0);
    CHECK(help.out.find("--theta") != std::string::npos);
    CHECK(cli({}).code == 2);
    CHECK(cli({"bogus"}).code == 2);
    const Run missing = cli({"propagate"});
    CHECK(missing.code == 2);
    CHECK(missing.err.find("--in") != std::string::npos);
    CHECK(cli({"propagate", "--in", "x", "--alpha", "1.5"}).code == 2);
    CHECK(cli({"simulate", "--out", "x", "--waveform", "triangle"}).code == 2);
    const Run absent = cli({"propagate", "--in", (fixtures::temp_dir("absent") / "none").string()});
    CHECK(absent.code == 1);
    CHECK(absent.err.rfind("error: ", 0) == 0);
}

TEST_CASE("CLI binary exit codes") {
    const std::string exe = NUCPROP_CLI_PATH;
    CHECK(shell(exe + " --help") == 0);
    CHECK(shell(exe + " track") == 2);
    CHECK(shell(exe + " track --in /nonexistent/dataset") == 1);
}

TEST_CASE("CLI pipeline is deterministic") {
    const fs::path root = fixtures::temp_dir("pipeline");
    const auto run = [&](const std::string& name) {
        const std::string ds = (root / name).string();
        const std::string rep = (root / (name + ".json")).string();
        REQUIRE(cli({"simulate", "--out", ds, "--width", "64", "--height", "64", "--cells", "3", "--frames", "8",
                     "--seed", "5"})
                    .code == 0);
        REQUIRE(cli({"degrade", "--in", ds}).code == 0);
        REQUIRE(cli({"track", "--in", ds}).code == 0);
        REQUIRE(cli({"propagate", "--in", ds}).code == 0);
        REQUIRE(cli({"eval-iou", "--in", ds, "--report", rep}).code == 0);
        REQUIRE(cli({"eval-map", "--in", ds, "--report", rep}).code == 0);
        return rep;
    };
    const std::string a = run("a");
    const std::string b = run("b");
    CHECK(tree(root / "a") == tree(root / "b"));
    CHECK(slurp(a) == slurp(b));

    const json rep = read_json(a);
    for (const char* k : {"map_sm", "map_ent", "iou_all", "iou_updated", "iou_interpolated", "iou_non_updated"}) {
        CHECK(rep.at(k).is_number());
    }
    CHECK(rep.at("counts").at("all").get<int>() > 0);

    const Dataset d = read_dataset(root / "a");
    REQUIRE(d.propagation.has_value());
    CHECK(d.propagation->theta == 0.5);
    CHECK(d.propagation->alpha == 0.7);
    CHECK(d.propagation->beta == 0.85);
    CHECK(d.log.has_value());

    const Run again = cli({"propagate", "--in", (root / "a").string()});
    CHECK(again.code == 1);
    CHECK(again.err.find("already propagated") != std::string::npos);
}

TEST_CASE("degrade can write to a new directory") {
    const fs::path root = fixtures::temp_dir("degrade_out");
    const std::string ds = (root / "in").string(), out = (root / "out").string();
    REQUIRE(cli({"simulate", "--out", ds, "--width", "64", "--height", "64", "--cells", "2", "--frames", "4"}).code ==
            0);
    REQUIRE(cli({"degrade", "--in", ds, "--out", out, "--miss-prob", "1"}).code == 0);
    CHECK_FALSE(read_dataset(ds).has_predictions());
    CHECK(read_dataset(out).has_predictions());
}

TEST_CASE("defgen and invert-flow") {
    const fs::path root = fixtures::temp_dir("defgen");
    const std::string f = (root / "f.f32").string(), g = (root / "g.f32").string();
    REQUIRE(cli({"defgen", "--out", f, "--width", "64", "--height", "48", "--seed", "3"}).code == 0);
    FlowField expect = generate_elastic_flow({10, 10.0, 3}, 64, 48);
    quantize_to_float(expect);
    const FlowField got = read_flow_f32(f);
    CHECK(got.u == expect.u);
    CHECK(got.v == expect.v);

    REQUIRE(cli({"invert-flow", "--in", f, "--out", g}).code == 0);
    FlowField inv = invert_flow(got);
    quantize_to_float(inv);
    const FlowField gi = read_flow_f32(g);
    CHECK(gi.u == inv.u);
    CHECK(gi.v == inv.v);
    CHECK(cli({"defgen", "--out", f, "--control-points", "1"}).code == 2);
}
