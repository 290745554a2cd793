#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "malunet/data.hpp"

using namespace malunet;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path / "images");
        fs::create_directories(path / "masks");
    }
    ~TempDir() { fs::remove_all(path); }
};

void write_file(const fs::path& p, const std::string& bytes) {
    std::ofstream os(p, std::ios::binary);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::string p5_bytes(int w, int h, std::uint8_t fill) {
    std::string s = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    s.append(static_cast<std::size_t>(w * h), static_cast<char>(fill));
    return s;
}

}  // namespace

TEST_CASE("a P5 mask of all 255 loads as all-ones; P6 pixels map to unit channels") {
    TempDir dir("malunet_data_a");
    write_file(dir.path / "m.pgm", p5_bytes(4, 3, 255));
    Tensor m = load_pgm((dir.path / "m.pgm").string());
    CHECK(m.shape() == Shape{1, 3, 4});
    for (double v : m.data()) CHECK(v == 1.0);

    std::string ppm = "P6\n2 1\n255\n";
    const unsigned char px[6] = {255, 0, 0, 0, 255, 0};
    ppm.append(reinterpret_cast<const char*>(px), 6);
    write_file(dir.path / "i.ppm", ppm);
    Tensor img = load_ppm((dir.path / "i.ppm").string());
    CHECK(img.shape() == Shape{3, 1, 2});
    CHECK(img.at({0, 0, 0}) == 1.0);
    CHECK(img.at({1, 0, 0}) == 0.0);
    CHECK(img.at({1, 0, 1}) == 1.0);
    CHECK(img.at({2, 0, 1}) == 0.0);
}

TEST_CASE("malformed headers and non-8-bit maxval are rejected by name") {
    TempDir dir("malunet_data_b");
    write_file(dir.path / "bad16.pgm", "P5\n2 2\n65535\n	aaaaaaaa");
    try {
        load_pgm((dir.path / "bad16.pgm").string());
        FAIL("expected IoError");
    } catch (const IoError& e) {
        CHECK(std::string(e.what()).find("bad16.pgm") != std::string::npos);
    }
    write_file(dir.path / "trunc.pgm", "P5\n4 4\n255\nxx");
    CHECK_THROWS_AS(load_pgm((dir.path / "trunc.pgm").string()), IoError);
    write_file(dir.path / "noise.pgm", "Px\n2 2\n255\naaaa");
    CHECK_THROWS_AS(load_pgm((dir.path / "noise.pgm").string()), IoError);
    write_file(dir.path / "comment.pgm", "P5\n# remark\n2 2\n255\naaaa");
    CHECK_THROWS_AS(load_pgm((dir.path / "comment.pgm").string()), IoError);
}

TEST_CASE("dataset pairing errors name the offending basename") {
    TempDir dir("malunet_data_c");
    std::string ppm = "P6\n2 2\n255\n";
    ppm.append(12, static_cast<char>(100));
    write_file(dir.path / "images" / "a.ppm", ppm);
    try {
        load_dataset(dir.path.string(), 16);
        FAIL("expected IoError");
    } catch (const IoError& e) {
        CHECK(std::string(e.what()).find("\"a\"") != std::string::npos);
    }
    // orphan masks are flagged too
    write_file(dir.path / "masks" / "a.pgm", p5_bytes(2, 2, 255));
    write_file(dir.path / "masks" / "b.pgm", p5_bytes(2, 2, 255));
    try {
        load_dataset(dir.path.string(), 16);
        FAIL("expected IoError");
    } catch (const IoError& e) {
        CHECK(std::string(e.what()).find("\"b\"") != std::string::npos);
    }
}

TEST_CASE("load_dataset resizes, scales to [0,1], and binarizes masks") {
    TempDir dir("malunet_data_d");
    std::string ppm = "P6\n3 3\n255\n";
    for (int i = 0; i < 9; ++i) {
        ppm.push_back(static_cast<char>(30 * i % 256));
        ppm.push_back(static_cast<char>(200));
        ppm.push_back(static_cast<char>(55));
    }
    write_file(dir.path / "images" / "s.ppm", ppm);
    std::string pgm = "P5\n3 3\n255\n";
    const unsigned char mv[9] = {0, 255, 0, 255, 255, 0, 0, 0, 255};
    pgm.append(reinterpret_cast<const char*>(mv), 9);
    write_file(dir.path / "masks" / "s.pgm", pgm);

    auto ds = load_dataset(dir.path.string(), 8);
    REQUIRE(ds.size() == 1);
    CHECK(ds[0].id == "s");
    CHECK(ds[0].image.shape() == Shape{3, 8, 8});
    CHECK(ds[0].mask.shape() == Shape{1, 8, 8});
    for (double v : ds[0].image.data()) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
    for (double v : ds[0].mask.data()) CHECK((v == 0.0 || v == 1.0));
}

TEST_CASE("save_mask thresholds and round-trips through load") {
    TempDir dir("malunet_data_e");
    const std::string hi = (dir.path / "hi.pgm").string();
    const std::string lo = (dir.path / "lo.pgm").string();
    save_mask(Tensor::full({1, 4, 4}, 0.9), hi);
    save_mask(Tensor::full({1, 4, 4}, 0.1), lo);
    Tensor hi_mask = load_pgm(hi);
    Tensor lo_mask = load_pgm(lo);
    for (double v : hi_mask.data()) CHECK(v == 1.0);
    for (double v : lo_mask.data()) CHECK(v == 0.0);

    auto rng = substream(51, "mask");
    std::vector<double> d(64);
    for (double& v : d) v = uniform01(rng);
    Tensor probs = Tensor::from_data({1, 8, 8}, d);
    const std::string p = (dir.path / "rt.pgm").string();
    save_mask(probs, p);
    Tensor back = load_pgm(p);
    for (std::size_t i = 0; i < 64; ++i) {
        CHECK(back.data()[i] == (d[i] >= 0.5 ? 1.0 : 0.0));
    }
    CHECK_THROWS_AS(save_mask(probs, (dir.path / "nodir" / "x.pgm").string()), IoError);
}

TEST_CASE("synthetic dataset: determinism, shapes, coverage bounds") {
    auto a = synth_dataset(8, 64, 123);
    auto b = synth_dataset(8, 64, 123);
    auto c = synth_dataset(8, 64, 124);
    REQUIRE(a.size() == 8);
    bool differs = false;
    for (int i = 0; i < 8; ++i) {
        CHECK(a[static_cast<std::size_t>(i)].image.shape() == Shape{3, 64, 64});
        CHECK(a[static_cast<std::size_t>(i)].mask.shape() == Shape{1, 64, 64});
        CHECK(a[static_cast<std::size_t>(i)].image.data() == b[static_cast<std::size_t>(i)].image.data());
        differs |= a[static_cast<std::size_t>(i)].mask.data() != c[static_cast<std::size_t>(i)].mask.data();
        double frac = 0;
        for (double v : a[static_cast<std::size_t>(i)].mask.data()) {
            CHECK((v == 0.0 || v == 1.0));
            frac += v;
        }
        frac /= 64.0 * 64.0;
        CHECK(frac >= 0.01);
        CHECK(frac <= 0.60);
        for (double v : a[static_cast<std::size_t>(i)].image.data()) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
    }
    CHECK(differs);
}
