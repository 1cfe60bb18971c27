#include <doctest.h>

#include <filesystem>
#include <random>

#include "dp/image.hpp"

using namespace dp;
namespace fs = std::filesystem;

TEST_CASE("16-bit png round-trips exactly") {
    std::mt19937_64 rng(7);
    ImageU16 img;
    img.width = 33;
    img.height = 17;
    img.pixels.resize(33 * 17);
    for (auto& p : img.pixels) p = static_cast<std::uint16_t>(rng() % 65536);
    const fs::path path = fs::temp_directory_path() / "dp_img16.png";
    write_png16(path, img);
    const ImageU16 back = read_png16(path);
    CHECK(back.width == img.width);
    CHECK(back.height == img.height);
    CHECK(back.pixels == img.pixels);
    fs::remove(path);
}

TEST_CASE("8-bit rgb png round-trips exactly") {
    std::mt19937_64 rng(8);
    ImageU8 img;
    img.width = 21;
    img.height = 13;
    img.channels = 3;
    img.pixels.resize(21 * 13 * 3);
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng() % 256);
    const fs::path path = fs::temp_directory_path() / "dp_img8.png";
    write_png8(path, img);
    const ImageU8 back = read_png8(path);
    CHECK(back.channels == 3);
    CHECK(back.pixels == img.pixels);
    fs::remove(path);
}

TEST_CASE("reading a missing image names the path") {
    const fs::path path = fs::temp_directory_path() / "dp_definitely_missing.png";
    try {
        read_png16(path);
        FAIL("expected DataError");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find(path.string()) != std::string::npos);
    }
}

TEST_CASE("bilinear resize preserves constants and identity size") {
    std::vector<double> src(12 * 9, 0.75);
    const auto out = resize_bilinear(src, 12, 9, 30, 5);
    for (double v : out) CHECK(v == doctest::Approx(0.75));

    std::mt19937_64 rng(9);
    std::vector<double> rnd(8 * 6);
    for (auto& v : rnd) v = static_cast<double>(rng() % 1000) / 1000.0;
    const auto same = resize_bilinear(rnd, 8, 6, 8, 6);
    for (std::size_t i = 0; i < rnd.size(); ++i) CHECK(same[i] == doctest::Approx(rnd[i]).epsilon(1e-12));
}

TEST_CASE("bilinear resize interpolates between neighbours") {
    // 1x2 image [0, 1] widened to 4 columns: interior samples blend linearly.
    const std::vector<double> src{0.0, 1.0};
    const auto out = resize_bilinear(src, 2, 1, 4, 1);
    CHECK(out[0] == doctest::Approx(0.0));
    CHECK(out[1] == doctest::Approx(0.25));
    CHECK(out[2] == doctest::Approx(0.75));
    CHECK(out[3] == doctest::Approx(1.0));
}

TEST_CASE("rgb_to_hsv matches known colors") {
    const Hsv green = rgb_to_hsv(0, 255, 0);
    CHECK(green.h == doctest::Approx(120.0));
    CHECK(green.s == doctest::Approx(1.0));
    CHECK(green.v == doctest::Approx(1.0));

    const Hsv gray = rgb_to_hsv(128, 128, 128);
    CHECK(gray.s == doctest::Approx(0.0));
    CHECK(gray.v == doctest::Approx(128.0 / 255.0));

    const Hsv red = rgb_to_hsv(255, 0, 0);
    CHECK(red.h == doctest::Approx(0.0));

    const Hsv blue = rgb_to_hsv(0, 0, 255);
    CHECK(blue.h == doctest::Approx(240.0));
}
