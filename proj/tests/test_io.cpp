#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "phoenix/io.hpp"

using namespace phoenix;
namespace fs = std::filesystem;

namespace {

std::string bytes_of(const Tensor& t) {
    std::ostringstream out;
    write_tensor(out, t);
    return out.str();
}

fs::path scratch_dir(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("phoenix_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

}  // namespace

TEST_CASE("tensor record layout") {
    Tensor t({2, 1}, std::vector<float>{1.0f, -2.5f});
    const std::string b = bytes_of(t);
    REQUIRE(b.size() == 4 + 2 + 1 + 1 + 2 * 8 + 2 * 4);
    CHECK(b.substr(0, 4) == "PHXT");
    CHECK(static_cast<unsigned char>(b[4]) == 1);
    CHECK(static_cast<unsigned char>(b[5]) == 0);
    CHECK(static_cast<unsigned char>(b[6]) == 0);
    CHECK(static_cast<unsigned char>(b[7]) == 2);
    std::uint64_t d0 = 0;
    std::memcpy(&d0, b.data() + 8, 8);
    CHECK(d0 == 2);
    float v1 = 0;
    std::memcpy(&v1, b.data() + 24 + 4, 4);
    CHECK(v1 == -2.5f);
}

TEST_CASE("tensor round trip is bitwise") {
    Tensor t({2, 3, 4});
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(i) * 0.37f - 3.0f;
    std::istringstream in(bytes_of(t));
    CHECK(bitwise_equal(read_tensor(in), t));
}

TEST_CASE("malformed tensor records") {
    const std::string good = bytes_of(Tensor({2}, 1.0f));
    auto read = [](std::string s) {
        std::istringstream in(s);
        return read_tensor(in);
    };
    std::string bad_magic = good;
    bad_magic[0] = 'X';
    CHECK_THROWS_AS(read(bad_magic), FormatError);
    std::string bad_version = good;
    bad_version[4] = 2;
    CHECK_THROWS_AS(read(bad_version), FormatError);
    std::string bad_dtype = good;
    bad_dtype[6] = 1;
    CHECK_THROWS_AS(read(bad_dtype), FormatError);
    CHECK_THROWS_AS(read(good.substr(0, good.size() - 1)), FormatError);
}

TEST_CASE("checkpoint round trip keeps names, flags and order") {
    std::vector<CheckpointEntry> entries{
        {"z.weight", Tensor({2, 2}, 0.5f), false},
        {"a.bias", Tensor({3}, -1.0f), true},
    };
    const fs::path dir = scratch_dir("ckpt");
    save_checkpoint(dir / "m.phxc", entries);
    auto back = load_checkpoint(dir / "m.phxc");
    REQUIRE(back.size() == 2);
    for (std::size_t i = 0; i < 2; ++i) {
        CHECK(back[i].name == entries[i].name);
        CHECK(back[i].personal == entries[i].personal);
        CHECK(bitwise_equal(back[i].tensor, entries[i].tensor));
    }
}

TEST_CASE("corrupt checkpoint names the failing record") {
    std::vector<CheckpointEntry> entries{
        {"first", Tensor({2}, 1.0f), false},
        {"second", Tensor({4}, 2.0f), false},
    };
    std::ostringstream out;
    write_checkpoint(out, entries);
    std::string s = out.str();
    std::istringstream in(s.substr(0, s.size() - 3));
    try {
        read_checkpoint(in);
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("record 1 'second'") != std::string::npos);
    }
}

TEST_CASE("netpbm pixel mapping") {
    const fs::path dir = scratch_dir("pgm");
    Tensor img({1, 1, 4}, std::vector<float>{-1.0f, 0.0f, 1.0f, 2.0f});
    save_netpbm(dir / "a.pgm", img);
    std::ifstream in(dir / "a.pgm", std::ios::binary);
    std::string content((std::istreambuf_iterator<char>(in)), {});
    const std::string header = "P5\n4 1\n255\n";
    REQUIRE(content.size() == header.size() + 4);
    CHECK(content.substr(0, header.size()) == header);
    CHECK(static_cast<unsigned char>(content[header.size() + 0]) == 0);
    CHECK(static_cast<unsigned char>(content[header.size() + 1]) == 128);
    CHECK(static_cast<unsigned char>(content[header.size() + 2]) == 255);
    CHECK(static_cast<unsigned char>(content[header.size() + 3]) == 255);

    save_netpbm(dir / "b.ppm", Tensor({3, 2, 2}, 0.0f));
    std::ifstream in3(dir / "b.ppm", std::ios::binary);
    std::string ppm((std::istreambuf_iterator<char>(in3)), {});
    CHECK(ppm.substr(0, 2) == "P6");
    CHECK(ppm.size() == std::string("P6\n2 2\n255\n").size() + 12);

    CHECK_THROWS_AS(save_netpbm(dir / "c.pgm", Tensor({2, 2, 2})), ShapeError);
}
