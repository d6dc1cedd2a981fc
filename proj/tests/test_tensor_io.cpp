#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "facet/core/image_ops.hpp"
#include "facet/core/pose.hpp"
#include "facet/core/rng.hpp"
#include "facet/core/sha256.hpp"
#include "facet/core/tensor.hpp"
#include "facet/io/blob.hpp"
#include "facet/io/png_io.hpp"

using facet::Tensor;

namespace {
std::string tmp_path(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "facet_io_tests";
    std::filesystem::create_directories(dir);
    return (dir / name).string();
}
}  // namespace

TEST_CASE("tensor shape and storage semantics") {
    Tensor<float> t({2, 3});
    REQUIRE(t.numel() == 6);
    t.at(1, 2) = 5.f;
    Tensor<float> alias = t;
    REQUIRE(alias.at(1, 2) == 5.f);
    alias.at(1, 2) = 7.f;
    REQUIRE(t.at(1, 2) == 7.f);  // copies share storage
    Tensor<float> priv = t.clone();
    priv.at(1, 2) = 9.f;
    REQUIRE(t.at(1, 2) == 7.f);  // clone does not

    REQUIRE_THROWS_AS(t.reshaped({4, 2}), facet::Error);
    Tensor<float> r = t.reshaped({3, 2});
    r.at(0, 1) = -1.f;
    REQUIRE(t.at(0, 1) == -1.f);  // reshape aliases
}

TEST_CASE("sha256 known vectors") {
    REQUIRE(facet::Sha256::hex("") ==
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    REQUIRE(facet::Sha256::hex("abc") ==
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    // streaming across block boundaries agrees with one-shot
    std::string long_msg(200, 'x');
    facet::Sha256 s;
    s.update(long_msg.data(), 130);
    s.update(long_msg.data() + 130, 70);
    REQUIRE(s.hex_digest() == facet::Sha256::hex(long_msg));
}

TEST_CASE("rng determinism and independent substreams") {
    facet::Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());

    facet::Rng s1 = facet::Rng::stream(7, "jitter", 3);
    facet::Rng s2 = facet::Rng::stream(7, "jitter", 3);
    facet::Rng s3 = facet::Rng::stream(7, "jitter", 4);
    facet::Rng s4 = facet::Rng::stream(7, "expr", 3);
    REQUIRE(s1.next_u64() == s2.next_u64());
    REQUIRE(s1.next_u64() != s3.next_u64());
    REQUIRE(s2.next_u64() != s4.next_u64());

    facet::Rng u(5);
    for (int i = 0; i < 1000; ++i) {
        double x = u.uniform();
        REQUIRE(x >= 0.0);
        REQUIRE(x < 1.0);
        int k = u.uniform_int(7);
        REQUIRE(k >= 0);
        REQUIRE(k < 7);
    }
    // normal() has roughly zero mean / unit variance
    facet::Rng n(11);
    double m = 0, v = 0;
    const int N = 20000;
    for (int i = 0; i < N; ++i) {
        double x = n.normal();
        m += x;
        v += x * x;
    }
    m /= N;
    v = v / N - m * m;
    REQUIRE(std::abs(m) < 0.03);
    REQUIRE(std::abs(v - 1.0) < 0.05);
}

TEST_CASE("blob round trip is bit exact") {
    Tensor<float> t({2, 2, 3});
    facet::Rng rng(1);
    for (auto& v : *t.store) v = static_cast<float>(rng.uniform(-5, 5));
    std::string p = tmp_path("geo.blob");
    facet::write_blob(p, t, "xyz", "mm");
    Tensor<float> back = facet::read_blob(p);
    REQUIRE(back.shape == t.shape);
    REQUIRE(std::memcmp(back.data(), t.data(), sizeof(float) * t.numel()) == 0);
}

TEST_CASE("blob integrity guards") {
    Tensor<float> t({2, 2});
    std::string p = tmp_path("bad.blob");
    facet::write_blob(p, t);

    // corrupt the sidecar shape so it disagrees with the byte count
    {
        std::ofstream s(facet::blob_sidecar_path(p), std::ios::trunc);
        s << R"({"shape":[2,3],"dtype":"float32","channels":"","units":""})";
    }
    REQUIRE_THROWS_AS(facet::read_blob(p), facet::Error);

    Tensor<float> nan_t({2});
    nan_t[0] = std::numeric_limits<float>::quiet_NaN();
    REQUIRE_THROWS_AS(facet::write_blob(tmp_path("nan.blob"), nan_t), facet::Error);
}

TEST_CASE("16-bit png round trip after quantization") {
    facet::Rng rng(3);
    for (int channels : {1, 3}) {
        Tensor<float> img({channels, 6, 5});
        for (auto& v : *img.store) v = static_cast<float>(rng.uniform());
        facet::quantize16_inplace(img);
        std::string p = tmp_path("img" + std::to_string(channels) + ".png");
        facet::write_png16(p, img);
        Tensor<float> back = facet::read_png16(p);
        REQUIRE(back.shape == img.shape);
        REQUIRE(facet::max_abs_diff(back, img) == 0.0);
    }
}

TEST_CASE("warp with zero flow is the identity") {
    facet::Rng rng(4);
    Tensor<float> img({3, 8, 8});
    for (auto& v : *img.store) v = static_cast<float>(rng.uniform());
    Tensor<float> flow({2, 8, 8});
    Tensor<float> out = facet::apply_warp(img, flow);
    REQUIRE(facet::max_abs_diff(out, img) == 0.0);
}

TEST_CASE("warp by integer offset shifts pixels") {
    // out(x) = in(x + 1): a one-pixel flow in x pulls the right neighbor
    Tensor<float> img({1, 1, 4});
    for (int x = 0; x < 4; ++x) img.at(0, 0, x) = static_cast<float>(x);
    Tensor<float> flow = Tensor<float>::zeros({2, 1, 4});
    for (int x = 0; x < 4; ++x) flow.at(0, 0, x) = 1.f;
    Tensor<float> out = facet::apply_warp(img, flow);
    REQUIRE(out.at(0, 0, 0) == 1.f);
    REQUIRE(out.at(0, 0, 1) == 2.f);
    REQUIRE(out.at(0, 0, 2) == 3.f);
    REQUIRE(out.at(0, 0, 3) == 3.f);  // clamped at the edge
}

TEST_CASE("upsample and downsample conventions") {
    // constant field stays constant under bilinear upsample
    Tensor<float> c = Tensor<float>::full({2, 3, 3}, 0.7f);
    Tensor<float> up = facet::upsample_bilinear(c, 4);
    REQUIRE(up.dim(1) == 12);
    REQUIRE(facet::max_abs_diff(up, Tensor<float>::full({2, 12, 12}, 0.7f)) < 1e-6);

    // box downsample averages blocks
    Tensor<float> img({1, 2, 2});
    img.at(0, 0, 0) = 1.f;
    img.at(0, 0, 1) = 2.f;
    img.at(0, 1, 0) = 3.f;
    img.at(0, 1, 1) = 6.f;
    Tensor<float> dn = facet::downsample_box(img, 2);
    REQUIRE(dn.at(0, 0, 0) == 3.f);

    // down(up(x)) recovers a smooth (bilinear) field well away from edges
    Tensor<float> base({1, 4, 4});
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) base.at(0, y, x) = 0.1f + 0.05f * x + 0.03f * y;
    Tensor<float> cycled = facet::downsample_box(facet::upsample_bilinear(base, 2), 2);
    for (int y = 1; y < 3; ++y)
        for (int x = 1; x < 3; ++x)
            REQUIRE(std::abs(cycled.at(0, y, x) - base.at(0, y, x)) < 1e-6);
}

TEST_CASE("total variation of flat and step images") {
    Tensor<float> flat = Tensor<float>::full({3, 5, 5}, 0.4f);
    REQUIRE(facet::total_variation(flat) == 0.0);
    Tensor<float> step({1, 1, 4});
    step.at(0, 0, 2) = 1.f;
    step.at(0, 0, 3) = 1.f;
    // |0-0| + |1-0| + |0-1|... forward diffs: 0,1,0 -> sum 1, mean over 4 px
    REQUIRE(facet::total_variation(step) == Catch::Approx(0.25));
}

TEST_CASE("rigid transforms compose and invert") {
    facet::Rng rng(12);
    facet::PoseTransform p = facet::random_pose(rng, 0.3, 5.0);
    facet::PoseTransform q = facet::random_pose(rng, 0.3, 5.0);
    facet::Vec3 x{1.0, -2.0, 3.0};

    facet::Vec3 a = q.apply(p.apply(x));
    facet::Vec3 b = q.compose(p).apply(x);
    REQUIRE(facet::norm(a - b) < 1e-12);

    facet::Vec3 r = p.inverse().apply(p.apply(x));
    REQUIRE(facet::norm(r - x) < 1e-12);

    // rotation preserves lengths
    facet::Vec3 rx = p.rot.rotate(x);
    REQUIRE(facet::norm(rx) == Catch::Approx(facet::norm(x)).epsilon(1e-12));
}
