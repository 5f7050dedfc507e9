#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "aqfn/errors.hpp"
#include "aqfn/explain.hpp"
#include "aqfn/model.hpp"
#include "aqfn/rng.hpp"

using namespace aqfn;

namespace {

// 16px collapses the backbone maps to 1x1 (constant heatmaps); pass 32 when
// the test needs spatial structure.
ModelConfig tiny_config(int image_size = 16) {
    ModelConfig mc;
    mc.backbone_profile = BackboneProfile::micro_depthwise;
    mc.image_size = image_size;
    mc.sensor_dim = 3;
    mc.embed_dim = 8;
    mc.fusion_dim = 8;
    mc.proj_hidden_dim = 8;
    mc.dropout_rate = 0.0;
    mc.validate();
    return mc;
}

TensorPtr rand_image(const ModelConfig& mc, Rng rng) {
    auto t = zeros({1, 3, mc.image_size, mc.image_size});
    for (auto& v : t->data) v = rng.uniform(0.0, 1.0);
    return t;
}

TensorPtr rand_sensors(const ModelConfig& mc, Rng rng) {
    auto t = zeros({1, mc.sensor_dim});
    for (auto& v : t->data) v = rng.normal();
    return t;
}

struct TmpDir {
    std::filesystem::path path;
    explicit TmpDir(const std::string& name) : path(std::filesystem::temp_directory_path() / name) {
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TmpDir() { std::filesystem::remove_all(path); }
    std::string str() const { return path.string(); }
};

struct RawImage {
    std::string magic;
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> bytes;
};

RawImage read_netpbm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    RawImage r;
    int maxval = 0;
    in >> r.magic >> r.width >> r.height >> maxval;
    CHECK(maxval == 255);
    in.get(); // single whitespace after the header
    const std::size_t n =
        static_cast<std::size_t>(r.width) * r.height * (r.magic == "P6" ? 3 : 1);
    r.bytes.resize(n);
    in.read(reinterpret_cast<char*>(r.bytes.data()), static_cast<std::streamsize>(n));
    REQUIRE(in.gcount() == static_cast<std::streamsize>(n));
    return r;
}

} // namespace

TEST_CASE("cam_from_maps: uniform positive fixture gives a flat unit map") {
    const std::vector<double> maps(4, 1.0); // one 2x2 channel
    const std::vector<double> grad(4, 1.0);
    const Heatmap h = cam_from_maps(maps, grad, 1, 2, 2, 2, 2);
    REQUIRE(h.values.size() == 4);
    CHECK(h.height == 2);
    CHECK(h.width == 2);
    for (double v : h.values) CHECK(v == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("cam_from_maps: zero gradient stays zero after normalization") {
    const std::vector<double> maps{1.0, 2.0, 3.0, 4.0};
    const std::vector<double> grad(4, 0.0);
    const Heatmap h = cam_from_maps(maps, grad, 1, 2, 2, 4, 4);
    for (double v : h.values) CHECK(v == 0.0);
}

TEST_CASE("cam_from_maps: negatively weighted channel is clipped by the ReLU") {
    const std::vector<double> maps(4, 1.0);
    const std::vector<double> grad(4, -1.0);
    const Heatmap h = cam_from_maps(maps, grad, 1, 2, 2, 2, 2);
    for (double v : h.values) CHECK(v == 0.0);
}

TEST_CASE("cam_from_maps: two-channel hand computation") {
    // w0 = mean(grad0) = 1, w1 = mean(grad1) = -2.
    // combined = map0 - 2*map1 = {-7,-4,-1,2} -> relu -> {0,0,0,2} -> /2.
    const std::vector<double> maps{1, 2, 3, 4, /**/ 4, 3, 2, 1};
    const std::vector<double> grad{1, 1, 1, 1, /**/ -2, -2, -2, -2};
    const Heatmap h = cam_from_maps(maps, grad, 2, 2, 2, 2, 2);
    CHECK(h.values[0] == doctest::Approx(0.0));
    CHECK(h.values[1] == doctest::Approx(0.0));
    CHECK(h.values[2] == doctest::Approx(0.0));
    CHECK(h.values[3] == doctest::Approx(1.0));
}

TEST_CASE("cam_from_maps: 1x1 map upsamples to a constant field") {
    const std::vector<double> maps{3.5};
    const std::vector<double> grad{2.0};
    const Heatmap h = cam_from_maps(maps, grad, 1, 1, 1, 4, 4);
    REQUIRE(h.values.size() == 16);
    for (double v : h.values) CHECK(v == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("cam_from_maps: rejects mismatched buffers and degenerate dims") {
    const std::vector<double> maps(4, 1.0);
    const std::vector<double> grad(3, 1.0);
    CHECK_THROWS_AS(cam_from_maps(maps, grad, 1, 2, 2, 2, 2), ParamError);
    CHECK_THROWS_AS(cam_from_maps(maps, maps, 2, 2, 2, 2, 2), ParamError);
    CHECK_THROWS_AS(cam_from_maps(maps, maps, 1, 2, 2, 0, 2), ParamError);
    CHECK_THROWS_AS(cam_from_maps({}, {}, 0, 1, 1, 1, 1), ParamError);
}

TEST_CASE("grad_cam: output is normalized, image sized, and deterministic") {
    const ModelConfig mc = tiny_config();
    const ParameterStore store = init_params(mc, Rng(7));
    const TensorPtr x_i = rand_image(mc, Rng(8));
    const TensorPtr x_s = rand_sensors(mc, Rng(9));

    const Heatmap h = grad_cam(store, mc, x_i, x_s, CamTarget::aqi(), "s1");
    CHECK(h.height == mc.image_size);
    CHECK(h.width == mc.image_size);
    CHECK(h.sample_id == "s1");
    REQUIRE(h.values.size() == static_cast<std::size_t>(mc.image_size) * mc.image_size);
    double peak = 0.0;
    for (double v : h.values) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        peak = std::max(peak, v);
    }
    CHECK((peak == doctest::Approx(1.0) || peak == 0.0));

    const Heatmap again = grad_cam(store, mc, x_i, x_s, CamTarget::aqi(), "s1");
    REQUIRE(again.values.size() == h.values.size());
    for (std::size_t i = 0; i < h.values.size(); ++i) CHECK(again.values[i] == h.values[i]);
}

TEST_CASE("grad_cam: leaves parameter gradients clean") {
    const ModelConfig mc = tiny_config();
    const ParameterStore store = init_params(mc, Rng(7));
    (void)grad_cam(store, mc, rand_image(mc, Rng(8)), rand_sensors(mc, Rng(9)),
                   CamTarget::sensor(1));
    for (const auto& [name, t] : store.params) {
        for (double g : t->grad) CHECK(g == 0.0);
    }
}

TEST_CASE("grad_cam: invariant under positive rescaling of the target head") {
    const ModelConfig mc = tiny_config(32);
    ParameterStore store = init_params(mc, Rng(17));
    const TensorPtr x_i = rand_image(mc, Rng(18));
    const TensorPtr x_s = rand_sensors(mc, Rng(19));
    const Heatmap base = grad_cam(store, mc, x_i, x_s, CamTarget::aqi());

    for (auto& v : store.at("head_aqi.weight")->data) v *= 3.0;
    for (auto& v : store.at("head_aqi.bias")->data) v *= 3.0;
    const Heatmap scaled = grad_cam(store, mc, x_i, x_s, CamTarget::aqi());

    REQUIRE(scaled.values.size() == base.values.size());
    for (std::size_t i = 0; i < base.values.size(); ++i) {
        CHECK(scaled.values[i] == doctest::Approx(base.values[i]).epsilon(1e-12));
    }
}

TEST_CASE("grad_cam: sensor targets are validated and distinct from the aqi map") {
    const ModelConfig mc = tiny_config(32);
    const ParameterStore store = init_params(mc, Rng(21));
    const TensorPtr x_i = rand_image(mc, Rng(22));
    const TensorPtr x_s = rand_sensors(mc, Rng(23));

    CHECK_THROWS_AS(grad_cam(store, mc, x_i, x_s, CamTarget::sensor(-1)), ParamError);
    CHECK_THROWS_AS(grad_cam(store, mc, x_i, x_s, CamTarget::sensor(99)), ParamError);
    // within the global channel list but beyond this model's sensor_dim
    CHECK_THROWS_AS(grad_cam(store, mc, x_i, x_s, CamTarget::sensor(4)), ParamError);

    const Heatmap aqi = grad_cam(store, mc, x_i, x_s, CamTarget::aqi());
    const Heatmap s0 = grad_cam(store, mc, x_i, x_s, CamTarget::sensor(0));
    double diff = 0.0;
    for (std::size_t i = 0; i < aqi.values.size(); ++i) {
        diff = std::max(diff, std::fabs(aqi.values[i] - s0.values[i]));
    }
    CHECK(diff > 1e-9);
}

TEST_CASE("cam_target_name maps to channel names") {
    CHECK(cam_target_name(CamTarget::aqi()) == "aqi");
    CHECK(cam_target_name(CamTarget::sensor(0)) == std::string(kSensorNames[0]));
    CHECK(cam_target_name(CamTarget::sensor(kSensorDim - 1)) ==
          std::string(kSensorNames[kSensorDim - 1]));
    CHECK_THROWS_AS(cam_target_name(CamTarget::sensor(kSensorDim)), ParamError);
    CHECK_THROWS_AS(cam_target_name(CamTarget::sensor(-1)), ParamError);
}

TEST_CASE("warm_colormap: anchored at black and white, monotone per channel") {
    const auto map = warm_colormap();
    CHECK(map[0][0] == 0.0);
    CHECK(map[0][1] == 0.0);
    CHECK(map[0][2] == 0.0);
    CHECK(map[255][0] == doctest::Approx(1.0));
    CHECK(map[255][1] == doctest::Approx(1.0));
    CHECK(map[255][2] == doctest::Approx(1.0));
    for (int i = 1; i < 256; ++i) {
        for (int c = 0; c < 3; ++c) CHECK(map[i][c] >= map[i - 1][c]);
    }
    // red saturates before green appears, green before blue
    CHECK(map[96][0] == doctest::Approx(1.0));
    CHECK(map[64][2] == 0.0);
}

TEST_CASE("export_heatmap: writes quantized PGM and a 50/50 overlay PPM") {
    TmpDir tmp("tmp_test_explain");
    Heatmap h;
    h.height = 2;
    h.width = 2;
    h.values = {0.0, 0.25, 0.5, 1.0};
    h.sample_id = "probe";
    h.target = CamTarget::aqi();

    Image base;
    base.channels = 3;
    base.height = 2;
    base.width = 2;
    base.pix.assign(12, 0.5);

    const auto [pgm_path, ppm_path] = export_heatmap(h, base, tmp.str());
    CHECK(pgm_path == tmp.str() + "/probe_aqi.pgm");
    CHECK(ppm_path == tmp.str() + "/probe_aqi.ppm");

    const RawImage pgm = read_netpbm(pgm_path);
    CHECK(pgm.magic == "P5");
    CHECK(pgm.width == 2);
    CHECK(pgm.height == 2);
    const std::vector<std::uint8_t> want{0, 64, 128, 255};
    CHECK(pgm.bytes == want);

    const RawImage ppm = read_netpbm(ppm_path);
    CHECK(ppm.magic == "P6");
    REQUIRE(ppm.bytes.size() == 12);
    const auto cmap = warm_colormap();
    for (int p = 0; p < 4; ++p) {
        const int idx = static_cast<int>(std::lround(h.values[p] * 255.0));
        for (int c = 0; c < 3; ++c) {
            const double expect = 0.5 * 0.5 + 0.5 * cmap[idx][c];
            CHECK(static_cast<int>(ppm.bytes[p * 3 + c]) ==
                  static_cast<int>(std::lround(expect * 255.0)));
        }
    }
}

TEST_CASE("export_heatmap: zero map leaves the dimmed base image") {
    TmpDir tmp("tmp_test_explain_zero");
    Heatmap h;
    h.height = 2;
    h.width = 2;
    h.values.assign(4, 0.0);
    h.target = CamTarget::sensor(2);

    Image base;
    base.channels = 3;
    base.height = 2;
    base.width = 2;
    base.pix = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 0.0, 0.25};

    const auto [pgm_path, ppm_path] = export_heatmap(h, base, tmp.str());
    CHECK(pgm_path.find(std::string("sample_") + kSensorNames[2] + ".pgm") != std::string::npos);

    const RawImage ppm = read_netpbm(ppm_path);
    const std::size_t npx = 4;
    for (std::size_t p = 0; p < npx; ++p) {
        for (int c = 0; c < 3; ++c) {
            const double expect = 0.5 * base.pix[c * npx + p];
            CHECK(static_cast<int>(ppm.bytes[p * 3 + c]) ==
                  static_cast<int>(std::lround(expect * 255.0)));
        }
    }
}

TEST_CASE("export_heatmap: base image must match the heatmap") {
    TmpDir tmp("tmp_test_explain_dims");
    Heatmap h;
    h.height = 2;
    h.width = 2;
    h.values.assign(4, 0.0);

    Image wrong;
    wrong.channels = 3;
    wrong.height = 4;
    wrong.width = 4;
    wrong.pix.assign(48, 0.0);
    CHECK_THROWS_AS(export_heatmap(h, wrong, tmp.str()), ShapeError);

    Image gray;
    gray.channels = 1;
    gray.height = 2;
    gray.width = 2;
    gray.pix.assign(4, 0.0);
    CHECK_THROWS_AS(export_heatmap(h, gray, tmp.str()), ShapeError);
}
