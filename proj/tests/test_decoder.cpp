#include <cmath>
#include <vector>

#include "catch2/catch_amalgamated.hpp"
#include "dmdetr/decoder.hpp"
#include "gradcheck.hpp"

using namespace dmdetr;
using testutil::random_tensor;

namespace {

// Plain-loop bilinear interpolation of one point on a G x G x C grid,
// align-corners with border clamping.
std::vector<double> bilinear_oracle(const Tensor& grid, double x, double y, int g) {
    int c = grid.dim(1);
    double u = std::clamp(x * (g - 1), 0.0, static_cast<double>(g - 1));
    double v = std::clamp(y * (g - 1), 0.0, static_cast<double>(g - 1));
    int j0 = std::min(static_cast<int>(u), std::max(g - 2, 0));
    int i0 = std::min(static_cast<int>(v), std::max(g - 2, 0));
    int j1 = std::min(j0 + 1, g - 1), i1 = std::min(i0 + 1, g - 1);
    double fu = u - j0, fv = v - i0;
    std::vector<double> out(static_cast<std::size_t>(c));
    for (int ch = 0; ch < c; ++ch) {
        double a = (1 - fu) * grid(i0 * g + j0, ch) + fu * grid(i0 * g + j1, ch);
        double b = (1 - fu) * grid(i1 * g + j0, ch) + fu * grid(i1 * g + j1, ch);
        out[static_cast<std::size_t>(ch)] = (1 - fv) * a + fv * b;
    }
    return out;
}

DecoderLayerParams small_layer(int c, int c_ffn, int heads, int p_pts, int index,
                               InitSampling mode, SeededRng& rng) {
    return init_decoder_layer(c, c_ffn, heads, p_pts, index, mode, rng);
}

}  // namespace

TEST_CASE("grid lattice covers the unit square, x fastest") {
    SeededRng rng(1);
    auto coords = static_sampling_coords("grid", 4, rng);
    std::vector<double> want = {0.25, 0.25, 0.75, 0.25, 0.25, 0.75, 0.75, 0.75};
    REQUIRE(coords.size() == want.size());
    for (std::size_t i = 0; i < want.size(); ++i) REQUIRE(coords[i] == Catch::Approx(want[i]));
}

TEST_CASE("grid lattice truncates when P is not a perfect square") {
    SeededRng rng(1);
    auto coords = static_sampling_coords("grid", 3, rng);
    REQUIRE(coords.size() == 6);
    // first three points of the 2x2 lattice
    std::vector<double> want = {0.25, 0.25, 0.75, 0.25, 0.25, 0.75};
    for (std::size_t i = 0; i < want.size(); ++i) REQUIRE(coords[i] == Catch::Approx(want[i]));
}

TEST_CASE("uniform-fixed coordinates stay inside the image") {
    SeededRng rng(7);
    auto coords = static_sampling_coords("uniform-fixed", 64, rng);
    REQUIRE(coords.size() == 128);
    for (double v : coords) {
        REQUIRE(v >= 0.0);
        REQUIRE(v <= 1.0);
    }
}

TEST_CASE("unknown static sampling mode is rejected") {
    SeededRng rng(1);
    REQUIRE_THROWS_AS(static_sampling_coords("hexagonal", 4, rng), ConfigError);
}

TEST_CASE("bilinear sampling matches the loop oracle") {
    SeededRng rng(11);
    for (int trial = 0; trial < 200; ++trial) {
        int g = 1 + static_cast<int>(rng.uniform_int(0, 6));
        int c = 1 + static_cast<int>(rng.uniform_int(0, 4));
        int p = 1 + static_cast<int>(rng.uniform_int(0, 7));
        Tensor grid = random_tensor({g * g, c}, rng);
        Tensor coords = random_tensor({p, 2}, rng, -0.3, 1.3, false);
        Tensor got = bilinear_sample(grid, coords, g);
        for (int k = 0; k < p; ++k) {
            auto want = bilinear_oracle(grid, coords(k, 0), coords(k, 1), g);
            for (int ch = 0; ch < c; ++ch)
                REQUIRE(std::abs(got(k, ch) - want[static_cast<std::size_t>(ch)]) < 1e-12);
        }
    }
}

TEST_CASE("out-of-bounds samples clamp to the border") {
    SeededRng rng(3);
    Tensor grid = random_tensor({16, 3}, rng);
    Tensor outside = Tensor::from({1, 2}, {-0.2, 0.5});
    Tensor edge = Tensor::from({1, 2}, {0.0, 0.5});
    Tensor a = bilinear_sample(grid, outside, 4);
    Tensor b = bilinear_sample(grid, edge, 4);
    for (int ch = 0; ch < 3; ++ch) REQUIRE(a(0, ch) == b(0, ch));
}

TEST_CASE("samples are convex combinations of grid features") {
    SeededRng rng(5);
    for (int trial = 0; trial < 100; ++trial) {
        Tensor grid = random_tensor({25, 2}, rng);
        Tensor coords = random_tensor({6, 2}, rng, 0.0, 1.0, false);
        Tensor s = bilinear_sample(grid, coords, 5);
        for (int ch = 0; ch < 2; ++ch) {
            double lo = 1e300, hi = -1e300;
            for (int r = 0; r < 25; ++r) {
                lo = std::min(lo, grid(r, ch));
                hi = std::max(hi, grid(r, ch));
            }
            for (int k = 0; k < 6; ++k) {
                REQUIRE(s(k, ch) >= lo - 1e-12);
                REQUIRE(s(k, ch) <= hi + 1e-12);
            }
        }
    }
}

TEST_CASE("bilinear sampling gradients check out for grid and coordinates") {
    SeededRng rng(13);
    Tensor grid = random_tensor({9, 3}, rng);
    // keep coordinates away from cell edges, where the kink breaks the
    // finite-difference estimate
    Tensor coords = Tensor::zeros({3, 2}, true);
    coords.values() = {0.12, 0.31, 0.58, 0.73, 0.91, 0.22};
    double err = testutil::gradcheck({grid, coords}, [&] {
        Tensor s = bilinear_sample(grid, coords, 3);
        return sum(mul(s, s));
    });
    REQUIRE(err < 1e-6);
}

TEST_CASE("first decoder layer ignores the pooled language input") {
    SeededRng rng(17);
    DecoderLayerParams lp = small_layer(8, 16, 2, 4, 1, InitSampling::learnable, rng);
    Tensor f_s0 = random_tensor({1, 8}, rng);
    Tensor pooled_a = random_tensor({1, 8}, rng);
    Tensor pooled_b = random_tensor({1, 8}, rng);
    Tensor qa = sampling_query_generator(f_s0, pooled_a, lp, true);
    Tensor qb = sampling_query_generator(f_s0, pooled_b, lp, true);
    for (std::size_t i = 0; i < qa.size(); ++i) REQUIRE(qa.values()[i] == qb.values()[i]);
    Tensor qc = sampling_query_generator(f_s0, pooled_a, lp, false);
    Tensor qd = sampling_query_generator(f_s0, pooled_b, lp, false);
    bool same = true;
    for (std::size_t i = 0; i < qc.size(); ++i) same = same && qc.values()[i] == qd.values()[i];
    REQUIRE_FALSE(same);
}

TEST_CASE("layer-1 sample coordinates do not depend on the image") {
    SeededRng rng(19);
    DecoderParams dec = init_decoder(2, 8, 16, 2, 4, 3, InitSampling::learnable, rng);
    Tensor p_v = random_tensor({9, 8}, rng);
    Tensor p_l = random_tensor({4, 8}, rng);
    Mask mask(4, 1);
    Tensor f_v1 = random_tensor({9, 8}, rng);
    Tensor f_v2 = random_tensor({9, 8}, rng);
    Tensor f_l1 = random_tensor({4, 8}, rng);
    Tensor f_l2 = random_tensor({4, 8}, rng);
    DecoderOutput a = decoder_forward(f_v1, p_v, f_l1, p_l, mask, dec);
    DecoderOutput b = decoder_forward(f_v2, p_v, f_l2, p_l, mask, dec);
    REQUIRE(a.trace[0].coords == b.trace[0].coords);
    REQUIRE(a.trace[1].coords != b.trace[1].coords);
}

TEST_CASE("freshly initialized offsets keep layer-1 samples near the reference") {
    SeededRng rng(23);
    DecoderParams dec = init_decoder(3, 8, 16, 2, 5, 4, InitSampling::learnable, rng);
    Tensor f_v = random_tensor({16, 8}, rng);
    Tensor p_v = random_tensor({16, 8}, rng);
    Tensor f_l = random_tensor({4, 8}, rng);
    Tensor p_l = random_tensor({4, 8}, rng);
    Mask mask(4, 1);
    DecoderOutput out = decoder_forward(f_v, p_v, f_l, p_l, mask, dec);
    // zeroed offset weights: layer-1 coords are exactly ref + bias
    const auto& tr = out.trace[0];
    REQUIRE(tr.ref_x == 0.5);
    REQUIRE(tr.ref_y == 0.5);
    for (int k = 0; k < 5; ++k) {
        REQUIRE(tr.coords[static_cast<std::size_t>(2 * k)] ==
                Catch::Approx(0.5 + dec.layers[0].off_b(2 * k)));
        REQUIRE(tr.coords[static_cast<std::size_t>(2 * k + 1)] ==
                Catch::Approx(0.5 + dec.layers[0].off_b(2 * k + 1)));
    }
}

TEST_CASE("grid init places the first layer's samples on the lattice") {
    SeededRng rng(29);
    DecoderParams dec = init_decoder(2, 8, 16, 2, 4, 4, InitSampling::grid, rng);
    Tensor f_v = random_tensor({16, 8}, rng);
    Tensor p_v = random_tensor({16, 8}, rng);
    Tensor f_l = random_tensor({4, 8}, rng);
    Tensor p_l = random_tensor({4, 8}, rng);
    Mask mask(4, 1);
    DecoderOutput out = decoder_forward(f_v, p_v, f_l, p_l, mask, dec);
    std::vector<double> want = {0.25, 0.25, 0.75, 0.25, 0.25, 0.75, 0.75, 0.75};
    for (std::size_t i = 0; i < want.size(); ++i)
        REQUIRE(out.trace[0].coords[i] == Catch::Approx(want[i]));
}

TEST_CASE("uniform init freezes only the first layer's offset generator") {
    SeededRng rng(31);
    DecoderParams dec = init_decoder(3, 8, 16, 2, 4, 4, InitSampling::uniform, rng);
    REQUIRE_FALSE(dec.layers[0].off_w.requires_grad());
    REQUIRE_FALSE(dec.layers[0].off_b.requires_grad());
    REQUIRE(dec.layers[1].off_w.requires_grad());
    REQUIRE(dec.layers[2].off_b.requires_grad());
}

TEST_CASE("static sampling uses the fixed coordinates in every layer") {
    SeededRng rng(37);
    DecoderParams dec = init_decoder(3, 8, 16, 2, 4, 4, InitSampling::learnable, rng);
    dec.static_sampling = true;
    dec.static_coords = static_sampling_coords("grid", 4, rng);
    Tensor f_v = random_tensor({16, 8}, rng);
    Tensor p_v = random_tensor({16, 8}, rng);
    Tensor f_l = random_tensor({4, 8}, rng);
    Tensor p_l = random_tensor({4, 8}, rng);
    Mask mask(4, 1);
    DecoderOutput out = decoder_forward(f_v, p_v, f_l, p_l, mask, dec);
    for (const auto& tr : out.trace) REQUIRE(tr.coords == dec.static_coords);
}

TEST_CASE("single decoder layer matches manual composition of its pieces") {
    SeededRng rng(41);
    DecoderParams dec = init_decoder(1, 8, 16, 2, 4, 3, InitSampling::learnable, rng);
    Tensor f_v = random_tensor({9, 8}, rng);
    Tensor p_v = random_tensor({9, 8}, rng);
    Tensor f_l = random_tensor({5, 8}, rng);
    Tensor p_l = random_tensor({5, 8}, rng);
    Mask mask = {1, 1, 1, 0, 0};
    DecoderOutput out = decoder_forward(f_v, p_v, f_l, p_l, mask, dec);

    const DecoderLayerParams& lp = dec.layers[0];
    Tensor ref = Tensor::from({2}, {0.5, 0.5});
    Tensor coords = compute_sample_coords(ref, generate_offsets(dec.f_s0, lp, 4));
    Tensor f_s = bilinear_sample(f_v, coords, 3);
    Tensor p_s = bilinear_sample(p_v, coords, 3);
    Tensor f_d = text_guided_decode(f_s, p_s, f_l, p_l, lp);
    Tensor ref_out = update_reference_point(f_d, mask, lp);

    REQUIRE(out.f_d.size() == f_d.size());
    for (std::size_t i = 0; i < f_d.size(); ++i) REQUIRE(out.f_d.values()[i] == f_d.values()[i]);
    REQUIRE(out.ref(0) == ref_out(0));
    REQUIRE(out.ref(1) == ref_out(1));
    REQUIRE(out.trace.size() == 1);
    REQUIRE(out.trace[0].layer == 1);
    REQUIRE(out.trace[0].coords.size() == 8);
}

TEST_CASE("reference points stay inside the unit square") {
    SeededRng rng(43);
    for (int trial = 0; trial < 20; ++trial) {
        DecoderParams dec = init_decoder(3, 8, 16, 2, 4, 3, InitSampling::learnable, rng);
        Tensor f_v = random_tensor({9, 8}, rng, -3.0, 3.0);
        Tensor p_v = random_tensor({9, 8}, rng);
        Tensor f_l = random_tensor({4, 8}, rng, -3.0, 3.0);
        Tensor p_l = random_tensor({4, 8}, rng);
        Mask mask(4, 1);
        DecoderOutput out = decoder_forward(f_v, p_v, f_l, p_l, mask, dec);
        REQUIRE(out.ref(0) > 0.0);
        REQUIRE(out.ref(0) < 1.0);
        REQUIRE(out.ref(1) > 0.0);
        REQUIRE(out.ref(1) < 1.0);
        for (const auto& tr : out.trace) {
            REQUIRE(tr.ref_x >= 0.0);
            REQUIRE(tr.ref_x <= 1.0);
        }
    }
}

TEST_CASE("decoder gradients flow to the inputs and the initial query") {
    SeededRng rng(47);
    DecoderParams dec = init_decoder(2, 4, 8, 2, 3, 2, InitSampling::learnable, rng);
    Tensor f_v = random_tensor({4, 4}, rng);
    Tensor p_v = random_tensor({4, 4}, rng);
    Tensor f_l = random_tensor({3, 4}, rng);
    Tensor p_l = random_tensor({3, 4}, rng);
    Mask mask = {1, 1, 0};
    double err = testutil::gradcheck({f_v, f_l, dec.f_s0}, [&] {
        DecoderOutput out = decoder_forward(f_v, p_v, f_l, p_l, mask, dec);
        return add(sum(mul(out.f_d, out.f_d)), sum(out.ref));
    });
    REQUIRE(err < 1e-5);
}

TEST_CASE("parse_init_sampling accepts the three modes and rejects junk") {
    REQUIRE(parse_init_sampling("grid") == InitSampling::grid);
    REQUIRE(parse_init_sampling("uniform") == InitSampling::uniform);
    REQUIRE(parse_init_sampling("learnable") == InitSampling::learnable);
    REQUIRE_THROWS_AS(parse_init_sampling("random"), ConfigError);
}
