#include <doctest.h>

#include "dafdft/augment.hpp"
#include "support.hpp"

#include <cmath>
#include <set>

using namespace dafdft;
using dafdft::test::uniform;

namespace {

Index zeroed_pixels(const Tensor& image)
{
    const Index plane = image.dim(1) * image.dim(2);
    Index n = 0;
    for (Index i = 0; i < plane; ++i) n += image.data()[i] == 0.0f ? 1 : 0;
    return n;
}

// Independent simulation of the mask process on a boolean grid.
double monte_carlo_fraction(int alpha, int beta, int base, int size, int draws, unsigned seed)
{
    std::minstd_rand gen(seed);
    std::vector<char> hit(static_cast<std::size_t>(size * size));
    double total = 0;
    for (int d = 0; d < draws; ++d) {
        std::fill(hit.begin(), hit.end(), 0);
        for (int m = 0; m < alpha; ++m) {
            const int side = base * std::uniform_int_distribution<int>(1, beta)(gen);
            const int top = std::uniform_int_distribution<int>(-side + 1, size - 1)(gen);
            const int left = std::uniform_int_distribution<int>(-side + 1, size - 1)(gen);
            for (int y = std::max(top, 0); y < std::min(top + side, size); ++y)
                for (int x = std::max(left, 0); x < std::min(left + side, size); ++x) hit[y * size + x] = 1;
        }
        total += static_cast<double>(std::count(hit.begin(), hit.end(), 1)) / (size * size);
    }
    return total / draws;
}

// A mask of side s covers a given row with probability s / (H + s - 1),
// the same for every row, so every pixel is masked with the same probability.
double exact_fraction(int alpha, int beta, int base, int size)
{
    double q = 0;
    for (int u = 1; u <= beta; ++u) {
        const double s = base * u;
        q += std::pow(s / (size + s - 1), 2) / beta;
    }
    return 1.0 - std::pow(1.0 - q, alpha);
}

}  // namespace

TEST_CASE("alpha 3 beta 1 zeroes at most 48 pixels")
{
    CutoutConfig cfg;
    cfg.size_multiplier = 1;
    Rng rng(1);
    auto ones = Tensor::full({3, 64, 64}, 1.0f);
    for (int i = 0; i < 500; ++i) {
        auto out = cutout(ones, cfg, rng);
        const Index n = zeroed_pixels(out);
        CHECK(n <= 48);
        CHECK(n >= 1);
    }
}

TEST_CASE("a mask pinned at the origin zeroes exactly the top-left 4x4")
{
    CutoutConfig cfg;
    cfg.iterations = 1;
    cfg.size_multiplier = 1;
    std::uint64_t seed = 0;
    for (;; ++seed) {
        Rng probe(seed);
        const auto masks = sample_cutout_masks(cfg, 64, 64, probe);
        if (masks[0].top == 0 && masks[0].left == 0) break;
    }
    Rng rng(seed);
    auto out = cutout(Tensor::full({3, 64, 64}, 0.5f), cfg, rng);
    for (Index c = 0; c < 3; ++c)
        for (Index y = 0; y < 64; ++y)
            for (Index x = 0; x < 64; ++x) CHECK(out.at({c, y, x}) == ((y < 4 && x < 4) ? 0.0f : 0.5f));
}

TEST_CASE("masks hanging over the border are clipped")
{
    Buffer<float> image = Buffer<float>::Ones(1 * 6 * 6);
    apply_cutout_masks(image, 1, 6, 6, {{-2, 4, 4}});
    Index zeros = 0;
    for (Index i = 0; i < image.size(); ++i) zeros += image[i] == 0.0f ? 1 : 0;
    CHECK(zeros == 4);  // rows 0-1, columns 4-5
    CHECK(image[0 * 6 + 4] == 0.0f);
    CHECK(image[1 * 6 + 5] == 0.0f);
    CHECK(image[2 * 6 + 4] == 1.0f);
}

TEST_CASE("zeroed fraction under alpha 3 beta 5 matches the oracles")
{
    CutoutConfig cfg;  // alpha 3, beta 5, base 4
    Rng rng(2024);
    auto ones = Tensor::full({1, 64, 64}, 1.0f);
    double empirical = 0;
    const int draws = 10000;
    for (int i = 0; i < draws; ++i) empirical += static_cast<double>(zeroed_pixels(cutout(ones, cfg, rng))) / 4096.0;
    empirical /= draws;

    const double mc = monte_carlo_fraction(3, 5, 4, 64, draws, 77);
    const double exact = exact_fraction(3, 5, 4, 64);
    MESSAGE("empirical " << empirical << " monte carlo " << mc << " exact " << exact);
    CHECK(std::abs(empirical - mc) <= 0.01);
    CHECK(std::abs(empirical - exact) <= 0.01);
    CHECK(std::abs(mc - exact) <= 0.01);
}

TEST_CASE("disabled cutout is a bit-exact identity")
{
    CutoutConfig cfg;
    cfg.enabled = false;
    Rng rng(3);
    auto image = uniform<float>({3, 16, 16}, rng, 0, 1);
    CHECK((cutout(image, cfg, rng).data() == image.data()).all());
    auto batch = uniform<float>({4, 3, 16, 16}, rng, 0, 1);
    CHECK((augment_batch(batch, cfg, 9).data() == batch.data()).all());
}

TEST_CASE("augment_batch is reproducible and draws independent masks per image")
{
    CutoutConfig cfg;
    Rng rng(4);
    auto batch = uniform<float>({8, 3, 64, 64}, rng, 0.1, 1);
    auto a = augment_batch(batch, cfg, 123);
    auto b = augment_batch(batch, cfg, 123);
    CHECK((a.data() == b.data()).all());
    CHECK((augment_batch(batch, cfg, 124).data() != a.data()).any());

    const Index image = 3 * 64 * 64, plane = 64 * 64;
    std::set<std::vector<bool>> patterns;
    for (Index i = 0; i < 8; ++i) {
        std::vector<bool> mask(static_cast<std::size_t>(plane));
        for (Index p = 0; p < plane; ++p) mask[static_cast<std::size_t>(p)] = a.data()[i * image + p] == 0.0f;
        patterns.insert(mask);
    }
    CHECK(patterns.size() >= 2);
}

TEST_CASE("unmasked pixels are untouched and values stay in range")
{
    CutoutConfig cfg;
    cfg.size_multiplier = 10;
    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        auto image = uniform<float>({3, 32, 32}, rng, 0.2, 0.9);
        auto out = cutout(image, cfg, rng);
        for (Index y = 0; y < 32; ++y)
            for (Index x = 0; x < 32; ++x) {
                const bool masked = out.at({0, y, x}) == 0.0f;
                for (Index c = 0; c < 3; ++c) {
                    if (masked)
                        CHECK(out.at({c, y, x}) == 0.0f);
                    else
                        CHECK(out.at({c, y, x}) == image.at({c, y, x}));
                }
            }
        CHECK(((out.data() == 0.0f) || ((out.data() >= 0.2f) && (out.data() <= 0.9f))).all());
    }
}

TEST_CASE("invalid cutout configurations are rejected")
{
    CutoutConfig cfg;
    cfg.iterations = 0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = {};
    cfg.size_multiplier = 0;
    Rng rng(6);
    CHECK_THROWS_AS(sample_cutout_masks(cfg, 8, 8, rng), std::invalid_argument);
    CHECK_THROWS_AS(cutout(Tensor::zeros({1, 3, 8, 8}), CutoutConfig{}, rng), ShapeError);
}
