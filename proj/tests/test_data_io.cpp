#include <doctest.h>

#include "dafdft/checkpoint.hpp"
#include "dafdft/pipeline.hpp"
#include "support.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

using namespace dafdft;
using dafdft::test::TempDir;
using dafdft::test::uniform;

namespace {

std::vector<std::uint8_t> bytes_of(const std::string& header, std::initializer_list<int> payload)
{
    std::vector<std::uint8_t> out(header.begin(), header.end());
    for (int v : payload) out.push_back(static_cast<std::uint8_t>(v));
    return out;
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes)
{
    std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Tensor solid(Index size, float r, float g, float b)
{
    Buffer<float> data(3 * size * size);
    data.segment(0, size * size).setConstant(r);
    data.segment(size * size, size * size).setConstant(g);
    data.segment(2 * size * size, size * size).setConstant(b);
    return Tensor({3, size, size}, data);
}

Checkpoint sample_checkpoint()
{
    Rng rng(5);
    Checkpoint c;
    c.metadata = {{"kind", "test"}, {"answer", 42}};
    c.tensors.push_back({"a.weight", uniform<float>({2, 3, 1, 1}, rng)});
    c.tensors.push_back({"a.bias", uniform<float>({2}, rng)});
    c.tensors.push_back({"b", Tensor::from_values({1}, {std::nanf("")})});
    return c;
}

void put_u32(std::vector<std::uint8_t>& bytes, std::size_t at, std::uint32_t v)
{
    for (int i = 0; i < 4; ++i) bytes[at + static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(v >> (8 * i));
}

CheckpointError::Code decode_error(const std::vector<std::uint8_t>& bytes)
{
    try {
        decode_checkpoint(bytes);
    } catch (const CheckpointError& e) {
        return e.code();
    }
    FAIL("decode unexpectedly succeeded");
    return CheckpointError::Code::Io;
}

CheckpointError::Code restore_error(const Checkpoint& c, const std::vector<NamedTensor>& targets, std::string* what)
{
    try {
        restore_tensors(c, targets);
    } catch (const CheckpointError& e) {
        if (what) *what = e.what();
        return e.code();
    }
    FAIL("restore unexpectedly succeeded");
    return CheckpointError::Code::Io;
}

// Two hand-built features per image: mean intensity and mean absolute
// difference between horizontal neighbours.
std::vector<float> probe_features(const Tensor& image)
{
    const Index h = image.dim(1), w = image.dim(2);
    double mean = 0, diff = 0;
    for (Index c = 0; c < 3; ++c)
        for (Index y = 0; y < h; ++y)
            for (Index x = 0; x < w; ++x) {
                mean += image.at({c, y, x});
                if (x + 1 < w) diff += std::abs(image.at({c, y, x + 1}) - image.at({c, y, x}));
            }
    return {static_cast<float>(mean / (3 * h * w)), static_cast<float>(10.0 * diff / (3 * h * (w - 1)))};
}

Tensor feature_matrix(const DatasetSplit& split)
{
    std::vector<float> values;
    for (const auto& img : split.images)
        for (float f : probe_features(img)) values.push_back(f);
    return Tensor::from_values({static_cast<Index>(split.size()), 2}, values);
}

double linear_probe_test_accuracy(const Dataset& data)
{
    Rng rng(3);
    auto head = DenseParams<float>::glorot(2, 1, rng);
    std::vector<NamedParameter> params{{"w", head.weight, ParamKind::Trainable, true},
                                       {"b", head.bias, ParamKind::Trainable, true}};
    OptimizerState state;
    state.config.learning_rate = 0.05;
    const auto& train = data.at(Role::Train);
    auto x = feature_matrix(train);
    std::vector<float> y(train.labels.begin(), train.labels.end());
    auto labels = Tensor::from_values({static_cast<Index>(y.size()), 1}, y);
    for (int step = 0; step < 300; ++step) {
        backward(bce_loss(sigmoid(dense(x, head)), labels));
        optimizer_step(params, state);
    }
    const auto& test = data.at(Role::Test);
    NoGradGuard guard;
    auto p = sigmoid(dense(feature_matrix(test), head));
    std::vector<double> scores(p.data().data(), p.data().data() + p.numel());
    return accuracy(scores, test.labels);
}

}  // namespace

TEST_CASE("binary pixmap decodes to the exact expected tensor")
{
    auto t = decode_image(bytes_of("P6\n2 2\n255\n", {255, 0, 0, 0, 255, 0, 0, 0, 255, 51, 102, 153}));
    CHECK(t.shape() == Shape{3, 2, 2});
    CHECK(t.at({0, 0, 0}) == 1.0f);
    CHECK(t.at({1, 0, 1}) == 1.0f);
    CHECK(t.at({2, 1, 0}) == 1.0f);
    CHECK(t.at({0, 1, 1}) == 51.0f / 255.0f);
    CHECK(t.at({1, 1, 1}) == 102.0f / 255.0f);
    CHECK(t.at({2, 1, 1}) == 153.0f / 255.0f);
    CHECK(t.at({1, 0, 0}) == 0.0f);
}

TEST_CASE("ASCII and 16-bit anymaps and comments")
{
    auto ascii = decode_image(bytes_of("P3\n# comment\n1 1\n15\n15 0 5\n", {}));
    CHECK(ascii.at({0, 0, 0}) == 1.0f);
    CHECK(ascii.at({2, 0, 0}) == doctest::Approx(5.0f / 15.0f));
    auto wide = decode_image(bytes_of("P6 1 1 65535\n", {0xff, 0xff, 0x80, 0x00, 0x00, 0x00}));
    CHECK(wide.at({0, 0, 0}) == 1.0f);
    CHECK(wide.at({1, 0, 0}) == doctest::Approx(32768.0f / 65535.0f));
}

TEST_CASE("graymaps are replicated to three channels")
{
    for (const auto& bytes : {bytes_of("P5\n2 1\n255\n", {10, 200}), bytes_of("P2\n2 1\n255\n10 200\n", {})}) {
        auto t = decode_image(bytes);
        CHECK(t.shape() == Shape{3, 1, 2});
        for (Index c = 0; c < 3; ++c) {
            CHECK(t.at({c, 0, 0}) == 10.0f / 255.0f);
            CHECK(t.at({c, 0, 1}) == 200.0f / 255.0f);
        }
    }
}

TEST_CASE("truncated and unsupported images are rejected with distinct codes")
{
    auto code_of = [](const std::vector<std::uint8_t>& bytes) {
        try {
            decode_image(bytes);
        } catch (const ImageError& e) {
            return e.code();
        }
        FAIL("decode unexpectedly succeeded");
        return ImageError::Code::UnsupportedFormat;
    };
    CHECK(code_of(bytes_of("P6\n2 2\n255\n", {1, 2, 3})) == ImageError::Code::MalformedHeader);
    CHECK(code_of(bytes_of("P6\n2", {})) == ImageError::Code::MalformedHeader);
    CHECK(code_of(bytes_of("P6\n0 2\n255\n", {})) == ImageError::Code::MalformedHeader);
    CHECK(code_of(bytes_of("\x89PNG\r\n", {})) == ImageError::Code::UnsupportedFormat);
    CHECK(code_of(bytes_of("P4\n1 1\n", {0})) == ImageError::Code::UnsupportedFormat);
}

TEST_CASE("encode and decode round trip at 8 bits")
{
    Rng rng(1);
    auto img = uniform<float>({3, 5, 7}, rng, 0, 1);
    auto back = decode_image(encode_ppm(img));
    CHECK(back.shape() == img.shape());
    CHECK((back.data() - img.data()).abs().maxCoeff() <= 0.5f / 255.0f + 1e-6f);
}

TEST_CASE("bilinear resize keeps constants and the value range")
{
    auto c = resize_bilinear(solid(128, 0.25f, 0.5f, 1.0f), 64, 64);
    CHECK(c.shape() == Shape{3, 64, 64});
    CHECK((c.data().segment(0, 4096) == 0.25f).all());
    CHECK((c.data().segment(8192, 4096) == 1.0f).all());

    Rng rng(2);
    for (int trial = 0; trial < 10; ++trial) {
        auto img = uniform<float>({3, 13, 29}, rng, 0, 1);
        for (Index size : {4, 31, 64}) {
            auto r = resize_bilinear(img, size, size);
            CHECK(r.data().minCoeff() >= img.data().minCoeff() - 1e-6f);
            CHECK(r.data().maxCoeff() <= img.data().maxCoeff() + 1e-6f);
        }
    }
    // half-pixel centres: 2 -> 4 gives the classic 1/4, 3/4 blend
    auto up = resize_bilinear(Tensor::from_values({1, 1, 2}, {0, 1}), 1, 4);
    CHECK(up.data()[0] == 0.0f);
    CHECK(up.data()[1] == 0.25f);
    CHECK(up.data()[2] == 0.75f);
    CHECK(up.data()[3] == 1.0f);
}

TEST_CASE("loading a small test directory")
{
    TempDir dir("load");
    for (int i = 0; i < 2; ++i) {
        write_file(dir / ("test/real/r" + std::to_string(i) + ".ppm"), encode_ppm(solid(8, 0.2f, 0.2f, 0.2f)));
        write_file(dir / ("test/fake/f" + std::to_string(i) + ".ppm"), encode_ppm(solid(8, 0.8f, 0.8f, 0.8f)));
    }
    LoadReport report;
    auto data = load_dataset(dir.path(), 8, &report);
    REQUIRE(data.count(Role::Test) == 1);
    CHECK(data.size() == 1);
    const auto& split = data.at(Role::Test);
    CHECK(split.size() == 4);
    CHECK(report.loaded == 4);
    auto labels = split.labels;
    std::sort(labels.begin(), labels.end());
    CHECK(labels == std::vector<int>{0, 0, 1, 1});
}

TEST_CASE("large sources are resized on load")
{
    TempDir dir("resize");
    write_file(dir / "train/real/a.ppm", encode_ppm(solid(128, 0.1f, 0.2f, 0.3f)));
    write_file(dir / "train/fake/b.ppm", encode_ppm(solid(128, 0.4f, 0.5f, 0.6f)));
    auto data = load_dataset(dir.path(), 64);
    for (const auto& img : data.at(Role::Train).images) CHECK(img.shape() == Shape{3, 64, 64});
}

TEST_CASE("a corrupt file is skipped with one warning")
{
    TempDir dir("corrupt");
    for (int i = 0; i < 5; ++i) {
        write_file(dir / ("test/real/" + std::to_string(i) + ".ppm"), encode_ppm(solid(8, 0.3f, 0.3f, 0.3f)));
        if (i == 2)
            write_file(dir / "test/fake/2.ppm", bytes_of("P6\n8 8\n255\n", {1, 2, 3}));
        else
            write_file(dir / ("test/fake/" + std::to_string(i) + ".ppm"), encode_ppm(solid(8, 0.6f, 0.6f, 0.6f)));
    }
    LoadReport report;
    auto data = load_dataset(dir.path(), 8, &report);
    CHECK(data.at(Role::Test).size() == 9);
    CHECK(report.loaded == 9);
    REQUIRE(report.warnings.size() == 1);
    CHECK(report.warnings[0].find("2.ppm") != std::string::npos);
}

TEST_CASE("an empty or missing class directory is an error")
{
    TempDir dir("empty");
    write_file(dir / "test/real/a.ppm", encode_ppm(solid(8, 0.3f, 0.3f, 0.3f)));
    std::filesystem::create_directories(dir / "test/fake");
    CHECK_THROWS_AS(load_dataset(dir.path(), 8), DataError);
    std::filesystem::remove_all(dir / "test/fake");
    CHECK_THROWS_AS(load_dataset(dir.path(), 8), DataError);
    CHECK_THROWS_AS(load_dataset(dir / "nowhere", 8), DataError);
}

TEST_CASE("synthetic split counts follow 60:18:20:2")
{
    auto counts = synth_split_counts(1000);
    CHECK(counts.at(Role::Train) == 600);
    CHECK(counts.at(Role::Validation) == 180);
    CHECK(counts.at(Role::Test) == 200);
    CHECK(counts.at(Role::Finetune) == 20);
    for (int n : {1, 7, 50, 333}) {
        auto c = synth_split_counts(n);
        int total = 0;
        for (const auto& [role, k] : c) total += k;
        CHECK(total == n);
    }
    auto data = dafdft::test::small_synth(100, 16, 4);
    CHECK(data.at(Role::Train).size() == 120);
    CHECK(data.at(Role::Finetune).size() == 4);
}

TEST_CASE("synthetic data is reproducible, in range and disjoint across roles")
{
    auto a = dafdft::test::small_synth(50, 16, 9);
    auto b = dafdft::test::small_synth(50, 16, 9);
    auto c = dafdft::test::small_synth(50, 16, 10);
    std::set<std::string> ids;
    std::size_t total = 0;
    bool any_difference = false;
    for (Role role : kAllRoles) {
        const auto& sa = a.at(role);
        const auto& sb = b.at(role);
        REQUIRE(sa.size() == sb.size());
        for (std::size_t i = 0; i < sa.size(); ++i) {
            CHECK((sa.images[i].data() == sb.images[i].data()).all());
            CHECK(sa.labels[i] == sb.labels[i]);
            CHECK(sa.images[i].data().minCoeff() >= 0.0f);
            CHECK(sa.images[i].data().maxCoeff() <= 1.0f);
            any_difference = any_difference || (sa.images[i].data() != c.at(role).images[i].data()).any();
            ids.insert(sa.ids[i]);
        }
        total += sa.size();
    }
    CHECK(ids.size() == total);
    CHECK(any_difference);
}

TEST_CASE("a linear probe separates the fixture only when the artefact is present")
{
    const double control = linear_probe_test_accuracy(dafdft::test::small_synth(1000, 16, 21, 0.0));
    const double signal = linear_probe_test_accuracy(dafdft::test::small_synth(1000, 16, 21, 0.1));
    MESSAGE("probe accuracy: amplitude 0 " << control << ", amplitude 0.1 " << signal);
    CHECK(std::abs(control - 0.5) <= 0.05);
    CHECK(signal >= 0.95);
}

TEST_CASE("written datasets load back")
{
    TempDir dir("write");
    auto data = dafdft::test::small_synth(50, 16, 2);
    write_dataset(data, dir.path());
    auto loaded = load_dataset(dir.path(), 16);
    for (Role role : kAllRoles) {
        const auto& a = data.at(role);
        const auto& b = loaded.at(role);
        REQUIRE(a.size() == b.size());
        int fakes_a = 0, fakes_b = 0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            fakes_a += a.labels[i];
            fakes_b += b.labels[i];
        }
        CHECK(fakes_a == fakes_b);
    }
}

TEST_CASE("checkpoint save and load is bit-exact")
{
    TempDir dir("ckpt");
    const auto c = sample_checkpoint();
    save_checkpoint(c, dir / "x.ckpt");
    const auto back = load_checkpoint(dir / "x.ckpt");
    CHECK(bit_identical(c, back));
    CHECK(back.metadata == c.metadata);
    CHECK(std::isnan(back.find("b")->item()));
    CHECK(back.find("nope") == nullptr);
    CHECK(encode_checkpoint(back) == encode_checkpoint(c));
}

TEST_CASE("corrupted checkpoints raise distinct errors")
{
    const auto good = encode_checkpoint(sample_checkpoint());

    auto magic = good;
    std::memcpy(magic.data(), "XXXX", 4);
    CHECK(decode_error(magic) == CheckpointError::Code::BadMagic);

    auto version = good;
    put_u32(version, 4, 99);
    CHECK(decode_error(version) == CheckpointError::Code::UnsupportedVersion);

    for (std::size_t cut : {std::size_t{2}, std::size_t{10}, good.size() / 2, good.size() - 1}) {
        std::vector<std::uint8_t> truncated(good.begin(), good.begin() + static_cast<std::ptrdiff_t>(cut));
        CHECK(decode_error(truncated) == CheckpointError::Code::Truncated);
    }

    auto trailing = good;
    trailing.push_back(0);
    CHECK(decode_error(trailing) == CheckpointError::Code::Malformed);

    TempDir dir("ckpt-io");
    CHECK_THROWS_AS(load_checkpoint(dir / "absent.ckpt"), CheckpointError);
}

TEST_CASE("restoring checks the parameter table")
{
    const auto c = sample_checkpoint();
    auto targets = [] {
        return std::vector<NamedTensor>{{"a.weight", Tensor::zeros({2, 3, 1, 1})}, {"a.bias", Tensor::zeros({2})},
                                        {"b", Tensor::zeros({1})}};
    };
    auto ok = targets();
    restore_tensors(c, ok);
    CHECK((ok[0].tensor.data() == c.tensors[0].tensor.data()).all());

    std::string what;
    auto missing = c;
    missing.tensors.erase(missing.tensors.begin() + 1);
    CHECK(restore_error(missing, targets(), &what) == CheckpointError::Code::MissingParameter);
    CHECK(what.find("a.bias") != std::string::npos);

    auto extra = c;
    extra.tensors.push_back({"stray", Tensor::zeros({1})});
    CHECK(restore_error(extra, targets(), &what) == CheckpointError::Code::ExtraParameter);
    CHECK(what.find("stray") != std::string::npos);

    auto duplicate = c;
    duplicate.tensors.push_back(c.tensors[0]);
    CHECK(restore_error(duplicate, targets(), nullptr) == CheckpointError::Code::DuplicateParameter);

    auto wrong = targets();
    wrong[1].tensor = Tensor::zeros({3});
    CHECK(restore_error(c, wrong, nullptr) == CheckpointError::Code::ShapeMismatch);
}

TEST_CASE("split roles parse and print")
{
    for (Role r : kAllRoles) CHECK(parse_role(to_string(r)) == r);
    CHECK_THROWS_AS(parse_role("holdout"), std::invalid_argument);
    DatasetSplit s;
    s.resolution = 4;
    CHECK_THROWS_AS(s.add(Tensor::zeros({3, 4, 4}), 2, "x"), DataError);
    CHECK_THROWS_AS(s.add(Tensor::zeros({3, 5, 4}), 0, "x"), DataError);
}
