#include "dafdft/data_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>

namespace dafdft {

namespace fs = std::filesystem;

std::string_view to_string(Role role)
{
    switch (role) {
    case Role::Train: return "train";
    case Role::Validation: return "validation";
    case Role::Test: return "test";
    case Role::Finetune: return "finetune";
    }
    return "?";
}

Role parse_role(std::string_view name)
{
    for (Role r : kAllRoles)
        if (to_string(r) == name) return r;
    throw std::invalid_argument("unknown split role '" + std::string(name) + "'");
}

void DatasetSplit::add(Tensor image, int label, std::string id)
{
    if (label != 0 && label != 1) throw DataError("labels must be 0 (real) or 1 (fake)");
    if (image.shape() != Shape{3, resolution, resolution})
        throw DataError("image " + id + " has shape " + to_string(image.shape()) + ", expected [3," +
                        std::to_string(resolution) + "," + std::to_string(resolution) + "]");
    images.push_back(std::move(image));
    labels.push_back(label);
    ids.push_back(std::move(id));
}

Tensor DatasetSplit::stack(std::span<const std::size_t> indices) const
{
    const Index per_image = 3 * static_cast<Index>(resolution) * resolution;
    Buffer<float> data(static_cast<Index>(indices.size()) * per_image);
    for (std::size_t k = 0; k < indices.size(); ++k)
        data.segment(static_cast<Index>(k) * per_image, per_image) = images.at(indices[k]).data();
    return Tensor({static_cast<Index>(indices.size()), 3, resolution, resolution}, std::move(data));
}

namespace {

using ImageCode = ImageError::Code;

class PnmHeader {
public:
    explicit PnmHeader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    int next_int()
    {
        skip_space();
        if (pos_ >= bytes_.size() || !std::isdigit(bytes_[pos_]))
            throw ImageError(ImageCode::MalformedHeader, "malformed image header");
        long value = 0;
        while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
            value = value * 10 + (bytes_[pos_++] - '0');
            if (value > 1'000'000) throw ImageError(ImageCode::MalformedHeader, "image header value out of range");
        }
        return static_cast<int>(value);
    }

    // Exactly one whitespace byte separates the header from binary data.
    void end_header()
    {
        if (pos_ >= bytes_.size() || !std::isspace(bytes_[pos_]))
            throw ImageError(ImageCode::MalformedHeader, "malformed image header");
        ++pos_;
    }

    std::size_t position() const { return pos_; }
    void seek(std::size_t p) { pos_ = p; }

private:
    void skip_space()
    {
        while (pos_ < bytes_.size()) {
            if (bytes_[pos_] == '#') {
                while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
            } else if (std::isspace(bytes_[pos_])) {
                ++pos_;
            } else {
                break;
            }
        }
    }

    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

Buffer<float> smooth_field(Index resolution, Rng& rng)
{
    // 5x5 lattice of uniform values, bilinearly upsampled, mapped into [0.2, 0.8].
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Buffer<float> coarse(3 * 25);
    for (Index i = 0; i < coarse.size(); ++i) coarse[i] = static_cast<float>(u(rng));
    Tensor fine = resize_bilinear(Tensor({3, 5, 5}, std::move(coarse)), resolution, resolution);
    return 0.2f + 0.6f * fine.data();
}

}  // namespace

Tensor decode_image(std::span<const std::uint8_t> bytes)
{
    if (bytes.size() < 2 || bytes[0] != 'P')
        throw ImageError(ImageCode::UnsupportedFormat, "unsupported image format (expected a portable anymap)");
    const char kind = static_cast<char>(bytes[1]);
    if (kind != '2' && kind != '3' && kind != '5' && kind != '6')
        throw ImageError(ImageCode::UnsupportedFormat, std::string("unsupported portable anymap variant P") + kind);
    const bool color = (kind == '3' || kind == '6');
    const bool binary = (kind == '5' || kind == '6');

    PnmHeader header(bytes);
    header.seek(2);
    const int width = header.next_int();
    const int height = header.next_int();
    const int maxval = header.next_int();
    if (width < 1 || height < 1 || maxval < 1 || maxval > 65535)
        throw ImageError(ImageCode::MalformedHeader, "image header holds invalid dimensions or maxval");

    const Index samples = static_cast<Index>(width) * height * (color ? 3 : 1);
    std::vector<int> values(static_cast<std::size_t>(samples));
    if (binary) {
        header.end_header();
        const std::size_t bytes_per = maxval < 256 ? 1 : 2;
        const std::size_t begin = header.position();
        if (bytes.size() - begin < static_cast<std::size_t>(samples) * bytes_per)
            throw ImageError(ImageCode::MalformedHeader, "image data is truncated");
        for (Index i = 0; i < samples; ++i) {
            const std::size_t at = begin + static_cast<std::size_t>(i) * bytes_per;
            values[static_cast<std::size_t>(i)] = bytes_per == 1 ? bytes[at] : (bytes[at] << 8 | bytes[at + 1]);
        }
    } else {
        for (auto& v : values) v = header.next_int();
    }

    const Index plane = static_cast<Index>(width) * height;
    Buffer<float> data(3 * plane);
    for (Index p = 0; p < plane; ++p)
        for (Index c = 0; c < 3; ++c) {
            const int v = color ? values[static_cast<std::size_t>(p * 3 + c)] : values[static_cast<std::size_t>(p)];
            if (v > maxval) throw ImageError(ImageCode::MalformedHeader, "image sample exceeds maxval");
            data[c * plane + p] = static_cast<float>(v) / static_cast<float>(maxval);
        }
    return Tensor({3, height, width}, std::move(data));
}

std::vector<std::uint8_t> encode_ppm(const Tensor& image)
{
    if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("encode_ppm expects [3,H,W], got " + to_string(image.shape()));
    const Index h = image.dim(1), w = image.dim(2), plane = h * w;
    const std::string header = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.reserve(out.size() + static_cast<std::size_t>(3 * plane));
    for (Index p = 0; p < plane; ++p)
        for (Index c = 0; c < 3; ++c) {
            const float v = std::clamp(image.data()[c * plane + p], 0.0f, 1.0f);
            out.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0f)));
        }
    return out;
}

Tensor resize_bilinear(const Tensor& image, Index out_height, Index out_width)
{
    if (image.rank() != 3) throw ShapeError("resize_bilinear expects [C,H,W], got " + to_string(image.shape()));
    const Index channels = image.dim(0), h = image.dim(1), w = image.dim(2);
    if (h == out_height && w == out_width) return image.detach();

    // Source coordinate of each output sample and its two neighbours.
    struct Tap {
        Index lo, hi;
        float frac;
    };
    auto taps = [](Index in, Index out) {
        std::vector<Tap> t(static_cast<std::size_t>(out));
        const double scale = static_cast<double>(in) / static_cast<double>(out);
        for (Index i = 0; i < out; ++i) {
            const double src = std::clamp((static_cast<double>(i) + 0.5) * scale - 0.5, 0.0, static_cast<double>(in - 1));
            const auto lo = static_cast<Index>(std::floor(src));
            t[static_cast<std::size_t>(i)] = {lo, std::min(lo + 1, in - 1), static_cast<float>(src - static_cast<double>(lo))};
        }
        return t;
    };
    const auto ty = taps(h, out_height), tx = taps(w, out_width);

    Buffer<float> out(channels * out_height * out_width);
    const auto& in = image.data();
    for (Index c = 0; c < channels; ++c)
        for (Index y = 0; y < out_height; ++y) {
            const Tap& a = ty[static_cast<std::size_t>(y)];
            for (Index x = 0; x < out_width; ++x) {
                const Tap& b = tx[static_cast<std::size_t>(x)];
                const Index base = c * h * w;
                const float top = in[base + a.lo * w + b.lo] * (1 - b.frac) + in[base + a.lo * w + b.hi] * b.frac;
                const float bottom = in[base + a.hi * w + b.lo] * (1 - b.frac) + in[base + a.hi * w + b.hi] * b.frac;
                out[(c * out_height + y) * out_width + x] = top * (1 - a.frac) + bottom * a.frac;
            }
        }
    return Tensor({channels, out_height, out_width}, std::move(out));
}

Dataset load_dataset(const fs::path& root, int resolution, LoadReport* report)
{
    if (!fs::is_directory(root)) throw DataError("dataset root " + root.string() + " is not a directory");
    LoadReport local;
    LoadReport& rep = report ? *report : local;
    Dataset data;
    for (Role role : kAllRoles) {
        const fs::path role_dir = root / std::string(to_string(role));
        if (!fs::is_directory(role_dir)) continue;
        DatasetSplit split;
        split.role = role;
        split.resolution = resolution;
        for (const auto& [label, cls] : {std::pair{0, "real"}, std::pair{1, "fake"}}) {
            const fs::path dir = role_dir / cls;
            if (!fs::is_directory(dir)) throw DataError("missing class directory " + dir.string());
            std::vector<fs::path> files;
            for (const auto& entry : fs::directory_iterator(dir))
                if (entry.is_regular_file()) files.push_back(entry.path());
            std::sort(files.begin(), files.end());
            std::size_t kept = 0;
            for (const auto& file : files) {
                std::ifstream in(file, std::ios::binary);
                std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
                try {
                    Tensor image = decode_image(bytes);
                    if (image.dim(1) != resolution || image.dim(2) != resolution)
                        image = resize_bilinear(image, resolution, resolution);
                    split.add(std::move(image), label, file.string());
                    ++kept;
                } catch (const ImageError& e) {
                    rep.warnings.push_back(file.string() + ": " + e.what());
                }
            }
            if (kept == 0) throw DataError("class directory " + dir.string() + " holds no readable images");
            rep.loaded += kept;
        }
        data.emplace(role, std::move(split));
    }
    if (data.empty()) throw DataError("no split directories (train/validation/test/finetune) under " + root.string());
    return data;
}

std::map<Role, int> synth_split_counts(int n_per_class)
{
    std::map<Role, int> counts{{Role::Train, n_per_class * 60 / 100},
                               {Role::Validation, n_per_class * 18 / 100},
                               {Role::Test, n_per_class * 20 / 100},
                               {Role::Finetune, n_per_class * 2 / 100}};
    int used = 0;
    for (const auto& [role, n] : counts) used += n;
    counts[Role::Train] += n_per_class - used;
    return counts;
}

Dataset synth_dataset(const SynthSpec& spec)
{
    if (spec.n_per_class < 1) throw std::invalid_argument("synthetic dataset needs n_per_class >= 1");
    Dataset data;
    const auto counts = synth_split_counts(spec.n_per_class);
    const auto res = static_cast<Index>(spec.resolution);
    for (Role role : kAllRoles) {
        DatasetSplit split;
        split.role = role;
        split.resolution = spec.resolution;
        for (int label : {0, 1})
            for (int i = 0; i < counts.at(role); ++i) {
                std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                                  static_cast<std::uint32_t>(role), static_cast<std::uint32_t>(label),
                                  static_cast<std::uint32_t>(i)};
                Rng rng(seq);
                Buffer<float> pixels = smooth_field(res, rng);
                if (label == 1 && spec.amplitude != 0.0) {
                    const Index phase = std::uniform_int_distribution<int>(0, 1)(rng);
                    const auto a = static_cast<float>(spec.amplitude);
                    for (Index c = 0; c < 3; ++c)
                        for (Index y = 0; y < res; ++y)
                            for (Index x = 0; x < res; ++x)
                                pixels[(c * res + y) * res + x] += ((x + y + phase) % 2 == 0) ? a : -a;
                    pixels = pixels.cwiseMax(0.0f).cwiseMin(1.0f);
                }
                split.add(Tensor({3, res, res}, std::move(pixels)), label,
                          "synth:" + std::string(to_string(role)) + ":" + (label ? "fake:" : "real:") + std::to_string(i));
            }
        data.emplace(role, std::move(split));
    }
    return data;
}

void write_dataset(const Dataset& data, const fs::path& root)
{
    for (const auto& [role, split] : data)
        for (std::size_t i = 0; i < split.size(); ++i) {
            const fs::path dir = root / std::string(to_string(role)) / (split.labels[i] ? "fake" : "real");
            fs::create_directories(dir);
            char name[32];
            std::snprintf(name, sizeof name, "%06zu.ppm", i);
            const auto bytes = encode_ppm(split.images[i]);
            std::ofstream out(dir / name, std::ios::binary);
            out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
            if (!out) throw DataError("failed writing " + (dir / name).string());
        }
}

}  // namespace dafdft
