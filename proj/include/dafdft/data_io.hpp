#pragma once

// Datasets in the `<root>/{train,validation,test,finetune}/{real,fake}/*`
// layout, the portable-anymap image codec, and the synthetic fixture.

#include "dafdft/layers.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace dafdft {

enum class Role { Train, Validation, Test, Finetune };

inline constexpr std::array<Role, 4> kAllRoles{Role::Train, Role::Validation, Role::Test, Role::Finetune};

std::string_view to_string(Role role);
Role parse_role(std::string_view name);

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ImageError : public DataError {
public:
    enum class Code { UnsupportedFormat, MalformedHeader };
    ImageError(Code code, const std::string& what) : DataError(what), code_(code) {}
    Code code() const { return code_; }

private:
    Code code_;
};

struct DatasetSplit {
    Role role = Role::Train;
    int resolution = 64;
    std::vector<Tensor> images;    // [3, resolution, resolution], values in [0,1]
    std::vector<int> labels;       // 0 = real, 1 = fake
    std::vector<std::string> ids;  // source path or synthetic identifier

    std::size_t size() const { return images.size(); }
    bool empty() const { return images.empty(); }
    void add(Tensor image, int label, std::string id);

    /// Stacks the listed items into a batch [n,3,R,R].
    Tensor stack(std::span<const std::size_t> indices) const;
};

using Dataset = std::map<Role, DatasetSplit>;

/// Decodes binary or ASCII portable anymaps (P2, P3, P5, P6) into an RGB
/// tensor [3,H,W] in [0,1]; graymaps are replicated to three channels.
Tensor decode_image(std::span<const std::uint8_t> bytes);

/// Binary P6 encoding of an RGB tensor [3,H,W] in [0,1] (8-bit).
std::vector<std::uint8_t> encode_ppm(const Tensor& image);

/// Bilinear resize of [C,H,W] with half-pixel centres (align_corners=false).
Tensor resize_bilinear(const Tensor& image, Index out_height, Index out_width);

struct LoadReport {
    std::size_t loaded = 0;
    std::vector<std::string> warnings;  // one per skipped file
};

/// Loads every role directory present under `root`. Unreadable images are
/// skipped with a warning; an absent or empty real/fake directory inside a
/// present role is an error.
Dataset load_dataset(const std::filesystem::path& root, int resolution = 64, LoadReport* report = nullptr);

struct SynthSpec {
    int n_per_class = 1000;
    std::uint64_t seed = 1234;
    double amplitude = 0.1;  // checkerboard amplitude on fake images
    int resolution = 64;
};

/// Splits of 60:18:20:2 per class. Real images are smooth random fields;
/// fake images are independent fields plus a +/- amplitude checkerboard.
Dataset synth_dataset(const SynthSpec& spec);

/// Per-role item counts for n images of one class (60:18:20:2, remainder to
/// train).
std::map<Role, int> synth_split_counts(int n_per_class);

/// Writes a dataset as P6 files in the directory layout load_dataset reads.
void write_dataset(const Dataset& data, const std::filesystem::path& root);

}  // namespace dafdft
