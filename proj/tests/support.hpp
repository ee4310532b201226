#pragma once

#include "dafdft/data_io.hpp"
#include "dafdft/layers.hpp"

#include <atomic>
#include <filesystem>
#include <random>
#include <string>
#include <unistd.h>

namespace dafdft::test {

template <typename Scalar = double>
TensorT<Scalar> uniform(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0, bool requires_grad = false)
{
    std::uniform_real_distribution<double> dist(lo, hi);
    Buffer<Scalar> data(element_count(shape));
    for (Index i = 0; i < data.size(); ++i) data[i] = static_cast<Scalar>(dist(rng));
    return TensorT<Scalar>(std::move(shape), std::move(data), requires_grad);
}

/// Scratch directory removed on scope exit.
class TempDir {
public:
    explicit TempDir(const std::string& tag)
    {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("dafdft-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir()
    {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

inline Dataset small_synth(int n_per_class, int resolution, std::uint64_t seed, double amplitude = 0.1)
{
    SynthSpec spec;
    spec.n_per_class = n_per_class;
    spec.resolution = resolution;
    spec.seed = seed;
    spec.amplitude = amplitude;
    return synth_dataset(spec);
}

}  // namespace dafdft::test
