#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "ddae/container.hpp"
#include "ddae/numerics.hpp"

namespace ddae::squares {

inline constexpr std::size_t kSide = 16;
inline constexpr std::size_t kSquare = 4;
inline constexpr std::size_t kPixels = kSide * kSide;
inline constexpr std::size_t kPositions = kSide - kSquare + 1;  // integer offsets per axis
inline constexpr double kThreshold = 0.5;
inline constexpr double kAmbiguousContrast = 0.05;

inline constexpr std::array<const char*, 4> kLatentNames = {"x_pos", "y_pos", "fg_intensity", "bg_intensity"};

struct SquareLatents {
    double x_pos = 0.0;  // normalized left edge
    double y_pos = 0.0;  // normalized top edge
    double fg_intensity = 0.0;
    double bg_intensity = 0.0;

    std::size_t column() const;
    std::size_t row() const;
};

struct SquareSample {
    Vector image;  // kPixels, row-major
    SquareLatents latents;
    int y = 0;  // 1 iff fg_intensity > 0.5
    int a = 0;  // 1 iff bg_intensity > 0.5

    int group() const { return 2 * y + a; }
};

enum class SplitRole { train, test };

struct DatasetSplit {
    std::vector<SquareSample> samples;
    double poison_ratio = 0.0;
    std::uint64_t seed = 0;
    SplitRole role = SplitRole::train;

    std::size_t size() const { return samples.size(); }
    Matrix images() const;         // N x 256
    Matrix latent_matrix() const;  // N x 4, columns in kLatentNames order
    std::vector<int> labels() const;
    std::vector<int> attributes() const;
    DatasetSplit subset(std::span<const std::size_t> idx) const;
};

Vector render(const SquareLatents& latents);

DatasetSplit sample_train(std::size_t n, double poison_ratio, std::uint64_t seed);
DatasetSplit sample_balanced_test(std::size_t n, std::uint64_t seed);

// Window scan used as the ground-truth labeler for Square images.
struct AnalyticReading {
    int y = 0;
    int a = 0;
    std::size_t column = 0;
    std::size_t row = 0;
    double window_mean = 0.0;
    double rest_mean = 0.0;
    double contrast = 0.0;
};

// Never throws for low contrast; inspect .contrast.
AnalyticReading analyze_image(std::span<const double> image);
// Throws ErrorCode::ambiguous_image when the contrast is below 0.05.
std::pair<int, int> analytic_label(std::span<const double> image);

void save_split(const std::filesystem::path& path, const DatasetSplit& split, const KeyValues& extra = {});
DatasetSplit load_split(const std::filesystem::path& path, KeyValues* header = nullptr);
Container split_to_container(const DatasetSplit& split, const KeyValues& extra = {});
DatasetSplit split_from_container(const Container& c, KeyValues* header = nullptr);

}  // namespace ddae::squares
