#include "ddae/squares.hpp"

#include <cmath>
#include <cstdio>

#include "ddae/error.hpp"
#include "ddae/rng.hpp"

namespace ddae::squares {

namespace {

constexpr double kMaxOffset = static_cast<double>(kSide - kSquare);

double f32(double x) { return static_cast<double>(static_cast<float>(x)); }

// intensities keep a 0.1 margin on either side of the 0.5 threshold
double sample_intensity(SeededRng& rng, bool high) {
    return high ? rng.uniform(0.6, 1.0) : rng.uniform(0.0, 0.4);
}

double sample_position(SeededRng& rng) {
    return static_cast<double>(rng.below(kPositions)) / kMaxOffset;
}

SquareSample make_sample(SeededRng& rng, int y, int a) {
    SquareLatents l;
    l.x_pos = f32(sample_position(rng));
    l.y_pos = f32(sample_position(rng));
    l.fg_intensity = f32(sample_intensity(rng, y == 1));
    l.bg_intensity = f32(sample_intensity(rng, a == 1));
    SquareSample s;
    s.latents = l;
    s.image = render(l);
    s.y = l.fg_intensity > kThreshold ? 1 : 0;
    s.a = l.bg_intensity > kThreshold ? 1 : 0;
    return s;
}

std::string fmt_double(double x) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

}  // namespace

std::size_t SquareLatents::column() const {
    return static_cast<std::size_t>(std::lround(std::clamp(x_pos, 0.0, 1.0) * kMaxOffset));
}

std::size_t SquareLatents::row() const {
    return static_cast<std::size_t>(std::lround(std::clamp(y_pos, 0.0, 1.0) * kMaxOffset));
}

Matrix DatasetSplit::images() const {
    Matrix m(samples.size(), kPixels);
    for (std::size_t i = 0; i < samples.size(); ++i) m.set_row(i, samples[i].image);
    return m;
}

Matrix DatasetSplit::latent_matrix() const {
    Matrix m(samples.size(), 4);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto& l = samples[i].latents;
        m(i, 0) = l.x_pos;
        m(i, 1) = l.y_pos;
        m(i, 2) = l.fg_intensity;
        m(i, 3) = l.bg_intensity;
    }
    return m;
}

std::vector<int> DatasetSplit::labels() const {
    std::vector<int> v(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) v[i] = samples[i].y;
    return v;
}

std::vector<int> DatasetSplit::attributes() const {
    std::vector<int> v(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) v[i] = samples[i].a;
    return v;
}

DatasetSplit DatasetSplit::subset(std::span<const std::size_t> idx) const {
    DatasetSplit out{{}, poison_ratio, seed, role};
    out.samples.reserve(idx.size());
    for (std::size_t i : idx) {
        require(i < samples.size(), "DatasetSplit::subset: index out of range");
        out.samples.push_back(samples[i]);
    }
    return out;
}

Vector render(const SquareLatents& latents) {
    Vector img(kPixels, latents.bg_intensity);
    const std::size_t c0 = latents.column();
    const std::size_t r0 = latents.row();
    for (std::size_t r = r0; r < r0 + kSquare; ++r)
        for (std::size_t c = c0; c < c0 + kSquare; ++c) img[r * kSide + c] = latents.fg_intensity;
    return img;
}

DatasetSplit sample_train(std::size_t n, double poison_ratio, std::uint64_t seed) {
    if (n < 100) fail(ErrorCode::invalid_input, "sample_train: n must be at least 100");
    if (!(poison_ratio >= 0.0 && poison_ratio <= 1.0))
        fail(ErrorCode::invalid_input, "sample_train: poison_ratio must lie in [0,1]");

    const auto aligned = static_cast<std::size_t>(std::ceil(poison_ratio * static_cast<double>(n) - 1e-9));
    SeededRng picker(derive_seed(seed, "aligned"));
    const auto order = picker.permutation(n);
    std::vector<bool> is_aligned(n, false);
    for (std::size_t i = 0; i < aligned; ++i) is_aligned[order[i]] = true;

    DatasetSplit split{{}, poison_ratio, seed, SplitRole::train};
    split.samples.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        SeededRng rng(derive_seed(seed, i));
        const int y = rng.bernoulli(0.5) ? 1 : 0;
        const int a = is_aligned[i] ? y : 1 - y;
        split.samples.push_back(make_sample(rng, y, a));
    }
    return split;
}

DatasetSplit sample_balanced_test(std::size_t n, std::uint64_t seed) {
    if (n == 0 || n % 4 != 0) fail(ErrorCode::invalid_input, "sample_balanced_test: n must be a positive multiple of 4");
    SeededRng picker(derive_seed(seed, "groups"));
    auto order = picker.permutation(n);
    DatasetSplit split{{}, 0.5, seed, SplitRole::test};
    split.samples.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const int g = static_cast<int>(order[i] % 4);
        SeededRng rng(derive_seed(seed, i));
        split.samples.push_back(make_sample(rng, g / 2, g % 2));
    }
    return split;
}

AnalyticReading analyze_image(std::span<const double> image) {
    require(image.size() == kPixels, "analyze_image: expected a 16x16 image");
    double total = 0.0;
    for (double v : image) total += v;
    const double window_px = static_cast<double>(kSquare * kSquare);
    const double rest_px = static_cast<double>(kPixels) - window_px;

    AnalyticReading best;
    best.contrast = -1.0;
    for (std::size_t r0 = 0; r0 < kPositions; ++r0) {
        for (std::size_t c0 = 0; c0 < kPositions; ++c0) {
            double w = 0.0;
            for (std::size_t r = r0; r < r0 + kSquare; ++r)
                for (std::size_t c = c0; c < c0 + kSquare; ++c) w += image[r * kSide + c];
            const double wm = w / window_px;
            const double rm = (total - w) / rest_px;
            const double contrast = std::abs(wm - rm);
            if (contrast > best.contrast) {
                best.contrast = contrast;
                best.column = c0;
                best.row = r0;
                best.window_mean = wm;
                best.rest_mean = rm;
            }
        }
    }
    best.y = best.window_mean > kThreshold ? 1 : 0;
    best.a = best.rest_mean > kThreshold ? 1 : 0;
    return best;
}

std::pair<int, int> analytic_label(std::span<const double> image) {
    const AnalyticReading r = analyze_image(image);
    if (r.contrast < kAmbiguousContrast)
        fail(ErrorCode::ambiguous_image, "no 4x4 window stands out (contrast " + fmt_double(r.contrast) + ")");
    return {r.y, r.a};
}

Container split_to_container(const DatasetSplit& split, const KeyValues& extra) {
    KeyValues header = extra;
    header["artifact"] = "split";
    header["role"] = split.role == SplitRole::train ? "train" : "test";
    header["seed"] = std::to_string(split.seed);
    header["poison_ratio"] = fmt_double(split.poison_ratio);
    header["count"] = std::to_string(split.size());

    Matrix labels(split.size(), 2);
    for (std::size_t i = 0; i < split.size(); ++i) {
        labels(i, 0) = split.samples[i].y;
        labels(i, 1) = split.samples[i].a;
    }
    Container c;
    c.add_text(BlockKind::header, format_key_values(header));
    c.add_matrix(BlockKind::images, split.images());
    c.add_matrix(BlockKind::latents, split.latent_matrix());
    c.add_matrix(BlockKind::labels, labels);
    return c;
}

DatasetSplit split_from_container(const Container& c, KeyValues* header_out) {
    const KeyValues header = parse_key_values(c.get(BlockKind::header, "header").text);
    if (require_key(header, "artifact") != "split") fail(ErrorCode::format, "not a dataset split");
    const Matrix& images = c.get(BlockKind::images, "images").values;
    const Matrix& latents = c.get(BlockKind::latents, "latents").values;
    const Matrix& labels = c.get(BlockKind::labels, "labels").values;
    const std::size_t n = images.rows();
    if (images.cols() != kPixels || latents.rows() != n || latents.cols() != 4 || labels.rows() != n ||
        labels.cols() != 2)
        fail(ErrorCode::format, "split blocks have inconsistent shapes");

    DatasetSplit split;
    const std::string& role = require_key(header, "role");
    if (role != "train" && role != "test") fail(ErrorCode::format, "unknown split role '" + role + "'");
    split.role = role == "train" ? SplitRole::train : SplitRole::test;
    split.seed = std::stoull(require_key(header, "seed"));
    split.poison_ratio = std::stod(require_key(header, "poison_ratio"));
    split.samples.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        auto& s = split.samples[i];
        s.image.assign(images.row(i).begin(), images.row(i).end());
        s.latents = {latents(i, 0), latents(i, 1), latents(i, 2), latents(i, 3)};
        s.y = static_cast<int>(labels(i, 0));
        s.a = static_cast<int>(labels(i, 1));
    }
    if (header_out) *header_out = header;
    return split;
}

void save_split(const std::filesystem::path& path, const DatasetSplit& split, const KeyValues& extra) {
    split_to_container(split, extra).save(path);
}

DatasetSplit load_split(const std::filesystem::path& path, KeyValues* header) {
    return split_from_container(Container::load(path), header);
}

}  // namespace ddae::squares
