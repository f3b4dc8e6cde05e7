#include "ibit/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <tuple>

#include "ibit/binio.hpp"
#include "ibit/errors.hpp"

namespace ibit {

void LabeledImageSet::validate() const {
    if (images.size() != labels.size())
        throw FormatError("dataset: " + std::to_string(images.size()) + " images but " +
                          std::to_string(labels.size()) + " labels");
    for (std::size_t i = 0; i < images.size(); ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes)
            throw FormatError("dataset: label " + std::to_string(labels[i]) + " at item " + std::to_string(i) +
                              " outside [0, " + std::to_string(num_classes) + ")");
        if (!images[i].same_shape(images.front()))
            throw FormatError("dataset: image " + std::to_string(i) + " has shape " + images[i].shape_string());
        for (double v : images[i].values())
            if (!(v >= 0.0 && v <= 1.0))
                throw FormatError("dataset: pixel outside [0,1] in image " + std::to_string(i));
    }
}

std::vector<std::size_t> LabeledImageSet::class_counts() const {
    std::vector<std::size_t> counts(num_classes, 0);
    for (int l : labels)
        ++counts.at(static_cast<std::size_t>(l));
    return counts;
}

LabeledImageSet load_idx(const std::filesystem::path &images_path, const std::filesystem::path &labels_path) {
    std::ifstream img(images_path, std::ios::binary);
    if (!img)
        throw FormatError("cannot open " + images_path.string());
    std::ifstream lab(labels_path, std::ios::binary);
    if (!lab)
        throw FormatError("cannot open " + labels_path.string());

    const std::string img_what = images_path.string();
    const std::string lab_what = labels_path.string();
    const auto img_magic = binio::read_u32_be(img, img_what);
    if (img_magic != kIdxImageMagic)
        throw FormatError(img_what + ": bad image magic at offset 0");
    const auto n = binio::read_u32_be(img, img_what);
    const auto rows = binio::read_u32_be(img, img_what);
    const auto cols = binio::read_u32_be(img, img_what);

    const auto lab_magic = binio::read_u32_be(lab, lab_what);
    if (lab_magic != kIdxLabelMagic)
        throw FormatError(lab_what + ": bad label magic at offset 0");
    const auto n_labels = binio::read_u32_be(lab, lab_what);
    if (n_labels != n)
        throw FormatError(lab_what + ": label count " + std::to_string(n_labels) + " at offset 4 does not match " +
                          std::to_string(n) + " images");

    LabeledImageSet set;
    set.images.reserve(n);
    set.labels.reserve(n);
    std::vector<unsigned char> buf(static_cast<std::size_t>(rows) * cols);
    for (std::uint32_t i = 0; i < n; ++i) {
        binio::read_exact(img, buf.data(), buf.size(), img_what);
        Matrix m(rows, cols);
        for (std::size_t p = 0; p < buf.size(); ++p)
            m[p] = static_cast<double>(buf[p]) / 255.0;
        set.images.push_back(std::move(m));
        unsigned char label = 0;
        binio::read_exact(lab, &label, 1, lab_what);
        set.labels.push_back(label);
    }
    const int max_label = set.labels.empty() ? -1 : *std::max_element(set.labels.begin(), set.labels.end());
    set.num_classes = static_cast<std::size_t>(max_label + 1);
    return set;
}

void write_idx(const LabeledImageSet &set, const std::filesystem::path &images_path,
               const std::filesystem::path &labels_path) {
    set.validate();
    std::ofstream img(images_path, std::ios::binary);
    std::ofstream lab(labels_path, std::ios::binary);
    if (!img || !lab)
        throw FormatError("cannot open IDX output " + images_path.string() + " / " + labels_path.string());
    const std::uint32_t rows = set.empty() ? 0 : static_cast<std::uint32_t>(set.images.front().rows());
    const std::uint32_t cols = set.empty() ? 0 : static_cast<std::uint32_t>(set.images.front().cols());
    binio::write_u32_be(img, kIdxImageMagic);
    binio::write_u32_be(img, static_cast<std::uint32_t>(set.size()));
    binio::write_u32_be(img, rows);
    binio::write_u32_be(img, cols);
    binio::write_u32_be(lab, kIdxLabelMagic);
    binio::write_u32_be(lab, static_cast<std::uint32_t>(set.size()));
    for (std::size_t i = 0; i < set.size(); ++i) {
        for (double v : set.images[i].values())
            img.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
        lab.put(static_cast<char>(static_cast<unsigned char>(set.labels[i])));
    }
    if (!img || !lab)
        throw FormatError("write failed: " + images_path.string());
}

namespace {
const char *kTrainImages = "train-images-idx3-ubyte";
const char *kTrainLabels = "train-labels-idx1-ubyte";
const char *kTestImages = "t10k-images-idx3-ubyte";
const char *kTestLabels = "t10k-labels-idx1-ubyte";
} // namespace

TrainTestSplit load_idx_dir(const std::filesystem::path &dir) {
    TrainTestSplit split{load_idx(dir / kTrainImages, dir / kTrainLabels), load_idx(dir / kTestImages, dir / kTestLabels)};
    const std::size_t k = std::max(split.train.num_classes, split.test.num_classes);
    split.train.num_classes = k;
    split.test.num_classes = k;
    return split;
}

void write_idx_dir(const TrainTestSplit &split, const std::filesystem::path &dir) {
    std::filesystem::create_directories(dir);
    write_idx(split.train, dir / kTrainImages, dir / kTrainLabels);
    write_idx(split.test, dir / kTestImages, dir / kTestLabels);
}

LabeledImageSet synth_shapes(std::size_t n, std::size_t size, std::uint64_t seed) {
    if (n == 0)
        throw ConfigError("synth_shapes: n must be >= 1");
    if (size < 8)
        throw ConfigError("synth_shapes: size must be >= 8");

    std::mt19937_64 rng(seed);
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i)
        labels[i] = static_cast<int>(i % kShapeClasses);
    std::shuffle(labels.begin(), labels.end(), rng);

    const double sz = static_cast<double>(size);
    std::uniform_real_distribution<double> half_extent(sz / 5.0, sz / 3.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, 0.08);

    LabeledImageSet set;
    set.num_classes = kShapeClasses;
    set.labels = labels;
    set.images.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double r = half_extent(rng);
        const double cy = r + unit(rng) * (sz - 1.0 - 2.0 * r);
        const double cx = r + unit(rng) * (sz - 1.0 - 2.0 * r);
        const double intensity = 0.6 + 0.4 * unit(rng);
        const double thickness = std::max(1.5, r / 3.0);
        const auto cls = static_cast<ShapeClass>(labels[i]);

        Matrix img(size, size);
        for (std::size_t y = 0; y < size; ++y)
            for (std::size_t x = 0; x < size; ++x) {
                const double dy = static_cast<double>(y) - cy;
                const double dx = static_cast<double>(x) - cx;
                const double ady = std::abs(dy);
                const double adx = std::abs(dx);
                bool on = false;
                switch (cls) {
                case ShapeClass::filled_square:
                    on = ady <= r && adx <= r;
                    break;
                case ShapeClass::hollow_square:
                    on = ady <= r && adx <= r && (ady > r - thickness || adx > r - thickness);
                    break;
                case ShapeClass::cross:
                    on = (ady <= r && adx <= thickness / 2.0) || (adx <= r && ady <= thickness / 2.0);
                    break;
                case ShapeClass::disk:
                    on = dy * dy + dx * dx <= r * r;
                    break;
                }
                const double v = std::clamp((on ? intensity : 0.0) + noise(rng), 0.0, 1.0);
                img(y, x) = std::round(v * 255.0) / 255.0;
            }
        set.images.push_back(std::move(img));
    }
    return set;
}

LabeledImageSet subset_fraction(const LabeledImageSet &set, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction <= 1.0))
        throw ConfigError("subset_fraction: fraction must be in (0, 1], got " + std::to_string(fraction));
    set.validate();
    const std::size_t n = set.size();
    const auto take = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-9));

    std::vector<std::vector<std::size_t>> by_class(set.num_classes);
    for (std::size_t i = 0; i < n; ++i)
        by_class[static_cast<std::size_t>(set.labels[i])].push_back(i);

    std::mt19937_64 rng(seed);
    // (position key, class, item)
    std::vector<std::tuple<double, std::size_t, std::size_t>> order;
    order.reserve(n);
    for (std::size_t c = 0; c < by_class.size(); ++c) {
        auto &items = by_class[c];
        std::shuffle(items.begin(), items.end(), rng);
        for (std::size_t r = 0; r < items.size(); ++r)
            order.emplace_back((static_cast<double>(r) + 0.5) / static_cast<double>(items.size()), c, items[r]);
    }
    std::sort(order.begin(), order.end());

    std::vector<std::size_t> chosen;
    chosen.reserve(take);
    for (std::size_t i = 0; i < take && i < order.size(); ++i)
        chosen.push_back(std::get<2>(order[i]));
    std::sort(chosen.begin(), chosen.end());

    LabeledImageSet out;
    out.num_classes = set.num_classes;
    for (std::size_t idx : chosen) {
        out.images.push_back(set.images[idx]);
        out.labels.push_back(set.labels[idx]);
    }
    return out;
}

} // namespace ibit
