#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dam/image_io.hpp"
#include "dam/random.hpp"
#include "dam/tensor.hpp"

namespace dam {

enum class Split { train, val, test };

inline std::string to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "?";
}

inline Split parse_split(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    throw std::invalid_argument("unknown split '" + s + "' (expected train|val|test)");
}

/// Per-channel standardisation applied after scaling pixels to [0,1].
struct NormStats {
    std::vector<float> mean;
    std::vector<float> stddev;
};

/// Parameters that regenerate a synthetic dataset bit-for-bit.
struct SyntheticSpec {
    std::size_t classes = 30;
    std::size_t per_class = 20;
    std::size_t side = 32;
    std::uint64_t seed = 7;
};

/// Images ([side,side,channels], raw [0,1]) grouped into classes, each class assigned to one split.
class Dataset {
public:
    Dataset(std::size_t side, std::size_t channels, std::vector<std::string> class_names,
            std::vector<Split> class_split, std::vector<Tensor<float>> images, std::vector<std::size_t> labels)
        : side_(side), channels_(channels), class_names_(std::move(class_names)),
          class_split_(std::move(class_split)), images_(std::move(images)), labels_(std::move(labels)) {
        if (class_names_.size() != class_split_.size()) throw std::invalid_argument("one split entry per class required");
        if (images_.size() != labels_.size()) throw std::invalid_argument("one label per image required");
        by_class_.resize(class_names_.size());
        for (std::size_t i = 0; i < images_.size(); ++i) {
            if (labels_[i] >= class_names_.size()) throw std::invalid_argument("image label out of range");
            if (images_[i].shape() != Shape{side_, side_, channels_})
                throw ShapeError("image " + std::to_string(i) + " has shape " + to_string(images_[i].shape()) +
                                 ", expected " + to_string(Shape{side_, side_, channels_}));
            by_class_[labels_[i]].push_back(i);
        }
        norm_ = compute_norm(Split::train);
    }

    std::size_t side() const noexcept { return side_; }
    std::size_t channels() const noexcept { return channels_; }
    std::size_t size() const noexcept { return images_.size(); }
    std::size_t class_count() const noexcept { return class_names_.size(); }
    const std::vector<std::string>& class_names() const noexcept { return class_names_; }
    Split split_of(std::size_t cls) const { return class_split_.at(cls); }
    const Tensor<float>& image(std::size_t i) const { return images_.at(i); }
    std::size_t label(std::size_t i) const { return labels_.at(i); }
    const std::vector<std::size_t>& images_of(std::size_t cls) const { return by_class_.at(cls); }

    std::vector<std::size_t> classes_in(Split split) const {
        std::vector<std::size_t> out;
        for (std::size_t c = 0; c < class_split_.size(); ++c)
            if (class_split_[c] == split) out.push_back(c);
        return out;
    }

    const NormStats& norm() const noexcept { return norm_; }
    void set_norm(NormStats stats) {
        if (stats.mean.size() != channels_ || stats.stddev.size() != channels_)
            throw std::invalid_argument("normalisation statistics do not match the channel count");
        norm_ = std::move(stats);
    }

    /// Present when this dataset came from make_synthetic.
    const std::optional<SyntheticSpec>& synthetic() const noexcept { return synthetic_; }
    void set_synthetic(SyntheticSpec spec) { synthetic_ = spec; }

private:
    NormStats compute_norm(Split split) const {
        std::vector<double> sum(channels_, 0.0), sq(channels_, 0.0);
        std::size_t count = 0;
        for (std::size_t i = 0; i < images_.size(); ++i) {
            if (class_split_[labels_[i]] != split) continue;
            const auto px = images_[i].data();
            for (std::size_t p = 0; p < px.size(); p += channels_)
                for (std::size_t c = 0; c < channels_; ++c) {
                    sum[c] += px[p + c];
                    sq[c] += double(px[p + c]) * px[p + c];
                }
            count += px.size() / channels_;
        }
        NormStats stats{std::vector<float>(channels_, 0.0f), std::vector<float>(channels_, 1.0f)};
        if (count == 0) return stats;
        for (std::size_t c = 0; c < channels_; ++c) {
            const double m = sum[c] / double(count);
            const double var = std::max(sq[c] / double(count) - m * m, 0.0);
            stats.mean[c] = static_cast<float>(m);
            stats.stddev[c] = static_cast<float>(std::max(std::sqrt(var), 1e-3));
        }
        return stats;
    }

    std::size_t side_;
    std::size_t channels_;
    std::vector<std::string> class_names_;
    std::vector<Split> class_split_;
    std::vector<Tensor<float>> images_;
    std::vector<std::size_t> labels_;
    std::vector<std::vector<std::size_t>> by_class_;
    NormStats norm_;
    std::optional<SyntheticSpec> synthetic_;
};

/// One N-way K-shot task. Support and query are class-major (class n occupies rows n*K .. n*K+K-1).
struct Episode {
    std::size_t n = 0, k = 0, q = 0;
    std::vector<std::size_t> support_ids;     // dataset image indices
    std::vector<std::size_t> query_ids;
    std::vector<std::size_t> support_labels;  // episode-local class index 0..N-1
    std::vector<std::size_t> query_labels;
    std::vector<std::size_t> class_map;       // local index -> dataset class id
};

namespace detail {

// First `count` entries of a uniformly random permutation of `items` (partial Fisher-Yates).
inline std::vector<std::size_t> draw_without_replacement(std::vector<std::size_t> items, std::size_t count, Rng& rng) {
    for (std::size_t i = 0; i < count; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, items.size() - 1);
        std::swap(items[i], items[pick(rng)]);
    }
    items.resize(count);
    return items;
}

}  // namespace detail

/// Draws N classes of `split` uniformly, then K+Q distinct images per class.
inline Episode sample_episode(const Dataset& dataset, Split split, std::size_t n, std::size_t k, std::size_t q, Rng& rng) {
    if (n < 1 || k < 1 || q < 1) throw std::invalid_argument("episode needs n, k, q >= 1");
    const std::vector<std::size_t> eligible = dataset.classes_in(split);
    if (eligible.size() < n) {
        throw std::invalid_argument("split " + to_string(split) + " has " + std::to_string(eligible.size()) +
                                    " classes, episode needs " + std::to_string(n));
    }
    Episode ep;
    ep.n = n;
    ep.k = k;
    ep.q = q;
    ep.class_map = detail::draw_without_replacement(eligible, n, rng);
    ep.support_ids.reserve(n * k);
    ep.query_ids.reserve(n * q);
    for (std::size_t local = 0; local < n; ++local) {
        const auto& pool = dataset.images_of(ep.class_map[local]);
        if (pool.size() < k + q) {
            throw std::invalid_argument("class '" + dataset.class_names()[ep.class_map[local]] + "' has " +
                                        std::to_string(pool.size()) + " images, episode needs " +
                                        std::to_string(k + q));
        }
        const auto picked = detail::draw_without_replacement(pool, k + q, rng);
        for (std::size_t i = 0; i < k; ++i) {
            ep.support_ids.push_back(picked[i]);
            ep.support_labels.push_back(local);
        }
        for (std::size_t i = k; i < k + q; ++i) {
            ep.query_ids.push_back(picked[i]);
            ep.query_labels.push_back(local);
        }
    }
    return ep;
}

/// Rotates a square [S,S,C] image about its centre; bilinear sampling, zero outside the source.
inline Tensor<float> rotate_image(const Tensor<float>& image, double degrees) {
    if (image.rank() != 3 || image.dim(0) != image.dim(1))
        throw ShapeError("rotation needs a square [S,S,C] image, got " + to_string(image.shape()));
    const std::size_t side = image.dim(0), ch = image.dim(2);
    const double rad = degrees * std::numbers::pi / 180.0;
    const double cs = std::cos(rad), sn = std::sin(rad);
    const double centre = (double(side) - 1.0) / 2.0;
    Tensor<float> out(image.shape());
    auto px = [&](std::ptrdiff_t y, std::ptrdiff_t x, std::size_t c) -> double {
        if (y < 0 || x < 0 || y >= std::ptrdiff_t(side) || x >= std::ptrdiff_t(side)) return 0.0;
        return image[(std::size_t(y) * side + std::size_t(x)) * ch + c];
    };
    for (std::size_t i = 0; i < side; ++i) {
        for (std::size_t j = 0; j < side; ++j) {
            // Inverse map: the output pixel samples the source at the position rotated by -angle.
            const double dy = double(i) - centre, dx = double(j) - centre;
            const double sy = cs * dy - sn * dx + centre;
            const double sx = sn * dy + cs * dx + centre;
            const double fy = std::floor(sy), fx = std::floor(sx);
            const double wy = sy - fy, wx = sx - fx;
            const auto y0 = static_cast<std::ptrdiff_t>(fy), x0 = static_cast<std::ptrdiff_t>(fx);
            for (std::size_t c = 0; c < ch; ++c) {
                const double v = (1 - wy) * ((1 - wx) * px(y0, x0, c) + wx * px(y0, x0 + 1, c)) +
                                 wy * ((1 - wx) * px(y0 + 1, x0, c) + wx * px(y0 + 1, x0 + 1, c));
                out[(i * side + j) * ch + c] = static_cast<float>(v);
            }
        }
    }
    return out;
}

inline constexpr std::array<double, 4> kRotationAngles{-45.0, -22.5, 22.5, 45.0};

/// Training-time augmentation: rotation by one of ±22.5°/±45°, chosen uniformly.
inline Tensor<float> augment_rotate(const Tensor<float>& image, Rng& rng, double* angle_out = nullptr) {
    if (image.rank() != 3 || image.dim(0) != image.dim(1))
        throw ShapeError("rotation needs a square [S,S,C] image, got " + to_string(image.shape()));
    std::uniform_int_distribution<std::size_t> pick(0, kRotationAngles.size() - 1);
    const double angle = kRotationAngles[pick(rng)];
    if (angle_out) *angle_out = angle;
    return rotate_image(image, angle);
}

/// Episode images stacked into [B,S,S,C] batches, standardised with the dataset statistics.
struct EpisodeImages {
    Tensor<float> support;
    Tensor<float> query;
};

/// Builds the image batches for an episode. Rotation augmentation runs only when `augment` is set.
inline EpisodeImages materialize(const Dataset& dataset, const Episode& ep, bool augment, Rng* rng = nullptr) {
    if (augment && !rng) throw std::invalid_argument("augmentation requires a generator");
    const std::size_t s = dataset.side(), c = dataset.channels(), per = s * s * c;
    const NormStats& ns = dataset.norm();
    auto stack = [&](const std::vector<std::size_t>& ids) {
        Tensor<float> batch({ids.size(), s, s, c});
        for (std::size_t b = 0; b < ids.size(); ++b) {
            const Tensor<float> img = augment ? augment_rotate(dataset.image(ids[b]), *rng) : dataset.image(ids[b]);
            for (std::size_t p = 0; p < per; ++p) {
                const std::size_t ch = p % c;
                batch[b * per + p] = (img[p] - ns.mean[ch]) / ns.stddev[ch];
            }
        }
        return batch;
    };
    return {stack(ep.support_ids), stack(ep.query_ids)};
}

// ---------------------------------------------------------------------------------------------
// Synthetic data

namespace detail {

struct ClassStyle {
    std::array<double, 3> base;        // background colour
    std::array<double, 3> stripe;      // colour modulation of the grating
    double frequency;                  // cycles across the image
    double orientation;                // radians
    double contrast;
    double blob_y, blob_x, blob_radius;
    std::array<double, 3> blob_colour;
};

inline ClassStyle draw_style(Rng& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    ClassStyle st{};
    for (auto& v : st.base) v = 0.2 + 0.6 * u(rng);
    for (auto& v : st.stripe) v = u(rng) * 2.0 - 1.0;
    st.frequency = 1.5 + 4.0 * u(rng);
    st.orientation = std::numbers::pi * u(rng);
    st.contrast = 0.12 + 0.18 * u(rng);
    st.blob_y = 0.25 + 0.5 * u(rng);
    st.blob_x = 0.25 + 0.5 * u(rng);
    st.blob_radius = 0.1 + 0.15 * u(rng);
    for (auto& v : st.blob_colour) v = u(rng);
    return st;
}

inline Tensor<float> render(const ClassStyle& st, std::size_t side, Rng& rng) {
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double phase = 2.0 * std::numbers::pi * u(rng);
    const double theta = st.orientation + 0.15 * gauss(rng);
    const double freq = st.frequency * (1.0 + 0.08 * gauss(rng));
    const double by = st.blob_y + 0.06 * gauss(rng), bx = st.blob_x + 0.06 * gauss(rng);
    const double radius = st.blob_radius * (1.0 + 0.1 * gauss(rng));
    const double brightness = 0.06 * gauss(rng);
    std::array<double, 3> tint;
    for (auto& v : tint) v = 0.05 * gauss(rng);
    Tensor<float> img({side, side, 3});
    for (std::size_t i = 0; i < side; ++i) {
        for (std::size_t j = 0; j < side; ++j) {
            const double y = (double(i) + 0.5) / double(side), x = (double(j) + 0.5) / double(side);
            const double proj = x * std::cos(theta) + y * std::sin(theta);
            const double wave = std::sin(2.0 * std::numbers::pi * freq * proj + phase);
            const double r2 = ((y - by) * (y - by) + (x - bx) * (x - bx)) / (radius * radius);
            const double blob = std::exp(-0.5 * r2);
            for (std::size_t c = 0; c < 3; ++c) {
                double v = st.base[c] + tint[c] + brightness + st.contrast * st.stripe[c] * wave;
                v = (1.0 - 0.7 * blob) * v + 0.7 * blob * st.blob_colour[c];
                v += 0.08 * gauss(rng);
                img[(i * side + j) * 3 + c] = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
        }
    }
    return img;
}

}  // namespace detail

/// Procedural RGB dataset: each class has its own grating (frequency, orientation, colour) and blob
/// style; every image adds phase, pose and pixel noise. Classes split 60/20/20 into train/val/test.
inline Dataset make_synthetic(const SyntheticSpec& spec) {
    if (spec.classes < 10) throw std::invalid_argument("make_synthetic needs at least 10 classes");
    if (spec.per_class < 2) throw std::invalid_argument("make_synthetic needs at least 2 images per class");
    if (spec.side < 16) throw std::invalid_argument("make_synthetic needs side >= 16");
    Rng style_rng = make_rng(spec.seed, "synthetic.style");
    std::vector<std::string> names;
    std::vector<Split> splits;
    std::vector<Tensor<float>> images;
    std::vector<std::size_t> labels;
    const std::size_t n_train = spec.classes * 60 / 100;
    const std::size_t n_val = spec.classes * 20 / 100;
    for (std::size_t c = 0; c < spec.classes; ++c) {
        const detail::ClassStyle style = detail::draw_style(style_rng);
        char buf[32];
        std::snprintf(buf, sizeof buf, "class_%03zu", c);
        names.emplace_back(buf);
        splits.push_back(c < n_train ? Split::train : c < n_train + n_val ? Split::val : Split::test);
        Rng img_rng = make_rng(spec.seed, "synthetic.images", c);
        for (std::size_t i = 0; i < spec.per_class; ++i) {
            images.push_back(detail::render(style, spec.side, img_rng));
            labels.push_back(c);
        }
    }
    Dataset ds(spec.side, 3, std::move(names), std::move(splits), std::move(images), std::move(labels));
    ds.set_synthetic(spec);
    return ds;
}

// ---------------------------------------------------------------------------------------------
// Directory ingestion: root/<class_name>/<image>.pgm|.ppm plus root/splits.csv (class_name,split)

inline std::map<std::string, Split> read_splits(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw std::runtime_error("cannot open split file " + file.string());
    std::map<std::string, Split> out;
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos) throw std::runtime_error("malformed split line: " + line);
        const std::string name = line.substr(0, comma), split = line.substr(comma + 1);
        if (first && name == "class_name") {
            first = false;
            continue;
        }
        first = false;
        out[name] = parse_split(split);
    }
    return out;
}

inline Dataset load_directory(const std::filesystem::path& root) {
    namespace fs = std::filesystem;
    const auto splits = read_splits(root / "splits.csv");
    std::vector<std::string> names;
    std::vector<Split> class_split;
    std::vector<Tensor<float>> images;
    std::vector<std::size_t> labels;
    std::size_t side = 0, channels = 0;
    for (const auto& [name, split] : splits) {
        const fs::path dir = root / name;
        if (!fs::is_directory(dir)) throw std::runtime_error("class directory missing: " + dir.string());
        std::vector<fs::path> files;
        for (const auto& entry : fs::directory_iterator(dir)) {
            const auto ext = entry.path().extension().string();
            if (entry.is_regular_file() && (ext == ".pgm" || ext == ".ppm" || ext == ".pnm")) files.push_back(entry.path());
        }
        std::sort(files.begin(), files.end());
        const std::size_t label = names.size();
        names.push_back(name);
        class_split.push_back(split);
        for (const auto& f : files) {
            Tensor<float> img = read_pnm(f);
            if (img.dim(0) != img.dim(1)) throw ShapeError("image is not square: " + f.string());
            if (side == 0) {
                side = img.dim(0);
                channels = img.dim(2);
            }
            images.push_back(std::move(img));
            labels.push_back(label);
        }
    }
    if (images.empty()) throw std::runtime_error("no images found under " + root.string());
    return Dataset(side, channels, std::move(names), std::move(class_split), std::move(images), std::move(labels));
}

/// Writes a dataset in the directory layout understood by load_directory.
inline void save_directory(const Dataset& ds, const std::filesystem::path& root) {
    namespace fs = std::filesystem;
    fs::create_directories(root);
    std::ofstream splits(root / "splits.csv");
    if (!splits) throw std::runtime_error("cannot write " + (root / "splits.csv").string());
    splits << "class_name,split\n";
    for (std::size_t c = 0; c < ds.class_count(); ++c) {
        const auto& name = ds.class_names()[c];
        splits << name << ',' << to_string(ds.split_of(c)) << '\n';
        fs::create_directories(root / name);
        const auto& ids = ds.images_of(c);
        for (std::size_t i = 0; i < ids.size(); ++i) {
            char buf[32];
            std::snprintf(buf, sizeof buf, "%05zu%s", i, ds.channels() == 1 ? ".pgm" : ".ppm");
            write_pnm(root / name / buf, ds.image(ids[i]));
        }
    }
}

}  // namespace dam
