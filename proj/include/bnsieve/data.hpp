#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "bnsieve/binary_io.hpp"
#include "bnsieve/error.hpp"
#include "bnsieve/rng.hpp"
#include "bnsieve/tensor.hpp"

namespace bnsieve {

struct DataPoint {
    std::size_t id = 0;
    Tensor image;  // C x H x W, values in [0, 1]
    std::size_t label = 0;
};

enum class Provenance { clean, poisoned };

inline std::string to_string(Provenance p) { return p == Provenance::clean ? "clean" : "poisoned"; }

/// Labeled points without provenance. This is the only dataset type the
/// training and defense code accepts.
class DatasetView {
public:
    DatasetView() = default;
    DatasetView(std::vector<DataPoint> points, std::size_t classes) : points_(std::move(points)), classes_(classes) {
        if (classes_ < 1) throw ConfigError("dataset: needs at least one class");
        std::unordered_set<std::size_t> seen;
        for (const auto& p : points_) {
            if (p.label >= classes_)
                throw ContractError("dataset: label " + std::to_string(p.label) + " out of range for " +
                                    std::to_string(classes_) + " classes");
            if (!seen.insert(p.id).second) throw ContractError("dataset: duplicate id " + std::to_string(p.id));
        }
    }

    [[nodiscard]] const std::vector<DataPoint>& points() const { return points_; }
    [[nodiscard]] std::size_t size() const { return points_.size(); }
    [[nodiscard]] bool empty() const { return points_.empty(); }
    [[nodiscard]] std::size_t classes() const { return classes_; }
    [[nodiscard]] const DataPoint& operator[](std::size_t i) const { return points_[i]; }

    [[nodiscard]] std::vector<std::size_t> labels() const {
        std::vector<std::size_t> out;
        out.reserve(points_.size());
        for (const auto& p : points_) out.push_back(p.label);
        return out;
    }

    [[nodiscard]] std::vector<std::size_t> ids() const {
        std::vector<std::size_t> out;
        out.reserve(points_.size());
        for (const auto& p : points_) out.push_back(p.id);
        return out;
    }

    /// N x C x H x W batch of the selected rows (all rows when `rows` is empty).
    [[nodiscard]] Tensor batch(std::span<const std::size_t> rows = {}) const {
        std::vector<Tensor> imgs;
        if (rows.empty())
            for (const auto& p : points_) imgs.push_back(p.image);
        else
            for (auto r : rows) imgs.push_back(points_.at(r).image);
        return stack(imgs);
    }

    [[nodiscard]] std::vector<std::size_t> ids_with_label(std::size_t label) const {
        std::vector<std::size_t> out;
        for (const auto& p : points_)
            if (p.label == label) out.push_back(p.id);
        return out;
    }

    [[nodiscard]] std::size_t count_label(std::size_t label) const {
        return static_cast<std::size_t>(
            std::count_if(points_.begin(), points_.end(), [&](const DataPoint& p) { return p.label == label; }));
    }

    [[nodiscard]] std::optional<std::size_t> row_of(std::size_t id) const {
        for (std::size_t i = 0; i < points_.size(); ++i)
            if (points_[i].id == id) return i;
        return std::nullopt;
    }

    /// Sub-view keeping the points whose id is in `keep`, in original order.
    [[nodiscard]] DatasetView subset(const std::vector<std::size_t>& keep) const {
        std::unordered_set<std::size_t> k(keep.begin(), keep.end());
        std::vector<DataPoint> out;
        for (const auto& p : points_)
            if (k.count(p.id)) out.push_back(p);
        return DatasetView(std::move(out), classes_);
    }

private:
    std::vector<DataPoint> points_;
    std::size_t classes_ = 0;
};

/// Harness-side dataset: a view plus ground-truth provenance per point.
class Dataset {
public:
    Dataset() = default;
    explicit Dataset(DatasetView view) : view_(std::move(view)), provenance_(view_.size(), Provenance::clean) {}

    [[nodiscard]] const DatasetView& view() const { return view_; }
    [[nodiscard]] std::size_t size() const { return view_.size(); }
    [[nodiscard]] Provenance provenance(std::size_t row) const { return provenance_.at(row); }

    [[nodiscard]] Provenance provenance_of(std::size_t id) const {
        auto r = view_.row_of(id);
        if (!r) throw ContractError("dataset: unknown id " + std::to_string(id));
        return provenance_[*r];
    }

    [[nodiscard]] std::vector<std::size_t> poisoned_ids() const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < size(); ++i)
            if (provenance_[i] == Provenance::poisoned) out.push_back(view_[i].id);
        return out;
    }

    /// Replaces the images of `ids` and flags them poisoned. Flags are write-once:
    /// poisoning a point twice is a contract error.
    void insert_poisons(const std::vector<std::size_t>& ids, const std::vector<Tensor>& images) {
        if (ids.size() != images.size()) throw ContractError("insert_poisons: ids/images length mismatch");
        auto pts = view_.points();
        for (std::size_t k = 0; k < ids.size(); ++k) {
            auto r = view_.row_of(ids[k]);
            if (!r) throw ContractError("insert_poisons: unknown id " + std::to_string(ids[k]));
            if (provenance_[*r] == Provenance::poisoned)
                throw ContractError("insert_poisons: id " + std::to_string(ids[k]) + " already poisoned");
            if (images[k].shape() != pts[*r].image.shape())
                throw DimensionError("insert_poisons: image " + shape_str(images[k].shape()) + " vs " +
                                     shape_str(pts[*r].image.shape()));
            pts[*r].image = images[k];
            provenance_[*r] = Provenance::poisoned;
        }
        view_ = DatasetView(std::move(pts), view_.classes());
    }

private:
    DatasetView view_;
    std::vector<Provenance> provenance_;
};

// --- synthetic textures ------------------------------------------------------

struct SynthOptions {
    /// Scales every per-sample perturbation: pixel noise std and the structured
    /// phase/frequency/orientation/amplitude jitter. Zero makes all samples of a
    /// class identical.
    double noise_sigma = 0.05;
    /// Seed of the class templates. Splits drawn with different `seed` but the
    /// same world share the same classes.
    std::uint64_t world_seed = 0x5EEDC1A55ULL;
    std::size_t first_id = 0;
    std::size_t channels = 3;
    /// Relative spread of the per-sample texture contrast (scaled like the
    /// other jitter). Real classes vary a lot in contrast and illumination.
    double contrast_jitter = 0.2;
};

namespace detail {

struct ClassTemplate {
    double freq, angle, phase;
    double freq2, angle2, phase2;
    std::vector<double> color, color2, offset;
};

inline ClassTemplate make_template(std::size_t c, std::size_t classes, const SynthOptions& opt) {
    Rng rng = Rng(opt.world_seed).split(1000 + c);
    ClassTemplate t;
    t.angle = std::numbers::pi * (static_cast<double>(c) + rng.uniform(0.0, 0.3)) / static_cast<double>(classes);
    t.freq = 1.5 + static_cast<double>(c % 4) + rng.uniform(0.0, 0.4);
    t.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    t.angle2 = t.angle + std::numbers::pi / 2.0 + rng.uniform(-0.3, 0.3);
    t.freq2 = 1.0 + static_cast<double>((c * 7 + 3) % 5) * 0.7;
    t.phase2 = rng.uniform(0.0, 2.0 * std::numbers::pi);
    for (std::size_t ch = 0; ch < opt.channels; ++ch) {
        t.color.push_back(rng.uniform(-1.0, 1.0));
        t.color2.push_back(rng.uniform(-1.0, 1.0));
        t.offset.push_back(rng.uniform(-0.12, 0.12));
    }
    return t;
}

inline Tensor render(const ClassTemplate& t, std::size_t side, std::size_t channels, double sigma, double contrast,
                     Rng& rng) {
    const double s = sigma / 0.05;  // structured jitter scales with the noise level
    const double dphase = s * rng.uniform(-0.5, 0.5);
    const double dphase2 = s * rng.uniform(-0.5, 0.5);
    const double dfreq = 1.0 + s * rng.uniform(-0.08, 0.08);
    const double dangle = s * rng.uniform(-0.1, 0.1);
    const double amp = 0.22 * (1.0 + s * rng.uniform(-contrast, contrast));
    const double bright = s * rng.uniform(-0.06, 0.06);
    // Class-agnostic low-frequency nuisance field.
    const double n_angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double n_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double n_amp = s * 0.05;
    std::vector<double> n_color(channels);
    for (auto& v : n_color) v = rng.uniform(-1.0, 1.0);

    Tensor img(Shape{channels, side, side});
    const double inv = 2.0 * std::numbers::pi / static_cast<double>(side);
    for (std::size_t ch = 0; ch < channels; ++ch)
        for (std::size_t i = 0; i < side; ++i)
            for (std::size_t j = 0; j < side; ++j) {
                const double y = static_cast<double>(i), x = static_cast<double>(j);
                const double a1 = t.angle + dangle, a2 = t.angle2 + dangle;
                const double p1 = std::sin(inv * t.freq * dfreq * (y * std::cos(a1) + x * std::sin(a1)) + t.phase + dphase);
                const double p2 = std::sin(inv * t.freq2 * dfreq * (y * std::cos(a2) + x * std::sin(a2)) + t.phase2 + dphase2);
                const double nz = std::sin(inv * 0.7 * (y * std::cos(n_angle) + x * std::sin(n_angle)) + n_phase);
                double v = 0.5 + t.offset[ch] + bright + amp * (t.color[ch] * p1 + 0.6 * t.color2[ch] * p2) +
                           n_amp * n_color[ch] * nz;
                if (sigma > 0.0) v += rng.normal(0.0, sigma);
                img[(ch * side + i) * side + j] = std::clamp(v, 0.0, 1.0);
            }
    return img;
}

}  // namespace detail

/// Procedural class-structured images: each class is a fixed two-wave texture
/// family (class-specific frequencies, orientations and colors); samples add
/// jitter and Gaussian pixel noise, clipped to [0, 1]. Ids run consecutively
/// from `opt.first_id`, class-major.
inline DatasetView synth_dataset(std::size_t classes, std::size_t per_class, std::size_t side, std::uint64_t seed,
                                 const SynthOptions& opt = {}) {
    if (classes < 2) throw ConfigError("synth_dataset: need at least 2 classes");
    if (side < 2) throw ConfigError("synth_dataset: image side must be >= 2");
    std::vector<DataPoint> points;
    points.reserve(classes * per_class);
    Rng base(seed);
    std::size_t id = opt.first_id;
    for (std::size_t c = 0; c < classes; ++c) {
        const auto tmpl = detail::make_template(c, classes, opt);
        Rng rng = base.split(c);
        for (std::size_t k = 0; k < per_class; ++k)
            points.push_back(DataPoint{id++, detail::render(tmpl, side, opt.channels, opt.noise_sigma, opt.contrast_jitter, rng), c});
    }
    return DatasetView(std::move(points), classes);
}

// --- CIFAR binary ------------------------------------------------------------

inline constexpr std::size_t kCifarSide = 32;
inline constexpr std::size_t kCifarRecord = 1 + 3 * kCifarSide * kCifarSide;

/// Reads the classic CIFAR-10 binary layout: per record one label byte then
/// 3072 channel-planar pixel bytes. Pixels are scaled to [0, 1].
inline DatasetView load_image_batch(const std::filesystem::path& path, std::size_t classes = 10, std::size_t first_id = 0) {
    const auto bytes = read_file_bytes(path);
    if (bytes.empty() || bytes.size() % kCifarRecord != 0)
        throw FormatError("CIFAR binary: size " + std::to_string(bytes.size()) + " is not a multiple of " +
                              std::to_string(kCifarRecord),
                          bytes.size() - bytes.size() % kCifarRecord);
    const std::size_t n = bytes.size() / kCifarRecord;
    std::vector<DataPoint> points;
    points.reserve(n);
    for (std::size_t r = 0; r < n; ++r) {
        const auto* rec = reinterpret_cast<const unsigned char*>(bytes.data() + r * kCifarRecord);
        if (rec[0] >= classes) throw FormatError("CIFAR binary: label " + std::to_string(rec[0]) + " out of range", r * kCifarRecord);
        Tensor img(Shape{3, kCifarSide, kCifarSide});
        for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<double>(rec[1 + i]) / 255.0;
        points.push_back(DataPoint{first_id + r, std::move(img), rec[0]});
    }
    return DatasetView(std::move(points), classes);
}

/// Writes 3 x 32 x 32 points in CIFAR binary layout, rounding to 1/255.
inline void write_image_batch(const std::filesystem::path& path, const DatasetView& data) {
    std::vector<char> bytes;
    bytes.reserve(data.size() * kCifarRecord);
    for (const auto& p : data.points()) {
        if (p.image.shape() != Shape{3, kCifarSide, kCifarSide})
            throw DimensionError("CIFAR binary: image " + shape_str(p.image.shape()) + " is not 3x32x32");
        if (p.label > 255) throw ContractError("CIFAR binary: label does not fit a byte");
        bytes.push_back(static_cast<char>(p.label));
        for (double v : p.image.values())
            bytes.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))));
    }
    write_file_bytes(path, bytes);
}

// --- poison tasks --------------------------------------------------------------

/// How a fractional poison budget is turned into a count.
enum class BudgetBasis {
    base_class,  // k = floor(p * |base class|)
    dataset,     // k = min(floor(p * |dataset|), |base class|)
};

struct PoisonBudget {
    std::optional<std::size_t> count;
    double fraction = 0.0;
    BudgetBasis basis = BudgetBasis::base_class;

    static PoisonBudget of_count(std::size_t k) { return PoisonBudget{k, 0.0, BudgetBasis::base_class}; }
    static PoisonBudget of_fraction(double p, BudgetBasis basis = BudgetBasis::base_class) {
        if (p < 0.0 || p > 1.0) throw ConfigError("poison budget fraction must be in [0, 1]");
        return PoisonBudget{std::nullopt, p, basis};
    }

    [[nodiscard]] std::size_t resolve(std::size_t base_class_size, std::size_t dataset_size) const {
        if (count) return *count;
        // Small epsilon keeps e.g. 0.14 * 50 from flooring to 6 through rounding.
        if (basis == BudgetBasis::base_class)
            return static_cast<std::size_t>(std::floor(fraction * static_cast<double>(base_class_size) + 1e-9));
        return std::min(base_class_size,
                        static_cast<std::size_t>(std::floor(fraction * static_cast<double>(dataset_size) + 1e-9)));
    }
};

struct PoisonTask {
    DataPoint target;  // held out of the training set
    std::size_t base_class = 0;
    PoisonBudget budget;
    double epsilon = 0.0;

    void validate(const DatasetView& train) const {
        if (base_class == target.label) throw ConfigError("poison task: base class equals target label");
        if (base_class >= train.classes()) throw ConfigError("poison task: base class out of range");
        if (epsilon < 0.0 || epsilon > 1.0) throw ConfigError("poison task: epsilon must be in [0, 1]");
        if (train.row_of(target.id)) throw ConfigError("poison task: target id is part of the training set");
    }
};

/// k distinct ids of base-class points, drawn uniformly with the seeded generator.
inline std::vector<std::size_t> select_poison_slots(const DatasetView& data, const PoisonTask& task, std::uint64_t seed) {
    auto candidates = data.ids_with_label(task.base_class);
    const std::size_t k = task.budget.resolve(candidates.size(), data.size());
    if (k > candidates.size())
        throw ConfigError("poison budget " + std::to_string(k) + " exceeds base class size " +
                          std::to_string(candidates.size()));
    Rng rng = Rng(seed).split(0x5107);
    for (std::size_t i = 0; i < k; ++i) {
        const auto j = i + static_cast<std::size_t>(rng.below(candidates.size() - i));
        std::swap(candidates[i], candidates[j]);
    }
    candidates.resize(k);
    return candidates;
}

// --- export ------------------------------------------------------------------

/// Directory of PSV1 images plus manifest.txt with lines "id label provenance file".
inline void export_dataset(const std::filesystem::path& dir, const Dataset& data) {
    std::filesystem::create_directories(dir);
    std::ofstream m(dir / "manifest.txt", std::ios::trunc);
    if (!m) throw IoError("cannot write " + (dir / "manifest.txt").string());
    m << "# classes=" << data.view().classes() << '\n';
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto& p = data.view()[i];
        const std::string file = "img_" + std::to_string(p.id) + ".psv";
        write_tensor(dir / file, p.image);
        m << p.id << ' ' << p.label << ' ' << to_string(data.provenance(i)) << ' ' << file << '\n';
    }
}

inline Dataset import_dataset(const std::filesystem::path& dir) {
    std::ifstream in(dir / "manifest.txt");
    if (!in) throw IoError("cannot open " + (dir / "manifest.txt").string());
    std::string line;
    std::size_t classes = 0;
    std::vector<DataPoint> pts;
    std::vector<std::size_t> poisoned;
    std::vector<Tensor> poisoned_images;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (line[0] == '#') {
            auto pos = line.find("classes=");
            if (pos != std::string::npos) classes = std::stoul(line.substr(pos + 8));
            continue;
        }
        std::istringstream ss(line);
        std::size_t id = 0, label = 0;
        std::string prov, file;
        if (!(ss >> id >> label >> prov >> file)) throw FormatError("dataset manifest: malformed line '" + line + "'", 0);
        Tensor img = read_tensor(dir / file);
        if (prov == "poisoned") {
            poisoned.push_back(id);
            poisoned_images.push_back(img);
        } else if (prov != "clean") {
            throw FormatError("dataset manifest: unknown provenance '" + prov + "'", 0);
        }
        pts.push_back(DataPoint{id, std::move(img), label});
    }
    if (classes == 0) throw FormatError("dataset manifest: missing classes header", 0);
    Dataset ds{DatasetView(std::move(pts), classes)};
    if (!poisoned.empty()) ds.insert_poisons(poisoned, poisoned_images);
    return ds;
}

}  // namespace bnsieve
