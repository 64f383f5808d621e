#include "gradshift/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include <nlohmann/json.hpp>

#include "gradshift/error.hpp"
#include "gradshift/image_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace gradshift {

const char* split_name(Split s) {
    switch (s) {
        case Split::kTrain: return "train";
        case Split::kVal: return "val";
        case Split::kTest: return "test";
    }
    return "?";
}

const char* label_name(int label) { return label == kLabelMalignant ? "malignant" : "benign"; }

void PhantomSpec::validate() const {
    if (size < 16) throw InvalidArgument("phantom: size must be >= 16, got " + std::to_string(size));
    if (speckle_scale <= 0.0) throw InvalidArgument("phantom: speckle_scale must be > 0");
    auto check_axes = [&](double lo, double hi, const char* who) {
        if (lo <= 0.0 || hi < lo)
            throw InvalidArgument(std::string("phantom: bad axis range for ") + who);
    };
    check_axes(benign.min_axis_frac, benign.max_axis_frac, "benign");
    check_axes(malignant.min_axis_frac, malignant.max_axis_frac, "malignant");
    if (malignant.min_spicules < 1 || malignant.max_spicules < malignant.min_spicules)
        throw InvalidArgument("phantom: bad spicule count range");
    // Worst-case lesion radius (rough boundary plus full-length spicule) must
    // fit inside the frame with a 4-pixel margin.
    const double r_benign = benign.max_axis_frac * size;
    const double r_malig = malignant.max_axis_frac * size *
                           (1.0 + malignant.roughness_amp + malignant.spicule_len_frac);
    const double reach = std::max(r_benign, r_malig);
    if (2.0 * (reach + 4.0) >= size)
        throw InvalidArgument("phantom: lesion cannot fit inside the image with a 4-pixel margin");
}

namespace {

// Radius of a rotated ellipse at polar angle theta.
double ellipse_radius(double a, double b, double theta, double phi) {
    const double c = std::cos(theta - phi), s = std::sin(theta - phi);
    return a * b / std::sqrt(b * b * c * c + a * a * s * s);
}

struct LesionShape {
    double cy, cx;
    std::vector<double> radius; // sampled over [0, 2pi)
    double radius_at(double theta) const {
        const double n = static_cast<double>(radius.size());
        double t = std::fmod(theta, 2.0 * M_PI);
        if (t < 0) t += 2.0 * M_PI;
        const double pos = t / (2.0 * M_PI) * n;
        const size_t i0 = static_cast<size_t>(pos) % radius.size();
        const size_t i1 = (i0 + 1) % radius.size();
        const double frac = pos - std::floor(pos);
        return (1.0 - frac) * radius[i0] + frac * radius[i1];
    }
};

constexpr int kRadialSamples = 720;

LesionShape draw_lesion(const PhantomSpec& spec, int label, Rng& rng) {
    const double s = spec.size;
    double a, b, reach_frac;
    std::vector<double> radius(kRadialSamples);
    const double phi = rng.uniform(0.0, M_PI);
    if (label == kLabelMalignant) {
        const auto& st = spec.malignant;
        a = rng.uniform(st.min_axis_frac, st.max_axis_frac) * s;
        b = rng.uniform(st.min_axis_frac, st.max_axis_frac) * s;
        // Low-order radial harmonics roughen the boundary.
        struct Harm {
            int k;
            double amp, phase;
        };
        std::vector<Harm> harms;
        for (int k = 3; k <= 6; ++k)
            harms.push_back({k, rng.uniform(-st.roughness_amp, st.roughness_amp),
                             rng.uniform(0.0, 2.0 * M_PI)});
        // Spicules: evenly spaced spikes with jitter, triangular profile.
        const int n_spic = rng.range(st.min_spicules, st.max_spicules);
        struct Spike {
            double angle, len, width;
        };
        std::vector<Spike> spikes;
        for (int i = 0; i < n_spic; ++i) {
            const double base = 2.0 * M_PI * i / n_spic;
            spikes.push_back({base + rng.uniform(-0.4, 0.4) * M_PI / n_spic,
                              st.spicule_len_frac * rng.uniform(0.55, 1.0),
                              rng.uniform(0.10, 0.18)});
        }
        for (int i = 0; i < kRadialSamples; ++i) {
            const double theta = 2.0 * M_PI * i / kRadialSamples;
            double r = ellipse_radius(a, b, theta, phi);
            double rough = 1.0;
            for (const auto& hm : harms) rough += hm.amp * std::cos(hm.k * theta + hm.phase);
            r *= std::max(0.3, rough);
            for (const auto& sp : spikes) {
                double d = std::fabs(std::remainder(theta - sp.angle, 2.0 * M_PI));
                if (d < sp.width)
                    r += ellipse_radius(a, b, sp.angle, phi) * sp.len * (1.0 - d / sp.width);
            }
            radius[static_cast<size_t>(i)] = r;
        }
        reach_frac = st.max_axis_frac * (1.0 + st.roughness_amp + st.spicule_len_frac);
    } else {
        const auto& st = spec.benign;
        a = rng.uniform(st.min_axis_frac, st.max_axis_frac) * s;
        b = rng.uniform(st.min_axis_frac, st.max_axis_frac) * s;
        for (int i = 0; i < kRadialSamples; ++i)
            radius[static_cast<size_t>(i)] =
                ellipse_radius(a, b, 2.0 * M_PI * i / kRadialSamples, phi);
        reach_frac = st.max_axis_frac;
    }
    const double reach = reach_frac * s + 4.0;
    LesionShape shape;
    shape.cy = rng.uniform(reach, s - 1.0 - reach);
    shape.cx = rng.uniform(reach, s - 1.0 - reach);
    shape.radius = std::move(radius);
    return shape;
}

} // namespace

Sample generate_phantom(const PhantomSpec& spec, int label, int index) {
    spec.validate();
    if (label != kLabelBenign && label != kLabelMalignant)
        throw InvalidArgument("phantom: label must be 0 (benign) or 1 (malignant)");
    Rng rng(mix_seed(spec.seed, static_cast<uint64_t>(label), static_cast<uint64_t>(index)));
    const int s = spec.size;

    // Smooth background echogenicity: gentle ramp plus a couple of broad blobs.
    std::vector<double> tissue(static_cast<size_t>(s) * s);
    const double base = rng.uniform(0.50, 0.62);
    const double ramp = rng.uniform(-0.10, 0.10);
    const double ramp_dir = rng.uniform(0.0, 2.0 * M_PI);
    struct Blob {
        double cy, cx, sig, amp;
    };
    std::vector<Blob> blobs;
    for (int i = 0; i < 3; ++i)
        blobs.push_back({rng.uniform(0.0, s - 1.0), rng.uniform(0.0, s - 1.0),
                         rng.uniform(0.25, 0.45) * s, rng.uniform(-0.08, 0.08)});
    for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
            const double u = (x - s / 2.0) / s, v = (y - s / 2.0) / s;
            double t = base + ramp * (u * std::cos(ramp_dir) + v * std::sin(ramp_dir));
            for (const auto& bl : blobs) {
                const double dy = y - bl.cy, dx = x - bl.cx;
                t += bl.amp * std::exp(-(dy * dy + dx * dx) / (2.0 * bl.sig * bl.sig));
            }
            tissue[static_cast<size_t>(y) * s + x] = t;
        }

    // Hypoechoic lesion; the mask is its exact support.
    const LesionShape shape = draw_lesion(spec, label, rng);
    const double drop =
        label == kLabelMalignant ? spec.malignant.intensity_drop : spec.benign.intensity_drop;
    Tensor mask = Tensor::zeros({s, s, 1});
    for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
            const double dy = y - shape.cy, dx = x - shape.cx;
            const double r = std::hypot(dy, dx);
            if (r < shape.radius_at(std::atan2(dy, dx))) {
                mask[static_cast<long>(y) * s + x] = 1.0;
                tissue[static_cast<size_t>(y) * s + x] *= drop;
            }
        }

    // Multiplicative Rayleigh speckle, lightly smoothed to give it grain,
    // normalized to unit mean so tissue sets the brightness scale.
    std::vector<double> speckle(static_cast<size_t>(s) * s);
    const double mean_rayleigh = spec.speckle_scale * std::sqrt(M_PI / 2.0);
    for (auto& v : speckle) v = rng.rayleigh(spec.speckle_scale) / mean_rayleigh;
    // 3x3 binomial blur with edge clamp.
    std::vector<double> blurred(speckle.size());
    auto at = [&](int y, int x) {
        y = std::clamp(y, 0, s - 1);
        x = std::clamp(x, 0, s - 1);
        return speckle[static_cast<size_t>(y) * s + x];
    };
    for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
            double acc = 0.0;
            static const double k3[3] = {0.25, 0.5, 0.25};
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx)
                    acc += k3[dy + 1] * k3[dx + 1] * at(y + dy, x + dx);
            blurred[static_cast<size_t>(y) * s + x] = acc;
        }

    Tensor image = Tensor::zeros({s, s, 1});
    for (long i = 0; i < image.numel(); ++i)
        image[i] = std::clamp(tissue[static_cast<size_t>(i)] * blurred[static_cast<size_t>(i)],
                              0.0, 1.0);

    Sample sample;
    sample.image = std::move(image);
    sample.label = label;
    sample.mask = std::move(mask);
    sample.origin = std::string("synthetic/") + label_name(label) + "/" + std::to_string(index);
    sample.source_index = index;
    return sample;
}

std::vector<Sample> generate_corpus(const PhantomSpec& spec, int per_class) {
    if (per_class < 1) throw InvalidArgument("phantom: per_class must be >= 1");
    std::vector<Sample> out;
    out.reserve(static_cast<size_t>(per_class) * 2);
    int source = 0;
    for (int label : {kLabelBenign, kLabelMalignant})
        for (int i = 0; i < per_class; ++i) {
            Sample s = generate_phantom(spec, label, i);
            s.source_index = source++;
            out.push_back(std::move(s));
        }
    return out;
}

namespace {

bool has_image_ext(const fs::path& p) {
    std::string ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
    return ext == ".png" || ext == ".bmp";
}

bool is_mask_file(const fs::path& p) {
    const std::string stem = p.stem().string();
    return stem.size() > 5 && stem.substr(stem.size() - 5) == "_mask";
}

Tensor binarize(const Tensor& t) {
    Tensor out = Tensor::zeros(t.shape());
    for (long i = 0; i < t.numel(); ++i) out[i] = t[i] > 0.5 ? 1.0 : 0.0;
    return out;
}

} // namespace

CorpusLoad load_corpus(const std::string& root, int input_size, bool include_normal, bool quiet) {
    if (input_size < 1) throw InvalidArgument("load_corpus: bad input_size");
    if (!fs::is_directory(root)) throw IoError("load_corpus: not a directory: " + root);
    CorpusLoad result;
    struct Group {
        const char* dir;
        int label;
    };
    std::vector<Group> groups = {{"benign", kLabelBenign}, {"malignant", kLabelMalignant}};
    if (include_normal) groups.push_back({"normal", kLabelBenign});

    int source = 0;
    for (const auto& g : groups) {
        const fs::path dir = fs::path(root) / g.dir;
        if (!fs::is_directory(dir)) continue;
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(dir))
            if (e.is_regular_file() && has_image_ext(e.path()) && !is_mask_file(e.path()))
                files.push_back(e.path());
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            Tensor img;
            try {
                img = load_image_gray(f.string());
            } catch (const Error& e) {
                ++result.skipped_unreadable;
                if (!quiet) std::cerr << "warning: skipping unreadable " << f << ": " << e.what() << "\n";
                continue;
            }
            img = resize_bilinear(img, input_size, input_size);

            Tensor mask;
            const fs::path mask_path = f.parent_path() / (f.stem().string() + "_mask.png");
            if (fs::exists(mask_path)) {
                Tensor m = load_image_gray(mask_path.string());
                mask = binarize(resize_nearest(binarize(m), input_size, input_size));
            } else {
                mask = Tensor::zeros({input_size, input_size, 1});
                ++result.missing_masks;
                if (!quiet) std::cerr << "warning: no mask for " << f << ", using all-zero mask\n";
            }

            Sample s;
            s.image = std::move(img);
            s.label = g.label;
            s.mask = std::move(mask);
            s.origin = fs::relative(f, root).string();
            s.source_index = source++;
            result.samples.push_back(std::move(s));
        }
    }
    if (result.samples.empty()) throw IoError("load_corpus: no readable images under " + root);
    return result;
}

Sample apply_augment(const Sample& s, const AugmentParams& p) {
    const int size = s.image.dim(0);
    const double c = (size - 1) / 2.0;
    const double theta = p.rot_deg * M_PI / 180.0;
    const double cos_t = std::cos(theta), sin_t = std::sin(theta);
    const double dy = p.shift_frac_y * size, dx = p.shift_frac_x * size;

    Tensor img = Tensor::zeros(s.image.shape());
    Tensor msk = Tensor::zeros(s.mask.shape());
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            // Invert shift, then rotation, then flip to find the source pixel.
            const double uy = y - dy, ux = x - dx;
            double sy = cos_t * (uy - c) + sin_t * (ux - c) + c;
            double sx = -sin_t * (uy - c) + cos_t * (ux - c) + c;
            if (p.flip) sx = (size - 1) - sx;

            const long o = static_cast<long>(y) * size + x;
            // Image: bilinear with zero outside the frame.
            const int y0 = static_cast<int>(std::floor(sy)), x0 = static_cast<int>(std::floor(sx));
            const double ty = sy - y0, tx = sx - x0;
            double acc = 0.0;
            for (int ky = 0; ky < 2; ++ky)
                for (int kx = 0; kx < 2; ++kx) {
                    const int yy = y0 + ky, xx = x0 + kx;
                    if (yy < 0 || yy >= size || xx < 0 || xx >= size) continue;
                    const double wgt = (ky ? ty : 1.0 - ty) * (kx ? tx : 1.0 - tx);
                    acc += wgt * s.image[static_cast<long>(yy) * size + xx];
                }
            img[o] = acc;
            // Mask: nearest with zero outside, keeps it binary.
            const int ny = static_cast<int>(std::lround(sy)), nx = static_cast<int>(std::lround(sx));
            if (ny >= 0 && ny < size && nx >= 0 && nx < size)
                msk[o] = s.mask[static_cast<long>(ny) * size + nx];
        }

    Sample out = s;
    out.image = std::move(img);
    out.mask = std::move(msk);
    out.aug = p;
    return out;
}

AugmentParams draw_augment_params(Rng& rng) {
    AugmentParams p;
    p.flip = rng.bernoulli(0.5);
    p.rot_deg = rng.uniform(-5.0, 5.0);
    p.shift_frac_y = rng.uniform(-0.10, 0.10);
    p.shift_frac_x = rng.uniform(-0.10, 0.10);
    return p;
}

std::vector<Sample> augment_x4(const Sample& s, uint64_t seed) {
    std::vector<Sample> out;
    out.reserve(4);
    for (int variant = 0; variant < 4; ++variant) {
        Rng rng(mix_seed(seed, static_cast<uint64_t>(s.source_index),
                         static_cast<uint64_t>(variant) + 1));
        out.push_back(apply_augment(s, draw_augment_params(rng)));
    }
    return out;
}

void Fractions::validate() const {
    if (train < 0 || val < 0 || test < 0 || std::fabs(train + val + test - 1.0) > 1e-9)
        throw InvalidArgument("split: fractions must be nonnegative and sum to 1");
}

std::vector<Split> assign_splits(const std::vector<Sample>& sources, const Fractions& f,
                                 uint64_t seed) {
    f.validate();
    std::map<int, std::vector<size_t>> by_label;
    for (size_t i = 0; i < sources.size(); ++i) by_label[sources[i].label].push_back(i);

    std::vector<Split> out(sources.size(), Split::kTrain);
    for (auto& [label, idx] : by_label) {
        if (idx.size() < 3)
            throw InvalidArgument("split: class " + std::string(label_name(label)) + " has " +
                                  std::to_string(idx.size()) + " sources, need >= 3 to stratify");
        Rng rng(mix_seed(seed, static_cast<uint64_t>(label) + 0x517A));
        rng.shuffle(idx);
        const size_t n = idx.size();
        size_t n_train = static_cast<size_t>(std::llround(f.train * static_cast<double>(n)));
        size_t n_val = static_cast<size_t>(std::llround(f.val * static_cast<double>(n)));
        n_train = std::min(n_train, n);
        n_val = std::min(n_val, n - n_train);
        for (size_t i = 0; i < n; ++i)
            out[idx[i]] = i < n_train ? Split::kTrain : (i < n_train + n_val ? Split::kVal : Split::kTest);
    }
    return out;
}

std::vector<size_t> Dataset::of(Split s) const {
    std::vector<size_t> idx;
    for (size_t i = 0; i < samples.size(); ++i)
        if (samples[i].split == s) idx.push_back(i);
    return idx;
}

Dataset build_dataset(std::vector<Sample> sources, const Fractions& f, uint64_t seed,
                      bool augment_train) {
    if (sources.empty()) throw InvalidArgument("build_dataset: no sources");
    const std::vector<Split> splits = assign_splits(sources, f, seed);
    Dataset ds;
    ds.input_size = sources.front().image.dim(0);
    for (size_t i = 0; i < sources.size(); ++i) {
        sources[i].split = splits[i];
        if (splits[i] == Split::kTrain && augment_train) {
            for (auto& v : augment_x4(sources[i], seed)) {
                v.split = Split::kTrain;
                ds.samples.push_back(std::move(v));
            }
        } else {
            ds.samples.push_back(std::move(sources[i]));
        }
    }
    return ds;
}

void export_corpus(const std::vector<Sample>& samples, const std::string& dir) {
    if (samples.empty()) throw InvalidArgument("export_corpus: nothing to export");
    std::map<int, int> counter;
    for (const auto& s : samples) {
        const fs::path sub = fs::path(dir) / label_name(s.label);
        fs::create_directories(sub);
        char name[32];
        std::snprintf(name, sizeof(name), "%s_%04d", label_name(s.label), counter[s.label]++);
        save_png_gray((sub / (std::string(name) + ".png")).string(), s.image);
        save_png_gray((sub / (std::string(name) + "_mask.png")).string(), s.mask);
    }
}

std::string dataset_manifest_json(const Dataset& ds) {
    json j;
    j["input_size"] = ds.input_size;
    json arr = json::array();
    for (const auto& s : ds.samples) {
        json e;
        e["origin"] = s.origin;
        e["label"] = label_name(s.label);
        e["source_index"] = s.source_index;
        e["split"] = split_name(s.split);
        if (s.aug) {
            e["augment"] = {{"flip", s.aug->flip},
                            {"rot_deg", s.aug->rot_deg},
                            {"shift_frac_y", s.aug->shift_frac_y},
                            {"shift_frac_x", s.aug->shift_frac_x}};
        }
        arr.push_back(std::move(e));
    }
    j["samples"] = std::move(arr);
    return j.dump(2);
}

} // namespace gradshift
