#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "gradshift/rng.hpp"
#include "gradshift/tensor.hpp"

namespace gradshift {

enum class Split : uint8_t { kTrain, kVal, kTest };
const char* split_name(Split s);

constexpr int kLabelBenign = 0;
constexpr int kLabelMalignant = 1;
const char* label_name(int label);

// Recorded geometric augmentation; applying the same parameters again must
// reproduce the stored sample exactly.
struct AugmentParams {
    bool flip = false;        // horizontal mirror
    double rot_deg = 0.0;     // rotation about the image center
    double shift_frac_y = 0.0;
    double shift_frac_x = 0.0;
    bool is_identity() const {
        return !flip && rot_deg == 0.0 && shift_frac_y == 0.0 && shift_frac_x == 0.0;
    }
};

struct Sample {
    Tensor image;             // [S,S,1] in [0,1]
    int label = kLabelBenign;
    Tensor mask;              // [S,S,1], values in {0,1}
    std::string origin;       // source file path or "synthetic/<label>/<index>"
    int source_index = -1;    // shared by all augmented variants of one source
    Split split = Split::kTrain;
    std::optional<AugmentParams> aug;
};

// Lesion morphology: benign lesions are smooth ellipses, malignant ones get
// boundary roughness plus radial spicules.
struct BenignStyle {
    double min_axis_frac = 0.12; // semi-axis as a fraction of image size
    double max_axis_frac = 0.20;
    double intensity_drop = 0.35;
};

struct MalignantStyle {
    double min_axis_frac = 0.10;
    double max_axis_frac = 0.16;
    double intensity_drop = 0.35;
    int min_spicules = 6;
    int max_spicules = 12;
    double spicule_len_frac = 0.9; // spike length relative to local radius
    double roughness_amp = 0.07;   // radial harmonic amplitude
};

struct PhantomSpec {
    int size = 64;
    double speckle_scale = 0.25; // Rayleigh sigma of the multiplicative field
    BenignStyle benign;
    MalignantStyle malignant;
    uint64_t seed = 0;
    void validate() const; // lesions must fit with a 4-pixel margin
};

// Deterministic speckle phantom with exact lesion support as mask.
Sample generate_phantom(const PhantomSpec& spec, int label, int index);
std::vector<Sample> generate_corpus(const PhantomSpec& spec, int per_class);

struct CorpusLoad {
    std::vector<Sample> samples;
    int skipped_unreadable = 0;
    int missing_masks = 0;
};

// Loads root/{benign,malignant[,normal]}/*.{png,bmp} with optional
// *_mask.png siblings, resized to input_size. "normal" images are included
// as benign-side negatives only when include_normal is set.
CorpusLoad load_corpus(const std::string& root, int input_size, bool include_normal = false,
                       bool quiet = true);

// The recorded transform, bilinear for images, nearest for masks,
// out-of-frame regions filled with zero.
Sample apply_augment(const Sample& s, const AugmentParams& p);
AugmentParams draw_augment_params(Rng& rng);

// Four independent draws per source sample, deterministic from
// (seed, source_index, variant).
std::vector<Sample> augment_x4(const Sample& s, uint64_t seed);

struct Fractions {
    double train = 0.70, val = 0.10, test = 0.20;
    void validate() const; // must sum to 1 (±1e-9)
};

// Stratified-by-label split assignment over source samples; deterministic
// from seed. Classes with fewer than 3 sources cannot be stratified.
std::vector<Split> assign_splits(const std::vector<Sample>& sources, const Fractions& f,
                                 uint64_t seed);

struct Dataset {
    int input_size = 0;
    std::vector<Sample> samples;
    std::vector<size_t> of(Split s) const;
};

// Split assignment + (train-only) x4 augmentation. All variants of a source
// land in the source's split, so no source leaks across splits.
Dataset build_dataset(std::vector<Sample> sources, const Fractions& f, uint64_t seed,
                      bool augment_train = true);

// PNG corpus tree root/{benign,malignant}/NNNN.png (+ _mask.png), the same
// layout load_corpus reads, so synthetic and real corpora are interchangeable.
void export_corpus(const std::vector<Sample>& samples, const std::string& dir);

std::string dataset_manifest_json(const Dataset& ds);

} // namespace gradshift
