#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "robal/array.hpp"
#include "robal/rng.hpp"

namespace robal {

struct IoError : std::runtime_error {
    explicit IoError(const std::string& m) : std::runtime_error(m) {}
};
struct BadMagicError : IoError {
    explicit BadMagicError(const std::string& m) : IoError(m) {}
};
struct BadVersionError : IoError {
    explicit BadVersionError(const std::string& m) : IoError(m) {}
};
struct TruncatedError : IoError {
    explicit TruncatedError(const std::string& m) : IoError(m) {}
};
struct BadFieldError : IoError {
    explicit BadFieldError(const std::string& m) : IoError(m) {}
};

// Samples in [0,1], integer labels in [0,C), and the per-class count
// vector consumed by every long-tail formula.
struct LabeledDataset {
    Shape sample_shape;
    int C = 0;
    std::vector<double> data;  // size() * sample_size(), row-major
    std::vector<int> labels;
    std::vector<int64_t> class_counts;

    int64_t size() const { return static_cast<int64_t>(labels.size()); }
    int64_t sample_size() const { return numel(sample_shape); }

    void recount();
    void validate() const;

    Array batch(const std::vector<int64_t>& indices) const;
    std::vector<int> batch_labels(const std::vector<int64_t>& indices) const;
    Array sample(int64_t index) const;  // single sample with leading batch dim 1
};

struct ImbalanceProfile {
    int C = 10;
    int64_t n_max = 5000;
    double ir = 1.0;  // n_max / n_min
};

// n_i = round(n_max * IR^(-i/(C-1))); n_0 = n_max, n_{C-1} = round(n_max/IR).
std::vector<int64_t> make_longtail_counts(const ImbalanceProfile& profile);

// Class means equally spaced on the unit circle of the first two feature
// dimensions, isotropic Gaussian noise, affinely squashed into [0,1].
LabeledDataset synth_gaussians(int C, int dim, double spread,
                               const std::vector<int64_t>& counts, uint64_t seed);

// Balanced subset of `base` with (up to integer division) the same total
// size as `lt`.
LabeledDataset make_small_balanced(const LabeledDataset& lt, const LabeledDataset& base,
                                   uint64_t seed);

// RBLT binary dataset format (little-endian): magic "RBLT", version u32=1,
// C u32, sample-count u64, dims u32 d then d u32 extents, then per sample
// a u16 label followed by product(extents) bytes, pixel = byte/255.
void save_binary(const LabeledDataset& ds, const std::string& path);
LabeledDataset load_binary(const std::string& path);

// Class-aware re-sampling stream: each slot first draws a class uniformly,
// then a sample uniformly within it.
class ClassAwareSampler {
public:
    ClassAwareSampler(const LabeledDataset& ds, uint64_t seed);
    std::vector<int64_t> next(int batch);

private:
    std::vector<std::vector<int64_t>> by_class_;
    Rng rng_;
};

}  // namespace robal
