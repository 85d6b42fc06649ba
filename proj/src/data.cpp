#include "robal/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace robal {

namespace {

constexpr double kTwoPi = 6.283185307179586476925287;

void append_u16(std::string& out, uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
}
void append_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void append_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct Cursor {
    const uint8_t* p;
    size_t n;
    size_t off = 0;

    void need(size_t k, const char* what) {
        if (off + k > n) throw TruncatedError(std::string("truncated payload reading ") + what);
    }
    uint16_t u16(const char* what) {
        need(2, what);
        uint16_t v = static_cast<uint16_t>(p[off] | (p[off + 1] << 8));
        off += 2;
        return v;
    }
    uint32_t u32(const char* what) {
        need(4, what);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p[off + i]) << (8 * i);
        off += 4;
        return v;
    }
    uint64_t u64(const char* what) {
        need(8, what);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[off + i]) << (8 * i);
        off += 8;
        return v;
    }
};

}  // namespace

void LabeledDataset::recount() {
    class_counts.assign(static_cast<size_t>(C), 0);
    for (int y : labels) {
        if (y < 0 || y >= C) throw BadFieldError("label " + std::to_string(y) + " outside [0,C)");
        ++class_counts[static_cast<size_t>(y)];
    }
}

void LabeledDataset::validate() const {
    if (C < 1) throw BadFieldError("dataset has no classes");
    if (static_cast<int64_t>(data.size()) != size() * sample_size())
        throw BadFieldError("data size does not match labels x sample shape");
    std::vector<int64_t> counts(static_cast<size_t>(C), 0);
    for (int y : labels) {
        if (y < 0 || y >= C) throw BadFieldError("label outside [0,C)");
        ++counts[static_cast<size_t>(y)];
    }
    if (counts != class_counts) throw BadFieldError("stored class counts disagree with labels");
    for (int64_t c : counts)
        if (c < 1) throw BadFieldError("empty class in dataset");
    for (double v : data)
        if (!(v >= 0.0 && v <= 1.0)) throw BadFieldError("sample value outside [0,1]");
}

Array LabeledDataset::batch(const std::vector<int64_t>& indices) const {
    Shape s;
    s.push_back(static_cast<int>(indices.size()));
    for (int d : sample_shape) s.push_back(d);
    Array out = Array::zeros(s);
    const int64_t ss = sample_size();
    for (size_t b = 0; b < indices.size(); ++b)
        std::copy_n(data.begin() + indices[b] * ss, ss,
                    out.v.begin() + static_cast<int64_t>(b) * ss);
    return out;
}

std::vector<int> LabeledDataset::batch_labels(const std::vector<int64_t>& indices) const {
    std::vector<int> out(indices.size());
    for (size_t b = 0; b < indices.size(); ++b) out[b] = labels[static_cast<size_t>(indices[b])];
    return out;
}

Array LabeledDataset::sample(int64_t index) const { return batch({index}); }

std::vector<int64_t> make_longtail_counts(const ImbalanceProfile& profile) {
    if (profile.C < 2) throw std::invalid_argument("imbalance profile needs C >= 2");
    if (profile.ir < 1.0) throw std::invalid_argument("imbalance ratio must be >= 1");
    if (profile.n_max < 1) throw std::invalid_argument("n_max must be >= 1");
    std::vector<int64_t> counts(static_cast<size_t>(profile.C));
    for (int i = 0; i < profile.C; ++i) {
        const double expo = -static_cast<double>(i) / (profile.C - 1);
        const double v = static_cast<double>(profile.n_max) * std::pow(profile.ir, expo);
        counts[static_cast<size_t>(i)] = std::llround(v);
        if (counts[static_cast<size_t>(i)] == 0)
            throw std::invalid_argument("class " + std::to_string(i) +
                                        " count rounds to zero; lower IR or raise n_max");
    }
    return counts;
}

LabeledDataset synth_gaussians(int C, int dim, double spread,
                               const std::vector<int64_t>& counts, uint64_t seed) {
    if (dim < 2) throw std::invalid_argument("synth_gaussians needs dim >= 2");
    if (spread < 0.0) throw std::invalid_argument("spread must be non-negative");
    if (static_cast<int>(counts.size()) != C)
        throw std::invalid_argument("counts length must equal C");
    LabeledDataset ds;
    ds.C = C;
    ds.sample_shape = {dim};
    int64_t total = 0;
    for (int64_t c : counts) total += c;
    ds.data.reserve(static_cast<size_t>(total * dim));
    ds.labels.reserve(static_cast<size_t>(total));

    // Fixed squashing window so independently synthesized train/test sets
    // share the same affine map.
    const double hi = 1.0 + 6.0 * spread;
    const double lo = -hi;
    const double inv_range = 1.0 / (hi - lo);

    Rng rng(derive_seed(seed, 0x53594e54ULL));  // "SYNT"
    for (int c = 0; c < C; ++c) {
        const double angle = kTwoPi * c / C;
        std::vector<double> mean(static_cast<size_t>(dim), 0.0);
        mean[0] = std::cos(angle);
        mean[1] = std::sin(angle);
        for (int64_t s = 0; s < counts[static_cast<size_t>(c)]; ++s) {
            for (int d = 0; d < dim; ++d) {
                double v = mean[static_cast<size_t>(d)] + spread * rng.normal();
                v = (v - lo) * inv_range;
                ds.data.push_back(std::min(1.0, std::max(0.0, v)));
            }
            ds.labels.push_back(c);
        }
    }
    ds.recount();
    return ds;
}

LabeledDataset make_small_balanced(const LabeledDataset& lt, const LabeledDataset& base,
                                   uint64_t seed) {
    if (base.C != lt.C) throw std::invalid_argument("class count mismatch between lt and base");
    if (base.sample_shape != lt.sample_shape)
        throw std::invalid_argument("sample shape mismatch between lt and base");
    const int64_t per = lt.size() / lt.C;
    for (int c = 0; c < base.C; ++c)
        if (base.class_counts[static_cast<size_t>(c)] < per)
            throw std::invalid_argument("base dataset has fewer than " + std::to_string(per) +
                                        " samples for class " + std::to_string(c));
    std::vector<std::vector<int64_t>> by_class(static_cast<size_t>(base.C));
    for (int64_t i = 0; i < base.size(); ++i)
        by_class[static_cast<size_t>(base.labels[static_cast<size_t>(i)])].push_back(i);

    LabeledDataset out;
    out.C = base.C;
    out.sample_shape = base.sample_shape;
    const int64_t ss = base.sample_size();
    Rng rng(derive_seed(seed, 0x534d4c42ULL));  // "SMLB"
    for (int c = 0; c < base.C; ++c) {
        auto& pool = by_class[static_cast<size_t>(c)];
        rng.shuffle(pool);
        for (int64_t s = 0; s < per; ++s) {
            const int64_t i = pool[static_cast<size_t>(s)];
            out.data.insert(out.data.end(), base.data.begin() + i * ss,
                            base.data.begin() + (i + 1) * ss);
            out.labels.push_back(c);
        }
    }
    out.recount();
    return out;
}

void save_binary(const LabeledDataset& ds, const std::string& path) {
    std::string buf;
    buf.append("RBLT");
    append_u32(buf, 1);
    append_u32(buf, static_cast<uint32_t>(ds.C));
    append_u64(buf, static_cast<uint64_t>(ds.size()));
    append_u32(buf, static_cast<uint32_t>(ds.sample_shape.size()));
    for (int d : ds.sample_shape) append_u32(buf, static_cast<uint32_t>(d));
    const int64_t ss = ds.sample_size();
    for (int64_t i = 0; i < ds.size(); ++i) {
        append_u16(buf, static_cast<uint16_t>(ds.labels[static_cast<size_t>(i)]));
        for (int64_t j = 0; j < ss; ++j) {
            const double v = ds.data[static_cast<size_t>(i * ss + j)];
            const long q = std::lround(std::min(1.0, std::max(0.0, v)) * 255.0);
            buf.push_back(static_cast<char>(static_cast<uint8_t>(q)));
        }
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open " + path + " for writing");
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!f) throw IoError("write failed for " + path);
}

LabeledDataset load_binary(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    Cursor cur{reinterpret_cast<const uint8_t*>(buf.data()), buf.size()};

    if (buf.size() < 4 || std::memcmp(buf.data(), "RBLT", 4) != 0)
        throw BadMagicError("bad magic in " + path);
    cur.off = 4;
    const uint32_t version = cur.u32("version");
    if (version != 1) throw BadVersionError("unsupported RBLT version " + std::to_string(version));
    const uint32_t C = cur.u32("class count");
    if (C < 1) throw BadFieldError("RBLT class count must be >= 1");
    const uint64_t count = cur.u64("sample count");
    const uint32_t rank = cur.u32("rank");
    Shape shape;
    for (uint32_t i = 0; i < rank; ++i) {
        const uint32_t e = cur.u32("extent");
        if (e == 0) throw BadFieldError("zero extent in RBLT shape");
        shape.push_back(static_cast<int>(e));
    }
    LabeledDataset ds;
    ds.C = static_cast<int>(C);
    ds.sample_shape = shape;
    const int64_t ss = numel(shape);
    ds.data.reserve(static_cast<size_t>(count) * static_cast<size_t>(ss));
    ds.labels.reserve(static_cast<size_t>(count));
    for (uint64_t i = 0; i < count; ++i) {
        const uint16_t label = cur.u16("label");
        if (label >= C)
            throw BadFieldError("label " + std::to_string(label) + " >= C for sample " +
                                std::to_string(i));
        cur.need(static_cast<size_t>(ss), "pixels");
        for (int64_t j = 0; j < ss; ++j)
            ds.data.push_back(cur.p[cur.off + static_cast<size_t>(j)] / 255.0);
        cur.off += static_cast<size_t>(ss);
        ds.labels.push_back(static_cast<int>(label));
    }
    ds.recount();
    return ds;
}

ClassAwareSampler::ClassAwareSampler(const LabeledDataset& ds, uint64_t seed)
    : rng_(derive_seed(seed, 0x43415341ULL)) {  // "CASA"
    by_class_.assign(static_cast<size_t>(ds.C), {});
    for (int64_t i = 0; i < ds.size(); ++i)
        by_class_[static_cast<size_t>(ds.labels[static_cast<size_t>(i)])].push_back(i);
}

std::vector<int64_t> ClassAwareSampler::next(int batch) {
    std::vector<int64_t> out(static_cast<size_t>(batch));
    const int64_t C = static_cast<int64_t>(by_class_.size());
    for (int b = 0; b < batch; ++b) {
        const auto& pool = by_class_[static_cast<size_t>(rng_.index(C))];
        out[static_cast<size_t>(b)] = pool[static_cast<size_t>(rng_.index(
            static_cast<int64_t>(pool.size())))];
    }
    return out;
}

}  // namespace robal
