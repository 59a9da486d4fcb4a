#pragma once

// Binary interchange formats: STARFT01 feature files and STARCK01 model
// checkpoints. All integers and floats are little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "star/data.hpp"
#include "star/errors.hpp"
#include "star/tensor.hpp"

namespace star {

inline constexpr char kFeatureMagic[8] = {'S', 'T', 'A', 'R', 'F', 'T', '0', '1'};
inline constexpr char kCheckpointMagic[8] = {'S', 'T', 'A', 'R', 'C', 'K', '0', '1'};
inline constexpr std::uint32_t kFeatureVersion = 1;
inline constexpr std::uint32_t kCheckpointVersion = 1;

class ByteWriter {
public:
    void raw(const void* p, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        buf_.insert(buf_.end(), b, b + n);
    }
    void u32(std::uint32_t v) { little(v); }
    void u64(std::uint64_t v) { little(v); }
    void f32(float v) { little(std::bit_cast<std::uint32_t>(v)); }
    void f64(double v) { little(std::bit_cast<std::uint64_t>(v)); }
    void str(const std::string& s) {
        u32(checked_u32(s.size(), "string length"));
        raw(s.data(), s.size());
    }
    const std::vector<unsigned char>& bytes() const { return buf_; }

    static std::uint32_t checked_u32(std::size_t v, const char* what) {
        if (v > 0xffffffffULL) throw FormatError(std::string(what) + " does not fit in 32 bits");
        return static_cast<std::uint32_t>(v);
    }

private:
    template <class U>
    void little(U v) {
        for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
    }
    std::vector<unsigned char> buf_;
};

class ByteReader {
public:
    explicit ByteReader(std::vector<unsigned char> bytes) : buf_(std::move(bytes)) {}

    void raw(void* out, std::size_t n, const char* what) {
        need(n, what);
        std::memcpy(out, buf_.data() + pos_, n);
        pos_ += n;
    }
    std::uint32_t u32(const char* what) { return little<std::uint32_t>(what); }
    std::uint64_t u64(const char* what) { return little<std::uint64_t>(what); }
    float f32(const char* what) { return std::bit_cast<float>(little<std::uint32_t>(what)); }
    double f64(const char* what) { return std::bit_cast<double>(little<std::uint64_t>(what)); }
    std::string str(const char* what) {
        const std::uint32_t n = u32(what);
        need(n, what);
        std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    bool at_end() const { return pos_ == buf_.size(); }
    std::size_t remaining() const { return buf_.size() - pos_; }

private:
    void need(std::size_t n, const char* what) {
        if (buf_.size() - pos_ < n)
            throw FormatError(std::string("truncated file while reading ") + what + " at byte " + std::to_string(pos_));
    }
    template <class U>
    U little(const char* what) {
        need(sizeof(U), what);
        U v = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf_[pos_ + i]) << (8 * i);
        pos_ += sizeof(U);
        return v;
    }
    std::vector<unsigned char> buf_;
    std::size_t pos_ = 0;
};

inline std::vector<unsigned char> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, const std::vector<unsigned char>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("write failed for " + path);
}

// ---------------------------------------------------------------------------
// Feature files

inline std::vector<unsigned char> encode_features(const Dataset& d) {
    d.validate();
    ByteWriter w;
    w.raw(kFeatureMagic, 8);
    w.u32(kFeatureVersion);
    w.u32(ByteWriter::checked_u32(d.videos.size(), "video count"));
    w.u32(ByteWriter::checked_u32(d.frames, "frame count"));
    w.u32(ByteWriter::checked_u32(d.dim, "feature dim"));
    w.u32(ByteWriter::checked_u32(d.text.entries.size(), "class count"));
    for (const auto& e : d.text.entries) {
        w.u32(e.class_id);
        w.str(e.name);
        w.str(e.descriptor);
        for (double v : e.embedding.storage()) w.f32(static_cast<float>(v));
    }
    for (const auto& v : d.videos) {
        w.u32(v.video_id);
        w.u32(v.class_id);
        for (double x : v.frames.storage()) w.f32(static_cast<float>(x));
    }
    return w.bytes();
}

inline Dataset decode_features(std::vector<unsigned char> bytes) {
    ByteReader r(std::move(bytes));
    char magic[8];
    r.raw(magic, 8, "magic");
    if (std::memcmp(magic, kFeatureMagic, 8) != 0) throw FormatError("not a STARFT01 feature file (bad magic)");
    const std::uint32_t version = r.u32("version");
    if (version != kFeatureVersion) throw FormatError("unsupported feature file version " + std::to_string(version));
    const std::uint32_t num_videos = r.u32("num_videos");
    Dataset d;
    d.frames = r.u32("F");
    d.dim = r.u32("D");
    const std::uint32_t num_classes = r.u32("num_classes");
    if (d.frames == 0 || d.dim == 0) throw FormatError("feature file declares zero frames or dimensions");
    // Reject counts the remaining bytes cannot hold before allocating.
    const std::size_t video_bytes = 8 + 4 * d.frames * d.dim;
    if (num_videos > r.remaining() / video_bytes) throw FormatError("video count exceeds file size");
    if (num_classes > r.remaining() / (12 + 4 * d.dim)) throw FormatError("class count exceeds file size");

    std::set<std::uint32_t> ids;
    for (std::uint32_t c = 0; c < num_classes; ++c) {
        TextEntry e;
        e.class_id = r.u32("class_id");
        if (!ids.insert(e.class_id).second) throw FormatError("duplicate class id " + std::to_string(e.class_id));
        e.name = r.str("class name");
        e.descriptor = r.str("descriptor");
        e.embedding = Tensor({d.dim});
        for (auto& v : e.embedding.storage()) v = r.f32("text embedding");
        d.text.entries.push_back(std::move(e));
    }
    for (std::uint32_t i = 0; i < num_videos; ++i) {
        Video v;
        v.video_id = r.u32("video_id");
        v.class_id = r.u32("video class_id");
        if (!ids.count(v.class_id))
            throw FormatError("video " + std::to_string(v.video_id) + " refers to unknown class " + std::to_string(v.class_id));
        v.frames = Tensor({d.frames, d.dim});
        for (auto& x : v.frames.storage()) x = r.f32("frame features");
        d.videos.push_back(std::move(v));
    }
    if (!r.at_end()) throw FormatError(std::to_string(r.remaining()) + " trailing bytes after feature data");
    return d;
}

inline void save_features(const std::string& path, const Dataset& d) { write_file(path, encode_features(d)); }
inline Dataset load_features(const std::string& path) { return decode_features(read_file(path)); }

// ---------------------------------------------------------------------------
// Checkpoints

struct Checkpoint {
    std::uint64_t step = 0;
    std::string config_json;
    std::vector<std::pair<std::string, Tensor>> tensors;
};

inline std::vector<unsigned char> encode_checkpoint(const Checkpoint& ck) {
    ByteWriter w;
    w.raw(kCheckpointMagic, 8);
    w.u32(kCheckpointVersion);
    w.u64(ck.step);
    w.str(ck.config_json);
    w.u32(ByteWriter::checked_u32(ck.tensors.size(), "tensor count"));
    for (const auto& [name, t] : ck.tensors) {
        w.str(name);
        w.u32(static_cast<std::uint32_t>(t.rank()));
        for (std::size_t e : t.shape()) w.u32(ByteWriter::checked_u32(e, "extent"));
        for (double v : t.storage()) w.f64(v);
    }
    return w.bytes();
}

inline Checkpoint decode_checkpoint(std::vector<unsigned char> bytes) {
    ByteReader r(std::move(bytes));
    char magic[8];
    r.raw(magic, 8, "magic");
    if (std::memcmp(magic, kCheckpointMagic, 8) != 0) throw FormatError("not a STARCK01 checkpoint (bad magic)");
    const std::uint32_t version = r.u32("version");
    if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
    Checkpoint ck;
    ck.step = r.u64("step");
    ck.config_json = r.str("config");
    const std::uint32_t n = r.u32("tensor count");
    std::set<std::string> names;
    for (std::uint32_t i = 0; i < n; ++i) {
        std::string name = r.str("tensor name");
        if (!names.insert(name).second) throw FormatError("duplicate tensor " + name);
        const std::uint32_t rank = r.u32("rank");
        if (rank < 1 || rank > 3) throw FormatError("tensor " + name + " has unsupported rank " + std::to_string(rank));
        Shape shape;
        std::size_t numel = 1;
        for (std::uint32_t k = 0; k < rank; ++k) {
            shape.push_back(r.u32("extent"));
            if (shape.back() == 0) throw FormatError("tensor " + name + " has a zero extent");
            numel *= shape.back();
            if (numel > r.remaining() / 8) throw FormatError("tensor " + name + " exceeds file size");
        }
        Tensor t(shape);
        for (auto& v : t.storage()) v = r.f64("tensor data");
        ck.tensors.emplace_back(std::move(name), std::move(t));
    }
    if (!r.at_end()) throw FormatError("trailing bytes after checkpoint data");
    return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) { write_file(path, encode_checkpoint(ck)); }
inline Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(read_file(path)); }

inline Checkpoint make_checkpoint(const std::vector<Parameter>& params, std::uint64_t step, std::string config_json) {
    Checkpoint ck;
    ck.step = step;
    ck.config_json = std::move(config_json);
    for (const auto& p : params) ck.tensors.emplace_back(p.name, p.var.value());
    return ck;
}

// Copies checkpoint tensors into `params`; names must match one to one.
inline void restore_parameters(const std::vector<Parameter>& params, const Checkpoint& ck) {
    if (ck.tensors.size() != params.size())
        throw DimensionError("checkpoint holds " + std::to_string(ck.tensors.size()) + " tensors, model has " +
                             std::to_string(params.size()) + " parameters");
    for (const auto& p : params) {
        const Tensor* src = nullptr;
        for (const auto& [name, t] : ck.tensors)
            if (name == p.name) src = &t;
        if (!src) throw DimensionError("checkpoint has no tensor named " + p.name);
        if (src->shape() != p.var.shape())
            throw DimensionError("checkpoint tensor " + p.name + " has shape " + shape_string(src->shape()) +
                                 ", model expects " + shape_string(p.var.shape()));
        Var v = p.var;
        v.mutable_value() = *src;
    }
}

} // namespace star
