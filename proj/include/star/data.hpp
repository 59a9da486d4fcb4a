#pragma once

// Video/text containers, the synthetic sparse-motif generator and episode
// sampling.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "star/errors.hpp"
#include "star/tensor.hpp"

namespace star {

struct Video {
    std::uint32_t video_id = 0;
    std::uint32_t class_id = 0;
    Tensor frames;  // [F x D]
};

struct TextEntry {
    std::uint32_t class_id = 0;
    std::string name;
    std::string descriptor;
    Tensor embedding;  // [D]
};

struct TextBank {
    std::string source = "descriptor";
    std::vector<TextEntry> entries;

    const TextEntry& find(std::uint32_t class_id) const {
        for (const auto& e : entries)
            if (e.class_id == class_id) return e;
        throw InconsistencyError("no text entry for class " + std::to_string(class_id));
    }
};

struct Dataset {
    std::size_t frames = 0;
    std::size_t dim = 0;
    std::vector<Video> videos;
    TextBank text;

    // Sorted, unique.
    std::vector<std::uint32_t> class_ids() const {
        std::vector<std::uint32_t> ids;
        for (const auto& e : text.entries) ids.push_back(e.class_id);
        std::sort(ids.begin(), ids.end());
        return ids;
    }

    std::map<std::uint32_t, std::vector<std::size_t>> videos_by_class() const {
        std::map<std::uint32_t, std::vector<std::size_t>> out;
        for (const auto& id : class_ids()) out[id];
        for (std::size_t i = 0; i < videos.size(); ++i) out[videos[i].class_id].push_back(i);
        return out;
    }

    void validate() const {
        if (frames == 0 || dim == 0) throw ConfigError("dataset has zero frames or dimensions");
        std::vector<std::uint32_t> ids = class_ids();
        if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) throw InconsistencyError("duplicate class id in text bank");
        for (const auto& e : text.entries) {
            if (e.embedding.size() != dim)
                throw DimensionError("text embedding for class " + std::to_string(e.class_id) + " has " +
                                     std::to_string(e.embedding.size()) + " values, expected " + std::to_string(dim));
            if (!e.embedding.all_finite()) throw NumericError("non-finite text embedding for class " + std::to_string(e.class_id));
        }
        for (const auto& v : videos) {
            if (v.frames.shape() != Shape{frames, dim})
                throw DimensionError("video " + std::to_string(v.video_id) + " has shape " + shape_string(v.frames.shape()) +
                                     ", expected " + shape_string({frames, dim}));
            if (!std::binary_search(ids.begin(), ids.end(), v.class_id))
                throw InconsistencyError("video " + std::to_string(v.video_id) + " refers to unknown class " +
                                         std::to_string(v.class_id));
        }
    }
};

// Splits by class: the first `train_classes` ids (ascending) go to the
// first dataset, the rest to the second.
inline std::pair<Dataset, Dataset> split_by_class(const Dataset& d, std::size_t train_classes) {
    const auto ids = d.class_ids();
    if (train_classes == 0 || train_classes >= ids.size())
        throw ConfigError("train_classes must lie in [1, " + std::to_string(ids.size()) + ")");
    Dataset a, b;
    a.frames = b.frames = d.frames;
    a.dim = b.dim = d.dim;
    a.text.source = b.text.source = d.text.source;
    auto in_train = [&](std::uint32_t id) {
        return std::find(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(train_classes), id) !=
               ids.begin() + static_cast<std::ptrdiff_t>(train_classes);
    };
    for (const auto& e : d.text.entries) (in_train(e.class_id) ? a : b).text.entries.push_back(e);
    for (const auto& v : d.videos) (in_train(v.class_id) ? a : b).videos.push_back(v);
    return {std::move(a), std::move(b)};
}

// Class embedding used when descriptors are replaced by a generic template:
// a fixed pseudo-random unit vector per class, unrelated to the video content.
inline Tensor template_embedding(std::uint32_t class_id, std::size_t dim) {
    std::mt19937_64 rng(0x51ab1e5eedULL ^ (static_cast<std::uint64_t>(class_id) * 0x9e3779b97f4a7c15ULL));
    std::normal_distribution<double> g(0.0, 1.0);
    Tensor t({dim});
    double norm = 0.0;
    for (auto& v : t.storage()) {
        v = g(rng);
        norm += v * v;
    }
    for (auto& v : t.storage()) v /= std::sqrt(norm);
    return t;
}

// ---------------------------------------------------------------------------
// Synthetic sparse-motif videos

struct SyntheticSpec {
    std::size_t num_classes = 30;
    std::size_t videos_per_class = 20;
    std::size_t frames = 8;
    std::size_t dim = 64;
    std::size_t motif_len = 2;
    double noise_sigma = 0.1;
    double drift_amplitude = 0.5;
    std::size_t drift_rank = 4;
    double background_amplitude = 1.0;
    double motif_amplitude = 1.0;

    void validate() const {
        if (drift_rank < 1) throw ConfigError("synthetic: drift_rank must be >= 1");
        if (num_classes < 2) throw ConfigError("synthetic: num_classes must be >= 2");
        if (videos_per_class < 1) throw ConfigError("synthetic: videos_per_class must be >= 1");
        if (frames < 2 || dim < 2) throw ConfigError("synthetic: frames and dim must be >= 2");
        if (motif_len < 1 || motif_len >= frames)
            throw ConfigError("synthetic: motif_len " + std::to_string(motif_len) + " must lie in [1, frames=" +
                              std::to_string(frames) + ")");
        if (!(noise_sigma >= 0.0) || !(drift_amplitude >= 0.0) || !(background_amplitude >= 0.0) || !(motif_amplitude > 0.0))
            throw ConfigError("synthetic: amplitudes must be non-negative and motif_amplitude positive");
    }
};

struct SyntheticWorld {
    Tensor background;            // [F x D], shared by every video
    Tensor background_basis;      // [4 x D], spans every background frame
    Tensor drift_basis;           // [r x D], per-video drift stays in this span
    std::vector<Tensor> motifs;   // per class, [m x D]
    std::vector<std::size_t> phases;
};

// Additive components of one synthetic video; frames = sum of the four.
struct SyntheticParts {
    Tensor background, drift, motif, noise;

    Tensor frames() const {
        Tensor out = background;
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += drift[i] + motif[i] + noise[i];
        return out;
    }
};

struct SyntheticData {
    Dataset dataset;
    SyntheticWorld world;
    std::vector<SyntheticParts> parts;  // aligned with dataset.videos
};

namespace detail {

template <class Rng>
Tensor gaussian_rows(std::size_t rows, std::size_t dim, double stddev, Rng& rng) {
    std::normal_distribution<double> g(0.0, stddev);
    Tensor t({rows, dim});
    for (auto& v : t.storage()) v = g(rng);
    return t;
}

} // namespace detail

template <class Rng>
SyntheticWorld make_synthetic_world(const SyntheticSpec& spec, Rng& rng) {
    spec.validate();
    const std::size_t f = spec.frames, d = spec.dim;
    SyntheticWorld w;
    // Two slow harmonics over the clip.
    Tensor basis = detail::gaussian_rows(4, d, spec.background_amplitude, rng);
    w.background_basis = basis;
    w.background = Tensor({f, d}, 0.0);
    for (std::size_t t = 0; t < f; ++t) {
        const double s = std::numbers::pi * static_cast<double>(t) / static_cast<double>(f - 1);
        const double coef[4] = {std::cos(s), std::sin(s), std::cos(2 * s) * 0.5, std::sin(2 * s) * 0.5};
        for (std::size_t k = 0; k < 4; ++k)
            for (std::size_t j = 0; j < d; ++j) w.background(t, j) += coef[k] * basis(k, j);
    }
    w.drift_basis = detail::gaussian_rows(spec.drift_rank, d, 1.0, rng);
    std::uniform_int_distribution<std::size_t> phase(0, f - spec.motif_len);
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
        w.motifs.push_back(detail::gaussian_rows(spec.motif_len, d, spec.motif_amplitude, rng));
        w.phases.push_back(phase(rng));
    }
    return w;
}

template <class Rng>
SyntheticParts make_synthetic_video(const SyntheticSpec& spec, const SyntheticWorld& w, std::size_t cls, Rng& rng) {
    const std::size_t f = spec.frames, d = spec.dim;
    SyntheticParts p;
    p.background = w.background;

    // Per-video offset plus a linear ramp, both inside the shared drift span.
    std::normal_distribution<double> coef(0.0, spec.drift_amplitude);
    p.drift = Tensor({f, d}, 0.0);
    for (std::size_t k = 0; k < w.drift_basis.rows(); ++k) {
        const double offset = coef(rng), slope = coef(rng);
        for (std::size_t t = 0; t < f; ++t) {
            const double ramp = static_cast<double>(t) / static_cast<double>(f - 1) - 0.5;
            for (std::size_t j = 0; j < d; ++j) p.drift(t, j) += (offset + ramp * slope) * w.drift_basis(k, j);
        }
    }

    p.motif = Tensor({f, d}, 0.0);
    const Tensor& m = w.motifs.at(cls);
    for (std::size_t k = 0; k < spec.motif_len; ++k)
        for (std::size_t j = 0; j < d; ++j) p.motif(w.phases[cls] + k, j) = m(k, j);

    p.noise = Tensor({f, d}, 0.0);
    if (spec.noise_sigma > 0.0) {
        std::normal_distribution<double> g(0.0, spec.noise_sigma);
        for (auto& v : p.noise.storage()) v = g(rng);
    }
    return p;
}

inline SyntheticData generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
    spec.validate();
    std::mt19937_64 rng(seed);
    SyntheticData out;
    out.world = make_synthetic_world(spec, rng);
    Dataset& ds = out.dataset;
    ds.frames = spec.frames;
    ds.dim = spec.dim;
    ds.text.source = "descriptor";
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
        TextEntry e;
        e.class_id = static_cast<std::uint32_t>(c);
        e.name = "class_" + std::to_string(c);
        const std::size_t p = out.world.phases[c];
        e.descriptor = "decisive motion of " + e.name + " in frames " + std::to_string(p) + "-" +
                       std::to_string(p + spec.motif_len - 1) + " over a steady background";
        e.embedding = Tensor({spec.dim}, 0.0);
        for (std::size_t k = 0; k < spec.motif_len; ++k)
            for (std::size_t j = 0; j < spec.dim; ++j)
                e.embedding[j] += out.world.motifs[c](k, j) / static_cast<double>(spec.motif_len);
        ds.text.entries.push_back(std::move(e));
    }
    std::uint32_t vid = 0;
    for (std::size_t c = 0; c < spec.num_classes; ++c)
        for (std::size_t v = 0; v < spec.videos_per_class; ++v) {
            SyntheticParts parts = make_synthetic_video(spec, out.world, c, rng);
            ds.videos.push_back({vid++, static_cast<std::uint32_t>(c), parts.frames()});
            out.parts.push_back(std::move(parts));
        }
    return out;
}

// ---------------------------------------------------------------------------
// Episodes

struct EpisodeItem {
    std::uint32_t video_id = 0;
    std::size_t label = 0;  // index into Episode::classes
    Tensor frames;
};

struct Episode {
    std::size_t way = 0;
    std::size_t shot = 0;
    std::vector<std::uint32_t> classes;
    std::vector<EpisodeItem> support;  // class-major, `shot` entries per class
    std::vector<EpisodeItem> queries;
    std::vector<TextEntry> descriptors;  // aligned with `classes`

    std::vector<std::size_t> query_labels() const {
        std::vector<std::size_t> out;
        for (const auto& q : queries) out.push_back(q.label);
        return out;
    }
};

// Queries are assigned round-robin over the sampled classes: query i belongs
// to class i mod N.
template <class Rng>
Episode sample_episode(const Dataset& d, std::size_t way, std::size_t shot, std::size_t queries, Rng& rng) {
    if (way < 1 || shot < 1 || queries < 1) throw ConfigError("episode needs way, shot and queries >= 1");
    const auto by_class = d.videos_by_class();
    if (by_class.size() < way)
        throw CapacityError("dataset has " + std::to_string(by_class.size()) + " classes, " + std::to_string(way) +
                            "-way episodes need more");
    const std::size_t per_class_queries = (queries + way - 1) / way;
    for (const auto& [cls, vids] : by_class)
        if (vids.size() < shot + per_class_queries)
            throw CapacityError("class " + std::to_string(cls) + " has " + std::to_string(vids.size()) + " videos, needs " +
                                std::to_string(shot + per_class_queries));

    std::vector<std::uint32_t> ids;
    for (const auto& kv : by_class) ids.push_back(kv.first);
    // Partial Fisher-Yates with explicit draws keeps the stream portable.
    auto draw = [&rng](std::size_t hi) { return std::uniform_int_distribution<std::size_t>(0, hi)(rng); };
    for (std::size_t i = 0; i < way; ++i) std::swap(ids[i], ids[i + draw(ids.size() - 1 - i)]);

    Episode ep;
    ep.way = way;
    ep.shot = shot;
    ep.classes.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(way));
    std::vector<std::vector<std::size_t>> picked(way);
    for (std::size_t c = 0; c < way; ++c) {
        std::vector<std::size_t> pool = by_class.at(ep.classes[c]);
        std::size_t need = shot;
        for (std::size_t q = c; q < queries; q += way) ++need;
        for (std::size_t i = 0; i < need; ++i) std::swap(pool[i], pool[i + draw(pool.size() - 1 - i)]);
        pool.resize(need);
        picked[c] = std::move(pool);
        ep.descriptors.push_back(d.text.find(ep.classes[c]));
    }
    for (std::size_t c = 0; c < way; ++c)
        for (std::size_t k = 0; k < shot; ++k) {
            const Video& v = d.videos[picked[c][k]];
            ep.support.push_back({v.video_id, c, v.frames});
        }
    std::vector<std::size_t> next(way, shot);
    for (std::size_t q = 0; q < queries; ++q) {
        const std::size_t c = q % way;
        const Video& v = d.videos[picked[c][next[c]++]];
        ep.queries.push_back({v.video_id, c, v.frames});
    }
    return ep;
}

} // namespace star
