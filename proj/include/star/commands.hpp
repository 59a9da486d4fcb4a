#pragma once

// Subcommand bodies behind the command-line tool: data loading, training
// with checkpoints, evaluation reports, ablation grids and the frame-length
// scaling benchmark.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "star/checks.hpp"
#include "star/config.hpp"
#include "star/io.hpp"

namespace star {

// Calibrated synthetic benchmark: raw nearest-prototype OTAM scores about
// 44% in 5-way 1-shot, and training runs in a few minutes on one core.
inline RunConfig benchmark_config() {
    RunConfig c;
    auto& sp = c.data.synthetic;
    sp.num_classes = 200;
    sp.videos_per_class = 20;
    sp.noise_sigma = 0.8;
    sp.drift_amplitude = 0.4;
    c.data.train_classes = 180;
    c.train.episodes_per_epoch = 800;
    c.train.lr = 1e-3;
    c.train.episode.alpha = 20.0;
    c.protocol.tasks = 1000;
    return c;
}

struct DataSplit {
    Dataset full, train, test;
};

inline DataSplit load_data(const RunConfig& c) {
    DataSplit s;
    if (c.data.source == "file") {
        s.full = load_features(c.data.path);
    } else {
        s.full = generate_synthetic(c.data.synthetic, c.data.seed).dataset;
    }
    s.full.validate();
    if (s.full.dim != c.model.dim())
        throw DimensionError("feature dim " + std::to_string(s.full.dim) + " differs from model dim " +
                             std::to_string(c.model.dim()));
    auto [tr, te] = split_by_class(s.full, c.data.train_classes);
    s.train = std::move(tr);
    s.test = std::move(te);
    return s;
}

inline StarModel fresh_model(const RunConfig& c, std::size_t frames) { return init_model(c.model, frames, c.init_seed); }

inline StarModel model_from_checkpoint(const RunConfig& c, std::size_t frames, const Checkpoint& ck) {
    StarModel m = fresh_model(c, frames);
    restore_parameters(m.parameters(), ck);
    return m;
}

// ---------------------------------------------------------------------------
// Loss curves

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline const char* kLossHeader = "episode,lr,loss,vt_loss,ce_loss";

inline void write_loss_csv(const std::string& path, const std::vector<LossRecord>& log) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw FormatError("cannot write " + path);
    out << kLossHeader << "\n";
    for (const auto& r : log)
        out << r.episode << "," << format_double(r.lr) << "," << format_double(r.loss) << "," << format_double(r.vt_loss) << ","
            << format_double(r.ce_loss) << "\n";
}

inline std::vector<std::vector<std::string>> read_csv(const std::string& path, const std::string& header) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open " + path);
    std::string line;
    if (!std::getline(in, line) || line != header) throw FormatError(path + ": unexpected CSV header");
    std::vector<std::vector<std::string>> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (!line.empty() && line.back() == ',') cells.emplace_back();
        rows.push_back(std::move(cells));
    }
    return rows;
}

inline double parse_double(const std::string& s) {
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size()) throw FormatError("bad number '" + s + "'");
        return v;
    } catch (const std::logic_error&) {
        throw FormatError("bad number '" + s + "'");
    }
}

inline std::vector<LossRecord> read_loss_csv(const std::string& path) {
    std::vector<LossRecord> log;
    for (const auto& row : read_csv(path, kLossHeader)) {
        if (row.size() != 5) throw FormatError(path + ": loss row needs 5 cells");
        log.push_back({static_cast<std::size_t>(parse_double(row[0])), parse_double(row[1]), parse_double(row[2]),
                       parse_double(row[3]), parse_double(row[4])});
    }
    return log;
}

// ---------------------------------------------------------------------------
// Train and eval

struct TrainOutcome {
    StarModel model;
    std::vector<LossRecord> log;
    Checkpoint checkpoint;
};

inline TrainOutcome train_model(const RunConfig& c, const Dataset& train_set) {
    TrainOutcome o{fresh_model(c, train_set.frames), {}, {}};
    o.log = train(o.model, train_set, c.train);
    o.checkpoint = make_checkpoint(o.model.parameters(), c.train.total_episodes(), to_json(c).dump());
    return o;
}

inline EvalReport evaluate_model(const StarModel& m, const RunConfig& c, const Dataset& test_set) {
    const auto& p = c.protocol;
    return evaluate(model_scorer(m, c.train.episode), test_set, p.way, p.shot, p.queries, p.tasks, p.seed, p.threads);
}

inline Json module_json(const ModuleToggles& t) {
    return {{"tcr", t.tcr}, {"tsa", t.tsa}, {"stpr", t.stpr}, {"sgf", t.sgf}, {"asd", t.asd}, {"acu", t.acu}};
}

// Report plus the settings needed to reproduce it.
inline Json report_json(const EvalReport& r, const RunConfig& c, const std::string& checkpoint) {
    Json j = to_json(r);
    j["metric"] = metric_name(c.metric());
    j["way"] = c.protocol.way;
    j["shot"] = c.protocol.shot;
    j["queries"] = c.protocol.queries;
    j["seed"] = c.protocol.seed;
    j["strides"] = c.model.stpr.strides;
    j["modules"] = module_json(c.model.modules);
    j["checkpoint"] = checkpoint.empty() ? Json(nullptr) : Json(checkpoint);
    return j;
}

inline void write_json(const std::string& path, const Json& j) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw FormatError("cannot write " + path);
    out << j.dump(2) << "\n";
}

inline Json read_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open " + path);
    try {
        return Json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(path + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Ablation grids

struct GridCell {
    std::string name;
    Json patch;  // merged over the base config
};

inline std::string stride_label(const std::vector<std::size_t>& w) {
    std::string s = "W=";
    for (std::size_t i = 0; i < w.size(); ++i) s += (i ? "+" : "") + std::to_string(w[i]);
    return s;
}

// "strides": the seven non-empty subsets of {1,2,4}.
// "modules": every on/off combination of tcr, tsa and stpr.
// "stpr": the refiner with each of sgf, asd and acu switched off in turn.
inline std::vector<GridCell> named_grid(const std::string& name) {
    std::vector<GridCell> g;
    if (name == "strides") {
        for (const auto& w : std::vector<std::vector<std::size_t>>{{1}, {2}, {4}, {1, 2}, {1, 4}, {2, 4}, {1, 2, 4}}) {
            Json patch;
            patch["model"]["strides"] = w;
            g.push_back({stride_label(w), patch});
        }
    } else if (name == "modules") {
        for (int mask = 0; mask < 8; ++mask) {
            const bool tcr = mask & 1, tsa = mask & 2, stpr = mask & 4;
            std::string label = mask == 0 ? "baseline" : "";
            for (auto [on, tag] : {std::pair{tcr, "tcr"}, {tsa, "tsa"}, {stpr, "stpr"}})
                if (on) label += (label.empty() ? "" : "+") + std::string(tag);
            Json patch;
            patch["modules"] = Json{{"tcr", tcr}, {"tsa", tsa}, {"stpr", stpr}};
            g.push_back({label, patch});
        }
    } else if (name == "stpr") {
        Json full;
        full["modules"] = Json{{"sgf", true}, {"asd", true}, {"acu", true}};
        g.push_back({"stpr-full", full});
        for (const char* off : {"sgf", "asd", "acu"}) {
            Json patch = full;
            patch["modules"][off] = false;
            g.push_back({std::string("no-") + off, patch});
        }
    } else {
        throw ConfigError("unknown grid '" + name + "' (expected strides, modules or stpr)");
    }
    return g;
}

// A JSON array of {"name": ..., "patch": {...}} objects.
inline std::vector<GridCell> grid_from_json(const Json& j) {
    if (!j.is_array() || j.empty()) throw ConfigError("grid file must hold a non-empty JSON array");
    std::vector<GridCell> g;
    for (const auto& cell : j) {
        detail::reject_unknown(cell, {"name", "patch"}, "grid cell");
        if (!cell.contains("name") || !cell["name"].is_string()) throw ConfigError("every grid cell needs a string name");
        g.push_back({cell["name"].get<std::string>(), cell.value("patch", Json::object())});
    }
    return g;
}

struct AblationRow {
    std::string name;
    RunConfig config;
    EvalReport report;
};

inline RunConfig apply_patch(const RunConfig& base, const Json& patch) {
    Json j = to_json(base);
    j.merge_patch(patch);
    return parse_run_config(j);
}

// Trains (unless `train_first` is false) and evaluates every cell in order.
inline std::vector<AblationRow> run_ablation(const RunConfig& base, const std::vector<GridCell>& grid, bool train_first,
                                             const std::function<void(const AblationRow&)>& on_row = {}) {
    std::vector<RunConfig> configs;
    for (const auto& cell : grid) configs.push_back(apply_patch(base, cell.patch));
    std::map<std::string, DataSplit> cache;
    std::vector<AblationRow> rows;
    for (std::size_t i = 0; i < grid.size(); ++i) {
        const RunConfig& c = configs[i];
        const std::string key = to_json(c)["data"].dump();
        if (!cache.count(key)) cache.emplace(key, load_data(c));
        const DataSplit& d = cache.at(key);
        StarModel m = train_first ? train_model(c, d.train).model : fresh_model(c, d.full.frames);
        rows.push_back({grid[i].name, c, evaluate_model(m, c, d.test)});
        if (on_row) on_row(rows.back());
    }
    return rows;
}

inline const char* kAblationHeader = "name,strides,tcr,tsa,stpr,sgf,asd,acu,metric,tasks,accuracy,ci95_half_width";

inline void write_ablation_csv(const std::string& path, const std::vector<AblationRow>& rows) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw FormatError("cannot write " + path);
    out << kAblationHeader << "\n";
    for (const auto& r : rows) {
        const auto& t = r.config.model.modules;
        std::string strides;
        for (std::size_t i = 0; i < r.config.model.stpr.strides.size(); ++i)
            strides += (i ? " " : "") + std::to_string(r.config.model.stpr.strides[i]);
        out << r.name << "," << strides << "," << t.tcr << "," << t.tsa << "," << t.stpr << "," << t.sgf << "," << t.asd << ","
            << t.acu << "," << metric_name(r.config.metric()) << "," << r.report.tasks << "," << format_double(r.report.accuracy)
            << "," << (r.report.half_width ? format_double(*r.report.half_width) : "") << "\n";
    }
}

struct AblationCsvRow {
    std::string name, strides, metric;
    std::size_t tasks = 0;
    double accuracy = 0.0;
    std::optional<double> half_width;
};

inline std::vector<AblationCsvRow> read_ablation_csv(const std::string& path) {
    std::vector<AblationCsvRow> out;
    for (const auto& row : read_csv(path, kAblationHeader)) {
        if (row.size() != 12) throw FormatError(path + ": ablation row needs 12 cells");
        AblationCsvRow r{row[0], row[1], row[8], static_cast<std::size_t>(parse_double(row[9])), parse_double(row[10]), {}};
        if (!row[11].empty()) r.half_width = parse_double(row[11]);
        out.push_back(std::move(r));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Frame-length scaling

// Full softmax self-attention over frames, without projections.
inline Tensor reference_attention(const Tensor& x) {
    Tensor scores = kernel::matmul(x, kernel::transpose(x));
    const double s = 1.0 / std::sqrt(static_cast<double>(x.shape()[1]));
    for (auto& v : scores.storage()) v *= s;
    return kernel::matmul(kernel::softmax(scores), x);
}

struct ScaleRow {
    std::size_t frames = 0;
    double stpr_seconds = 0.0;
    double attention_seconds = 0.0;
};

namespace detail {

// Best per-call time over `reps` timed batches after one warmup call.
template <class F>
double time_call(F&& f, std::size_t reps, double min_batch_seconds = 0.02) {
    using clock = std::chrono::steady_clock;
    f();
    std::size_t batch = 1;
    for (;;) {
        const auto t0 = clock::now();
        for (std::size_t i = 0; i < batch; ++i) f();
        if (std::chrono::duration<double>(clock::now() - t0).count() >= min_batch_seconds || batch >= (1u << 20)) break;
        batch *= 2;
    }
    double best = 1e300;
    for (std::size_t r = 0; r < reps; ++r) {
        const auto t0 = clock::now();
        for (std::size_t i = 0; i < batch; ++i) f();
        best = std::min(best, std::chrono::duration<double>(clock::now() - t0).count() / static_cast<double>(batch));
    }
    return best;
}

} // namespace detail

// Times one support and one query through the refiner, and the reference
// attention on one clip, at each frame length.
inline std::vector<ScaleRow> scale_bench(const ModelConfig& mc, const std::vector<std::size_t>& lengths, std::size_t reps,
                                         std::uint64_t seed) {
    if (lengths.empty()) throw ConfigError("scale-bench needs at least one frame length");
    for (std::size_t i = 1; i < lengths.size(); ++i)
        if (lengths[i] <= lengths[i - 1]) throw ConfigError("scale-bench lengths must be strictly ascending");
    if (reps < 1) throw ConfigError("scale-bench needs at least one repetition");
    mc.validate(lengths.front());
    std::mt19937_64 rng(seed);
    const StprParams params = init_stpr(mc.stpr, mc.ssm, rng);
    const StprConfig sc = mc.effective_stpr();
    const std::size_t d = mc.dim();
    std::vector<ScaleRow> rows;
    NoGradGuard guard;
    for (std::size_t f : lengths) {
        const Tensor sup = detail::normal_tensor({f, d}, 1.0, rng), qry = detail::normal_tensor({f, d}, 1.0, rng);
        const Tensor text = detail::normal_tensor({d}, 1.0, rng);
        ScaleRow row{f, 0.0, 0.0};
        row.stpr_seconds = detail::time_call([&] { stpr_forward({constant(sup)}, {constant(text)}, {constant(qry)}, sc, params); }, reps);
        row.attention_seconds = detail::time_call([&] { reference_attention(sup); }, reps);
        rows.push_back(row);
    }
    return rows;
}

// Least-squares slope of log(y) against log(x).
inline double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2) throw ConfigError("slope fit needs at least two points");
    double mx = 0, my = 0;
    const double n = static_cast<double>(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += std::log(x[i]) / n;
        my += std::log(y[i]) / n;
    }
    double sxy = 0, sxx = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (std::log(x[i]) - mx) * (std::log(y[i]) - my);
        sxx += (std::log(x[i]) - mx) * (std::log(x[i]) - mx);
    }
    return sxy / sxx;
}

inline const char* kScaleHeader = "frames,stpr_seconds,attention_seconds";

inline void write_scale_csv(const std::string& path, const std::vector<ScaleRow>& rows) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw FormatError("cannot write " + path);
    out << kScaleHeader << "\n";
    for (const auto& r : rows) out << r.frames << "," << format_double(r.stpr_seconds) << "," << format_double(r.attention_seconds) << "\n";
}

inline std::vector<ScaleRow> read_scale_csv(const std::string& path) {
    std::vector<ScaleRow> rows;
    for (const auto& row : read_csv(path, kScaleHeader)) {
        if (row.size() != 3) throw FormatError(path + ": scale row needs 3 cells");
        rows.push_back({static_cast<std::size_t>(parse_double(row[0])), parse_double(row[1]), parse_double(row[2])});
    }
    return rows;
}

} // namespace star
