#pragma once

// Run configuration: one JSON document, validated before any compute.
// Unknown keys are rejected at every level.

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "star/episodic.hpp"

namespace star {

using Json = nlohmann::json;

struct DataConfig {
    std::string source = "synthetic";  // synthetic | file
    std::string path;                  // STARFT01 file when source == file
    SyntheticSpec synthetic;
    std::uint64_t seed = 11;
    // Classes (ascending id) used for training; the rest are held out.
    std::size_t train_classes = 20;
};

struct ProtocolConfig {
    std::size_t way = 5, shot = 1, queries = 5;
    std::size_t tasks = 1000;
    std::uint64_t seed = 3;
    std::size_t threads = 1;
};

struct RunConfig {
    std::string mode = "train";
    DataConfig data;
    ModelConfig model;
    std::uint64_t init_seed = 5;
    ProtocolConfig protocol;
    TrainConfig train;
    std::string output_dir = "star_out";

    Metric metric() const { return train.episode.metric; }

    void validate() const {
        static const std::set<std::string> modes{"train", "eval", "ablate", "scale-bench", "gradcheck", "synth"};
        if (!modes.count(mode)) throw ConfigError("unknown mode '" + mode + "'");
        if (data.source != "synthetic" && data.source != "file")
            throw ConfigError("data.source must be 'synthetic' or 'file'");
        if (data.source == "file" && data.path.empty()) throw ConfigError("data.path is required for file input");
        if (data.source == "synthetic") {
            data.synthetic.validate();
            if (data.synthetic.dim != model.dim())
                throw DimensionError("synthetic dim " + std::to_string(data.synthetic.dim) + " differs from model dim " +
                                     std::to_string(model.dim()));
            model.stpr.validate(data.synthetic.frames);
        }
        if (protocol.way < 1 || protocol.shot < 1 || protocol.queries < 1 || protocol.tasks < 1)
            throw ConfigError("protocol way, shot, queries and tasks must be >= 1");
        train.validate();
        model.ssm.validate();
        model.attention.validate();
        if (model.attention.dim != model.ssm.model_dim) throw ConfigError("attention dim must equal model dim");
    }
};

namespace detail {

inline void reject_unknown(const Json& j, const std::set<std::string>& allowed, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
    for (const auto& item : j.items())
        if (!allowed.count(item.key())) throw ConfigError("unknown key '" + where + "." + item.key() + "'");
}

template <class T>
void get(const Json& j, const char* key, T& out, const std::string& where) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("bad value for " + where + "." + key + ": " + e.what());
    }
}

} // namespace detail

inline RunConfig parse_run_config(const Json& j) {
    using detail::get;
    using detail::reject_unknown;
    RunConfig c;
    reject_unknown(j, {"mode", "data", "model", "protocol", "train", "metric", "modules", "output_dir"}, "config");
    get(j, "mode", c.mode, "config");
    get(j, "output_dir", c.output_dir, "config");
    if (j.contains("metric")) {
        std::string m;
        get(j, "metric", m, "config");
        c.train.episode.metric = parse_metric(m);
    }

    if (j.contains("data")) {
        const Json& d = j["data"];
        reject_unknown(d, {"source", "path", "seed", "train_classes", "synthetic"}, "data");
        get(d, "source", c.data.source, "data");
        get(d, "path", c.data.path, "data");
        get(d, "seed", c.data.seed, "data");
        get(d, "train_classes", c.data.train_classes, "data");
        if (d.contains("synthetic")) {
            const Json& s = d["synthetic"];
            reject_unknown(s, {"num_classes", "videos_per_class", "frames", "dim", "motif_len", "noise_sigma",
                               "drift_amplitude", "drift_rank", "background_amplitude", "motif_amplitude"},
                           "data.synthetic");
            auto& sp = c.data.synthetic;
            get(s, "num_classes", sp.num_classes, "data.synthetic");
            get(s, "videos_per_class", sp.videos_per_class, "data.synthetic");
            get(s, "frames", sp.frames, "data.synthetic");
            get(s, "dim", sp.dim, "data.synthetic");
            get(s, "motif_len", sp.motif_len, "data.synthetic");
            get(s, "noise_sigma", sp.noise_sigma, "data.synthetic");
            get(s, "drift_amplitude", sp.drift_amplitude, "data.synthetic");
            get(s, "drift_rank", sp.drift_rank, "data.synthetic");
            get(s, "background_amplitude", sp.background_amplitude, "data.synthetic");
            get(s, "motif_amplitude", sp.motif_amplitude, "data.synthetic");
        }
    }

    if (j.contains("model")) {
        const Json& m = j["model"];
        reject_unknown(m, {"dim", "state_dim", "conv_kernel", "expansion", "dt_min", "dt_max", "out_init_scale", "heads",
                           "tau_init", "tau_floor", "strides", "fuse_weights", "recal_kernel", "tssm_layers", "sgf_query",
                           "init_seed"},
                       "model");
        auto& mc = c.model;
        std::size_t dim = mc.ssm.model_dim;
        get(m, "dim", dim, "model");
        mc.ssm.model_dim = mc.attention.dim = dim;
        get(m, "state_dim", mc.ssm.state_dim, "model");
        get(m, "conv_kernel", mc.ssm.conv_kernel, "model");
        get(m, "expansion", mc.ssm.expansion, "model");
        get(m, "dt_min", mc.ssm.dt_min, "model");
        get(m, "dt_max", mc.ssm.dt_max, "model");
        get(m, "out_init_scale", mc.ssm.out_init_scale, "model");
        get(m, "heads", mc.attention.heads, "model");
        get(m, "tau_init", mc.attention.tau_init, "model");
        get(m, "tau_floor", mc.attention.tau_floor, "model");
        get(m, "strides", mc.stpr.strides, "model");
        get(m, "fuse_weights", mc.stpr.fuse_weights, "model");
        get(m, "recal_kernel", mc.stpr.recal_kernel, "model");
        get(m, "tssm_layers", mc.stpr.tssm_layers, "model");
        get(m, "sgf_query", mc.stpr.sgf_query, "model");
        get(m, "init_seed", c.init_seed, "model");
    }

    if (j.contains("modules")) {
        const Json& m = j["modules"];
        reject_unknown(m, {"tcr", "tsa", "stpr", "sgf", "asd", "acu"}, "modules");
        auto& t = c.model.modules;
        get(m, "tcr", t.tcr, "modules");
        get(m, "tsa", t.tsa, "modules");
        get(m, "stpr", t.stpr, "modules");
        get(m, "sgf", t.sgf, "modules");
        get(m, "asd", t.asd, "modules");
        get(m, "acu", t.acu, "modules");
    }

    if (j.contains("protocol")) {
        const Json& p = j["protocol"];
        reject_unknown(p, {"way", "shot", "queries", "tasks", "seed", "threads"}, "protocol");
        get(p, "way", c.protocol.way, "protocol");
        get(p, "shot", c.protocol.shot, "protocol");
        get(p, "queries", c.protocol.queries, "protocol");
        get(p, "tasks", c.protocol.tasks, "protocol");
        get(p, "seed", c.protocol.seed, "protocol");
        get(p, "threads", c.protocol.threads, "protocol");
    }

    if (j.contains("train")) {
        const Json& t = j["train"];
        reject_unknown(t, {"epochs", "episodes_per_epoch", "lr", "alpha", "lambda", "seed", "milestones", "decay", "way",
                           "shot", "queries"},
                       "train");
        auto& tc = c.train;
        get(t, "epochs", tc.epochs, "train");
        get(t, "episodes_per_epoch", tc.episodes_per_epoch, "train");
        get(t, "lr", tc.lr, "train");
        get(t, "alpha", tc.episode.alpha, "train");
        get(t, "lambda", tc.episode.lambda_train, "train");
        get(t, "seed", tc.seed, "train");
        get(t, "milestones", tc.milestones, "train");
        get(t, "decay", tc.decay, "train");
        get(t, "way", tc.way, "train");
        get(t, "shot", tc.shot, "train");
        get(t, "queries", tc.queries, "train");
    }
    c.validate();
    return c;
}

inline RunConfig parse_run_config_text(const std::string& text) {
    Json j;
    try {
        j = Json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(std::string("malformed config JSON: ") + e.what());
    }
    return parse_run_config(j);
}

// Canonical JSON for a config; parse_run_config(to_json(c)) reproduces c.
inline Json to_json(const RunConfig& c) {
    const auto& sp = c.data.synthetic;
    const auto& mc = c.model;
    const auto& tc = c.train;
    return Json{
        {"mode", c.mode},
        {"output_dir", c.output_dir},
        {"metric", metric_name(c.metric())},
        {"data",
         {{"source", c.data.source},
          {"path", c.data.path},
          {"seed", c.data.seed},
          {"train_classes", c.data.train_classes},
          {"synthetic",
           {{"num_classes", sp.num_classes},
            {"videos_per_class", sp.videos_per_class},
            {"frames", sp.frames},
            {"dim", sp.dim},
            {"motif_len", sp.motif_len},
            {"noise_sigma", sp.noise_sigma},
            {"drift_amplitude", sp.drift_amplitude},
            {"drift_rank", sp.drift_rank},
            {"background_amplitude", sp.background_amplitude},
            {"motif_amplitude", sp.motif_amplitude}}}}},
        {"model",
         {{"dim", mc.ssm.model_dim},
          {"state_dim", mc.ssm.state_dim},
          {"conv_kernel", mc.ssm.conv_kernel},
          {"expansion", mc.ssm.expansion},
          {"dt_min", mc.ssm.dt_min},
          {"dt_max", mc.ssm.dt_max},
          {"out_init_scale", mc.ssm.out_init_scale},
          {"heads", mc.attention.heads},
          {"tau_init", mc.attention.tau_init},
          {"tau_floor", mc.attention.tau_floor},
          {"strides", mc.stpr.strides},
          {"fuse_weights", mc.stpr.fuse_weights},
          {"recal_kernel", mc.stpr.recal_kernel},
          {"tssm_layers", mc.stpr.tssm_layers},
          {"sgf_query", mc.stpr.sgf_query},
          {"init_seed", c.init_seed}}},
        {"modules",
         {{"tcr", mc.modules.tcr},
          {"tsa", mc.modules.tsa},
          {"stpr", mc.modules.stpr},
          {"sgf", mc.modules.sgf},
          {"asd", mc.modules.asd},
          {"acu", mc.modules.acu}}},
        {"protocol",
         {{"way", c.protocol.way},
          {"shot", c.protocol.shot},
          {"queries", c.protocol.queries},
          {"tasks", c.protocol.tasks},
          {"seed", c.protocol.seed},
          {"threads", c.protocol.threads}}},
        {"train",
         {{"epochs", tc.epochs},
          {"episodes_per_epoch", tc.episodes_per_epoch},
          {"lr", tc.lr},
          {"alpha", tc.episode.alpha},
          {"lambda", tc.episode.lambda_train},
          {"seed", tc.seed},
          {"milestones", tc.milestones},
          {"decay", tc.decay},
          {"way", tc.way},
          {"shot", tc.shot},
          {"queries", tc.queries}}},
    };
}

inline Json to_json(const EvalReport& r) {
    Json j{{"tasks", r.tasks}, {"accuracy", r.accuracy}};
    j["ci95_half_width"] = r.half_width ? Json(*r.half_width) : Json(nullptr);
    return j;
}

inline EvalReport eval_report_from_json(const Json& j) {
    EvalReport r;
    r.tasks = j.at("tasks").get<std::size_t>();
    r.accuracy = j.at("accuracy").get<double>();
    if (!j.at("ci95_half_width").is_null()) r.half_width = j.at("ci95_half_width").get<double>();
    return r;
}

} // namespace star
