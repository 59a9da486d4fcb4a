// star: command-line front end.
//
// Configuration precedence, lowest to highest: built-in defaults (or the
// benchmark preset), the --config JSON file, convenience flags, then --set
// overrides. The merged document is validated before any compute starts.

#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "star/commands.hpp"

namespace fs = std::filesystem;
using namespace star;

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kConfig = 2, kDimension = 3, kNumeric = 4 };

struct CommonFlags {
    std::string config_path;
    bool benchmark = false;
    std::string output_dir, metric, data_path, strides;
    std::vector<std::string> sets;
    std::optional<std::uint64_t> seed, protocol_seed, init_seed;
    std::optional<std::size_t> episodes, tasks, threads, way, shot, queries;
    std::optional<double> lr, alpha;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
    cmd->add_option("-c,--config", f.config_path, "JSON run configuration");
    cmd->add_flag("--benchmark", f.benchmark, "start from the calibrated synthetic benchmark instead of the defaults");
    cmd->add_option("-o,--output-dir", f.output_dir, "directory for every file the command writes");
    cmd->add_option("--metric", f.metric, "otam or bimhm");
    cmd->add_option("--data", f.data_path, "STARFT01 feature file (switches the data source to file)");
    cmd->add_option("--strides", f.strides, "comma-separated stride set, e.g. 1,2,4");
    cmd->add_option("--seed", f.seed, "training seed");
    cmd->add_option("--eval-seed", f.protocol_seed, "evaluation task seed");
    cmd->add_option("--init-seed", f.init_seed, "parameter initialization seed");
    cmd->add_option("--episodes", f.episodes, "training episodes per epoch");
    cmd->add_option("--lr", f.lr, "initial learning rate");
    cmd->add_option("--alpha", f.alpha, "weight of the few-shot loss");
    cmd->add_option("--tasks", f.tasks, "evaluation tasks");
    cmd->add_option("--threads", f.threads, "evaluation worker threads");
    cmd->add_option("--way", f.way, "classes per evaluation task");
    cmd->add_option("--shot", f.shot, "support videos per class");
    cmd->add_option("--queries", f.queries, "query videos per evaluation task");
    cmd->add_option("--set", f.sets, "override PATH=JSON, PATH a JSON pointer such as /train/lr")->take_all();
}

std::vector<std::size_t> parse_strides(const std::string& s) {
    std::vector<std::size_t> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            const long v = std::stol(item, &used);
            if (used != item.size() || v < 1) throw std::invalid_argument(item);
            out.push_back(static_cast<std::size_t>(v));
        } catch (const std::logic_error&) {
            throw ConfigError("bad stride '" + item + "' in --strides");
        }
    }
    if (out.empty()) throw ConfigError("--strides is empty");
    return out;
}

Json parse_json_text(const std::string& text, const std::string& what) {
    try {
        return Json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError("malformed JSON in " + what + ": " + e.what());
    }
}

RunConfig resolve_config(const CommonFlags& f, const std::string& mode) {
    Json j = to_json(f.benchmark ? benchmark_config() : RunConfig{});
    if (!f.config_path.empty()) {
        std::ifstream in(f.config_path);
        if (!in) throw ConfigError("cannot open config " + f.config_path);
        const std::string text{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
        j.merge_patch(parse_json_text(text, f.config_path));
    }
    j["mode"] = mode;
    if (!f.output_dir.empty()) j["output_dir"] = f.output_dir;
    if (!f.metric.empty()) j["metric"] = f.metric;
    if (!f.data_path.empty()) {
        j["data"]["source"] = "file";
        j["data"]["path"] = f.data_path;
    }
    if (!f.strides.empty()) j["model"]["strides"] = parse_strides(f.strides);
    if (f.seed) j["train"]["seed"] = *f.seed;
    if (f.protocol_seed) j["protocol"]["seed"] = *f.protocol_seed;
    if (f.init_seed) j["model"]["init_seed"] = *f.init_seed;
    if (f.episodes) j["train"]["episodes_per_epoch"] = *f.episodes;
    if (f.lr) j["train"]["lr"] = *f.lr;
    if (f.alpha) j["train"]["alpha"] = *f.alpha;
    if (f.tasks) j["protocol"]["tasks"] = *f.tasks;
    if (f.threads) j["protocol"]["threads"] = *f.threads;
    if (f.way) j["protocol"]["way"] = *f.way;
    if (f.shot) j["protocol"]["shot"] = *f.shot;
    if (f.queries) j["protocol"]["queries"] = *f.queries;
    for (const auto& s : f.sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects PATH=JSON, got '" + s + "'");
        try {
            j[Json::json_pointer(s.substr(0, eq))] = parse_json_text(s.substr(eq + 1), "--set " + s.substr(0, eq));
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("bad --set path '" + s.substr(0, eq) + "': " + e.what());
        }
    }
    return parse_run_config(j);
}

std::string prepare_output(const RunConfig& c) {
    std::error_code ec;
    fs::create_directories(c.output_dir, ec);
    if (ec) throw ConfigError("cannot create output directory " + c.output_dir + ": " + ec.message());
    return c.output_dir;
}

std::string join(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

void print_report(const std::string& label, const EvalReport& r) {
    std::cout << label << ": accuracy " << r.accuracy;
    if (r.half_width) std::cout << " +- " << *r.half_width;
    else std::cout << " (half-width n/a)";
    std::cout << " over " << r.tasks << " tasks\n";
}

int cmd_train(const CommonFlags& f) {
    const RunConfig c = resolve_config(f, "train");
    const std::string out = prepare_output(c);
    const DataSplit d = load_data(c);
    std::cout << "training on " << d.train.class_ids().size() << " classes for " << c.train.total_episodes() << " episodes\n";
    const TrainOutcome t = train_model(c, d.train);
    write_loss_csv(join(out, "loss.csv"), t.log);
    save_checkpoint(join(out, "checkpoint.starck"), t.checkpoint);
    write_json(join(out, "config.json"), to_json(c));
    double tail = 0.0;
    const std::size_t n = std::min<std::size_t>(50, t.log.size());
    for (std::size_t i = t.log.size() - n; i < t.log.size(); ++i) tail += t.log[i].loss / static_cast<double>(n);
    std::cout << "final mean loss (last " << n << " episodes) " << tail << "\n"
              << "wrote " << join(out, "checkpoint.starck") << " and " << join(out, "loss.csv") << "\n";
    return kOk;
}

int cmd_eval(const CommonFlags& f, const std::string& checkpoint, std::string report_path) {
    const RunConfig c = resolve_config(f, "eval");
    const std::string out = prepare_output(c);
    const DataSplit d = load_data(c);
    const StarModel m = checkpoint.empty() ? fresh_model(c, d.full.frames)
                                           : model_from_checkpoint(c, d.full.frames, load_checkpoint(checkpoint));
    const EvalReport r = evaluate_model(m, c, d.test);
    if (report_path.empty()) report_path = join(out, std::string("eval_") + metric_name(c.metric()) + ".json");
    write_json(report_path, report_json(r, c, checkpoint));
    print_report(std::string("eval ") + metric_name(c.metric()), r);
    std::cout << "wrote " << report_path << "\n";
    return kOk;
}

int cmd_ablate(const CommonFlags& f, const std::string& grid_name, const std::string& grid_file, bool no_train) {
    const RunConfig c = resolve_config(f, "ablate");
    const std::string out = prepare_output(c);
    const auto grid = grid_file.empty() ? named_grid(grid_name) : grid_from_json(read_json(grid_file));
    std::size_t index = 0;
    const auto rows = run_ablation(c, grid, !no_train, [&](const AblationRow& r) {
        print_report(r.name, r.report);
        write_json(join(out, "ablate_" + std::to_string(index++) + ".json"), report_json(r.report, r.config, ""));
    });
    write_ablation_csv(join(out, "ablate.csv"), rows);
    std::cout << "wrote " << join(out, "ablate.csv") << "\n";
    return kOk;
}

int cmd_scale_bench(const CommonFlags& f, const std::string& lengths_arg, std::size_t reps) {
    const RunConfig c = resolve_config(f, "scale-bench");
    const std::string out = prepare_output(c);
    const auto lengths = parse_strides(lengths_arg);
    const auto rows = scale_bench(c.model, lengths, reps, c.init_seed);
    write_scale_csv(join(out, "scale.csv"), rows);
    std::vector<double> x, ys, ya;
    for (const auto& r : rows) {
        std::cout << "F=" << r.frames << " stpr " << r.stpr_seconds << " s, attention " << r.attention_seconds << " s\n";
        x.push_back(static_cast<double>(r.frames));
        ys.push_back(r.stpr_seconds);
        ya.push_back(r.attention_seconds);
    }
    if (rows.size() >= 2)
        std::cout << "log-log slope: stpr " << loglog_slope(x, ys) << ", attention " << loglog_slope(x, ya) << "\n";
    std::cout << "wrote " << join(out, "scale.csv") << "\n";
    return kOk;
}

int cmd_gradcheck(std::uint64_t seed) {
    bool ok = true;
    for (const auto& o : gradient_suite(seed)) {
        std::cout << (o.pass ? "PASS " : "FAIL ") << o.name << " rel_err=" << o.value << " tol=" << o.tolerance << " " << o.detail
                  << "\n";
        ok = ok && o.pass;
    }
    if (!ok) throw NumericError("gradient check failed");
    return kOk;
}

int cmd_synth(const CommonFlags& f, std::string path) {
    const RunConfig c = resolve_config(f, "synth");
    if (c.data.source != "synthetic") throw ConfigError("synth needs a synthetic data source");
    const Dataset d = generate_synthetic(c.data.synthetic, c.data.seed).dataset;
    if (path.empty()) path = join(prepare_output(c), "synthetic.starft");
    save_features(path, d);
    std::cout << "wrote " << d.videos.size() << " videos of " << d.text.entries.size() << " classes to " << path << "\n";
    return kOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Few-shot action recognition over frame features"};
    app.require_subcommand(1);

    CommonFlags train_f, eval_f, ablate_f, scale_f, synth_f;
    auto* train_cmd = app.add_subcommand("train", "episodic training; writes checkpoint.starck and loss.csv");
    add_common(train_cmd, train_f);

    std::string checkpoint, report;
    auto* eval_cmd = app.add_subcommand("eval", "evaluate on held-out classes; writes eval_<metric>.json");
    add_common(eval_cmd, eval_f);
    eval_cmd->add_option("--checkpoint", checkpoint, "STARCK01 checkpoint; omitted means a freshly initialized model");
    eval_cmd->add_option("--report", report, "report path instead of <output-dir>/eval_<metric>.json");

    std::string grid = "strides", grid_file;
    bool no_train = false;
    auto* ablate_cmd = app.add_subcommand("ablate", "train and evaluate every cell of a configuration grid");
    add_common(ablate_cmd, ablate_f);
    ablate_cmd->add_option("--grid", grid, "strides, modules or stpr");
    ablate_cmd->add_option("--grid-file", grid_file, "JSON array of {name, patch} cells");
    ablate_cmd->add_flag("--no-train", no_train, "evaluate freshly initialized models");

    std::string lengths = "8,16,32,64,128";
    std::size_t reps = 5;
    auto* scale_cmd = app.add_subcommand("scale-bench", "time the refiner and reference attention against frame length");
    add_common(scale_cmd, scale_f);
    scale_cmd->add_option("--lengths", lengths, "ascending comma-separated frame lengths");
    scale_cmd->add_option("--reps", reps, "timed repetitions per length");

    std::uint64_t gc_seed = 17;
    auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference checks for every trainable module");
    grad_cmd->add_option("--seed", gc_seed, "seed for the micro problems");

    std::string synth_out;
    auto* synth_cmd = app.add_subcommand("synth", "write a synthetic dataset as a STARFT01 feature file");
    add_common(synth_cmd, synth_f);
    synth_cmd->add_option("--out", synth_out, "output path instead of <output-dir>/synthetic.starft");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kConfig;
    }

    try {
        if (*train_cmd) return cmd_train(train_f);
        if (*eval_cmd) return cmd_eval(eval_f, checkpoint, report);
        if (*ablate_cmd) return cmd_ablate(ablate_f, grid, grid_file, no_train);
        if (*scale_cmd) return cmd_scale_bench(scale_f, lengths, reps);
        if (*grad_cmd) return cmd_gradcheck(gc_seed);
        if (*synth_cmd) return cmd_synth(synth_f, synth_out);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfig;
    } catch (const FormatError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfig;
    } catch (const DimensionError& e) {
        std::cerr << "dimension error: " << e.what() << "\n";
        return kDimension;
    } catch (const InconsistencyError& e) {
        std::cerr << "dimension error: " << e.what() << "\n";
        return kDimension;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return kNumeric;
    } catch (const CapacityError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kFailure;
    }
    return kFailure;
}
