// Acceptance run: one PASS/FAIL line per criterion on stdout, exit 1 if any
// criterion fails. Pass an output path as the first argument to also write
// the lines (plus measured numbers) to a file.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <thread>

#include "oracles.hpp"
#include "star/commands.hpp"

using namespace star;

namespace tol {
constexpr double scan = 1e-12;
constexpr double otam = 1e-9;
constexpr double bimhm = 1e-12;
constexpr double module_grad = 1e-5;
constexpr double e2e_grad = 1e-4;
constexpr double grad_seconds = 120.0;
constexpr double acu_reversal = 1e-12;
constexpr double raw_low = 0.35, raw_high = 0.55;
constexpr double learn_seconds = 900.0;
constexpr double ablation_ci = 1.0;
constexpr double stpr_slope = 1.3;
constexpr double attention_slope = 1.7;
constexpr double scale_seconds = 60.0;
constexpr double chance = 0.2;
constexpr double chance_ci = 3.0;
}  // namespace tol

namespace {

using clock_type = std::chrono::steady_clock;

double seconds_since(clock_type::time_point t0) { return std::chrono::duration<double>(clock_type::now() - t0).count(); }

struct Line {
    std::string name;
    bool pass = false;
    std::string detail;
};

std::string fmt(double v, int digits = 4) {
    std::ostringstream os;
    os.precision(digits);
    os << v;
    return os.str();
}

std::string report_text(const EvalReport& r) { return fmt(r.accuracy) + "±" + fmt(r.half_width.value_or(0.0), 2); }

double hw(const EvalReport& r) { return r.half_width.value_or(0.0); }

// ---------------------------------------------------------------------------

Line oracle_equivalence() {
    double scan_err = 0.0, otam_err = 0.0, bimhm_err = 0.0;
    for (int i = 0; i < 100; ++i) {
        std::mt19937_64 rng(1000 + static_cast<std::uint64_t>(i));
        std::uniform_int_distribution<std::size_t> len(1, 16), ch(1, 6), hs(1, 8);
        std::uniform_real_distribution<double> udt(0.001, 1.0), ua(0.01, 4.0);
        const std::size_t L = len(rng), C = ch(rng), H = hs(rng);
        Tensor dt({L, C}), a({C, H});
        for (auto& v : dt.storage()) v = udt(rng);
        for (auto& v : a.storage()) v = -ua(rng);
        const Tensor x = detail::normal_tensor({L, C}, 1.0, rng), b = detail::normal_tensor({L, H}, 1.0, rng),
                     c = detail::normal_tensor({L, H}, 1.0, rng);
        const Tensor y = ssm_scan(constant(x), constant(dt), constant(b), constant(c), constant(a)).value();
        scan_err = std::max(scan_err, max_abs_diff(y, oracle::scan(x, dt, b, c, a)));
    }
    for (int seed = 0; seed < 100; ++seed) {
        std::mt19937_64 rng(2000 + static_cast<std::uint64_t>(seed));
        std::uniform_real_distribution<double> u(0.0, 2.0);
        for (std::size_t fq = 1; fq <= 5; ++fq)
            for (std::size_t fp = 1; fp <= 5; ++fp) {
                Tensor cost({fq, fp});
                for (auto& v : cost.storage()) v = u(rng);
                otam_err = std::max(otam_err, std::abs(otam_distance(constant(cost), 0.0).value()[0] - oracle::otam(cost)));
                bimhm_err = std::max(bimhm_err, std::abs(bimhm_distance(constant(cost)).value()[0] - oracle::bimhm(cost)));
            }
    }
    const bool pass = scan_err <= tol::scan && otam_err <= tol::otam && bimhm_err <= tol::bimhm;
    return {"oracle_equivalence", pass,
            "scan max|diff|=" + fmt(scan_err, 3) + " (<=" + fmt(tol::scan) + "), otam=" + fmt(otam_err, 3) + " (<=" +
                fmt(tol::otam) + "), bimhm=" + fmt(bimhm_err, 3) + " (<=" + fmt(tol::bimhm) + ")"};
}

Line gradient_suite_line() {
    const auto t0 = clock_type::now();
    const auto outcomes = gradient_suite(17, tol::module_grad, tol::e2e_grad);
    const double secs = seconds_since(t0);
    bool pass = secs < tol::grad_seconds;
    std::string detail;
    for (const auto& o : outcomes) {
        pass = pass && o.pass;
        detail += o.name + "=" + fmt(o.value, 2) + (o.pass ? "" : "(FAIL)") + " ";
    }
    return {"gradient_suite", pass, detail + "in " + fmt(secs, 3) + "s (<" + fmt(tol::grad_seconds) + "s)"};
}

Line structural_invariants(const RunConfig& bench, const Dataset& train_set) {
    std::mt19937_64 rng(77);
    const std::size_t d = bench.model.dim();
    std::vector<std::string> broken;

    // Causality: perturbing frame t leaves every earlier output bit-identical.
    {
        const TSSMParams p = init_tssm(bench.model.ssm, rng);
        const Tensor x = detail::normal_tensor({16, d}, 1.0, rng);
        const Tensor y = tssm_block(constant(x), p).value();
        bool ok = true;
        for (std::size_t t = 0; t < 16; ++t) {
            Tensor xp = x;
            for (std::size_t c = 0; c < d; ++c) xp(t, c) += 0.5;
            const Tensor yp = tssm_block(constant(xp), p).value();
            for (std::size_t s = 0; s < t; ++s)
                for (std::size_t c = 0; c < d; ++c) ok = ok && yp(s, c) == y(s, c);
        }
        if (!ok) broken.push_back("causality");
    }

    // ACU with tied directions commutes with time reversal.
    double acu_err = 0.0;
    {
        const std::vector<TSSMParams> tied{init_tssm(bench.model.ssm, rng)};
        const Tensor x = detail::normal_tensor({16, d}, 1.0, rng);
        Tensor rx({16, d});
        for (std::size_t t = 0; t < 16; ++t)
            for (std::size_t c = 0; c < d; ++c) rx(t, c) = x(15 - t, c);
        const Tensor a = acu_bidirectional(constant(rx), tied, tied).value();
        const Tensor b = acu_bidirectional(constant(x), tied, tied).value();
        for (std::size_t t = 0; t < 16; ++t)
            for (std::size_t c = 0; c < d; ++c) acu_err = std::max(acu_err, std::abs(a(t, c) - b(15 - t, c)));
        if (acu_err > tol::acu_reversal) broken.push_back("acu_reversal");
    }

    // ASD offsets cover every frame exactly once.
    for (std::size_t f : {8, 16})
        for (std::size_t w : {1, 2, 4}) {
            std::vector<int> hits(f, 0);
            for (std::size_t o = 0; o < w; ++o)
                for (std::size_t i : subsample_indices(f, w, o)) ++hits.at(i);
            for (int h : hits)
                if (h != 1) {
                    broken.push_back("asd_partition(w=" + std::to_string(w) + ",F=" + std::to_string(f) + ")");
                    break;
                }
        }

    // Support and query video ids never overlap.
    {
        std::mt19937_64 erng(78);
        std::size_t bad = 0;
        for (int i = 0; i < 10000; ++i) {
            const Episode ep = sample_episode(train_set, 5, 1, 5, erng);
            std::set<std::uint32_t> sup;
            for (const auto& s : ep.support) sup.insert(s.video_id);
            for (const auto& q : ep.queries) bad += sup.count(q.video_id);
        }
        if (bad) broken.push_back("episode_disjointness(" + std::to_string(bad) + ")");
    }

    // predict agrees with the most probable class.
    {
        std::size_t bad = 0;
        for (int i = 0; i < 1000; ++i) {
            const Tensor dist = detail::normal_tensor({5}, 1.0, rng);
            const Tensor p = episode_probs(dist);
            std::size_t best = 0;
            for (std::size_t j = 1; j < 5; ++j)
                if (p[j] > p[best]) best = j;
            bad += predict(dist.storage()) != best;
        }
        if (bad) broken.push_back("predict_consistency(" + std::to_string(bad) + ")");
    }

    std::string detail = "causality, acu_reversal (max|diff|=" + fmt(acu_err, 3) +
                         "), asd_partition, episode_disjointness x10000, predict_consistency x1000";
    if (!broken.empty()) {
        detail += "; broken:";
        for (const auto& b : broken) detail += " " + b;
    }
    return {"structural_invariants", broken.empty(), detail};
}

RunConfig with_strides(RunConfig c, std::vector<std::size_t> w) {
    c.model.stpr.strides = std::move(w);
    c.model.stpr.fuse_weights.clear();
    return c;
}

}  // namespace

int main(int argc, char** argv) {
    std::vector<Line> lines;
    auto emit = [&](Line l) {
        std::cout << (l.pass ? "PASS " : "FAIL ") << l.name << ": " << l.detail << std::endl;
        lines.push_back(std::move(l));
    };
    auto guarded = [&](const std::string& name, const std::function<Line()>& f) {
        try {
            emit(f());
        } catch (const std::exception& e) {
            emit({name, false, std::string("exception: ") + e.what()});
        }
    };

    RunConfig bench = benchmark_config();
    bench.protocol.threads = std::max(1u, std::thread::hardware_concurrency());
    const DataSplit data = load_data(bench);
    const std::size_t frames = data.full.frames;

    guarded("oracle_equivalence", oracle_equivalence);
    guarded("gradient_suite", gradient_suite_line);
    guarded("structural_invariants", [&] { return structural_invariants(bench, data.train); });

    // Models shared by the training-based criteria.
    std::optional<TrainOutcome> full_otam;
    std::optional<EvalReport> full_otam_report;

    guarded("learnability", [&] {
        const auto t0 = clock_type::now();
        const EvalReport raw =
            evaluate(raw_prototype_scorer(Metric::otam), data.test, 5, 1, 5, bench.protocol.tasks, bench.protocol.seed, bench.protocol.threads);
        full_otam = train_model(bench, data.train);
        full_otam_report = evaluate_model(full_otam->model, bench, data.test);
        const EvalReport untrained = evaluate_model(fresh_model(bench, frames), bench, data.test);
        RunConfig off = bench;
        off.model.modules.tcr = off.model.modules.tsa = off.model.modules.stpr = false;
        const EvalReport all_off = evaluate_model(fresh_model(off, frames), off, data.test);
        const double secs = seconds_since(t0);
        const EvalReport& tr = *full_otam_report;
        const bool calibrated = raw.accuracy >= tol::raw_low && raw.accuracy <= tol::raw_high;
        const bool beats_untrained = tr.accuracy - untrained.accuracy > hw(tr) + hw(untrained);
        const bool beats_off = tr.accuracy - all_off.accuracy > hw(tr) + hw(all_off);
        return Line{"learnability", calibrated && beats_untrained && beats_off && secs <= tol::learn_seconds,
                    "raw=" + report_text(raw) + " (in [" + fmt(tol::raw_low) + "," + fmt(tol::raw_high) + "]), trained=" +
                        report_text(tr) + ", untrained=" + report_text(untrained) + ", all_off=" + report_text(all_off) +
                        ", tasks=" + std::to_string(tr.tasks) + ", " + fmt(secs, 3) + "s (<=" + fmt(tol::learn_seconds) + "s)"};
    });

    guarded("ablation_direction", [&] {
        if (!full_otam_report) throw std::runtime_error("no trained W=1+2+4 model");
        double best_single = 0.0;
        std::string detail = "W=1+2+4 " + report_text(*full_otam_report);
        for (std::size_t w : {1, 2, 4}) {
            const RunConfig c = with_strides(bench, {w});
            const EvalReport r = evaluate_model(train_model(c, data.train).model, c, data.test);
            best_single = std::max(best_single, r.accuracy);
            detail += ", W=" + std::to_string(w) + " " + report_text(r);
        }
        const double floor = best_single - tol::ablation_ci * hw(*full_otam_report);
        return Line{"ablation_direction", full_otam_report->accuracy >= floor,
                    detail + " (need >= max single " + fmt(best_single) + " - " + fmt(tol::ablation_ci) + " CI)"};
    });

    guarded("scaling", [&] {
        const auto t0 = clock_type::now();
        const auto rows = scale_bench(bench.model, {8, 16, 32, 64, 128}, 5, 9);
        const double secs = seconds_since(t0);
        std::vector<double> f, s, a;
        for (const auto& r : rows) {
            f.push_back(static_cast<double>(r.frames));
            s.push_back(r.stpr_seconds);
            a.push_back(r.attention_seconds);
        }
        const double ss = loglog_slope(f, s), as = loglog_slope(f, a);
        return Line{"scaling", ss < tol::stpr_slope && as > tol::attention_slope && secs < tol::scale_seconds,
                    "stpr slope=" + fmt(ss, 3) + " (<" + fmt(tol::stpr_slope) + "), attention slope=" + fmt(as, 3) + " (>" +
                        fmt(tol::attention_slope) + "), F=8..128, D=" + std::to_string(bench.model.dim()) + ", " + fmt(secs, 3) +
                        "s (<" + fmt(tol::scale_seconds) + "s)"};
    });

    guarded("metric_swap", [&] {
        if (!full_otam_report) throw std::runtime_error("no trained otam model");
        RunConfig c = bench;
        c.train.episode.metric = Metric::bimhm;
        const EvalReport b = evaluate_model(train_model(c, data.train).model, c, data.test);
        const EvalReport& o = *full_otam_report;
        const bool pass = o.accuracy - tol::chance > tol::chance_ci * hw(o) && b.accuracy - tol::chance > tol::chance_ci * hw(b);
        return Line{"metric_swap", pass,
                    "otam=" + report_text(o) + ", bimhm=" + report_text(b) + " (each > " + fmt(tol::chance) + " + " +
                        fmt(tol::chance_ci) + " CI)"};
    });

    guarded("determinism", [&] {
        if (!full_otam || !full_otam_report) throw std::runtime_error("no reference run");
        const TrainOutcome again = train_model(bench, data.train);
        const bool same_ckpt = encode_checkpoint(again.checkpoint) == encode_checkpoint(full_otam->checkpoint);
        RunConfig threaded = bench;
        threaded.protocol.threads = bench.protocol.threads + 1;
        const EvalReport r = evaluate_model(again.model, threaded, data.test);
        const bool same_report = to_json(r).dump() == to_json(*full_otam_report).dump() &&
                                 r.task_accuracy == full_otam_report->task_accuracy;
        return Line{"determinism", same_ckpt && same_report,
                    std::string("checkpoint bytes ") + (same_ckpt ? "identical" : "DIFFER") + ", eval report " +
                        (same_report ? "identical" : "DIFFERS") + " (threads " + std::to_string(bench.protocol.threads) +
                        " vs " + std::to_string(threaded.protocol.threads) + ")"};
    });

    bool all = true;
    for (const auto& l : lines) all = all && l.pass;
    if (argc > 1) {
        std::ofstream out(argv[1], std::ios::trunc);
        for (const auto& l : lines) out << (l.pass ? "PASS " : "FAIL ") << l.name << ": " << l.detail << "\n";
    }
    std::cout << (all ? "ALL PASS" : "SOME FAILED") << std::endl;
    return all ? 0 : 1;
}
