// SPDX-License-Identifier: Apache-2.0
//
// cape: simulate | pretrain | finetune | forecast | zeroshot | analyze | gradcheck
//
// Every command writes under <out>/<config hash>/ and is a pure function of
// the resolved configuration and its input files.
#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cape/cape.hpp"

namespace fs = std::filesystem;
using namespace cape;

namespace {

inline constexpr std::uint64_t kInitStream = 0x1A17;

struct Run {
    Config cfg;
    fs::path dir;   ///< <out>/<hash>
    std::string rel;  ///< <hash>, the form printed in reports
};

void write_text(const Run& run, const std::string& name, const std::string& text) {
    const fs::path p = run.dir / name;
    std::ofstream out(p, std::ios::binary);
    if (!out) {
        throw Error("cannot write " + (fs::path(run.rel) / name).string());
    }
    out << text;
    if (!out) {
        throw Error("write failed for " + (fs::path(run.rel) / name).string());
    }
    std::cout << "wrote " << (fs::path(run.rel) / name).string() << '\n';
}

std::string fmt(double v) { return data::format_double(v); }

// ---------------------------------------------------------------- inputs

/// Raw records: the CSV named by data.csv, or the synthetic corpus.
std::vector<data::TimeSeriesRecord> load_records(const Config& cfg) {
    const std::string& csv = cfg.get("data.csv");
    if (csv.empty()) {
        return sim::records_of(sim::make_corpus(cfg.seed(), cfg.corpus()));
    }
    auto loaded = data::load_csv(csv);
    for (const auto& w : loaded.warnings) {
        std::cerr << "warning: " << w << '\n';
    }
    if (loaded.records.empty()) {
        throw ValidationError(csv + ": no records");
    }
    return std::move(loaded.records);
}

std::vector<data::TimeSeriesRecord> normalized_records(const Config& cfg) {
    return train::normalize_records(load_records(cfg), cfg.split().train);
}

ckpt::Checkpoint require_checkpoint(const Config& cfg, const char* command) {
    const std::string& path = cfg.get("model.checkpoint");
    if (path.empty()) {
        throw ValidationError(std::string(command) + " needs model.checkpoint");
    }
    return ckpt::load_checkpoint(path);
}

std::vector<std::size_t> horizons(const Config& cfg) {
    std::vector<std::size_t> out;
    for (const auto& s : cfg.get_list("eval.horizons")) {
        std::size_t v = 0;
        auto r = std::from_chars(s.data(), s.data() + s.size(), v);
        if (r.ec != std::errc{} || r.ptr != s.data() + s.size() || v == 0) {
            throw ValidationError("config eval.horizons: '" + s + "' is not a positive integer");
        }
        out.push_back(v);
    }
    if (out.empty()) {
        throw ValidationError("config eval.horizons is empty");
    }
    return out;
}

std::map<std::string, data::NormState> norm_states(const std::vector<data::TimeSeriesRecord>& records) {
    std::map<std::string, data::NormState> out;
    for (const auto& r : records) {
        if (r.norm) out[ckpt::norm_key(r)] = *r.norm;
    }
    return out;
}

std::map<std::string, std::string> run_meta(const Run& run, const std::string& command) {
    return {{"command", command}, {"config_hash", run.rel}, {"seed", std::to_string(run.cfg.seed())}};
}

eval::Matrix rows_of(const std::vector<double>& flat, std::size_t width) {
    eval::Matrix out;
    for (std::size_t i = 0; i + width <= flat.size(); i += width) {
        out.emplace_back(flat.begin() + static_cast<std::ptrdiff_t>(i),
                         flat.begin() + static_cast<std::ptrdiff_t>(i + width));
    }
    return out;
}

eval::Matrix targets_of(const std::vector<data::WindowPair>& windows) {
    eval::Matrix out;
    for (const auto& w : windows) out.push_back(w.y);
    return out;
}

using Predictor = std::function<eval::Matrix(const std::vector<data::WindowPair>&, std::size_t)>;

/// Test-split metrics for every configured horizon; horizons without test
/// windows are skipped with a note.
std::vector<eval::MetricReport> horizon_metrics(const Config& cfg, const std::vector<data::TimeSeriesRecord>& records,
                                                std::size_t T, const Predictor& predict) {
    std::vector<eval::MetricReport> out;
    for (std::size_t H : horizons(cfg)) {
        const auto ws = train::make_window_set(records, T, H, cfg.get_size("data.stride"), cfg.split());
        if (ws.test.empty()) {
            std::cout << "note: no test windows at horizon " << H << '\n';
            continue;
        }
        out.push_back(eval::forecast_metrics(predict(ws.test, H), targets_of(ws.test)));
    }
    if (out.empty()) {
        throw ValidationError("no test windows at any horizon");
    }
    return out;
}

std::string metrics_text(const std::vector<eval::MetricReport>& reports) {
    std::ostringstream s;
    eval::write_metrics_csv(s, reports);
    return s.str();
}

/// One row per (window, step) in the original scale of the record.
std::string forecasts_text(const std::vector<data::TimeSeriesRecord>& records,
                           const std::vector<data::WindowPair>& windows, const eval::Matrix& pred) {
    std::ostringstream s;
    s << "disease_id,region_id,origin,step,date,target,forecast\n";
    for (std::size_t w = 0; w < windows.size(); ++w) {
        const auto& rec = records[windows[w].record];
        const data::NormState norm = rec.norm.value_or(data::NormState{});
        const std::size_t origin = windows[w].start + windows[w].x.size();
        for (std::size_t j = 0; j < pred[w].size(); ++j) {
            s << rec.disease_id << ',' << rec.region_id << ',' << data::format_date(rec.timestamps[origin - 1]) << ','
              << j + 1 << ',' << data::format_date(rec.timestamps[origin + j]) << ','
              << fmt(windows[w].y[j] * norm.std + norm.mean) << ',' << fmt(pred[w][j] * norm.std + norm.mean)
              << '\n';
        }
    }
    return s.str();
}

// ---------------------------------------------------------------- commands

int cmd_simulate(const Run& run) {
    const auto corpus = sim::make_corpus(run.cfg.seed(), run.cfg.corpus());
    std::ostringstream s;
    data::write_csv(s, sim::records_of(corpus));
    write_text(run, "corpus.csv", s.str());
    return 0;
}

int cmd_pretrain(const Run& run) {
    const Config& cfg = run.cfg;
    const auto records = normalized_records(cfg);
    std::vector<std::vector<double>> corpus;
    for (const auto& r : records) corpus.push_back(r.values);

    model::CapeModel init = cfg.get("model.checkpoint").empty()
                                ? model::CapeModel(cfg.model(), derive_seed(cfg.seed(), kInitStream))
                                : require_checkpoint(cfg, "pretrain").model;
    const auto r = train::pretrain(std::move(init), corpus, cfg.pretrain_options());

    std::ostringstream h;
    h << "epoch,phase,train_total,train_recon,train_contrastive,train_align,steps,ngm_skipped,val_recon,"
         "val_masked_recon\n";
    for (const auto& e : r.history) {
        h << e.epoch << ',' << train::phase_name(e.phase) << ',' << fmt(e.train_total) << ',' << fmt(e.train_recon)
          << ',' << fmt(e.train_contrastive) << ',' << fmt(e.train_align) << ',' << e.steps << ',' << e.ngm_skipped
          << ',' << fmt(e.val_recon) << ',' << fmt(e.val_masked_recon) << '\n';
    }
    write_text(run, "pretrain_history.csv", h.str());

    ckpt::Checkpoint c{r.model, run_meta(run, "pretrain"), norm_states(records), r.optimizer};
    c.meta["initial_val_recon"] = fmt(r.initial_val.recon);
    c.meta["best_val_recon"] = fmt(r.best_val);
    c.meta["best_epoch"] = r.best_epoch ? std::to_string(*r.best_epoch) : "initial";
    c.meta["epochs_run"] = std::to_string(r.history.size());
    write_text(run, "pretrain.ckpt", ckpt::serialize(c));

    std::cout << "validation reconstruction MSE " << fmt(r.initial_val.recon) << " -> " << fmt(r.best_val) << '\n';
    if (r.diverged) {
        std::cerr << "error: " << r.message << '\n';
        return 2;
    }
    return 0;
}

int cmd_finetune(const Run& run) {
    const Config& cfg = run.cfg;
    const ckpt::Checkpoint start = require_checkpoint(cfg, "finetune");
    const auto records = normalized_records(cfg);
    const auto r = train::finetune(start.model, records, cfg.finetune_options());
    for (const auto& w : r.warnings) {
        std::cerr << "warning: " << w << '\n';
    }

    std::ostringstream h;
    h << "epoch,train_total,train_mse,train_align,steps,val_mse\n";
    for (const auto& e : r.history) {
        h << e.epoch << ',' << fmt(e.train_total) << ',' << fmt(e.train_mse) << ',' << fmt(e.train_align) << ','
          << e.steps << ',' << fmt(e.val_mse) << '\n';
    }
    write_text(run, "finetune_history.csv", h.str());

    ckpt::Checkpoint c{r.model, run_meta(run, "finetune"), norm_states(records), std::nullopt};
    c.meta["initial_val_mse"] = fmt(r.initial_val_mse);
    c.meta["best_val_mse"] = fmt(r.best_val);
    c.meta["best_epoch"] = r.best_epoch ? std::to_string(*r.best_epoch) : "initial";
    write_text(run, "finetune.ckpt", ckpt::serialize(c));

    const auto& m = r.model;
    const auto reports = horizon_metrics(cfg, records, m.config().T, [&](const auto& ws, std::size_t H) {
        return rows_of(train::predict_horizon(m, ws, H), H);
    });
    write_text(run, "finetune_metrics.csv", metrics_text(reports));
    if (r.diverged) {
        std::cerr << "error: " << r.message << '\n';
        return 2;
    }
    return 0;
}

int cmd_forecast(const Run& run) {
    const Config& cfg = run.cfg;
    const model::CapeModel m = require_checkpoint(cfg, "forecast").model;
    const auto records = normalized_records(cfg);
    const std::size_t T = m.config().T;
    const std::size_t h = m.config().horizon;
    const auto ws = train::make_window_set(records, T, h, cfg.get_size("data.stride"), cfg.split());
    if (ws.test.empty()) {
        throw ValidationError("forecast: no test windows of length " + std::to_string(T + h));
    }
    write_text(run, "forecasts.csv", forecasts_text(records, ws.test, rows_of(train::predict_windows(m, ws.test), h)));
    const auto reports = horizon_metrics(cfg, records, T, [&](const auto& windows, std::size_t H) {
        return rows_of(train::predict_horizon(m, windows, H), H);
    });
    write_text(run, "forecast_metrics.csv", metrics_text(reports));
    return 0;
}

eval::Matrix zero_shot_rows(const model::CapeModel& m, const std::vector<data::WindowPair>& windows, std::size_t H) {
    eval::Matrix out;
    out.reserve(windows.size());
    for (const auto& w : windows) out.push_back(m.zero_shot_forecast(w.x, H));
    return out;
}

int cmd_zeroshot(const Run& run) {
    const Config& cfg = run.cfg;
    const model::CapeModel m = require_checkpoint(cfg, "zeroshot").model;
    const auto records = normalized_records(cfg);
    const std::size_t T = m.config().T;
    const std::size_t H = cfg.get_size("zeroshot.horizon");
    const auto ws = train::make_window_set(records, T, H, cfg.get_size("data.stride"), cfg.split());
    if (ws.test.empty()) {
        throw ValidationError("zeroshot: no test windows of length " + std::to_string(T + H));
    }
    const eval::Matrix pred = zero_shot_rows(m, ws.test, H);
    write_text(run, "zeroshot_forecasts.csv", forecasts_text(records, ws.test, pred));

    const auto ours = eval::forecast_metrics(pred, targets_of(ws.test));
    const auto base = eval::naive_baselines(ws.test);
    std::size_t wins = 0;
    for (std::size_t i = 0; i < ours.window_mse.size(); ++i) {
        wins += ours.window_mse[i] < base.mean.window_mse[i] ? 1 : 0;
    }
    std::ostringstream b;
    b << "predictor,horizon,mse,mae,windows,windows_beating_mean\n"
      << "zeroshot," << H << ',' << fmt(ours.mse) << ',' << fmt(ours.mae) << ',' << ours.n_windows << ',' << wins
      << '\n'
      << "mean," << H << ',' << fmt(base.mean.mse) << ',' << fmt(base.mean.mae) << ',' << base.mean.n_windows
      << ",\n"
      << "persistence," << H << ',' << fmt(base.persistence.mse) << ',' << fmt(base.persistence.mae) << ','
      << base.persistence.n_windows << ",\n";
    write_text(run, "zeroshot_baselines.csv", b.str());

    const auto reports = horizon_metrics(cfg, records, T, [&](const auto& windows, std::size_t horizon) {
        return zero_shot_rows(m, windows, horizon);
    });
    write_text(run, "zeroshot_metrics.csv", metrics_text(reports));
    return 0;
}

std::vector<std::size_t> group_or(const Config& cfg, const std::string& key, const std::vector<std::size_t>& fallback,
                                  std::size_t K) {
    const auto items = cfg.get_list(key);
    if (items.empty()) {
        return fallback;
    }
    std::vector<std::size_t> out;
    for (const auto& s : items) {
        std::size_t v = 0;
        auto r = std::from_chars(s.data(), s.data() + s.size(), v);
        if (r.ec != std::errc{} || r.ptr != s.data() + s.size() || v >= K) {
            throw ValidationError("config " + key + ": '" + s + "' is not a prototype index below " +
                                  std::to_string(K));
        }
        out.push_back(v);
    }
    return out;
}

std::string join(const std::vector<std::size_t>& v, char sep) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i > 0) out += sep;
        out += std::to_string(v[i]);
    }
    return out;
}

int cmd_analyze(const Run& run) {
    const Config& cfg = run.cfg;
    const model::CapeModel m = require_checkpoint(cfg, "analyze").model;
    const auto records = normalized_records(cfg);
    const std::size_t T = m.config().T;

    // datasets are diseases, labelled in sorted order
    std::map<std::string, int> label_of;
    for (const auto& r : records) label_of.emplace(r.disease_id, 0);
    int next = 0;
    for (auto& [name, label] : label_of) label = next++;
    std::vector<std::string> names;
    for (const auto& [name, label] : label_of) names.push_back(name);

    const auto ws = train::make_window_set(records, T, 1, cfg.get_size("data.stride"), cfg.split());
    auto lookbacks = [](const std::vector<data::WindowPair>& w) {
        std::vector<std::vector<double>> out;
        for (const auto& p : w) out.push_back(p.x);
        return out;
    };
    const eval::Matrix train_emb = eval::window_embeddings(m, lookbacks(ws.train));
    const eval::Matrix test_emb = eval::window_embeddings(m, lookbacks(ws.test));
    std::vector<std::string> notes;

    std::ostringstream cmd;
    cmd << "disease_id,train_windows,test_windows,cmd\n";
    for (const auto& [name, label] : label_of) {
        eval::Matrix a, b;
        for (std::size_t i = 0; i < ws.train.size(); ++i) {
            if (records[ws.train[i].record].disease_id == name) a.push_back(train_emb[i]);
        }
        for (std::size_t i = 0; i < ws.test.size(); ++i) {
            if (records[ws.test[i].record].disease_id == name) b.push_back(test_emb[i]);
        }
        if (a.empty() || b.empty()) {
            notes.push_back("cmd omitted for " + name + ": no train or test windows");
            continue;
        }
        cmd << name << ',' << a.size() << ',' << b.size() << ',' << fmt(eval::cmd_score(a, b)) << '\n';
    }
    write_text(run, "cmd.csv", cmd.str());

    eval::Matrix all = train_emb;
    all.insert(all.end(), test_emb.begin(), test_emb.end());
    std::vector<int> labels;
    for (const auto& w : ws.train) labels.push_back(label_of.at(records[w.record].disease_id));
    for (const auto& w : ws.test) labels.push_back(label_of.at(records[w.record].disease_id));
    std::ostringstream dbi;
    dbi << "dataset_a,dataset_b,dbi\n";
    if (names.size() < 2) {
        notes.push_back("single dataset (" + names.front() + "): DBI and the pairwise DBI matrix are omitted");
    } else {
        dbi << "all,all," << fmt(eval::dbi_score(all, labels)) << '\n';
        const auto pw = eval::dbi_pairwise(all, labels);
        for (std::size_t i = 0; i < pw.labels.size(); ++i) {
            for (std::size_t j = i + 1; j < pw.labels.size(); ++j) {
                dbi << names[static_cast<std::size_t>(pw.labels[i])] << ','
                    << names[static_cast<std::size_t>(pw.labels[j])] << ',' << fmt(pw.values[i][j]) << '\n';
            }
        }
    }
    write_text(run, "dbi.csv", dbi.str());

    if (cfg.get("data.csv").empty()) {
        const std::size_t K = m.config().K;
        const auto roles = eval::sird_groups_from_roles(m.config().roles);
        const eval::SirdGroups groups{group_or(cfg, "analyze.group_s", roles.s, K),
                                      group_or(cfg, "analyze.group_i", roles.i, K),
                                      group_or(cfg, "analyze.group_r", roles.r, K),
                                      group_or(cfg, "analyze.group_d", roles.d, K)};
        const auto spec = cfg.corpus();
        const auto a = eval::sird_alignment(m, sim::make_corpus(cfg.seed(), spec), spec, groups, cfg.split().train,
                                            m.config().patch_len);
        const std::vector<std::size_t>* sets[4] = {&groups.s, &groups.i, &groups.r, &groups.d};
        std::ostringstream al;
        al << "compartment,prototypes,spearman,windows,defined_windows\n";
        for (std::size_t c = 0; c < 4; ++c) {
            const auto& e = a.entries[c];
            al << e.compartment << ',' << join(*sets[c], ' ') << ',' << (e.spearman ? fmt(*e.spearman) : "")
               << ',' << e.n_windows << ',' << e.n_defined << '\n';
        }
        write_text(run, "alignment.csv", al.str());
        std::ostringstream tr;
        tr << "group,mean_first_difference,windows\nmono_inc," << fmt(a.mono_inc_trend) << ',' << a.trend_windows
           << '\n';
        write_text(run, "trend.csv", tr.str());
    } else {
        notes.push_back("alignment omitted: compartments are only known for the synthetic corpus");
    }

    std::string note_text;
    for (const auto& n : notes) {
        std::cout << "note: " << n << '\n';
        note_text += n + '\n';
    }
    write_text(run, "analyze_notes.txt", note_text);
    return 0;
}

int cmd_gradcheck(const Run& run) {
    gradcheck::SuiteOptions opt;
    opt.first_seed = run.cfg.seed();
    opt.seeds = run.cfg.get_size("gradcheck.seeds");
    const auto rep = gradcheck::run_suite(opt);
    std::ostringstream s;
    s << "case,seed,max_rel_error,max_abs_error,coordinates,passed\n";
    for (const auto& c : rep.cases) {
        s << c.name << ',' << c.seed << ',' << fmt(c.report.max_rel_error) << ',' << fmt(c.report.max_abs_error)
          << ',' << c.report.coordinates << ',' << (c.report.passed ? 1 : 0) << '\n';
        if (!c.report.passed) {
            std::cout << "FAIL " << c.name << " seed " << c.seed << " rel err " << c.report.max_rel_error << " at "
                      << c.report.worst_coordinate << ' ' << c.report.message << '\n';
        }
    }
    write_text(run, "gradcheck.csv", s.str());
    std::cout << (rep.passed() ? "PASS" : "FAIL") << ' ' << rep.cases.size() << " cases, max relative error "
              << rep.max_rel_error() << '\n';
    return rep.passed() ? 0 : 2;
}

std::string help_footer() {
    std::ostringstream s;
    s << "\nConfiguration keys (set in --config files as key = value, or as --key VALUE):\n";
    for (const auto& k : config_keys()) {
        s << "  " << k.name << " (default: \"" << k.default_value << "\")\n      " << k.help << '\n';
    }
    return s.str();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Compartmental prototype encoder for epidemic forecasting"};
    app.require_subcommand(1, 1);
    app.footer(help_footer());

    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out_dir = "runs";
    std::map<std::string, std::string> overrides;

    using Command = int (*)(const Run&);
    const std::vector<std::pair<std::string, std::pair<std::string, Command>>> commands = {
        {"simulate", {"write the synthetic SIRD corpus as CSV", cmd_simulate}},
        {"pretrain", {"self-supervised pretraining", cmd_pretrain}},
        {"finetune", {"forecast finetuning from model.checkpoint", cmd_finetune}},
        {"forecast", {"forecast test windows with model.checkpoint", cmd_forecast}},
        {"zeroshot", {"frozen zero-shot forecasting with model.checkpoint", cmd_zeroshot}},
        {"analyze", {"CMD, DBI and prototype alignment of model.checkpoint", cmd_analyze}},
        {"gradcheck", {"finite-difference audit of every gradient", cmd_gradcheck}},
    };
    Command chosen = nullptr;
    for (const auto& [name, spec] : commands) {
        CLI::App* sub = app.add_subcommand(name, spec.first);
        sub->add_option("--config", config_path, "key = value configuration file");
        sub->add_option("--seed", seed, "master random seed (overrides the seed key)");
        sub->add_option("--out", out_dir, "output root; runs land in <out>/<config hash>")->capture_default_str();
        for (const auto& k : config_keys()) {
            if (std::string(k.name) == "seed") continue;
            sub->add_option_function<std::string>(
                std::string("--") + k.name, [&overrides, key = std::string(k.name)](const std::string& v) {
                    overrides[key] = v;
                },
                k.help);
        }
        sub->footer(help_footer());
        sub->callback([&chosen, fn = spec.second] { chosen = fn; });
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        Run run;
        if (!config_path.empty()) {
            run.cfg.merge_file(config_path);
        }
        for (const auto& [key, value] : overrides) {
            run.cfg.set(key, value);
        }
        if (seed) {
            run.cfg.set("seed", std::to_string(*seed));
        }
        run.cfg.model();  // fail early on an inconsistent model section
        run.rel = run.cfg.hash();
        run.dir = fs::path(out_dir) / run.rel;
        std::error_code ec;
        fs::create_directories(run.dir, ec);
        if (ec) {
            throw Error("cannot create run directory under " + out_dir + ": " + ec.message());
        }
        std::cout << "run " << run.rel << '\n';
        write_text(run, "config.txt", run.cfg.serialize());
        return chosen(run);
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
}
