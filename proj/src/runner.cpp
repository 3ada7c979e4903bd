#include "hoplab/runner.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "hoplab/checkpoint.hpp"
#include "hoplab/intervene.hpp"
#include "hoplab/lens.hpp"

namespace hoplab {

namespace fs = std::filesystem;

int max_threads() {
    if (const char* env = std::getenv("HOPLAB_THREADS")) {
        const int v = std::atoi(env);
        if (v >= 1) return v;
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

namespace {

// Deterministic parallel map: worker i only writes slot i.
template <class F>
void parallel_for(int n, F f) {
    const int nt = std::min(max_threads(), n);
    if (nt <= 1) {
        for (int i = 0; i < n; ++i) f(i);
        return;
    }
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(nt));
    for (int t = 0; t < nt; ++t) {
        pool.emplace_back([&]() {
            for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) f(i);
        });
    }
    for (auto& th : pool) th.join();
}

struct RunPaths {
    std::string out, checkpoints, probes, reports;
    explicit RunPaths(const std::string& out_dir) : out(out_dir) {
        checkpoints = out + "/checkpoints";
        probes = out + "/probes";
        reports = out + "/reports";
    }
    std::string world_dir() const { return out; }
    std::string corpus() const { return out + "/corpus.jsonl"; }
    std::string vocab() const { return out + "/vocab.json"; }
    std::string benchmark() const { return out + "/benchmark.json"; }
    std::string config_copy() const { return out + "/run_config.txt"; }
    std::string base_ckpt() const { return checkpoints + "/base.ckpt"; }
    std::string edited_ckpt(const std::string& mode) const {
        return checkpoints + "/edited_" + mode + ".ckpt";
    }
    std::string lock() const { return out + "/.lock"; }
};

// One run directory, one process at a time.
class LockFile {
public:
    explicit LockFile(const std::string& path) : path_(path) {
        const int fd = ::open(path.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd < 0) {
            throw ConfigError("run directory is locked (remove " + path + " if stale)");
        }
        const std::string pid = std::to_string(::getpid()) + "\n";
        [[maybe_unused]] ssize_t n = ::write(fd, pid.data(), pid.size());
        ::close(fd);
    }
    ~LockFile() { ::unlink(path_.c_str()); }
    LockFile(const LockFile&) = delete;
    LockFile& operator=(const LockFile&) = delete;

private:
    std::string path_;
};

void write_config_copy(const RunConfig& cfg, const RunPaths& paths) {
    atomic_write_text(paths.config_copy(), cfg.to_text());
}

// ----------------------------- gen -----------------------------

void cmd_gen(const RunConfig& cfg, const RunPaths& paths) {
    World world = gen_world(cfg.world_entities, cfg.world_relations, cfg.world_seed());
    save_world(world, paths.world_dir());
    Vocab::build(world).save(paths.vocab());
    save_corpus(gen_corpus(world, cfg.inferred_frac), paths.corpus());
    Benchmark bench = gen_edit_benchmark(world, cfg.n_edits, cfg.bench_seed());
    save_benchmark(bench, paths.benchmark());

    // the backlink queries the support construction would issue, as text
    std::ostringstream sparql;
    for (const auto& e : bench.edits) {
        sparql << "# supports for " << e.base.s << "\n"
               << emit_sparql(e.base.s, world.relations) << "\n";
    }
    atomic_write_text(paths.out + "/sparql_queries.txt", sparql.str());
    write_config_copy(cfg, paths);
}

// ----------------------------- train -----------------------------

void cmd_train(const RunConfig& cfg, const RunPaths& paths) {
    World world = load_world(paths.world_dir());
    Vocab vocab = Vocab::load(paths.vocab());
    Corpus corpus = load_corpus(paths.corpus());

    ModelConfig mc = cfg.model;
    mc.seed = cfg.model_seed();
    Model model = Model::init(mc, vocab);
    TrainConfig tc = cfg.train;
    tc.seed = cfg.train_seed();
    TrainReport rep = train(model, corpus, tc);

    save_checkpoint(model, paths.base_ckpt());
    nlohmann::json jrep{{"steps", rep.steps},
                        {"final_loss", rep.final_loss},
                        {"atomic_acc", rep.atomic_acc},
                        {"twohop_train_acc", rep.twohop_train_acc},
                        {"heldout_inferred_acc", rep.heldout_inferred_acc}};
    jrep["eval_trace"] = nlohmann::json::array();
    for (const auto& pt : rep.eval_trace) {
        jrep["eval_trace"].push_back(nlohmann::json{
            {"step", pt.step}, {"atomic_acc", pt.atomic_acc}, {"heldout_acc", pt.heldout_acc}});
    }
    atomic_write_text(paths.reports + "/train_report.json", jrep.dump(2) + "\n");

    // pre-edit answers, snapshotted while the weights are untouched
    Benchmark bench = load_benchmark(paths.benchmark());
    save_baseline(snapshot_baseline(model, bench), paths.reports + "/baseline.json");
    write_config_copy(cfg, paths);
}

// ----------------------------- probe -----------------------------

struct ProbeCase {
    PromptSpec prompt;
    int subject_token;  // tracked subject (implicit s2 for two-hop)
    int answer_token;
    int control_token;
};

std::string effect_csv(const std::vector<std::vector<double>>& exp_rows,
                       const std::vector<std::vector<double>>& ctl_rows) {
    std::ostringstream out;
    out << "layer,case,value,group\n";
    for (size_t c = 0; c < exp_rows.size(); ++c) {
        for (size_t l = 0; l < exp_rows[c].size(); ++l) {
            out << (l + 1) << ',' << c << ',' << exp_rows[c][l] << ",experimental\n";
        }
    }
    for (size_t c = 0; c < ctl_rows.size(); ++c) {
        for (size_t l = 0; l < ctl_rows[c].size(); ++l) {
            out << (l + 1) << ',' << c << ',' << ctl_rows[c][l] << ",control\n";
        }
    }
    return out.str();
}

std::string curve_csv(const std::vector<double>& values) {
    std::ostringstream out;
    out << "layer,value\n";
    for (size_t l = 0; l < values.size(); ++l) out << (l + 1) << ',' << values[l] << "\n";
    return out.str();
}

std::vector<double> column_means(const std::vector<std::vector<double>>& rows, int n_layers) {
    std::vector<double> mean(static_cast<size_t>(n_layers), 0.0);
    if (rows.empty()) return mean;
    for (const auto& r : rows) {
        for (int l = 0; l < n_layers; ++l) mean[static_cast<size_t>(l)] += r[static_cast<size_t>(l)];
    }
    for (auto& v : mean) v /= static_cast<double>(rows.size());
    return mean;
}

// Sweep one case set; returns per-case IE rows and accumulates curves.
struct SweepResult {
    std::vector<std::vector<double>> ie_h_exp, ie_h_ctl, ie_m_exp, ie_m_ctl;
    std::vector<double> info_subject_mean, info_answer_mean;
    double mean_peak_subject{0.0}, mean_peak_answer{0.0};
};

SweepResult sweep_cases(const Model& model, const std::vector<ProbeCase>& cases) {
    const int L = model.cfg.n_layers;
    SweepResult res;
    const int n = static_cast<int>(cases.size());
    res.ie_h_exp.assign(static_cast<size_t>(n), {});
    res.ie_h_ctl.assign(static_cast<size_t>(n), {});
    res.ie_m_exp.assign(static_cast<size_t>(n), {});
    res.ie_m_ctl.assign(static_cast<size_t>(n), {});
    std::vector<std::vector<double>> info_s(static_cast<size_t>(n)), info_a(static_cast<size_t>(n));
    std::vector<int> peak_s(static_cast<size_t>(n)), peak_a(static_cast<size_t>(n));

    parallel_for(n, [&](int i) {
        const ProbeCase& pc = cases[static_cast<size_t>(i)];
        const std::vector<int> toks = model.vocab.encode(pc.prompt.tokens);
        const int last = static_cast<int>(toks.size()) - 1;
        Trace tr = forward_trace(model, toks);
        InfoCurve cs = info_curve(model.p.w_u, tr, pc.subject_token, last, LensSource::Hidden);
        InfoCurve ca = info_curve(model.p.w_u, tr, pc.answer_token, last, LensSource::Hidden);
        info_s[static_cast<size_t>(i)] = cs.values;
        info_a[static_cast<size_t>(i)] = ca.values;
        peak_s[static_cast<size_t>(i)] = peak_layer(cs);
        peak_a[static_cast<size_t>(i)] = peak_layer(ca);

        auto& he = res.ie_h_exp[static_cast<size_t>(i)];
        auto& hc = res.ie_h_ctl[static_cast<size_t>(i)];
        auto& me = res.ie_m_exp[static_cast<size_t>(i)];
        auto& mc = res.ie_m_ctl[static_cast<size_t>(i)];
        he.resize(static_cast<size_t>(L));
        hc.resize(static_cast<size_t>(L));
        me.resize(static_cast<size_t>(L));
        mc.resize(static_cast<size_t>(L));
        for (int l = 1; l <= L; ++l) {
            InterventionSpec exp_h{l, last, {pc.subject_token}, pc.answer_token,
                                   InterventionSpec::Mode::Hidden, pc.control_token};
            InterventionSpec ctl_h{l, last, {pc.control_token}, pc.answer_token,
                                   InterventionSpec::Mode::Hidden, pc.control_token};
            he[static_cast<size_t>(l - 1)] = intervene_layer(model, pc.prompt, l, exp_h).effect;
            hc[static_cast<size_t>(l - 1)] = intervene_layer(model, pc.prompt, l, ctl_h).effect;
            InterventionSpec exp_m = exp_h;
            exp_m.mode = InterventionSpec::Mode::Mlp;
            InterventionSpec ctl_m = ctl_h;
            ctl_m.mode = InterventionSpec::Mode::Mlp;
            me[static_cast<size_t>(l - 1)] = intervene_mlp(model, pc.prompt, l, exp_m).effect;
            mc[static_cast<size_t>(l - 1)] = intervene_mlp(model, pc.prompt, l, ctl_m).effect;
        }
    });

    res.info_subject_mean = column_means(info_s, L);
    res.info_answer_mean = column_means(info_a, L);
    double ps = 0.0, pa = 0.0;
    for (int i = 0; i < n; ++i) {
        ps += peak_s[static_cast<size_t>(i)];
        pa += peak_a[static_cast<size_t>(i)];
    }
    res.mean_peak_subject = n > 0 ? ps / n : 0.0;
    res.mean_peak_answer = n > 0 ? pa / n : 0.0;
    return res;
}

int pick_control(const World& world, const Vocab& vocab, Rng& rng, int subject_token,
                 int answer_token) {
    for (int tries = 0; tries < 1000; ++tries) {
        const int t = vocab.id(world.entities[static_cast<size_t>(rng.index(world.entities.size()))]);
        if (t != subject_token && t != answer_token) return t;
    }
    throw std::runtime_error("could not pick a control token");
}

}  // namespace

ProbeSummary run_probe(const Model& model, const World& world, const Corpus& corpus,
                       int probe_cases, uint64_t seed, const std::string& probes_dir) {
    const int L = model.cfg.n_layers;
    Rng rng(seed);

    // two-hop cases from the held-out compositions: the tracked subject is
    // the bridge entity, never present in the prompt
    std::vector<ProbeCase> two_hop;
    for (const auto& s : corpus.heldout_inferred) {
        if (static_cast<int>(two_hop.size()) >= probe_cases) break;
        const std::string& s1 = s[0];
        const std::string& r1 = s[1];
        const std::string& r2 = s[2];
        const std::string bridge = world.facts.object_of(s1, r1).value();
        ProbeCase pc;
        pc.prompt.tokens = {s1, r1, r2, kQueryToken};
        pc.prompt.answer = s.back();
        pc.prompt.answer_unedited = s.back();
        pc.prompt.subject_last_index = 0;
        pc.prompt.last_index = 3;
        pc.prompt.hops = 2;
        pc.subject_token = model.vocab.id(bridge);
        pc.answer_token = model.vocab.id(s.back());
        pc.control_token = pick_control(world, model.vocab, rng, pc.subject_token, pc.answer_token);
        two_hop.push_back(std::move(pc));
    }

    // single-hop control set: the subject is explicit in the prompt
    std::vector<ProbeCase> one_hop;
    {
        std::vector<Triple> facts = world.facts.triples();
        std::sort(facts.begin(), facts.end());
        Rng frng(seed ^ 0x0f0f0f0fULL);
        frng.shuffle(facts);
        for (const auto& t : facts) {
            if (static_cast<int>(one_hop.size()) >= probe_cases) break;
            if (t.s == t.o) continue;
            ProbeCase pc;
            pc.prompt.tokens = {t.s, t.r, kQueryToken};
            pc.prompt.answer = t.o;
            pc.prompt.answer_unedited = t.o;
            pc.prompt.subject_last_index = 0;
            pc.prompt.last_index = 2;
            pc.prompt.hops = 1;
            pc.subject_token = model.vocab.id(t.s);
            pc.answer_token = model.vocab.id(t.o);
            pc.control_token = pick_control(world, model.vocab, frng, pc.subject_token,
                                            pc.answer_token);
            one_hop.push_back(std::move(pc));
        }
    }

    SweepResult two = sweep_cases(model, two_hop);
    SweepResult one = sweep_cases(model, one_hop);

    ProbeSummary sum;
    sum.cases = static_cast<int>(two_hop.size());
    sum.mean_peak_subject = two.mean_peak_subject;
    sum.mean_peak_answer = two.mean_peak_answer;
    sum.ie_hidden_experimental = column_means(two.ie_h_exp, L);
    sum.ie_hidden_control = column_means(two.ie_h_ctl, L);
    sum.ie_mlp_experimental = column_means(two.ie_m_exp, L);
    sum.ie_mlp_control = column_means(two.ie_m_ctl, L);
    for (int l = 0; l + 2 < L; ++l) {
        bool all = true;
        for (int k = l; k < l + 3; ++k) {
            if (!(sum.ie_mlp_experimental[static_cast<size_t>(k)] >
                  sum.ie_mlp_control[static_cast<size_t>(k)])) {
                all = false;
                break;
            }
        }
        if (all) {
            sum.band_found = true;
            sum.band_start = l + 1;
            break;
        }
    }

    if (!probes_dir.empty()) {
        fs::create_directories(probes_dir);
        atomic_write_text(probes_dir + "/info_two_hop_subject.csv", curve_csv(two.info_subject_mean));
        atomic_write_text(probes_dir + "/info_two_hop_answer.csv", curve_csv(two.info_answer_mean));
        atomic_write_text(probes_dir + "/info_single_hop_subject.csv", curve_csv(one.info_subject_mean));
        atomic_write_text(probes_dir + "/info_single_hop_answer.csv", curve_csv(one.info_answer_mean));
        atomic_write_text(probes_dir + "/effect_hidden.csv", effect_csv(two.ie_h_exp, two.ie_h_ctl));
        atomic_write_text(probes_dir + "/effect_mlp.csv", effect_csv(two.ie_m_exp, two.ie_m_ctl));
        atomic_write_text(probes_dir + "/effect_hidden_single_hop.csv",
                          effect_csv(one.ie_h_exp, one.ie_h_ctl));
        atomic_write_text(probes_dir + "/effect_mlp_single_hop.csv",
                          effect_csv(one.ie_m_exp, one.ie_m_ctl));
        nlohmann::json j{{"cases", sum.cases},
                         {"mean_peak_subject", sum.mean_peak_subject},
                         {"mean_peak_answer", sum.mean_peak_answer},
                         {"ie_hidden_experimental", sum.ie_hidden_experimental},
                         {"ie_hidden_control", sum.ie_hidden_control},
                         {"ie_mlp_experimental", sum.ie_mlp_experimental},
                         {"ie_mlp_control", sum.ie_mlp_control},
                         {"band_found", sum.band_found},
                         {"band_start", sum.band_start},
                         {"single_hop", {{"mean_peak_subject", one.mean_peak_subject},
                                         {"mean_peak_answer", one.mean_peak_answer}}}};
        atomic_write_text(probes_dir + "/probe_summary.json", j.dump(2) + "\n");
    }
    return sum;
}

namespace {

void cmd_probe(const RunConfig& cfg, const RunPaths& paths) {
    World world = load_world(paths.world_dir());
    Vocab vocab = Vocab::load(paths.vocab());
    Corpus corpus = load_corpus(paths.corpus());
    Model model = load_checkpoint(paths.base_ckpt(), vocab);
    run_probe(model, world, corpus, cfg.probe_cases, cfg.seed ^ 0x9B0BEULL, paths.probes);
    write_config_copy(cfg, paths);
}

void cmd_edit(const RunConfig& cfg, const RunPaths& paths) {
    if (cfg.mode == "base") throw ConfigError("edit requires an edit mode, not 'base'");
    const EditMode mode = edit_mode_from_string(cfg.mode);
    World world = load_world(paths.world_dir());
    Vocab vocab = Vocab::load(paths.vocab());
    Corpus corpus = load_corpus(paths.corpus());
    Benchmark bench = load_benchmark(paths.benchmark());
    Model model = load_checkpoint(paths.base_ckpt(), vocab);

    EditReport report = run_ifmet(
        model, bench.edits, world.facts, corpus, cfg.stage1, cfg.stage2, cfg.hyper, mode,
        cfg.edit_seed(), [&](int stage, const Model& m) {
            save_checkpoint(m, paths.checkpoints + "/edited_" + cfg.mode + "_stage" +
                                   std::to_string(stage) + ".ckpt");
        });
    save_checkpoint(model, paths.edited_ckpt(cfg.mode));
    atomic_write_text(paths.reports + "/edit_report_" + cfg.mode + ".json",
                      edit_report_to_json(report));
    write_config_copy(cfg, paths);
}

void cmd_eval(const RunConfig& cfg, const RunPaths& paths) {
    Vocab vocab = Vocab::load(paths.vocab());
    Benchmark bench = load_benchmark(paths.benchmark());
    const std::string ckpt = cfg.mode == "base" ? paths.base_ckpt() : paths.edited_ckpt(cfg.mode);
    Model model = load_checkpoint(ckpt, vocab);
    Baseline baseline = load_baseline(paths.reports + "/baseline.json");

    MetricsReport rep = compute_metrics(model, bench, baseline);
    atomic_write_text(paths.reports + "/metrics_" + cfg.mode + ".json", metrics_to_json(rep));
    atomic_write_text(paths.reports + "/breakdown_" + cfg.mode + ".json",
                      breakdown_report(rep, bench));
    atomic_write_text(paths.reports + "/cases_" + cfg.mode + ".csv",
                      per_case_csv(model, bench, baseline));
    write_config_copy(cfg, paths);
}

void cmd_ablate(const RunConfig& cfg, const RunPaths& paths) {
    World world = load_world(paths.world_dir());
    Vocab vocab = Vocab::load(paths.vocab());
    Corpus corpus = load_corpus(paths.corpus());
    Benchmark bench = load_benchmark(paths.benchmark());
    Baseline baseline = load_baseline(paths.reports + "/baseline.json");

    const std::vector<std::string> modes = {"full",     "wo_first", "wo_multi",
                                            "wo_deeper", "wo_last",  "single_stage"};
    uint64_t base_checksum = 0;
    nlohmann::json table = nlohmann::json::array();
    for (const auto& mode_name : modes) {
        // a fresh base model per mode; never an edited checkpoint
        Model model = load_checkpoint(paths.base_ckpt(), vocab);
        if (base_checksum == 0) {
            base_checksum = model.weight_checksum();
        } else if (model.weight_checksum() != base_checksum) {
            throw std::runtime_error("base checkpoint changed during ablate");
        }
        EditReport er = run_ifmet(model, bench.edits, world.facts, corpus, cfg.stage1, cfg.stage2,
                                  cfg.hyper, edit_mode_from_string(mode_name), cfg.edit_seed());
        MetricsReport rep = compute_metrics(model, bench, baseline);
        atomic_write_text(paths.reports + "/ablate_" + mode_name + ".json", metrics_to_json(rep));
        atomic_write_text(paths.reports + "/edit_report_ablate_" + mode_name + ".json",
                          edit_report_to_json(er));
        table.push_back(nlohmann::json{{"mode", mode_name},
                                       {"multi_hop_acc", rep.multi_hop_acc},
                                       {"efficacy", rep.efficacy},
                                       {"paraphrase", rep.paraphrase},
                                       {"specificity", rep.specificity},
                                       {"d_pre_acc", rep.d_pre_acc},
                                       {"d_post_acc", rep.d_post_acc},
                                       {"unedited_answer_rate", rep.unedited_answer_rate},
                                       {"base_checksum", base_checksum}});
    }
    atomic_write_text(paths.reports + "/ablate_table.json", table.dump(2) + "\n");

    std::ostringstream csv;
    csv << "mode,multi_hop_acc,efficacy,paraphrase,specificity,d_pre_acc,d_post_acc,"
           "unedited_answer_rate\n";
    for (const auto& row : table) {
        csv << row.at("mode").get<std::string>() << ',' << row.at("multi_hop_acc").get<double>()
            << ',' << row.at("efficacy").get<double>() << ',' << row.at("paraphrase").get<double>()
            << ',' << row.at("specificity").get<double>() << ',' << row.at("d_pre_acc").get<double>()
            << ',' << row.at("d_post_acc").get<double>() << ','
            << row.at("unedited_answer_rate").get<double>() << "\n";
    }
    atomic_write_text(paths.reports + "/ablate_table.csv", csv.str());
    write_config_copy(cfg, paths);
}

void cmd_report(const RunConfig& cfg, const RunPaths& paths) {
    nlohmann::json bundle;
    bundle["config"] = cfg.to_text();
    auto add_json = [&](const char* key, const std::string& path) {
        if (fs::exists(path)) bundle[key] = nlohmann::json::parse(read_text_file(path));
    };
    add_json("train_report", paths.reports + "/train_report.json");
    add_json("probe_summary", paths.probes + "/probe_summary.json");
    add_json("ablate_table", paths.reports + "/ablate_table.json");
    bundle["metrics"] = nlohmann::json::object();
    if (fs::exists(paths.reports)) {
        std::vector<std::string> names;
        for (const auto& entry : fs::directory_iterator(paths.reports)) {
            names.push_back(entry.path().filename().string());
        }
        std::sort(names.begin(), names.end());
        for (const auto& name : names) {
            if (name.rfind("metrics_", 0) == 0 && name.size() > 13) {
                const std::string mode = name.substr(8, name.size() - 13);
                bundle["metrics"][mode] = nlohmann::json::parse(read_text_file(paths.reports + "/" + name));
            }
        }
    }
    atomic_write_text(paths.reports + "/run_report.json", bundle.dump(2) + "\n");
}

}  // namespace

int run_experiment(const RunConfig& config, const std::string& command) {
    try {
        RunPaths paths(config.out_dir);
        fs::create_directories(paths.out);
        fs::create_directories(paths.checkpoints);
        fs::create_directories(paths.probes);
        fs::create_directories(paths.reports);
        LockFile lock(paths.lock());

        if (command == "gen") cmd_gen(config, paths);
        else if (command == "train") cmd_train(config, paths);
        else if (command == "probe") cmd_probe(config, paths);
        else if (command == "edit") cmd_edit(config, paths);
        else if (command == "eval") cmd_eval(config, paths);
        else if (command == "ablate") cmd_ablate(config, paths);
        else if (command == "report") cmd_report(config, paths);
        else throw ConfigError("unknown command: " + command);
        return 0;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const MissingArtifact& e) {
        std::cerr << "missing artifact: " << e.what() << "\n";
        return 2;
    } catch (const MissingBaseline& e) {
        std::cerr << "missing artifact: " << e.what() << "\n";
        return 2;
    } catch (const Diverged& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 3;
    } catch (const SingularSystem& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace hoplab
