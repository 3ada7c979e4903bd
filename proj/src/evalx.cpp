#include "hoplab/evalx.hpp"

#include <sstream>

#include <nlohmann/json.hpp>

namespace hoplab {

std::string prompt_key(const PromptSpec& prompt) {
    std::string key;
    for (const auto& t : prompt.tokens) {
        if (!key.empty()) key += '|';
        key += t;
    }
    return key;
}

Baseline snapshot_baseline(const Model& model, const Benchmark& bench) {
    Baseline b;
    for (const auto& p : bench.neighborhood) {
        b.neighborhood_answers[prompt_key(p)] = answer_and_prob(model, p).token;
    }
    return b;
}

void save_baseline(const Baseline& baseline, const std::string& path) {
    atomic_write_text(path,
                      nlohmann::json{{"neighborhood_answers", baseline.neighborhood_answers}}
                              .dump(2) +
                          "\n");
}

Baseline load_baseline(const std::string& path) {
    Baseline b;
    auto j = nlohmann::json::parse(read_text_file(path));
    b.neighborhood_answers =
        j.at("neighborhood_answers").get<std::map<std::string, std::string>>();
    return b;
}

namespace {

// probability-comparison success: P(edited answer) > P(unedited answer)
bool prob_comparison_success(const Model& model, const PromptSpec& p) {
    const Answer ans = answer_and_prob(model, p);
    const int edited = model.vocab.id(p.answer);
    const int unedited = model.vocab.id(p.answer_unedited);
    return ans.probs(edited) > ans.probs(unedited);
}

}  // namespace

MetricsReport compute_metrics(const Model& model, const Benchmark& bench,
                              const Baseline& baseline) {
    MetricsReport rep;

    int eff_ok = 0;
    for (const auto& e : bench.edits) {
        if (prob_comparison_success(model, e.single_hop_prompt)) ++eff_ok;
    }
    rep.efficacy_total = static_cast<int>(bench.edits.size());
    rep.efficacy = rep.efficacy_total > 0 ? static_cast<double>(eff_ok) / rep.efficacy_total : 0.0;

    int par_ok = 0;
    for (const auto& p : bench.paraphrase) {
        if (prob_comparison_success(model, p)) ++par_ok;
    }
    rep.paraphrase_total = static_cast<int>(bench.paraphrase.size());
    rep.paraphrase =
        rep.paraphrase_total > 0 ? static_cast<double>(par_ok) / rep.paraphrase_total : 0.0;

    int spec_ok = 0;
    for (const auto& p : bench.neighborhood) {
        auto it = baseline.neighborhood_answers.find(prompt_key(p));
        if (it == baseline.neighborhood_answers.end()) {
            throw MissingBaseline("no pre-edit answer recorded for: " + prompt_key(p));
        }
        if (answer_and_prob(model, p).token == it->second) ++spec_ok;
    }
    rep.specificity_total = static_cast<int>(bench.neighborhood.size());
    rep.specificity =
        rep.specificity_total > 0 ? static_cast<double>(spec_ok) / rep.specificity_total : 1.0;

    int mh_ok = 0, mh_unedited = 0, mh_total = 0;
    auto eval_multi = [&](const std::vector<PromptSpec>& list, int* ok_out) {
        int ok = 0;
        for (const auto& p : list) {
            const std::string ans = answer_and_prob(model, p).token;
            const bool edited_ok = ans == p.answer;
            const bool unedited_ok = ans == p.answer_unedited;
            if (edited_ok) ++ok;
            if (unedited_ok) ++mh_unedited;
            ++mh_total;
            const std::string pos = to_string(classify_edit_position(p.hops, p.edit_positions));
            auto& ps = rep.by_position[pos];
            ++ps.count;
            if (edited_ok) ++ps.correct;
            auto& hs = rep.by_hops[p.hops];
            ++hs.count;
            if (edited_ok) ++hs.correct;
            auto& es = rep.by_edits[static_cast<int>(p.edit_positions.size())];
            ++es.count;
            if (edited_ok) ++es.correct;
        }
        if (ok_out) *ok_out = ok;
        mh_ok += ok;
    };
    int pre_ok = 0, post_ok = 0;
    eval_multi(bench.d_pre, &pre_ok);
    eval_multi(bench.d_post, &post_ok);
    eval_multi(bench.multi_hop, nullptr);
    rep.multi_hop_total = mh_total;
    rep.multi_hop_acc = mh_total > 0 ? static_cast<double>(mh_ok) / mh_total : 0.0;
    rep.unedited_answer_rate = mh_total > 0 ? static_cast<double>(mh_unedited) / mh_total : 0.0;
    rep.d_pre_acc =
        bench.d_pre.empty() ? 0.0 : static_cast<double>(pre_ok) / static_cast<double>(bench.d_pre.size());
    rep.d_post_acc = bench.d_post.empty()
                         ? 0.0
                         : static_cast<double>(post_ok) / static_cast<double>(bench.d_post.size());
    return rep;
}

namespace {

nlohmann::json slice_json(const SliceStat& s) {
    return nlohmann::json{{"count", s.count}, {"correct", s.correct}, {"rate", s.rate()}};
}

nlohmann::json metrics_json_obj(const MetricsReport& r) {
    nlohmann::json j;
    j["schema"] = 1;
    j["multi_hop_acc"] = r.multi_hop_acc;
    j["efficacy"] = r.efficacy;
    j["paraphrase"] = r.paraphrase;
    j["specificity"] = r.specificity;
    j["unedited_answer_rate"] = r.unedited_answer_rate;
    j["d_pre_acc"] = r.d_pre_acc;
    j["d_post_acc"] = r.d_post_acc;
    j["multi_hop_total"] = r.multi_hop_total;
    j["efficacy_total"] = r.efficacy_total;
    j["paraphrase_total"] = r.paraphrase_total;
    j["specificity_total"] = r.specificity_total;
    for (const auto& [k, v] : r.by_position) j["by_position"][k] = slice_json(v);
    for (const auto& [k, v] : r.by_hops) j["by_hops"][std::to_string(k)] = slice_json(v);
    for (const auto& [k, v] : r.by_edits) j["by_edits"][std::to_string(k)] = slice_json(v);
    return j;
}

}  // namespace

std::string metrics_to_json(const MetricsReport& report) {
    return metrics_json_obj(report).dump(2) + "\n";
}

std::string breakdown_report(const MetricsReport& report, const Benchmark& bench) {
    nlohmann::json j = metrics_json_obj(report);
    // weighted reconstruction of the multi-hop total from the position slices
    double weighted = 0.0;
    int total = 0;
    for (const auto& [k, v] : report.by_position) {
        weighted += v.rate() * v.count;
        total += v.count;
    }
    j["reconstruction"] = {
        {"position_weighted_acc", total > 0 ? weighted / total : 0.0},
        {"position_total", total},
        {"split_sizes",
         {{"edits", bench.edits.size()},
          {"d_pre", bench.d_pre.size()},
          {"d_post", bench.d_post.size()},
          {"multi_hop", bench.multi_hop.size()},
          {"paraphrase", bench.paraphrase.size()},
          {"neighborhood", bench.neighborhood.size()}}}};
    return j.dump(2) + "\n";
}

std::string per_case_csv(const Model& model, const Benchmark& bench, const Baseline& baseline) {
    std::ostringstream out;
    out << "case_id,split,hops,n_edits,position,answer,answered,edited_correct,unedited_match\n";
    int case_id = 0;
    auto emit = [&](const char* split, const PromptSpec& p) {
        const std::string ans = answer_and_prob(model, p).token;
        std::string pos = "-";
        if (!p.edit_positions.empty()) {
            pos = to_string(classify_edit_position(p.hops, p.edit_positions));
        }
        out << case_id++ << ',' << split << ',' << p.hops << ',' << p.edit_positions.size() << ','
            << pos << ',' << p.answer << ',' << ans << ',' << (ans == p.answer ? 1 : 0) << ','
            << (ans == p.answer_unedited ? 1 : 0) << "\n";
    };
    for (const auto& e : bench.edits) emit("edit", e.single_hop_prompt);
    for (const auto& p : bench.d_pre) emit("d_pre", p);
    for (const auto& p : bench.d_post) emit("d_post", p);
    for (const auto& p : bench.multi_hop) emit("multi_hop", p);
    for (const auto& p : bench.paraphrase) emit("paraphrase", p);
    for (const auto& p : bench.neighborhood) {
        const std::string ans = answer_and_prob(model, p).token;
        auto it = baseline.neighborhood_answers.find(prompt_key(p));
        const std::string base = it == baseline.neighborhood_answers.end() ? "" : it->second;
        out << case_id++ << ",neighborhood," << p.hops << ",0,-," << p.answer << ',' << ans << ','
            << (ans == p.answer ? 1 : 0) << ',' << (ans == base ? 1 : 0) << "\n";
    }
    return out.str();
}

}  // namespace hoplab
