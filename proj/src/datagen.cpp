#include "hoplab/datagen.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

namespace hoplab {

std::string to_string(EditPosition p) {
    switch (p) {
        case EditPosition::Pre: return "Pre";
        case EditPosition::Mid: return "Mid";
        default: return "Post";
    }
}

static std::string padded_id(char prefix, int i, int width) {
    std::string digits = std::to_string(i);
    while (static_cast<int>(digits.size()) < width) digits.insert(digits.begin(), '0');
    return std::string(1, prefix) + digits;
}

World gen_world(int n_entities, int n_relations, uint64_t seed) {
    if (n_entities < 20) throw TooSmallWorld("need at least 20 entities, got " + std::to_string(n_entities));
    if (n_relations < 4) throw TooSmallWorld("need at least 4 relations, got " + std::to_string(n_relations));

    World w;
    w.rng_seed = seed;
    const int ew = static_cast<int>(std::to_string(n_entities - 1).size());
    const int rw = static_cast<int>(std::to_string(n_relations - 1).size());
    for (int i = 0; i < n_entities; ++i) w.entities.push_back(padded_id('e', i, ew));
    for (int i = 0; i < n_relations; ++i) {
        const std::string rel = padded_id('r', i, rw);
        w.relations.push_back(rel);
        w.surface_alt[rel] = rel + "_alt";
    }

    Rng rng(seed);
    // Relation 0 is a permutation so every entity has at least one backlink.
    std::vector<std::string> perm = w.entities;
    rng.shuffle(perm);
    for (int i = 0; i < n_entities; ++i) {
        w.facts.add(Triple{w.entities[i], w.relations[0], perm[i]});
    }
    // Remaining relations are random functions; object collisions give some
    // entities several backlinks under the same relation.
    for (int r = 1; r < n_relations; ++r) {
        for (int i = 0; i < n_entities; ++i) {
            w.facts.add(Triple{w.entities[i], w.relations[r], w.entities[rng.index(w.entities.size())]});
        }
    }
    return w;
}

Corpus gen_corpus(const World& world, double inferred_frac) {
    if (!(inferred_frac > 0.0 && inferred_frac < 0.5)) {
        throw ConfigError("inferred_frac must be in (0, 0.5)");
    }
    Corpus c;
    std::vector<Triple> facts = world.facts.triples();
    std::sort(facts.begin(), facts.end());
    for (const auto& t : facts) {
        c.train.push_back({t.s, t.r, kQueryToken, t.o});
        c.train.push_back({t.s, world.surface_alt.at(t.r), kQueryToken, t.o});
    }

    std::vector<std::vector<std::string>> chains;
    for (const auto& s1 : world.entities) {
        for (const auto& r1 : world.relations) {
            auto o1 = world.facts.object_of(s1, r1);
            if (!o1) continue;
            for (const auto& r2 : world.relations) {
                auto o2 = world.facts.object_of(*o1, r2);
                if (!o2) continue;
                chains.push_back({s1, r1, r2, kQueryToken, *o2});
            }
        }
    }
    Rng rng(world.rng_seed ^ 0x9E3779B97F4A7C15ull);
    rng.shuffle(chains);
    const size_t heldout = static_cast<size_t>(inferred_frac * static_cast<double>(chains.size()) + 0.5);
    for (size_t i = 0; i < chains.size(); ++i) {
        if (i < heldout) {
            c.heldout_inferred.push_back(chains[i]);
        } else {
            c.train.push_back(chains[i]);
        }
    }
    return c;
}

EditPosition classify_edit_position(int n_hops, const std::set<int>& edit_positions) {
    if (edit_positions.empty()) throw InvalidPositions("empty edit-position set");
    for (int idx : edit_positions) {
        if (idx < 1 || idx > n_hops) {
            throw InvalidPositions("hop index " + std::to_string(idx) + " outside [1, " +
                                   std::to_string(n_hops) + "]");
        }
    }
    const bool has_first = edit_positions.count(1) > 0;
    const bool has_last = edit_positions.count(n_hops) > 0;
    if (!has_first && !has_last) return EditPosition::Mid;
    const int dist_front = *edit_positions.begin() - 1;
    const int dist_back = n_hops - *edit_positions.rbegin();
    return dist_front < dist_back ? EditPosition::Pre : EditPosition::Post;
}

// ----------------------------- benchmark construction -----------------------------

namespace {

// View of the fact map with the chosen edits applied.
class EditedView {
public:
    EditedView(const World& world, const std::vector<EditInstance>& edits) : world_(world) {
        for (const auto& e : edits) targets_[{e.base.s, e.base.r}] = e.new_object;
    }

    bool is_edited(const std::string& s, const std::string& r) const {
        return targets_.count({s, r}) > 0;
    }
    std::string obj_orig(const std::string& s, const std::string& r) const {
        return world_.facts.object_of(s, r).value();
    }
    std::string obj_edited(const std::string& s, const std::string& r) const {
        auto it = targets_.find({s, r});
        if (it != targets_.end()) return it->second;
        return obj_orig(s, r);
    }

private:
    const World& world_;
    std::map<std::pair<std::string, std::string>, std::string> targets_;
};

PromptSpec make_single_hop(const EditInstance& e, const std::string& rel_token) {
    PromptSpec p;
    p.tokens = {e.base.s, rel_token, kQueryToken};
    p.answer = e.new_object;
    p.answer_unedited = e.base.o;
    p.subject_last_index = 0;
    p.last_index = 2;
    p.hops = 1;
    p.edit_positions = {1};
    return p;
}

// Multi-hop prompts built from the clean supports of the edited subject.
std::vector<PromptSpec> clean_multihop_prompts(const World& world, const EditedView& view,
                                               const EditInstance& e, int cap_per_relation) {
    std::vector<PromptSpec> out;
    for (const auto& sup : query_supports(world.facts, e.base.s, cap_per_relation)) {
        if (view.is_edited(sup.s, sup.r)) continue;  // first hop must stay intact
        out.push_back(build_multihop_prompt(e, sup));
    }
    return out;
}

// One forward continuation for d_pre: [S][r][r2][QUERY] whose answer flips
// with the edit and whose second hop is untouched in both worlds.
std::optional<PromptSpec> make_d_pre(const World& world, const EditedView& view,
                                     const EditInstance& e, Rng& rng) {
    std::vector<std::string> rels = world.relations;
    rng.shuffle(rels);
    for (const auto& r2 : rels) {
        if (view.is_edited(e.new_object, r2) || view.is_edited(e.base.o, r2)) continue;
        const std::string edited = view.obj_orig(e.new_object, r2);
        const std::string unedited = view.obj_orig(e.base.o, r2);
        if (edited == unedited) continue;
        PromptSpec p;
        p.tokens = {e.base.s, e.base.r, r2, kQueryToken};
        p.answer = edited;
        p.answer_unedited = unedited;
        p.subject_last_index = 0;
        p.last_index = 3;
        p.hops = 2;
        p.edit_positions = {1};
        return p;
    }
    return std::nullopt;
}

// n-hop chain with the edit at hop `pos`. Backward hops reach the edited
// subject through clean backlinks; forward hops are walked in both worlds so
// the two final answers are guaranteed distinct.
std::optional<PromptSpec> make_chain(const World& world, const EditedView& view,
                                     const EditInstance& e, int n, int pos, Rng& rng) {
    for (int attempt = 0; attempt < 24; ++attempt) {
        std::vector<std::string> back_subjects;   // deepest-first
        std::vector<std::string> back_relations;  // aligned with back_subjects
        std::string cur = e.base.s;
        bool ok = true;
        for (int hop = pos - 1; hop >= 1; --hop) {
            std::vector<Triple> links = world.facts.backlinks(cur);
            // drop edited backlinks; the walk must agree in both worlds
            links.erase(std::remove_if(links.begin(), links.end(),
                                       [&](const Triple& t) { return view.is_edited(t.s, t.r); }),
                        links.end());
            if (links.empty()) {
                ok = false;
                break;
            }
            const Triple& pick = links[rng.index(links.size())];
            back_subjects.push_back(pick.s);
            back_relations.push_back(pick.r);
            cur = pick.s;
        }
        if (!ok) continue;

        std::vector<std::string> rels;  // relation sequence of the whole chain
        for (int i = static_cast<int>(back_relations.size()) - 1; i >= 0; --i) {
            rels.push_back(back_relations[i]);
        }
        rels.push_back(e.base.r);
        std::string cur_e = e.new_object;
        std::string cur_o = e.base.o;
        for (int hop = pos + 1; hop <= n && ok; ++hop) {
            std::vector<std::string> options = world.relations;
            rng.shuffle(options);
            bool advanced = false;
            for (const auto& q : options) {
                if (view.is_edited(cur_e, q) || view.is_edited(cur_o, q)) continue;
                const std::string ne = view.obj_orig(cur_e, q);
                const std::string no = view.obj_orig(cur_o, q);
                if (hop == n && ne == no) continue;  // answers must differ
                rels.push_back(q);
                cur_e = ne;
                cur_o = no;
                advanced = true;
                break;
            }
            if (!advanced) ok = false;
        }
        if (!ok || cur_e == cur_o) continue;

        PromptSpec p;
        p.tokens.push_back(back_subjects.empty() ? e.base.s : back_subjects.back());
        for (const auto& q : rels) p.tokens.push_back(q);
        p.tokens.push_back(kQueryToken);
        p.answer = cur_e;
        p.answer_unedited = cur_o;
        p.subject_last_index = 0;
        p.last_index = static_cast<int>(p.tokens.size()) - 1;
        p.hops = n;
        p.edit_positions = {pos};
        return p;
    }
    return std::nullopt;
}

}  // namespace

Benchmark gen_edit_benchmark(const World& world, int n_edits, uint64_t seed) {
    if (n_edits < 1) throw InsufficientChains("n_edits must be >= 1");
    Rng rng(seed);

    // Candidate facts in shuffled order; objects-per-relation for resampling.
    std::vector<Triple> candidates = world.facts.triples();
    std::sort(candidates.begin(), candidates.end());
    rng.shuffle(candidates);
    std::map<std::string, std::vector<std::string>> objects_by_relation;
    for (const auto& t : candidates) objects_by_relation[t.r].push_back(t.o);
    for (auto& [r, objs] : objects_by_relation) {
        std::sort(objs.begin(), objs.end());
        objs.erase(std::unique(objs.begin(), objs.end()), objs.end());
    }

    Benchmark bench;
    std::set<std::pair<std::string, std::string>> used_pairs;
    size_t next_candidate = 0;
    auto take_candidate = [&]() -> std::optional<EditInstance> {
        while (next_candidate < candidates.size()) {
            const Triple& t = candidates[next_candidate++];
            if (used_pairs.count({t.s, t.r})) continue;
            const auto& pool = objects_by_relation[t.r];
            std::vector<std::string> alts;
            for (const auto& o : pool) {
                if (o != t.o) alts.push_back(o);
            }
            if (alts.empty()) continue;
            EditInstance e;
            e.base = t;
            e.new_object = alts[rng.index(alts.size())];
            used_pairs.insert({t.s, t.r});
            return e;
        }
        return std::nullopt;
    };

    for (int i = 0; i < n_edits; ++i) {
        auto e = take_candidate();
        if (!e) throw InsufficientChains("not enough editable facts for requested n_edits");
        bench.edits.push_back(*e);
    }

    // Validation loop: every edit must keep at least one clean support and a
    // valid d_pre continuation under the final edit set. Replacing an edit
    // changes the set, so iterate to a fixed point.
    for (int round = 0; round < 64; ++round) {
        EditedView view(world, bench.edits);
        int bad = -1;
        for (size_t i = 0; i < bench.edits.size(); ++i) {
            Rng probe(seed ^ (0x51ed2701u + static_cast<uint64_t>(i)));
            if (clean_multihop_prompts(world, view, bench.edits[i], 3).empty() ||
                !make_d_pre(world, view, bench.edits[i], probe)) {
                bad = static_cast<int>(i);
                break;
            }
        }
        if (bad < 0) break;
        used_pairs.erase({bench.edits[bad].base.s, bench.edits[bad].base.r});
        auto replacement = take_candidate();
        if (!replacement) throw InsufficientChains("could not populate a consistent edit set");
        bench.edits[static_cast<size_t>(bad)] = *replacement;
    }

    EditedView view(world, bench.edits);
    for (size_t i = 0; i < bench.edits.size(); ++i) {
        EditInstance& e = bench.edits[i];
        e.single_hop_prompt = make_single_hop(e, e.base.r);
        e.multi_hop_prompts = clean_multihop_prompts(world, view, e, 3);
        if (e.multi_hop_prompts.empty()) throw InsufficientChains("edit lost all supports");

        Rng erng(seed ^ (0xabcd1234u + static_cast<uint64_t>(i) * 7919u));
        auto pre = make_d_pre(world, view, e, erng);
        if (!pre) throw InsufficientChains("could not build a d_pre case");
        bench.d_pre.push_back(*pre);
        for (const auto& mp : e.multi_hop_prompts) bench.d_post.push_back(mp);

        bench.paraphrase.push_back(make_single_hop(e, world.surface_alt.at(e.base.r)));

        // neighborhood: same relation, different (unedited) subject
        std::vector<std::string> subjects = world.entities;
        erng.shuffle(subjects);
        int taken = 0;
        for (const auto& s2 : subjects) {
            if (taken >= 2) break;
            if (s2 == e.base.s || view.is_edited(s2, e.base.r)) continue;
            auto o2 = world.facts.object_of(s2, e.base.r);
            if (!o2) continue;
            PromptSpec p;
            p.tokens = {s2, e.base.r, kQueryToken};
            p.answer = *o2;
            p.answer_unedited = *o2;
            p.subject_last_index = 0;
            p.last_index = 2;
            p.hops = 1;
            p.edit_positions = {};
            bench.neighborhood.push_back(p);
            ++taken;
        }

        // 3- and 4-hop chains with the edit position cycled across edits
        const int p3 = 1 + static_cast<int>(i % 3);
        const int p4 = 1 + static_cast<int>((i + 1) % 4);
        if (auto c3 = make_chain(world, view, e, 3, p3, erng)) bench.multi_hop.push_back(*c3);
        if (auto c4 = make_chain(world, view, e, 4, p4, erng)) bench.multi_hop.push_back(*c4);
    }

    // Two-hop chains where both hops are edited facts (classified Post).
    int doubles = 0;
    for (size_t i = 0; i < bench.edits.size() && doubles < 5; ++i) {
        for (size_t j = 0; j < bench.edits.size() && doubles < 5; ++j) {
            if (i == j) continue;
            const EditInstance& a = bench.edits[i];
            const EditInstance& b = bench.edits[j];
            if (b.base.s != a.new_object) continue;
            if (view.is_edited(a.base.o, b.base.r)) continue;
            const std::string unedited = view.obj_orig(a.base.o, b.base.r);
            if (unedited == b.new_object) continue;
            PromptSpec p;
            p.tokens = {a.base.s, a.base.r, b.base.r, kQueryToken};
            p.answer = b.new_object;
            p.answer_unedited = unedited;
            p.subject_last_index = 0;
            p.last_index = 3;
            p.hops = 2;
            p.edit_positions = {1, 2};
            bench.multi_hop.push_back(p);
            ++doubles;
        }
    }

    if (bench.multi_hop.empty()) throw InsufficientChains("multi_hop split is empty");
    return bench;
}

// ----------------------------- persistence -----------------------------

static nlohmann::json prompt_to_json(const PromptSpec& p) {
    return nlohmann::json{{"tokens", p.tokens},
                          {"answer", p.answer},
                          {"answer_unedited", p.answer_unedited},
                          {"subject_last_index", p.subject_last_index},
                          {"last_index", p.last_index},
                          {"hops", p.hops},
                          {"edit_positions", std::vector<int>(p.edit_positions.begin(),
                                                              p.edit_positions.end())}};
}

static PromptSpec prompt_from_json(const nlohmann::json& j) {
    PromptSpec p;
    p.tokens = j.at("tokens").get<std::vector<std::string>>();
    p.answer = j.at("answer").get<std::string>();
    p.answer_unedited = j.at("answer_unedited").get<std::string>();
    p.subject_last_index = j.at("subject_last_index").get<int>();
    p.last_index = j.at("last_index").get<int>();
    p.hops = j.at("hops").get<int>();
    for (int v : j.at("edit_positions").get<std::vector<int>>()) p.edit_positions.insert(v);
    return p;
}

void save_world(const World& world, const std::string& dir) {
    std::filesystem::create_directories(dir);
    world.facts.save_jsonl(dir + "/world.jsonl");
    nlohmann::json meta{{"entities", world.entities},
                        {"relations", world.relations},
                        {"surface_alt", world.surface_alt},
                        {"rng_seed", world.rng_seed}};
    atomic_write_text(dir + "/world_meta.json", meta.dump(2) + "\n");
}

World load_world(const std::string& dir) {
    World w;
    auto meta = nlohmann::json::parse(read_text_file(dir + "/world_meta.json"));
    w.entities = meta.at("entities").get<std::vector<std::string>>();
    w.relations = meta.at("relations").get<std::vector<std::string>>();
    w.surface_alt = meta.at("surface_alt").get<std::map<std::string, std::string>>();
    w.rng_seed = meta.at("rng_seed").get<uint64_t>();
    w.facts = TripleStore::load_jsonl(dir + "/world.jsonl");
    return w;
}

void save_corpus(const Corpus& corpus, const std::string& path) {
    std::ostringstream out;
    for (const auto& s : corpus.train) {
        out << nlohmann::json{{"split", "train"}, {"tokens", s}}.dump() << "\n";
    }
    for (const auto& s : corpus.heldout_inferred) {
        out << nlohmann::json{{"split", "heldout"}, {"tokens", s}}.dump() << "\n";
    }
    atomic_write_text(path, out.str());
}

Corpus load_corpus(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw MissingArtifact("corpus file not found: " + path);
    Corpus c;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        auto j = nlohmann::json::parse(line);
        auto tokens = j.at("tokens").get<std::vector<std::string>>();
        if (j.at("split").get<std::string>() == "train") {
            c.train.push_back(std::move(tokens));
        } else {
            c.heldout_inferred.push_back(std::move(tokens));
        }
    }
    return c;
}

void save_benchmark(const Benchmark& bench, const std::string& path) {
    nlohmann::json j;
    j["edits"] = nlohmann::json::array();
    for (const auto& e : bench.edits) {
        nlohmann::json je{{"s", e.base.s},
                          {"r", e.base.r},
                          {"o", e.base.o},
                          {"o_new", e.new_object},
                          {"single_hop_prompt", prompt_to_json(e.single_hop_prompt)}};
        je["multi_hop_prompts"] = nlohmann::json::array();
        for (const auto& p : e.multi_hop_prompts) je["multi_hop_prompts"].push_back(prompt_to_json(p));
        j["edits"].push_back(je);
    }
    for (const auto& [name, list] :
         std::initializer_list<std::pair<const char*, const std::vector<PromptSpec>*>>{
             {"d_pre", &bench.d_pre},
             {"d_post", &bench.d_post},
             {"multi_hop", &bench.multi_hop},
             {"paraphrase", &bench.paraphrase},
             {"neighborhood", &bench.neighborhood}}) {
        j[name] = nlohmann::json::array();
        for (const auto& p : *list) j[name].push_back(prompt_to_json(p));
    }
    atomic_write_text(path, j.dump(2) + "\n");
}

Benchmark load_benchmark(const std::string& path) {
    auto j = nlohmann::json::parse(read_text_file(path));
    Benchmark b;
    for (const auto& je : j.at("edits")) {
        EditInstance e;
        e.base = Triple{je.at("s").get<std::string>(), je.at("r").get<std::string>(),
                        je.at("o").get<std::string>()};
        e.new_object = je.at("o_new").get<std::string>();
        e.single_hop_prompt = prompt_from_json(je.at("single_hop_prompt"));
        for (const auto& jp : je.at("multi_hop_prompts")) {
            e.multi_hop_prompts.push_back(prompt_from_json(jp));
        }
        b.edits.push_back(std::move(e));
    }
    auto read_list = [&](const char* name, std::vector<PromptSpec>& out) {
        for (const auto& jp : j.at(name)) out.push_back(prompt_from_json(jp));
    };
    read_list("d_pre", b.d_pre);
    read_list("d_post", b.d_post);
    read_list("multi_hop", b.multi_hop);
    read_list("paraphrase", b.paraphrase);
    read_list("neighborhood", b.neighborhood);
    return b;
}

}  // namespace hoplab
