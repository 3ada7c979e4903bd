#include "hoplab/kb.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace hoplab {

void TripleStore::add(const Triple& t) {
    auto key = std::make_pair(t.s, t.r);
    auto it = by_subject_relation_.find(key);
    if (it != by_subject_relation_.end()) {
        if (it->second == t.o) return;  // duplicate fact
        throw std::runtime_error("functional relation violated for (" + t.s + ", " + t.r + ")");
    }
    by_subject_relation_.emplace(std::move(key), t.o);
    by_object_[t.o].push_back(triples_.size());
    triples_.push_back(t);
}

std::optional<std::string> TripleStore::object_of(const std::string& s,
                                                  const std::string& r) const {
    auto it = by_subject_relation_.find(std::make_pair(s, r));
    if (it == by_subject_relation_.end()) return std::nullopt;
    return it->second;
}

std::vector<Triple> TripleStore::backlinks(const std::string& o) const {
    std::vector<Triple> out;
    auto it = by_object_.find(o);
    if (it == by_object_.end()) return out;
    out.reserve(it->second.size());
    for (size_t idx : it->second) out.push_back(triples_[idx]);
    std::sort(out.begin(), out.end(), [](const Triple& a, const Triple& b) {
        if (a.r != b.r) return a.r < b.r;
        return a.s < b.s;
    });
    return out;
}

void TripleStore::save_jsonl(const std::string& path) const {
    std::vector<Triple> sorted = triples_;
    std::sort(sorted.begin(), sorted.end());
    std::ostringstream out;
    for (const auto& t : sorted) {
        nlohmann::json j{{"s", t.s}, {"r", t.r}, {"o", t.o}};
        out << j.dump() << "\n";
    }
    atomic_write_text(path, out.str());
}

TripleStore TripleStore::load_jsonl(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw MissingArtifact("triple store file not found: " + path);
    TripleStore store;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        auto j = nlohmann::json::parse(line);
        store.add(Triple{j.at("s").get<std::string>(), j.at("r").get<std::string>(),
                         j.at("o").get<std::string>()});
    }
    return store;
}

std::vector<Triple> query_supports(const TripleStore& kb, const std::string& s,
                                   int cap_per_relation) {
    std::vector<Triple> all = kb.backlinks(s);  // already (r, s)-sorted
    std::vector<Triple> out;
    std::string current_rel;
    int taken = 0;
    for (const auto& t : all) {
        if (t.r != current_rel) {
            current_rel = t.r;
            taken = 0;
        }
        if (taken < cap_per_relation) {
            out.push_back(t);
            ++taken;
        }
    }
    return out;
}

PromptSpec build_multihop_prompt(const EditInstance& edit, const Triple& support) {
    if (support.o != edit.base.s) {
        throw MismatchedChain("support object '" + support.o + "' does not chain into subject '" +
                              edit.base.s + "'");
    }
    PromptSpec p;
    p.tokens = {support.s, support.r, edit.base.r, kQueryToken};
    p.answer = edit.new_object;
    p.answer_unedited = edit.base.o;
    p.subject_last_index = 0;
    p.last_index = static_cast<int>(p.tokens.size()) - 1;
    p.hops = 2;
    p.edit_positions = {2};
    return p;
}

std::string emit_sparql(const std::string& subject_qid,
                        const std::vector<std::string>& relations) {
    if (relations.empty()) throw EmptyRelationSet();
    std::ostringstream rel_list;
    for (size_t i = 0; i < relations.size(); ++i) {
        if (i > 0) rel_list << ", ";
        rel_list << "wdt:" << relations[i];
    }
    std::ostringstream q;
    q << "SELECT ?subject ?subjectLabel ?predicate ?predicateLabel WHERE {\n"
      << "  ?subject ?predicate wd:" << subject_qid << ".\n"
      << "  FILTER (?predicate IN (" << rel_list.str() << "))\n"
      << "  SERVICE wikibase:label { bd:serviceParam wikibase:language \"en\". }\n"
      << "}\n"
      << "LIMIT 50\n";
    return q.str();
}

}  // namespace hoplab
