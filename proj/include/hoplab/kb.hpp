#pragma once
// In-memory knowledge base of (subject, relation, object) triples with
// backlink queries, support selection, multi-hop edit-prompt construction
// and SPARQL template emission.

#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "hoplab/common.hpp"

namespace hoplab {

// Special prompt tokens shared across modules.
inline const std::string kQueryToken = "QUERY";
inline const std::string kIsAToken = "IS-A";

struct Triple {
    std::string s, r, o;

    bool operator==(const Triple& other) const {
        return s == other.s && r == other.r && o == other.o;
    }
    bool operator<(const Triple& other) const {
        if (s != other.s) return s < other.s;
        if (r != other.r) return r < other.r;
        return o < other.o;
    }
};

// A cloze prompt over the toy tokenization. `answer` is the expected token
// after the edit (equal to the pre-edit truth for never-edited prompts);
// `answer_unedited` is the pre-edit truth. Hop indices are 1-based.
struct PromptSpec {
    std::vector<std::string> tokens;
    std::string answer;
    std::string answer_unedited;
    int subject_last_index{0};
    int last_index{0};
    int hops{1};
    std::set<int> edit_positions;
};

struct EditInstance {
    Triple base;
    std::string new_object;
    PromptSpec single_hop_prompt;
    std::vector<PromptSpec> multi_hop_prompts;
};

// Associative triple index: by (subject, relation) for fact lookups and by
// object for backlinks. Functional relations: one object per (s, r). Loading
// happens before any query; reads are safe concurrently afterwards.
class TripleStore {
public:
    void add(const Triple& t);

    size_t size() const { return triples_.size(); }
    const std::vector<Triple>& triples() const { return triples_; }

    // Single object for (s, r), or nullopt when the fact is absent.
    std::optional<std::string> object_of(const std::string& s, const std::string& r) const;

    bool contains(const std::string& s, const std::string& r) const {
        return object_of(s, r).has_value();
    }

    // All triples whose object is `o`, sorted by (relation, subject).
    std::vector<Triple> backlinks(const std::string& o) const;

    // JSON-lines persistence: one {"s":...,"r":...,"o":...} per line, LF only.
    void save_jsonl(const std::string& path) const;
    static TripleStore load_jsonl(const std::string& path);

private:
    std::vector<Triple> triples_;
    std::map<std::pair<std::string, std::string>, std::string> by_subject_relation_;
    std::map<std::string, std::vector<size_t>> by_object_;
};

// Backlinks of `s` truncated to `cap_per_relation` per distinct relation,
// sorted by (relation, subject). Empty result is valid.
std::vector<Triple> query_supports(const TripleStore& kb, const std::string& s,
                                   int cap_per_relation);

// Two-hop edit prompt [s'][r'][r][QUERY] whose answer is the edit target.
// Throws MismatchedChain unless support.object == edit.base.subject.
PromptSpec build_multihop_prompt(const EditInstance& edit, const Triple& support);

// WikiData backlink query text for one subject QID and a relation whitelist.
// Offline only: the text is emitted, never executed. Byte-stable.
std::string emit_sparql(const std::string& subject_qid,
                        const std::vector<std::string>& relations);

}  // namespace hoplab
