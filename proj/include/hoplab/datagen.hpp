#pragma once
// Synthetic world generation, training corpus (atomic + compositional),
// and the edit benchmark with pre/post splits, paraphrase and neighborhood
// sets, and edit-position labels.

#include <map>
#include <set>
#include <string>
#include <vector>

#include "hoplab/kb.hpp"

namespace hoplab {

// Entity/relation universe with functional facts. Every relation has one alt
// surface token used for paraphrase prompts. Entities and relations are
// single tokens, so "subject last token" is the subject token itself.
struct World {
    std::vector<std::string> entities;
    std::vector<std::string> relations;
    std::map<std::string, std::string> surface_alt;
    TripleStore facts;
    uint64_t rng_seed{0};
};

struct Corpus {
    std::vector<std::vector<std::string>> train;
    std::vector<std::vector<std::string>> heldout_inferred;
};

struct Benchmark {
    std::vector<EditInstance> edits;
    std::vector<PromptSpec> d_pre;
    std::vector<PromptSpec> d_post;
    std::vector<PromptSpec> multi_hop;
    std::vector<PromptSpec> paraphrase;
    std::vector<PromptSpec> neighborhood;
};

enum class EditPosition { Pre, Mid, Post };

std::string to_string(EditPosition p);

// Deterministic world: relation 0 maps entities by a permutation (so every
// entity has at least one incoming fact); the rest are random functions so
// some objects collect several backlinks per relation.
World gen_world(int n_entities, int n_relations, uint64_t seed);

// train = all atomic sentences (canonical and alt surface form) plus
// (1 - inferred_frac) of the valid two-hop sentences; the rest of the
// two-hop sentences are held out, never appearing in train.
Corpus gen_corpus(const World& world, double inferred_frac);

// Edits plus evaluation splits. Chains are constructed so that the edited
// and unedited composed answers always differ, and no chain accidentally
// crosses a different edited fact in either the original or edited world.
Benchmark gen_edit_benchmark(const World& world, int n_edits, uint64_t seed);

// Position class of the edited hops within an n-hop chain; ties go to Post,
// and any set touching neither hop 1 nor hop n is Mid.
EditPosition classify_edit_position(int n_hops, const std::set<int>& edit_positions);

// ----------------------------- persistence -----------------------------

void save_world(const World& world, const std::string& dir);
World load_world(const std::string& dir);

void save_corpus(const Corpus& corpus, const std::string& path);
Corpus load_corpus(const std::string& path);

void save_benchmark(const Benchmark& bench, const std::string& path);
Benchmark load_benchmark(const std::string& path);

}  // namespace hoplab
