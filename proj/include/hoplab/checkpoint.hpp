#pragma once
// Binary checkpoint: magic "HOPL", u32 format version, u32 config counts
// (n_layers, d_model, n_heads, d_ff, max_seq, vocab_size), then each weight
// matrix as (rows u32, cols u32, row-major f32). Little-endian throughout;
// save(load(x)) is bit-exact.

#include <string>

#include "hoplab/model.hpp"

namespace hoplab {

void save_checkpoint(const Model& model, const std::string& path);
Model load_checkpoint(const std::string& path, const Vocab& vocab);

}  // namespace hoplab
