#pragma once

// Agent checkpoint file:
//   "GNCKPT1\n"
//   "layers <d_in> <h1> ... <d_e>\n" "classes <C>\n" "embedding <d_e>\n"
//   "margin <m> <s> <t>\n" "end\n"
//   then little-endian float32 tensors, row-major, in declaration order:
//   for each layer weight (out x in) then bias; then the class head (C x d_e).

#include <filesystem>
#include <iosfwd>

#include "cotrain/learner.hpp"

namespace cotrain {

struct Checkpoint {
    Agent agent;
    MarginConfig margin;
};

void write_checkpoint(std::ostream& out, const Agent& agent, const MarginConfig& margin);
Checkpoint read_checkpoint(std::istream& in);

void save_checkpoint(const std::filesystem::path& path, const Agent& agent, const MarginConfig& margin);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace cotrain
