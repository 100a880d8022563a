#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lorsa/rng.hpp"

namespace lorsa {

enum class TaskKind { induction, successor, uniform };

TaskKind task_kind_from_string(const std::string& s);
std::string to_string(TaskKind k);

// Synthetic token-sequence tasks. `induction` plants an exact repeated block
// at random positions so the copy signal cannot be solved by a fixed offset;
// `successor` emits +1 runs with random restarts; `uniform` is iid noise.
struct TaskSpec {
  TaskKind kind = TaskKind::induction;
  size_t vocab = 64;
  size_t seq_len = 64;
  size_t block_min = 16;  // induction: repeated block length range
  size_t block_max = 28;
  double restart_prob = 0.05;  // successor: chance of breaking the +1 run

  void validate(size_t model_vocab, size_t context_length) const;
};

struct SequenceSample {
  std::vector<int> tokens;
  // Induction ground truth. second_occurrence[i] means the token at i+1 is
  // determined by the repeated block; induction_source[i] is the position
  // holding that token's first copy (the position an induction head should
  // attend to from i), -1 elsewhere.
  std::vector<uint8_t> second_occurrence;
  std::vector<int> induction_source;
  size_t block_len = 0;
  size_t first_block_start = 0;
  size_t second_block_start = 0;
};

SequenceSample sample_sequence(const TaskSpec& spec, Rng& rng);

}  // namespace lorsa
