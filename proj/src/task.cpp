#include "lorsa/task.hpp"

#include <stdexcept>

namespace lorsa {

TaskKind task_kind_from_string(const std::string& s) {
  if (s == "induction" || s == "repeated-sequence-induction") return TaskKind::induction;
  if (s == "successor") return TaskKind::successor;
  if (s == "uniform" || s == "uniform-random") return TaskKind::uniform;
  throw std::invalid_argument("unknown task kind: " + s);
}

std::string to_string(TaskKind k) {
  switch (k) {
    case TaskKind::induction: return "induction";
    case TaskKind::successor: return "successor";
    case TaskKind::uniform: return "uniform";
  }
  return "?";
}

void TaskSpec::validate(size_t model_vocab, size_t context_length) const {
  if (vocab == 0 || vocab > model_vocab)
    throw std::invalid_argument("task vocab exceeds model vocab");
  if (seq_len == 0 || seq_len > context_length)
    throw std::invalid_argument("task seq_len exceeds context length");
  if (kind == TaskKind::induction) {
    if (block_min < 2 || block_min > block_max)
      throw std::invalid_argument("induction block range invalid");
    if (2 * block_max > seq_len)
      throw std::invalid_argument("induction blocks do not fit: 2*block_max > seq_len");
  }
  if (kind == TaskKind::successor && (restart_prob < 0.0 || restart_prob > 1.0))
    throw std::invalid_argument("restart_prob outside [0,1]");
}

SequenceSample sample_sequence(const TaskSpec& spec, Rng& rng) {
  SequenceSample s;
  const size_t n = spec.seq_len;
  s.tokens.resize(n);
  s.second_occurrence.assign(n, 0);
  s.induction_source.assign(n, -1);

  switch (spec.kind) {
    case TaskKind::uniform: {
      for (size_t i = 0; i < n; ++i) s.tokens[i] = static_cast<int>(rng.randint(spec.vocab));
      break;
    }
    case TaskKind::successor: {
      int t = static_cast<int>(rng.randint(spec.vocab));
      for (size_t i = 0; i < n; ++i) {
        s.tokens[i] = t;
        if (rng.uniform() < spec.restart_prob)
          t = static_cast<int>(rng.randint(spec.vocab));
        else
          t = static_cast<int>((static_cast<size_t>(t) + 1) % spec.vocab);
      }
      break;
    }
    case TaskKind::induction: {
      // Random block length and random placement of both copies; everything
      // else iid. Random placement blocks the fixed-offset shortcut.
      const size_t L = spec.block_min + rng.randint(spec.block_max - spec.block_min + 1);
      const size_t slack = n - 2 * L;
      const size_t gap = rng.randint(slack + 1);
      const size_t p0 = rng.randint(slack - gap + 1);
      const size_t p1 = p0 + L + gap;
      for (size_t i = 0; i < n; ++i) s.tokens[i] = static_cast<int>(rng.randint(spec.vocab));
      for (size_t i = 0; i < L; ++i) s.tokens[p1 + i] = s.tokens[p0 + i];
      // positions inside the second copy whose next token is a copy
      for (size_t i = p1; i + 1 < p1 + L; ++i) {
        s.second_occurrence[i] = 1;
        s.induction_source[i] = static_cast<int>(p0 + (i - p1) + 1);
      }
      s.block_len = L;
      s.first_block_start = p0;
      s.second_block_start = p1;
      break;
    }
  }
  return s;
}

}  // namespace lorsa
