#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace dsdlab {

using Token = std::size_t;
using Sentence = std::vector<Token>;

inline constexpr Token kPad = 0;
inline constexpr Token kBos = 1;
inline constexpr Token kEos = 2;
inline constexpr Token kUnk = 3;
inline constexpr Token kFirstContent = 4;

enum class TaskKind { Copy, Reverse, SynonymNoise };

TaskKind parse_task_kind(std::string_view name);
std::string_view task_kind_name(TaskKind kind);

struct TaskSpec {
  TaskKind kind = TaskKind::Copy;
  std::size_t source_vocab = 32;
  std::size_t target_vocab = 32;
  std::size_t min_length = 3;
  std::size_t max_length = 8;
  std::size_t synonyms = 2;   // fan-out k, synonym-noise only
  double noise = 0.0;         // label-noise rate rho
  std::size_t size = 1000;    // training pairs
  std::uint64_t seed = 1;

  // `max_model_length` bounds max_length (target gains an EOS on top).
  void validate(std::size_t max_model_length = 0) const;
};

struct SentencePair {
  Sentence source;
  Sentence target;

  friend bool operator==(const SentencePair&, const SentencePair&) = default;
};

struct ParallelCorpus {
  std::vector<SentencePair> pairs;
  std::size_t source_vocab = 0;
  std::size_t target_vocab = 0;

  std::size_t size() const { return pairs.size(); }
  bool empty() const { return pairs.empty(); }
};

enum class Split { Train, Dev, Test };

// Synonym table: entry s lists the k valid target ids for source content id s.
// Derived from the task seed only, so every split shares it.
std::vector<Sentence> synonym_map(const TaskSpec& spec);

// Pure function of (spec, split, count). count 0 means spec.size.
ParallelCorpus generate_task(const TaskSpec& spec, Split split = Split::Train, std::size_t count = 0);

// Padded, EOS-terminated batch. Row-major [batch x width] id matrices; target
// rows end in EOS before padding.
struct Batch {
  std::size_t batch = 0;
  std::size_t source_width = 0;
  std::size_t target_width = 0;
  std::vector<Token> source;
  std::vector<Token> target;
  std::vector<std::size_t> source_lengths;
  std::vector<std::size_t> target_lengths;  // includes EOS
  std::vector<std::size_t> example_ids;     // corpus indices

  Token source_at(std::size_t b, std::size_t i) const { return source[b * source_width + i]; }
  Token target_at(std::size_t b, std::size_t j) const { return target[b * target_width + j]; }
  bool source_mask(std::size_t b, std::size_t i) const { return i < source_lengths[b]; }
  bool target_mask(std::size_t b, std::size_t j) const { return j < target_lengths[b]; }
};

Batch make_batch(const ParallelCorpus& corpus, const std::vector<std::size_t>& ids);

// Seeded Fisher-Yates permutation of [0, n).
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t epoch_seed);

// All batches of one epoch, in shuffled order; the last may be short.
std::vector<Batch> batch_iter(const ParallelCorpus& corpus, std::size_t batch_size, std::uint64_t epoch_seed);

// TSV: "source<TAB>target", tokens as space-separated decimal ids, no header.
void save_tsv(const ParallelCorpus& corpus, const std::filesystem::path& path);
ParallelCorpus load_tsv(const std::filesystem::path& path);

// Checks every token against the corpus vocabulary sizes.
void validate_corpus(const ParallelCorpus& corpus);

}  // namespace dsdlab
