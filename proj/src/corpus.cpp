#include "dsdlab/corpus.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

#include "dsdlab/error.hpp"
#include "dsdlab/rng.hpp"

namespace dsdlab {

namespace {

constexpr std::uint64_t kSynonymStream = 0x5e;

std::uint64_t split_stream(Split split) {
  switch (split) {
    case Split::Train: return 1;
    case Split::Dev: return 2;
    case Split::Test: return 3;
  }
  return 0;
}

Token content_token(Rng& rng, std::size_t vocab) { return kFirstContent + rng.below(vocab - kFirstContent); }

Sentence parse_tokens(std::string_view text, std::size_t line_no) {
  Sentence out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    while (pos < text.size() && text[pos] == ' ') ++pos;
    if (pos >= text.size()) break;
    std::size_t end = text.find(' ', pos);
    if (end == std::string_view::npos) end = text.size();
    Token value = 0;
    const auto* first = text.data() + pos;
    const auto* last = text.data() + end;
    auto [ptr, ec] = std::from_chars(first, last, value);
    if (ec != std::errc() || ptr != last)
      throw ParseError("bad token '" + std::string(first, last) + "'", line_no);
    out.push_back(value);
    pos = end;
  }
  if (out.empty()) throw ParseError("empty token sequence", line_no);
  return out;
}

void write_tokens(std::ostream& os, const Sentence& s) {
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ' ';
    os << s[i];
  }
}

}  // namespace

TaskKind parse_task_kind(std::string_view name) {
  if (name == "copy") return TaskKind::Copy;
  if (name == "reverse") return TaskKind::Reverse;
  if (name == "synonym-noise" || name == "synonym_noise") return TaskKind::SynonymNoise;
  throw ConfigError("unknown task kind '" + std::string(name) + "'");
}

std::string_view task_kind_name(TaskKind kind) {
  switch (kind) {
    case TaskKind::Copy: return "copy";
    case TaskKind::Reverse: return "reverse";
    case TaskKind::SynonymNoise: return "synonym-noise";
  }
  return "?";
}

void TaskSpec::validate(std::size_t max_model_length) const {
  if (source_vocab < 4 || target_vocab < 4) throw ConfigError("vocabulary sizes must be at least 4");
  if (source_vocab <= kFirstContent || target_vocab <= kFirstContent)
    throw ConfigError("vocabularies need at least one non-reserved token");
  if (kind != TaskKind::SynonymNoise && source_vocab != target_vocab)
    throw ConfigError("copy and reverse tasks share one vocabulary");
  if (kind == TaskKind::SynonymNoise) {
    if (synonyms < 1 || synonyms > target_vocab / 2)
      throw ConfigError("synonym fan-out k must satisfy 1 <= k <= target_vocab/2");
    if (synonyms > target_vocab - kFirstContent)
      throw ConfigError("synonym fan-out exceeds the number of target content tokens");
  }
  if (!(noise >= 0.0 && noise < 1.0)) throw ConfigError("noise rate must lie in [0, 1)");
  if (min_length < 1 || min_length > max_length) throw ConfigError("length range must satisfy 1 <= min <= max");
  if (max_model_length != 0 && max_length + 1 > max_model_length)
    throw ConfigError("task max_length plus EOS exceeds the model's maximum length");
  if (size < 1) throw ConfigError("corpus size must be positive");
}

std::vector<Sentence> synonym_map(const TaskSpec& spec) {
  std::vector<Sentence> table(spec.source_vocab);
  if (spec.kind != TaskKind::SynonymNoise) return table;
  Rng rng(derive_seed(spec.seed, kSynonymStream));
  const std::size_t content = spec.target_vocab - kFirstContent;
  for (Token s = kFirstContent; s < spec.source_vocab; ++s) {
    // Partial Fisher-Yates: first k entries of a fresh permutation.
    std::vector<Token> pool(content);
    for (std::size_t i = 0; i < content; ++i) pool[i] = kFirstContent + i;
    for (std::size_t i = 0; i < spec.synonyms; ++i) {
      const std::size_t j = i + rng.below(content - i);
      std::swap(pool[i], pool[j]);
    }
    table[s].assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(spec.synonyms));
  }
  return table;
}

ParallelCorpus generate_task(const TaskSpec& spec, Split split, std::size_t count) {
  spec.validate();
  if (count == 0) count = spec.size;
  const auto synonyms = synonym_map(spec);
  Rng rng(derive_seed(spec.seed, split_stream(split)));
  ParallelCorpus corpus;
  corpus.source_vocab = spec.source_vocab;
  corpus.target_vocab = spec.target_vocab;
  corpus.pairs.reserve(count);
  for (std::size_t n = 0; n < count; ++n) {
    const std::size_t len = spec.min_length + rng.below(spec.max_length - spec.min_length + 1);
    SentencePair pair;
    pair.source.resize(len);
    for (auto& t : pair.source) t = content_token(rng, spec.source_vocab);
    switch (spec.kind) {
      case TaskKind::Copy: pair.target = pair.source; break;
      case TaskKind::Reverse: pair.target.assign(pair.source.rbegin(), pair.source.rend()); break;
      case TaskKind::SynonymNoise:
        pair.target.resize(len);
        for (std::size_t i = 0; i < len; ++i) {
          const auto& options = synonyms[pair.source[i]];
          pair.target[i] = options[rng.below(options.size())];
        }
        break;
    }
    if (spec.noise > 0.0)
      for (auto& t : pair.target)
        if (rng.bernoulli(spec.noise)) t = content_token(rng, spec.target_vocab);
    corpus.pairs.push_back(std::move(pair));
  }
  return corpus;
}

Batch make_batch(const ParallelCorpus& corpus, const std::vector<std::size_t>& ids) {
  if (ids.empty()) throw DataError("cannot build an empty batch");
  Batch b;
  b.batch = ids.size();
  b.example_ids = ids;
  for (std::size_t id : ids) {
    const auto& p = corpus.pairs.at(id);
    if (p.source.empty() || p.target.empty()) throw DataError("pair " + std::to_string(id) + " has an empty side");
    b.source_width = std::max(b.source_width, p.source.size());
    b.target_width = std::max(b.target_width, p.target.size() + 1);
  }
  b.source.assign(b.batch * b.source_width, kPad);
  b.target.assign(b.batch * b.target_width, kPad);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    const auto& p = corpus.pairs[ids[r]];
    std::copy(p.source.begin(), p.source.end(), b.source.begin() + static_cast<std::ptrdiff_t>(r * b.source_width));
    std::copy(p.target.begin(), p.target.end(), b.target.begin() + static_cast<std::ptrdiff_t>(r * b.target_width));
    b.target[r * b.target_width + p.target.size()] = kEos;
    b.source_lengths.push_back(p.source.size());
    b.target_lengths.push_back(p.target.size() + 1);
  }
  return b;
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t epoch_seed) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(epoch_seed);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

std::vector<Batch> batch_iter(const ParallelCorpus& corpus, std::size_t batch_size, std::uint64_t epoch_seed) {
  if (corpus.empty()) throw DataError("cannot iterate over an empty corpus");
  if (batch_size < 1) throw ConfigError("batch size must be at least 1");
  const auto order = epoch_order(corpus.size(), epoch_seed);
  std::vector<Batch> out;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    out.push_back(make_batch(corpus, std::vector<std::size_t>(order.begin() + static_cast<std::ptrdiff_t>(start),
                                                              order.begin() + static_cast<std::ptrdiff_t>(end))));
  }
  return out;
}

void save_tsv(const ParallelCorpus& corpus, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  for (const auto& p : corpus.pairs) {
    write_tokens(os, p.source);
    os << '\t';
    write_tokens(os, p.target);
    os << '\n';
  }
  if (!os) throw IoError("write to " + path.string() + " failed");
}

ParallelCorpus load_tsv(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  ParallelCorpus corpus;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw ParseError("missing tab separator", line_no);
    if (line.find('\t', tab + 1) != std::string::npos) throw ParseError("more than one tab", line_no);
    SentencePair pair{parse_tokens(std::string_view(line).substr(0, tab), line_no),
                      parse_tokens(std::string_view(line).substr(tab + 1), line_no)};
    for (Token t : pair.source) corpus.source_vocab = std::max(corpus.source_vocab, t + 1);
    for (Token t : pair.target) corpus.target_vocab = std::max(corpus.target_vocab, t + 1);
    corpus.pairs.push_back(std::move(pair));
  }
  return corpus;
}

void validate_corpus(const ParallelCorpus& corpus) {
  for (std::size_t i = 0; i < corpus.pairs.size(); ++i) {
    const auto& p = corpus.pairs[i];
    for (Token t : p.source)
      if (t >= corpus.source_vocab)
        throw DataError("pair " + std::to_string(i) + ": source token " + std::to_string(t) + " outside vocabulary");
    for (Token t : p.target)
      if (t >= corpus.target_vocab)
        throw DataError("pair " + std::to_string(i) + ": target token " + std::to_string(t) + " outside vocabulary");
  }
}

}  // namespace dsdlab
