#pragma once

// Build-time instruction set generation: word list configuration, the
// order-preserving perfect hash table, the linear search table (a compacted
// per-length character trie) and the table artifact that bundles them.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace rexa::isa {

inline constexpr std::size_t kMaxNameLength = 15;
/// Opcodes 0x70..0x7F are reserved for compiler-inserted words.
inline constexpr std::size_t kMaxWords = 0x70;

struct WordDef {
  std::string name;
  std::uint8_t opcode = 0;
  std::string tag;  // semantics tag, selects the interpreter/compiler behaviour
};

class WordList {
 public:
  WordList() = default;

  /// Appends a word with the next consecutive opcode; validates the name.
  void add(std::string_view name, std::string_view tag);

  std::size_t size() const { return words_.size(); }
  bool empty() const { return words_.empty(); }
  const WordDef& operator[](std::size_t i) const { return words_[i]; }
  std::optional<std::uint8_t> find(std::string_view name) const;
  std::size_t max_length() const;
  std::size_t total_chars() const;

  auto begin() const { return words_.begin(); }
  auto end() const { return words_.end(); }

 private:
  std::vector<WordDef> words_;
};

bool valid_word_name(std::string_view name);

/// Parses a word-list document: either a JSON array of {"name","tag"} objects
/// or an object with a "words" member holding that array. Opcodes follow
/// document order from 0.
WordList load_wordlist(std::string_view document);

/// The shipped 101-word core list (the same content as config/core_words.json).
const WordList& default_wordlist();

/// Order-preserving minimal perfect hash over a 3-partite hypergraph.
/// hash(w) = (g[v0] + g[v1] + g[v2]) mod m, with g stored one byte per vertex.
struct PerfectHashTable {
  std::uint32_t seed = 0;
  std::uint16_t part = 0;  // vertices per partition; aux holds 3*part bytes
  std::uint16_t word_count = 0;
  std::uint8_t max_length = 0;
  std::vector<std::uint8_t> aux;
  std::vector<char> check;  // word_count rows of max_length bytes, zero padded

  std::optional<std::uint8_t> lookup(std::string_view s) const;
  /// Raw slot the hash function assigns (without the string check).
  std::uint32_t slot(std::string_view s) const;
  std::size_t storage_bytes() const { return aux.size() + check.size(); }
};

PerfectHashTable build_pht(const WordList& words, std::uint32_t max_seed_attempts = 4096);

/// Per-length trie flattened into 2-byte entries.
///
/// Layout: byte 0 holds L (the longest word length), followed by L little-endian
/// u16 absolute offsets of the first slice of each length subtree (0xFFFF when
/// no word has that length). Each entry is (c, x); bit 7 of c marks the last
/// entry of a slice, so running past it means Not Found. On the final
/// character level x is the word index, elsewhere it is the forward distance,
/// in entries, from this entry to the child slice.
struct LinearSearchTable {
  std::vector<std::uint8_t> bytes;
  std::size_t slices = 0;
  std::size_t min_branches = 0;
  std::size_t max_branches = 0;
  double avg_branches = 0.0;

  std::optional<std::uint8_t> lookup(std::string_view s, std::size_t* slices_visited = nullptr) const;
  std::size_t size_bytes() const { return bytes.size(); }
};

LinearSearchTable build_lst(const WordList& words);

enum class LookupMode : std::uint8_t { pht, lst };

/// Word list plus both lookup tables; what the compiler and interpreter consume.
class Isa {
 public:
  explicit Isa(WordList words);

  static const Isa& default_isa();
  static Isa from_artifact(std::span<const std::uint8_t> bytes);

  const WordList& words() const { return words_; }
  const PerfectHashTable& pht() const { return pht_; }
  const LinearSearchTable& lst() const { return lst_; }

  std::optional<std::uint8_t> lookup(std::string_view s, LookupMode mode) const {
    return mode == LookupMode::pht ? pht_.lookup(s) : lst_.lookup(s);
  }

  /// Opcode carrying the given semantics tag, if present.
  std::optional<std::uint8_t> opcode_for_tag(std::string_view tag) const;

 private:
  Isa(WordList words, PerfectHashTable pht, LinearSearchTable lst);

  WordList words_;
  PerfectHashTable pht_;
  LinearSearchTable lst_;
};

/// Table artifact: "RXIS", version, u16 word count, PHT blob, LST blob, name table.
std::vector<std::uint8_t> write_artifact(const Isa& isa);
inline constexpr std::uint8_t kArtifactVersion = 1;

/// Emits the tables as C++ source constants.
std::string write_source_constants(const Isa& isa, std::string_view ns = "rexa_tables");

}  // namespace rexa::isa
