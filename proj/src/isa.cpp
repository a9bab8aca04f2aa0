#include "rexa/isa.hpp"

#include <algorithm>
#include <array>
#include <cstring>
#include <deque>
#include <map>
#include <sstream>

#include <json.hpp>

#include "rexa/error.hpp"

namespace rexa::isa {

namespace {

constexpr std::uint16_t kNoSubtree = 0xFFFF;

// Jenkins one-at-a-time, seeded.
std::uint32_t one_at_a_time(std::string_view s, std::uint32_t h) {
  for (unsigned char c : s) {
    h += c;
    h += h << 10;
    h ^= h >> 6;
  }
  h += h << 3;
  h ^= h >> 11;
  h += h << 15;
  return h;
}

std::array<std::uint32_t, 3> vertices(std::string_view s, std::uint32_t seed, std::uint16_t part) {
  std::array<std::uint32_t, 3> v{};
  for (std::uint32_t k = 0; k < 3; ++k) {
    const std::uint32_t h = one_at_a_time(s, seed ^ (0x9E3779B9u * (k + 1)));
    v[k] = k * part + h % part;
  }
  return v;
}

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xFF));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}

  std::uint8_t u8() {
    need(1);
    return b_[pos_++];
  }
  std::uint16_t u16() {
    need(2);
    const auto v = static_cast<std::uint16_t>(b_[pos_] | (b_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::span<const std::uint8_t> bytes(std::size_t n) {
    need(n);
    auto s = b_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > b_.size()) throw TableError("table artifact truncated");
  }
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

}  // namespace

bool valid_word_name(std::string_view name) {
  if (name.empty() || name.size() > kMaxNameLength) return false;
  return std::all_of(name.begin(), name.end(), [](char c) {
    const auto u = static_cast<unsigned char>(c);
    return u > 0x20 && u < 0x7F && c != '(';
  });
}

void WordList::add(std::string_view name, std::string_view tag) {
  if (name.size() > kMaxNameLength) throw ConfigError("word name too long: " + std::string(name));
  if (!valid_word_name(name)) throw ConfigError("invalid word name: '" + std::string(name) + "'");
  if (tag.empty()) throw ConfigError("missing semantics tag for word: " + std::string(name));
  if (find(name)) throw ConfigError("duplicate word name: " + std::string(name));
  if (words_.size() >= kMaxWords) throw ConfigError("word list exceeds the opcode space");
  words_.push_back({std::string(name), static_cast<std::uint8_t>(words_.size()), std::string(tag)});
}

std::optional<std::uint8_t> WordList::find(std::string_view name) const {
  for (const auto& w : words_)
    if (w.name == name) return w.opcode;
  return std::nullopt;
}

std::size_t WordList::max_length() const {
  std::size_t n = 0;
  for (const auto& w : words_) n = std::max(n, w.name.size());
  return n;
}

std::size_t WordList::total_chars() const {
  std::size_t n = 0;
  for (const auto& w : words_) n += w.name.size();
  return n;
}

WordList load_wordlist(std::string_view document) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(document);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed word list: ") + e.what());
  }
  const nlohmann::json* arr = &doc;
  if (doc.is_object()) {
    if (!doc.contains("words")) throw ConfigError("malformed word list: missing \"words\"");
    arr = &doc["words"];
  }
  if (!arr->is_array()) throw ConfigError("malformed word list: expected an array of words");
  WordList wl;
  for (const auto& item : *arr) {
    if (!item.is_object() || !item.contains("name") || !item["name"].is_string())
      throw ConfigError("malformed word list entry");
    const auto name = item["name"].get<std::string>();
    const auto tag = item.contains("tag") ? item["tag"].get<std::string>() : name;
    wl.add(name, tag);
  }
  return wl;
}

// ---------------------------------------------------------------------------
// Perfect hash table

std::uint32_t PerfectHashTable::slot(std::string_view s) const {
  if (word_count == 0) return 0;
  const auto v = vertices(s, seed, part);
  return (static_cast<std::uint32_t>(aux[v[0]]) + aux[v[1]] + aux[v[2]]) % word_count;
}

std::optional<std::uint8_t> PerfectHashTable::lookup(std::string_view s) const {
  if (s.empty() || s.size() > max_length || word_count == 0) return std::nullopt;
  const std::uint32_t idx = slot(s);
  const char* row = check.data() + static_cast<std::size_t>(idx) * max_length;
  if (std::memcmp(row, s.data(), s.size()) != 0) return std::nullopt;
  if (s.size() < max_length && row[s.size()] != '\0') return std::nullopt;
  return static_cast<std::uint8_t>(idx);
}

PerfectHashTable build_pht(const WordList& words, std::uint32_t max_seed_attempts) {
  if (words.empty()) throw TableError("cannot build a perfect hash table for an empty word list");
  const std::size_t m = words.size();

  PerfectHashTable t;
  t.word_count = static_cast<std::uint16_t>(m);
  t.max_length = static_cast<std::uint8_t>(words.max_length());
  t.part = static_cast<std::uint16_t>(std::max<std::size_t>(1, (m * 123 + 299) / 300));

  for (std::uint32_t attempt = 0; attempt < max_seed_attempts; ++attempt) {
    // Widen the graph slowly if a ratio keeps failing (tiny word sets).
    if (attempt > 0 && attempt % 512 == 0) ++t.part;
    t.seed = attempt;
    const std::size_t nv = 3u * t.part;

    std::vector<std::array<std::uint32_t, 3>> edges(m);
    std::vector<std::vector<std::uint32_t>> incident(nv);
    for (std::size_t e = 0; e < m; ++e) {
      edges[e] = vertices(words[e].name, t.seed, t.part);
      for (auto v : edges[e]) incident[v].push_back(static_cast<std::uint32_t>(e));
    }

    std::vector<std::uint32_t> degree(nv);
    for (std::size_t v = 0; v < nv; ++v) degree[v] = static_cast<std::uint32_t>(incident[v].size());
    std::vector<bool> removed(m, false);
    std::deque<std::uint32_t> queue;
    for (std::uint32_t v = 0; v < nv; ++v)
      if (degree[v] == 1) queue.push_back(v);

    std::vector<std::pair<std::uint32_t, std::uint32_t>> order;  // (edge, free vertex)
    while (!queue.empty()) {
      const std::uint32_t v = queue.front();
      queue.pop_front();
      if (degree[v] != 1) continue;
      std::uint32_t edge = 0;
      for (auto e : incident[v])
        if (!removed[e]) edge = e;
      removed[edge] = true;
      order.emplace_back(edge, v);
      for (auto u : edges[edge]) {
        if (--degree[u] == 1) queue.push_back(u);
      }
    }
    if (order.size() != m) continue;

    t.aux.assign(nv, 0);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      const auto [edge, free_v] = *it;
      std::uint32_t sum = 0;
      for (auto u : edges[edge])
        if (u != free_v) sum += t.aux[u];
      t.aux[free_v] = static_cast<std::uint8_t>((edge + m * 2 * 256 - sum) % m);
    }

    t.check.assign(m * t.max_length, '\0');
    for (std::size_t e = 0; e < m; ++e)
      std::memcpy(t.check.data() + e * t.max_length, words[e].name.data(), words[e].name.size());
    return t;
  }
  throw TableError("perfect hash construction failed; the word set needs different mixing constants");
}

// ---------------------------------------------------------------------------
// Linear search table

namespace {

struct TrieNode {
  std::map<char, std::size_t> children;  // char -> node index or word index (last level)
};

struct LstBuilder {
  std::vector<TrieNode> nodes;
  std::vector<std::array<std::uint8_t, 2>> entries;
  std::size_t slices = 0;
  std::size_t min_b = SIZE_MAX, max_b = 0, sum_b = 0;

  std::size_t emit(std::size_t node, std::size_t depth, std::size_t length) {
    const std::size_t start = entries.size();
    const auto children = nodes[node].children;  // copy: nodes is not mutated but keep it simple
    ++slices;
    min_b = std::min(min_b, children.size());
    max_b = std::max(max_b, children.size());
    sum_b += children.size();
    for (std::size_t k = 0; k < children.size(); ++k) entries.push_back({0, 0});
    std::size_t k = 0;
    for (const auto& [c, child] : children) {
      const std::size_t at = start + k++;
      const std::uint8_t last = k == children.size() ? 0x80 : 0x00;
      if (depth + 1 == length) {
        entries[at] = {static_cast<std::uint8_t>(static_cast<unsigned char>(c) | last),
                       static_cast<std::uint8_t>(child)};
      } else {
        const std::size_t child_start = emit(child, depth + 1, length);
        const std::size_t dist = child_start - at;
        if (dist > 0xFF) throw TableError("linear search table branch offset exceeds one byte");
        entries[at] = {static_cast<std::uint8_t>(static_cast<unsigned char>(c) | last),
                       static_cast<std::uint8_t>(dist)};
      }
    }
    return start;
  }
};

}  // namespace

LinearSearchTable build_lst(const WordList& words) {
  if (words.empty()) throw TableError("cannot build a linear search table for an empty word list");
  if (words.size() > 0xFF) throw TableError("too many words for one-byte leaf indices");
  const std::size_t lmax = words.max_length();

  LstBuilder b;
  std::vector<std::uint16_t> subtree(lmax, kNoSubtree);
  const std::size_t header = 1 + 2 * lmax;

  for (std::size_t len = 1; len <= lmax; ++len) {
    b.nodes.clear();
    b.nodes.emplace_back();
    bool any = false;
    for (const auto& w : words) {
      if (w.name.size() != len) continue;
      any = true;
      std::size_t node = 0;
      for (std::size_t d = 0; d < len; ++d) {
        const char c = w.name[d];
        if (d + 1 == len) {
          b.nodes[node].children[c] = w.opcode;
        } else {
          auto it = b.nodes[node].children.find(c);
          if (it == b.nodes[node].children.end()) {
            b.nodes.emplace_back();
            it = b.nodes[node].children.emplace(c, b.nodes.size() - 1).first;
          }
          node = it->second;
        }
      }
    }
    if (!any) continue;
    const std::size_t start = b.emit(0, 0, len);
    const std::size_t offset = header + 2 * start;
    if (offset >= kNoSubtree) throw TableError("linear search table exceeds 64 KiB");
    subtree[len - 1] = static_cast<std::uint16_t>(offset);
  }

  LinearSearchTable t;
  t.bytes.push_back(static_cast<std::uint8_t>(lmax));
  for (auto off : subtree) put_u16(t.bytes, off);
  for (const auto& e : b.entries) {
    t.bytes.push_back(e[0]);
    t.bytes.push_back(e[1]);
  }
  t.slices = b.slices;
  t.min_branches = b.min_b;
  t.max_branches = b.max_b;
  t.avg_branches = b.slices ? static_cast<double>(b.sum_b) / static_cast<double>(b.slices) : 0.0;
  return t;
}

std::optional<std::uint8_t> LinearSearchTable::lookup(std::string_view s, std::size_t* slices_visited) const {
  if (slices_visited) *slices_visited = 0;
  if (bytes.empty()) return std::nullopt;
  const std::size_t lmax = bytes[0];
  const std::size_t n = s.size();
  if (n == 0 || n > lmax) return std::nullopt;
  const std::size_t hdr = 1 + 2 * (n - 1);
  std::size_t pos = bytes[hdr] | (bytes[hdr + 1] << 8);
  if (pos == kNoSubtree) return std::nullopt;

  for (std::size_t k = 0; k < n; ++k) {
    if (slices_visited) ++*slices_visited;
    const auto want = static_cast<unsigned char>(s[k]);
    for (std::size_t e = pos;; e += 2) {
      if (e + 1 >= bytes.size()) return std::nullopt;
      const std::uint8_t c = bytes[e];
      if ((c & 0x7F) == want) {
        // The last character level holds word indices, the others branches.
        if (k + 1 == n) return bytes[e + 1];
        pos = e + 2 * static_cast<std::size_t>(bytes[e + 1]);
        break;
      }
      if (c & 0x80) return std::nullopt;
    }
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Isa and artifact

Isa::Isa(WordList words) : words_(std::move(words)), pht_(build_pht(words_)), lst_(build_lst(words_)) {}

Isa::Isa(WordList words, PerfectHashTable pht, LinearSearchTable lst)
    : words_(std::move(words)), pht_(std::move(pht)), lst_(std::move(lst)) {}

const Isa& Isa::default_isa() {
  static const Isa isa(default_wordlist());
  return isa;
}

std::optional<std::uint8_t> Isa::opcode_for_tag(std::string_view tag) const {
  for (const auto& w : words_)
    if (w.tag == tag) return w.opcode;
  return std::nullopt;
}

std::vector<std::uint8_t> write_artifact(const Isa& isa) {
  std::vector<std::uint8_t> out{'R', 'X', 'I', 'S', kArtifactVersion};
  put_u16(out, static_cast<std::uint16_t>(isa.words().size()));

  const auto& p = isa.pht();
  std::vector<std::uint8_t> pht;
  put_u32(pht, p.seed);
  put_u16(pht, p.part);
  pht.push_back(p.max_length);
  pht.insert(pht.end(), p.aux.begin(), p.aux.end());
  pht.insert(pht.end(), p.check.begin(), p.check.end());
  put_u32(out, static_cast<std::uint32_t>(pht.size()));
  out.insert(out.end(), pht.begin(), pht.end());

  const auto& l = isa.lst();
  put_u32(out, static_cast<std::uint32_t>(l.bytes.size()));
  out.insert(out.end(), l.bytes.begin(), l.bytes.end());

  for (const auto& w : isa.words()) {
    out.push_back(static_cast<std::uint8_t>(w.name.size()));
    out.insert(out.end(), w.name.begin(), w.name.end());
    out.push_back(static_cast<std::uint8_t>(w.tag.size()));
    out.insert(out.end(), w.tag.begin(), w.tag.end());
  }
  return out;
}

Isa Isa::from_artifact(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  const auto magic = r.bytes(4);
  if (!std::equal(magic.begin(), magic.end(), "RXIS")) throw TableError("not a table artifact (bad magic)");
  if (r.u8() != kArtifactVersion) throw TableError("unsupported table artifact version");
  const std::uint16_t count = r.u16();

  const std::uint32_t pht_len = r.u32();
  Reader pr(r.bytes(pht_len));
  PerfectHashTable p;
  p.seed = pr.u32();
  p.part = pr.u16();
  p.max_length = pr.u8();
  p.word_count = count;
  const auto aux = pr.bytes(3u * p.part);
  p.aux.assign(aux.begin(), aux.end());
  const auto chk = pr.bytes(static_cast<std::size_t>(count) * p.max_length);
  p.check.assign(chk.begin(), chk.end());

  const std::uint32_t lst_len = r.u32();
  LinearSearchTable l;
  const auto lb = r.bytes(lst_len);
  l.bytes.assign(lb.begin(), lb.end());

  WordList wl;
  for (std::uint16_t i = 0; i < count; ++i) {
    const auto name = r.bytes(r.u8());
    const auto tag = r.bytes(r.u8());
    wl.add(std::string(name.begin(), name.end()), std::string(tag.begin(), tag.end()));
  }
  if (!r.done()) throw TableError("trailing bytes in table artifact");

  // Recompute slice statistics from a fresh build; the stored bytes stay canonical.
  const auto rebuilt = build_lst(wl);
  l.slices = rebuilt.slices;
  l.min_branches = rebuilt.min_branches;
  l.max_branches = rebuilt.max_branches;
  l.avg_branches = rebuilt.avg_branches;
  return Isa(std::move(wl), std::move(p), std::move(l));
}

std::string write_source_constants(const Isa& isa, std::string_view ns) {
  std::ostringstream os;
  auto bytes_array = [&os](std::string_view name, auto first, auto last) {
    os << "inline constexpr unsigned char " << name << "[] = {";
    std::size_t i = 0;
    for (auto it = first; it != last; ++it, ++i) {
      if (i % 16 == 0) os << "\n    ";
      os << static_cast<unsigned>(static_cast<unsigned char>(*it)) << ",";
    }
    os << "\n};\n";
  };
  os << "// Generated by rexa gen-isa. Do not edit.\n#pragma once\n\nnamespace " << ns << " {\n\n";
  os << "inline constexpr unsigned kWordCount = " << isa.words().size() << ";\n";
  os << "inline constexpr unsigned kPhtSeed = " << isa.pht().seed << "u;\n";
  os << "inline constexpr unsigned kPhtPart = " << isa.pht().part << ";\n";
  os << "inline constexpr unsigned kMaxLength = " << unsigned(isa.pht().max_length) << ";\n";
  bytes_array("kPhtAux", isa.pht().aux.begin(), isa.pht().aux.end());
  bytes_array("kPhtCheck", isa.pht().check.begin(), isa.pht().check.end());
  bytes_array("kLst", isa.lst().bytes.begin(), isa.lst().bytes.end());
  os << "inline constexpr const char* kWordNames[] = {";
  for (const auto& w : isa.words()) {
    os << "\n    \"";
    for (char c : w.name) {
      if (c == '"' || c == '\\') os << '\\';
      os << c;
    }
    os << "\",";
  }
  os << "\n};\n\n}  // namespace " << ns << "\n";
  return os.str();
}

}  // namespace rexa::isa
