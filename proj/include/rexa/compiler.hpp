#pragma once

// In-place text-to-bytecode compiler. Source text stored in a code frame is
// overwritten token by token with bytecode; the write cursor never passes
// the read cursor.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rexa/isa.hpp"
#include "rexa/ios.hpp"
#include "rexa/memory.hpp"

namespace rexa {

enum class TokenKind : std::uint8_t { word, integer, double_integer, string, end };

struct Token {
  TokenKind kind = TokenKind::end;
  std::size_t begin = 0;  // offset of the first byte
  std::size_t end = 0;    // offset one past the last byte (closing quote for strings)
  std::string text;       // word text or string contents
  std::int64_t value = 0;
};

/// Reads the next token at or after `pos`, skipping whitespace and `( ... )`
/// comments; advances `pos` past the token. Throws CompileError(syntax) for
/// unterminated strings or comments (frame id 0; callers rethrow with theirs).
Token next_token(std::span<const std::uint8_t> src, std::size_t& pos);
std::vector<Token> tokenize(std::string_view text);

inline bool is_delimiter(std::uint8_t c) { return c == ' ' || c == '\n' || c == '\r' || c == '\t' || c == 0; }

/// Called before every write with [begin, end) and the read cursor limit, all
/// as frame-relative offsets.
class CompileObserver {
 public:
  virtual ~CompileObserver() = default;
  virtual void on_emit(std::size_t begin, std::size_t end, std::size_t read_cursor) = 0;
};

struct CompileStats {
  std::size_t tokens = 0;
  std::size_t words = 0;  // word tokens resolved (core, local, dictionary, IOS)
  std::size_t source_bytes = 0;
  std::size_t code_bytes = 0;   // compiled code including the end marker
  std::size_t frame_bytes = 0;  // final frame length including appended arrays
};

struct CompileResult {
  std::uint16_t frame = 0;
  std::uint32_t start = 0;
  std::uint32_t code_end = 0;
  CompileStats stats;
};

struct CompileContext {
  CodeSegment& cs;
  Dictionary& dict;
  const isa::Isa& isa;
  const IosTable& ios;
  isa::LookupMode mode = isa::LookupMode::pht;
  CompileObserver* observer = nullptr;
};

/// Compiles the source held in `frame` (its last byte is reserved for the end
/// marker). On error the frame is left for the caller to free.
CompileResult compile_frame(CompileContext& ctx, std::uint16_t frame);

}  // namespace rexa
