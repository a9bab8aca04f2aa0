#include "rexa/compiler.hpp"

#include <algorithm>
#include <charconv>
#include <cstring>
#include <optional>
#include <unordered_map>

#include "rexa/bytecode.hpp"
#include "rexa/error.hpp"

namespace rexa {

namespace {

constexpr std::size_t kControlDepth = 16;

std::optional<std::int64_t> parse_number(std::string_view s, bool& suffix_l, bool& overflow) {
  suffix_l = false;
  overflow = false;
  if (!s.empty() && s.back() == 'l') {
    suffix_l = true;
    s.remove_suffix(1);
  }
  std::size_t i = (!s.empty() && s[0] == '-') ? 1 : 0;
  if (i == s.size()) return std::nullopt;
  for (std::size_t k = i; k < s.size(); ++k)
    if (s[k] < '0' || s[k] > '9') return std::nullopt;
  std::int64_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec == std::errc::result_out_of_range) {
    overflow = true;
    return 0;
  }
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

}  // namespace

Token next_token(std::span<const std::uint8_t> src, std::size_t& pos) {
  const std::size_t n = src.size();
  for (;;) {
    while (pos < n && src[pos] != 0 && is_delimiter(src[pos])) ++pos;
    if (pos < n && src[pos] == '(') {
      std::size_t q = pos + 1;
      while (q < n && src[q] != ')' && src[q] != 0) ++q;
      if (q >= n || src[q] != ')') throw CompileError(CompileErrorKind::syntax, 0, pos, "unterminated comment");
      pos = q + 1;
      continue;
    }
    break;
  }
  Token t;
  if (pos >= n || src[pos] == 0) {
    t.begin = t.end = pos;
    return t;
  }
  const std::size_t b = pos;
  std::size_t e = b;
  while (e < n && !is_delimiter(src[e])) ++e;
  t.begin = b;
  const std::string_view text(reinterpret_cast<const char*>(src.data()) + b, e - b);

  if (text == ".\"") {
    const std::size_t start = e + 1;
    std::size_t q = start;
    while (q < n && src[q] != '"' && src[q] != 0) ++q;
    if (start > n || q >= n || src[q] != '"')
      throw CompileError(CompileErrorKind::syntax, 0, b, "unterminated string literal");
    t.kind = TokenKind::string;
    t.text.assign(reinterpret_cast<const char*>(src.data()) + start, q - start);
    t.end = q + 1;
    pos = t.end;
    return t;
  }

  t.end = e;
  t.text.assign(text);
  pos = e;
  bool suffix_l = false, overflow = false;
  if (const auto v = parse_number(text, suffix_l, overflow)) {
    if (overflow) throw CompileError(CompileErrorKind::literal_range, 0, b, "literal out of range: " + t.text);
    t.kind = suffix_l ? TokenKind::double_integer : TokenKind::integer;
    t.value = *v;
  } else {
    t.kind = TokenKind::word;
  }
  return t;
}

std::vector<Token> tokenize(std::string_view text) {
  std::vector<Token> out;
  const std::span<const std::uint8_t> src(reinterpret_cast<const std::uint8_t*>(text.data()), text.size());
  std::size_t pos = 0;
  for (;;) {
    Token t = next_token(src, pos);
    if (t.kind == TokenKind::end) break;
    out.push_back(std::move(t));
  }
  return out;
}

namespace {

enum class CTag : std::uint8_t {
  none,
  colon,
  semicolon,
  var,
  array,
  constant,
  address_of,
  import,
  exportw,
  exception,
  if_,
  else_,
  endif,
  do_,
  loop,
  plus_loop,
  begin,
  until,
  again,
  while_,
  repeat,
  dot_quote,
  exit,
};

CTag tag_of(std::string_view tag) {
  static const std::unordered_map<std::string_view, CTag> m{
      {"colon", CTag::colon},         {"semicolon", CTag::semicolon}, {"var", CTag::var},
      {"array", CTag::array},         {"const", CTag::constant},      {"address_of", CTag::address_of},
      {"import", CTag::import},       {"export", CTag::exportw},      {"exception", CTag::exception},
      {"if", CTag::if_},              {"else", CTag::else_},          {"endif", CTag::endif},
      {"do", CTag::do_},              {"loop", CTag::loop},           {"plus_loop", CTag::plus_loop},
      {"begin", CTag::begin},         {"until", CTag::until},         {"again", CTag::again},
      {"while", CTag::while_},        {"repeat", CTag::repeat},       {"dot_quote", CTag::dot_quote},
      {"exit", CTag::exit},
  };
  const auto it = m.find(tag);
  return it == m.end() ? CTag::none : it->second;
}

enum class LocalKind : std::uint8_t { word, var, array, pending_array, constant, import };

struct Local {
  LocalKind kind;
  std::int32_t value;  // address, constant value or pending-array index
};

struct PendingArray {
  std::size_t cells;
  std::vector<std::size_t> patch_sites;  // frame offsets of u16 operands
  std::size_t offset = 0;                // final offset of the length header
};

struct Control {
  CTag kind;
  std::size_t at;  // frame offset: operand to patch, or loop/begin target
};

class FrameCompiler {
 public:
  FrameCompiler(CompileContext& ctx, CodeFrame& frame)
      : ctx_(ctx),
        id_(frame.id),
        start_(frame.start),
        len_(frame.length),
        base_(ctx.cs.data() + frame.start),
        src_(base_, frame.length) {
    source_bytes_ = static_cast<std::size_t>(std::find(base_, base_ + len_, std::uint8_t{0}) - base_);
    tags_.resize(ctx.isa.words().size());
    for (const auto& w : ctx.isa.words()) tags_[w.opcode] = tag_of(w.tag);
  }

  CompileResult run() {
    for (;;) {
      Token t = next();
      if (t.kind == TokenKind::end) break;
      ++stats_.tokens;
      handle(t);
    }
    if (!ctl_.empty()) fail(CompileErrorKind::syntax, len_ - 1, "unterminated control structure or definition");
    read_limit_ = len_;
    const std::uint8_t end_op = op::kEnd;
    emit(&end_op, 1);
    const std::size_t code_end = w_;
    finish_arrays();
    stats_.source_bytes = source_bytes_;
    stats_.code_bytes = code_end;
    CodeFrame* f = ctx_.cs.find(id_);
    f->state = FrameState::compiled;
    stats_.frame_bytes = f->length;
    return {id_, start_, static_cast<std::uint32_t>(start_ + code_end), stats_};
  }

 private:
  [[noreturn]] void fail(CompileErrorKind k, std::size_t offset, const std::string& msg) const {
    throw CompileError(k, id_, offset, msg);
  }

  Token next() {
    try {
      if (source_done_) return Token{};
      Token t = next_token(src_, r_);
      if (t.kind != TokenKind::end) {
        // The delimiter after a token is consumed now; emission may reuse it.
        if (r_ >= len_ || src_[r_] == 0)
          source_done_ = true;
        else if (is_delimiter(src_[r_]))
          ++r_;
        read_limit_ = std::min(t.end + 1, len_);
      }
      return t;
    } catch (const CompileError& e) {
      throw CompileError(e.kind(), id_, e.offset(), e.message());
    }
  }

  Token next_word(const Token& after, const char* what) {
    Token t = next();
    if (t.kind == TokenKind::end) fail(CompileErrorKind::syntax, after.end, std::string("expected ") + what);
    ++stats_.tokens;
    return t;
  }

  std::uint16_t abs(std::size_t offset) const { return static_cast<std::uint16_t>(start_ + offset); }

  void emit(const std::uint8_t* bytes, std::size_t n) {
    if (ctx_.observer) ctx_.observer->on_emit(w_, w_ + n, read_limit_);
    if (w_ + n > read_limit_)
      fail(CompileErrorKind::in_place_overrun, w_, "bytecode would overwrite unread source text");
    std::memcpy(base_ + w_, bytes, n);
    w_ += n;
  }
  void emit1(std::uint8_t b) { emit(&b, 1); }
  void emit3(std::uint8_t opc, std::uint16_t operand) {
    const std::uint8_t b[3] = {opc, static_cast<std::uint8_t>(operand & 0xFF), static_cast<std::uint8_t>(operand >> 8)};
    emit(b, 3);
  }
  void patch(std::size_t at, std::uint16_t v) { write_u16(base_ + at, v); }

  void emit_literal(std::int64_t v, bool double_word, const Token& t) {
    if (double_word) {
      if (v < kDoubleMin || v > kDoubleMax) fail(CompileErrorKind::literal_range, t.begin, "double literal outside 30 bits");
      const auto w = encode_double_literal(static_cast<std::int32_t>(v));
      emit(w.bytes.data(), w.length);
    } else if (fits_short(static_cast<std::int32_t>(v)) && v >= kShortMin && v <= kShortMax) {
      const auto w = encode_literal(static_cast<std::int32_t>(v));
      emit(w.bytes.data(), w.length);
    } else if (v >= -32768 && v <= 32767) {
      emit3(op::kLit, static_cast<std::uint16_t>(static_cast<std::int16_t>(v)));
    } else {
      fail(CompileErrorKind::literal_range, t.begin, "literal does not fit a cell (use the l suffix): " + t.text);
    }
  }

  void push_control(CTag kind, std::size_t at, const Token& t) {
    if (ctl_.size() >= kControlDepth) fail(CompileErrorKind::syntax, t.begin, "control structures nested deeper than 16");
    ctl_.push_back({kind, at});
  }

  Control pop_control(std::initializer_list<CTag> kinds, const Token& t) {
    if (ctl_.empty()) fail(CompileErrorKind::syntax, t.begin, "'" + t.text + "' without matching opener");
    const Control c = ctl_.back();
    for (auto k : kinds)
      if (c.kind == k) {
        ctl_.pop_back();
        return c;
      }
    fail(CompileErrorKind::syntax, t.begin, "'" + t.text + "' does not match the open control structure");
  }

  void bind(const Token& name, Local l) {
    if (!isa::valid_word_name(name.text)) fail(CompileErrorKind::syntax, name.begin, "invalid name: " + name.text);
    locals_[name.text] = l;
  }

  void handle(const Token& t) {
    switch (t.kind) {
      case TokenKind::integer:
        emit_literal(t.value, false, t);
        return;
      case TokenKind::double_integer:
        emit_literal(t.value, true, t);
        return;
      case TokenKind::string: {
        if (t.text.size() > 255) fail(CompileErrorKind::syntax, t.begin, "string literal longer than 255 bytes");
        std::vector<std::uint8_t> b;
        b.push_back(op::kStr);
        b.push_back(static_cast<std::uint8_t>(t.text.size()));
        b.insert(b.end(), t.text.begin(), t.text.end());
        emit(b.data(), b.size());
        return;
      }
      default:
        break;
    }
    ++stats_.words;

    if (const auto it = locals_.find(t.text); it != locals_.end()) {
      emit_local(it->second, t);
      return;
    }
    if (const auto opc = ctx_.isa.lookup(t.text, ctx_.mode)) {
      const CTag tag = tags_[*opc];
      if (tag == CTag::none) emit1(*opc);
      else compile_tag(tag, *opc, t);
      return;
    }
    if (const auto addr = ctx_.dict.lookup(t.text)) {
      emit3(op::kCall, *addr);
      return;
    }
    if (const auto f = ctx_.ios.find_fios(t.text)) {
      emit3(op::kIos, *f);
      return;
    }
    if (const auto d = ctx_.ios.find_dios(t.text)) {
      emit3(op::kAddr, static_cast<std::uint16_t>(dios_handle(*d)));
      return;
    }
    fail(CompileErrorKind::unknown_word, t.begin, "unknown word: " + t.text);
  }

  void emit_local(const Local& l, const Token& t) {
    switch (l.kind) {
      case LocalKind::word:
      case LocalKind::import:
        emit3(op::kCall, static_cast<std::uint16_t>(l.value));
        return;
      case LocalKind::var:
      case LocalKind::array:
        emit3(op::kAddr, static_cast<std::uint16_t>(l.value));
        return;
      case LocalKind::pending_array:
        emit3(op::kAddr, 0);
        pending_[static_cast<std::size_t>(l.value)].patch_sites.push_back(w_ - 2);
        return;
      case LocalKind::constant:
        emit_literal(l.value, false, t);
        return;
    }
  }

  std::optional<Cell> funcref(const Token& name) {
    if (const auto it = locals_.find(name.text); it != locals_.end()) {
      if (it->second.kind == LocalKind::word || it->second.kind == LocalKind::import)
        return static_cast<Cell>(it->second.value);
      return std::nullopt;
    }
    if (const auto opc = ctx_.isa.lookup(name.text, ctx_.mode)) {
      if (tags_[*opc] != CTag::none) return std::nullopt;
      return core_funcref(*opc);
    }
    if (const auto addr = ctx_.dict.lookup(name.text)) return static_cast<Cell>(*addr);
    if (const auto f = ctx_.ios.find_fios(name.text)) return fios_funcref(*f);
    return std::nullopt;
  }

  void compile_tag(CTag tag, std::uint8_t opc, const Token& t) {
    switch (tag) {
      case CTag::colon: {
        const Token name = next_word(t, "a word name after ':'");
        for (const auto& c : ctl_)
          if (c.kind == CTag::colon) fail(CompileErrorKind::syntax, t.begin, "nested definitions are not allowed");
        emit3(op::kBranch, 0);
        bind(name, {LocalKind::word, abs(w_)});
        push_control(CTag::colon, w_ - 2, t);
        return;
      }
      case CTag::semicolon: {
        const Control c = pop_control({CTag::colon}, t);
        emit1(op::kExit);
        patch(c.at, abs(w_));
        return;
      }
      case CTag::exit:
        emit1(op::kExit);
        return;
      case CTag::var: {
        const Token name = next_word(t, "a variable name");
        const std::uint8_t b[3] = {op::kVar, 0, 0};
        emit(b, 3);
        bind(name, {LocalKind::var, abs(w_ - 2)});
        return;
      }
      case CTag::array:
        compile_array(t);
        return;
      case CTag::constant: {
        const Token name = next_word(t, "a constant name");
        const Token value = next_word(name, "a constant value");
        if (value.kind != TokenKind::integer || value.value < -32768 || value.value > 32767)
          fail(CompileErrorKind::literal_range, value.begin, "constant value must be a single-cell integer");
        bind(name, {LocalKind::constant, static_cast<std::int32_t>(value.value)});
        return;
      }
      case CTag::address_of: {
        const Token name = next_word(t, "a word name after '$'");
        const auto ref = funcref(name);
        if (!ref) fail(CompileErrorKind::unknown_word, name.begin, "no function named " + name.text);
        emit3(op::kAddr, static_cast<std::uint16_t>(*ref));
        return;
      }
      case CTag::import: {
        const Token name = next_word(t, "a word name to import");
        const auto addr = ctx_.dict.lookup(name.text);
        if (!addr) fail(CompileErrorKind::import_missing, name.begin, "import of missing word: " + name.text);
        bind(name, {LocalKind::import, *addr});
        return;
      }
      case CTag::exportw: {
        const Token name = next_word(t, "a word name to export");
        const auto it = locals_.find(name.text);
        if (it == locals_.end() || it->second.kind != LocalKind::word)
          fail(CompileErrorKind::unknown_word, name.begin, "export of undefined local word: " + name.text);
        try {
          ctx_.dict.define(name.text, id_, static_cast<std::uint16_t>(it->second.value));
        } catch (const Error& e) {
          fail(CompileErrorKind::syntax, name.begin, e.what());
        }
        ctx_.cs.find(id_)->locked = true;
        return;
      }
      case CTag::exception: {
        const Token exc = next_word(t, "an exception name or number");
        std::int32_t code = 0;
        if (exc.kind == TokenKind::integer) {
          code = static_cast<std::int32_t>(exc.value);
        } else if (const auto it = locals_.find(exc.text); it != locals_.end() && it->second.kind == LocalKind::constant) {
          code = it->second.value;
        } else {
          code = exception_from_name(exc.text);
        }
        if (code <= 0 || code > kShortMax) fail(CompileErrorKind::syntax, exc.begin, "bad exception: " + exc.text);
        emit_literal(code, false, exc);
        emit1(opc);
        return;
      }
      case CTag::if_:
        emit3(op::kZeroBranch, 0);
        push_control(CTag::if_, w_ - 2, t);
        return;
      case CTag::else_: {
        const Control c = pop_control({CTag::if_}, t);
        emit3(op::kBranch, 0);
        patch(c.at, abs(w_));
        push_control(CTag::else_, w_ - 2, t);
        return;
      }
      case CTag::endif: {
        const Control c = pop_control({CTag::if_, CTag::else_}, t);
        patch(c.at, abs(w_));
        return;
      }
      case CTag::do_:
        emit1(op::kDo);
        push_control(CTag::do_, w_, t);
        return;
      case CTag::loop:
      case CTag::plus_loop: {
        const Control c = pop_control({CTag::do_}, t);
        emit3(tag == CTag::loop ? op::kLoop : op::kPlusLoop, abs(c.at));
        return;
      }
      case CTag::begin:
        push_control(CTag::begin, w_, t);
        return;
      case CTag::until:
      case CTag::again: {
        const Control c = pop_control({CTag::begin}, t);
        emit3(tag == CTag::until ? op::kZeroBranch : op::kBranch, abs(c.at));
        return;
      }
      case CTag::while_: {
        if (ctl_.empty() || ctl_.back().kind != CTag::begin)
          fail(CompileErrorKind::syntax, t.begin, "'while' without 'begin'");
        emit3(op::kZeroBranch, 0);
        push_control(CTag::while_, w_ - 2, t);
        return;
      }
      case CTag::repeat: {
        const Control wh = pop_control({CTag::while_}, t);
        const Control b = pop_control({CTag::begin}, t);
        emit3(op::kBranch, abs(b.at));
        patch(wh.at, abs(w_));
        return;
      }
      case CTag::dot_quote:
      case CTag::none:
        fail(CompileErrorKind::syntax, t.begin, "misplaced '" + t.text + "'");
    }
  }

  void compile_array(const Token& t) {
    const Token name = next_word(t, "an array name");
    const Token size_tok = next_word(name, "an array size or '{'");
    if (size_tok.kind == TokenKind::integer) {
      if (size_tok.value <= 0 || size_tok.value > 0x3FFF)
        fail(CompileErrorKind::literal_range, size_tok.begin, "bad array size");
      pending_.push_back({static_cast<std::size_t>(size_tok.value), {}, 0});
      bind(name, {LocalKind::pending_array, static_cast<std::int32_t>(pending_.size() - 1)});
      return;
    }
    if (size_tok.kind != TokenKind::word || size_tok.text != "{")
      fail(CompileErrorKind::syntax, size_tok.begin, "expected an array size or '{'");
    std::vector<Cell> values;
    for (;;) {
      const Token v = next_word(size_tok, "'}' closing the array");
      if (v.kind == TokenKind::word && v.text == "}") break;
      std::int64_t x = 0;
      if (v.kind == TokenKind::integer) {
        x = v.value;
      } else if (const auto it = locals_.find(v.text); v.kind == TokenKind::word && it != locals_.end() &&
                                                        it->second.kind == LocalKind::constant) {
        x = it->second.value;
      } else {
        fail(CompileErrorKind::syntax, v.begin, "array initializers must be integers");
      }
      if (x < -32768 || x > 32767) fail(CompileErrorKind::literal_range, v.begin, "array value does not fit a cell");
      values.push_back(static_cast<Cell>(x));
    }
    if (values.empty()) fail(CompileErrorKind::syntax, size_tok.begin, "empty array initializer");
    std::vector<std::uint8_t> b(3 + 2 * values.size());
    b[0] = op::kArray;
    write_u16(b.data() + 1, static_cast<std::uint16_t>(values.size()));
    for (std::size_t i = 0; i < values.size(); ++i)
      write_u16(b.data() + 3 + 2 * i, static_cast<std::uint16_t>(values[i]));
    emit(b.data(), b.size());
    bind(name, {LocalKind::array, abs(w_ - b.size() + 1)});
  }

  void finish_arrays() {
    std::size_t total = w_;
    for (auto& p : pending_) {
      p.offset = total;
      total += 2 + 2 * p.cells;
    }
    if (total > 0x7FFF) fail(CompileErrorKind::cs_exhausted, w_, "frame too large");
    try {
      ctx_.cs.resize(id_, total);
    } catch (const CsExhausted& e) {
      fail(CompileErrorKind::cs_exhausted, w_, e.what());
    }
    for (const auto& p : pending_) {
      std::memset(base_ + p.offset, 0, 2 + 2 * p.cells);
      write_u16(base_ + p.offset, static_cast<std::uint16_t>(p.cells));
      for (auto site : p.patch_sites) patch(site, abs(p.offset));
    }
  }

  CompileContext& ctx_;
  std::uint16_t id_;
  std::uint32_t start_;
  std::size_t len_;
  std::uint8_t* base_;
  std::span<const std::uint8_t> src_;
  std::size_t r_ = 0, w_ = 0, read_limit_ = 0;
  bool source_done_ = false;
  std::size_t source_bytes_ = 0;
  std::vector<CTag> tags_;
  std::unordered_map<std::string, Local> locals_;
  std::vector<PendingArray> pending_;
  std::vector<Control> ctl_;
  CompileStats stats_;
};

}  // namespace

CompileResult compile_frame(CompileContext& ctx, std::uint16_t frame) {
  CodeFrame* f = ctx.cs.find(frame);
  if (!f) throw Error("no such code frame: " + std::to_string(frame));
  if (f->state != FrameState::source) throw Error("code frame already compiled");
  if (f->length < 1) throw Error("code frame has no room for the end marker");
  ctx.cs.data()[f->start + f->length - 1] = 0;
  FrameCompiler c(ctx, *f);
  return c.run();
}

}  // namespace rexa
