#include <string_view>
#include <utility>

#include "rexa/isa.hpp"

namespace rexa::isa {

namespace {

// Mirrors config/core_words.json; a unit test keeps the two in sync.
constexpr std::pair<std::string_view, std::string_view> kCoreWords[] = {
    {"dup", "dup"},
    {"drop", "drop"},
    {"swap", "swap"},
    {"over", "over"},
    {"rot", "rot"},
    {"-rot", "minus_rot"},
    {"nip", "nip"},
    {"tuck", "tuck"},
    {"pick", "pick"},
    {"depth", "depth"},
    {"2dup", "two_dup"},
    {"2drop", "two_drop"},
    {"+", "add"},
    {"-", "sub"},
    {"*", "mul"},
    {"/", "div"},
    {"mod", "mod"},
    {"*/", "mul_div"},
    {"negate", "negate"},
    {"abs", "abs"},
    {"min", "min"},
    {"max", "max"},
    {"1+", "inc"},
    {"1-", "dec"},
    {"2*", "two_mul"},
    {"2/", "two_div"},
    {"lshift", "lshift"},
    {"rshift", "rshift"},
    {"and", "and"},
    {"or", "or"},
    {"xor", "xor"},
    {"not", "not"},
    {"=", "eq"},
    {"<>", "ne"},
    {"<", "lt"},
    {">", "gt"},
    {"<=", "le"},
    {">=", "ge"},
    {"0=", "zero_eq"},
    {"0<", "zero_lt"},
    {"d+", "d_add"},
    {"d-", "d_sub"},
    {"d=", "d_eq"},
    {"dnegate", "d_negate"},
    {"d.", "d_print"},
    {"s>d", "s_to_d"},
    {"d>s", "d_to_s"},
    {"@", "fetch"},
    {"!", "store"},
    {"read", "read"},
    {"write", "write"},
    {"push", "push"},
    {"pop", "pop"},
    {"get", "get"},
    {":", "colon"},
    {";", "semicolon"},
    {"var", "var"},
    {"array", "array"},
    {"const", "const"},
    {"$", "address_of"},
    {"import", "import"},
    {"export", "export"},
    {"exception", "exception"},
    {"if", "if"},
    {"else", "else"},
    {"endif", "endif"},
    {"do", "do"},
    {"loop", "loop"},
    {"+loop", "plus_loop"},
    {"i", "loop_i"},
    {"j", "loop_j"},
    {"begin", "begin"},
    {"until", "until"},
    {"again", "again"},
    {"while", "while"},
    {"repeat", "repeat"},
    {"exit", "exit"},
    {".", "print"},
    {"cr", "cr"},
    {"emit", "emit"},
    {".\"", "dot_quote"},
    {"out", "out"},
    {"in", "in"},
    {"yield", "yield"},
    {"sleep", "sleep"},
    {"await", "await"},
    {"task", "task"},
    {"end", "end"},
    {"receive", "receive"},
    {"send", "send"},
    {"sendn", "sendn"},
    {"catch", "catch"},
    {"throw", "throw"},
    {"vecload", "vecload"},
    {"vecscale", "vecscale"},
    {"vecadd", "vecadd"},
    {"vecmul", "vecmul"},
    {"vecfold", "vecfold"},
    {"vecmap", "vecmap"},
    {"dotprod", "dotprod"},
    {"vecprint", "vecprint"}
};

}  // namespace

const WordList& default_wordlist() {
  static const WordList list = [] {
    WordList wl;
    for (const auto& [name, tag] : kCoreWords) wl.add(name, tag);
    return wl;
  }();
  return list;
}

}  // namespace rexa::isa
