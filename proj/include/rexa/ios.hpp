#pragma once

// Input-Output System: host functions (FIOS) and host data arrays (DIOS)
// exposed to VM programs by name.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rexa/cell.hpp"

namespace rexa {

class Vm;

struct IosCall {
  Vm& vm;
  /// Arguments in declaration order (the last one was on top of the stack).
  std::span<const std::int32_t> args;
};

/// Returns the value pushed back (ignored when retsize is 0). May throw
/// VmFault to raise a VM exception.
using FiosCallback = std::function<std::int32_t(IosCall&)>;

struct FiosEntry {
  std::string name;
  FiosCallback callback;
  std::uint8_t args = 0;
  std::uint8_t argsize = 2;
  std::uint8_t retsize = 0;

  /// Cells consumed from the data stack.
  std::size_t arg_cells() const { return static_cast<std::size_t>(args) * (argsize > 2 ? 2 : 1); }
  std::size_t ret_cells() const { return retsize == 0 ? 0 : (retsize > 2 ? 2 : 1); }
};

struct DiosEntry {
  std::string name;
  void* data = nullptr;
  std::uint16_t cells = 0;
  std::uint8_t size = 2;  // bytes per cell: 1 (unsigned), 2 or 4 (signed)

  bool scalar() const { return cells == 1; }
};

class IosTable {
 public:
  static constexpr std::size_t kMaxEntries = 255;

  /// Throws IosError on duplicates, bad sizes or a full table.
  std::uint16_t fios_add(std::string_view name, FiosCallback cb, std::uint8_t args, std::uint8_t argsize,
                         std::uint8_t retsize);
  std::uint16_t dios_add(std::string_view name, void* data, std::uint16_t cells, std::uint8_t size);

  std::optional<std::uint16_t> find_fios(std::string_view name) const;
  std::optional<std::uint16_t> find_dios(std::string_view name) const;

  const FiosEntry& fios(std::uint16_t i) const { return fios_.at(i); }
  const DiosEntry& dios(std::uint16_t i) const { return dios_.at(i); }
  std::size_t fios_count() const { return fios_.size(); }
  std::size_t dios_count() const { return dios_.size(); }

  /// Bounds-checked element access; violations throw VmFault(io).
  std::int32_t dios_read(std::uint16_t i, std::size_t cell) const;
  void dios_write(std::uint16_t i, std::size_t cell, std::int32_t v) const;

 private:
  bool taken(std::string_view name) const;

  std::vector<FiosEntry> fios_;
  std::vector<DiosEntry> dios_;
};

/// Handles for DIOS entries as seen by programs: negative cells -(index+1).
inline Cell dios_handle(std::uint16_t index) { return static_cast<Cell>(-static_cast<int>(index) - 1); }
inline std::uint16_t dios_index(Cell handle) { return static_cast<std::uint16_t>(-static_cast<int>(handle) - 1); }

/// Function references for `$ name`: user words are their CS address (>= 0);
/// core opcodes k and FIOS entries (k = 256 + index) are encoded as -(k+1).
inline Cell core_funcref(std::uint8_t opcode) { return static_cast<Cell>(-static_cast<int>(opcode) - 1); }
inline Cell fios_funcref(std::uint16_t index) { return static_cast<Cell>(-(256 + static_cast<int>(index)) - 1); }

}  // namespace rexa
