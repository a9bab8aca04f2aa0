#include "rexa/ios.hpp"

#include <cstring>

#include "rexa/error.hpp"
#include "rexa/isa.hpp"

namespace rexa {

bool IosTable::taken(std::string_view name) const {
  return find_fios(name).has_value() || find_dios(name).has_value();
}

std::uint16_t IosTable::fios_add(std::string_view name, FiosCallback cb, std::uint8_t args, std::uint8_t argsize,
                                 std::uint8_t retsize) {
  if (!isa::valid_word_name(name)) throw IosError("invalid IOS name: '" + std::string(name) + "'");
  if (taken(name)) throw IosError("duplicate IOS name: " + std::string(name));
  if (fios_.size() >= kMaxEntries) throw IosError("FIOS table full");
  if (args > 8) throw IosError("FIOS functions take at most 8 arguments");
  if (args > 0 && (argsize < 1 || argsize > 4)) throw IosError("FIOS argument size must be 1..4 bytes");
  if (retsize > 4) throw IosError("FIOS return size must be 0..4 bytes");
  if (!cb) throw IosError("FIOS callback is empty");
  fios_.push_back({std::string(name), std::move(cb), args, argsize, retsize});
  return static_cast<std::uint16_t>(fios_.size() - 1);
}

std::uint16_t IosTable::dios_add(std::string_view name, void* data, std::uint16_t cells, std::uint8_t size) {
  if (!isa::valid_word_name(name)) throw IosError("invalid IOS name: '" + std::string(name) + "'");
  if (taken(name)) throw IosError("duplicate IOS name: " + std::string(name));
  if (dios_.size() >= kMaxEntries) throw IosError("DIOS table full");
  if (size != 1 && size != 2 && size != 4) throw IosError("DIOS cell size must be 1, 2 or 4 bytes");
  if (cells == 0 || data == nullptr) throw IosError("DIOS entry needs data and at least one cell");
  dios_.push_back({std::string(name), data, cells, size});
  return static_cast<std::uint16_t>(dios_.size() - 1);
}

std::optional<std::uint16_t> IosTable::find_fios(std::string_view name) const {
  for (std::size_t i = 0; i < fios_.size(); ++i)
    if (fios_[i].name == name) return static_cast<std::uint16_t>(i);
  return std::nullopt;
}

std::optional<std::uint16_t> IosTable::find_dios(std::string_view name) const {
  for (std::size_t i = 0; i < dios_.size(); ++i)
    if (dios_[i].name == name) return static_cast<std::uint16_t>(i);
  return std::nullopt;
}

std::int32_t IosTable::dios_read(std::uint16_t i, std::size_t cell) const {
  if (i >= dios_.size()) throw VmFault(ExceptionCode::io);
  const auto& e = dios_[i];
  if (cell >= e.cells) throw VmFault(ExceptionCode::io);
  const auto* p = static_cast<const std::uint8_t*>(e.data) + cell * e.size;
  switch (e.size) {
    case 1:
      return *p;
    case 2: {
      std::int16_t v;
      std::memcpy(&v, p, 2);
      return v;
    }
    default: {
      std::int32_t v;
      std::memcpy(&v, p, 4);
      return v;
    }
  }
}

void IosTable::dios_write(std::uint16_t i, std::size_t cell, std::int32_t v) const {
  if (i >= dios_.size()) throw VmFault(ExceptionCode::io);
  const auto& e = dios_[i];
  if (cell >= e.cells) throw VmFault(ExceptionCode::io);
  auto* p = static_cast<std::uint8_t*>(e.data) + cell * e.size;
  switch (e.size) {
    case 1:
      *p = static_cast<std::uint8_t>(v);
      break;
    case 2: {
      const auto c = static_cast<std::int16_t>(v);
      std::memcpy(p, &c, 2);
      break;
    }
    default:
      std::memcpy(p, &v, 4);
  }
}

}  // namespace rexa
