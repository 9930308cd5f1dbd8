#pragma once

#include <stdexcept>
#include <string>

namespace atompatch {

/// Base error for all library failures.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Parse failure carrying the byte offset (SMILES) or line number (PDB).
struct ParseError : Error {
  ParseError(const std::string& msg, std::size_t where)
      : Error(msg + " at offset " + std::to_string(where)), offset(where) {}
  std::size_t offset;
};

}  // namespace atompatch
