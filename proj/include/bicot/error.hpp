#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>

namespace bicot {

enum class Errc {
  grammar,
  unknown_key,
  length_mismatch,
  kind_error,
  out_of_vocab,
  context_too_long,
  masked_token,
  all_masked,
  non_finite_gradient,
  non_finite_objective,
  io_error,
  version_mismatch,
  corrupt_checksum,
  misaligned_traces,
  group_too_small,
  no_expert_enabled,
  dimension_mismatch,
  config_error,
  invalid_argument,
};

std::string_view errc_name(Errc code);

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

// Raised by the prompt parser; `position` is the 0-based index of the
// offending whitespace-separated token.
class GrammarError : public Error {
 public:
  GrammarError(std::size_t position, const std::string& what)
      : Error(Errc::grammar, "token " + std::to_string(position) + ": " + what),
        position_(position) {}

  std::size_t position() const noexcept { return position_; }

 private:
  std::size_t position_;
};

}  // namespace bicot
