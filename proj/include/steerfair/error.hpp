#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace steerfair {

enum class errc {
  dimension_error,
  degenerate_data,
  zero_vector,
  dimension_mismatch,
  sequence_too_long,
  empty_batch,
  diverged_loss,
  format_version_mismatch,
  corrupt_file,
  vocabulary_exhausted,
  unknown_token,
  invalid_k,
  model_signature_mismatch,
  config_parse,
  missing_input,
  invalid_argument,
};

inline std::string_view errc_name(errc c) {
  switch (c) {
    case errc::dimension_error: return "DimensionError";
    case errc::degenerate_data: return "DegenerateData";
    case errc::zero_vector: return "ZeroVector";
    case errc::dimension_mismatch: return "DimensionMismatch";
    case errc::sequence_too_long: return "SequenceTooLong";
    case errc::empty_batch: return "EmptyBatch";
    case errc::diverged_loss: return "DivergedLoss";
    case errc::format_version_mismatch: return "FormatVersionMismatch";
    case errc::corrupt_file: return "CorruptFile";
    case errc::vocabulary_exhausted: return "VocabularyExhausted";
    case errc::unknown_token: return "UnknownToken";
    case errc::invalid_k: return "InvalidK";
    case errc::model_signature_mismatch: return "ModelSignatureMismatch";
    case errc::config_parse: return "ConfigParse";
    case errc::missing_input: return "MissingInput";
    case errc::invalid_argument: return "InvalidArgument";
  }
  return "Unknown";
}

// single exception type; callers branch on code()
class error : public std::runtime_error {
 public:
  error(errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}
  errc code() const noexcept { return code_; }

 private:
  errc code_;
};

}  // namespace steerfair
