#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "illume/tensor.hpp"

namespace illume::seqcodec {

// One contiguous vocabulary: text ids, then the seven structural markers,
// then height indicators 1..H_max, width indicators 1..W_max, then the
// semantic and pixel code ranges.
enum class Marker : int {
  soi = 0,  // <start_of_image>
  eoi = 1,  // <end_of_image>
  sos = 2,  // <start_of_semantic>
  eos_sem = 3,  // <end_of_semantic>
  sop = 4,  // <start_of_pixel>
  eop = 5,  // <end_of_pixel>
  eol = 6,  // <end_of_line>
};

struct VocabLayout {
  idx text_vocab = 0;
  idx h_max = 0, w_max = 0;
  idx k_sem = 0, k_pix = 0;
  // pixel-grid dims = semantic-grid dims * (ratio_num / ratio_den), exact
  idx ratio_num = 2, ratio_den = 1;

  idx marker(Marker m) const { return text_vocab + static_cast<int>(m); }
  idx height_id(idx h) const;  // h in 1..h_max
  idx width_id(idx w) const;   // w in 1..w_max
  idx sem_id(idx code) const;  // code in [0, k_sem)
  idx pix_id(idx code) const;  // code in [0, k_pix)
  idx sem_offset() const { return text_vocab + 7 + h_max + w_max; }
  idx pix_offset() const { return sem_offset() + k_sem; }
  idx vocab_size() const { return pix_offset() + k_pix; }

  std::uint32_t hash32() const;
};

VocabLayout layout_build(idx text_vocab, idx k_sem, idx k_pix, idx h_max,
                         idx w_max, idx ratio_num = 2, idx ratio_den = 1);

enum class TokenKind { text, marker, height, width, sem_code, pix_code };

struct TokenDesc {
  TokenKind kind;
  idx value;  // text id, Marker as int, indicator value, or code id
};

// Inverse of the offset maps; throws on ids outside [0, V).
TokenDesc describe(const VocabLayout& layout, idx id);

struct ImageTokenBlock {
  idx sem_h = 0, sem_w = 0;
  idx pix_h = 0, pix_w = 0;
  IGrid sem_indices;
  IGrid pix_indices;

  bool operator==(const ImageTokenBlock& o) const {
    return sem_h == o.sem_h && sem_w == o.sem_w && pix_h == o.pix_h &&
           pix_w == o.pix_w && sem_indices.rows() == o.sem_indices.rows() &&
           sem_indices.cols() == o.sem_indices.cols() &&
           pix_indices.rows() == o.pix_indices.rows() &&
           pix_indices.cols() == o.pix_indices.cols() &&
           (sem_indices.array() == o.sem_indices.array()).all() &&
           (pix_indices.array() == o.pix_indices.array()).all();
  }
};

// Block dims/ranges against the layout; throws DomainError on violation.
void validate_block(const ImageTokenBlock& block, const VocabLayout& layout);

// <soi> h w <sos> (sem row <eol>)*sem_h <eos_sem> <sop> (pix row <eol>)*pix_h
// <eop> <eoi>; length 8 + sem_h*(sem_w+1) + pix_h*(pix_w+1).
std::vector<idx> serialize(const ImageTokenBlock& block,
                           const VocabLayout& layout);

enum class ParseErrorKind {
  truncated,
  unexpected_token,
  bad_indicator,
  row_too_short,
  missing_eol,
  out_of_range_code,
  pixel_grid_inconsistent,
  trailing_tokens,
};

const char* parse_error_name(ParseErrorKind k);

struct ParseError {
  ParseErrorKind kind;
  std::size_t position;  // index of the first offending token
  std::string message;
};

struct ParseResult {
  std::optional<ImageTokenBlock> block;
  std::optional<ParseError> error;
  bool ok() const { return block.has_value(); }
};

// Total function: never throws on malformed input, returns a structured
// error naming the first violation instead.
ParseResult parse(const std::vector<idx>& tokens, const VocabLayout& layout);

// Incremental grammar automaton used for parsing checks and constrained
// sampling. advance() rejects illegal tokens; legal() marks every id that
// can extend the current prefix toward a valid sequence.
class GrammarCursor {
 public:
  explicit GrammarCursor(const VocabLayout& layout);

  bool done() const { return phase_ == Phase::complete; }
  void advance(idx id);
  std::vector<char> legal() const;

 private:
  enum class Phase {
    expect_soi,
    expect_height,
    expect_width,
    expect_sos,
    sem_cell,
    sem_eol,
    expect_eos_sem,
    expect_sop,
    pix_cell,
    pix_eol,
    expect_eop,
    expect_eoi,
    complete,
  };
  const VocabLayout* layout_;
  Phase phase_ = Phase::expect_soi;
  idx sem_h_ = 0, sem_w_ = 0, pix_h_ = 0, pix_w_ = 0;
  idx row_ = 0, col_ = 0;
  friend struct GrammarCursorTestPeek;
};

std::vector<char> next_legal_mask(const std::vector<idx>& prefix,
                                  const VocabLayout& layout);

// Token-stream file: magic "UTG1", little-endian u32 layout hash, u32 count,
// then count u32 token ids.
void save_utg(const std::string& path, const std::vector<idx>& tokens,
              const VocabLayout& layout);
std::vector<idx> load_utg(const std::string& path, const VocabLayout& layout);

}  // namespace illume::seqcodec
