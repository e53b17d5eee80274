#include "illume/seqcodec.hpp"

#include <cstdio>
#include <numeric>

#include "illume/rng.hpp"

namespace illume::seqcodec {

idx VocabLayout::height_id(idx h) const {
  if (h < 1 || h > h_max) throw DomainError("height indicator out of range");
  return text_vocab + 7 + (h - 1);
}

idx VocabLayout::width_id(idx w) const {
  if (w < 1 || w > w_max) throw DomainError("width indicator out of range");
  return text_vocab + 7 + h_max + (w - 1);
}

idx VocabLayout::sem_id(idx code) const {
  if (code < 0 || code >= k_sem) throw DomainError("semantic code out of range");
  return sem_offset() + code;
}

idx VocabLayout::pix_id(idx code) const {
  if (code < 0 || code >= k_pix) throw DomainError("pixel code out of range");
  return pix_offset() + code;
}

std::uint32_t VocabLayout::hash32() const {
  const idx fields[] = {text_vocab, h_max, w_max, k_sem, k_pix,
                        ratio_num,  ratio_den};
  return static_cast<std::uint32_t>(fnv1a64(fields, sizeof(fields)));
}

VocabLayout layout_build(idx text_vocab, idx k_sem, idx k_pix, idx h_max,
                         idx w_max, idx ratio_num, idx ratio_den) {
  if (text_vocab < 0 || k_sem < 1 || k_pix < 1 || h_max < 1 || w_max < 1 ||
      ratio_num < 1 || ratio_den < 1)
    throw DomainError("layout_build: sizes must be positive");
  VocabLayout l;
  l.text_vocab = text_vocab;
  l.h_max = h_max;
  l.w_max = w_max;
  l.k_sem = k_sem;
  l.k_pix = k_pix;
  idx g = std::gcd(ratio_num, ratio_den);
  l.ratio_num = ratio_num / g;
  l.ratio_den = ratio_den / g;
  if (l.vocab_size() > (idx(1) << 31))
    throw DomainError("layout_build: vocabulary exceeds 32-bit id range");
  return l;
}

TokenDesc describe(const VocabLayout& l, idx id) {
  if (id < 0 || id >= l.vocab_size())
    throw DomainError("describe: token id outside vocabulary");
  if (id < l.text_vocab) return {TokenKind::text, id};
  idx r = id - l.text_vocab;
  if (r < 7) return {TokenKind::marker, r};
  r -= 7;
  if (r < l.h_max) return {TokenKind::height, r + 1};
  r -= l.h_max;
  if (r < l.w_max) return {TokenKind::width, r + 1};
  r -= l.w_max;
  if (r < l.k_sem) return {TokenKind::sem_code, r};
  return {TokenKind::pix_code, r - l.k_sem};
}

void validate_block(const ImageTokenBlock& b, const VocabLayout& l) {
  if (b.sem_h < 1 || b.sem_h > l.h_max || b.sem_w < 1 || b.sem_w > l.w_max)
    throw DomainError("block: semantic dims outside indicator range");
  if (b.sem_h * l.ratio_num % l.ratio_den != 0 ||
      b.sem_w * l.ratio_num % l.ratio_den != 0)
    throw DomainError("block: semantic dims incompatible with pixel ratio");
  if (b.pix_h != b.sem_h * l.ratio_num / l.ratio_den ||
      b.pix_w != b.sem_w * l.ratio_num / l.ratio_den)
    throw DomainError("block: pixel dims do not match the configured ratio");
  if (b.sem_indices.rows() != b.sem_h || b.sem_indices.cols() != b.sem_w ||
      b.pix_indices.rows() != b.pix_h || b.pix_indices.cols() != b.pix_w)
    throw DomainError("block: index grids do not match dims");
  for (idx i = 0; i < b.sem_indices.size(); ++i) {
    auto v = b.sem_indices.data()[i];
    if (v < 0 || v >= l.k_sem) throw DomainError("block: semantic code out of range");
  }
  for (idx i = 0; i < b.pix_indices.size(); ++i) {
    auto v = b.pix_indices.data()[i];
    if (v < 0 || v >= l.k_pix) throw DomainError("block: pixel code out of range");
  }
}

std::vector<idx> serialize(const ImageTokenBlock& b, const VocabLayout& l) {
  validate_block(b, l);
  std::vector<idx> out;
  out.reserve(static_cast<std::size_t>(8 + b.sem_h * (b.sem_w + 1) +
                                       b.pix_h * (b.pix_w + 1)));
  out.push_back(l.marker(Marker::soi));
  out.push_back(l.height_id(b.sem_h));
  out.push_back(l.width_id(b.sem_w));
  out.push_back(l.marker(Marker::sos));
  for (idx r = 0; r < b.sem_h; ++r) {
    for (idx c = 0; c < b.sem_w; ++c) out.push_back(l.sem_id(b.sem_indices(r, c)));
    out.push_back(l.marker(Marker::eol));
  }
  out.push_back(l.marker(Marker::eos_sem));
  out.push_back(l.marker(Marker::sop));
  for (idx r = 0; r < b.pix_h; ++r) {
    for (idx c = 0; c < b.pix_w; ++c) out.push_back(l.pix_id(b.pix_indices(r, c)));
    out.push_back(l.marker(Marker::eol));
  }
  out.push_back(l.marker(Marker::eop));
  out.push_back(l.marker(Marker::eoi));
  return out;
}

const char* parse_error_name(ParseErrorKind k) {
  switch (k) {
    case ParseErrorKind::truncated: return "truncated";
    case ParseErrorKind::unexpected_token: return "unexpected_token";
    case ParseErrorKind::bad_indicator: return "bad_indicator";
    case ParseErrorKind::row_too_short: return "row_too_short";
    case ParseErrorKind::missing_eol: return "missing_eol";
    case ParseErrorKind::out_of_range_code: return "out_of_range_code";
    case ParseErrorKind::pixel_grid_inconsistent: return "pixel_grid_inconsistent";
    case ParseErrorKind::trailing_tokens: return "trailing_tokens";
  }
  return "unknown";
}

namespace {

struct Reader {
  const std::vector<idx>& toks;
  const VocabLayout& l;
  std::size_t pos = 0;
  std::optional<ParseError> err;

  bool fail(ParseErrorKind kind, std::string msg) {
    if (!err) err = ParseError{kind, pos, std::move(msg)};
    return false;
  }

  bool next(TokenDesc& d) {
    if (pos >= toks.size())
      return fail(ParseErrorKind::truncated, "stream ended early");
    idx id = toks[pos];
    if (id < 0 || id >= l.vocab_size())
      return fail(ParseErrorKind::out_of_range_code,
                  "token id outside vocabulary");
    d = describe(l, id);
    ++pos;
    return true;
  }

  bool expect_marker(Marker m, const char* what) {
    TokenDesc d{};
    if (!next(d)) return false;
    if (d.kind != TokenKind::marker || d.value != static_cast<idx>(m)) {
      --pos;
      return fail(ParseErrorKind::unexpected_token,
                  std::string("expected ") + what);
    }
    return true;
  }
};

// Reads `h` rows of `w` codes of `want` kind, each closed by <eol>.
bool read_rows(Reader& rd, IGrid& grid, idx h, idx w, TokenKind want,
               bool pixel_block) {
  grid.resize(h, w);
  for (idx r = 0; r < h; ++r) {
    for (idx c = 0; c < w; ++c) {
      TokenDesc d{};
      if (!rd.next(d)) return false;
      if (d.kind == want) {
        grid(r, c) = static_cast<std::int32_t>(d.value);
        continue;
      }
      --rd.pos;
      if (d.kind == TokenKind::marker && d.value == static_cast<idx>(Marker::eol))
        return rd.fail(ParseErrorKind::row_too_short,
                       "row " + std::to_string(r) + " has " +
                           std::to_string(c) + " cells, expected " +
                           std::to_string(w));
      if (pixel_block && d.kind == TokenKind::marker &&
          d.value == static_cast<idx>(Marker::eop))
        return rd.fail(ParseErrorKind::pixel_grid_inconsistent,
                       "pixel grid ended after " + std::to_string(r) +
                           " rows, expected " + std::to_string(h));
      return rd.fail(ParseErrorKind::out_of_range_code,
                     pixel_block ? "expected a pixel code"
                                 : "expected a semantic code");
    }
    TokenDesc d{};
    if (!rd.next(d)) return false;
    if (d.kind != TokenKind::marker || d.value != static_cast<idx>(Marker::eol)) {
      --rd.pos;
      return rd.fail(ParseErrorKind::missing_eol,
                     "row length mismatch at row " + std::to_string(r) +
                         ": expected end-of-line");
    }
  }
  return true;
}

}  // namespace

ParseResult parse(const std::vector<idx>& tokens, const VocabLayout& l) {
  Reader rd{tokens, l, 0, {}};
  ParseResult out;
  auto bail = [&]() {
    out.error = rd.err;
    return out;
  };

  if (!rd.expect_marker(Marker::soi, "<start_of_image>")) return bail();

  ImageTokenBlock b;
  TokenDesc d{};
  if (!rd.next(d)) return bail();
  if (d.kind != TokenKind::height) {
    --rd.pos;
    rd.fail(ParseErrorKind::bad_indicator, "expected height indicator");
    return bail();
  }
  b.sem_h = d.value;
  if (!rd.next(d)) return bail();
  if (d.kind != TokenKind::width) {
    --rd.pos;
    rd.fail(ParseErrorKind::bad_indicator, "expected width indicator");
    return bail();
  }
  b.sem_w = d.value;

  if (b.sem_h * l.ratio_num % l.ratio_den != 0 ||
      b.sem_w * l.ratio_num % l.ratio_den != 0) {
    rd.fail(ParseErrorKind::pixel_grid_inconsistent,
            "semantic dims incompatible with pixel ratio");
    return bail();
  }
  b.pix_h = b.sem_h * l.ratio_num / l.ratio_den;
  b.pix_w = b.sem_w * l.ratio_num / l.ratio_den;

  if (!rd.expect_marker(Marker::sos, "<start_of_semantic>")) return bail();
  if (!read_rows(rd, b.sem_indices, b.sem_h, b.sem_w, TokenKind::sem_code,
                 false))
    return bail();
  if (!rd.expect_marker(Marker::eos_sem, "<end_of_semantic>")) return bail();
  if (!rd.expect_marker(Marker::sop, "<start_of_pixel>")) return bail();
  if (!read_rows(rd, b.pix_indices, b.pix_h, b.pix_w, TokenKind::pix_code,
                 true))
    return bail();
  if (rd.pos < tokens.size() && tokens[rd.pos] >= 0 &&
      tokens[rd.pos] < l.vocab_size() &&
      describe(l, tokens[rd.pos]).kind == TokenKind::pix_code) {
    rd.fail(ParseErrorKind::pixel_grid_inconsistent,
            "pixel grid has more rows than the ratio allows");
    return bail();
  }
  if (!rd.expect_marker(Marker::eop, "<end_of_pixel>")) return bail();
  if (!rd.expect_marker(Marker::eoi, "<end_of_image>")) return bail();
  if (rd.pos != tokens.size()) {
    rd.fail(ParseErrorKind::trailing_tokens, "tokens after <end_of_image>");
    return bail();
  }
  out.block = std::move(b);
  return out;
}

GrammarCursor::GrammarCursor(const VocabLayout& layout) : layout_(&layout) {}

void GrammarCursor::advance(idx id) {
  auto lg = legal();
  if (id < 0 || id >= static_cast<idx>(lg.size()) ||
      !lg[static_cast<std::size_t>(id)])
    throw DomainError("GrammarCursor: token illegal in this state");
  const VocabLayout& l = *layout_;
  TokenDesc d = describe(l, id);
  switch (phase_) {
    case Phase::expect_soi:
      phase_ = Phase::expect_height;
      break;
    case Phase::expect_height:
      sem_h_ = d.value;
      phase_ = Phase::expect_width;
      break;
    case Phase::expect_width:
      sem_w_ = d.value;
      pix_h_ = sem_h_ * l.ratio_num / l.ratio_den;
      pix_w_ = sem_w_ * l.ratio_num / l.ratio_den;
      phase_ = Phase::expect_sos;
      break;
    case Phase::expect_sos:
      row_ = col_ = 0;
      phase_ = Phase::sem_cell;
      break;
    case Phase::sem_cell:
      if (++col_ == sem_w_) phase_ = Phase::sem_eol;
      break;
    case Phase::sem_eol:
      col_ = 0;
      phase_ = ++row_ == sem_h_ ? Phase::expect_eos_sem : Phase::sem_cell;
      break;
    case Phase::expect_eos_sem:
      phase_ = Phase::expect_sop;
      break;
    case Phase::expect_sop:
      row_ = col_ = 0;
      phase_ = Phase::pix_cell;
      break;
    case Phase::pix_cell:
      if (++col_ == pix_w_) phase_ = Phase::pix_eol;
      break;
    case Phase::pix_eol:
      col_ = 0;
      phase_ = ++row_ == pix_h_ ? Phase::expect_eop : Phase::pix_cell;
      break;
    case Phase::expect_eop:
      phase_ = Phase::expect_eoi;
      break;
    case Phase::expect_eoi:
      phase_ = Phase::complete;
      break;
    case Phase::complete:
      throw DomainError("GrammarCursor: sequence already complete");
  }
}

std::vector<char> GrammarCursor::legal() const {
  const VocabLayout& l = *layout_;
  std::vector<char> mask(static_cast<std::size_t>(l.vocab_size()), 0);
  auto mark = [&mask](idx id) { mask[static_cast<std::size_t>(id)] = 1; };
  switch (phase_) {
    case Phase::expect_soi:
      mark(l.marker(Marker::soi));
      break;
    case Phase::expect_height:
      for (idx h = 1; h <= l.h_max; ++h)
        if (h * l.ratio_num % l.ratio_den == 0) mark(l.height_id(h));
      break;
    case Phase::expect_width:
      for (idx w = 1; w <= l.w_max; ++w)
        if (w * l.ratio_num % l.ratio_den == 0) mark(l.width_id(w));
      break;
    case Phase::expect_sos:
      mark(l.marker(Marker::sos));
      break;
    case Phase::sem_cell:
      for (idx c = 0; c < l.k_sem; ++c) mark(l.sem_id(c));
      break;
    case Phase::sem_eol:
    case Phase::pix_eol:
      mark(l.marker(Marker::eol));
      break;
    case Phase::expect_eos_sem:
      mark(l.marker(Marker::eos_sem));
      break;
    case Phase::expect_sop:
      mark(l.marker(Marker::sop));
      break;
    case Phase::pix_cell:
      for (idx c = 0; c < l.k_pix; ++c) mark(l.pix_id(c));
      break;
    case Phase::expect_eop:
      mark(l.marker(Marker::eop));
      break;
    case Phase::expect_eoi:
      mark(l.marker(Marker::eoi));
      break;
    case Phase::complete:
      break;  // nothing extends a complete sequence
  }
  return mask;
}

std::vector<char> next_legal_mask(const std::vector<idx>& prefix,
                                  const VocabLayout& layout) {
  GrammarCursor cur(layout);
  for (idx id : prefix) cur.advance(id);  // throws on dead prefixes
  return cur.legal();
}

namespace {

void write_u32(std::FILE* f, std::uint32_t v) {
  if (std::fwrite(&v, 4, 1, f) != 1) throw IoError("utg: short write");
}

std::uint32_t read_u32(std::FILE* f) {
  std::uint32_t v = 0;
  if (std::fread(&v, 4, 1, f) != 1) throw IoError("utg: short read");
  return v;
}

}  // namespace

void save_utg(const std::string& path, const std::vector<idx>& tokens,
              const VocabLayout& layout) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw IoError("utg: cannot open for write: " + path);
  for (idx t : tokens)
    if (t < 0 || t >= layout.vocab_size()) {
      std::fclose(f);
      throw DomainError("utg: token outside vocabulary");
    }
  if (std::fwrite("UTG1", 1, 4, f) != 4) {
    std::fclose(f);
    throw IoError("utg: short write");
  }
  write_u32(f, layout.hash32());
  write_u32(f, static_cast<std::uint32_t>(tokens.size()));
  for (idx t : tokens) write_u32(f, static_cast<std::uint32_t>(t));
  std::fclose(f);
}

std::vector<idx> load_utg(const std::string& path, const VocabLayout& layout) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw IoError("utg: cannot open for read: " + path);
  char magic[4];
  if (std::fread(magic, 1, 4, f) != 4 || std::string(magic, 4) != "UTG1") {
    std::fclose(f);
    throw IoError("utg: bad magic in " + path);
  }
  std::uint32_t hash = 0, count = 0;
  try {
    hash = read_u32(f);
    count = read_u32(f);
  } catch (...) {
    std::fclose(f);
    throw;
  }
  if (hash != layout.hash32()) {
    std::fclose(f);
    throw IoError("utg: layout hash mismatch in " + path);
  }
  std::vector<idx> tokens;
  tokens.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint32_t v = 0;
    if (std::fread(&v, 4, 1, f) != 1) {
      std::fclose(f);
      throw IoError("utg: truncated token payload in " + path);
    }
    tokens.push_back(static_cast<idx>(v));
  }
  std::fclose(f);
  return tokens;
}

}  // namespace illume::seqcodec
