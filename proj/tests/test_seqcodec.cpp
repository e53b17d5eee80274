#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cstdio>
#include <string>
#include <vector>

#include "illume/rng.hpp"
#include "illume/seqcodec.hpp"

using namespace illume;
using namespace illume::seqcodec;

namespace {

// Small layout for exhaustive grammar walks: V = 3+7+2+2+2+3 = 19.
VocabLayout tiny_layout() { return layout_build(3, 2, 3, 2, 2); }

ImageTokenBlock make_block(const VocabLayout& l, idx sem_h, idx sem_w,
                           Rng& rng) {
  ImageTokenBlock b;
  b.sem_h = sem_h;
  b.sem_w = sem_w;
  b.pix_h = sem_h * l.ratio_num / l.ratio_den;
  b.pix_w = sem_w * l.ratio_num / l.ratio_den;
  b.sem_indices.resize(sem_h, sem_w);
  b.pix_indices.resize(b.pix_h, b.pix_w);
  for (idx i = 0; i < b.sem_indices.size(); ++i)
    b.sem_indices.data()[i] = static_cast<std::int32_t>(rng.uniform_int(l.k_sem));
  for (idx i = 0; i < b.pix_indices.size(); ++i)
    b.pix_indices.data()[i] = static_cast<std::int32_t>(rng.uniform_int(l.k_pix));
  return b;
}

// Walks the whole prefix from scratch; true when every token is accepted.
bool accepts(const VocabLayout& l, const std::vector<idx>& prefix) {
  GrammarCursor cur(l);
  try {
    for (idx t : prefix) cur.advance(t);
  } catch (const DomainError&) {
    return false;
  }
  return true;
}

// Extends the prefix by always taking the lowest legal token id.
std::vector<idx> greedy_complete(const VocabLayout& l, std::vector<idx> seq) {
  GrammarCursor cur(l);
  for (idx t : seq) cur.advance(t);
  for (int guard = 0; guard < 4096 && !cur.done(); ++guard) {
    auto mask = cur.legal();
    auto it = std::find(mask.begin(), mask.end(), char(1));
    REQUIRE(it != mask.end());
    idx pick = static_cast<idx>(it - mask.begin());
    cur.advance(pick);
    seq.push_back(pick);
  }
  REQUIRE(cur.done());
  return seq;
}

}  // namespace

TEST_CASE("vocabulary layout arithmetic and id maps") {
  VocabLayout l = layout_build(1000, 1024, 4096, 64, 64);
  CHECK(l.vocab_size() == 1000 + 7 + 64 + 64 + 1024 + 4096);
  CHECK(l.vocab_size() == 6255);

  CHECK(l.marker(Marker::soi) == 1000);
  CHECK(l.marker(Marker::eol) == 1006);
  CHECK(l.height_id(1) == 1007);
  CHECK(l.height_id(64) == 1070);
  CHECK(l.width_id(1) == 1071);
  CHECK(l.sem_offset() == 1135);
  CHECK(l.pix_offset() == 1135 + 1024);

  // describe() inverts every id map at the range boundaries
  TokenDesc d = describe(l, l.pix_offset());
  CHECK(d.kind == TokenKind::pix_code);
  CHECK(d.value == 0);
  d = describe(l, l.sem_offset() + 1023);
  CHECK(d.kind == TokenKind::sem_code);
  CHECK(d.value == 1023);
  d = describe(l, 999);
  CHECK(d.kind == TokenKind::text);
  CHECK(d.value == 999);
  d = describe(l, l.height_id(17));
  CHECK(d.kind == TokenKind::height);
  CHECK(d.value == 17);
  d = describe(l, l.width_id(64));
  CHECK(d.kind == TokenKind::width);
  CHECK(d.value == 64);
  for (int m = 0; m < 7; ++m) {
    d = describe(l, 1000 + m);
    CHECK(d.kind == TokenKind::marker);
    CHECK(d.value == m);
  }

  // full bijection on a small layout
  VocabLayout t = tiny_layout();
  for (idx id = 0; id < t.vocab_size(); ++id) {
    TokenDesc td = describe(t, id);
    idx back = -1;
    switch (td.kind) {
      case TokenKind::text: back = td.value; break;
      case TokenKind::marker: back = t.marker(static_cast<Marker>(td.value)); break;
      case TokenKind::height: back = t.height_id(td.value); break;
      case TokenKind::width: back = t.width_id(td.value); break;
      case TokenKind::sem_code: back = t.sem_id(td.value); break;
      case TokenKind::pix_code: back = t.pix_id(td.value); break;
    }
    CHECK(back == id);
  }

  CHECK_THROWS_AS(describe(l, -1), DomainError);
  CHECK_THROWS_AS(describe(l, l.vocab_size()), DomainError);
  CHECK_THROWS_AS(l.height_id(0), DomainError);
  CHECK_THROWS_AS(l.height_id(65), DomainError);
  CHECK_THROWS_AS(l.sem_id(1024), DomainError);
  CHECK_THROWS_AS(l.pix_id(-1), DomainError);

  // ratios are stored reduced; degenerate sizes are rejected
  VocabLayout r = layout_build(10, 4, 4, 8, 8, 6, 4);
  CHECK(r.ratio_num == 3);
  CHECK(r.ratio_den == 2);
  CHECK_THROWS_AS(layout_build(10, 0, 4, 8, 8), DomainError);
  CHECK_THROWS_AS(layout_build(-1, 4, 4, 8, 8), DomainError);
  CHECK_THROWS_AS(layout_build(10, 4, 4, 8, 8, 0, 1), DomainError);
}

TEST_CASE("serialize emits the documented grammar and length") {
  VocabLayout l = layout_build(5, 16, 16, 8, 8);  // ratio 2/1
  Rng rng(7);

  ImageTokenBlock b = make_block(l, 4, 4, rng);
  std::vector<idx> s = serialize(b, l);
  CHECK(s.size() == 100);  // 2 + 2 + 2 + (16+4) + 2 + (64+8)

  ImageTokenBlock small = make_block(l, 1, 1, rng);
  small.sem_indices(0, 0) = 3;
  small.pix_indices << 0, 1, 2, 3;
  std::vector<idx> expect = {
      l.marker(Marker::soi), l.height_id(1), l.width_id(1),
      l.marker(Marker::sos), l.sem_id(3),    l.marker(Marker::eol),
      l.marker(Marker::eos_sem), l.marker(Marker::sop),
      l.pix_id(0), l.pix_id(1), l.marker(Marker::eol),
      l.pix_id(2), l.pix_id(3), l.marker(Marker::eol),
      l.marker(Marker::eop), l.marker(Marker::eoi)};
  CHECK(serialize(small, l) == expect);
  CHECK(expect.size() == 16);

  // length formula over random dims, for two ratios
  VocabLayout q = layout_build(5, 16, 16, 28, 28, 7, 4);
  for (int trial = 0; trial < 50; ++trial) {
    ImageTokenBlock rb = make_block(l, 1 + rng.uniform_int(8),
                                    1 + rng.uniform_int(8), rng);
    CHECK(static_cast<idx>(serialize(rb, l).size()) ==
          8 + rb.sem_h * (rb.sem_w + 1) + rb.pix_h * (rb.pix_w + 1));

    idx sh = 4 * (1 + rng.uniform_int(7));
    idx sw = 4 * (1 + rng.uniform_int(7));
    ImageTokenBlock qb = make_block(q, sh, sw, rng);
    CHECK(qb.pix_h == sh / 4 * 7);
    CHECK(static_cast<idx>(serialize(qb, q).size()) ==
          8 + qb.sem_h * (qb.sem_w + 1) + qb.pix_h * (qb.pix_w + 1));
  }

  // invalid blocks are rejected before any tokens are emitted
  ImageTokenBlock bad = make_block(l, 2, 2, rng);
  bad.pix_h = 3;
  CHECK_THROWS_AS(serialize(bad, l), DomainError);
  bad = make_block(l, 2, 2, rng);
  bad.sem_indices(0, 0) = 16;
  CHECK_THROWS_AS(serialize(bad, l), DomainError);
  bad = make_block(l, 2, 2, rng);
  bad.pix_indices(0, 0) = -1;
  CHECK_THROWS_AS(serialize(bad, l), DomainError);
  bad = make_block(l, 2, 2, rng);
  bad.sem_h = 9;  // outside indicator range
  CHECK_THROWS_AS(serialize(bad, l), DomainError);
  // dims the ratio cannot produce
  ImageTokenBlock odd = make_block(q, 4, 4, rng);
  odd.sem_h = 3;
  CHECK_THROWS_AS(serialize(odd, q), DomainError);
}

TEST_CASE("parse inverts serialize over random blocks") {
  Rng rng(11);
  VocabLayout l = layout_build(50, 32, 48, 10, 10);
  VocabLayout q = layout_build(50, 32, 48, 28, 28, 7, 4);
  for (int trial = 0; trial < 200; ++trial) {
    ImageTokenBlock b = make_block(l, 1 + rng.uniform_int(10),
                                   1 + rng.uniform_int(10), rng);
    std::vector<idx> s = serialize(b, l);
    ParseResult r = parse(s, l);
    REQUIRE(r.ok());
    CHECK(*r.block == b);
    CHECK(serialize(*r.block, l) == s);

    ImageTokenBlock qb = make_block(q, 4 * (1 + rng.uniform_int(7)),
                                    4 * (1 + rng.uniform_int(7)), rng);
    ParseResult qr = parse(serialize(qb, q), q);
    REQUIRE(qr.ok());
    CHECK(*qr.block == qb);
  }
}

TEST_CASE("parse reports structured errors with the offending position") {
  VocabLayout l = layout_build(5, 16, 16, 8, 8);
  Rng rng(3);
  ImageTokenBlock b = make_block(l, 2, 2, rng);
  std::vector<idx> good = serialize(b, l);

  auto expect_kind = [&](const std::vector<idx>& toks, ParseErrorKind kind) {
    ParseResult r = parse(toks, l);
    REQUIRE_FALSE(r.ok());
    REQUIRE(r.error.has_value());
    CHECK(r.error->kind == kind);
    return *r.error;
  };

  // empty and truncated streams
  CHECK(expect_kind({}, ParseErrorKind::truncated).position == 0);
  std::vector<idx> cut(good.begin(), good.end() - 3);
  expect_kind(cut, ParseErrorKind::truncated);

  // wrong opening marker
  std::vector<idx> t = good;
  t[0] = l.marker(Marker::eoi);
  CHECK(expect_kind(t, ParseErrorKind::unexpected_token).position == 0);

  // indicator slots holding the wrong token family
  t = good;
  t[1] = l.marker(Marker::sos);
  CHECK(expect_kind(t, ParseErrorKind::bad_indicator).position == 1);
  t = good;
  t[2] = l.sem_id(0);
  CHECK(expect_kind(t, ParseErrorKind::bad_indicator).position == 2);

  // one EOL removed: row 0 then reads into row 1's cells
  t = good;
  t.erase(t.begin() + 6);  // <soi> h w <sos> s s [<eol>] ...
  ParseError e = expect_kind(t, ParseErrorKind::missing_eol);
  CHECK(e.position == 6);
  CHECK(e.message.find("row length mismatch at row 0") != std::string::npos);

  // one semantic cell removed: row ends early
  t = good;
  t.erase(t.begin() + 5);
  e = expect_kind(t, ParseErrorKind::row_too_short);
  CHECK(e.message.find("row 0 has 1 cells, expected 2") != std::string::npos);

  // a pixel code where a semantic code belongs
  t = good;
  t[4] = l.pix_id(0);
  CHECK(expect_kind(t, ParseErrorKind::out_of_range_code).position == 4);

  // raw id outside the vocabulary
  t = good;
  t[4] = l.vocab_size();
  expect_kind(t, ParseErrorKind::out_of_range_code);
  t[4] = -7;
  expect_kind(t, ParseErrorKind::out_of_range_code);

  // pixel grid with one row missing: 7x8 against sem 4x4 at ratio 2
  ImageTokenBlock big = make_block(l, 4, 4, rng);
  std::vector<idx> bt = serialize(big, l);
  std::size_t row8 = bt.size() - 2 - 9;  // last pixel row + its <eol>
  std::vector<idx> seven(bt.begin(), bt.begin() + row8);
  seven.push_back(l.marker(Marker::eop));
  seven.push_back(l.marker(Marker::eoi));
  ParseResult r = parse(seven, l);
  REQUIRE_FALSE(r.ok());
  CHECK(r.error->kind == ParseErrorKind::pixel_grid_inconsistent);
  CHECK(r.error->message.find("ended after 7 rows") != std::string::npos);

  // pixel grid with one row too many
  std::vector<idx> nine(bt.begin(), bt.end() - 2);
  for (int c = 0; c < 8; ++c) nine.push_back(l.pix_id(0));
  nine.push_back(l.marker(Marker::eol));
  nine.push_back(l.marker(Marker::eop));
  nine.push_back(l.marker(Marker::eoi));
  r = parse(nine, l);
  REQUIRE_FALSE(r.ok());
  CHECK(r.error->kind == ParseErrorKind::pixel_grid_inconsistent);

  // tokens after <end_of_image>
  t = good;
  t.push_back(l.marker(Marker::eoi));
  e = expect_kind(t, ParseErrorKind::trailing_tokens);
  CHECK(e.position == good.size());

  CHECK(std::string(parse_error_name(ParseErrorKind::missing_eol)) ==
        "missing_eol");
  CHECK(std::string(parse_error_name(ParseErrorKind::trailing_tokens)) ==
        "trailing_tokens");
}

TEST_CASE("single-token mutations never crash and never alias the original") {
  Rng rng(19);
  VocabLayout l = layout_build(6, 5, 9, 4, 4);
  int parsed_differently = 0;
  for (int trial = 0; trial < 400; ++trial) {
    ImageTokenBlock b = make_block(l, 1 + rng.uniform_int(4),
                                   1 + rng.uniform_int(4), rng);
    std::vector<idx> s = serialize(b, l);
    std::size_t pos = static_cast<std::size_t>(
        rng.uniform_int(static_cast<idx>(s.size())));

    std::vector<idx> sub = s;
    idx repl = rng.uniform_int(l.vocab_size());
    if (repl == sub[pos]) repl = (repl + 1) % l.vocab_size();
    sub[pos] = repl;
    ParseResult r = parse(sub, l);
    if (r.ok()) {
      CHECK_FALSE(*r.block == b);
      CHECK(serialize(*r.block, l) == sub);  // grammar is canonical
      ++parsed_differently;
    } else {
      CHECK(r.error.has_value());
    }

    std::vector<idx> del = s;
    del.erase(del.begin() + static_cast<std::ptrdiff_t>(pos));
    r = parse(del, l);
    if (r.ok()) CHECK_FALSE(*r.block == b);

    std::vector<idx> ins = s;
    ins.insert(ins.begin() + static_cast<std::ptrdiff_t>(pos),
               rng.uniform_int(l.vocab_size()));
    r = parse(ins, l);
    if (r.ok()) CHECK_FALSE(*r.block == b);
  }
  // substituting one code for another must sometimes yield a valid block
  CHECK(parsed_differently > 0);
}

TEST_CASE("cursor legality agrees with advance over every token, tiny dims") {
  VocabLayout l = tiny_layout();
  Rng rng(23);
  for (idx sh = 1; sh <= l.h_max; ++sh) {
    for (idx sw = 1; sw <= l.w_max; ++sw) {
      ImageTokenBlock b = make_block(l, sh, sw, rng);
      std::vector<idx> s = serialize(b, l);
      for (std::size_t p = 0; p <= s.size(); ++p) {
        std::vector<idx> prefix(s.begin(), s.begin() + p);
        std::vector<char> mask = next_legal_mask(prefix, l);
        REQUIRE(mask.size() == static_cast<std::size_t>(l.vocab_size()));
        for (idx id = 0; id < l.vocab_size(); ++id) {
          std::vector<idx> ext = prefix;
          ext.push_back(id);
          CHECK(accepts(l, ext) == bool(mask[static_cast<std::size_t>(id)]));
          // completeness: every legal extension reaches a parseable sequence
          if (mask[static_cast<std::size_t>(id)]) {
            std::vector<idx> full = greedy_complete(l, ext);
            CHECK(parse(full, l).ok());
          }
        }
      }
      // at the end the mask is empty and the cursor reports completion
      GrammarCursor cur(l);
      for (idx tok : s) cur.advance(tok);
      CHECK(cur.done());
      auto final_mask = cur.legal();
      CHECK(std::count(final_mask.begin(), final_mask.end(), char(1)) == 0);
      CHECK_THROWS_AS(cur.advance(l.marker(Marker::soi)), DomainError);
    }
  }
}

TEST_CASE("constrained random walks always terminate in parseable sequences") {
  Rng rng(29);
  std::vector<VocabLayout> layouts = {tiny_layout(),
                                      layout_build(4, 6, 6, 4, 4),
                                      layout_build(4, 6, 6, 14, 14, 7, 4)};
  for (const VocabLayout& l : layouts) {
    for (int walk = 0; walk < 60; ++walk) {
      GrammarCursor cur(l);
      std::vector<idx> seq;
      int guard = 0;
      while (!cur.done()) {
        REQUIRE(++guard < 8192);
        auto mask = cur.legal();
        std::vector<idx> opts;
        for (idx id = 0; id < l.vocab_size(); ++id)
          if (mask[static_cast<std::size_t>(id)]) opts.push_back(id);
        REQUIRE_FALSE(opts.empty());
        idx pick = opts[static_cast<std::size_t>(
            rng.uniform_int(static_cast<idx>(opts.size())))];
        cur.advance(pick);
        seq.push_back(pick);
      }
      ParseResult r = parse(seq, l);
      REQUIRE(r.ok());
      CHECK(static_cast<idx>(seq.size()) ==
            8 + r.block->sem_h * (r.block->sem_w + 1) +
                r.block->pix_h * (r.block->pix_w + 1));
    }
  }
}

TEST_CASE("mask worked examples and dead prefixes") {
  VocabLayout l = layout_build(5, 16, 16, 8, 8);

  // empty prefix: only <start_of_image>
  std::vector<char> m = next_legal_mask({}, l);
  CHECK(std::count(m.begin(), m.end(), char(1)) == 1);
  CHECK(m[static_cast<std::size_t>(l.marker(Marker::soi))] == 1);

  // mid-semantic-row with one cell left: exactly the K_s semantic codes
  std::vector<idx> prefix = {l.marker(Marker::soi), l.height_id(1),
                             l.width_id(2), l.marker(Marker::sos),
                             l.sem_id(5)};
  m = next_legal_mask(prefix, l);
  CHECK(std::count(m.begin(), m.end(), char(1)) == l.k_sem);
  for (idx c = 0; c < l.k_sem; ++c)
    CHECK(m[static_cast<std::size_t>(l.sem_id(c))] == 1);

  // completed semantic row: only <end_of_line>
  prefix.push_back(l.sem_id(6));
  m = next_legal_mask(prefix, l);
  CHECK(std::count(m.begin(), m.end(), char(1)) == 1);
  CHECK(m[static_cast<std::size_t>(l.marker(Marker::eol))] == 1);

  // after the indicators only <start_of_semantic> is legal
  m = next_legal_mask({l.marker(Marker::soi), l.height_id(3), l.width_id(7)}, l);
  CHECK(std::count(m.begin(), m.end(), char(1)) == 1);
  CHECK(m[static_cast<std::size_t>(l.marker(Marker::sos))] == 1);

  // dead prefixes are domain errors
  CHECK_THROWS_AS(next_legal_mask({l.marker(Marker::soi),
                                   l.marker(Marker::soi)}, l),
                  DomainError);
  CHECK_THROWS_AS(next_legal_mask({l.sem_id(0)}, l), DomainError);
  CHECK_THROWS_AS(next_legal_mask({-1}, l), DomainError);

  // ratio 7/4: indicator mask admits only multiples of 4
  VocabLayout q = layout_build(5, 16, 16, 14, 14, 7, 4);
  m = next_legal_mask({q.marker(Marker::soi)}, q);
  for (idx h = 1; h <= q.h_max; ++h)
    CHECK(bool(m[static_cast<std::size_t>(q.height_id(h))]) == (h % 4 == 0));
}

TEST_CASE("utg files round-trip and validate their header") {
  VocabLayout l = layout_build(5, 16, 16, 8, 8);
  Rng rng(31);
  ImageTokenBlock b = make_block(l, 3, 2, rng);
  std::vector<idx> s = serialize(b, l);

  const std::string path = "/tmp/illume_test_tokens.utg";
  save_utg(path, s, l);
  std::vector<idx> back = load_utg(path, l);
  CHECK(back == s);
  ParseResult r = parse(back, l);
  REQUIRE(r.ok());
  CHECK(*r.block == b);

  // a different layout refuses the stream
  VocabLayout other = layout_build(5, 16, 16, 8, 9);
  CHECK_THROWS_AS(load_utg(path, other), IoError);
  CHECK(other.hash32() != l.hash32());

  // bad magic and truncated payloads
  std::FILE* f = std::fopen(path.c_str(), "wb");
  REQUIRE(f);
  std::fwrite("NOPE", 1, 4, f);
  std::fclose(f);
  CHECK_THROWS_AS(load_utg(path, l), IoError);

  save_utg(path, s, l);
  f = std::fopen(path.c_str(), "rb+");
  REQUIRE(f);
  std::fseek(f, 8, SEEK_SET);
  std::uint32_t count = 999;
  std::fwrite(&count, 4, 1, f);  // claim more tokens than stored
  std::fclose(f);
  CHECK_THROWS_AS(load_utg(path, l), IoError);

  CHECK_THROWS_AS(load_utg("/tmp/illume_no_such_file.utg", l), IoError);
  CHECK_THROWS_AS(save_utg(path, {l.vocab_size()}, l), DomainError);
  std::remove(path.c_str());
}
