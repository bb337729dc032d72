#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "lfp/tensorio.hpp"

using namespace lfp;
using namespace lfp::tensorio;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("lfp_tensorio_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

ActivationDataset small_dataset() {
  ActivationDataset d;
  d.model_id = "toy";
  d.layer_index = 2;
  d.data.resize(2, 3);
  d.data << 1.f, 2.f, 3.f, 4.f, 5.f, 6.f;
  return d;
}

FormatErrc code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const FormatError& e) {
    return e.code();
  }
  ADD_FAILURE() << "no FormatError thrown";
  return FormatErrc::io_failure;
}

}  // namespace

TEST(Activations, RoundTripSmall) {
  const auto dir = temp_dir("rt");
  const auto d = small_dataset();
  write_activations(d, dir / "a.lfpa");
  const auto back = read_activations(dir / "a.lfpa");
  EXPECT_EQ(back, d);
  EXPECT_EQ(back.rows(), 2u);
  EXPECT_EQ(back.hidden_dim(), 3u);
  EXPECT_EQ(back.data(1, 2), 6.f);
}

TEST(Activations, RoundTripPropertyWithIds) {
  std::mt19937 gen(17);
  std::normal_distribution<float> normal(0.f, 3.f);
  for (int trial = 0; trial < 25; ++trial) {
    ActivationDataset d;
    d.model_id = "m" + std::to_string(trial);
    d.layer_index = static_cast<std::uint32_t>(trial % 4);
    const int m = trial * 3, n = 1 + trial % 7;
    d.data.resize(m, n);
    for (Eigen::Index i = 0; i < d.data.size(); ++i) d.data.data()[i] = normal(gen);
    if (trial % 2) d.token_ids = std::vector<std::int64_t>(m, trial);
    if (trial % 3) {
      d.sequence_ids.emplace(m);
      for (int i = 0; i < m; ++i) (*d.sequence_ids)[i] = i / 4;
    }
    EXPECT_EQ(decode_activations(encode_activations(d)), d) << "trial " << trial;
  }
}

TEST(Activations, RejectsNonFiniteBeforeWriting) {
  const auto dir = temp_dir("nan");
  auto d = small_dataset();
  d.data(0, 1) = std::nanf("");
  EXPECT_EQ(code_of([&] { write_activations(d, dir / "x.lfpa"); }), FormatErrc::invalid_data);
  EXPECT_FALSE(fs::exists(dir / "x.lfpa"));
  d = small_dataset();
  d.token_ids = std::vector<std::int64_t>{1};
  EXPECT_EQ(code_of([&] { encode_activations(d); }), FormatErrc::invalid_data);
}

TEST(Activations, CorruptedPayloadIsChecksumMismatch) {
  auto bytes = encode_activations(small_dataset());
  bytes[bytes.size() - 12] ^= 0x01;  // inside the last float
  EXPECT_EQ(code_of([&] { decode_activations(bytes); }), FormatErrc::checksum_mismatch);
}

TEST(Activations, EmptyFileIsBadMagic) {
  const auto dir = temp_dir("empty");
  write_text(dir / "e.lfpa", "");
  EXPECT_EQ(code_of([&] { read_activations(dir / "e.lfpa"); }), FormatErrc::bad_magic);
}

TEST(Activations, EverySingleByteFlipIsDetected) {
  auto d = small_dataset();
  d.token_ids = std::vector<std::int64_t>{7, 8};
  const auto clean = encode_activations(d);
  for (std::size_t i = 0; i < clean.size(); ++i) {
    auto bytes = clean;
    bytes[i] ^= 0x40;
    bool detected = false;
    try {
      detected = !(decode_activations(bytes) == d);
    } catch (const FormatError&) {
      detected = true;
    }
    EXPECT_TRUE(detected) << "flip at byte " << i;
  }
}

TEST(Activations, TruncationAndVersion) {
  auto bytes = encode_activations(small_dataset());
  auto cut = bytes;
  cut.resize(cut.size() - 10);
  EXPECT_EQ(code_of([&] { decode_activations(cut); }), FormatErrc::truncated);
  bytes[4] = 9;
  EXPECT_EQ(code_of([&] { decode_activations(bytes); }), FormatErrc::unsupported_version);
}

TEST(Activations, StoredChecksumMatchesFile) {
  const auto dir = temp_dir("sum");
  write_activations(small_dataset(), dir / "a.lfpa");
  const auto bytes = encode_activations(small_dataset());
  const std::uint64_t payload =
      numerics::fnv1a64(bytes.data() + (bytes.size() - 8 - 6 * 4), 6 * 4);
  EXPECT_EQ(stored_checksum(dir / "a.lfpa"), payload);
}

TEST(Lexicon, TableExamples) {
  std::istringstream in("# comment\nbad\t-2.5\nGreat\t3.1\n\n");
  const auto lex = parse_lexicon(in);
  EXPECT_EQ(lex.size(), 2u);
  EXPECT_DOUBLE_EQ(lex.value("bad"), -2.5);
  EXPECT_DOUBLE_EQ(lex.value("great"), 3.1);
  EXPECT_DOUBLE_EQ(lex.value("GREAT"), 3.1);
  EXPECT_DOUBLE_EQ(lex.value("absent"), 0.0);
}

TEST(Lexicon, MalformedLinesCarryLineNumbers) {
  const auto line_of = [](const std::string& text) -> std::pair<FormatErrc, std::size_t> {
    std::istringstream in(text);
    try {
      parse_lexicon(in);
    } catch (const FormatError& e) {
      return {e.code(), e.line()};
    }
    return {FormatErrc::io_failure, 0};
  };
  EXPECT_EQ(line_of("oops"), std::make_pair(FormatErrc::parse_error, std::size_t{1}));
  EXPECT_EQ(line_of("good\t1\nbad\tx\n"), std::make_pair(FormatErrc::parse_error, std::size_t{2}));
  EXPECT_EQ(line_of("good\t1\n#c\ngood\t2\n"), std::make_pair(FormatErrc::duplicate_entry, std::size_t{3}));
  EXPECT_EQ(line_of("\t1\n"), std::make_pair(FormatErrc::parse_error, std::size_t{1}));
}

TEST(Lexicon, SerializeRoundTripProperty) {
  std::mt19937 gen(3);
  std::uniform_real_distribution<double> value(-4, 4);
  RewardLexicon lex;
  for (int i = 0; i < 200; ++i) lex.entries["w" + std::to_string(i)] = value(gen);
  std::stringstream s;
  write_lexicon(lex, s);
  EXPECT_EQ(parse_lexicon(s).entries, lex.entries);
}

TEST(Contrastive, PerTokenExample) {
  const auto t = parse_contrastive_record(
      R"({"positive":"That movie was great","neutral":"That movie was okay","negative":"That movie was awful","target_span":[3,4]})");
  EXPECT_EQ(t.mode, TripleMode::per_token);
  EXPECT_EQ(t.positive, (std::vector<std::string>{"that", "movie", "was", "great"}));
  EXPECT_EQ(t.negative.back(), "awful");
  ASSERT_TRUE(t.target_span);
  EXPECT_EQ(t.target_span->start, 3u);
  EXPECT_EQ(t.target_span->length(), 1u);
}

TEST(Contrastive, MissingNeutralIsSchemaError) {
  std::istringstream in(
      "{\"positive\":[\"a\"],\"neutral\":[\"b\"],\"negative\":[\"c\"]}\n"
      "{\"positive\":\"good\",\"negative\":\"bad\"}\n");
  try {
    parse_contrastive(in);
    FAIL() << "expected schema error";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.code(), FormatErrc::schema_error);
    EXPECT_EQ(e.line(), 2u);
  }
}

TEST(Contrastive, WholeSequenceWithoutSpan) {
  const auto t = parse_contrastive_record(R"({"positive":["Good"],"neutral":["fine", "ok"],"negative":"bad day"})");
  EXPECT_EQ(t.mode, TripleMode::whole_sequence);
  EXPECT_FALSE(t.target_span);
  EXPECT_EQ(t.positive, std::vector<std::string>{"good"});
}

TEST(Contrastive, InvalidRecords) {
  EXPECT_EQ(code_of([] { parse_contrastive_record(R"({"positive":"a b","neutral":"c d","negative":"e f","target_span":[1,3]})"); }),
            FormatErrc::schema_error);
  EXPECT_EQ(code_of([] { parse_contrastive_record(R"({"positive":"a","neutral":"c","negative":"e","mode":"per-token"})"); }),
            FormatErrc::schema_error);
  EXPECT_EQ(code_of([] { parse_contrastive_record(R"({"positive":"","neutral":"c","negative":"e"})"); }),
            FormatErrc::schema_error);
  EXPECT_EQ(code_of([] { parse_contrastive_record("{not json"); }), FormatErrc::parse_error);
}

TEST(Contrastive, FileRoundTrip) {
  const auto dir = temp_dir("jsonl");
  std::vector<ContrastiveTriple> triples = {
      parse_contrastive_record(R"({"positive":"a great film","neutral":"a okay film","negative":"a awful film","target_span":[1,2]})"),
      parse_contrastive_record(R"({"positive":"yes","neutral":"maybe","negative":"no"})"),
  };
  write_contrastive(triples, dir / "c.jsonl");
  EXPECT_EQ(load_contrastive(dir / "c.jsonl"), triples);
}

TEST(Container, RoundTripAndMagic) {
  Container c;
  c.magic = "TEST";
  c.metadata = {{"k", 3}};
  c.add("w", Matrix::Random(3, 4));
  c.add("empty", Matrix(0, 2));
  const auto bytes = encode_container(c);
  const auto back = decode_container(bytes, "TEST");
  EXPECT_EQ(back.metadata, c.metadata);
  EXPECT_EQ(back.section("w"), c.section("w"));
  EXPECT_EQ(back.section("empty").cols(), 2);
  EXPECT_FALSE(back.has("missing"));
  EXPECT_EQ(code_of([&] { decode_container(bytes, "NOPE"); }), FormatErrc::bad_magic);
  EXPECT_EQ(code_of([&] { back.section("missing"); }), FormatErrc::schema_error);
  auto bad = bytes;
  bad[bad.size() / 2] ^= 0x10;
  EXPECT_THROW(decode_container(bad, "TEST"), FormatError);
}
