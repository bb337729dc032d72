#pragma once

// On-disk formats.
//
// LFPA v1 (activation datasets), all integers little-endian:
//
//   offset  size        field
//   0       4           magic "LFPA"
//   4       4   u32     format version (1)
//   8       4   u32     model_id byte length L
//   12      L           model_id (UTF-8)
//   12+L    4   u32     layer_index
//   16+L    8   u64     rows m
//   24+L    8   u64     hidden_dim n
//   32+L    4   u32     flags (bit 0: token_ids present, bit 1: sequence_ids)
//   36+L    4*m*n       f32 activations, row-major
//           8*m         i64 token_ids      (if flag bit 0)
//           8*m         i64 sequence_ids   (if flag bit 1)
//           8   u64     FNV-1a 64 of every byte between the header and the
//                       checksum (the payload)
//
// Named-section container v1 (model "LFPM", autoencoder "LFPS", probe "LFPP"):
//
//   magic(4) | u32 version | u32 meta_len | meta JSON | u32 section_count |
//   sections { u32 name_len | name | u64 rows | u64 cols | f64 row-major } |
//   u64 FNV-1a 64 of all preceding bytes
//
// Lexicon: UTF-8 text, one "word<TAB>value" per line, '#' comments.
// Contrastive: JSON lines, {"positive","neutral","negative"[,"target_span"][,"mode"]}.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <cctype>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "lfp/numerics.hpp"

namespace lfp::tensorio {

enum class FormatErrc {
  io_failure,
  bad_magic,
  unsupported_version,
  checksum_mismatch,
  truncated,
  invalid_data,
  parse_error,
  schema_error,
  duplicate_entry,
};

inline const char* to_string(FormatErrc code) {
  switch (code) {
    case FormatErrc::io_failure: return "io-failure";
    case FormatErrc::bad_magic: return "bad-magic";
    case FormatErrc::unsupported_version: return "unsupported-version";
    case FormatErrc::checksum_mismatch: return "checksum-mismatch";
    case FormatErrc::truncated: return "truncated";
    case FormatErrc::invalid_data: return "invalid-data";
    case FormatErrc::parse_error: return "parse-error";
    case FormatErrc::schema_error: return "schema-error";
    case FormatErrc::duplicate_entry: return "duplicate-entry";
  }
  return "unknown";
}

class FormatError : public std::runtime_error {
 public:
  FormatError(FormatErrc code, const std::string& message, std::size_t line = 0)
      : std::runtime_error(compose(code, message, line)),
        code_(code),
        line_(line),
        detail_(message) {}

  FormatErrc code() const noexcept { return code_; }
  /// 1-based line number for text formats, 0 otherwise.
  std::size_t line() const noexcept { return line_; }
  const std::string& detail() const noexcept { return detail_; }

 private:
  static std::string compose(FormatErrc code, const std::string& message,
                             std::size_t line) {
    std::string s = std::string(to_string(code)) + ": " + message;
    if (line > 0) s += " (line " + std::to_string(line) + ")";
    return s;
  }
  FormatErrc code_;
  std::size_t line_;
  std::string detail_;
};

inline constexpr std::uint32_t kFormatVersion = 1;

// ---------------------------------------------------------------------------
// Text helpers

inline std::string to_lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

/// Whitespace tokenization with lowercase normalization.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string current;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!current.empty()) out.push_back(to_lower(current));
      current.clear();
    } else {
      current.push_back(ch);
    }
  }
  if (!current.empty()) out.push_back(to_lower(current));
  return out;
}

inline std::string join(const std::vector<std::string>& tokens,
                        std::string_view sep = " ") {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += sep;
    out += tokens[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Little-endian byte buffers

class ByteWriter {
 public:
  void u32(std::uint32_t v) { put_le(v, 4); }
  void u64(std::uint64_t v) { put_le(v, 8); }
  void i64(std::int64_t v) { put_le(static_cast<std::uint64_t>(v), 8); }
  void f32(float v) { put_le(std::bit_cast<std::uint32_t>(v), 4); }
  void f64(double v) { put_le(std::bit_cast<std::uint64_t>(v), 8); }
  void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s);
  }
  std::size_t size() const { return buf_.size(); }
  const std::vector<char>& buffer() const { return buf_; }
  std::uint64_t checksum_from(std::size_t offset) const {
    return numerics::fnv1a64(buf_.data() + offset, buf_.size() - offset);
  }

 private:
  void put_le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  std::vector<char> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::vector<char> data) : buf_(std::move(data)) {}

  std::uint32_t u32() { return static_cast<std::uint32_t>(get_le(4)); }
  std::uint64_t u64() { return get_le(8); }
  std::int64_t i64() { return static_cast<std::int64_t>(get_le(8)); }
  float f32() { return std::bit_cast<float>(static_cast<std::uint32_t>(get_le(4))); }
  double f64() { return std::bit_cast<double>(get_le(8)); }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  std::string str() { return bytes(u32()); }

  void need(std::size_t n) const {
    if (n > buf_.size() - pos_) {
      throw FormatError(FormatErrc::truncated, "unexpected end of file");
    }
  }
  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return buf_.size() - pos_; }
  const char* data() const { return buf_.data(); }

 private:
  std::uint64_t get_le(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    }
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::vector<char> buf_;
  std::size_t pos_ = 0;
};

inline std::vector<char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatErrc::io_failure, "cannot open " + path.string());
  std::vector<char> data((std::istreambuf_iterator<char>(in)),
                         std::istreambuf_iterator<char>());
  if (in.bad()) throw FormatError(FormatErrc::io_failure, "read failed: " + path.string());
  return data;
}

inline void write_file_bytes(const std::filesystem::path& path,
                             const std::vector<char>& data) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(FormatErrc::io_failure, "cannot open for writing: " + path.string());
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  out.flush();
  if (!out) throw FormatError(FormatErrc::io_failure, "write failed: " + path.string());
}

// ---------------------------------------------------------------------------
// LFPA activation datasets

using FloatRows = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ActivationDataset {
  std::string model_id;
  std::uint32_t layer_index = 0;
  FloatRows data;  // rows x hidden_dim
  std::optional<std::vector<std::int64_t>> token_ids;
  std::optional<std::vector<std::int64_t>> sequence_ids;

  std::size_t rows() const { return static_cast<std::size_t>(data.rows()); }
  std::size_t hidden_dim() const { return static_cast<std::size_t>(data.cols()); }

  Matrix as_matrix() const { return data.cast<double>(); }

  void validate() const {
    if (data.cols() < 1) throw FormatError(FormatErrc::invalid_data, "hidden_dim must be positive");
    if (!data.allFinite()) throw FormatError(FormatErrc::invalid_data, "non-finite activation");
    if (token_ids && token_ids->size() != rows()) {
      throw FormatError(FormatErrc::invalid_data, "token_ids length != rows");
    }
    if (sequence_ids && sequence_ids->size() != rows()) {
      throw FormatError(FormatErrc::invalid_data, "sequence_ids length != rows");
    }
  }

  friend bool operator==(const ActivationDataset& a, const ActivationDataset& b) {
    if (a.model_id != b.model_id || a.layer_index != b.layer_index) return false;
    if (a.data.rows() != b.data.rows() || a.data.cols() != b.data.cols()) return false;
    if (std::memcmp(a.data.data(), b.data.data(), sizeof(float) * a.data.size()) != 0) return false;
    return a.token_ids == b.token_ids && a.sequence_ids == b.sequence_ids;
  }
};

inline constexpr char kActivationMagic[4] = {'L', 'F', 'P', 'A'};

/// Serializes a dataset into LFPA bytes. Validation runs first.
inline std::vector<char> encode_activations(const ActivationDataset& dataset) {
  dataset.validate();
  ByteWriter w;
  w.bytes(std::string_view(kActivationMagic, 4));
  w.u32(kFormatVersion);
  w.str(dataset.model_id);
  w.u32(dataset.layer_index);
  w.u64(dataset.rows());
  w.u64(dataset.hidden_dim());
  std::uint32_t flags = 0;
  if (dataset.token_ids) flags |= 1u;
  if (dataset.sequence_ids) flags |= 2u;
  w.u32(flags);
  const std::size_t payload_start = w.size();
  for (Eigen::Index i = 0; i < dataset.data.size(); ++i) w.f32(dataset.data.data()[i]);
  if (dataset.token_ids) for (auto v : *dataset.token_ids) w.i64(v);
  if (dataset.sequence_ids) for (auto v : *dataset.sequence_ids) w.i64(v);
  w.u64(w.checksum_from(payload_start));
  return w.buffer();
}

inline void write_activations(const ActivationDataset& dataset,
                              const std::filesystem::path& path) {
  // Encoding validates before the file is opened, so a rejected dataset
  // never leaves a partial file behind.
  write_file_bytes(path, encode_activations(dataset));
}

inline ActivationDataset decode_activations(std::vector<char> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kActivationMagic, 4) != 0) {
    throw FormatError(FormatErrc::bad_magic, "not an LFPA file");
  }
  ByteReader r(std::move(bytes));
  r.bytes(4);
  const std::uint32_t version = r.u32();
  if (version != kFormatVersion) {
    throw FormatError(FormatErrc::unsupported_version,
                      "LFPA version " + std::to_string(version));
  }
  ActivationDataset ds;
  ds.model_id = r.str();
  ds.layer_index = r.u32();
  const std::uint64_t m = r.u64();
  const std::uint64_t n = r.u64();
  const std::uint32_t flags = r.u32();
  if (flags & ~3u) throw FormatError(FormatErrc::invalid_data, "unknown flag bits");
  const std::size_t payload_start = r.position();
  if (n == 0 || n > r.remaining() / 4) throw FormatError(FormatErrc::truncated, "payload shorter than header declares");
  const std::uint64_t per_row = 4 * n + ((flags & 1u) ? 8 : 0) + ((flags & 2u) ? 8 : 0);
  if (m > 0 && per_row > (r.remaining() / m)) {
    throw FormatError(FormatErrc::truncated, "payload shorter than header declares");
  }
  r.need(per_row * m + 8);
  ds.data.resize(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < ds.data.size(); ++i) ds.data.data()[i] = r.f32();
  if (flags & 1u) {
    ds.token_ids.emplace(m);
    for (auto& v : *ds.token_ids) v = r.i64();
  }
  if (flags & 2u) {
    ds.sequence_ids.emplace(m);
    for (auto& v : *ds.sequence_ids) v = r.i64();
  }
  const std::size_t payload_end = r.position();
  const std::uint64_t expected =
      numerics::fnv1a64(r.data() + payload_start, payload_end - payload_start);
  const std::uint64_t stored = r.u64();
  if (r.remaining() != 0) throw FormatError(FormatErrc::invalid_data, "trailing bytes after checksum");
  if (stored != expected) throw FormatError(FormatErrc::checksum_mismatch, "payload checksum mismatch");
  ds.validate();
  return ds;
}

inline ActivationDataset read_activations(const std::filesystem::path& path) {
  return decode_activations(read_file_bytes(path));
}

/// Payload checksum stored in an LFPA file, without decoding the matrix.
inline std::uint64_t stored_checksum(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  if (bytes.size() < 8) throw FormatError(FormatErrc::truncated, "file too short");
  ByteReader r(std::vector<char>(bytes.end() - 8, bytes.end()));
  return r.u64();
}

// ---------------------------------------------------------------------------
// Named-section container

struct Container {
  std::string magic;  // 4 characters
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<std::pair<std::string, Matrix>> sections;

  void add(std::string name, Matrix m) { sections.emplace_back(std::move(name), std::move(m)); }

  bool has(std::string_view name) const {
    return std::any_of(sections.begin(), sections.end(),
                       [&](const auto& s) { return s.first == name; });
  }

  const Matrix& section(std::string_view name) const {
    for (const auto& s : sections) {
      if (s.first == name) return s.second;
    }
    throw FormatError(FormatErrc::schema_error, "missing section '" + std::string(name) + "'");
  }
};

inline std::vector<char> encode_container(const Container& c) {
  if (c.magic.size() != 4) throw std::invalid_argument("container magic must be 4 bytes");
  ByteWriter w;
  w.bytes(c.magic);
  w.u32(kFormatVersion);
  w.str(c.metadata.dump());
  w.u32(static_cast<std::uint32_t>(c.sections.size()));
  for (const auto& [name, m] : c.sections) {
    if (!m.allFinite()) throw FormatError(FormatErrc::invalid_data, "non-finite values in section " + name);
    w.str(name);
    w.u64(static_cast<std::uint64_t>(m.rows()));
    w.u64(static_cast<std::uint64_t>(m.cols()));
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index col = 0; col < m.cols(); ++col) w.f64(m(r, col));
    }
  }
  w.u64(w.checksum_from(0));
  return w.buffer();
}

inline void write_container(const Container& c, const std::filesystem::path& path) {
  write_file_bytes(path, encode_container(c));
}

inline Container decode_container(std::vector<char> bytes, std::string_view expected_magic) {
  if (bytes.size() < 4 || std::string_view(bytes.data(), 4) != expected_magic) {
    throw FormatError(FormatErrc::bad_magic, "expected magic " + std::string(expected_magic));
  }
  if (bytes.size() < 12) throw FormatError(FormatErrc::truncated, "container too short");
  const std::uint64_t expected = numerics::fnv1a64(bytes.data(), bytes.size() - 8);
  ByteReader r(std::move(bytes));
  Container c;
  c.magic = r.bytes(4);
  const std::uint32_t version = r.u32();
  if (version != kFormatVersion) {
    throw FormatError(FormatErrc::unsupported_version, "container version " + std::to_string(version));
  }
  try {
    c.metadata = nlohmann::json::parse(r.str());
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(FormatErrc::invalid_data, std::string("metadata: ") + e.what());
  }
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    const std::uint64_t rows = r.u64();
    const std::uint64_t cols = r.u64();
    if (cols != 0 && rows > r.remaining() / 8 / cols) {
      throw FormatError(FormatErrc::truncated, "section " + name + " truncated");
    }
    Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index rr = 0; rr < m.rows(); ++rr) {
      for (Eigen::Index cc = 0; cc < m.cols(); ++cc) m(rr, cc) = r.f64();
    }
    c.add(std::move(name), std::move(m));
  }
  const std::uint64_t stored = r.u64();
  if (r.remaining() != 0) throw FormatError(FormatErrc::invalid_data, "trailing bytes after checksum");
  if (stored != expected) throw FormatError(FormatErrc::checksum_mismatch, "container checksum mismatch");
  return c;
}

inline Container read_container(const std::filesystem::path& path, std::string_view expected_magic) {
  return decode_container(read_file_bytes(path), expected_magic);
}

// ---------------------------------------------------------------------------
// Reward lexicon

struct RewardLexicon {
  std::map<std::string, double> entries;

  /// Exact lowercase lookup; absent words score 0.
  double value(std::string_view word) const {
    auto it = entries.find(to_lower(word));
    return it == entries.end() ? 0.0 : it->second;
  }
  bool contains(std::string_view word) const { return entries.count(to_lower(word)) > 0; }
  std::size_t size() const { return entries.size(); }
};

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

inline std::optional<double> parse_double(std::string_view text) {
  const std::string s(trim(text));
  if (s.empty()) return std::nullopt;
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

inline RewardLexicon parse_lexicon(std::istream& in) {
  RewardLexicon lex;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::string_view body = trim(line);
    if (body.empty() || body.front() == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw FormatError(FormatErrc::parse_error, "missing tab separator", lineno);
    const std::string word = to_lower(trim(std::string_view(line).substr(0, tab)));
    if (word.empty()) throw FormatError(FormatErrc::parse_error, "empty word", lineno);
    const auto value = parse_double(std::string_view(line).substr(tab + 1));
    if (!value) throw FormatError(FormatErrc::parse_error, "non-numeric value", lineno);
    if (!lex.entries.emplace(word, *value).second) {
      throw FormatError(FormatErrc::duplicate_entry, "duplicate word '" + word + "'", lineno);
    }
  }
  return lex;
}

inline RewardLexicon load_lexicon(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(FormatErrc::io_failure, "cannot open " + path.string());
  return parse_lexicon(in);
}

inline void write_lexicon(const RewardLexicon& lex, std::ostream& out) {
  char buf[64];
  for (const auto& [word, value] : lex.entries) {
    std::snprintf(buf, sizeof(buf), "%.17g", value);
    out << word << '\t' << buf << '\n';
  }
}

inline void write_lexicon(const RewardLexicon& lex, const std::filesystem::path& path) {
  std::ostringstream s;
  write_lexicon(lex, s);
  const std::string text = s.str();
  write_file_bytes(path, std::vector<char>(text.begin(), text.end()));
}

// ---------------------------------------------------------------------------
// Contrastive triples

enum class TripleMode { per_token, whole_sequence };

struct TokenSpan {
  std::size_t start = 0;
  std::size_t end = 0;  // exclusive
  std::size_t length() const { return end - start; }
  friend bool operator==(const TokenSpan&, const TokenSpan&) = default;
};

struct ContrastiveTriple {
  std::vector<std::string> positive;
  std::vector<std::string> neutral;
  std::vector<std::string> negative;
  std::optional<TokenSpan> target_span;
  TripleMode mode = TripleMode::per_token;

  void validate() const {
    if (positive.empty() || neutral.empty() || negative.empty()) {
      throw FormatError(FormatErrc::schema_error, "empty sequence in triple");
    }
    if (mode == TripleMode::per_token) {
      if (!target_span) throw FormatError(FormatErrc::schema_error, "per-token triple requires target_span");
      const auto& s = *target_span;
      const std::size_t shortest = std::min({positive.size(), neutral.size(), negative.size()});
      if (s.start >= s.end || s.end > shortest) {
        throw FormatError(FormatErrc::schema_error, "invalid target_span");
      }
    }
  }
  friend bool operator==(const ContrastiveTriple&, const ContrastiveTriple&) = default;
};

namespace detail {

inline std::vector<std::string> sequence_from_json(const nlohmann::json& v, const char* key,
                                                   std::size_t lineno) {
  std::vector<std::string> out;
  if (v.is_string()) {
    out = tokenize(v.get<std::string>());
  } else if (v.is_array()) {
    for (const auto& t : v) {
      if (!t.is_string()) throw FormatError(FormatErrc::schema_error, std::string(key) + ": tokens must be strings", lineno);
      const auto tok = to_lower(trim(t.get<std::string>()));
      if (tok.empty()) throw FormatError(FormatErrc::schema_error, std::string(key) + ": empty token", lineno);
      out.push_back(tok);
    }
  } else {
    throw FormatError(FormatErrc::schema_error, std::string(key) + ": expected string or array", lineno);
  }
  if (out.empty()) throw FormatError(FormatErrc::schema_error, std::string(key) + ": empty sequence", lineno);
  return out;
}

}  // namespace detail

/// Parses one JSON-lines record. When "mode" is absent it is per-token if a
/// target_span is given and whole-sequence otherwise.
inline ContrastiveTriple parse_contrastive_record(std::string_view line, std::size_t lineno = 0) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(FormatErrc::parse_error, e.what(), lineno);
  }
  if (!j.is_object()) throw FormatError(FormatErrc::schema_error, "record must be an object", lineno);
  ContrastiveTriple t;
  for (const char* key : {"positive", "neutral", "negative"}) {
    if (!j.contains(key)) throw FormatError(FormatErrc::schema_error, std::string("missing key '") + key + "'", lineno);
  }
  t.positive = detail::sequence_from_json(j["positive"], "positive", lineno);
  t.neutral = detail::sequence_from_json(j["neutral"], "neutral", lineno);
  t.negative = detail::sequence_from_json(j["negative"], "negative", lineno);
  if (j.contains("target_span") && !j["target_span"].is_null()) {
    const auto& s = j["target_span"];
    if (!s.is_array() || s.size() != 2 || !s[0].is_number_integer() || !s[1].is_number_integer() ||
        s[0].get<std::int64_t>() < 0 || s[1].get<std::int64_t>() < 0) {
      throw FormatError(FormatErrc::schema_error, "target_span must be [start, end]", lineno);
    }
    t.target_span = TokenSpan{s[0].get<std::size_t>(), s[1].get<std::size_t>()};
  }
  if (j.contains("mode")) {
    const auto mode = j["mode"].is_string() ? j["mode"].get<std::string>() : std::string();
    if (mode == "per-token") t.mode = TripleMode::per_token;
    else if (mode == "whole-sequence") t.mode = TripleMode::whole_sequence;
    else throw FormatError(FormatErrc::schema_error, "mode must be per-token or whole-sequence", lineno);
  } else {
    t.mode = t.target_span ? TripleMode::per_token : TripleMode::whole_sequence;
  }
  try {
    t.validate();
  } catch (const FormatError& e) {
    throw FormatError(e.code(), e.detail(), lineno);
  }
  return t;
}

inline std::vector<ContrastiveTriple> parse_contrastive(std::istream& in) {
  std::vector<ContrastiveTriple> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    out.push_back(parse_contrastive_record(line, lineno));
  }
  return out;
}

inline std::vector<ContrastiveTriple> load_contrastive(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(FormatErrc::io_failure, "cannot open " + path.string());
  return parse_contrastive(in);
}

inline nlohmann::json to_json(const ContrastiveTriple& t) {
  nlohmann::json j;
  j["positive"] = t.positive;
  j["neutral"] = t.neutral;
  j["negative"] = t.negative;
  if (t.target_span) j["target_span"] = {t.target_span->start, t.target_span->end};
  j["mode"] = t.mode == TripleMode::per_token ? "per-token" : "whole-sequence";
  return j;
}

inline void write_contrastive(const std::vector<ContrastiveTriple>& triples,
                              const std::filesystem::path& path) {
  std::string text;
  for (const auto& t : triples) text += to_json(t).dump() + "\n";
  write_file_bytes(path, std::vector<char>(text.begin(), text.end()));
}

/// Writes text atomically enough for our purposes (truncate + write).
inline void write_text(const std::filesystem::path& path, std::string_view text) {
  write_file_bytes(path, std::vector<char>(text.begin(), text.end()));
}

}  // namespace lfp::tensorio
