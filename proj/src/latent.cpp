#include "dlr/latent.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "dlr/errors.hpp"

namespace dlr::latent {

const char* layout_name(Layout layout) {
  return layout == Layout::local ? "local" : "global";
}

Layout parse_layout(const std::string& name) {
  if (name == "local") return Layout::local;
  if (name == "global") return Layout::global;
  throw ConfigError("unknown latent layout: " + name);
}

int LatentSpec::bits_per_symbol() const {
  int w = 0;
  while ((1LL << w) < K) ++w;
  return w;
}

void LatentSpec::validate() const {
  if (M < 1) throw ConfigError("latent spec needs M >= 1");
  if (K < 2) throw ConfigError("latent spec needs K >= 2");
  if (d_model < 1) throw ConfigError("latent spec needs d_model >= 1");
  if (layout == Layout::local && d_model % M != 0)
    throw ConfigError("local layout needs M to divide d_model, got M=" +
                      std::to_string(M) +
                      ", d_model=" + std::to_string(d_model));
}

void CodeAssignment::validate(long T) const {
  if (codes.rows() != spec.M)
    throw ConfigError("code grid has " + std::to_string(codes.rows()) +
                      " rows, spec has M=" + std::to_string(spec.M));
  if (codes.cols() != spec.L(T))
    throw ConfigError("code grid has " + std::to_string(codes.cols()) +
                      " columns, layout expects " +
                      std::to_string(spec.L(T)));
  for (long m = 0; m < codes.rows(); ++m)
    for (long l = 0; l < codes.cols(); ++l)
      if (codes(m, l) < 0 || codes(m, l) >= spec.K)
        throw ConfigError("code symbol out of range at (" +
                          std::to_string(m) + ", " + std::to_string(l) +
                          "): " + std::to_string(codes(m, l)));
}

long long bits_per_sentence(const LatentSpec& spec, long T) {
  return static_cast<long long>(spec.M) * spec.L(T) * spec.bits_per_symbol();
}

long long raw_text_bits(long T, long vocab_types) {
  return static_cast<long long>(
      std::ceil(static_cast<double>(T) *
                std::log2(static_cast<double>(vocab_types))));
}

PackedCodes pack(const CodeAssignment& a) {
  if (a.codes.cols() == 0) throw ConfigError("cannot pack an empty code grid");
  if (a.codes.rows() == 0) throw ConfigError("cannot pack an empty code grid");
  int w = a.spec.bits_per_symbol();
  PackedCodes p;
  p.M = static_cast<uint16_t>(a.codes.rows());
  p.K = static_cast<uint32_t>(a.spec.K);
  p.L = static_cast<uint32_t>(a.codes.cols());
  size_t total_bits = static_cast<size_t>(p.M) * p.L * w;
  p.bits.assign((total_bits + 7) / 8, 0);
  size_t pos = 0;
  for (long l = 0; l < a.codes.cols(); ++l) {
    for (long m = 0; m < a.codes.rows(); ++m) {
      int sym = a.codes(m, l);
      if (sym < 0 || sym >= a.spec.K)
        throw ConfigError("code symbol out of range: " + std::to_string(sym));
      for (int b = 0; b < w; ++b, ++pos)
        if ((sym >> b) & 1) p.bits[pos / 8] |= uint8_t(1u << (pos % 8));
    }
  }
  return p;
}

CodeAssignment unpack(const PackedCodes& p) {
  if (p.M == 0 || p.L == 0 || p.K < 2)
    throw ParseError("packed codes header is invalid");
  CodeAssignment a;
  a.spec.M = p.M;
  a.spec.K = static_cast<int>(p.K);
  a.spec.layout = p.L == 1 ? Layout::global : Layout::local;
  int w = a.spec.bits_per_symbol();
  size_t total_bits = static_cast<size_t>(p.M) * p.L * w;
  if (p.bits.size() != (total_bits + 7) / 8)
    throw ParseError("packed codes bitstream has wrong length");
  a.codes.resize(p.M, p.L);
  size_t pos = 0;
  for (uint32_t l = 0; l < p.L; ++l) {
    for (uint16_t m = 0; m < p.M; ++m) {
      int sym = 0;
      for (int b = 0; b < w; ++b, ++pos)
        if (p.bits[pos / 8] & (1u << (pos % 8))) sym |= 1 << b;
      if (sym >= a.spec.K)
        throw ParseError("packed code symbol out of range: " +
                         std::to_string(sym));
      a.codes(m, l) = sym;
    }
  }
  return a;
}

int hamming(const CodeAssignment& a, const CodeAssignment& b) {
  if (a.codes.rows() != b.codes.rows() || a.codes.cols() != b.codes.cols() ||
      a.spec.K != b.spec.K)
    throw ConfigError("hamming distance needs matching code shapes");
  int d = 0;
  for (long l = 0; l < a.codes.cols(); ++l)
    for (long m = 0; m < a.codes.rows(); ++m)
      if (a.codes(m, l) != b.codes(m, l)) ++d;
  return d;
}

namespace {

template <typename T>
void put_le(std::string& out, T v) {
  for (size_t i = 0; i < sizeof(T); ++i)
    out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <typename T>
T get_le(const std::string& buf, size_t& pos) {
  if (pos + sizeof(T) > buf.size())
    throw ParseError("codes file is truncated");
  T v = 0;
  for (size_t i = 0; i < sizeof(T); ++i)
    v |= static_cast<T>(static_cast<uint8_t>(buf[pos + i])) << (8 * i);
  pos += sizeof(T);
  return v;
}

}  // namespace

void write_codes_file(const std::string& path, const LatentSpec& spec,
                      const std::vector<CodeAssignment>& docs) {
  std::string out = "DLC1";
  put_le<uint16_t>(out, static_cast<uint16_t>(spec.M));
  put_le<uint32_t>(out, static_cast<uint32_t>(spec.K));
  put_le<uint64_t>(out, docs.size());
  for (const auto& doc : docs) {
    PackedCodes p = pack(doc);
    if (p.M != spec.M || p.K != static_cast<uint32_t>(spec.K))
      throw ConfigError("document code shape differs from the file header");
    put_le<uint32_t>(out, p.L);
    out.append(reinterpret_cast<const char*>(p.bits.data()), p.bits.size());
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw MissingArtifact("cannot write codes file: " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

std::vector<CodeAssignment> read_codes_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw MissingArtifact("cannot open codes file: " + path);
  std::string buf((std::istreambuf_iterator<char>(f)),
                  std::istreambuf_iterator<char>());
  size_t pos = 0;
  if (buf.size() < 4 || buf.compare(0, 4, "DLC1") != 0)
    throw ParseError("codes file has a bad magic header: " + path);
  pos = 4;
  auto M = get_le<uint16_t>(buf, pos);
  auto K = get_le<uint32_t>(buf, pos);
  auto count = get_le<uint64_t>(buf, pos);
  if (M == 0 || K < 2) throw ParseError("codes file header is invalid");

  LatentSpec probe;
  probe.M = M;
  probe.K = static_cast<int>(K);
  int w = probe.bits_per_symbol();

  std::vector<CodeAssignment> docs;
  docs.reserve(count);
  for (uint64_t i = 0; i < count; ++i) {
    PackedCodes p;
    p.M = M;
    p.K = K;
    p.L = get_le<uint32_t>(buf, pos);
    if (p.L == 0) throw ParseError("codes file contains an empty document");
    size_t nbytes = (static_cast<size_t>(M) * p.L * w + 7) / 8;
    if (pos + nbytes > buf.size())
      throw ParseError("codes file is truncated");
    p.bits.assign(buf.begin() + static_cast<long>(pos),
                  buf.begin() + static_cast<long>(pos + nbytes));
    pos += nbytes;
    docs.push_back(unpack(p));
  }
  if (pos != buf.size())
    throw ParseError("codes file has trailing bytes");
  return docs;
}

}  // namespace dlr::latent
