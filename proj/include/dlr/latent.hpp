#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

namespace dlr::latent {

enum class Layout { local, global };

const char* layout_name(Layout layout);
Layout parse_layout(const std::string& name);

// Latent geometry: M codebooks over K symbols each, either one code grid
// column per token (local) or a single column per document (global).
struct LatentSpec {
  Layout layout = Layout::global;
  int M = 1;
  int K = 2;
  int d_model = 64;

  long L(long T) const { return layout == Layout::local ? T : 1; }

  // Width of one code embedding row: the model dimension is split across
  // the M codebooks for local layouts and kept whole for global ones.
  int code_dim() const {
    return layout == Layout::local ? d_model / M : d_model;
  }

  int bits_per_symbol() const;  // ceil(log2 K)

  void validate() const;  // throws ConfigError
};

// Discrete encoding of one document: codes(m, l) in [0, K).
struct CodeAssignment {
  LatentSpec spec;
  Eigen::MatrixXi codes;  // M x L

  long M() const { return codes.rows(); }
  long L() const { return codes.cols(); }

  // Entry ranges plus L against the layout and source length.
  void validate(long T) const;
};

// Fixed-width bit cost of one encoded document of T tokens.
long long bits_per_sentence(const LatentSpec& spec, long T);

// Bit cost of spelling out the raw tokens: ceil(T * log2(vocab_types)).
long long raw_text_bits(long T, long vocab_types);

// Symbols packed in column-major grid order (l outer, m inner), each as
// ceil(log2 K) bits appended least-significant-bit first.
struct PackedCodes {
  uint16_t M = 0;
  uint32_t K = 0;
  uint32_t L = 0;
  std::vector<uint8_t> bits;
};

PackedCodes pack(const CodeAssignment& a);
CodeAssignment unpack(const PackedCodes& p);

// Number of grid positions where the symbols differ.
int hamming(const CodeAssignment& a, const CodeAssignment& b);

// Codes file: magic "DLC1", then M (u16), K (u32), document count (u64),
// then per document L (u32) followed by its packed bitstream. All integers
// little-endian.
void write_codes_file(const std::string& path, const LatentSpec& spec,
                      const std::vector<CodeAssignment>& docs);
std::vector<CodeAssignment> read_codes_file(const std::string& path);

}  // namespace dlr::latent
