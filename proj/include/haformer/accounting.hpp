#pragma once
// Analytical cost model: parameters, MACs, FLOPs, and activation peaks per
// module, derived from the configuration alone. Conventions:
//   flops = 2*macs + elementwise, where activations, softmax, normalization,
//   pooling, residual adds, and upsampling count 1 flop per element per pass
//   and bias additions are folded into the accumulate.
// peak_act is the largest single tensor a module materializes; attention
// score buffers are counted for sequential chunk evaluation, matching the
// forward pass.

#include <cstdint>
#include <string>
#include <vector>

#include "haformer/network.hpp"

namespace haformer {

struct CostRow {
  std::string module;
  std::int64_t params = 0;
  std::int64_t macs = 0;
  std::int64_t flops = 0;
  std::int64_t peak_act = 0;
};

struct CostReport {
  std::vector<CostRow> rows;
  // Score-MAC shrink realized by token reduction (r) and the s*r figure the
  // chunked form suggests; reported side by side, never substituted.
  double measured_attention_factor = 1.0;
  double nominal_attention_factor = 1.0;
  CostRow total() const;
};

struct AttentionMemory {
  std::int64_t sequential = 0;  // one live score buffer, N*(N/r)
  std::int64_t parallel = 0;    // all s chunks at once
};

std::int64_t conv_param_count(int cin, int cout, int kh, int kw, int groups = 1,
                              bool bias = true);
std::int64_t conv_mac_count(int cin, int cout, int kh, int kw, int groups, std::int64_t ho,
                            std::int64_t wo);

// Parameter counts per module; resolution-independent, so macs/flops/peak
// stay zero.
CostReport count_params(const ModelConfig& cfg);

// Full cost ledger at extents (h, w), which must satisfy the same
// divisibility rules as the configured input.
CostReport count_flops(const ModelConfig& cfg, int h, int w);

AttentionMemory attention_memory(const EtConfig& et, std::int64_t tokens);

// format is "table" or "csv"; both carry the same numbers and a comment
// header stating the counting conventions and calibration choices.
std::string emit_report(const CostReport& r, const std::string& format);

}  // namespace haformer
