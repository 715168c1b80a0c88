#pragma once

// Windowed multi-head attention, the LongIR sparse pattern family, and the
// fusion of both branches.

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dart/autograd.hpp"
#include "dart/rng.hpp"

namespace dart {

// ---------------------------------------------------------------------------
// Window geometry

struct WindowGrid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t window = 0;
  std::size_t pad_bottom = 0;
  std::size_t pad_right = 0;

  std::size_t padded_height() const { return height + pad_bottom; }
  std::size_t padded_width() const { return width + pad_right; }
  std::size_t windows_y() const { return padded_height() / window; }
  std::size_t windows_x() const { return padded_width() / window; }
  std::size_t count() const { return windows_y() * windows_x(); }
  std::size_t tokens_per_window() const { return window * window; }
};

WindowGrid make_window_grid(std::size_t height, std::size_t width, std::size_t window);

struct WindowPartition {
  Var windows;  // [nW, M*M, D]
  WindowGrid grid;
};

/// Reflect-pads x[H,W,D] to multiples of M and tiles it into raster-ordered
/// M x M windows.
WindowPartition window_partition(Var x, std::size_t window);
/// Inverse of window_partition, cropping the padding: [nW, M*M, D] -> [H,W,D].
Var window_reverse(Var windows, const WindowGrid& grid);

/// Index into the (2M-1)^2 relative-position table for every ordered pair of
/// tokens inside an M x M window, row-major over (query, key).
std::vector<std::size_t> relative_position_index(std::size_t window);

// ---------------------------------------------------------------------------
// LongIR admissibility

/// Sliding-window + dilated + global admissibility over a 1D token sequence.
/// Stored as sorted per-row column lists (banded form); the dense N x N form
/// is materialised on request.
class LongIRMask {
 public:
  std::size_t length() const { return length_; }
  std::size_t window() const { return window_; }
  std::size_t dilation() const { return dilation_; }
  const std::vector<std::size_t>& globals() const { return globals_; }
  bool is_global(std::size_t i) const { return is_global_[i] != 0; }

  std::span<const std::size_t> admissible(std::size_t row) const {
    return {cols_.data() + offsets_[row], offsets_[row + 1] - offsets_[row]};
  }
  /// Offset of row i's first entry in the flattened pair list.
  std::size_t row_offset(std::size_t row) const { return offsets_[row]; }
  std::size_t pair_count() const { return cols_.size(); }

  /// Direct evaluation of the admissibility predicate.
  bool admits(std::size_t i, std::size_t j) const;
  BoolTensor dense() const;

  friend LongIRMask build_longir_mask(std::size_t, std::size_t, std::size_t, std::vector<std::size_t>);

 private:
  std::size_t length_ = 0;
  std::size_t window_ = 1;
  std::size_t dilation_ = 1;
  std::vector<std::size_t> globals_;
  std::vector<std::uint8_t> is_global_;
  std::vector<std::size_t> offsets_;
  std::vector<std::size_t> cols_;
};

/// w: odd total span including the centre token; d: dilation; globals: token
/// indices that see, and are seen by, every token.
LongIRMask build_longir_mask(std::size_t length, std::size_t w, std::size_t d, std::vector<std::size_t> globals);

/// Stride-M^2 anchors: the first `per_window` indices of every block of M*M
/// raster tokens.
std::vector<std::size_t> window_anchor_globals(std::size_t length, std::size_t window, std::size_t per_window);

// ---------------------------------------------------------------------------
// Attention kernels on pre-projected heads: q, k, v are [h, N, dh].

/// Row-sparse attention over the mask's banded form. Work and memory are
/// proportional to mask.pair_count() per head.
Var banded_attention(Var q, Var k, Var v, const LongIRMask& mask, double scale);
/// Softmax weights the banded kernel uses, flattened per head in the mask's
/// pair order: [h, pair_count].
Tensor banded_attention_weights(const Tensor& q, const Tensor& k, const LongIRMask& mask, double scale);
/// Dense reference: full N x N scores, masked softmax over the dense mask.
Var dense_masked_attention(Var q, Var k, Var v, const BoolTensor& mask, double scale);

// ---------------------------------------------------------------------------
// Parameterised branches

struct AttentionParams {
  std::size_t dim = 0;
  std::size_t heads = 1;
  std::size_t window = 0;  // > 0 only for the window branch (enables the bias table)
  Parameter q_weight, q_bias, k_weight, k_bias, v_weight, v_bias;
  Parameter out_weight, out_bias;
  std::optional<Parameter> rel_bias;  // [(2M-1)^2, heads]

  /// Truncated-normal(0.02) projections, zero biases, zero bias table.
  static AttentionParams create(const std::string& prefix, std::size_t dim, std::size_t heads, std::size_t window,
                                Rng& rng);
  std::size_t head_dim() const { return dim / heads; }
  std::vector<Parameter*> parameters();
};

/// Per-window multi-head attention with relative position bias followed by
/// the output projection. windows: [nW, M*M, D].
Var window_attention(Var windows, AttentionParams& p);

/// Multi-head LongIR attention on x[N, D] using the banded kernel, then the
/// output projection.
Var longir_attention(Var x, const LongIRMask& mask, AttentionParams& p);
/// Same computation through dense_masked_attention.
Var longir_attention_dense(Var x, const LongIRMask& mask, AttentionParams& p);

struct FusionParams {
  Parameter weight;  // [D, 2D]
  Parameter bias;    // [D]

  static FusionParams create(const std::string& prefix, std::size_t dim, Rng& rng);
  std::vector<Parameter*> parameters() { return {&weight, &bias}; }
};

/// Concatenates both token-aligned branches along features and applies one
/// linear layer 2D -> D.
Var fuse_branches(Var x_win, Var x_long, FusionParams& p);

}  // namespace dart
