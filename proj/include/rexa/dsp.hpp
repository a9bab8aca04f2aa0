#pragma once

// Fixed-point DSP and tiny-ML kernels. All runtime arithmetic is integer;
// floating point appears only while building lookup tables.

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "rexa/cell.hpp"

namespace rexa::dsp {

struct SigmoidLuts {
  std::array<std::uint8_t, 100> log10lut{};
  std::array<std::uint8_t, 24> sglut13{};
  std::array<std::uint8_t, 6> sglut310{};
  /// How many entries of each sigmoid table the construction loop defined.
  std::size_t defined13 = 0;
  std::size_t defined310 = 0;
};

/// Builds the three tables: log10lut[j] = int(log10((j+10)/10)*100), then the
/// two sigmoid segment tables by stepping x over [1, 2.95] and [3, 9.9] and
/// keeping the first value written to each log-derived slot.
SigmoidLuts build_sigmoid_luts();
const SigmoidLuts& luts();

/// log10 with x at scale 1:10 (x >= 10) and the result at scale 1:100.
/// Throws VmFault(trap) for x < 10.
Cell fplog10(Cell x);
/// Finer variant at scale 1:1000: the digit dropped by each decade shift is
/// interpolated between adjacent table entries.
std::int32_t fplog10_fine(Cell x);

/// Sigmoid at x/y scale 1:1000 using the segment tables with interpolation
/// inside each log bucket.
Cell fpsigmoid(Cell x);
/// Piecewise-constant table lookup without interpolation.
Cell fpsigmoid_coarse(Cell x);

/// Sine with x in milliradians and y scaled by 1000.
Cell fpsin(Cell x);
inline Cell fprelu(Cell x) { return x < 0 ? Cell{0} : x; }

/// Binary softmax: probability (scale 1:1000) of class 1 given logits z0, z1.
Cell softmax2(Cell z0, Cell z1);
std::size_t argmax(std::span<const Cell> v);

/// In-place filters on v[off, off+len); k in [1, 8]. Throw DspError on bad
/// ranges or k.
void lowp(std::span<Cell> v, std::size_t off, std::size_t len, int k);
void highp(std::span<Cell> v, std::size_t off, std::size_t len, int k);
void hull(std::span<Cell> v, std::size_t off, std::size_t len, int k);

/// Scale rule: s > 0 multiplies, s < 0 divides by |s| truncating toward zero,
/// s == 0 leaves the value unchanged.
inline std::int64_t apply_scale(std::int64_t v, Cell s) {
  if (s > 0) return v * s;
  if (s < 0) return v / -static_cast<std::int64_t>(s);
  return v;
}

// Vector kernels. `scale` may be empty (no scaling) or must match dst's length.
// Results are computed in 64-bit, scaled, then saturated to the cell range.
// Length violations throw DspError. Destination may alias a source.
void vecload(std::span<const Cell> src, std::size_t srcoff, std::span<Cell> dst);
void vecscale(std::span<const Cell> src, std::span<Cell> dst, std::span<const Cell> scale);
void vecadd(std::span<const Cell> a, std::span<const Cell> b, std::span<Cell> dst, std::span<const Cell> scale);
void vecmul(std::span<const Cell> a, std::span<const Cell> b, std::span<Cell> dst, std::span<const Cell> scale);
/// out_j = sum_i in_i * w[j*n + i], n = |in|, |w| = n*|out|.
void vecfold(std::span<const Cell> in, std::span<const Cell> w, std::span<Cell> out, std::span<const Cell> scale);
void vecmap(std::span<const Cell> src, std::span<Cell> dst, const std::function<std::int32_t(Cell)>& f,
            std::span<const Cell> scale);
/// Exact while the sum fits 32 bits; wider sums wrap.
std::int32_t dotprod(std::span<const Cell> a, std::span<const Cell> b);

// Decision trees stored as a flat table of slices.
//
// Slice: var u8 (bit 7 marks an output variable), op u8, n u8, then n pairs of
// (value i16 LE, branch u16 LE). Branches are forward byte offsets from the
// slice start. For <, > and = the pairs are tried in order and the last pair
// is the fallback. For the nearest-value op the pair with minimal |x - value|
// wins. An output slice (op = assign) sets outputs[var] = value of its single
// pair and continues at its branch, or stops when the branch is 0.
enum class DtreeOp : std::uint8_t { less = 0, greater = 1, equal = 2, nearest = 3, assign = 4 };

struct DtreeNode {
  std::uint8_t var = 0;
  DtreeOp op = DtreeOp::assign;
  /// (value, child index into the node list; -1 = stop for output nodes)
  std::vector<std::pair<Cell, int>> pairs;
};

/// Lays out a tree given as nodes (node 0 is the root; children must have
/// larger indices than their parents so every branch is forward).
std::vector<std::uint8_t> encode_dtree(const std::vector<DtreeNode>& nodes);
/// Returns the assigned outputs (size `outputs`, unassigned stay 0).
std::vector<Cell> dtree_eval(std::span<const std::uint8_t> tree, std::span<const Cell> inputs, std::size_t outputs);

}  // namespace rexa::dsp
