#include "rexa/dsp.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <numbers>

#include "rexa/error.hpp"

namespace rexa::dsp {

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Table value that continues each sigmoid segment one slot past its end, so
// interpolation in the last bucket lands on the next segment's base.
constexpr int kNext13 = 952 - 731;
constexpr int kNext310 = 1000 - 952;

Cell log10_with(const std::array<std::uint8_t, 100>& lut, std::int32_t x) {
  if (x < 10) throw VmFault(ExceptionCode::trap);
  std::int32_t shift = 0;
  while (x >= 100) {
    ++shift;
    x /= 10;
  }
  return static_cast<Cell>(shift * 100 + lut[static_cast<std::size_t>(x - 10)]);
}

std::array<Cell, 65> build_quarter_sine() {
  std::array<Cell, 65> q{};
  for (std::size_t i = 0; i < q.size(); ++i)
    q[i] = static_cast<Cell>(std::lround(1000.0 * std::sin(static_cast<double>(i) * std::numbers::pi / 128.0)));
  return q;
}

void check_range(std::span<const Cell> v, std::size_t off, std::size_t len, int k) {
  if (k < 1 || k > 8) throw DspError("filter coefficient k must be in [1, 8]");
  if (off > v.size() || len > v.size() - off) throw DspError("filter range outside the vector");
}

void check_scale(std::span<const Cell> scale, std::size_t n) {
  if (!scale.empty() && scale.size() != n) throw DspError("scale vector length does not match destination");
}

Cell scaled(std::int64_t v, std::span<const Cell> scale, std::size_t i) {
  return saturate_cell(scale.empty() ? v : apply_scale(v, scale[i]));
}

}  // namespace

SigmoidLuts build_sigmoid_luts() {
  SigmoidLuts t;
  for (std::size_t j = 0; j < t.log10lut.size(); ++j)
    t.log10lut[j] = static_cast<std::uint8_t>(std::log10(static_cast<double>(j + 10) / 10.0) * 100.0);

  std::array<bool, 24> def13{};
  for (int k = 0; k <= 39; ++k) {  // x = 1.00 .. 2.95, step 0.05
    const int xm = 1000 + 50 * k;
    const int i10 = log10_with(t.log10lut, xm / 5) / 2 - 65;
    if (i10 < 0 || i10 >= 24 || def13[static_cast<std::size_t>(i10)]) continue;
    def13[static_cast<std::size_t>(i10)] = true;
    t.sglut13[static_cast<std::size_t>(i10)] =
        static_cast<std::uint8_t>(static_cast<int>(sigmoid(xm / 1000.0) * 1000.0) - 731);
  }
  std::array<bool, 6> def310{};
  for (int k = 0; k <= 69; ++k) {  // x = 3.0 .. 9.9, step 0.1
    const int xm = 3000 + 100 * k;
    const int i10 = log10_with(t.log10lut, xm / 10) / 10 - 14;
    if (i10 < 0 || i10 >= 6 || def310[static_cast<std::size_t>(i10)]) continue;
    def310[static_cast<std::size_t>(i10)] = true;
    t.sglut310[static_cast<std::size_t>(i10)] =
        static_cast<std::uint8_t>(static_cast<int>(sigmoid(xm / 1000.0) * 1000.0) - 952);
  }
  t.defined13 = static_cast<std::size_t>(std::count(def13.begin(), def13.end(), true));
  t.defined310 = static_cast<std::size_t>(std::count(def310.begin(), def310.end(), true));
  return t;
}

const SigmoidLuts& luts() {
  static const SigmoidLuts t = build_sigmoid_luts();
  return t;
}

Cell fplog10(Cell x) { return log10_with(luts().log10lut, x); }

std::int32_t fplog10_fine(Cell xc) {
  std::int32_t x = xc;
  if (x < 10) throw VmFault(ExceptionCode::trap);
  const auto& lut = luts().log10lut;
  std::int32_t shift = 0, dropped = 0;
  while (x >= 100) {
    ++shift;
    dropped = x % 10;
    x /= 10;
  }
  const std::int32_t a = lut[static_cast<std::size_t>(x - 10)];
  const std::int32_t b = x < 99 ? lut[static_cast<std::size_t>(x - 9)] : 100;
  return shift * 1000 + a * 10 + (b - a) * dropped;
}

Cell fpsigmoid(Cell xc) {
  std::int32_t x = xc;
  const bool mirror = x < 0;
  if (mirror) x = -x;
  if (x >= 10000) return mirror ? 0 : 1000;
  const auto& t = luts();
  std::int32_t y;
  if (x <= 1000) {
    y = 500 + (x * 231) / 1000;
  } else if (x < 3000) {
    const std::int32_t l = fplog10_fine(static_cast<Cell>(x / 5));
    const std::int32_t i = l / 20 - 65, r = l % 20;
    const std::int32_t a = t.sglut13[static_cast<std::size_t>(i)];
    const std::int32_t b = i + 1 < 24 ? t.sglut13[static_cast<std::size_t>(i + 1)] : kNext13;
    y = a + ((b - a) * r) / 20 + 731;
  } else {
    const std::int32_t l = fplog10_fine(static_cast<Cell>(x / 10));
    const std::int32_t i = l / 100 - 14, r = l % 100;
    const std::int32_t a = t.sglut310[static_cast<std::size_t>(i)];
    const std::int32_t b = i + 1 < 6 ? t.sglut310[static_cast<std::size_t>(i + 1)] : kNext310;
    y = a + ((b - a) * r) / 100 + 952;
  }
  return static_cast<Cell>(mirror ? 1000 - y : y);
}

Cell fpsigmoid_coarse(Cell xc) {
  std::int32_t x = xc;
  const bool mirror = x < 0;
  if (mirror) x = -x;
  if (x >= 10000) return mirror ? 0 : 1000;
  const auto& t = luts();
  std::int32_t y;
  if (x <= 1000) {
    y = 500 + (x * 231) / 1000;
  } else if (x < 3000) {
    const std::int32_t i10 = fplog10(static_cast<Cell>(x / 5)) / 2 - 65;
    y = t.sglut13[static_cast<std::size_t>(i10)] + 731;
  } else {
    const std::int32_t i10 = fplog10(static_cast<Cell>(x / 10)) / 10 - 14;
    y = t.sglut310[static_cast<std::size_t>(i10)] + 952;
  }
  return static_cast<Cell>(mirror ? 1000 - y : y);
}

Cell fpsin(Cell x) {
  static const std::array<Cell, 65> q = build_quarter_sine();
  constexpr std::int64_t kPeriod = 6283185;  // 2*pi in microradians
  std::int64_t u = (static_cast<std::int64_t>(x) * 1000) % kPeriod;
  if (u < 0) u += kPeriod;
  const std::int64_t num = u * 256;
  const auto k = static_cast<int>(num / kPeriod);
  const std::int64_t frac = num % kPeriod;
  auto at = [&](int i) -> std::int64_t {
    i &= 255;
    if (i <= 64) return q[static_cast<std::size_t>(i)];
    if (i <= 128) return q[static_cast<std::size_t>(128 - i)];
    if (i <= 192) return -q[static_cast<std::size_t>(i - 128)];
    return -q[static_cast<std::size_t>(256 - i)];
  };
  const std::int64_t a = at(k), b = at(k + 1);
  return static_cast<Cell>(a + ((b - a) * frac) / kPeriod);
}

Cell softmax2(Cell z0, Cell z1) { return fpsigmoid(saturate_cell(static_cast<std::int32_t>(z1) - z0)); }

std::size_t argmax(std::span<const Cell> v) {
  if (v.empty()) throw DspError("argmax of an empty vector");
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

void lowp(std::span<Cell> v, std::size_t off, std::size_t len, int k) {
  check_range(v, off, len, k);
  if (len == 0) return;
  std::int32_t y = v[off];
  for (std::size_t n = off; n < off + len; ++n) {
    y += (v[n] - y) >> k;
    v[n] = static_cast<Cell>(y);
  }
}

void highp(std::span<Cell> v, std::size_t off, std::size_t len, int k) {
  check_range(v, off, len, k);
  if (len == 0) return;
  std::int32_t y = v[off];
  for (std::size_t n = off; n < off + len; ++n) {
    const std::int32_t x = v[n];
    y += (x - y) >> k;
    v[n] = saturate_cell(x - y);
  }
}

void hull(std::span<Cell> v, std::size_t off, std::size_t len, int k) {
  check_range(v, off, len, k);
  std::int32_t y = 0;
  for (std::size_t n = off; n < off + len; ++n) {
    const std::int32_t x = std::abs(static_cast<std::int32_t>(v[n]));
    y += (x - y) >> k;
    v[n] = saturate_cell(y);
  }
}

void vecload(std::span<const Cell> src, std::size_t srcoff, std::span<Cell> dst) {
  if (srcoff > src.size() || src.size() - srcoff < dst.size())
    throw DspError("vecload source smaller than destination");
  std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(srcoff), dst.size(), dst.begin());
}

void vecscale(std::span<const Cell> src, std::span<Cell> dst, std::span<const Cell> scale) {
  if (src.size() != dst.size()) throw DspError("vecscale length mismatch");
  check_scale(scale, dst.size());
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = scaled(src[i], scale, i);
}

void vecadd(std::span<const Cell> a, std::span<const Cell> b, std::span<Cell> dst, std::span<const Cell> scale) {
  if (a.size() != b.size() || a.size() != dst.size()) throw DspError("vecadd length mismatch");
  check_scale(scale, dst.size());
  for (std::size_t i = 0; i < dst.size(); ++i)
    dst[i] = scaled(static_cast<std::int64_t>(a[i]) + b[i], scale, i);
}

void vecmul(std::span<const Cell> a, std::span<const Cell> b, std::span<Cell> dst, std::span<const Cell> scale) {
  if (a.size() != b.size() || a.size() != dst.size()) throw DspError("vecmul length mismatch");
  check_scale(scale, dst.size());
  for (std::size_t i = 0; i < dst.size(); ++i)
    dst[i] = scaled(static_cast<std::int64_t>(a[i]) * b[i], scale, i);
}

void vecfold(std::span<const Cell> in, std::span<const Cell> w, std::span<Cell> out, std::span<const Cell> scale) {
  const std::size_t n = in.size();
  if (w.size() != n * out.size()) throw DspError("vecfold weight matrix size must be |in|*|out|");
  check_scale(scale, out.size());
  std::vector<Cell> tmp(out.size());
  for (std::size_t j = 0; j < out.size(); ++j) {
    std::int64_t acc = 0;
    for (std::size_t i = 0; i < n; ++i) acc += static_cast<std::int64_t>(in[i]) * w[j * n + i];
    tmp[j] = scaled(acc, scale, j);
  }
  std::copy(tmp.begin(), tmp.end(), out.begin());
}

void vecmap(std::span<const Cell> src, std::span<Cell> dst, const std::function<std::int32_t(Cell)>& f,
            std::span<const Cell> scale) {
  if (src.size() != dst.size()) throw DspError("vecmap length mismatch");
  check_scale(scale, dst.size());
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = scaled(f(src[i]), scale, i);
}

std::int32_t dotprod(std::span<const Cell> a, std::span<const Cell> b) {
  if (a.size() != b.size()) throw DspError("dotprod length mismatch");
  std::int64_t acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<std::int64_t>(a[i]) * b[i];
  return static_cast<std::int32_t>(acc);
}

// ---------------------------------------------------------------------------
// Decision trees

std::vector<std::uint8_t> encode_dtree(const std::vector<DtreeNode>& nodes) {
  std::vector<std::size_t> offset(nodes.size());
  std::size_t pos = 0;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (nodes[i].pairs.empty() || nodes[i].pairs.size() > 255) throw DspError("decision tree slice needs 1..255 pairs");
    offset[i] = pos;
    pos += 3 + 4 * nodes[i].pairs.size();
  }
  std::vector<std::uint8_t> out;
  out.reserve(pos);
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const auto& n = nodes[i];
    const bool output = n.op == DtreeOp::assign;
    out.push_back(static_cast<std::uint8_t>((n.var & 0x7F) | (output ? 0x80 : 0)));
    out.push_back(static_cast<std::uint8_t>(n.op));
    out.push_back(static_cast<std::uint8_t>(n.pairs.size()));
    for (const auto& [value, child] : n.pairs) {
      std::size_t branch = 0;
      if (child >= 0) {
        if (static_cast<std::size_t>(child) <= i || static_cast<std::size_t>(child) >= nodes.size())
          throw DspError("decision tree branches must point forward");
        branch = offset[static_cast<std::size_t>(child)] - offset[i];
        if (branch > 0xFFFF) throw DspError("decision tree branch offset exceeds 16 bits");
      } else if (!output) {
        throw DspError("input slice without a branch target");
      }
      const auto v = static_cast<std::uint16_t>(value);
      out.push_back(static_cast<std::uint8_t>(v & 0xFF));
      out.push_back(static_cast<std::uint8_t>(v >> 8));
      out.push_back(static_cast<std::uint8_t>(branch & 0xFF));
      out.push_back(static_cast<std::uint8_t>(branch >> 8));
    }
  }
  return out;
}

std::vector<Cell> dtree_eval(std::span<const std::uint8_t> tree, std::span<const Cell> inputs, std::size_t outputs) {
  std::vector<Cell> result(outputs, 0);
  std::size_t pos = 0;
  bool assigned = false;
  for (std::size_t guard = 0; guard <= tree.size(); ++guard) {
    if (pos + 3 > tree.size()) throw DspError("decision tree slice out of bounds");
    const std::uint8_t var = tree[pos] & 0x7F;
    const bool output = tree[pos] & 0x80;
    const auto op = static_cast<DtreeOp>(tree[pos + 1]);
    const std::size_t n = tree[pos + 2];
    if (n == 0 || pos + 3 + 4 * n > tree.size()) throw DspError("malformed decision tree slice");
    auto value = [&](std::size_t k) {
      const std::size_t p = pos + 3 + 4 * k;
      return static_cast<Cell>(static_cast<std::uint16_t>(tree[p] | (tree[p + 1] << 8)));
    };
    auto branch = [&](std::size_t k) {
      const std::size_t p = pos + 3 + 4 * k + 2;
      return static_cast<std::size_t>(tree[p] | (tree[p + 1] << 8));
    };

    std::size_t pick = n - 1;
    if (output) {
      if (op != DtreeOp::assign) throw DspError("output slice must use the assign op");
      if (var >= outputs) throw DspError("decision tree output variable out of range");
      result[var] = value(0);
      assigned = true;
      pick = 0;
      if (branch(0) == 0) return result;
    } else {
      if (var >= inputs.size()) throw DspError("decision tree input variable out of range");
      const Cell x = inputs[var];
      switch (op) {
        case DtreeOp::less:
        case DtreeOp::greater:
        case DtreeOp::equal:
          for (std::size_t k = 0; k + 1 < n; ++k) {
            const Cell v = value(k);
            const bool hit = op == DtreeOp::less ? x < v : op == DtreeOp::greater ? x > v : x == v;
            if (hit) {
              pick = k;
              break;
            }
          }
          break;
        case DtreeOp::nearest: {
          std::int32_t best = INT32_MAX;
          for (std::size_t k = 0; k < n; ++k) {
            const std::int32_t d = std::abs(static_cast<std::int32_t>(x) - value(k));
            if (d < best) {
              best = d;
              pick = k;
            }
          }
          break;
        }
        default:
          throw DspError("unknown decision tree op");
      }
    }
    const std::size_t b = branch(pick);
    if (b == 0) throw DspError("decision tree branch must move forward");
    pos += b;
  }
  if (!assigned) throw DspError("decision tree has no reachable output");
  throw DspError("decision tree does not terminate");
}

}  // namespace rexa::dsp
