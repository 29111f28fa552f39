#include "trinity/tape.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace trinity {

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  }
}

double sigmoid_val(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

Var Tape::push(Node node) {
  node.requires_grad = node.op == Op::kInput;
  for (int32_t i : node.in) {
    if (nodes_[static_cast<size_t>(i)].requires_grad) node.requires_grad = true;
  }
  if (node.op != Op::kInput && node.op != Op::kConstant) {
    node.out = compute(node);
  }
  nodes_.push_back(std::move(node));
  return Var{static_cast<int32_t>(nodes_.size() - 1)};
}

const Tape::Node& Tape::node(Var v) const {
  if (!v.valid() || v.id >= static_cast<int32_t>(nodes_.size())) {
    throw std::invalid_argument("Tape: invalid var handle");
  }
  return nodes_[static_cast<size_t>(v.id)];
}

Tensor Tape::value(Var v) const { return node(v).out; }

Var Tape::input(Tensor value) {
  Node n;
  n.op = Op::kInput;
  n.out = std::move(value);
  return push(std::move(n));
}

Var Tape::constant(Tensor value) {
  Node n;
  n.op = Op::kConstant;
  n.out = std::move(value);
  return push(std::move(n));
}

Var Tape::matmul(Var a, Var b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  if (ta.rank() != 2 || tb.rank() != 2) {
    throw std::invalid_argument("matmul: rank-2 operands required, got " + ta.shape_str() + " and " + tb.shape_str());
  }
  if (ta.dim(1) != tb.dim(0)) {
    throw std::invalid_argument("matmul: inner extents differ: " + ta.shape_str() + " x " + tb.shape_str());
  }
  Node n;
  n.op = Op::kMatmul;
  n.in = {a.id, b.id};
  return push(std::move(n));
}

Var Tape::transpose(Var x) {
  if (value(x).rank() != 2) throw std::invalid_argument("transpose: rank-2 required, got " + value(x).shape_str());
  Node n;
  n.op = Op::kTranspose;
  n.in = {x.id};
  return push(std::move(n));
}

Var Tape::add(Var a, Var b) {
  check_same_shape(value(a), value(b), "add");
  Node n;
  n.op = Op::kAdd;
  n.in = {a.id, b.id};
  return push(std::move(n));
}

Var Tape::sub(Var a, Var b) {
  check_same_shape(value(a), value(b), "sub");
  Node n;
  n.op = Op::kSub;
  n.in = {a.id, b.id};
  return push(std::move(n));
}

Var Tape::mul(Var a, Var b) {
  check_same_shape(value(a), value(b), "mul");
  Node n;
  n.op = Op::kMul;
  n.in = {a.id, b.id};
  return push(std::move(n));
}

Var Tape::scale(Var x, double c) {
  Node n;
  n.op = Op::kScale;
  n.in = {x.id};
  n.c0 = c;
  return push(std::move(n));
}

Var Tape::sigmoid(Var x) {
  Node n;
  n.op = Op::kSigmoid;
  n.in = {x.id};
  return push(std::move(n));
}

Var Tape::silu(Var x) {
  Node n;
  n.op = Op::kSilu;
  n.in = {x.id};
  return push(std::move(n));
}

Var Tape::rms_norm(Var x, Var gain, double eps) {
  const Tensor& tx = value(x);
  const Tensor& tg = value(gain);
  if (tg.rank() != 1 || tg.dim(0) != tx.cols()) {
    throw std::invalid_argument("rms_norm: gain " + tg.shape_str() + " does not match last extent of " + tx.shape_str());
  }
  Node n;
  n.op = Op::kRmsNorm;
  n.in = {x.id, gain.id};
  n.c0 = eps;
  return push(std::move(n));
}

Var Tape::softmax_last(Var x) {
  Node n;
  n.op = Op::kSoftmaxLast;
  n.in = {x.id};
  return push(std::move(n));
}

Var Tape::masked_softmax_last(Var x, Tensor mask) {
  check_same_shape(value(x), mask, "masked_softmax_last");
  Node n;
  n.op = Op::kSoftmaxLast;
  n.in = {x.id};
  n.aux = std::move(mask);
  return push(std::move(n));
}

Var Tape::rope(Var x, Tensor positions, double theta) {
  const Tensor& tx = value(x);
  if (tx.rank() != 2 || tx.dim(1) % 2 != 0) {
    throw std::invalid_argument("rope: needs [T x d_h] with even d_h, got " + tx.shape_str());
  }
  if (positions.numel() != tx.dim(0)) {
    throw std::invalid_argument("rope: positions " + positions.shape_str() + " do not match rows of " + tx.shape_str());
  }
  Node n;
  n.op = Op::kRope;
  n.in = {x.id};
  n.aux = std::move(positions);
  n.c0 = theta;
  return push(std::move(n));
}

Var Tape::slice_cols(Var x, int64_t offset, int64_t len) {
  const Tensor& t = value(x);
  if (t.rank() != 2 || offset < 0 || len <= 0 || offset + len > t.dim(1)) {
    throw std::invalid_argument("slice_cols: invalid slice [" + std::to_string(offset) + ", +" +
                                std::to_string(len) + ") of " + t.shape_str());
  }
  Node n;
  n.op = Op::kSliceCols;
  n.in = {x.id};
  n.i0 = offset;
  n.i1 = len;
  return push(std::move(n));
}

Var Tape::slice_rows(Var x, int64_t offset, int64_t len) {
  const Tensor& t = value(x);
  if (t.rank() != 2 || offset < 0 || len <= 0 || offset + len > t.dim(0)) {
    throw std::invalid_argument("slice_rows: invalid slice [" + std::to_string(offset) + ", +" +
                                std::to_string(len) + ") of " + t.shape_str());
  }
  Node n;
  n.op = Op::kSliceRows;
  n.in = {x.id};
  n.i0 = offset;
  n.i1 = len;
  return push(std::move(n));
}

Var Tape::concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
  Node n;
  n.op = Op::kConcatCols;
  int64_t r = value(parts[0]).rows();
  for (Var p : parts) {
    if (value(p).rank() != 2 || value(p).rows() != r) {
      throw std::invalid_argument("concat_cols: row mismatch at part with shape " + value(p).shape_str());
    }
    n.in.push_back(p.id);
  }
  return push(std::move(n));
}

Var Tape::concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
  Node n;
  n.op = Op::kConcatRows;
  int64_t c = value(parts[0]).cols();
  for (Var p : parts) {
    if (value(p).rank() != 2 || value(p).cols() != c) {
      throw std::invalid_argument("concat_rows: column mismatch at part with shape " + value(p).shape_str());
    }
    n.in.push_back(p.id);
  }
  return push(std::move(n));
}

Var Tape::gather_rows(Var x, std::vector<int64_t> idx) {
  const Tensor& t = value(x);
  if (t.rank() != 2) throw std::invalid_argument("gather_rows: rank-2 required, got " + t.shape_str());
  for (int64_t i : idx) {
    if (i < 0 || i >= t.dim(0)) {
      throw std::invalid_argument("gather_rows: index " + std::to_string(i) + " out of range for " + t.shape_str());
    }
  }
  Node n;
  n.op = Op::kGatherRows;
  n.in = {x.id};
  n.idx = std::move(idx);
  return push(std::move(n));
}

Var Tape::scatter_add_rows(Var base, Var rows, std::vector<int64_t> idx) {
  const Tensor& tb = value(base);
  const Tensor& tr = value(rows);
  if (tb.rank() != 2 || tr.rank() != 2 || tb.dim(1) != tr.dim(1)) {
    throw std::invalid_argument("scatter_add_rows: column mismatch " + tb.shape_str() + " vs " + tr.shape_str());
  }
  if (static_cast<int64_t>(idx.size()) != tr.dim(0)) {
    throw std::invalid_argument("scatter_add_rows: index count does not match rows");
  }
  for (int64_t i : idx) {
    if (i < 0 || i >= tb.dim(0)) {
      throw std::invalid_argument("scatter_add_rows: index " + std::to_string(i) + " out of range for " + tb.shape_str());
    }
  }
  Node n;
  n.op = Op::kScatterAddRows;
  n.in = {base.id, rows.id};
  n.idx = std::move(idx);
  return push(std::move(n));
}

Var Tape::take(Var x, std::vector<int64_t> idx) {
  const Tensor& t = value(x);
  for (int64_t i : idx) {
    if (i < 0 || i >= t.numel()) {
      throw std::invalid_argument("take: flat index " + std::to_string(i) + " out of range for " + t.shape_str());
    }
  }
  Node n;
  n.op = Op::kTake;
  n.in = {x.id};
  n.idx = std::move(idx);
  return push(std::move(n));
}

Var Tape::scale_rows(Var x, Var w) {
  const Tensor& tx = value(x);
  const Tensor& tw = value(w);
  if (tx.rank() != 2 || tw.rank() != 1 || tw.dim(0) != tx.dim(0)) {
    throw std::invalid_argument("scale_rows: weights " + tw.shape_str() + " do not match rows of " + tx.shape_str());
  }
  Node n;
  n.op = Op::kScaleRows;
  n.in = {x.id, w.id};
  return push(std::move(n));
}

Var Tape::masked_row_norm(Var s, Tensor mask) {
  check_same_shape(value(s), mask, "masked_row_norm");
  if (value(s).rank() != 2) throw std::invalid_argument("masked_row_norm: rank-2 required");
  Node n;
  n.op = Op::kMaskedRowNorm;
  n.in = {s.id};
  n.aux = std::move(mask);
  return push(std::move(n));
}

Var Tape::sum(Var x) {
  Node n;
  n.op = Op::kSum;
  n.in = {x.id};
  return push(std::move(n));
}

Var Tape::mean(Var x) {
  Node n;
  n.op = Op::kMean;
  n.in = {x.id};
  return push(std::move(n));
}

Var Tape::logsumexp_last(Var x) {
  if (value(x).rank() != 2) throw std::invalid_argument("logsumexp_last: rank-2 required, got " + value(x).shape_str());
  Node n;
  n.op = Op::kLogsumexpLast;
  n.in = {x.id};
  return push(std::move(n));
}

Tensor Tape::compute(const Node& n) const {
  auto in = [&](size_t i) -> const Tensor& { return nodes_[static_cast<size_t>(n.in[i])].out; };
  switch (n.op) {
    case Op::kInput:
    case Op::kConstant:
      return n.out;
    case Op::kMatmul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      const int64_t m = a.dim(0), k = a.dim(1), c = b.dim(1);
      std::vector<double> out(static_cast<size_t>(m * c), 0.0);
      const double* pa = a.data().data();
      const double* pb = b.data().data();
      for (int64_t i = 0; i < m; ++i) {
        double* po = out.data() + i * c;
        for (int64_t kk = 0; kk < k; ++kk) {
          const double aik = pa[i * k + kk];
          if (aik == 0.0) continue;
          const double* pbr = pb + kk * c;
          for (int64_t j = 0; j < c; ++j) po[j] += aik * pbr[j];
        }
      }
      return Tensor::from_data({m, c}, std::move(out));
    }
    case Op::kTranspose: {
      const Tensor& x = in(0);
      const int64_t r = x.dim(0), c = x.dim(1);
      std::vector<double> out(static_cast<size_t>(r * c));
      const double* px = x.data().data();
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j) out[static_cast<size_t>(j * r + i)] = px[i * c + j];
      return Tensor::from_data({c, r}, std::move(out));
    }
    case Op::kAdd: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      std::vector<double> out(a.data().begin(), a.data().end());
      const double* pb = b.data().data();
      for (size_t i = 0; i < out.size(); ++i) out[i] += pb[i];
      return Tensor::from_data(a.shape(), std::move(out));
    }
    case Op::kSub: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      std::vector<double> out(a.data().begin(), a.data().end());
      const double* pb = b.data().data();
      for (size_t i = 0; i < out.size(); ++i) out[i] -= pb[i];
      return Tensor::from_data(a.shape(), std::move(out));
    }
    case Op::kMul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      std::vector<double> out(a.data().begin(), a.data().end());
      const double* pb = b.data().data();
      for (size_t i = 0; i < out.size(); ++i) out[i] *= pb[i];
      return Tensor::from_data(a.shape(), std::move(out));
    }
    case Op::kScale: {
      const Tensor& x = in(0);
      std::vector<double> out(x.data().begin(), x.data().end());
      for (double& v : out) v *= n.c0;
      return Tensor::from_data(x.shape(), std::move(out));
    }
    case Op::kSigmoid: {
      const Tensor& x = in(0);
      std::vector<double> out(x.data().begin(), x.data().end());
      for (double& v : out) v = sigmoid_val(v);
      return Tensor::from_data(x.shape(), std::move(out));
    }
    case Op::kSilu: {
      const Tensor& x = in(0);
      std::vector<double> out(x.data().begin(), x.data().end());
      for (double& v : out) v = v * sigmoid_val(v);
      return Tensor::from_data(x.shape(), std::move(out));
    }
    case Op::kRmsNorm: {
      const Tensor& x = in(0);
      const Tensor& g = in(1);
      const int64_t c = x.cols(), r = x.numel() / c;
      std::vector<double> out(static_cast<size_t>(r * c));
      const double* px = x.data().data();
      const double* pg = g.data().data();
      for (int64_t i = 0; i < r; ++i) {
        const double* row = px + i * c;
        double ms = 0.0;
        for (int64_t j = 0; j < c; ++j) ms += row[j] * row[j];
        ms /= static_cast<double>(c);
        const double inv = 1.0 / std::sqrt(ms + n.c0);
        for (int64_t j = 0; j < c; ++j) out[static_cast<size_t>(i * c + j)] = row[j] * inv * pg[j];
      }
      return Tensor::from_data(x.shape(), std::move(out));
    }
    case Op::kSoftmaxLast: {
      const Tensor& x = in(0);
      const int64_t c = x.cols(), r = x.numel() / c;
      const double* px = x.data().data();
      const double* pm = n.aux.empty() ? nullptr : n.aux.data().data();
      std::vector<double> out(static_cast<size_t>(r * c), 0.0);
      for (int64_t i = 0; i < r; ++i) {
        const double* row = px + i * c;
        const double* mrow = pm ? pm + i * c : nullptr;
        double mx = -HUGE_VAL;
        for (int64_t j = 0; j < c; ++j) {
          if ((!mrow || mrow[j] != 0.0) && row[j] > mx) mx = row[j];
        }
        double denom = 0.0;
        for (int64_t j = 0; j < c; ++j) {
          if (!mrow || mrow[j] != 0.0) {
            const double e = std::exp(row[j] - mx);
            out[static_cast<size_t>(i * c + j)] = e;
            denom += e;
          }
        }
        for (int64_t j = 0; j < c; ++j) out[static_cast<size_t>(i * c + j)] /= denom;
      }
      return Tensor::from_data(x.shape(), std::move(out));
    }
    case Op::kRope: {
      const Tensor& x = in(0);
      const int64_t t = x.dim(0), d = x.dim(1), half = d / 2;
      const double* px = x.data().data();
      const double* pp = n.aux.data().data();
      std::vector<double> out(static_cast<size_t>(t * d));
      for (int64_t i = 0; i < t; ++i) {
        const double pos = pp[i];
        for (int64_t k = 0; k < half; ++k) {
          const double freq = std::pow(n.c0, -2.0 * static_cast<double>(k) / static_cast<double>(d));
          const double ang = pos * freq;
          const double cs = std::cos(ang), sn = std::sin(ang);
          const double a = px[i * d + 2 * k], b = px[i * d + 2 * k + 1];
          out[static_cast<size_t>(i * d + 2 * k)] = a * cs - b * sn;
          out[static_cast<size_t>(i * d + 2 * k + 1)] = a * sn + b * cs;
        }
      }
      return Tensor::from_data(x.shape(), std::move(out));
    }
    case Op::kSliceCols: {
      const Tensor& x = in(0);
      const int64_t r = x.dim(0), c = x.dim(1);
      std::vector<double> out(static_cast<size_t>(r * n.i1));
      const double* px = x.data().data();
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < n.i1; ++j) out[static_cast<size_t>(i * n.i1 + j)] = px[i * c + n.i0 + j];
      return Tensor::from_data({r, n.i1}, std::move(out));
    }
    case Op::kSliceRows: {
      const Tensor& x = in(0);
      const int64_t c = x.dim(1);
      auto base = x.data().subspan(static_cast<size_t>(n.i0 * c), static_cast<size_t>(n.i1 * c));
      return Tensor::from_data({n.i1, c}, std::vector<double>(base.begin(), base.end()));
    }
    case Op::kConcatCols: {
      const int64_t r = in(0).rows();
      int64_t ctot = 0;
      for (size_t p = 0; p < n.in.size(); ++p) ctot += in(p).dim(1);
      std::vector<double> out(static_cast<size_t>(r * ctot));
      int64_t off = 0;
      for (size_t p = 0; p < n.in.size(); ++p) {
        const Tensor& part = in(p);
        const int64_t c = part.dim(1);
        const double* pp = part.data().data();
        for (int64_t i = 0; i < r; ++i)
          for (int64_t j = 0; j < c; ++j) out[static_cast<size_t>(i * ctot + off + j)] = pp[i * c + j];
        off += c;
      }
      return Tensor::from_data({r, ctot}, std::move(out));
    }
    case Op::kConcatRows: {
      const int64_t c = in(0).cols();
      int64_t rtot = 0;
      for (size_t p = 0; p < n.in.size(); ++p) rtot += in(p).dim(0);
      std::vector<double> out;
      out.reserve(static_cast<size_t>(rtot * c));
      for (size_t p = 0; p < n.in.size(); ++p) {
        auto d = in(p).data();
        out.insert(out.end(), d.begin(), d.end());
      }
      return Tensor::from_data({rtot, c}, std::move(out));
    }
    case Op::kGatherRows: {
      const Tensor& x = in(0);
      const int64_t c = x.dim(1);
      std::vector<double> out;
      out.reserve(n.idx.size() * static_cast<size_t>(c));
      const double* px = x.data().data();
      for (int64_t i : n.idx) out.insert(out.end(), px + i * c, px + (i + 1) * c);
      return Tensor::from_data({static_cast<int64_t>(n.idx.size()), c}, std::move(out));
    }
    case Op::kScatterAddRows: {
      const Tensor& base = in(0);
      const Tensor& rows = in(1);
      const int64_t c = base.dim(1);
      std::vector<double> out(base.data().begin(), base.data().end());
      const double* pr = rows.data().data();
      for (size_t j = 0; j < n.idx.size(); ++j) {
        double* po = out.data() + n.idx[j] * c;
        const double* prr = pr + static_cast<int64_t>(j) * c;
        for (int64_t k = 0; k < c; ++k) po[k] += prr[k];
      }
      return Tensor::from_data(base.shape(), std::move(out));
    }
    case Op::kTake: {
      const Tensor& x = in(0);
      std::vector<double> out;
      out.reserve(n.idx.size());
      for (int64_t i : n.idx) out.push_back(x.at(i));
      return Tensor::from_data({static_cast<int64_t>(n.idx.size())}, std::move(out));
    }
    case Op::kScaleRows: {
      const Tensor& x = in(0);
      const Tensor& w = in(1);
      const int64_t r = x.dim(0), c = x.dim(1);
      std::vector<double> out(x.data().begin(), x.data().end());
      const double* pw = w.data().data();
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j) out[static_cast<size_t>(i * c + j)] *= pw[i];
      return Tensor::from_data(x.shape(), std::move(out));
    }
    case Op::kMaskedRowNorm: {
      const Tensor& s = in(0);
      const int64_t r = s.dim(0), c = s.dim(1);
      const double* ps = s.data().data();
      const double* pm = n.aux.data().data();
      std::vector<double> out(static_cast<size_t>(r * c), 0.0);
      for (int64_t i = 0; i < r; ++i) {
        double denom = 0.0;
        for (int64_t j = 0; j < c; ++j) {
          if (pm[i * c + j] != 0.0) denom += ps[i * c + j];
        }
        for (int64_t j = 0; j < c; ++j) {
          if (pm[i * c + j] != 0.0) out[static_cast<size_t>(i * c + j)] = ps[i * c + j] / denom;
        }
      }
      return Tensor::from_data(s.shape(), std::move(out));
    }
    case Op::kSum: {
      double acc = 0.0;
      for (double v : in(0).data()) acc += v;
      return Tensor::scalar(acc);
    }
    case Op::kMean: {
      double acc = 0.0;
      for (double v : in(0).data()) acc += v;
      return Tensor::scalar(acc / static_cast<double>(in(0).numel()));
    }
    case Op::kLogsumexpLast: {
      const Tensor& x = in(0);
      const int64_t r = x.dim(0), c = x.dim(1);
      const double* px = x.data().data();
      std::vector<double> out(static_cast<size_t>(r));
      for (int64_t i = 0; i < r; ++i) {
        const double* row = px + i * c;
        double mx = row[0];
        for (int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double acc = 0.0;
        for (int64_t j = 0; j < c; ++j) acc += std::exp(row[j] - mx);
        out[static_cast<size_t>(i)] = mx + std::log(acc);
      }
      return Tensor::from_data({r}, std::move(out));
    }
  }
  throw std::logic_error("Tape: unreachable op");
}

std::vector<double>& Tape::grad_buf(std::vector<std::vector<double>>& grads, int32_t id) const {
  auto& g = grads[static_cast<size_t>(id)];
  if (g.empty()) g.assign(static_cast<size_t>(nodes_[static_cast<size_t>(id)].out.numel()), 0.0);
  return g;
}

void Tape::backward_node(int32_t id, const std::vector<double>& gout,
                         std::vector<std::vector<double>>& grads) const {
  const Node& n = nodes_[static_cast<size_t>(id)];
  auto in_t = [&](size_t i) -> const Tensor& { return nodes_[static_cast<size_t>(n.in[i])].out; };
  auto needs = [&](size_t i) { return nodes_[static_cast<size_t>(n.in[i])].requires_grad; };
  switch (n.op) {
    case Op::kInput:
    case Op::kConstant:
      return;
    case Op::kMatmul: {
      const Tensor& a = in_t(0);
      const Tensor& b = in_t(1);
      const int64_t m = a.dim(0), k = a.dim(1), c = b.dim(1);
      if (needs(0)) {
        auto& ga = grad_buf(grads, n.in[0]);
        const double* pb = b.data().data();
        for (int64_t i = 0; i < m; ++i)
          for (int64_t kk = 0; kk < k; ++kk) {
            double acc = 0.0;
            const double* go = gout.data() + i * c;
            const double* pbr = pb + kk * c;
            for (int64_t j = 0; j < c; ++j) acc += go[j] * pbr[j];
            ga[static_cast<size_t>(i * k + kk)] += acc;
          }
      }
      if (needs(1)) {
        auto& gb = grad_buf(grads, n.in[1]);
        const double* pa = a.data().data();
        for (int64_t i = 0; i < m; ++i)
          for (int64_t kk = 0; kk < k; ++kk) {
            const double aik = pa[i * k + kk];
            if (aik == 0.0) continue;
            double* gbr = gb.data() + kk * c;
            const double* go = gout.data() + i * c;
            for (int64_t j = 0; j < c; ++j) gbr[j] += aik * go[j];
          }
      }
      return;
    }
    case Op::kTranspose: {
      if (!needs(0)) return;
      const int64_t r = in_t(0).dim(0), c = in_t(0).dim(1);
      auto& g = grad_buf(grads, n.in[0]);
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j) g[static_cast<size_t>(i * c + j)] += gout[static_cast<size_t>(j * r + i)];
      return;
    }
    case Op::kAdd: {
      for (size_t p = 0; p < 2; ++p) {
        if (!needs(p)) continue;
        auto& g = grad_buf(grads, n.in[p]);
        for (size_t i = 0; i < gout.size(); ++i) g[i] += gout[i];
      }
      return;
    }
    case Op::kSub: {
      if (needs(0)) {
        auto& g = grad_buf(grads, n.in[0]);
        for (size_t i = 0; i < gout.size(); ++i) g[i] += gout[i];
      }
      if (needs(1)) {
        auto& g = grad_buf(grads, n.in[1]);
        for (size_t i = 0; i < gout.size(); ++i) g[i] -= gout[i];
      }
      return;
    }
    case Op::kMul: {
      const double* pa = in_t(0).data().data();
      const double* pb = in_t(1).data().data();
      if (needs(0)) {
        auto& g = grad_buf(grads, n.in[0]);
        for (size_t i = 0; i < gout.size(); ++i) g[i] += gout[i] * pb[i];
      }
      if (needs(1)) {
        auto& g = grad_buf(grads, n.in[1]);
        for (size_t i = 0; i < gout.size(); ++i) g[i] += gout[i] * pa[i];
      }
      return;
    }
    case Op::kScale: {
      if (!needs(0)) return;
      auto& g = grad_buf(grads, n.in[0]);
      for (size_t i = 0; i < gout.size(); ++i) g[i] += gout[i] * n.c0;
      return;
    }
    case Op::kSigmoid: {
      if (!needs(0)) return;
      auto& g = grad_buf(grads, n.in[0]);
      const double* po = n.out.data().data();
      for (size_t i = 0; i < gout.size(); ++i) g[i] += gout[i] * po[i] * (1.0 - po[i]);
      return;
    }
    case Op::kSilu: {
      if (!needs(0)) return;
      auto& g = grad_buf(grads, n.in[0]);
      const double* px = in_t(0).data().data();
      for (size_t i = 0; i < gout.size(); ++i) {
        const double s = sigmoid_val(px[i]);
        g[i] += gout[i] * s * (1.0 + px[i] * (1.0 - s));
      }
      return;
    }
    case Op::kRmsNorm: {
      const Tensor& x = in_t(0);
      const Tensor& gn = in_t(1);
      const int64_t c = x.cols(), r = x.numel() / c;
      const double* px = x.data().data();
      const double* pg = gn.data().data();
      std::vector<double>* gx = needs(0) ? &grad_buf(grads, n.in[0]) : nullptr;
      std::vector<double>* gg = needs(1) ? &grad_buf(grads, n.in[1]) : nullptr;
      for (int64_t i = 0; i < r; ++i) {
        const double* row = px + i * c;
        const double* go = gout.data() + i * c;
        double ms = 0.0;
        for (int64_t j = 0; j < c; ++j) ms += row[j] * row[j];
        ms /= static_cast<double>(c);
        const double inv = 1.0 / std::sqrt(ms + n.c0);
        if (gx) {
          double dot = 0.0;
          for (int64_t j = 0; j < c; ++j) dot += go[j] * pg[j] * row[j];
          const double coef = dot * inv * inv * inv / static_cast<double>(c);
          double* gxr = gx->data() + i * c;
          for (int64_t j = 0; j < c; ++j) gxr[j] += inv * pg[j] * go[j] - coef * row[j];
        }
        if (gg) {
          for (int64_t j = 0; j < c; ++j) (*gg)[static_cast<size_t>(j)] += go[j] * row[j] * inv;
        }
      }
      return;
    }
    case Op::kSoftmaxLast: {
      if (!needs(0)) return;
      const int64_t c = n.out.cols(), r = n.out.numel() / c;
      const double* po = n.out.data().data();
      auto& g = grad_buf(grads, n.in[0]);
      for (int64_t i = 0; i < r; ++i) {
        const double* orow = po + i * c;
        const double* go = gout.data() + i * c;
        double dot = 0.0;
        for (int64_t j = 0; j < c; ++j) dot += go[j] * orow[j];
        double* gr = g.data() + i * c;
        for (int64_t j = 0; j < c; ++j) gr[j] += orow[j] * (go[j] - dot);
      }
      return;
    }
    case Op::kRope: {
      if (!needs(0)) return;
      const Tensor& x = in_t(0);
      const int64_t t = x.dim(0), d = x.dim(1), half = d / 2;
      const double* pp = n.aux.data().data();
      auto& g = grad_buf(grads, n.in[0]);
      for (int64_t i = 0; i < t; ++i) {
        const double pos = pp[i];
        for (int64_t k = 0; k < half; ++k) {
          const double freq = std::pow(n.c0, -2.0 * static_cast<double>(k) / static_cast<double>(d));
          const double ang = pos * freq;
          const double cs = std::cos(ang), sn = std::sin(ang);
          const double ga = gout[static_cast<size_t>(i * d + 2 * k)];
          const double gb = gout[static_cast<size_t>(i * d + 2 * k + 1)];
          g[static_cast<size_t>(i * d + 2 * k)] += ga * cs + gb * sn;
          g[static_cast<size_t>(i * d + 2 * k + 1)] += -ga * sn + gb * cs;
        }
      }
      return;
    }
    case Op::kSliceCols: {
      if (!needs(0)) return;
      const int64_t r = in_t(0).dim(0), c = in_t(0).dim(1);
      auto& g = grad_buf(grads, n.in[0]);
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < n.i1; ++j)
          g[static_cast<size_t>(i * c + n.i0 + j)] += gout[static_cast<size_t>(i * n.i1 + j)];
      return;
    }
    case Op::kSliceRows: {
      if (!needs(0)) return;
      const int64_t c = in_t(0).dim(1);
      auto& g = grad_buf(grads, n.in[0]);
      for (size_t i = 0; i < gout.size(); ++i) g[static_cast<size_t>(n.i0 * c) + i] += gout[i];
      return;
    }
    case Op::kConcatCols: {
      const int64_t r = n.out.dim(0), ctot = n.out.dim(1);
      int64_t off = 0;
      for (size_t p = 0; p < n.in.size(); ++p) {
        const int64_t c = in_t(p).dim(1);
        if (needs(p)) {
          auto& g = grad_buf(grads, n.in[p]);
          for (int64_t i = 0; i < r; ++i)
            for (int64_t j = 0; j < c; ++j)
              g[static_cast<size_t>(i * c + j)] += gout[static_cast<size_t>(i * ctot + off + j)];
        }
        off += c;
      }
      return;
    }
    case Op::kConcatRows: {
      size_t off = 0;
      for (size_t p = 0; p < n.in.size(); ++p) {
        const size_t cnt = static_cast<size_t>(in_t(p).numel());
        if (needs(p)) {
          auto& g = grad_buf(grads, n.in[p]);
          for (size_t i = 0; i < cnt; ++i) g[i] += gout[off + i];
        }
        off += cnt;
      }
      return;
    }
    case Op::kGatherRows: {
      if (!needs(0)) return;
      const int64_t c = in_t(0).dim(1);
      auto& g = grad_buf(grads, n.in[0]);
      for (size_t j = 0; j < n.idx.size(); ++j) {
        double* gr = g.data() + n.idx[j] * c;
        const double* go = gout.data() + static_cast<int64_t>(j) * c;
        for (int64_t k = 0; k < c; ++k) gr[k] += go[k];
      }
      return;
    }
    case Op::kScatterAddRows: {
      const int64_t c = in_t(0).dim(1);
      if (needs(0)) {
        auto& g = grad_buf(grads, n.in[0]);
        for (size_t i = 0; i < gout.size(); ++i) g[i] += gout[i];
      }
      if (needs(1)) {
        auto& g = grad_buf(grads, n.in[1]);
        for (size_t j = 0; j < n.idx.size(); ++j) {
          double* gr = g.data() + static_cast<int64_t>(j) * c;
          const double* go = gout.data() + n.idx[j] * c;
          for (int64_t k = 0; k < c; ++k) gr[k] += go[k];
        }
      }
      return;
    }
    case Op::kTake: {
      if (!needs(0)) return;
      auto& g = grad_buf(grads, n.in[0]);
      for (size_t j = 0; j < n.idx.size(); ++j) g[static_cast<size_t>(n.idx[j])] += gout[j];
      return;
    }
    case Op::kScaleRows: {
      const Tensor& x = in_t(0);
      const Tensor& w = in_t(1);
      const int64_t r = x.dim(0), c = x.dim(1);
      const double* px = x.data().data();
      const double* pw = w.data().data();
      if (needs(0)) {
        auto& g = grad_buf(grads, n.in[0]);
        for (int64_t i = 0; i < r; ++i)
          for (int64_t j = 0; j < c; ++j) g[static_cast<size_t>(i * c + j)] += gout[static_cast<size_t>(i * c + j)] * pw[i];
      }
      if (needs(1)) {
        auto& g = grad_buf(grads, n.in[1]);
        for (int64_t i = 0; i < r; ++i) {
          double acc = 0.0;
          for (int64_t j = 0; j < c; ++j) acc += gout[static_cast<size_t>(i * c + j)] * px[i * c + j];
          g[static_cast<size_t>(i)] += acc;
        }
      }
      return;
    }
    case Op::kMaskedRowNorm: {
      if (!needs(0)) return;
      const Tensor& s = in_t(0);
      const int64_t r = s.dim(0), c = s.dim(1);
      const double* ps = s.data().data();
      const double* pm = n.aux.data().data();
      const double* po = n.out.data().data();
      auto& g = grad_buf(grads, n.in[0]);
      for (int64_t i = 0; i < r; ++i) {
        double denom = 0.0, dot = 0.0;
        for (int64_t j = 0; j < c; ++j) {
          if (pm[i * c + j] != 0.0) denom += ps[i * c + j];
          dot += gout[static_cast<size_t>(i * c + j)] * po[i * c + j];
        }
        for (int64_t j = 0; j < c; ++j) {
          if (pm[i * c + j] != 0.0) {
            g[static_cast<size_t>(i * c + j)] += (gout[static_cast<size_t>(i * c + j)] - dot) / denom;
          }
        }
      }
      return;
    }
    case Op::kSum: {
      if (!needs(0)) return;
      auto& g = grad_buf(grads, n.in[0]);
      for (double& v : g) v += gout[0];
      return;
    }
    case Op::kMean: {
      if (!needs(0)) return;
      auto& g = grad_buf(grads, n.in[0]);
      const double w = gout[0] / static_cast<double>(g.size());
      for (double& v : g) v += w;
      return;
    }
    case Op::kLogsumexpLast: {
      if (!needs(0)) return;
      const Tensor& x = in_t(0);
      const int64_t r = x.dim(0), c = x.dim(1);
      const double* px = x.data().data();
      const double* po = n.out.data().data();
      auto& g = grad_buf(grads, n.in[0]);
      for (int64_t i = 0; i < r; ++i) {
        const double lse = po[i];
        for (int64_t j = 0; j < c; ++j) {
          g[static_cast<size_t>(i * c + j)] += gout[static_cast<size_t>(i)] * std::exp(px[i * c + j] - lse);
        }
      }
      return;
    }
  }
}

std::vector<Tensor> Tape::gradients(Var output, std::span<const Var> wrt) const {
  const Node& out_node = node(output);
  if (out_node.out.numel() != 1) {
    throw std::invalid_argument("gradients: seed output must be scalar, got " + out_node.out.shape_str());
  }
  std::vector<std::vector<double>> grads(nodes_.size());
  grads[static_cast<size_t>(output.id)] = {1.0};
  for (int32_t id = output.id; id >= 0; --id) {
    const auto& g = grads[static_cast<size_t>(id)];
    if (g.empty() || !nodes_[static_cast<size_t>(id)].requires_grad) continue;
    backward_node(id, g, grads);
  }
  std::vector<Tensor> result;
  result.reserve(wrt.size());
  for (Var v : wrt) {
    const Node& nd = node(v);
    auto& g = grads[static_cast<size_t>(v.id)];
    if (g.empty()) {
      result.push_back(Tensor::zeros(nd.out.shape()));
    } else {
      result.push_back(Tensor::from_data(nd.out.shape(), std::move(g)));
    }
  }
  return result;
}

bool Tape::replay_matches() const {
  for (const Node& n : nodes_) {
    if (n.op == Op::kInput || n.op == Op::kConstant) continue;
    if (!compute(n).same_bits(n.out)) return false;
  }
  return true;
}

}  // namespace trinity
