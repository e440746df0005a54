#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "dsmoe/moe.hpp"

namespace dsmoe {

// Describes how original experts were split into sub-experts. Neuron
// assignment is contiguous chunks in stored order: sub-expert p of expert e
// holds columns [p*chunk_cols, ...) of the (possibly permuted) expert. For
// reconstruction with factor 2, chunk_cols is the major block width
// ceil(d_ffn/2) and the minor block holds the remainder.
struct PartitionSpec {
  enum class Mode : int { complete = 0, partial = 1 };
  int factor = 0;
  Mode mode = Mode::partial;
  int num_experts = 0;  // original E
  int d_ffn = 0;        // original intermediate size
  int chunk_cols = 0;

  void validate() const {
    require(factor >= 2, Status::invalid_argument, "partition: factor must be >= 2");
    require(num_experts >= 1 && d_ffn >= 2, Status::invalid_argument, "partition: bad dimensions");
    require(chunk_cols >= 1 && chunk_cols <= d_ffn, Status::invalid_argument,
            "partition: bad chunk width");
  }
};

struct EquivalenceReport {
  double max_abs_diff = 0.0;
  double max_rel_diff = 0.0;  // scaled residual: max|a-b| / max(max|a|, max|b|)
  double tol = 0.0;
  bool pass = false;
};

namespace detail {

template <std::floating_point T>
Expert<T> slice_expert(const Expert<T>& src, int col_begin, int col_end, T w2_scale) {
  const int w = col_end - col_begin;
  Expert<T> out;
  out.w1 = Matrix<T>(src.w1.rows, w);
  out.w3 = Matrix<T>(src.w3.rows, w);
  out.w2 = Matrix<T>(w, src.w2.cols);
  for (int r = 0; r < src.w1.rows; ++r)
    for (int c = 0; c < w; ++c) {
      out.w1.at(r, c) = src.w1.at(r, col_begin + c);
      out.w3.at(r, c) = src.w3.at(r, col_begin + c);
    }
  for (int r = 0; r < w; ++r)
    for (int c = 0; c < src.w2.cols; ++c) out.w2.at(r, c) = src.w2.at(col_begin + r, c) * w2_scale;
  return out;
}

}  // namespace detail

// Complete transformation: repeat each gate column P times (copies of expert
// e occupy indices e*P .. e*P+P-1), slice every expert into P contiguous
// chunks, and scale each chunk's W2 by P. The result is a plain layer with
// E*P experts and Top-(K*P) routing; no replay logic is needed downstream.
template <std::floating_point T>
MoeLayer<T> complete_transform(const MoeLayer<T>& layer, int p) {
  layer.validate();
  require(layer.replay_factor == 1, Status::invalid_state,
          "complete_transform: layer already carries a partial transformation");
  require(p >= 2, Status::invalid_argument, "complete_transform: p must be >= 2");
  require(layer.config.d_ffn % p == 0, Status::invalid_argument,
          "complete_transform: d_ffn " + std::to_string(layer.config.d_ffn) +
              " not divisible by p " + std::to_string(p));

  const MoeConfig& c = layer.config;
  const int chunk = c.d_ffn / p;
  MoeLayer<T> out;
  out.config = c;
  out.config.num_experts = c.num_experts * p;
  out.config.top_k = c.top_k * p;
  out.config.d_ffn = chunk;
  out.lineage = Lineage::complete;
  out.gate = Matrix<T>(c.d_model, c.num_experts * p);
  for (int r = 0; r < c.d_model; ++r)
    for (int e = 0; e < c.num_experts; ++e)
      for (int q = 0; q < p; ++q) out.gate.at(r, e * p + q) = layer.gate.at(r, e);
  out.experts.reserve(static_cast<size_t>(c.num_experts) * p);
  for (int e = 0; e < c.num_experts; ++e)
    for (int q = 0; q < p; ++q)
      out.experts.push_back(detail::slice_expert(layer.experts[static_cast<size_t>(e)], q * chunk,
                                                 (q + 1) * chunk, static_cast<T>(p)));
  out.shared_experts = layer.shared_experts;
  out.validate();
  return out;
}

// Partial transformation: unscaled contiguous slices, original gating network
// retained. Routing against the returned layer must go through replay_routing.
template <std::floating_point T>
std::pair<MoeLayer<T>, PartitionSpec> partial_transform(const MoeLayer<T>& layer, int p) {
  layer.validate();
  require(layer.replay_factor == 1, Status::invalid_state,
          "partial_transform: layer already carries a partial transformation");
  require(p >= 2, Status::invalid_argument, "partial_transform: p must be >= 2");
  require(layer.config.d_ffn % p == 0, Status::invalid_argument,
          "partial_transform: d_ffn " + std::to_string(layer.config.d_ffn) +
              " not divisible by p " + std::to_string(p));

  const MoeConfig& c = layer.config;
  const int chunk = c.d_ffn / p;
  MoeLayer<T> out;
  out.config = c;
  out.gate = layer.gate;
  out.replay_factor = p;
  out.lineage = Lineage::partial;
  out.experts.reserve(static_cast<size_t>(c.num_experts) * p);
  for (int e = 0; e < c.num_experts; ++e)
    for (int q = 0; q < p; ++q)
      out.experts.push_back(detail::slice_expert(layer.experts[static_cast<size_t>(e)], q * chunk,
                                                 (q + 1) * chunk, T(1)));
  out.shared_experts = layer.shared_experts;
  out.validate();

  PartitionSpec spec;
  spec.factor = p;
  spec.mode = PartitionSpec::Mode::partial;
  spec.num_experts = c.num_experts;
  spec.d_ffn = c.d_ffn;
  spec.chunk_cols = chunk;
  return {std::move(out), spec};
}

// Concatenates sub-expert slices back into original-shaped experts. Bit-exact
// round trip for plain partial layers; for reconstructed layers the result is
// the neuron-permuted original (forward-equivalent, not bit-equal).
template <std::floating_point T>
MoeLayer<T> reverse_partial(const MoeLayer<T>& layer, const PartitionSpec& spec) {
  layer.validate();
  spec.validate();
  require(layer.replay_factor == spec.factor, Status::invalid_argument,
          "reverse_partial: spec factor " + std::to_string(spec.factor) +
              " does not match layer replay factor " + std::to_string(layer.replay_factor));
  require(layer.config.num_experts == spec.num_experts && layer.config.d_ffn == spec.d_ffn,
          Status::invalid_argument, "reverse_partial: spec does not describe this layer");

  const MoeConfig& c = layer.config;
  MoeLayer<T> out;
  out.config = c;
  out.gate = layer.gate;
  out.lineage = Lineage::base;
  out.shared_experts = layer.shared_experts;
  out.experts.resize(static_cast<size_t>(c.num_experts));
  for (int e = 0; e < c.num_experts; ++e) {
    Expert<T>& dst = out.experts[static_cast<size_t>(e)];
    dst.w1 = Matrix<T>(c.d_model, c.d_ffn);
    dst.w3 = Matrix<T>(c.d_model, c.d_ffn);
    dst.w2 = Matrix<T>(c.d_ffn, c.d_model);
    int col = 0;
    for (int q = 0; q < spec.factor; ++q) {
      const Expert<T>& blk = layer.experts[static_cast<size_t>(e) * spec.factor + q];
      for (int r = 0; r < c.d_model; ++r)
        for (int cc = 0; cc < blk.width(); ++cc) {
          dst.w1.at(r, col + cc) = blk.w1.at(r, cc);
          dst.w3.at(r, col + cc) = blk.w3.at(r, cc);
        }
      for (int rr = 0; rr < blk.width(); ++rr)
        for (int cc = 0; cc < c.d_model; ++cc) dst.w2.at(col + rr, cc) = blk.w2.at(rr, cc);
      col += blk.width();
    }
    require(col == c.d_ffn, Status::invalid_argument,
            "reverse_partial: block widths do not cover d_ffn");
  }
  out.validate();
  return out;
}

// Runs each layer's own canonical forward on the same tokens and reports the
// worst elementwise difference. max_rel_diff is the residual scaled by the
// larger of the two global output magnitudes, so near-zero elements do not
// blow up the ratio.
template <std::floating_point T>
EquivalenceReport verify_equivalence(const MoeLayer<T>& a, const MoeLayer<T>& b,
                                     const Matrix<T>& tokens, double tol) {
  require(a.config.d_model == b.config.d_model, Status::shape_mismatch,
          "verify_equivalence: d_model differs");
  Matrix<T> ya = full_forward(a, tokens);
  Matrix<T> yb = full_forward(b, tokens);
  EquivalenceReport rep;
  rep.tol = tol;
  double scale = 0.0;
  for (size_t i = 0; i < ya.data.size(); ++i) {
    const double da = static_cast<double>(ya.data[i]);
    const double db = static_cast<double>(yb.data[i]);
    rep.max_abs_diff = std::max(rep.max_abs_diff, std::abs(da - db));
    scale = std::max({scale, std::abs(da), std::abs(db)});
  }
  rep.max_rel_diff = scale > 0.0 ? rep.max_abs_diff / scale : rep.max_abs_diff;
  rep.pass = rep.max_rel_diff <= tol;
  return rep;
}

template <std::floating_point T>
MoeModel<T> transform_model(const MoeModel<T>& model, PartitionSpec::Mode mode, int p,
                            std::vector<PartitionSpec>* specs = nullptr) {
  model.validate();
  MoeModel<T> out;
  out.layers.reserve(model.layers.size());
  for (const auto& layer : model.layers) {
    if (mode == PartitionSpec::Mode::complete) {
      out.layers.push_back(complete_transform(layer, p));
    } else {
      auto [l, s] = partial_transform(layer, p);
      out.layers.push_back(std::move(l));
      if (specs) specs->push_back(s);
    }
  }
  return out;
}

}  // namespace dsmoe
