#pragma once

#include <cmath>
#include <concepts>
#include <cstdint>
#include <string>
#include <vector>

#include "dsmoe/matrix.hpp"

namespace dsmoe {

// Gate-level architecture description. After a partial transformation or a
// reconstruction the config keeps describing the gating network (E columns,
// Top-K, original d_ffn); the physical expert blocks are tracked separately
// through MoeLayer::replay_factor.
struct MoeConfig {
  int d_model = 0;
  int d_ffn = 0;
  int num_experts = 0;
  int top_k = 0;
  int num_shared_experts = 0;
  bool gate_prenormalized = false;

  void validate() const {
    require(d_model >= 1, Status::invalid_argument, "config: d_model must be >= 1");
    require(d_ffn >= 2, Status::invalid_argument, "config: d_ffn must be >= 2");
    require(num_experts >= 1, Status::invalid_argument, "config: num_experts must be >= 1");
    require(top_k >= 1 && top_k <= num_experts, Status::invalid_argument,
            "config: top_k must satisfy 1 <= K <= E");
    require(num_shared_experts >= 0, Status::invalid_argument,
            "config: num_shared_experts must be >= 0");
  }

  bool operator==(const MoeConfig&) const = default;
};

template <std::floating_point T>
struct Expert {
  Matrix<T> w1;  // d_model x width (gate proj)
  Matrix<T> w3;  // d_model x width (up proj)
  Matrix<T> w2;  // width x d_model (down proj)

  int width() const { return w1.cols; }
};

enum class Lineage : int { base = 0, complete = 1, partial = 2, reconstructed = 3 };

inline const char* lineage_name(Lineage l) {
  switch (l) {
    case Lineage::base: return "base";
    case Lineage::complete: return "complete";
    case Lineage::partial: return "partial";
    case Lineage::reconstructed: return "reconstructed";
  }
  return "unknown";
}

inline Lineage lineage_from_name(const std::string& s) {
  if (s == "base") return Lineage::base;
  if (s == "complete") return Lineage::complete;
  if (s == "partial") return Lineage::partial;
  if (s == "reconstructed") return Lineage::reconstructed;
  fail(Status::schema_error, "unknown lineage tag: " + s);
}

// One MoE layer. `experts` holds the physical blocks: config.num_experts
// blocks of width config.d_ffn when replay_factor == 1, or
// config.num_experts * replay_factor narrower blocks after a partial
// transformation / reconstruction (block e*P+p is slice p of original
// expert e, block widths summing to d_ffn per expert).
template <std::floating_point T>
struct MoeLayer {
  MoeConfig config;
  Matrix<T> gate;  // d_model x config.num_experts
  std::vector<Expert<T>> experts;
  std::vector<Expert<T>> shared_experts;
  int replay_factor = 1;
  Lineage lineage = Lineage::base;
  // Per original expert: neuron permutation applied before slicing
  // (reconstruction only); empty means natural order.
  std::vector<std::vector<int>> neuron_order;

  int num_physical_experts() const { return config.num_experts * replay_factor; }

  void validate() const {
    config.validate();
    require(replay_factor >= 1, Status::invalid_state, "layer: replay_factor must be >= 1");
    require(gate.rows == config.d_model && gate.cols == config.num_experts,
            Status::shape_mismatch, "layer: gate shape " + gate.shape_str() + " expected " +
                                        Matrix<T>::shape_str(config.d_model, config.num_experts));
    require(static_cast<int>(experts.size()) == num_physical_experts(), Status::invalid_state,
            "layer: expected " + std::to_string(num_physical_experts()) + " expert blocks, have " +
                std::to_string(experts.size()));
    for (int e = 0; e < config.num_experts; ++e) {
      int total = 0;
      for (int p = 0; p < replay_factor; ++p) {
        const Expert<T>& blk = experts[static_cast<size_t>(e) * replay_factor + p];
        require(blk.w1.rows == config.d_model && blk.w3.rows == config.d_model &&
                    blk.w1.cols == blk.w3.cols && blk.w2.rows == blk.w1.cols &&
                    blk.w2.cols == config.d_model,
                Status::shape_mismatch,
                "layer: inconsistent block shapes for expert " + std::to_string(e));
        total += blk.width();
      }
      require(total == config.d_ffn, Status::invalid_state,
              "layer: block widths of expert " + std::to_string(e) + " sum to " +
                  std::to_string(total) + ", expected " + std::to_string(config.d_ffn));
    }
    for (const Expert<T>& s : shared_experts)
      require(s.w1.rows == config.d_model && s.w1.cols == s.w3.cols && s.w3.rows == config.d_model &&
                  s.w2.rows == s.w1.cols && s.w2.cols == config.d_model,
              Status::shape_mismatch, "layer: inconsistent shared expert shapes");
    require(static_cast<int>(shared_experts.size()) == config.num_shared_experts,
            Status::invalid_state, "layer: shared expert count mismatch");
    if (!neuron_order.empty())
      require(static_cast<int>(neuron_order.size()) == config.num_experts, Status::invalid_state,
              "layer: neuron_order must cover every original expert");
  }
};

template <std::floating_point T>
struct MoeModel {
  std::vector<MoeLayer<T>> layers;

  int num_layers() const { return static_cast<int>(layers.size()); }
  const MoeConfig& config() const {
    require(!layers.empty(), Status::invalid_state, "model has no layers");
    return layers[0].config;
  }
  void validate() const {
    require(!layers.empty(), Status::invalid_state, "model has no layers");
    for (const auto& l : layers) l.validate();
  }
};

// Routing state for one token batch. Scores are kept in double regardless of
// layer precision (float scores convert exactly). `k` is the current number
// of selections per token: base_k right after topk_route, base_k * P after a
// replay with factor P. Position p*base_k + s holds copy p of the token's
// s-th original selection.
struct RoutingDecision {
  int num_tokens = 0;
  int k = 0;
  int base_k = 0;
  int replay_factor = 1;
  std::vector<int> indices;        // num_tokens * k physical expert ids
  std::vector<double> raw;         // raw gating score per selection
  std::vector<double> normalized;  // empty until normalization is applied
  std::vector<double> fraction;    // compute fraction per selection in {0, 0.5, 1}

  bool has_normalized() const { return !normalized.empty(); }
  size_t flat(int t, int j) const { return static_cast<size_t>(t) * k + j; }

  void validate() const {
    require(num_tokens >= 0 && k >= 1 && base_k >= 1 && replay_factor >= 1 &&
                k == base_k * replay_factor,
            Status::invalid_state, "routing: inconsistent selection counts");
    const size_t n = static_cast<size_t>(num_tokens) * k;
    require(indices.size() == n && raw.size() == n && fraction.size() == n &&
                (normalized.empty() || normalized.size() == n),
            Status::invalid_state, "routing: field lengths disagree");
    for (double f : fraction)
      require(f == 0.0 || f == 0.5 || f == 1.0, Status::invalid_state,
              "routing: compute fractions must be 0, 0.5, or 1");
  }
};

template <std::floating_point T>
Matrix<T> gate_scores(const MoeLayer<T>& layer, const Matrix<T>& x) {
  require(x.cols == layer.config.d_model, Status::shape_mismatch,
          "gate_scores: token width " + std::to_string(x.cols) + " does not match d_model " +
              std::to_string(layer.config.d_model));
  Matrix<T> s = matmul(x, layer.gate);
  for (int t = 0; t < s.rows; ++t) softmax_inplace(s.row(t));
  return s;
}

// Top-k selection per row, ties broken toward the lower expert index.
template <std::floating_point T>
RoutingDecision topk_route(const Matrix<T>& scores, int k) {
  require(k >= 1 && k <= scores.cols, Status::invalid_argument,
          "topk_route: k=" + std::to_string(k) + " out of range for E=" + std::to_string(scores.cols));
  RoutingDecision r;
  r.num_tokens = scores.rows;
  r.k = r.base_k = k;
  r.replay_factor = 1;
  const size_t n = static_cast<size_t>(scores.rows) * k;
  r.indices.reserve(n);
  r.raw.reserve(n);
  r.fraction.assign(n, 1.0);
  std::vector<char> taken(static_cast<size_t>(scores.cols));
  for (int t = 0; t < scores.rows; ++t) {
    std::fill(taken.begin(), taken.end(), 0);
    auto row = scores.row(t);
    for (int j = 0; j < k; ++j) {
      int best = -1;
      for (int e = 0; e < scores.cols; ++e)
        if (!taken[static_cast<size_t>(e)] && (best < 0 || row[e] > row[best])) best = e;
      taken[static_cast<size_t>(best)] = 1;
      r.indices.push_back(best);
      r.raw.push_back(static_cast<double>(row[best]));
    }
  }
  return r;
}

namespace detail {

// out_row += weight * block(x_row), evaluating only the first active_cols
// neurons of the block.
template <std::floating_point T>
void accumulate_block(const T* x_row, const Expert<T>& blk, int d_model, T weight, int active_cols,
                      std::vector<T>& scratch, T* out_row) {
  const int w = blk.width();
  if (active_cols < 0 || active_cols > w) active_cols = w;
  if (static_cast<int>(scratch.size()) < active_cols) scratch.resize(static_cast<size_t>(active_cols));
  for (int n = 0; n < active_cols; ++n) {
    T g = T(0), u = T(0);
    for (int kk = 0; kk < d_model; ++kk) {
      g += x_row[kk] * blk.w1.at(kk, n);
      u += x_row[kk] * blk.w3.at(kk, n);
    }
    scratch[static_cast<size_t>(n)] = swish(g) * u;
  }
  for (int n = 0; n < active_cols; ++n) {
    const T hn = scratch[static_cast<size_t>(n)] * weight;
    const T* w2row = blk.w2.data.data() + static_cast<size_t>(n) * blk.w2.cols;
    for (int j = 0; j < d_model; ++j) out_row[j] += hn * w2row[j];
  }
}

}  // namespace detail

// Weighted sum of selected expert outputs plus unweighted shared experts.
// Weights are the RAW gating scores; compute fraction 0.5 evaluates only the
// first ceil(width/2) neurons of the block.
template <std::floating_point T>
Matrix<T> moe_forward(const MoeLayer<T>& layer, const Matrix<T>& x, const RoutingDecision& routing) {
  routing.validate();
  require(routing.num_tokens == x.rows, Status::invalid_argument,
          "moe_forward: routing covers " + std::to_string(routing.num_tokens) + " tokens, batch has " +
              std::to_string(x.rows));
  require(x.cols == layer.config.d_model, Status::shape_mismatch,
          "moe_forward: token width does not match d_model");
  require(routing.replay_factor == layer.replay_factor, Status::invalid_state,
          "moe_forward: routing replay factor " + std::to_string(routing.replay_factor) +
              " does not match layer " + std::to_string(layer.replay_factor));
  const int num_phys = layer.num_physical_experts();

  Matrix<T> out(x.rows, x.cols);
  std::vector<T> scratch;
  for (int t = 0; t < x.rows; ++t) {
    const T* xr = x.data.data() + static_cast<size_t>(t) * x.cols;
    T* orow = out.data.data() + static_cast<size_t>(t) * out.cols;
    for (int j = 0; j < routing.k; ++j) {
      const size_t f = routing.flat(t, j);
      const double frac = routing.fraction[f];
      if (frac == 0.0) continue;
      const int e = routing.indices[f];
      require(e >= 0 && e < num_phys, Status::invalid_state,
              "moe_forward: expert index " + std::to_string(e) + " out of range");
      const Expert<T>& blk = layer.experts[static_cast<size_t>(e)];
      const int active = frac == 0.5 ? (blk.width() + 1) / 2 : blk.width();
      detail::accumulate_block(xr, blk, x.cols, static_cast<T>(routing.raw[f]), active, scratch, orow);
    }
    for (const Expert<T>& s : layer.shared_experts)
      detail::accumulate_block(xr, s, x.cols, T(1), s.width(), scratch, orow);
  }
  return out;
}

// Replays a Top-K routing onto split expert blocks: selection of original
// expert i expands to the P sub-expert copies {i*P .. i*P+P-1}, laid out as
// all "+0" copies for the K selections, then all "+1" copies, and so on. Raw
// scores, normalized scores, and fractions are repeated with their selection.
inline RoutingDecision replay_routing(const RoutingDecision& routing, int k, int p) {
  routing.validate();
  require(routing.replay_factor == 1, Status::invalid_state,
          "replay_routing: routing was already replayed");
  require(routing.k == k, Status::invalid_argument,
          "replay_routing: k=" + std::to_string(k) + " does not match routing k=" +
              std::to_string(routing.k));
  require(p >= 1, Status::invalid_argument, "replay_routing: p must be >= 1");
  if (p == 1) return routing;
  RoutingDecision out;
  out.num_tokens = routing.num_tokens;
  out.base_k = k;
  out.replay_factor = p;
  out.k = k * p;
  const size_t n = static_cast<size_t>(out.num_tokens) * out.k;
  out.indices.resize(n);
  out.raw.resize(n);
  out.fraction.resize(n);
  if (routing.has_normalized()) out.normalized.resize(n);
  for (int t = 0; t < routing.num_tokens; ++t) {
    for (int cp = 0; cp < p; ++cp) {
      for (int s = 0; s < k; ++s) {
        const size_t src = routing.flat(t, s);
        const size_t dst = out.flat(t, cp * k + s);
        out.indices[dst] = routing.indices[src] * p + cp;
        out.raw[dst] = routing.raw[src];
        out.fraction[dst] = routing.fraction[src];
        if (routing.has_normalized()) out.normalized[dst] = routing.normalized[src];
      }
    }
  }
  return out;
}

// Routing as produced by the layer's own gating network, with no drops.
template <std::floating_point T>
RoutingDecision route_tokens(const MoeLayer<T>& layer, const Matrix<T>& x) {
  RoutingDecision r = topk_route(gate_scores(layer, x), layer.config.top_k);
  if (layer.replay_factor > 1) r = replay_routing(r, layer.config.top_k, layer.replay_factor);
  return r;
}

// Canonical no-drop forward: gate -> top-K -> (replay if split) -> weighted sum.
template <std::floating_point T>
Matrix<T> full_forward(const MoeLayer<T>& layer, const Matrix<T>& x) {
  return moe_forward(layer, x, route_tokens(layer, x));
}

// Residual stack: x_{l+1} = x_l + moe_l(x_l). Attention is out of scope;
// the residual keeps activations in range across layers.
template <std::floating_point T>
Matrix<T> model_forward(const MoeModel<T>& model, const Matrix<T>& x) {
  Matrix<T> cur = x;
  for (const auto& layer : model.layers) {
    Matrix<T> y = full_forward(layer, cur);
    for (size_t i = 0; i < cur.data.size(); ++i) cur.data[i] += y.data[i];
  }
  return cur;
}

}  // namespace dsmoe
