#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sdvlm/model.hpp"
#include "sdvlm/rng.hpp"

namespace sdvlm {

struct Checkpoint;

// Deltas land only on the first and last `pos` sequence positions; once
// 2*pos >= seq_len every position is intervened.
struct PositionMask {
  int pos = 0;
  bool covers(int i, int seq_len) const { return i < pos || i >= seq_len - pos; }
  bool saturated(int seq_len) const { return 2 * pos >= seq_len; }
};

// Low-rank representation edit: delta = B_up(A_down h) per position. B_up
// starts at zero so a fresh adapter is an exact no-op.
struct ReftAdapter {
  int layer_index = 0;
  int rank = 0;
  Param A_down;  // [r × k], Gaussian std 1/sqrt(k)
  Param B_up;    // [k × r], zero

  ReftAdapter() = default;
  ReftAdapter(int layer, int r, int k, Rng& rng, const std::string& prefix);
  Tensor delta(Tape& T, const Tensor& h);  // [seq × k]
};

// Cross-modal skip: delta = R^T (W h + b + A_u u), u broadcast over
// positions. W, b, A_u start at zero; R starts with orthonormal rows.
struct SkipAdapter {
  int layer_index = 0;
  int rank = 0;
  Param W;    // [r × k]
  Param b;    // [r]
  Param A_u;  // [r × u_dim]
  Param R;    // [r × k], orthonormal rows at init

  SkipAdapter() = default;
  SkipAdapter(int layer, int r, int k, int u_dim, Rng& rng, const std::string& prefix);
  Tensor delta(Tape& T, const Tensor& h, const Tensor& u_row);  // [seq × k]
};

// Same factor shapes as ReFT but applied as a weight delta on the block's
// attention output projection instead of a representation edit.
struct LoraAdapter {
  int layer_index = 0;
  int rank = 0;
  Param A_down;  // [r × k]
  Param B_up;    // [k × r]

  LoraAdapter() = default;
  LoraAdapter(int layer, int r, int k, Rng& rng, const std::string& prefix);
  Tensor weight_delta(Tape& T);  // [k × k] = A_down^T B_up^T
};

// The last three decoder layers (all of them when the model is shallower).
std::vector<int> adapted_layers(const VLMConfig& cfg);

// Zeroes the delta rows the mask does not cover; pass-through when every
// position is covered.
Tensor mask_rows(Tape& t, const Tensor& delta, const PositionMask& m);

// One ReFT + skip pair per adapted layer, trained jointly for one prompt.
struct AdapterSet {
  int prompt_id = 0;
  PositionMask mask;
  std::vector<ReftAdapter> reft;
  std::vector<SkipAdapter> skip;

  AdapterSet() = default;
  // with_skip=false drops the cross-modal skip member (the ablation's
  // intervention-only arm); everything else behaves identically.
  AdapterSet(const VLMConfig& cfg, int prompt_id, int r, int pos, uint64_t seed,
             bool with_skip = true);

  std::vector<Param*> params();
  size_t param_count() const;
  // Output hooks carrying the position mask; the set must outlive them.
  Interventions hooks();
  void add_to(Checkpoint& ck) const;
  void load_from(const Checkpoint& ck);  // shapes must match this set
};

// LoRA on the same layers, the ablation baseline.
struct LoraSet {
  std::vector<LoraAdapter> loras;

  LoraSet() = default;
  LoraSet(const VLMConfig& cfg, int r, uint64_t seed);

  std::vector<Param*> params();
  size_t param_count() const;
  Interventions hooks();
  void add_to(Checkpoint& ck) const;
  void load_from(const Checkpoint& ck);
};

}  // namespace sdvlm
