#pragma once

#include "sdvlm/ops.hpp"
#include "sdvlm/tensor.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace sdvlm {

struct Checkpoint;

struct VisionConfig {
  int image_size = 32;   // square input, pixels
  int patch_size = 8;
  int n_vision_layers = 2;
  int d_vision = 32;
};

struct VLMConfig {
  int d_model = 64;
  int n_decoder_layers = 4;
  int n_heads = 4;
  int vocab_size = 0;  // set from the tokenizer
  int max_seq_len = 256;
  VisionConfig vision;
  int skip_source_layer = 0;  // vision layer whose hidden state becomes u
  uint64_t seed = 0;

  void validate() const;  // throws std::invalid_argument on broken invariants
  int n_patches() const {
    int s = vision.image_size / vision.patch_size;
    return s * s;
  }
  int patch_dim() const { return 3 * vision.patch_size * vision.patch_size; }
};

enum class Seg : unsigned char { prompt, image, question, answer };

struct TokenSequence {
  std::vector<int> ids;
  std::vector<Seg> segs;

  size_t size() const { return ids.size(); }
  void append(int id, Seg s) {
    ids.push_back(id);
    segs.push_back(s);
  }
  // throws unless ids are within vocab and image positions form one
  // contiguous run
  void validate(int vocab_size) const;
  // (start, len) of the image span; len 0 when there is none
  std::pair<int, int> image_span() const;
};

struct LayerStates {
  std::vector<Tensor> per_layer_hidden;  // block outputs, interventions included
  Tensor logits;                         // [seq_len × vocab]
  Tensor vision_features_u;              // [n_patches × d_vision] at skip_source_layer
  Tensor u_pooled;                       // [1 × d_vision], mean over patches
};

// Adapters hook into the forward pass without the model knowing their math:
// an output hook adds its returned delta to the block output at `layer`; a
// wo hook contributes a weight delta to that block's attention output
// projection.
struct OutputHook {
  int layer;
  std::function<Tensor(Tape&, const Tensor& h, const Tensor& u_pooled)> delta;
};
struct WoHook {
  int layer;
  std::function<Tensor(Tape&)> delta_w;  // [d_model × d_model]
};
struct Interventions {
  std::vector<OutputHook> out;
  std::vector<WoHook> wo;
  bool empty() const { return out.empty() && wo.empty(); }
};

// Decoder-only transformer with a patch vision encoder. Post-LN blocks and no
// final norm, so per_layer_hidden.back() is exactly what the output head sees.
class VLM {
 public:
  explicit VLM(VLMConfig cfg);

  VLMConfig cfg;

  struct Block {
    Param wq, bq, wk, bk, wv, bv, wo, bo;
    Param ln1_g, ln1_b, ln2_g, ln2_b;
    Param fc1, fc1_b, fc2, fc2_b;
  };

  Param tok_emb;   // [vocab × d_model]
  Param pos_emb;   // [max_seq_len × d_model]
  std::vector<Block> blocks;
  Param w_out, b_out;  // output head

  Param patch_w, patch_b;  // [patch_dim × d_vision]
  Param vis_pos;           // [n_patches × d_vision]
  std::vector<Block> vis_blocks;
  Param vis_proj_w, vis_proj_b;  // [d_vision × d_model]

  std::vector<Param*> params();  // stable listing order, used by checkpoints
  void set_trainable(bool on);
  size_t param_count() const;

  struct VisionOut {
    Tensor patch_tokens;  // [n_patches × d_model]
    Tensor features;      // [n_patches × d_vision] at skip_source_layer
    Tensor u_pooled;      // [1 × d_vision]
  };
  VisionOut encode_image(Tape& t, const std::vector<double>& image);

  LayerStates forward(Tape& t, const TokenSequence& seq, const std::vector<double>& image,
                      const Interventions* iv = nullptr);

  // Resume from a cached block output (values of per_layer_hidden[start_layer-1]).
  // Replays blocks start_layer..L-1 plus the head; bitwise equal to the tail
  // of a full forward on the same inputs.
  LayerStates forward_from(Tape& t, const std::vector<double>& h_prev, int seq_len,
                           int start_layer, const std::vector<double>& u_pooled,
                           const Interventions* iv = nullptr);

  TokenSequence greedy_decode(const TokenSequence& seq, const std::vector<double>& image,
                              int max_new_tokens, int eos_id,
                              const Interventions* iv = nullptr);

  Checkpoint to_checkpoint(const std::string& meta) const;
  static VLM from_checkpoint(const Checkpoint& ck, const VLMConfig& cfg);

 private:
  Tensor block_forward(Tape& t, Block& b, const Tensor& x, bool causal,
                       const Tensor* wo_delta);
  void check_interventions(const Interventions* iv) const;
};

// max of softmax(logits): the decoding confidence used to rank prompts
double top_token_confidence(const std::vector<double>& logits_row);

}  // namespace sdvlm
