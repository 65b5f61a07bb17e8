#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mtl/nn.h"

namespace mtl {

enum class PromptMode { none, handcrafted, ensemble, learned, naive_fusion };
PromptMode prompt_mode_from_name(const std::string& s);
const char* prompt_mode_name(PromptMode m);

struct LanguageConfig {
  bool enabled = false;
  PromptMode prompt_mode = PromptMode::learned;
  std::vector<std::string> templates{"a photo of a [CLASS]."};
  int context_length = 16;  // prompt length L
  int64_t text_dim = 32;
  int text_layers = 2;
  int text_heads = 4;
  int l2v_layers = 3;
  int l2v_heads = 4;
  uint64_t encoder_seed = 1234;
  std::string encoder_checkpoint;  // optional externally supplied weights
};

constexpr int kMaxTextContext = 77;

// Character-bigram tokenizer over a fixed 32-character alphabet, with
// BOS/EOS sentinels. Deterministic function of the string.
std::vector<int> tokenize(const std::string& text);
int text_vocab_size();
int bos_token();
int eos_token();

// Frozen toy text encoder: token+position embeddings, pre-norm transformer
// layers, final layer norm, final-token pooling. Weights are seeded from
// cfg.encoder_seed and are never trainable.
void build_text_encoder(ParamStore& ps, const LanguageConfig& cfg);

// Wraps a trainability predicate so text_encoder.* never receives gradients.
std::function<bool(const std::string&)> freeze_text_encoder(
    std::function<bool(const std::string&)> inner);

// Final-token representation of a token sequence, shape (1, D).
Var text_encode(Ctx& ctx, const LanguageConfig& cfg, const std::vector<int>& tokens);

// Encoder over pre-built content embeddings (T, D); position embeddings are
// added inside. Returns all T output rows.
Var text_encode_embedded(Ctx& ctx, const LanguageConfig& cfg, Var emb);

// Prompt feature generators; every result has unit-L2 rows, one per class,
// in vocabulary order.
Var handcrafted_prompt_features(Ctx& ctx, const LanguageConfig& cfg, const std::string& tmpl,
                                const std::vector<std::string>& names);
Var ensemble_prompt_features(Ctx& ctx, const LanguageConfig& cfg,
                             const std::vector<std::string>& templates,
                             const std::vector<std::string>& names);

// Learnable per-task contexts v^t, prepended at the embedding layer.
void build_prompt_context(ParamStore& ps, const LanguageConfig& cfg, const std::string& task,
                          Rng& rng);
Var task_prompt_features(Ctx& ctx, const LanguageConfig& cfg, const std::string& task,
                         const std::vector<std::string>& names);

// Language-to-vision adapter: z5 tokens cross-attend to projected text rows
// through l2v_layers pre-norm decoder layers. Output shape equals z5.
void build_l2v(ParamStore& ps, const LanguageConfig& cfg, int64_t fpn_channels, Rng& rng);
Var l2v_adapt(Ctx& ctx, const LanguageConfig& cfg, Var text, Var z5);

// Naive fusion ablation: cosine activation maps concatenated to z5, then a
// 1x1 convolution back to C channels. Requires text_dim == fpn channels.
void build_naive_fusion(ParamStore& ps, int64_t fpn_channels, int64_t num_text_rows, Rng& rng);
Var naive_prompt_fusion(Ctx& ctx, Var text, Var z5);
// The activation maps alone (T5, N), exposed for the loop oracle.
Var naive_activation_maps(Var text, Var z5);

}  // namespace mtl
