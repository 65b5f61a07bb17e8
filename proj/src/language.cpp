#include "mtl/language.h"

#include <algorithm>
#include <cctype>

#include "mtl/error.h"

namespace mtl {

PromptMode prompt_mode_from_name(const std::string& s) {
  if (s == "none") return PromptMode::none;
  if (s == "handcrafted") return PromptMode::handcrafted;
  if (s == "ensemble") return PromptMode::ensemble;
  if (s == "learned") return PromptMode::learned;
  if (s == "naive_fusion") return PromptMode::naive_fusion;
  throw ConfigError("unknown prompt mode: '" + s + "'");
}

const char* prompt_mode_name(PromptMode m) {
  switch (m) {
    case PromptMode::none: return "none";
    case PromptMode::handcrafted: return "handcrafted";
    case PromptMode::ensemble: return "ensemble";
    case PromptMode::learned: return "learned";
    case PromptMode::naive_fusion: return "naive_fusion";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// tokenizer: 32-character alphabet, overlapping bigrams, BOS/EOS sentinels

namespace {

constexpr int kAlphabet = 32;
constexpr int kBos = 1;
constexpr int kEos = 2;
constexpr int kFirstBigram = 3;

int char_index(char c) {
  c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (c >= 'a' && c <= 'z') return c - 'a';
  switch (c) {
    case ' ': return 26;
    case '-': return 27;
    case '.': return 28;
    case '\'': return 29;
    case '_': return 30;
    default: return 31;
  }
}

}  // namespace

int text_vocab_size() { return kFirstBigram + kAlphabet * kAlphabet; }
int bos_token() { return kBos; }
int eos_token() { return kEos; }

std::vector<int> tokenize(const std::string& text) {
  std::string s = text.empty() ? " " : text;
  if (s.size() == 1) s += ' ';
  std::vector<int> out;
  out.push_back(kBos);
  for (size_t i = 0; i + 1 < s.size(); ++i)
    out.push_back(kFirstBigram + char_index(s[i]) * kAlphabet + char_index(s[i + 1]));
  out.push_back(kEos);
  if (static_cast<int>(out.size()) > kMaxTextContext)
    throw PromptError("token sequence of length " + std::to_string(out.size()) +
                      " exceeds the max context of " + std::to_string(kMaxTextContext));
  return out;
}

// ---------------------------------------------------------------------------
// frozen encoder

void build_text_encoder(ParamStore& ps, const LanguageConfig& cfg) {
  Rng rng(mix_seed(cfg.encoder_seed, "text_encoder"));
  int64_t d = cfg.text_dim;
  init_normal(ps.add("text_encoder.tok_emb", {text_vocab_size(), d}), rng, 0.02);
  init_normal(ps.add("text_encoder.pos_emb", {kMaxTextContext, d}), rng, 0.02);
  for (int l = 0; l < cfg.text_layers; ++l)
    build_encoder_layer(ps, "text_encoder.layer" + std::to_string(l), d, 4 * d, rng);
  build_layer_norm(ps, "text_encoder.ln_f", d);
}

std::function<bool(const std::string&)> freeze_text_encoder(
    std::function<bool(const std::string&)> inner) {
  return [inner = std::move(inner)](const std::string& n) {
    if (n.rfind("text_encoder.", 0) == 0) return false;
    return inner(n);
  };
}

Var text_encode_embedded(Ctx& ctx, const LanguageConfig& cfg, Var emb) {
  const Tensor& ev = V(emb);
  check_model(ev.rank() == 2 && ev.dim(1) == cfg.text_dim, "text_encode: bad embedding shape");
  int64_t T = ev.dim(0);
  if (T > kMaxTextContext)
    throw PromptError("embedded sequence of length " + std::to_string(T) +
                      " exceeds the max context of " + std::to_string(kMaxTextContext));
  Var pos = slice_rows(ctx.p("text_encoder.pos_emb"), 0, T);
  Var x = add(emb, pos);
  for (int l = 0; l < cfg.text_layers; ++l)
    x = encoder_layer(ctx, "text_encoder.layer" + std::to_string(l), x, cfg.text_heads);
  return layer_norm(ctx, "text_encoder.ln_f", x);
}

Var text_encode(Ctx& ctx, const LanguageConfig& cfg, const std::vector<int>& tokens) {
  Var emb = gather_rows(ctx.p("text_encoder.tok_emb"), tokens);
  Var out = text_encode_embedded(ctx, cfg, emb);
  return slice_rows(out, static_cast<int64_t>(tokens.size()) - 1, 1);
}

// ---------------------------------------------------------------------------
// prompt feature generators

namespace {

std::string substitute_class(const std::string& tmpl, const std::string& name) {
  const std::string kPlaceholder = "[CLASS]";
  size_t pos = tmpl.find(kPlaceholder);
  if (pos == std::string::npos)
    throw PromptError("template '" + tmpl + "' is missing the [CLASS] placeholder");
  std::string out = tmpl;
  out.replace(pos, kPlaceholder.size(), name);
  return out;
}

}  // namespace

Var handcrafted_prompt_features(Ctx& ctx, const LanguageConfig& cfg, const std::string& tmpl,
                                const std::vector<std::string>& names) {
  Var rows{};
  for (size_t i = 0; i < names.size(); ++i) {
    Var r = text_encode(ctx, cfg, tokenize(substitute_class(tmpl, names[i])));
    rows = (i == 0) ? r : concat_rows(rows, r);
  }
  return l2_normalize_rows(rows);
}

Var ensemble_prompt_features(Ctx& ctx, const LanguageConfig& cfg,
                             const std::vector<std::string>& templates,
                             const std::vector<std::string>& names) {
  check_config(!templates.empty(), "ensemble_prompt_features: empty template list");
  Var acc{};
  for (size_t t = 0; t < templates.size(); ++t) {
    Var f = handcrafted_prompt_features(ctx, cfg, templates[t], names);
    acc = (t == 0) ? f : add(acc, f);
  }
  return l2_normalize_rows(scale(acc, 1.0 / static_cast<double>(templates.size())));
}

void build_prompt_context(ParamStore& ps, const LanguageConfig& cfg, const std::string& task,
                          Rng& rng) {
  init_normal(ps.add("lang.prompt." + task, {cfg.context_length, cfg.text_dim}), rng, 0.02);
}

Var task_prompt_features(Ctx& ctx, const LanguageConfig& cfg, const std::string& task,
                         const std::vector<std::string>& names) {
  Var vt = ctx.p("lang.prompt." + task);
  Var rows{};
  for (size_t i = 0; i < names.size(); ++i) {
    std::vector<int> toks = tokenize(names[i]);
    // [BOS] + v^t + name bigrams + [EOS], assembled at the embedding layer
    std::vector<int> name_part(toks.begin() + 1, toks.end());
    Var emb = concat_rows(gather_rows(ctx.p("text_encoder.tok_emb"), {bos_token()}), vt);
    emb = concat_rows(emb, gather_rows(ctx.p("text_encoder.tok_emb"), name_part));
    Var out = text_encode_embedded(ctx, cfg, emb);
    Var r = slice_rows(out, V(emb).dim(0) - 1, 1);
    rows = (i == 0) ? r : concat_rows(rows, r);
  }
  return l2_normalize_rows(rows);
}

// ---------------------------------------------------------------------------
// language-to-vision adaptation

void build_l2v(ParamStore& ps, const LanguageConfig& cfg, int64_t fpn_channels, Rng& rng) {
  build_linear(ps, "lang.proj", cfg.text_dim, fpn_channels, rng);
  for (int l = 0; l < cfg.l2v_layers; ++l)
    build_decoder_layer(ps, "lang.l2v.layer" + std::to_string(l), fpn_channels, 4 * fpn_channels,
                        rng);
}

Var l2v_adapt(Ctx& ctx, const LanguageConfig& cfg, Var text, Var z5) {
  Var kv = dense(ctx, "lang.proj", text);
  Var x = z5;
  for (int l = 0; l < cfg.l2v_layers; ++l)
    x = decoder_layer(ctx, "lang.l2v.layer" + std::to_string(l), x, kv, cfg.l2v_heads);
  return x;
}

void build_naive_fusion(ParamStore& ps, int64_t fpn_channels, int64_t num_text_rows, Rng& rng) {
  build_linear(ps, "lang.fusion", fpn_channels + num_text_rows, fpn_channels, rng);
}

Var naive_activation_maps(Var text, Var z5) {
  const Tensor &tv = V(text), &zv = V(z5);
  check_model(tv.dim(1) == zv.dim(1),
              "naive fusion requires text_dim == fpn channels (got " +
                  std::to_string(tv.dim(1)) + " vs " + std::to_string(zv.dim(1)) + ")");
  return matmul(l2_normalize_rows(z5), transpose(text));
}

Var naive_prompt_fusion(Ctx& ctx, Var text, Var z5) {
  Var maps = naive_activation_maps(text, z5);
  return dense(ctx, "lang.fusion", concat_cols(z5, maps));
}

}  // namespace mtl
