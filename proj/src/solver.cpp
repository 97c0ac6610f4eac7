#include "vistok/solver.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace vistok {

SolverConfig SolverConfig::toy() {
    SolverConfig c;
    c.embed_dim = 64;
    c.n_heads = 4;
    c.n_encoder_blocks = 2;
    c.n_decoder_blocks = 2;
    c.ffn_mult = 2;
    c.vocab.n_coord_bins = 64;
    return c;
}

void SolverConfig::validate() const {
    if (embed_dim == 0 || n_heads == 0 || embed_dim % n_heads != 0) {
        throw ContractError("embed_dim " + std::to_string(embed_dim) + " not divisible by " +
                            std::to_string(n_heads) + " heads");
    }
    if (patch_size == 0 || in_channels == 0 || ffn_mult == 0) throw ContractError("solver stem sizes must be positive");
    if (max_seq_len < 2 || max_memory_len == 0 || depth_tokens == 0) {
        throw ContractError("solver sequence limits must be positive");
    }
    vocab.validate();
}

void to_json(nlohmann::json& j, const SolverConfig& c) {
    j = {{"embed_dim", c.embed_dim},       {"n_heads", c.n_heads},
         {"n_encoder_blocks", c.n_encoder_blocks}, {"n_decoder_blocks", c.n_decoder_blocks},
         {"ffn_mult", c.ffn_mult},         {"patch_size", c.patch_size},
         {"in_channels", c.in_channels},   {"max_memory_len", c.max_memory_len},
         {"max_seq_len", c.max_seq_len},   {"depth_tokens", c.depth_tokens},
         {"vocab", c.vocab}};
}

void from_json(const nlohmann::json& j, SolverConfig& c) {
    SolverConfig d;
    c.embed_dim = j.value("embed_dim", d.embed_dim);
    c.n_heads = j.value("n_heads", d.n_heads);
    c.n_encoder_blocks = j.value("n_encoder_blocks", d.n_encoder_blocks);
    c.n_decoder_blocks = j.value("n_decoder_blocks", d.n_decoder_blocks);
    c.ffn_mult = j.value("ffn_mult", d.ffn_mult);
    c.patch_size = j.value("patch_size", d.patch_size);
    c.in_channels = j.value("in_channels", d.in_channels);
    c.max_memory_len = j.value("max_memory_len", d.max_memory_len);
    c.max_seq_len = j.value("max_seq_len", d.max_seq_len);
    c.depth_tokens = j.value("depth_tokens", d.depth_tokens);
    c.vocab = j.contains("vocab") ? j.at("vocab").get<Vocabulary>() : d.vocab;
    c.validate();
}

void DecodeOptions::validate() const {
    if (!(temperature > 0)) throw ContractError("temperature must be positive");
}

void LossConfig::validate() const {
    if (depth_weight < 0 || instance_weight < 0 || aux_weight < 0) throw ContractError("loss weights must be >= 0");
}

void to_json(nlohmann::json& j, const DecodeOptions& o) {
    j = {{"mode", o.mode == DecodeMode::hard ? "hard" : "soft"},
         {"soft_detokenize", o.soft_detokenize},
         {"temperature", o.temperature},
         {"max_instances", o.max_instances},
         {"parallel", o.parallel}};
}

void to_json(nlohmann::json& j, const LossConfig& c) {
    j = {{"depth_weight", c.depth_weight}, {"instance_weight", c.instance_weight}, {"aux_weight", c.aux_weight}};
}

void from_json(const nlohmann::json& j, LossConfig& c) {
    LossConfig d;
    c.depth_weight = j.value("depth_weight", d.depth_weight);
    c.instance_weight = j.value("instance_weight", d.instance_weight);
    c.aux_weight = j.value("aux_weight", d.aux_weight);
    c.validate();
}

namespace nn {

template <class T>
MultiHeadAttention<T>::MultiHeadAttention(std::size_t dim, std::size_t h, Rng& rng)
    : q(dim, dim, rng), k(dim, dim, rng), v(dim, dim, rng), o(dim, dim, rng), heads(h) {}

template <class T>
Var<T> MultiHeadAttention<T>::operator()(const Var<T>& x, const Var<T>& context, bool causal) const {
    return o(ops::attention(q(x), k(context), v(context), heads, causal));
}

template <class T>
void MultiHeadAttention<T>::collect(const std::string& prefix, ParamList<T>& out) const {
    q.collect(prefix + ".q", out);
    k.collect(prefix + ".k", out);
    v.collect(prefix + ".v", out);
    o.collect(prefix + ".o", out);
}

template <class T>
TransformerBlock<T>::TransformerBlock(std::size_t dim, std::size_t heads, std::size_t ffn_mult, bool cross, Rng& rng)
    : ln1(dim), ln2(dim), ln3(dim), self_attn(dim, heads, rng), ff1(dim, dim * ffn_mult, rng),
      ff2(dim * ffn_mult, dim, rng), has_cross(cross) {
    if (cross) cross_attn = MultiHeadAttention<T>(dim, heads, rng);
}

template <class T>
Var<T> TransformerBlock<T>::operator()(const Var<T>& x0, const Var<T>* memory, bool causal) const {
    auto h = ln1(x0);
    auto x = ops::add(x0, self_attn(h, h, causal));
    if (has_cross) {
        if (!memory) throw ContractError("decoder block needs encoder memory");
        x = ops::add(x, cross_attn(ln2(x), *memory, false));
    }
    return ops::add(x, ff2(ops::relu(ff1(ln3(x)))));
}

template <class T>
void TransformerBlock<T>::collect(const std::string& prefix, ParamList<T>& out) const {
    ln1.collect(prefix + ".ln1", out);
    self_attn.collect(prefix + ".self", out);
    if (has_cross) {
        ln2.collect(prefix + ".ln2", out);
        cross_attn.collect(prefix + ".cross", out);
    }
    ln3.collect(prefix + ".ln3", out);
    ff1.collect(prefix + ".ff1", out);
    ff2.collect(prefix + ".ff2", out);
}

template class MultiHeadAttention<float>;
template class MultiHeadAttention<double>;
template class TransformerBlock<float>;
template class TransformerBlock<double>;

}  // namespace nn

namespace {

std::vector<std::size_t> first_rows(std::size_t n) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    return idx;
}

}  // namespace

template <class T>
SolverModel<T>::SolverModel(const SolverConfig& cfg, Rng& rng) : config(cfg) {
    config.validate();
    const std::size_t E = config.embed_dim, V = static_cast<std::size_t>(config.vocab.total());
    stem = nn::Conv2d<T>(config.in_channels, E, config.patch_size, config.patch_size, 0, rng);
    memory_pos = Var<T>::leaf(normal_tensor<T>({config.max_memory_len, E}, T(0.02), rng));
    for (std::size_t i = 0; i < config.n_encoder_blocks; ++i)
        encoder.emplace_back(E, config.n_heads, config.ffn_mult, false, rng);
    encoder_norm = nn::LayerNorm<T>(E);
    token_embed = nn::Embedding<T>(V, E, rng);
    decoder_pos = Var<T>::leaf(normal_tensor<T>({config.max_seq_len, E}, T(0.02), rng));
    for (std::size_t i = 0; i < config.n_decoder_blocks; ++i)
        decoder.emplace_back(E, config.n_heads, config.ffn_mult, true, rng);
    decoder_norm = nn::LayerNorm<T>(E);
    head = nn::Linear<T>(E, V, rng);
    parallel_queries = Var<T>::leaf(normal_tensor<T>({config.depth_tokens, E}, T(0.02), rng));
}

template <class T>
Var<T> SolverModel<T>::encode_image(const Var<T>& images) const {
    const auto& s = images.shape();
    const std::size_t p = config.patch_size;
    if (s.size() != 4 || s[1] != config.in_channels) {
        throw ShapeError("solver images must be [N," + std::to_string(config.in_channels) + ",H,W], got " +
                         shape_str(s));
    }
    if (s[2] % p || s[3] % p) {
        throw ShapeError("image " + std::to_string(s[2]) + "x" + std::to_string(s[3]) + " not divisible by patch " +
                         std::to_string(p));
    }
    const std::size_t N = s[0], L = (s[2] / p) * (s[3] / p);
    if (L > config.max_memory_len) throw ShapeError("image yields " + std::to_string(L) + " patches, over the limit");
    auto x = ops::reshape(ops::nchw_to_rows(stem(images)), {N, L, config.embed_dim});
    const auto idx = first_rows(L);
    x = ops::add_broadcast(x, ops::select_rows(memory_pos, std::span<const std::size_t>(idx)));
    for (const auto& b : encoder) x = b(x, nullptr, false);
    return encoder_norm(x);
}

template <class T>
Var<T> SolverModel<T>::embed_tokens(std::span<const int> ids, std::size_t n, std::size_t t) const {
    if (ids.size() != n * t) throw ShapeError("decoder inputs do not match [N,T]");
    return ops::reshape(token_embed(ids), {n, t, config.embed_dim});
}

template <class T>
Var<T> SolverModel<T>::add_positions(const Var<T>& x) const {
    const std::size_t t = x.dim(1);
    if (t > config.max_seq_len) {
        throw ShapeError("sequence of " + std::to_string(t) + " exceeds max_seq_len " +
                         std::to_string(config.max_seq_len));
    }
    const auto idx = first_rows(t);
    return ops::add_broadcast(x, ops::select_rows(decoder_pos, std::span<const std::size_t>(idx)));
}

template <class T>
Var<T> SolverModel<T>::decode(const Var<T>& memory, const Var<T>& x0, bool causal) const {
    Var<T> x = x0;
    for (const auto& b : decoder) x = b(x, &memory, causal);
    const std::size_t N = x.dim(0), Tn = x.dim(1);
    return ops::reshape(head(decoder_norm(x)), {N * Tn, static_cast<std::size_t>(config.vocab.total())});
}

template <class T>
Var<T> SolverModel<T>::parallel_logits(const Var<T>& memory) const {
    const std::size_t N = memory.dim(0), P = config.depth_tokens, E = config.embed_dim;
    const int dep = Vocabulary::DEP;
    const auto task = ops::reshape(token_embed(std::span<const int>(&dep, 1)), {E});
    const auto q = ops::add_broadcast(parallel_queries, task);
    std::vector<std::size_t> tiled(N * P);
    for (std::size_t i = 0; i < tiled.size(); ++i) tiled[i] = i % P;
    const auto x = ops::reshape(ops::select_rows(q, std::span<const std::size_t>(tiled)), {N, P, E});
    return decode(memory, x, false);
}

template <class T>
ParamList<T> SolverModel<T>::parameters() const {
    ParamList<T> out;
    stem.collect("enc.stem", out);
    out.push_back({"enc.pos", memory_pos});
    for (std::size_t i = 0; i < encoder.size(); ++i) encoder[i].collect("enc.block" + std::to_string(i), out);
    encoder_norm.collect("enc.norm", out);
    token_embed.collect("dec.embed", out);
    out.push_back({"dec.pos", decoder_pos});
    for (std::size_t i = 0; i < decoder.size(); ++i) decoder[i].collect("dec.block" + std::to_string(i), out);
    decoder_norm.collect("dec.norm", out);
    head.collect("dec.head", out);
    out.push_back({"dec.parallel_queries", parallel_queries});
    return out;
}

template <class T>
std::size_t SolverModel<T>::parameter_count() const {
    return count_parameters(parameters());
}

template <class T>
void SolverModel<T>::save(io::Checkpoint& ckpt) const {
    ckpt.manifest["solver_config"] = config;
    for (const auto& p : parameters()) ckpt.put(p.name, p.var.value());
}

template <class T>
SolverModel<T> SolverModel<T>::load(const io::Checkpoint& ckpt) {
    if (!ckpt.manifest.contains("solver_config")) throw IoError("checkpoint has no solver_config");
    const auto cfg = ckpt.manifest.at("solver_config").get<SolverConfig>();
    Rng rng(0);
    SolverModel model(cfg, rng);
    for (auto& p : model.parameters()) {
        auto t = ckpt.get<T>(p.name);
        if (t.shape() != p.var.shape()) {
            throw IoError("parameter '" + p.name + "' has shape " + shape_str(t.shape()) + ", expected " +
                          shape_str(p.var.shape()));
        }
        p.var.mutable_value() = std::move(t);
    }
    return model;
}

template <class T>
SolverModel<T> build_solver(const SolverConfig& config, std::uint64_t seed) {
    Rng rng(seed);
    return SolverModel<T>(config, rng);
}

template <class T>
Tensor<T> stack_images(const std::vector<const bench::SyntheticScene*>& scenes) {
    if (scenes.empty()) throw ContractError("stack_images: empty batch");
    const auto& s0 = scenes[0]->image.shape();
    Tensor<T> out({scenes.size(), s0[0], s0[1], s0[2]});
    const std::size_t per = scenes[0]->image.numel();
    for (std::size_t i = 0; i < scenes.size(); ++i) {
        if (scenes[i]->image.shape() != s0) throw ShapeError("stack_images: ragged batch");
        for (std::size_t p = 0; p < per; ++p) out[i * per + p] = static_cast<T>(scenes[i]->image[p]);
    }
    return out;
}

template <class T>
Var<T> encode_image(const SolverModel<T>& model, const Tensor<T>& images) {
    return model.encode_image(Var<T>::constant(images));
}

template <class T>
Tensor<T> next_input_embedding(const SolverModel<T>& model, std::span<const float> probs, int token,
                               DecodeMode mode) {
    const auto& table = model.token_embed.table.value();
    const std::size_t V = table.dim(0), E = table.dim(1);
    Tensor<T> out({E});
    if (mode == DecodeMode::hard) {
        if (token < 0 || static_cast<std::size_t>(token) >= V) throw IndexError("token " + std::to_string(token));
        std::copy_n(table.ptr() + static_cast<std::size_t>(token) * E, E, out.ptr());
        return out;
    }
    if (probs.size() != V) throw ShapeError("soft input needs a full-vocabulary distribution");
    for (std::size_t v = 0; v < V; ++v) {
        const T p = static_cast<T>(probs[v]);
        if (p == T(0)) continue;
        for (std::size_t e = 0; e < E; ++e) out[e] += p * table[v * E + e];
    }
    return out;
}

namespace {

// Allowed id range(s) for the next instance token at sequence position s.
struct Grammar {
    const Vocabulary& vocab;
    bool depth;
    std::size_t max_instances;

    int argmax(std::span<const double> p, std::size_t s) const {
        auto best_in = [&](int b, int e, int cur) {
            for (int i = b; i < e; ++i)
                if (cur < 0 || p[i] > p[cur]) cur = i;
            return cur;
        };
        if (depth) return best_in(vocab.begin(TokenRange::depth_code), vocab.end(TokenRange::depth_code), -1);
        const std::size_t r = s % kRecordLength;
        if (r == 0) {
            if (s / kRecordLength >= max_instances) return Vocabulary::EOS;
            return best_in(vocab.begin(TokenRange::coord), vocab.end(TokenRange::coord), Vocabulary::EOS);
        }
        if (r < 4) return best_in(vocab.begin(TokenRange::coord), vocab.end(TokenRange::coord), -1);
        if (r == 4) return best_in(vocab.begin(TokenRange::cls), vocab.end(TokenRange::cls), -1);
        return best_in(vocab.begin(TokenRange::mask_code), vocab.end(TokenRange::mask_code), -1);
    }
};

template <class T>
std::vector<double> softmax_row(const T* logits, std::size_t V, double temperature) {
    std::vector<double> p(V);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t v = 0; v < V; ++v) mx = std::max(mx, static_cast<double>(logits[v]) / temperature);
    double total = 0;
    for (std::size_t v = 0; v < V; ++v) {
        p[v] = std::exp(static_cast<double>(logits[v]) / temperature - mx);
        total += p[v];
    }
    for (auto& x : p) x /= total;
    return p;
}

}  // namespace

template <class T>
std::vector<Decoded> decode_autoregressive(const SolverModel<T>& model, const Var<T>& memory, int task_token,
                                           const DecodeOptions& options) {
    options.validate();
    if (task_token != Vocabulary::DEP && task_token != Vocabulary::INS) {
        throw ContractError("task token must be [DEP] or [INS], got " + std::to_string(task_token));
    }
    NoGradGuard guard;
    const auto& cfg = model.config;
    const bool depth = task_token == Vocabulary::DEP;
    const std::size_t N = memory.dim(0), E = cfg.embed_dim, V = static_cast<std::size_t>(cfg.vocab.total());
    const std::size_t wanted = depth ? cfg.depth_tokens : options.max_instances * kRecordLength + 1;
    const std::size_t limit = std::min(wanted, cfg.max_seq_len);
    const Grammar grammar{cfg.vocab, depth, options.max_instances};

    std::vector<Decoded> out(N);
    std::vector<bool> done(N, false);
    for (auto& d : out) d.seq.task = depth ? SeqTask::dep : SeqTask::ins;
    Tensor<T> emb({N, limit, E});
    const auto start = next_input_embedding(model, {}, task_token, DecodeMode::hard);
    for (std::size_t n = 0; n < N; ++n) std::copy_n(start.ptr(), E, emb.ptr() + n * limit * E);

    for (std::size_t s = 0; s < limit; ++s) {
        const std::size_t len = s + 1;
        Tensor<T> x({N, len, E});
        for (std::size_t n = 0; n < N; ++n) std::copy_n(emb.ptr() + n * limit * E, len * E, x.ptr() + n * len * E);
        const auto logits = model.decode(memory, model.add_positions(Var<T>::constant(std::move(x))), true);
        bool all_done = true;
        for (std::size_t n = 0; n < N; ++n) {
            if (done[n]) continue;
            const auto p = softmax_row(logits.value().ptr() + (n * len + s) * V, V, options.temperature);
            const int tok = grammar.argmax(p, s);
            auto& seq = out[n].seq;
            seq.ids.push_back(tok);
            seq.loss_mask.push_back(1);
            seq.probs.emplace_back(p.begin(), p.end());
            if (!depth && tok == Vocabulary::EOS) {
                done[n] = true;
                continue;
            }
            all_done = false;
            if (s + 1 < limit) {
                const auto e = next_input_embedding(model, seq.probs.back(), tok, options.mode);
                std::copy_n(e.ptr(), E, emb.ptr() + (n * limit + s + 1) * E);
            }
        }
        if (all_done) break;
    }
    if (limit < wanted) {
        for (std::size_t n = 0; n < N; ++n) {
            if (done[n]) continue;
            auto& seq = out[n].seq;
            out[n].truncated = true;
            if (!depth) {
                const std::size_t keep = seq.ids.size() / kRecordLength * kRecordLength;
                seq.ids.resize(keep);
                seq.loss_mask.resize(keep);
                seq.probs.resize(keep);
                seq.ids.push_back(Vocabulary::EOS);
                seq.loss_mask.push_back(1);
                seq.probs.emplace_back(V, 0.0f);
                seq.probs.back()[Vocabulary::EOS] = 1.0f;
            }
        }
    }
    return out;
}

template <class T>
std::vector<Decoded> decode_parallel_depth(const SolverModel<T>& model, const Var<T>& memory,
                                           const DecodeOptions& options) {
    options.validate();
    NoGradGuard guard;
    const auto& cfg = model.config;
    const std::size_t N = memory.dim(0), P = cfg.depth_tokens, V = static_cast<std::size_t>(cfg.vocab.total());
    const auto logits = model.parallel_logits(memory);
    const Grammar grammar{cfg.vocab, true, 0};
    std::vector<Decoded> out(N);
    for (std::size_t n = 0; n < N; ++n) {
        auto& seq = out[n].seq;
        seq.task = SeqTask::dep;
        for (std::size_t s = 0; s < P; ++s) {
            const auto p = softmax_row(logits.value().ptr() + (n * P + s) * V, V, options.temperature);
            seq.ids.push_back(grammar.argmax(p, s));
            seq.loss_mask.push_back(1);
            seq.probs.emplace_back(p.begin(), p.end());
        }
    }
    return out;
}

template <class T>
void check_vocabulary(const SolverConfig& config, const Tokenizers<T>& tokenizers) {
    const auto& v = config.vocab;
    if (tokenizers.depth) {
        const auto k = tokenizers.depth->config.codebook_size;
        if (static_cast<std::size_t>(v.depth_codes) != k) {
            throw ContractError("vocabulary mismatch: depth_codes " + std::to_string(v.depth_codes) +
                                " vs depth tokenizer codebook " + std::to_string(k));
        }
        if (tokenizers.depth->config.task != TokenizerTask::depth) throw ContractError("depth tokenizer has mask task");
    }
    if (tokenizers.mask) {
        const auto k = tokenizers.mask->config.codebook_size;
        if (static_cast<std::size_t>(v.mask_codes) != k) {
            throw ContractError("vocabulary mismatch: mask_codes " + std::to_string(v.mask_codes) +
                                " vs mask tokenizer codebook " + std::to_string(k));
        }
        if (tokenizers.mask->config.task != TokenizerTask::mask) throw ContractError("mask tokenizer has depth task");
    }
}

namespace {

template <class T>
void depth_grid(const SolverModel<T>& model, const TokenizerModel<T>& tok, std::size_t H, std::size_t W,
                std::size_t& h, std::size_t& w) {
    tok.check_input(H, W);
    const auto r = static_cast<std::size_t>(tok.config.downsample_ratio);
    h = H / r;
    w = W / r;
    if (h * w != model.config.depth_tokens) {
        throw ContractError("depth grid " + std::to_string(h) + "x" + std::to_string(w) + " != depth_tokens " +
                            std::to_string(model.config.depth_tokens));
    }
}

}  // namespace

template <class T>
std::vector<Tensor<float>> infer_depth(const SolverModel<T>& model, const Tokenizers<T>& tokenizers,
                                       const Tensor<T>& images, const DecodeOptions& options) {
    if (!tokenizers.depth) throw ContractError("depth inference needs a depth tokenizer");
    const auto& tok = *tokenizers.depth;
    const std::size_t N = images.dim(0), H = images.dim(2), W = images.dim(3);
    std::size_t h = 0, w = 0;
    depth_grid(model, tok, H, W, h, w);
    NoGradGuard guard;
    const auto memory = encode_image(model, images);
    const auto decoded = options.parallel ? decode_parallel_depth(model, memory, options)
                                          : decode_autoregressive(model, memory, Vocabulary::DEP, options);
    const bool soft = options.mode == DecodeMode::soft && options.soft_detokenize;
    Tensor<T> recon;
    if (soft) {
        const std::size_t K = tok.codebook.size();
        Tensor<T> probs({N * h * w, K});
        for (std::size_t n = 0; n < N; ++n) {
            const auto rows = decode_depth_soft(decoded[n].seq, model.config.vocab, h, w);
            for (std::size_t i = 0; i < rows.numel(); ++i) probs[n * h * w * K + i] = static_cast<T>(rows[i]);
        }
        recon = detokenize_soft(tok, Var<T>::constant(std::move(probs)), N, h, w).value();
    } else {
        TokenGrid grid{N, h, w, {}};
        for (std::size_t n = 0; n < N; ++n) {
            const auto g = decode_depth(decoded[n].seq, model.config.vocab, h, w);
            grid.ids.insert(grid.ids.end(), g.ids.begin(), g.ids.end());
        }
        recon = detokenize(tok, grid);
    }
    std::vector<Tensor<float>> out;
    for (std::size_t n = 0; n < N; ++n) {
        Tensor<float> m({H, W});
        for (std::size_t p = 0; p < H * W; ++p) {
            m[p] = static_cast<float>(recon[n * H * W + p] * tok.config.value_scale);
        }
        out.push_back(std::move(m));
    }
    return out;
}

template <class T>
std::vector<std::vector<InstanceAnnotation>> infer_instances(const SolverModel<T>& model,
                                                             const Tokenizers<T>& tokenizers,
                                                             const Tensor<T>& images,
                                                             const DecodeOptions& options, double score_threshold) {
    if (!tokenizers.mask) throw ContractError("instance inference needs a mask tokenizer");
    if (options.parallel) throw ContractError("parallel decoding is depth only");
    NoGradGuard guard;
    const auto memory = encode_image(model, images);
    const auto decoded = decode_autoregressive(model, memory, Vocabulary::INS, options);
    auto decoder = mask_decoder(*tokenizers.mask);
    if (options.mode == DecodeMode::hard || !options.soft_detokenize) decoder.soft = nullptr;
    std::vector<std::vector<InstanceAnnotation>> out;
    for (const auto& d : decoded) out.push_back(decode_instances(d.seq, model.config.vocab, decoder, score_threshold));
    return out;
}

template <class T>
SceneTokens tokenize_scenes(const std::vector<bench::SyntheticScene>& scenes, const Tokenizers<T>& tokenizers) {
    constexpr std::size_t chunk = 32;
    SceneTokens out;
    if (tokenizers.depth) {
        for (std::size_t s = 0; s < scenes.size(); s += chunk) {
            std::vector<DepthMap> maps;
            for (std::size_t i = s; i < std::min(scenes.size(), s + chunk); ++i) maps.push_back(scenes[i].depth);
            const auto grid = tokenize(*tokenizers.depth, stack_inputs<T>(maps, tokenizers.depth->config));
            const std::size_t per = grid.h * grid.w;
            for (std::size_t i = 0; i < maps.size(); ++i) {
                out.depth.push_back(TokenGrid{1, grid.h, grid.w,
                                              std::vector<int>(grid.ids.begin() + i * per,
                                                               grid.ids.begin() + (i + 1) * per)});
            }
        }
    }
    if (tokenizers.mask) {
        const auto enc = mask_encoder(*tokenizers.mask);
        out.zero_mask = enc(Mask(kMaskCrop * kMaskCrop, 0));
        std::vector<DepthMap> crops;
        std::vector<std::pair<std::size_t, std::size_t>> owner;
        out.masks.resize(scenes.size());
        for (std::size_t s = 0; s < scenes.size(); ++s) {
            out.masks[s].resize(scenes[s].instances.size());
            for (std::size_t i = 0; i < scenes[s].instances.size(); ++i) {
                Tensor<float> v({kMaskCrop, kMaskCrop});
                const auto& m = scenes[s].instances[i].mask64;
                for (std::size_t p = 0; p < m.size(); ++p) v[p] = m[p] ? 1.0f : 0.0f;
                crops.push_back(DepthMap::all_valid(std::move(v)));
                owner.emplace_back(s, i);
            }
        }
        for (std::size_t c = 0; c < crops.size(); c += chunk) {
            const std::vector<DepthMap> part(crops.begin() + c, crops.begin() + std::min(crops.size(), c + chunk));
            const auto grid = tokenize(*tokenizers.mask, stack_inputs<T>(part, tokenizers.mask->config));
            if (grid.h * grid.w != kMaskTokens) throw ContractError("mask tokenizer must yield a 4x4 grid");
            for (std::size_t i = 0; i < part.size(); ++i) {
                const auto [s, k] = owner[c + i];
                out.masks[s][k].assign(grid.ids.begin() + i * kMaskTokens, grid.ids.begin() + (i + 1) * kMaskTokens);
            }
        }
    }
    return out;
}

template <class T>
SolverBatch<T> make_depth_batch(const std::vector<bench::SyntheticScene>& scenes, std::span<const std::size_t> idx,
                                const SceneTokens& tokens, const SolverConfig& config,
                                const TokenizerConfig& depth_tok) {
    if (tokens.depth.size() != scenes.size()) throw ContractError("depth tokens missing for the scene set");
    SolverBatch<T> b;
    b.task = SeqTask::dep;
    std::vector<const bench::SyntheticScene*> ptrs;
    for (auto i : idx) ptrs.push_back(&scenes.at(i));
    b.images = stack_images<T>(ptrs);
    b.n = idx.size();
    b.t = config.depth_tokens;
    const std::size_t H = scenes[idx[0]].depth.height(), W = scenes[idx[0]].depth.width();
    b.depth_target = Tensor<T>({b.n, 1, H, W});
    for (std::size_t k = 0; k < b.n; ++k) {
        const auto& grid = tokens.depth[idx[k]];
        if (grid.ids.size() != b.t) throw ContractError("depth grid length differs from depth_tokens");
        const auto seq = encode_depth(grid, config.vocab);
        b.inputs.push_back(Vocabulary::DEP);
        b.inputs.insert(b.inputs.end(), seq.ids.begin(), seq.ids.end() - 1);
        b.targets.insert(b.targets.end(), seq.ids.begin(), seq.ids.end());
        const auto& d = ptrs[k]->depth;
        for (std::size_t p = 0; p < H * W; ++p) {
            b.depth_valid.push_back(d.valid[p]);
            if (d.valid[p]) b.depth_target[k * H * W + p] = static_cast<T>(d.values[p] / depth_tok.value_scale);
        }
    }
    b.ignore.assign(b.targets.size(), 0);
    return b;
}

template <class T>
SolverBatch<T> make_instance_batch(const std::vector<bench::SyntheticScene>& scenes, std::span<const std::size_t> idx,
                                   const SceneTokens& tokens, const SolverConfig& config, std::size_t max_instances,
                                   Rng& rng) {
    if (tokens.masks.size() != scenes.size()) throw ContractError("mask tokens missing for the scene set");
    SolverBatch<T> b;
    b.task = SeqTask::ins;
    std::vector<const bench::SyntheticScene*> ptrs;
    for (auto i : idx) ptrs.push_back(&scenes.at(i));
    b.images = stack_images<T>(ptrs);
    b.n = idx.size();
    std::vector<TokenSequence> seqs;
    std::vector<std::vector<const Mask*>> crops;
    for (std::size_t k = 0; k < b.n; ++k) {
        const auto& sc = scenes[idx[k]];
        std::vector<std::size_t> real;
        for (std::size_t i = 0; i < sc.instances.size(); ++i)
            if (!sc.instances[i].is_noise) real.push_back(i);
        for (std::size_t i = real.size(); i > 1; --i) std::swap(real[i - 1], real[rng() % i]);
        if (real.size() > max_instances) real.resize(max_instances);
        std::vector<InstanceRecord> recs;
        std::vector<InstanceAnnotation> kept;
        crops.emplace_back();
        for (auto i : real) {
            const auto& a = sc.instances[i];
            recs.push_back({a.box, a.class_id, tokens.masks[idx[k]][i], false, 1.0});
            kept.push_back(a);
            crops.back().push_back(&a.mask64);
        }
        for (std::size_t slot = 0; recs.size() < max_instances; ++slot) {
            recs.push_back({sample_noise_box(kept, slot, rng), config.vocab.n_classes, tokens.zero_mask, true, 1.0});
        }
        seqs.push_back(encode_records(recs, config.vocab));
    }
    b.t = 0;
    for (const auto& s : seqs) b.t = std::max(b.t, s.ids.size());
    for (std::size_t k = 0; k < b.n; ++k) {
        const auto& s = seqs[k];
        b.inputs.push_back(Vocabulary::INS);
        for (std::size_t i = 0; i + 1 < b.t; ++i) b.inputs.push_back(i < s.ids.size() ? s.ids[i] : Vocabulary::PAD);
        for (std::size_t i = 0; i < b.t; ++i) {
            b.targets.push_back(i < s.ids.size() ? s.ids[i] : Vocabulary::PAD);
            b.ignore.push_back(i < s.ids.size() ? (s.loss_mask[i] ? 0 : 1) : 1);
        }
        for (std::size_t r = 0; r < crops[k].size(); ++r) {
            for (std::size_t m = 0; m < kMaskTokens; ++m) b.mask_rows.push_back(k * b.t + r * kRecordLength + 5 + m);
        }
    }
    std::size_t R = 0;
    for (const auto& c : crops) R += c.size();
    b.mask_target = Tensor<T>({R, 1, kMaskCrop, kMaskCrop});
    std::size_t r = 0;
    for (const auto& c : crops) {
        for (const Mask* m : c) {
            for (std::size_t p = 0; p < m->size(); ++p) b.mask_target[r * m->size() + p] = (*m)[p] ? T(1) : T(0);
            ++r;
        }
    }
    return b;
}

template <class T>
SolverForward<T> solver_forward(const SolverModel<T>& model, const Tokenizers<T>& tokenizers,
                                const SolverBatch<T>& batch, const LossConfig& loss, bool parallel) {
    loss.validate();
    const auto& vocab = model.config.vocab;
    const bool depth = batch.task == SeqTask::dep;
    SolverForward<T> out;
    const auto memory = encode_image(model, batch.images);
    if (depth && parallel) {
        if (batch.t != model.config.depth_tokens) throw ShapeError("parallel head needs depth_tokens targets");
        out.logits = model.parallel_logits(memory);
    } else {
        const auto x = model.add_positions(model.embed_tokens(batch.inputs, batch.n, batch.t));
        out.logits = model.decode(memory, x, true);
    }
    out.token_loss = ops::masked_cross_entropy(out.logits, std::span<const int>(batch.targets),
                                               std::span<const std::uint8_t>(batch.ignore));
    const T weight = static_cast<T>(depth ? loss.depth_weight : loss.instance_weight);
    Var<T> total = out.token_loss;
    if (loss.aux_weight > 0) {
        if (depth) {
            if (!tokenizers.depth) throw ContractError("depth aux loss needs a depth tokenizer");
            const auto& tok = *tokenizers.depth;
            const std::size_t H = batch.depth_target.dim(2), W = batch.depth_target.dim(3);
            std::size_t h = 0, w = 0;
            depth_grid(model, tok, H, W, h, w);
            const auto probs = ops::softmax(ops::slice_last(out.logits, vocab.begin(TokenRange::depth_code),
                                                            vocab.end(TokenRange::depth_code)));
            const auto pred = detokenize_soft(tok, probs, batch.n, h, w);
            out.aux_loss = ops::masked_mse(pred, Var<T>::constant(batch.depth_target),
                                           std::span<const std::uint8_t>(batch.depth_valid));
        } else {
            if (!tokenizers.mask) throw ContractError("instance aux loss needs a mask tokenizer");
            const auto& tok = *tokenizers.mask;
            if (batch.mask_rows.empty()) {
                out.aux_loss = Var<T>::constant(Tensor<T>::scalar(T(0)));
            } else {
                const std::size_t R = batch.mask_rows.size() / kMaskTokens;
                const auto rows = ops::select_rows(out.logits, std::span<const std::size_t>(batch.mask_rows));
                const auto probs = ops::softmax(ops::slice_last(rows, vocab.begin(TokenRange::mask_code),
                                                                vocab.end(TokenRange::mask_code)));
                const auto z = ops::rows_to_nchw(embed_soft(probs, tok.codebook), R, 4, 4);
                const Mask all(batch.mask_target.numel(), 1);
                out.aux_loss = ops::masked_bce_with_logits(tok.decode_logits(z), Var<T>::constant(batch.mask_target),
                                                           std::span<const std::uint8_t>(all));
            }
        }
        total = ops::add(total, ops::scale(out.aux_loss, static_cast<T>(loss.aux_weight)));
    }
    out.loss = ops::scale(total, weight);
    return out;
}

void to_json(nlohmann::json& j, const SolverTrainConfig& c) {
    std::vector<std::string> tasks;
    for (auto t : c.tasks) tasks.push_back(t == SeqTask::dep ? "dep" : "ins");
    j = {{"train", c.train},
         {"loss", c.loss},
         {"tasks", tasks},
         {"max_instances", c.max_instances},
         {"parallel_depth", c.parallel_depth}};
}

void from_json(const nlohmann::json& j, SolverTrainConfig& c) {
    SolverTrainConfig d;
    c.train = j.contains("train") ? j.at("train").get<TrainConfig>() : d.train;
    c.loss = j.contains("loss") ? j.at("loss").get<LossConfig>() : d.loss;
    c.tasks.clear();
    for (const auto& t : j.value("tasks", std::vector<std::string>{"dep"})) {
        if (t == "dep") c.tasks.push_back(SeqTask::dep);
        else if (t == "ins") c.tasks.push_back(SeqTask::ins);
        else throw ContractError("unknown task '" + t + "'");
    }
    c.max_instances = j.value("max_instances", d.max_instances);
    c.parallel_depth = j.value("parallel_depth", d.parallel_depth);
}

void to_json(nlohmann::json& j, const SolverEpochMetrics& m) {
    j = {{"epoch", m.epoch},
         {"depth_token_loss", m.depth_token_loss},
         {"depth_aux_loss", m.depth_aux_loss},
         {"instance_token_loss", m.instance_token_loss},
         {"instance_aux_loss", m.instance_aux_loss},
         {"lr", m.lr}};
}

template <class T>
SolverTrainer<T>::SolverTrainer(SolverModel<T>& model, Tokenizers<T> tokenizers, const SolverTrainConfig& cfg)
    : model_(&model), tok_(tokenizers), cfg_(cfg), params_(make_parameters(model.parameters())) {
    cfg_.train.validate();
    cfg_.loss.validate();
    if (cfg_.tasks.empty()) throw ContractError("solver training needs at least one task");
    for (auto t : cfg_.tasks) {
        if (t == SeqTask::dep && !tok_.depth) throw ContractError("task dep has no depth tokenizer");
        if (t == SeqTask::ins && !tok_.mask) throw ContractError("task ins has no mask tokenizer");
    }
    check_vocabulary(model.config, tok_);
    // Frozen detokenizers still pass gradients to the solver.
    if (tok_.depth) set_trainable(tok_.depth->parameters(), false);
    if (tok_.mask) set_trainable(tok_.mask->parameters(), false);
}

template <class T>
SolverEpochMetrics SolverTrainer<T>::run_epoch(const std::vector<bench::SyntheticScene>& data,
                                               const SceneTokens& tokens) {
    if (data.empty()) throw ContractError("train_solver: empty dataset");
    auto& model = *model_;
    std::seed_seq seq{static_cast<std::uint64_t>(cfg_.train.seed), static_cast<std::uint64_t>(epoch_)};
    Rng rng(seq);
    const auto B = static_cast<std::size_t>(cfg_.train.batch_size);
    std::vector<std::vector<std::vector<std::size_t>>> batches(cfg_.tasks.size());
    for (std::size_t t = 0; t < cfg_.tasks.size(); ++t) {
        std::vector<std::size_t> order(data.size());
        std::iota(order.begin(), order.end(), 0);
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
        for (std::size_t s = 0; s < order.size(); s += B) {
            batches[t].emplace_back(order.begin() + s, order.begin() + std::min(order.size(), s + B));
        }
    }
    const double lr = lr_at_epoch(cfg_.train, epoch_);
    SolverEpochMetrics m;
    m.epoch = epoch_ + 1;
    m.lr = lr;
    double dep_n = 0, ins_n = 0;
    const std::size_t rounds = batches[0].size();
    for (std::size_t r = 0; r < rounds; ++r) {
        for (std::size_t t = 0; t < cfg_.tasks.size(); ++t) {
            const auto& idx = batches[t][r];
            const bool depth = cfg_.tasks[t] == SeqTask::dep;
            const auto batch = depth ? make_depth_batch<T>(data, idx, tokens, model.config, tok_.depth->config)
                                     : make_instance_batch<T>(data, idx, tokens, model.config, cfg_.max_instances, rng);
            zero_grads(model.parameters());
            const auto fwd = solver_forward(model, tok_, batch, cfg_.loss, depth && cfg_.parallel_depth);
            const double loss = fwd.loss.item();
            if (!std::isfinite(loss)) {
                throw DivergenceError("non-finite solver loss at epoch " + std::to_string(epoch_ + 1) + ", round " +
                                      std::to_string(r));
            }
            fwd.loss.backward();
            // Parameters outside this task's graph (parallel queries, say) keep their state.
            std::vector<Parameter<T>> live;
            std::vector<std::size_t> where;
            for (std::size_t i = 0; i < params_.size(); ++i) {
                if (!params_[i].var.has_grad()) continue;
                live.push_back(std::move(params_[i]));
                where.push_back(i);
            }
            adam_step(std::span<Parameter<T>>(live), lr, cfg_.train);
            for (std::size_t i = 0; i < live.size(); ++i) params_[where[i]] = std::move(live[i]);
            const double n = static_cast<double>(idx.size());
            const double aux = fwd.aux_loss.defined() ? static_cast<double>(fwd.aux_loss.item()) : 0.0;
            if (depth) {
                m.depth_token_loss += fwd.token_loss.item() * n;
                m.depth_aux_loss += aux * n;
                dep_n += n;
            } else {
                m.instance_token_loss += fwd.token_loss.item() * n;
                m.instance_aux_loss += aux * n;
                ins_n += n;
            }
        }
    }
    if (dep_n > 0) {
        m.depth_token_loss /= dep_n;
        m.depth_aux_loss /= dep_n;
    }
    if (ins_n > 0) {
        m.instance_token_loss /= ins_n;
        m.instance_aux_loss /= ins_n;
    }
    ++epoch_;
    return m;
}

template <class T>
void SolverTrainer<T>::save(io::Checkpoint& ckpt) const {
    nlohmann::json steps = nlohmann::json::object();
    for (const auto& p : params_) {
        ckpt.put("adam." + p.name + ".m", p.m);
        ckpt.put("adam." + p.name + ".v", p.v);
        steps[p.name] = p.step;
    }
    ckpt.manifest["trainer"] = {{"epoch", epoch_}, {"steps", steps}, {"solver_train", cfg_}};
}

template <class T>
void SolverTrainer<T>::load(const io::Checkpoint& ckpt) {
    if (!ckpt.manifest.contains("trainer")) throw IoError("checkpoint has no trainer state");
    const auto& tr = ckpt.manifest.at("trainer");
    epoch_ = tr.at("epoch").get<int>();
    for (auto& p : params_) {
        p.m = ckpt.get<T>("adam." + p.name + ".m");
        p.v = ckpt.get<T>("adam." + p.name + ".v");
        p.step = tr.at("steps").at(p.name).template get<std::int64_t>();
        if (p.m.shape() != p.var.shape() || p.v.shape() != p.var.shape()) {
            throw IoError("optimizer state for '" + p.name + "' has the wrong shape");
        }
    }
}

template <class T>
std::vector<SolverEpochMetrics> train_solver(SolverTrainer<T>& trainer, const std::vector<bench::SyntheticScene>& data,
                                             const SceneTokens& tokens, int epochs, std::ostream* log,
                                             const SolverEpochCallback& on_epoch) {
    std::vector<SolverEpochMetrics> out;
    while (trainer.epoch() < epochs) {
        const auto m = trainer.run_epoch(data, tokens);
        if (log) {
            *log << nlohmann::json(m).dump() << '\n';
            log->flush();
        }
        if (on_epoch) on_epoch(m);
        out.push_back(m);
    }
    return out;
}

template <class T>
double solver_depth_rmse(const SolverModel<T>& model, const Tokenizers<T>& tokenizers,
                         const std::vector<bench::SyntheticScene>& scenes, const DecodeOptions& options,
                         std::size_t batch) {
    if (!tokenizers.depth) throw ContractError("depth evaluation needs a depth tokenizer");
    const double scale = tokenizers.depth->config.value_scale;
    double se = 0, n = 0;
    batch = std::max<std::size_t>(1, batch);
    for (std::size_t s = 0; s < scenes.size(); s += batch) {
        std::vector<const bench::SyntheticScene*> ptrs;
        for (std::size_t i = s; i < std::min(scenes.size(), s + batch); ++i) ptrs.push_back(&scenes[i]);
        const auto pred = infer_depth(model, tokenizers, stack_images<T>(ptrs), options);
        for (std::size_t i = 0; i < ptrs.size(); ++i) {
            const auto& d = ptrs[i]->depth;
            for (std::size_t p = 0; p < d.valid.size(); ++p) {
                if (!d.valid[p]) continue;
                const double e = (static_cast<double>(pred[i][p]) - d.values[p]) / scale;
                se += e * e;
                n += 1;
            }
        }
    }
    if (n == 0) throw ContractError("solver_depth_rmse: no valid pixels");
    return std::sqrt(se / n);
}

template <class T>
bench::MaskMetrics solver_mask_metrics(const SolverModel<T>& model, const Tokenizers<T>& tokenizers,
                                       const std::vector<bench::SyntheticScene>& scenes, const DecodeOptions& options,
                                       std::size_t batch) {
    if (scenes.empty()) throw ContractError("solver_mask_metrics: no scenes");
    bench::MaskMetrics total;
    batch = std::max<std::size_t>(1, batch);
    for (std::size_t s = 0; s < scenes.size(); s += batch) {
        std::vector<const bench::SyntheticScene*> ptrs;
        for (std::size_t i = s; i < std::min(scenes.size(), s + batch); ++i) ptrs.push_back(&scenes[i]);
        const auto pred = infer_instances(model, tokenizers, stack_images<T>(ptrs), options);
        for (std::size_t i = 0; i < ptrs.size(); ++i) {
            const auto m = bench::mask_metrics(pred[i], ptrs[i]->instances, ptrs[i]->depth.height());
            total.mean_iou += m.mean_iou;
            total.ap += m.ap;
            if (total.ap_per_threshold.empty()) total.ap_per_threshold.assign(m.ap_per_threshold.size(), 0.0);
            for (std::size_t k = 0; k < m.ap_per_threshold.size(); ++k) total.ap_per_threshold[k] += m.ap_per_threshold[k];
        }
    }
    const double n = static_cast<double>(scenes.size());
    total.mean_iou /= n;
    total.ap /= n;
    for (auto& a : total.ap_per_threshold) a /= n;
    return total;
}

#define VISTOK_INSTANTIATE_SOLVER(T)                                                                           \
    template class SolverModel<T>;                                                                             \
    template class SolverTrainer<T>;                                                                           \
    template SolverModel<T> build_solver(const SolverConfig&, std::uint64_t);                                 \
    template Tensor<T> stack_images(const std::vector<const bench::SyntheticScene*>&);                        \
    template Var<T> encode_image(const SolverModel<T>&, const Tensor<T>&);                                    \
    template Tensor<T> next_input_embedding(const SolverModel<T>&, std::span<const float>, int, DecodeMode);   \
    template std::vector<Decoded> decode_autoregressive(const SolverModel<T>&, const Var<T>&, int,            \
                                                        const DecodeOptions&);                                \
    template std::vector<Decoded> decode_parallel_depth(const SolverModel<T>&, const Var<T>&,                 \
                                                        const DecodeOptions&);                                \
    template void check_vocabulary(const SolverConfig&, const Tokenizers<T>&);                                \
    template std::vector<Tensor<float>> infer_depth(const SolverModel<T>&, const Tokenizers<T>&,              \
                                                    const Tensor<T>&, const DecodeOptions&);                  \
    template std::vector<std::vector<InstanceAnnotation>> infer_instances(                                     \
        const SolverModel<T>&, const Tokenizers<T>&, const Tensor<T>&, const DecodeOptions&, double);         \
    template SceneTokens tokenize_scenes(const std::vector<bench::SyntheticScene>&, const Tokenizers<T>&);    \
    template SolverBatch<T> make_depth_batch(const std::vector<bench::SyntheticScene>&,                       \
                                             std::span<const std::size_t>, const SceneTokens&,                \
                                             const SolverConfig&, const TokenizerConfig&);                    \
    template SolverBatch<T> make_instance_batch(const std::vector<bench::SyntheticScene>&,                    \
                                                std::span<const std::size_t>, const SceneTokens&,             \
                                                const SolverConfig&, std::size_t, Rng&);                      \
    template SolverForward<T> solver_forward(const SolverModel<T>&, const Tokenizers<T>&,                     \
                                             const SolverBatch<T>&, const LossConfig&, bool);                 \
    template std::vector<SolverEpochMetrics> train_solver(SolverTrainer<T>&,                                   \
                                                          const std::vector<bench::SyntheticScene>&,          \
                                                          const SceneTokens&, int, std::ostream*,             \
                                                          const SolverEpochCallback&);                        \
    template double solver_depth_rmse(const SolverModel<T>&, const Tokenizers<T>&,                            \
                                      const std::vector<bench::SyntheticScene>&, const DecodeOptions&,        \
                                      std::size_t);                                                           \
    template bench::MaskMetrics solver_mask_metrics(const SolverModel<T>&, const Tokenizers<T>&,              \
                                                    const std::vector<bench::SyntheticScene>&,                \
                                                    const DecodeOptions&, std::size_t);

VISTOK_INSTANTIATE_SOLVER(float)
VISTOK_INSTANTIATE_SOLVER(double)

#undef VISTOK_INSTANTIATE_SOLVER

}  // namespace vistok
