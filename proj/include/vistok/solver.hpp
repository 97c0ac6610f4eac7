#pragma once

#include <functional>
#include <ostream>
#include <vector>

#include <nlohmann/json.hpp>

#include "vistok/bench.hpp"
#include "vistok/optim.hpp"
#include "vistok/seq.hpp"
#include "vistok/tokenizer.hpp"

namespace vistok {

struct SolverConfig {
    std::size_t embed_dim = 256;
    std::size_t n_heads = 8;
    std::size_t n_encoder_blocks = 6;
    std::size_t n_decoder_blocks = 6;
    std::size_t ffn_mult = 4;
    std::size_t patch_size = 8;   // conv stem kernel and stride
    std::size_t in_channels = 3;
    std::size_t max_memory_len = 256;
    std::size_t max_seq_len = 128;
    std::size_t depth_tokens = 16;  // h*w of the depth token grid; also the parallel query count
    Vocabulary vocab;

    // Desk-scale preset: 64-wide, 4 heads, 2 encoder and 2 decoder blocks, 64 coordinate bins.
    static SolverConfig toy();
    void validate() const;
};

void to_json(nlohmann::json& j, const SolverConfig& c);
void from_json(const nlohmann::json& j, SolverConfig& c);

enum class DecodeMode { hard, soft };

struct DecodeOptions {
    DecodeMode mode = DecodeMode::hard;
    // Soft mode only: detokenize from restricted probabilities rather than argmax tokens.
    bool soft_detokenize = true;
    double temperature = 1.0;
    std::size_t max_instances = 8;
    bool parallel = false;  // depth only

    void validate() const;
};

struct LossConfig {
    double depth_weight = 1.0;
    double instance_weight = 5.0;
    double aux_weight = 0.2;

    void validate() const;
};

void to_json(nlohmann::json& j, const DecodeOptions& o);
void to_json(nlohmann::json& j, const LossConfig& c);
void from_json(const nlohmann::json& j, LossConfig& c);

namespace nn {

template <class T>
class MultiHeadAttention {
public:
    MultiHeadAttention() = default;
    MultiHeadAttention(std::size_t dim, std::size_t heads, Rng& rng);
    Var<T> operator()(const Var<T>& x, const Var<T>& context, bool causal) const;
    void collect(const std::string& prefix, ParamList<T>& out) const;

    Linear<T> q, k, v, o;
    std::size_t heads = 1;
};

// Pre-norm block: self-attention, optional cross-attention, FFN.
template <class T>
class TransformerBlock {
public:
    TransformerBlock() = default;
    TransformerBlock(std::size_t dim, std::size_t heads, std::size_t ffn_mult, bool cross, Rng& rng);
    Var<T> operator()(const Var<T>& x, const Var<T>* memory, bool causal) const;
    void collect(const std::string& prefix, ParamList<T>& out) const;

    LayerNorm<T> ln1, ln2, ln3;
    MultiHeadAttention<T> self_attn, cross_attn;
    Linear<T> ff1, ff2;
    bool has_cross = false;
};

}  // namespace nn

template <class T>
class SolverModel {
public:
    SolverModel() = default;
    SolverModel(const SolverConfig& config, Rng& rng);

    // images[N,C,H,W] -> memory[N,L,E]
    Var<T> encode_image(const Var<T>& images) const;
    // Token embeddings plus positions for decoder inputs [N,T] -> [N,T,E]
    Var<T> embed_tokens(std::span<const int> ids, std::size_t n, std::size_t t) const;
    Var<T> add_positions(const Var<T>& x) const;
    // x[N,T,E] (positions already added) -> logits[N*T, V]
    Var<T> decode(const Var<T>& memory, const Var<T>& x, bool causal) const;
    // Parallel depth head: logits[N*depth_tokens, V] in one non-causal pass.
    Var<T> parallel_logits(const Var<T>& memory) const;

    ParamList<T> parameters() const;
    std::size_t parameter_count() const;
    void save(io::Checkpoint& ckpt) const;
    static SolverModel load(const io::Checkpoint& ckpt);

    SolverConfig config;
    nn::Conv2d<T> stem;
    Var<T> memory_pos;
    std::vector<nn::TransformerBlock<T>> encoder;
    nn::LayerNorm<T> encoder_norm;
    nn::Embedding<T> token_embed;
    Var<T> decoder_pos;
    std::vector<nn::TransformerBlock<T>> decoder;
    nn::LayerNorm<T> decoder_norm;
    nn::Linear<T> head;
    Var<T> parallel_queries;
};

template <class T>
SolverModel<T> build_solver(const SolverConfig& config, std::uint64_t seed);

// Stacks scene images into [N,3,H,W].
template <class T>
Tensor<T> stack_images(const std::vector<const bench::SyntheticScene*>& scenes);

template <class T>
Var<T> encode_image(const SolverModel<T>& model, const Tensor<T>& images);

struct Decoded {
    TokenSequence seq;  // probs holds the temperature-scaled full-vocabulary softmax per step
    bool truncated = false;
};

// Input embedding for the next step: the chosen token's row (hard) or probs @ table (soft).
template <class T>
Tensor<T> next_input_embedding(const SolverModel<T>& model, std::span<const float> probs, int token,
                               DecodeMode mode);

// Greedy decoding; hard argmax is restricted to the grammar of the task. Depth stops after
// depth_tokens steps, instances at EOS or max_instances records.
template <class T>
std::vector<Decoded> decode_autoregressive(const SolverModel<T>& model, const Var<T>& memory, int task_token,
                                           const DecodeOptions& options);

template <class T>
std::vector<Decoded> decode_parallel_depth(const SolverModel<T>& model, const Var<T>& memory,
                                           const DecodeOptions& options = {});

template <class T>
struct Tokenizers {
    const TokenizerModel<T>* depth = nullptr;
    const TokenizerModel<T>* mask = nullptr;
};

// Checks that each present tokenizer matches the vocabulary slice it feeds.
template <class T>
void check_vocabulary(const SolverConfig& config, const Tokenizers<T>& tokenizers);

// Per-map depth in value units, [H,W] at tokenizer resolution.
template <class T>
std::vector<Tensor<float>> infer_depth(const SolverModel<T>& model, const Tokenizers<T>& tokenizers,
                                       const Tensor<T>& images, const DecodeOptions& options);
template <class T>
std::vector<std::vector<InstanceAnnotation>> infer_instances(const SolverModel<T>& model,
                                                             const Tokenizers<T>& tokenizers,
                                                             const Tensor<T>& images,
                                                             const DecodeOptions& options,
                                                             double score_threshold = 0.0);

// Teacher-forced batch with aux targets.
template <class T>
struct SolverBatch {
    SeqTask task = SeqTask::dep;
    Tensor<T> images;
    std::vector<int> inputs;          // [N*T] decoder inputs (task token, then targets shifted)
    std::vector<int> targets;         // [N*T]
    Mask ignore;                      // [N*T], 1 = no loss
    std::size_t n = 0, t = 0;
    Tensor<T> depth_target;           // [N,1,H,W] model units
    Mask depth_valid;
    std::vector<std::size_t> mask_rows;  // logits rows of real mask tokens, 16 per instance
    Tensor<T> mask_target;               // [R,1,64,64]
};

template <class T>
struct SolverForward {
    Var<T> loss;        // weighted token + aux
    Var<T> token_loss;
    Var<T> aux_loss;    // undefined when the aux weight is 0
    Var<T> logits;      // [N*T, V]
};

// Precomputed tokenizer outputs for a scene set.
struct SceneTokens {
    std::vector<TokenGrid> depth;                   // per scene
    std::vector<std::vector<std::vector<int>>> masks;  // per scene, per instance
    std::vector<int> zero_mask;
};

template <class T>
SceneTokens tokenize_scenes(const std::vector<bench::SyntheticScene>& scenes, const Tokenizers<T>& tokenizers);

template <class T>
SolverBatch<T> make_depth_batch(const std::vector<bench::SyntheticScene>& scenes, std::span<const std::size_t> idx,
                                const SceneTokens& tokens, const SolverConfig& config,
                                const TokenizerConfig& depth_tok);
template <class T>
SolverBatch<T> make_instance_batch(const std::vector<bench::SyntheticScene>& scenes, std::span<const std::size_t> idx,
                                   const SceneTokens& tokens, const SolverConfig& config, std::size_t max_instances,
                                   Rng& rng);

// parallel: depth batches go through the parallel head instead of the causal decoder.
template <class T>
SolverForward<T> solver_forward(const SolverModel<T>& model, const Tokenizers<T>& tokenizers,
                                const SolverBatch<T>& batch, const LossConfig& loss, bool parallel = false);

struct SolverTrainConfig {
    TrainConfig train;
    LossConfig loss;
    std::vector<SeqTask> tasks{SeqTask::dep};
    std::size_t max_instances = 4;  // records per instance sequence, padded with noise
    bool parallel_depth = false;
};

void to_json(nlohmann::json& j, const SolverTrainConfig& c);
void from_json(const nlohmann::json& j, SolverTrainConfig& c);

struct SolverEpochMetrics {
    int epoch = 0;
    double depth_token_loss = 0, depth_aux_loss = 0;
    double instance_token_loss = 0, instance_aux_loss = 0;
    double lr = 0;
};
void to_json(nlohmann::json& j, const SolverEpochMetrics& m);

template <class T>
class SolverTrainer {
public:
    SolverTrainer(SolverModel<T>& model, Tokenizers<T> tokenizers, const SolverTrainConfig& cfg);

    // Task batches alternate round-robin in the order of cfg.tasks.
    SolverEpochMetrics run_epoch(const std::vector<bench::SyntheticScene>& data, const SceneTokens& tokens);
    int epoch() const { return epoch_; }

    void save(io::Checkpoint& ckpt) const;
    void load(const io::Checkpoint& ckpt);

private:
    SolverModel<T>* model_;
    Tokenizers<T> tok_;
    SolverTrainConfig cfg_;
    std::vector<Parameter<T>> params_;
    int epoch_ = 0;
};

using SolverEpochCallback = std::function<void(const SolverEpochMetrics&)>;

template <class T>
std::vector<SolverEpochMetrics> train_solver(SolverTrainer<T>& trainer, const std::vector<bench::SyntheticScene>& data,
                                             const SceneTokens& tokens, int epochs, std::ostream* log = nullptr,
                                             const SolverEpochCallback& on_epoch = {});

// Normalized RMSE (value / value_scale) over valid pixels of every scene.
template <class T>
double solver_depth_rmse(const SolverModel<T>& model, const Tokenizers<T>& tokenizers,
                         const std::vector<bench::SyntheticScene>& scenes, const DecodeOptions& options,
                         std::size_t batch = 16);
// Per-image mask metrics averaged over scenes.
template <class T>
bench::MaskMetrics solver_mask_metrics(const SolverModel<T>& model, const Tokenizers<T>& tokenizers,
                                       const std::vector<bench::SyntheticScene>& scenes, const DecodeOptions& options,
                                       std::size_t batch = 16);

}  // namespace vistok
