#pragma once

#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vistok/optim.hpp"
#include "vistok/types.hpp"
#include "vistok/vq.hpp"

namespace vistok {

enum class TokenizerTask { depth, mask };

struct TokenizerConfig {
    TokenizerTask task = TokenizerTask::depth;
    int n_conv_layers = 5;
    int n_resblocks = 2;
    std::vector<int> channel_schedule{16, 32, 64, 128, 256};
    int downsample_ratio = 32;
    std::size_t codebook_size = 128;
    std::size_t code_dim = 32;
    double width_multiplier = 1.0;
    double input_lo = 0.0;
    double input_hi = 1.0;
    // Raw values are divided by this before entering the model (10 m for depth).
    double value_scale = 10.0;
    double decay = 0.99;
    double epsilon = 1e-5;
    double beta = 0.25;
    // EMA cluster size below which a code is re-seeded from the batch.
    double dead_code_threshold = 0.02;
    bool init_codebook_from_data = true;

    static TokenizerConfig depth_default();
    static TokenizerConfig mask_default();
    // Channels after the width multiplier (rounded, at least 4).
    std::vector<std::size_t> channels() const;
    void validate() const;
};

void to_json(nlohmann::json& j, const TokenizerConfig& c);
void from_json(const nlohmann::json& j, TokenizerConfig& c);

struct MaskAugSpec {
    double mask_ratio = 0.0;
    std::size_t patch_size = 16;
    float fill_value = 0.0f;

    void validate(std::size_t height, std::size_t width) const;
};

// Row-major token grids for a batch.
struct TokenGrid {
    std::size_t n = 1, h = 0, w = 0;
    std::vector<int> ids;
};

namespace nn {

template <class T>
class ResBlock {
public:
    ResBlock() = default;
    ResBlock(std::size_t channels, Rng& rng);
    Var<T> operator()(const Var<T>& x) const;
    void collect(const std::string& prefix, ParamList<T>& out) const;

    Conv2d<T> conv1, conv2;
    GroupNorm<T> norm1, norm2;
};

}  // namespace nn

template <class T>
class TokenizerModel {
public:
    TokenizerModel() = default;
    TokenizerModel(const TokenizerConfig& config, Rng& rng);

    // x[N,1,H,W] in input units -> z[N,D,h,w]
    Var<T> encode(const Var<T>& x) const;
    // z_q[N,D,h,w] -> logits[N,1,H,W]; outputs are sigmoid(logits)
    Var<T> decode_logits(const Var<T>& zq) const;

    ParamList<T> parameters() const;  // excludes the codebook
    std::size_t parameter_count() const;
    void save(io::Checkpoint& ckpt) const;
    static TokenizerModel load(const io::Checkpoint& ckpt);

    // Checks that an H x W input is divisible by the downsample ratio.
    void check_input(std::size_t height, std::size_t width) const;

    TokenizerConfig config;
    std::vector<nn::Conv2d<T>> down;
    std::vector<nn::ResBlock<T>> enc_blocks;
    nn::Conv2d<T> to_code;
    nn::Conv2d<T> from_code;
    std::vector<nn::ResBlock<T>> dec_blocks;
    std::vector<nn::ConvTranspose2d<T>> up;
    Codebook<T> codebook;
};

template <class T>
TokenizerModel<T> build_tokenizer(const TokenizerConfig& config, std::uint64_t seed);

// Model input for one map: values / value_scale mapped into the input range, invalid pixels 0.
template <class T>
Tensor<T> prepare_input(const DepthMap& map, const TokenizerConfig& config);
// Stacks prepared inputs into [N,1,H,W].
template <class T>
Tensor<T> stack_inputs(const std::vector<DepthMap>& maps, const TokenizerConfig& config);

template <class T>
TokenGrid tokenize(const TokenizerModel<T>& model, const Tensor<T>& input_nchw);
template <class T>
TokenGrid tokenize(const TokenizerModel<T>& model, const DepthMap& map);

// Hard path: code rows by index. Output [N,1,H,W] in [0,1].
template <class T>
Tensor<T> detokenize(const TokenizerModel<T>& model, const TokenGrid& tokens);
// Soft path: probs[N*h*w, K] row-major over the grid; differentiable in probs.
template <class T>
Var<T> detokenize_soft(const TokenizerModel<T>& model, const Var<T>& probs, std::size_t n,
                       std::size_t h, std::size_t w);

struct AugmentedSample {
    DepthMap corrupted;   // model input; masked patches hold fill_value, validity unchanged
    Tensor<float> target; // original values
    Mask loss_mask;       // original validity
    Mask patch_mask;      // 1 on pixels of masked patches
};

AugmentedSample mask_augment(const DepthMap& input, const MaskAugSpec& spec, Rng& rng);

// Base point for gradient checks: quantization replaced by a fixed offset z -> z + (z_q - z0).
template <class T>
struct FrozenQuant {
    Tensor<T> z0;  // rows [N*h*w, D]
    Tensor<T> zq;
};

template <class T>
struct TokenizerForward {
    Var<T> loss;
    Var<T> recon_loss;
    Var<T> commit_loss;
    Var<T> logits;           // [N,1,H,W]
    Tensor<T> z_rows;        // encoder output rows [N*h*w, D]
    std::vector<int> indices;
};

// Training objective on a prepared batch. target in model units, valid per pixel.
template <class T>
TokenizerForward<T> tokenizer_forward(const TokenizerModel<T>& model, const Var<T>& input,
                                      const Tensor<T>& target, const Mask& valid,
                                      const FrozenQuant<T>* frozen = nullptr);

struct TokenizerEpochMetrics {
    int epoch = 0;
    double loss = 0;
    double recon_metric = 0;  // RMSE for depth, IoU at 0.5 for masks; on training batches
    double lr = 0;
};
void to_json(nlohmann::json& j, const TokenizerEpochMetrics& m);

// Raised when the training loss becomes non-finite.
struct DivergenceError : Error {
    using Error::Error;
};

// Optimizer state plus the epoch counter; serializable for bit-identical resume.
template <class T>
class TokenizerTrainer {
public:
    TokenizerTrainer(TokenizerModel<T>& model, const TrainConfig& cfg,
                     std::optional<MaskAugSpec> aug = std::nullopt);

    TokenizerEpochMetrics run_epoch(const std::vector<DepthMap>& data);
    int epoch() const { return epoch_; }
    bool codebook_initialized() const { return cb_init_; }

    void save(io::Checkpoint& ckpt) const;
    void load(const io::Checkpoint& ckpt);

private:
    TokenizerModel<T>* model_;
    TrainConfig cfg_;
    std::optional<MaskAugSpec> aug_;
    std::vector<Parameter<T>> params_;
    int epoch_ = 0;
    bool cb_init_ = false;
};

using EpochCallback = std::function<void(const TokenizerEpochMetrics&)>;

// Runs the remaining epochs, emitting one JSONL row per epoch to `log` when given.
template <class T>
std::vector<TokenizerEpochMetrics> train_tokenizer(TokenizerTrainer<T>& trainer,
                                                   const std::vector<DepthMap>& data, int epochs,
                                                   std::ostream* log = nullptr,
                                                   const EpochCallback& on_epoch = {});

// Hard reconstruction of each map in value units [H,W].
template <class T>
std::vector<Tensor<float>> reconstruct(const TokenizerModel<T>& model, const std::vector<DepthMap>& maps,
                                       std::size_t batch = 16);

// RMSE in model units over the selected pixels of every map (valid pixels when select is null).
double reconstruction_rmse(const std::vector<Tensor<float>>& recon, const std::vector<DepthMap>& gt,
                           double value_scale, const std::vector<Mask>* select = nullptr);
// Mean IoU of binarized (>= 0.5) reconstructions against binary targets.
double reconstruction_iou(const std::vector<Tensor<float>>& recon, const std::vector<DepthMap>& gt);

// Parameter-free codec: nearest (masks) or bilinear + uniform bins (depth).
enum class InterpMode { nearest, bilinear };

struct InterpCodec {
    std::size_t ratio = 16;
    InterpMode mode = InterpMode::nearest;
    int n_bins = 128;
    double lo = 0.0;
    double hi = 10.0;

    void validate() const;
};

TokenGrid interp_tokenize(const Tensor<float>& map2d, const InterpCodec& codec);
// Inverse at full resolution: bin centers, then nearest or bilinear upsampling.
Tensor<float> interp_detokenize(const TokenGrid& tokens, const InterpCodec& codec);

}  // namespace vistok
