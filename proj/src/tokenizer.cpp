#include "vistok/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace vistok {

TokenizerConfig TokenizerConfig::depth_default() { return TokenizerConfig{}; }

TokenizerConfig TokenizerConfig::mask_default() {
    TokenizerConfig c;
    c.task = TokenizerTask::mask;
    c.n_conv_layers = 4;
    c.channel_schedule = {16, 32, 64, 128};
    c.downsample_ratio = 16;
    c.value_scale = 1.0;
    return c;
}

std::vector<std::size_t> TokenizerConfig::channels() const {
    std::vector<std::size_t> out;
    for (int c : channel_schedule) {
        out.push_back(std::max<std::size_t>(4, static_cast<std::size_t>(std::lround(c * width_multiplier))));
    }
    return out;
}

void TokenizerConfig::validate() const {
    if (n_conv_layers < 1) throw ContractError("tokenizer needs at least one conv layer");
    if (static_cast<int>(channel_schedule.size()) != n_conv_layers) {
        throw ContractError("channel schedule has " + std::to_string(channel_schedule.size()) +
                            " entries for " + std::to_string(n_conv_layers) + " conv layers");
    }
    if (downsample_ratio != (1 << n_conv_layers)) {
        throw ContractError("downsample_ratio " + std::to_string(downsample_ratio) + " != 2^" +
                            std::to_string(n_conv_layers));
    }
    if (codebook_size < 2) throw ContractError("codebook_size must be >= 2");
    if (code_dim < 1) throw ContractError("code_dim must be >= 1");
    if (n_resblocks < 0) throw ContractError("n_resblocks must be >= 0");
    if (!(width_multiplier > 0)) throw ContractError("width_multiplier must be positive");
    for (int c : channel_schedule) {
        if (c < 1) throw ContractError("channel counts must be positive");
    }
    if (!(input_hi > input_lo)) throw ContractError("input range must satisfy lo < hi");
    if (!(value_scale > 0)) throw ContractError("value_scale must be positive");
    if (!(decay >= 0 && decay < 1)) throw ContractError("codebook decay must be in [0,1)");
    if (beta < 0 || epsilon <= 0) throw ContractError("beta >= 0 and epsilon > 0 required");
}

void to_json(nlohmann::json& j, const TokenizerConfig& c) {
    j = {{"task", c.task == TokenizerTask::depth ? "depth" : "mask"},
         {"n_conv_layers", c.n_conv_layers},
         {"n_resblocks", c.n_resblocks},
         {"channel_schedule", c.channel_schedule},
         {"downsample_ratio", c.downsample_ratio},
         {"codebook_size", c.codebook_size},
         {"code_dim", c.code_dim},
         {"width_multiplier", c.width_multiplier},
         {"input_range", {c.input_lo, c.input_hi}},
         {"value_scale", c.value_scale},
         {"decay", c.decay},
         {"epsilon", c.epsilon},
         {"beta", c.beta},
         {"dead_code_threshold", c.dead_code_threshold},
         {"init_codebook_from_data", c.init_codebook_from_data}};
}

void from_json(const nlohmann::json& j, TokenizerConfig& c) {
    const std::string task = j.value("task", std::string("depth"));
    if (task != "depth" && task != "mask") throw ContractError("unknown tokenizer task '" + task + "'");
    c = task == "depth" ? TokenizerConfig::depth_default() : TokenizerConfig::mask_default();
    c.n_conv_layers = j.value("n_conv_layers", c.n_conv_layers);
    c.n_resblocks = j.value("n_resblocks", c.n_resblocks);
    c.channel_schedule = j.value("channel_schedule", c.channel_schedule);
    c.downsample_ratio = j.value("downsample_ratio", c.downsample_ratio);
    c.codebook_size = j.value("codebook_size", c.codebook_size);
    c.code_dim = j.value("code_dim", c.code_dim);
    c.width_multiplier = j.value("width_multiplier", c.width_multiplier);
    if (j.contains("input_range")) {
        c.input_lo = j.at("input_range").at(0).get<double>();
        c.input_hi = j.at("input_range").at(1).get<double>();
    }
    c.value_scale = j.value("value_scale", c.value_scale);
    c.decay = j.value("decay", c.decay);
    c.epsilon = j.value("epsilon", c.epsilon);
    c.beta = j.value("beta", c.beta);
    c.dead_code_threshold = j.value("dead_code_threshold", c.dead_code_threshold);
    c.init_codebook_from_data = j.value("init_codebook_from_data", c.init_codebook_from_data);
}

void MaskAugSpec::validate(std::size_t height, std::size_t width) const {
    if (!(mask_ratio >= 0 && mask_ratio <= 1)) throw ContractError("mask_ratio must be in [0,1]");
    if (patch_size == 0 || height % patch_size || width % patch_size) {
        throw ContractError("patch size " + std::to_string(patch_size) + " does not divide " +
                            std::to_string(height) + "x" + std::to_string(width));
    }
}

namespace nn {

namespace {
std::size_t norm_groups(std::size_t channels) { return std::gcd<std::size_t>(8, channels); }
}  // namespace

template <class T>
ResBlock<T>::ResBlock(std::size_t channels, Rng& rng) {
    const std::size_t hidden = std::max<std::size_t>(4, channels / 4);
    conv1 = Conv2d<T>(channels, hidden, 3, 1, 1, rng, false);
    norm1 = GroupNorm<T>(norm_groups(hidden), hidden);
    conv2 = Conv2d<T>(hidden, channels, 3, 1, 1, rng, false);
    norm2 = GroupNorm<T>(norm_groups(channels), channels);
}

template <class T>
Var<T> ResBlock<T>::operator()(const Var<T>& x) const {
    const auto h = ops::relu(norm1(conv1(x)));
    return ops::add(x, norm2(conv2(h)));
}

template <class T>
void ResBlock<T>::collect(const std::string& prefix, ParamList<T>& out) const {
    conv1.collect(prefix + ".conv1", out);
    norm1.collect(prefix + ".norm1", out);
    conv2.collect(prefix + ".conv2", out);
    norm2.collect(prefix + ".norm2", out);
}

template class ResBlock<float>;
template class ResBlock<double>;

}  // namespace nn

template <class T>
TokenizerModel<T>::TokenizerModel(const TokenizerConfig& cfg, Rng& rng) : config(cfg) {
    config.validate();
    const auto ch = config.channels();
    const std::size_t n = ch.size(), D = config.code_dim;
    for (std::size_t i = 0; i < n; ++i) down.emplace_back(i == 0 ? 1 : ch[i - 1], ch[i], 3, 2, 1, rng);
    for (int b = 0; b < config.n_resblocks; ++b) enc_blocks.emplace_back(ch[n - 1], rng);
    to_code = nn::Conv2d<T>(ch[n - 1], D, 1, 1, 0, rng);
    from_code = nn::Conv2d<T>(D, ch[n - 1], 1, 1, 0, rng);
    for (int b = 0; b < config.n_resblocks; ++b) dec_blocks.emplace_back(ch[n - 1], rng);
    for (std::size_t i = n; i-- > 0;) up.emplace_back(ch[i], i == 0 ? 1 : ch[i - 1], 4, 2, 1, rng);
    codebook = Codebook<T>(config.codebook_size, D, rng, config.decay, config.epsilon);
}

template <class T>
Var<T> TokenizerModel<T>::encode(const Var<T>& x) const {
    if (x.shape().size() != 4 || x.dim(1) != 1) {
        throw ShapeError("tokenizer input must be [N,1,H,W], got " + shape_str(x.shape()));
    }
    check_input(x.dim(2), x.dim(3));
    Var<T> h = x;
    for (const auto& conv : down) h = ops::relu(conv(h));
    for (const auto& block : enc_blocks) h = block(h);
    return to_code(h);
}

template <class T>
Var<T> TokenizerModel<T>::decode_logits(const Var<T>& zq) const {
    if (zq.shape().size() != 4 || zq.dim(1) != config.code_dim) {
        throw ShapeError("decoder input must be [N," + std::to_string(config.code_dim) + ",h,w], got " +
                         shape_str(zq.shape()));
    }
    Var<T> h = from_code(zq);
    for (const auto& block : dec_blocks) h = block(h);
    for (std::size_t i = 0; i < up.size(); ++i) {
        h = up[i](ops::relu(h));
    }
    return h;
}

template <class T>
ParamList<T> TokenizerModel<T>::parameters() const {
    ParamList<T> out;
    for (std::size_t i = 0; i < down.size(); ++i) down[i].collect("enc.conv" + std::to_string(i), out);
    for (std::size_t i = 0; i < enc_blocks.size(); ++i) enc_blocks[i].collect("enc.res" + std::to_string(i), out);
    to_code.collect("enc.to_code", out);
    from_code.collect("dec.from_code", out);
    for (std::size_t i = 0; i < dec_blocks.size(); ++i) dec_blocks[i].collect("dec.res" + std::to_string(i), out);
    for (std::size_t i = 0; i < up.size(); ++i) up[i].collect("dec.deconv" + std::to_string(i), out);
    return out;
}

template <class T>
std::size_t TokenizerModel<T>::parameter_count() const {
    return count_parameters(parameters()) + codebook.size() * codebook.dim();
}

template <class T>
void TokenizerModel<T>::check_input(std::size_t height, std::size_t width) const {
    const auto r = static_cast<std::size_t>(config.downsample_ratio);
    if (height == 0 || width == 0 || height % r || width % r) {
        throw ShapeError("input " + std::to_string(height) + "x" + std::to_string(width) +
                         " not divisible by downsample ratio " + std::to_string(r));
    }
}

template <class T>
void TokenizerModel<T>::save(io::Checkpoint& ckpt) const {
    ckpt.manifest["tokenizer_config"] = config;
    for (const auto& p : parameters()) ckpt.put(p.name, p.var.value());
    codebook.save(ckpt, "codebook");
}

template <class T>
TokenizerModel<T> TokenizerModel<T>::load(const io::Checkpoint& ckpt) {
    if (!ckpt.manifest.contains("tokenizer_config")) throw IoError("checkpoint has no tokenizer_config");
    const TokenizerConfig cfg = ckpt.manifest.at("tokenizer_config").get<TokenizerConfig>();
    Rng rng(0);
    TokenizerModel model(cfg, rng);
    for (auto& p : model.parameters()) {
        auto t = ckpt.get<T>(p.name);
        if (t.shape() != p.var.shape()) {
            throw IoError("parameter '" + p.name + "' has shape " + shape_str(t.shape()) + ", expected " +
                          shape_str(p.var.shape()));
        }
        p.var.mutable_value() = std::move(t);
    }
    model.codebook = Codebook<T>::load(ckpt, "codebook", cfg.decay, cfg.epsilon);
    if (model.codebook.size() != cfg.codebook_size || model.codebook.dim() != cfg.code_dim) {
        throw IoError("codebook shape disagrees with tokenizer_config");
    }
    return model;
}

template <class T>
TokenizerModel<T> build_tokenizer(const TokenizerConfig& config, std::uint64_t seed) {
    Rng rng(seed);
    return TokenizerModel<T>(config, rng);
}

template <class T>
Tensor<T> prepare_input(const DepthMap& map, const TokenizerConfig& config) {
    map.validate();
    Tensor<T> out({1, 1, map.height(), map.width()});
    const double span = config.input_hi - config.input_lo;
    for (std::size_t p = 0; p < map.valid.size(); ++p) {
        if (map.valid[p]) out[p] = static_cast<T>(config.input_lo + span * map.values[p] / config.value_scale);
    }
    return out;
}

template <class T>
Tensor<T> stack_inputs(const std::vector<DepthMap>& maps, const TokenizerConfig& config) {
    if (maps.empty()) throw ContractError("stack_inputs: empty batch");
    const std::size_t H = maps[0].height(), W = maps[0].width();
    Tensor<T> out({maps.size(), 1, H, W});
    for (std::size_t i = 0; i < maps.size(); ++i) {
        if (maps[i].height() != H || maps[i].width() != W) throw ShapeError("stack_inputs: ragged batch");
        const auto one = prepare_input<T>(maps[i], config);
        std::copy_n(one.ptr(), H * W, out.ptr() + i * H * W);
    }
    return out;
}

template <class T>
TokenGrid tokenize(const TokenizerModel<T>& model, const Tensor<T>& input) {
    NoGradGuard guard;
    const auto z = model.encode(Var<T>::constant(input));
    const auto rows = ops::nchw_to_rows(z);
    auto q = quantize_hard(rows.value(), model.codebook);
    return TokenGrid{z.dim(0), z.dim(2), z.dim(3), std::move(q.indices)};
}

template <class T>
TokenGrid tokenize(const TokenizerModel<T>& model, const DepthMap& map) {
    return tokenize(model, prepare_input<T>(map, model.config));
}

namespace {

template <class T>
void check_grid(const TokenizerModel<T>& model, std::size_t n, std::size_t h, std::size_t w,
                std::size_t count) {
    if (n == 0 || h == 0 || w == 0 || count != n * h * w) {
        throw ShapeError("token grid " + std::to_string(n) + "x" + std::to_string(h) + "x" + std::to_string(w) +
                         " does not match " + std::to_string(count) + " entries");
    }
    (void)model;
}

}  // namespace

template <class T>
Tensor<T> detokenize(const TokenizerModel<T>& model, const TokenGrid& tokens) {
    check_grid(model, tokens.n, tokens.h, tokens.w, tokens.ids.size());
    NoGradGuard guard;
    const auto rows = embed_indices<T>(tokens.ids, model.codebook);
    const auto zq = ops::rows_to_nchw(Var<T>::constant(rows), tokens.n, tokens.h, tokens.w);
    return ops::sigmoid(model.decode_logits(zq)).value();
}

template <class T>
Var<T> detokenize_soft(const TokenizerModel<T>& model, const Var<T>& probs, std::size_t n, std::size_t h,
                       std::size_t w) {
    if (probs.shape().size() != 2) throw ShapeError("soft tokens must be [N*h*w, K]");
    check_grid(model, n, h, w, probs.dim(0));
    const auto rows = embed_soft(probs, model.codebook);
    return ops::sigmoid(model.decode_logits(ops::rows_to_nchw(rows, n, h, w)));
}

AugmentedSample mask_augment(const DepthMap& input, const MaskAugSpec& spec, Rng& rng) {
    input.validate();
    const std::size_t H = input.height(), W = input.width(), P = spec.patch_size;
    spec.validate(H, W);
    AugmentedSample out{input, input.values, input.valid, Mask(H * W, 0)};
    const std::size_t gh = H / P, gw = W / P, n = gh * gw;
    const auto k = static_cast<std::size_t>(std::lround(spec.mask_ratio * static_cast<double>(n)));
    if (k == 0) return out;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    // Partial Fisher-Yates: the first k entries are a uniform k-subset.
    for (std::size_t i = 0; i < k; ++i) {
        const std::size_t j = i + rng() % (n - i);
        std::swap(order[i], order[j]);
    }
    for (std::size_t s = 0; s < k; ++s) {
        const std::size_t pi = order[s] / gw, pj = order[s] % gw;
        for (std::size_t y = pi * P; y < (pi + 1) * P; ++y) {
            for (std::size_t x = pj * P; x < (pj + 1) * P; ++x) {
                out.corrupted.values[y * W + x] = spec.fill_value;
                out.patch_mask[y * W + x] = 1;
            }
        }
    }
    return out;
}

template <class T>
TokenizerForward<T> tokenizer_forward(const TokenizerModel<T>& model, const Var<T>& input,
                                      const Tensor<T>& target, const Mask& valid, const FrozenQuant<T>* frozen) {
    if (target.shape() != input.shape() || valid.size() != target.numel()) {
        throw ShapeError("tokenizer_forward: target/valid do not match input " + shape_str(input.shape()));
    }
    TokenizerForward<T> out;
    const auto z = model.encode(input);
    const std::size_t N = z.dim(0), h = z.dim(2), w = z.dim(3);
    const auto rows = ops::nchw_to_rows(z);
    out.z_rows = rows.value();
    Var<T> st;
    if (frozen) {
        if (frozen->z0.shape() != rows.shape() || frozen->zq.shape() != rows.shape()) {
            throw ShapeError("frozen quantization does not match encoder output");
        }
        Tensor<T> offset = frozen->zq;
        for (std::size_t i = 0; i < offset.numel(); ++i) offset[i] -= frozen->z0[i];
        st = ops::add(rows, Var<T>::constant(std::move(offset)));
        out.commit_loss = commitment_loss(rows, frozen->zq, model.config.beta);
        out.indices = quantize_hard(frozen->zq, model.codebook).indices;
    } else {
        auto q = quantize_hard(rows.value(), model.codebook);
        st = ops::straight_through(rows, Var<T>::constant(q.z_q));
        out.commit_loss = commitment_loss(rows, q.z_q, model.config.beta);
        out.indices = std::move(q.indices);
    }
    out.logits = model.decode_logits(ops::rows_to_nchw(st, N, h, w));
    const auto tgt = Var<T>::constant(target);
    out.recon_loss = model.config.task == TokenizerTask::depth
                         ? ops::masked_mse(ops::sigmoid(out.logits), tgt, valid)
                         : ops::masked_bce_with_logits(out.logits, tgt, valid);
    out.loss = ops::add(out.recon_loss, out.commit_loss);
    return out;
}

void to_json(nlohmann::json& j, const TokenizerEpochMetrics& m) {
    j = {{"epoch", m.epoch}, {"loss", m.loss}, {"recon_metric", m.recon_metric}, {"lr", m.lr}};
}

template <class T>
TokenizerTrainer<T>::TokenizerTrainer(TokenizerModel<T>& model, const TrainConfig& cfg,
                                      std::optional<MaskAugSpec> aug)
    : model_(&model), cfg_(cfg), aug_(aug), params_(make_parameters(model.parameters())) {
    cfg_.validate();
    cb_init_ = !model.config.init_codebook_from_data;
}

namespace {

// Target tensor [N,1,H,W] in model units and the matching loss mask.
template <class T>
std::pair<Tensor<T>, Mask> stack_targets(const std::vector<const Tensor<float>*>& values,
                                         const std::vector<const Mask*>& valid, double scale) {
    const std::size_t H = values[0]->dim(0), W = values[0]->dim(1), HW = H * W;
    Tensor<T> t({values.size(), 1, H, W});
    Mask m(values.size() * HW);
    for (std::size_t i = 0; i < values.size(); ++i) {
        for (std::size_t p = 0; p < HW; ++p) {
            const bool ok = (*valid[i])[p];
            m[i * HW + p] = ok;
            t[i * HW + p] = ok ? static_cast<T>((*values[i])[p] / scale) : T(0);
        }
    }
    return {std::move(t), std::move(m)};
}

}  // namespace

template <class T>
TokenizerEpochMetrics TokenizerTrainer<T>::run_epoch(const std::vector<DepthMap>& data) {
    if (data.empty()) throw ContractError("train_tokenizer: empty dataset");
    auto& model = *model_;
    const auto& mc = model.config;
    std::seed_seq seq{static_cast<std::uint64_t>(cfg_.seed), static_cast<std::uint64_t>(epoch_)};
    Rng rng(seq);
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);

    const double lr = lr_at_epoch(cfg_, epoch_);
    TokenizerEpochMetrics m{epoch_ + 1, 0.0, 0.0, lr};
    double loss_sum = 0, metric_num = 0, metric_den = 0;
    const auto B = static_cast<std::size_t>(cfg_.batch_size);
    for (std::size_t start = 0; start < order.size(); start += B) {
        const std::size_t end = std::min(order.size(), start + B);
        std::vector<DepthMap> inputs;
        std::vector<AugmentedSample> augmented;
        std::vector<const Tensor<float>*> tv;
        std::vector<const Mask*> tm;
        for (std::size_t i = start; i < end; ++i) {
            const auto& d = data[order[i]];
            if (aug_) {
                augmented.push_back(mask_augment(d, *aug_, rng));
                inputs.push_back(augmented.back().corrupted);
            } else {
                inputs.push_back(d);
            }
        }
        for (std::size_t i = start; i < end; ++i) {
            if (aug_) {
                tv.push_back(&augmented[i - start].target);
                tm.push_back(&augmented[i - start].loss_mask);
            } else {
                tv.push_back(&data[order[i]].values);
                tm.push_back(&data[order[i]].valid);
            }
        }
        const auto input = Var<T>::constant(stack_inputs<T>(inputs, mc));
        auto [target, valid] = stack_targets<T>(tv, tm, mc.value_scale);

        if (!cb_init_) {
            // Seed the codebook with encoder outputs of the first batch.
            NoGradGuard guard;
            const auto rows = ops::nchw_to_rows(model.encode(input)).value();
            auto& cb = model.codebook;
            const std::size_t M = rows.dim(0), K = cb.size(), D = cb.dim();
            std::vector<std::size_t> pick(M);
            std::iota(pick.begin(), pick.end(), 0);
            for (std::size_t i = M; i > 1; --i) std::swap(pick[i - 1], pick[rng() % i]);
            std::normal_distribution<double> jitter(0.0, 1e-3);
            for (std::size_t k = 0; k < K; ++k) {
                const std::size_t r = pick[k % M];
                for (std::size_t d = 0; d < D; ++d) {
                    const double noise = k < M ? 0.0 : jitter(rng);
                    cb.ema_embed_sum[k * D + d] = static_cast<T>(rows[r * D + d] + noise);
                }
                cb.ema_cluster_size[k] = T(1);
            }
            cb.refresh();
            cb_init_ = true;
        }

        zero_grads(model.parameters());
        const auto fwd = tokenizer_forward(model, input, target, valid);
        const double loss = fwd.loss.item();
        if (!std::isfinite(loss)) {
            throw DivergenceError("non-finite tokenizer loss at epoch " + std::to_string(epoch_ + 1) +
                                  ", batch starting at sample " + std::to_string(start) +
                                  " (recon " + std::to_string(static_cast<double>(fwd.recon_loss.item())) +
                                  ", commit " + std::to_string(static_cast<double>(fwd.commit_loss.item())) + ")");
        }
        fwd.loss.backward();
        adam_step(std::span<Parameter<T>>(params_), lr, cfg_);
        ema_update(model.codebook, fwd.z_rows, std::span<const int>(fwd.indices));
        if (mc.dead_code_threshold > 0) reseed_dead_codes(model.codebook, fwd.z_rows, mc.dead_code_threshold, rng);

        const std::size_t n = end - start;
        loss_sum += loss * static_cast<double>(n);
        const auto& logits = fwd.logits.value();
        const std::size_t HW = logits.numel() / n;
        for (std::size_t i = 0; i < n; ++i) {
            if (mc.task == TokenizerTask::depth) {
                for (std::size_t p = 0; p < HW; ++p) {
                    if (!valid[i * HW + p]) continue;
                    const double pred = 1.0 / (1.0 + std::exp(-static_cast<double>(logits[i * HW + p])));
                    const double e = pred - target[i * HW + p];
                    metric_num += e * e;
                    metric_den += 1;
                }
            } else {
                std::size_t inter = 0, uni = 0;
                for (std::size_t p = 0; p < HW; ++p) {
                    if (!valid[i * HW + p]) continue;
                    const bool a = logits[i * HW + p] >= 0, b = target[i * HW + p] >= T(0.5);
                    inter += a && b;
                    uni += a || b;
                }
                metric_num += uni ? static_cast<double>(inter) / uni : 1.0;
                metric_den += 1;
            }
        }
    }
    m.loss = loss_sum / static_cast<double>(data.size());
    m.recon_metric = metric_den > 0 ? metric_num / metric_den : 0.0;
    if (mc.task == TokenizerTask::depth) m.recon_metric = std::sqrt(m.recon_metric);
    ++epoch_;
    return m;
}

template <class T>
void TokenizerTrainer<T>::save(io::Checkpoint& ckpt) const {
    nlohmann::json steps = nlohmann::json::object();
    for (const auto& p : params_) {
        ckpt.put("adam." + p.name + ".m", p.m);
        ckpt.put("adam." + p.name + ".v", p.v);
        steps[p.name] = p.step;
    }
    ckpt.manifest["trainer"] = {{"epoch", epoch_}, {"codebook_initialized", cb_init_}, {"steps", steps}};
}

template <class T>
void TokenizerTrainer<T>::load(const io::Checkpoint& ckpt) {
    if (!ckpt.manifest.contains("trainer")) throw IoError("checkpoint has no trainer state");
    const auto& tr = ckpt.manifest.at("trainer");
    epoch_ = tr.at("epoch").get<int>();
    cb_init_ = tr.at("codebook_initialized").get<bool>();
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
std::vector<TokenizerEpochMetrics> train_tokenizer(TokenizerTrainer<T>& trainer, const std::vector<DepthMap>& data,
                                                   int epochs, std::ostream* log, const EpochCallback& on_epoch) {
    std::vector<TokenizerEpochMetrics> out;
    while (trainer.epoch() < epochs) {
        const auto m = trainer.run_epoch(data);
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
std::vector<Tensor<float>> reconstruct(const TokenizerModel<T>& model, const std::vector<DepthMap>& maps,
                                       std::size_t batch) {
    std::vector<Tensor<float>> out;
    batch = std::max<std::size_t>(1, batch);
    for (std::size_t s = 0; s < maps.size(); s += batch) {
        const std::vector<DepthMap> chunk(maps.begin() + s, maps.begin() + std::min(maps.size(), s + batch));
        const auto rec = detokenize(model, tokenize(model, stack_inputs<T>(chunk, model.config)));
        const std::size_t H = chunk[0].height(), W = chunk[0].width();
        for (std::size_t i = 0; i < chunk.size(); ++i) {
            Tensor<float> t({H, W});
            for (std::size_t p = 0; p < H * W; ++p) {
                t[p] = static_cast<float>(rec[i * H * W + p] * model.config.value_scale);
            }
            out.push_back(std::move(t));
        }
    }
    return out;
}

double reconstruction_rmse(const std::vector<Tensor<float>>& recon, const std::vector<DepthMap>& gt,
                           double value_scale, const std::vector<Mask>* select) {
    if (recon.size() != gt.size()) throw ShapeError("reconstruction_rmse: count mismatch");
    double se = 0, n = 0;
    for (std::size_t i = 0; i < gt.size(); ++i) {
        const Mask& m = select ? (*select)[i] : gt[i].valid;
        for (std::size_t p = 0; p < m.size(); ++p) {
            if (!m[p]) continue;
            const double e = (static_cast<double>(recon[i][p]) - gt[i].values[p]) / value_scale;
            se += e * e;
            n += 1;
        }
    }
    if (n == 0) throw ContractError("reconstruction_rmse: no selected pixels");
    return std::sqrt(se / n);
}

double reconstruction_iou(const std::vector<Tensor<float>>& recon, const std::vector<DepthMap>& gt) {
    if (recon.size() != gt.size() || gt.empty()) throw ShapeError("reconstruction_iou: count mismatch");
    double total = 0;
    for (std::size_t i = 0; i < gt.size(); ++i) {
        std::size_t inter = 0, uni = 0;
        for (std::size_t p = 0; p < gt[i].values.numel(); ++p) {
            const bool a = recon[i][p] >= 0.5f, b = gt[i].values[p] >= 0.5f;
            inter += a && b;
            uni += a || b;
        }
        total += uni ? static_cast<double>(inter) / uni : 1.0;
    }
    return total / static_cast<double>(gt.size());
}

void InterpCodec::validate() const {
    if (n_bins < 2) throw ContractError("interpolation codec needs n_bins >= 2");
    if (ratio == 0) throw ContractError("interpolation ratio must be positive");
    if (!(hi > lo)) throw ContractError("interpolation range must satisfy lo < hi");
}

namespace {

// Bilinear sample with half-pixel centers and edge clamping.
double bilinear_at(const float* img, std::size_t H, std::size_t W, double sy, double sx) {
    sy = std::clamp(sy, 0.0, static_cast<double>(H - 1));
    sx = std::clamp(sx, 0.0, static_cast<double>(W - 1));
    const auto y0 = static_cast<std::size_t>(std::floor(sy)), x0 = static_cast<std::size_t>(std::floor(sx));
    const std::size_t y1 = std::min(y0 + 1, H - 1), x1 = std::min(x0 + 1, W - 1);
    const double fy = sy - y0, fx = sx - x0;
    const double top = img[y0 * W + x0] * (1 - fx) + img[y0 * W + x1] * fx;
    const double bot = img[y1 * W + x0] * (1 - fx) + img[y1 * W + x1] * fx;
    return top * (1 - fy) + bot * fy;
}

}  // namespace

TokenGrid interp_tokenize(const Tensor<float>& map2d, const InterpCodec& codec) {
    codec.validate();
    if (map2d.ndim() != 2) throw ShapeError("interp_tokenize expects [H,W]");
    const std::size_t H = map2d.dim(0), W = map2d.dim(1), r = codec.ratio;
    if (H % r || W % r) throw ShapeError("input not divisible by interpolation ratio");
    TokenGrid g{1, H / r, W / r, {}};
    g.ids.resize(g.h * g.w);
    for (std::size_t i = 0; i < g.h; ++i) {
        for (std::size_t j = 0; j < g.w; ++j) {
            double v;
            if (codec.mode == InterpMode::nearest) {
                v = map2d[(i * r + r / 2) * W + j * r + r / 2];
            } else {
                v = bilinear_at(map2d.ptr(), H, W, (i + 0.5) * r - 0.5, (j + 0.5) * r - 0.5);
            }
            const double u = (v - codec.lo) / (codec.hi - codec.lo) * codec.n_bins;
            g.ids[i * g.w + j] = std::clamp(static_cast<int>(std::floor(u)), 0, codec.n_bins - 1);
        }
    }
    return g;
}

Tensor<float> interp_detokenize(const TokenGrid& tokens, const InterpCodec& codec) {
    codec.validate();
    if (tokens.n != 1 || tokens.ids.size() != tokens.h * tokens.w) throw ShapeError("interp_detokenize: bad grid");
    const std::size_t h = tokens.h, w = tokens.w, r = codec.ratio;
    std::vector<float> centers(h * w);
    for (std::size_t k = 0; k < centers.size(); ++k) {
        const int b = tokens.ids[k];
        if (b < 0 || b >= codec.n_bins) throw IndexError("interpolation token " + std::to_string(b) + " out of range");
        centers[k] = static_cast<float>(codec.lo + (b + 0.5) * (codec.hi - codec.lo) / codec.n_bins);
    }
    Tensor<float> out({h * r, w * r});
    for (std::size_t y = 0; y < h * r; ++y) {
        for (std::size_t x = 0; x < w * r; ++x) {
            out[y * w * r + x] = codec.mode == InterpMode::nearest
                                     ? centers[(y / r) * w + x / r]
                                     : static_cast<float>(bilinear_at(centers.data(), h, w, (y + 0.5) / r - 0.5,
                                                                      (x + 0.5) / r - 0.5));
        }
    }
    return out;
}

#define VISTOK_INSTANTIATE_TOKENIZER(T)                                                                      \
    template class TokenizerModel<T>;                                                                        \
    template class TokenizerTrainer<T>;                                                                      \
    template TokenizerModel<T> build_tokenizer(const TokenizerConfig&, std::uint64_t);                      \
    template Tensor<T> prepare_input(const DepthMap&, const TokenizerConfig&);                              \
    template Tensor<T> stack_inputs(const std::vector<DepthMap>&, const TokenizerConfig&);                  \
    template TokenGrid tokenize(const TokenizerModel<T>&, const Tensor<T>&);                                \
    template TokenGrid tokenize(const TokenizerModel<T>&, const DepthMap&);                                 \
    template Tensor<T> detokenize(const TokenizerModel<T>&, const TokenGrid&);                              \
    template Var<T> detokenize_soft(const TokenizerModel<T>&, const Var<T>&, std::size_t, std::size_t,      \
                                    std::size_t);                                                           \
    template TokenizerForward<T> tokenizer_forward(const TokenizerModel<T>&, const Var<T>&, const Tensor<T>&, \
                                                   const Mask&, const FrozenQuant<T>*);                     \
    template std::vector<TokenizerEpochMetrics> train_tokenizer(TokenizerTrainer<T>&,                        \
                                                                const std::vector<DepthMap>&, int,           \
                                                                std::ostream*, const EpochCallback&);        \
    template std::vector<Tensor<float>> reconstruct(const TokenizerModel<T>&, const std::vector<DepthMap>&,  \
                                                    std::size_t);

VISTOK_INSTANTIATE_TOKENIZER(float)
VISTOK_INSTANTIATE_TOKENIZER(double)

#undef VISTOK_INSTANTIATE_TOKENIZER

}  // namespace vistok
