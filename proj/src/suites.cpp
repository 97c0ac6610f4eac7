#include "vistok/suites.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

#include "vistok/solver.hpp"

namespace vistok::suites {

using V = Var<double>;

bool SuiteReport::passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.passed(); });
}

double SuiteReport::worst() const {
    double w = 0;
    for (const auto& c : checks) w = std::max(w, c.bound > 0 ? c.value / c.bound : (c.value > 0 ? INFINITY : 0.0));
    return w;
}

void to_json(nlohmann::json& j, const Check& c) {
    j = {{"name", c.name}, {"value", c.value}, {"bound", c.bound}, {"passed", c.passed()}};
    if (!c.detail.empty()) j["detail"] = c.detail;
}

void to_json(nlohmann::json& j, const SuiteReport& r) {
    j = {{"suite", r.suite}, {"passed", r.passed()}, {"seconds", r.seconds}, {"checks", r.checks}};
}

namespace {

Tensor<double> rand_t(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> d(lo, hi);
    Tensor<double> t(std::move(s));
    for (auto& v : t.vec()) v = d(rng);
    return t;
}

using Inputs = std::vector<Tensor<double>>;

class Timer {
public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

TokenizerConfig tiny_tokenizer(TokenizerTask task) {
    auto c = task == TokenizerTask::depth ? TokenizerConfig::depth_default() : TokenizerConfig::mask_default();
    c.n_conv_layers = 2;
    c.channel_schedule = {4, 8};
    c.downsample_ratio = 4;
    c.n_resblocks = 1;
    c.codebook_size = 8;
    c.code_dim = 4;
    return c;
}

// Encoder -> fixed quantization offset -> decoder, for a 2x1x16x16 batch.
GradCase tokenizer_case(TokenizerTask task, std::uint64_t seed) {
    const auto base = std::make_shared<TokenizerModel<double>>(build_tokenizer<double>(tiny_tokenizer(task), seed));
    Rng rng(seed + 10);
    const auto x0 = uniform_tensor<double>({2, 1, 16, 16}, 1.0, rng);
    Tensor<double> shift;
    {
        NoGradGuard g;
        const auto z0 = ops::nchw_to_rows(base->encode(V::constant(x0))).value();
        shift = quantize_hard(z0, base->codebook).z_q;
        for (std::size_t i = 0; i < shift.numel(); ++i) shift[i] -= z0[i];
    }
    GradCase c;
    c.name = std::string(task == TokenizerTask::depth ? "tokenizer_depth" : "tokenizer_mask");
    c.fn = [base, shift](const std::vector<V>& in) {
        auto m = *base;
        m.down[0].weight = in[1];
        m.enc_blocks[0].norm1.gamma = in[2];
        m.from_code.weight = in[3];
        m.up.back().weight = in[4];
        const auto rows = ops::add(ops::nchw_to_rows(m.encode(in[0])), V::constant(shift));
        return probe(m.decode_logits(ops::rows_to_nchw(rows, 2, 4, 4)));
    };
    c.inputs = {x0, base->down[0].weight.value(), base->enc_blocks[0].norm1.gamma.value(),
                base->from_code.weight.value(), base->up.back().weight.value()};
    return c;
}

GradCase solver_case(std::uint64_t seed) {
    SolverConfig cfg;
    cfg.embed_dim = 8;
    cfg.n_heads = 2;
    cfg.n_encoder_blocks = 1;
    cfg.n_decoder_blocks = 1;
    cfg.ffn_mult = 2;
    cfg.vocab.n_coord_bins = 8;
    cfg.vocab.mask_codes = 4;
    cfg.vocab.depth_codes = 4;
    cfg.depth_tokens = 4;
    cfg.max_seq_len = 8;
    const auto base = std::make_shared<SolverModel<double>>(build_solver<double>(cfg, seed));
    Rng rng(seed + 10);
    const auto img = uniform_tensor<double>({2, 3, 16, 16}, 1.0, rng);
    const auto d = [&](int k) { return cfg.vocab.depth_code(k); };
    const std::vector<int> ids{Vocabulary::DEP, d(0), d(1), d(2), Vocabulary::DEP, d(3), d(2), d(0)};
    GradCase c;
    c.name = "solver";
    c.fn = [base, ids](const std::vector<V>& in) {
        auto m = *base;
        m.stem.weight = in[1];
        m.encoder[0].ff1.weight = in[2];
        m.decoder[0].cross_attn.q.weight = in[3];
        m.decoder[0].ln3.gamma = in[4];
        m.head.weight = in[5];
        m.token_embed.table = in[6];
        const auto mem = m.encode_image(in[0]);
        return probe(m.decode(mem, m.add_positions(m.embed_tokens(ids, 2, 4)), true));
    };
    c.inputs = {img, base->stem.weight.value(), base->encoder[0].ff1.weight.value(),
                base->decoder[0].cross_attn.q.weight.value(), base->decoder[0].ln3.gamma.value(),
                base->head.weight.value(), base->token_embed.table.value()};
    return c;
}

// Code logits -> softmax -> soft embedding -> frozen decoder.
GradCase aux_case(TokenizerTask task, std::uint64_t seed) {
    const auto tok = std::make_shared<TokenizerModel<double>>(build_tokenizer<double>(tiny_tokenizer(task), seed));
    Rng rng(seed + 20);
    const std::size_t K = tok->codebook.size();
    GradCase c;
    c.name = std::string(task == TokenizerTask::depth ? "aux_depth" : "aux_mask");
    if (task == TokenizerTask::depth) {
        c.fn = [tok](const std::vector<V>& in) {
            return probe(detokenize_soft(*tok, ops::softmax(in[0]), 2, 4, 4));
        };
    } else {
        c.fn = [tok](const std::vector<V>& in) {
            const auto z = ops::rows_to_nchw(embed_soft(ops::softmax(in[0]), tok->codebook), 2, 4, 4);
            return probe(tok->decode_logits(z));
        };
    }
    c.inputs = {rand_t({2 * 16, K}, rng, -2, 2)};
    return c;
}

}  // namespace

Var<double> probe(const Var<double>& x, std::uint64_t seed) {
    Rng rng(seed);
    return ops::sum(ops::mul(x, V::constant(rand_t(x.shape(), rng))));
}

std::vector<GradCase> primitive_cases(int s) {
    Rng r(100 + s);
    std::vector<GradCase> out;
    auto add = [&](std::string name, ScalarFn fn, Inputs in) {
        out.push_back({std::move(name), std::move(fn), std::move(in)});
    };
    add("add", [](const auto& v) { return probe(ops::add(v[0], v[1])); },
        {rand_t({2, 3ul + s}, r), rand_t({2, 3ul + s}, r)});
    add("sub", [](const auto& v) { return probe(ops::sub(v[0], v[1])); }, {rand_t({4ul + s}, r), rand_t({4ul + s}, r)});
    add("mul", [](const auto& v) { return probe(ops::mul(v[0], v[1])); },
        {rand_t({3, s + 1ul}, r), rand_t({3, s + 1ul}, r)});
    add("add_broadcast", [](const auto& v) { return probe(ops::add_broadcast(v[0], v[1])); },
        {rand_t({2, s + 1ul, 3}, r), rand_t({s + 1ul, 3}, r)});
    add("scale", [](const auto& v) { return probe(ops::scale(ops::add_scalar(v[0], 0.5), -1.7)); },
        {rand_t({5, s + 2ul}, r)});
    {
        auto t = rand_t({3, s + 3ul}, r);
        for (auto& x : t.vec()) x += x > 0 ? 0.1 : -0.1;  // away from the kink
        add("relu", [](const auto& v) { return probe(ops::relu(v[0])); }, {t});
    }
    add("sigmoid", [](const auto& v) { return probe(ops::sigmoid(v[0])); }, {rand_t({s + 2ul, 4}, r, -3, 3)});
    add("mean", [](const auto& v) { return ops::mean(ops::mul(v[0], v[0])); }, {rand_t({s + 1ul, 3}, r)});
    add("matmul", [](const auto& v) { return probe(ops::matmul(v[0], v[1])); },
        {rand_t({3, s + 2ul}, r), rand_t({s + 2ul, 4}, r)});
    add("linear", [](const auto& v) { return probe(ops::linear(v[0], v[1], std::optional<V>(v[2]))); },
        {rand_t({2, s + 1ul, 5}, r), rand_t({3, 5}, r), rand_t({3}, r)});
    add("softmax", [](const auto& v) { return probe(ops::softmax(v[0], 1)); }, {rand_t({2, s + 3ul, 2}, r, -2, 2)});
    add("layer_norm", [](const auto& v) { return probe(ops::layer_norm(v[0], v[1], v[2])); },
        {rand_t({s + 2ul, 6}, r), rand_t({6}, r, 0.5, 1.5), rand_t({6}, r)});
    add("group_norm", [](const auto& v) { return probe(ops::group_norm(v[0], 2, v[1], v[2])); },
        {rand_t({2, 4, s + 2ul, 3}, r), rand_t({4}, r, 0.5, 1.5), rand_t({4}, r)});
    add("embedding",
        [](const auto& v) {
            const std::vector<int> ids{2, 0, 2, 1};
            return probe(ops::embedding(v[0], ids));
        },
        {rand_t({3, s + 2ul}, r)});
    add("attention", [](const auto& v) { return probe(ops::attention(v[0], v[1], v[2], 2, false)); },
        {rand_t({2, s + 1ul, 4}, r), rand_t({2, 3, 4}, r), rand_t({2, 3, 4}, r)});
    add("attention_causal", [](const auto& v) { return probe(ops::attention(v[0], v[1], v[2], 2, true)); },
        {rand_t({1, s + 2ul, 4}, r), rand_t({1, s + 2ul, 4}, r), rand_t({1, s + 2ul, 4}, r)});
    add("nchw_rows",
        [](const auto& v) {
            auto rows = ops::nchw_to_rows(v[0]);
            return probe(ops::rows_to_nchw(ops::scale(rows, 2.0), v[0].dim(0), v[0].dim(2), v[0].dim(3)));
        },
        {rand_t({2, 3, s + 1ul, 2}, r)});
    add("slice_select",
        [](const auto& v) {
            const std::vector<std::size_t> idx{1, 1, 0};
            return probe(ops::select_rows(ops::slice_last(v[0], 1, 3), idx));
        },
        {rand_t({2, s + 4ul}, r)});
    add("reshape", [](const auto& v) { return probe(ops::reshape(v[0], {v[0].numel()})); }, {rand_t({2, s + 1ul}, r)});
    add("masked_cross_entropy",
        [](const auto& v) {
            const std::vector<int> t{0, 2, 1};
            const Mask ig{0, 1, 0};
            return ops::masked_cross_entropy(v[0], t, ig);
        },
        {rand_t({3, s + 3ul}, r, -2, 2)});
    add("masked_mse",
        [](const auto& v) {
            Mask valid(v[0].numel(), 1);
            valid[0] = 0;
            return ops::masked_mse(v[0], v[1], valid);
        },
        {rand_t({s + 2ul, 3}, r), rand_t({s + 2ul, 3}, r)});
    add("masked_bce",
        [](const auto& v) {
            Mask valid(v[0].numel(), 1);
            if (!valid.empty()) valid.back() = 0;
            return ops::masked_bce_with_logits(v[0], v[1], valid);
        },
        {rand_t({s + 2ul, 3}, r, -3, 3), rand_t({s + 2ul, 3}, r, 0, 1)});
    for (std::size_t stride : {1ul, 2ul}) {
        const std::size_t side = 5 + s;
        add("conv2d_stride" + std::to_string(stride),
            [stride](const auto& v) { return probe(ops::conv2d(v[0], v[1], std::optional<V>(v[2]), stride, 1)); },
            {rand_t({1, 2, side, side}, r), rand_t({3, 2, 3, 3}, r), rand_t({3}, r)});
    }
    add("conv_transpose2d",
        [](const auto& v) { return probe(ops::conv_transpose2d(v[0], v[1], std::optional<V>(v[2]), 2, 1)); },
        {rand_t({2, 3, 3, s + 2ul}, r), rand_t({3, 2, 4, 4}, r), rand_t({2}, r)});
    return out;
}

std::vector<GradCase> composed_cases() {
    return {tokenizer_case(TokenizerTask::depth, 0), tokenizer_case(TokenizerTask::mask, 1), solver_case(0),
            aux_case(TokenizerTask::depth, 2), aux_case(TokenizerTask::mask, 3)};
}

SuiteReport gradient_suite(double eps, double tol) {
    const Timer timer;
    SuiteReport rep{"gradient", {}, 0.0};
    auto run = [&](const GradCase& c, const std::string& name) {
        const auto r = grad_check_report(c.fn, c.inputs, eps);
        std::ostringstream d;
        d << "input " << r.worst_input << "[" << r.worst_index << "] analytic " << r.analytic << " numeric "
          << r.numeric;
        rep.checks.push_back({name, r.max_rel_error, tol, d.str()});
    };
    for (int s = 0; s < 3; ++s)
        for (const auto& c : primitive_cases(s)) run(c, c.name + "/" + std::to_string(s));
    for (const auto& c : composed_cases()) run(c, c.name);
    rep.seconds = timer.seconds();
    return rep;
}

namespace {

Tensor<double> random_simplex_rows(std::size_t n, std::size_t k, Rng& rng) {
    std::exponential_distribution<double> ex(1.0);
    Tensor<double> p({n, k});
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < k; ++j) s += (p[i * k + j] = ex(rng));
        for (std::size_t j = 0; j < k; ++j) p[i * k + j] /= s;
    }
    return p;
}

}  // namespace

SuiteReport vq_suite(std::size_t trials, std::uint64_t seed) {
    const Timer timer;
    Rng rng(seed);
    double onehot = 0, idem = 0, convex = 0, ema = 0;
    for (std::size_t t = 0; t < trials; ++t) {
        const std::size_t K = 2 + rng() % 30, D = 1 + rng() % 6, N = 1 + rng() % 8;
        Codebook<double> cb(K, D, rng, 0.95);
        const auto& E = cb.embeddings.value();

        std::vector<int> idx(N);
        for (auto& i : idx) i = static_cast<int>(rng() % K);
        const auto soft = embed_soft(V::constant(one_hot<double>(idx, K)), cb).value();
        const auto hard = embed_indices<double>(idx, cb);
        for (std::size_t i = 0; i < soft.numel(); ++i) onehot = std::max(onehot, std::abs(soft[i] - hard[i]));

        const auto q = quantize_hard(E, cb);
        const auto q2 = quantize_hard(q.z_q, cb);
        for (std::size_t i = 0; i < q.z_q.numel(); ++i) idem = std::max(idem, std::abs(q2.z_q[i] - q.z_q[i]));

        const auto out = embed_soft(V::constant(random_simplex_rows(N, K, rng)), cb).value();
        for (std::size_t d = 0; d < D; ++d) {
            double lo = INFINITY, hi = -INFINITY;
            for (std::size_t k = 0; k < K; ++k) {
                lo = std::min(lo, E[k * D + d]);
                hi = std::max(hi, E[k * D + d]);
            }
            for (std::size_t i = 0; i < N; ++i) {
                const double v = out[i * D + d];
                convex = std::max(convex, std::max(lo - v, v - hi));
            }
        }

        const std::size_t B = 1 + rng() % 40;
        const auto z = uniform_tensor<double>({B, D}, 1.0, rng);
        double before = 0, after = 0;
        for (double c : cb.ema_cluster_size.data()) before += c;
        ema_update(cb, z, quantize_hard(z, cb).indices);
        for (double c : cb.ema_cluster_size.data()) after += c;
        ema = std::max(ema, std::abs(after - (cb.decay * before + (1 - cb.decay) * static_cast<double>(B))));
    }
    SuiteReport rep{"vq", {}, 0.0};
    rep.checks.push_back({"one_hot_soft_equals_hard", onehot, 0.0, ""});
    rep.checks.push_back({"quantize_idempotent", idem, 0.0, ""});
    rep.checks.push_back({"soft_embedding_in_hull", std::max(convex, 0.0), 1e-12, ""});
    rep.checks.push_back({"ema_count_conservation", ema, 1e-5, ""});
    rep.seconds = timer.seconds();
    return rep;
}

SuiteReport codec_suite(std::size_t n, std::uint64_t seed) {
    const Timer timer;
    const Vocabulary v;
    Rng rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double box_err = 0, ins_mismatch = 0, dep_mismatch = 0;
    for (std::size_t trial = 0; trial < n; ++trial) {
        std::vector<InstanceRecord> recs(rng() % 8);
        for (auto& r : recs) {
            const double a = u(rng), b = u(rng), c = u(rng), d = u(rng);
            r.box = {std::min(a, b), std::min(c, d), std::max(a, b), std::max(c, d)};
            r.is_noise = rng() % 4 == 0;
            r.class_id = r.is_noise ? v.n_classes : static_cast<int>(rng() % v.n_classes);
            for (std::size_t i = 0; i < kMaskTokens; ++i) r.mask_ids.push_back(static_cast<int>(rng() % v.mask_codes));
        }
        const auto seq = encode_records(recs, v);
        const auto back = decode_records(seq, v);
        bool ok = back.size() == recs.size() && seq.ids.size() == recs.size() * kRecordLength + 1;
        for (std::size_t i = 0; ok && i < recs.size(); ++i) {
            ok = back[i].class_id == recs[i].class_id && back[i].is_noise == recs[i].is_noise &&
                 back[i].mask_ids == recs[i].mask_ids;
            for (int k = 0; k < 4; ++k) box_err = std::max(box_err, std::abs(back[i].box[k] - recs[i].box[k]));
        }
        ok = ok && encode_records(back, v).ids == seq.ids;
        ins_mismatch += !ok;

        TokenGrid g{1, 1 + rng() % 8, 1 + rng() % 8, {}};
        for (std::size_t i = 0; i < g.h * g.w; ++i) g.ids.push_back(static_cast<int>(rng() % v.depth_codes));
        const auto dseq = encode_depth(g, v);
        const auto dback = decode_depth(dseq, v, g.h, g.w);
        dep_mismatch += !(dback.ids == g.ids && encode_depth(dback, v).ids == dseq.ids);
    }
    SuiteReport rep{"codec", {}, 0.0};
    rep.checks.push_back({"instance_list_mismatches", ins_mismatch, 0.0, std::to_string(n) + " lists"});
    rep.checks.push_back({"depth_grid_mismatches", dep_mismatch, 0.0, std::to_string(n) + " grids"});
    rep.checks.push_back({"box_dequantization_error", box_err, 1.0 / (2.0 * v.n_coord_bins) + 1e-12, ""});
    rep.seconds = timer.seconds();
    return rep;
}

SuiteReport interp_suite(std::size_t n, std::uint64_t seed) {
    const Timer timer;
    Rng rng(seed);
    std::uniform_real_distribution<double> u(0.0, 10.0);
    double const_err = 0, block_err = 0, id_err = 0;
    for (std::size_t t = 0; t < n; ++t) {
        const InterpCodec codec{16, t % 2 ? InterpMode::bilinear : InterpMode::nearest, 128, 0.0, 10.0};
        const float value = static_cast<float>(u(rng));
        const Tensor<float> map({64, 64}, value);
        const auto tokens = interp_tokenize(map, codec);
        for (int id : tokens.ids) id_err += id < 0 || id >= codec.n_bins;
        const auto back = interp_detokenize(tokens, codec);
        for (std::size_t i = 0; i < back.numel(); ++i) const_err = std::max(const_err, std::abs(double(back[i]) - value));

        const InterpCodec binary{16, InterpMode::nearest, 2, 0.0, 1.0};
        Tensor<float> mask({64, 64});
        std::vector<std::uint8_t> on(16);
        for (auto& b : on) b = rng() % 2;
        for (std::size_t y = 0; y < 64; ++y)
            for (std::size_t x = 0; x < 64; ++x) mask[y * 64 + x] = on[(y / 16) * 4 + x / 16];
        const auto mback = interp_detokenize(interp_tokenize(mask, binary), binary);
        for (std::size_t i = 0; i < mask.numel(); ++i) block_err += (mback[i] >= 0.5f) != (mask[i] >= 0.5f);
    }
    SuiteReport rep{"interp", {}, 0.0};
    rep.checks.push_back({"constant_map_error", const_err, 10.0 / 128 / 2 + 1e-6, "128 bins over [0,10]"});
    rep.checks.push_back({"block_aligned_mask_pixel_errors", block_err, 0.0, ""});
    rep.checks.push_back({"ids_out_of_range", id_err, 0.0, ""});
    rep.seconds = timer.seconds();
    return rep;
}

}  // namespace vistok::suites
