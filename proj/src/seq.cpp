#include "vistok/seq.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace vistok {

int Vocabulary::size(TokenRange r) const {
    switch (r) {
        case TokenRange::special: return n_special;
        case TokenRange::coord: return n_coord_bins;
        case TokenRange::cls: return n_classes + 1;
        case TokenRange::mask_code: return mask_codes;
        case TokenRange::depth_code: return depth_codes;
    }
    return 0;
}

int Vocabulary::begin(TokenRange r) const {
    int b = 0;
    for (auto q : {TokenRange::special, TokenRange::coord, TokenRange::cls, TokenRange::mask_code}) {
        if (q == r) return b;
        b += size(q);
    }
    return b;
}

namespace {

int offset_into(const Vocabulary& v, TokenRange r, int k, const char* what) {
    if (k < 0 || k >= v.size(r)) {
        throw IndexError(std::string(what) + " " + std::to_string(k) + " outside [0, " + std::to_string(v.size(r)) +
                         ")");
    }
    return v.begin(r) + k;
}

const char* range_name(TokenRange r) {
    switch (r) {
        case TokenRange::special: return "special";
        case TokenRange::coord: return "coordinate";
        case TokenRange::cls: return "class";
        case TokenRange::mask_code: return "mask-code";
        case TokenRange::depth_code: return "depth-code";
    }
    return "?";
}

}  // namespace

int Vocabulary::coord(int bin) const { return offset_into(*this, TokenRange::coord, bin, "coordinate bin"); }
int Vocabulary::cls(int class_id) const { return offset_into(*this, TokenRange::cls, class_id, "class"); }
int Vocabulary::mask_code(int code) const { return offset_into(*this, TokenRange::mask_code, code, "mask code"); }
int Vocabulary::depth_code(int code) const {
    return offset_into(*this, TokenRange::depth_code, code, "depth code");
}

std::pair<TokenRange, int> Vocabulary::lookup(int id) const {
    if (id < 0 || id >= total()) {
        throw IndexError("token " + std::to_string(id) + " outside vocabulary of " + std::to_string(total()));
    }
    for (auto r : {TokenRange::special, TokenRange::coord, TokenRange::cls, TokenRange::mask_code,
                   TokenRange::depth_code}) {
        if (id < end(r)) return {r, id - begin(r)};
    }
    throw IndexError("unreachable vocabulary id " + std::to_string(id));
}

void Vocabulary::validate() const {
    if (n_coord_bins < 1 || n_classes < 1 || mask_codes < 1 || depth_codes < 1) {
        throw ContractError("vocabulary ranges must be nonempty");
    }
}

void to_json(nlohmann::json& j, const Vocabulary& v) {
    j = {{"n_special", Vocabulary::n_special},
         {"n_coord_bins", v.n_coord_bins},
         {"n_classes", v.n_classes},
         {"mask_codes", v.mask_codes},
         {"depth_codes", v.depth_codes},
         {"total", v.total()}};
}

void from_json(const nlohmann::json& j, Vocabulary& v) {
    if (j.value("n_special", Vocabulary::n_special) != Vocabulary::n_special) {
        throw ContractError("vocabulary special-token count differs");
    }
    v.n_coord_bins = j.at("n_coord_bins").get<int>();
    v.n_classes = j.at("n_classes").get<int>();
    v.mask_codes = j.at("mask_codes").get<int>();
    v.depth_codes = j.at("depth_codes").get<int>();
    v.validate();
}

void TokenSequence::validate(const Vocabulary& vocab) const {
    if (loss_mask.size() != ids.size()) {
        throw ShapeError("loss_mask has " + std::to_string(loss_mask.size()) + " entries for " +
                         std::to_string(ids.size()) + " ids");
    }
    if (!probs.empty() && probs.size() != ids.size()) throw ShapeError("probs length differs from ids");
    for (std::size_t t = 0; t < ids.size(); ++t) {
        if (ids[t] < 0 || ids[t] >= vocab.total()) throw DecodeError("token out of vocabulary", t);
        if (!probs.empty() && probs[t].size() != static_cast<std::size_t>(vocab.total())) {
            throw ShapeError("probability row " + std::to_string(t) + " is not over the full vocabulary");
        }
    }
}

void to_json(nlohmann::json& j, const TokenSequence& s) {
    std::vector<bool> lm(s.loss_mask.begin(), s.loss_mask.end());
    j = {{"ids", s.ids}, {"loss_mask", lm}, {"task", s.task == SeqTask::dep ? "dep" : "ins"}};
}

void from_json(const nlohmann::json& j, TokenSequence& s) {
    const auto task = j.at("task").get<std::string>();
    if (task != "dep" && task != "ins") throw ContractError("unknown sequence task '" + task + "'");
    s.task = task == "dep" ? SeqTask::dep : SeqTask::ins;
    s.ids = j.at("ids").get<std::vector<int>>();
    const auto lm = j.at("loss_mask").get<std::vector<bool>>();
    s.loss_mask.assign(lm.begin(), lm.end());
    s.probs.clear();
}

std::array<int, 4> quantize_box(const std::array<double, 4>& box, int n_bins) {
    if (n_bins < 1) throw ContractError("n_bins must be positive");
    std::array<int, 4> out{};
    for (int i = 0; i < 4; ++i) {
        const double c = box[i];
        if (!(c >= -1e-6 && c <= 1.0 + 1e-6)) {
            throw ContractError("box coordinate " + std::to_string(c) + " outside [0,1]");
        }
        out[i] = std::clamp(static_cast<int>(std::floor(c * n_bins)), 0, n_bins - 1);
    }
    return out;
}

std::array<double, 4> dequantize_box(const std::array<int, 4>& bins, int n_bins) {
    std::array<double, 4> out{};
    for (int i = 0; i < 4; ++i) {
        if (bins[i] < 0 || bins[i] >= n_bins) throw IndexError("coordinate bin " + std::to_string(bins[i]));
        out[i] = (bins[i] + 0.5) / n_bins;
    }
    return out;
}

TokenSequence encode_records(const std::vector<InstanceRecord>& records, const Vocabulary& vocab) {
    TokenSequence seq;
    seq.task = SeqTask::ins;
    seq.ids.reserve(records.size() * kRecordLength + 1);
    for (const auto& r : records) {
        if (r.mask_ids.size() != kMaskTokens) {
            throw ShapeError("instance record needs " + std::to_string(kMaskTokens) + " mask tokens, got " +
                             std::to_string(r.mask_ids.size()));
        }
        for (int b : quantize_box(r.box, vocab.n_coord_bins)) seq.ids.push_back(vocab.coord(b));
        seq.ids.push_back(r.is_noise ? vocab.background() : vocab.cls(r.class_id));
        seq.loss_mask.insert(seq.loss_mask.end(), 5, 1);
        for (int m : r.mask_ids) seq.ids.push_back(vocab.mask_code(m));
        seq.loss_mask.insert(seq.loss_mask.end(), kMaskTokens, r.is_noise ? 0 : 1);
    }
    seq.ids.push_back(Vocabulary::EOS);
    seq.loss_mask.push_back(1);
    return seq;
}

std::vector<InstanceRecord> decode_records(const TokenSequence& seq, const Vocabulary& vocab) {
    std::size_t stop = seq.ids.size();
    for (std::size_t t = 0; t < seq.ids.size(); ++t) {
        if (seq.ids[t] == Vocabulary::EOS) {
            stop = t;
            break;
        }
    }
    if (stop % kRecordLength != 0) {
        throw DecodeError("instance sequence ends inside a record (" + std::to_string(stop % kRecordLength) + " of " +
                              std::to_string(kRecordLength) + " tokens)",
                          stop);
    }
    const bool soft = !seq.probs.empty();
    if (soft && seq.probs.size() < stop) throw DecodeError("probabilities missing", seq.probs.size());
    auto expect = [&](std::size_t t, TokenRange r) {
        const int id = seq.ids[t];
        if (id < 0 || id >= vocab.total()) throw DecodeError("token " + std::to_string(id) + " out of vocabulary", t);
        if (!vocab.in(id, r)) {
            throw DecodeError("expected a " + std::string(range_name(r)) + " token, got " + std::to_string(id), t);
        }
        return id - vocab.begin(r);
    };
    std::vector<InstanceRecord> out;
    for (std::size_t s = 0; s < stop; s += kRecordLength) {
        InstanceRecord r;
        std::array<int, 4> bins{};
        for (std::size_t i = 0; i < 4; ++i) bins[i] = expect(s + i, TokenRange::coord);
        r.box = dequantize_box(bins, vocab.n_coord_bins);
        r.class_id = expect(s + 4, TokenRange::cls);
        r.is_noise = r.class_id == vocab.n_classes;
        if (soft) r.score = seq.probs[s + 4].at(static_cast<std::size_t>(seq.ids[s + 4]));
        for (std::size_t i = 0; i < kMaskTokens; ++i) r.mask_ids.push_back(expect(s + 5 + i, TokenRange::mask_code));
        out.push_back(std::move(r));
    }
    return out;
}

template <class T>
MaskEncoder mask_encoder(const TokenizerModel<T>& model) {
    return [&model](const Mask& mask64) {
        if (mask64.size() != kMaskCrop * kMaskCrop) throw ShapeError("mask crop must be 64x64");
        Tensor<float> v({kMaskCrop, kMaskCrop});
        for (std::size_t p = 0; p < mask64.size(); ++p) v[p] = mask64[p] ? 1.0f : 0.0f;
        auto grid = tokenize(model, DepthMap::all_valid(std::move(v)));
        if (grid.h != 4 || grid.w != 4) {
            throw ContractError("mask tokenizer yields a " + std::to_string(grid.h) + "x" + std::to_string(grid.w) +
                                " grid; instance records need 4x4");
        }
        return std::move(grid.ids);
    };
}

namespace {

template <class T>
Mask binarize(const Tensor<T>& img) {
    Mask m(img.numel());
    for (std::size_t p = 0; p < m.size(); ++p) m[p] = img[p] >= T(0.5) ? 1 : 0;
    return m;
}

}  // namespace

template <class T>
MaskDecoder mask_decoder(const TokenizerModel<T>& model) {
    MaskDecoder d;
    d.hard = [&model](const std::vector<int>& ids) {
        return binarize(detokenize(model, TokenGrid{1, 4, 4, ids}));
    };
    d.soft = [&model](const std::vector<std::vector<double>>& probs) {
        const std::size_t K = model.codebook.size();
        Tensor<T> p({probs.size(), K});
        for (std::size_t i = 0; i < probs.size(); ++i) {
            if (probs[i].size() != K) throw ShapeError("soft mask token does not span the codebook");
            for (std::size_t k = 0; k < K; ++k) p[i * K + k] = static_cast<T>(probs[i][k]);
        }
        NoGradGuard guard;
        return binarize(detokenize_soft(model, Var<T>::constant(std::move(p)), 1, 4, 4).value());
    };
    return d;
}

std::array<double, 4> sample_noise_box(const std::vector<InstanceAnnotation>& real, std::size_t slot, Rng& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::array<double, 4> b{};
    if (!real.empty() && slot % 2 == 0) {
        const auto& src = real[(slot / 2) % real.size()].box;
        const double w = src[2] - src[0], h = src[3] - src[1];
        const double cx = 0.5 * (src[0] + src[2]) + (u(rng) - 0.5) * 0.6 * w;
        const double cy = 0.5 * (src[1] + src[3]) + (u(rng) - 0.5) * 0.6 * h;
        const double nw = w * (0.7 + 0.6 * u(rng)), nh = h * (0.7 + 0.6 * u(rng));
        b = {cx - nw / 2, cy - nh / 2, cx + nw / 2, cy + nh / 2};
    } else {
        double x0 = u(rng), x1 = u(rng), y0 = u(rng), y1 = u(rng);
        b = {std::min(x0, x1), std::min(y0, y1), std::max(x0, x1), std::max(y0, y1)};
    }
    for (auto& c : b) c = std::clamp(c, 0.0, 1.0);
    return b;
}

TokenSequence encode_instances(const std::vector<InstanceAnnotation>& instances, const Vocabulary& vocab,
                               const MaskEncoder& encoder, std::size_t n_noise, Rng& rng) {
    std::vector<InstanceAnnotation> real;
    for (const auto& a : instances) {
        if (!a.is_noise) real.push_back(a);
    }
    std::vector<std::size_t> order(real.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);

    std::vector<InstanceRecord> records;
    for (std::size_t i : order) {
        const auto& a = real[i];
        if (a.box[0] > a.box[2] || a.box[1] > a.box[3]) throw ContractError("instance box has x0 > x1 or y0 > y1");
        auto ids = encoder(a.mask64);
        if (ids.size() != kMaskTokens) throw ContractError("mask encoder must return 16 tokens");
        records.push_back({a.box, a.class_id, std::move(ids), false, 1.0});
    }
    if (n_noise > 0) {
        const auto zero_ids = encoder(Mask(kMaskCrop * kMaskCrop, 0));
        for (std::size_t s = 0; s < n_noise; ++s) {
            records.push_back({sample_noise_box(real, s, rng), vocab.n_classes, zero_ids, true, 1.0});
        }
    }
    return encode_records(records, vocab);
}

std::vector<InstanceAnnotation> decode_instances(const TokenSequence& seq, const Vocabulary& vocab,
                                                 const MaskDecoder& decoder, double score_threshold) {
    const auto records = decode_records(seq, vocab);
    const bool soft = !seq.probs.empty() && decoder.soft;
    std::vector<InstanceAnnotation> out;
    for (std::size_t r = 0; r < records.size(); ++r) {
        const auto& rec = records[r];
        if (rec.is_noise || rec.score < score_threshold) continue;
        InstanceAnnotation a;
        a.box = {std::min(rec.box[0], rec.box[2]), std::min(rec.box[1], rec.box[3]), std::max(rec.box[0], rec.box[2]),
                 std::max(rec.box[1], rec.box[3])};
        a.class_id = rec.class_id;
        if (soft) {
            std::vector<std::vector<double>> probs;
            for (std::size_t i = 0; i < kMaskTokens; ++i) {
                probs.push_back(restrict_probs(seq.probs[r * kRecordLength + 5 + i], vocab, TokenRange::mask_code));
            }
            a.mask64 = decoder.soft(probs);
        } else {
            a.mask64 = decoder.hard(rec.mask_ids);
        }
        out.push_back(std::move(a));
    }
    return out;
}

TokenSequence encode_depth(const TokenGrid& grid, const Vocabulary& vocab) {
    if (grid.n != 1 || grid.ids.size() != grid.h * grid.w) throw ShapeError("encode_depth expects one h x w grid");
    TokenSequence seq;
    seq.task = SeqTask::dep;
    for (int id : grid.ids) seq.ids.push_back(vocab.depth_code(id));
    seq.loss_mask.assign(seq.ids.size(), 1);
    return seq;
}

TokenGrid decode_depth(const TokenSequence& seq, const Vocabulary& vocab, std::size_t h, std::size_t w) {
    if (seq.ids.size() != h * w) {
        throw DecodeError("depth sequence has " + std::to_string(seq.ids.size()) + " tokens for a " +
                              std::to_string(h) + "x" + std::to_string(w) + " grid",
                          std::min(seq.ids.size(), h * w));
    }
    TokenGrid g{1, h, w, {}};
    for (std::size_t t = 0; t < seq.ids.size(); ++t) {
        if (!vocab.in(seq.ids[t], TokenRange::depth_code)) {
            throw DecodeError("expected a depth-code token, got " + std::to_string(seq.ids[t]), t);
        }
        g.ids.push_back(seq.ids[t] - vocab.begin(TokenRange::depth_code));
    }
    return g;
}

Tensor<float> decode_depth_soft(const TokenSequence& seq, const Vocabulary& vocab, std::size_t h, std::size_t w) {
    if (seq.probs.size() != h * w) {
        throw DecodeError("soft depth sequence has " + std::to_string(seq.probs.size()) + " positions",
                          std::min(seq.probs.size(), h * w));
    }
    const auto K = static_cast<std::size_t>(vocab.depth_codes);
    Tensor<float> out({h * w, K});
    for (std::size_t t = 0; t < h * w; ++t) {
        const auto p = restrict_probs(seq.probs[t], vocab, TokenRange::depth_code);
        for (std::size_t k = 0; k < K; ++k) out[t * K + k] = static_cast<float>(p[k]);
    }
    return out;
}

std::vector<double> restrict_probs(std::span<const float> full, const Vocabulary& vocab, TokenRange range) {
    if (full.size() != static_cast<std::size_t>(vocab.total())) {
        throw ShapeError("distribution has " + std::to_string(full.size()) + " entries for a vocabulary of " +
                         std::to_string(vocab.total()));
    }
    const auto b = static_cast<std::size_t>(vocab.begin(range)), n = static_cast<std::size_t>(vocab.size(range));
    std::vector<double> out(full.begin() + b, full.begin() + b + n);
    const double mass = std::accumulate(out.begin(), out.end(), 0.0);
    if (mass < 1e-8) {
        const auto best = std::max_element(out.begin(), out.end()) - out.begin();
        std::fill(out.begin(), out.end(), 0.0);
        out[best] = 1.0;
        return out;
    }
    for (auto& p : out) p /= mass;
    return out;
}

template MaskEncoder mask_encoder(const TokenizerModel<float>&);
template MaskEncoder mask_encoder(const TokenizerModel<double>&);
template MaskDecoder mask_decoder(const TokenizerModel<float>&);
template MaskDecoder mask_decoder(const TokenizerModel<double>&);

}  // namespace vistok
