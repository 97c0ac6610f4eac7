#pragma once

#include <array>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "vistok/nn.hpp"
#include "vistok/tokenizer.hpp"
#include "vistok/types.hpp"

namespace vistok {

enum class TokenRange { special, coord, cls, mask_code, depth_code };

// Contiguous id ranges: specials, coordinate bins, classes (+ background), mask codes, depth codes.
struct Vocabulary {
    static constexpr int PAD = 0;
    static constexpr int EOS = 1;
    static constexpr int DEP = 2;
    static constexpr int INS = 3;
    static constexpr int n_special = 4;

    int n_coord_bins = 2000;
    int n_classes = 2;  // background is one extra token after these
    int mask_codes = 128;
    int depth_codes = 128;

    int begin(TokenRange r) const;
    int size(TokenRange r) const;
    int end(TokenRange r) const { return begin(r) + size(r); }
    int total() const { return end(TokenRange::depth_code); }

    int coord(int bin) const;
    int cls(int class_id) const;
    int background() const { return begin(TokenRange::cls) + n_classes; }
    int mask_code(int code) const;
    int depth_code(int code) const;

    // (range, offset within range); IndexError outside [0, total).
    std::pair<TokenRange, int> lookup(int id) const;
    bool in(int id, TokenRange r) const { return id >= begin(r) && id < end(r); }

    void validate() const;
    friend bool operator==(const Vocabulary&, const Vocabulary&) = default;
};

void to_json(nlohmann::json& j, const Vocabulary& v);
void from_json(const nlohmann::json& j, Vocabulary& v);

enum class SeqTask { dep, ins };

struct TokenSequence {
    SeqTask task = SeqTask::ins;
    std::vector<int> ids;
    std::vector<std::uint8_t> loss_mask;
    // Optional per-position distributions over the full vocabulary.
    std::vector<std::vector<float>> probs;

    void validate(const Vocabulary& vocab) const;
};

void to_json(nlohmann::json& j, const TokenSequence& s);
void from_json(const nlohmann::json& j, TokenSequence& s);

std::array<int, 4> quantize_box(const std::array<double, 4>& box, int n_bins);
std::array<double, 4> dequantize_box(const std::array<int, 4>& bins, int n_bins);

constexpr std::size_t kMaskTokens = 16;
constexpr std::size_t kRecordLength = 4 + 1 + kMaskTokens;

// One instance at token level; mask_ids are codebook indices.
struct InstanceRecord {
    std::array<double, 4> box{};
    int class_id = 0;  // n_classes means background
    std::vector<int> mask_ids;
    bool is_noise = false;
    double score = 1.0;  // class-token probability when decoded from a soft sequence
};

// Records in the given order followed by EOS. Noise records get the background class and
// no loss on their mask positions.
TokenSequence encode_records(const std::vector<InstanceRecord>& records, const Vocabulary& vocab);
// Parses records up to EOS (or the end). DecodeError names the offending offset.
std::vector<InstanceRecord> decode_records(const TokenSequence& seq, const Vocabulary& vocab);

using MaskEncoder = std::function<std::vector<int>(const Mask& mask64)>;

struct MaskDecoder {
    std::function<Mask(const std::vector<int>& ids)> hard;
    // probs: kMaskTokens rows over the mask-codebook slice
    std::function<Mask(const std::vector<std::vector<double>>& probs)> soft;
};

template <class T>
MaskEncoder mask_encoder(const TokenizerModel<T>& model);
template <class T>
MaskDecoder mask_decoder(const TokenizerModel<T>& model);

// Noise boxes: even slots jitter a real box, odd slots (or all, without real boxes) are uniform.
std::array<double, 4> sample_noise_box(const std::vector<InstanceAnnotation>& real, std::size_t slot, Rng& rng);

// Real instances in a shuffled order, then n_noise noise records, then EOS.
TokenSequence encode_instances(const std::vector<InstanceAnnotation>& instances, const Vocabulary& vocab,
                               const MaskEncoder& encoder, std::size_t n_noise, Rng& rng);

// Drops background records and records scoring below score_threshold. Masks come from the
// soft path when the sequence carries probabilities.
std::vector<InstanceAnnotation> decode_instances(const TokenSequence& seq, const Vocabulary& vocab,
                                                 const MaskDecoder& decoder, double score_threshold = 0.0);

TokenSequence encode_depth(const TokenGrid& grid, const Vocabulary& vocab);
TokenGrid decode_depth(const TokenSequence& seq, const Vocabulary& vocab, std::size_t h, std::size_t w);
// Rows [h*w, depth_codes] restricted from the sequence probabilities.
Tensor<float> decode_depth_soft(const TokenSequence& seq, const Vocabulary& vocab, std::size_t h, std::size_t w);

// Slice of a full-vocabulary distribution, renormalized; one-hot at the slice argmax when
// the slice mass is below 1e-8.
std::vector<double> restrict_probs(std::span<const float> full, const Vocabulary& vocab, TokenRange range);

}  // namespace vistok
