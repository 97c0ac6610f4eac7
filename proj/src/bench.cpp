#include "vistok/bench.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace vistok {

void DepthMap::validate() const {
    if (values.ndim() != 2 || values.numel() == 0) {
        throw ShapeError("depth map must be a nonempty [H,W] tensor, got " + shape_str(values.shape()));
    }
    if (valid.size() != values.numel()) {
        throw ShapeError("validity mask has " + std::to_string(valid.size()) + " entries for " +
                         shape_str(values.shape()));
    }
    for (std::size_t i = 0; i < valid.size(); ++i) {
        if (valid[i] && !std::isfinite(values[i])) {
            throw ContractError("non-finite depth at valid pixel " + std::to_string(i));
        }
    }
}

Mask paste_mask(const Mask& crop, const std::array<double, 4>& box, std::size_t height,
                std::size_t width) {
    if (crop.size() != kMaskCrop * kMaskCrop) throw ShapeError("mask crop must be 64x64");
    Mask out(height * width, 0);
    const double x0 = box[0] * width, x1 = box[2] * width;
    const double y0 = box[1] * height, y1 = box[3] * height;
    if (x1 <= x0 || y1 <= y0) return out;
    const auto crop_index = [](double c, double lo, double hi) -> long {
        return std::clamp<long>(static_cast<long>(std::floor((c - lo) / (hi - lo) * kMaskCrop)), 0,
                                kMaskCrop - 1);
    };
    for (std::size_t i = 0; i < height; ++i) {
        const double cy = i + 0.5;
        if (cy < y0 || cy >= y1) continue;
        const long v = crop_index(cy, y0, y1);
        for (std::size_t j = 0; j < width; ++j) {
            const double cx = j + 0.5;
            if (cx < x0 || cx >= x1) continue;
            out[i * width + j] = crop[v * kMaskCrop + crop_index(cx, x0, x1)];
        }
    }
    return out;
}

namespace bench {

void SceneSpec::validate() const {
    if (image_size < 8) throw ContractError("scene image_size must be >= 8");
    if (min_objects < 0 || max_objects < min_objects) throw ContractError("invalid object count range");
    if (!(depth_min > 0 && depth_min < background_depth && background_depth <= depth_max)) {
        throw ContractError("need 0 < depth_min < background_depth <= depth_max");
    }
    if (!(min_extent > 0 && min_extent <= max_extent && max_extent <= 1)) {
        throw ContractError("object extents must satisfy 0 < min <= max <= 1");
    }
    if (shade < 0 || shade > 1 || max_tilt < 0) throw ContractError("shade in [0,1] and tilt >= 0 required");
}

void to_json(nlohmann::json& j, const SceneSpec& s) {
    j = {{"image_size", s.image_size}, {"min_objects", s.min_objects}, {"max_objects", s.max_objects},
         {"depth_min", s.depth_min},   {"depth_max", s.depth_max},     {"background_depth", s.background_depth},
         {"shade", s.shade},           {"min_extent", s.min_extent},   {"max_extent", s.max_extent},
         {"max_tilt", s.max_tilt}};
}

void from_json(const nlohmann::json& j, SceneSpec& s) {
    const SceneSpec d;
    s.image_size = j.value("image_size", d.image_size);
    s.min_objects = j.value("min_objects", d.min_objects);
    s.max_objects = j.value("max_objects", d.max_objects);
    s.depth_min = j.value("depth_min", d.depth_min);
    s.depth_max = j.value("depth_max", d.depth_max);
    s.background_depth = j.value("background_depth", d.background_depth);
    s.shade = j.value("shade", d.shade);
    s.min_extent = j.value("min_extent", d.min_extent);
    s.max_extent = j.value("max_extent", d.max_extent);
    s.max_tilt = j.value("max_tilt", d.max_tilt);
}

namespace {

struct Object {
    Primitive kind;
    double cx, cy, hw, hh;
    double depth, tx, ty;

    bool covers(double x, double y) const {
        const double dx = (x - cx) / hw, dy = (y - cy) / hh;
        if (kind == Primitive::rectangle) return std::abs(dx) <= 1 && std::abs(dy) <= 1;
        return dx * dx + dy * dy <= 1;
    }
    double depth_at(double x, double y) const { return depth + tx * (x - cx) + ty * (y - cy); }
};

// Index of the nearest object covering (x, y), or -1 for background.
int visible_object(const std::vector<Object>& objs, double x, double y) {
    int best = -1;
    double best_d = 0;
    for (std::size_t i = 0; i < objs.size(); ++i) {
        if (!objs[i].covers(x, y)) continue;
        const double d = objs[i].depth_at(x, y);
        if (best < 0 || d < best_d) {
            best = static_cast<int>(i);
            best_d = d;
        }
    }
    return best;
}

constexpr std::array<std::array<float, 3>, 2> kClassColor{{{1.0f, 0.35f, 0.2f}, {0.25f, 0.55f, 1.0f}}};
constexpr std::size_t kMinVisiblePixels = 16;

}  // namespace

SyntheticScene gen_scene(const SceneSpec& spec, std::uint64_t seed) {
    spec.validate();
    Rng rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const auto S = spec.image_size;
    const double side = static_cast<double>(S);
    const int n_obj = spec.min_objects + static_cast<int>(rng() % (spec.max_objects - spec.min_objects + 1));

    std::vector<Object> objs;
    for (int o = 0; o < n_obj; ++o) {
        Object ob{};
        ob.kind = static_cast<Primitive>(rng() % 2);
        ob.hw = 0.5 * side * (spec.min_extent + (spec.max_extent - spec.min_extent) * unit(rng));
        ob.hh = 0.5 * side * (spec.min_extent + (spec.max_extent - spec.min_extent) * unit(rng));
        ob.cx = ob.hw + (side - 2 * ob.hw) * unit(rng);
        ob.cy = ob.hh + (side - 2 * ob.hh) * unit(rng);
        ob.tx = spec.max_tilt * (2 * unit(rng) - 1);
        ob.ty = spec.max_tilt * (2 * unit(rng) - 1);
        const double swing = std::abs(ob.tx) * ob.hw + std::abs(ob.ty) * ob.hh;
        const double lo = spec.depth_min + swing;
        const double hi = std::max(lo, spec.background_depth - 0.2 - swing);
        ob.depth = lo + (hi - lo) * unit(rng);
        objs.push_back(ob);
    }

    SyntheticScene scene;
    scene.image = Tensor<float>({3, S, S});
    scene.depth = DepthMap::all_valid(Tensor<float>({S, S}));
    std::vector<int> owner(S * S, -1);
    const double range = spec.background_depth - spec.depth_min;
    for (std::size_t i = 0; i < S; ++i) {
        for (std::size_t j = 0; j < S; ++j) {
            const double x = j + 0.5, y = i + 0.5;
            const int id = visible_object(objs, x, y);
            owner[i * S + j] = id;
            const double d = id < 0 ? spec.background_depth : objs[id].depth_at(x, y);
            scene.depth.values[i * S + j] = static_cast<float>(d);
            const float lum = static_cast<float>(1.0 - spec.shade * (d - spec.depth_min) / range);
            for (std::size_t c = 0; c < 3; ++c) {
                const float base = id < 0 ? 1.0f : kClassColor[static_cast<int>(objs[id].kind)][c];
                scene.image[(c * S + i) * S + j] = base * lum;
            }
        }
    }

    for (std::size_t o = 0; o < objs.size(); ++o) {
        std::size_t x0 = S, y0 = S, x1 = 0, y1 = 0, count = 0;
        for (std::size_t i = 0; i < S; ++i) {
            for (std::size_t j = 0; j < S; ++j) {
                if (owner[i * S + j] != static_cast<int>(o)) continue;
                ++count;
                x0 = std::min(x0, j);
                y0 = std::min(y0, i);
                x1 = std::max(x1, j + 1);
                y1 = std::max(y1, i + 1);
            }
        }
        if (count < kMinVisiblePixels) continue;
        InstanceAnnotation inst;
        inst.box = {x0 / side, y0 / side, x1 / side, y1 / side};
        inst.class_id = static_cast<int>(objs[o].kind);
        inst.mask64.assign(kMaskCrop * kMaskCrop, 0);
        // Nearest sampling of the pixel-level visible region; paste_mask inverts this
        // exactly while the box spans at most 64 pixels.
        for (std::size_t v = 0; v < kMaskCrop; ++v) {
            const auto i = std::min(y1 - 1, static_cast<std::size_t>(y0 + (v + 0.5) / kMaskCrop * (y1 - y0)));
            for (std::size_t u = 0; u < kMaskCrop; ++u) {
                const auto j = std::min(x1 - 1, static_cast<std::size_t>(x0 + (u + 0.5) / kMaskCrop * (x1 - x0)));
                inst.mask64[v * kMaskCrop + u] = owner[i * S + j] == static_cast<int>(o);
            }
        }
        scene.instances.push_back(std::move(inst));
    }
    return scene;
}

std::vector<Mask> gen_mask_crops(const SceneSpec& spec, std::size_t n, std::uint64_t seed) {
    std::vector<Mask> out;
    out.reserve(n);
    std::uint64_t s = seed;
    while (out.size() < n) {
        auto scene = gen_scene(spec, s++);
        for (auto& inst : scene.instances) {
            if (out.size() == n) break;
            out.push_back(std::move(inst.mask64));
        }
        if (s - seed > 100 * (n + 1)) throw ContractError("scene spec produces no instances");
    }
    return out;
}

Corrupted corrupt_depth(const DepthMap& depth, const HoleSpec& spec, std::uint64_t seed) {
    depth.validate();
    if (!(spec.fraction >= 0 && spec.fraction < 1)) throw ContractError("hole fraction must be in [0,1)");
    const std::size_t H = depth.height(), W = depth.width(), N = H * W;
    Corrupted out{depth, Mask(N, 0)};
    std::size_t target = static_cast<std::size_t>(std::lround(spec.fraction * N));
    if (target == 0) return out;
    Rng rng(seed);
    const int blobs = 1 + static_cast<int>(rng() % std::max(1, spec.max_blobs));
    std::size_t removed = 0;
    // Each blob grows from a random seed pixel by absorbing random frontier pixels.
    for (int b = 0; b < blobs && removed < target; ++b) {
        const std::size_t quota = b + 1 == blobs ? target - removed : (target - removed) / (blobs - b);
        std::vector<std::size_t> frontier{rng() % N};
        std::size_t grown = 0;
        while (grown < quota && !frontier.empty()) {
            const std::size_t pick = rng() % frontier.size();
            const std::size_t p = frontier[pick];
            frontier[pick] = frontier.back();
            frontier.pop_back();
            if (out.holes[p]) continue;
            out.holes[p] = 1;
            ++grown;
            const std::size_t i = p / W, j = p % W;
            if (i > 0) frontier.push_back(p - W);
            if (i + 1 < H) frontier.push_back(p + W);
            if (j > 0) frontier.push_back(p - 1);
            if (j + 1 < W) frontier.push_back(p + 1);
        }
        removed += grown;
        // A blob trapped by earlier holes hands its remaining quota to a fresh seed.
        if (grown < quota && b + 1 == blobs) {
            for (std::size_t p = rng() % N; removed < target; p = (p + 1) % N) {
                if (!out.holes[p]) {
                    out.holes[p] = 1;
                    ++removed;
                }
            }
        }
    }
    for (std::size_t p = 0; p < N; ++p) {
        if (!out.holes[p]) continue;
        if (!depth.valid[p]) out.holes[p] = 0;
        out.depth.valid[p] = 0;
        out.depth.values[p] = 0.0f;
    }
    return out;
}

void to_json(nlohmann::json& j, const DepthMetrics& m) {
    j = {{"rmse", m.rmse},     {"rel", m.rel},       {"log10", m.log10},
         {"delta1", m.delta1}, {"delta2", m.delta2}, {"delta3", m.delta3}};
}

DepthMetrics depth_metrics(std::span<const float> pred, std::span<const float> gt,
                           std::span<const std::uint8_t> valid) {
    if (pred.size() != gt.size() || valid.size() != gt.size()) {
        throw ShapeError("depth_metrics: size mismatch");
    }
    DepthMetrics m;
    double se = 0, rel = 0, lg = 0;
    std::size_t n = 0, d1 = 0, d2 = 0, d3 = 0;
    for (std::size_t i = 0; i < gt.size(); ++i) {
        if (!valid[i]) continue;
        const double g = gt[i];
        if (!(g > 0)) throw ContractError("depth_metrics: ground truth must be positive on valid pixels");
        const double p = pred[i];
        const double pc = std::max(p, 1e-6);
        se += (p - g) * (p - g);
        rel += std::abs(p - g) / g;
        lg += std::abs(std::log10(pc) - std::log10(g));
        const double ratio = std::max(pc / g, g / pc);
        d1 += ratio < 1.25;
        d2 += ratio < 1.25 * 1.25;
        d3 += ratio < 1.25 * 1.25 * 1.25;
        ++n;
    }
    if (n == 0) throw ContractError("depth_metrics: empty valid mask");
    const double dn = static_cast<double>(n);
    m.rmse = std::sqrt(se / dn);
    m.rel = rel / dn;
    m.log10 = lg / dn;
    m.delta1 = d1 / dn;
    m.delta2 = d2 / dn;
    m.delta3 = d3 / dn;
    return m;
}

void to_json(nlohmann::json& j, const MaskMetrics& m) {
    j = {{"mean_iou", m.mean_iou}, {"ap", m.ap}, {"ap_per_threshold", m.ap_per_threshold}};
}

std::vector<double> default_iou_thresholds() {
    std::vector<double> t;
    for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
    return t;
}

double mask_iou(const Mask& a, const Mask& b) {
    if (a.size() != b.size()) throw ShapeError("mask_iou: size mismatch");
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        inter += a[i] && b[i];
        uni += a[i] || b[i];
    }
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

MaskMetrics mask_metrics(const std::vector<InstanceAnnotation>& pred,
                         const std::vector<InstanceAnnotation>& gt, std::size_t image_size,
                         const std::vector<double>& thresholds) {
    std::vector<const InstanceAnnotation*> P, G;
    for (const auto& p : pred) if (!p.is_noise) P.push_back(&p);
    for (const auto& g : gt) if (!g.is_noise) G.push_back(&g);
    MaskMetrics m;
    m.ap_per_threshold.assign(thresholds.size(), 0.0);
    if (G.empty()) {
        const double v = P.empty() ? 1.0 : 0.0;
        m.mean_iou = v;
        m.ap = v;
        std::fill(m.ap_per_threshold.begin(), m.ap_per_threshold.end(), v);
        return m;
    }
    if (P.empty()) return m;

    std::vector<Mask> pm, gm;
    for (const auto* p : P) pm.push_back(paste_mask(p->mask64, p->box, image_size, image_size));
    for (const auto* g : G) gm.push_back(paste_mask(g->mask64, g->box, image_size, image_size));
    struct Pair {
        double iou;
        std::size_t p, g;
    };
    std::vector<Pair> pairs;
    for (std::size_t i = 0; i < P.size(); ++i) {
        for (std::size_t j = 0; j < G.size(); ++j) {
            if (P[i]->class_id != G[j]->class_id) continue;
            const double iou = mask_iou(pm[i], gm[j]);
            if (iou > 0) pairs.push_back({iou, i, j});
        }
    }
    std::stable_sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) { return a.iou > b.iou; });

    // Greedy one-to-one matching over pairs with IoU >= thr, best pairs first.
    const auto match = [&](double thr, std::vector<double>* gt_iou) {
        std::vector<char> pu(P.size(), 0), gu(G.size(), 0);
        std::size_t tp = 0;
        for (const auto& pr : pairs) {
            if (pr.iou < thr) break;
            if (pu[pr.p] || gu[pr.g]) continue;
            pu[pr.p] = gu[pr.g] = 1;
            ++tp;
            if (gt_iou) (*gt_iou)[pr.g] = pr.iou;
        }
        return tp;
    };
    std::vector<double> gt_iou(G.size(), 0.0);
    match(0.0, &gt_iou);
    m.mean_iou = std::accumulate(gt_iou.begin(), gt_iou.end(), 0.0) / G.size();
    for (std::size_t t = 0; t < thresholds.size(); ++t) {
        const double tp = static_cast<double>(match(thresholds[t], nullptr));
        m.ap_per_threshold[t] = (tp / P.size()) * (tp / G.size());
    }
    m.ap = std::accumulate(m.ap_per_threshold.begin(), m.ap_per_threshold.end(), 0.0) /
           std::max<std::size_t>(1, thresholds.size());
    return m;
}

void put_scenes(io::Checkpoint& ckpt, const std::vector<SyntheticScene>& scenes) {
    ckpt.manifest["scene_count"] = scenes.size();
    for (std::size_t i = 0; i < scenes.size(); ++i) {
        const auto& s = scenes[i];
        const std::string key = "scene." + std::to_string(i) + ".";
        const auto n = static_cast<std::uint32_t>(s.instances.size());
        ckpt.put(key + "image", s.image);
        ckpt.put(key + "depth", s.depth.values);
        ckpt.put(key + "valid", io::raw_bytes({static_cast<std::uint32_t>(s.depth.valid.size())}, s.depth.valid));
        Tensor<double> boxes({n, 4});
        std::vector<std::int32_t> classes;
        std::vector<std::uint8_t> masks;
        for (std::uint32_t k = 0; k < n; ++k) {
            const auto& inst = s.instances[k];
            for (int c = 0; c < 4; ++c) boxes[k * 4 + c] = inst.box[c];
            classes.push_back(inst.class_id);
            if (inst.mask64.size() != kMaskCrop * kMaskCrop) throw ShapeError("instance mask is not a 64x64 crop");
            masks.insert(masks.end(), inst.mask64.begin(), inst.mask64.end());
        }
        ckpt.put(key + "boxes", boxes);
        ckpt.put(key + "classes", io::raw_ints({n}, classes));
        ckpt.put(key + "masks", io::raw_bytes({n, static_cast<std::uint32_t>(kMaskCrop * kMaskCrop)}, masks));
    }
}

std::vector<SyntheticScene> get_scenes(const io::Checkpoint& ckpt) {
    if (!ckpt.manifest.contains("scene_count")) throw IoError("file holds no scenes");
    const auto count = ckpt.manifest.at("scene_count").get<std::size_t>();
    std::vector<SyntheticScene> out(count);
    for (std::size_t i = 0; i < count; ++i) {
        auto& s = out[i];
        const std::string key = "scene." + std::to_string(i) + ".";
        s.image = ckpt.get<float>(key + "image");
        s.depth.values = ckpt.get<float>(key + "depth");
        s.depth.valid = io::bytes_of(ckpt.raw(key + "valid"));
        if (s.image.ndim() != 3 || s.depth.values.ndim() != 2 || s.depth.valid.size() != s.depth.values.numel())
            throw IoError("scene " + std::to_string(i) + " has inconsistent shapes");
        const auto boxes = ckpt.get<double>(key + "boxes");
        const auto classes = io::ints_of(ckpt.raw(key + "classes"));
        const auto masks = io::bytes_of(ckpt.raw(key + "masks"));
        const std::size_t n = classes.size(), m = kMaskCrop * kMaskCrop;
        if (boxes.numel() != n * 4 || masks.size() != n * m)
            throw IoError("scene " + std::to_string(i) + " has inconsistent instance records");
        for (std::size_t k = 0; k < n; ++k) {
            InstanceAnnotation a;
            for (int c = 0; c < 4; ++c) a.box[c] = boxes[k * 4 + c];
            a.class_id = classes[k];
            a.mask64.assign(masks.begin() + k * m, masks.begin() + (k + 1) * m);
            s.instances.push_back(std::move(a));
        }
    }
    return out;
}

}  // namespace bench
}  // namespace vistok
