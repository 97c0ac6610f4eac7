#include "vistok/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

namespace vistok::ops {

namespace {

template <class T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapR = Eigen::Map<MatR<T>>;
template <class T>
using CMapR = Eigen::Map<const MatR<T>>;
template <class T>
using SMapR = Eigen::Map<MatR<T>, 0, Eigen::OuterStride<>>;
template <class T>
using CSMapR = Eigen::Map<const MatR<T>, 0, Eigen::OuterStride<>>;

template <class T>
Node<T>& parent(Node<T>* self, std::size_t i) {
    return *self->parents[i];
}

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
    if (a != b) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                         shape_str(b));
    }
}

// Copies one image [C,H,W] into columns [C*k*k, ld] starting at column `offset`.
template <class T>
void im2col(const T* img, std::size_t C, std::size_t H, std::size_t W, std::size_t k,
            std::size_t s, std::size_t p, std::size_t Ho, std::size_t Wo, T* col, std::size_t ld,
            std::size_t offset) {
    const auto ih = static_cast<long>(H), iw = static_cast<long>(W);
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t ki = 0; ki < k; ++ki) {
            for (std::size_t kj = 0; kj < k; ++kj) {
                T* row = col + ((c * k + ki) * k + kj) * ld + offset;
                const T* plane = img + c * H * W;
                for (std::size_t oy = 0; oy < Ho; ++oy) {
                    const long y = static_cast<long>(oy * s + ki) - static_cast<long>(p);
                    T* dst = row + oy * Wo;
                    if (y < 0 || y >= ih) {
                        std::fill(dst, dst + Wo, T(0));
                        continue;
                    }
                    const T* src = plane + y * iw;
                    for (std::size_t ox = 0; ox < Wo; ++ox) {
                        const long x = static_cast<long>(ox * s + kj) - static_cast<long>(p);
                        dst[ox] = (x < 0 || x >= iw) ? T(0) : src[x];
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: scatter-adds columns back into an image [C,H,W].
template <class T>
void col2im(const T* col, std::size_t C, std::size_t H, std::size_t W, std::size_t k,
            std::size_t s, std::size_t p, std::size_t Ho, std::size_t Wo, T* img, std::size_t ld,
            std::size_t offset) {
    const auto ih = static_cast<long>(H), iw = static_cast<long>(W);
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t ki = 0; ki < k; ++ki) {
            for (std::size_t kj = 0; kj < k; ++kj) {
                const T* row = col + ((c * k + ki) * k + kj) * ld + offset;
                T* plane = img + c * H * W;
                for (std::size_t oy = 0; oy < Ho; ++oy) {
                    const long y = static_cast<long>(oy * s + ki) - static_cast<long>(p);
                    if (y < 0 || y >= ih) continue;
                    const T* src = row + oy * Wo;
                    T* dst = plane + y * iw;
                    for (std::size_t ox = 0; ox < Wo; ++ox) {
                        const long x = static_cast<long>(ox * s + kj) - static_cast<long>(p);
                        if (x >= 0 && x < iw) dst[x] += src[ox];
                    }
                }
            }
        }
    }
}

}  // namespace

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a.shape(), b.shape(), "add");
    Tensor<T> out(a.shape());
    const auto& av = a.value().vec();
    const auto& bv = b.value().vec();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] + bv[i];
    return make_result<T>(std::move(out), {a, b}, [](Node<T>* self) {
        return [self] {
            for (std::size_t j = 0; j < 2; ++j) {
                auto& p = parent(self, j);
                if (!p.requires_grad) continue;
                auto& g = p.grad_buffer();
                for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self->grad[i];
            }
        };
    });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a.shape(), b.shape(), "sub");
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] - b.value()[i];
    return make_result<T>(std::move(out), {a, b}, [](Node<T>* self) {
        return [self] {
            auto& pa = parent(self, 0);
            auto& pb = parent(self, 1);
            if (pa.requires_grad) {
                auto& g = pa.grad_buffer();
                for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self->grad[i];
            }
            if (pb.requires_grad) {
                auto& g = pb.grad_buffer();
                for (std::size_t i = 0; i < g.numel(); ++i) g[i] -= self->grad[i];
            }
        };
    });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a.shape(), b.shape(), "mul");
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
    return make_result<T>(std::move(out), {a, b}, [](Node<T>* self) {
        return [self] {
            auto& pa = parent(self, 0);
            auto& pb = parent(self, 1);
            if (pa.requires_grad) {
                auto& g = pa.grad_buffer();
                for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self->grad[i] * pb.value[i];
            }
            if (pb.requires_grad) {
                auto& g = pb.grad_buffer();
                for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self->grad[i] * pa.value[i];
            }
        };
    });
}

template <class T>
Var<T> add_broadcast(const Var<T>& x, const Var<T>& y) {
    const auto& xs = x.shape();
    const auto& ys = y.shape();
    if (ys.size() > xs.size() || !std::equal(ys.rbegin(), ys.rend(), xs.rbegin())) {
        throw ShapeError("add_broadcast: " + shape_str(ys) + " is not a suffix of " +
                         shape_str(xs));
    }
    const std::size_t inner = y.numel();
    const std::size_t outer = x.numel() / std::max<std::size_t>(inner, 1);
    Tensor<T> out = x.value();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += y.value()[i];
    return make_result<T>(std::move(out), {x, y}, [inner, outer](Node<T>* self) {
        return [self, inner, outer] {
            auto& px = parent(self, 0);
            auto& py = parent(self, 1);
            if (px.requires_grad) {
                auto& g = px.grad_buffer();
                for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self->grad[i];
            }
            if (py.requires_grad) {
                auto& g = py.grad_buffer();
                for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t i = 0; i < inner; ++i) g[i] += self->grad[o * inner + i];
            }
        };
    });
}

template <class T>
Var<T> scale(const Var<T>& x, T s) {
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x.value()[i] * s;
    return make_result<T>(std::move(out), {x}, [s](Node<T>* self) {
        return [self, s] {
            auto& g = parent(self, 0).grad_buffer();
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self->grad[i] * s;
        };
    });
}

template <class T>
Var<T> add_scalar(const Var<T>& x, T s) {
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x.value()[i] + s;
    return make_result<T>(std::move(out), {x}, [](Node<T>* self) {
        return [self] {
            auto& g = parent(self, 0).grad_buffer();
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self->grad[i];
        };
    });
}

template <class T>
Var<T> relu(const Var<T>& x) {
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::max(x.value()[i], T(0));
    return make_result<T>(std::move(out), {x}, [](Node<T>* self) {
        return [self] {
            auto& p = parent(self, 0);
            auto& g = p.grad_buffer();
            for (std::size_t i = 0; i < g.numel(); ++i)
                if (p.value[i] > T(0)) g[i] += self->grad[i];
        };
    });
}

template <class T>
Var<T> sigmoid(const Var<T>& x) {
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = T(1) / (T(1) + std::exp(-x.value()[i]));
    return make_result<T>(std::move(out), {x}, [](Node<T>* self) {
        return [self] {
            auto& g = parent(self, 0).grad_buffer();
            for (std::size_t i = 0; i < g.numel(); ++i) {
                const T y = self->value[i];
                g[i] += self->grad[i] * y * (T(1) - y);
            }
        };
    });
}

template <class T>
Var<T> sum(const Var<T>& x) {
    T acc = 0;
    for (T v : x.value().data()) acc += v;
    return make_result<T>(Tensor<T>::scalar(acc), {x}, [](Node<T>* self) {
        return [self] {
            auto& g = parent(self, 0).grad_buffer();
            const T d = self->grad[0];
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += d;
        };
    });
}

template <class T>
Var<T> mean(const Var<T>& x) {
    if (x.numel() == 0) throw ShapeError("mean of empty tensor");
    return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <class T>
Var<T> reshape(const Var<T>& x, Shape shape) {
    Tensor<T> out = x.value().reshaped(std::move(shape));
    return make_result<T>(std::move(out), {x}, [](Node<T>* self) {
        return [self] {
            auto& g = parent(self, 0).grad_buffer();
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self->grad[i];
        };
    });
}

template <class T>
Var<T> detach(const Var<T>& x) {
    return Var<T>::constant(x.value());
}

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    }
    const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
    Tensor<T> out({M, N});
    MapR<T>(out.ptr(), M, N).noalias() =
        CMapR<T>(a.value().ptr(), M, K) * CMapR<T>(b.value().ptr(), K, N);
    return make_result<T>(std::move(out), {a, b}, [M, K, N](Node<T>* self) {
        return [self, M, K, N] {
            auto& pa = parent(self, 0);
            auto& pb = parent(self, 1);
            CMapR<T> G(self->grad.ptr(), M, N);
            if (pa.requires_grad) {
                MapR<T>(pa.grad_buffer().ptr(), M, K).noalias() +=
                    G * CMapR<T>(pb.value.ptr(), K, N).transpose();
            }
            if (pb.requires_grad) {
                MapR<T>(pb.grad_buffer().ptr(), K, N).noalias() +=
                    CMapR<T>(pa.value.ptr(), M, K).transpose() * G;
            }
        };
    });
}

template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const std::type_identity_t<std::optional<Var<T>>>& bias) {
    if (weight.shape().size() != 2 || x.shape().empty() || x.shape().back() != weight.dim(1)) {
        throw ShapeError("linear: input " + shape_str(x.shape()) + " vs weight " +
                         shape_str(weight.shape()));
    }
    const std::size_t in = weight.dim(1), outf = weight.dim(0);
    const std::size_t R = x.numel() / in;
    if (bias && (bias->shape().size() != 1 || bias->dim(0) != outf)) {
        throw ShapeError("linear: bias " + shape_str(bias->shape()) + " vs out features " +
                         std::to_string(outf));
    }
    Shape os = x.shape();
    os.back() = outf;
    Tensor<T> out(os);
    MapR<T> Y(out.ptr(), R, outf);
    Y.noalias() = CMapR<T>(x.value().ptr(), R, in) * CMapR<T>(weight.value().ptr(), outf, in).transpose();
    if (bias) {
        Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> b(bias->value().ptr(), outf);
        Y.rowwise() += b;
    }
    std::vector<Var<T>> parents{x, weight};
    if (bias) parents.push_back(*bias);
    const bool has_bias = bias.has_value();
    return make_result<T>(std::move(out), std::move(parents), [R, in, outf, has_bias](Node<T>* self) {
        return [self, R, in, outf, has_bias] {
            auto& px = parent(self, 0);
            auto& pw = parent(self, 1);
            CMapR<T> G(self->grad.ptr(), R, outf);
            if (px.requires_grad) {
                MapR<T>(px.grad_buffer().ptr(), R, in).noalias() +=
                    G * CMapR<T>(pw.value.ptr(), outf, in);
            }
            if (pw.requires_grad) {
                MapR<T>(pw.grad_buffer().ptr(), outf, in).noalias() +=
                    G.transpose() * CMapR<T>(px.value.ptr(), R, in);
            }
            if (has_bias) {
                auto& pb = parent(self, 2);
                if (pb.requires_grad) {
                    Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> gb(pb.grad_buffer().ptr(), outf);
                    gb += G.colwise().sum();
                }
            }
        };
    });
}

template <class T>
Var<T> softmax(const Var<T>& x, int axis) {
    const int nd = static_cast<int>(x.shape().size());
    const int ax = axis < 0 ? axis + nd : axis;
    if (ax < 0 || ax >= nd) {
        throw IndexError("softmax: axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(x.shape()));
    }
    std::size_t outer = 1, inner = 1;
    for (int i = 0; i < ax; ++i) outer *= x.dim(i);
    for (int i = ax + 1; i < nd; ++i) inner *= x.dim(i);
    const std::size_t len = x.dim(ax);
    Tensor<T> out(x.shape());
    const T* src = x.value().ptr();
    T* dst = out.ptr();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, src[base + j * inner]);
            T total = 0;
            for (std::size_t j = 0; j < len; ++j) {
                const T e = std::exp(src[base + j * inner] - mx);
                dst[base + j * inner] = e;
                total += e;
            }
            for (std::size_t j = 0; j < len; ++j) dst[base + j * inner] /= total;
        }
    }
    return make_result<T>(std::move(out), {x}, [outer, inner, len](Node<T>* self) {
        return [self, outer, inner, len] {
            auto& g = parent(self, 0).grad_buffer();
            const T* y = self->value.ptr();
            const T* gy = self->grad.ptr();
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t in = 0; in < inner; ++in) {
                    const std::size_t base = o * len * inner + in;
                    T dot = 0;
                    for (std::size_t j = 0; j < len; ++j)
                        dot += gy[base + j * inner] * y[base + j * inner];
                    for (std::size_t j = 0; j < len; ++j) {
                        const std::size_t i = base + j * inner;
                        g[i] += y[i] * (gy[i] - dot);
                    }
                }
            }
        };
    });
}

namespace {

// Shared normalization kernel: `groups` independent blocks of `block` contiguous
// elements; `channel_of(e)` maps an element to its affine parameter index.
template <class T, class ChannelOf>
Var<T> normalize(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, std::size_t groups,
                 std::size_t block, T eps, ChannelOf channel_of) {
    Tensor<T> out(x.shape());
    std::vector<T> xhat(x.numel());
    std::vector<T> inv_std(groups);
    const T* xv = x.value().ptr();
    for (std::size_t g = 0; g < groups; ++g) {
        const T* src = xv + g * block;
        T m = 0;
        for (std::size_t i = 0; i < block; ++i) m += src[i];
        m /= static_cast<T>(block);
        T var = 0;
        for (std::size_t i = 0; i < block; ++i) var += (src[i] - m) * (src[i] - m);
        var /= static_cast<T>(block);
        const T is = T(1) / std::sqrt(var + eps);
        inv_std[g] = is;
        for (std::size_t i = 0; i < block; ++i) {
            const std::size_t e = g * block + i;
            xhat[e] = (src[i] - m) * is;
            const std::size_t c = channel_of(e);
            out[e] = xhat[e] * gamma.value()[c] + beta.value()[c];
        }
    }
    return make_result<T>(
        std::move(out), {x, gamma, beta},
        [groups, block, channel_of, xhat = std::move(xhat),
         inv_std = std::move(inv_std)](Node<T>* self) mutable {
            return [self, groups, block, channel_of, xhat = std::move(xhat),
                    inv_std = std::move(inv_std)] {
                auto& px = parent(self, 0);
                auto& pg = parent(self, 1);
                auto& pb = parent(self, 2);
                const T* gy = self->grad.ptr();
                if (pg.requires_grad) {
                    auto& gg = pg.grad_buffer();
                    for (std::size_t e = 0; e < xhat.size(); ++e) gg[channel_of(e)] += gy[e] * xhat[e];
                }
                if (pb.requires_grad) {
                    auto& gb = pb.grad_buffer();
                    for (std::size_t e = 0; e < xhat.size(); ++e) gb[channel_of(e)] += gy[e];
                }
                if (!px.requires_grad) return;
                auto& gx = px.grad_buffer();
                for (std::size_t g = 0; g < groups; ++g) {
                    T mean_d = 0, mean_dx = 0;
                    for (std::size_t i = 0; i < block; ++i) {
                        const std::size_t e = g * block + i;
                        const T d = gy[e] * pg.value[channel_of(e)];
                        mean_d += d;
                        mean_dx += d * xhat[e];
                    }
                    mean_d /= static_cast<T>(block);
                    mean_dx /= static_cast<T>(block);
                    for (std::size_t i = 0; i < block; ++i) {
                        const std::size_t e = g * block + i;
                        const T d = gy[e] * pg.value[channel_of(e)];
                        gx[e] += inv_std[g] * (d - mean_d - xhat[e] * mean_dx);
                    }
                }
            };
        });
}

}  // namespace

template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
    if (x.shape().empty()) throw ShapeError("layer_norm on scalar");
    const std::size_t D = x.shape().back();
    if (gamma.numel() != D || beta.numel() != D) {
        throw ShapeError("layer_norm: affine size " + std::to_string(gamma.numel()) +
                         " vs feature dim " + std::to_string(D));
    }
    return normalize(x, gamma, beta, x.numel() / D, D, eps,
                     [D](std::size_t e) { return e % D; });
}

template <class T>
Var<T> group_norm(const Var<T>& x, std::size_t groups, const Var<T>& gamma, const Var<T>& beta,
                  T eps) {
    if (x.shape().size() != 4) throw ShapeError("group_norm expects [N,C,H,W], got " + shape_str(x.shape()));
    const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    if (groups == 0 || C % groups != 0) {
        throw ShapeError("group_norm: " + std::to_string(C) + " channels not divisible into " +
                         std::to_string(groups) + " groups");
    }
    if (gamma.numel() != C || beta.numel() != C) {
        throw ShapeError("group_norm: affine size " + std::to_string(gamma.numel()) +
                         " vs channels " + std::to_string(C));
    }
    const std::size_t block = (C / groups) * HW;
    return normalize(x, gamma, beta, N * groups, block, eps,
                     [C, HW](std::size_t e) { return (e / HW) % C; });
}

template <class T>
Var<T> embedding(const Var<T>& table, std::span<const int> ids) {
    if (table.shape().size() != 2) throw ShapeError("embedding table must be 2-D, got " + shape_str(table.shape()));
    const std::size_t V = table.dim(0), D = table.dim(1);
    Tensor<T> out({ids.size(), D});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= V) {
            throw IndexError("embedding: id " + std::to_string(ids[i]) + " outside table of " +
                             std::to_string(V) + " rows");
        }
        std::copy_n(table.value().ptr() + ids[i] * D, D, out.ptr() + i * D);
    }
    std::vector<int> idv(ids.begin(), ids.end());
    return make_result<T>(std::move(out), {table}, [D, idv = std::move(idv)](Node<T>* self) mutable {
        return [self, D, idv = std::move(idv)] {
            auto& g = parent(self, 0).grad_buffer();
            for (std::size_t i = 0; i < idv.size(); ++i)
                for (std::size_t d = 0; d < D; ++d) g[idv[i] * D + d] += self->grad[i * D + d];
        };
    });
}

template <class T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t n_heads,
                 bool causal) {
    if (q.shape().size() != 3 || k.shape().size() != 3 || v.shape() != k.shape() ||
        q.dim(0) != k.dim(0) || q.dim(2) != k.dim(2)) {
        throw ShapeError("attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) +
                         ", v " + shape_str(v.shape()));
    }
    const std::size_t B = q.dim(0), Lq = q.dim(1), Lk = k.dim(1), E = q.dim(2);
    if (n_heads == 0 || E % n_heads != 0) {
        throw ShapeError("attention: embed dim " + std::to_string(E) + " not divisible by " +
                         std::to_string(n_heads) + " heads");
    }
    if (causal && Lq != Lk) {
        throw ShapeError("attention: causal mask needs square scores, got " + std::to_string(Lq) +
                         "x" + std::to_string(Lk));
    }
    const std::size_t d = E / n_heads;
    const T sc = T(1) / std::sqrt(static_cast<T>(d));
    Tensor<T> out({B, Lq, E});
    std::vector<T> probs(B * n_heads * Lq * Lk);
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t h = 0; h < n_heads; ++h) {
            CSMapR<T> Q(q.value().ptr() + b * Lq * E + h * d, Lq, d, Eigen::OuterStride<>(E));
            CSMapR<T> K(k.value().ptr() + b * Lk * E + h * d, Lk, d, Eigen::OuterStride<>(E));
            CSMapR<T> V(v.value().ptr() + b * Lk * E + h * d, Lk, d, Eigen::OuterStride<>(E));
            MapR<T> P(probs.data() + (b * n_heads + h) * Lq * Lk, Lq, Lk);
            P.noalias() = (Q * K.transpose()) * sc;
            for (std::size_t i = 0; i < Lq; ++i) {
                const std::size_t lim = causal ? i + 1 : Lk;
                T mx = -std::numeric_limits<T>::infinity();
                for (std::size_t j = 0; j < lim; ++j) mx = std::max(mx, P(i, j));
                T total = 0;
                for (std::size_t j = 0; j < lim; ++j) {
                    P(i, j) = std::exp(P(i, j) - mx);
                    total += P(i, j);
                }
                for (std::size_t j = 0; j < lim; ++j) P(i, j) /= total;
                for (std::size_t j = lim; j < Lk; ++j) P(i, j) = T(0);
            }
            SMapR<T> O(out.ptr() + b * Lq * E + h * d, Lq, d, Eigen::OuterStride<>(E));
            O.noalias() = P * V;
        }
    }
    return make_result<T>(
        std::move(out), {q, k, v},
        [=, probs = std::move(probs)](Node<T>* self) mutable {
            return [=, probs = std::move(probs)] {
                auto& pq = parent(self, 0);
                auto& pk = parent(self, 1);
                auto& pv = parent(self, 2);
                T* gq = pq.requires_grad ? pq.grad_buffer().ptr() : nullptr;
                T* gk = pk.requires_grad ? pk.grad_buffer().ptr() : nullptr;
                T* gv = pv.requires_grad ? pv.grad_buffer().ptr() : nullptr;
                MatR<T> dP(Lq, Lk);
                for (std::size_t b = 0; b < B; ++b) {
                    for (std::size_t h = 0; h < n_heads; ++h) {
                        const std::size_t qo = b * Lq * E + h * d, ko = b * Lk * E + h * d;
                        CSMapR<T> Q(pq.value.ptr() + qo, Lq, d, Eigen::OuterStride<>(E));
                        CSMapR<T> K(pk.value.ptr() + ko, Lk, d, Eigen::OuterStride<>(E));
                        CSMapR<T> V(pv.value.ptr() + ko, Lk, d, Eigen::OuterStride<>(E));
                        CSMapR<T> dO(self->grad.ptr() + qo, Lq, d, Eigen::OuterStride<>(E));
                        CMapR<T> P(probs.data() + (b * n_heads + h) * Lq * Lk, Lq, Lk);
                        if (gv) {
                            SMapR<T>(gv + ko, Lk, d, Eigen::OuterStride<>(E)).noalias() +=
                                P.transpose() * dO;
                        }
                        dP.noalias() = dO * V.transpose();
                        for (std::size_t i = 0; i < Lq; ++i) {
                            T dot = 0;
                            for (std::size_t j = 0; j < Lk; ++j) dot += dP(i, j) * P(i, j);
                            for (std::size_t j = 0; j < Lk; ++j) dP(i, j) = P(i, j) * (dP(i, j) - dot) * sc;
                        }
                        if (gq) {
                            SMapR<T>(gq + qo, Lq, d, Eigen::OuterStride<>(E)).noalias() += dP * K;
                        }
                        if (gk) {
                            SMapR<T>(gk + ko, Lk, d, Eigen::OuterStride<>(E)).noalias() +=
                                dP.transpose() * Q;
                        }
                    }
                }
            };
        });
}

template <class T>
Var<T> conv2d(const Var<T>& input, const Var<T>& weight, const std::type_identity_t<std::optional<Var<T>>>& bias,
              std::size_t stride, std::size_t padding) {
    if (input.shape().size() != 4 || weight.shape().size() != 4 || weight.dim(1) != input.dim(1) ||
        weight.dim(2) != weight.dim(3)) {
        throw ShapeError("conv2d: input " + shape_str(input.shape()) + " vs weight " +
                         shape_str(weight.shape()));
    }
    if (stride == 0) throw ShapeError("conv2d: stride must be positive");
    const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    const std::size_t O = weight.dim(0), k = weight.dim(2);
    if (H + 2 * padding < k || W + 2 * padding < k) {
        throw ShapeError("conv2d: kernel " + std::to_string(k) + " larger than padded input " +
                         shape_str(input.shape()));
    }
    if (bias && bias->numel() != O) {
        throw ShapeError("conv2d: bias size " + std::to_string(bias->numel()) + " vs " +
                         std::to_string(O) + " output channels");
    }
    const std::size_t Ho = (H + 2 * padding - k) / stride + 1;
    const std::size_t Wo = (W + 2 * padding - k) / stride + 1;
    const std::size_t P = Ho * Wo, CKK = C * k * k, ld = N * P;

    std::vector<T> col(CKK * ld);
    for (std::size_t n = 0; n < N; ++n)
        im2col(input.value().ptr() + n * C * H * W, C, H, W, k, stride, padding, Ho, Wo, col.data(),
               ld, n * P);
    MatR<T> Y = CMapR<T>(weight.value().ptr(), O, CKK) * CMapR<T>(col.data(), CKK, ld);
    Tensor<T> out({N, O, Ho, Wo});
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t o = 0; o < O; ++o) {
            const T b = bias ? bias->value()[o] : T(0);
            const T* src = Y.data() + o * ld + n * P;
            T* dst = out.ptr() + (n * O + o) * P;
            for (std::size_t i = 0; i < P; ++i) dst[i] = src[i] + b;
        }

    std::vector<Var<T>> parents{input, weight};
    if (bias) parents.push_back(*bias);
    const bool has_bias = bias.has_value();
    return make_result<T>(std::move(out), std::move(parents), [=](Node<T>* self) {
        return [=] {
            auto& px = parent(self, 0);
            auto& pw = parent(self, 1);
            MatR<T> G(O, ld);
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t o = 0; o < O; ++o)
                    std::copy_n(self->grad.ptr() + (n * O + o) * P, P, G.data() + o * ld + n * P);
            if (has_bias) {
                auto& pb = parent(self, 2);
                if (pb.requires_grad) {
                    auto& gb = pb.grad_buffer();
                    for (std::size_t o = 0; o < O; ++o) gb[o] += G.row(o).sum();
                }
            }
            if (pw.requires_grad) {
                std::vector<T> cols(CKK * ld);
                for (std::size_t n = 0; n < N; ++n)
                    im2col(px.value.ptr() + n * C * H * W, C, H, W, k, stride, padding, Ho, Wo,
                           cols.data(), ld, n * P);
                MapR<T>(pw.grad_buffer().ptr(), O, CKK).noalias() +=
                    G * CMapR<T>(cols.data(), CKK, ld).transpose();
            }
            if (px.requires_grad) {
                MatR<T> dcol = CMapR<T>(pw.value.ptr(), O, CKK).transpose() * G;
                auto& gx = px.grad_buffer();
                for (std::size_t n = 0; n < N; ++n)
                    col2im(dcol.data(), C, H, W, k, stride, padding, Ho, Wo,
                           gx.ptr() + n * C * H * W, ld, n * P);
            }
        };
    });
}

template <class T>
Var<T> conv_transpose2d(const Var<T>& input, const Var<T>& weight,
                        const std::type_identity_t<std::optional<Var<T>>>& bias, std::size_t stride,
                        std::size_t padding) {
    if (input.shape().size() != 4 || weight.shape().size() != 4 || weight.dim(0) != input.dim(1) ||
        weight.dim(2) != weight.dim(3)) {
        throw ShapeError("conv_transpose2d: input " + shape_str(input.shape()) + " vs weight " +
                         shape_str(weight.shape()));
    }
    if (stride == 0) throw ShapeError("conv_transpose2d: stride must be positive");
    const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    const std::size_t O = weight.dim(1), k = weight.dim(2);
    if ((H - 1) * stride + k < 2 * padding + 1 || (W - 1) * stride + k < 2 * padding + 1) {
        throw ShapeError("conv_transpose2d: padding " + std::to_string(padding) +
                         " leaves empty output for input " + shape_str(input.shape()));
    }
    if (bias && bias->numel() != O) {
        throw ShapeError("conv_transpose2d: bias size " + std::to_string(bias->numel()) + " vs " +
                         std::to_string(O) + " output channels");
    }
    const std::size_t Ho = (H - 1) * stride + k - 2 * padding;
    const std::size_t Wo = (W - 1) * stride + k - 2 * padding;
    const std::size_t HW = H * W, OKK = O * k * k, ld = N * HW;

    // Input as [C, N*HW].
    MatR<T> X(C, ld);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
            std::copy_n(input.value().ptr() + (n * C + c) * HW, HW, X.data() + c * ld + n * HW);
    MatR<T> cols = CMapR<T>(weight.value().ptr(), C, OKK).transpose() * X;
    Tensor<T> out({N, O, Ho, Wo});
    for (std::size_t n = 0; n < N; ++n)
        col2im(cols.data(), O, Ho, Wo, k, stride, padding, H, W, out.ptr() + n * O * Ho * Wo, ld,
               n * HW);
    if (bias) {
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t o = 0; o < O; ++o) {
                T* dst = out.ptr() + (n * O + o) * Ho * Wo;
                for (std::size_t i = 0; i < Ho * Wo; ++i) dst[i] += bias->value()[o];
            }
    }

    std::vector<Var<T>> parents{input, weight};
    if (bias) parents.push_back(*bias);
    const bool has_bias = bias.has_value();
    return make_result<T>(std::move(out), std::move(parents), [=, X = std::move(X)](Node<T>* self) mutable {
        return [=, X = std::move(X)] {
            auto& px = parent(self, 0);
            auto& pw = parent(self, 1);
            if (has_bias) {
                auto& pb = parent(self, 2);
                if (pb.requires_grad) {
                    auto& gb = pb.grad_buffer();
                    for (std::size_t n = 0; n < N; ++n)
                        for (std::size_t o = 0; o < O; ++o) {
                            const T* src = self->grad.ptr() + (n * O + o) * Ho * Wo;
                            T acc = 0;
                            for (std::size_t i = 0; i < Ho * Wo; ++i) acc += src[i];
                            gb[o] += acc;
                        }
                }
            }
            if (!px.requires_grad && !pw.requires_grad) return;
            std::vector<T> gcol(OKK * ld);
            for (std::size_t n = 0; n < N; ++n)
                im2col(self->grad.ptr() + n * O * Ho * Wo, O, Ho, Wo, k, stride, padding, H, W,
                       gcol.data(), ld, n * HW);
            CMapR<T> GC(gcol.data(), OKK, ld);
            if (pw.requires_grad) {
                MapR<T>(pw.grad_buffer().ptr(), C, OKK).noalias() += X * GC.transpose();
            }
            if (px.requires_grad) {
                MatR<T> dX = CMapR<T>(pw.value.ptr(), C, OKK) * GC;
                auto& gx = px.grad_buffer();
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t c = 0; c < C; ++c) {
                        const T* src = dX.data() + c * ld + n * HW;
                        T* dst = gx.ptr() + (n * C + c) * HW;
                        for (std::size_t i = 0; i < HW; ++i) dst[i] += src[i];
                    }
            }
        };
    });
}

template <class T>
Var<T> nchw_to_rows(const Var<T>& x) {
    if (x.shape().size() != 4) throw ShapeError("nchw_to_rows expects [N,C,H,W], got " + shape_str(x.shape()));
    const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    Tensor<T> out({N * HW, C});
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t p = 0; p < HW; ++p) out[(n * HW + p) * C + c] = x.value()[(n * C + c) * HW + p];
    return make_result<T>(std::move(out), {x}, [N, C, HW](Node<T>* self) {
        return [self, N, C, HW] {
            auto& g = parent(self, 0).grad_buffer();
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t p = 0; p < HW; ++p)
                        g[(n * C + c) * HW + p] += self->grad[(n * HW + p) * C + c];
        };
    });
}

template <class T>
Var<T> rows_to_nchw(const Var<T>& x, std::size_t n_, std::size_t h, std::size_t w) {
    if (x.shape().size() != 2 || x.dim(0) != n_ * h * w) {
        throw ShapeError("rows_to_nchw: " + shape_str(x.shape()) + " cannot form N=" +
                         std::to_string(n_) + " H=" + std::to_string(h) + " W=" + std::to_string(w));
    }
    const std::size_t N = n_, C = x.dim(1), HW = h * w;
    Tensor<T> out({N, C, h, w});
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t p = 0; p < HW; ++p) out[(n * C + c) * HW + p] = x.value()[(n * HW + p) * C + c];
    return make_result<T>(std::move(out), {x}, [N, C, HW](Node<T>* self) {
        return [self, N, C, HW] {
            auto& g = parent(self, 0).grad_buffer();
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t p = 0; p < HW; ++p)
                        g[(n * HW + p) * C + c] += self->grad[(n * C + c) * HW + p];
        };
    });
}

template <class T>
Var<T> slice_last(const Var<T>& x, std::size_t begin, std::size_t end) {
    if (x.shape().empty() || begin > end || end > x.shape().back()) {
        throw IndexError("slice_last: [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") outside " + shape_str(x.shape()));
    }
    const std::size_t C = x.shape().back(), Wd = end - begin, R = x.numel() / C;
    Shape os = x.shape();
    os.back() = Wd;
    Tensor<T> out(os);
    for (std::size_t r = 0; r < R; ++r) std::copy_n(x.value().ptr() + r * C + begin, Wd, out.ptr() + r * Wd);
    return make_result<T>(std::move(out), {x}, [C, Wd, R, begin](Node<T>* self) {
        return [self, C, Wd, R, begin] {
            auto& g = parent(self, 0).grad_buffer();
            for (std::size_t r = 0; r < R; ++r)
                for (std::size_t j = 0; j < Wd; ++j) g[r * C + begin + j] += self->grad[r * Wd + j];
        };
    });
}

template <class T>
Var<T> select_rows(const Var<T>& x, std::span<const std::size_t> idx) {
    if (x.shape().size() != 2) throw ShapeError("select_rows expects 2-D input, got " + shape_str(x.shape()));
    const std::size_t R = x.dim(0), C = x.dim(1);
    Tensor<T> out({idx.size(), C});
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= R) throw IndexError("select_rows: row " + std::to_string(idx[i]) + " >= " + std::to_string(R));
        std::copy_n(x.value().ptr() + idx[i] * C, C, out.ptr() + i * C);
    }
    std::vector<std::size_t> iv(idx.begin(), idx.end());
    return make_result<T>(std::move(out), {x}, [C, iv = std::move(iv)](Node<T>* self) mutable {
        return [self, C, iv = std::move(iv)] {
            auto& g = parent(self, 0).grad_buffer();
            for (std::size_t i = 0; i < iv.size(); ++i)
                for (std::size_t c = 0; c < C; ++c) g[iv[i] * C + c] += self->grad[i * C + c];
        };
    });
}

template <class T>
Var<T> straight_through(const Var<T>& z, const Var<T>& z_q) {
    require_same_shape(z.shape(), z_q.shape(), "straight_through");
    return make_result<T>(z_q.value(), {z}, [](Node<T>* self) {
        return [self] {
            auto& g = parent(self, 0).grad_buffer();
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self->grad[i];
        };
    });
}

template <class T>
Var<T> masked_cross_entropy(const Var<T>& logits, std::span<const int> targets,
                            std::span<const std::uint8_t> ignore) {
    if (logits.shape().size() != 2 || targets.size() != logits.dim(0) || ignore.size() != targets.size()) {
        throw ShapeError("masked_cross_entropy: logits " + shape_str(logits.shape()) + ", " +
                         std::to_string(targets.size()) + " targets, " +
                         std::to_string(ignore.size()) + " ignore flags");
    }
    const std::size_t N = logits.dim(0), K = logits.dim(1);
    std::size_t count = 0;
    for (std::size_t i = 0; i < N; ++i) {
        if (ignore[i]) continue;
        if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= K) {
            throw IndexError("masked_cross_entropy: target " + std::to_string(targets[i]) +
                             " at row " + std::to_string(i) + " outside vocabulary of " +
                             std::to_string(K));
        }
        ++count;
    }
    if (count == 0) return Var<T>::constant(Tensor<T>::scalar(T(0)));
    std::vector<T> sm(N * K, T(0));
    T total = 0;
    const T* x = logits.value().ptr();
    for (std::size_t i = 0; i < N; ++i) {
        if (ignore[i]) continue;
        const T* row = x + i * K;
        const T mx = *std::max_element(row, row + K);
        T z = 0;
        for (std::size_t j = 0; j < K; ++j) z += std::exp(row[j] - mx);
        const T lse = mx + std::log(z);
        total += lse - row[targets[i]];
        for (std::size_t j = 0; j < K; ++j) sm[i * K + j] = std::exp(row[j] - lse);
    }
    const T inv = T(1) / static_cast<T>(count);
    std::vector<int> tv(targets.begin(), targets.end());
    std::vector<std::uint8_t> ig(ignore.begin(), ignore.end());
    return make_result<T>(Tensor<T>::scalar(total * inv), {logits},
                          [=, sm = std::move(sm), tv = std::move(tv), ig = std::move(ig)](Node<T>* self) mutable {
                              return [=, sm = std::move(sm), tv = std::move(tv), ig = std::move(ig)] {
                                  auto& g = parent(self, 0).grad_buffer();
                                  const T d = self->grad[0] * inv;
                                  for (std::size_t i = 0; i < N; ++i) {
                                      if (ig[i]) continue;
                                      for (std::size_t j = 0; j < K; ++j) g[i * K + j] += d * sm[i * K + j];
                                      g[i * K + tv[i]] -= d;
                                  }
                              };
                          });
}

template <class T>
Var<T> masked_mse(const Var<T>& pred, const Var<T>& target, std::span<const std::uint8_t> valid) {
    require_same_shape(pred.shape(), target.shape(), "masked_mse");
    if (valid.size() != pred.numel()) {
        throw ShapeError("masked_mse: mask of " + std::to_string(valid.size()) + " entries for " +
                         shape_str(pred.shape()));
    }
    std::size_t count = 0;
    T total = 0;
    for (std::size_t i = 0; i < valid.size(); ++i) {
        if (!valid[i]) continue;
        const T d = pred.value()[i] - target.value()[i];
        total += d * d;
        ++count;
    }
    if (count == 0) return Var<T>::constant(Tensor<T>::scalar(T(0)));
    const T inv = T(1) / static_cast<T>(count);
    std::vector<std::uint8_t> vm(valid.begin(), valid.end());
    return make_result<T>(Tensor<T>::scalar(total * inv), {pred, target},
                          [inv, vm = std::move(vm)](Node<T>* self) mutable {
                              return [self, inv, vm = std::move(vm)] {
                                  auto& pp = parent(self, 0);
                                  auto& pt = parent(self, 1);
                                  const T s = T(2) * inv * self->grad[0];
                                  T* gp = pp.requires_grad ? pp.grad_buffer().ptr() : nullptr;
                                  T* gt = pt.requires_grad ? pt.grad_buffer().ptr() : nullptr;
                                  for (std::size_t i = 0; i < vm.size(); ++i) {
                                      if (!vm[i]) continue;
                                      const T d = s * (pp.value[i] - pt.value[i]);
                                      if (gp) gp[i] += d;
                                      if (gt) gt[i] -= d;
                                  }
                              };
                          });
}

template <class T>
Var<T> masked_bce_with_logits(const Var<T>& logits, const Var<T>& target,
                              std::span<const std::uint8_t> valid) {
    require_same_shape(logits.shape(), target.shape(), "masked_bce_with_logits");
    if (valid.size() != logits.numel()) {
        throw ShapeError("masked_bce_with_logits: mask of " + std::to_string(valid.size()) +
                         " entries for " + shape_str(logits.shape()));
    }
    std::size_t count = 0;
    T total = 0;
    for (std::size_t i = 0; i < valid.size(); ++i) {
        if (!valid[i]) continue;
        const T x = logits.value()[i], t = target.value()[i];
        total += std::max(x, T(0)) - x * t + std::log1p(std::exp(-std::abs(x)));
        ++count;
    }
    if (count == 0) return Var<T>::constant(Tensor<T>::scalar(T(0)));
    const T inv = T(1) / static_cast<T>(count);
    std::vector<std::uint8_t> vm(valid.begin(), valid.end());
    return make_result<T>(Tensor<T>::scalar(total * inv), {logits, target},
                          [inv, vm = std::move(vm)](Node<T>* self) mutable {
                              return [self, inv, vm = std::move(vm)] {
                                  auto& pl = parent(self, 0);
                                  auto& pt = parent(self, 1);
                                  const T s = inv * self->grad[0];
                                  T* gl = pl.requires_grad ? pl.grad_buffer().ptr() : nullptr;
                                  T* gt = pt.requires_grad ? pt.grad_buffer().ptr() : nullptr;
                                  for (std::size_t i = 0; i < vm.size(); ++i) {
                                      if (!vm[i]) continue;
                                      const T x = pl.value[i];
                                      if (gl) gl[i] += s * (T(1) / (T(1) + std::exp(-x)) - pt.value[i]);
                                      if (gt) gt[i] -= s * x;
                                  }
                              };
                          });
}

#define VISTOK_INSTANTIATE_OPS(T)                                                              \
    template Var<T> add(const Var<T>&, const Var<T>&);                                         \
    template Var<T> sub(const Var<T>&, const Var<T>&);                                         \
    template Var<T> mul(const Var<T>&, const Var<T>&);                                         \
    template Var<T> add_broadcast(const Var<T>&, const Var<T>&);                               \
    template Var<T> scale(const Var<T>&, T);                                                   \
    template Var<T> add_scalar(const Var<T>&, T);                                              \
    template Var<T> relu(const Var<T>&);                                                       \
    template Var<T> sigmoid(const Var<T>&);                                                    \
    template Var<T> sum(const Var<T>&);                                                        \
    template Var<T> mean(const Var<T>&);                                                       \
    template Var<T> reshape(const Var<T>&, Shape);                                             \
    template Var<T> detach(const Var<T>&);                                                     \
    template Var<T> matmul(const Var<T>&, const Var<T>&);                                      \
    template Var<T> linear(const Var<T>&, const Var<T>&, const std::optional<Var<T>>&);        \
    template Var<T> softmax(const Var<T>&, int);                                               \
    template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, T);                \
    template Var<T> group_norm(const Var<T>&, std::size_t, const Var<T>&, const Var<T>&, T);   \
    template Var<T> embedding(const Var<T>&, std::span<const int>);                            \
    template Var<T> attention(const Var<T>&, const Var<T>&, const Var<T>&, std::size_t, bool); \
    template Var<T> conv2d(const Var<T>&, const Var<T>&, const std::optional<Var<T>>&,         \
                           std::size_t, std::size_t);                                          \
    template Var<T> conv_transpose2d(const Var<T>&, const Var<T>&,                             \
                                     const std::optional<Var<T>>&, std::size_t, std::size_t);  \
    template Var<T> nchw_to_rows(const Var<T>&);                                               \
    template Var<T> rows_to_nchw(const Var<T>&, std::size_t, std::size_t, std::size_t);        \
    template Var<T> slice_last(const Var<T>&, std::size_t, std::size_t);                      \
    template Var<T> select_rows(const Var<T>&, std::span<const std::size_t>);                  \
    template Var<T> straight_through(const Var<T>&, const Var<T>&);                            \
    template Var<T> masked_cross_entropy(const Var<T>&, std::span<const int>,                  \
                                         std::span<const std::uint8_t>);                       \
    template Var<T> masked_mse(const Var<T>&, const Var<T>&, std::span<const std::uint8_t>);   \
    template Var<T> masked_bce_with_logits(const Var<T>&, const Var<T>&,                       \
                                           std::span<const std::uint8_t>);

VISTOK_INSTANTIATE_OPS(float)
VISTOK_INSTANTIATE_OPS(double)

#undef VISTOK_INSTANTIATE_OPS

}  // namespace vistok::ops
