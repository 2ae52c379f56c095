#include "binformer/ops.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstring>
#include <utility>

namespace binformer {

namespace {

using EMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

using detail::Node;

std::shared_ptr<Node> new_node(Shape shape, std::vector<float> value, const char* op) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->op = op;
    return n;
}

// Finalizes an op node: links inputs and installs the backward rule only when
// this op participates in a backward pass.
Tensor finish(std::shared_ptr<Node> n, std::vector<Tensor> inputs,
              std::function<void(Node&)> backward) {
    bool needs = false;
    if (grad_enabled()) {
        for (const auto& t : inputs) needs = needs || t.requires_grad();
    }
    if (needs) {
        n->requires_grad = true;
        n->inputs.reserve(inputs.size());
        for (auto& t : inputs) n->inputs.push_back(t.node());
        n->backward = std::move(backward);
    }
    return Tensor::wrap(std::move(n));
}

void accumulate(Node& dst, const float* g, int64_t n) {
    dst.ensure_grad();
    for (int64_t i = 0; i < n; ++i) dst.grad[static_cast<size_t>(i)] += g[i];
}

bool wants_grad(const Node& n) { return n.requires_grad; }

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
    }
}

}  // namespace

void matmul_values(const float* a, const float* b, float* out, int64_t m, int64_t k, int64_t n) {
    ECMap ma(a, m, k);
    ECMap mb(b, k, n);
    EMap mo(out, m, n);
    mo.noalias() = ma * mb;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) {
        throw DimensionError("matmul: expected rank-2 operands, got " + shape_str(a.shape()) +
                             " and " + shape_str(b.shape()));
    }
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw DimensionError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    }
    std::vector<float> out(static_cast<size_t>(m * n));
    matmul_values(a.data().data(), b.data().data(), out.data(), m, k, n);
    auto node = new_node({m, n}, std::move(out), "matmul");
    return finish(node, {a, b}, [m, k, n](Node& self) {
        Node& na = *self.inputs[0];
        Node& nb = *self.inputs[1];
        ECMap g(self.grad.data(), m, n);
        ECMap va(na.value.data(), m, k);
        ECMap vb(nb.value.data(), k, n);
        if (wants_grad(na)) {
            na.ensure_grad();
            EMap(na.grad.data(), m, k).noalias() += g * vb.transpose();
        }
        if (wants_grad(nb)) {
            nb.ensure_grad();
            EMap(nb.grad.data(), k, n).noalias() += va.transpose() * g;
        }
    });
}

Tensor bmm(const Tensor& a, const Tensor& b) {
    if (a.rank() != 3 || b.rank() != 3) throw DimensionError("bmm: expected rank-3 operands");
    const int64_t B = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    if (b.dim(0) != B || b.dim(1) != k) {
        throw DimensionError("bmm: shape mismatch " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    }
    std::vector<float> out(static_cast<size_t>(B * m * n));
    for (int64_t i = 0; i < B; ++i) {
        matmul_values(a.data().data() + i * m * k, b.data().data() + i * k * n,
                      out.data() + i * m * n, m, k, n);
    }
    auto node = new_node({B, m, n}, std::move(out), "bmm");
    return finish(node, {a, b}, [B, m, k, n](Node& self) {
        Node& na = *self.inputs[0];
        Node& nb = *self.inputs[1];
        if (wants_grad(na)) na.ensure_grad();
        if (wants_grad(nb)) nb.ensure_grad();
        for (int64_t i = 0; i < B; ++i) {
            ECMap g(self.grad.data() + i * m * n, m, n);
            ECMap va(na.value.data() + i * m * k, m, k);
            ECMap vb(nb.value.data() + i * k * n, k, n);
            if (wants_grad(na)) EMap(na.grad.data() + i * m * k, m, k).noalias() += g * vb.transpose();
            if (wants_grad(nb)) EMap(nb.grad.data() + i * k * n, k, n).noalias() += va.transpose() * g;
        }
    });
}

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    const int64_t n = a.numel();
    std::vector<float> out(static_cast<size_t>(n));
    const float* pa = a.data().data();
    const float* pb = b.data().data();
    for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = pa[i] + pb[i];
    auto node = new_node(a.shape(), std::move(out), "add");
    return finish(node, {a, b}, [n](Node& self) {
        for (int j = 0; j < 2; ++j) {
            Node& in = *self.inputs[static_cast<size_t>(j)];
            if (wants_grad(in)) accumulate(in, self.grad.data(), n);
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    const int64_t n = a.numel();
    std::vector<float> out(static_cast<size_t>(n));
    const float* pa = a.data().data();
    const float* pb = b.data().data();
    for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = pa[i] - pb[i];
    auto node = new_node(a.shape(), std::move(out), "sub");
    return finish(node, {a, b}, [n](Node& self) {
        Node& na = *self.inputs[0];
        Node& nb = *self.inputs[1];
        if (wants_grad(na)) accumulate(na, self.grad.data(), n);
        if (wants_grad(nb)) {
            nb.ensure_grad();
            for (int64_t i = 0; i < n; ++i) nb.grad[static_cast<size_t>(i)] -= self.grad[static_cast<size_t>(i)];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    const int64_t n = a.numel();
    std::vector<float> out(static_cast<size_t>(n));
    const float* pa = a.data().data();
    const float* pb = b.data().data();
    for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = pa[i] * pb[i];
    auto node = new_node(a.shape(), std::move(out), "mul");
    return finish(node, {a, b}, [n](Node& self) {
        Node& na = *self.inputs[0];
        Node& nb = *self.inputs[1];
        if (wants_grad(na)) {
            na.ensure_grad();
            for (int64_t i = 0; i < n; ++i)
                na.grad[static_cast<size_t>(i)] += self.grad[static_cast<size_t>(i)] * nb.value[static_cast<size_t>(i)];
        }
        if (wants_grad(nb)) {
            nb.ensure_grad();
            for (int64_t i = 0; i < n; ++i)
                nb.grad[static_cast<size_t>(i)] += self.grad[static_cast<size_t>(i)] * na.value[static_cast<size_t>(i)];
        }
    });
}

Tensor add_bias(const Tensor& x, const Tensor& b) {
    if (b.rank() != 1 || x.dim(x.rank() - 1) != b.dim(0)) {
        throw DimensionError("add_bias: bias " + shape_str(b.shape()) + " does not match last dim of " +
                             shape_str(x.shape()));
    }
    const int64_t d = b.dim(0);
    const int64_t rows = x.numel() / d;
    std::vector<float> out(static_cast<size_t>(rows * d));
    const float* px = x.data().data();
    const float* pb = b.data().data();
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < d; ++j) out[static_cast<size_t>(r * d + j)] = px[r * d + j] + pb[j];
    auto node = new_node(x.shape(), std::move(out), "add_bias");
    return finish(node, {x, b}, [rows, d](Node& self) {
        Node& nx = *self.inputs[0];
        Node& nb = *self.inputs[1];
        if (wants_grad(nx)) accumulate(nx, self.grad.data(), rows * d);
        if (wants_grad(nb)) {
            nb.ensure_grad();
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t j = 0; j < d; ++j) nb.grad[static_cast<size_t>(j)] += self.grad[static_cast<size_t>(r * d + j)];
        }
    });
}

Tensor scale(const Tensor& x, float c) {
    const int64_t n = x.numel();
    std::vector<float> out(static_cast<size_t>(n));
    const float* px = x.data().data();
    for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = px[i] * c;
    auto node = new_node(x.shape(), std::move(out), "scale");
    return finish(node, {x}, [n, c](Node& self) {
        Node& nx = *self.inputs[0];
        if (!wants_grad(nx)) return;
        nx.ensure_grad();
        for (int64_t i = 0; i < n; ++i) nx.grad[static_cast<size_t>(i)] += self.grad[static_cast<size_t>(i)] * c;
    });
}

Tensor scale_by(const Tensor& x, const Tensor& c) {
    if (c.numel() != 1) throw DimensionError("scale_by: scale must be a scalar tensor");
    const int64_t n = x.numel();
    const float cv = c.data()[0];
    std::vector<float> out(static_cast<size_t>(n));
    const float* px = x.data().data();
    for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = cv * px[i];
    auto node = new_node(x.shape(), std::move(out), "scale_by");
    return finish(node, {x, c}, [n, cv](Node& self) {
        Node& nx = *self.inputs[0];
        Node& nc = *self.inputs[1];
        if (wants_grad(nx)) {
            nx.ensure_grad();
            for (int64_t i = 0; i < n; ++i) nx.grad[static_cast<size_t>(i)] += self.grad[static_cast<size_t>(i)] * cv;
        }
        if (wants_grad(nc)) {
            nc.ensure_grad();
            double acc = 0.0;
            for (int64_t i = 0; i < n; ++i)
                acc += static_cast<double>(self.grad[static_cast<size_t>(i)]) * nx.value[static_cast<size_t>(i)];
            nc.grad[0] += static_cast<float>(acc);
        }
    });
}

Tensor relu(const Tensor& x) {
    const int64_t n = x.numel();
    std::vector<float> out(static_cast<size_t>(n));
    const float* px = x.data().data();
    for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = px[i] > 0.0f ? px[i] : 0.0f;
    auto node = new_node(x.shape(), std::move(out), "relu");
    return finish(node, {x}, [n](Node& self) {
        Node& nx = *self.inputs[0];
        if (!wants_grad(nx)) return;
        nx.ensure_grad();
        for (int64_t i = 0; i < n; ++i)
            if (nx.value[static_cast<size_t>(i)] > 0.0f) nx.grad[static_cast<size_t>(i)] += self.grad[static_cast<size_t>(i)];
    });
}

namespace {
// Shared row-wise softmax with max-subtraction.
void softmax_rows(const float* x, float* out, int64_t rows, int64_t d, bool log_form) {
    for (int64_t r = 0; r < rows; ++r) {
        const float* xr = x + r * d;
        float* yr = out + r * d;
        float mx = xr[0];
        for (int64_t j = 1; j < d; ++j) mx = std::max(mx, xr[j]);
        double denom = 0.0;
        for (int64_t j = 0; j < d; ++j) denom += std::exp(static_cast<double>(xr[j] - mx));
        if (log_form) {
            const float lden = static_cast<float>(std::log(denom));
            for (int64_t j = 0; j < d; ++j) yr[j] = xr[j] - mx - lden;
        } else {
            const float inv = static_cast<float>(1.0 / denom);
            for (int64_t j = 0; j < d; ++j) yr[j] = std::exp(xr[j] - mx) * inv;
        }
    }
}
}  // namespace

Tensor softmax_last(const Tensor& x) {
    const int64_t d = x.dim(x.rank() - 1);
    const int64_t rows = x.numel() / d;
    std::vector<float> out(static_cast<size_t>(rows * d));
    softmax_rows(x.data().data(), out.data(), rows, d, false);
    auto node = new_node(x.shape(), std::move(out), "softmax");
    return finish(node, {x}, [rows, d](Node& self) {
        Node& nx = *self.inputs[0];
        if (!wants_grad(nx)) return;
        nx.ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
            const float* p = self.value.data() + r * d;
            const float* g = self.grad.data() + r * d;
            float* gx = nx.grad.data() + r * d;
            double dot = 0.0;
            for (int64_t j = 0; j < d; ++j) dot += static_cast<double>(g[j]) * p[j];
            for (int64_t j = 0; j < d; ++j) gx[j] += (g[j] - static_cast<float>(dot)) * p[j];
        }
    });
}

Tensor log_softmax_last(const Tensor& x) {
    const int64_t d = x.dim(x.rank() - 1);
    const int64_t rows = x.numel() / d;
    std::vector<float> out(static_cast<size_t>(rows * d));
    softmax_rows(x.data().data(), out.data(), rows, d, true);
    auto node = new_node(x.shape(), std::move(out), "log_softmax");
    return finish(node, {x}, [rows, d](Node& self) {
        Node& nx = *self.inputs[0];
        if (!wants_grad(nx)) return;
        nx.ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
            const float* ls = self.value.data() + r * d;
            const float* g = self.grad.data() + r * d;
            float* gx = nx.grad.data() + r * d;
            double gsum = 0.0;
            for (int64_t j = 0; j < d; ++j) gsum += g[j];
            for (int64_t j = 0; j < d; ++j) gx[j] += g[j] - std::exp(ls[j]) * static_cast<float>(gsum);
        }
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps) {
    const int64_t d = x.dim(x.rank() - 1);
    if (gain.rank() != 1 || gain.dim(0) != d || bias.rank() != 1 || bias.dim(0) != d) {
        throw DimensionError("layer_norm: gain/bias must have shape [" + std::to_string(d) + "]");
    }
    const int64_t rows = x.numel() / d;
    std::vector<float> out(static_cast<size_t>(rows * d));
    // normalized rows and inverse stddevs are saved for the backward rule
    auto norm = std::make_shared<std::vector<float>>(static_cast<size_t>(rows * d));
    auto inv_std = std::make_shared<std::vector<float>>(static_cast<size_t>(rows));
    const float* px = x.data().data();
    const float* pg = gain.data().data();
    const float* pb = bias.data().data();
    for (int64_t r = 0; r < rows; ++r) {
        const float* xr = px + r * d;
        double mean = 0.0;
        for (int64_t j = 0; j < d; ++j) mean += xr[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            const double c = xr[j] - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const float inv = static_cast<float>(1.0 / std::sqrt(var + eps));
        (*inv_std)[static_cast<size_t>(r)] = inv;
        for (int64_t j = 0; j < d; ++j) {
            const float y = (xr[j] - static_cast<float>(mean)) * inv;
            (*norm)[static_cast<size_t>(r * d + j)] = y;
            out[static_cast<size_t>(r * d + j)] = y * pg[j] + pb[j];
        }
    }
    auto node = new_node(x.shape(), std::move(out), "layer_norm");
    return finish(node, {x, gain, bias}, [rows, d, norm, inv_std](Node& self) {
        Node& nx = *self.inputs[0];
        Node& ng = *self.inputs[1];
        Node& nb = *self.inputs[2];
        if (wants_grad(nx)) nx.ensure_grad();
        if (wants_grad(ng)) ng.ensure_grad();
        if (wants_grad(nb)) nb.ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
            const float* g = self.grad.data() + r * d;
            const float* y = norm->data() + r * d;
            const float inv = (*inv_std)[static_cast<size_t>(r)];
            if (wants_grad(ng) || wants_grad(nb)) {
                for (int64_t j = 0; j < d; ++j) {
                    if (wants_grad(ng)) ng.grad[static_cast<size_t>(j)] += g[j] * y[j];
                    if (wants_grad(nb)) nb.grad[static_cast<size_t>(j)] += g[j];
                }
            }
            if (wants_grad(nx)) {
                double mean_h = 0.0, mean_hy = 0.0;
                for (int64_t j = 0; j < d; ++j) {
                    const double h = static_cast<double>(g[j]) * ng.value[static_cast<size_t>(j)];
                    mean_h += h;
                    mean_hy += h * y[j];
                }
                mean_h /= static_cast<double>(d);
                mean_hy /= static_cast<double>(d);
                float* gx = nx.grad.data() + r * d;
                for (int64_t j = 0; j < d; ++j) {
                    const float h = g[j] * ng.value[static_cast<size_t>(j)];
                    gx[j] += inv * (h - static_cast<float>(mean_h) - y[j] * static_cast<float>(mean_hy));
                }
            }
        }
    });
}

Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids, int64_t batch,
                        int64_t seq) {
    if (table.rank() != 2) throw DimensionError("embedding_lookup: table must be rank-2");
    if (static_cast<int64_t>(ids.size()) != batch * seq) {
        throw DimensionError("embedding_lookup: ids length does not match batch*seq");
    }
    const int64_t v = table.dim(0), d = table.dim(1);
    for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= v) {
            throw InputError("token id " + std::to_string(ids[i]) + " out of range [0," +
                             std::to_string(v) + ") at position " + std::to_string(i));
        }
    }
    std::vector<float> out(static_cast<size_t>(batch * seq * d));
    const float* pt = table.data().data();
    for (int64_t i = 0; i < batch * seq; ++i) {
        std::memcpy(out.data() + i * d, pt + static_cast<int64_t>(ids[static_cast<size_t>(i)]) * d,
                    static_cast<size_t>(d) * sizeof(float));
    }
    auto node = new_node({batch, seq, d}, std::move(out), "embedding_lookup");
    auto ids_copy = std::make_shared<std::vector<int>>(ids);
    return finish(node, {table}, [ids_copy, d](Node& self) {
        Node& nt = *self.inputs[0];
        if (!wants_grad(nt)) return;
        nt.ensure_grad();
        const auto& idv = *ids_copy;
        for (size_t i = 0; i < idv.size(); ++i) {
            float* dst = nt.grad.data() + static_cast<int64_t>(idv[i]) * d;
            const float* src = self.grad.data() + static_cast<int64_t>(i) * d;
            for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
        }
    });
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    if (logits.rank() != 2) throw DimensionError("cross_entropy: logits must be rank-2");
    const int64_t b = logits.dim(0), c = logits.dim(1);
    if (static_cast<int64_t>(labels.size()) != b) {
        throw DimensionError("cross_entropy: label count does not match batch");
    }
    for (int lbl : labels) {
        if (lbl < 0 || lbl >= c) throw InputError("label " + std::to_string(lbl) + " out of range");
    }
    auto probs = std::make_shared<std::vector<float>>(static_cast<size_t>(b * c));
    softmax_rows(logits.data().data(), probs->data(), b, c, false);
    double loss = 0.0;
    for (int64_t r = 0; r < b; ++r) {
        loss -= std::log(std::max((*probs)[static_cast<size_t>(r * c + labels[static_cast<size_t>(r)])], 1e-30f));
    }
    loss /= static_cast<double>(b);
    auto node = new_node({1}, {static_cast<float>(loss)}, "cross_entropy");
    auto labels_copy = std::make_shared<std::vector<int>>(labels);
    return finish(node, {logits}, [probs, labels_copy, b, c](Node& self) {
        Node& nl = *self.inputs[0];
        if (!wants_grad(nl)) return;
        nl.ensure_grad();
        const float g = self.grad[0] / static_cast<float>(b);
        for (int64_t r = 0; r < b; ++r) {
            float* gx = nl.grad.data() + r * c;
            const float* p = probs->data() + r * c;
            for (int64_t j = 0; j < c; ++j) gx[j] += g * p[j];
            gx[(*labels_copy)[static_cast<size_t>(r)]] -= g;
        }
    });
}

Tensor sum(const Tensor& x) {
    const int64_t n = x.numel();
    double acc = 0.0;
    const float* px = x.data().data();
    for (int64_t i = 0; i < n; ++i) acc += px[i];
    auto node = new_node({1}, {static_cast<float>(acc)}, "sum");
    return finish(node, {x}, [n](Node& self) {
        Node& nx = *self.inputs[0];
        if (!wants_grad(nx)) return;
        nx.ensure_grad();
        const float g = self.grad[0];
        for (int64_t i = 0; i < n; ++i) nx.grad[static_cast<size_t>(i)] += g;
    });
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    std::vector<float> out(x.data().begin(), x.data().end());
    auto node = new_node(std::move(shape), std::move(out), "reshape");
    return finish(node, {x}, [](Node& self) {
        Node& nx = *self.inputs[0];
        if (!wants_grad(nx)) return;
        accumulate(nx, self.grad.data(), self.numel());
    });
}

namespace {
void permute_values(const float* src, float* dst, const Shape& in_shape,
                    const std::vector<int>& perm) {
    const int r = static_cast<int>(in_shape.size());
    Shape out_shape(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) out_shape[static_cast<size_t>(i)] = in_shape[static_cast<size_t>(perm[static_cast<size_t>(i)])];
    std::vector<int64_t> in_strides(static_cast<size_t>(r), 1), out_strides(static_cast<size_t>(r), 1);
    for (int i = r - 2; i >= 0; --i) {
        in_strides[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(i + 1)] * in_shape[static_cast<size_t>(i + 1)];
        out_strides[static_cast<size_t>(i)] = out_strides[static_cast<size_t>(i + 1)] * out_shape[static_cast<size_t>(i + 1)];
    }
    const int64_t n = shape_numel(in_shape);
    for (int64_t flat = 0; flat < n; ++flat) {
        int64_t rem = flat, src_idx = 0;
        // output coordinate i corresponds to input axis perm[i]
        for (int i = 0; i < r; ++i) {
            const int64_t coord = rem / out_strides[static_cast<size_t>(i)];
            rem %= out_strides[static_cast<size_t>(i)];
            src_idx += coord * in_strides[static_cast<size_t>(perm[static_cast<size_t>(i)])];
        }
        dst[flat] = src[src_idx];
    }
}
}  // namespace

Tensor permute(const Tensor& x, const std::vector<int>& perm) {
    const int r = x.rank();
    if (static_cast<int>(perm.size()) != r) throw DimensionError("permute: rank mismatch");
    std::vector<bool> seen(static_cast<size_t>(r), false);
    for (int p : perm) {
        if (p < 0 || p >= r || seen[static_cast<size_t>(p)]) throw DimensionError("permute: invalid permutation");
        seen[static_cast<size_t>(p)] = true;
    }
    Shape out_shape(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) out_shape[static_cast<size_t>(i)] = x.dim(perm[static_cast<size_t>(i)]);
    std::vector<float> out(static_cast<size_t>(x.numel()));
    permute_values(x.data().data(), out.data(), x.shape(), perm);
    auto node = new_node(out_shape, std::move(out), "permute");
    Shape in_shape = x.shape();
    return finish(node, {x}, [perm, in_shape](Node& self) {
        Node& nx = *self.inputs[0];
        if (!wants_grad(nx)) return;
        nx.ensure_grad();
        // inverse permutation maps output grads back to input layout
        std::vector<int> inv(perm.size());
        for (size_t i = 0; i < perm.size(); ++i) inv[static_cast<size_t>(perm[i])] = static_cast<int>(i);
        std::vector<float> tmp(self.grad.size());
        permute_values(self.grad.data(), tmp.data(), self.shape, inv);
        for (size_t i = 0; i < tmp.size(); ++i) nx.grad[i] += tmp[i];
    });
}

Tensor transpose2d(const Tensor& x) {
    if (x.rank() != 2) throw DimensionError("transpose2d: expected rank-2");
    return permute(x, {1, 0});
}

Tensor transpose_last2(const Tensor& x) {
    const int r = x.rank();
    if (r < 2) throw DimensionError("transpose_last2: rank must be >= 2");
    std::vector<int> perm(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) perm[static_cast<size_t>(i)] = i;
    std::swap(perm[static_cast<size_t>(r - 2)], perm[static_cast<size_t>(r - 1)]);
    return permute(x, perm);
}

Tensor select_seq(const Tensor& x, int64_t pos) {
    if (x.rank() != 3) throw DimensionError("select_seq: expected rank-3 [B,S,D]");
    const int64_t B = x.dim(0), S = x.dim(1), D = x.dim(2);
    if (pos < 0 || pos >= S) throw DimensionError("select_seq: position out of range");
    std::vector<float> out(static_cast<size_t>(B * D));
    const float* px = x.data().data();
    for (int64_t b = 0; b < B; ++b) {
        std::memcpy(out.data() + b * D, px + (b * S + pos) * D, static_cast<size_t>(D) * sizeof(float));
    }
    auto node = new_node({B, D}, std::move(out), "select_seq");
    return finish(node, {x}, [B, S, D, pos](Node& self) {
        Node& nx = *self.inputs[0];
        if (!wants_grad(nx)) return;
        nx.ensure_grad();
        for (int64_t b = 0; b < B; ++b) {
            float* dst = nx.grad.data() + (b * S + pos) * D;
            const float* src = self.grad.data() + b * D;
            for (int64_t j = 0; j < D; ++j) dst[j] += src[j];
        }
    });
}

Tensor add_key_mask(const Tensor& scores, const std::vector<float>& mask, int64_t batch,
                    int64_t heads) {
    if (scores.rank() != 3 || scores.dim(0) != batch * heads) {
        throw DimensionError("add_key_mask: scores must be [batch*heads, q, k]");
    }
    const int64_t q = scores.dim(1), k = scores.dim(2);
    if (static_cast<int64_t>(mask.size()) != batch * k) {
        throw DimensionError("add_key_mask: mask must have batch*keys entries");
    }
    std::vector<float> out(scores.data().begin(), scores.data().end());
    for (int64_t b = 0; b < batch; ++b) {
        for (int64_t h = 0; h < heads; ++h) {
            float* base = out.data() + (b * heads + h) * q * k;
            for (int64_t i = 0; i < q; ++i)
                for (int64_t j = 0; j < k; ++j)
                    if (mask[static_cast<size_t>(b * k + j)] == 0.0f) base[i * k + j] += -1e9f;
        }
    }
    auto node = new_node(scores.shape(), std::move(out), "add_key_mask");
    return finish(node, {scores}, [](Node& self) {
        Node& nx = *self.inputs[0];
        if (!wants_grad(nx)) return;
        accumulate(nx, self.grad.data(), self.numel());
    });
}

Tensor custom_grad(const std::vector<Tensor>& inputs, const CustomForward& fwd,
                   CustomBackward bwd, const char* op_name, int site) {
    Tensor out_value;
    {
        NoGradGuard ng;
        std::vector<Tensor> detached;
        detached.reserve(inputs.size());
        for (const auto& t : inputs) detached.push_back(t.detach());
        out_value = fwd(detached);
    }
    auto node = new_node(out_value.shape(),
                         std::vector<float>(out_value.data().begin(), out_value.data().end()), op_name);
    node->site = site;
    const size_t arity = inputs.size();
    return finish(node, inputs, [bwd = std::move(bwd), arity](Node& self) {
        std::vector<Tensor> in_vals;
        in_vals.reserve(arity);
        for (auto& in : self.inputs) {
            in_vals.push_back(Tensor::wrap(in));
        }
        Tensor og = Tensor::from(self.shape, self.grad);
        std::vector<Tensor> grads;
        {
            NoGradGuard ng;
            grads = bwd(in_vals, og);
        }
        if (grads.size() != arity) {
            throw ContractError("custom_grad: backward returned " + std::to_string(grads.size()) +
                                " gradients for " + std::to_string(arity) + " inputs");
        }
        for (size_t i = 0; i < arity; ++i) {
            if (!grads[i].defined()) continue;
            Node& in = *self.inputs[i];
            if (!wants_grad(in)) continue;
            if (grads[i].shape() != in.shape) {
                throw ContractError("custom_grad: gradient shape " + shape_str(grads[i].shape()) +
                                    " does not match input shape " + shape_str(in.shape));
            }
            accumulate(in, grads[i].data().data(), grads[i].numel());
        }
    });
}

}  // namespace binformer
