#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <set>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "punet/tensor.hpp"

namespace punet::ad {

// Reverse-mode tape. Nodes own their value; the graph is rebuilt every
// forward pass. Leaves (parameters) persist across graphs and accumulate
// gradients until explicitly zeroed, so optimizers read leaf->grad directly.
struct Node {
    Tensor value;
    Tensor grad;  // allocated on first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;
    const char* op = "leaf";
};

using Var = std::shared_ptr<Node>;

inline bool& grad_enabled_flag() {
    thread_local bool enabled = true;
    return enabled;
}

// Disables graph construction in scope (teacher forward, evaluation).
struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_enabled_flag()) { grad_enabled_flag() = false; }
    ~NoGradGuard() { grad_enabled_flag() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline void ensure_grad(Node& n) {
    if (n.grad.data.empty()) n.grad = Tensor::zeros(n.value.shape);
}

inline Var leaf(Tensor v, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    n->requires_grad = requires_grad;
    return n;
}

inline Var constant(Tensor v) { return leaf(std::move(v), false); }
inline Var param(Tensor v) { return leaf(std::move(v), true); }

// Optional op-name audit trail. While the flag is on, every node construction
// records its op name; coverage tooling compares this set against the ops its
// test cases exercise. Off by default so forward passes pay only a bool check.
inline bool& op_tracking_flag() {
    thread_local bool enabled = false;
    return enabled;
}

inline std::set<std::string>& ops_constructed() {
    static std::set<std::string> names;
    return names;
}

struct OpTrackingGuard {
    bool prev;
    OpTrackingGuard() : prev(op_tracking_flag()) { op_tracking_flag() = true; }
    ~OpTrackingGuard() { op_tracking_flag() = prev; }
    OpTrackingGuard(const OpTrackingGuard&) = delete;
    OpTrackingGuard& operator=(const OpTrackingGuard&) = delete;
};

inline Var make_op(const char* name, Tensor value, std::vector<Var> parents,
                   std::function<void(Node&)> bw) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->op = name;
    if (op_tracking_flag() && grad_enabled_flag()) ops_constructed().insert(name);
    if (grad_enabled_flag()) {
        bool need = false;
        for (const auto& p : parents)
            if (p && p->requires_grad) need = true;
        if (need) {
            n->requires_grad = true;
            n->parents = std::move(parents);
            n->backward_fn = std::move(bw);
        }
    }
    return n;
}

// Gradient of `root` (scalar) w.r.t. every reachable requires_grad node.
// Accumulates into existing grads; call zero_grad on leaves between steps.
inline void backward(const Var& root) {
    if (root->value.numel() != 1)
        throw validation_error("backward: root must be scalar, got " + shape_str(root->value.shape));
    if (!root->requires_grad) throw validation_error("backward: root does not require grad");

    std::vector<Node*> postorder;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        Node* n = stack.back().first;
        std::size_t& i = stack.back().second;
        if (i < n->parents.size()) {
            Node* p = n->parents[i++].get();
            if (p && p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            postorder.push_back(n);
            stack.pop_back();
        }
    }

    // Interior grads are scratch space for this pass; only leaves accumulate
    // across calls.
    for (Node* n : postorder)
        if (n->backward_fn) n->grad = Tensor();

    ensure_grad(*root);
    root->grad.data[0] += 1.0;
    for (auto it = postorder.rbegin(); it != postorder.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && !n->grad.data.empty()) n->backward_fn(*n);
    }
}

inline void zero_grad(const std::vector<Var>& leaves) {
    for (const auto& v : leaves)
        if (v) v->grad = Tensor();
}

// -------- shape views ----------------------------------------------------

// Rows/cols of the implicit 2D view (all leading dims folded into rows).
inline std::int64_t view_rows(const Tensor& t) {
    if (t.shape.empty()) throw validation_error("2d view of rank-0 tensor");
    return t.numel() / t.shape.back();
}
inline int view_cols(const Tensor& t) { return t.shape.back(); }

// -------- elementwise ------------------------------------------------------

inline Var add(const Var& a, const Var& b) {
    if (!same_shape(a->value, b->value))
        throw validation_error("add: shape mismatch " + shape_str(a->value.shape) + " vs " + shape_str(b->value.shape));
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += b->value.data[i];
    return make_op("add", std::move(out), {a, b}, [](Node& n) {
        for (int s = 0; s < 2; ++s) {
            Node& p = *n.parents[s];
            if (!p.requires_grad) continue;
            ensure_grad(p);
            for (std::size_t i = 0; i < n.grad.data.size(); ++i) p.grad.data[i] += n.grad.data[i];
        }
    });
}

inline Var sub(const Var& a, const Var& b) {
    if (!same_shape(a->value, b->value))
        throw validation_error("sub: shape mismatch " + shape_str(a->value.shape) + " vs " + shape_str(b->value.shape));
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= b->value.data[i];
    return make_op("sub", std::move(out), {a, b}, [](Node& n) {
        Node& pa = *n.parents[0];
        Node& pb = *n.parents[1];
        if (pa.requires_grad) {
            ensure_grad(pa);
            for (std::size_t i = 0; i < n.grad.data.size(); ++i) pa.grad.data[i] += n.grad.data[i];
        }
        if (pb.requires_grad) {
            ensure_grad(pb);
            for (std::size_t i = 0; i < n.grad.data.size(); ++i) pb.grad.data[i] -= n.grad.data[i];
        }
    });
}

inline Var mul(const Var& a, const Var& b) {
    if (!same_shape(a->value, b->value))
        throw validation_error("mul: shape mismatch " + shape_str(a->value.shape) + " vs " + shape_str(b->value.shape));
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b->value.data[i];
    return make_op("mul", std::move(out), {a, b}, [](Node& n) {
        Node& pa = *n.parents[0];
        Node& pb = *n.parents[1];
        if (pa.requires_grad) {
            ensure_grad(pa);
            for (std::size_t i = 0; i < n.grad.data.size(); ++i)
                pa.grad.data[i] += n.grad.data[i] * pb.value.data[i];
        }
        if (pb.requires_grad) {
            ensure_grad(pb);
            for (std::size_t i = 0; i < n.grad.data.size(); ++i)
                pb.grad.data[i] += n.grad.data[i] * pa.value.data[i];
        }
    });
}

inline Var scale(const Var& a, double s) {
    Tensor out = a->value;
    for (auto& v : out.data) v *= s;
    return make_op("scale", std::move(out), {a}, [s](Node& n) {
        Node& p = *n.parents[0];
        if (!p.requires_grad) return;
        ensure_grad(p);
        for (std::size_t i = 0; i < n.grad.data.size(); ++i) p.grad.data[i] += s * n.grad.data[i];
    });
}

inline Var add_scalar(const Var& a, double c) {
    Tensor out = a->value;
    for (auto& v : out.data) v += c;
    return make_op("add_scalar", std::move(out), {a}, [](Node& n) {
        Node& p = *n.parents[0];
        if (!p.requires_grad) return;
        ensure_grad(p);
        for (std::size_t i = 0; i < n.grad.data.size(); ++i) p.grad.data[i] += n.grad.data[i];
    });
}

inline Var pow_const(const Var& a, double e) {
    Tensor out = a->value;
    for (auto& v : out.data) v = std::pow(v, e);
    return make_op("pow_const", std::move(out), {a}, [e](Node& n) {
        Node& p = *n.parents[0];
        if (!p.requires_grad || e == 0.0) return;
        ensure_grad(p);
        for (std::size_t i = 0; i < n.grad.data.size(); ++i)
            p.grad.data[i] += n.grad.data[i] * e * std::pow(p.value.data[i], e - 1.0);
    });
}

inline Var vlog(const Var& a) {
    Tensor out = a->value;
    for (auto& v : out.data) v = std::log(v);
    return make_op("log", std::move(out), {a}, [](Node& n) {
        Node& p = *n.parents[0];
        if (!p.requires_grad) return;
        ensure_grad(p);
        for (std::size_t i = 0; i < n.grad.data.size(); ++i)
            p.grad.data[i] += n.grad.data[i] / p.value.data[i];
    });
}

inline Var vexp(const Var& a) {
    Tensor out = a->value;
    for (auto& v : out.data) v = std::exp(v);
    return make_op("exp", std::move(out), {a}, [](Node& n) {
        Node& p = *n.parents[0];
        if (!p.requires_grad) return;
        ensure_grad(p);
        for (std::size_t i = 0; i < n.grad.data.size(); ++i)
            p.grad.data[i] += n.grad.data[i] * n.value.data[i];
    });
}

// max(a, c); ties route gradient through a.
inline Var maximum_scalar(const Var& a, double c) {
    Tensor out = a->value;
    for (auto& v : out.data) v = std::max(v, c);
    return make_op("maximum_scalar", std::move(out), {a}, [c](Node& n) {
        Node& p = *n.parents[0];
        if (!p.requires_grad) return;
        ensure_grad(p);
        for (std::size_t i = 0; i < n.grad.data.size(); ++i)
            if (p.value.data[i] >= c) p.grad.data[i] += n.grad.data[i];
    });
}

inline Var leaky_relu(const Var& a, double slope) {
    Tensor out = a->value;
    for (auto& v : out.data) v = v > 0.0 ? v : slope * v;
    return make_op("leaky_relu", std::move(out), {a}, [slope](Node& n) {
        Node& p = *n.parents[0];
        if (!p.requires_grad) return;
        ensure_grad(p);
        for (std::size_t i = 0; i < n.grad.data.size(); ++i)
            p.grad.data[i] += n.grad.data[i] * (p.value.data[i] > 0.0 ? 1.0 : slope);
    });
}

// Cuts the graph: value is shared forward, gradient stops here.
inline Var detach(const Var& a) { return constant(a->value); }

// -------- reductions -------------------------------------------------------

inline Var sum_all(const Var& a) {
    double s = 0.0;
    for (double v : a->value.data) s += v;
    return make_op("sum_all", Tensor::from({1}, {s}), {a}, [](Node& n) {
        Node& p = *n.parents[0];
        if (!p.requires_grad) return;
        ensure_grad(p);
        double g = n.grad.data[0];
        for (auto& v : p.grad.data) v += g;
    });
}

inline Var mean_all(const Var& a) {
    double s = 0.0;
    for (double v : a->value.data) s += v;
    double inv = 1.0 / static_cast<double>(a->value.numel());
    return make_op("mean_all", Tensor::from({1}, {s * inv}), {a}, [inv](Node& n) {
        Node& p = *n.parents[0];
        if (!p.requires_grad) return;
        ensure_grad(p);
        double g = n.grad.data[0] * inv;
        for (auto& v : p.grad.data) v += g;
    });
}

// Sum over the last dim: (..., C) -> (...).
inline Var sum_last(const Var& a) {
    std::int64_t rows = view_rows(a->value);
    int cols = view_cols(a->value);
    Shape out_shape(a->value.shape.begin(), a->value.shape.end() - 1);
    if (out_shape.empty()) out_shape = {1};
    Tensor out(out_shape);
    for (std::int64_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (int c = 0; c < cols; ++c) s += a->value.data[static_cast<std::size_t>(r) * cols + c];
        out.data[static_cast<std::size_t>(r)] = s;
    }
    return make_op("sum_last", std::move(out), {a}, [rows, cols](Node& n) {
        Node& p = *n.parents[0];
        if (!p.requires_grad) return;
        ensure_grad(p);
        for (std::int64_t r = 0; r < rows; ++r) {
            double g = n.grad.data[static_cast<std::size_t>(r)];
            for (int c = 0; c < cols; ++c) p.grad.data[static_cast<std::size_t>(r) * cols + c] += g;
        }
    });
}

inline Var mean_last(const Var& a) {
    return scale(sum_last(a), 1.0 / static_cast<double>(view_cols(a->value)));
}

// -------- softmax ----------------------------------------------------------

// Softmax over the last dim with max subtraction.
inline Var softmax_lastdim(const Var& a) {
    std::int64_t rows = view_rows(a->value);
    int cols = view_cols(a->value);
    Tensor out = a->value;
    for (std::int64_t r = 0; r < rows; ++r) {
        double* row = out.data.data() + r * cols;
        double m = row[0];
        for (int c = 1; c < cols; ++c) m = std::max(m, row[c]);
        double z = 0.0;
        for (int c = 0; c < cols; ++c) {
            row[c] = std::exp(row[c] - m);
            z += row[c];
        }
        for (int c = 0; c < cols; ++c) row[c] /= z;
    }
    return make_op("softmax", std::move(out), {a}, [rows, cols](Node& n) {
        Node& p = *n.parents[0];
        if (!p.requires_grad) return;
        ensure_grad(p);
        for (std::int64_t r = 0; r < rows; ++r) {
            const double* y = n.value.data.data() + r * cols;
            const double* g = n.grad.data.data() + r * cols;
            double dot = 0.0;
            for (int c = 0; c < cols; ++c) dot += y[c] * g[c];
            double* pg = p.grad.data.data() + r * cols;
            for (int c = 0; c < cols; ++c) pg[c] += y[c] * (g[c] - dot);
        }
    });
}

// -------- shape / indexing ---------------------------------------------------

inline Var reshape(const Var& a, Shape s) {
    if (shape_numel(s) != a->value.numel())
        throw validation_error("reshape: numel mismatch " + shape_str(a->value.shape) + " -> " + shape_str(s));
    Tensor out = a->value;
    out.shape = std::move(s);
    return make_op("reshape", std::move(out), {a}, [](Node& n) {
        Node& p = *n.parents[0];
        if (!p.requires_grad) return;
        ensure_grad(p);
        for (std::size_t i = 0; i < n.grad.data.size(); ++i) p.grad.data[i] += n.grad.data[i];
    });
}

// Row gather on the 2D view. out row i = a row idx[i]. Duplicate indices sum
// in the backward scatter, which makes this the workhorse for broadcasts too.
inline Var gather_rows(const Var& a, std::vector<std::int64_t> idx, Shape out_shape = {}) {
    std::int64_t rows = view_rows(a->value);
    int cols = view_cols(a->value);
    for (std::int64_t i : idx)
        if (i < 0 || i >= rows) throw validation_error("gather_rows: index out of range");
    Tensor out({static_cast<int>(idx.size()), cols});
    for (std::size_t i = 0; i < idx.size(); ++i)
        std::copy_n(a->value.data.data() + idx[i] * cols, cols, out.data.data() + static_cast<std::int64_t>(i) * cols);
    if (!out_shape.empty()) {
        if (shape_numel(out_shape) != out.numel())
            throw validation_error("gather_rows: out_shape numel mismatch");
        out.shape = std::move(out_shape);
    }
    return make_op("gather_rows", std::move(out), {a}, [idx = std::move(idx), cols](Node& n) {
        Node& p = *n.parents[0];
        if (!p.requires_grad) return;
        ensure_grad(p);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            const double* g = n.grad.data.data() + static_cast<std::int64_t>(i) * cols;
            double* pg = p.grad.data.data() + idx[i] * cols;
            for (int c = 0; c < cols; ++c) pg[c] += g[c];
        }
    });
}

// Per-row column gather: a (R, C), idx per row of width k -> (R, k).
inline Var row_gather_cols(const Var& a, std::vector<std::vector<int>> idx) {
    std::int64_t rows = view_rows(a->value);
    int cols = view_cols(a->value);
    if (static_cast<std::int64_t>(idx.size()) != rows)
        throw validation_error("row_gather_cols: need one index row per tensor row");
    int k = idx.empty() ? 0 : static_cast<int>(idx[0].size());
    for (const auto& r : idx) {
        if (static_cast<int>(r.size()) != k) throw validation_error("row_gather_cols: ragged index");
        for (int c : r)
            if (c < 0 || c >= cols) throw validation_error("row_gather_cols: index out of range");
    }
    Tensor out({static_cast<int>(rows), k});
    for (std::int64_t r = 0; r < rows; ++r)
        for (int j = 0; j < k; ++j)
            out.data[static_cast<std::size_t>(r) * k + j] = a->value.data[static_cast<std::size_t>(r) * cols + idx[r][j]];
    return make_op("row_gather_cols", std::move(out), {a}, [idx = std::move(idx), cols, k](Node& n) {
        Node& p = *n.parents[0];
        if (!p.requires_grad) return;
        ensure_grad(p);
        std::int64_t rows = static_cast<std::int64_t>(idx.size());
        for (std::int64_t r = 0; r < rows; ++r)
            for (int j = 0; j < k; ++j)
                p.grad.data[static_cast<std::size_t>(r) * cols + idx[r][j]] += n.grad.data[static_cast<std::size_t>(r) * k + j];
    });
}

inline Var slice_rows(const Var& a, std::int64_t begin, std::int64_t count, Shape out_shape = {}) {
    std::int64_t rows = view_rows(a->value);
    int cols = view_cols(a->value);
    if (begin < 0 || count < 0 || begin + count > rows) throw validation_error("slice_rows: range out of bounds");
    Tensor out({static_cast<int>(count), cols});
    std::copy_n(a->value.data.data() + begin * cols, count * cols, out.data.data());
    if (!out_shape.empty()) {
        if (shape_numel(out_shape) != out.numel()) throw validation_error("slice_rows: out_shape numel mismatch");
        out.shape = std::move(out_shape);
    }
    return make_op("slice_rows", std::move(out), {a}, [begin, count, cols](Node& n) {
        Node& p = *n.parents[0];
        if (!p.requires_grad) return;
        ensure_grad(p);
        double* pg = p.grad.data.data() + begin * cols;
        for (std::int64_t i = 0; i < count * cols; ++i) pg[i] += n.grad.data[static_cast<std::size_t>(i)];
    });
}

inline Var concat_rows(const std::vector<Var>& parts, Shape out_shape = {}) {
    if (parts.empty()) throw validation_error("concat_rows: empty input");
    int cols = view_cols(parts[0]->value);
    std::int64_t rows = 0;
    for (const auto& p : parts) {
        if (view_cols(p->value) != cols) throw validation_error("concat_rows: column mismatch");
        rows += view_rows(p->value);
    }
    Tensor out({static_cast<int>(rows), cols});
    std::int64_t off = 0;
    for (const auto& p : parts) {
        std::copy_n(p->value.data.data(), p->value.numel(), out.data.data() + off);
        off += p->value.numel();
    }
    if (!out_shape.empty()) {
        if (shape_numel(out_shape) != out.numel()) throw validation_error("concat_rows: out_shape numel mismatch");
        out.shape = std::move(out_shape);
    }
    return make_op("concat_rows", std::move(out), std::vector<Var>(parts.begin(), parts.end()), [](Node& n) {
        std::int64_t off = 0;
        for (auto& pp : n.parents) {
            Node& p = *pp;
            std::int64_t len = p.value.numel();
            if (p.requires_grad) {
                ensure_grad(p);
                for (std::int64_t i = 0; i < len; ++i) p.grad.data[static_cast<std::size_t>(i)] += n.grad.data[static_cast<std::size_t>(off + i)];
            }
            off += len;
        }
    });
}

// Concatenate along the last dim; leading dims must agree elementwise.
inline Var concat_last(const std::vector<Var>& parts, Shape out_shape = {}) {
    if (parts.empty()) throw validation_error("concat_last: empty input");
    std::int64_t rows = view_rows(parts[0]->value);
    int total = 0;
    std::vector<int> widths;
    for (const auto& p : parts) {
        if (view_rows(p->value) != rows) throw validation_error("concat_last: row mismatch");
        widths.push_back(view_cols(p->value));
        total += widths.back();
    }
    Tensor out({static_cast<int>(rows), total});
    int coff = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const Tensor& v = parts[k]->value;
        int w = widths[k];
        for (std::int64_t r = 0; r < rows; ++r)
            std::copy_n(v.data.data() + r * w, w, out.data.data() + r * total + coff);
        coff += w;
    }
    if (out_shape.empty()) {
        out_shape = parts[0]->value.shape;
        out_shape.back() = total;
    }
    if (shape_numel(out_shape) != out.numel()) throw validation_error("concat_last: out_shape numel mismatch");
    out.shape = std::move(out_shape);
    return make_op("concat_last", std::move(out),
                   std::vector<Var>(parts.begin(), parts.end()),
                   [widths = std::move(widths), rows, total](Node& n) {
        int coff = 0;
        for (std::size_t k = 0; k < n.parents.size(); ++k) {
            Node& p = *n.parents[k];
            int w = widths[k];
            if (p.requires_grad) {
                ensure_grad(p);
                for (std::int64_t r = 0; r < rows; ++r) {
                    const double* g = n.grad.data.data() + r * total + coff;
                    double* pg = p.grad.data.data() + r * w;
                    for (int c = 0; c < w; ++c) pg[c] += g[c];
                }
            }
            coff += w;
        }
    });
}

inline Var slice_last(const Var& a, int begin, int count, Shape out_shape = {}) {
    std::int64_t rows = view_rows(a->value);
    int cols = view_cols(a->value);
    if (begin < 0 || count < 0 || begin + count > cols) throw validation_error("slice_last: range out of bounds");
    Tensor out({static_cast<int>(rows), count});
    for (std::int64_t r = 0; r < rows; ++r)
        std::copy_n(a->value.data.data() + r * cols + begin, count, out.data.data() + r * count);
    if (out_shape.empty()) {
        out_shape = a->value.shape;
        out_shape.back() = count;
    }
    if (shape_numel(out_shape) != out.numel()) throw validation_error("slice_last: out_shape numel mismatch");
    out.shape = std::move(out_shape);
    return make_op("slice_last", std::move(out), {a}, [begin, count, cols, rows](Node& n) {
        Node& p = *n.parents[0];
        if (!p.requires_grad) return;
        ensure_grad(p);
        for (std::int64_t r = 0; r < rows; ++r) {
            const double* g = n.grad.data.data() + r * count;
            double* pg = p.grad.data.data() + r * cols + begin;
            for (int c = 0; c < count; ++c) pg[c] += g[c];
        }
    });
}

inline Var transpose2d(const Var& a) {
    if (a->value.ndim() != 2) throw validation_error("transpose2d: need rank 2, got " + shape_str(a->value.shape));
    int r = a->value.shape[0], c = a->value.shape[1];
    Tensor out({c, r});
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out.data[static_cast<std::size_t>(j) * r + i] = a->value.data[static_cast<std::size_t>(i) * c + j];
    return make_op("transpose2d", std::move(out), {a}, [r, c](Node& n) {
        Node& p = *n.parents[0];
        if (!p.requires_grad) return;
        ensure_grad(p);
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j)
                p.grad.data[static_cast<std::size_t>(i) * c + j] += n.grad.data[static_cast<std::size_t>(j) * r + i];
    });
}

// -------- broadcast helpers --------------------------------------------------

// v (C) added to every row of a (..., C).
inline Var add_rowvec(const Var& a, const Var& v) {
    std::int64_t rows = view_rows(a->value);
    int cols = view_cols(a->value);
    if (v->value.numel() != cols)
        throw validation_error("add_rowvec: vector length " + shape_str(v->value.shape) + " vs cols " + std::to_string(cols));
    Tensor out = a->value;
    for (std::int64_t r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) out.data[static_cast<std::size_t>(r) * cols + c] += v->value.data[static_cast<std::size_t>(c)];
    return make_op("add_rowvec", std::move(out), {a, v}, [rows, cols](Node& n) {
        Node& pa = *n.parents[0];
        Node& pv = *n.parents[1];
        if (pa.requires_grad) {
            ensure_grad(pa);
            for (std::size_t i = 0; i < n.grad.data.size(); ++i) pa.grad.data[i] += n.grad.data[i];
        }
        if (pv.requires_grad) {
            ensure_grad(pv);
            for (std::int64_t r = 0; r < rows; ++r)
                for (int c = 0; c < cols; ++c) pv.grad.data[static_cast<std::size_t>(c)] += n.grad.data[static_cast<std::size_t>(r) * cols + c];
        }
    });
}

// Row i of a (..., C) scaled by s[i]; s has one entry per 2D-view row.
inline Var mul_colscalar(const Var& a, const Var& s) {
    std::int64_t rows = view_rows(a->value);
    int cols = view_cols(a->value);
    if (s->value.numel() != rows) throw validation_error("mul_colscalar: scalar count must equal rows");
    Tensor out = a->value;
    for (std::int64_t r = 0; r < rows; ++r) {
        double sv = s->value.data[static_cast<std::size_t>(r)];
        for (int c = 0; c < cols; ++c) out.data[static_cast<std::size_t>(r) * cols + c] *= sv;
    }
    return make_op("mul_colscalar", std::move(out), {a, s}, [rows, cols](Node& n) {
        Node& pa = *n.parents[0];
        Node& ps = *n.parents[1];
        if (pa.requires_grad) {
            ensure_grad(pa);
            for (std::int64_t r = 0; r < rows; ++r) {
                double sv = ps.value.data[static_cast<std::size_t>(r)];
                for (int c = 0; c < cols; ++c)
                    pa.grad.data[static_cast<std::size_t>(r) * cols + c] += sv * n.grad.data[static_cast<std::size_t>(r) * cols + c];
            }
        }
        if (ps.requires_grad) {
            ensure_grad(ps);
            for (std::int64_t r = 0; r < rows; ++r) {
                double acc = 0.0;
                for (int c = 0; c < cols; ++c)
                    acc += n.grad.data[static_cast<std::size_t>(r) * cols + c] * pa.value.data[static_cast<std::size_t>(r) * cols + c];
                ps.grad.data[static_cast<std::size_t>(r)] += acc;
            }
        }
    });
}

// -------- spatial reductions (B,H,W,C) ---------------------------------------

inline void expect_rank4(const Tensor& t, const char* who) {
    if (t.ndim() != 4) throw validation_error(std::string(who) + ": need (B,H,W,C), got " + shape_str(t.shape));
}

// Mean over H,W per (b, c): (B,H,W,C) -> (B,C).
inline Var reduce_mean_spatial(const Var& a) {
    expect_rank4(a->value, "reduce_mean_spatial");
    int B = a->value.shape[0], H = a->value.shape[1], W = a->value.shape[2], C = a->value.shape[3];
    Tensor out({B, C});
    std::int64_t hw = static_cast<std::int64_t>(H) * W;
    for (int b = 0; b < B; ++b) {
        const double* src = a->value.data.data() + static_cast<std::int64_t>(b) * hw * C;
        double* dst = out.data.data() + static_cast<std::int64_t>(b) * C;
        for (std::int64_t i = 0; i < hw; ++i)
            for (int c = 0; c < C; ++c) dst[c] += src[i * C + c];
        for (int c = 0; c < C; ++c) dst[c] /= static_cast<double>(hw);
    }
    return make_op("reduce_mean_spatial", std::move(out), {a}, [B, hw, C](Node& n) {
        Node& p = *n.parents[0];
        if (!p.requires_grad) return;
        ensure_grad(p);
        double inv = 1.0 / static_cast<double>(hw);
        for (int b = 0; b < B; ++b) {
            const double* g = n.grad.data.data() + static_cast<std::int64_t>(b) * C;
            double* pg = p.grad.data.data() + static_cast<std::int64_t>(b) * hw * C;
            for (std::int64_t i = 0; i < hw; ++i)
                for (int c = 0; c < C; ++c) pg[i * C + c] += g[c] * inv;
        }
    });
}

// (B,C) -> (B,H,W,C), value repeated across H,W.
inline Var broadcast_spatial(const Var& a, int H, int W) {
    if (a->value.ndim() != 2) throw validation_error("broadcast_spatial: need (B,C)");
    int B = a->value.shape[0], C = a->value.shape[1];
    Tensor out({B, H, W, C});
    std::int64_t hw = static_cast<std::int64_t>(H) * W;
    for (int b = 0; b < B; ++b) {
        const double* src = a->value.data.data() + static_cast<std::int64_t>(b) * C;
        double* dst = out.data.data() + static_cast<std::int64_t>(b) * hw * C;
        for (std::int64_t i = 0; i < hw; ++i)
            for (int c = 0; c < C; ++c) dst[i * C + c] = src[c];
    }
    return make_op("broadcast_spatial", std::move(out), {a}, [B, hw, C](Node& n) {
        Node& p = *n.parents[0];
        if (!p.requires_grad) return;
        ensure_grad(p);
        for (int b = 0; b < B; ++b) {
            const double* g = n.grad.data.data() + static_cast<std::int64_t>(b) * hw * C;
            double* pg = p.grad.data.data() + static_cast<std::int64_t>(b) * C;
            for (std::int64_t i = 0; i < hw; ++i)
                for (int c = 0; c < C; ++c) pg[c] += g[i * C + c];
        }
    });
}

// Mean over B,H,W per channel: (B,H,W,C) -> (C).
inline Var reduce_mean_bhw(const Var& a) {
    expect_rank4(a->value, "reduce_mean_bhw");
    int C = a->value.shape[3];
    std::int64_t n_pos = a->value.numel() / C;
    Tensor out({C});
    for (std::int64_t i = 0; i < n_pos; ++i)
        for (int c = 0; c < C; ++c) out.data[static_cast<std::size_t>(c)] += a->value.data[i * C + c];
    for (int c = 0; c < C; ++c) out.data[static_cast<std::size_t>(c)] /= static_cast<double>(n_pos);
    return make_op("reduce_mean_bhw", std::move(out), {a}, [n_pos, C](Node& n) {
        Node& p = *n.parents[0];
        if (!p.requires_grad) return;
        ensure_grad(p);
        double inv = 1.0 / static_cast<double>(n_pos);
        for (std::int64_t i = 0; i < n_pos; ++i)
            for (int c = 0; c < C; ++c) p.grad.data[i * C + c] += n.grad.data[static_cast<std::size_t>(c)] * inv;
    });
}

// (C) -> (B,H,W,C).
inline Var broadcast_channel(const Var& a, int B, int H, int W) {
    int C = static_cast<int>(a->value.numel());
    Tensor out({B, H, W, C});
    std::int64_t n_pos = static_cast<std::int64_t>(B) * H * W;
    for (std::int64_t i = 0; i < n_pos; ++i)
        for (int c = 0; c < C; ++c) out.data[i * C + c] = a->value.data[static_cast<std::size_t>(c)];
    return make_op("broadcast_channel", std::move(out), {a}, [n_pos, C](Node& n) {
        Node& p = *n.parents[0];
        if (!p.requires_grad) return;
        ensure_grad(p);
        for (std::int64_t i = 0; i < n_pos; ++i)
            for (int c = 0; c < C; ++c) p.grad.data[static_cast<std::size_t>(c)] += n.grad.data[i * C + c];
    });
}

}  // namespace punet::ad
