#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "prunelab/common.hpp"

namespace prunelab {

class Tensor;

namespace detail {

struct TensorNode {
    std::vector<int64_t> shape;
    std::vector<float> data;
    bool requires_grad = false;
    std::vector<float> grad; // empty until needed; same numel as data when set
    // reverse-mode graph: inputs plus a rule that pushes this node's grad
    // into the inputs' grad buffers
    std::vector<Tensor> parents;
    std::function<void(TensorNode&)> backward_fn;

    int64_t numel() const { return int64_t(data.size()); }
};

} // namespace detail

// Value-semantic handle to a dense float32 tensor, row-major. Copying the
// handle shares the underlying node (clone() for a deep copy).
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(std::vector<int64_t> shape, bool requires_grad = false);
    static Tensor full(std::vector<int64_t> shape, float value);
    static Tensor from(std::vector<int64_t> shape, std::vector<float> data,
                       bool requires_grad = false);
    static Tensor scalar(float value);
    static Tensor randn(std::vector<int64_t> shape, Rng& rng, float stddev = 1.0f,
                        bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const std::vector<int64_t>& shape() const { return node_->shape; }
    int ndim() const { return int(node_->shape.size()); }
    int64_t dim(int i) const;
    int64_t numel() const { return node_->numel(); }

    float* data() { return node_->data.data(); }
    const float* data() const { return node_->data.data(); }
    std::vector<float>& vec() { return node_->data; }
    const std::vector<float>& vec() const { return node_->data; }
    float item() const;

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool v);
    // Gradient buffer, zero-allocated on first access. Calling this on a
    // tensor backward never reached therefore reads as all-zero.
    std::vector<float>& grad();
    const std::vector<float>* grad_if() const;
    void zero_grad();

    Tensor detach() const; // same values, no graph, no grad requirement
    Tensor clone() const;  // deep copy of values (detached)

    bool all_finite() const;

    std::shared_ptr<detail::TensorNode> node_;

  private:
    explicit Tensor(std::shared_ptr<detail::TensorNode> n) : node_(std::move(n)) {}
    friend Tensor make_node(std::vector<int64_t> shape, std::vector<float> data,
                            std::vector<Tensor> parents,
                            std::function<void(detail::TensorNode&)> backward_fn);
};

// Disables graph construction for the current scope (e.g. teacher forwards,
// finite-difference probes).
class NoGradGuard {
  public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;

  private:
    bool prev_;
};
bool grad_enabled();

// ---- primitive ops (forward + backward unless noted) ----

Tensor add(const Tensor& a, const Tensor& b);      // same shape
Tensor mul(const Tensor& a, const Tensor& b);      // elementwise, same shape
Tensor scale(const Tensor& a, float c);
Tensor matmul(const Tensor& a, const Tensor& b);   // a[...,K] @ b[K,N] -> [...,N]
Tensor matmul_nt(const Tensor& a, const Tensor& b); // a[...,K] @ b[N,K]^T -> [...,N]
Tensor silu(const Tensor& x);
Tensor rms_norm(const Tensor& x, const Tensor& weight, float eps); // over last axis
Tensor embedding(const Tensor& table, const std::vector<int32_t>& ids,
                 int64_t batch, int64_t seq); // -> [batch, seq, H]
Tensor softmax(const Tensor& x);               // last axis
Tensor softmax_t(const Tensor& logits, float temperature);
Tensor log(const Tensor& x);
Tensor sum(const Tensor& x);                   // -> scalar
Tensor mean(const Tensor& x);                  // -> scalar
// Rotary position application to per-head pairs of x[B,S,nh*hd]; positions
// start at pos_offset (for KV-cache continuation).
Tensor rope(const Tensor& x, int64_t n_heads, float base, int64_t pos_offset);
Tensor causal_mask(const Tensor& scores);      // [B,H,S,S]; j>i slots -> -1e30
// Per-head scaled dot products with grouped-query mapping:
//   q[B,S,nh*hd] x k[B,S,nkv*hd] -> [B,nh,S,S]
Tensor attn_scores(const Tensor& q, const Tensor& k, int64_t n_heads,
                   int64_t n_kv_heads, float scale);
//   p[B,nh,S,S] x v[B,S,nkv*hd] -> [B,S,nh*hd]
Tensor attn_context(const Tensor& p, const Tensor& v, int64_t n_heads,
                    int64_t n_kv_heads);
// Mean next-token style cross entropy over rows; targets.size() == N.
Tensor cross_entropy(const Tensor& logits, const std::vector<int32_t>& targets);
// Eq-style temperature-softened forward KL, mean over rows. The teacher side
// is a constant: gradients flow into student_logits only.
Tensor kl_forward(const Tensor& teacher_logits, const Tensor& student_logits,
                  float temperature);

// Populates grad buffers of every tensor reachable from loss.
void backward(const Tensor& loss);

// Max over coordinates of |analytic - central| / max(|analytic|, |central|, 1e-8).
double finite_diff_check(const std::function<Tensor(const Tensor&)>& fn, Tensor point,
                         double eps);

} // namespace prunelab
