#include "prunelab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

namespace prunelab {

namespace {

thread_local bool g_grad_enabled = true;

int64_t shape_numel(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

} // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Tensor make_node(std::vector<int64_t> shape, std::vector<float> data,
                 std::vector<Tensor> parents,
                 std::function<void(detail::TensorNode&)> backward_fn) {
    auto n = std::make_shared<detail::TensorNode>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    if (int64_t(n->data.size()) != shape_numel(n->shape))
        throw std::invalid_argument("tensor data size does not match shape");
    if (g_grad_enabled && backward_fn) {
        bool any = false;
        for (const auto& p : parents)
            if (p.defined() && p.requires_grad()) any = true;
        if (any) {
            n->requires_grad = true;
            n->parents = std::move(parents);
            n->backward_fn = std::move(backward_fn);
        }
    }
    return Tensor(std::move(n));
}

Tensor Tensor::zeros(std::vector<int64_t> shape, bool requires_grad) {
    std::vector<float> data(size_t(shape_numel(shape)), 0.0f);
    Tensor t = make_node(std::move(shape), std::move(data), {}, nullptr);
    t.node_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::full(std::vector<int64_t> shape, float value) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.node_->data.begin(), t.node_->data.end(), value);
    return t;
}

Tensor Tensor::from(std::vector<int64_t> shape, std::vector<float> data, bool requires_grad) {
    Tensor t = make_node(std::move(shape), std::move(data), {}, nullptr);
    t.node_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::scalar(float value) { return from({1}, {value}); }

Tensor Tensor::randn(std::vector<int64_t> shape, Rng& rng, float stddev, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& v : t.node_->data) v = float(rng.normal()) * stddev;
    return t;
}

int64_t Tensor::dim(int i) const {
    const int nd = ndim();
    if (i < 0) i += nd;
    if (i < 0 || i >= nd) throw std::invalid_argument("tensor dim index out of range");
    return node_->shape[size_t(i)];
}

float Tensor::item() const {
    if (numel() != 1) throw std::invalid_argument("item() requires a scalar tensor");
    return node_->data[0];
}

void Tensor::set_requires_grad(bool v) { node_->requires_grad = v; }

std::vector<float>& Tensor::grad() {
    if (node_->grad.empty()) node_->grad.assign(node_->data.size(), 0.0f);
    return node_->grad;
}

const std::vector<float>* Tensor::grad_if() const {
    return node_->grad.empty() ? nullptr : &node_->grad;
}

void Tensor::zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0f);
}

Tensor Tensor::detach() const {
    Tensor t = from(node_->shape, node_->data);
    return t;
}

Tensor Tensor::clone() const { return detach(); }

bool Tensor::all_finite() const {
    for (float v : node_->data)
        if (!std::isfinite(v)) return false;
    return true;
}

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw std::invalid_argument("backward requires a scalar loss");

    // topo order over the recorded graph; each node visited exactly once
    std::vector<detail::TensorNode*> topo;
    std::unordered_set<detail::TensorNode*> seen;
    std::vector<detail::TensorNode*> stack{loss.node_.get()};
    // iterative post-order DFS
    std::vector<std::pair<detail::TensorNode*, size_t>> frames;
    frames.emplace_back(loss.node_.get(), 0);
    seen.insert(loss.node_.get());
    while (!frames.empty()) {
        auto& [node, idx] = frames.back();
        if (idx < node->parents.size()) {
            detail::TensorNode* p = node->parents[idx].node_.get();
            ++idx;
            if (p && !seen.count(p)) {
                seen.insert(p);
                frames.emplace_back(p, 0);
            }
        } else {
            topo.push_back(node);
            frames.pop_back();
        }
    }

    // seed and walk in reverse topological order, accumulating additively
    loss.node_->grad.assign(1, 1.0f);
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        detail::TensorNode* node = *it;
        if (!node->backward_fn) continue;
        if (node->grad.empty()) node->grad.assign(node->data.size(), 0.0f);
        for (auto& p : node->parents) {
            if (p.defined() && p.requires_grad() && p.node_->grad.empty())
                p.node_->grad.assign(p.node_->data.size(), 0.0f);
        }
        node->backward_fn(*node);
    }
}

double finite_diff_check(const std::function<Tensor(const Tensor&)>& fn, Tensor point,
                         double eps) {
    if (eps <= 0.0) throw std::invalid_argument("finite_diff_check: eps must be positive");

    point.set_requires_grad(true);
    point.zero_grad();
    Tensor out = fn(point);
    if (out.numel() != 1) throw std::invalid_argument("finite_diff_check: fn must return a scalar");
    if (!out.all_finite()) throw NumericError("finite_diff_check: fn produced non-finite output");
    backward(out);
    std::vector<float> analytic = point.grad();

    double worst = 0.0;
    NoGradGuard ng;
    for (int64_t i = 0; i < point.numel(); ++i) {
        const float orig = point.data()[i];
        point.data()[i] = float(orig + eps);
        const double fp = double(fn(point).item());
        point.data()[i] = float(orig - eps);
        const double fm = double(fn(point).item());
        point.data()[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw NumericError("finite_diff_check: fn produced non-finite output");
        const double central = (fp - fm) / (2.0 * eps);
        const double a = double(analytic[size_t(i)]);
        const double denom = std::max({std::fabs(a), std::fabs(central), 1e-8});
        worst = std::max(worst, std::fabs(a - central) / denom);
    }
    return worst;
}

} // namespace prunelab
